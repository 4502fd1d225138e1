//! A small encoder-decoder transformer with two execution paths:
//!
//! * a **tape path** for differentiable teacher-forced scoring (one retained
//!   forward pass covers a whole candidate batch), and
//! * a **data path** for gradient-free autoregressive decoding with
//!   incremental self-attention caches.
//!
//! Both paths go through the row kernels in [`crate::graph::kernels`], so a
//! logit row computed while sampling is bit identical to the same row
//! computed on the tape. The acceptance suite leans on this: stage-one
//! accumulated log-probabilities must match stage-two scores.
//!
//! Activation retention is accounted on [`GradTape`]: `retained_forward_passes`
//! counts decoder scoring passes whose graph is kept for backward, and
//! `peak_retained_activation_scalars` tracks the largest number of
//! intermediate scalars alive on a tape at once.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunSeed;
use crate::error::{Error, Result};
use crate::graph::{kernels, Graph, NodeId, Tensor};
use crate::taskgen::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            vocab_size: 16,
            max_len: 32,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_len == 0
        {
            return Err(Error::InvalidDims("all dims must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidDims(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

impl SpecialIds {
    /// The id layout produced by `Vocab::synthetic`.
    pub fn standard() -> SpecialIds {
        SpecialIds { pad: 0, bos: 1, eos: 2 }
    }
}

/// Xavier-uniform bound for a `rows x cols` weight matrix.
pub fn init_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

fn attn_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Sinusoidal position row, shared by both execution paths.
pub fn positional_row(t: usize, d: usize) -> Vec<f64> {
    let mut row = vec![0.0; d];
    for (i, slot) in row.iter_mut().enumerate() {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
        *slot = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    row
}

/// The trainable weights plus the dims and special ids they were built for.
#[derive(Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub specials: SpecialIds,
    pub weights: BTreeMap<String, Tensor>,
    /// Gradient-free decode invocations (sampling, greedy, evaluation).
    pub decode_calls: AtomicU64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        ModelParams {
            dims: self.dims,
            specials: self.specials,
            weights: self.weights.clone(),
            decode_calls: AtomicU64::new(self.decode_calls.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.specials == other.specials && self.weights == other.weights
    }
}

fn weight_shapes(dims: &ModelDims) -> Vec<(String, usize, usize)> {
    let d = dims.d_model;
    let ff = dims.d_ff;
    let mut shapes = vec![("embed".to_string(), dims.vocab_size, d)];
    for l in 0..dims.n_enc_layers {
        let p = format!("enc{l}");
        shapes.push((format!("{p}.ln1.g"), 1, d));
        shapes.push((format!("{p}.ln1.b"), 1, d));
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.push((format!("{p}.attn.{w}"), d, d));
        }
        shapes.push((format!("{p}.ln2.g"), 1, d));
        shapes.push((format!("{p}.ln2.b"), 1, d));
        shapes.push((format!("{p}.ff.w1"), d, ff));
        shapes.push((format!("{p}.ff.b1"), 1, ff));
        shapes.push((format!("{p}.ff.w2"), ff, d));
        shapes.push((format!("{p}.ff.b2"), 1, d));
    }
    shapes.push(("enc_final.g".to_string(), 1, d));
    shapes.push(("enc_final.b".to_string(), 1, d));
    for l in 0..dims.n_dec_layers {
        let p = format!("dec{l}");
        shapes.push((format!("{p}.ln1.g"), 1, d));
        shapes.push((format!("{p}.ln1.b"), 1, d));
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.push((format!("{p}.self.{w}"), d, d));
        }
        shapes.push((format!("{p}.ln2.g"), 1, d));
        shapes.push((format!("{p}.ln2.b"), 1, d));
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.push((format!("{p}.cross.{w}"), d, d));
        }
        shapes.push((format!("{p}.ln3.g"), 1, d));
        shapes.push((format!("{p}.ln3.b"), 1, d));
        shapes.push((format!("{p}.ff.w1"), d, ff));
        shapes.push((format!("{p}.ff.b1"), 1, ff));
        shapes.push((format!("{p}.ff.w2"), ff, d));
        shapes.push((format!("{p}.ff.b2"), 1, d));
    }
    shapes.push(("dec_final.g".to_string(), 1, d));
    shapes.push(("dec_final.b".to_string(), 1, d));
    shapes
}

/// Initializes weights with a scaled uniform draw, deterministic in `seed`.
/// Layer-norm gains start at 1, all biases at 0, and the pad embedding row
/// is zeroed.
pub fn init_model(dims: ModelDims, specials: SpecialIds, seed: &RunSeed) -> Result<ModelParams> {
    dims.validate()?;
    let mut weights = BTreeMap::new();
    for (name, rows, cols) in weight_shapes(&dims) {
        let t = if name.ends_with(".g") {
            Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
        } else if name.ends_with(".b") || name.contains(".b1") || name.contains(".b2") {
            Tensor::zeros(rows, cols)
        } else {
            let bound = init_bound(rows, cols);
            let mut rng = seed.derive("init", 0).derive(&name, 0).rng();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        weights.insert(name, t);
    }
    let embed = weights.get_mut("embed").expect("embed weight");
    for v in embed.row_mut(specials.pad) {
        *v = 0.0;
    }
    Ok(ModelParams {
        dims,
        specials,
        weights,
        decode_calls: AtomicU64::new(0),
    })
}

/// Accumulated gradients plus the activation-retention counters.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    grads: BTreeMap<String, Tensor>,
    pub retained_forward_passes: u64,
    pub peak_retained_activation_scalars: u64,
    pub encoder_calls: u64,
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape::default()
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor> {
        &self.grads
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn accumulate(&mut self, partial: BTreeMap<String, Tensor>) {
        for (name, g) in partial {
            match self.grads.entry(name) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    for (o, &v) in e.get_mut().data.iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
            }
        }
    }

    pub fn set_grad(&mut self, name: &str, g: Tensor) {
        self.grads.insert(name.to_string(), g);
    }

    pub fn note_retained_scalars(&mut self, scalars: u64) {
        self.peak_retained_activation_scalars =
            self.peak_retained_activation_scalars.max(scalars);
    }

    pub fn add_forward_pass(&mut self) {
        self.retained_forward_passes += 1;
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    /// Clears gradients and resets every counter.
    pub fn zero(&mut self) {
        self.grads.clear();
        self.retained_forward_passes = 0;
        self.peak_retained_activation_scalars = 0;
        self.encoder_calls = 0;
    }
}

/// Runs backward from `loss` and folds the result into the tape, including
/// the retained-scalar peak of this graph.
pub fn backward_into_tape(graph: &Graph, loss: NodeId, tape: &mut GradTape) {
    tape.note_retained_scalars(graph.retained_scalars());
    let grads = graph.backward(loss);
    tape.accumulate(grads);
}

/// Differentiable handles produced by teacher-forced scoring of one target.
#[derive(Debug, Clone, Copy)]
pub struct TokenScores {
    /// `[n, 1]` node: log p(y_t | y_<t, x) per position.
    pub token_logprobs: NodeId,
    /// Scalar node: their sum.
    pub seq_logprob: NodeId,
}

/// Handles to the parameter leaves loaded onto one graph.
pub struct TapeWeights {
    ids: BTreeMap<String, NodeId>,
}

/// Flattened decoder batch: concatenated input rows plus per-item layout.
#[derive(Default)]
struct DecBatch {
    dec_inputs: Vec<TokenId>,
    positions: Vec<usize>,
    offsets: Vec<usize>,
    lens: Vec<usize>,
    encs: Vec<NodeId>,
}

impl TapeWeights {
    fn get(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("missing weight {name}"))
    }
}

impl ModelParams {
    pub fn weight(&self, name: &str) -> &Tensor {
        self.weights.get(name).unwrap_or_else(|| panic!("missing weight {name}"))
    }

    fn sqrt_d(&self) -> f64 {
        (self.dims.d_model as f64).sqrt()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.dims.max_len {
            return Err(Error::LengthOverflow {
                len,
                max_len: self.dims.max_len,
            });
        }
        Ok(())
    }

    fn load_params(&self, g: &mut Graph) -> TapeWeights {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.weights {
            ids.insert(name.clone(), g.param(name, t.clone()));
        }
        TapeWeights { ids }
    }

    fn embed_on_tape(&self, g: &mut Graph, w: &TapeWeights, tokens: &[TokenId], positions: &[usize]) -> NodeId {
        let d = self.dims.d_model;
        let emb = g.gather_rows(w.get("embed"), tokens.to_vec());
        let scaled = g.affine(emb, self.sqrt_d(), 0.0);
        let mut pos = Tensor::zeros(tokens.len(), d);
        for (r, &p) in positions.iter().enumerate() {
            pos.row_mut(r).copy_from_slice(&positional_row(p, d));
        }
        let pos = g.leaf(pos);
        g.add(scaled, pos)
    }

    /// Multi-head attention on the tape. `queries`/`keys`/`values` are
    /// `[n, d]`; `allowed[r]` limits row `r` of the scores (causal masking).
    fn attention_on_tape(
        &self,
        g: &mut Graph,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        wo: NodeId,
        allowed: Option<Vec<usize>>,
    ) -> NodeId {
        let dh = self.dims.head_dim();
        let mut heads = Vec::with_capacity(self.dims.n_heads);
        for h in 0..self.dims.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scaled = g.affine(scores, attn_scale(dh), 0.0);
            let probs = g.softmax_rows(scaled, allowed.clone());
            heads.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(heads);
        g.matmul(ctx, wo)
    }

    fn ff_on_tape(&self, g: &mut Graph, w: &TapeWeights, prefix: &str, x: NodeId) -> NodeId {
        let h = g.matmul(x, w.get(&format!("{prefix}.ff.w1")));
        let h = g.add_row_broadcast(h, w.get(&format!("{prefix}.ff.b1")));
        let h = g.relu(h);
        let h = g.matmul(h, w.get(&format!("{prefix}.ff.w2")));
        g.add_row_broadcast(h, w.get(&format!("{prefix}.ff.b2")))
    }

    fn encoder_body(&self, g: &mut Graph, w: &TapeWeights, x: &[TokenId]) -> NodeId {
        let positions: Vec<usize> = (0..x.len()).collect();
        let mut h = self.embed_on_tape(g, w, x, &positions);
        for l in 0..self.dims.n_enc_layers {
            let p = format!("enc{l}");
            let ln1 = {
                let gain = w.get(&format!("{p}.ln1.g"));
                let bias = w.get(&format!("{p}.ln1.b"));
                g.layer_norm(h, gain, bias)
            };
            let q = g.matmul(ln1, w.get(&format!("{p}.attn.wq")));
            let k = g.matmul(ln1, w.get(&format!("{p}.attn.wk")));
            let v = g.matmul(ln1, w.get(&format!("{p}.attn.wv")));
            let attn = self.attention_on_tape(g, q, k, v, w.get(&format!("{p}.attn.wo")), None);
            h = g.add(h, attn);
            let ln2 = {
                let gain = w.get(&format!("{p}.ln2.g"));
                let bias = w.get(&format!("{p}.ln2.b"));
                g.layer_norm(h, gain, bias)
            };
            let ff = self.ff_on_tape(g, w, &p, ln2);
            h = g.add(h, ff);
        }
        let gain = w.get("enc_final.g");
        let bias = w.get("enc_final.b");
        g.layer_norm(h, gain, bias)
    }

    /// Encodes one source on the tape. Counts toward `encoder_calls`, not
    /// toward retained forward passes (those count decoder scoring passes).
    pub fn encode_on_tape(
        &self,
        g: &mut Graph,
        w: &TapeWeights,
        tape: &mut GradTape,
        x: &[TokenId],
    ) -> Result<NodeId> {
        self.check_len(x.len())?;
        tape.encoder_calls += 1;
        Ok(self.encoder_body(g, w, x))
    }

    /// Loads weights onto a graph; callers hold the handle for the batch.
    pub fn tape_weights(&self, g: &mut Graph) -> TapeWeights {
        self.load_params(g)
    }

    /// Decoder forward over a flattened batch of decoder-input rows,
    /// returning the `[R, vocab]` logits node. Position-wise work is batched
    /// across rows; attention runs per candidate. Cross-attention
    /// keys/values are built once per distinct encoder state.
    fn decoder_forward_on_tape(
        &self,
        g: &mut Graph,
        w: &TapeWeights,
        batch: &DecBatch,
    ) -> NodeId {
        let DecBatch {
            dec_inputs,
            positions,
            offsets,
            lens,
            encs,
        } = batch;
        // Per-row causal mask, relative to each candidate's own rows.
        let causal: Vec<usize> = lens.iter().flat_map(|&n| 1..=n).collect();

        let mut h = self.embed_on_tape(g, w, dec_inputs, positions);
        for l in 0..self.dims.n_dec_layers {
            let p = format!("dec{l}");
            // Cross K/V once per distinct encoder state.
            let wk_cross = w.get(&format!("{p}.cross.wk"));
            let wv_cross = w.get(&format!("{p}.cross.wv"));
            let mut cross_kv: BTreeMap<NodeId, (NodeId, NodeId)> = BTreeMap::new();
            for enc in encs {
                cross_kv.entry(*enc).or_insert_with(|| {
                    (g.matmul(*enc, wk_cross), g.matmul(*enc, wv_cross))
                });
            }

            let ln1 = {
                let gain = w.get(&format!("{p}.ln1.g"));
                let bias = w.get(&format!("{p}.ln1.b"));
                g.layer_norm(h, gain, bias)
            };
            let q = g.matmul(ln1, w.get(&format!("{p}.self.wq")));
            let k = g.matmul(ln1, w.get(&format!("{p}.self.wk")));
            let v = g.matmul(ln1, w.get(&format!("{p}.self.wv")));
            let dh = self.dims.head_dim();
            let mut ctx_parts = Vec::with_capacity(offsets.len());
            for (&off, &n) in offsets.iter().zip(lens) {
                let qi = g.slice_rows(q, off, n);
                let ki = g.slice_rows(k, off, n);
                let vi = g.slice_rows(v, off, n);
                let allowed: Vec<usize> = causal[off..off + n].to_vec();
                let mut heads = Vec::with_capacity(self.dims.n_heads);
                for hd in 0..self.dims.n_heads {
                    let qh = g.slice_cols(qi, hd * dh, dh);
                    let kh = g.slice_cols(ki, hd * dh, dh);
                    let vh = g.slice_cols(vi, hd * dh, dh);
                    let scores = g.matmul_nt(qh, kh);
                    let scaled = g.affine(scores, attn_scale(dh), 0.0);
                    let probs = g.softmax_rows(scaled, Some(allowed.clone()));
                    heads.push(g.matmul(probs, vh));
                }
                ctx_parts.push(g.concat_cols(heads));
            }
            let ctx = g.concat_rows(ctx_parts);
            let attn = g.matmul(ctx, w.get(&format!("{p}.self.wo")));
            h = g.add(h, attn);

            let ln2 = {
                let gain = w.get(&format!("{p}.ln2.g"));
                let bias = w.get(&format!("{p}.ln2.b"));
                g.layer_norm(h, gain, bias)
            };
            let q2 = g.matmul(ln2, w.get(&format!("{p}.cross.wq")));
            let mut ctx2_parts = Vec::with_capacity(offsets.len());
            for ((&off, &n), enc) in offsets.iter().zip(lens).zip(encs) {
                let (kc, vc) = cross_kv[enc];
                let qi = g.slice_rows(q2, off, n);
                let mut heads = Vec::with_capacity(self.dims.n_heads);
                for hd in 0..self.dims.n_heads {
                    let qh = g.slice_cols(qi, hd * dh, dh);
                    let kh = g.slice_cols(kc, hd * dh, dh);
                    let vh = g.slice_cols(vc, hd * dh, dh);
                    let scores = g.matmul_nt(qh, kh);
                    let scaled = g.affine(scores, attn_scale(dh), 0.0);
                    let probs = g.softmax_rows(scaled, None);
                    heads.push(g.matmul(probs, vh));
                }
                ctx2_parts.push(g.concat_cols(heads));
            }
            let ctx2 = g.concat_rows(ctx2_parts);
            let attn2 = g.matmul(ctx2, w.get(&format!("{p}.cross.wo")));
            h = g.add(h, attn2);

            let ln3 = {
                let gain = w.get(&format!("{p}.ln3.g"));
                let bias = w.get(&format!("{p}.ln3.b"));
                g.layer_norm(h, gain, bias)
            };
            let ff = self.ff_on_tape(g, w, &p, ln3);
            h = g.add(h, ff);
        }
        let out = {
            let gain = w.get("dec_final.g");
            let bias = w.get("dec_final.b");
            g.layer_norm(h, gain, bias)
        };
        g.matmul_nt(out, w.get("embed"))
    }

    /// Teacher-forced scoring of candidate targets against encoder states,
    /// all in one retained pass.
    pub fn score_batch_on_tape(
        &self,
        g: &mut Graph,
        w: &TapeWeights,
        tape: &mut GradTape,
        items: &[(NodeId, &[TokenId])],
    ) -> Result<Vec<TokenScores>> {
        assert!(!items.is_empty(), "empty scoring batch");
        let bos = self.specials.bos;
        let mut batch = DecBatch::default();
        let mut targets: Vec<TokenId> = Vec::new();
        for (enc, y) in items {
            assert!(!y.is_empty(), "empty target in scoring batch");
            self.check_len(y.len())?;
            batch.offsets.push(batch.dec_inputs.len());
            batch.lens.push(y.len());
            batch.encs.push(*enc);
            batch.dec_inputs.push(bos);
            batch.dec_inputs.extend_from_slice(&y[..y.len() - 1]);
            batch.positions.extend(0..y.len());
            targets.extend_from_slice(y);
        }

        let logits = self.decoder_forward_on_tape(g, w, &batch);
        let logprobs = g.log_softmax_rows(logits);
        let picked = g.pick_per_row(logprobs, targets);

        let scores = batch
            .offsets
            .iter()
            .zip(&batch.lens)
            .map(|(&off, &n)| TokenScores {
                token_logprobs: g.slice_rows(picked, off, n),
                seq_logprob: g.sum_range(picked, off, n),
            })
            .collect();

        tape.add_forward_pass();
        tape.note_retained_scalars(g.retained_scalars());
        Ok(scores)
    }

    /// One retained teacher-forced pass over decoder-input prefixes (BOS
    /// included by the caller), returning per item the last position's
    /// logits row and its log-softmax row. Used by the naive sampler, which
    /// counts one retained pass per decoding step itself.
    pub fn decode_last_logits_on_tape(
        &self,
        g: &mut Graph,
        w: &TapeWeights,
        items: &[(NodeId, &[TokenId])],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        assert!(!items.is_empty(), "empty decode batch");
        let mut batch = DecBatch::default();
        for (enc, dec_input) in items {
            assert!(!dec_input.is_empty(), "decoder input must include BOS");
            self.check_len(dec_input.len())?;
            batch.offsets.push(batch.dec_inputs.len());
            batch.lens.push(dec_input.len());
            batch.encs.push(*enc);
            batch.dec_inputs.extend_from_slice(dec_input);
            batch.positions.extend(0..dec_input.len());
        }
        let logits = self.decoder_forward_on_tape(g, w, &batch);
        Ok(batch
            .offsets
            .iter()
            .zip(&batch.lens)
            .map(|(&off, &n)| {
                let row = g.slice_rows(logits, off + n - 1, 1);
                let lp = g.log_softmax_rows(row);
                (row, lp)
            })
            .collect())
    }

    /// Differentiable per-token log-probabilities of `y_full` given `x`,
    /// in a single retained forward pass.
    pub fn score_parallel(
        &self,
        g: &mut Graph,
        tape: &mut GradTape,
        x: &[TokenId],
        y_full: &[TokenId],
    ) -> Result<TokenScores> {
        debug_assert_eq!(y_full.last(), Some(&self.specials.eos), "target must end with EOS");
        let w = self.load_params(g);
        let enc = self.encode_on_tape(g, &w, tape, x)?;
        let scores = self.score_batch_on_tape(g, &w, tape, &[(enc, y_full)])?;
        Ok(scores[0])
    }

    // ---- gradient-free path -------------------------------------------------

    /// Encoder output as plain data (no retained state).
    pub fn encode(&self, x: &[TokenId]) -> Result<Tensor> {
        self.check_len(x.len())?;
        let mut scratch = Graph::new();
        let w = self.load_params(&mut scratch);
        let out = self.encoder_body(&mut scratch, &w, x);
        Ok(scratch.value(out).clone())
    }

    /// Cross-attention keys/values per decoder layer for one encoder output.
    pub fn cross_ctx(&self, enc: &Tensor) -> Vec<(Tensor, Tensor)> {
        let d = self.dims.d_model;
        (0..self.dims.n_dec_layers)
            .map(|l| {
                let wk = self.weight(&format!("dec{l}.cross.wk"));
                let wv = self.weight(&format!("dec{l}.cross.wv"));
                let mut k = Tensor::zeros(enc.rows, d);
                let mut v = Tensor::zeros(enc.rows, d);
                for r in 0..enc.rows {
                    kernels::row_times_matrix(enc.row(r), &wk.data, d, k.row_mut(r));
                    kernels::row_times_matrix(enc.row(r), &wv.data, d, v.row_mut(r));
                }
                (k, v)
            })
            .collect()
    }
}

/// Incremental decoder state for one candidate sequence.
pub struct RowDecoder {
    /// Per layer: cached self-attention K and V rows.
    cache: Vec<(Tensor, Tensor)>,
    t: usize,
}

impl RowDecoder {
    pub fn new(model: &ModelParams) -> RowDecoder {
        let d = model.dims.d_model;
        RowDecoder {
            cache: (0..model.dims.n_dec_layers)
                .map(|_| (Tensor::zeros(0, d), Tensor::zeros(0, d)))
                .collect(),
            t: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.t
    }

    /// Feeds `token_in` at the current position and returns the next-token
    /// logits. Arithmetic matches the tape path row for row.
    pub fn step(
        &mut self,
        model: &ModelParams,
        cross: &[(Tensor, Tensor)],
        token_in: TokenId,
    ) -> Vec<f64> {
        let d = model.dims.d_model;
        let dh = model.dims.head_dim();
        let n_heads = model.dims.n_heads;
        let sqrt_d = model.sqrt_d();
        let pos = positional_row(self.t, d);
        let emb = model.weight("embed");
        let mut x: Vec<f64> = emb
            .row(token_in)
            .iter()
            .zip(&pos)
            .map(|(&e, &p)| e * sqrt_d + p)
            .collect();

        let mut ln = vec![0.0; d];
        for (l, (kcr, vcr)) in cross.iter().enumerate() {
            let p = format!("dec{l}");
            // self attention
            kernels::layer_norm_row(
                &x,
                model.weight(&format!("{p}.ln1.g")).row(0),
                model.weight(&format!("{p}.ln1.b")).row(0),
                &mut ln,
            );
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            kernels::row_times_matrix(&ln, &model.weight(&format!("{p}.self.wq")).data, d, &mut q);
            kernels::row_times_matrix(&ln, &model.weight(&format!("{p}.self.wk")).data, d, &mut k);
            kernels::row_times_matrix(&ln, &model.weight(&format!("{p}.self.wv")).data, d, &mut v);
            {
                let (kc, vc) = &mut self.cache[l];
                kc.data.extend_from_slice(&k);
                kc.rows += 1;
                vc.data.extend_from_slice(&v);
                vc.rows += 1;
            }
            let (kc, vc) = &self.cache[l];
            let n_ctx = kc.rows;
            let mut ctx = vec![0.0; d];
            let mut scores = vec![0.0; n_ctx];
            let mut probs = vec![0.0; n_ctx];
            for hd in 0..n_heads {
                let h0 = hd * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(&q[h0..h0 + dh], &kc.row(j)[h0..h0 + dh]) * attn_scale(dh);
                }
                kernels::softmax_row(&scores, n_ctx, &mut probs);
                for (j, &pr) in probs.iter().enumerate() {
                    let vrow = &vc.row(j)[h0..h0 + dh];
                    for (o, &vv) in ctx[h0..h0 + dh].iter_mut().zip(vrow) {
                        *o += pr * vv;
                    }
                }
            }
            let mut attn = vec![0.0; d];
            kernels::row_times_matrix(&ctx, &model.weight(&format!("{p}.self.wo")).data, d, &mut attn);
            for (o, &a) in x.iter_mut().zip(&attn) {
                *o += a;
            }

            // cross attention
            kernels::layer_norm_row(
                &x,
                model.weight(&format!("{p}.ln2.g")).row(0),
                model.weight(&format!("{p}.ln2.b")).row(0),
                &mut ln,
            );
            let mut q2 = vec![0.0; d];
            kernels::row_times_matrix(&ln, &model.weight(&format!("{p}.cross.wq")).data, d, &mut q2);
            let src = kcr.rows;
            let mut ctx2 = vec![0.0; d];
            let mut scores2 = vec![0.0; src];
            let mut probs2 = vec![0.0; src];
            for hd in 0..n_heads {
                let h0 = hd * dh;
                for (j, s) in scores2.iter_mut().enumerate() {
                    *s = kernels::dot(&q2[h0..h0 + dh], &kcr.row(j)[h0..h0 + dh]) * attn_scale(dh);
                }
                kernels::softmax_row(&scores2, src, &mut probs2);
                for (j, &pr) in probs2.iter().enumerate() {
                    let vrow = &vcr.row(j)[h0..h0 + dh];
                    for (o, &vv) in ctx2[h0..h0 + dh].iter_mut().zip(vrow) {
                        *o += pr * vv;
                    }
                }
            }
            let mut attn2 = vec![0.0; d];
            kernels::row_times_matrix(&ctx2, &model.weight(&format!("{p}.cross.wo")).data, d, &mut attn2);
            for (o, &a) in x.iter_mut().zip(&attn2) {
                *o += a;
            }

            // feed-forward
            kernels::layer_norm_row(
                &x,
                model.weight(&format!("{p}.ln3.g")).row(0),
                model.weight(&format!("{p}.ln3.b")).row(0),
                &mut ln,
            );
            let ff = model.dims.d_ff;
            let mut hidden = vec![0.0; ff];
            kernels::row_times_matrix(&ln, &model.weight(&format!("{p}.ff.w1")).data, ff, &mut hidden);
            for (h, &b) in hidden.iter_mut().zip(model.weight(&format!("{p}.ff.b1")).row(0)) {
                *h += b;
                if *h < 0.0 {
                    *h = 0.0;
                }
            }
            let mut out = vec![0.0; d];
            kernels::row_times_matrix(&hidden, &model.weight(&format!("{p}.ff.w2")).data, d, &mut out);
            for ((o, &b), &u) in x
                .iter_mut()
                .zip(model.weight(&format!("{p}.ff.b2")).row(0))
                .zip(&out)
            {
                *o += u + b;
            }
        }

        kernels::layer_norm_row(
            &x,
            model.weight("dec_final.g").row(0),
            model.weight("dec_final.b").row(0),
            &mut ln,
        );
        let emb = model.weight("embed");
        let mut logits = vec![0.0; model.dims.vocab_size];
        for (vid, slot) in logits.iter_mut().enumerate() {
            *slot = kernels::dot(&ln, emb.row(vid));
        }
        self.t += 1;
        logits
    }
}

/// Logits plus the sampling temperature for one decoding step.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub logits: Vec<f64>,
    pub tau: f64,
}

/// Temperature-scales, truncates to the `top_k` highest logits (ties broken
/// toward the lower token id), renormalizes and samples one token. The
/// returned probability is under the untruncated temperature-scaled
/// distribution.
pub fn sample_step(
    dist: &StepDistribution,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> (TokenId, f64) {
    assert!(dist.tau > 0.0, "temperature must be positive");
    assert!(top_k >= 1, "top_k must be >= 1");
    let n = dist.logits.len();
    let scaled: Vec<f64> = dist.logits.iter().map(|&z| z / dist.tau).collect();
    let mut probs = vec![0.0; n];
    kernels::softmax_row(&scaled, n, &mut probs);

    let k = top_k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dist.logits[b]
            .partial_cmp(&dist.logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kept = &order[..k];
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for &i in kept {
        acc += probs[i];
        if target < acc {
            return (i, probs[i]);
        }
    }
    let last = *kept.last().expect("top_k >= 1");
    (last, probs[last])
}

/// One sampled (or greedy) candidate sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSeq {
    /// Generated tokens, including EOS when it was produced.
    pub tokens: Vec<TokenId>,
    /// Per-step probability of the chosen token under the untruncated
    /// temperature-scaled distribution.
    pub step_probs: Vec<f64>,
    /// True when the sequence hit `max_decode_len` without producing EOS.
    pub truncated: bool,
}

impl ModelParams {
    /// Autoregressive sampling with no retained gradient state.
    pub fn sample_autoregressive(
        &self,
        x: &[TokenId],
        tau: f64,
        top_k: usize,
        max_decode_len: usize,
        seed: &RunSeed,
    ) -> Result<SampledSeq> {
        let enc = self.encode(x)?;
        let cross = self.cross_ctx(&enc);
        Ok(self.sample_with_ctx(&cross, tau, top_k, max_decode_len, &mut seed.rng()))
    }

    /// Sampling core against precomputed cross-attention state.
    pub fn sample_with_ctx(
        &self,
        cross: &[(Tensor, Tensor)],
        tau: f64,
        top_k: usize,
        max_decode_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> SampledSeq {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let mut dec = RowDecoder::new(self);
        let mut tokens = Vec::new();
        let mut step_probs = Vec::new();
        let mut input = self.specials.bos;
        let mut truncated = true;
        for _ in 0..max_decode_len {
            let logits = dec.step(self, cross, input);
            let (tok, p) = sample_step(&StepDistribution { logits, tau }, top_k, rng);
            tokens.push(tok);
            step_probs.push(p);
            if tok == self.specials.eos {
                truncated = false;
                break;
            }
            input = tok;
        }
        SampledSeq {
            tokens,
            step_probs,
            truncated,
        }
    }

    /// Argmax decoding, ties toward the lower token id; probabilities are
    /// reported under the plain (temperature 1) distribution.
    pub fn greedy_decode(&self, x: &[TokenId], max_decode_len: usize) -> Result<SampledSeq> {
        let enc = self.encode(x)?;
        let cross = self.cross_ctx(&enc);
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let mut dec = RowDecoder::new(self);
        let mut tokens = Vec::new();
        let mut step_probs = Vec::new();
        let mut input = self.specials.bos;
        let mut truncated = true;
        let n = self.dims.vocab_size;
        let mut probs = vec![0.0; n];
        for _ in 0..max_decode_len {
            let logits = dec.step(self, &cross, input);
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            kernels::softmax_row(&logits, n, &mut probs);
            tokens.push(best);
            step_probs.push(probs[best]);
            if best == self.specials.eos {
                truncated = false;
                break;
            }
            input = best;
        }
        Ok(SampledSeq {
            tokens,
            step_probs,
            truncated,
        })
    }

    /// Independent autoregressive oracle: accumulates `ln p(y_t | y_<t, x)`
    /// step by step through the incremental decoder (no tape involved).
    pub fn forced_logprob(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let enc = self.encode(x)?;
        let cross = self.cross_ctx(&enc);
        let mut dec = RowDecoder::new(self);
        let mut input = self.specials.bos;
        let n = self.dims.vocab_size;
        let mut buf = vec![0.0; n];
        let mut acc = 0.0;
        for &tok in y {
            let logits = dec.step(self, &cross, input);
            kernels::log_softmax_row(&logits, &mut buf);
            acc += buf[tok];
            input = tok;
        }
        Ok(acc)
    }
}

/// Optimizer mode: adaptive moment scaling by default, plain descent for
/// analytic update tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Plain,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter updater owning the optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub mode: UpdateMode,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(mode: UpdateMode) -> Optimizer {
        Optimizer {
            mode,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the tape's accumulated gradients, then zeros
    /// the tape and resets its counters. A non-finite gradient aborts before
    /// any parameter is touched.
    pub fn apply_update(
        &mut self,
        params: &mut ModelParams,
        tape: &mut GradTape,
        learning_rate: f64,
    ) -> Result<()> {
        for (name, g) in tape.grads() {
            if !g.all_finite() {
                return Err(Error::NanGradient(name.clone()));
            }
        }
        match self.mode {
            UpdateMode::Plain => {
                for (name, w) in params.weights.iter_mut() {
                    if let Some(g) = tape.grad(name) {
                        for (o, &gv) in w.data.iter_mut().zip(&g.data) {
                            *o -= learning_rate * gv;
                        }
                    }
                }
            }
            UpdateMode::Adam => {
                self.step += 1;
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (name, w) in params.weights.iter_mut() {
                    let zero = Tensor::zeros(w.rows, w.cols);
                    let g = tape.grad(name).unwrap_or(&zero);
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(w.rows, w.cols));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(w.rows, w.cols));
                    for i in 0..w.data.len() {
                        let gv = g.data[i];
                        m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gv;
                        v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        let mh = m.data[i] / bc1;
                        let vh = v.data[i] / bc2;
                        w.data[i] -= learning_rate * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        tape.zero();
        Ok(())
    }
}
