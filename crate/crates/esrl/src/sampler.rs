//! Two-stage sampling: gradient-free autoregressive candidate generation,
//! batch restructuring, and one gradient-bearing parallel scoring pass.
//!
//! The naive sampler is kept as the comparison baseline: it retains a
//! forward pass per decoding step, which is exactly the cost profile the
//! two-stage split removes.

use crate::config::RunSeed;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::{sample_step, GradTape, ModelParams, SampledSeq, StepDistribution};
use crate::taskgen::TokenId;

/// Exploration result for one input.
#[derive(Debug)]
pub struct SampleSet {
    pub input_id: usize,
    pub source: Vec<TokenId>,
    pub candidates: Vec<SampledSeq>,
    /// Sampling size m; always equals `candidates.len()`.
    pub m: usize,
    pub tau: f64,
    /// Differentiable sequence log-probabilities, one per candidate, living
    /// on the batch graph. Scored at temperature 1 over the full softmax.
    pub seq_logprobs: Vec<NodeId>,
    /// Filled by the trainer once the reward metric is applied.
    pub rewards: Vec<f64>,
}

/// Sampling output for one batch: the graph carrying the differentiable
/// handles plus the per-input sample sets.
pub struct BatchSample {
    pub graph: Graph,
    pub sets: Vec<SampleSet>,
}

/// Repeats each input's state `k[i]` times, contiguous and order-preserving.
/// Cloning a tape handle does not rerun the encoder, so the encoder cost
/// stays at one call per input regardless of the candidate count.
pub fn restructure_batch<T: Clone>(states: &[T], k: &[usize]) -> Vec<T> {
    assert_eq!(states.len(), k.len(), "one size per input");
    let total: usize = k.iter().sum();
    let mut out = Vec::with_capacity(total);
    for (state, &ki) in states.iter().zip(k) {
        assert!(ki >= 1, "sampling sizes must be >= 1");
        for _ in 0..ki {
            out.push(state.clone());
        }
    }
    out
}

fn candidate_rng(seed: &RunSeed, input_id: usize, cand: usize) -> rand_chacha::ChaCha8Rng {
    seed.derive("input", input_id as u64)
        .derive("cand", cand as u64)
        .rng()
}

/// Stage one draws `k[i]` candidates per input at temperature `tau[i]` with
/// top-k truncation and no gradient state; stage two scores every candidate
/// teacher-forced in a single retained pass over the restructured batch.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_sample(
    model: &ModelParams,
    inputs: &[(usize, Vec<TokenId>)],
    k: &[usize],
    tau: &[f64],
    top_k: usize,
    max_decode_len: usize,
    tape: &mut GradTape,
    seed: &RunSeed,
) -> Result<BatchSample> {
    assert_eq!(inputs.len(), k.len());
    assert_eq!(inputs.len(), tau.len());

    // Stage 1: autoregressive sampling, plain data only.
    let mut all_candidates: Vec<Vec<SampledSeq>> = Vec::with_capacity(inputs.len());
    for ((id, x), (&ki, &ti)) in inputs.iter().zip(k.iter().zip(tau)) {
        let enc = model.encode(x)?;
        let cross = model.cross_ctx(&enc);
        let mut cands = Vec::with_capacity(ki);
        for j in 0..ki {
            let mut rng = candidate_rng(seed, *id, j);
            cands.push(model.sample_with_ctx(&cross, ti, top_k, max_decode_len, &mut rng));
        }
        all_candidates.push(cands);
    }

    // Stage 2: one differentiable pass over the restructured batch.
    let mut graph = Graph::new();
    let weights = model.tape_weights(&mut graph);
    let mut enc_nodes = Vec::with_capacity(inputs.len());
    for (_, x) in inputs {
        enc_nodes.push(model.encode_on_tape(&mut graph, &weights, tape, x)?);
    }
    let expanded = restructure_batch(&enc_nodes, k);
    let flat: Vec<(NodeId, &[TokenId])> = expanded
        .iter()
        .zip(all_candidates.iter().flatten())
        .map(|(&enc, cand)| (enc, cand.tokens.as_slice()))
        .collect();
    let scores = model.score_batch_on_tape(&mut graph, &weights, tape, &flat)?;

    let mut sets = Vec::with_capacity(inputs.len());
    let mut cursor = 0;
    for (((id, x), cands), &ti) in inputs.iter().zip(all_candidates).zip(tau) {
        let m = cands.len();
        let seq_logprobs = scores[cursor..cursor + m]
            .iter()
            .map(|s| s.seq_logprob)
            .collect();
        cursor += m;
        sets.push(SampleSet {
            input_id: *id,
            source: x.clone(),
            candidates: cands,
            m,
            tau: ti,
            seq_logprobs,
            rewards: Vec::new(),
        });
    }
    Ok(BatchSample { graph, sets })
}

/// Conventional sampling: every decoding step runs teacher-forced over the
/// current prefixes with gradient state retained, so
/// `retained_forward_passes` grows with the longest candidate. The
/// stochastic process is identical to [`two_stage_sample`] under the same
/// seed.
#[allow(clippy::too_many_arguments)]
pub fn naive_sample(
    model: &ModelParams,
    inputs: &[(usize, Vec<TokenId>)],
    k: &[usize],
    tau: &[f64],
    top_k: usize,
    max_decode_len: usize,
    tape: &mut GradTape,
    seed: &RunSeed,
) -> Result<BatchSample> {
    assert_eq!(inputs.len(), k.len());
    assert_eq!(inputs.len(), tau.len());

    let mut graph = Graph::new();
    let weights = model.tape_weights(&mut graph);
    let mut enc_nodes = Vec::with_capacity(inputs.len());
    for (_, x) in inputs {
        enc_nodes.push(model.encode_on_tape(&mut graph, &weights, tape, x)?);
    }

    struct Row {
        input_idx: usize,
        tau: f64,
        rng: rand_chacha::ChaCha8Rng,
        tokens: Vec<TokenId>,
        step_probs: Vec<f64>,
        logprob_nodes: Vec<NodeId>,
        done: bool,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (i, ((id, _), &ki)) in inputs.iter().zip(k).enumerate() {
        for j in 0..ki {
            rows.push(Row {
                input_idx: i,
                tau: tau[i],
                rng: candidate_rng(seed, *id, j),
                tokens: Vec::new(),
                step_probs: Vec::new(),
                logprob_nodes: Vec::new(),
                done: false,
            });
        }
    }

    let bos = model.specials.bos;
    let eos = model.specials.eos;
    for _step in 0..max_decode_len {
        let alive: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.done)
            .map(|(i, _)| i)
            .collect();
        if alive.is_empty() {
            break;
        }
        // Teacher-forced pass over every alive prefix; the graph of this
        // step stays retained, which is the whole point of this baseline.
        let prefixes: Vec<Vec<TokenId>> = alive
            .iter()
            .map(|&ri| {
                let mut p = Vec::with_capacity(rows[ri].tokens.len() + 1);
                p.push(bos);
                p.extend_from_slice(&rows[ri].tokens);
                p
            })
            .collect();
        let items: Vec<(NodeId, &[TokenId])> = alive
            .iter()
            .zip(&prefixes)
            .map(|(&ri, p)| (enc_nodes[rows[ri].input_idx], p.as_slice()))
            .collect();
        let last_logprobs = model.decode_last_logits_on_tape(&mut graph, &weights, &items)?;
        tape.add_forward_pass();
        tape.note_retained_scalars(graph.retained_scalars());

        for (&ri, (logits_node, logprob_row)) in alive.iter().zip(last_logprobs) {
            let row = &mut rows[ri];
            let logits = graph.value(logits_node).data.clone();
            let (tok, p) = sample_step(
                &StepDistribution {
                    logits,
                    tau: row.tau,
                },
                top_k,
                &mut row.rng,
            );
            let picked = graph.pick_per_row(logprob_row, vec![tok]);
            row.tokens.push(tok);
            row.step_probs.push(p);
            row.logprob_nodes.push(picked);
            if tok == eos {
                row.done = true;
            }
        }
    }

    let mut sets = Vec::with_capacity(inputs.len());
    let mut iter = rows.into_iter();
    for (((id, x), &ki), &ti) in inputs.iter().zip(k).zip(tau) {
        let mut candidates = Vec::with_capacity(ki);
        let mut seq_logprobs = Vec::with_capacity(ki);
        for _ in 0..ki {
            let row = iter.next().expect("row per candidate");
            let truncated = !row.done;
            let stacked = graph.concat_scalars(row.logprob_nodes);
            seq_logprobs.push(graph.sum_all(stacked));
            candidates.push(SampledSeq {
                tokens: row.tokens,
                step_probs: row.step_probs,
                truncated,
            });
        }
        sets.push(SampleSet {
            input_id: *id,
            source: x.clone(),
            candidates,
            m: ki,
            tau: ti,
            seq_logprobs,
            rewards: Vec::new(),
        });
    }
    Ok(BatchSample { graph, sets })
}
