//! Versioned binary checkpoint container: model dims and weights, optimizer
//! state, capability registry, and reward-queue contents. Round-trips are
//! bit exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::model::{ModelDims, ModelParams, Optimizer, SpecialIds, UpdateMode};
use crate::rewards::RewardQueue;
use crate::scheduler::CapabilityRegistry;

const MAGIC: &[u8; 8] = b"ESRLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub registry: CapabilityRegistry,
    pub queue: RewardQueue,
    /// Index of the next training epoch (for resumable runs).
    pub next_epoch: u64,
}

impl Checkpoint {
    pub fn fresh(params: ModelParams, mode: UpdateMode, queue_size: usize) -> Checkpoint {
        Checkpoint {
            params,
            optimizer: Optimizer::new(mode),
            registry: CapabilityRegistry::new(),
            queue: RewardQueue::new(queue_size),
            next_epoch: 0,
        }
    }
}

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn w_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w_u32(w, t.rows as u32)?;
    w_u32(w, t.cols as u32)?;
    for &v in &t.data {
        w_f64(w, v)?;
    }
    Ok(())
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(r_u64(r)?))
}

fn r_str(r: &mut impl Read) -> Result<String> {
    let len = r_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 name".into()))
}

fn r_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rows = r_u32(r)? as usize;
    let cols = r_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r_f64(r)?);
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

fn w_tensor_map(
    w: &mut impl Write,
    map: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    w_u32(w, map.len() as u32)?;
    for (name, t) in map {
        w_str(w, name)?;
        w_tensor(w, t)?;
    }
    Ok(())
}

fn r_tensor_map(r: &mut impl Read) -> Result<std::collections::BTreeMap<String, Tensor>> {
    let n = r_u32(r)? as usize;
    let mut map = std::collections::BTreeMap::new();
    for _ in 0..n {
        let name = r_str(r)?;
        let t = r_tensor(r)?;
        map.insert(name, t);
    }
    Ok(map)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w_u32(&mut w, VERSION)?;

    let d = &ckpt.params.dims;
    for v in [
        d.d_model,
        d.n_heads,
        d.n_enc_layers,
        d.n_dec_layers,
        d.d_ff,
        d.vocab_size,
        d.max_len,
    ] {
        w_u32(&mut w, v as u32)?;
    }
    let s = &ckpt.params.specials;
    for v in [s.pad, s.bos, s.eos] {
        w_u32(&mut w, v as u32)?;
    }
    w_tensor_map(&mut w, &ckpt.params.weights)?;

    let mode = match ckpt.optimizer.mode {
        UpdateMode::Plain => 0u32,
        UpdateMode::Adam => 1u32,
    };
    w_u32(&mut w, mode)?;
    w_u64(&mut w, ckpt.optimizer.step)?;
    w_tensor_map(&mut w, &ckpt.optimizer.m)?;
    w_tensor_map(&mut w, &ckpt.optimizer.v)?;

    w_u32(&mut w, ckpt.registry.len() as u32)?;
    for (&id, &(cap, epoch)) in ckpt.registry.iter() {
        w_u64(&mut w, id as u64)?;
        w_f64(&mut w, cap)?;
        w_u64(&mut w, epoch)?;
    }

    w_u64(&mut w, ckpt.queue.capacity() as u64)?;
    w_u64(&mut w, ckpt.queue.len() as u64)?;
    for &v in ckpt.queue.iter() {
        w_f64(&mut w, v)?;
    }

    w_u64(&mut w, ckpt.next_epoch)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }

    let dims = ModelDims {
        d_model: r_u32(&mut r)? as usize,
        n_heads: r_u32(&mut r)? as usize,
        n_enc_layers: r_u32(&mut r)? as usize,
        n_dec_layers: r_u32(&mut r)? as usize,
        d_ff: r_u32(&mut r)? as usize,
        vocab_size: r_u32(&mut r)? as usize,
        max_len: r_u32(&mut r)? as usize,
    };
    let specials = SpecialIds {
        pad: r_u32(&mut r)? as usize,
        bos: r_u32(&mut r)? as usize,
        eos: r_u32(&mut r)? as usize,
    };
    let weights = r_tensor_map(&mut r)?;
    let params = ModelParams {
        dims,
        specials,
        weights,
        decode_calls: std::sync::atomic::AtomicU64::new(0),
    };

    let mode = match r_u32(&mut r)? {
        0 => UpdateMode::Plain,
        1 => UpdateMode::Adam,
        other => return Err(Error::Checkpoint(format!("unknown optimizer mode {other}"))),
    };
    let step = r_u64(&mut r)?;
    let m = r_tensor_map(&mut r)?;
    let v = r_tensor_map(&mut r)?;
    let optimizer = Optimizer { mode, step, m, v };

    let mut registry = CapabilityRegistry::new();
    let n_reg = r_u32(&mut r)? as usize;
    for _ in 0..n_reg {
        let id = r_u64(&mut r)? as usize;
        let cap = r_f64(&mut r)?;
        let epoch = r_u64(&mut r)?;
        registry.record(id, cap, epoch);
    }

    let capacity = r_u64(&mut r)? as usize;
    let len = r_u64(&mut r)? as usize;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(r_f64(&mut r)?);
    }
    let mut queue = RewardQueue::new(capacity);
    queue.push_rewards(&values);

    let next_epoch = r_u64(&mut r)?;
    Ok(Checkpoint {
        params,
        optimizer,
        registry,
        queue,
        next_epoch,
    })
}
