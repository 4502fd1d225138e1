//! Dynamic sampling: per-input capability estimation, the cross-epoch
//! capability registry, and the batch-level size/temperature adjustment.

use std::collections::BTreeMap;

use crate::config::{CapabilityEstimator, EsrlConfig, RewardMetric, RunSeed};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rewards;
use crate::sampler::SampleSet;
use crate::taskgen::{Pair, TokenId};

const SHARE_EPS: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;

/// Per-input capability cache: input id -> (capability, epoch recorded).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CapabilityRegistry {
    entries: BTreeMap<usize, (f64, u64)>,
}

impl CapabilityRegistry {
    pub fn new() -> CapabilityRegistry {
        CapabilityRegistry::default()
    }

    pub fn get(&self, input_id: usize) -> Option<(f64, u64)> {
        self.entries.get(&input_id).copied()
    }

    /// Overwrites only with same-or-newer epochs.
    pub fn record(&mut self, input_id: usize, capability: f64, epoch: u64) {
        match self.entries.get(&input_id) {
            Some(&(_, old_epoch)) if old_epoch > epoch => {}
            _ => {
                self.entries.insert(input_id, (capability, epoch));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &(f64, u64))> {
        self.entries.iter()
    }
}

/// Per-batch sampling plan.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub input_ids: Vec<usize>,
    pub capabilities: Vec<f64>,
    pub sizes: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// How many inputs had no recorded capability and were estimated from a
    /// greedy decode.
    pub greedy_fallbacks: usize,
}

/// Mean metric score of the sampled candidates against the reference.
pub fn capability_metric(
    samples: &SampleSet,
    reference: &[TokenId],
    metric: RewardMetric,
    eos: TokenId,
) -> Result<f64> {
    if samples.candidates.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut acc = 0.0;
    for cand in &samples.candidates {
        acc += rewards::score(metric, &cand.tokens, reference, eos)?;
    }
    Ok(acc / samples.candidates.len() as f64)
}

fn entropy_of_probs(step_probs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &p in step_probs {
        let p = p.max(PROB_FLOOR);
        acc += p * p.ln();
    }
    acc / step_probs.len() as f64
}

/// Entropy-based capability: `1 + mean over candidates of the mean
/// p * ln(p)` of their sampled tokens, each candidate normalized by its own
/// length. Lies in `[1 - 1/e, 1]`.
pub fn capability_entropy(samples: &SampleSet) -> Result<f64> {
    if samples.candidates.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut acc = 0.0;
    for cand in &samples.candidates {
        debug_assert!(!cand.step_probs.is_empty());
        acc += entropy_of_probs(&cand.step_probs);
    }
    Ok(1.0 + acc / samples.candidates.len() as f64)
}

/// Batch-level size adjustment: `k_i = ceil(k_max - beta * n * k_max *
/// share_i)` clamped to `[1, k_max]`, where `share_i` is input i's fraction
/// of the batch capability mass. A vanishing capability mass falls back to
/// uniform shares.
pub fn adjust_sizes(caps: &[f64], k_max: usize, beta: f64) -> Vec<usize> {
    let n = caps.len();
    assert!(n >= 1, "adjust_sizes needs at least one input");
    let floored: Vec<f64> = caps.iter().map(|&c| c.max(0.0)).collect();
    let total: f64 = floored.iter().sum();
    let kf = k_max as f64;
    let nf = n as f64;
    floored
        .iter()
        .map(|&c| {
            let share = if total < SHARE_EPS { 1.0 / nf } else { c / total };
            let raw = (kf - beta * nf * kf * share).ceil();
            (raw as i64).clamp(1, k_max as i64) as usize
        })
        .collect()
}

/// Temperature tied to the adjusted size: `tau_min + k_x * (tau_max -
/// tau_min) / k_max`.
pub fn adjust_temperature(k_x: usize, k_max: usize, tau_min: f64, tau_max: f64) -> f64 {
    debug_assert!((1..=k_max).contains(&k_x));
    tau_min + k_x as f64 * (tau_max - tau_min) / k_max as f64
}

/// Plans one batch: capability from the registry when recorded, otherwise a
/// single greedy decode feeds the configured estimator. The random estimator
/// skips capability entirely and draws sizes and temperatures uniformly.
pub fn plan_batch(
    registry: &CapabilityRegistry,
    inputs: &[(usize, &Pair)],
    model: &ModelParams,
    config: &EsrlConfig,
    epoch: u64,
    seed: &RunSeed,
) -> Result<BatchPlan> {
    assert!(!inputs.is_empty(), "plan_batch needs inputs");
    let input_ids: Vec<usize> = inputs.iter().map(|(id, _)| *id).collect();

    if config.capability_estimator == CapabilityEstimator::Random {
        use rand::Rng;
        let mut rng = seed.derive("plan", epoch).rng();
        let mut sizes = Vec::with_capacity(inputs.len());
        let mut temperatures = Vec::with_capacity(inputs.len());
        for _ in inputs {
            sizes.push(rng.gen_range(1..=config.k_max));
            temperatures.push(rng.gen_range(config.tau_min..=config.tau_max));
        }
        return Ok(BatchPlan {
            input_ids,
            capabilities: vec![0.0; inputs.len()],
            sizes,
            temperatures,
            greedy_fallbacks: 0,
        });
    }

    let eos = model.specials.eos;
    let mut capabilities = Vec::with_capacity(inputs.len());
    let mut greedy_fallbacks = 0;
    for (id, pair) in inputs {
        let cap = match registry.get(*id) {
            Some((cap, _)) => cap,
            None => {
                greedy_fallbacks += 1;
                let greedy = model.greedy_decode(&pair.source, config.max_decode_len)?;
                match config.capability_estimator {
                    CapabilityEstimator::Metric => {
                        rewards::score(config.reward_metric, &greedy.tokens, &pair.target, eos)?
                    }
                    CapabilityEstimator::Entropy => 1.0 + entropy_of_probs(&greedy.step_probs),
                    CapabilityEstimator::Random => unreachable!(),
                }
            }
        };
        capabilities.push(cap);
    }
    let sizes = adjust_sizes(&capabilities, config.k_max, config.beta);
    let temperatures = sizes
        .iter()
        .map(|&k| adjust_temperature(k, config.k_max, config.tau_min, config.tau_max))
        .collect();
    Ok(BatchPlan {
        input_ids,
        capabilities,
        sizes,
        temperatures,
        greedy_fallbacks,
    })
}

/// Records fresh capabilities after sampling. The random estimator keeps no
/// state, so it records nothing.
pub fn record_capabilities(
    registry: &mut CapabilityRegistry,
    sets: &[SampleSet],
    refs: &[&[TokenId]],
    epoch: u64,
    estimator: CapabilityEstimator,
    metric: RewardMetric,
    eos: TokenId,
) -> Result<()> {
    assert_eq!(sets.len(), refs.len());
    match estimator {
        CapabilityEstimator::Random => Ok(()),
        CapabilityEstimator::Metric => {
            for (set, reference) in sets.iter().zip(refs) {
                let cap = capability_metric(set, reference, metric, eos)?;
                registry.record(set.input_id, cap, epoch);
            }
            Ok(())
        }
        CapabilityEstimator::Entropy => {
            for set in sets {
                let cap = capability_entropy(set)?;
                registry.record(set.input_id, cap, epoch);
            }
            Ok(())
        }
    }
}
