//! Loss construction: MLE, the log-derivative policy loss with a baseline,
//! minimum-risk training over a renormalized candidate distribution, and the
//! size-dependent fusion of the two.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::sampler::SampleSet;

/// Scalar loss handle plus batch diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub node: NodeId,
    pub diagnostics: LossDiagnostics,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossDiagnostics {
    pub mean_reward: f64,
    pub baseline: f64,
    pub mrt_branches: usize,
    pub reinforce_branches: usize,
}

/// Negative mean per-token log-probability. `token_logprobs` are the
/// `[n, 1]` columns produced by teacher-forced scoring; sequences carry no
/// padding, so every position counts.
pub fn mle_loss(g: &mut Graph, token_logprobs: &[NodeId]) -> LossValue {
    assert!(!token_logprobs.is_empty(), "mle_loss needs at least one sequence");
    let stacked = if token_logprobs.len() == 1 {
        token_logprobs[0]
    } else {
        g.concat_rows(token_logprobs.to_vec())
    };
    let mean = g.mean_all(stacked);
    let node = g.affine(mean, -1.0, 0.0);
    LossValue {
        node,
        diagnostics: LossDiagnostics::default(),
    }
}

/// `-log p(y_hat | x) * (r - b)`.
pub fn reinforce_loss(g: &mut Graph, seq_logprob: NodeId, reward: f64, baseline: f64) -> LossValue {
    let node = g.affine(seq_logprob, -(reward - baseline), 0.0);
    LossValue {
        node,
        diagnostics: LossDiagnostics {
            mean_reward: reward,
            baseline,
            reinforce_branches: 1,
            mrt_branches: 0,
        },
    }
}

/// Renormalized candidate distribution `Q_i = p_i^alpha / sum_j p_j^alpha`,
/// computed in log space as a softmax over `alpha * log p_i` so that
/// sequence log-probabilities far below zero cannot underflow.
pub fn mrt_q(g: &mut Graph, seq_logprobs: &[NodeId], alpha: f64) -> Result<NodeId> {
    if seq_logprobs.len() < 2 {
        return Err(Error::DegenerateSet(seq_logprobs.len()));
    }
    let stacked = g.concat_scalars(seq_logprobs.to_vec());
    let scaled = g.affine(stacked, alpha, 0.0);
    Ok(g.softmax_rows(scaled, None))
}

/// Expected negative advantage under `Q`: `sum_i Q_i * (-(r_i - b))`.
pub fn mrt_loss(g: &mut Graph, q: NodeId, rewards: &[f64], baseline: f64) -> Result<LossValue> {
    let m = g.value(q).len();
    if m != rewards.len() {
        return Err(Error::DimensionMismatch(format!(
            "Q has {m} entries, rewards has {}",
            rewards.len()
        )));
    }
    let weights: Vec<f64> = rewards.iter().map(|&r| -(r - baseline)).collect();
    let node = g.dot_const(q, weights);
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(LossValue {
        node,
        diagnostics: LossDiagnostics {
            mean_reward,
            baseline,
            mrt_branches: 1,
            reinforce_branches: 0,
        },
    })
}

/// Per input: the minimum-risk branch when it has more than one candidate,
/// the log-derivative branch when it has exactly one. The batch loss is the
/// mean over inputs.
pub fn fused_loss(
    g: &mut Graph,
    sets: &[SampleSet],
    alpha: f64,
    baseline: f64,
) -> Result<LossValue> {
    assert!(!sets.is_empty(), "fused_loss needs a batch");
    let mut per_input = Vec::with_capacity(sets.len());
    let mut mrt_branches = 0;
    let mut reinforce_branches = 0;
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;
    for set in sets {
        assert_eq!(
            set.candidates.len(),
            set.rewards.len(),
            "rewards must be computed before fused_loss"
        );
        assert!(set.m >= 1);
        reward_sum += set.rewards.iter().sum::<f64>();
        reward_count += set.rewards.len();
        if set.m == 1 {
            reinforce_branches += 1;
            per_input.push(reinforce_loss(g, set.seq_logprobs[0], set.rewards[0], baseline).node);
        } else {
            mrt_branches += 1;
            let q = mrt_q(g, &set.seq_logprobs, alpha)?;
            per_input.push(mrt_loss(g, q, &set.rewards, baseline)?.node);
        }
    }
    let stacked = g.concat_scalars(per_input);
    let node = g.mean_all(stacked);
    Ok(LossValue {
        node,
        diagnostics: LossDiagnostics {
            mean_reward: reward_sum / reward_count.max(1) as f64,
            baseline,
            mrt_branches,
            reinforce_branches,
        },
    })
}
