//! Sequence-level reward functions and the FIFO global reward queue that
//! supplies the baseline value.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::config::RewardMetric;
use crate::error::{Error, Result};
use crate::taskgen::TokenId;

const MAX_NGRAM: usize = 4;

fn strip_eos(seq: &[TokenId], eos: TokenId) -> Vec<TokenId> {
    seq.iter().copied().filter(|&t| t != eos).collect()
}

fn ngram_clipped_matches(hyp: &[TokenId], reference: &[TokenId], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let total = hyp.len() - n + 1;
    let mut ref_counts: std::collections::HashMap<&[TokenId], usize> = std::collections::HashMap::new();
    if reference.len() >= n {
        for w in reference.windows(n) {
            *ref_counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut matches = 0;
    for w in hyp.windows(n) {
        if let Some(c) = ref_counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                matches += 1;
            }
        }
    }
    (matches, total)
}

/// Smoothed sentence BLEU in `[0, 1]`.
///
/// Geometric mean of clipped n-gram precisions for n = 1..4 with add-1
/// smoothing on numerator and denominator for n >= 2, times the brevity
/// penalty `exp(1 - |ref|/|hyp|)` when the hypothesis is shorter. EOS is
/// stripped from both sides first; an empty hypothesis scores 0.
pub fn sentence_bleu(hyp: &[TokenId], reference: &[TokenId], eos: TokenId) -> Result<f64> {
    let hyp = strip_eos(hyp, eos);
    let reference = strip_eos(reference, eos);
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let (matches, total) = ngram_clipped_matches(&hyp, &reference, n);
        let precision = if n == 1 {
            if matches == 0 {
                return Ok(0.0);
            }
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        log_sum += precision.ln();
    }
    let brevity = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    Ok((log_sum / MAX_NGRAM as f64).exp() * brevity)
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut curr = vec![0usize; m + 1];
    for &av in a {
        for (j, &bv) in b.iter().enumerate() {
            curr[j + 1] = if av == bv {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// ROUGE-L F-measure from the longest common subsequence.
pub fn rouge_l(hyp: &[TokenId], reference: &[TokenId], eos: TokenId) -> Result<f64> {
    let hyp = strip_eos(hyp, eos);
    let reference = strip_eos(reference, eos);
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(&hyp, &reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Scores one hypothesis with the configured metric.
pub fn score(
    metric: RewardMetric,
    hyp: &[TokenId],
    reference: &[TokenId],
    eos: TokenId,
) -> Result<f64> {
    match metric {
        RewardMetric::Bleu => sentence_bleu(hyp, reference, eos),
        RewardMetric::RougeL => rouge_l(hyp, reference, eos),
    }
}

/// Corpus-level BLEU: standard unsmoothed 4-gram aggregation with brevity
/// penalty, used for evaluation (the per-sample reward stays smoothed).
pub fn corpus_bleu(pairs: &[(Vec<TokenId>, Vec<TokenId>)], eos: TokenId) -> f64 {
    let mut matches = [0usize; MAX_NGRAM];
    let mut totals = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in pairs {
        let hyp = strip_eos(hyp, eos);
        let reference = strip_eos(reference, eos);
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_NGRAM {
            let (m, t) = ngram_clipped_matches(&hyp, &reference, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_NGRAM {
        if matches[n] == 0 || totals[n] == 0 {
            return 0.0;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    (log_sum / MAX_NGRAM as f64).exp() * brevity
}

/// Mean sentence ROUGE-L over a split, for evaluation reporting.
pub fn corpus_rouge_l(pairs: &[(Vec<TokenId>, Vec<TokenId>)], eos: TokenId) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (hyp, reference) in pairs {
        acc += rouge_l(hyp, reference, eos).unwrap_or(0.0);
    }
    acc / pairs.len() as f64
}

/// Bounded FIFO of recent rewards; its mean is the baseline value `b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardQueue {
    buffer: VecDeque<f64>,
    capacity: usize,
    running_sum: f64,
    // Neumaier compensation keeps the running sum honest over long runs.
    compensation: f64,
}

impl RewardQueue {
    pub fn new(capacity: usize) -> RewardQueue {
        assert!(capacity >= 1, "queue capacity must be >= 1");
        RewardQueue {
            buffer: VecDeque::with_capacity(capacity),
            capacity,
            running_sum: 0.0,
            compensation: 0.0,
        }
    }

    fn add_to_sum(&mut self, v: f64) {
        let t = self.running_sum + v;
        if self.running_sum.abs() >= v.abs() {
            self.compensation += (self.running_sum - t) + v;
        } else {
            self.compensation += (v - t) + self.running_sum;
        }
        self.running_sum = t;
    }

    /// Appends rewards in order, evicting the oldest past capacity.
    pub fn push_rewards(&mut self, rewards: &[f64]) {
        for &r in rewards {
            if self.buffer.len() == self.capacity {
                let old = self.buffer.pop_front().expect("non-empty at capacity");
                self.add_to_sum(-old);
            }
            self.buffer.push_back(r);
            self.add_to_sum(r);
        }
    }

    /// Mean of the buffered rewards; 0.0 on an empty queue (cold start).
    ///
    /// Summed front-to-back directly so the value matches a shadow list
    /// bit for bit.
    pub fn baseline(&self) -> f64 {
        if self.buffer.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for &v in &self.buffer {
            acc += v;
        }
        acc / self.buffer.len() as f64
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn running_sum(&self) -> f64 {
        self.running_sum + self.compensation
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.buffer.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const EOS: TokenId = 2;

    #[test]
    fn bleu_perfect_match_is_one() {
        let s = vec![3, 1, 4, 1, 5];
        assert!((sentence_bleu(&s, &s, EOS).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_no_unigram_overlap_is_zero() {
        assert_eq!(sentence_bleu(&[7, 8, 9], &[4, 5, 6], EOS).unwrap(), 0.0);
    }

    /// Independent oracle with identical smoothing, written the slow way:
    /// explicit n-gram count maps and direct precision products.
    fn oracle_bleu(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
        use std::collections::HashMap;
        if hyp.is_empty() {
            return 0.0;
        }
        let mut product = 1.0f64;
        for n in 1..=4usize {
            let count = |s: &[TokenId]| -> HashMap<Vec<TokenId>, usize> {
                let mut m = HashMap::new();
                if s.len() >= n {
                    for i in 0..=s.len() - n {
                        *m.entry(s[i..i + n].to_vec()).or_insert(0) += 1;
                    }
                }
                m
            };
            let h = count(hyp);
            let r = count(reference);
            let mut num = 0usize;
            let mut den = 0usize;
            for (gram, c) in &h {
                den += c;
                num += c.min(r.get(gram).unwrap_or(&0));
            }
            let p = if n == 1 {
                num as f64 / den as f64
            } else {
                (num as f64 + 1.0) / (den as f64 + 1.0)
            };
            product *= p;
        }
        let bp = if hyp.len() < reference.len() {
            (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
        } else {
            1.0
        };
        product.powf(0.25) * bp
    }

    #[test]
    fn bleu_matches_independent_oracle() {
        // Sentinel EOS outside the example's token range.
        let hyp = vec![1, 2, 3, 4];
        let reference = vec![1, 2, 3, 5];
        let got = sentence_bleu(&hyp, &reference, 999).unwrap();
        let want = oracle_bleu(&hyp, &reference);
        assert!((got - want).abs() < 1e-9, "got {got}, oracle {want}");
        // frozen oracle value
        assert!((got - 0.658_037_006_476_27).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn bleu_matches_oracle_on_random_sequences() {
        let mut rng = crate::config::RunSeed::new(8).rng();
        for _ in 0..300 {
            let len_h = rng.gen_range(1..10);
            let len_r = rng.gen_range(1..10);
            let hyp: Vec<TokenId> = (0..len_h).map(|_| rng.gen_range(4..12)).collect();
            let reference: Vec<TokenId> = (0..len_r).map(|_| rng.gen_range(4..12)).collect();
            let got = sentence_bleu(&hyp, &reference, EOS).unwrap();
            let want = oracle_bleu(&hyp, &reference);
            assert!(
                (got - want).abs() < 1e-9,
                "hyp {hyp:?} ref {reference:?}: got {got}, oracle {want}"
            );
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn bleu_is_invariant_to_eos() {
        let hyp = vec![4, 5, 6, 7];
        let reference = vec![4, 5, 7, 6];
        let mut hyp_eos = hyp.clone();
        hyp_eos.push(EOS);
        let mut ref_eos = reference.clone();
        ref_eos.push(EOS);
        assert_eq!(
            sentence_bleu(&hyp, &reference, EOS).unwrap(),
            sentence_bleu(&hyp_eos, &ref_eos, EOS).unwrap()
        );
    }

    #[test]
    fn bleu_empty_reference_errors() {
        assert!(matches!(
            sentence_bleu(&[1, 2], &[EOS], EOS),
            Err(Error::EmptyReference)
        ));
    }

    #[test]
    fn rouge_identical_is_one() {
        let s = vec![5, 6, 7];
        assert!((rouge_l(&s, &s, EOS).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        assert_eq!(rouge_l(&[5, 6], &[7, 8], EOS).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_example() {
        // hyp=[1,2,3], ref=[1,3]: LCS=2, P=2/3, R=1, F=0.8
        let f = rouge_l(&[1, 2, 3], &[1, 3], 999).unwrap();
        assert!((f - 0.8).abs() < 1e-12, "{f}");
    }

    #[test]
    fn metric_self_score_is_one_for_random_sequences() {
        let mut rng = crate::config::RunSeed::new(9).rng();
        for _ in 0..100 {
            let len = rng.gen_range(1..12);
            let s: Vec<TokenId> = (0..len).map(|_| rng.gen_range(4..16)).collect();
            assert!((sentence_bleu(&s, &s, EOS).unwrap() - 1.0).abs() < 1e-12);
            assert!((rouge_l(&s, &s, EOS).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn queue_evicts_fifo() {
        let mut q = RewardQueue::new(3);
        q.push_rewards(&[1.0, 2.0, 3.0, 4.0]);
        let kept: Vec<f64> = q.iter().copied().collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn queue_below_capacity_keeps_everything() {
        let mut q = RewardQueue::new(5);
        q.push_rewards(&[0.5, 0.25]);
        assert_eq!(q.len(), 2);
        let kept: Vec<f64> = q.iter().copied().collect();
        assert_eq!(kept, vec![0.5, 0.25]);
    }

    #[test]
    fn queue_matches_shadow_list_exactly() {
        let mut rng = crate::config::RunSeed::new(10).rng();
        let cap = 37;
        let mut q = RewardQueue::new(cap);
        let mut shadow: Vec<f64> = Vec::new();
        for _ in 0..10 * cap {
            let r: f64 = rng.gen_range(0.0..1.0);
            q.push_rewards(&[r]);
            shadow.push(r);
        }
        let tail = &shadow[shadow.len() - cap..];
        let kept: Vec<f64> = q.iter().copied().collect();
        assert_eq!(kept, tail);
    }

    #[test]
    fn baseline_is_mean() {
        let mut q = RewardQueue::new(3);
        q.push_rewards(&[2.0, 3.0, 4.0]);
        assert!((q.baseline() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn baseline_cold_start_is_zero() {
        assert_eq!(RewardQueue::new(4).baseline(), 0.0);
    }

    #[test]
    fn baseline_and_running_sum_track_shadow_over_many_pushes() {
        let mut rng = crate::config::RunSeed::new(12).rng();
        let cap = 100;
        let mut q = RewardQueue::new(cap);
        let mut shadow: Vec<f64> = Vec::new();
        for _ in 0..100_000 {
            let r: f64 = rng.gen_range(0.0..1.0);
            q.push_rewards(&[r]);
            shadow.push(r);
        }
        let window = &shadow[shadow.len() - cap..];
        let mut direct = 0.0;
        for &v in window {
            direct += v;
        }
        assert!((q.baseline() - direct / cap as f64).abs() < 1e-9);
        assert!((q.running_sum() - direct).abs() < 1e-9);
    }
}
