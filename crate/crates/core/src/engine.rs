//! Randomized agglomerative clustering.
//!
//! At step `t` every candidate merge `M` is drawn with probability
//! `softmax(-d(M) / tau_t)`, where `tau_t = tau * mean(d)` over the current
//! candidates. `tau = 0` selects the minimum-dissimilarity candidate (ties go
//! to the first in canonical order).

use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{invalid, Error, Result};
use crate::linkage::{pairwise_dissimilarity, ClusterState, Linkage, LinkageTable};
use crate::rng::SimRng;
use crate::special::exp_nonpositive;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationConfig {
    pub tau: f64,
    pub linkage: Linkage,
    pub seed: u64,
}

impl RandomizationConfig {
    pub fn new(tau: f64, linkage: Linkage, seed: u64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return invalid(format!("tau must be finite and >= 0, got {tau}"));
        }
        Ok(RandomizationConfig { tau, linkage, seed })
    }

    pub fn is_deterministic(&self) -> bool {
        self.tau == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    /// 1-based merge step.
    pub step: usize,
    pub members_a: Vec<usize>,
    pub members_b: Vec<usize>,
    pub dissimilarity: f64,
    pub tau_t: f64,
    pub log_prob: f64,
    pub candidate_count: usize,
}

impl MergeRecord {
    /// Slots (smallest members) of the two merged clusters, ascending.
    pub fn slots(&self) -> (usize, usize) {
        let a = self.members_a[0];
        let b = self.members_b[0];
        (a.min(b), a.max(b))
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.members_a.len(), self.members_b.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub config: RandomizationConfig,
    pub n: usize,
    pub records: Vec<MergeRecord>,
    pub labels: Vec<usize>,
}

impl MergeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, step: usize) -> Result<&MergeRecord> {
        if step == 0 || step > self.records.len() {
            return invalid(format!(
                "step {step} outside 1..={} of the trace",
                self.records.len()
            ));
        }
        Ok(&self.records[step - 1])
    }

    /// Partition after the first `steps` merges.
    pub fn state_after(&self, steps: usize) -> Result<ClusterState> {
        if steps > self.records.len() {
            return invalid(format!("trace has only {} merges", self.records.len()));
        }
        let mut state = ClusterState::singletons(self.n);
        for r in &self.records[..steps] {
            let (a, b) = r.slots();
            state.merge_slots(a, b)?;
        }
        Ok(state)
    }

    /// Labels of the `k`-cluster cut (needs a trace that reached `k` clusters).
    pub fn labels_at(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return invalid(format!("k must be in 1..={}", self.n));
        }
        Ok(self.state_after(self.n - k)?.labels())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Softmax probabilities over one step's candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeProbabilities {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Realized temperature `tau * mean(d)`.
    pub tau_t: f64,
}

/// Log-normalizer of one softmax step, shifted by the minimum dissimilarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct StepSoftmax {
    pub d_min: f64,
    pub tau_t: f64,
    /// `ln sum exp(-(d - d_min) / tau_t)`, or `ln m` for a uniform step.
    pub ln_norm: f64,
}

impl StepSoftmax {
    pub fn new(d: &[f64], tau: f64) -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { softmax_avx512(d, tau) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: as above.
                return unsafe { softmax_avx2(d, tau) };
            }
        }
        softmax_kernel(d, tau)
    }

    #[inline]
    pub fn log_prob(&self, d: f64) -> f64 {
        if self.tau_t > 0.0 {
            -(d - self.d_min) / self.tau_t - self.ln_norm
        } else {
            -self.ln_norm
        }
    }
}

// The wide builds differ only in vector width; no fused operations are
// enabled, so every path returns the same bits.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn softmax_avx512(d: &[f64], tau: f64) -> StepSoftmax {
    softmax_kernel(d, tau)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn softmax_avx2(d: &[f64], tau: f64) -> StepSoftmax {
    softmax_kernel(d, tau)
}

const LANES: usize = 8;

#[inline(always)]
fn softmax_kernel(d: &[f64], tau: f64) -> StepSoftmax {
    let m = d.len();
    let chunks = d.chunks_exact(LANES);
    let rest = chunks.remainder();
    let mut lo = [f64::INFINITY; LANES];
    let mut acc = [0.0f64; LANES];
    for c in chunks.clone() {
        for k in 0..LANES {
            lo[k] = if c[k] < lo[k] { c[k] } else { lo[k] };
            acc[k] += c[k];
        }
    }
    for (k, &v) in rest.iter().enumerate() {
        lo[k] = if v < lo[k] { v } else { lo[k] };
        acc[k] += v;
    }
    let d_min = lo.iter().fold(f64::INFINITY, |a, &b| if b < a { b } else { a });
    let tau_t = tau * lanes_sum(&acc) / m as f64;
    if !(tau_t > 0.0) {
        return StepSoftmax {
            d_min,
            tau_t,
            ln_norm: (m as f64).ln(),
        };
    }
    let inv = 1.0 / tau_t;
    let mut acc = [0.0f64; LANES];
    for c in chunks {
        for k in 0..LANES {
            acc[k] += exp_nonpositive((d_min - c[k]) * inv);
        }
    }
    for (k, &v) in rest.iter().enumerate() {
        acc[k] += exp_nonpositive((d_min - v) * inv);
    }
    StepSoftmax {
        d_min,
        tau_t,
        ln_norm: lanes_sum(&acc).ln(),
    }
}

#[inline(always)]
fn lanes_sum(a: &[f64; LANES]) -> f64 {
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

/// Softmax of `-d / tau_t` over a non-empty list of candidate dissimilarities.
///
/// Only the dissimilarities are read; the data never enter.
pub fn merge_probabilities(dissimilarities: &[f64], tau: f64) -> Result<MergeProbabilities> {
    if dissimilarities.is_empty() {
        return invalid("no candidates");
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return invalid(format!("tau must be positive and finite, got {tau}"));
    }
    if dissimilarities.iter().any(|d| !d.is_finite()) {
        return invalid("non-finite dissimilarity");
    }
    let step = StepSoftmax::new(dissimilarities, tau);
    let log_probs: Vec<f64> = dissimilarities.iter().map(|&d| step.log_prob(d)).collect();
    Ok(MergeProbabilities {
        probs: log_probs.iter().map(|l| l.exp()).collect(),
        log_probs,
        tau_t: step.tau_t,
    })
}

/// Inverse-CDF draw over `probs` in order from a single uniform `u` in `[0, 1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

pub fn sample_merge(probs: &[f64], rng: &mut SimRng) -> usize {
    sample_index(probs, rng.uniform())
}

/// Runs `n - k` merges of the randomized algorithm.
pub fn run_clustering(x: &DataMatrix, k: usize, config: &RandomizationConfig) -> Result<MergeTrace> {
    let n = x.n();
    if k < 1 || k > n {
        return invalid(format!("target cluster count must be in 1..={n}, got {k}"));
    }
    RandomizationConfig::new(config.tau, config.linkage, config.seed)?;
    let d = pairwise_dissimilarity(x);
    let mut table = LinkageTable::new(config.linkage, &d);
    let mut records = Vec::with_capacity(n - k);
    let mut values = Vec::new();
    for step in 1..=n - k {
        let candidates = table.candidates();
        values.clear();
        values.extend(candidates.iter().map(|c| c.dissimilarity));
        let (index, tau_t, log_prob) = if config.is_deterministic() {
            let mut best = 0;
            for (i, &v) in values.iter().enumerate() {
                if v < values[best] {
                    best = i;
                }
            }
            (best, 0.0, 0.0)
        } else {
            let probs = merge_probabilities(&values, config.tau)?;
            let mut rng = SimRng::substream(config.seed, step as u64);
            let idx = sample_merge(&probs.probs, &mut rng);
            (idx, probs.tau_t, probs.log_probs[idx])
        };
        let chosen = candidates[index];
        records.push(MergeRecord {
            step,
            members_a: sorted(table.members(chosen.a)),
            members_b: sorted(table.members(chosen.b)),
            dissimilarity: chosen.dissimilarity,
            tau_t,
            log_prob,
            candidate_count: candidates.len(),
        });
        table.merge(chosen.a, chosen.b)?;
    }
    let mut labels = vec![0; n];
    for (label, &slot) in table.active().iter().enumerate() {
        for &i in table.members(slot) {
            labels[i] = label;
        }
    }
    if table.active().len() != k {
        return Err(Error::InvalidState("merge loop ended with the wrong cluster count".into()));
    }
    Ok(MergeTrace {
        config: *config,
        n,
        records,
        labels,
    })
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_two_cluster;

    #[test]
    fn vector_paths_agree_bitwise() {
        let mut rng = SimRng::new(17);
        for m in [1usize, 3, 8, 9, 31, 500] {
            let d: Vec<f64> = (0..m).map(|_| rng.uniform() * 5.0).collect();
            let plain = softmax_kernel(&d, 0.1);
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx2") {
                    assert_eq!(unsafe { softmax_avx2(&d, 0.1) }, plain);
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    assert_eq!(unsafe { softmax_avx512(&d, 0.1) }, plain);
                }
            }
            assert_eq!(StepSoftmax::new(&d, 0.1), plain);
        }
    }

    #[test]
    fn symmetric_candidates_are_uniform() {
        let p = merge_probabilities(&[1.0, 1.0, 1.0], 0.3).unwrap();
        for v in p.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_candidate_scalar_case() {
        let p = merge_probabilities(&[1.0, 2.0], 0.1).unwrap();
        assert!((p.tau_t - 0.15).abs() < 1e-15);
        let expected = 1.0 / (1.0 + (-(2.0 - 1.0) / 0.15f64).exp());
        assert!((p.probs[0] - expected).abs() < 1e-12);
        assert!((p.probs[0] - 0.998729).abs() < 1e-6);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_tau_concentrates_on_argmin() {
        let p = merge_probabilities(&[3.0, 1.0, 2.0, 1.5], 1e-8).unwrap();
        assert!(p.probs[1] >= 1.0 - 1e-12);
    }

    #[test]
    fn all_zero_is_uniform() {
        let p = merge_probabilities(&[0.0; 4], 0.1).unwrap();
        assert_eq!(p.tau_t, 0.0);
        assert!(p.probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn invalid_tau() {
        assert!(merge_probabilities(&[1.0], 0.0).is_err());
        assert!(merge_probabilities(&[1.0], -1.0).is_err());
        assert!(merge_probabilities(&[], 1.0).is_err());
    }

    #[test]
    fn inverse_cdf_rule() {
        assert_eq!(sample_index(&[1.0, 0.0], 0.999), 0);
        assert_eq!(sample_index(&[0.5, 0.5], 0.25), 0);
        assert_eq!(sample_index(&[0.5, 0.5], 0.75), 1);
        assert_eq!(sample_index(&[0.3, 0.7, 0.0], 1.0 - 1e-17), 1);
    }

    #[test]
    fn empirical_frequencies() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let mut rng = SimRng::new(123);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[sample_merge(&probs, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((*c as f64 / draws as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn trace_shape_and_replay() {
        let (x, _) = generate_two_cluster(20, 4.0, 1.0, 3, 8).unwrap();
        let cfg = RandomizationConfig::new(0.1, Linkage::Average, 5).unwrap();
        let trace = run_clustering(&x, 3, &cfg).unwrap();
        assert_eq!(trace.len(), 17);
        for (t, r) in trace.records.iter().enumerate() {
            let m = 20 - t;
            assert_eq!(r.candidate_count, m * (m - 1) / 2);
            assert!(r.log_prob <= 0.0);
        }
        assert_eq!(trace.labels_at(3).unwrap(), trace.labels);
        let json = trace.to_json().unwrap();
        assert_eq!(MergeTrace::from_json(&json).unwrap(), trace);
        assert!(json.contains("\"members_a\"") && json.contains("\"candidate_count\""));
    }

    #[test]
    fn k_equals_n_is_empty() {
        let (x, _) = generate_two_cluster(6, 1.0, 1.0, 2, 1).unwrap();
        let cfg = RandomizationConfig::new(0.1, Linkage::Complete, 1).unwrap();
        let trace = run_clustering(&x, 6, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(trace.labels, (0..6).collect::<Vec<_>>());
        assert!(run_clustering(&x, 7, &cfg).is_err());
        assert!(run_clustering(&x, 0, &cfg).is_err());
    }

    #[test]
    fn deterministic_merges_minimum() {
        let x = DataMatrix::from_rows(&[vec![0.0], vec![10.0], vec![10.5], vec![0.2]]).unwrap();
        let cfg = RandomizationConfig::new(0.0, Linkage::Single, 0).unwrap();
        let trace = run_clustering(&x, 1, &cfg).unwrap();
        assert_eq!(trace.records[0].slots(), (0, 3));
        assert_eq!(trace.records[1].slots(), (1, 2));
    }
}
