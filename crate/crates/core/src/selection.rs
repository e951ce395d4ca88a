//! Choosing the number of clusters by α-spending along the merge sequence.
//!
//! Merges are tested in order. Merges whose smaller side has at most `n_min`
//! points are accepted untested. A tested merge draws its level from the
//! unused part of a fixed α-sequence (the smallest unused value when the
//! smaller side has at most `n_star` points, the largest otherwise), and the
//! first rejection at step `t` stops the procedure with `K̂ = n - t + 1`.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::engine::{run_clustering, MergeTrace, RandomizationConfig};
use crate::error::{invalid, Error, Result};
use crate::inference::{p_value_f, TestOptions};
use crate::linkage::Linkage;

/// Per-merge significance levels summing to `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alphas: Vec<f64>,
    pub total: f64,
}

/// `α_j ∝ exp(-decay · j)` for `j = 1..n-1`, normalized to `total`.
pub fn alpha_sequence(n: usize, total: f64, decay: f64) -> Result<AlphaSchedule> {
    if n < 2 {
        return invalid(format!("need at least 2 observations, got {n}"));
    }
    if !(0.0..=1.0).contains(&total) {
        return invalid(format!("total alpha must be in [0, 1], got {total}"));
    }
    if !(decay > 0.0 && decay.is_finite()) {
        return invalid(format!("decay must be positive, got {decay}"));
    }
    // Relative to the first term, so long sequences do not underflow early.
    let raw: Vec<f64> = (0..n - 1).map(|j| (-decay * j as f64).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(AlphaSchedule {
        alphas: raw.iter().map(|a| total * a / sum).collect(),
        total,
    })
}

/// A cluster-size threshold, absolute or as a fraction of `n` (rounded up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeCutoff {
    Absolute(usize),
    Fraction(f64),
}

impl SizeCutoff {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            SizeCutoff::Absolute(k) => k,
            SizeCutoff::Fraction(f) => (f * n as f64 - 1e-9).ceil().max(0.0) as usize,
        }
    }
}

impl FromStr for SizeCutoff {
    type Err = Error;

    /// An integer is absolute; anything with a decimal point is a fraction.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(k) = s.parse::<usize>() {
            return Ok(SizeCutoff::Absolute(k));
        }
        match s.parse::<f64>() {
            Ok(f) if (0.0..=1.0).contains(&f) => Ok(SizeCutoff::Fraction(f)),
            _ => invalid(format!(
                "size cutoff must be an integer or a fraction in [0, 1], got {s:?}"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub decay: f64,
    pub n_min: SizeCutoff,
    pub n_star: SizeCutoff,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 0.05,
            decay: 0.5,
            n_min: SizeCutoff::Fraction(0.1),
            n_star: SizeCutoff::Fraction(0.4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDecision {
    /// Smaller side at most `n_min`: accepted without a test.
    SkippedSmall,
    /// Testable, but the data were degenerate; accepted, no α consumed.
    SkippedDegenerate,
    Tested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sizes: (usize, usize),
    pub decision: StepDecision,
    pub alpha_used: Option<f64>,
    pub p_value: Option<f64>,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub k_hat: usize,
    /// Step of the first rejection, if any.
    pub stop_step: Option<usize>,
    /// One record per visited merge, up to and including the stopping merge.
    pub steps: Vec<StepRecord>,
    pub n_min: usize,
    pub n_star: usize,
    pub alpha_consumed: f64,
}

impl KEstimate {
    pub fn tested(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.decision == StepDecision::Tested)
    }
}

/// Runs the spending rule over merges with the given side sizes (step `t`
/// at index `t - 1`). `p_value(t)` is called only for testable merges; a
/// degenerate-data error there skips the merge without consuming α.
pub fn spend_alpha<F>(
    sizes: &[(usize, usize)],
    schedule: &AlphaSchedule,
    n_min: usize,
    n_star: usize,
    mut p_value: F,
) -> Result<KEstimate>
where
    F: FnMut(usize) -> Result<f64>,
{
    let n = sizes.len() + 1;
    if schedule.alphas.len() < sizes.len() {
        return invalid(format!(
            "alpha schedule has {} levels for {} merges",
            schedule.alphas.len(),
            sizes.len()
        ));
    }
    let mut available: Vec<f64> = schedule.alphas.clone();
    available.sort_by(|a, b| b.total_cmp(a));
    let mut available: VecDeque<f64> = available.into();
    let mut steps = Vec::new();
    let mut consumed = 0.0;
    for (idx, &(a, b)) in sizes.iter().enumerate() {
        let step = idx + 1;
        let smaller = a.min(b);
        if smaller <= n_min {
            steps.push(StepRecord {
                step,
                sizes: (a, b),
                decision: StepDecision::SkippedSmall,
                alpha_used: None,
                p_value: None,
                rejected: false,
            });
            continue;
        }
        let p = match p_value(step) {
            Ok(p) => p,
            Err(Error::DegenerateData(msg)) => {
                log::warn!("step {step}: skipping degenerate merge ({msg})");
                steps.push(StepRecord {
                    step,
                    sizes: (a, b),
                    decision: StepDecision::SkippedDegenerate,
                    alpha_used: None,
                    p_value: None,
                    rejected: false,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let level = if smaller <= n_star {
            available.pop_back()
        } else {
            available.pop_front()
        }
        .ok_or_else(|| Error::InvalidState("alpha budget exhausted".into()))?;
        consumed += level;
        let rejected = p < level;
        steps.push(StepRecord {
            step,
            sizes: (a, b),
            decision: StepDecision::Tested,
            alpha_used: Some(level),
            p_value: Some(p),
            rejected,
        });
        if rejected {
            return Ok(KEstimate {
                k_hat: n - step + 1,
                stop_step: Some(step),
                steps,
                n_min,
                n_star,
                alpha_consumed: consumed,
            });
        }
    }
    Ok(KEstimate {
        k_hat: 1,
        stop_step: None,
        steps,
        n_min,
        n_star,
        alpha_consumed: consumed,
    })
}

/// Clusters `x` all the way down with the randomized algorithm and applies
/// the spending rule with selective F p-values (or naive ones, per
/// `options`).
pub fn estimate_k(
    x: &DataMatrix,
    linkage: Linkage,
    tau: f64,
    config: &SelectionConfig,
    seed: u64,
    options: &TestOptions,
) -> Result<(KEstimate, MergeTrace)> {
    let n = x.n();
    let schedule = alpha_sequence(n, config.alpha, config.decay)?;
    let trace = run_clustering(x, 1, &RandomizationConfig::new(tau, linkage, seed)?)?;
    let sizes: Vec<(usize, usize)> = trace.records.iter().map(|r| r.sizes()).collect();
    let estimate = spend_alpha(
        &sizes,
        &schedule,
        config.n_min.resolve(n),
        config.n_star.resolve(n),
        |t| Ok(p_value_f(x, &trace, t, options)?.p_value),
    )?;
    Ok((estimate, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_two_cluster;
    use crate::rng::SimRng;

    #[test]
    fn schedule_example() {
        let s = alpha_sequence(4, 0.05, 0.5).unwrap();
        let expect = [0.02532, 0.01536, 0.00932];
        for (a, e) in s.alphas.iter().zip(expect) {
            assert!((a - e).abs() < 5e-6, "{a} vs {e}");
        }
        assert!((s.alphas.iter().sum::<f64>() - 0.05).abs() < 1e-12);
        let long = alpha_sequence(200, 0.05, 0.5).unwrap();
        assert!((long.alphas.iter().sum::<f64>() - 0.05).abs() < 1e-12);
        for w in long.alphas.windows(2) {
            assert!((w[1] / w[0] - (-0.5f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoffs() {
        assert_eq!(SizeCutoff::Fraction(0.1).resolve(30), 3);
        assert_eq!(SizeCutoff::Fraction(0.4).resolve(30), 12);
        assert_eq!(SizeCutoff::Fraction(0.1).resolve(107), 11);
        assert_eq!("10".parse::<SizeCutoff>().unwrap(), SizeCutoff::Absolute(10));
        assert_eq!("0.4".parse::<SizeCutoff>().unwrap(), SizeCutoff::Fraction(0.4));
        assert!("abc".parse::<SizeCutoff>().is_err());
    }

    #[test]
    fn spending_order_and_stop() {
        let schedule = alpha_sequence(6, 0.05, 0.5).unwrap();
        let sizes = [(1, 1), (3, 3), (1, 2), (6, 5), (9, 1)];
        // tests at steps 2 (small side 3 <= n_star 4) and 4 (large)
        let ps = [0.0, 0.5, 0.0, 0.001, 0.0];
        let est = spend_alpha(&sizes, &schedule, 2, 4, |t| Ok(ps[t - 1])).unwrap();
        assert_eq!(est.steps[1].alpha_used, Some(*schedule.alphas.last().unwrap()));
        assert_eq!(est.steps[3].alpha_used, Some(schedule.alphas[0]));
        assert_eq!(est.stop_step, Some(4));
        assert_eq!(est.k_hat, 6 - 4 + 1);
        assert_eq!(est.steps.len(), 4);
        assert_eq!(est.steps[2].decision, StepDecision::SkippedSmall);
    }

    #[test]
    fn degenerate_merges_keep_the_budget() {
        let schedule = alpha_sequence(4, 0.05, 0.5).unwrap();
        let sizes = [(2, 2), (2, 2), (4, 4)];
        let est = spend_alpha(&sizes, &schedule, 1, 0, |t| {
            if t == 1 {
                Err(Error::DegenerateData("flat".into()))
            } else {
                Ok(0.9)
            }
        })
        .unwrap();
        assert_eq!(est.steps[0].decision, StepDecision::SkippedDegenerate);
        assert_eq!(est.steps[1].alpha_used, Some(schedule.alphas[0]));
        assert_eq!(est.k_hat, 1);
        assert!(est.alpha_consumed <= 0.05 + 1e-15);
    }

    #[test]
    fn uniform_stub_controls_fwer() {
        let n = 30;
        let schedule = alpha_sequence(n, 0.05, 0.5).unwrap();
        let sizes: Vec<(usize, usize)> = (1..n).map(|t| (t.min(5) + 1, t + 1)).collect();
        let mut rng = SimRng::new(99);
        let reps = 20_000;
        let mut rejections = 0;
        for _ in 0..reps {
            let est = spend_alpha(&sizes, &schedule, 2, 4, |_| Ok(rng.uniform())).unwrap();
            if est.k_hat > 1 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        let se = (0.05 * 0.95 / reps as f64).sqrt();
        assert!(rate <= 0.05 + 3.0 * se, "rate {rate}");
    }

    #[test]
    fn large_n_min_never_tests() {
        let (x, _) = generate_two_cluster(12, 8.0, 1.0, 2, 3).unwrap();
        let config = SelectionConfig {
            n_min: SizeCutoff::Absolute(6),
            ..SelectionConfig::default()
        };
        let (est, trace) =
            estimate_k(&x, Linkage::Complete, 0.1, &config, 3, &TestOptions::default()).unwrap();
        assert_eq!(est.k_hat, 1);
        assert_eq!(est.tested().count(), 0);
        assert_eq!(trace.len(), 11);
    }

    #[test]
    fn zero_budget_never_rejects() {
        let schedule = alpha_sequence(5, 0.0, 0.5).unwrap();
        let est = spend_alpha(&[(3, 3); 4], &schedule, 1, 1, |_| Ok(0.0)).unwrap();
        assert_eq!(est.k_hat, 1);
    }
}
