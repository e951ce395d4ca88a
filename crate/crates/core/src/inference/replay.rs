//! Replaying a recorded merge sequence on reconstructed data.
//!
//! Cluster states come from the recorded member sets only, so the candidate
//! sets match the original run at every step; the dissimilarities and the
//! realized temperatures are recomputed from the data under evaluation.

use ndarray::Array2;

use super::{AuxiliaryStats, ContrastVector, Reconstruction};
use crate::engine::{MergeTrace, StepSoftmax};
use crate::error::{invalid, Result};
use crate::linkage::{fill_pairwise, refresh_rows, Linkage, LinkageTable};

/// The first `t` merges of a trace, as slot pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayPlan {
    linkage: Linkage,
    tau: f64,
    n: usize,
    merges: Vec<(usize, usize)>,
    last: (Vec<usize>, Vec<usize>),
}

impl ReplayPlan {
    /// Validates the first `step` records of `trace` as a nested partition
    /// sequence.
    pub fn from_trace(trace: &MergeTrace, step: usize) -> Result<Self> {
        let tau = trace.config.tau;
        if !(tau > 0.0 && tau.is_finite()) {
            return invalid(
                "selective inference needs a randomized trace (tau > 0); use the naive test otherwise",
            );
        }
        trace.record(step)?;
        let n = trace.n;
        let mut owner: Vec<usize> = (0..n).collect();
        let mut size = vec![1usize; n];
        let mut merges = Vec::with_capacity(step);
        for (s, record) in trace.records[..step].iter().enumerate() {
            let mut slots = [0usize; 2];
            for (k, members) in [&record.members_a, &record.members_b].into_iter().enumerate() {
                let slot = match members.iter().min() {
                    Some(&m) if m < n => owner[m],
                    _ => return invalid(format!("record {} has an invalid member set", s + 1)),
                };
                if size[slot] != members.len()
                    || members.iter().any(|&i| i >= n || owner[i] != slot)
                {
                    return invalid(format!(
                        "record {} does not match the partition built from earlier records",
                        s + 1
                    ));
                }
                slots[k] = slot;
            }
            let (a, b) = (slots[0].min(slots[1]), slots[0].max(slots[1]));
            if a == b {
                return invalid(format!("record {} merges a cluster with itself", s + 1));
            }
            for o in owner.iter_mut() {
                if *o == b {
                    *o = a;
                }
            }
            size[a] += size[b];
            merges.push((a, b));
        }
        let last = trace.record(step)?;
        Ok(ReplayPlan {
            linkage: trace.config.linkage,
            tau,
            n,
            merges,
            last: (sorted(&last.members_a), sorted(&last.members_b)),
        })
    }

    /// Same merges with a different randomization level.
    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return invalid(format!("tau must be positive, got {tau}"));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.merges.len()
    }

    pub(crate) fn check_contrast(&self, nu: &ContrastVector) -> Result<()> {
        let (a, b) = (sorted(nu.c1()), sorted(nu.c2()));
        let (ra, rb) = &self.last;
        if nu.nu.len() != self.n || !((&a, &b) == (ra, rb) || (&a, &b) == (rb, ra)) {
            return invalid("the tested clusters differ from the merge recorded at this step");
        }
        Ok(())
    }

    pub(crate) fn replayer<'a, R: Reconstruction>(&'a self, recon: &'a R) -> Replayer<'a, R> {
        let base = recon.base();
        let mut template = vec![0.0; self.n * self.n];
        fill_pairwise(base, &mut template);
        Replayer {
            plan: self,
            recon,
            moving: recon.moving_rows(),
            template,
        }
    }

    /// Log-probability of the recorded merges on the data reconstructed at
    /// `stat`.
    pub(crate) fn log_weight<R: Reconstruction>(&self, recon: &R, stat: f64) -> Result<f64> {
        self.check_contrast(recon.contrast())?;
        let replayer = self.replayer(recon);
        let mut ws = replayer.workspace();
        replayer.log_weight(&mut ws, stat)
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

pub(crate) struct Replayer<'a, R> {
    plan: &'a ReplayPlan,
    recon: &'a R,
    moving: Vec<usize>,
    template: Vec<f64>,
}

/// Per-worker scratch space for replays.
pub(crate) struct Workspace {
    values: Array2<f64>,
    dist: Vec<f64>,
    table: LinkageTable,
    pairs: Vec<f64>,
}

impl<R: Reconstruction> Replayer<'_, R> {
    pub fn workspace(&self) -> Workspace {
        let n = self.plan.n;
        Workspace {
            values: self.recon.base().clone(),
            dist: self.template.clone(),
            table: LinkageTable::empty(self.plan.linkage, n),
            pairs: Vec::with_capacity(n * (n - 1) / 2),
        }
    }

    pub fn log_weight(&self, ws: &mut Workspace, stat: f64) -> Result<f64> {
        self.recon.fill_rows(stat, &mut ws.values);
        // Distances among fixed rows never change, so only the moving rows
        // are refreshed.
        refresh_rows(&ws.values, &self.moving, &mut ws.dist);
        ws.table.reset(&ws.dist);
        let mut total = 0.0;
        for &(a, b) in &self.plan.merges {
            ws.table.pair_values_into(&mut ws.pairs);
            let step = StepSoftmax::new(&ws.pairs, self.plan.tau);
            total += step.log_prob(ws.table.value(a, b));
            ws.table.merge(a, b)?;
        }
        Ok(total)
    }
}

/// `ln ∏_{s <= t} p^(s)(M_o^(s); X(r))`: the log-probability that the
/// randomized clusterer reproduces the first `t` recorded merges on `X(r)`.
pub fn sequence_log_weight(
    r: f64,
    aux: &AuxiliaryStats,
    trace: &MergeTrace,
    t: usize,
) -> Result<f64> {
    if !(r >= 0.0) {
        return invalid(format!("statistic must be non-negative, got {r}"));
    }
    ReplayPlan::from_trace(trace, t)?.log_weight(aux, r)
}

/// [`sequence_log_weight`] for an explicit plan, e.g. with an overridden tau.
pub fn plan_log_weight(plan: &ReplayPlan, r: f64, aux: &AuxiliaryStats) -> Result<f64> {
    plan.log_weight(aux, r)
}
