//! Selective tests for a single merge of a randomized clustering run.
//!
//! The F pipeline treats the noise scale as unknown: the data are split into
//! the test statistic `R` and auxiliary statistics that, together with `R`,
//! reconstruct the data exactly. Conditioning on the auxiliary statistics and
//! on the recorded merge sequence leaves a one-dimensional law whose density
//! is the F density times the probability that the randomized clusterer would
//! have produced the same merges on the reconstructed data. The χ pipeline is
//! the analogue for a known covariance.

mod chi;
mod replay;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::distributions::{BaseLaw, FisherF};
use crate::engine::MergeTrace;
use crate::error::{invalid, Error, Result};
use crate::quadrature::{weighted_cdf, Integrated, QuadratureConfig, QuadratureDiagnostics};

pub use chi::{
    chi_statistic, conditional_cdf_chi_many, p_value_chi, pooled_variance, reconstruct_chi,
    ChiAuxiliaryStats, Covariance,
};
pub use replay::{plan_log_weight, sequence_log_weight, ReplayPlan};

/// Which weight the conditional law carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Probability of the recorded merge sequence on the reconstructed data.
    #[default]
    Selective,
    /// Constant weight: the uncorrected (naive) test.
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOptions {
    pub quad: QuadratureConfig,
    pub weight: WeightMode,
}

impl TestOptions {
    pub fn naive() -> Self {
        TestOptions {
            weight: WeightMode::Constant,
            ..TestOptions::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    F,
    Chi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub variant: Variant,
    pub weight: WeightMode,
    /// `R` for the F test, `U` for the χ test.
    pub statistic: f64,
    pub p_value: f64,
    pub step: usize,
    pub sizes: (usize, usize),
    pub diagnostics: QuadratureDiagnostics,
}

impl TestResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `ν` with `1/|C1|` on `C1`, `-1/|C2|` on `C2` and zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastVector {
    pub nu: Vec<f64>,
    pub norm_sq: f64,
    c1: Vec<usize>,
    c2: Vec<usize>,
}

impl ContrastVector {
    pub fn c1(&self) -> &[usize] {
        &self.c1
    }

    pub fn c2(&self) -> &[usize] {
        &self.c2
    }

    /// Rows with a non-zero entry, ascending.
    pub fn support(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.c1.iter().chain(&self.c2).copied().collect();
        rows.sort_unstable();
        rows
    }

    /// `νᵀX`, the difference of the two cluster means.
    pub fn apply(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; x.ncols()];
        for &i in self.c1.iter().chain(&self.c2) {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += self.nu[i] * v;
            }
        }
        out
    }
}

pub fn contrast_vector(c1: &[usize], c2: &[usize], n: usize) -> Result<ContrastVector> {
    if c1.is_empty() || c2.is_empty() {
        return invalid("contrast needs two non-empty clusters");
    }
    let mut nu = vec![0.0; n];
    let (w1, w2) = (1.0 / c1.len() as f64, 1.0 / c2.len() as f64);
    for (set, w) in [(c1, w1), (c2, -w2)] {
        for &i in set {
            if i >= n {
                return invalid(format!("index {i} out of range for n = {n}"));
            }
            if nu[i] != 0.0 {
                return invalid(format!("index {i} appears twice in the merged clusters"));
            }
            nu[i] = w;
        }
    }
    Ok(ContrastVector {
        nu,
        norm_sq: w1 + w2,
        c1: c1.to_vec(),
        c2: c2.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FStatistic {
    pub r: f64,
    pub bcss: f64,
    pub wcss: f64,
}

struct Split {
    nu: ContrastVector,
    mean1: Vec<f64>,
    mean2: Vec<f64>,
    bcss: f64,
    wcss: f64,
}

fn column_mean(x: &Array2<f64>, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; x.ncols()];
    for &i in rows {
        for (a, v) in m.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    let k = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= k);
    m
}

fn split(x: &DataMatrix, c1: &[usize], c2: &[usize]) -> Result<Split> {
    let nu = contrast_vector(c1, c2, x.n())?;
    let big_n = c1.len() + c2.len();
    if big_n < 3 {
        return invalid(format!("the merged clusters need at least 3 points, got {big_n}"));
    }
    let v = x.values();
    let mean1 = column_mean(v, c1);
    let mean2 = column_mean(v, c2);
    let (n1, n2) = (c1.len() as f64, c2.len() as f64);
    let gap: f64 = mean1.iter().zip(&mean2).map(|(a, b)| (a - b) * (a - b)).sum();
    let bcss = n1 * n2 / big_n as f64 * gap;
    let mut wcss = 0.0;
    let mut scale = 0.0;
    for (rows, mean) in [(c1, &mean1), (c2, &mean2)] {
        for &i in rows {
            for (val, m) in v.row(i).iter().zip(mean.iter()) {
                wcss += (val - m) * (val - m);
                scale += val * val;
            }
        }
    }
    if !(wcss > 1e-24 * scale) {
        return Err(Error::DegenerateData(
            "within-cluster sum of squares is zero for the merged clusters".into(),
        ));
    }
    Ok(Split {
        nu,
        mean1,
        mean2,
        bcss,
        wcss,
    })
}

/// `R = (N - 2) BCSS / WCSS` for the union of `c1` and `c2`.
pub fn f_statistic(x: &DataMatrix, c1: &[usize], c2: &[usize]) -> Result<FStatistic> {
    let s = split(x, c1, c2)?;
    let big_n = (c1.len() + c2.len()) as f64;
    Ok(FStatistic {
        r: (big_n - 2.0) * s.bcss / s.wcss,
        bcss: s.bcss,
        wcss: s.wcss,
    })
}

/// Directions of the between- and within-cluster parts of `X`, their total
/// energy and the remainder, which together with `R` determine `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryStats {
    pub eta: Array2<f64>,
    pub gamma: Array2<f64>,
    pub delta: f64,
    pub gamma_resid: Array2<f64>,
    pub n_merged: usize,
    pub p: usize,
    nu: ContrastVector,
}

impl AuxiliaryStats {
    pub fn contrast(&self) -> &ContrastVector {
        &self.nu
    }

    /// Degrees of freedom of the F law of `R`.
    pub fn f_dof(&self) -> (f64, f64) {
        let p = self.p as f64;
        (p, (self.n_merged as f64 - 2.0) * p)
    }

    fn coefficients(&self, r: f64) -> (f64, f64) {
        let m = self.n_merged as f64 - 2.0;
        let root = self.delta.sqrt();
        if r.is_infinite() {
            return (root, 0.0);
        }
        (root * (r / (m + r)).sqrt(), root * (m / (m + r)).sqrt())
    }
}

pub fn auxiliary_stats(x: &DataMatrix, c1: &[usize], c2: &[usize]) -> Result<AuxiliaryStats> {
    let s = split(x, c1, c2)?;
    if !(s.bcss > 0.0) {
        return Err(Error::DegenerateData(
            "between-cluster sum of squares is zero; its direction is undefined".into(),
        ));
    }
    let v = x.values();
    let (n, p) = (x.n(), x.p());
    let big_n = (c1.len() + c2.len()) as f64;
    let (n1, n2) = (c1.len() as f64, c2.len() as f64);
    let mut eta = Array2::zeros((n, p));
    let mut gamma = Array2::zeros((n, p));
    let mut resid = v.clone();
    let (b_norm, w_norm) = (s.bcss.sqrt(), s.wcss.sqrt());
    let pooled: Vec<f64> = s
        .mean1
        .iter()
        .zip(&s.mean2)
        .map(|(a, b)| (n1 * a + n2 * b) / big_n)
        .collect();
    for (rows, mean, share) in [(c1, &s.mean1, n2 / big_n), (c2, &s.mean2, -n1 / big_n)] {
        for &i in rows {
            for j in 0..p {
                let diff = s.mean1[j] - s.mean2[j];
                eta[[i, j]] = share * diff / b_norm;
                gamma[[i, j]] = (v[[i, j]] - mean[j]) / w_norm;
                resid[[i, j]] = pooled[j];
            }
        }
    }
    Ok(AuxiliaryStats {
        eta,
        gamma,
        delta: s.bcss + s.wcss,
        gamma_resid: resid,
        n_merged: c1.len() + c2.len(),
        p,
        nu: s.nu,
    })
}

/// `X(r)`: the data with the F statistic moved to `r` and everything else held.
pub fn reconstruct_f(r: f64, aux: &AuxiliaryStats) -> Result<DataMatrix> {
    if !(r >= 0.0) {
        return invalid(format!("statistic must be non-negative, got {r}"));
    }
    let mut out = aux.gamma_resid.clone();
    aux.fill_rows(r, &mut out);
    DataMatrix::new(out)
}

/// Data reconstruction along a one-dimensional statistic.
pub(crate) trait Reconstruction: Sync {
    /// Rows that depend on the statistic, ascending.
    fn moving_rows(&self) -> Vec<usize>;
    /// Any matrix whose fixed rows equal the data.
    fn base(&self) -> &Array2<f64>;
    /// Overwrites the moving rows of `out` with their values at `stat`.
    fn fill_rows(&self, stat: f64, out: &mut Array2<f64>);
    /// The merged clusters.
    fn contrast(&self) -> &ContrastVector;
}

impl Reconstruction for AuxiliaryStats {
    fn moving_rows(&self) -> Vec<usize> {
        self.nu.support()
    }

    fn base(&self) -> &Array2<f64> {
        &self.gamma_resid
    }

    fn fill_rows(&self, r: f64, out: &mut Array2<f64>) {
        let (a, b) = self.coefficients(r);
        for &i in self.nu.c1.iter().chain(&self.nu.c2) {
            for j in 0..self.p {
                out[[i, j]] =
                    self.gamma_resid[[i, j]] + a * self.eta[[i, j]] + b * self.gamma[[i, j]];
            }
        }
    }

    fn contrast(&self) -> &ContrastVector {
        &self.nu
    }
}

/// Weighted CDF of `law` at sorted `points`, replaying `trace` up to `step`
/// on the reconstructed data at every quadrature node.
pub(crate) fn conditional_integral<L: BaseLaw, R: Reconstruction>(
    law: &L,
    recon: &R,
    trace: &MergeTrace,
    step: usize,
    points: &[f64],
    options: &TestOptions,
) -> Result<Integrated> {
    match options.weight {
        WeightMode::Constant => weighted_cdf(law, points, &options.quad, || (), |_, _| Ok(0.0)),
        WeightMode::Selective => {
            let plan = ReplayPlan::from_trace(trace, step)?;
            plan.check_contrast(recon.contrast())?;
            let replayer = plan.replayer(recon);
            weighted_cdf(
                law,
                points,
                &options.quad,
                || replayer.workspace(),
                |ws, stat| replayer.log_weight(ws, stat),
            )
        }
    }
}

/// Conditional CDFs at several statistic values, in input order.
pub(crate) fn conditional_cdf_at<L: BaseLaw, R: Reconstruction>(
    law: &L,
    recon: &R,
    trace: &MergeTrace,
    step: usize,
    points: &[f64],
    options: &TestOptions,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| points[k]).collect();
    let out = conditional_integral(law, recon, trace, step, &sorted, options)?;
    let mut cdf = vec![0.0; points.len()];
    for (k, &i) in order.iter().enumerate() {
        cdf[i] = out.cdf[k];
    }
    Ok(cdf)
}

/// Conditional CDF of `R` at `r`, given the auxiliary statistics and the
/// first `step` merges of `trace`.
pub fn conditional_cdf_f(
    r: f64,
    aux: &AuxiliaryStats,
    trace: &MergeTrace,
    step: usize,
    options: &TestOptions,
) -> Result<f64> {
    Ok(conditional_cdf_f_many(&[r], aux, trace, step, options)?[0])
}

/// [`conditional_cdf_f`] at several points from one set of replays.
pub fn conditional_cdf_f_many(
    rs: &[f64],
    aux: &AuxiliaryStats,
    trace: &MergeTrace,
    step: usize,
    options: &TestOptions,
) -> Result<Vec<f64>> {
    if rs.iter().any(|r| !(*r >= 0.0)) {
        return invalid("statistic values must be non-negative");
    }
    let (d1, d2) = aux.f_dof();
    conditional_cdf_at(&FisherF::new(d1, d2)?, aux, trace, step, rs, options)
}

/// Selective F test of the merge recorded at `step` (1-based) of `trace`.
pub fn p_value_f(
    x: &DataMatrix,
    trace: &MergeTrace,
    step: usize,
    options: &TestOptions,
) -> Result<TestResult> {
    if trace.n != x.n() {
        return invalid(format!("trace covers {} points, data has {}", trace.n, x.n()));
    }
    let record = trace.record(step)?;
    let (c1, c2) = (&record.members_a, &record.members_b);
    let stat = f_statistic(x, c1, c2)?;
    let aux = auxiliary_stats(x, c1, c2)?;
    let (d1, d2) = aux.f_dof();
    let law = FisherF::new(d1, d2)?;
    let out = conditional_integral(&law, &aux, trace, step, &[stat.r], options)?;
    Ok(TestResult {
        variant: Variant::F,
        weight: options.weight,
        statistic: stat.r,
        p_value: out.sf[0],
        step,
        sizes: (c1.len(), c2.len()),
        diagnostics: out.diagnostics,
    })
}
