//! Simulation drivers for calibration, power, FWER, K̂ and stability studies.
//!
//! Replication `r` of an experiment with master seed `s` draws everything
//! from `derive_seed(s, r)`, split further into data, clustering and
//! reference substreams. Replications run in parallel and are collected in
//! index order, so output files do not depend on scheduling.

mod output;

pub use output::{write_experiment, Manifest, Table, SCHEMA_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_circular, generate_three_cluster, generate_two_cluster, DataMatrix, GroundTruth,
};
use crate::engine::{run_clustering, MergeTrace, RandomizationConfig};
use crate::error::{invalid, Error, Result};
use crate::inference::{p_value_f, TestOptions, WeightMode};
use crate::linkage::{linkage_dissimilarity, pairwise_dissimilarity, Linkage};
use crate::metrics::{ari, cooccurrence, gap_statistic, wcss_tss, CooccurrenceMatrix, GapConfig};
use crate::quadrature::QuadratureConfig;
use crate::rng::{derive_seed, streams};
use crate::selection::{estimate_k, SelectionConfig};

/// Randomization levels RC(0) through RC(7).
pub const TAU_GRID: [f64; 8] = [0.0, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorSpec {
    TwoCluster { n: usize, delta: f64, sigma: f64, p: usize },
    ThreeCluster { n: usize, delta: f64, sigma: f64 },
    Circular { n: usize, k_star: usize, radius: f64, sigma: f64 },
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<(DataMatrix, GroundTruth)> {
        match *self {
            GeneratorSpec::TwoCluster { n, delta, sigma, p } => {
                generate_two_cluster(n, delta, sigma, p, seed)
            }
            GeneratorSpec::ThreeCluster { n, delta, sigma } => {
                generate_three_cluster(n, delta, sigma, seed)
            }
            GeneratorSpec::Circular { n, k_star, radius, sigma } => {
                generate_circular(n, k_star, radius, sigma, seed)
            }
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            GeneratorSpec::TwoCluster { n, .. }
            | GeneratorSpec::ThreeCluster { n, .. }
            | GeneratorSpec::Circular { n, .. } => n,
        }
    }

    pub fn k_star(&self) -> usize {
        match *self {
            GeneratorSpec::TwoCluster { delta, .. } | GeneratorSpec::ThreeCluster { delta, .. } => {
                if delta == 0.0 {
                    1
                } else if matches!(self, GeneratorSpec::TwoCluster { .. }) {
                    2
                } else {
                    3
                }
            }
            GeneratorSpec::Circular { k_star, .. } => k_star,
        }
    }
}

/// Seeds of one replication.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplicationSeeds {
    pub data: u64,
    pub cluster: u64,
    pub reference: u64,
}

impl ReplicationSeeds {
    pub fn new(master: u64, replication: usize) -> Self {
        let base = derive_seed(master, replication as u64);
        ReplicationSeeds {
            data: derive_seed(base, streams::DATA),
            cluster: derive_seed(base, streams::CLUSTER),
            reference: derive_seed(base, streams::REFERENCE),
        }
    }
}

fn replicate<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

fn check_replications(r: usize) -> Result<()> {
    if r < 1 {
        return invalid("replications must be at least 1");
    }
    Ok(())
}

fn scale_count(count: usize, divisor: usize) -> usize {
    count.div_ceil(divisor.max(1)).max(1)
}

/// Options of the tested merge: the randomized clusterer with selective
/// weights, or the deterministic clusterer with the plain F test.
fn method(tau: f64, naive: bool, quad: QuadratureConfig) -> (f64, TestOptions) {
    if naive {
        (0.0, TestOptions { quad, weight: WeightMode::Constant })
    } else {
        (tau, TestOptions { quad, weight: WeightMode::Selective })
    }
}

// ---------------------------------------------------------------- null calibration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullCalibrationSpec {
    pub replications: usize,
    pub generator: GeneratorSpec,
    /// Clusters at which the last merge is tested.
    pub k: usize,
    pub linkage: Linkage,
    pub tau: f64,
    pub naive: bool,
    pub alpha: f64,
    pub batch_size: usize,
    pub quad: QuadratureConfig,
    pub seed: u64,
}

impl Default for NullCalibrationSpec {
    fn default() -> Self {
        NullCalibrationSpec {
            replications: 2000,
            generator: GeneratorSpec::TwoCluster { n: 30, delta: 0.0, sigma: 1.0, p: 10 },
            k: 2,
            linkage: Linkage::Complete,
            tau: 0.1,
            naive: false,
            alpha: 0.05,
            batch_size: 200,
            quad: QuadratureConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PValueRow {
    pub replication: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EcdfRow {
    pub x: f64,
    pub ecdf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRow {
    pub batch: usize,
    pub trials: usize,
    pub rejections: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NullCalibrationReport {
    pub p_values: Vec<PValueRow>,
    /// Replications whose tested merge had degenerate data.
    pub skipped: usize,
    pub ks: f64,
    pub type_one: f64,
    pub ecdf: Vec<EcdfRow>,
    pub batches: Vec<BatchRow>,
}

/// Kolmogorov–Smirnov distance between the empirical law of `values` and
/// the uniform law on `[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / m - x).max(x - i as f64 / m)
        })
        .fold(0.0, f64::max)
}

pub fn ecdf_grid(values: &[f64], points: usize) -> Vec<EcdfRow> {
    let m = values.len().max(1) as f64;
    (0..=points)
        .map(|i| {
            let x = i as f64 / points as f64;
            let below = values.iter().filter(|&&v| v <= x).count();
            EcdfRow { x, ecdf: below as f64 / m }
        })
        .collect()
}

/// Tests the merge that brings the clustering from `k` to `k - 1` clusters
/// on data generated under the global null.
pub fn run_null_calibration(spec: &NullCalibrationSpec) -> Result<NullCalibrationReport> {
    check_replications(spec.replications)?;
    if spec.generator.k_star() != 1 {
        return invalid("null calibration needs a generator with a single true cluster");
    }
    let n = spec.generator.n();
    if spec.k < 2 || spec.k > n {
        return invalid(format!("k must be in 2..={n}, got {}", spec.k));
    }
    let (tau, options) = method(spec.tau, spec.naive, spec.quad);
    let step = n - spec.k + 1;
    let results = replicate(spec.replications, |r| {
        let seeds = ReplicationSeeds::new(spec.seed, r);
        let (x, _) = spec.generator.generate(seeds.data)?;
        let config = RandomizationConfig::new(tau, spec.linkage, seeds.cluster)?;
        let trace = run_clustering(&x, spec.k - 1, &config)?;
        match p_value_f(&x, &trace, step, &options) {
            Ok(t) => Ok(Some(PValueRow {
                replication: r,
                statistic: t.statistic,
                p_value: t.p_value,
            })),
            Err(Error::DegenerateData(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let p_values: Vec<PValueRow> = results.into_iter().flatten().collect();
    let ps: Vec<f64> = p_values.iter().map(|r| r.p_value).collect();
    if ps.is_empty() {
        return Err(Error::DegenerateData("every replication was degenerate".into()));
    }
    let rejections = |rows: &[PValueRow]| rows.iter().filter(|r| r.p_value < spec.alpha).count();
    let batch = spec.batch_size.max(1);
    let batches = p_values
        .chunks_exact(batch)
        .enumerate()
        .map(|(b, rows)| {
            let k = rejections(rows);
            BatchRow {
                batch: b,
                trials: rows.len(),
                rejections: k,
                rate: k as f64 / rows.len() as f64,
            }
        })
        .collect();
    Ok(NullCalibrationReport {
        ks: ks_uniform(&ps),
        type_one: rejections(&p_values) as f64 / ps.len() as f64,
        ecdf: ecdf_grid(&ps, 100),
        batches,
        skipped,
        p_values,
    })
}

// ---------------------------------------------------------------- power

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    /// Replications per separation.
    pub replications: usize,
    pub deltas: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub linkage: Linkage,
    pub tau: f64,
    pub alpha: f64,
    pub bins: usize,
    pub quad: QuadratureConfig,
    pub seed: u64,
}

impl Default for PowerSpec {
    fn default() -> Self {
        PowerSpec {
            replications: 2000,
            deltas: (1..=10).map(f64::from).collect(),
            n: 30,
            p: 10,
            sigma: 1.0,
            linkage: Linkage::Complete,
            tau: 0.1,
            alpha: 0.05,
            bins: 10,
            quad: QuadratureConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerTrial {
    pub delta: f64,
    pub replication: usize,
    pub effect_size: f64,
    pub p_value: f64,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerBin {
    pub lo: f64,
    pub hi: f64,
    pub rejections: usize,
    pub trials: usize,
    pub power: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerReport {
    pub trials: Vec<PowerTrial>,
    pub bins: Vec<PowerBin>,
}

/// Linkage dissimilarity between the true-mean rows of the two clusters.
pub fn effect_size(truth: &GroundTruth, linkage: Linkage, c1: &[usize], c2: &[usize]) -> Result<f64> {
    let mu = truth
        .mu
        .clone()
        .ok_or_else(|| Error::InvalidArgument("ground truth carries no means".into()))?;
    let d = pairwise_dissimilarity(&DataMatrix::new(mu)?);
    linkage_dissimilarity(linkage, c1, c2, &d)
}

/// Equal-width bins over `[min, max]` of the effect sizes with 95% normal
/// intervals clamped to `[0, 1]`.
pub fn bin_power(trials: &[PowerTrial], bins: usize) -> Vec<PowerBin> {
    if trials.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = trials.iter().map(|t| t.effect_size).fold(f64::INFINITY, f64::min);
    let hi = trials.iter().map(|t| t.effect_size).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![(0usize, 0usize); bins];
    for t in trials {
        let b = (((t.effect_size - lo) / width) as usize).min(bins - 1);
        counts[b].1 += 1;
        counts[b].0 += usize::from(t.rejected);
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &(k, m))| {
            let power = if m > 0 { k as f64 / m as f64 } else { 0.0 };
            let half = if m > 0 {
                1.96 * (power * (1.0 - power) / m as f64).sqrt()
            } else {
                0.0
            };
            PowerBin {
                lo: lo + b as f64 * width,
                hi: lo + (b + 1) as f64 * width,
                rejections: k,
                trials: m,
                power,
                ci_lo: (power - half).max(0.0),
                ci_hi: (power + half).min(1.0),
            }
        })
        .collect()
}

pub fn run_power_curve(spec: &PowerSpec) -> Result<PowerReport> {
    check_replications(spec.replications)?;
    let options = TestOptions { quad: spec.quad, weight: WeightMode::Selective };
    let jobs: Vec<(usize, f64)> = spec
        .deltas
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| (0..spec.replications).map(move |_| (i, d)))
        .collect();
    let trials = replicate(jobs.len(), |j| {
        let (_, delta) = jobs[j];
        let seeds = ReplicationSeeds::new(spec.seed, j);
        let (x, truth) = generate_two_cluster(spec.n, delta, spec.sigma, spec.p, seeds.data)?;
        let config = RandomizationConfig::new(spec.tau, spec.linkage, seeds.cluster)?;
        let trace = run_clustering(&x, 1, &config)?;
        let step = spec.n - 1;
        let rec = trace.record(step)?;
        let es = effect_size(&truth, spec.linkage, &rec.members_a, &rec.members_b)?;
        match p_value_f(&x, &trace, step, &options) {
            Ok(t) => Ok(Some(PowerTrial {
                delta,
                replication: j % spec.replications,
                effect_size: es,
                p_value: t.p_value,
                rejected: t.p_value < spec.alpha,
            })),
            Err(Error::DegenerateData(_)) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    let trials: Vec<PowerTrial> = trials.into_iter().flatten().collect();
    Ok(PowerReport {
        bins: bin_power(&trials, spec.bins),
        trials,
    })
}

// ---------------------------------------------------------------- FWER

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwerSpec {
    pub replications: usize,
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub taus: Vec<f64>,
    pub include_naive: bool,
    pub linkage: Linkage,
    pub selection: SelectionConfig,
    pub quad: QuadratureConfig,
    pub seed: u64,
}

impl Default for FwerSpec {
    fn default() -> Self {
        FwerSpec {
            replications: 2000,
            n: 30,
            p: 2,
            sigma: 1.0,
            taus: TAU_GRID[1..].to_vec(),
            include_naive: true,
            linkage: Linkage::Complete,
            selection: SelectionConfig::default(),
            quad: QuadratureConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FwerRow {
    pub method: String,
    pub tau: f64,
    pub replications: usize,
    pub false_rejections: usize,
    pub fwer: f64,
    pub std_error: f64,
}

/// Fraction of global-null replications with `K̂ > 1`, per method.
pub fn run_fwer(spec: &FwerSpec) -> Result<Vec<FwerRow>> {
    check_replications(spec.replications)?;
    let mut methods: Vec<(String, f64, bool)> = Vec::new();
    if spec.include_naive {
        methods.push(("naive".into(), 0.0, true));
    }
    for &tau in &spec.taus {
        if !(tau > 0.0) {
            return invalid(format!("randomized methods need tau > 0, got {tau}"));
        }
        methods.push((format!("rc(tau={tau})"), tau, false));
    }
    let outcomes = replicate(spec.replications, |r| {
        let seeds = ReplicationSeeds::new(spec.seed, r);
        let (x, _) = generate_two_cluster(spec.n, 0.0, spec.sigma, spec.p, seeds.data)?;
        methods
            .iter()
            .map(|(_, tau, naive)| {
                let (tau, options) = method(*tau, *naive, spec.quad);
                let (est, _) =
                    estimate_k(&x, spec.linkage, tau, &spec.selection, seeds.cluster, &options)?;
                Ok(est.k_hat > 1)
            })
            .collect::<Result<Vec<bool>>>()
    })?;
    let m = spec.replications as f64;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(i, (name, tau, _))| {
            let k = outcomes.iter().filter(|o| o[i]).count();
            let f = k as f64 / m;
            FwerRow {
                method: name.clone(),
                tau: *tau,
                replications: spec.replications,
                false_rejections: k,
                fwer: f,
                std_error: (f * (1.0 - f) / m).sqrt(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------- K̂ histograms

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KHistogramSpec {
    pub replications: usize,
    pub generator: GeneratorSpec,
    pub linkage: Linkage,
    pub tau: f64,
    pub selection: SelectionConfig,
    pub gap_k_max: usize,
    pub gap_refs: usize,
    pub quad: QuadratureConfig,
    pub seed: u64,
}

impl Default for KHistogramSpec {
    fn default() -> Self {
        KHistogramSpec {
            replications: 100,
            generator: GeneratorSpec::ThreeCluster { n: 30, delta: 14.0, sigma: 1.0 },
            linkage: Linkage::Complete,
            tau: 0.1,
            selection: SelectionConfig::default(),
            gap_k_max: 10,
            gap_refs: 50,
            quad: QuadratureConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KReplication {
    pub replication: usize,
    pub k_hat: usize,
    pub k_gap: usize,
    /// A merge among the first `n - K*` joined points with different labels.
    pub cross_merge: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KCount {
    pub k: usize,
    pub ours: usize,
    pub gap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KHistogramReport {
    pub k_star: usize,
    pub replications: Vec<KReplication>,
    pub counts: Vec<KCount>,
    /// Frequency of `{K̂ > K*}` together with no early cross merge.
    pub overestimate_without_cross: f64,
}

impl KHistogramReport {
    pub fn mode(&self) -> usize {
        self.counts
            .iter()
            .max_by(|a, b| a.ours.cmp(&b.ours).then(b.k.cmp(&a.k)))
            .map_or(0, |c| c.k)
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.frequency_by(k, |r| r.k_hat)
    }

    pub fn gap_frequency(&self, k: usize) -> f64 {
        self.frequency_by(k, |r| r.k_gap)
    }

    fn frequency_by(&self, k: usize, f: impl Fn(&KReplication) -> usize) -> f64 {
        let hits = self.replications.iter().filter(|r| f(r) == k).count();
        hits as f64 / self.replications.len().max(1) as f64
    }
}

/// Whether any of the first `t_star` merges joins points with different
/// true labels.
pub fn detect_cross_merge(trace: &MergeTrace, truth: &GroundTruth, t_star: usize) -> Result<bool> {
    if truth.labels.len() != trace.n {
        return invalid("ground truth and trace cover different points");
    }
    Ok(trace.records.iter().take(t_star).any(|r| {
        let first = truth.labels[r.members_a[0]];
        r.members_a
            .iter()
            .chain(&r.members_b)
            .any(|&i| truth.labels[i] != first)
    }))
}

pub fn run_k_histogram(spec: &KHistogramSpec) -> Result<KHistogramReport> {
    check_replications(spec.replications)?;
    let n = spec.generator.n();
    let k_star = spec.generator.k_star();
    let options = TestOptions { quad: spec.quad, weight: WeightMode::Selective };
    let rows = replicate(spec.replications, |r| {
        let seeds = ReplicationSeeds::new(spec.seed, r);
        let (x, truth) = spec.generator.generate(seeds.data)?;
        let (est, trace) =
            estimate_k(&x, spec.linkage, spec.tau, &spec.selection, seeds.cluster, &options)?;
        let gap = gap_statistic(
            &x,
            &GapConfig {
                k_max: spec.gap_k_max.min(n - 1),
                b_refs: spec.gap_refs,
                linkage: spec.linkage,
                seed: seeds.reference,
            },
        )?;
        Ok(KReplication {
            replication: r,
            k_hat: est.k_hat,
            k_gap: gap.k_hat,
            cross_merge: detect_cross_merge(&trace, &truth, n - k_star)?,
        })
    })?;
    let top = rows.iter().map(|r| r.k_hat.max(r.k_gap)).max().unwrap_or(1);
    let counts = (1..=top)
        .map(|k| KCount {
            k,
            ours: rows.iter().filter(|r| r.k_hat == k).count(),
            gap: rows.iter().filter(|r| r.k_gap == k).count(),
        })
        .collect();
    let over = rows.iter().filter(|r| r.k_hat > k_star && !r.cross_merge).count();
    Ok(KHistogramReport {
        k_star,
        overestimate_without_cross: over as f64 / rows.len() as f64,
        replications: rows,
        counts,
    })
}

// ---------------------------------------------------------------- stability

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySpec {
    pub runs: usize,
    pub k: usize,
    pub linkage: Linkage,
    pub tau: f64,
    pub seed: u64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        StabilitySpec {
            runs: 500,
            k: 2,
            linkage: Linkage::Complete,
            tau: 0.1,
            seed: 1,
        }
    }
}

/// Co-occurrence of `runs` randomized clusterings of `x` into `k` clusters.
pub fn run_stability(x: &DataMatrix, spec: &StabilitySpec) -> Result<CooccurrenceMatrix> {
    check_replications(spec.runs)?;
    let labels = replicate(spec.runs, |r| {
        let seed = ReplicationSeeds::new(spec.seed, r).cluster;
        let trace = run_clustering(x, spec.k, &RandomizationConfig::new(spec.tau, spec.linkage, seed)?)?;
        Ok(trace.labels)
    })?;
    cooccurrence(&labels)
}

/// K̂ from `runs` independent randomized runs on the same data.
pub fn repeat_estimate_k(
    x: &DataMatrix,
    runs: usize,
    linkage: Linkage,
    tau: f64,
    selection: &SelectionConfig,
    options: &TestOptions,
    seed: u64,
) -> Result<Vec<usize>> {
    check_replications(runs)?;
    replicate(runs, |r| {
        let seed = ReplicationSeeds::new(seed, r).cluster;
        Ok(estimate_k(x, linkage, tau, selection, seed, options)?.0.k_hat)
    })
}

/// Most frequent value, ties going to the smaller one.
pub fn mode(values: &[usize]) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

// ---------------------------------------------------------------- clustering quality

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySpec {
    pub replications: usize,
    pub generator: GeneratorSpec,
    pub taus: Vec<f64>,
    pub linkage: Linkage,
    pub seed: u64,
}

impl Default for QualitySpec {
    fn default() -> Self {
        QualitySpec {
            replications: 500,
            generator: GeneratorSpec::TwoCluster { n: 30, delta: 6.0, sigma: 1.0, p: 2 },
            taus: TAU_GRID.to_vec(),
            linkage: Linkage::Complete,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityRow {
    pub replication: usize,
    pub tau: f64,
    pub ari: f64,
    pub wcss_tss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualitySummary {
    pub tau: f64,
    pub ari_q1: f64,
    pub ari_median: f64,
    pub ari_q3: f64,
    pub ari_mean: f64,
    pub ratio_q1: f64,
    pub ratio_median: f64,
    pub ratio_q3: f64,
    pub ratio_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
    pub summary: Vec<QualitySummary>,
}

impl QualityReport {
    pub fn summary_for(&self, tau: f64) -> Option<&QualitySummary> {
        self.summary.iter().find(|s| s.tau == tau)
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn run_quality_sweep(spec: &QualitySpec) -> Result<QualityReport> {
    check_replications(spec.replications)?;
    let k = spec.generator.k_star();
    let per_rep = replicate(spec.replications, |r| {
        let seeds = ReplicationSeeds::new(spec.seed, r);
        let (x, truth) = spec.generator.generate(seeds.data)?;
        spec.taus
            .iter()
            .map(|&tau| {
                let config = RandomizationConfig::new(tau, spec.linkage, seeds.cluster)?;
                let trace = run_clustering(&x, k, &config)?;
                Ok(QualityRow {
                    replication: r,
                    tau,
                    ari: ari(&trace.labels, &truth.labels)?,
                    wcss_tss: wcss_tss(&x, &trace.labels)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<QualityRow> = per_rep.into_iter().flatten().collect();
    let summary = spec
        .taus
        .iter()
        .map(|&tau| {
            let a: Vec<f64> = rows.iter().filter(|r| r.tau == tau).map(|r| r.ari).collect();
            let w: Vec<f64> = rows.iter().filter(|r| r.tau == tau).map(|r| r.wcss_tss).collect();
            QualitySummary {
                tau,
                ari_q1: quantile(&a, 0.25),
                ari_median: quantile(&a, 0.5),
                ari_q3: quantile(&a, 0.75),
                ari_mean: a.iter().sum::<f64>() / a.len() as f64,
                ratio_q1: quantile(&w, 0.25),
                ratio_median: quantile(&w, 0.5),
                ratio_q3: quantile(&w, 0.75),
                ratio_mean: w.iter().sum::<f64>() / w.len() as f64,
            }
        })
        .collect();
    Ok(QualityReport { rows, summary })
}

// ---------------------------------------------------------------- dispatch

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentSpec {
    NullCalibration(NullCalibrationSpec),
    PowerCurve(PowerSpec),
    Fwer(FwerSpec),
    KHistogram(KHistogramSpec),
    Stability {
        generator: GeneratorSpec,
        #[serde(flatten)]
        spec: StabilitySpec,
    },
    QualitySweep(QualitySpec),
}

impl ExperimentSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentSpec::NullCalibration(_) => "null_calibration",
            ExperimentSpec::PowerCurve(_) => "power_curve",
            ExperimentSpec::Fwer(_) => "fwer",
            ExperimentSpec::KHistogram(_) => "k_histogram",
            ExperimentSpec::Stability { .. } => "stability",
            ExperimentSpec::QualitySweep(_) => "quality_sweep",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentSpec::NullCalibration(s) => s.seed,
            ExperimentSpec::PowerCurve(s) => s.seed,
            ExperimentSpec::Fwer(s) => s.seed,
            ExperimentSpec::KHistogram(s) => s.seed,
            ExperimentSpec::Stability { spec, .. } => spec.seed,
            ExperimentSpec::QualitySweep(s) => s.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ExperimentSpec::NullCalibration(s) => s.seed = seed,
            ExperimentSpec::PowerCurve(s) => s.seed = seed,
            ExperimentSpec::Fwer(s) => s.seed = seed,
            ExperimentSpec::KHistogram(s) => s.seed = seed,
            ExperimentSpec::Stability { spec, .. } => spec.seed = seed,
            ExperimentSpec::QualitySweep(s) => s.seed = seed,
        }
        self
    }

    /// Divides the replication count by `divisor`, rounding up.
    pub fn scaled(mut self, divisor: usize) -> Self {
        match &mut self {
            ExperimentSpec::NullCalibration(s) => {
                s.replications = scale_count(s.replications, divisor);
                s.batch_size = scale_count(s.batch_size, divisor);
            }
            ExperimentSpec::PowerCurve(s) => s.replications = scale_count(s.replications, divisor),
            ExperimentSpec::Fwer(s) => s.replications = scale_count(s.replications, divisor),
            ExperimentSpec::KHistogram(s) => s.replications = scale_count(s.replications, divisor),
            ExperimentSpec::Stability { spec, .. } => spec.runs = scale_count(spec.runs, divisor),
            ExperimentSpec::QualitySweep(s) => s.replications = scale_count(s.replications, divisor),
        }
        self
    }

    /// Runs the experiment and returns its tables and a JSON summary.
    pub fn run(&self) -> Result<(Vec<Table>, serde_json::Value)> {
        use serde_json::json;
        match self {
            ExperimentSpec::NullCalibration(s) => {
                let r = run_null_calibration(s)?;
                Ok((
                    vec![
                        Table::from_rows("p_values", &r.p_values)?,
                        Table::from_rows("ecdf", &r.ecdf)?,
                        Table::from_rows("type_one_batches", &r.batches)?,
                    ],
                    json!({ "ks": r.ks, "type_one": r.type_one, "skipped": r.skipped }),
                ))
            }
            ExperimentSpec::PowerCurve(s) => {
                let r = run_power_curve(s)?;
                Ok((
                    vec![
                        Table::from_rows("power_trials", &r.trials)?,
                        Table::from_rows("power_bins", &r.bins)?,
                    ],
                    json!({ "trials": r.trials.len() }),
                ))
            }
            ExperimentSpec::Fwer(s) => {
                let rows = run_fwer(s)?;
                let summary = json!(rows
                    .iter()
                    .map(|r| (r.method.clone(), r.fwer))
                    .collect::<std::collections::BTreeMap<_, _>>());
                Ok((vec![Table::from_rows("fwer", &rows)?], summary))
            }
            ExperimentSpec::KHistogram(s) => {
                let r = run_k_histogram(s)?;
                Ok((
                    vec![
                        Table::from_rows("k_replications", &r.replications)?,
                        Table::from_rows("k_histogram", &r.counts)?,
                    ],
                    json!({
                        "k_star": r.k_star,
                        "mode": r.mode(),
                        "overestimate_without_cross": r.overestimate_without_cross,
                    }),
                ))
            }
            ExperimentSpec::Stability { generator, spec } => {
                let (x, truth) = generator.generate(derive_seed(spec.seed, streams::DATA))?;
                let c = run_stability(&x, spec)?;
                Ok((
                    vec![Table::raw("cooccurrence", c.to_csv())],
                    json!({
                        "runs": c.runs,
                        "within_true_mean": c.block_mean(&truth.labels, true),
                        "between_true_mean": c.block_mean(&truth.labels, false),
                    }),
                ))
            }
            ExperimentSpec::QualitySweep(s) => {
                let r = run_quality_sweep(s)?;
                Ok((
                    vec![
                        Table::from_rows("quality_replications", &r.rows)?,
                        Table::from_rows("quality_summary", &r.summary)?,
                    ],
                    json!({ "taus": s.taus }),
                ))
            }
        }
    }
}
