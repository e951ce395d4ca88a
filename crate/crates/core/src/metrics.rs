//! Partition quality and agreement metrics, co-occurrence, and the gap statistic.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::DataMatrix;
use crate::engine::{run_clustering, RandomizationConfig};
use crate::error::{invalid, Error, Result};
use crate::linkage::{DissimilarityMatrix, Linkage, LinkageTable};
use crate::rng::{derive_seed, streams, SimRng};

/// Relabels so that ids are `0..k` in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn cluster_count(canonical: &[usize]) -> usize {
    canonical.iter().max().map_or(0, |m| m + 1)
}

/// Within-cluster sum of squares around each cluster mean.
pub fn wcss(x: &DataMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.n() {
        return invalid(format!("{} labels for {} rows", labels.len(), x.n()));
    }
    let labels = canonical_labels(labels);
    let k = cluster_count(&labels);
    let p = x.p();
    let mut sums = Array2::<f64>::zeros((k, p));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        let mut row = sums.row_mut(l);
        row += &x.row(i);
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let c = counts[l] as f64;
        for j in 0..p {
            let d = x.values()[[i, j]] - sums[[l, j]] / c;
            total += d * d;
        }
    }
    Ok(total)
}

/// WCSS / TSS, where TSS is the WCSS of the one-cluster partition.
pub fn wcss_tss(x: &DataMatrix, labels: &[usize]) -> Result<f64> {
    let tss = wcss(x, &vec![0; x.n()])?;
    if tss <= 0.0 {
        return Err(Error::DegenerateData("total sum of squares is zero".into()));
    }
    Ok((wcss(x, labels)? / tss).clamp(0.0, 1.0))
}

fn choose2(m: usize) -> f64 {
    let m = m as f64;
    m * (m - 1.0) / 2.0
}

/// Adjusted Rand index. When the expected and maximal indices coincide (both
/// partitions trivial in the same way) the result is 1 for identical
/// partitions and 0 otherwise.
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let n = labels_a.len();
    if n != labels_b.len() {
        return invalid(format!("label lengths differ: {n} vs {}", labels_b.len()));
    }
    if n < 2 {
        return invalid("ARI needs at least 2 observations");
    }
    let a = canonical_labels(labels_a);
    let b = canonical_labels(labels_b);
    let (ka, kb) = (cluster_count(&a), cluster_count(&b));
    let mut table = vec![0usize; ka * kb];
    for (&i, &j) in a.iter().zip(&b) {
        table[i * kb + j] += 1;
    }
    let mut row = vec![0usize; ka];
    let mut col = vec![0usize; kb];
    for i in 0..ka {
        for j in 0..kb {
            row[i] += table[i * kb + j];
            col[j] += table[i * kb + j];
        }
    }
    let index: f64 = table.iter().map(|&m| choose2(m)).sum();
    let sum_a: f64 = row.iter().map(|&m| choose2(m)).sum();
    let sum_b: f64 = col.iter().map(|&m| choose2(m)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = 0.5 * (sum_a + sum_b);
    if max - expected == 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of runs in which each pair of points shares a cluster.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CooccurrenceMatrix {
    pub c: Array2<f64>,
    pub runs: usize,
}

impl CooccurrenceMatrix {
    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    /// Mean over pairs `i != j` with `group(i) == group(j)` (`within = true`)
    /// or `group(i) != group(j)`.
    pub fn block_mean(&self, groups: &[usize], within: bool) -> Option<f64> {
        let n = self.n();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..n {
            for j in 0..n {
                if i != j && (groups[i] == groups[j]) == within {
                    sum += self.c[[i, j]];
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Splits the points into `k` groups by average-linkage clustering on
    /// `1 - c`, with labels in order of first appearance.
    pub fn blocks(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.n();
        if k < 1 || k > n {
            return invalid(format!("block count must be in 1..={n}, got {k}"));
        }
        let d: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| if i == j { 0.0 } else { 1.0 - self.c[[i, j]] })
            .collect();
        let mut table = LinkageTable::new(Linkage::Average, &DissimilarityMatrix::from_values(n, d)?);
        while table.active().len() > k {
            let best = table
                .candidates()
                .into_iter()
                .min_by(|a, b| a.dissimilarity.total_cmp(&b.dissimilarity))
                .expect("more than one active cluster");
            table.merge(best.a, best.b)?;
        }
        let mut labels = vec![0; n];
        for (l, &slot) in table.active().iter().enumerate() {
            for &i in table.members(slot) {
                labels[i] = l;
            }
        }
        Ok(canonical_labels(&labels))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.c.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn cooccurrence<L: AsRef<[usize]>>(runs: &[L]) -> Result<CooccurrenceMatrix> {
    let Some(first) = runs.first() else {
        return invalid("co-occurrence needs at least one run");
    };
    let n = first.as_ref().len();
    let mut counts = Array2::<u32>::zeros((n, n));
    for run in runs {
        let labels = run.as_ref();
        if labels.len() != n {
            return invalid(format!("run has {} labels, expected {n}", labels.len()));
        }
        for i in 0..n {
            for j in i..n {
                if labels[i] == labels[j] {
                    counts[[i, j]] += 1;
                }
            }
        }
    }
    let total = runs.len() as f64;
    let mut c = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = counts[[i, j]] as f64 / total;
            c[[i, j]] = v;
            c[[j, i]] = v;
        }
    }
    Ok(CooccurrenceMatrix { c, runs: runs.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapConfig {
    pub k_max: usize,
    pub b_refs: usize,
    pub linkage: Linkage,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub k: usize,
    pub log_w: f64,
    pub ref_mean_log_w: f64,
    pub gap: f64,
    pub s_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapResult {
    pub k_hat: usize,
    pub rows: Vec<GapRow>,
}

impl GapResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,log_w,ref_mean_log_w,gap,s_k\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.k, r.log_w, r.ref_mean_log_w, r.gap, r.s_k
            ));
        }
        out
    }
}

/// `log W_K` for `K = 1..=k_max` from one deterministic dendrogram.
fn log_dispersion(x: &DataMatrix, k_max: usize, linkage: Linkage) -> Result<Vec<f64>> {
    let trace = run_clustering(x, 1, &RandomizationConfig::new(0.0, linkage, 0)?)?;
    (1..=k_max)
        .map(|k| {
            let w = wcss(x, &trace.labels_at(k)?)?;
            Ok(w.max(f64::MIN_POSITIVE).ln())
        })
        .collect()
}

/// Gap statistic with uniform references over the bounding box of `x` and
/// `K̂ = min{K : Gap(K) >= Gap(K+1) - s_{K+1}}` (falling back to `k_max`).
pub fn gap_statistic(x: &DataMatrix, config: &GapConfig) -> Result<GapResult> {
    let (n, p) = (x.n(), x.p());
    let k_max = config.k_max;
    if k_max < 1 || k_max >= n {
        return invalid(format!("k_max must be in 1..{n}, got {k_max}"));
    }
    if config.b_refs < 1 {
        return invalid("need at least one reference dataset");
    }
    let observed = log_dispersion(x, k_max, config.linkage)?;
    let values = x.values();
    let bounds: Vec<(f64, f64)> = values
        .columns()
        .into_iter()
        .map(|c| {
            c.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let refs: Vec<Vec<f64>> = (0..config.b_refs)
        .into_par_iter()
        .map(|b| {
            let mut rng = SimRng::new(derive_seed(
                derive_seed(config.seed, streams::REFERENCE),
                b as u64,
            ));
            let mut draw = Array2::<f64>::zeros((n, p));
            for i in 0..n {
                for (j, &(lo, hi)) in bounds.iter().enumerate() {
                    draw[[i, j]] = rng.uniform_in(lo, hi);
                }
            }
            log_dispersion(&DataMatrix::new(draw)?, k_max, config.linkage)
        })
        .collect::<Result<_>>()?;
    let b = config.b_refs as f64;
    let rows: Vec<GapRow> = (0..k_max)
        .map(|k| {
            let mean = refs.iter().map(|r| r[k]).sum::<f64>() / b;
            let var = refs.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / b;
            GapRow {
                k: k + 1,
                log_w: observed[k],
                ref_mean_log_w: mean,
                gap: mean - observed[k],
                s_k: var.sqrt() * (1.0 + 1.0 / b).sqrt(),
            }
        })
        .collect();
    let k_hat = rows
        .windows(2)
        .find(|w| w[0].gap >= w[1].gap - w[1].s_k)
        .map_or(k_max, |w| w[0].k);
    Ok(GapResult { k_hat, rows })
}
