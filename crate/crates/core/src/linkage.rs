//! Pairwise dissimilarities, cluster bookkeeping and linkage evaluation.
//!
//! Clusters are identified by their smallest member index (their *slot*).
//! Ordering clusters by slot gives the canonical candidate order used
//! everywhere: pairs `(a, b)` with `a < b`, lexicographic in `(a, b)`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Complete,
    Single,
    Average,
    Minimax,
}

impl Linkage {
    pub const ALL: [Linkage; 4] = [
        Linkage::Complete,
        Linkage::Single,
        Linkage::Average,
        Linkage::Minimax,
    ];
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Linkage::Complete => "complete",
            Linkage::Single => "single",
            Linkage::Average => "average",
            Linkage::Minimax => "minimax",
        };
        f.write_str(s)
    }
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "complete" => Ok(Linkage::Complete),
            "single" => Ok(Linkage::Single),
            "average" => Ok(Linkage::Average),
            "minimax" => Ok(Linkage::Minimax),
            other => invalid(format!("unknown linkage {other:?}")),
        }
    }
}

/// Symmetric `n x n` matrix of base (Euclidean) distances, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DissimilarityMatrix {
    pub fn from_values(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return invalid(format!("expected {} entries, got {}", n * n, d.len()));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return invalid(format!("nonzero diagonal at {i}"));
            }
            for j in 0..i {
                let v = d[i * n + j];
                if !(v.is_finite() && v >= 0.0) || v != d[j * n + i] {
                    return invalid(format!("entry ({i}, {j}) is not a symmetric finite distance"));
                }
            }
        }
        Ok(DissimilarityMatrix { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

/// Euclidean distances between the rows of `x`.
pub fn pairwise_dissimilarity(x: &DataMatrix) -> DissimilarityMatrix {
    let n = x.n();
    let mut d = vec![0.0; n * n];
    fill_pairwise(x.values(), &mut d);
    DissimilarityMatrix { n, d }
}

/// Writes all pairwise Euclidean distances of the rows of `values` into `out`.
pub(crate) fn fill_pairwise(values: &Array2<f64>, out: &mut [f64]) {
    let n = values.nrows();
    let p = values.ncols();
    let flat = values.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    for i in 0..n {
        out[i * n + i] = 0.0;
        for j in 0..i {
            let v = row_distance(&flat[i * p..(i + 1) * p], &flat[j * p..(j + 1) * p]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
}

/// Recomputes the distances touching any of `rows` (sorted, distinct).
pub(crate) fn refresh_rows(values: &Array2<f64>, rows: &[usize], out: &mut [f64]) {
    let n = values.nrows();
    let p = values.ncols();
    let flat = values.as_slice().expect("standard layout");
    let mut next = 0;
    for j in 0..n {
        // pairs of two moving rows are written once, from the larger index
        let moving_j = next < rows.len() && rows[next] == j;
        if moving_j {
            next += 1;
        }
        let row_j = &flat[j * p..(j + 1) * p];
        for &i in rows {
            if i == j || (moving_j && i < j) {
                continue;
            }
            let v = row_distance(&flat[i * p..(i + 1) * p], row_j);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
}

#[inline]
fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Linkage value between two disjoint, non-empty index sets, computed from
/// scratch.
pub fn linkage_dissimilarity(
    kind: Linkage,
    a: &[usize],
    b: &[usize],
    d: &DissimilarityMatrix,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("linkage needs two non-empty sets");
    }
    if a.iter().any(|i| b.contains(i)) {
        return invalid("linkage sets overlap");
    }
    if a.iter().chain(b).any(|&i| i >= d.n()) {
        return invalid("index out of range");
    }
    let cross = || a.iter().flat_map(|&i| b.iter().map(move |&j| d.get(i, j)));
    Ok(match kind {
        Linkage::Complete => cross().fold(0.0, f64::max),
        Linkage::Single => cross().fold(f64::INFINITY, f64::min),
        Linkage::Average => cross().sum::<f64>() / (a.len() * b.len()) as f64,
        Linkage::Minimax => {
            let union: Vec<usize> = a.iter().chain(b).copied().collect();
            union
                .iter()
                .map(|&c| union.iter().map(|&j| d.get(c, j)).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min)
        }
    })
}

/// A partition of `0..n` into disjoint clusters, listed in slot order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    clusters: Vec<Vec<usize>>,
    n: usize,
    step: usize,
}

impl ClusterState {
    pub fn singletons(n: usize) -> Self {
        ClusterState {
            clusters: (0..n).map(|i| vec![i]).collect(),
            n,
            step: 0,
        }
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Merges the clusters whose smallest members are `a` and `b`.
    pub fn merge_slots(&mut self, a: usize, b: usize) -> Result<()> {
        let find = |s: usize| self.clusters.iter().position(|c| c[0] == s);
        let (Some(ia), Some(ib)) = (find(a), find(b)) else {
            return Err(Error::InvalidState(format!("no clusters with slots {a} and {b}")));
        };
        if ia == ib {
            return Err(Error::InvalidState("cannot merge a cluster with itself".into()));
        }
        let (keep, drop) = if ia < ib { (ia, ib) } else { (ib, ia) };
        let moved = self.clusters.remove(drop);
        let target = &mut self.clusters[keep];
        target.extend(moved);
        target.sort_unstable();
        self.step += 1;
        debug_assert_eq!(self.clusters.len(), self.n - self.step);
        Ok(())
    }

    /// Cluster label (position in slot order) of every point.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.n];
        for (k, c) in self.clusters.iter().enumerate() {
            for &i in c {
                labels[i] = k;
            }
        }
        labels
    }
}

/// One candidate merge; `a < b` are cluster slots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMerge {
    pub a: usize,
    pub b: usize,
    pub dissimilarity: f64,
}

/// All pairwise candidate merges of `state`, in canonical order, each linkage
/// value computed from scratch.
pub fn candidate_merges(
    state: &ClusterState,
    kind: Linkage,
    d: &DissimilarityMatrix,
) -> Result<Vec<CandidateMerge>> {
    let m = state.len();
    if m < 2 {
        return Err(Error::InvalidState(format!("need at least 2 clusters, have {m}")));
    }
    let cs = state.clusters();
    let mut out = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            out.push(CandidateMerge {
                a: cs[i][0],
                b: cs[j][0],
                dissimilarity: linkage_dissimilarity(kind, &cs[i], &cs[j], d)?,
            });
        }
    }
    Ok(out)
}

/// Incrementally maintained cluster-pair linkage values.
///
/// Complete, single and average linkage use the usual max/min/size-weighted
/// recurrences. Minimax keeps, for every point `c` and cluster slot `k`, the
/// farthest distance from `c` to a member of `k`, so the radius of a merged
/// pair is a minimum over its members only.
#[derive(Clone, Debug)]
pub struct LinkageTable {
    kind: Linkage,
    n: usize,
    values: Vec<f64>,
    sizes: Vec<usize>,
    active: Vec<usize>,
    members: Vec<Vec<usize>>,
    farthest: Vec<f64>,
}

impl LinkageTable {
    pub fn new(kind: Linkage, d: &DissimilarityMatrix) -> Self {
        let mut table = LinkageTable::empty(kind, d.n());
        table.reset(d.as_slice());
        table
    }

    pub(crate) fn empty(kind: Linkage, n: usize) -> Self {
        LinkageTable {
            kind,
            n,
            values: vec![0.0; n * n],
            sizes: vec![1; n],
            active: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
            farthest: if kind == Linkage::Minimax {
                vec![0.0; n * n]
            } else {
                Vec::new()
            },
        }
    }

    /// Restarts from singletons over the base distances `d` (`n * n`).
    pub(crate) fn reset(&mut self, d: &[f64]) {
        let n = self.n;
        self.values.copy_from_slice(d);
        self.sizes.iter_mut().for_each(|s| *s = 1);
        self.active.clear();
        self.active.extend(0..n);
        for (i, m) in self.members.iter_mut().enumerate() {
            m.clear();
            m.push(i);
        }
        if self.kind == Linkage::Minimax {
            self.farthest.copy_from_slice(d);
        }
    }

    pub fn kind(&self) -> Linkage {
        self.kind
    }

    /// Active cluster slots in ascending order.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn members(&self, slot: usize) -> &[usize] {
        &self.members[slot]
    }

    pub fn size(&self, slot: usize) -> usize {
        self.sizes[slot]
    }

    #[inline]
    pub fn value(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n + b]
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.active.binary_search(&slot).is_ok()
    }

    /// Linkage values of all active pairs in canonical order.
    pub fn pair_values_into(&self, out: &mut Vec<f64>) {
        out.clear();
        let n = self.n;
        for (i, &a) in self.active.iter().enumerate() {
            let row = &self.values[a * n..(a + 1) * n];
            out.extend(self.active[i + 1..].iter().map(|&b| row[b]));
        }
    }

    pub fn candidates(&self) -> Vec<CandidateMerge> {
        let mut out = Vec::new();
        for (i, &a) in self.active.iter().enumerate() {
            for &b in &self.active[i + 1..] {
                out.push(CandidateMerge {
                    a,
                    b,
                    dissimilarity: self.value(a, b),
                });
            }
        }
        out
    }

    /// Merges slot `b` into slot `a`; the merged cluster keeps the smaller slot.
    pub fn merge(&mut self, a: usize, b: usize) -> Result<()> {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        if a == b || !self.is_active(a) || !self.is_active(b) {
            return Err(Error::InvalidState(format!("cannot merge slots {a} and {b}")));
        }
        let n = self.n;
        let (sa, sb) = (self.sizes[a] as f64, self.sizes[b] as f64);
        if self.kind == Linkage::Minimax {
            for c in 0..n {
                let row = &mut self.farthest[c * n..(c + 1) * n];
                row[a] = row[a].max(row[b]);
            }
        }
        let moved = std::mem::take(&mut self.members[b]);
        self.members[a].extend(moved);
        self.sizes[a] += self.sizes[b];
        let pos_b = self.active.binary_search(&b).expect("active slot");
        self.active.remove(pos_b);

        for idx in 0..self.active.len() {
            let k = self.active[idx];
            if k == a {
                continue;
            }
            let (ak, bk) = (self.values[a * n + k], self.values[b * n + k]);
            let v = match self.kind {
                Linkage::Complete => ak.max(bk),
                Linkage::Single => ak.min(bk),
                Linkage::Average => (sa * ak + sb * bk) / (sa + sb),
                Linkage::Minimax => self.minimax_radius(a, k),
            };
            self.values[a * n + k] = v;
            self.values[k * n + a] = v;
        }
        Ok(())
    }

    fn minimax_radius(&self, a: usize, k: usize) -> f64 {
        let n = self.n;
        self.members[a]
            .iter()
            .chain(&self.members[k])
            .map(|&c| self.farthest[c * n + a].max(self.farthest[c * n + k]))
            .fold(f64::INFINITY, f64::min)
    }
}
