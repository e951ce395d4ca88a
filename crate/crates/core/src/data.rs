//! Data matrices, synthetic generators and CSV ingestion.
//!
//! Rows are observations. Generators draw every row from `N(mu_i, sigma^2 I_p)`
//! in row-major order from a single [`SimRng`] stream seeded with `rng_seed`,
//! so the same seed always yields a bit-identical matrix.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::SimRng;

/// An `n x p` matrix of finite observations with `n >= 2`, `p >= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    values: Array2<f64>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, p) = values.dim();
        if n < 2 || p < 1 {
            return invalid(format!("data matrix must be at least 2 x 1, got {n} x {p}"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("data matrix contains non-finite entries");
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(DataMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return invalid("ragged rows");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, p), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        DataMatrix::new(values)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// `c * X`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        DataMatrix::new(&self.values * c)
    }

    /// Per-column z-scoring (sample standard deviation).
    pub fn standardized(&self) -> Result<Self> {
        let n = self.n() as f64;
        let mut out = self.values.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if var <= 0.0 {
                return Err(Error::DegenerateData(format!("column {j} has zero variance")));
            }
            let sd = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / sd);
        }
        DataMatrix::new(out)
    }
}

/// True cluster structure of a generated dataset. Labels are `0..k_star`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<usize>,
    pub k_star: usize,
    pub mu: Option<Array2<f64>>,
    pub sigma: Option<f64>,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma must be positive and finite, got {sigma}"));
    }
    Ok(())
}

/// Draws rows around the given centers. `labels[i]` indexes `centers`.
fn draw_around(
    centers: &[Vec<f64>],
    labels: Vec<usize>,
    sigma: f64,
    rng_seed: u64,
) -> Result<(DataMatrix, GroundTruth)> {
    let n = labels.len();
    let p = centers[0].len();
    let mut rng = SimRng::new(rng_seed);
    let mut values = Array2::zeros((n, p));
    let mut mu = Array2::zeros((n, p));
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..p {
            let m = centers[label][j];
            mu[[i, j]] = m;
            values[[i, j]] = rng.normal(m, sigma);
        }
    }
    let k_star = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok((
        DataMatrix::new(values)?,
        GroundTruth {
            labels,
            k_star,
            mu: Some(mu),
            sigma: Some(sigma),
        },
    ))
}

/// First `n/2` rows centred at the origin, the rest at `(delta, 0, ..., 0)`.
pub fn generate_two_cluster(
    n: usize,
    delta: f64,
    sigma: f64,
    p: usize,
    rng_seed: u64,
) -> Result<(DataMatrix, GroundTruth)> {
    if n < 2 || n % 2 != 0 {
        return invalid(format!("n must be even and >= 2, got {n}"));
    }
    if p < 1 {
        return invalid("p must be >= 1");
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return invalid(format!("delta must be finite and >= 0, got {delta}"));
    }
    check_sigma(sigma)?;
    let origin = vec![0.0; p];
    if delta == 0.0 {
        return draw_around(&[origin], vec![0; n], sigma, rng_seed);
    }
    let mut shifted = vec![0.0; p];
    shifted[0] = delta;
    let labels = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    draw_around(&[origin, shifted], labels, sigma, rng_seed)
}

/// Three equal groups in the plane around the vertices of an equilateral
/// triangle with side `delta`.
pub fn generate_three_cluster(
    n: usize,
    delta: f64,
    sigma: f64,
    rng_seed: u64,
) -> Result<(DataMatrix, GroundTruth)> {
    if n < 3 || n % 3 != 0 {
        return invalid(format!("n must be a positive multiple of 3, got {n}"));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return invalid(format!("delta must be finite and >= 0, got {delta}"));
    }
    check_sigma(sigma)?;
    if delta == 0.0 {
        return draw_around(&[vec![0.0, 0.0]], vec![0; n], sigma, rng_seed);
    }
    let centers = three_cluster_centers(delta);
    let labels = (0..n).map(|i| i / (n / 3)).collect();
    draw_around(&centers, labels, sigma, rng_seed)
}

pub fn three_cluster_centers(delta: f64) -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0],
        vec![delta, 0.0],
        vec![delta / 2.0, 3f64.sqrt() * delta / 2.0],
    ]
}

/// `k_star` groups centred evenly on a circle; group sizes differ by at most one
/// with the larger groups first.
pub fn generate_circular(
    n: usize,
    k_star: usize,
    radius: f64,
    sigma: f64,
    rng_seed: u64,
) -> Result<(DataMatrix, GroundTruth)> {
    if k_star < 1 || n < k_star || n < 2 {
        return invalid(format!("need 1 <= k_star <= n and n >= 2, got n={n}, k_star={k_star}"));
    }
    if !radius.is_finite() {
        return invalid("radius must be finite");
    }
    check_sigma(sigma)?;
    let centers: Vec<Vec<f64>> = (0..k_star)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / k_star as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect();
    let labels = balanced_labels(n, k_star);
    draw_around(&centers, labels, sigma, rng_seed)
}

/// Contiguous labels for `k` groups whose sizes differ by at most one.
pub fn balanced_labels(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = n % k;
    (0..k)
        .flat_map(|g| std::iter::repeat(g).take(base + usize::from(g < extra)))
        .collect()
}

/// A filtered numeric table read from CSV.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub matrix: DataMatrix,
    /// Zero-based data-row index (header excluded) of every retained row.
    pub provenance: Vec<usize>,
    pub columns: Vec<String>,
}

/// `column=value` row predicate. Predicates on the same column are OR-ed,
/// predicates on different columns are AND-ed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Filter {
    pub column: String,
    pub value: String,
}

impl std::str::FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((c, v)) if !c.trim().is_empty() => Ok(Filter {
                column: c.trim().to_string(),
                value: v.trim().to_string(),
            }),
            _ => invalid(format!("filter must look like column=value, got {s:?}")),
        }
    }
}

/// Reads `feature_columns` from a headed, comma-separated file. Rows failing
/// a filter, or with a missing or non-numeric feature, are dropped.
pub fn load_csv(
    path: impl AsRef<Path>,
    feature_columns: &[String],
    filters: &[Filter],
) -> Result<LoadedData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let column_index = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("unknown column {name:?} in {}", path.display())))
    };
    if feature_columns.is_empty() {
        return invalid("at least one feature column is required");
    }
    let features: Vec<usize> = feature_columns
        .iter()
        .map(|c| column_index(c))
        .collect::<Result<_>>()?;
    let mut accepted: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for f in filters {
        accepted.entry(column_index(&f.column)?).or_default().push(&f.value);
    }

    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let Ok(record) = record else {
            log::warn!("dropping unreadable row {index}");
            continue;
        };
        let keep = accepted.iter().all(|(&col, values)| {
            record
                .get(col)
                .is_some_and(|v| values.iter().any(|want| v.trim() == *want))
        });
        if !keep {
            continue;
        }
        let parsed: Option<Vec<f64>> = features
            .iter()
            .map(|&c| {
                record
                    .get(c)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        if let Some(row) = parsed {
            rows.push(row);
            provenance.push(index);
        }
    }
    Ok(LoadedData {
        matrix: DataMatrix::from_rows(&rows)?,
        provenance,
        columns: feature_columns.to_vec(),
    })
}
