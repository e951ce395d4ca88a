//! The known-covariance test based on `U = ‖Σ^{-1/2} Xᵀν‖`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use super::{
    conditional_cdf_at, conditional_integral, contrast_vector, ContrastVector, Reconstruction,
    TestOptions, TestResult, Variant,
};
use crate::data::DataMatrix;
use crate::distributions::ScaledChi;
use crate::engine::MergeTrace;
use crate::error::{invalid, Error, Result};

/// A symmetric positive-definite covariance with its square roots.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    sigma: DMatrix<f64>,
    half: DMatrix<f64>,
    inv_half: DMatrix<f64>,
}

impl Covariance {
    pub fn new(sigma: &Array2<f64>) -> Result<Self> {
        let (p, q) = sigma.dim();
        if p == 0 || p != q {
            return invalid(format!("covariance must be square and non-empty, got {p}x{q}"));
        }
        let m = DMatrix::from_fn(p, p, |i, j| sigma[[i, j]]);
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m.iter().any(|v| !v.is_finite())
            || (0..p).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale))
        {
            return invalid("covariance must be finite and symmetric");
        }
        let eig = SymmetricEigen::new(m.clone());
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
        if !(top > 0.0) || eig.eigenvalues.iter().any(|&v| !(v > 1e-12 * top)) {
            return invalid("covariance is not positive definite");
        }
        let vecs = &eig.eigenvectors;
        let root = |f: fn(f64) -> f64| {
            let diag = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            vecs * diag * vecs.transpose()
        };
        Ok(Covariance {
            sigma: m,
            half: root(f64::sqrt),
            inv_half: root(|v| 1.0 / v.sqrt()),
        })
    }

    pub fn identity(p: usize) -> Result<Self> {
        Self::scaled_identity(p, 1.0)
    }

    /// `variance · I_p`.
    pub fn scaled_identity(p: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return invalid(format!("variance must be positive, got {variance}"));
        }
        Self::new(&(Array2::eye(p) * variance))
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> Array2<f64> {
        to_array(&self.sigma)
    }

    pub fn sqrt(&self) -> Array2<f64> {
        to_array(&self.half)
    }

    pub fn inv_sqrt(&self) -> Array2<f64> {
        to_array(&self.inv_half)
    }
}

fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn whiten(cov: &Covariance, d: &[f64]) -> Vec<f64> {
    let p = d.len();
    (0..p)
        .map(|i| (0..p).map(|j| cov.inv_half[(i, j)] * d[j]).sum())
        .collect()
}

/// `U = ‖Σ^{-1/2} Xᵀν‖₂`.
pub fn chi_statistic(x: &DataMatrix, c1: &[usize], c2: &[usize], cov: &Covariance) -> Result<f64> {
    if cov.dim() != x.p() {
        return invalid(format!("covariance is {0}x{0}, data has p = {1}", cov.dim(), x.p()));
    }
    let nu = contrast_vector(c1, c2, x.n())?;
    let w = whiten(cov, &nu.apply(x.values()));
    Ok(w.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Plug-in variance `Σ‖X_i − X̄‖² / ((n − 1) p)`. Treating it as known makes
/// the χ test approximate.
pub fn pooled_variance(x: &DataMatrix) -> f64 {
    let v = x.values();
    let mean = v.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let ss: f64 = v
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    ss / ((x.n() - 1) * x.p()) as f64
}

/// Direction `ξ` of the whitened mean difference and the part `π` of `X`
/// orthogonal to `ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiAuxiliaryStats {
    pub xi: Vec<f64>,
    pub pi_resid: Array2<f64>,
    pub nu: ContrastVector,
    pub sigma_half: Array2<f64>,
    /// `ξ Σ^{1/2} / ‖ν‖²`, the row added per unit of `U · ν_i`.
    direction: Vec<f64>,
}

impl ChiAuxiliaryStats {
    pub fn new(x: &DataMatrix, c1: &[usize], c2: &[usize], cov: &Covariance) -> Result<Self> {
        let u = chi_statistic(x, c1, c2, cov)?;
        if !(u > 0.0) {
            return Err(Error::DegenerateData(
                "cluster means coincide; the direction of the mean difference is undefined".into(),
            ));
        }
        let nu = contrast_vector(c1, c2, x.n())?;
        let d = nu.apply(x.values());
        let xi: Vec<f64> = whiten(cov, &d).iter().map(|v| v / u).collect();
        let p = x.p();
        let direction: Vec<f64> = (0..p)
            .map(|j| (0..p).map(|k| xi[k] * cov.half[(k, j)]).sum::<f64>() / nu.norm_sq)
            .collect();
        let mut pi = x.values().clone();
        for &i in nu.c1().iter().chain(nu.c2()) {
            for j in 0..p {
                pi[[i, j]] -= nu.nu[i] * d[j] / nu.norm_sq;
            }
        }
        Ok(ChiAuxiliaryStats {
            xi,
            pi_resid: pi,
            nu,
            sigma_half: cov.sqrt(),
            direction,
        })
    }

    /// Scale of the χ law of `U`: `‖ν‖₂`.
    pub fn scale(&self) -> f64 {
        self.nu.norm_sq.sqrt()
    }
}

impl Reconstruction for ChiAuxiliaryStats {
    fn moving_rows(&self) -> Vec<usize> {
        self.nu.support()
    }

    fn base(&self) -> &Array2<f64> {
        &self.pi_resid
    }

    fn fill_rows(&self, u: f64, out: &mut Array2<f64>) {
        for &i in self.nu.c1().iter().chain(self.nu.c2()) {
            let coef = u * self.nu.nu[i];
            for (j, dir) in self.direction.iter().enumerate() {
                out[[i, j]] = self.pi_resid[[i, j]] + coef * dir;
            }
        }
    }

    fn contrast(&self) -> &ContrastVector {
        &self.nu
    }
}

/// `X(u) = u (ν/‖ν‖²) ξ Σ^{1/2} + π`.
pub fn reconstruct_chi(u: f64, aux: &ChiAuxiliaryStats) -> Result<DataMatrix> {
    if !(u >= 0.0) {
        return invalid(format!("statistic must be non-negative, got {u}"));
    }
    let mut out = aux.pi_resid.clone();
    aux.fill_rows(u, &mut out);
    DataMatrix::new(out)
}

/// Conditional CDF of `U` at each of `us`.
pub fn conditional_cdf_chi_many(
    us: &[f64],
    aux: &ChiAuxiliaryStats,
    trace: &MergeTrace,
    step: usize,
    options: &TestOptions,
) -> Result<Vec<f64>> {
    if us.iter().any(|u| !(*u >= 0.0)) {
        return invalid("statistic values must be non-negative");
    }
    let law = ScaledChi::new(aux.xi.len() as f64, aux.scale())?;
    conditional_cdf_at(&law, aux, trace, step, us, options)
}

/// Selective χ test of the merge recorded at `step` with known covariance.
pub fn p_value_chi(
    x: &DataMatrix,
    trace: &MergeTrace,
    step: usize,
    cov: &Covariance,
    options: &TestOptions,
) -> Result<TestResult> {
    if trace.n != x.n() {
        return invalid(format!("trace covers {} points, data has {}", trace.n, x.n()));
    }
    let record = trace.record(step)?;
    let (c1, c2) = (&record.members_a, &record.members_b);
    let u = chi_statistic(x, c1, c2, cov)?;
    let aux = ChiAuxiliaryStats::new(x, c1, c2, cov)?;
    let law = ScaledChi::new(x.p() as f64, aux.scale())?;
    let out = conditional_integral(&law, &aux, trace, step, &[u], options)?;
    Ok(TestResult {
        variant: Variant::Chi,
        weight: options.weight,
        statistic: u,
        p_value: out.sf[0],
        step,
        sizes: (c1.len(), c2.len()),
        diagnostics: out.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_two_cluster;
    use crate::distributions::BaseLaw;
    use crate::engine::{run_clustering, RandomizationConfig};
    use crate::inference::TestOptions;
    use crate::linkage::Linkage;

    #[test]
    fn statistic_examples() {
        // mean difference (3, 4)
        let x = DataMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let id = Covariance::identity(2).unwrap();
        assert!((chi_statistic(&x, &[0], &[1], &id).unwrap() - 5.0).abs() < 1e-12);
        let four = Covariance::scaled_identity(2, 4.0).unwrap();
        assert!((chi_statistic(&x, &[0], &[1], &four).unwrap() - 2.5).abs() < 1e-12);
        let flat = DataMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![5.0, 5.0]]).unwrap();
        assert_eq!(chi_statistic(&flat, &[0], &[1], &id).unwrap(), 0.0);
    }

    #[test]
    fn covariance_roots() {
        let s = ndarray::array![[2.0, 0.5], [0.5, 1.0]];
        let cov = Covariance::new(&s).unwrap();
        let h = cov.sqrt();
        let back = h.dot(&h);
        assert!(back.iter().zip(s.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let prod = cov.inv_sqrt().dot(&h);
        assert!(prod.iter().zip(Array2::<f64>::eye(2).iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(Covariance::new(&ndarray::array![[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(Covariance::new(&ndarray::array![[1.0, 0.3], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn reconstruction_identity() {
        let (x, _) = generate_two_cluster(12, 2.0, 1.0, 3, 4).unwrap();
        let cov = Covariance::new(&ndarray::array![[1.0, 0.2, 0.0], [0.2, 2.0, 0.1], [0.0, 0.1, 0.5]])
            .unwrap();
        let (c1, c2) = ([0, 3, 5], [7, 8, 10, 11]);
        let u = chi_statistic(&x, &c1, &c2, &cov).unwrap();
        let aux = ChiAuxiliaryStats::new(&x, &c1, &c2, &cov).unwrap();
        assert!((aux.xi.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
        let back = reconstruct_chi(u, &aux).unwrap();
        let err: f64 = (back.values() - x.values()).iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm: f64 = x.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-8 * norm);
        let moved = reconstruct_chi(2.5, &aux).unwrap();
        assert!((chi_statistic(&moved, &c1, &c2, &cov).unwrap() - 2.5).abs() < 1e-10);
    }

    #[test]
    fn constant_weight_matches_scaled_chi_tail() {
        let (x, _) = generate_two_cluster(16, 3.0, 1.0, 2, 6).unwrap();
        let cfg = RandomizationConfig::new(0.1, Linkage::Complete, 6).unwrap();
        let trace = run_clustering(&x, 2, &cfg).unwrap();
        let t = trace.len();
        let id = Covariance::identity(2).unwrap();
        let res = p_value_chi(&x, &trace, t, &id, &TestOptions::naive()).unwrap();
        let rec = trace.record(t).unwrap();
        let nu = contrast_vector(&rec.members_a, &rec.members_b, 16).unwrap();
        let law = ScaledChi::new(2.0, nu.norm_sq.sqrt()).unwrap();
        assert!((res.p_value - law.sf(res.statistic)).abs() < 1e-6);
        let sel = p_value_chi(&x, &trace, t, &id, &TestOptions::default()).unwrap();
        assert!((0.0..=1.0).contains(&sel.p_value));
    }

    #[test]
    fn pooled_variance_of_known_sample() {
        let x = DataMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        // squared deviations 4 in total, (n - 1) p = 2
        assert!((pooled_variance(&x) - 2.0).abs() < 1e-15);
    }
}
