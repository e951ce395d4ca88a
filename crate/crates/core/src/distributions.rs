//! Base null laws of the test statistics: Fisher's F and a scaled chi.
//!
//! Tail probabilities are exposed as logarithms and quantiles are computed
//! from either tail, so quadrature nodes deep in a tail keep full relative
//! precision.

use crate::error::{invalid, Result};
use crate::special::{ln_beta, ln_beta_reg, ln_gamma, ln_gamma_reg};

/// A continuous law on `(0, inf)` with log-scale tails and tail quantiles.
pub trait BaseLaw: Sync {
    /// `(ln P(X <= x), ln P(X > x))`.
    fn ln_tails(&self, x: f64) -> (f64, f64);

    fn ln_pdf(&self, x: f64) -> f64;

    fn cdf(&self, x: f64) -> f64 {
        self.ln_tails(x).0.exp()
    }

    fn sf(&self, x: f64) -> f64 {
        self.ln_tails(x).1.exp()
    }

    fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// `x` with `ln P(X <= x) = ln_u`.
    fn quantile_lower(&self, ln_u: f64) -> f64 {
        invert_tail(self, ln_u, Tail::Lower)
    }

    /// `x` with `ln P(X > x) = ln_q`.
    fn quantile_upper(&self, ln_q: f64) -> f64 {
        invert_tail(self, ln_q, Tail::Upper)
    }

    /// Quantile at probability `u`, using whichever tail is smaller.
    fn quantile(&self, u: f64) -> f64 {
        if u <= 0.5 {
            self.quantile_lower(u.ln())
        } else {
            self.quantile_upper((1.0 - u).ln())
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tail {
    Lower,
    Upper,
}

/// Solves `ln tail(e^z) = target` by safeguarded Newton in `z = ln x`.
fn invert_tail<L: BaseLaw + ?Sized>(law: &L, target: f64, tail: Tail) -> f64 {
    if target >= 0.0 {
        return if tail == Tail::Lower { f64::INFINITY } else { 0.0 };
    }
    if target == f64::NEG_INFINITY {
        return if tail == Tail::Lower { 0.0 } else { f64::INFINITY };
    }
    // g(z) increases in z for both orientations after the sign flip below.
    let sign = if tail == Tail::Lower { 1.0 } else { -1.0 };
    let eval = |z: f64| {
        let x = z.exp();
        let (lo, up) = law.ln_tails(x);
        let ln_tail = if tail == Tail::Lower { lo } else { up };
        let g = sign * (ln_tail - target);
        // d ln tail / dz = x f(x) / tail(x)
        let slope = (z + law.ln_pdf(x) - ln_tail).exp();
        (g, slope)
    };

    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut step = 2.0;
    while eval(lo).0 > 0.0 {
        lo -= step;
        step *= 2.0;
        if lo < -1e4 {
            return 0.0;
        }
    }
    step = 2.0;
    while eval(hi).0 < 0.0 {
        hi += step;
        step *= 2.0;
        if hi > 1e4 {
            return f64::INFINITY;
        }
    }

    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (g, slope) = eval(z);
        if g == 0.0 {
            break;
        }
        if g > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let newton = z - g / slope;
        let next = if slope.is_finite() && slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - z).abs() <= 1e-14 * z.abs().max(1.0) || hi - lo <= 1e-14 * z.abs().max(1.0) {
            z = next;
            break;
        }
        z = next;
    }
    z.exp()
}

/// `F(d1, d2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisherF {
    d1: f64,
    d2: f64,
    ln_norm: f64,
}

impl FisherF {
    pub fn new(d1: f64, d2: f64) -> Result<Self> {
        if !(d1 > 0.0 && d2 > 0.0 && d1.is_finite() && d2.is_finite()) {
            return invalid(format!("F degrees of freedom must be positive, got ({d1}, {d2})"));
        }
        Ok(FisherF {
            d1,
            d2,
            ln_norm: 0.5 * d1 * (d1 / d2).ln() - ln_beta(0.5 * d1, 0.5 * d2),
        })
    }

    pub fn dof(&self) -> (f64, f64) {
        (self.d1, self.d2)
    }
}

impl BaseLaw for FisherF {
    fn ln_tails(&self, x: f64) -> (f64, f64) {
        if !(x > 0.0) {
            return (f64::NEG_INFINITY, 0.0);
        }
        if x.is_infinite() {
            return (0.0, f64::NEG_INFINITY);
        }
        let t = self.d1 * x;
        let denom = t + self.d2;
        ln_beta_reg(0.5 * self.d1, 0.5 * self.d2, t / denom, self.d2 / denom)
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.ln_norm + (0.5 * self.d1 - 1.0) * x.ln()
            - 0.5 * (self.d1 + self.d2) * (self.d1 * x / self.d2).ln_1p()
    }
}

/// `scale * chi_dof`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledChi {
    dof: f64,
    scale: f64,
    ln_norm: f64,
}

impl ScaledChi {
    pub fn new(dof: f64, scale: f64) -> Result<Self> {
        if !(dof > 0.0 && scale > 0.0 && dof.is_finite() && scale.is_finite()) {
            return invalid(format!("scaled chi needs positive dof and scale, got ({dof}, {scale})"));
        }
        let a = 0.5 * dof;
        Ok(ScaledChi {
            dof,
            scale,
            ln_norm: -(a - 1.0) * std::f64::consts::LN_2 - ln_gamma(a) - scale.ln(),
        })
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl BaseLaw for ScaledChi {
    fn ln_tails(&self, x: f64) -> (f64, f64) {
        if !(x > 0.0) {
            return (f64::NEG_INFINITY, 0.0);
        }
        let v = x / self.scale;
        ln_gamma_reg(0.5 * self.dof, 0.5 * v * v)
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        let v = x / self.scale;
        self.ln_norm + (self.dof - 1.0) * v.ln() - 0.5 * v * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

    #[test]
    fn f_matches_statrs() {
        for &(d1, d2) in &[(1.0, 5.0), (2.0, 56.0), (10.0, 280.0), (3.0, 3.0)] {
            let ours = FisherF::new(d1, d2).unwrap();
            let theirs = FisherSnedecor::new(d1, d2).unwrap();
            for &x in &[0.01, 0.3, 1.0, 2.5, 7.0, 40.0] {
                assert!((ours.cdf(x) - theirs.cdf(x)).abs() < 1e-12, "{d1} {d2} {x}");
                assert!((ours.sf(x) - theirs.sf(x)).abs() < 1e-12);
                // statrs overflows its pdf for large dof; check against a
                // central difference of the cdf instead.
                let h = 1e-5 * x;
                let slope = (ours.cdf(x + h) - ours.cdf(x - h)) / (2.0 * h);
                assert!((ours.pdf(x) - slope).abs() < 1e-6 * slope.max(1e-3), "{d1} {d2} {x}");
            }
        }
    }

    #[test]
    fn chi_matches_chi_squared() {
        let law = ScaledChi::new(4.0, 1.0).unwrap();
        let chi2 = ChiSquared::new(4.0).unwrap();
        for &x in &[0.2, 1.0, 2.0, 5.0] {
            assert!((law.cdf(x) - chi2.cdf(x * x)).abs() < 1e-12);
        }
        let scaled = ScaledChi::new(3.0, 0.5).unwrap();
        let unit = ScaledChi::new(3.0, 1.0).unwrap();
        assert!((scaled.cdf(0.7) - unit.cdf(1.4)).abs() < 1e-14);
    }

    #[test]
    fn quantiles_round_trip() {
        let f = FisherF::new(10.0, 280.0).unwrap();
        for &u in &[1e-12, 1e-3, 0.2, 0.5, 0.9, 1.0 - 1e-9] {
            let x = f.quantile(u);
            let (lo, up) = f.ln_tails(x);
            if u <= 0.5 {
                assert!((lo - u.ln()).abs() < 1e-10, "u={u}");
            } else {
                assert!((up - (1.0 - u).ln()).abs() < 1e-8, "u={u}");
            }
        }
        let x = f.quantile_upper(-500.0);
        assert!((f.ln_tails(x).1 + 500.0).abs() < 1e-9);
        let x = f.quantile_lower(-600.0);
        assert!((f.ln_tails(x).0 + 600.0).abs() < 1e-9);

        let c = ScaledChi::new(2.0, 0.4).unwrap();
        for &u in &[1e-30, 0.1, 0.5, 0.99] {
            assert!((c.cdf(c.quantile(u)) - u).abs() < 1e-12);
        }
        assert!((c.ln_tails(c.quantile_upper(-300.0)).1 + 300.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters() {
        assert!(FisherF::new(0.0, 1.0).is_err());
        assert!(ScaledChi::new(2.0, 0.0).is_err());
    }
}
