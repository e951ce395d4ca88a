//! Composite Gauss–Legendre quadrature of weighted base-law integrals.
//!
//! Integrals of the form `∫ f(x) w(x) dx` over a segment of the support are
//! evaluated after the substitution `x = Q(u)`, which turns them into
//! `∫ w(Q(u)) du` over a sub-interval of `(0, 1)`. The unit interval is cut
//! into equal panels, except that the two outermost panels are replaced by
//! panels in `ln u` and `ln(1 - u)` so that breakpoints deep in a tail are
//! resolved with full relative precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::BaseLaw;
use crate::error::{invalid, Error, Result};

/// Logarithmic tails are integrated down to at least this log-probability.
const TAIL_FLOOR: f64 = -700.0;
/// Below this log-probability tail panels grow geometrically.
const TAIL_GROWTH_START: f64 = -40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Equal-width panels on `(0, 1)`.
    pub panels: usize,
    /// Gauss–Legendre nodes per panel.
    pub nodes: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            panels: 64,
            nodes: 16,
        }
    }
}

impl QuadratureConfig {
    pub fn new(panels: usize, nodes: usize) -> Result<Self> {
        if panels < 4 {
            return invalid(format!("need at least 4 quadrature panels, got {panels}"));
        }
        if nodes < 1 || nodes > 128 {
            return invalid(format!("nodes per panel must be in 1..=128, got {nodes}"));
        }
        Ok(QuadratureConfig { panels, nodes })
    }
}

/// What the quadrature saw, reported alongside every p-value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureDiagnostics {
    pub node_count: usize,
    /// Largest log-weight over all nodes.
    pub max_log_weight: f64,
    /// Denominator after dividing by the largest node contribution (`>= 1`).
    pub denominator_shifted: f64,
    /// Natural log of the unshifted denominator.
    pub ln_denominator: f64,
}

/// Result of one weighted quadrature.
#[derive(Clone, Debug)]
pub struct Integrated {
    /// `cdf[k]` is the weighted CDF at `breakpoints[k]`.
    pub cdf: Vec<f64>,
    /// `sf[k] = 1 - cdf[k]`, summed directly from the upper segments.
    pub sf: Vec<f64>,
    pub diagnostics: QuadratureDiagnostics,
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mf = m as f64;
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = mf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[m - 1 - i] = z;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Coord {
    /// `s = ln u`.
    LowerLog,
    /// `u` itself.
    Linear,
    /// `s = ln(1 - u)`, decreasing in `u`.
    UpperLog,
}

#[derive(Clone, Copy, Debug)]
struct Panel {
    coord: Coord,
    lo: f64,
    hi: f64,
}

/// A quadrature node: base-law abscissa, log of its probability mass, and the
/// number of breakpoints lying below it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Node {
    pub x: f64,
    pub ln_mass: f64,
    pub segment: usize,
}

/// Location of a point of the support in panel coordinates.
fn locate<L: BaseLaw + ?Sized>(law: &L, x: f64, edge: f64) -> (Coord, f64) {
    let (ln_lo, ln_up) = law.ln_tails(x);
    if ln_lo < edge.ln() {
        (Coord::LowerLog, ln_lo)
    } else if ln_up < edge.ln() {
        (Coord::UpperLog, ln_up)
    } else if ln_lo < ln_up {
        (Coord::Linear, ln_lo.exp())
    } else {
        (Coord::Linear, -ln_up.exp_m1())
    }
}

/// Breaks of the log-coordinate tail from `start` (near the bulk) outward to
/// `floor`, as a decreasing list.
fn tail_breaks(start: f64, floor: f64, width: f64) -> Vec<f64> {
    let mut out = vec![start];
    let mut s = start;
    let mut w = width;
    while s > floor {
        if s <= TAIL_GROWTH_START {
            w *= 2.0;
        }
        s = (s - w).max(floor);
        out.push(s);
    }
    out
}

fn build_panels(config: &QuadratureConfig, cuts: &[(Coord, f64)]) -> Vec<Panel> {
    let edge = 1.0 / config.panels as f64;
    let width = 4.0 * 64.0 / config.panels as f64;
    let lowest = |coord: Coord| {
        cuts.iter()
            .filter(|c| c.0 == coord && c.1.is_finite())
            .map(|c| c.1 - 1.0)
            .fold(TAIL_FLOOR, f64::min)
    };
    let mut panels = Vec::new();
    // Lower tail from the floor up to `ln edge`.
    let lower = tail_breaks(edge.ln(), lowest(Coord::LowerLog), width);
    for pair in lower.windows(2).rev() {
        panels.push(Panel {
            coord: Coord::LowerLog,
            lo: pair[1],
            hi: pair[0],
        });
    }
    for k in 1..config.panels - 1 {
        panels.push(Panel {
            coord: Coord::Linear,
            lo: k as f64 * edge,
            hi: (k + 1) as f64 * edge,
        });
    }
    // Upper tail, listed in increasing `u`, i.e. decreasing `ln(1 - u)`.
    let upper = tail_breaks(edge.ln(), lowest(Coord::UpperLog), width);
    for pair in upper.windows(2) {
        panels.push(Panel {
            coord: Coord::UpperLog,
            lo: pair[1],
            hi: pair[0],
        });
    }
    // Split at the breakpoints.
    for &(coord, at) in cuts {
        if let Some(i) = panels
            .iter()
            .position(|p| p.coord == coord && p.lo < at && at < p.hi)
        {
            let p = panels[i];
            panels[i] = Panel { hi: at, ..p };
            panels.insert(i + 1, Panel { lo: at, ..p });
        }
    }
    panels
}

/// Whether a point at panel coordinate `(coord, v)` lies at or below a cut.
fn at_or_below(coord: Coord, v: f64, cut: (Coord, f64)) -> bool {
    let rank = |c: Coord| match c {
        Coord::LowerLog => 0,
        Coord::Linear => 1,
        Coord::UpperLog => 2,
    };
    if coord != cut.0 {
        return rank(coord) < rank(cut.0);
    }
    match coord {
        Coord::UpperLog => v >= cut.1,
        _ => v <= cut.1,
    }
}

/// Quadrature nodes for the base law, with panel edges at every breakpoint.
pub(crate) fn build_nodes<L: BaseLaw + ?Sized>(
    law: &L,
    breakpoints: &[f64],
    config: &QuadratureConfig,
) -> Vec<Node> {
    let edge = 1.0 / config.panels as f64;
    let cuts: Vec<(Coord, f64)> = breakpoints.iter().map(|&x| locate(law, x, edge)).collect();
    let panels = build_panels(config, &cuts);
    let (gx, gw) = gauss_legendre(config.nodes);
    let mut nodes = Vec::with_capacity(panels.len() * config.nodes);
    for panel in &panels {
        let half = 0.5 * (panel.hi - panel.lo);
        let mid = 0.5 * (panel.hi + panel.lo);
        for (&t, &w) in gx.iter().zip(&gw) {
            let v = mid + half * t;
            let (x, ln_mass) = match panel.coord {
                Coord::LowerLog => (law.quantile_lower(v), (w * half).ln() + v),
                Coord::UpperLog => (law.quantile_upper(v), (w * half).ln() + v),
                Coord::Linear => {
                    let x = if v <= 0.5 {
                        law.quantile_lower(v.ln())
                    } else {
                        law.quantile_upper((1.0 - v).ln())
                    };
                    (x, (w * half).ln())
                }
            };
            let midpoint = (panel.coord, mid);
            // A node sits in the segment of its panel; panels never straddle
            // a cut, so testing the panel midpoint is exact.
            let segment = cuts
                .iter()
                .filter(|&&c| !at_or_below(midpoint.0, midpoint.1, c))
                .count();
            nodes.push(Node { x, ln_mass, segment });
        }
    }
    nodes
}

/// Sum with a balanced reduction tree, so results do not depend on how the
/// terms were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Combines per-node log-weights into weighted CDF values at the breakpoints.
pub(crate) fn combine(
    nodes: &[Node],
    log_weights: &[f64],
    breakpoints: usize,
) -> Result<Integrated> {
    let terms: Vec<f64> = nodes
        .iter()
        .zip(log_weights)
        .map(|(n, &lw)| n.ln_mass + lw)
        .collect();
    let max_term = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_log_weight = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let failure = |message: &str, shifted: f64| Error::NumericalFailure {
        message: message.into(),
        diagnostics: Some(QuadratureDiagnostics {
            node_count: nodes.len(),
            max_log_weight,
            denominator_shifted: shifted,
            ln_denominator: f64::NEG_INFINITY,
        }),
    };
    if terms.iter().any(|t| t.is_nan()) {
        return Err(failure("log-weight evaluated to NaN", f64::NAN));
    }
    if !max_term.is_finite() {
        return Err(failure("weighted integrand vanished at every node", 0.0));
    }
    let mut by_segment = vec![Vec::new(); breakpoints + 1];
    for (node, &t) in nodes.iter().zip(&terms) {
        by_segment[node.segment].push((t - max_term).exp());
    }
    let sums: Vec<f64> = by_segment.iter().map(|v| pairwise_sum(v)).collect();
    let total = pairwise_sum(&sums);
    if !(total.is_finite() && total > 0.0) {
        return Err(failure("denominator not finite after shifting", total));
    }
    let mut cdf = Vec::with_capacity(breakpoints);
    let mut sf = Vec::with_capacity(breakpoints);
    for k in 0..breakpoints {
        let below = pairwise_sum(&sums[..=k]);
        let above = pairwise_sum(&sums[k + 1..]);
        cdf.push((below / total).clamp(0.0, 1.0));
        sf.push((above / total).clamp(0.0, 1.0));
    }
    Ok(Integrated {
        cdf,
        sf,
        diagnostics: QuadratureDiagnostics {
            node_count: nodes.len(),
            max_log_weight,
            denominator_shifted: total,
            ln_denominator: max_term + total.ln(),
        },
    })
}

/// Weighted CDF of `law` at each breakpoint, where the weight at abscissa `x`
/// is `exp(log_weight(state, x))`. Nodes are evaluated in parallel, each
/// worker owning a state built by `init`.
pub fn weighted_cdf<L, S, I, F>(
    law: &L,
    breakpoints: &[f64],
    config: &QuadratureConfig,
    init: I,
    log_weight: F,
) -> Result<Integrated>
where
    L: BaseLaw + ?Sized,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, f64) -> Result<f64> + Sync + Send,
{
    if breakpoints.windows(2).any(|w| !(w[0] <= w[1])) {
        return invalid("breakpoints must be sorted ascending");
    }
    let nodes = build_nodes(law, breakpoints, config);
    let log_weights = nodes
        .par_iter()
        .map_init(&init, |state, node| log_weight(state, node.x))
        .collect::<Result<Vec<f64>>>()?;
    combine(&nodes, &log_weights, breakpoints.len())
}
