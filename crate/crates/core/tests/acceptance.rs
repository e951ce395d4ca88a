//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_SCALE=k` divides replication counts by `k` for quick runs;
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use randclust::bench::{
    mode, repeat_estimate_k, run_fwer, run_k_histogram, run_null_calibration, run_quality_sweep,
    run_stability, FwerSpec, GeneratorSpec, KHistogramSpec, NullCalibrationSpec, QualitySpec,
    StabilitySpec,
};
use randclust::data::{generate_two_cluster, load_csv, DataMatrix, Filter};
use randclust::engine::{run_clustering, MergeTrace, RandomizationConfig};
use randclust::inference::{
    auxiliary_stats, chi_statistic, conditional_cdf_f_many, f_statistic, p_value_f,
    reconstruct_chi, reconstruct_f, sequence_log_weight, ChiAuxiliaryStats, Covariance,
    TestOptions,
};
use randclust::linkage::{pairwise_dissimilarity, Linkage, LinkageTable};
use randclust::rng::{derive_seed, SimRng};
use randclust::selection::SelectionConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scale() -> usize {
    std::env::var("ACCEPTANCE_SCALE")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&s| s >= 1)
        .unwrap_or(1)
}

fn reps(full: usize) -> usize {
    full.div_ceil(scale()).max(1)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_spd(p: usize, rng: &mut SimRng) -> Array2<f64> {
    let a = Array2::from_shape_fn((p, p), |_| rng.standard_normal());
    let mut s = a.t().dot(&a);
    for i in 0..p {
        s[[i, i]] += p as f64;
    }
    s
}

fn criterion_1() -> Outcome {
    let mut rng = SimRng::new(101);
    let (mut worst_f, mut worst_chi) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let n = 2 * (3 + (rng.next_u64() % 10) as usize);
        let p = 1 + (rng.next_u64() % 5) as usize;
        let linkage = Linkage::ALL[i % 4];
        let (x, _) = generate_two_cluster(n, 3.0 * rng.uniform(), 1.0, p, rng.next_u64()).unwrap();
        let k = 2 + (rng.next_u64() % 3) as usize;
        let trace =
            run_clustering(&x, k - 1, &RandomizationConfig::new(0.2, linkage, i as u64).unwrap())
                .unwrap();
        let rec = trace.record(trace.len()).unwrap();
        let (c1, c2) = (&rec.members_a, &rec.members_b);
        let norm = frobenius(x.values());
        if c1.len() + c2.len() > 2 {
            let aux = auxiliary_stats(&x, c1, c2).unwrap();
            let r = f_statistic(&x, c1, c2).unwrap().r;
            let back = reconstruct_f(r, &aux).unwrap();
            worst_f = worst_f.max(frobenius(&(back.values() - x.values())) / norm);
        }
        let cov = Covariance::new(&random_spd(p, &mut rng)).unwrap();
        let aux = ChiAuxiliaryStats::new(&x, c1, c2, &cov).unwrap();
        let u = chi_statistic(&x, c1, c2, &cov).unwrap();
        let back = reconstruct_chi(u, &aux).unwrap();
        worst_chi = worst_chi.max(frobenius(&(back.values() - x.values())) / norm);
    }
    outcome(
        worst_f <= 1e-8 && worst_chi <= 1e-8,
        format!("max relative error F {worst_f:.2e}, chi {worst_chi:.2e} (tol 1e-8)"),
    )
}

fn merge_sequence(t: &MergeTrace) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    t.records
        .iter()
        .map(|r| (r.members_a.clone(), r.members_b.clone(), r.dissimilarity))
        .collect()
}

/// Whether some step of the deterministic run has a tied smallest candidate.
fn has_tied_minimum(x: &DataMatrix, linkage: Linkage) -> bool {
    let mut table = LinkageTable::new(linkage, &pairwise_dissimilarity(x));
    while table.active().len() > 1 {
        let c = table.candidates();
        let best = c
            .iter()
            .min_by(|a, b| a.dissimilarity.total_cmp(&b.dissimilarity))
            .unwrap();
        if c.iter().filter(|m| m.dissimilarity == best.dissimilarity).count() > 1 {
            return true;
        }
        table.merge(best.a, best.b).unwrap();
    }
    false
}

fn criterion_2() -> Outcome {
    let (mut mismatches, mut screened, mut accepted) = (0, 0, 0);
    let mut seed = 200u64;
    while accepted < 50 {
        seed += 1;
        let (x, _) = generate_two_cluster(20, 2.0, 1.0, 3, seed).unwrap();
        if Linkage::ALL.iter().any(|&l| has_tied_minimum(&x, l)) {
            screened += 1;
            continue;
        }
        accepted += 1;
        for linkage in Linkage::ALL {
            let run = |tau| {
                run_clustering(&x, 1, &RandomizationConfig::new(tau, linkage, seed).unwrap())
                    .unwrap()
            };
            if merge_sequence(&run(1e-8)) != merge_sequence(&run(0.0)) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 200 traces differ ({screened} datasets with tied minima skipped)"),
    )
}

fn criterion_3() -> Outcome {
    let (mut mismatches, mut worst) = (0, 0.0f64);
    for i in 0..20u64 {
        let (x, _) = generate_two_cluster(16, 2.0, 1.0, 2, 300 + i).unwrap();
        let x3 = x.scaled(3.0).unwrap();
        for linkage in Linkage::ALL {
            let cfg = RandomizationConfig::new(0.3, linkage, i).unwrap();
            let a = run_clustering(&x, 1, &cfg).unwrap();
            let b = run_clustering(&x3, 1, &cfg).unwrap();
            for (ra, rb) in a.records.iter().zip(&b.records) {
                if ra.members_a != rb.members_a || ra.members_b != rb.members_b {
                    mismatches += 1;
                    break;
                }
                worst = worst
                    .max((ra.log_prob - rb.log_prob).abs())
                    .max((3.0 * ra.dissimilarity - rb.dissimilarity).abs() / rb.dissimilarity)
                    .max((3.0 * ra.tau_t - rb.tau_t).abs() / rb.tau_t);
            }
        }
    }
    outcome(
        mismatches == 0 && worst < 1e-9,
        format!("{mismatches} of 80 merge sequences differ; max numeric deviation {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let (x, _) = generate_two_cluster(24, 1.0, 1.0, 4, 404).unwrap();
    let trace =
        run_clustering(&x, 1, &RandomizationConfig::new(0.1, Linkage::Complete, 4).unwrap()).unwrap();
    let t = trace.len();
    let rec = trace.record(t).unwrap();
    let aux = auxiliary_stats(&x, &rec.members_a, &rec.members_b).unwrap();
    let (d1, d2) = aux.f_dof();
    let law = FisherSnedecor::new(d1, d2).unwrap();
    let grid: Vec<f64> = (1..=20).map(|i| 0.25 * i as f64).collect();
    let cdf = conditional_cdf_f_many(&grid, &aux, &trace, t, &TestOptions::naive()).unwrap();
    let cdf_err = grid
        .iter()
        .zip(&cdf)
        .map(|(&r, &c)| (c - law.cdf(r)).abs())
        .fold(0.0, f64::max);
    let res = p_value_f(&x, &trace, t, &TestOptions::naive()).unwrap();
    let p_err = (res.p_value - law.sf(res.statistic)).abs();
    outcome(
        cdf_err <= 1e-6 && p_err <= 1e-6,
        format!("max CDF deviation {cdf_err:.1e}, p-value deviation {p_err:.1e} (tol 1e-6)"),
    )
}

/// Importance-sampling estimate of the conditional CDF at each point:
/// F draws weighted by the replayed selection probability.
fn monte_carlo_cdf(
    points: &[f64],
    x: &DataMatrix,
    trace: &MergeTrace,
    step: usize,
    draws: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let rec = trace.record(step).unwrap();
    let aux = auxiliary_stats(x, &rec.members_a, &rec.members_b).unwrap();
    let (d1, d2) = aux.f_dof();
    let (d1, d2) = (d1 as usize, d2 as usize);
    let samples: Vec<(f64, f64)> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = SimRng::new(derive_seed(seed, i as u64));
            let chi = |k: usize, rng: &mut SimRng| {
                (0..k).map(|_| rng.standard_normal().powi(2)).sum::<f64>()
            };
            let num = chi(d1, &mut rng) / d1 as f64;
            let den = chi(d2, &mut rng) / d2 as f64;
            let r = num / den;
            (r, sequence_log_weight(r, &aux, trace, step).unwrap())
        })
        .collect();
    let top = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = samples.iter().map(|s| (s.1 - top).exp()).collect();
    let total: f64 = w.iter().sum();
    points
        .iter()
        .map(|&r0| {
            let hit: f64 = samples
                .iter()
                .zip(&w)
                .filter(|(s, _)| s.0 <= r0)
                .map(|(_, w)| w)
                .sum();
            let c = hit / total;
            let var: f64 = samples
                .iter()
                .zip(&w)
                .map(|(s, w)| {
                    let ind = if s.0 <= r0 { 1.0 } else { 0.0 };
                    (w * (ind - c)).powi(2)
                })
                .sum::<f64>()
                / (total * total);
            (c, var.sqrt())
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let cases = [
        (20usize, 3usize, 0.0, Linkage::Complete, 0.1, 1usize),
        (20, 2, 1.5, Linkage::Average, 0.2, 1),
        (18, 3, 1.0, Linkage::Single, 0.3, 2),
        (16, 4, 0.0, Linkage::Minimax, 0.1, 1),
        (22, 2, 2.0, Linkage::Complete, 0.5, 2),
    ];
    let draws = reps(100_000);
    let mut worst = 0.0f64;
    for (i, &(n, p, delta, linkage, tau, k)) in cases.iter().enumerate() {
        let (x, _) = generate_two_cluster(n, delta, 1.0, p, 500 + i as u64).unwrap();
        let trace =
            run_clustering(&x, k, &RandomizationConfig::new(tau, linkage, 50 + i as u64).unwrap())
                .unwrap();
        let step = trace.len();
        let rec = trace.record(step).unwrap();
        let aux = auxiliary_stats(&x, &rec.members_a, &rec.members_b).unwrap();
        let r_obs = f_statistic(&x, &rec.members_a, &rec.members_b).unwrap().r;
        let (d1, d2) = aux.f_dof();
        let median = FisherSnedecor::new(d1, d2).unwrap().inverse_cdf(0.5);
        let points = [r_obs, median];
        let quad = conditional_cdf_f_many(&points, &aux, &trace, step, &TestOptions::default())
            .unwrap();
        let mc = monte_carlo_cdf(&points, &x, &trace, step, draws, 5000 + i as u64);
        for (q, (c, se)) in quad.iter().zip(&mc) {
            let z = (q - c).abs() / se.max(1e-12);
            worst = worst.max(z);
        }
    }
    outcome(
        worst <= 3.0,
        format!("10 (r, dataset) pairs, {draws} draws each; max |quadrature - MC| = {worst:.2} SE (tol 3)"),
    )
}

fn criterion_6() -> Outcome {
    let spec = NullCalibrationSpec {
        replications: reps(2000),
        seed: 6,
        ..NullCalibrationSpec::default()
    };
    let r = run_null_calibration(&spec).unwrap();
    let ks_tol = if scale() >= 10 { 0.08 } else { 0.05 };
    outcome(
        r.ks <= ks_tol && (r.type_one - 0.05).abs() <= 0.02,
        format!(
            "{} p-values ({} degenerate): KS {:.4} (tol {ks_tol}), Type I {:.4} (target 0.05 +/- 0.02)",
            r.p_values.len(),
            r.skipped,
            r.ks,
            r.type_one
        ),
    )
}

fn criterion_7() -> Outcome {
    let spec = FwerSpec {
        replications: reps(2000),
        taus: vec![0.1],
        seed: 7,
        ..FwerSpec::default()
    };
    let rows = run_fwer(&spec).unwrap();
    let naive = rows.iter().find(|r| r.method == "naive").unwrap();
    let rc = rows.iter().find(|r| r.tau == 0.1).unwrap();
    outcome(
        rc.fwer <= 0.02 && naive.fwer >= 0.5,
        format!(
            "{} reps: randomized FWER {:.4} (tol 0.02), naive {:.4} (needs >= 0.5)",
            spec.replications, rc.fwer, naive.fwer
        ),
    )
}

fn criterion_8() -> Outcome {
    let spec = |delta: f64, seed| KHistogramSpec {
        replications: reps(100),
        generator: GeneratorSpec::ThreeCluster { n: 30, delta, sigma: 1.0 },
        seed,
        ..KHistogramSpec::default()
    };
    let far = run_k_histogram(&spec(14.0, 8)).unwrap();
    let near = run_k_histogram(&spec(4.0, 9)).unwrap();
    let (ours1, gap1) = (near.frequency(1), near.gap_frequency(1));
    outcome(
        far.mode() == 3 && far.frequency(3) >= 0.7 && gap1 > ours1,
        format!(
            "delta 14: mode {}, freq(K=3) {:.2} (needs >= 0.7); delta 4: freq(K=1) gap {:.2} vs ours {:.2}",
            far.mode(),
            far.frequency(3),
            gap1,
            ours1
        ),
    )
}

fn criterion_9() -> Outcome {
    let spec = QualitySpec {
        replications: reps(500),
        taus: vec![0.0, 0.1],
        seed: 9,
        ..QualitySpec::default()
    };
    let r = run_quality_sweep(&spec).unwrap();
    let (a, b) = (r.summary_for(0.0).unwrap(), r.summary_for(0.1).unwrap());
    let d_ari = (a.ari_median - b.ari_median).abs();
    let d_ratio = (a.ratio_median - b.ratio_median).abs();
    outcome(
        d_ari <= 0.05 && d_ratio <= 0.05,
        format!("|median ARI diff| {d_ari:.4}, |median WCSS/TSS diff| {d_ratio:.4} (tol 0.05)"),
    )
}

fn penguins() -> DataMatrix {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/penguins.csv");
    let filters: Vec<Filter> = ["sex=female", "year=2007", "year=2008"]
        .iter()
        .map(|f| f.parse().unwrap())
        .collect();
    let features = ["bill_length_mm".to_string(), "flipper_length_mm".to_string()];
    load_csv(path, &features, &filters).unwrap().matrix
}

fn criterion_10() -> Outcome {
    let x = penguins();
    let k_hats = repeat_estimate_k(
        &x,
        reps(100),
        Linkage::Complete,
        0.1,
        &SelectionConfig::default(),
        &TestOptions::default(),
        10,
    )
    .unwrap();
    let k_mode = mode(&k_hats).unwrap();
    let share = k_hats.iter().filter(|&&k| k == k_mode).count() as f64 / k_hats.len() as f64;
    let spec = StabilitySpec {
        runs: reps(500),
        k: 2,
        seed: 11,
        ..StabilitySpec::default()
    };
    let c = run_stability(&x, &spec).unwrap();
    let blocks = c.blocks(2).unwrap();
    let within = c.block_mean(&blocks, true).unwrap();
    let between = c.block_mean(&blocks, false).unwrap();
    let sizes = (
        blocks.iter().filter(|&&b| b == 0).count(),
        blocks.iter().filter(|&&b| b == 1).count(),
    );
    outcome(
        x.n() == 107 && k_mode == 2 && within >= 0.8 && between <= 0.2,
        format!(
            "n {}; mode K {} ({:.0}% of runs); blocks {:?}: within {:.3} (>= 0.8), between {:.3} (<= 0.2)",
            x.n(),
            k_mode,
            100.0 * share,
            sizes,
            within,
            between
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("reconstruction identity", criterion_1),
        ("tau -> 0 determinism", criterion_2),
        ("scale invariance", criterion_3),
        ("weight cancellation", criterion_4),
        ("Monte Carlo oracle", criterion_5),
        ("null calibration", criterion_6),
        ("FWER", criterion_7),
        ("K recovery", criterion_8),
        ("clustering quality", criterion_9),
        ("penguin analysis", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    println!("acceptance (scale 1/{})", scale());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        if !result.pass {
            failed += 1;
        }
        println!(
            "[{}] {id:>2} {name}: {} [{}]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            fmt_duration(elapsed)
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
