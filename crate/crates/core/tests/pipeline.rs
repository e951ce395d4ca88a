//! End-to-end checks across data generation, clustering, testing and selection.

use randclust::data::{generate_three_cluster, generate_two_cluster};
use randclust::engine::{run_clustering, MergeTrace, RandomizationConfig};
use randclust::inference::{p_value_chi, p_value_f, Covariance, TestOptions};
use randclust::linkage::Linkage;
use randclust::metrics::ari;
use randclust::selection::{estimate_k, SelectionConfig};

#[test]
fn separated_pair_is_rejected() {
    let (x, truth) = generate_two_cluster(20, 12.0, 1.0, 2, 5).unwrap();
    let config = RandomizationConfig::new(0.1, Linkage::Complete, 9).unwrap();
    let trace = run_clustering(&x, 1, &config).unwrap();
    let labels = trace.labels_at(2).unwrap();
    assert!((ari(&labels, &truth.labels).unwrap() - 1.0).abs() < 1e-12);
    let res = p_value_f(&x, &trace, x.n() - 1, &TestOptions::default()).unwrap();
    assert!(res.p_value < 1e-3, "p = {}", res.p_value);
}

#[test]
fn selective_and_naive_agree_on_statistic() {
    let (x, _) = generate_two_cluster(16, 0.0, 1.0, 3, 11).unwrap();
    let config = RandomizationConfig::new(0.1, Linkage::Average, 2).unwrap();
    let trace = run_clustering(&x, 1, &config).unwrap();
    let step = x.n() - 1;
    let sel = p_value_f(&x, &trace, step, &TestOptions::default()).unwrap();
    let naive = p_value_f(&x, &trace, step, &TestOptions::naive()).unwrap();
    assert_eq!(sel.statistic.to_bits(), naive.statistic.to_bits());
    assert!((0.0..=1.0).contains(&sel.p_value));
    assert!((0.0..=1.0).contains(&naive.p_value));
}

#[test]
fn chi_variant_runs_on_known_covariance() {
    let (x, _) = generate_two_cluster(14, 3.0, 1.0, 2, 3).unwrap();
    let config = RandomizationConfig::new(0.25, Linkage::Single, 4).unwrap();
    let trace = run_clustering(&x, 1, &config).unwrap();
    let cov = Covariance::identity(2).unwrap();
    let res = p_value_chi(&x, &trace, x.n() - 1, &cov, &TestOptions::default()).unwrap();
    assert!((0.0..=1.0).contains(&res.p_value));
}

#[test]
fn trace_survives_json_and_gives_same_p_value() {
    let (x, _) = generate_two_cluster(12, 4.0, 1.0, 2, 8).unwrap();
    let config = RandomizationConfig::new(0.5, Linkage::Minimax, 6).unwrap();
    let trace = run_clustering(&x, 1, &config).unwrap();
    let back = MergeTrace::from_json(&trace.to_json().unwrap()).unwrap();
    assert_eq!(trace, back);
    let a = p_value_f(&x, &trace, 11, &TestOptions::default()).unwrap();
    let b = p_value_f(&x, &back, 11, &TestOptions::default()).unwrap();
    assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
}

#[test]
fn well_separated_triangle_gives_three() {
    let (x, _) = generate_three_cluster(30, 30.0, 1.0, 21).unwrap();
    let (est, trace) = estimate_k(
        &x,
        Linkage::Complete,
        0.1,
        &SelectionConfig::default(),
        13,
        &TestOptions::default(),
    )
    .unwrap();
    assert_eq!(trace.len(), x.n() - 1);
    assert!(est.k_hat >= 2, "k_hat = {}", est.k_hat);
}

#[test]
fn same_seed_same_estimate() {
    let (x, _) = generate_two_cluster(16, 5.0, 1.0, 2, 1).unwrap();
    let run = || {
        estimate_k(
            &x,
            Linkage::Complete,
            0.1,
            &SelectionConfig::default(),
            77,
            &TestOptions::default(),
        )
        .unwrap()
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a.k_hat, b.k_hat);
    assert_eq!(ta, tb);
}
