use mia_core::eval::CompiledStrategy;
use mia_core::simulate::{
    calibrate_delta, class_scores, cohens_d, gap_spec, helicity_log_spec, helicity_prob_spec,
    separation, simulate_dataset, GapMargins, SimConfig, DEFAULT_TARGET_AUC,
};

fn base(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        ..SimConfig::default()
    }
}

#[test]
fn calibrated_gap_metric_hits_the_anchor() {
    let cfg = base(2024);
    let cal = calibrate_delta(DEFAULT_TARGET_AUC, &cfg, 0.01).unwrap();
    assert!(!cal.clamped);
    assert!((cal.auc - DEFAULT_TARGET_AUC).abs() <= 0.01, "{cal:?}");

    let ds = simulate_dataset(&cfg.with_delta(cal.delta)).unwrap();
    let gap = separation(&CompiledStrategy::compile(gap_spec()).unwrap(), &ds).unwrap();
    assert!((0.885..=0.945).contains(&gap.auc), "{gap:?}");
    let d = gap.cohens_d.unwrap();
    assert!(d < 0.0 && (1.0..=3.0).contains(&d.abs()), "{gap:?}");
    assert!(gap.welch_p < 1e-3);

    // The probability form of the helicity program separates; its direction
    // is whatever the data says.
    let hp = separation(
        &CompiledStrategy::compile(helicity_prob_spec()).unwrap(),
        &ds,
    )
    .unwrap();
    assert!(hp.auc.max(1.0 - hp.auc) > 0.6, "{hp:?}");
    let hl = separation(
        &CompiledStrategy::compile(helicity_log_spec()).unwrap(),
        &ds,
    )
    .unwrap();
    eprintln!("helicity on p(y): {hp:?}; on log p(y): {hl:?}");
}

#[test]
fn no_boost_means_no_separation() {
    for seed in 0..3 {
        let auc = GapMargins::compute(&base(seed)).auc(0.0);
        assert!((0.45..=0.55).contains(&auc), "seed {seed}: {auc}");
    }
    let ds = simulate_dataset(&base(11)).unwrap();
    let (m, n) = class_scores(&CompiledStrategy::compile(gap_spec()).unwrap(), &ds).unwrap();
    assert!(cohens_d(&m, &n).unwrap().abs() < 0.2);
}

#[test]
fn gap_auc_is_monotone_in_delta() {
    let grid = [0.0, 0.5, 1.0, 2.0, 4.0];
    let margins: Vec<GapMargins> = (0..5)
        .map(|s| GapMargins::compute(&base(100 + s)))
        .collect();
    let mean_auc: Vec<f64> = grid
        .iter()
        .map(|&d| margins.iter().map(|m| m.auc(d)).sum::<f64>() / margins.len() as f64)
        .collect();
    assert!(mean_auc.windows(2).all(|w| w[1] >= w[0]), "{mean_auc:?}");
}

#[test]
fn strong_boost_gives_negative_effect() {
    let ds = simulate_dataset(&base(8).with_delta(0.5)).unwrap();
    let s = separation(&CompiledStrategy::compile(gap_spec()).unwrap(), &ds).unwrap();
    assert!(s.auc > 0.8);
    assert!(s.cohens_d.unwrap() < 0.0);
}

#[test]
fn calibration_is_reproducible_and_stable_in_vocab() {
    let small = |vocab| SimConfig {
        n_member: 200,
        n_nonmember: 200,
        vocab,
        seq_len: 64,
        delta: 0.0,
        seed: 5,
    };
    let a = calibrate_delta(DEFAULT_TARGET_AUC, &small(100), 0.01).unwrap();
    assert_eq!(
        a,
        calibrate_delta(DEFAULT_TARGET_AUC, &small(100), 0.01).unwrap()
    );
    for vocab in [100, 1000, 4096] {
        let c = calibrate_delta(DEFAULT_TARGET_AUC, &small(vocab), 0.01).unwrap();
        assert!(
            (c.auc - DEFAULT_TARGET_AUC).abs() <= 0.01,
            "V={vocab}: {c:?}"
        );
        eprintln!("V={vocab}: delta*={}", c.delta);
    }
}
