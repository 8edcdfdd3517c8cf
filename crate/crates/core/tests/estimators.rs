//! Neural estimators and the benchmarking harness.

use peereffect::dig2rsi::{
    discriminator_holdout_r2, run_dig2rsi, stage1_fit, stage2_fit, stage2_inputs, Dig2rsiConfig,
};
use peereffect::eval::{
    benchmark, confounder_sweep, lambda_sweep, repeat, DatasetSpec, EstimatorKind, EstimatorSettings,
};
use peereffect::linalg::{mean, sample_std};
use peereffect::{Execution, GraphSpec, Nonlinearity, SemParams};

fn data(n: usize, strength: f64, nl: Nonlinearity) -> DatasetSpec {
    DatasetSpec {
        n,
        d: 4,
        graph: GraphSpec::ErdosRenyi { p: 10.0 / (n as f64 - 1.0) },
        params: SemParams::default_for(4).with_confounding(strength).with_nonlinearity(nl),
    }
}

/// Short training so harness tests stay fast.
fn quick() -> EstimatorSettings {
    let mut s = EstimatorSettings::default();
    s.dig2rsi.stage1_train.epochs = 4;
    s.dig2rsi.stage2.train.epochs = 4;
    s.dl2sls.stage1_train.epochs = 4;
    s.dl2sls.stage2_train.epochs = 4;
    s
}

#[test]
fn zero_lambda_matches_disabled_discriminator() {
    let ds = data(1500, 1.0, Nonlinearity::TanhQuadratic).generate(3).unwrap().preprocess_ig().unwrap();
    let cfg = Dig2rsiConfig::default().seeded(3);
    let s1 = stage1_fit(&ds, &cfg.stage1, &cfg.stage1_train).unwrap();
    let mut on = cfg.stage2.clone();
    on.lambda_a = 0.0;
    let mut off = on.clone();
    off.discriminator = false;
    let a = stage2_fit(&ds, &s1.residuals, &on).unwrap();
    let b = stage2_fit(&ds, &s1.residuals, &off).unwrap();
    // With λ_a = 0 the discriminator never touches the extractor or head.
    assert_eq!(a.extractor, b.extractor);
    assert_eq!(a.outcome_head, b.outcome_head);
    let la = a.history.last().unwrap().outcome;
    let lb = b.history.last().unwrap().outcome;
    assert_eq!(la, lb);
}

#[test]
fn adversary_lowers_holdout_predictability_of_the_residual() {
    let ds = data(3000, 1.0, Nonlinearity::TanhQuadratic).generate(1).unwrap().preprocess_ig().unwrap();
    let cfg = Dig2rsiConfig::default().seeded(1);
    let s1 = stage1_fit(&ds, &cfg.stage1, &cfg.stage1_train).unwrap();
    let z = stage2_inputs(&ds, &s1.residuals).unwrap();
    let r2_at = |lambda_a: f64| {
        let mut c = cfg.stage2.clone();
        c.lambda_a = lambda_a;
        let m = stage2_fit(&ds, &s1.residuals, &c).unwrap();
        discriminator_holdout_r2(&m, &z, &s1.residuals, 1).unwrap()
    };
    let (plain, adv) = (r2_at(0.0), r2_at(0.05));
    assert!(adv < plain, "held-out R² {adv} at 0.05 vs {plain} at 0");
}

#[test]
fn dig2rsi_is_seed_deterministic() {
    let ds = data(600, 1.0, Nonlinearity::TanhQuadratic).generate(2).unwrap();
    let s = quick();
    let a = run_dig2rsi(&ds, &s.dig2rsi, 5).unwrap();
    let b = run_dig2rsi(&ds, &s.dig2rsi, 5).unwrap();
    let c = run_dig2rsi(&ds, &s.dig2rsi, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.pe_hat, c.pe_hat);
    for key in ["stage1_r2", "disc_holdout_r2", "corr_vhat_u", "lambda_a"] {
        assert!(a.diagnostics.contains_key(key), "missing {key}");
    }
}

#[test]
fn dl2sls_recovers_unconfounded_linear_effect() {
    let spec = data(3000, 0.0, Nonlinearity::Linear);
    let (row, _) = repeat(
        EstimatorKind::Dl2sls,
        &EstimatorSettings::default(),
        &spec,
        &[1, 2, 3, 4, 5],
        Execution::Parallel,
    )
    .unwrap();
    assert!((row.pe_mean - 0.5).abs() < 0.08, "DL-2SLS mean {}", row.pe_mean);
}

#[test]
fn parallel_and_sequential_benchmarks_agree() {
    let kinds = [EstimatorKind::Naive, EstimatorKind::Tsls, EstimatorKind::Dig2rsi];
    let spec = data(400, 1.0, Nonlinearity::TanhQuadratic);
    let a = benchmark(&kinds, &quick(), &spec, &[1, 2, 3], Execution::Sequential).unwrap();
    let b = benchmark(&kinds, &quick(), &spec, &[1, 2, 3], Execution::Parallel).unwrap();
    assert_eq!(a.aggregate_csv(), b.aggregate_csv());
    assert_eq!(a.runs_csv(), b.runs_csv());
    let names: Vec<&str> = a.rows.iter().map(|r| r.estimator.as_str()).collect();
    assert_eq!(names, ["Naive", "2SLS", "DIG2RSI"]);
}

#[test]
fn aggregates_are_recomputable_from_runs() {
    let kinds = [EstimatorKind::Naive, EstimatorKind::Tsls, EstimatorKind::Loo];
    let r = benchmark(&kinds, &quick(), &data(500, 1.0, Nonlinearity::Linear), &[4, 5, 6, 7], Execution::Parallel)
        .unwrap();
    for row in &r.rows {
        let runs: Vec<_> = r.runs.iter().filter(|x| x.estimator == row.estimator).collect();
        let abs: Vec<f64> = runs.iter().map(|x| x.abs_bias).collect();
        let rel: Vec<f64> = runs.iter().map(|x| x.rel_bias).collect();
        let pe: Vec<f64> = runs.iter().map(|x| x.pe_hat).collect();
        assert_eq!(row.n_seeds, 4);
        assert_eq!(row.abs_bias_mean, mean(&abs));
        assert_eq!(row.abs_bias_std, sample_std(&abs));
        assert_eq!(row.pe_mean, mean(&pe));
        for x in &runs {
            assert!((x.rel_bias - 100.0 * x.abs_bias / 0.5).abs() < 1e-12);
        }
        assert_eq!(row.rel_bias_mean, mean(&rel));
    }
    // Every run line carries the estimate at full precision.
    let csv = r.runs_csv();
    let first = csv.lines().nth(1).unwrap();
    let pe: f64 = first.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(pe, r.runs[0].pe_hat);
}

#[test]
fn lambda_sweep_pairs_datasets_and_matches_repeat() {
    let spec = data(400, 1.0, Nonlinearity::TanhQuadratic);
    let seeds = [1, 2];
    let s = quick();
    let sweep = lambda_sweep(&spec, &[0.02, 0.02], &s, &seeds, Execution::Parallel).unwrap();
    let pe = |k: usize| sweep.runs.iter().skip(k * 2).take(2).map(|r| r.pe_hat).collect::<Vec<_>>();
    assert_eq!(pe(0), pe(1));

    let single = lambda_sweep(&spec, &[0.0], &s, &seeds, Execution::Sequential).unwrap();
    let mut plain = s.clone();
    plain.dig2rsi.stage2.lambda_a = 0.0;
    let (row, _) = repeat(EstimatorKind::Dig2rsi, &plain, &spec, &seeds, Execution::Sequential).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert_eq!(single.rows[0].pe_mean, row.pe_mean);
    assert_eq!(single.rows[0].abs_bias_std, row.abs_bias_std);

    assert!(lambda_sweep(&spec, &[0.0, -0.01], &s, &seeds, Execution::Sequential).is_err());
    assert!(lambda_sweep(&spec, &[], &s, &seeds, Execution::Sequential).is_err());
}

#[test]
fn naive_bias_grows_with_confounding_strength() {
    let spec = data(2000, 1.0, Nonlinearity::Linear);
    let seeds = [1, 2, 3, 4, 5];
    let r = confounder_sweep(&spec, &[0.0, 0.5, 1.0, 2.0], &[EstimatorKind::Naive], &quick(), &seeds, Execution::Parallel)
        .unwrap();
    let bias: Vec<f64> = r.rows.iter().map(|row| row.abs_bias_mean).collect();
    assert!(bias.windows(2).all(|w| w[1] >= w[0]), "{bias:?}");
    assert!(confounder_sweep(&spec, &[], &[EstimatorKind::Naive], &quick(), &seeds, Execution::Parallel).is_err());
}

#[test]
fn consistent_estimators_recover_the_unconfounded_effect() {
    let spec = data(3000, 1.0, Nonlinearity::Linear);
    let r = confounder_sweep(
        &spec,
        &[0.0],
        &[EstimatorKind::Tsls, EstimatorKind::Dig2rsi],
        &EstimatorSettings::default(),
        &[1, 2, 3, 4, 5],
        Execution::Parallel,
    )
    .unwrap();
    let tsls = r.row("2SLS", Some(0.0)).unwrap().abs_bias_mean;
    let dig = r.row("DIG2RSI", Some(0.0)).unwrap().abs_bias_mean;
    // DIG2RSI keeps a small finite-sample upward bias from stage-2 fitting.
    assert!(tsls < 0.08 && dig < 0.08, "2SLS {tsls}, DIG2RSI {dig}");
}

#[test]
fn benchmark_needs_truth_estimators_and_two_seeds() {
    let spec = data(200, 1.0, Nonlinearity::Linear);
    assert!(benchmark(&[], &quick(), &spec, &[1, 2], Execution::Sequential).is_err());
    assert!(benchmark(&[EstimatorKind::Naive], &quick(), &spec, &[1], Execution::Sequential).is_err());
}
