use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rkrom_core::eval::*;
use rkrom_core::fom::{time_grid, Trajectory};
use rkrom_core::metrics::ErrorMetric;
use rkrom_core::pod::{compute_pod, PodOptions, ReducedBasis};
use rkrom_core::sampling::{Polynomial, SamplingKind, SamplingMethod};
use rkrom_core::surrogate::{Activation, MlpCore, Mode, Normalizer, SurrogateNet, TrainingConfig};

fn toy_test(k: usize) -> TestCase {
    TestCase {
        model_id: "toy".into(),
        label: TestLabel::ConstantLoad,
        initial_temperature: 20.0,
        load: Polynomial::constant(1.0),
        t_end: k as f64,
        k,
    }
}

fn trajectory(states: DMatrix<f64>, t_end: f64) -> Trajectory {
    let k = states.ncols() - 1;
    Trajectory {
        times: time_grid(t_end, k),
        states,
        signal_id: 0,
    }
}

fn identity_basis(n: usize) -> ReducedBasis {
    let y = DMatrix::from_fn(n, n, |i, j| if i == j { (n - i) as f64 } else { 0.0 });
    compute_pod(&y, n).unwrap()
}

fn linear_rknn(a: &DMatrix<f64>, tau: f64) -> SurrogateNet {
    let n = a.nrows();
    let core = MlpCore::from_linear_map(a, n + 2, 32).unwrap();
    SurrogateNet::new(core, Mode::Rknn, tau, Normalizer::identity(n, 2)).unwrap()
}

#[test]
fn exact_prediction_has_zero_error() {
    let n = 3;
    let basis = identity_basis(n);
    let states = DMatrix::from_fn(n, 11, |i, _| 1.0 + i as f64);
    let reference = trajectory(states, 10.0);
    let zero = SurrogateNet::new(
        MlpCore::zeros(&[n + 2, 8, n], Activation::Relu).unwrap(),
        Mode::Rknn,
        1.0,
        Normalizer::identity(n, 2),
    )
    .unwrap();
    for mode in [EvalMode::OneStep, EvalMode::Rollout] {
        let err = e_ann(&basis, &zero, &toy_test(10), &reference, mode).unwrap();
        assert_eq!(err.relative, 0.0);
        assert_eq!(err.scaled, 0.0);
    }
}

#[test]
fn zero_prediction_over_one_step_has_unit_error() {
    let n = 2;
    let basis = identity_basis(n);
    let reference = trajectory(DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, -4.0]), 1.0);
    let zero_direct = SurrogateNet::new(
        MlpCore::zeros(&[n + 2, 8, n], Activation::Relu).unwrap(),
        Mode::Direct,
        1.0,
        Normalizer::identity(n, 2),
    )
    .unwrap();
    let err = e_ann(&basis, &zero_direct, &toy_test(1), &reference, EvalMode::Rollout).unwrap();
    assert!((err.relative - 1.0).abs() < 1e-15);
    assert!((err.scaled - 1.0).abs() < 1e-15);
}

#[test]
fn error_ignores_basis_column_signs() {
    let snapshots = DMatrix::from_fn(6, 9, |i, j| ((i * 7 + j * 3) as f64).sin() + 0.1 * i as f64);
    let basis = compute_pod(&snapshots, 3).unwrap();
    let mut flipped = basis.clone();
    let signs = [1.0, -1.0, -1.0];
    for (c, s) in signs.iter().enumerate() {
        flipped.basis.column_mut(c).scale_mut(*s);
    }
    let a = DMatrix::from_row_slice(3, 3, &[-0.2, 0.05, 0.0, 0.1, -0.3, 0.02, 0.0, 0.04, -0.1]);
    let s = DMatrix::from_diagonal(&DVector::from_row_slice(&signs));
    let reference = trajectory(snapshots.columns(0, 9).into_owned(), 8.0);
    let test = toy_test(8);
    for mode in [EvalMode::OneStep, EvalMode::Rollout] {
        let e1 = e_ann(&basis, &linear_rknn(&a, 1.0), &test, &reference, mode).unwrap();
        let e2 = e_ann(&flipped, &linear_rknn(&(&s * &a * &s), 1.0), &test, &reference, mode).unwrap();
        assert!((e1.relative - e2.relative).abs() <= 1e-12 * e1.relative.max(1e-300));
    }
}

#[test]
fn reference_on_another_grid_is_rejected() {
    let basis = identity_basis(2);
    let reference = trajectory(DMatrix::from_element(2, 6, 1.0), 5.0);
    let net = linear_rknn(&DMatrix::zeros(2, 2), 1.0);
    assert!(e_ann(&basis, &net, &toy_test(10), &reference, EvalMode::Rollout).is_err());
}

fn small_matrix(architectures: Vec<Mode>, n_r: Vec<usize>) -> MatrixConfig {
    MatrixConfig {
        models: vec![ModelStudy::heat_sink()],
        samplings: vec![SamplingKind::Dps],
        method: SamplingMethod::Halton,
        n_s: 4,
        sampling_seed: 0,
        omega: None,
        architectures,
        n_r,
        pod: PodOptions::default(),
        ensemble: 2,
        base_seed: 0,
        training: TrainingConfig {
            epochs: 5,
            ..Default::default()
        },
        training_overrides: BTreeMap::new(),
        reference_refine: 2,
    }
}

#[test]
fn single_column_matrix_has_one_cell_per_test() {
    let report = run_matrix(&small_matrix(vec![Mode::Direct], vec![1])).unwrap();
    assert_eq!(report.len(), 2);
    for label in [TestLabel::ConstantLoad, TestLabel::DynamicLoad] {
        let cell = report.get("heat_sink", SamplingKind::Dps, Mode::Direct, 1, label).unwrap();
        let stats = cell.stats().expect("cell succeeded");
        assert_eq!(stats.members, 2);
        assert_eq!(stats.effective_n_r, 1);
    }
}

#[test]
fn divergent_cells_fail_alone_and_runs_repeat_exactly() {
    let mut cfg = small_matrix(vec![Mode::Direct, Mode::Rknn], vec![1, 2]);
    cfg.training_overrides.insert(
        Mode::Rknn,
        TrainingConfig {
            learning_rate: 1e3,
            epochs: 50,
            ..Default::default()
        },
    );
    let report = run_matrix(&cfg).unwrap();
    assert_eq!(report.len(), 8);
    for (key, cell) in &report.cells {
        match (key.architecture, cell) {
            (Mode::Rknn, CellOutcome::Failed { kind, .. }) => assert_eq!(kind, "training_divergence"),
            (Mode::Direct, CellOutcome::Ok(_)) => {}
            other => panic!("unexpected outcome {other:?}"),
        }
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.contains(",failed,training_divergence,"));
    let again = run_matrix(&cfg).unwrap();
    assert_eq!(again.to_csv(), csv);
    assert_eq!(EvalReport::from_csv(&csv).unwrap().to_csv(), csv);
}

#[test]
fn unit_step_factor_reproduces_the_cell_error() {
    let cfg = small_matrix(vec![Mode::Rknn], vec![2]);
    let study = &cfg.models[0];
    let model = study.model.build().unwrap();
    let prepared = prepare_sampling(study, &model, SamplingKind::Dps, &cfg).unwrap();
    let basis = prepared.basis.truncate(2);
    let data = transitions(&basis, &prepared.set).unwrap();
    let nets = train_ensemble(Mode::Rknn, &data, &cfg.training, &[0]).unwrap();
    let test = &study.tests[0];
    let reference = test.reference(&model, cfg.reference_refine).unwrap();
    let direct = e_ann(&basis, &nets[0], test, &reference, EvalMode::Rollout).unwrap();
    let study_nets = StepStudyNets {
        rknn: Some(&nets[0]),
        ..Default::default()
    };
    let rows = step_size_study(&model, &basis, test, study_nets, &[1.0], cfg.reference_refine).unwrap();
    assert_eq!(rows[0].rknn.as_ref().unwrap().metric(), Some(direct));
    assert_eq!(rows[0].k, test.k);
    assert!(step_size_study(&model, &basis, test, study_nets, &[0.0], 1).is_err());
    assert!(step_size_study(&model, &basis, test, study_nets, &[0.3], 1).is_err());
}

fn stats(scaled: f64) -> CellStats {
    let spread = Spread { mean: scaled, std: 0.0 };
    let err = EnsembleError {
        scaled: spread,
        relative: Spread {
            mean: 100.0 * scaled,
            std: 0.0,
        },
    };
    CellStats {
        effective_n_r: 1,
        members: 1,
        one_step: err,
        rollout: err,
        e_pod: ErrorMetric::from_relative(0.01, 1, 100),
    }
}

fn synthetic_report(errors: &[(SamplingKind, usize, f64)]) -> EvalReport {
    let mut report = EvalReport::default();
    for &(sampling, n_r, e) in errors {
        let key = CellKey {
            model: "m".into(),
            sampling,
            architecture: Mode::Direct,
            n_r,
            test: TestLabel::DynamicLoad,
        };
        report.cells.insert(key, CellOutcome::Ok(stats(e)));
    }
    report
}

#[test]
fn equal_errors_give_zero_sampling_difference() {
    let report = synthetic_report(&[
        (SamplingKind::Sps, 1, 0.002),
        (SamplingKind::Dps, 1, 0.002),
        (SamplingKind::Sps, 2, 0.001),
        (SamplingKind::Dps, 2, 0.001),
    ]);
    let summary = sps_vs_dps_summary(&report);
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0].mean_difference, 0.0);
    assert_eq!(summary[0].ties, 2);
    assert!(!summary[0].partial);
}

#[test]
fn dps_wins_and_missing_cells_are_counted() {
    let report = synthetic_report(&[
        (SamplingKind::Sps, 1, 0.0038),
        (SamplingKind::Dps, 1, 0.0015),
        (SamplingKind::Sps, 2, 0.001),
    ]);
    let summary = &sps_vs_dps_summary(&report)[0];
    assert_eq!(summary.dps_wins, 1);
    assert!(summary.partial);
    assert!((summary.mean_difference - 0.0023).abs() < 1e-15);
    let table = render_tables(&report).unwrap();
    assert!(table.contains("0.38"));
    assert!(table.contains("0.15(\u{2212}0.23)"));
}

#[test]
fn empty_report_renders_no_table() {
    assert!(render_tables(&EvalReport::default()).is_err());
}
