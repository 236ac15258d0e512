//! Error evaluation of trained surrogates and the comparison experiments:
//! static versus dynamic sampling, direct versus RK4 networks, constant
//! versus time-varying test loads, and step-size changes after training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{integrate_reference_with, time_grid, FomModel, GAP_EMISSIVITY_COEFF, IntegrationOptions, ModelSpec, Trajectory};
use crate::metrics::{relative_error, ErrorMetric};
use crate::pod::{compute_pod_with, project_set, reprojection_error, PodOptions, ReducedBasis, SnapshotSet};
use crate::sampling::{sample, ParameterSignal, ParameterSpace, Polynomial, SamplingKind, SamplingMethod};
use crate::surrogate::{fit, Mode, SurrogateNet, TrainingConfig, TransitionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestLabel {
    ConstantLoad,
    DynamicLoad,
}

impl TestLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TestLabel::ConstantLoad => "constant_load",
            TestLabel::DynamicLoad => "dynamic_load",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant_load" => Ok(TestLabel::ConstantLoad),
            "dynamic_load" => Ok(TestLabel::DynamicLoad),
            _ => Err(Error::Config(format!("unknown test label {s:?}"))),
        }
    }
}

/// A held-out scenario: uniform initial temperature and a load history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub model_id: String,
    pub label: TestLabel,
    /// Degrees Celsius.
    pub initial_temperature: f64,
    pub load: Polynomial,
    pub t_end: f64,
    pub k: usize,
}

impl TestCase {
    /// Heat sink at 20 degC under a constant 0.1 load.
    pub fn heat_sink_constant() -> Self {
        Self {
            model_id: "heat_sink".into(),
            label: TestLabel::ConstantLoad,
            initial_temperature: 20.0,
            load: Polynomial::constant(0.1),
            t_end: 500.0,
            k: 100,
        }
    }

    /// Heat sink at 20 degC under the load ramp `0.15 - 0.1 t / 500`.
    pub fn heat_sink_dynamic() -> Self {
        Self {
            label: TestLabel::DynamicLoad,
            load: Polynomial {
                coeffs: vec![0.15, -0.1],
                shift: 0.0,
                scale: 500.0,
            },
            ..Self::heat_sink_constant()
        }
    }

    /// Radiating plates at 20 degC under a constant 50 W load.
    pub fn gap_constant() -> Self {
        Self {
            model_id: "gap_radiation".into(),
            label: TestLabel::ConstantLoad,
            initial_temperature: 20.0,
            load: Polynomial::constant(50.0),
            t_end: 3600.0,
            k: 100,
        }
    }

    /// Radiating plates under `60 - 20 ((t - 1800) / 1800)^2` W.
    pub fn gap_dynamic() -> Self {
        Self {
            label: TestLabel::DynamicLoad,
            load: Polynomial {
                coeffs: vec![60.0, 0.0, -20.0],
                shift: 1800.0,
                scale: 1800.0,
            },
            ..Self::gap_constant()
        }
    }

    /// The parameter history `mu(t) = (T0, load(t))`.
    pub fn signal(&self) -> ParameterSignal {
        ParameterSignal::Polynomial {
            components: vec![Polynomial::constant(self.initial_temperature), self.load.clone()],
        }
    }

    pub fn tau(&self) -> f64 {
        self.t_end / self.k as f64
    }

    /// Checks the parameters stay inside the box at every time the load is
    /// sampled (`t_0 .. t_{k-1}`).
    pub fn check_within(&self, space: &ParameterSpace) -> Result<()> {
        let signal = self.signal();
        for &t in &time_grid(self.t_end, self.k)[..self.k] {
            let mu = signal.eval(t)?;
            if !space.contains(&mu) {
                return Err(Error::Config(format!(
                    "test {}/{} leaves the parameter space at t = {t}: {mu:?}",
                    self.model_id,
                    self.label.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Full-order reference on the test grid.
    pub fn reference(&self, model: &FomModel, refine: usize) -> Result<Trajectory> {
        self.reference_on(model, self.k, refine)
    }

    /// Full-order reference on a grid of `k` steps over the same horizon.
    pub fn reference_on(&self, model: &FomModel, k: usize, refine: usize) -> Result<Trajectory> {
        let signal = self.signal();
        let y0 = model.initial_state(&signal.eval(0.0)?);
        integrate_reference_with(
            model,
            &y0,
            &signal,
            self.t_end,
            k,
            IntegrationOptions {
                refine,
                state_bound: None,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every step starts from the projected reference state.
    OneStep,
    /// Every step starts from the previous prediction.
    Rollout,
}

fn check_grid(test: &TestCase, reference: &Trajectory) -> Result<()> {
    let grid = time_grid(test.t_end, test.k);
    if reference.times.len() != grid.len() || reference.times.iter().zip(&grid).any(|(a, b)| (a - b).abs() > 1e-9 * test.t_end) {
        return Err(Error::Shape(format!(
            "reference has {} time points, test grid has {}",
            reference.times.len(),
            grid.len()
        )));
    }
    Ok(())
}

/// Reduced-space prediction error of one net on a test case. The prediction
/// columns `1..=k` are compared against `V^T Y_ref`.
pub fn e_ann(
    basis: &ReducedBasis,
    net: &SurrogateNet,
    test: &TestCase,
    reference: &Trajectory,
    mode: EvalMode,
) -> Result<ErrorMetric> {
    check_grid(test, reference)?;
    let y_ref = basis.project_matrix(&reference.states)?;
    let pred = predict(net, &y_ref, test, mode)?;
    let k = test.k;
    relative_error(&y_ref.columns(1, k).into_owned(), &pred, 1, k)
}

/// Predictions for columns `1..=k` of the projected reference.
fn predict(net: &SurrogateNet, y_ref: &DMatrix<f64>, test: &TestCase, mode: EvalMode) -> Result<DMatrix<f64>> {
    let k = test.k;
    let signal = test.signal();
    match mode {
        EvalMode::Rollout => {
            let traj = net.rollout(&y_ref.column(0).into_owned(), &signal, test.t_end, k)?;
            Ok(traj.columns(1, k).into_owned())
        }
        EvalMode::OneStep => {
            let tau = test.tau();
            let mut params = DMatrix::zeros(signal.dim(), k);
            for j in 0..k {
                let mu = signal.eval(j as f64 * tau)?;
                params.column_mut(j).copy_from_slice(&mu);
            }
            let pred = net.predict_batch(&y_ref.columns(0, k).into_owned(), &params, &vec![tau; k])?;
            if let Some(j) = pred.column_iter().position(|c| c.iter().any(|v| !v.is_finite())) {
                return Err(Error::RolloutBlowUp { step: j + 1 });
            }
            Ok(pred)
        }
    }
}

/// Mean and population standard deviation over ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Ensemble statistics of one error metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleError {
    /// Over the `1/(n_s k)`-scaled errors.
    pub scaled: Spread,
    /// Over the unscaled relative errors.
    pub relative: Spread,
}

/// Evaluates every member; any failing member fails the whole ensemble.
pub fn ensemble_e_ann(
    basis: &ReducedBasis,
    nets: &[SurrogateNet],
    test: &TestCase,
    reference: &Trajectory,
    mode: EvalMode,
) -> Result<EnsembleError> {
    if nets.is_empty() {
        return Err(Error::Usage("empty ensemble".into()));
    }
    let errs = nets
        .iter()
        .map(|n| e_ann(basis, n, test, reference, mode))
        .collect::<Result<Vec<_>>>()?;
    let scaled: Vec<f64> = errs.iter().map(|e| e.scaled).collect();
    let relative: Vec<f64> = errs.iter().map(|e| e.relative).collect();
    Ok(EnsembleError {
        scaled: Spread::of(&scaled),
        relative: Spread::of(&relative),
    })
}

/// One model in the comparison matrix together with its test cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStudy {
    pub id: String,
    pub model: ModelSpec,
    pub space: ParameterSpace,
    pub t_end: f64,
    pub k: usize,
    pub tests: Vec<TestCase>,
}

impl ModelStudy {
    /// Finned heat sink, 50 nodes, with both heat-sink test cases.
    pub fn heat_sink() -> Self {
        Self {
            id: "heat_sink".into(),
            model: ModelSpec::HeatSink { n_chip: 10, n_fin: 40 },
            space: ParameterSpace::temperature_and_load((20.0, 50.0), (0.05, 0.15)).expect("valid bounds"),
            t_end: 500.0,
            k: 100,
            tests: vec![TestCase::heat_sink_constant(), TestCase::heat_sink_dynamic()],
        }
    }

    /// Radiating plate pair, 20 nodes, with both gap test cases.
    pub fn gap_radiation() -> Self {
        Self {
            id: "gap_radiation".into(),
            model: ModelSpec::GapRadiation { n_plate: 10, emissivity_coeff: GAP_EMISSIVITY_COEFF },
            space: ParameterSpace::temperature_and_load((20.0, 300.0), (40.0, 60.0)).expect("valid bounds"),
            t_end: 3600.0,
            k: 100,
            tests: vec![TestCase::gap_constant(), TestCase::gap_dynamic()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub models: Vec<ModelStudy>,
    pub samplings: Vec<SamplingKind>,
    pub method: SamplingMethod,
    pub n_s: usize,
    pub sampling_seed: u64,
    /// Angular frequency of the dynamic signals; `pi / t_end` when absent.
    pub omega: Option<f64>,
    pub architectures: Vec<Mode>,
    pub n_r: Vec<usize>,
    pub pod: PodOptions,
    pub ensemble: usize,
    /// Member `i` trains with seed `base_seed + i`.
    pub base_seed: u64,
    pub training: TrainingConfig,
    /// Replaces `training` for the listed architectures.
    #[serde(default)]
    pub training_overrides: BTreeMap<Mode, TrainingConfig>,
    pub reference_refine: usize,
}

impl MatrixConfig {
    /// Both models, both sampling kinds, the direct and RK4 networks over
    /// N_r in {1, 2, 3, 4, 5, 10}, 30 Halton snapshots and 10-member ensembles.
    pub fn desk_scale() -> Self {
        Self {
            models: vec![ModelStudy::heat_sink(), ModelStudy::gap_radiation()],
            samplings: vec![SamplingKind::Sps, SamplingKind::Dps],
            method: SamplingMethod::Halton,
            n_s: 30,
            sampling_seed: 0,
            omega: None,
            architectures: vec![Mode::Direct, Mode::Rknn],
            n_r: vec![1, 2, 3, 4, 5, 10],
            pod: PodOptions::default(),
            ensemble: 10,
            base_seed: 0,
            training: TrainingConfig::default(),
            training_overrides: BTreeMap::new(),
            reference_refine: 10,
        }
    }

    pub fn omega_for(&self, t_end: f64) -> f64 {
        self.omega.unwrap_or(std::f64::consts::PI / t_end)
    }

    pub fn training_for(&self, arch: Mode) -> &TrainingConfig {
        self.training_overrides.get(&arch).unwrap_or(&self.training)
    }

    pub fn member_seeds(&self) -> Vec<u64> {
        (0..self.ensemble as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.samplings.is_empty() || self.architectures.is_empty() || self.n_r.is_empty() {
            return Err(Error::Config("matrix needs models, samplings, architectures and N_r values".into()));
        }
        if self.ensemble == 0 || self.n_s == 0 || self.reference_refine == 0 {
            return Err(Error::Config("ensemble size, n_s and reference refinement must be positive".into()));
        }
        if self.n_r.contains(&0) {
            return Err(Error::Config("N_r values must be positive".into()));
        }
        self.training.validate()?;
        for t in self.training_overrides.values() {
            t.validate()?;
        }
        for m in &self.models {
            if m.k == 0 || !(m.t_end > 0.0) {
                return Err(Error::Config(format!("model {}: horizon needs k > 0 and t_end > 0", m.id)));
            }
            for t in &m.tests {
                t.check_within(&m.space)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub sampling: SamplingKind,
    pub architecture: Mode,
    pub n_r: usize,
    pub test: TestLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Reduced dimension actually used (below the requested one when the
    /// snapshot matrix has lower numerical rank).
    pub effective_n_r: usize,
    pub members: usize,
    pub one_step: EnsembleError,
    pub rollout: EnsembleError,
    pub e_pod: ErrorMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellOutcome {
    Ok(CellStats),
    Failed { kind: String, message: String },
}

impl CellOutcome {
    pub fn from_result(r: Result<CellStats>) -> Self {
        match r {
            Ok(s) => CellOutcome::Ok(s),
            Err(e) => CellOutcome::failed(&e),
        }
    }

    pub fn failed(e: &Error) -> Self {
        CellOutcome::Failed {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }

    pub fn stats(&self) -> Option<&CellStats> {
        match self {
            CellOutcome::Ok(s) => Some(s),
            CellOutcome::Failed { .. } => None,
        }
    }
}

/// All matrix cells, keyed and ordered. Wall times are kept apart from the
/// numeric cells so that the CSV export is reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub cells: BTreeMap<CellKey, CellOutcome>,
    /// Training wall time in seconds per cell.
    pub wall_time_s: BTreeMap<CellKey, f64>,
}

pub const CSV_HEADER: &str = "model,sampling,architecture,n_r,test,status,error_kind,effective_n_r,members,\
e_ann_rollout_mean,e_ann_rollout_std,e_ann_rollout_rel_mean,e_ann_rollout_rel_std,\
e_ann_one_step_mean,e_ann_one_step_std,e_ann_one_step_rel_mean,e_ann_one_step_rel_std,\
e_pod,e_pod_rel";

impl EvalReport {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, model: &str, sampling: SamplingKind, architecture: Mode, n_r: usize, test: TestLabel) -> Option<&CellOutcome> {
        self.cells.get(&CellKey {
            model: model.to_string(),
            sampling,
            architecture,
            n_r,
            test,
        })
    }

    /// One row per cell; floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (key, cell) in &self.cells {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                key.model,
                key.sampling.as_str(),
                key.architecture.as_str(),
                key.n_r,
                key.test.as_str()
            );
            match cell {
                CellOutcome::Ok(s) => {
                    let _ = write!(out, ",ok,,{},{}", s.effective_n_r, s.members);
                    for e in [&s.rollout, &s.one_step] {
                        let _ = write!(
                            out,
                            ",{:e},{:e},{:e},{:e}",
                            e.scaled.mean, e.scaled.std, e.relative.mean, e.relative.std
                        );
                    }
                    let _ = writeln!(out, ",{:e},{:e}", s.e_pod.scaled, s.e_pod.relative);
                }
                CellOutcome::Failed { kind, .. } => {
                    let _ = writeln!(out, ",failed,{kind},,,,,,,,,,,,");
                }
            }
        }
        out
    }

    /// Parses the output of [`EvalReport::to_csv`]. Failure messages are not
    /// part of the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Config("report CSV header does not match".into()));
        }
        let mut report = EvalReport::default();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |what: &str| Error::Config(format!("report row {}: {what}", row + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 19 {
                return Err(bad("wrong field count"));
            }
            let key = CellKey {
                model: f[0].to_string(),
                sampling: match f[1] {
                    "sps" => SamplingKind::Sps,
                    "dps" => SamplingKind::Dps,
                    _ => return Err(bad("sampling")),
                },
                architecture: match f[2] {
                    "direct" => Mode::Direct,
                    "rknn" => Mode::Rknn,
                    "direct_tau" => Mode::DirectTau,
                    _ => return Err(bad("architecture")),
                },
                n_r: f[3].parse().map_err(|_| bad("n_r"))?,
                test: TestLabel::parse(f[4])?,
            };
            let cell = match f[5] {
                "ok" => {
                    let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(&format!("field {i}")));
                    let spread = |i: usize| -> Result<EnsembleError> {
                        Ok(EnsembleError {
                            scaled: Spread {
                                mean: num(i)?,
                                std: num(i + 1)?,
                            },
                            relative: Spread {
                                mean: num(i + 2)?,
                                std: num(i + 3)?,
                            },
                        })
                    };
                    CellOutcome::Ok(CellStats {
                        effective_n_r: f[7].parse().map_err(|_| bad("effective_n_r"))?,
                        members: f[8].parse().map_err(|_| bad("members"))?,
                        rollout: spread(9)?,
                        one_step: spread(13)?,
                        e_pod: ErrorMetric {
                            scaled: num(17)?,
                            relative: num(18)?,
                        },
                    })
                }
                "failed" => CellOutcome::Failed {
                    kind: f[6].to_string(),
                    message: String::new(),
                },
                _ => return Err(bad("status")),
            };
            report.cells.insert(key, cell);
        }
        Ok(report)
    }

    /// Training wall times, one row per cell.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("model,sampling,architecture,n_r,test,wall_time_s\n");
        for (k, t) in &self.wall_time_s {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{t:.3}",
                k.model,
                k.sampling.as_str(),
                k.architecture.as_str(),
                k.n_r,
                k.test.as_str()
            );
        }
        out
    }
}

/// Everything computed for one (model, sampling kind) pair before training.
pub struct PreparedSampling {
    pub set: SnapshotSet,
    /// Basis with the largest requested dimension; smaller ones truncate it.
    pub basis: ReducedBasis,
}

/// Samples, simulates and decomposes one snapshot set.
pub fn prepare_sampling(study: &ModelStudy, model: &FomModel, kind: SamplingKind, cfg: &MatrixConfig) -> Result<PreparedSampling> {
    let signals = sample(
        kind,
        &study.space,
        cfg.n_s,
        cfg.method,
        cfg.sampling_seed,
        cfg.omega_for(study.t_end),
    )?;
    let trajectories = crate::fom::simulate_signals(model, &signals, study.t_end, study.k, IntegrationOptions::default())
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let set = SnapshotSet::new(trajectories, signals, kind)?;
    let y = set.assemble();
    let max_nr = cfg.n_r.iter().copied().max().unwrap_or(1).min(y.nrows().min(y.ncols()));
    let basis = compute_pod_with(&y, max_nr, cfg.pod)?;
    Ok(PreparedSampling { set, basis })
}

/// Training pairs of a snapshot set in the span of `basis`.
pub fn transitions(basis: &ReducedBasis, set: &SnapshotSet) -> Result<TransitionSet> {
    let reduced = project_set(basis, set)?;
    TransitionSet::from_trajectories(&reduced, set.signals(), set.times())
}

/// Pair strides for the step-size-input net: identity pairs, one step and
/// two steps, so that the step-size input actually varies in training.
pub const TAU_NET_STRIDES: [usize; 3] = [0, 1, 2];

/// Training pairs for `mode`: neighbouring snapshots, plus the extra strides
/// of [`TAU_NET_STRIDES`] for the step-size-input net.
pub fn transitions_for(mode: Mode, basis: &ReducedBasis, set: &SnapshotSet) -> Result<TransitionSet> {
    let reduced = project_set(basis, set)?;
    let strides: &[usize] = if mode == Mode::DirectTau { &TAU_NET_STRIDES } else { &[1] };
    TransitionSet::with_strides(&reduced, set.signals(), set.times(), strides)
}

/// Trains one ensemble. The first failing member aborts the ensemble.
pub fn train_ensemble(mode: Mode, data: &TransitionSet, training: &TrainingConfig, seeds: &[u64]) -> Result<Vec<SurrogateNet>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainingConfig {
                seed,
                ..training.clone()
            };
            fit(mode, data, &cfg).map(|o| o.net)
        })
        .collect()
}

/// Runs the full comparison matrix. Training jobs run on the current rayon
/// pool; a failure only affects the cells that depend on it.
pub fn run_matrix(cfg: &MatrixConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut report = EvalReport::default();
    for study in &cfg.models {
        let model = study.model.build()?;
        let references: Vec<(TestCase, Result<Trajectory>)> = study
            .tests
            .par_iter()
            .map(|t| (t.clone(), t.reference(&model, cfg.reference_refine)))
            .collect();
        for &kind in &cfg.samplings {
            let prepared = prepare_sampling(study, &model, kind, cfg);
            let jobs: Vec<(Mode, usize)> = cfg
                .architectures
                .iter()
                .flat_map(|&a| cfg.n_r.iter().map(move |&n| (a, n)))
                .collect();
            let results: Vec<_> = jobs
                .par_iter()
                .map(|&(arch, n_r)| {
                    let start = Instant::now();
                    let cells = match &prepared {
                        Ok(p) => evaluate_job(p, arch, n_r, &references, cfg),
                        Err(e) => references.iter().map(|(t, _)| (t.label, CellOutcome::failed(e))).collect(),
                    };
                    (arch, n_r, cells, start.elapsed().as_secs_f64())
                })
                .collect();
            for (arch, n_r, cells, secs) in results {
                for (label, outcome) in cells {
                    let key = CellKey {
                        model: study.id.clone(),
                        sampling: kind,
                        architecture: arch,
                        n_r,
                        test: label,
                    };
                    report.wall_time_s.insert(key.clone(), secs);
                    report.cells.insert(key, outcome);
                }
            }
        }
    }
    Ok(report)
}

fn evaluate_job(
    prepared: &PreparedSampling,
    arch: Mode,
    n_r: usize,
    references: &[(TestCase, Result<Trajectory>)],
    cfg: &MatrixConfig,
) -> Vec<(TestLabel, CellOutcome)> {
    let basis = prepared.basis.truncate(n_r);
    let nets = transitions_for(arch, &basis, &prepared.set)
        .and_then(|data| train_ensemble(arch, &data, cfg.training_for(arch), &cfg.member_seeds()));
    references
        .iter()
        .map(|(test, reference)| {
            let outcome = nets.as_ref().map_err(clone_error).and_then(|nets| {
                let reference = reference.as_ref().map_err(clone_error)?;
                evaluate_ensemble(&basis, nets, test, reference)
            });
            (test.label, CellOutcome::from_result(outcome))
        })
        .collect()
}

/// All statistics of one cell for an already trained ensemble.
pub fn evaluate_ensemble(basis: &ReducedBasis, nets: &[SurrogateNet], test: &TestCase, reference: &Trajectory) -> Result<CellStats> {
    Ok(CellStats {
        effective_n_r: basis.n_r,
        members: nets.len(),
        one_step: ensemble_e_ann(basis, nets, test, reference, EvalMode::OneStep)?,
        rollout: ensemble_e_ann(basis, nets, test, reference, EvalMode::Rollout)?,
        e_pod: reprojection_error(basis, &reference.states, 1, test.k)?,
    })
}

/// Errors carry non-clonable payloads; shared failures are re-raised by kind
/// and message.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::TrainingDivergence { epoch, loss, checkpoint } => Error::TrainingDivergence {
            epoch: *epoch,
            loss: *loss,
            checkpoint: checkpoint.clone(),
        },
        Error::Stiffness { step, time, guard } => Error::Stiffness {
            step: *step,
            time: *time,
            guard: *guard,
        },
        Error::RolloutBlowUp { step } => Error::RolloutBlowUp { step: *step },
        Error::Domain(t) => Error::Domain(*t),
        Error::InvalidModel(m) => Error::InvalidModel(m.clone()),
        Error::NumericInput(m) => Error::NumericInput(m.clone()),
        Error::Shape(m) => Error::Shape(m.clone()),
        Error::ZeroReference(m) => Error::ZeroReference(m.clone()),
        Error::Usage(m) => Error::Usage(m.clone()),
        Error::Config(m) => Error::Config(m.clone()),
    }
}

/// Outcome of one net at one step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepOutcome {
    Ok(ErrorMetric),
    Failed(String),
}

impl StepOutcome {
    pub fn metric(&self) -> Option<ErrorMetric> {
        match self {
            StepOutcome::Ok(m) => Some(*m),
            StepOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStudyRow {
    pub factor: f64,
    pub tau: f64,
    pub k: usize,
    pub rknn: Option<StepOutcome>,
    pub direct_tau: Option<StepOutcome>,
    /// The plain direct net, applied once per grid step regardless of the
    /// grid spacing.
    pub direct: Option<StepOutcome>,
}

/// Nets compared in a step-size study; any of them may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStudyNets<'a> {
    pub rknn: Option<&'a SurrogateNet>,
    pub direct_tau: Option<&'a SurrogateNet>,
    pub direct: Option<&'a SurrogateNet>,
}

/// Reference trajectories of `test` on grids refined by `1 / factor`, one
/// per factor. They depend only on the test, so one set serves every basis
/// and ensemble.
pub fn step_study_references(
    model: &FomModel,
    test: &TestCase,
    factors: &[f64],
    refine: usize,
) -> Result<Vec<(f64, TestCase, Trajectory)>> {
    let mut out = Vec::with_capacity(factors.len());
    for &factor in factors {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Usage(format!("step factor must be positive, got {factor}")));
        }
        let steps = test.k as f64 / factor;
        let k = steps.round() as usize;
        if k == 0 || (steps - k as f64).abs() > 1e-9 * steps {
            return Err(Error::Usage(format!("factor {factor} does not divide the {}-step grid", test.k)));
        }
        let scaled_test = TestCase { k, ..test.clone() };
        let reference = scaled_test.reference(model, refine)?;
        out.push((factor, scaled_test, reference));
    }
    Ok(out)
}

/// Rollout errors of each net against precomputed step-study references.
pub fn step_size_study_on(
    basis: &ReducedBasis,
    references: &[(f64, TestCase, Trajectory)],
    nets: StepStudyNets<'_>,
) -> Vec<StepStudyRow> {
    references
        .iter()
        .map(|(factor, test, reference)| {
            let run = |net: Option<&SurrogateNet>| {
                net.map(|n| match e_ann(basis, n, test, reference, EvalMode::Rollout) {
                    Ok(m) => StepOutcome::Ok(m),
                    Err(e) => StepOutcome::Failed(e.kind().to_string()),
                })
            };
            StepStudyRow {
                factor: *factor,
                tau: test.tau(),
                k: test.k,
                rknn: run(nets.rknn),
                direct_tau: run(nets.direct_tau),
                direct: run(nets.direct),
            }
        })
        .collect()
}

/// Evaluates rollouts on grids refined by `1 / factor` against references
/// integrated on the same grids.
pub fn step_size_study(
    model: &FomModel,
    basis: &ReducedBasis,
    test: &TestCase,
    nets: StepStudyNets<'_>,
    factors: &[f64],
    refine: usize,
) -> Result<Vec<StepStudyRow>> {
    let references = step_study_references(model, test, factors, refine)?;
    Ok(step_size_study_on(basis, &references, nets))
}

pub fn step_study_csv(rows: &[StepStudyRow]) -> String {
    let mut out = String::from("factor,tau_s,k,rknn_rel,rknn_scaled,direct_tau_rel,direct_tau_scaled,direct_rel,direct_scaled\n");
    let fmt = |o: &Option<StepOutcome>| match o {
        Some(StepOutcome::Ok(m)) => format!("{:e},{:e}", m.relative, m.scaled),
        Some(StepOutcome::Failed(kind)) => format!("{kind},{kind}"),
        None => ",".to_string(),
    };
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.factor,
            r.tau,
            r.k,
            fmt(&r.rknn),
            fmt(&r.direct_tau),
            fmt(&r.direct)
        );
    }
    out
}

/// SPS against DPS for one (model, architecture, test) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingComparison {
    pub model: String,
    pub architecture: Mode,
    pub test: TestLabel,
    /// Mean over the compared N_r values of `E_sps - E_dps` (scaled rollout means).
    pub mean_difference: f64,
    pub dps_wins: usize,
    pub sps_wins: usize,
    pub ties: usize,
    /// Some N_r value lacked a usable cell for one of the two kinds.
    pub partial: bool,
}

pub fn sps_vs_dps_summary(report: &EvalReport) -> Vec<SamplingComparison> {
    let mut groups: BTreeMap<(String, Mode, TestLabel), BTreeMap<usize, [Option<f64>; 2]>> = BTreeMap::new();
    for (key, cell) in &report.cells {
        let slot = groups
            .entry((key.model.clone(), key.architecture, key.test))
            .or_default()
            .entry(key.n_r)
            .or_default();
        let value = cell.stats().map(|s| s.rollout.scaled.mean);
        match key.sampling {
            SamplingKind::Sps => slot[0] = value,
            SamplingKind::Dps => slot[1] = value,
        }
    }
    groups
        .into_iter()
        .map(|((model, architecture, test), by_nr)| {
            let mut diffs = Vec::new();
            let mut partial = false;
            let (mut dps_wins, mut sps_wins, mut ties) = (0, 0, 0);
            for pair in by_nr.values() {
                match *pair {
                    [Some(sps), Some(dps)] => {
                        let d = sps - dps;
                        diffs.push(d);
                        if d > 0.0 {
                            dps_wins += 1;
                        } else if d < 0.0 {
                            sps_wins += 1;
                        } else {
                            ties += 1;
                        }
                    }
                    _ => partial = true,
                }
            }
            let mean_difference = if diffs.is_empty() {
                f64::NAN
            } else {
                diffs.iter().sum::<f64>() / diffs.len() as f64
            };
            SamplingComparison {
                model,
                architecture,
                test,
                mean_difference,
                dps_wins,
                sps_wins,
                ties,
                partial,
            }
        })
        .collect()
}

/// `value(delta)` in percent with two decimals and an explicit delta sign,
/// e.g. `0.15(−0.23)`.
pub fn format_delta_cell(value_pct: f64, delta_pct: f64) -> String {
    let sign = if delta_pct < 0.0 { '\u{2212}' } else { '+' };
    format!("{value_pct:.2}({sign}{:.2})", delta_pct.abs())
}

/// Renders side-by-side tables of mean scaled rollout errors in percent:
/// SPS against DPS for every architecture, and each further architecture
/// against the first one on DPS data. The right column carries the delta to
/// the left one.
pub fn render_tables(report: &EvalReport) -> Result<String> {
    if report.is_empty() {
        return Err(Error::Usage("report has no cells".into()));
    }
    let pct = |c: Option<&CellOutcome>| c.and_then(|c| c.stats()).map(|s| 100.0 * s.rollout.scaled.mean);
    let mut models: Vec<&str> = report.cells.keys().map(|k| k.model.as_str()).collect();
    models.dedup();
    let mut archs: Vec<Mode> = report.cells.keys().map(|k| k.architecture).collect();
    archs.sort();
    archs.dedup();
    let mut n_rs: Vec<usize> = report.cells.keys().map(|k| k.n_r).collect();
    n_rs.sort();
    n_rs.dedup();
    let mut tests: Vec<TestLabel> = report.cells.keys().map(|k| k.test).collect();
    tests.sort();
    tests.dedup();
    let arch_name = |a: Mode| match a {
        Mode::Direct => "MLP",
        Mode::Rknn => "RKNN",
        Mode::DirectTau => "MLP-tau",
    };

    let mut out = String::new();
    let mut table = |title: String, left: String, right: String, get: &dyn Fn(usize) -> (Option<f64>, Option<f64>)| {
        let _ = writeln!(out, "{title}\n");
        let _ = writeln!(out, "{:>4} | {:>12} | {:>16}", "N_r", left, right);
        let _ = writeln!(out, "{}", "-".repeat(38));
        for &n in &n_rs {
            let (l, r) = get(n);
            let ls = l.map_or("failed".to_string(), |v| format!("{v:.2}"));
            let rs = match (l, r) {
                (Some(l), Some(r)) => format_delta_cell(r, r - l),
                (None, Some(r)) => format!("{r:.2}"),
                _ => "failed".to_string(),
            };
            let _ = writeln!(out, "{n:>4} | {ls:>12} | {rs:>16}");
        }
        out.push('\n');
    };
    for model in &models {
        for &test in &tests {
            for &arch in &archs {
                table(
                    format!("{model}, {}: SPS vs DPS, relative error (%)", test.as_str()),
                    format!("{} + SPS", arch_name(arch)),
                    format!("{} + DPS", arch_name(arch)),
                    &|n| {
                        (
                            pct(report.get(model, SamplingKind::Sps, arch, n, test)),
                            pct(report.get(model, SamplingKind::Dps, arch, n, test)),
                        )
                    },
                );
            }
            if let Some((&first, rest)) = archs.split_first() {
                for &arch in rest {
                    table(
                        format!(
                            "{model}, {}: {} vs {}, relative error (%)",
                            test.as_str(),
                            arch_name(first),
                            arch_name(arch)
                        ),
                        format!("{} + DPS", arch_name(first)),
                        format!("{} + DPS", arch_name(arch)),
                        &|n| {
                            (
                                pct(report.get(model, SamplingKind::Dps, first, n, test)),
                                pct(report.get(model, SamplingKind::Dps, arch, n, test)),
                            )
                        },
                    );
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_cell_uses_typographic_minus() {
        assert_eq!(format_delta_cell(0.15, -0.23), "0.15(\u{2212}0.23)");
        assert_eq!(format_delta_cell(0.16, 0.07), "0.16(+0.07)");
    }

    #[test]
    fn spread_of_constant_values() {
        let s = Spread::of(&[2.0, 2.0, 2.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn shipped_tests_stay_in_their_spaces() {
        let hs = ParameterSpace::temperature_and_load((20.0, 50.0), (0.05, 0.15)).unwrap();
        let gap = ParameterSpace::temperature_and_load((20.0, 300.0), (40.0, 60.0)).unwrap();
        TestCase::heat_sink_constant().check_within(&hs).unwrap();
        TestCase::heat_sink_dynamic().check_within(&hs).unwrap();
        TestCase::gap_constant().check_within(&gap).unwrap();
        TestCase::gap_dynamic().check_within(&gap).unwrap();
    }
}
