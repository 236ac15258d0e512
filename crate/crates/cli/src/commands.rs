//! The pipeline stages. Each stage reads only the manifests and files of the
//! stages before it, writes its artifacts atomically and finishes by writing
//! its own manifest.
//!
//! Output layout below `--out`:
//!
//! ```text
//! config.toml                               echoed config
//! snapshots/{sps,dps}/signals.json          sampled parameter signals
//! snapshots/{sps,dps}/traj_NNN.rkm          one trajectory per signal (or .failed)
//! snapshots/{sps,dps}/traj_NNN.csv          the same trajectory as text
//! basis/{sps,dps}/basis.rkm, basis.json     POD modes and spectrum metadata
//! basis/{sps,dps}/spectrum.csv              singular values up to the rank
//! models/{sps,dps}/{arch}/nrNN/seedNNN.rknet trained nets (or .failed)
//! models/{sps,dps}/{arch}/nrNN/seedNNN.loss.csv loss per epoch
//! report/report.csv                         one row per matrix cell
//! report/step_study/*.csv                   step-size study, when configured
//! report/timings.csv                        wall times (not reproducible, not in the manifest)
//! plots/*.txt, plots/*.csv                  rendered tables and plot-ready CSVs
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use rkrom_core::eval::{
    evaluate_ensemble, render_tables, sps_vs_dps_summary, step_size_study_on, step_study_csv, step_study_references, transitions_for, CellKey,
    CellOutcome, EvalReport, StepStudyNets, TestCase,
};
use rkrom_core::fom::{simulate_signals, IntegrationOptions, Trajectory};
use rkrom_core::pod::{compute_pod_with, PodOptions, ReducedBasis, SnapshotSet};
use rkrom_core::sampling::{sample, ParameterSignal, SamplingKind};
use rkrom_core::surrogate::{fit, Mode, SurrogateNet, TrainingConfig, TransitionSet};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::formats::{
    basis_meta, encode_matrix, encode_model, encode_trajectory, read, read_basis, read_json, read_model,
    read_trajectory, sha256_hex, to_json, trajectory_csv, loss_history_csv, write_atomic, FailureMarker, MatrixKind,
    ModelMeta,
};
use crate::manifest::ArtifactManifest;

pub const SNAPSHOTS: &str = "snapshots";
pub const BASIS: &str = "basis";
pub const MODELS: &str = "models";
pub const REPORT: &str = "report";
pub const PLOTS: &str = "plots";

/// A validated config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub config_hash: String,
}

impl Context {
    pub fn new(config: PipelineConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        Ok(Self {
            config,
            out,
            config_hash,
        })
    }

    fn root(&self) -> &Path {
        &self.out
    }

    /// Creates the output directory and echoes the config into it.
    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        write_atomic(&self.out.join("config.toml"), self.config.echo_toml()?.as_bytes())
    }

    fn verified(&self, stage: &str) -> Result<ArtifactManifest> {
        ArtifactManifest::load_verified(self.root(), stage, &self.config_hash)
    }
}

fn marker(e: &rkrom_core::Error, config_hash: &str) -> FailureMarker {
    FailureMarker {
        kind: e.kind().into(),
        message: e.to_string(),
        config_hash: config_hash.into(),
    }
}

fn kind_dir(stage: &str, kind: SamplingKind) -> String {
    format!("{stage}/{}", kind.as_str())
}

/// Samples the parameter space and integrates the full-order model once per
/// sample. A failing trajectory leaves a `.failed` marker; the others are
/// still written.
pub fn simulate(ctx: &Context) -> Result<()> {
    ctx.prepare()?;
    let root = ctx.root();
    let mcfg = ctx.config.matrix_config()?;
    let study = ctx.config.model_study()?;
    let model = study.model.build()?;
    let mut manifest = ArtifactManifest::new(SNAPSHOTS, &ctx.config_hash);
    let (mut failed, mut total) = (0, 0);
    for &kind in &mcfg.samplings {
        let dir = kind_dir(SNAPSHOTS, kind);
        let signals = sample(kind, &study.space, mcfg.n_s, mcfg.method, mcfg.sampling_seed, mcfg.omega_for(study.t_end))?;
        manifest.put(root, &format!("{dir}/signals.json"), &to_json(&signals))?;
        let results = simulate_signals(&model, &signals, study.t_end, study.k, IntegrationOptions::default());
        for (i, result) in results.iter().enumerate() {
            total += 1;
            match result {
                Ok(traj) => {
                    manifest.put(root, &format!("{dir}/traj_{i:03}.rkm"), &encode_trajectory(traj))?;
                    manifest.put(root, &format!("{dir}/traj_{i:03}.csv"), trajectory_csv(traj).as_bytes())?;
                }
                Err(e) => {
                    failed += 1;
                    manifest.put(root, &format!("{dir}/traj_{i:03}.failed"), &to_json(&marker(e, &ctx.config_hash)))?;
                }
            }
        }
    }
    manifest.write(root)?;
    if failed > 0 {
        return Err(CliError::Partial {
            what: "trajectories",
            failed,
            total,
        });
    }
    Ok(())
}

/// The successfully simulated trajectories of one sampling kind.
fn load_snapshot_set(root: &Path, snapshots: &ArtifactManifest, kind: SamplingKind) -> Result<SnapshotSet> {
    let dir = kind_dir(SNAPSHOTS, kind);
    let signals: Vec<ParameterSignal> = read_json(&root.join(format!("{dir}/signals.json")))?;
    let mut trajectories = Vec::new();
    let mut used = Vec::new();
    for rel in snapshots.files(&format!("{dir}/traj_"), ".rkm") {
        let index: usize = rel[dir.len() + 6..rel.len() - 4]
            .parse()
            .map_err(|_| CliError::Provenance(format!("unexpected trajectory name {rel}")))?;
        let signal = signals
            .get(index)
            .ok_or_else(|| CliError::Provenance(format!("{rel} has no matching signal")))?;
        trajectories.push(read_trajectory(&root.join(rel), index)?);
        used.push(signal.clone());
    }
    if trajectories.is_empty() {
        return Err(CliError::MissingInput(format!("no {} trajectories in {}", kind.as_str(), root.display())));
    }
    Ok(SnapshotSet::new(trajectories, used, kind)?)
}

fn spectrum_csv(basis: &ReducedBasis) -> String {
    let mut out = String::from("index,sigma,sigma_over_sigma1\n");
    let s1 = basis.singular_values[0];
    for (i, s) in basis.singular_values.iter().take(basis.rank).enumerate() {
        let _ = writeln!(out, "{},{:e},{:e}", i + 1, s, s / s1);
    }
    out
}

/// Computes one POD basis per sampling kind, holding as many modes as the
/// largest requested N_r (or the snapshot rank, if smaller).
pub fn reduce(ctx: &Context) -> Result<()> {
    ctx.prepare()?;
    let root = ctx.root();
    let snapshots = ctx.verified(SNAPSHOTS)?;
    let mut manifest = ArtifactManifest::new(BASIS, &ctx.config_hash);
    manifest.depend_on(root, SNAPSHOTS)?;
    let max_nr = ctx.config.pod.n_r.iter().copied().max().unwrap_or(1);
    for &kind in &ctx.config.sampling.kinds {
        let set = load_snapshot_set(root, &snapshots, kind)?;
        let y = set.assemble();
        let n_r = max_nr.min(y.nrows().min(y.ncols()));
        let basis = compute_pod_with(&y, n_r, PodOptions { center: ctx.config.pod.center })?;
        let dir = kind_dir(BASIS, kind);
        manifest.put(root, &format!("{dir}/basis.rkm"), &encode_matrix(MatrixKind::Basis, &basis.basis, 0.0))?;
        if let Some(mean) = &basis.mean {
            let m = nalgebra::DMatrix::from_column_slice(mean.len(), 1, mean.as_slice());
            manifest.put(root, &format!("{dir}/mean.rkm"), &encode_matrix(MatrixKind::Mean, &m, 0.0))?;
        }
        manifest.put(root, &format!("{dir}/basis.json"), &to_json(&basis_meta(&basis)))?;
        manifest.put(root, &format!("{dir}/spectrum.csv"), spectrum_csv(&basis).as_bytes())?;
    }
    manifest.write(root)
}

fn model_stem(kind: SamplingKind, arch: Mode, n_r: usize, seed: u64) -> String {
    format!("{}/{}/nr{n_r:02}/seed{seed:03}", kind_dir(MODELS, kind), arch.as_str())
}

struct TrainJob {
    kind: SamplingKind,
    arch: Mode,
    n_r: usize,
    seed: u64,
    data: Arc<TransitionSet>,
    basis_digest: String,
}

/// What a training job left on disk: paths with their digests, and whether
/// the job failed.
type JobResult = Result<(Vec<(String, String)>, bool)>;

/// Artifacts of a finished job from an earlier run with the same config, if any.
fn resumable(root: &Path, stem: &str, config_hash: &str) -> Option<(Vec<(String, String)>, bool)> {
    let model = format!("{stem}.rknet");
    let loss = format!("{stem}.loss.csv");
    if let (Ok(bytes), Ok(loss_bytes)) = (std::fs::read(root.join(&model)), std::fs::read(root.join(&loss))) {
        if let Ok((_, meta)) = crate::formats::decode_model(&bytes) {
            if meta.config_hash == config_hash {
                return Some((vec![(model, sha256_hex(&bytes)), (loss, sha256_hex(&loss_bytes))], false));
            }
        }
    }
    let failed = format!("{stem}.failed");
    if let Ok(bytes) = std::fs::read(root.join(&failed)) {
        if let Ok(m) = serde_json::from_slice::<FailureMarker>(&bytes) {
            if m.config_hash == config_hash {
                return Some((vec![(failed, sha256_hex(&bytes))], true));
            }
        }
    }
    None
}

fn run_train_job(ctx: &Context, job: &TrainJob) -> JobResult {
    let root = ctx.root();
    let stem = model_stem(job.kind, job.arch, job.n_r, job.seed);
    if let Some(done) = resumable(root, &stem, &ctx.config_hash) {
        return Ok(done);
    }
    let cfg = TrainingConfig {
        seed: job.seed,
        ..ctx.config.matrix_config()?.training_for(job.arch).clone()
    };
    let (files, stale, failed) = match fit(job.arch, &job.data, &cfg) {
        Ok(outcome) => {
            let net = &outcome.net;
            let meta = ModelMeta {
                mode: net.mode(),
                layer_sizes: net.core().layer_sizes(),
                activation: net.core().activation(),
                tau_train_s: net.tau_train(),
                normalizer: net.normalizer().clone(),
                sampling: job.kind,
                n_r: net.n_state(),
                seed: job.seed,
                training: cfg,
                basis_digest: job.basis_digest.clone(),
                config_hash: ctx.config_hash.clone(),
            };
            let files = vec![
                (format!("{stem}.rknet"), encode_model(net, &meta)?),
                (format!("{stem}.loss.csv"), loss_history_csv(&outcome.loss_history).into_bytes()),
            ];
            (files, vec![format!("{stem}.failed")], false)
        }
        Err(e) => (
            vec![(format!("{stem}.failed"), to_json(&marker(&e, &ctx.config_hash)))],
            vec![format!("{stem}.rknet"), format!("{stem}.loss.csv")],
            true,
        ),
    };
    let mut written = Vec::new();
    for (rel, bytes) in files {
        write_atomic(&root.join(&rel), &bytes)?;
        written.push((rel, sha256_hex(&bytes)));
    }
    for rel in stale {
        let _ = std::fs::remove_file(root.join(rel));
    }
    Ok((written, failed))
}

/// Trains every (sampling kind, architecture, N_r, seed) net. Nets already
/// on disk from an interrupted run with the same config are kept, so a
/// resumed run ends with the same files as an uninterrupted one.
pub fn train(ctx: &Context) -> Result<()> {
    ctx.prepare()?;
    let root = ctx.root();
    let snapshots = ctx.verified(SNAPSHOTS)?;
    let bases = ctx.verified(BASIS)?;
    let mcfg = ctx.config.matrix_config()?;
    let mut jobs = Vec::new();
    for &kind in &mcfg.samplings {
        let set = load_snapshot_set(root, &snapshots, kind)?;
        let dir = kind_dir(BASIS, kind);
        let basis = read_basis(&root.join(&dir))?;
        let basis_digest = bases
            .artifacts
            .get(&format!("{dir}/basis.rkm"))
            .cloned()
            .ok_or_else(|| CliError::MissingInput(format!("{dir}/basis.rkm")))?;
        for &arch in &mcfg.architectures {
            for &n_r in &mcfg.n_r {
                let data = Arc::new(transitions_for(arch, &basis.truncate(n_r), &set)?);
                for seed in mcfg.member_seeds() {
                    jobs.push(TrainJob {
                        kind,
                        arch,
                        n_r,
                        seed,
                        data: Arc::clone(&data),
                        basis_digest: basis_digest.clone(),
                    });
                }
            }
        }
    }
    let results: Vec<JobResult> = jobs.par_iter().map(|job| run_train_job(ctx, job)).collect();
    let mut manifest = ArtifactManifest::new(MODELS, &ctx.config_hash);
    manifest.depend_on(root, SNAPSHOTS)?;
    manifest.depend_on(root, BASIS)?;
    let mut failed = 0;
    for r in results {
        let (files, is_failure) = r?;
        failed += usize::from(is_failure);
        manifest.artifacts.extend(files);
    }
    manifest.write(root)?;
    if failed > 0 {
        return Err(CliError::Partial {
            what: "networks",
            failed,
            total: jobs.len(),
        });
    }
    Ok(())
}

/// Ensemble members of one cell, or the first member's failure.
fn load_ensemble(
    ctx: &Context,
    models: &ArtifactManifest,
    kind: SamplingKind,
    arch: Mode,
    n_r: usize,
    basis_digest: &str,
) -> Result<std::result::Result<Vec<SurrogateNet>, FailureMarker>> {
    let root = ctx.root();
    let mut nets = Vec::new();
    for seed in ctx.config.matrix_config()?.member_seeds() {
        let stem = model_stem(kind, arch, n_r, seed);
        let model = format!("{stem}.rknet");
        let failed = format!("{stem}.failed");
        if models.artifacts.contains_key(&model) {
            let (net, meta) = read_model(&root.join(&model))?;
            if meta.basis_digest != basis_digest || meta.mode != arch || meta.seed != seed {
                return Err(CliError::Provenance(format!("{model} was not trained for this cell and basis")));
            }
            nets.push(net);
        } else if models.artifacts.contains_key(&failed) {
            return Ok(Err(read_json(&root.join(&failed))?));
        } else {
            return Err(CliError::MissingInput(format!("{model} is not in the models manifest")));
        }
    }
    Ok(Ok(nets))
}

/// Evaluates every trained ensemble on every test case and writes the
/// report CSV, plus step-size studies when `eval.step_factors` is set.
pub fn evaluate(ctx: &Context) -> Result<()> {
    ctx.prepare()?;
    let root = ctx.root();
    ctx.verified(SNAPSHOTS)?;
    let bases = ctx.verified(BASIS)?;
    let models = ctx.verified(MODELS)?;
    let mcfg = ctx.config.matrix_config()?;
    let study = ctx.config.model_study()?;
    let model = study.model.build()?;
    let references: Vec<(TestCase, rkrom_core::Result<Trajectory>)> = study
        .tests
        .par_iter()
        .map(|t| (t.clone(), t.reference(&model, mcfg.reference_refine)))
        .collect();

    let mut groups = Vec::new();
    for &kind in &mcfg.samplings {
        let dir = kind_dir(BASIS, kind);
        let basis = Arc::new(read_basis(&root.join(&dir))?);
        let digest = bases.artifacts.get(&format!("{dir}/basis.rkm")).cloned().unwrap_or_default();
        for &arch in &mcfg.architectures {
            for &n_r in &mcfg.n_r {
                groups.push((kind, arch, n_r, Arc::clone(&basis), digest.clone()));
            }
        }
    }

    type Group = (SamplingKind, Mode, usize, Vec<(CellKey, CellOutcome)>, f64, Option<SurrogateNet>);
    let evaluated: Vec<Result<Group>> = groups
        .par_iter()
        .map(|(kind, arch, n_r, basis, digest)| {
            let start = Instant::now();
            let basis = basis.truncate(*n_r);
            let ensemble = load_ensemble(ctx, &models, *kind, *arch, *n_r, digest)?;
            let cells = references
                .iter()
                .map(|(test, reference)| {
                    let key = CellKey {
                        model: study.id.clone(),
                        sampling: *kind,
                        architecture: *arch,
                        n_r: *n_r,
                        test: test.label,
                    };
                    let outcome = match &ensemble {
                        Err(m) => CellOutcome::Failed {
                            kind: m.kind.clone(),
                            message: m.message.clone(),
                        },
                        Ok(nets) => CellOutcome::from_result(
                            reference
                                .as_ref()
                                .map_err(|e| rkrom_core::Error::Usage(format!("reference failed: {e}")))
                                .and_then(|r| evaluate_ensemble(&basis, nets, test, r)),
                        ),
                    };
                    (key, outcome)
                })
                .collect();
            let first = ensemble.ok().and_then(|nets| nets.into_iter().next());
            Ok((*kind, *arch, *n_r, cells, start.elapsed().as_secs_f64(), first))
        })
        .collect();

    let mut report = EvalReport::default();
    let mut first_members: BTreeMap<(SamplingKind, usize), BTreeMap<Mode, SurrogateNet>> = BTreeMap::new();
    for group in evaluated {
        let (kind, arch, n_r, cells, secs, first) = group?;
        for (key, outcome) in cells {
            report.wall_time_s.insert(key.clone(), secs);
            report.cells.insert(key, outcome);
        }
        if let Some(net) = first {
            first_members.entry((kind, n_r)).or_default().insert(arch, net);
        }
    }

    let mut manifest = ArtifactManifest::new(REPORT, &ctx.config_hash);
    for stage in [SNAPSHOTS, BASIS, MODELS] {
        manifest.depend_on(root, stage)?;
    }
    manifest.put(root, &format!("{REPORT}/report.csv"), report.to_csv().as_bytes())?;

    let factors = &ctx.config.eval.step_factors;
    if !factors.is_empty() && !first_members.is_empty() {
        let step_refs = study
            .tests
            .par_iter()
            .map(|test| step_study_references(&model, test, factors, mcfg.reference_refine))
            .collect::<rkrom_core::Result<Vec<_>>>()?;
        for ((kind, n_r), nets) in &first_members {
            let basis = read_basis(&root.join(kind_dir(BASIS, *kind)))?.truncate(*n_r);
            let study_nets = StepStudyNets {
                rknn: nets.get(&Mode::Rknn),
                direct_tau: nets.get(&Mode::DirectTau),
                direct: nets.get(&Mode::Direct),
            };
            for (test, refs) in study.tests.iter().zip(&step_refs) {
                let rows = step_size_study_on(&basis, refs, study_nets);
                let rel = format!(
                    "{REPORT}/step_study/{}_nr{n_r:02}_{}.csv",
                    kind.as_str(),
                    test.label.as_str()
                );
                manifest.put(root, &rel, step_study_csv(&rows).as_bytes())?;
            }
        }
    }
    write_atomic(&root.join(format!("{REPORT}/timings.csv")), report.timings_csv().as_bytes())?;
    manifest.write(root)
}

fn sampling_summary_csv(report: &EvalReport) -> String {
    let mut out = String::from("model,architecture,test,mean_difference,dps_wins,sps_wins,ties,partial\n");
    for s in sps_vs_dps_summary(report) {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{},{},{},{}",
            s.model,
            s.architecture.as_str(),
            s.test.as_str(),
            s.mean_difference,
            s.dps_wins,
            s.sps_wins,
            s.ties,
            s.partial
        );
    }
    out
}

fn error_curves_csv(report: &EvalReport) -> String {
    let mut out = String::from("model,sampling,architecture,test,n_r,effective_n_r,rollout_pct,rollout_std_pct,one_step_pct,e_pod_pct\n");
    for (key, cell) in &report.cells {
        if let Some(s) = cell.stats() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:e},{:e},{:e},{:e}",
                key.model,
                key.sampling.as_str(),
                key.architecture.as_str(),
                key.test.as_str(),
                key.n_r,
                s.effective_n_r,
                100.0 * s.rollout.scaled.mean,
                100.0 * s.rollout.scaled.std,
                100.0 * s.one_step.scaled.mean,
                100.0 * s.e_pod.scaled
            );
        }
    }
    out
}

/// Renders the report tables and writes plot-ready CSVs: error against N_r
/// per cell group, the SPS/DPS summary and the singular value spectra.
pub fn report(ctx: &Context) -> Result<()> {
    ctx.prepare()?;
    let root = ctx.root();
    ctx.verified(REPORT)?;
    let text = String::from_utf8(read(&root.join(format!("{REPORT}/report.csv")))?)
        .map_err(|e| CliError::Provenance(format!("report.csv: {e}")))?;
    let report = EvalReport::from_csv(&text)?;
    if report.is_empty() {
        return Err(CliError::MissingInput("report.csv has no cells; run evaluate with a non-empty matrix".into()));
    }
    let tables = render_tables(&report)?;
    let mut manifest = ArtifactManifest::new(PLOTS, &ctx.config_hash);
    manifest.depend_on(root, REPORT)?;
    manifest.put(root, &format!("{PLOTS}/tables.txt"), tables.as_bytes())?;
    manifest.put(root, &format!("{PLOTS}/error_curves.csv"), error_curves_csv(&report).as_bytes())?;
    manifest.put(root, &format!("{PLOTS}/sampling_summary.csv"), sampling_summary_csv(&report).as_bytes())?;
    if ctx.verified(BASIS).is_ok() {
        manifest.depend_on(root, BASIS)?;
        for &kind in &ctx.config.sampling.kinds {
            let spectrum = read(&root.join(format!("{}/spectrum.csv", kind_dir(BASIS, kind))))?;
            manifest.put(root, &format!("{PLOTS}/spectrum_{}.csv", kind.as_str()), &spectrum)?;
        }
    }
    manifest.write(root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Reduce,
    Train,
    Evaluate,
    Report,
}

pub fn run(command: Command, ctx: &Context) -> Result<()> {
    match command {
        Command::Simulate => simulate(ctx),
        Command::Reduce => reduce(ctx),
        Command::Train => train(ctx),
        Command::Evaluate => evaluate(ctx),
        Command::Report => report(ctx),
    }
}
