use std::path::{Path, PathBuf};
use std::process::Command;

use rkrom_cli::config::PipelineConfig;
use rkrom_cli::formats::read_trajectory;
use rkrom_cli::manifest::ArtifactManifest;
use rkrom_core::eval::{EvalReport, CSV_HEADER};

/// A four-node heat sink on a coarse grid: cheap enough to run every stage.
fn small_config(n_s: usize, ensemble: usize, extra: &str) -> String {
    format!(
        r#"
[model]
kind = "heat_sink"
n_chip = 2
n_fin = 2

[parameters]
temp_min_c = 20.0
temp_max_c = 50.0
load_min = 0.05
load_max = 0.15

[horizon]
t_end_s = 500.0
steps = 10

[sampling]
kinds = ["dps"]
method = "halton"
seed = 0
n_s = {n_s}

[pod]
n_r = [1, 2]

[networks]
architectures = ["direct", "rknn"]
ensemble = {ensemble}
base_seed = 0

[training]
epochs = 30
hidden = [8]

[eval]
reference_refine = 1

[[eval.tests]]
label = "constant_load"
initial_temp_c = 20.0
load = [0.1]

[[eval.tests]]
label = "dynamic_load"
initial_temp_c = 20.0
load = [0.15, -0.1]
load_scale_s = 500.0
{extra}
"#
    )
}

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.in.toml");
        std::fs::write(&path, config).unwrap();
        Self { dir, config: path }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn stage_to(&self, stage: &str, out: &Path) -> i32 {
        let status = Command::new(env!("CARGO_BIN_EXE_rkrom"))
            .args([stage, "--config"])
            .arg(&self.config)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        status.status.code().unwrap()
    }

    fn stage(&self, stage: &str) -> i32 {
        self.stage_to(stage, &self.out())
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.out().join(rel)).unwrap()
    }
}

fn files_under(dir: &Path, ext: &str) -> Vec<PathBuf> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap().into_path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect()
}

#[test]
fn simulate_writes_k_plus_one_records_per_trajectory() {
    let run = Run::new(&small_config(1, 1, ""));
    assert_eq!(run.stage("simulate"), 0);
    let traj = read_trajectory(&run.out().join("snapshots/dps/traj_000.rkm"), 0).unwrap();
    assert_eq!(traj.states.nrows(), 4);
    assert_eq!(traj.states.ncols(), 11);
    assert_eq!(traj.times.len(), 11);
    assert!((traj.times[10] - 500.0).abs() < 1e-9);
    assert!(run.out().join("config.toml").exists());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let run = Run::new(&small_config(1, 1, ""));
    let file = run.dir.path().join("not_a_dir");
    std::fs::write(&file, b"x").unwrap();
    assert_eq!(run.stage_to("simulate", &file), 1);
}

#[test]
fn malformed_config_is_a_config_error() {
    let run = Run::new(&small_config(1, 1, "[bogus]\nx = 1\n"));
    assert_eq!(run.stage("simulate"), 2);
}

#[test]
fn reduce_is_reproducible_and_detects_tampering() {
    let run = Run::new(&small_config(3, 1, ""));
    assert_eq!(run.stage("simulate"), 0);
    assert_eq!(run.stage("reduce"), 0);

    let meta: serde_json::Value = serde_json::from_slice(&run.read("basis/dps/basis.json")).unwrap();
    let rank = meta["rank"].as_u64().unwrap() as usize;
    let spectrum = String::from_utf8(run.read("basis/dps/spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().count(), rank + 1);

    let first = (run.read("basis/dps/basis.rkm"), run.read("basis/manifest.json"));
    assert_eq!(run.stage("reduce"), 0);
    assert_eq!(first, (run.read("basis/dps/basis.rkm"), run.read("basis/manifest.json")));

    let traj = run.out().join("snapshots/dps/traj_001.rkm");
    let mut bytes = std::fs::read(&traj).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&traj, bytes).unwrap();
    assert_eq!(run.stage("reduce"), 4);
}

#[test]
fn stages_refuse_inputs_from_another_config() {
    let run = Run::new(&small_config(2, 1, ""));
    assert_eq!(run.stage("simulate"), 0);
    let other = small_config(2, 1, "").replace("seed = 0\nn_s", "seed = 7\nn_s");
    std::fs::write(&run.config, other).unwrap();
    assert_eq!(run.stage("reduce"), 4);
}

#[test]
fn missing_upstream_stage_is_reported() {
    let run = Run::new(&small_config(1, 1, ""));
    assert_eq!(run.stage("evaluate"), 1);
    assert_eq!(run.stage("report"), 1);
}

#[test]
fn train_writes_one_model_per_member_and_resumes_identically() {
    let run = Run::new(&small_config(3, 10, ""));
    for stage in ["simulate", "reduce", "train"] {
        assert_eq!(run.stage(stage), 0, "{stage}");
    }
    let models = files_under(&run.out().join("models"), "rknet");
    assert_eq!(models.len(), 2 * 2 * 10);
    let before: Vec<Vec<u8>> = models.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let manifest = run.read("models/manifest.json");

    for p in models.iter().step_by(7) {
        std::fs::remove_file(p).unwrap();
    }
    assert_eq!(run.stage("train"), 0);
    let after: Vec<Vec<u8>> = models.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert!(before == after, "resumed models differ");
    assert_eq!(manifest, run.read("models/manifest.json"));

    for stage in ["evaluate", "report"] {
        assert_eq!(run.stage(stage), 0, "{stage}");
    }
    let report = EvalReport::from_csv(&String::from_utf8(run.read("report/report.csv")).unwrap()).unwrap();
    assert_eq!(report.len(), 2 * 2 * 2);
    assert!(report.cells.values().all(|c| c.stats().is_some()));
    assert!(run.out().join("plots/tables.txt").exists());
}

#[test]
fn divergent_training_leaves_failure_markers() {
    let overrides = "[training_overrides.rknn]\nepochs = 30\nhidden = [8]\nlearning_rate = 1e3\n";
    let run = Run::new(&small_config(3, 2, overrides));
    assert_eq!(run.stage("simulate"), 0);
    assert_eq!(run.stage("reduce"), 0);
    assert_eq!(run.stage("train"), 3);
    let failed = files_under(&run.out().join("models/dps/rknn"), "failed");
    assert_eq!(failed.len(), 2 * 2);
    assert_eq!(files_under(&run.out().join("models/dps/direct"), "rknet").len(), 2 * 2);
    let marker: serde_json::Value = serde_json::from_slice(&std::fs::read(&failed[0]).unwrap()).unwrap();
    assert_eq!(marker["kind"], "training_divergence");

    assert_eq!(run.stage("evaluate"), 0);
    let report = EvalReport::from_csv(&String::from_utf8(run.read("report/report.csv")).unwrap()).unwrap();
    assert_eq!(report.len(), 8);
    let failed_cells = report.cells.iter().filter(|(_, c)| c.stats().is_none()).count();
    assert_eq!(failed_cells, 4);
}

#[test]
fn report_rejects_an_empty_report() {
    let run = Run::new(&small_config(1, 1, ""));
    let config = PipelineConfig::load(&run.config).unwrap();
    let hash = config.hash().unwrap();
    let root = run.out();
    let mut manifest = ArtifactManifest::new("report", &hash);
    manifest.put(&root, "report/report.csv", format!("{CSV_HEADER}\n").as_bytes()).unwrap();
    manifest.write(&root).unwrap();
    assert_eq!(run.stage("report"), 1);
    assert!(!root.join("plots/tables.txt").exists());
}
