//! Pipeline configuration: a sectioned TOML file whose keys carry their units.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rkrom_core::eval::{MatrixConfig, ModelStudy, TestCase, TestLabel};
use rkrom_core::fom::{ModelSpec, GAP_EMISSIVITY_COEFF};
use rkrom_core::pod::PodOptions;
use rkrom_core::sampling::{ParameterSpace, Polynomial, SamplingKind, SamplingMethod};
use rkrom_core::surrogate::{Mode, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Output directory; `--out` takes precedence. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub parameters: ParameterSection,
    pub horizon: HorizonSection,
    pub sampling: SamplingSection,
    pub pod: PodSection,
    pub networks: NetworkSection,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Per-architecture replacements for `[training]`, e.g. `[training_overrides.rknn]`.
    #[serde(default)]
    pub training_overrides: BTreeMap<Mode, TrainingConfig>,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    HeatSink {
        n_chip: usize,
        n_fin: usize,
    },
    GapRadiation {
        n_plate: usize,
        #[serde(default = "default_emissivity")]
        emissivity_coeff_w_per_k4: f64,
    },
    SyntheticNonlinear {
        n_state: usize,
        nonlinearity_gain: f64,
    },
}

fn default_emissivity() -> f64 {
    GAP_EMISSIVITY_COEFF
}

impl ModelSection {
    pub fn id(&self) -> &'static str {
        match self {
            ModelSection::HeatSink { .. } => "heat_sink",
            ModelSection::GapRadiation { .. } => "gap_radiation",
            ModelSection::SyntheticNonlinear { .. } => "synthetic_nonlinear",
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match *self {
            ModelSection::HeatSink { n_chip, n_fin } => ModelSpec::HeatSink { n_chip, n_fin },
            ModelSection::GapRadiation {
                n_plate,
                emissivity_coeff_w_per_k4,
            } => ModelSpec::GapRadiation {
                n_plate,
                emissivity_coeff: emissivity_coeff_w_per_k4,
            },
            ModelSection::SyntheticNonlinear {
                n_state,
                nonlinearity_gain,
            } => ModelSpec::SyntheticNonlinear {
                n_state,
                nonlinearity_gain,
            },
        }
    }
}

/// Bounds of the two sampled parameters. The initial temperature is an
/// initial condition; the load drives the model (W/mm^3 for the heat sink,
/// W for the gap model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSection {
    pub temp_min_c: f64,
    pub temp_max_c: f64,
    pub load_min: f64,
    pub load_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub t_end_s: f64,
    /// Number of steps `k`; trajectories hold `k + 1` points.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub kinds: Vec<SamplingKind>,
    pub method: SamplingMethod,
    pub seed: u64,
    pub n_s: usize,
    /// Angular frequency of the dynamic signals; `pi / t_end_s` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_rad_per_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSection {
    pub n_r: Vec<usize>,
    #[serde(default)]
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub architectures: Vec<Mode>,
    pub ensemble: usize,
    /// Member `i` of every ensemble trains with seed `base_seed + i`.
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Substep multiplier of the reference integration.
    pub reference_refine: usize,
    /// Step-size factors for the step-size study; empty skips it.
    #[serde(default)]
    pub step_factors: Vec<f64>,
    pub tests: Vec<TestSection>,
}

/// A test scenario on the `[horizon]` grid. The load is the polynomial
/// `sum_i load[i] ((t - load_shift_s) / load_scale_s)^i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    pub label: TestLabel,
    pub initial_temp_c: f64,
    pub load: Vec<f64>,
    #[serde(default)]
    pub load_shift_s: f64,
    #[serde(default = "unit_scale")]
    pub load_scale_s: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Replaces the sampling seed and the ensemble base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.seed = seed;
        self.networks.base_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling.kinds.is_empty() {
            return Err(CliError::Config("sampling.kinds is empty".into()));
        }
        if has_duplicates(&self.sampling.kinds) || has_duplicates(&self.networks.architectures) || has_duplicates(&self.pod.n_r) {
            return Err(CliError::Config("sampling kinds, architectures and N_r values must be unique".into()));
        }
        if self.eval.tests.is_empty() {
            return Err(CliError::Config("eval.tests is empty".into()));
        }
        if has_duplicates(&self.eval.tests.iter().map(|t| t.label).collect::<Vec<_>>()) {
            return Err(CliError::Config("test labels must be unique".into()));
        }
        if let Some(f) = self.eval.step_factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return Err(CliError::Config(format!("step factor must be positive, got {f}")));
        }
        for t in &self.eval.tests {
            if t.load.is_empty() || !(t.load_scale_s != 0.0 && t.load_scale_s.is_finite()) {
                return Err(CliError::Config(format!(
                    "test {}: load needs coefficients and a nonzero scale",
                    t.label.as_str()
                )));
            }
        }
        self.matrix_config()?.validate()?;
        Ok(())
    }

    pub fn model_study(&self) -> Result<ModelStudy> {
        let p = &self.parameters;
        let space = ParameterSpace::temperature_and_load((p.temp_min_c, p.temp_max_c), (p.load_min, p.load_max))?;
        let id = self.model.id();
        let tests = self
            .eval
            .tests
            .iter()
            .map(|t| TestCase {
                model_id: id.into(),
                label: t.label,
                initial_temperature: t.initial_temp_c,
                load: Polynomial {
                    coeffs: t.load.clone(),
                    shift: t.load_shift_s,
                    scale: t.load_scale_s,
                },
                t_end: self.horizon.t_end_s,
                k: self.horizon.steps,
            })
            .collect();
        Ok(ModelStudy {
            id: id.into(),
            model: self.model.spec(),
            space,
            t_end: self.horizon.t_end_s,
            k: self.horizon.steps,
            tests,
        })
    }

    pub fn matrix_config(&self) -> Result<MatrixConfig> {
        Ok(MatrixConfig {
            models: vec![self.model_study()?],
            samplings: self.sampling.kinds.clone(),
            method: self.sampling.method,
            n_s: self.sampling.n_s,
            sampling_seed: self.sampling.seed,
            omega: self.sampling.omega_rad_per_s,
            architectures: self.networks.architectures.clone(),
            n_r: self.pod.n_r.clone(),
            pod: PodOptions { center: self.pod.center },
            ensemble: self.networks.ensemble,
            base_seed: self.networks.base_seed,
            training: self.training.clone(),
            training_overrides: self.training_overrides.clone(),
            reference_refine: self.eval.reference_refine,
        })
    }

    /// The config as written into every output directory, without the
    /// output location.
    pub fn echo_toml(&self) -> Result<String> {
        let echo = Self {
            output_dir: None,
            ..self.clone()
        };
        toml::to_string(&echo).map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of the echoed config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.echo_toml()?.as_bytes())))
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}
