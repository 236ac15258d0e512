use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Gradients};
use super::net::{Mode, SurrogateNet};
use crate::error::{Error, Result};
use crate::sampling::ParameterSignal;

/// One-step training pairs `(y_j, mu_j) -> y_{j+s}` stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub states: DMatrix<f64>,
    pub params: DMatrix<f64>,
    pub next: DMatrix<f64>,
    /// Time between `states` and `next`, per column.
    pub taus: Vec<f64>,
}

impl TransitionSet {
    pub fn new(states: DMatrix<f64>, params: DMatrix<f64>, next: DMatrix<f64>, taus: Vec<f64>) -> Result<Self> {
        let n = states.ncols();
        if params.ncols() != n || next.ncols() != n || taus.len() != n || next.nrows() != states.nrows() {
            return Err(Error::Shape("transition set columns disagree".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&states) && finite(&params) && finite(&next)) || taus.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::NumericInput("transition set contains non-finite values".into()));
        }
        Ok(Self {
            states,
            params,
            next,
            taus,
        })
    }

    /// Neighbouring pairs of each reduced trajectory (`n_r x (k+1)`), with the
    /// parameter vector taken at the start of each step.
    pub fn from_trajectories(trajectories: &[DMatrix<f64>], signals: &[ParameterSignal], times: &[f64]) -> Result<Self> {
        Self::with_strides(trajectories, signals, times, &[1])
    }

    /// Pairs `(y_j, y_{j+s})` for every stride `s`. A stride of zero yields
    /// identity pairs with zero step size.
    pub fn with_strides(
        trajectories: &[DMatrix<f64>],
        signals: &[ParameterSignal],
        times: &[f64],
        strides: &[usize],
    ) -> Result<Self> {
        if trajectories.is_empty() || trajectories.len() != signals.len() {
            return Err(Error::Shape(format!(
                "{} trajectories for {} signals",
                trajectories.len(),
                signals.len()
            )));
        }
        let n_r = trajectories[0].nrows();
        let n_mu = signals[0].dim();
        let mut states = Vec::new();
        let mut params = Vec::new();
        let mut next = Vec::new();
        let mut taus = Vec::new();
        for (traj, signal) in trajectories.iter().zip(signals) {
            if traj.nrows() != n_r || traj.ncols() != times.len() || signal.dim() != n_mu {
                return Err(Error::Shape("trajectories must share state size and time grid".into()));
            }
            let mus: Vec<Vec<f64>> = times.iter().map(|t| signal.eval(*t)).collect::<Result<_>>()?;
            for &s in strides {
                for j in 0..times.len().saturating_sub(s.max(1)) {
                    states.extend(traj.column(j).iter());
                    params.extend(mus[j].iter());
                    next.extend(traj.column(j + s).iter());
                    taus.push(times[j + s] - times[j]);
                }
            }
        }
        let n = taus.len();
        if n == 0 {
            return Err(Error::Shape("no transition pairs".into()));
        }
        Self::new(
            DMatrix::from_vec(n_r, n, states),
            DMatrix::from_vec(n_mu, n, params),
            DMatrix::from_vec(n_r, n, next),
            taus,
        )
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn n_state(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.params.nrows()
    }

    /// The smallest positive step size in the set.
    pub fn nominal_tau(&self) -> Result<f64> {
        self.taus
            .iter()
            .copied()
            .filter(|t| *t > 0.0)
            .min_by(f64::total_cmp)
            .ok_or_else(|| Error::Shape("transition set has no positive step".into()))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.select_columns(idx),
            params: self.params.select_columns(idx),
            next: self.next.select_columns(idx),
            taus: idx.iter().map(|&i| self.taus[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    UniformFanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// `None` trains on the full set every epoch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    /// Learning rate reached after the last epoch, as a fraction of the
    /// initial one; the rate decays geometrically in between. 1 keeps it fixed.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub weight_init: WeightInit,
    /// Training stops with a divergence error once the loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: Some(64),
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            weight_init: WeightInit::UniformFanIn,
            divergence_threshold: 1e8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.epochs == 0 || self.batch_size == Some(0) || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("epochs, batch size and hidden widths must be positive".into()));
        }
        if !(positive(self.learning_rate) && positive(self.epsilon) && positive(self.divergence_threshold)) {
            return Err(Error::Config("learning rate, epsilon and divergence threshold must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final learning-rate fraction must lie in (0, 1]".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("moment decays must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SurrogateNet,
    /// Loss at the start of every epoch (mean over batches).
    pub loss_history: Vec<f64>,
    /// Full-set loss of the returned net.
    pub final_loss: f64,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn step(&mut self, net: &mut SurrogateNet, g: &Gradients, cfg: &TrainingConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        };
        for (l, layer) in net.core_mut().layers_mut().iter_mut().enumerate() {
            for (((p, g), m), v) in layer
                .weights
                .iter_mut()
                .zip(g.weights[l].iter())
                .zip(self.m.weights[l].iter_mut())
                .zip(self.v.weights[l].iter_mut())
            {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in layer
                .bias
                .iter_mut()
                .zip(g.bias[l].iter())
                .zip(self.m.bias[l].iter_mut())
                .zip(self.v.bias[l].iter_mut())
            {
                update(p, *g, m, v);
            }
        }
    }
}

/// Adam on the one-step loss. Sequential and deterministic for a given
/// seed; mini-batches are shuffled with a generator derived from the seed.
pub fn train(net: SurrogateNet, data: &TransitionSet, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty set".into()));
    }
    let mut net = net;
    let mut adam = Adam {
        m: Gradients::zeros_like(net.core()),
        v: Gradients::zeros_like(net.core()),
        t: 0,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.unwrap_or(data.len()).min(data.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoint = net.clone();

    let diverged = |epoch: usize, loss: f64, checkpoint: &SurrogateNet| Error::TrainingDivergence {
        epoch,
        loss,
        checkpoint: Box::new(checkpoint.clone()),
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.final_lr_fraction.powf(epoch as f64 / cfg.epochs as f64);
        let mut epoch_loss = 0.0;
        if batch == data.len() {
            let (loss, grads) = match net.loss_and_gradients(data) {
                Ok(r) => r,
                Err(Error::TrainingDivergence { loss, .. }) => return Err(diverged(epoch, loss, &checkpoint)),
                Err(e) => return Err(e),
            };
            if loss > cfg.divergence_threshold || !grads.max_abs().is_finite() {
                return Err(diverged(epoch, loss, &checkpoint));
            }
            checkpoint.clone_from(&net);
            adam.step(&mut net, &grads, cfg, lr);
            epoch_loss = loss;
        } else {
            order.shuffle(&mut shuffle_rng);
            let mut seen = 0;
            for chunk in order.chunks(batch) {
                let sub = data.select(chunk);
                let (loss, grads) = match net.loss_and_gradients(&sub) {
                    Ok(r) => r,
                    Err(Error::TrainingDivergence { loss, .. }) => return Err(diverged(epoch, loss, &checkpoint)),
                    Err(e) => return Err(e),
                };
                if loss > cfg.divergence_threshold || !grads.max_abs().is_finite() {
                    return Err(diverged(epoch, loss, &checkpoint));
                }
                checkpoint.clone_from(&net);
                adam.step(&mut net, &grads, cfg, lr);
                epoch_loss += loss * chunk.len() as f64;
                seen += chunk.len();
            }
            epoch_loss /= seen as f64;
        }
        history.push(epoch_loss);
    }

    let final_loss = match net.loss_and_gradients(data) {
        Ok((loss, _)) if loss <= cfg.divergence_threshold => loss,
        Ok((loss, _)) | Err(Error::TrainingDivergence { loss, .. }) => {
            return Err(diverged(cfg.epochs, loss, &checkpoint));
        }
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome {
        net,
        loss_history: history,
        final_loss,
    })
}

/// Initializes a fresh net for `mode` from `cfg` and trains it.
pub fn fit(mode: Mode, data: &TransitionSet, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = SurrogateNet::initialize(mode, data, &cfg.hidden, cfg.activation, cfg.seed)?;
    train(net, data, cfg)
}
