use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, ForwardCache, Gradients, MlpCore};
use super::normalizer::{Affine, Normalizer};
use super::train::TransitionSet;
use crate::error::{Error, Result};
use crate::sampling::ParameterSignal;

/// How the core network's output is turned into the next reduced state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The core maps `(y_j, mu_j)` to `y_{j+1}`.
    Direct,
    /// The core is the right-hand side inside a classic RK4 step.
    Rknn,
    /// Like `Direct`, with the step size as an extra input.
    DirectTau,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Rknn => "rknn",
            Mode::DirectTau => "direct_tau",
        }
    }
}

/// A reduced-space time stepper built around an [`MlpCore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNet {
    core: MlpCore,
    mode: Mode,
    tau_train: f64,
    normalizer: Normalizer,
}

enum Trace {
    Direct(ForwardCache),
    Rknn(Vec<ForwardCache>),
}

impl SurrogateNet {
    pub fn new(core: MlpCore, mode: Mode, tau_train: f64, normalizer: Normalizer) -> Result<Self> {
        let n_r = normalizer.n_state();
        let n_mu = normalizer.n_params();
        let n_in = n_r + n_mu + usize::from(mode == Mode::DirectTau);
        if core.n_in() != n_in || core.n_out() != n_r {
            return Err(Error::Shape(format!(
                "{} net with {n_r} states and {n_mu} parameters needs a {n_in} -> {n_r} core, got {} -> {}",
                mode.as_str(),
                core.n_in(),
                core.n_out()
            )));
        }
        if !(tau_train > 0.0 && tau_train.is_finite()) {
            return Err(Error::NumericInput(format!("training step size must be positive, got {tau_train}")));
        }
        if (mode == Mode::DirectTau) != normalizer.tau.is_some() {
            return Err(Error::Shape("step-size statistics must exist exactly for step-size-input nets".into()));
        }
        if let Some(rs) = &normalizer.rhs_scale {
            if rs.len() != n_r || rs.iter().any(|s| !(s.is_finite() && *s != 0.0)) {
                return Err(Error::NumericInput("right-hand-side scale must be finite and nonzero".into()));
            }
        }
        Ok(Self {
            core,
            mode,
            tau_train,
            normalizer,
        })
    }

    /// Fits the normalizer to `data` and draws fresh weights from a ChaCha8
    /// generator seeded with `seed`.
    pub fn initialize(mode: Mode, data: &TransitionSet, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let normalizer = fit_normalizer(mode, data)?;
        let n_r = data.n_state();
        let n_in = n_r + data.n_params() + usize::from(mode == Mode::DirectTau);
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(n_r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = MlpCore::new(&sizes, activation, &mut rng)?;
        Self::new(core, mode, data.nominal_tau()?, normalizer)
    }

    pub fn core(&self) -> &MlpCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut MlpCore {
        &mut self.core
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tau_train(&self) -> f64 {
        self.tau_train
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn n_state(&self) -> usize {
        self.normalizer.n_state()
    }

    pub fn n_params(&self) -> usize {
        self.normalizer.n_params()
    }

    fn expect_mode(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Usage(format!(
                "{} step requested from a {} net",
                mode.as_str(),
                self.mode.as_str()
            )));
        }
        Ok(())
    }

    fn single(&self, y: &DVector<f64>, mu: &[f64], tau: f64) -> Result<DVector<f64>> {
        let states = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        let params = DMatrix::from_column_slice(mu.len(), 1, mu);
        let out = self.predict_batch(&states, &params, &[tau])?;
        Ok(out.column(0).into_owned())
    }

    /// One step of the direct network.
    pub fn forward_direct(&self, y: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>> {
        self.expect_mode(Mode::Direct)?;
        self.single(y, mu, self.tau_train)
    }

    /// One RK4 step of size `tau_train`.
    pub fn forward_rknn(&self, y: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>> {
        self.forward_rknn_tau(y, mu, self.tau_train)
    }

    /// One RK4 step of arbitrary size.
    pub fn forward_rknn_tau(&self, y: &DVector<f64>, mu: &[f64], tau: f64) -> Result<DVector<f64>> {
        self.expect_mode(Mode::Rknn)?;
        self.single(y, mu, tau)
    }

    /// One step of the step-size-input network.
    pub fn forward_direct_with_tau(&self, y: &DVector<f64>, mu: &[f64], tau: f64) -> Result<DVector<f64>> {
        self.expect_mode(Mode::DirectTau)?;
        self.single(y, mu, tau)
    }

    /// The learned right-hand side `g(y, mu)` of an RK4 network, in reduced
    /// units per second.
    pub fn rhs(&self, y: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>> {
        self.expect_mode(Mode::Rknn)?;
        let states = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        let params = DMatrix::from_column_slice(mu.len(), 1, mu);
        self.check_batch(&states, &params, 1)?;
        let mu_n = self.norm_params(&params);
        let input = self.encode(&states, &mu_n, None);
        let out = self.core.forward(&input);
        Ok(self.scale_rhs(out, &[1.0]).column(0).into_owned())
    }

    fn check_batch(&self, states: &DMatrix<f64>, params: &DMatrix<f64>, n_tau: usize) -> Result<()> {
        if states.nrows() != self.n_state() || params.nrows() != self.n_params() {
            return Err(Error::Shape(format!(
                "net expects {} states and {} parameters, got {} and {}",
                self.n_state(),
                self.n_params(),
                states.nrows(),
                params.nrows()
            )));
        }
        if params.ncols() != states.ncols() || n_tau != states.ncols() {
            return Err(Error::Shape("batch columns disagree".into()));
        }
        Ok(())
    }

    fn norm_params(&self, params: &DMatrix<f64>) -> DMatrix<f64> {
        let p = &self.normalizer.params;
        DMatrix::from_fn(params.nrows(), params.ncols(), |i, j| p.norm(i, params[(i, j)]))
    }

    fn encode(&self, states: &DMatrix<f64>, mu_n: &DMatrix<f64>, taus: Option<&[f64]>) -> DMatrix<f64> {
        let n_r = self.n_state();
        let n_mu = self.n_params();
        let s = &self.normalizer.state;
        let tau_norm = self.normalizer.tau.as_ref();
        DMatrix::from_fn(self.core.n_in(), states.ncols(), |i, j| {
            if i < n_r {
                s.norm(i, states[(i, j)])
            } else if i < n_r + n_mu {
                mu_n[(i - n_r, j)]
            } else {
                let t = taus.expect("step-size input")[j];
                tau_norm.map_or(t, |a| a.norm(0, t))
            }
        })
    }

    fn scale_rhs(&self, mut out: DMatrix<f64>, taus: &[f64]) -> DMatrix<f64> {
        for (j, mut col) in out.column_iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v *= self.normalizer.rhs_scale_at(i) * taus[j];
            }
        }
        out
    }

    /// Predicts the next state for every column. `taus` holds one step size
    /// per column; direct nets ignore it.
    pub fn predict_batch(&self, states: &DMatrix<f64>, params: &DMatrix<f64>, taus: &[f64]) -> Result<DMatrix<f64>> {
        self.check_batch(states, params, taus.len())?;
        if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::NumericInput(format!("step size must be finite and non-negative, got {t}")));
        }
        Ok(self.forward_trace(states, params, taus, false).0)
    }

    fn forward_trace(
        &self,
        states: &DMatrix<f64>,
        params: &DMatrix<f64>,
        taus: &[f64],
        keep: bool,
    ) -> (DMatrix<f64>, Option<Trace>) {
        let mu_n = self.norm_params(params);
        match self.mode {
            Mode::Direct | Mode::DirectTau => {
                let t = (self.mode == Mode::DirectTau).then_some(taus);
                let input = self.encode(states, &mu_n, t);
                let (out, cache) = if keep {
                    let (o, c) = self.core.forward_cached(&input);
                    (o, Some(c))
                } else {
                    (self.core.forward(&input), None)
                };
                let s = &self.normalizer.state;
                let pred = DMatrix::from_fn(out.nrows(), out.ncols(), |i, j| s.denorm(i, out[(i, j)]));
                (pred, cache.map(Trace::Direct))
            }
            Mode::Rknn => {
                let mut caches = Vec::with_capacity(if keep { 4 } else { 0 });
                let mut stage = |x: &DMatrix<f64>| {
                    let input = self.encode(x, &mu_n, None);
                    let out = if keep {
                        let (o, c) = self.core.forward_cached(&input);
                        caches.push(c);
                        o
                    } else {
                        self.core.forward(&input)
                    };
                    self.scale_rhs(out, taus)
                };
                let h1 = stage(states);
                let h2 = stage(&(states + &h1 * 0.5));
                let h3 = stage(&(states + &h2 * 0.5));
                let h4 = stage(&(states + &h3));
                let incr = (&h1 + &h2 * 2.0 + &h3 * 2.0 + &h4) / 6.0;
                let pred = states + incr;
                (pred, keep.then_some(Trace::Rknn(caches)))
            }
        }
    }

    /// Mean squared one-step error over state-normalized targets and its
    /// gradient with respect to every weight. For RK4 nets the gradient is
    /// accumulated over the four stages, which share the same weights.
    pub fn loss_and_gradients(&self, batch: &TransitionSet) -> Result<(f64, Gradients)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Usage("loss of an empty batch".into()));
        }
        self.check_batch(&batch.states, &batch.params, batch.taus.len())?;
        let (pred, trace) = self.forward_trace(&batch.states, &batch.params, &batch.taus, true);
        let s = &self.normalizer.state;
        let count = (n * self.n_state()) as f64;
        let mut loss = 0.0;
        let mut d_pred = DMatrix::zeros(pred.nrows(), pred.ncols());
        for j in 0..n {
            for i in 0..self.n_state() {
                let r = (pred[(i, j)] - batch.next[(i, j)]) / s.scale[i];
                loss += r * r;
                d_pred[(i, j)] = 2.0 * r / (s.scale[i] * count);
            }
        }
        loss /= count;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence {
                epoch: 0,
                loss,
                checkpoint: Box::new(self.clone()),
            });
        }
        let mut grads = Gradients::zeros_like(&self.core);
        match trace.expect("trace requested") {
            Trace::Direct(cache) => {
                let d_out = DMatrix::from_fn(d_pred.nrows(), d_pred.ncols(), |i, j| d_pred[(i, j)] * s.scale[i]);
                self.core.backward(&cache, &d_out, &mut grads);
            }
            Trace::Rknn(caches) => {
                // pred = y + (h1 + 2 h2 + 2 h3 + h4) / 6 with x2 = y + h1/2,
                // x3 = y + h2/2, x4 = y + h3 and h_i = tau * rs * core(x_i).
                let g = &d_pred;
                let dh4 = g / 6.0;
                let dx4 = self.stage_backward(&caches[3], &dh4, &batch.taus, &mut grads);
                let dh3 = g / 3.0 + dx4;
                let dx3 = self.stage_backward(&caches[2], &dh3, &batch.taus, &mut grads);
                let dh2 = g / 3.0 + dx3 * 0.5;
                let dx2 = self.stage_backward(&caches[1], &dh2, &batch.taus, &mut grads);
                let dh1 = g / 6.0 + dx2 * 0.5;
                self.stage_backward(&caches[0], &dh1, &batch.taus, &mut grads);
            }
        }
        Ok((loss, grads))
    }

    /// Back-propagates `dh` through one RK4 stage and returns the gradient
    /// with respect to the stage's state input.
    fn stage_backward(&self, cache: &ForwardCache, dh: &DMatrix<f64>, taus: &[f64], grads: &mut Gradients) -> DMatrix<f64> {
        let d_out = DMatrix::from_fn(dh.nrows(), dh.ncols(), |i, j| {
            dh[(i, j)] * taus[j] * self.normalizer.rhs_scale_at(i)
        });
        let d_in = self.core.backward(cache, &d_out, grads);
        let s = &self.normalizer.state;
        DMatrix::from_fn(self.n_state(), dh.ncols(), |i, j| d_in[(i, j)] / s.scale[i])
    }

    /// Closed-loop prediction on the uniform grid `t_j = j * t_end / k`.
    /// Each step consumes the previous prediction and `mu(t_j)`. Direct nets
    /// take one network step per grid step whatever the grid spacing.
    pub fn rollout(&self, y0: &DVector<f64>, signal: &ParameterSignal, t_end: f64, k: usize) -> Result<DMatrix<f64>> {
        if y0.len() != self.n_state() || signal.dim() != self.n_params() {
            return Err(Error::Shape(format!(
                "rollout needs {} states and {} parameters, got {} and {}",
                self.n_state(),
                self.n_params(),
                y0.len(),
                signal.dim()
            )));
        }
        if k == 0 || !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Usage(format!("rollout needs k > 0 and t_end > 0, got k = {k}, t_end = {t_end}")));
        }
        let tau = t_end / k as f64;
        let mut out = DMatrix::zeros(self.n_state(), k + 1);
        out.set_column(0, y0);
        let mut y = y0.clone();
        for j in 0..k {
            let mu = signal.eval(j as f64 * tau)?;
            y = self.single(&y, &mu, tau)?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutBlowUp { step: j + 1 });
            }
            out.set_column(j + 1, &y);
        }
        Ok(out)
    }
}

fn fit_normalizer(mode: Mode, data: &TransitionSet) -> Result<Normalizer> {
    let n_r = data.n_state();
    let n_mu = data.n_params();
    let state_cols: Vec<Vec<f64>> = data.states.column_iter().map(|c| c.iter().copied().collect()).collect();
    let param_cols: Vec<Vec<f64>> = data.params.column_iter().map(|c| c.iter().copied().collect()).collect();
    let state = Affine::standardize(n_r, state_cols.iter().map(|c| c.as_slice()))?;
    let params = Affine::standardize(n_mu, param_cols.iter().map(|c| c.as_slice()))?;
    let tau = if mode == Mode::DirectTau {
        let taus: Vec<[f64; 1]> = data.taus.iter().map(|t| [*t]).collect();
        Some(Affine::standardize(1, taus.iter().map(|t| t.as_slice()))?)
    } else {
        None
    };
    let rhs_scale = if mode == Mode::Rknn {
        // root mean square of the finite-difference slopes; no shift so that
        // a zero core is an identity step
        let mut sq = vec![0.0; n_r];
        let mut count = 0usize;
        for j in 0..data.len() {
            let t = data.taus[j];
            if t > 0.0 {
                for (i, acc) in sq.iter_mut().enumerate() {
                    let d = (data.next[(i, j)] - data.states[(i, j)]) / t;
                    *acc += d * d;
                }
                count += 1;
            }
        }
        let rs = sq
            .iter()
            .map(|q| {
                let r = (q / count.max(1) as f64).sqrt();
                if r > 0.0 && r.is_finite() {
                    r
                } else {
                    1.0
                }
            })
            .collect();
        Some(rs)
    } else {
        None
    };
    Ok(Normalizer {
        state,
        params,
        tau,
        rhs_scale,
    })
}
