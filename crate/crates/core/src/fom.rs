//! Full-order thermal models `C dT/dt = K T + R T^4 + B u` and their
//! reference integrator.
//!
//! The three shipped models are one-dimensional finite-difference chains:
//!
//! * a heat sink: copper chip segment, aluminium fin segment, convective tail;
//! * a gap-radiation pair: two steel plates that only exchange heat through a
//!   quartic radiative term between their facing nodes;
//! * a dimensionless diffusion chain with a quadratic transport term.
//!
//! States are absolute temperatures. Parameter vectors use the layout
//! `(T0 in degrees Celsius, load)`; [`FomModel::initial_state`] and
//! [`FomModel::inputs`] map them onto the state and input vectors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Csr;
use crate::sampling::ParameterSignal;

pub const CELSIUS_TO_KELVIN: f64 = 273.15;

pub const STEFAN_BOLTZMANN: f64 = 5.670374419e-8;

/// Default gap exchange coefficient `sigma * eps * A` in W/K^4: emissivity
/// 0.8 over the default 0.04 m^2 plate face.
pub const GAP_EMISSIVITY_COEFF: f64 = STEFAN_BOLTZMANN * 0.8 * 0.04;

/// Any state component above this magnitude is treated as a blow-up.
pub const OVERFLOW_GUARD: f64 = 1e12;

/// Target value of `tau_int * L` for the substep rule.
pub const STABILITY_TARGET: f64 = 0.5;

// Material data: capacity J/(kg K), conductivity W/(m K), density kg/m^3.
pub const COPPER_CAPACITY: f64 = 385.0;
pub const COPPER_CONDUCTIVITY: f64 = 387.0;
pub const COPPER_DENSITY: f64 = 8960.0;
pub const ALUMINIUM_CAPACITY: f64 = 963.0;
pub const ALUMINIUM_CONDUCTIVITY: f64 = 151.0;
pub const ALUMINIUM_DENSITY: f64 = 2700.0;
pub const STEEL_CAPACITY: f64 = 434.0;
pub const STEEL_CONDUCTIVITY: f64 = 14.0;
pub const STEEL_DENSITY: f64 = 7850.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    HeatSink,
    GapRadiation,
    SyntheticNonlinear,
    Custom,
}

/// Serializable description of a shipped model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    HeatSink { n_chip: usize, n_fin: usize },
    GapRadiation { n_plate: usize, emissivity_coeff: f64 },
    SyntheticNonlinear { n_state: usize, nonlinearity_gain: f64 },
}

impl ModelSpec {
    pub fn build(&self) -> Result<FomModel> {
        match *self {
            ModelSpec::HeatSink { n_chip, n_fin } => build_heat_sink(n_chip, n_fin),
            ModelSpec::GapRadiation {
                n_plate,
                emissivity_coeff,
            } => build_gap_radiation(n_plate, emissivity_coeff),
            ModelSpec::SyntheticNonlinear {
                n_state,
                nonlinearity_gain,
            } => build_synthetic_nonlinear(n_state, nonlinearity_gain),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FomModel {
    kind: ModelKind,
    capacity: DVector<f64>,
    conductivity: DMatrix<f64>,
    radiation: Option<DMatrix<f64>>,
    quadratic_gain: Option<f64>,
    load_map: DMatrix<f64>,
    /// Input vector used when every load is zero (e.g. ambient temperature).
    base_inputs: Vec<f64>,
    /// Input slot fed by the load parameter.
    load_input: usize,
    /// Index of the initial-temperature parameter in `mu`.
    t0_param: usize,
    /// Index of the load parameter in `mu`.
    load_param: usize,
    n_params: usize,
    /// Added to the initial-temperature parameter to obtain the state value.
    t0_offset: f64,
    /// Largest state magnitude expected over the parameter space, used by the
    /// substep rule of the nonlinear terms.
    state_bound: f64,
    k_csr: Csr,
    r_csr: Option<Csr>,
}

impl FomModel {
    /// Linear model `C dy/dt = K y + B u` with the default parameter layout:
    /// `mu = (T0, load)`, the load feeding input 0 and `base_inputs` filling the rest.
    pub fn linear(
        capacity: DVector<f64>,
        conductivity: DMatrix<f64>,
        load_map: DMatrix<f64>,
        base_inputs: Vec<f64>,
    ) -> Result<Self> {
        Self::assemble(
            ModelKind::Custom,
            capacity,
            conductivity,
            None,
            None,
            load_map,
            base_inputs,
            0.0,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        kind: ModelKind,
        capacity: DVector<f64>,
        conductivity: DMatrix<f64>,
        radiation: Option<DMatrix<f64>>,
        quadratic_gain: Option<f64>,
        load_map: DMatrix<f64>,
        base_inputs: Vec<f64>,
        t0_offset: f64,
    ) -> Result<Self> {
        let n = capacity.len();
        if n == 0 {
            return Err(Error::InvalidModel("empty state".into()));
        }
        if conductivity.shape() != (n, n) {
            return Err(Error::InvalidModel(format!(
                "conductivity is {:?}, expected ({n}, {n})",
                conductivity.shape()
            )));
        }
        if load_map.nrows() != n || load_map.ncols() == 0 || base_inputs.len() != load_map.ncols() {
            return Err(Error::InvalidModel(format!(
                "load map is {:?} with {} base inputs",
                load_map.shape(),
                base_inputs.len()
            )));
        }
        if let Some(i) = capacity.iter().position(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidModel(format!("capacity[{i}] = {} is not positive", capacity[i])));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if conductivity[(i, j)] != conductivity[(j, i)] {
                    return Err(Error::InvalidModel(format!("conductivity not symmetric at ({i}, {j})")));
                }
            }
        }
        let k_csr = Csr::from_dense(&conductivity);
        // Gershgorin: every disc of C^-1 K must sit in the closed left half-plane.
        for i in 0..n {
            let centre = k_csr.diag(i) / capacity[i];
            let radius = k_csr.off_diag_abs_row_sum(i) / capacity[i];
            if centre + radius > 1e-12 * centre.abs().max(radius) {
                return Err(Error::InvalidModel(format!(
                    "row {i} fails the dissipativity bound: centre {centre:e}, radius {radius:e}"
                )));
            }
        }
        let r_csr = match &radiation {
            Some(r) => {
                if r.shape() != (n, n) {
                    return Err(Error::InvalidModel("radiation matrix has the wrong shape".into()));
                }
                let csr = Csr::from_dense(r);
                for i in 0..n {
                    if csr.row_sum(i).abs() > 1e-12 * csr.abs_row_sum(i).max(f64::MIN_POSITIVE) {
                        return Err(Error::InvalidModel(format!("radiation row {i} does not sum to zero")));
                    }
                }
                Some(csr)
            }
            None => None,
        };
        Ok(Self {
            kind,
            capacity,
            conductivity,
            radiation,
            quadratic_gain,
            load_map,
            base_inputs,
            load_input: 0,
            t0_param: 0,
            load_param: 1,
            n_params: 2,
            t0_offset,
            state_bound: 0.0,
            k_csr,
            r_csr,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_state(&self) -> usize {
        self.capacity.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.load_map.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn capacity(&self) -> &DVector<f64> {
        &self.capacity
    }

    pub fn conductivity(&self) -> &DMatrix<f64> {
        &self.conductivity
    }

    pub fn radiation(&self) -> Option<&DMatrix<f64>> {
        self.radiation.as_ref()
    }

    pub fn quadratic_gain(&self) -> Option<f64> {
        self.quadratic_gain
    }

    pub fn load_map(&self) -> &DMatrix<f64> {
        &self.load_map
    }

    pub fn base_inputs(&self) -> &[f64] {
        &self.base_inputs
    }

    pub fn state_bound(&self) -> f64 {
        self.state_bound
    }

    pub fn with_state_bound(mut self, bound: f64) -> Self {
        self.state_bound = bound;
        self
    }

    /// Uniform initial state from the initial-temperature parameter.
    pub fn initial_state(&self, mu: &[f64]) -> DVector<f64> {
        DVector::from_element(self.n_state(), mu[self.t0_param] + self.t0_offset)
    }

    /// Input vector `u` for parameter vector `mu`.
    pub fn inputs(&self, mu: &[f64]) -> Vec<f64> {
        let mut u = self.base_inputs.clone();
        u[self.load_input] = mu[self.load_param];
        u
    }

    /// `C^-1 (K y + R y^4 + Q(y) + B u)`.
    pub fn rhs(&self, y: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.n_state() || u.len() != self.n_inputs() {
            return Err(Error::Shape(format!(
                "rhs got y of length {} and u of length {}, model has N = {} and n_u = {}",
                y.len(),
                u.len(),
                self.n_state(),
                self.n_inputs()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericInput(format!("y[{i}] = {}", y[i])));
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericInput(format!("u[{i}] = {}", u[i])));
        }
        let mut out = DVector::zeros(self.n_state());
        let mut scratch = vec![0.0; self.n_state()];
        self.rhs_into(y.as_slice(), u, &mut scratch, out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked RHS evaluation. `quartic` is scratch space of length N.
    fn rhs_into(&self, y: &[f64], u: &[f64], quartic: &mut [f64], out: &mut [f64]) {
        let n = self.n_state();
        if self.r_csr.is_some() {
            for (q, v) in quartic.iter_mut().zip(y) {
                let s = v * v;
                *q = s * s;
            }
        }
        for i in 0..n {
            let mut acc = self.k_csr.row_dot(i, y);
            if let Some(r) = &self.r_csr {
                acc += r.row_dot(i, quartic);
            }
            if let Some(g) = self.quadratic_gain {
                let inflow = if i > 0 { y[i - 1] * y[i - 1] } else { 0.0 };
                acc += g * (inflow - y[i] * y[i]);
            }
            let mut bu = 0.0;
            for (c, uc) in u.iter().enumerate() {
                bu += self.load_map[(i, c)] * uc;
            }
            out[i] = (acc + bu) / self.capacity[i];
        }
    }

    /// Gershgorin bound on the spectral radius of the RHS Jacobian for states
    /// with magnitude up to `y_max`.
    pub fn spectral_radius_bound(&self, y_max: f64) -> f64 {
        let mut bound: f64 = 0.0;
        for i in 0..self.n_state() {
            let mut row = self.k_csr.abs_row_sum(i);
            if let Some(r) = &self.r_csr {
                row += 4.0 * y_max.powi(3) * r.abs_row_sum(i);
            }
            if let Some(g) = self.quadratic_gain {
                row += 4.0 * g.abs() * y_max;
            }
            bound = bound.max(row / self.capacity[i]);
        }
        bound
    }

    /// Number of RK4 substeps per stored step of length `tau`.
    pub fn substeps(&self, tau: f64, y_max: f64) -> usize {
        let l = self.spectral_radius_bound(y_max);
        ((tau * l / STABILITY_TARGET).ceil() as usize).max(1)
    }
}

/// Geometry and boundary data of the heat-sink chain.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatSinkGeometry {
    pub chip_length_m: f64,
    pub fin_length_m: f64,
    pub area_m2: f64,
    /// Convective conductance of the fin tip to ambient, W/K.
    pub tail_conductance: f64,
    pub ambient_k: f64,
    /// Volume (mm^3) over which the volumetric load acts; one load unit
    /// equals 1 W/mm^3 over this volume.
    pub source_volume_mm3: f64,
}

impl Default for HeatSinkGeometry {
    fn default() -> Self {
        Self {
            chip_length_m: 0.02,
            fin_length_m: 0.06,
            area_m2: 4e-4,
            tail_conductance: 0.5,
            ambient_k: 20.0 + CELSIUS_TO_KELVIN,
            source_volume_mm3: 200.0,
        }
    }
}

/// Appends the conductance `g` between nodes `i` and `j`.
fn couple(k: &mut DMatrix<f64>, i: usize, j: usize, g: f64) {
    k[(i, i)] -= g;
    k[(j, j)] -= g;
    k[(i, j)] += g;
    k[(j, i)] += g;
}

/// Heat sink with the default geometry.
pub fn build_heat_sink(n_chip: usize, n_fin: usize) -> Result<FomModel> {
    build_heat_sink_with(n_chip, n_fin, &HeatSinkGeometry::default())
}

/// Copper chip (nodes `0..n_chip`, heated) followed by an aluminium fin whose
/// last node convects to ambient. Inputs are `u = (load, T_ambient)`.
pub fn build_heat_sink_with(n_chip: usize, n_fin: usize, geo: &HeatSinkGeometry) -> Result<FomModel> {
    if n_chip < 2 || n_fin < 2 {
        return Err(Error::InvalidModel(format!(
            "heat sink needs at least 2 chip and 2 fin nodes, got {n_chip} and {n_fin}"
        )));
    }
    let n = n_chip + n_fin;
    let dx_cu = geo.chip_length_m / n_chip as f64;
    let dx_al = geo.fin_length_m / n_fin as f64;
    let mut capacity = DVector::zeros(n);
    for i in 0..n {
        capacity[i] = if i < n_chip {
            COPPER_DENSITY * COPPER_CAPACITY * geo.area_m2 * dx_cu
        } else {
            ALUMINIUM_DENSITY * ALUMINIUM_CAPACITY * geo.area_m2 * dx_al
        };
    }
    let mut k = DMatrix::zeros(n, n);
    let g_cu = COPPER_CONDUCTIVITY * geo.area_m2 / dx_cu;
    let g_al = ALUMINIUM_CONDUCTIVITY * geo.area_m2 / dx_al;
    // half cells in series across the material interface
    let g_if = 1.0 / (0.5 * dx_cu / (COPPER_CONDUCTIVITY * geo.area_m2) + 0.5 * dx_al / (ALUMINIUM_CONDUCTIVITY * geo.area_m2));
    for i in 0..n - 1 {
        let g = if i + 1 < n_chip {
            g_cu
        } else if i + 1 == n_chip {
            g_if
        } else {
            g_al
        };
        couple(&mut k, i, i + 1, g);
    }
    k[(n - 1, n - 1)] -= geo.tail_conductance;

    let mut b = DMatrix::zeros(n, 2);
    for i in 0..n_chip {
        b[(i, 0)] = geo.source_volume_mm3 / n_chip as f64;
    }
    b[(n - 1, 1)] = geo.tail_conductance;

    let model = FomModel::assemble(
        ModelKind::HeatSink,
        capacity,
        k,
        None,
        None,
        b,
        vec![0.0, geo.ambient_k],
        CELSIUS_TO_KELVIN,
    )?;
    Ok(model.with_state_bound(500.0))
}

/// Geometry of the radiating plate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GapGeometry {
    pub thickness_m: f64,
    pub area_m2: f64,
    /// Convective conductance of each plate's outer face, W/K.
    pub outer_conductance: f64,
    pub ambient_k: f64,
}

impl Default for GapGeometry {
    fn default() -> Self {
        Self {
            thickness_m: 0.02,
            area_m2: 0.04,
            outer_conductance: 0.4,
            ambient_k: 20.0 + CELSIUS_TO_KELVIN,
        }
    }
}

/// Gap-radiation pair with the default geometry.
pub fn build_gap_radiation(n_plate: usize, emissivity_coeff: f64) -> Result<FomModel> {
    build_gap_radiation_with(n_plate, emissivity_coeff, &GapGeometry::default())
}

/// Plate A occupies nodes `0..n` (node 0 is its outer, heated face), plate B
/// nodes `n..2n` (node `2n-1` outer). Nodes `n-1` and `n` face each other
/// across the gap and exchange `e (T_a^4 - T_b^4)`.
///
/// Inputs are `u = (load on plate A, load on plate B, T_ambient)`; the load
/// parameter drives plate A.
pub fn build_gap_radiation_with(n_plate: usize, emissivity_coeff: f64, geo: &GapGeometry) -> Result<FomModel> {
    if n_plate < 2 {
        return Err(Error::InvalidModel(format!("gap model needs at least 2 nodes per plate, got {n_plate}")));
    }
    if !(emissivity_coeff > 0.0 && emissivity_coeff.is_finite()) {
        return Err(Error::InvalidModel(format!("emissivity coefficient must be positive, got {emissivity_coeff}")));
    }
    let n = 2 * n_plate;
    let dx = geo.thickness_m / n_plate as f64;
    let capacity = DVector::from_element(n, STEEL_DENSITY * STEEL_CAPACITY * geo.area_m2 * dx);
    let g = STEEL_CONDUCTIVITY * geo.area_m2 / dx;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n_plate - 1 {
        couple(&mut k, i, i + 1, g);
        couple(&mut k, n_plate + i, n_plate + i + 1, g);
    }
    k[(0, 0)] -= geo.outer_conductance;
    k[(n - 1, n - 1)] -= geo.outer_conductance;

    let (a, b) = (n_plate - 1, n_plate);
    let mut r = DMatrix::zeros(n, n);
    r[(a, a)] = -emissivity_coeff;
    r[(a, b)] = emissivity_coeff;
    r[(b, b)] = -emissivity_coeff;
    r[(b, a)] = emissivity_coeff;

    let mut bm = DMatrix::zeros(n, 3);
    bm[(0, 0)] = 1.0;
    bm[(n - 1, 1)] = 1.0;
    bm[(0, 2)] = geo.outer_conductance;
    bm[(n - 1, 2)] = geo.outer_conductance;

    let model = FomModel::assemble(
        ModelKind::GapRadiation,
        capacity,
        k,
        Some(r),
        None,
        bm,
        vec![0.0, 0.0, geo.ambient_k],
        CELSIUS_TO_KELVIN,
    )?;
    Ok(model.with_state_bound(900.0))
}

/// Dimensionless diffusion chain with unit capacities and conductances, a
/// unit leak from the last node to a zero ambient, load into node 0, and the
/// transport term `gain (y_{i-1}^2 - y_i^2)` (node 0 only loses, the last node
/// spills out of the chain). Inputs are `u = (load, ambient)`.
pub fn build_synthetic_nonlinear(n_state: usize, nonlinearity_gain: f64) -> Result<FomModel> {
    if n_state < 3 {
        return Err(Error::InvalidModel(format!("synthetic chain needs at least 3 states, got {n_state}")));
    }
    if !nonlinearity_gain.is_finite() {
        return Err(Error::InvalidModel("nonlinearity gain must be finite".into()));
    }
    let (capacity, k, b) = diffusion_chain(n_state);
    let gain = (nonlinearity_gain != 0.0).then_some(nonlinearity_gain);
    let model = FomModel::assemble(
        ModelKind::SyntheticNonlinear,
        capacity,
        k,
        None,
        gain,
        b,
        vec![0.0, 0.0],
        0.0,
    )?;
    Ok(model.with_state_bound(10.0))
}

/// Matrices of the plain diffusion chain underlying the synthetic model.
pub fn diffusion_chain(n: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let capacity = DVector::from_element(n, 1.0);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        couple(&mut k, i, i + 1, 1.0);
    }
    k[(n - 1, n - 1)] -= 1.0;
    let mut b = DMatrix::zeros(n, 2);
    b[(0, 0)] = 1.0;
    b[(n - 1, 1)] = 1.0;
    (capacity, k, b)
}

/// Simulated states on a uniform grid `t_j = j tau`, `j = 0..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// N x (k+1), one column per time point.
    pub states: DMatrix<f64>,
    pub signal_id: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn tau(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn n_state(&self) -> usize {
        self.states.nrows()
    }
}

/// Uniform time grid with `k + 1` points on `[0, t_end]`.
pub fn time_grid(t_end: f64, k: usize) -> Vec<f64> {
    let tau = t_end / k as f64;
    (0..=k).map(|j| j as f64 * tau).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    /// Extra factor applied on top of the stability substep count.
    pub refine: usize,
    /// Overrides the state bound used by the nonlinear substep terms.
    pub state_bound: Option<f64>,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            refine: 1,
            state_bound: None,
        }
    }
}

/// Classic RK4 with the stability substep rule; the load is sampled at each
/// stored time point and held over the step.
pub fn integrate_reference(
    model: &FomModel,
    y0: &DVector<f64>,
    signal: &ParameterSignal,
    t_end: f64,
    k: usize,
) -> Result<Trajectory> {
    integrate_reference_with(model, y0, signal, t_end, k, IntegrationOptions::default())
}

pub fn integrate_reference_with(
    model: &FomModel,
    y0: &DVector<f64>,
    signal: &ParameterSignal,
    t_end: f64,
    k: usize,
    opts: IntegrationOptions,
) -> Result<Trajectory> {
    if k == 0 {
        return Err(Error::Usage("need at least one time step".into()));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::Usage(format!("t_end must be positive, got {t_end}")));
    }
    let n = model.n_state();
    if y0.len() != n {
        return Err(Error::Shape(format!("y0 has length {}, model has N = {n}", y0.len())));
    }
    if let Some(i) = y0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericInput(format!("y0[{i}] = {}", y0[i])));
    }
    if signal.dim() != model.n_params() {
        return Err(Error::Shape(format!(
            "signal has {} components, model expects {}",
            signal.dim(),
            model.n_params()
        )));
    }
    let times = time_grid(t_end, k);
    let tau = t_end / k as f64;
    let y_max = opts
        .state_bound
        .unwrap_or(model.state_bound())
        .max(y0.amax());
    let m = model.substeps(tau, y_max) * opts.refine.max(1);
    let h = tau / m as f64;

    let mut states = DMatrix::zeros(n, k + 1);
    states.set_column(0, y0);
    let mut y = y0.as_slice().to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut quartic = vec![0.0; n];

    for j in 0..k {
        let mu = signal.eval(times[j])?;
        let u = model.inputs(&mu);
        if let Some(c) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericInput(format!("input {c} is {} at t = {}", u[c], times[j])));
        }
        for _ in 0..m {
            model.rhs_into(&y, &u, &mut quartic, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            model.rhs_into(&tmp, &u, &mut quartic, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            model.rhs_into(&tmp, &u, &mut quartic, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            model.rhs_into(&tmp, &u, &mut quartic, &mut k4);
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
            return Err(Error::Stiffness {
                step: j + 1,
                time: times[j + 1],
                guard: OVERFLOW_GUARD,
            });
        }
        states.column_mut(j + 1).copy_from_slice(&y);
    }
    Ok(Trajectory {
        times,
        states,
        signal_id: 0,
    })
}

/// Integrates one trajectory per signal, each starting from the uniform
/// initial state of its own parameter draw. Signals run in parallel; results
/// keep the signal order.
pub fn simulate_signals(
    model: &FomModel,
    signals: &[ParameterSignal],
    t_end: f64,
    k: usize,
    opts: IntegrationOptions,
) -> Vec<Result<Trajectory>> {
    signals
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let mu0 = s.eval(0.0)?;
            let y0 = model.initial_state(&mu0);
            let mut traj = integrate_reference_with(model, &y0, s, t_end, k, opts)?;
            traj.signal_id = id;
            Ok(traj)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_decay() -> FomModel {
        FomModel::linear(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 1),
            vec![0.0],
        )
        .unwrap()
    }

    fn naive_rhs(m: &FomModel, y: &[f64], u: &[f64]) -> Vec<f64> {
        let n = m.n_state();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += m.conductivity()[(i, j)] * y[j];
                if let Some(r) = m.radiation() {
                    s += r[(i, j)] * y[j] * y[j] * y[j] * y[j];
                }
            }
            for (c, uc) in u.iter().enumerate() {
                s += m.load_map()[(i, c)] * uc;
            }
            out[i] = s / m.capacity()[i];
        }
        out
    }

    #[test]
    fn smallest_heat_sink() {
        let m = build_heat_sink(2, 2).unwrap();
        assert_eq!(m.n_state(), 4);
        assert!(m.radiation().is_none());
    }

    #[test]
    fn heat_sink_dimension_checks() {
        assert!(matches!(build_heat_sink(1, 5), Err(Error::InvalidModel(_))));
        assert!(matches!(build_heat_sink(5, 1), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn desk_heat_sink_passes_gershgorin() {
        let m = build_heat_sink(10, 40).unwrap();
        assert_eq!(m.n_state(), 50);
        for i in 0..50 {
            let c = m.capacity()[i];
            let centre = m.conductivity()[(i, i)] / c;
            let radius: f64 = (0..50).filter(|&j| j != i).map(|j| m.conductivity()[(i, j)].abs()).sum::<f64>() / c;
            assert!(centre + radius <= 1e-12, "row {i}");
        }
    }

    #[test]
    fn nondissipative_model_rejected() {
        let k = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 2.0, -1.0]);
        let r = FomModel::linear(DVector::from_element(2, 1.0), k, DMatrix::zeros(2, 1), vec![0.0]);
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn nonpositive_capacity_rejected() {
        let r = FomModel::linear(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            vec![0.0],
        );
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn gap_radiation_rows_sum_to_zero() {
        let m = build_gap_radiation(2, 1e-9).unwrap();
        assert_eq!(m.n_state(), 4);
        let r = m.radiation().unwrap();
        for i in 0..4 {
            assert_eq!(r.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn equal_plates_have_no_gap_flux() {
        let m = build_gap_radiation_with(
            3,
            1e-9,
            &GapGeometry {
                outer_conductance: 0.0,
                ..GapGeometry::default()
            },
        )
        .unwrap();
        let y = DVector::from_element(6, 412.5);
        let d = m.rhs(&y, &[0.0, 0.0, 0.0]).unwrap();
        assert!(d.iter().all(|v| *v == 0.0), "{d}");
    }

    #[test]
    fn gap_flux_flows_from_hot_to_cold_plate() {
        let e = 1e-9;
        let m = build_gap_radiation(5, e).unwrap();
        let mut y = DVector::from_element(10, 300.0);
        for i in 0..5 {
            y[i] = 400.0;
        }
        let d = m.rhs(&y, &[0.0, 0.0, 293.15]).unwrap();
        let flux = e * (400f64.powi(4) - 300f64.powi(4));
        let c = m.capacity()[4];
        assert!(((d[4] * c) + flux).abs() < 1e-12 * flux);
        assert!(((d[5] * c) - flux).abs() < 1e-12 * flux);
        assert!(d[4] < 0.0 && d[5] > 0.0);
    }

    #[test]
    fn synthetic_without_gain_is_plain_diffusion() {
        let nl = build_synthetic_nonlinear(6, 0.0).unwrap();
        let (c, k, b) = diffusion_chain(6);
        let lin = FomModel::linear(c, k, b, vec![0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let y = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let u = [rng.random_range(0.0..1.0), 0.0];
            assert_eq!(nl.rhs(&y, &u).unwrap(), lin.rhs(&y, &u).unwrap());
        }
    }

    #[test]
    fn synthetic_rejects_short_chain() {
        assert!(matches!(build_synthetic_nonlinear(2, 0.1), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn synthetic_with_gain_stays_bounded() {
        let m = build_synthetic_nonlinear(10, 0.01).unwrap();
        let y0 = DVector::from_element(10, 1.0);
        let sig = ParameterSignal::constant(vec![1.0, 0.5]);
        let traj = integrate_reference(&m, &y0, &sig, 20.0, 200).unwrap();
        assert!(traj.states.iter().all(|v| v.is_finite() && v.abs() < 10.0));
    }

    #[test]
    fn rhs_vanishes_at_linear_equilibrium() {
        let m = build_heat_sink(4, 6).unwrap();
        let u = m.inputs(&[20.0, 0.1]);
        // K y = -B u
        let bu = m.load_map() * DVector::from_column_slice(&u);
        let y = m.conductivity().clone().lu().solve(&(-bu)).unwrap();
        let d = m.rhs(&y, &u).unwrap();
        let scale = y.amax() * m.conductivity().amax() / m.capacity().min();
        assert!(d.amax() < 1e-12 * scale, "{}", d.amax());
    }

    #[test]
    fn rhs_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [build_heat_sink(10, 40).unwrap(), build_gap_radiation(6, 1.2e-9).unwrap()] {
            for _ in 0..10 {
                let y: Vec<f64> = (0..m.n_state()).map(|_| rng.random_range(280.0..420.0)).collect();
                let u: Vec<f64> = (0..m.n_inputs()).map(|_| rng.random_range(0.0..50.0)).collect();
                let fast = m.rhs(&DVector::from_column_slice(&y), &u).unwrap();
                let slow = naive_rhs(&m, &y, &u);
                let norm = slow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let diff = fast.iter().zip(&slow).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(diff <= 1e-13 * norm, "relative diff {}", diff / norm);
            }
        }
    }

    #[test]
    fn rhs_rejects_non_finite_and_bad_shapes() {
        let m = build_heat_sink(2, 2).unwrap();
        let mut y = DVector::from_element(4, 300.0);
        assert!(matches!(m.rhs(&y, &[0.0]), Err(Error::Shape(_))));
        y[2] = f64::NAN;
        assert!(matches!(m.rhs(&y, &[0.0, 293.0]), Err(Error::NumericInput(_))));
    }

    #[test]
    fn rhs_is_bit_reproducible() {
        let m = build_gap_radiation(4, 1e-9).unwrap();
        let y = DVector::from_fn(8, |i, _| 300.0 + 13.7 * i as f64);
        let u = m.inputs(&[20.0, 50.0]);
        let a = m.rhs(&y, &u).unwrap();
        for _ in 0..5 {
            assert_eq!(m.rhs(&y, &u).unwrap(), a);
        }
    }

    #[test]
    fn plate_swap_symmetry_is_exact() {
        let n_plate = 5;
        let m = build_gap_radiation(n_plate, 1.1e-9).unwrap();
        let n = 2 * n_plate;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let y = DVector::from_fn(n, |_, _| rng.random_range(290.0..700.0));
            let (la, lb) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
            let d = m.rhs(&y, &[la, lb, 293.15]).unwrap();
            let mirrored = DVector::from_fn(n, |i, _| y[n - 1 - i]);
            let dm = m.rhs(&mirrored, &[lb, la, 293.15]).unwrap();
            for i in 0..n {
                assert_eq!(d[i], dm[n - 1 - i], "node {i}");
            }
        }
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let m = scalar_decay();
        let traj = integrate_reference(
            &m,
            &DVector::from_element(1, 1.0),
            &ParameterSignal::constant(vec![0.0, 0.0]),
            1.0,
            100,
        )
        .unwrap();
        assert_eq!(traj.states.ncols(), 101);
        assert!((traj.states[(0, 100)] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn zero_input_zero_state_stays_zero() {
        let geo = HeatSinkGeometry {
            ambient_k: 0.0,
            ..HeatSinkGeometry::default()
        };
        let m = build_heat_sink_with(3, 5, &geo).unwrap();
        let traj = integrate_reference(
            &m,
            &DVector::zeros(8),
            &ParameterSignal::constant(vec![0.0, 0.0]),
            50.0,
            10,
        )
        .unwrap();
        assert!(traj.states.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heat_sink_heats_towards_equilibrium() {
        let m = build_heat_sink(10, 40).unwrap();
        let mu = [20.0, 0.1];
        let y0 = m.initial_state(&mu);
        let sig = ParameterSignal::constant(mu.to_vec());
        let traj = integrate_reference(&m, &y0, &sig, 5000.0, 200).unwrap();
        // chip temperature rises monotonically
        let chip = traj.states.row(0);
        for w in chip.iter().collect::<Vec<_>>().windows(2) {
            assert!(w[1] >= w[0]);
        }
        let u = DVector::from_column_slice(&m.inputs(&mu));
        let eq = m.conductivity().clone().lu().solve(&(-(m.load_map() * u))).unwrap();
        let last = traj.states.column(200);
        for i in 0..50 {
            let rise_eq = eq[i] - y0[i];
            assert!((last[i] - eq[i]).abs() < 0.01 * rise_eq, "node {i}: {} vs {}", last[i], eq[i]);
        }
    }

    #[test]
    fn insulated_chain_conserves_energy() {
        let geo = HeatSinkGeometry {
            tail_conductance: 0.0,
            ..HeatSinkGeometry::default()
        };
        let m = build_heat_sink_with(5, 10, &geo).unwrap();
        let y0 = DVector::from_fn(15, |i, _| 300.0 + 10.0 * (i % 4) as f64);
        let traj = integrate_reference(&m, &y0, &ParameterSignal::constant(vec![0.0, 0.0]), 100.0, 20).unwrap();
        let energy = |c: usize| (0..15).map(|i| m.capacity()[i] * traj.states[(i, c)]).sum::<f64>();
        let e0 = energy(0);
        for c in 1..=20 {
            assert!((energy(c) - e0).abs() < 1e-12 * e0);
        }
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let m = scalar_decay();
        let sig = ParameterSignal::constant(vec![0.0, 0.0]);
        let y0 = DVector::from_element(1, 1.0);
        // a coarse outer step forces a single substep per step under the stability rule
        let run = |refine| {
            integrate_reference_with(&m, &y0, &sig, 2.0, 4, IntegrationOptions { refine, state_bound: None }).unwrap().states[(0, 4)]
        };
        let fine = run(512);
        let e1 = (run(2) - fine).abs();
        let e2 = (run(4) - fine).abs();
        let ratio = e1 / e2;
        assert!((ratio - 16.0).abs() < 0.2 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn blow_up_is_reported_as_stiffness() {
        let bad = FomModel::assemble(
            ModelKind::Custom,
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 1),
            None,
            Some(-1.0),
            DMatrix::zeros(1, 1),
            vec![0.0],
            0.0,
        )
        .unwrap();
        // dy/dt = y^2 escapes to infinity at t = 1 for y0 = 1
        let r = integrate_reference(&bad, &DVector::from_element(1, 1.0), &ParameterSignal::constant(vec![0.0, 0.0]), 2.0, 4);
        assert!(matches!(r, Err(Error::Stiffness { .. })), "{r:?}");
    }
}
