//! Parameter-space sampling for snapshot generation.
//!
//! Static sampling (SPS) draws constant parameter vectors. Dynamic sampling
//! (DPS) takes the same draw and turns every load-type component into a
//! rectified sinusoid `(mu_i - mu_min) |sin(omega t)| + mu_min`, which starts
//! at the lower bound and peaks at the drawn value.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a parameter enters the model as an initial condition or as a
/// time-dependent input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    InitialCondition,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    names: Vec<String>,
    bounds: Vec<(f64, f64)>,
    roles: Vec<ParamRole>,
}

impl ParameterSpace {
    pub fn new(names: Vec<String>, bounds: Vec<(f64, f64)>, roles: Vec<ParamRole>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Config("parameter space needs at least one parameter".into()));
        }
        if names.len() != bounds.len() || roles.len() != bounds.len() {
            return Err(Error::Config(format!(
                "parameter space has {} names, {} bounds and {} roles",
                names.len(),
                bounds.len(),
                roles.len()
            )));
        }
        for (name, &(lo, hi)) in names.iter().zip(&bounds) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("parameter {name}: need min < max, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { names, bounds, roles })
    }

    /// The two-parameter layout shared by every shipped model: uniform initial
    /// temperature (degrees Celsius) followed by the load magnitude.
    pub fn temperature_and_load(t0_c: (f64, f64), load: (f64, f64)) -> Result<Self> {
        Self::new(
            vec!["t0_c".into(), "load".into()],
            vec![t0_c, load],
            vec![ParamRole::InitialCondition, ParamRole::Load],
        )
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn minima(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| b.0).collect()
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        mu.len() == self.dim() && mu.iter().zip(&self.bounds).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    fn scale_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.bounds)
            .map(|(u, (lo, hi))| lo + u * (hi - lo))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Halton,
    Lhs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Sps,
    Dps,
}

impl SamplingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingKind::Sps => "sps",
            SamplingKind::Dps => "dps",
        }
    }
}

/// `sum_i c_i ((t - shift) / scale)^i`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Polynomial {
    pub fn constant(v: f64) -> Self {
        Self {
            coeffs: vec![v],
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let x = (t - self.shift) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// A time-dependent parameter configuration `mu(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParameterSignal {
    Constant {
        value: Vec<f64>,
    },
    /// Components flagged in `modulated` follow
    /// `(base - floor) |sin(omega t)| + floor`; the rest stay at `base`.
    RectifiedSine {
        base: Vec<f64>,
        floor: Vec<f64>,
        omega: f64,
        modulated: Vec<bool>,
    },
    /// One polynomial per component; used for the prescribed test loads.
    Polynomial {
        components: Vec<Polynomial>,
    },
}

impl ParameterSignal {
    pub fn constant(value: Vec<f64>) -> Self {
        ParameterSignal::Constant { value }
    }

    /// Rectified sine with every component modulated.
    pub fn rectified_sine(base: Vec<f64>, floor: Vec<f64>, omega: f64) -> Self {
        let modulated = vec![true; base.len()];
        ParameterSignal::RectifiedSine {
            base,
            floor,
            omega,
            modulated,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ParameterSignal::Constant { value } => value.len(),
            ParameterSignal::RectifiedSine { base, .. } => base.len(),
            ParameterSignal::Polynomial { components } => components.len(),
        }
    }

    /// The parameter vector `mu(t)`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0) {
            return Err(Error::Domain(t));
        }
        Ok(match self {
            ParameterSignal::Constant { value } => value.clone(),
            ParameterSignal::RectifiedSine {
                base,
                floor,
                omega,
                modulated,
            } => {
                let s = (omega * t).sin().abs();
                base.iter()
                    .zip(floor)
                    .zip(modulated)
                    .map(|((b, f), &m)| if m { (b - f) * s + f } else { *b })
                    .collect()
            }
            ParameterSignal::Polynomial { components } => components.iter().map(|p| p.eval(t)).collect(),
        })
    }

    /// The sampled base point (constant value or sinusoid amplitude target).
    pub fn base_point(&self) -> Option<&[f64]> {
        match self {
            ParameterSignal::Constant { value } => Some(value),
            ParameterSignal::RectifiedSine { base, .. } => Some(base),
            ParameterSignal::Polynomial { .. } => None,
        }
    }
}

/// Radical inverse of `index` in the given base.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

/// First `n` primes.
pub fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Unscrambled Halton points in the unit cube, indices 1..=n.
pub fn halton_unit(n: usize, dim: usize) -> Vec<Vec<f64>> {
    let bases = first_primes(dim);
    (1..=n as u64)
        .map(|i| bases.iter().map(|&b| radical_inverse(i, b)).collect())
        .collect()
}

/// Latin hypercube points in the unit cube: one stratum per sample and
/// dimension, a random permutation per dimension and a uniform jitter inside
/// each stratum. ChaCha8 seeded from `seed` drives both.
pub fn lhs_unit(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; dim]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for d in 0..dim {
        perm.shuffle(&mut rng);
        for (i, point) in points.iter_mut().enumerate() {
            let u: f64 = rng.random();
            point[d] = (perm[i] as f64 + u) / n as f64;
        }
    }
    points
}

fn sample_points(space: &ParameterSpace, n_s: usize, method: SamplingMethod, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_s == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let unit = match method {
        SamplingMethod::Halton => halton_unit(n_s, space.dim()),
        SamplingMethod::Lhs => lhs_unit(n_s, space.dim(), seed),
    };
    Ok(unit.iter().map(|u| space.scale_unit(u)).collect())
}

/// Static-parameter sampling: `n_s` constant signals.
pub fn sample_sps(
    space: &ParameterSpace,
    n_s: usize,
    method: SamplingMethod,
    seed: u64,
) -> Result<Vec<ParameterSignal>> {
    Ok(sample_points(space, n_s, method, seed)?
        .into_iter()
        .map(ParameterSignal::constant)
        .collect())
}

/// Dynamic-parameter sampling: the SPS draw, with every load-type component
/// turned into a rectified sinusoid floored at the space minimum.
/// Initial-condition components keep their drawn value.
pub fn sample_dps(
    space: &ParameterSpace,
    n_s: usize,
    method: SamplingMethod,
    seed: u64,
    omega: f64,
) -> Result<Vec<ParameterSignal>> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::Config(format!("omega must be positive, got {omega}")));
    }
    let floor = space.minima();
    let modulated: Vec<bool> = space.roles().iter().map(|r| *r == ParamRole::Load).collect();
    Ok(sample_points(space, n_s, method, seed)?
        .into_iter()
        .map(|base| ParameterSignal::RectifiedSine {
            base,
            floor: floor.clone(),
            omega,
            modulated: modulated.clone(),
        })
        .collect())
}

/// Dispatch on the sampling kind.
pub fn sample(
    kind: SamplingKind,
    space: &ParameterSpace,
    n_s: usize,
    method: SamplingMethod,
    seed: u64,
    omega: f64,
) -> Result<Vec<ParameterSignal>> {
    match kind {
        SamplingKind::Sps => sample_sps(space, n_s, method, seed),
        SamplingKind::Dps => sample_dps(space, n_s, method, seed, omega),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit_square() -> ParameterSpace {
        ParameterSpace::new(
            vec!["a".into(), "b".into()],
            vec![(0.0, 1.0), (0.0, 1.0)],
            vec![ParamRole::Load, ParamRole::Load],
        )
        .unwrap()
    }

    #[test]
    fn halton_first_points_match_hand_computation() {
        // base 2: 1/2, 1/4, 3/4 ; base 3: 1/3, 2/3, 1/9
        let pts = halton_unit(3, 2);
        let expected = [[0.5, 1.0 / 3.0], [0.25, 2.0 / 3.0], [0.75, 1.0 / 9.0]];
        for (p, e) in pts.iter().zip(expected) {
            assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15, "{p:?} vs {e:?}");
        }
    }

    #[test]
    fn single_sample_is_strictly_inside() {
        for method in [SamplingMethod::Halton, SamplingMethod::Lhs] {
            let s = sample_sps(&unit_square(), 1, method, 3).unwrap();
            assert_eq!(s.len(), 1);
            let v = s[0].eval(0.0).unwrap();
            assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0), "{v:?}");
        }
    }

    #[test]
    fn lhs_has_one_sample_per_stratum() {
        let space = ParameterSpace::new(vec!["x".into()], vec![(0.0, 10.0)], vec![ParamRole::Load]).unwrap();
        let s = sample_sps(&space, 10, SamplingMethod::Lhs, 42).unwrap();
        let mut hits = [0usize; 10];
        for sig in &s {
            let x = sig.eval(0.0).unwrap()[0];
            hits[x.floor() as usize] += 1;
        }
        assert_eq!(hits, [1; 10]);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample_sps(&unit_square(), 0, SamplingMethod::Halton, 0).is_err());
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(ParameterSpace::new(vec!["x".into()], vec![(1.0, 1.0)], vec![ParamRole::Load]).is_err());
        assert!(ParameterSpace::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn dps_starts_at_floor() {
        let space = ParameterSpace::temperature_and_load((20.0, 50.0), (0.05, 0.15)).unwrap();
        let sigs = sample_dps(&space, 8, SamplingMethod::Halton, 0, PI / 500.0).unwrap();
        for s in &sigs {
            let v = s.eval(0.0).unwrap();
            // load floor exactly, initial temperature held at its draw
            assert_eq!(v[1], 0.05);
            assert_eq!(v[0], s.base_point().unwrap()[0]);
        }
    }

    #[test]
    fn rectified_sine_peak_and_zero() {
        let s = ParameterSignal::rectified_sine(vec![50.0, 20.0], vec![0.0, 0.0], 0.1);
        let peak = s.eval(PI / 2.0 / 0.1).unwrap();
        assert!((peak[0] - 50.0).abs() < 1e-12 && (peak[1] - 20.0).abs() < 1e-12);
        let zero = s.eval(PI / 0.1).unwrap();
        assert!(zero[0].abs() < 1e-12 && zero[1].abs() < 1e-12);
    }

    #[test]
    fn rectified_sine_scalar_oracle() {
        let s = ParameterSignal::rectified_sine(vec![50.0, 20.0], vec![0.0, 0.0], 0.1);
        let v = s.eval(5.0).unwrap();
        // 50 |sin 0.5| = 23.97127693021015, 20 |sin 0.5| = 9.588510772084060
        assert!((v[0] - 23.971_276_930_210_15).abs() < 1e-12);
        assert!((v[1] - 9.588_510_772_084_06).abs() < 1e-12);
    }

    #[test]
    fn constant_signal_everywhere() {
        let s = ParameterSignal::constant(vec![1.0, 2.0]);
        for t in [0.0, 1.0, 1e6] {
            assert_eq!(s.eval(t).unwrap(), vec![1.0, 2.0]);
        }
    }

    #[test]
    fn negative_time_is_domain_error() {
        let s = ParameterSignal::constant(vec![1.0]);
        assert!(matches!(s.eval(-1.0), Err(Error::Domain(_))));
        assert!(matches!(s.eval(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn polynomial_test_loads() {
        let ramp = Polynomial {
            coeffs: vec![0.15, -0.1],
            shift: 0.0,
            scale: 500.0,
        };
        assert!((ramp.eval(250.0) - 0.1).abs() < 1e-15);
        let dip = Polynomial {
            coeffs: vec![60.0, 0.0, -20.0],
            shift: 1800.0,
            scale: 1800.0,
        };
        assert_eq!(dip.eval(1800.0), 60.0);
        assert_eq!(dip.eval(0.0), 40.0);
        assert_eq!(dip.eval(3600.0), 40.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let space = ParameterSpace::temperature_and_load((20.0, 50.0), (0.05, 0.15)).unwrap();
        for method in [SamplingMethod::Halton, SamplingMethod::Lhs] {
            let a = sample_dps(&space, 30, method, 11, 0.3).unwrap();
            let b = sample_dps(&space, 30, method, 11, 0.3).unwrap();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn dps_is_post_transformation_of_sps(seed in 0u64..1000, n in 1usize..40, lhs in any::<bool>()) {
            let method = if lhs { SamplingMethod::Lhs } else { SamplingMethod::Halton };
            let space = ParameterSpace::temperature_and_load((20.0, 300.0), (40.0, 60.0)).unwrap();
            let sps = sample_sps(&space, n, method, seed).unwrap();
            let dps = sample_dps(&space, n, method, seed, 0.01).unwrap();
            for (a, b) in sps.iter().zip(&dps) {
                prop_assert_eq!(a.base_point().unwrap(), b.base_point().unwrap());
            }
        }

        #[test]
        fn values_stay_in_box(seed in 0u64..500, omega in 1e-3f64..10.0, t in 0.0f64..5000.0) {
            let space = ParameterSpace::temperature_and_load((20.0, 50.0), (0.05, 0.15)).unwrap();
            for kind in [SamplingKind::Sps, SamplingKind::Dps] {
                for s in sample(kind, &space, 12, SamplingMethod::Lhs, seed, omega).unwrap() {
                    let v = s.eval(t).unwrap();
                    prop_assert!(space.contains(&v), "{:?} outside box", v);
                }
            }
        }

        #[test]
        fn rectified_sine_is_periodic(omega in 0.01f64..2.0, t in 0.0f64..100.0) {
            let s = ParameterSignal::rectified_sine(vec![3.0, 7.0], vec![1.0, 2.0], omega);
            let a = s.eval(t).unwrap();
            let b = s.eval(t + std::f64::consts::PI / omega).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
