use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature affine map `x -> (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Self {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::Shape("affine shift and scale differ in length".into()));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s != 0.0)) {
            return Err(Error::NumericInput(format!("normalizer scale must be finite and nonzero, got {s}")));
        }
        if shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("normalizer shift must be finite".into()));
        }
        Ok(Self { shift, scale })
    }

    /// Mean and population standard deviation of each feature. Samples are
    /// given as an iterator of feature vectors. Constant features get scale 1.
    pub fn standardize<'a, I>(n: usize, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        let mut count = 0usize;
        let mut sum = vec![0.0; n];
        for s in samples.clone() {
            if s.len() != n {
                return Err(Error::Shape(format!("sample has {} features, expected {n}", s.len())));
            }
            for (acc, v) in sum.iter_mut().zip(s) {
                *acc += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Usage("cannot fit a normalizer to an empty set".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; n];
        for s in samples {
            for ((acc, v), m) in sq.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / count as f64).sqrt();
                if sd > 1e-12 * m.abs().max(1e-300) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(mean, scale)
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    #[inline]
    pub fn norm(&self, i: usize, x: f64) -> f64 {
        (x - self.shift[i]) / self.scale[i]
    }

    #[inline]
    pub fn denorm(&self, i: usize, z: f64) -> f64 {
        z * self.scale[i] + self.shift[i]
    }
}

/// Feature statistics stored alongside a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state: Affine,
    pub params: Affine,
    /// Only present for networks that take the step size as an input.
    pub tau: Option<Affine>,
    /// Per-feature output scale of the right-hand-side network: core output
    /// `o` maps to `rhs_scale * o` in reduced units per second.
    pub rhs_scale: Option<Vec<f64>>,
}

impl Normalizer {
    pub fn identity(n_r: usize, n_mu: usize) -> Self {
        Self {
            state: Affine::identity(n_r),
            params: Affine::identity(n_mu),
            tau: None,
            rhs_scale: None,
        }
    }

    pub fn n_state(&self) -> usize {
        self.state.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn rhs_scale_at(&self, i: usize) -> f64 {
        self.rhs_scale.as_ref().map_or(1.0, |s| s[i])
    }
}
