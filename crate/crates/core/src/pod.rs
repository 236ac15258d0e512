//! Snapshot matrices and proper orthogonal decomposition.
//!
//! The basis is computed with the method of snapshots: the smaller of the two
//! Gram matrices `Y^T Y` / `Y Y^T` is diagonalised by cyclic Jacobi and the
//! left singular vectors are recovered from its eigenvectors. Singular values
//! are taken as the norm of the data along each recovered direction rather
//! than the square root of the Gram eigenvalue; this keeps the tail of the
//! spectrum consistent with the actual truncation residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fom::Trajectory;
use crate::linalg::{fix_column_signs, jacobi_eigen};
use crate::metrics::{relative_error, ErrorMetric};
use crate::sampling::{ParameterSignal, SamplingKind};

/// Singular values at or below `RANK_RTOL * sigma_1` count as numerically zero.
/// Squaring in the Gram matrix limits the resolvable range to about
/// `sqrt(eps)` relative to the leading value.
pub const RANK_RTOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct SnapshotSet {
    trajectories: Vec<Trajectory>,
    signals: Vec<ParameterSignal>,
    kind: SamplingKind,
}

impl SnapshotSet {
    pub fn new(trajectories: Vec<Trajectory>, signals: Vec<ParameterSignal>, kind: SamplingKind) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Shape("snapshot set is empty".into()))?;
        if signals.len() != trajectories.len() {
            return Err(Error::Shape(format!(
                "{} trajectories but {} signals",
                trajectories.len(),
                signals.len()
            )));
        }
        let (n, cols) = first.states.shape();
        for (i, t) in trajectories.iter().enumerate() {
            if t.states.shape() != (n, cols) || t.times != first.times {
                return Err(Error::Shape(format!(
                    "trajectory {i} is {:?} on a different grid than trajectory 0 ({n}, {cols})",
                    t.states.shape()
                )));
            }
        }
        Ok(Self {
            trajectories,
            signals,
            kind,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn signals(&self) -> &[ParameterSignal] {
        &self.signals
    }

    pub fn kind(&self) -> SamplingKind {
        self.kind
    }

    pub fn n_snapshots(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_state(&self) -> usize {
        self.trajectories[0].n_state()
    }

    pub fn steps(&self) -> usize {
        self.trajectories[0].steps()
    }

    pub fn tau(&self) -> f64 {
        self.trajectories[0].tau()
    }

    pub fn times(&self) -> &[f64] {
        &self.trajectories[0].times
    }

    /// `Y = [y_1(t_0..t_k), ..., y_Ns(t_0..t_k)]`, N x (N_s (k+1)).
    pub fn assemble(&self) -> DMatrix<f64> {
        let n = self.n_state();
        let per = self.steps() + 1;
        let mut y = DMatrix::zeros(n, per * self.n_snapshots());
        for (i, t) in self.trajectories.iter().enumerate() {
            y.columns_mut(i * per, per).copy_from(&t.states);
        }
        y
    }
}

/// Free-function form of [`SnapshotSet::assemble`].
pub fn assemble_snapshot_matrix(set: &SnapshotSet) -> DMatrix<f64> {
    set.assemble()
}

/// SHA-256 over `(rows, cols)` as u64 LE followed by the column-major entries
/// as f64 LE.
pub fn matrix_digest(m: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PodOptions {
    /// Subtract the mean snapshot before the decomposition.
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    /// N x n_r, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Full spectrum, descending.
    pub singular_values: DVector<f64>,
    pub n_r: usize,
    /// Dimension asked for; differs from `n_r` when it exceeded `rank`.
    pub requested_n_r: usize,
    /// Numerical rank of the snapshot matrix.
    pub rank: usize,
    /// Mean snapshot, present for the centred variant.
    pub mean: Option<DVector<f64>>,
    pub source_hash: String,
}

impl ReducedBasis {
    pub fn n_state(&self) -> usize {
        self.basis.nrows()
    }

    pub fn was_clamped(&self) -> bool {
        self.n_r < self.requested_n_r
    }

    /// Leading `n_r` modes of this basis (clamped to what it holds).
    pub fn truncate(&self, n_r: usize) -> ReducedBasis {
        let keep = n_r.min(self.n_r);
        ReducedBasis {
            basis: self.basis.columns(0, keep).into_owned(),
            singular_values: self.singular_values.clone(),
            n_r: keep,
            requested_n_r: n_r,
            rank: self.rank,
            mean: self.mean.clone(),
            source_hash: self.source_hash.clone(),
        }
    }

    /// `V^T (y - mean)`
    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.n_state() {
            return Err(Error::Shape(format!("state has length {}, basis has N = {}", y.len(), self.n_state())));
        }
        Ok(match &self.mean {
            Some(m) => self.basis.tr_mul(&(y - m)),
            None => self.basis.tr_mul(y),
        })
    }

    /// `V y_r + mean`
    pub fn lift(&self, y_r: &DVector<f64>) -> Result<DVector<f64>> {
        if y_r.len() != self.n_r {
            return Err(Error::Shape(format!("reduced state has length {}, basis has n_r = {}", y_r.len(), self.n_r)));
        }
        let mut y = &self.basis * y_r;
        if let Some(m) = &self.mean {
            y += m;
        }
        Ok(y)
    }

    /// Column-wise projection of a matrix of states.
    pub fn project_matrix(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.n_state() {
            return Err(Error::Shape(format!("states have {} rows, basis has N = {}", y.nrows(), self.n_state())));
        }
        Ok(match &self.mean {
            Some(m) => {
                let mut c = y.clone();
                for mut col in c.column_iter_mut() {
                    col -= m;
                }
                self.basis.tr_mul(&c)
            }
            None => self.basis.tr_mul(y),
        })
    }

    pub fn lift_matrix(&self, y_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y_r.nrows() != self.n_r {
            return Err(Error::Shape(format!(
                "reduced states have {} rows, basis has n_r = {}",
                y_r.nrows(),
                self.n_r
            )));
        }
        let mut y = &self.basis * y_r;
        if let Some(m) = &self.mean {
            for mut col in y.column_iter_mut() {
                col += m;
            }
        }
        Ok(y)
    }
}

pub fn compute_pod(y: &DMatrix<f64>, n_r: usize) -> Result<ReducedBasis> {
    compute_pod_with(y, n_r, PodOptions::default())
}

pub fn compute_pod_with(y: &DMatrix<f64>, n_r: usize, opts: PodOptions) -> Result<ReducedBasis> {
    let (n, cols) = y.shape();
    if n == 0 || cols == 0 {
        return Err(Error::Shape("empty snapshot matrix".into()));
    }
    if n_r == 0 || n_r > n.min(cols) {
        return Err(Error::Usage(format!("n_r = {n_r} must lie in 1..={}", n.min(cols))));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("snapshot matrix has non-finite entries".into()));
    }
    let source_hash = matrix_digest(y);

    let (data, mean) = if opts.center {
        let m = y.column_mean();
        let mut c = y.clone();
        for mut col in c.column_iter_mut() {
            col -= &m;
        }
        (c, Some(m))
    } else {
        (y.clone(), None)
    };

    // (sigma, direction) pairs; directions are left singular vectors for the
    // Y Y^T route and right singular vectors for the Y^T Y route.
    let (sigmas, dirs, left) = if cols <= n {
        let gram = data.tr_mul(&data);
        let eig = jacobi_eigen(&gram);
        let yw = &data * &eig.vectors;
        let s: Vec<f64> = yw.column_iter().map(|c| c.norm()).collect();
        (s, yw, false)
    } else {
        let gram = &data * data.transpose();
        let eig = jacobi_eigen(&gram);
        let s: Vec<f64> = data.tr_mul(&eig.vectors).column_iter().map(|c| c.norm()).collect();
        (s, eig.vectors, true)
    };

    let mut order: Vec<usize> = (0..sigmas.len()).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]).then(a.cmp(&b)));
    let singular_values = DVector::from_iterator(sigmas.len(), order.iter().map(|&i| sigmas[i]));

    let sigma_max = singular_values[0];
    let rank = if sigma_max == 0.0 {
        0
    } else {
        singular_values.iter().filter(|s| **s > RANK_RTOL * sigma_max).count()
    };
    if rank == 0 {
        return Err(Error::ZeroReference("snapshot matrix is numerically zero".into()));
    }
    let keep = n_r.min(rank);

    let mut basis = DMatrix::zeros(n, keep);
    for (c, &idx) in order.iter().take(keep).enumerate() {
        if left {
            basis.set_column(c, &dirs.column(idx));
        } else {
            basis.set_column(c, &(dirs.column(idx) / sigmas[idx]));
        }
    }
    if !left {
        reorthonormalize(&mut basis);
    }
    fix_column_signs(&mut basis);

    Ok(ReducedBasis {
        basis,
        singular_values,
        n_r: keep,
        requested_n_r: n_r,
        rank,
        mean,
        source_hash,
    })
}

/// Two passes of modified Gram-Schmidt.
fn reorthonormalize(v: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..v.ncols() {
            for i in 0..j {
                let d = v.column(i).dot(&v.column(j));
                let ci = v.column(i).into_owned();
                v.column_mut(j).axpy(-d, &ci, 1.0);
            }
            let nrm = v.column(j).norm();
            v.column_mut(j).unscale_mut(nrm);
        }
    }
}

/// `(1 / (n_s k)) ||Y_ref - V V^T Y_ref||_F / ||Y_ref||_F`, together with the
/// unscaled ratio.
pub fn reprojection_error(basis: &ReducedBasis, y_ref: &DMatrix<f64>, n_s: usize, k: usize) -> Result<ErrorMetric> {
    let reproj = basis.lift_matrix(&basis.project_matrix(y_ref)?)?;
    relative_error(y_ref, &reproj, n_s, k)
}

/// Snapshot set projected onto a basis: one N_r x (k+1) block per trajectory.
pub fn project_set(basis: &ReducedBasis, set: &SnapshotSet) -> Result<Vec<DMatrix<f64>>> {
    set.trajectories()
        .iter()
        .map(|t| basis.project_matrix(&t.states))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn traj(states: DMatrix<f64>) -> Trajectory {
        let k = states.ncols() - 1;
        Trajectory {
            times: crate::fom::time_grid(k as f64, k),
            states,
            signal_id: 0,
        }
    }

    #[test]
    fn single_short_trajectory_assembles_to_its_states() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let set = SnapshotSet::new(vec![traj(s.clone())], vec![ParameterSignal::constant(vec![0.0])], SamplingKind::Sps).unwrap();
        assert_eq!(set.assemble(), s);
    }

    #[test]
    fn snapshot_matrix_shape_and_initial_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trajs: Vec<_> = (0..3).map(|_| traj(random_matrix(&mut rng, 50, 101))).collect();
        let sigs = vec![ParameterSignal::constant(vec![0.0]); 3];
        let set = SnapshotSet::new(trajs.clone(), sigs, SamplingKind::Dps).unwrap();
        let y = assemble_snapshot_matrix(&set);
        assert_eq!(y.shape(), (50, 303));
        for (i, t) in trajs.iter().enumerate() {
            assert_eq!(y.column(i * 101), t.states.column(0));
        }
    }

    #[test]
    fn heterogeneous_snapshots_rejected() {
        let a = traj(DMatrix::zeros(3, 5));
        let b = traj(DMatrix::zeros(4, 5));
        let sigs = vec![ParameterSignal::constant(vec![0.0]); 2];
        assert!(matches!(SnapshotSet::new(vec![a, b], sigs, SamplingKind::Sps), Err(Error::Shape(_))));
        assert!(SnapshotSet::new(vec![], vec![], SamplingKind::Sps).is_err());
    }

    #[test]
    fn rank_one_matrix() {
        let a = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        let b = DVector::from_vec(vec![0.5, 1.0, 3.0, -1.0]);
        let y = &a * b.transpose();
        let pod = compute_pod(&y, 1).unwrap();
        assert_eq!(pod.rank, 1);
        assert!((pod.singular_values[0] - a.norm() * b.norm()).abs() < 1e-12);
        assert!(pod.singular_values.iter().skip(1).all(|s| *s < 1e-7));
        let dir = &a / a.norm();
        let dot = pod.basis.column(0).dot(&dir);
        assert!((dot.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_columns_give_their_norms() {
        let y = DMatrix::from_row_slice(3, 2, &[3.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let pod = compute_pod(&y, 2).unwrap();
        assert!((pod.singular_values[0] - 3.0).abs() < 1e-14);
        assert!((pod.singular_values[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn n_r_above_rank_is_clamped() {
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let y = &a * DVector::from_vec(vec![1.0, 1.0, 2.0, 5.0, 1.0]).transpose();
        let pod = compute_pod(&y, 3).unwrap();
        assert_eq!(pod.n_r, 1);
        assert_eq!(pod.requested_n_r, 3);
        assert!(pod.was_clamped());
    }

    #[test]
    fn invalid_n_r_rejected() {
        let y = DMatrix::from_element(3, 4, 1.0);
        assert!(compute_pod(&y, 0).is_err());
        assert!(compute_pod(&y, 4).is_err());
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_matrix(&mut rng, 12, 30);
        let pod = compute_pod(&y, 6).unwrap();
        for col in pod.basis.column_iter() {
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn both_gram_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_matrix(&mut rng, 9, 9);
        // square goes through Y^T Y; the transpose trick through Y Y^T
        let wide = DMatrix::from_fn(9, 10, |i, j| if j < 9 { y[(i, j)] } else { 0.0 });
        let a = compute_pod(&y, 9).unwrap();
        let b = compute_pod(&wide, 9).unwrap();
        for i in 0..9 {
            assert!((a.singular_values[i] - b.singular_values[i]).abs() < 1e-10);
        }
        assert!((&a.basis - &b.basis).amax() < 1e-8);
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(20, 60), (40, 12), (7, 7)] {
            let y = random_matrix(&mut rng, r, c);
            let pod = compute_pod(&y, r.min(c)).unwrap();
            let g = pod.basis.tr_mul(&pod.basis);
            assert!((g - DMatrix::identity(pod.n_r, pod.n_r)).amax() < 1e-10);
        }
    }

    #[test]
    fn projector_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_matrix(&mut rng, 10, 25);
        let pod = compute_pod(&y, 4).unwrap();
        let inside = &pod.basis * DVector::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
        let back = pod.lift(&pod.project(&inside).unwrap()).unwrap();
        assert!((back - &inside).amax() < 1e-10);

        let mut outside = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        outside -= &pod.basis * pod.basis.tr_mul(&outside);
        assert!(pod.project(&outside).unwrap().amax() < 1e-12);
    }

    #[test]
    fn orthogonal_projection_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pod = compute_pod(&random_matrix(&mut rng, 12, 30), 5).unwrap();
        let y = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let best = (&y - pod.lift(&pod.project(&y).unwrap()).unwrap()).norm();
        for _ in 0..100 {
            let z = &pod.basis * DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            assert!(best <= (&y - z).norm() + 1e-14);
        }
    }

    #[test]
    fn projection_shape_errors() {
        let pod = compute_pod(&DMatrix::identity(4, 4), 2).unwrap();
        assert!(matches!(pod.project(&DVector::zeros(3)), Err(Error::Shape(_))));
        assert!(matches!(pod.lift(&DVector::zeros(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn reprojection_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let low = random_matrix(&mut rng, 15, 3) * random_matrix(&mut rng, 3, 40);
        let pod = compute_pod(&low, 3).unwrap();
        let e = reprojection_error(&pod, &low, 1, 40).unwrap();
        assert!(e.relative < 1e-10);

        let inside = &pod.basis * random_matrix(&mut rng, 3, 7);
        assert!(reprojection_error(&pod, &inside, 1, 7).unwrap().relative < 1e-12);

        let mut orth = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        orth -= &pod.basis * pod.basis.tr_mul(&orth);
        let single = DMatrix::from_column_slice(15, 1, orth.as_slice());
        let e = reprojection_error(&pod, &single, 1, 1).unwrap();
        assert!((e.scaled - 1.0).abs() < 1e-12);

        assert!(matches!(
            reprojection_error(&pod, &DMatrix::zeros(15, 2), 1, 1),
            Err(Error::ZeroReference(_))
        ));
    }

    #[test]
    fn eckart_young_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = random_matrix(&mut rng, 20, 60);
        let full = compute_pod(&y, 20).unwrap();
        let total = frobenius(&y);
        let mut prev = f64::INFINITY;
        for n_r in 1..=20 {
            let b = full.truncate(n_r);
            let e = reprojection_error(&b, &y, 1, 1).unwrap().relative;
            let tail: f64 = full.singular_values.iter().skip(n_r).map(|s| s * s).sum::<f64>().sqrt() / total;
            assert!((e - tail).abs() < 1e-9, "n_r {n_r}: {e} vs {tail}");
            assert!(e <= prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn centred_variant_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let y = random_matrix(&mut rng, 8, 20).add_scalar(300.0);
        let pod = compute_pod_with(&y, 3, PodOptions { center: true }).unwrap();
        assert!(pod.mean.is_some());
        let col = y.column(4).into_owned();
        let back = pod.lift(&pod.project(&col).unwrap()).unwrap();
        // lift(project(.)) fixes the mean exactly
        let m = pod.mean.as_ref().unwrap();
        assert!((pod.lift(&pod.project(m).unwrap()).unwrap() - m).amax() < 1e-10);
        assert!((back - col).norm() < 10.0);
    }

    #[test]
    fn digest_depends_on_contents_and_shape() {
        let a = DMatrix::from_element(2, 3, 1.0);
        let b = DMatrix::from_element(3, 2, 1.0);
        assert_ne!(matrix_digest(&a), matrix_digest(&b));
        assert_eq!(matrix_digest(&a), matrix_digest(&a.clone()));
    }
}
