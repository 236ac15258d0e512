//! Small dense/sparse helpers shared by the model, POD and surrogate code.

use nalgebra::{DMatrix, DVector};

/// Compressed-row storage for the assembled operators.
///
/// Each row keeps its diagonal entry apart from the off-diagonal entries so
/// [`Csr::row_dot`] can sum the off-diagonal terms first. For rows with two
/// neighbours that pair sum is commutative, which makes mirrored chains
/// produce bit-identical results.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let (n_rows, n_cols) = m.shape();
        let mut diag = vec![0.0; n_rows];
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n_rows {
            for j in 0..n_cols {
                let v = m[(i, j)];
                if i == j {
                    diag[i] = v;
                } else if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_rows,
            n_cols,
            diag,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// `sum_j A_ij x_j`, off-diagonal terms first, then the diagonal.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let mut off = 0.0;
        for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
            off += self.vals[idx] * x[self.cols[idx]];
        }
        let d = if i < self.n_cols { self.diag[i] * x[i] } else { 0.0 };
        off + d
    }

    /// Off-diagonal absolute row sum.
    pub fn off_diag_abs_row_sum(&self, i: usize) -> f64 {
        self.vals[self.row_ptr[i]..self.row_ptr[i + 1]]
            .iter()
            .map(|v| v.abs())
            .sum()
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn abs_row_sum(&self, i: usize) -> f64 {
        self.diag[i].abs() + self.off_diag_abs_row_sum(i)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum::<f64>() + self.diag[i]
    }
}

/// Eigen-decomposition of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues sorted in descending order.
    pub values: DVector<f64>,
    /// Matching unit eigenvectors stored as columns.
    pub vectors: DMatrix<f64>,
    pub sweeps: usize,
}

/// Relative off-diagonal tolerance at which the Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
///
/// Sweeps over all (p, q) pairs in row-cyclic order until the off-diagonal
/// Frobenius norm drops below `JACOBI_TOL * ||A||_F`.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> SymmetricEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigen needs a square matrix");
    let mut m = a.clone();
    // symmetrize so round-off in the Gram assembly cannot bias the rotations
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = m.norm();
    let mut sweeps = 0;

    if total > 0.0 {
        while sweeps < JACOBI_MAX_SWEEPS {
            let off = off_diagonal_norm(&m);
            if off <= JACOBI_TOL * total {
                break;
            }
            sweeps += 1;
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = m[(p, p)];
                    let aqq = m[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;

                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    SymmetricEigen {
        values,
        vectors,
        sweeps,
    }
}

fn off_diagonal_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Flip each column so that its largest-magnitude entry is positive.
/// Ties on magnitude resolve to the lowest row index.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonal_matrix_is_fixed_point() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 3.0]));
        let e = jacobi_eigen(&a);
        assert_eq!(e.values.as_slice(), &[5.0, 3.0, 1.0]);
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn jacobi_reconstructs_symmetric_matrix() {
        let b = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let a = &b * b.transpose();
        let e = jacobi_eigen(&a);
        let rec = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert!((rec - &a).norm() < 1e-10 * a.norm());
        let vtv = e.vectors.transpose() * &e.vectors;
        assert!((vtv - DMatrix::identity(6, 6)).norm() < 1e-12);
        for w in e.values.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn csr_matches_dense_product() {
        let m = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 1.0, -2.0, 1.0, 0.0, 1.0, -1.0]);
        let csr = Csr::from_dense(&m);
        let x = [1.0, 2.0, 4.0];
        let dense = &m * DVector::from_column_slice(&x);
        for i in 0..3 {
            assert_eq!(csr.row_dot(i, &x), dense[i]);
        }
        assert_eq!(csr.row_sum(2), 0.0);
        assert_eq!(csr.abs_row_sum(1), 4.0);
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let mut m = DMatrix::from_row_slice(3, 2, &[0.1, 0.5, -0.9, -0.2, 0.3, -0.7]);
        fix_column_signs(&mut m);
        assert_eq!(m[(1, 0)], 0.9);
        assert_eq!(m[(2, 1)], 0.7);
    }
}
