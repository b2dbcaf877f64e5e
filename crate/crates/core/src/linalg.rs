//! Small dense linear-algebra helpers shared by the fitting code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative gap below which two adjacent eigenvalues count as tied.
pub const NEAR_TIE_REL: f64 = 1e-10;

/// Flips each column so that its largest-magnitude entry is positive.
///
/// Entries within a relative 1e-9 of the column maximum count as tied; the
/// lowest index among them decides the sign.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let max = col.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max == 0.0 {
            continue;
        }
        let pivot = col
            .iter()
            .position(|v| v.abs() >= max * (1.0 - 1e-9))
            .unwrap_or(0);
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue, with
/// sign-fixed eigenvectors.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SortedEigen {
    pub fn new(sym: &DMatrix<f64>) -> Self {
        let s = (sym + sym.transpose()) * 0.5;
        let eig = SymmetricEigen::new(s);
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        // Stable sort keeps the solver's order for exact ties.
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
        let mut vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        fix_column_signs(&mut vectors);
        Self { values, vectors }
    }

    /// The leading `k` eigenvectors.
    pub fn top(&self, k: usize) -> DMatrix<f64> {
        self.vectors.columns(0, k).into_owned()
    }

    /// The trailing `k` eigenvectors, smallest eigenvalue last.
    pub fn bottom(&self, k: usize) -> DMatrix<f64> {
        let n = self.vectors.ncols();
        self.vectors.columns(n - k, k).into_owned()
    }

    /// True when the k-th and (k+1)-th eigenvalues are indistinguishable,
    /// which makes the leading k-dimensional subspace ambiguous.
    pub fn near_tie_at(&self, k: usize) -> bool {
        if k == 0 || k >= self.values.len() {
            return false;
        }
        let (x, y) = (self.values[k - 1], self.values[k]);
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (x - y).abs() <= NEAR_TIE_REL * scale.max(f64::MIN_POSITIVE)
    }
}

/// Applies a scalar function to the spectrum of a symmetric matrix.
pub fn symmetric_function(sym: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((sym + sym.transpose()) * 0.5);
    let mut scaled = eig.eigenvectors.clone();
    for (mut col, &lam) in scaled.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col *= f(lam);
    }
    let out = &scaled * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// `||M^T M - I||_F`.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let g = m.tr_mul(m);
    (g - DMatrix::identity(m.ncols(), m.ncols())).norm()
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
///
/// Thin QR with columns sign-fixed so that the R factor has a positive
/// diagonal.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..q.ncols() {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// Orthogonal projector onto the column space of an orthonormal matrix.
pub fn projector(q: &DMatrix<f64>) -> DMatrix<f64> {
    q * q.transpose()
}

/// Cosines of the principal angles between two subspaces given by
/// orthonormal bases, in decreasing order.
pub fn principal_cosines(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<f64> {
    let sv = p.tr_mul(q).singular_values();
    let mut out: Vec<f64> = sv.iter().map(|s| s.min(1.0)).collect();
    out.sort_by(|x, y| y.total_cmp(x));
    out
}

/// Largest principal angle between two subspaces, in degrees.
pub fn max_principal_angle_deg(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let cos = principal_cosines(p, q);
    let smallest = cos.last().copied().unwrap_or(1.0);
    smallest.clamp(-1.0, 1.0).acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signs_follow_largest_entry() {
        let mut m = DMatrix::from_row_slice(3, 2, &[0.1, -0.5, -0.9, 0.5, 0.2, 0.1]);
        fix_column_signs(&mut m);
        assert_eq!(
            m.column(0).iter().copied().collect::<Vec<_>>(),
            vec![-0.1, 0.9, -0.2]
        );
        // Tied magnitudes: the first one wins.
        assert_eq!(
            m.column(1).iter().copied().collect::<Vec<_>>(),
            vec![0.5, -0.5, -0.1]
        );
    }

    #[test]
    fn sorted_eigen_descending() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let e = SortedEigen::new(&s);
        assert_eq!(e.values.as_slice(), &[5.0, 2.0, 1.0]);
        assert_eq!(e.top(1), DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]));
        assert!(!e.near_tie_at(1));
        let tied = DMatrix::<f64>::identity(3, 3);
        assert!(SortedEigen::new(&tied).near_tie_at(2));
    }

    #[test]
    fn symmetric_square_root() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = symmetric_function(&s, f64::sqrt);
        assert!((&r * &r - &s).norm() < 1e-12);
    }

    #[test]
    fn principal_angles_of_orthogonal_lines() {
        let p = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let q = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((max_principal_angle_deg(&p, &q) - 90.0).abs() < 1e-12);
        assert!(max_principal_angle_deg(&p, &p) < 1e-6);
    }

    #[test]
    fn orthonormalize_spans_input() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 1.0, -1.0]);
        let q = orthonormalize(&m);
        assert!(orthonormality_defect(&q) < 1e-12);
        let p = projector(&q);
        assert!((&p * &m - &m).norm() < 1e-12);
    }
}
