//! Dense matrix helpers shared by every module.
//!
//! Everything is `f64`; matrices are `nalgebra::DMatrix` and row `i` of a
//! feature matrix is one token / feature vector.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    // Fill row by row so the draw order does not depend on storage layout.
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = std * z;
        }
    }
    m
}

pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)))
}

/// `rows × cols` matrix with orthonormal columns (QR of a Gaussian draw).
pub fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in R^{rows}");
    let g = gaussian(rows, cols, 1.0, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix the sign ambiguity of QR so that diag(R) is positive.
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Symmetric eigendecomposition ordered by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the same order as `values`.
    pub vectors: Mat,
}

/// Eigendecomposition of a symmetric matrix with a deterministic ordering:
/// descending eigenvalue, exact ties keep the solver's column order, and each
/// eigenvector is signed so that its first non-negligible component is positive.
pub fn sorted_symmetric_eigen(m: &Mat) -> SortedEigen {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "eigendecomposition needs a square matrix");
    if n == 0 {
        return SortedEigen { values: vec![], vectors: Mat::zeros(0, 0) };
    }
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let norm = col.norm();
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-12 * norm.max(1.0)) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    SortedEigen { values, vectors }
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest singular value.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Smallest index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn row_mean(m: &Mat) -> Vector {
    let n = m.nrows().max(1) as f64;
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub fn cosine(a: &Vector, b: &Vector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthonormal_columns(8, 3, &mut rng);
        let g = q.transpose() * &q;
        assert!(max_abs(&(g - Mat::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn eigen_is_sorted_and_signed() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 4.0, 0.0]));
        let e = sorted_symmetric_eigen(&m);
        assert_eq!(e.values, vec![4.0, 1.0, 0.0]);
        assert_eq!(e.vectors.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        for j in 0..3 {
            let first = e.vectors.column(j).iter().copied().find(|x| x.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = gaussian(5, 5, 1.0, &mut rng);
        let m = &a * a.transpose();
        let e = sorted_symmetric_eigen(&m);
        let d = Mat::from_diagonal(&Vector::from_vec(e.values.clone()));
        let back = &e.vectors * d * e.vectors.transpose();
        assert!(max_abs(&(back - m)) < 1e-10);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(std::iter::empty()), None);
    }

    #[test]
    fn gelu_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }
}
