//! Null-space gradient projection for the shared projector.
//!
//! After each task the per-layer input second moment is merged into a running
//! mean, decomposed, and split at the smallest rank whose leading spectrum
//! holds an `eps` fraction of the energy. Later gradients are right-multiplied
//! by `Π = V⊥ V⊥ᵀ`, so a weight update cannot move the layer's output on
//! features inside the retained subspace.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{max_abs, sorted_symmetric_eigen, spectral_norm, Mat, Vector};

/// Running second moment `M` of one layer's inputs over `count` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub moment: Mat,
    pub count: usize,
}

impl MomentStats {
    pub fn zero(dim: usize) -> Self {
        Self { moment: Mat::zeros(dim, dim), count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.moment.nrows()
    }
}

/// `M ← (N M + ∑ ṽṽᵀ) / (N + n)`.
pub fn update_moment(prev: &MomentStats, gram_sum: &Mat, n_new: usize) -> Result<MomentStats> {
    if n_new == 0 {
        return Err(Error::EmptyStatistics("no feature rows were collected".into()));
    }
    if gram_sum.shape() != prev.moment.shape() {
        return Err(Error::Shape(format!(
            "Gram sum {:?} against moment {:?}",
            gram_sum.shape(),
            prev.moment.shape()
        )));
    }
    let count = prev.count + n_new;
    let moment = (&prev.moment * prev.count as f64 + gram_sum) / count as f64;
    Ok(MomentStats { moment, count })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionMatrix {
    #[serde(skip)]
    pub pi: Mat,
    /// Retained rank `r`.
    pub rank: usize,
    /// Rank before the `r ≤ d − 1` clamp and the `r ≥ 1` floor.
    pub raw_rank: usize,
    #[serde(skip)]
    pub v_par: Mat,
    #[serde(skip)]
    pub v_perp: Mat,
    /// Descending spectrum of `M`.
    pub spectrum: Vec<f64>,
    /// Set when `M = 0`: nothing is retained and `Π = I`.
    pub degenerate: bool,
}

impl ProjectionMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            pi: Mat::identity(dim, dim),
            rank: 0,
            raw_rank: 0,
            v_par: Mat::zeros(dim, 0),
            v_perp: Mat::identity(dim, dim),
            spectrum: vec![0.0; dim],
            degenerate: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.pi.nrows()
    }

    /// `Π` assembled from a stored complement basis.
    pub fn from_complement(v_perp: Mat, v_par: Mat, spectrum: Vec<f64>) -> Self {
        let pi = &v_perp * v_perp.transpose();
        let rank = v_par.ncols();
        Self { pi, rank, raw_rank: rank, v_par, v_perp, spectrum, degenerate: rank == 0 }
    }
}

/// Smallest `r` with `∑_{k≤r} σ_k / ∑ σ_k ≥ eps` (1-based), before any clamping.
pub fn energy_rank(spectrum: &[f64], eps: f64) -> usize {
    let total: f64 = spectrum.iter().map(|s| s.max(0.0)).sum();
    if total <= 0.0 {
        return 0;
    }
    let mut cum = 0.0;
    for (k, s) in spectrum.iter().enumerate() {
        cum += s.max(0.0);
        if cum / total >= eps {
            return k + 1;
        }
    }
    spectrum.len()
}

pub fn compute_projection(m: &Mat, eps: f64) -> Result<ProjectionMatrix> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("energy threshold must lie in (0, 1], got {eps}")));
    }
    let d = m.nrows();
    if d != m.ncols() || d == 0 {
        return Err(Error::Shape(format!("moment matrix {:?}", m.shape())));
    }
    if max_abs(m) == 0.0 {
        return Ok(ProjectionMatrix::identity(d));
    }
    // M is symmetric PSD, so its eigendecomposition is its SVD.
    let eig = sorted_symmetric_eigen(m);
    let spectrum: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let raw_rank = energy_rank(&spectrum, eps);
    let rank = raw_rank.clamp(1, d.saturating_sub(1).max(1));
    let v_par = eig.vectors.columns(0, rank).clone_owned();
    let v_perp = eig.vectors.columns(rank, d - rank).clone_owned();
    let pi = &v_perp * v_perp.transpose();
    Ok(ProjectionMatrix { pi, rank, raw_rank, v_par, v_perp, spectrum, degenerate: false })
}

/// `∇W Π` for a weight gradient laid out `d_out × d_in`.
pub fn project_gradient(grad: &Mat, proj: &ProjectionMatrix) -> Result<Mat> {
    if grad.ncols() != proj.dim() {
        return Err(Error::Shape(format!(
            "gradient has {} input columns, projection is {}-dimensional",
            grad.ncols(),
            proj.dim()
        )));
    }
    Ok(grad * &proj.pi)
}

/// First-order interference on an old feature after one projected step:
/// returns `(‖η ∇W Π v‖, η σ_max(∇W) ‖V⊥ᵀ v‖)`; the first never exceeds the second.
pub fn interference_bound(grad: &Mat, proj: &ProjectionMatrix, v_old: &Vector, eta: f64) -> Result<(f64, f64)> {
    if v_old.len() != proj.dim() {
        return Err(Error::Shape(format!("feature of length {} for dimension {}", v_old.len(), proj.dim())));
    }
    let projected = project_gradient(grad, proj)?;
    let lhs = (projected * v_old * eta).norm();
    let rhs = eta * spectral_norm(grad) * (proj.v_perp.transpose() * v_old).norm();
    Ok((lhs, rhs))
}

/// Energy of `M` left in the complement, `tr(V⊥ᵀ M V⊥)`.
pub fn complement_energy(m: &Mat, proj: &ProjectionMatrix) -> f64 {
    (proj.v_perp.transpose() * m * &proj.v_perp).trace()
}
