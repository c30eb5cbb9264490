//! Gaussian machinery on plain `f64` matrices.
//!
//! The differentiable filter re-implements the same formulas on the autodiff tape; the functions
//! here are the reference versions used for inspection, action selection and testing.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Shape2D;
use crate::pushsim::INERTIA_STATE_SCALE;
use crate::rng::{normal_matrix, Stream};
use crate::{PARAM_DIM, POSE_DIM, STATE_DIM};

/// Jitter ladder used whenever a covariance must be factorized.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-9, 1e-8, 1e-7, 1e-6];

/// Gaussian belief over `(x, y, θ, m, μ, com_x, com_y, I_z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl JointBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let b = Self { mean, cov };
        b.validate()?;
        Ok(b)
    }

    /// Block-diagonal belief with zero cross-covariance.
    pub fn from_blocks(pose_mean: &[f64; 3], pose_var: &[f64; 3], param_mean: &[f64; 5], param_var: &[f64; 5]) -> Self {
        let mean = DVector::from_iterator(STATE_DIM, pose_mean.iter().chain(param_mean).cloned());
        let var = DVector::from_iterator(STATE_DIM, pose_var.iter().chain(param_var).cloned());
        Self { mean, cov: DMatrix::from_diagonal(&var) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.cov.shape() != (n, n) {
            return Err(Error::InvalidInput(format!("covariance is {:?}, mean has {n} entries", self.cov.shape())));
        }
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("belief has non-finite entries".into()));
        }
        if (&self.cov - self.cov.transpose()).amax() > 1e-10 * (1.0 + self.cov.amax()) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let lmin = min_eigenvalue(&self.cov);
        if lmin < -1e-9 {
            return Err(Error::NotPsd { jitter: 0.0 });
        }
        Ok(())
    }

    pub fn pose_mean(&self) -> DVector<f64> {
        self.mean.rows(0, POSE_DIM).into_owned()
    }

    pub fn param_mean(&self) -> DVector<f64> {
        self.mean.rows(POSE_DIM, PARAM_DIM).into_owned()
    }

    pub fn pose_cov(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (POSE_DIM, POSE_DIM)).into_owned()
    }

    pub fn param_cov(&self) -> DMatrix<f64> {
        self.cov.view((POSE_DIM, POSE_DIM), (PARAM_DIM, PARAM_DIM)).into_owned()
    }

    /// `Σ_ψφ` (3×5).
    pub fn cross_cov(&self) -> DMatrix<f64> {
        self.cov.view((0, POSE_DIM), (POSE_DIM, PARAM_DIM)).into_owned()
    }

    /// Differential entropy of the parameter marginal (nats).
    pub fn param_entropy(&self) -> f64 {
        gaussian_entropy(&self.param_cov())
    }
}

/// Differential entropy of a Gaussian with covariance `cov`.
pub fn gaussian_entropy(cov: &DMatrix<f64>) -> f64 {
    let n = cov.nrows() as f64;
    let logdet = cholesky_jittered(cov).map(|(l, _)| log_det_from_chol(&l)).unwrap_or(f64::NEG_INFINITY);
    0.5 * (n * (1.0 + (2.0 * std::f64::consts::PI).ln()) + logdet)
}

/// Box bounds on each state dimension; a point is valid when strictly inside finite bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub lower: [f64; STATE_DIM],
    pub upper: [f64; STATE_DIM],
}

impl Constraints {
    /// Positive mass, friction and inertia; center of mass inside the shape's bounding box; pose free.
    pub fn for_shape(shape: &Shape2D) -> Self {
        let (lo, hi) = shape.bounding_box();
        let inf = f64::INFINITY;
        Self {
            lower: [-inf, -inf, -inf, 0.0, 0.0, lo.x, lo.y, 0.0],
            upper: [inf, inf, inf, inf, inf, hi.x, hi.y, inf],
        }
    }

    pub fn unbounded() -> Self {
        Self { lower: [f64::NEG_INFINITY; STATE_DIM], upper: [f64::INFINITY; STATE_DIM] }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..STATE_DIM {
            if self.lower[k].is_finite() && self.upper[k].is_finite() && self.lower[k] >= self.upper[k] {
                return Err(Error::InvalidInput(format!("empty bound on dimension {k}")));
            }
        }
        Ok(())
    }

    pub fn is_satisfied(&self, point: &[f64]) -> bool {
        point.iter().enumerate().all(|(k, &v)| {
            let lo_ok = !self.lower[k].is_finite() || v > self.lower[k];
            let hi_ok = !self.upper[k].is_finite() || v < self.upper[k];
            lo_ok && hi_ok
        })
    }

    /// Nearest point inside the bounds, pulled in by a small relative margin from open edges.
    pub fn project(&self, point: &mut [f64]) -> bool {
        let mut moved = false;
        for (k, v) in point.iter_mut().enumerate() {
            let (lo, hi) = self.clamp_bounds(k);
            let c = v.clamp(lo, hi);
            if c != *v {
                *v = c;
                moved = true;
            }
        }
        moved
    }

    /// Closed interval used for projection of dimension `k`.
    pub fn clamp_bounds(&self, k: usize) -> (f64, f64) {
        let (lo, hi) = (self.lower[k], self.upper[k]);
        let margin = if lo.is_finite() && hi.is_finite() { 1e-3 * (hi - lo) } else { 1e-6 };
        let lo = if lo.is_finite() { lo + margin.max(lo.abs() * 1e-3) } else { lo };
        let hi = if hi.is_finite() { hi - margin } else { hi };
        (lo, hi)
    }
}

/// Equally weighted sample points with per-point constraint flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSet {
    /// `C × 8`, one point per row.
    pub points: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub valid: Vec<bool>,
}

impl SigmaSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Rescales the weights to sum to one.
    pub fn normalize(&mut self) -> Result<()> {
        let s = self.weights.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        self.weights /= s;
        Ok(())
    }
}

/// Lower Cholesky factor of `a` with the smallest jitter from [`JITTER_LADDER`] that succeeds.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    for &j in &JITTER_LADDER {
        let m = a + DMatrix::identity(n, n) * j;
        if let Some(c) = m.cholesky() {
            let l = c.l();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, j));
            }
        }
    }
    Err(Error::NotPsd { jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] })
}

pub fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `χ⁽ⁱ⁾ = μ + ε⁽ⁱ⁾ Lᵀ` for a given `C × n` matrix of standard normal draws.
pub fn sigma_from_eps(belief: &JointBelief, eps: &DMatrix<f64>, constraints: &Constraints) -> Result<SigmaSet> {
    let (l, _) = cholesky_jittered(&belief.cov)?;
    let c = eps.nrows();
    let mut points = eps * l.transpose();
    for mut row in points.row_iter_mut() {
        row += belief.mean.transpose();
    }
    let valid = (0..c)
        .map(|i| constraints.is_satisfied(points.row(i).transpose().as_slice()))
        .collect();
    Ok(SigmaSet { points, weights: DVector::from_element(c, 1.0 / c as f64), valid })
}

/// Constrained Monte-Carlo sigma points; invalid points are flagged but kept.
pub fn sample_sigma(belief: &JointBelief, c: usize, constraints: &Constraints, seed: u64) -> Result<SigmaSet> {
    if c < 2 {
        return Err(Error::InvalidInput("need at least two sigma points".into()));
    }
    let eps = normal_matrix(seed, 0, Stream::PredictSigma, c, belief.dim());
    sigma_from_eps(belief, &eps, constraints)
}

/// Weighted mean and covariance of the rows of `points`.
pub fn moments(points: &DMatrix<f64>, weights: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = weights.sum();
    if !(s > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let w = weights / s;
    let mean = points.transpose() * &w;
    let mut d = points.clone();
    for mut row in d.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut dw = d.clone();
    for (i, mut row) in dw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let cov = dw.transpose() * d;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Conditions the first `k` dimensions on the remaining ones taking `value`.
pub fn condition_blocks(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    k: usize,
    value: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    let r = n - k;
    let s_aa = cov.view((0, 0), (k, k));
    let s_ab = cov.view((0, k), (k, r));
    let s_bb = cov.view((k, k), (r, r)).into_owned();
    let (l, _) = cholesky_jittered(&s_bb).map_err(|_| Error::SingularBlock)?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let diff = value - mean.rows(k, r);
    let gain_t = chol.solve(&s_ab.transpose());
    let m = mean.rows(0, k) + gain_t.transpose() * diff;
    let c = s_aa - s_ab * gain_t;
    let c = (&c + c.transpose()) * 0.5;
    Ok((m, c))
}

/// Pose distribution given the parameters take the value `phi`.
pub fn condition(belief: &JointBelief, phi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    condition_blocks(&belief.mean, &belief.cov, POSE_DIM, phi)
}

/// `D_KL(p ‖ q)` between two Gaussians of equal dimension.
pub fn kl_divergence(p: &JointBelief, q: &JointBelief) -> Result<f64> {
    kl_gaussian(&p.mean, &p.cov, &q.mean, &q.cov)
}

pub fn kl_gaussian(mp: &DVector<f64>, sp: &DMatrix<f64>, mq: &DVector<f64>, sq: &DMatrix<f64>) -> Result<f64> {
    let n = mp.len() as f64;
    let (lp, _) = cholesky_jittered(sp)?;
    let (lq, _) = cholesky_jittered(sq)?;
    let chol_q = nalgebra::Cholesky::pack_dirty(lq.clone());
    let tr = chol_q.solve(sp).trace();
    let d = mq - mp;
    let maha = d.dot(&chol_q.solve(&d));
    let kl = 0.5 * (tr + maha - n + log_det_from_chol(&lq) - log_det_from_chol(&lp));
    Ok(kl.max(0.0))
}

/// Scaled unscented transform points (α = 1, β = 2, κ = 0): rows `μ`, `μ + √(nΣ)ᵢ`, `μ − √(nΣ)ᵢ`.
pub fn unscented_points(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let n = mean.len();
    let (alpha, beta, kappa) = (1.0, 2.0, 0.0);
    let lambda = alpha * alpha * (n as f64 + kappa) - n as f64;
    let (l, _) = cholesky_jittered(cov)?;
    let scaled = l * (n as f64 + lambda).sqrt();
    let mut pts = DMatrix::zeros(2 * n + 1, n);
    pts.row_mut(0).copy_from(&mean.transpose());
    for i in 0..n {
        let col = scaled.column(i);
        pts.row_mut(1 + i).copy_from(&(mean + col).transpose());
        pts.row_mut(1 + n + i).copy_from(&(mean - col).transpose());
    }
    let wi = 1.0 / (2.0 * (n as f64 + lambda));
    let mut wm = DVector::from_element(2 * n + 1, wi);
    let mut wc = wm.clone();
    wm[0] = lambda / (n as f64 + lambda);
    wc[0] = wm[0] + (1.0 - alpha * alpha + beta);
    Ok((pts, wm, wc))
}

/// `½[(v−μ)ᵀΣ⁻¹(v−μ) + ln det Σ + n ln 2π]`.
pub fn gaussian_nll(value: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let (l, _) = cholesky_jittered(cov)?;
    let logdet = log_det_from_chol(&l);
    let d = value - mean;
    let maha = d.dot(&nalgebra::Cholesky::pack_dirty(l).solve(&d));
    Ok(0.5 * (maha + logdet + d.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Converts the inertia column between SI and state units for display.
pub fn inertia_to_si(state_value: f64) -> f64 {
    state_value / INERTIA_STATE_SCALE
}
