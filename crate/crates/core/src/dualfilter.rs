//! The dual differentiable filter.
//!
//! One step runs a Monte-Carlo prediction through the process model, a weight-based update of
//! the parameter marginal with Liu-West kernel reconstruction, and an unscented Kalman update of
//! the pose conditioned on the new parameter mean. Every step is recorded on a [`Tape`], so a
//! loss on the resulting beliefs can be differentiated with respect to the model weights.
//!
//! The `*_t` functions operate on tape nodes; the plain-named wrappers take and return
//! [`JointBelief`] values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::{Constraints, JointBelief, SigmaSet};
use crate::geometry::{wrap_angle, Pose2D, PushAction, Shape2D};
use crate::nets::{FilterModels, StepContext};
use crate::pushsim::{ParameterRanges, PushTrajectory, TactileObs};
use crate::rng::{normal_matrix, Stream};
use crate::tape::{Tape, Var};
use crate::{PARAM_DIM, POSE_DIM, STATE_DIM};

/// How the parameter and pose updates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Parameter particle update followed by a conditional pose UKF (VT-ADDF / VT-DDF).
    Dual,
    /// A single UKF update of the whole state (VT-JDF).
    Joint,
    /// Dual update with the tactile channel removed (V-DDF).
    VisionOnly,
}

/// Source of the pose-parameter cross-covariance of the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossCovPolicy {
    /// Copied unchanged from the predicted belief.
    Constant,
    /// Re-derived from the predicted regression of pose on parameters.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Number of Monte-Carlo sigma points.
    pub c: usize,
    pub liu_west_a: f64,
    pub constraints: Constraints,
    pub mode: FilterMode,
    pub cross_cov: CrossCovPolicy,
    /// Variance added to the posterior parameter block (state units).
    pub param_var_floor: [f64; PARAM_DIM],
    /// Smallest eigenvalue allowed for the pose block given the parameters.
    pub pose_var_floor: f64,
    /// Lower bound on the effective sample size of the parameter weights, as a fraction of `c`.
    /// When the full likelihood would fall below it, the log-likelihoods are scaled by the largest
    /// exponent in (0, 1] that meets the bound. Zero disables tempering.
    pub min_ess_frac: f64,
    /// Control period (s).
    pub dt: f64,
    /// Evaluate the shape-action encoder once per sigma point instead of once per step.
    pub per_point_masks: bool,
    /// Rescale the standard-normal draws of each step to zero sample mean and unit sample
    /// covariance, so the sigma points reproduce the source moments exactly.
    pub moment_matched: bool,
}

impl FilterConfig {
    pub fn new(constraints: Constraints) -> Self {
        Self {
            c: 100,
            liu_west_a: 0.01,
            constraints,
            mode: FilterMode::Dual,
            cross_cov: CrossCovPolicy::Constant,
            param_var_floor: [1e-5, 1e-6, 1e-8, 1e-8, 1e-5],
            pose_var_floor: 1e-9,
            min_ess_frac: 0.0,
            dt: 0.1,
            per_point_masks: false,
            moment_matched: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::Config("need at least two sigma points".into()));
        }
        if !(self.liu_west_a > 0.0 && self.liu_west_a < 1.0) {
            return Err(Error::Config("Liu-West shrinkage must lie in (0, 1)".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_ess_frac) {
            return Err(Error::Config("min_ess_frac must lie in [0, 1]".into()));
        }
        self.constraints.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Kernel bandwidth `h = √(1 − a²)`.
    pub fn liu_west_h(&self) -> f64 {
        (1.0 - self.liu_west_a * self.liu_west_a).sqrt()
    }
}

/// Vision and tactile readings of one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub z_v: [f64; 3],
    /// `(f_x, f_y, contact)`.
    pub z_t: [f64; 3],
}

impl Observation {
    pub fn new(z_v: [f64; 3], tactile: &TactileObs) -> Self {
        Self { z_v, z_t: tactile.to_array() }
    }

    pub fn to_row(&self, mode: FilterMode) -> [f64; 6] {
        let t = if mode == FilterMode::VisionOnly { [0.0; 3] } else { self.z_t };
        [self.z_v[0], self.z_v[1], self.z_v[2], t[0], t[1], t[2]]
    }
}

/// Diagnostics of one filter step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// All observation likelihoods underflowed and the weights were reset to uniform.
    pub weight_fallback: bool,
    /// The parameter mean was projected back inside the constraints.
    pub projected: bool,
    /// The pose block was inflated to keep the joint covariance positive definite.
    pub psd_repaired: bool,
    pub invalid_points: usize,
    pub effective_sample_size: f64,
    /// Exponent applied to the log-likelihoods (1 when untempered).
    pub temper: f64,
    /// Observation variances predicted for this step.
    pub r_diag: [f64; 6],
}

/// Belief whose mean (`1 × 8`) and covariance (`8 × 8`) live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeBelief {
    pub mean: Var,
    pub cov: Var,
}

impl TapeBelief {
    pub fn constant(tape: &mut Tape, b: &JointBelief) -> Self {
        let mean = tape.constant(DMatrix::from_row_slice(1, b.dim(), b.mean.as_slice()));
        let cov = tape.constant(b.cov.clone());
        Self { mean, cov }
    }

    pub fn value(&self, tape: &Tape) -> JointBelief {
        let m = tape.value(self.mean);
        JointBelief { mean: DVector::from_column_slice(m.as_slice()), cov: tape.value(self.cov).clone() }
    }
}

/// Result of the prediction step.
#[derive(Debug, Clone)]
pub struct Predicted {
    pub belief: TapeBelief,
    pub ctx: StepContext,
    /// Prior sigma points (values) and their constraint flags.
    pub sigma: SigmaSet,
}

/// Result of the parameter update.
#[derive(Debug, Clone, Copy)]
pub struct ParamPosterior {
    /// `1 × 5`, projected inside the constraints.
    pub mean: Var,
    /// `5 × 5`.
    pub cov: Var,
    /// `C × 1`.
    pub weights: Var,
    /// `1 × 6` observation variances.
    pub r: Var,
    pub fallback: bool,
    pub projected: bool,
    pub ess: f64,
    pub temper: f64,
}

/// Standard normal draws for one step, optionally moment-matched.
pub fn step_normals(seed: u64, counter: u64, stream: Stream, rows: usize, cols: usize, moment_matched: bool) -> DMatrix<f64> {
    let mut e = normal_matrix(seed, counter, stream, rows, cols);
    if !moment_matched || rows <= cols {
        return e;
    }
    let mean = e.row_mean();
    for mut r in e.row_iter_mut() {
        r -= &mean;
    }
    let s = e.transpose() * &e / rows as f64;
    match s.cholesky() {
        // X = E L⁻ᵀ, so that Xᵀ X / rows = I.
        Some(ch) => ch.l().solve_lower_triangular(&e.transpose()).map(|x| x.transpose()).unwrap_or(e),
        None => e,
    }
}

fn uniform_moments(tape: &mut Tape, x: Var) -> (Var, Var) {
    let c = tape.shape(x).0;
    let s = tape.col_sum(x);
    let mean = tape.scale(s, 1.0 / c as f64);
    let rep = tape.repeat_rows(mean, c);
    let d = tape.sub(x, rep);
    let dt = tape.transpose(d);
    let cov = tape.matmul(dt, d);
    let cov = tape.scale(cov, 1.0 / c as f64);
    (mean, tape.symmetrize(cov))
}

/// Sigma points `μ + ε Lᵀ` (`C × n`) on the tape.
fn sigma_points(tape: &mut Tape, belief: &TapeBelief, eps: DMatrix<f64>) -> Result<Var> {
    let l = tape.cholesky(belief.cov)?;
    let lt = tape.transpose(l);
    let e = tape.constant(eps);
    let x = tape.matmul(e, lt);
    Ok(tape.add_row(x, belief.mean))
}

/// Copy of the points with parameter coordinates clamped into the feasible box.
fn clamp_params(tape: &mut Tape, points: Var, constraints: &Constraints) -> Var {
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..STATE_DIM).map(|k| constraints.clamp_bounds(k)).unzip();
    tape.clamp_cols(points, &lo, &hi)
}

fn const_row(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(DMatrix::from_row_slice(1, v.len(), v))
}

/// Replaces column `col` of `x` by its angle-wrapped value.
fn wrap_column(tape: &mut Tape, x: Var, col: usize) -> Var {
    let (_, n) = tape.shape(x);
    let mut parts = Vec::new();
    if col > 0 {
        parts.push(tape.cols(x, 0, col));
    }
    let c = tape.cols(x, col, 1);
    parts.push(tape.wrap_angle(c));
    if col + 1 < n {
        parts.push(tape.cols(x, col + 1, n - col - 1));
    }
    tape.hstack(&parts)
}

/// Prediction: Monte-Carlo sigma points through the process model; parameters pass unchanged.
#[allow(clippy::too_many_arguments)]
pub fn predict_t<M: FilterModels>(
    tape: &mut Tape,
    models: &M,
    bound: &M::Bound,
    prior: &TapeBelief,
    action: &PushAction,
    shape: &Shape2D,
    cfg: &FilterConfig,
    seed: u64,
    counter: u64,
) -> Result<Predicted> {
    let c = cfg.c;
    let noise = step_normals(seed, counter, Stream::PredictSigma, c, STATE_DIM + POSE_DIM, cfg.moment_matched);
    let chi = sigma_points(tape, prior, noise.columns(0, STATE_DIM).into_owned())?;
    let values = tape.value(chi).clone();
    let valid: Vec<bool> = (0..c).map(|i| cfg.constraints.is_satisfied(values.row(i).transpose().as_slice())).collect();
    let m = tape.value(prior.mean);
    let center = [m[0], m[1], m[2]];
    let pose = Pose2D { x: center[0], y: center[1], theta: wrap_angle(center[2]) };
    let encoding = if cfg.per_point_masks {
        let mut encs = Vec::with_capacity(c);
        for i in 0..c {
            let p = Pose2D::new(values[(i, 0)], values[(i, 1)], values[(i, 2)]);
            match models.encode(tape, bound, shape, &p, action, cfg.dt)? {
                Some(e) => encs.push(e),
                None => break,
            }
        }
        if encs.is_empty() {
            None
        } else {
            Some(tape.vstack(&encs))
        }
    } else {
        models.encode(tape, bound, shape, &pose, action, cfg.dt)?
    };
    let center_var = Some(tape.cols(prior.mean, 0, POSE_DIM));
    let ctx = StepContext { center, center_var, encoding, heading: action.pd };
    let net_in = clamp_params(tape, chi, &cfg.constraints);
    let (delta, q) = models.process(tape, bound, net_in, &ctx)?;
    let sq = tape.sqrt(q);
    let eq = tape.constant(noise.columns(STATE_DIM, POSE_DIM).into_owned());
    let pert = tape.mul(eq, sq);
    let psi = tape.cols(chi, 0, POSE_DIM);
    let psi = tape.add(psi, delta);
    let psi = tape.add(psi, pert);
    let phi = tape.cols(chi, POSE_DIM, PARAM_DIM);
    let moved = tape.hstack(&[psi, phi]);
    let (mean, cov) = uniform_moments(tape, moved);
    let sigma = SigmaSet { points: values, weights: DVector::from_element(c, 1.0 / c as f64), valid };
    Ok(Predicted { belief: TapeBelief { mean, cov }, ctx, sigma })
}

/// Observation variances from the noise model; the tactile input is zero in vision-only mode.
fn observation_noise<M: FilterModels>(tape: &mut Tape, models: &M, bound: &M::Bound, obs: &Observation, cfg: &FilterConfig) -> Result<Var> {
    let z = const_row(tape, &obs.to_row(cfg.mode));
    models.obs_noise(tape, bound, z)
}

/// `−½ Σⱼ (Z̄ᵢⱼ − zⱼ)² / Rⱼ` per row of the predicted observations.
fn log_likelihoods(tape: &mut Tape, zbar: Var, z: &[f64], r: Var) -> Var {
    let c = tape.shape(zbar).0;
    let zr = const_row(tape, z);
    let zrep = tape.repeat_rows(zr, c);
    let res = tape.sub(zbar, zrep);
    let res = wrap_column(tape, res, 2);
    let sq = tape.square(res);
    let inv = tape.recip(r);
    let scaled = tape.mul_row(sq, inv);
    let s = tape.row_sum(scaled);
    tape.scale(s, -0.5)
}

/// Effective sample size `(Σw)² / Σw²` of the weights `exp(β ℓ)`.
fn tempered_ess(ll: &[f64], beta: f64) -> f64 {
    let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (s, s2) = ll.iter().fold((0.0, 0.0), |(s, s2), &l| {
        let w = (beta * (l - m)).exp();
        (s + w, s2 + w * w)
    });
    s * s / s2
}

/// Largest exponent `β ∈ (0, 1]` for which the weights `exp(β ℓ)` keep an effective sample size of
/// at least `target`; `target` must not exceed the number of log-likelihoods.
pub fn tempering_exponent(ll: &[f64], target: f64) -> f64 {
    if target <= 1.0 || tempered_ess(ll, 1.0) >= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tempered_ess(ll, mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Parameter update: likelihood weights over fresh sigma points and Liu-West reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn update_parameters_t<M: FilterModels>(
    tape: &mut Tape,
    models: &M,
    bound: &M::Bound,
    pred: &Predicted,
    obs: &Observation,
    cfg: &FilterConfig,
    seed: u64,
    counter: u64,
) -> Result<ParamPosterior> {
    let c = cfg.c;
    let eps = step_normals(seed, counter, Stream::UpdateSigma, c, STATE_DIM, cfg.moment_matched);
    let chi = sigma_points(tape, &pred.belief, eps)?;
    let r_full = observation_noise(tape, models, bound, obs, cfg)?;
    let zv = tape.cols(chi, 0, POSE_DIM);
    let (zbar, z, r) = if cfg.mode == FilterMode::VisionOnly {
        let r = tape.cols(r_full, 0, 3);
        (zv, obs.z_v.to_vec(), r)
    } else {
        let net_in = clamp_params(tape, chi, &cfg.constraints);
        let zt = models.tactile(tape, bound, net_in, &pred.ctx)?;
        (tape.hstack(&[zv, zt]), obs.to_row(cfg.mode).to_vec(), r_full)
    };
    let ll = log_likelihoods(tape, zbar, &z, r);
    let max_ll = tape.value(ll).max();
    let fallback = !(max_ll >= 1e-300f64.ln());
    let temper = if fallback { 1.0 } else { tempering_exponent(tape.value(ll).as_slice(), cfg.min_ess_frac * c as f64) };
    let ll = if temper < 1.0 { tape.scale(ll, temper) } else { ll };
    let w = if fallback {
        log::debug!("observation likelihood underflow; using uniform weights");
        tape.constant(DMatrix::from_element(c, 1, 1.0 / c as f64))
    } else {
        tape.softmax_col(ll)
    };
    let ess = 1.0 / tape.value(w).iter().map(|v| v * v).sum::<f64>();

    let phi = tape.cols(chi, POSE_DIM, PARAM_DIM);
    let wt = tape.transpose(w);
    let mu = tape.matmul(wt, phi);
    let mu_rep = tape.repeat_rows(mu, c);
    let d = tape.sub(phi, mu_rep);
    let dw = tape.mul_col(d, w);
    let dwt = tape.transpose(dw);
    let spread = tape.matmul(dwt, d);
    // Kernel locations m = a χ + (1 − a) μ; the mixture of N(m, h² V) has covariance (a² + h²) V.
    let a = cfg.liu_west_a;
    let ka = tape.scale(phi, a);
    let kb = tape.scale(mu_rep, 1.0 - a);
    let m = tape.add(ka, kb);
    let dm = tape.sub(m, mu_rep);
    let dmw = tape.mul_col(dm, w);
    let dmwt = tape.transpose(dmw);
    let kernel_loc = tape.matmul(dmwt, dm);
    let bandwidth = tape.scale(spread, 1.0 - a * a);
    let cov = tape.add(kernel_loc, bandwidth);
    let cov = tape.symmetrize(cov);
    let cov = tape.offset(cov, &DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.param_var_floor)));

    let (lo, hi): (Vec<f64>, Vec<f64>) = (POSE_DIM..STATE_DIM).map(|k| cfg.constraints.clamp_bounds(k)).unzip();
    let before = tape.value(mu).clone();
    let mean = tape.clamp_cols(mu, &lo, &hi);
    let projected = tape.value(mean) != &before;
    Ok(ParamPosterior { mean, cov, weights: w, r: r_full, fallback, projected, ess, temper })
}

/// Unscented weights for `n` dimensions with α = 1, β = 2, κ = 0.
fn ut_weights(n: usize) -> (Vec<f64>, Vec<f64>) {
    let wi = 1.0 / (2.0 * n as f64);
    let mut wm = vec![wi; 2 * n + 1];
    let mut wc = wm.clone();
    wm[0] = 0.0;
    wc[0] = 2.0;
    (wm, wc)
}

/// `(2n + 1) × n` offset pattern `[0; √n I; −√n I]`.
fn ut_pattern(n: usize) -> DMatrix<f64> {
    let s = (n as f64).sqrt();
    let mut u = DMatrix::zeros(2 * n + 1, n);
    for i in 0..n {
        u[(1 + i, i)] = s;
        u[(1 + n + i, i)] = -s;
    }
    u
}

/// Kalman update of `(mean, cov)` with predicted observations `y` of the points `x`.
/// Returns the posterior mean and covariance plus the gain and innovation covariance.
fn ukf_correct(tape: &mut Tape, mean: Var, cov: Var, x: Var, y: Var, z: &[f64], r: Var) -> Result<(Var, Var)> {
    let (np, n) = tape.shape(x);
    let (wm, wc) = ut_weights(n);
    debug_assert_eq!(np, 2 * n + 1);
    let wm_row = const_row(tape, &wm);
    let yhat = tape.matmul(wm_row, y);
    let yrep = tape.repeat_rows(yhat, np);
    let dy = tape.sub(y, yrep);
    let xrep = tape.repeat_rows(mean, np);
    let dx = tape.sub(x, xrep);
    let wc_col = tape.constant(DMatrix::from_column_slice(np, 1, &wc));
    let dyw = tape.mul_col(dy, wc_col);
    let dywt = tape.transpose(dyw);
    let pyy = tape.matmul(dywt, dy);
    let rd = tape.diag_matrix(r);
    let pyy = tape.add(pyy, rd);
    let pyy = tape.symmetrize(pyy);
    let dxw = tape.mul_col(dx, wc_col);
    let dxwt = tape.transpose(dxw);
    let pxy = tape.matmul(dxwt, dy);
    let pyy_inv = tape.inverse_spd(pyy)?;
    let k = tape.matmul(pxy, pyy_inv);
    let zr = const_row(tape, z);
    let nu = tape.sub(zr, yhat);
    let nu = wrap_column(tape, nu, 2);
    let kt = tape.transpose(k);
    let corr = tape.matmul(nu, kt);
    let post_mean = tape.add(mean, corr);
    let kp = tape.matmul(k, pyy);
    let kpk = tape.matmul(kp, kt);
    let post_cov = tape.sub(cov, kpk);
    Ok((post_mean, tape.symmetrize(post_cov)))
}

/// Pose distribution of the predicted belief conditioned on parameters `phi` (`1 × 5`).
pub fn condition_t(tape: &mut Tape, pred: &TapeBelief, phi: Var) -> Result<(Var, Var)> {
    let s_pp = tape.slice(pred.cov, 0, 0, POSE_DIM, POSE_DIM);
    let s_pf = tape.slice(pred.cov, 0, POSE_DIM, POSE_DIM, PARAM_DIM);
    let s_ff = tape.slice(pred.cov, POSE_DIM, POSE_DIM, PARAM_DIM, PARAM_DIM);
    let inv = tape.inverse_spd(s_ff)?;
    let g = tape.matmul(s_pf, inv);
    let mu_p = tape.cols(pred.mean, 0, POSE_DIM);
    let mu_f = tape.cols(pred.mean, POSE_DIM, PARAM_DIM);
    let diff = tape.sub(phi, mu_f);
    let gt = tape.transpose(g);
    let shift = tape.matmul(diff, gt);
    let mean = tape.add(mu_p, shift);
    let s_fp = tape.transpose(s_pf);
    let red = tape.matmul(g, s_fp);
    let cov = tape.sub(s_pp, red);
    Ok((mean, tape.symmetrize(cov)))
}

/// Pose update: UKF on the pose distribution conditioned on the parameter mean.
#[allow(clippy::too_many_arguments)]
pub fn update_pose_t<M: FilterModels>(
    tape: &mut Tape,
    models: &M,
    bound: &M::Bound,
    pred: &Predicted,
    params: &ParamPosterior,
    obs: &Observation,
    cfg: &FilterConfig,
) -> Result<(Var, Var)> {
    let (mean, cov) = condition_t(tape, &pred.belief, params.mean)?;
    let l = tape.cholesky(cov)?;
    let lt = tape.transpose(l);
    let u = tape.constant(ut_pattern(POSE_DIM));
    let off = tape.matmul(u, lt);
    let np = 2 * POSE_DIM + 1;
    let rep = tape.repeat_rows(mean, np);
    let pts = tape.add(rep, off);
    if cfg.mode == FilterMode::VisionOnly {
        let r = tape.cols(params.r, 0, 3);
        return ukf_correct(tape, mean, cov, pts, pts, &obs.z_v, r);
    }
    let phi_rep = tape.repeat_rows(params.mean, np);
    let full = tape.hstack(&[pts, phi_rep]);
    let zt = models.tactile(tape, bound, full, &pred.ctx)?;
    let y = tape.hstack(&[pts, zt]);
    ukf_correct(tape, mean, cov, pts, y, &obs.to_row(cfg.mode), params.r)
}

/// Joint posterior from the pose and parameter posteriors.
pub fn assemble_t(
    tape: &mut Tape,
    pred: &TapeBelief,
    pose_mean: Var,
    pose_cov: Var,
    params: &ParamPosterior,
    cfg: &FilterConfig,
) -> Result<(TapeBelief, bool)> {
    let s_pf = tape.slice(pred.cov, 0, POSE_DIM, POSE_DIM, PARAM_DIM);
    let (pose_cov, cross) = match cfg.cross_cov {
        CrossCovPolicy::Constant => (pose_cov, s_pf),
        CrossCovPolicy::Regression => {
            let s_ff = tape.slice(pred.cov, POSE_DIM, POSE_DIM, PARAM_DIM, PARAM_DIM);
            let inv = tape.inverse_spd(s_ff)?;
            let b = tape.matmul(s_pf, inv);
            let cross = tape.matmul(b, params.cov);
            let bt = tape.transpose(b);
            let extra = tape.matmul(cross, bt);
            let pc = tape.add(pose_cov, extra);
            (tape.symmetrize(pc), cross)
        }
    };
    let (pose_cov, repaired) = repair_pose_block(tape, pose_cov, cross, params.cov, cfg.pose_var_floor)?;
    let mean = tape.hstack(&[pose_mean, params.mean]);
    let mean = wrap_mean_angle(tape, mean);
    let cross_t = tape.transpose(cross);
    let top = tape.hstack(&[pose_cov, cross]);
    let bottom = tape.hstack(&[cross_t, params.cov]);
    let cov = tape.vstack(&[top, bottom]);
    Ok((TapeBelief { mean, cov }, repaired))
}

/// Inflates the pose block until the pose covariance given the parameters has its smallest
/// eigenvalue at `floor`. The cross-covariance and parameter blocks are left untouched.
fn repair_pose_block(tape: &mut Tape, pose_cov: Var, cross: Var, param_cov: Var, floor: f64) -> Result<(Var, bool)> {
    let inv = tape.inverse_spd(param_cov)?;
    let g = tape.matmul(cross, inv);
    let ct = tape.transpose(cross);
    let red = tape.matmul(g, ct);
    let schur = tape.sub(pose_cov, red);
    let lam = tape.min_eigenvalue(schur);
    if tape.scalar(lam) >= floor {
        return Ok((pose_cov, false));
    }
    let neg = tape.scale(lam, -1.0);
    let shift = tape.add_scalar(neg, floor);
    let col = tape.repeat_rows(shift, POSE_DIM);
    let d = tape.diag_matrix(col);
    Ok((tape.add(pose_cov, d), true))
}

/// Shifts the angle of the mean into (−π, π] by a constant multiple of 2π.
fn wrap_mean_angle(tape: &mut Tape, mean: Var) -> Var {
    let th = tape.value(mean)[(0, 2)];
    let shift = wrap_angle(th) - th;
    if shift == 0.0 {
        return mean;
    }
    let mut off = DMatrix::zeros(1, tape.shape(mean).1);
    off[(0, 2)] = shift;
    tape.offset(mean, &off)
}

/// Single UKF update of the whole predicted state.
fn joint_update_t<M: FilterModels>(
    tape: &mut Tape,
    models: &M,
    bound: &M::Bound,
    pred: &Predicted,
    obs: &Observation,
    cfg: &FilterConfig,
) -> Result<(TapeBelief, StepInfo)> {
    let r = observation_noise(tape, models, bound, obs, cfg)?;
    let l = tape.cholesky(pred.belief.cov)?;
    let lt = tape.transpose(l);
    let u = tape.constant(ut_pattern(STATE_DIM));
    let off = tape.matmul(u, lt);
    let np = 2 * STATE_DIM + 1;
    let rep = tape.repeat_rows(pred.belief.mean, np);
    let pts = tape.add(rep, off);
    let pose = tape.cols(pts, 0, POSE_DIM);
    let net_in = clamp_params(tape, pts, &cfg.constraints);
    let zt = models.tactile(tape, bound, net_in, &pred.ctx)?;
    let y = tape.hstack(&[pose, zt]);
    let (mean, cov) = ukf_correct(tape, pred.belief.mean, pred.belief.cov, pts, y, &obs.to_row(cfg.mode), r)?;

    let pose_mean = tape.cols(mean, 0, POSE_DIM);
    let phi = tape.cols(mean, POSE_DIM, PARAM_DIM);
    let (lo, hi): (Vec<f64>, Vec<f64>) = (POSE_DIM..STATE_DIM).map(|k| cfg.constraints.clamp_bounds(k)).unzip();
    let before = tape.value(phi).clone();
    let phi = tape.clamp_cols(phi, &lo, &hi);
    let projected = tape.value(phi) != &before;
    let pose_cov = tape.slice(cov, 0, 0, POSE_DIM, POSE_DIM);
    let cross = tape.slice(cov, 0, POSE_DIM, POSE_DIM, PARAM_DIM);
    let param_cov = tape.slice(cov, POSE_DIM, POSE_DIM, PARAM_DIM, PARAM_DIM);
    let param_cov = tape.offset(param_cov, &DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.param_var_floor)));
    let (pose_cov, repaired) = repair_pose_block(tape, pose_cov, cross, param_cov, cfg.pose_var_floor)?;
    let mean = tape.hstack(&[pose_mean, phi]);
    let mean = wrap_mean_angle(tape, mean);
    let cross_t = tape.transpose(cross);
    let top = tape.hstack(&[pose_cov, cross]);
    let bottom = tape.hstack(&[cross_t, param_cov]);
    let cov = tape.vstack(&[top, bottom]);
    let rv = tape.value(r);
    let info = StepInfo {
        projected,
        psd_repaired: repaired,
        effective_sample_size: np as f64,
        r_diag: [rv[0], rv[1], rv[2], rv[3], rv[4], rv[5]],
        ..Default::default()
    };
    Ok((TapeBelief { mean, cov }, info))
}

/// Posterior of one step together with the context its networks were evaluated in.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub belief: TapeBelief,
    pub info: StepInfo,
    pub ctx: StepContext,
}

/// One full filter step on the tape.
#[allow(clippy::too_many_arguments)]
pub fn step_t<M: FilterModels>(
    tape: &mut Tape,
    models: &M,
    bound: &M::Bound,
    belief: &TapeBelief,
    action: &PushAction,
    obs: &Observation,
    shape: &Shape2D,
    cfg: &FilterConfig,
    seed: u64,
    counter: u64,
) -> Result<StepOutput> {
    let pred = predict_t(tape, models, bound, belief, action, shape, cfg, seed, counter)?;
    let invalid = pred.sigma.valid.iter().filter(|v| !**v).count();
    if cfg.mode == FilterMode::Joint {
        let (b, mut info) = joint_update_t(tape, models, bound, &pred, obs, cfg)?;
        info.invalid_points = invalid;
        return Ok(StepOutput { belief: b, info, ctx: pred.ctx });
    }
    let params = update_parameters_t(tape, models, bound, &pred, obs, cfg, seed, counter)?;
    let (pm, pc) = update_pose_t(tape, models, bound, &pred, &params, obs, cfg)?;
    let (b, repaired) = assemble_t(tape, &pred.belief, pm, pc, &params, cfg)?;
    let rv = tape.value(params.r);
    let info = StepInfo {
        weight_fallback: params.fallback,
        projected: params.projected,
        psd_repaired: repaired,
        invalid_points: invalid,
        effective_sample_size: params.ess,
        temper: params.temper,
        r_diag: [rv[0], rv[1], rv[2], rv[3], rv[4], rv[5]],
    };
    Ok(StepOutput { belief: b, info, ctx: pred.ctx })
}

fn check_belief(b: &JointBelief) -> Result<()> {
    if b.dim() != STATE_DIM {
        return Err(Error::InvalidInput(format!("belief must have {STATE_DIM} dimensions")));
    }
    b.validate()
}

/// Prediction on plain values; returns the predicted belief and the prior sigma set.
#[allow(clippy::too_many_arguments)]
pub fn predict<M: FilterModels>(
    models: &M,
    cfg: &FilterConfig,
    belief: &JointBelief,
    action: &PushAction,
    shape: &Shape2D,
    seed: u64,
    counter: u64,
) -> Result<(JointBelief, SigmaSet)> {
    check_belief(belief)?;
    let mut tape = Tape::new();
    let bound = models.bind(&mut tape);
    let tb = TapeBelief::constant(&mut tape, belief);
    let p = predict_t(&mut tape, models, &bound, &tb, action, shape, cfg, seed, counter)?;
    Ok((p.belief.value(&tape), p.sigma))
}

/// Parameter posterior on plain values: `(mean, covariance, weights, step info)`.
#[allow(clippy::too_many_arguments)]
pub fn update_parameters<M: FilterModels>(
    models: &M,
    cfg: &FilterConfig,
    belief: &JointBelief,
    action: &PushAction,
    obs: &Observation,
    shape: &Shape2D,
    seed: u64,
    counter: u64,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>, StepInfo)> {
    check_belief(belief)?;
    let mut tape = Tape::new();
    let bound = models.bind(&mut tape);
    let tb = TapeBelief::constant(&mut tape, belief);
    let pred = predict_t(&mut tape, models, &bound, &tb, action, shape, cfg, seed, counter)?;
    let p = update_parameters_t(&mut tape, models, &bound, &pred, obs, cfg, seed, counter)?;
    let info = StepInfo { weight_fallback: p.fallback, projected: p.projected, effective_sample_size: p.ess, temper: p.temper, ..Default::default() };
    Ok((
        DVector::from_column_slice(tape.value(p.mean).as_slice()),
        tape.value(p.cov).clone(),
        DVector::from_column_slice(tape.value(p.weights).as_slice()),
        info,
    ))
}

/// One filter step on plain values.
#[allow(clippy::too_many_arguments)]
pub fn step<M: FilterModels>(
    models: &M,
    cfg: &FilterConfig,
    belief: &JointBelief,
    action: &PushAction,
    obs: &Observation,
    shape: &Shape2D,
    seed: u64,
    counter: u64,
) -> Result<(JointBelief, StepInfo)> {
    check_belief(belief)?;
    let mut tape = Tape::new();
    let bound = models.bind(&mut tape);
    let tb = TapeBelief::constant(&mut tape, belief);
    let out = step_t(&mut tape, models, &bound, &tb, action, obs, shape, cfg, seed, counter)?;
    Ok((out.belief.value(&tape), out.info))
}

/// Runs the filter over a recorded push. Step `k ≥ 1` predicts with the action of record `k − 1`
/// and updates with the vision reading of record `k` and the tactile reading of record `k − 1`.
/// Returns the belief after every record, starting with `init`.
pub fn run_filter<M: FilterModels>(
    models: &M,
    cfg: &FilterConfig,
    traj: &PushTrajectory,
    shape: &Shape2D,
    init: &JointBelief,
    seed: u64,
) -> Result<(Vec<JointBelief>, Vec<StepInfo>)> {
    let mut beliefs = Vec::with_capacity(traj.len());
    let mut infos = Vec::with_capacity(traj.len());
    beliefs.push(init.clone());
    for k in 1..traj.len() {
        let prev = &traj.steps[k - 1];
        let obs = Observation::new(traj.steps[k].z_v, &prev.tactile);
        let (b, info) = step(models, cfg, &beliefs[k - 1], &prev.action, &obs, shape, seed, k as u64)?;
        beliefs.push(b);
        infos.push(info);
    }
    Ok((beliefs, infos))
}

/// Diagonal Gaussian prior over the parameters: midpoint of each range, with the standard
/// deviation of a uniform distribution over the range.
pub fn parameter_prior(ranges: &ParameterRanges) -> ([f64; PARAM_DIM], [f64; PARAM_DIM]) {
    let bounds = ranges.state_bounds();
    let mut mean = [0.0; PARAM_DIM];
    let mut var = [0.0; PARAM_DIM];
    for k in 0..PARAM_DIM {
        let (lo, hi) = bounds[k];
        mean[k] = 0.5 * (lo + hi);
        var[k] = (hi - lo).powi(2) / 12.0;
    }
    (mean, var)
}

/// Belief at push onset: pose from the first vision reading, parameters from `param_mean/var`
/// (or a carried-over posterior), zero cross-covariance.
pub fn initial_belief(z_v: &[f64; 3], vision_var: &[f64; 3], param_mean: &[f64], param_cov: &DMatrix<f64>) -> JointBelief {
    let mut mean = DVector::zeros(STATE_DIM);
    mean.rows_mut(0, POSE_DIM).copy_from_slice(z_v);
    mean.rows_mut(POSE_DIM, PARAM_DIM).copy_from_slice(param_mean);
    let mut cov = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for k in 0..POSE_DIM {
        cov[(k, k)] = vision_var[k];
    }
    cov.view_mut((POSE_DIM, POSE_DIM), (PARAM_DIM, PARAM_DIM)).copy_from(param_cov);
    JointBelief { mean, cov }
}

/// Belief snapshot for convergence plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub step: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl BeliefSnapshot {
    pub fn new(step: usize, b: &JointBelief) -> Self {
        Self {
            step,
            mean: b.mean.iter().cloned().collect(),
            cov: (0..b.cov.nrows()).map(|i| b.cov.row(i).iter().cloned().collect()).collect(),
        }
    }
}

/// Affine models: `Δψ = χ Aᵀ + a₀`, constant `Q`, tactile `χ Tᵀ + t₀`, constant `R`.
///
/// With these the filter reduces to linear-Gaussian algebra, which is what the reference tests
/// compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModels {
    /// `3 × 8`.
    pub a: DMatrix<f64>,
    pub a0: [f64; 3],
    pub q: [f64; 3],
    /// `3 × 8`.
    pub t: DMatrix<f64>,
    pub t0: [f64; 3],
    pub r: [f64; 6],
}

impl LinearModels {
    /// Pose held still with process variance `q` and observation variances `r`.
    pub fn still(q: [f64; 3], r: [f64; 6]) -> Self {
        Self { a: DMatrix::zeros(3, 8), a0: [0.0; 3], q, t: DMatrix::zeros(3, 8), t0: [0.0; 3], r }
    }
}

impl FilterModels for LinearModels {
    type Bound = ();

    fn bind<'a>(&'a self, _tape: &mut Tape<'a>) {}

    fn encode(&self, _: &mut Tape, _: &(), _: &Shape2D, _: &Pose2D, _: &PushAction, _: f64) -> Result<Option<Var>> {
        Ok(None)
    }

    fn process(&self, tape: &mut Tape, _: &(), points: Var, _: &StepContext) -> Result<(Var, Var)> {
        let c = tape.shape(points).0;
        let at = tape.constant(self.a.transpose());
        let d = tape.matmul(points, at);
        let a0 = const_row(tape, &self.a0);
        let d = tape.add_row(d, a0);
        let q = tape.constant(DMatrix::from_fn(c, 3, |_, j| self.q[j]));
        Ok((d, q))
    }

    fn tactile(&self, tape: &mut Tape, _: &(), points: Var, _: &StepContext) -> Result<Var> {
        let tt = tape.constant(self.t.transpose());
        let y = tape.matmul(points, tt);
        let t0 = const_row(tape, &self.t0);
        Ok(tape.add_row(y, t0))
    }

    fn obs_noise(&self, tape: &mut Tape, _: &(), _z: Var) -> Result<Var> {
        Ok(const_row(tape, &self.r))
    }
}
