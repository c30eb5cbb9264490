//! End-to-end training of the filter networks.
//!
//! Pushes are collected with the configured strategy, the filter is run over short windows of
//! each push on a tape, and the weighted negative log-likelihood of the ground truth under the
//! beliefs (plus supervised force and pose terms) is minimized with Adam.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::active::{lookahead_steps, sample_affordances, select_action, StrategyConfig, StrategyKind};
use crate::dualfilter::{
    initial_belief, parameter_prior, step_t, CrossCovPolicy, FilterConfig, FilterMode, Observation, TapeBelief,
};
use crate::error::{Error, Result};
use crate::gaussmath::{Constraints, JointBelief};
use crate::geometry::{rasterize_mask, MaskFrame, Pose2D, Shape2D};
use crate::nets::{vis_input, BoundModels, FilterModels, Models};
use crate::pushsim::{vision_sensor, ObjectSpec, ParameterRanges, PushSim, PushTrajectory, SensorNoise, SimConfig};
use crate::rng::{mix, rng_for, uniform, Stream};
use crate::tape::{Tape, Var};
use crate::{PARAM_DIM, POSE_DIM};

/// How a single push is set up and recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PushProtocol {
    /// Push duration (s).
    pub t_h: f64,
    /// Control period (s).
    pub dt: f64,
    /// Pusher speed (m/s).
    pub v: f64,
    /// Candidate pushes per selection.
    pub affordances: usize,
    /// Half-width of the square the object is placed in before each push (m).
    pub start_spread: f64,
    pub noise: SensorNoise,
    pub sim: SimConfig,
}

impl Default for PushProtocol {
    fn default() -> Self {
        Self {
            t_h: 15.0,
            dt: 0.1,
            v: 0.01,
            affordances: 16,
            start_spread: 0.02,
            noise: SensorNoise::default(),
            sim: SimConfig::default(),
        }
    }
}

impl PushProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_h > 0.0 && self.dt > 0.0 && self.t_h >= 2.0 * self.dt) {
            return Err(Error::Config("need t_h >= 2 dt > 0".into()));
        }
        if !(self.v > 0.0 && self.v <= self.sim.v_max) {
            return Err(Error::Config(format!("push speed must lie in (0, {}]", self.sim.v_max)));
        }
        if self.affordances == 0 {
            return Err(Error::Config("need at least one affordance".into()));
        }
        Ok(())
    }

    pub fn vision_var(&self) -> [f64; 3] {
        self.noise.vision.map(|s| (s * s).max(1e-8))
    }
}

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub nll_pose: f64,
    pub nll_param: f64,
    pub mse_tac: f64,
    pub mse_vis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nll_pose: 1.0, nll_param: 1.0, mse_tac: 0.5, mse_vis: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub epochs: usize,
    /// Windows per Adam step.
    pub batch_size: usize,
    /// Fraction of the population used for training; the rest is the validation split.
    pub train_fraction: f64,
    pub seed: u64,
    pub strategy: StrategyKind,
    /// Lookahead as a fraction of the push duration.
    pub lookahead_frac: f64,
    pub freeze_encoding: bool,
    pub mode: FilterMode,
    pub cross_cov: CrossCovPolicy,
    /// Sigma points.
    pub c: usize,
    pub liu_west_a: f64,
    /// Effective-sample-size floor of the parameter weights (fraction of the sigma points).
    pub min_ess_frac: f64,
    /// Truncated backpropagation window (filter steps).
    pub window: usize,
    /// Windows drawn from each collected push.
    pub windows_per_push: usize,
    /// Pushes collected per training object and epoch.
    pub pushes_per_object: usize,
    /// Start each window from the filter posterior at its first step (run forward from the push
    /// onset without gradients) instead of from the vision reading and the parameter block.
    pub carry_belief: bool,
    /// Windows per validation object (fixed across epochs).
    pub val_windows: usize,
    /// Stop after this many epochs without a validation improvement (0 disables).
    pub patience: usize,
    /// Global gradient-norm bound per Adam step.
    pub grad_clip: f64,
    /// Train the mask-to-pose network alongside the filter.
    pub vis_net: bool,
    pub protocol: PushProtocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            epochs: 30,
            batch_size: 8,
            train_fraction: 0.9,
            seed: 0,
            strategy: StrategyKind::Active,
            lookahead_frac: 0.2,
            freeze_encoding: true,
            mode: FilterMode::Dual,
            cross_cov: CrossCovPolicy::Constant,
            c: 50,
            liu_west_a: 0.01,
            min_ess_frac: 0.5,
            window: 10,
            windows_per_push: 1,
            pushes_per_object: 1,
            carry_belief: true,
            val_windows: 2,
            patience: 0,
            grad_clip: 10.0,
            vis_net: false,
            protocol: PushProtocol::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.nll_pose, w.nll_param, w.mse_tac, w.mse_vis].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.window == 0 || self.batch_size == 0 || self.c < 2 {
            return Err(Error::Config("window, batch size and sigma points must be positive".into()));
        }
        if !(self.lookahead_frac > 0.0) {
            return Err(Error::Config("lookahead fraction must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_ess_frac) {
            return Err(Error::Config("min_ess_frac must lie in [0, 1]".into()));
        }
        self.protocol.validate()
    }

    pub fn filter_config(&self, shape: &Shape2D) -> FilterConfig {
        let mut f = FilterConfig::new(Constraints::for_shape(shape));
        f.c = self.c;
        f.liu_west_a = self.liu_west_a;
        f.mode = self.mode;
        f.cross_cov = self.cross_cov;
        f.dt = self.protocol.dt;
        f.min_ess_frac = self.min_ess_frac;
        f
    }

    pub fn strategy_config(&self, seed: u64) -> StrategyConfig {
        StrategyConfig {
            kind: self.strategy,
            n: lookahead_steps(self.lookahead_frac, self.protocol.t_h, self.protocol.dt).max(1),
            m: self.protocol.affordances,
            seed,
            freeze_encoding: self.freeze_encoding,
        }
    }
}

/// Unweighted loss terms (averaged per step) and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub nll_pose: f64,
    pub nll_param: f64,
    pub mse_tac: f64,
    pub mse_vis: f64,
    pub total: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.nll_pose += s * o.nll_pose;
        self.nll_param += s * o.nll_param;
        self.mse_tac += s * o.mse_tac;
        self.mse_vis += s * o.mse_vis;
        self.total += s * o.total;
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.nll_pose * self.nll_pose + w.nll_param * self.nll_param + w.mse_tac * self.mse_tac + w.mse_vis * self.mse_vis
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training pushes consumed up to and including this epoch.
    pub pushes: usize,
    pub train: LossTerms,
    pub val: LossTerms,
    pub skipped_windows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Record 0 is the validation loss before training.
    pub epochs: Vec<EpochRecord>,
}

impl LossReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "epoch", "pushes", "train_nll_pose", "train_nll_param", "train_mse_tac", "train_mse_vis", "train_total",
            "val_nll_pose", "val_nll_param", "val_mse_tac", "val_mse_vis", "val_total", "skipped_windows",
        ])?;
        for e in &self.epochs {
            let (t, v) = (&e.train, &e.val);
            let row = [
                e.epoch.to_string(),
                e.pushes.to_string(),
                t.nll_pose.to_string(),
                t.nll_param.to_string(),
                t.mse_tac.to_string(),
                t.mse_vis.to_string(),
                t.total.to_string(),
                v.nll_pose.to_string(),
                v.nll_param.to_string(),
                v.mse_tac.to_string(),
                v.mse_vis.to_string(),
                v.total.to_string(),
                e.skipped_windows.to_string(),
            ];
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn final_val(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val.total)
    }

    pub fn best_val(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val.total).fold(None, |a, v| Some(a.map_or(v, |a: f64| a.min(v))))
    }

    /// Training pushes after which the validation loss first drops to `threshold` or below.
    pub fn pushes_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val.total <= threshold).map(|e| e.pushes)
    }
}

/// `½[(v − μ)ᵀ Σ⁻¹ (v − μ) + ln det Σ + n ln 2π]` with `mean` (`1 × n`) and `cov` on the tape.
/// The residual entry `wrap` (if any) is an angle.
pub fn gaussian_nll_t(tape: &mut Tape, value: &[f64], mean: Var, cov: Var, wrap: Option<usize>) -> Result<Var> {
    let n = value.len();
    let v = tape.constant(DMatrix::from_row_slice(1, n, value));
    let mut r = tape.sub(v, mean);
    if let Some(k) = wrap {
        let mut parts = Vec::new();
        if k > 0 {
            parts.push(tape.cols(r, 0, k));
        }
        let c = tape.cols(r, k, 1);
        parts.push(tape.wrap_angle(c));
        if k + 1 < n {
            parts.push(tape.cols(r, k + 1, n - k - 1));
        }
        r = tape.hstack(&parts);
    }
    let l = tape.cholesky(cov)?;
    let d = tape.diag(l);
    let ld = tape.ln(d);
    let logdet = tape.sum(ld);
    let logdet = tape.scale(logdet, 2.0);
    let inv = tape.inverse_spd(cov)?;
    let rt = tape.transpose(r);
    let ri = tape.matmul(r, inv);
    let q = tape.matmul(ri, rt);
    let s = tape.add(q, logdet);
    let s = tape.add_scalar(s, n as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(tape.scale(s, 0.5))
}

/// Plain-value Gaussian negative log-likelihood.
pub fn gaussian_nll(value: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(DMatrix::from_row_slice(1, mean.len(), mean));
    let c = tape.constant(cov.clone());
    let l = gaussian_nll_t(&mut tape, value, m, c, None)?;
    Ok(tape.scalar(l))
}

/// Parameter prior as a belief block: `(mean, covariance)`.
pub fn prior_block(ranges: &ParameterRanges) -> (Vec<f64>, DMatrix<f64>) {
    let (m, v) = parameter_prior(ranges);
    (m.to_vec(), DMatrix::from_diagonal(&DVector::from_column_slice(&v)))
}

/// Loss of a window of `len` filter steps starting at record `start`. The filter starts from the
/// vision reading of that record and the parameter prior.
#[allow(clippy::too_many_arguments)]
pub fn window_loss_t(
    tape: &mut Tape,
    models: &Models,
    bound: &BoundModels,
    traj: &PushTrajectory,
    shape: &Shape2D,
    start: usize,
    len: usize,
    init: &JointBelief,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Var, LossTerms)> {
    if traj.len() < 2 || start + 1 >= traj.len() {
        return Err(Error::InvalidInput("window needs at least two records".into()));
    }
    let end = (start + len).min(traj.len() - 1);
    let fcfg = cfg.filter_config(shape);
    let w = &cfg.weights;
    let gt_params = traj.params.to_state();
    let mut belief = TapeBelief::constant(tape, init);
    let mut terms = LossTerms::default();
    let mut total = tape.scalar_const(0.0);
    let steps = (end - start) as f64;
    for k in start + 1..=end {
        let prev = &traj.steps[k - 1];
        let rec = &traj.steps[k];
        let obs = Observation::new(rec.z_v, &prev.tactile);
        let out = step_t(tape, models, bound, &belief, &prev.action, &obs, shape, &fcfg, seed, k as u64)?;
        belief = out.belief;
        let pm = tape.cols(belief.mean, 0, POSE_DIM);
        let pc = tape.slice(belief.cov, 0, 0, POSE_DIM, POSE_DIM);
        let fm = tape.cols(belief.mean, POSE_DIM, PARAM_DIM);
        let fc = tape.slice(belief.cov, POSE_DIM, POSE_DIM, PARAM_DIM, PARAM_DIM);
        let nll_pose = gaussian_nll_t(tape, &rec.pose.to_array(), pm, pc, Some(2))?;
        let nll_param = gaussian_nll_t(tape, &gt_params, fm, fc, None)?;
        terms.nll_pose += tape.scalar(nll_pose) / steps;
        terms.nll_param += tape.scalar(nll_param) / steps;
        let a = tape.scale(nll_pose, w.nll_pose);
        let b = tape.scale(nll_param, w.nll_param);
        total = tape.add(total, a);
        total = tape.add(total, b);

        if w.mse_tac > 0.0 {
            let mut state = [0.0; 8];
            state[..3].copy_from_slice(&rec.pose.to_array());
            state[3..].copy_from_slice(&gt_params);
            let x = tape.constant(DMatrix::from_row_slice(1, 8, &state));
            let pred = models.tactile(tape, bound, x, &out.ctx)?;
            let target = tape.constant(DMatrix::from_row_slice(1, 3, &prev.tactile.to_array()));
            let d = tape.sub(pred, target);
            let sq = tape.square(d);
            let mse = tape.sum(sq);
            terms.mse_tac += tape.scalar(mse) / steps;
            let c = tape.scale(mse, w.mse_tac);
            total = tape.add(total, c);
        }
        if cfg.vis_net && w.mse_vis > 0.0 {
            let mask = tape.constant(vis_input(shape, &rec.pose)?);
            let pred = models.vis_net(tape, bound, mask)?;
            let target = tape.constant(DMatrix::from_row_slice(1, 3, &rec.pose.to_array()));
            let d = tape.sub(pred, target);
            let sq = tape.square(d);
            let mse = tape.sum(sq);
            terms.mse_vis += tape.scalar(mse) / steps;
            let c = tape.scale(mse, w.mse_vis);
            total = tape.add(total, c);
        }
    }
    let total = tape.scale(total, 1.0 / steps);
    terms.total = terms.weighted_total(w);
    Ok((total, terms))
}

/// Initial belief of a window: vision reading at `start` and the given parameter block.
pub fn window_init(traj: &PushTrajectory, start: usize, protocol: &PushProtocol, prior: &(Vec<f64>, DMatrix<f64>)) -> JointBelief {
    initial_belief(&traj.steps[start].z_v, &protocol.vision_var(), &prior.0, &prior.1)
}

/// Loss and gradients (same layout as `models`) of one window.
#[allow(clippy::too_many_arguments)]
pub fn window_loss(
    models: &Models,
    traj: &PushTrajectory,
    shape: &Shape2D,
    start: usize,
    len: usize,
    init: &JointBelief,
    cfg: &TrainConfig,
    seed: u64,
    with_grads: bool,
) -> Result<(LossTerms, Option<Models>)> {
    let mut tape = Tape::new();
    let bound = models.bind(&mut tape);
    let (loss, terms) = window_loss_t(&mut tape, models, &bound, traj, shape, start, len, init, cfg, seed)?;
    if !terms.total.is_finite() {
        return Err(Error::NotPsd { jitter: f64::NAN });
    }
    let grads = with_grads.then(|| {
        let g = tape.backward(loss);
        let mut acc = models.zeros_like();
        models.accumulate_grads(&bound, &g, &mut acc);
        acc
    });
    Ok((terms, grads))
}

/// Loss of a whole push with truncated backpropagation: the filter runs over consecutive windows
/// of `cfg.window` steps, each starting from the (detached) posterior of the previous one.
pub fn episode_loss(
    models: &Models,
    traj: &PushTrajectory,
    shape: &Shape2D,
    prior: &(Vec<f64>, DMatrix<f64>),
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossTerms, Models)> {
    if traj.len() < 2 {
        return Err(Error::InvalidInput("trajectory needs at least two records".into()));
    }
    let mut grads = models.zeros_like();
    let mut terms = LossTerms::default();
    let mut belief = window_init(traj, 0, &cfg.protocol, prior);
    let mut start = 0;
    let total_steps = (traj.len() - 1) as f64;
    while start + 1 < traj.len() {
        let len = cfg.window.min(traj.len() - 1 - start);
        let mut tape = Tape::new();
        let bound = models.bind(&mut tape);
        let (loss, t) = window_loss_t(&mut tape, models, &bound, traj, shape, start, len, &belief, cfg, seed)?;
        let share = len as f64 / total_steps;
        let scaled = tape.scale(loss, share);
        let g = tape.backward(scaled);
        models.accumulate_grads(&bound, &g, &mut grads);
        terms.add_scaled(&t, share);
        // Detach: the next window starts from the value of this posterior.
        belief = carry_from(models, traj, shape, start, len, &belief, cfg, seed)?;
        start += len;
    }
    Ok((terms, grads))
}

#[allow(clippy::too_many_arguments)]
fn carry_from(
    models: &Models,
    traj: &PushTrajectory,
    shape: &Shape2D,
    start: usize,
    len: usize,
    init: &JointBelief,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<JointBelief> {
    let fcfg = cfg.filter_config(shape);
    let mut b = init.clone();
    for k in start + 1..=start + len {
        let prev = &traj.steps[k - 1];
        let obs = Observation::new(traj.steps[k].z_v, &prev.tactile);
        b = crate::dualfilter::step(models, &fcfg, &b, &prev.action, &obs, shape, seed, k as u64)?.0;
    }
    Ok(b)
}

/// Filter beliefs after each step in `starts` (ascending), running forward from `init` at step 0
/// without recording gradients. A start of 0 yields `init`.
pub fn carried_beliefs(
    models: &Models,
    traj: &PushTrajectory,
    shape: &Shape2D,
    init: &JointBelief,
    cfg: &TrainConfig,
    seed: u64,
    starts: &[usize],
) -> Result<Vec<JointBelief>> {
    if starts.windows(2).any(|w| w[0] > w[1]) || starts.last().is_some_and(|&s| s >= traj.len()) {
        return Err(Error::InvalidInput("window starts must be ascending and inside the trajectory".into()));
    }
    let fcfg = cfg.filter_config(shape);
    let mut out = Vec::with_capacity(starts.len());
    let mut b = init.clone();
    let mut k = 0;
    for &s in starts {
        while k < s {
            k += 1;
            let prev = &traj.steps[k - 1];
            let obs = Observation::new(traj.steps[k].z_v, &prev.tactile);
            b = crate::dualfilter::step(models, &fcfg, &b, &prev.action, &obs, shape, seed, k as u64)?.0;
        }
        out.push(b.clone());
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of `params` along `grads` (matching shapes).
    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[&DMatrix<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn step_models(&mut self, models: &mut Models, grads: &Models) {
        let g = grads.tensors();
        let mut p = models.tensors_mut();
        self.step(&mut p, &g);
    }
}

/// Seeded train/validation split.
pub fn split_population(pop: &[ObjectSpec], train_fraction: f64, seed: u64) -> (Vec<ObjectSpec>, Vec<ObjectSpec>) {
    let mut idx: Vec<usize> = (0..pop.len()).collect();
    idx.shuffle(&mut rng_for(seed, 0, Stream::Split));
    let n_train = ((pop.len() as f64 * train_fraction).round() as usize).clamp(1.min(pop.len()), pop.len());
    let train = idx[..n_train].iter().map(|&i| pop[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| pop[i].clone()).collect();
    (train, val)
}

/// Object placement before push `counter`: small offset from the workspace center, any heading.
pub fn start_pose(seed: u64, counter: u64, spread: f64) -> Pose2D {
    let mut rng = rng_for(seed, counter, Stream::StartPose);
    let x = uniform(&mut rng, -spread, spread);
    let y = uniform(&mut rng, -spread, spread);
    let th = uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
    Pose2D::new(x, y, th)
}

/// A recorded push and the information gains of the candidates (active strategy only).
#[derive(Debug, Clone)]
pub struct CollectedPush {
    pub trajectory: PushTrajectory,
    pub scores: Vec<f64>,
}

/// Places the object, selects a push from the belief built from the onset vision reading and
/// `param_block`, and simulates it. The onset reading is stored as record 0's vision sample.
#[allow(clippy::too_many_arguments)]
pub fn collect_push<M: FilterModels>(
    spec: &ObjectSpec,
    models: &M,
    fcfg: &FilterConfig,
    strategy: &StrategyConfig,
    protocol: &PushProtocol,
    param_block: &(Vec<f64>, DMatrix<f64>),
    seed: u64,
    push_index: u64,
) -> Result<CollectedPush> {
    let pose0 = start_pose(seed, push_index, protocol.start_spread);
    let mut vis_rng = rng_for(seed, push_index, Stream::Vision);
    let z0 = vision_sensor(&pose0, &protocol.noise.vision, &mut vis_rng);
    let belief = initial_belief(&z0, &protocol.vision_var(), &param_block.0, &param_block.1);
    let seen = Pose2D::new(z0[0], z0[1], z0[2]);
    let set = sample_affordances(&spec.shape, &seen, protocol.affordances, protocol.v, mix(seed, push_index))?;
    let (action, scores) = select_action(&belief, &set, strategy, &spec.shape, models, fcfg, push_index)?;
    let sim = PushSim::new(protocol.sim);
    let mut trajectory =
        sim.rollout(&spec.shape, &spec.params, &pose0, &action, protocol.t_h, protocol.dt, &protocol.noise, mix(seed, push_index))?;
    if let Some(first) = trajectory.steps.first_mut() {
        first.z_v = z0;
    }
    Ok(CollectedPush { trajectory, scores })
}

/// Fixed validation windows: pushes with the uniform strategy and evenly spaced window starts.
fn validation_set(val: &[ObjectSpec], cfg: &TrainConfig, models: &Models, prior: &(Vec<f64>, DMatrix<f64>)) -> Result<Vec<(usize, PushTrajectory, usize)>> {
    let mut out = Vec::new();
    let strategy = StrategyConfig { kind: StrategyKind::Uniform, ..cfg.strategy_config(cfg.seed) };
    for (i, spec) in val.iter().enumerate() {
        let fcfg = cfg.filter_config(&spec.shape);
        let push = collect_push(spec, models, &fcfg, &strategy, &cfg.protocol, prior, mix(cfg.seed, 0xDA7A), i as u64)?;
        let traj = push.trajectory;
        if traj.len() < 2 {
            continue;
        }
        let span = traj.len().saturating_sub(cfg.window + 1).max(1);
        for j in 0..cfg.val_windows {
            out.push((i, traj.clone(), span * j / cfg.val_windows.max(1)));
        }
    }
    Ok(out)
}

/// Mean validation loss over the fixed windows.
pub fn validation_loss(
    models: &Models,
    val: &[ObjectSpec],
    windows: &[(usize, PushTrajectory, usize)],
    cfg: &TrainConfig,
    prior: &(Vec<f64>, DMatrix<f64>),
) -> Result<(LossTerms, usize)> {
    let mut acc = LossTerms::default();
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (j, (i, traj, start)) in windows.iter().enumerate() {
        let seed = mix(cfg.seed, j as u64);
        let shape = &val[*i].shape;
        let init = if cfg.carry_belief {
            match carried_beliefs(models, traj, shape, &window_init(traj, 0, &cfg.protocol, prior), cfg, seed, &[*start]) {
                Ok(mut b) => b.remove(0),
                Err(e) if e.is_numerical() => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
        } else {
            window_init(traj, *start, &cfg.protocol, prior)
        };
        match window_loss(models, traj, shape, *start, cfg.window, &init, cfg, seed, false) {
            Ok((t, _)) => {
                acc.add_scaled(&t, 1.0);
                n += 1;
            }
            Err(e) if e.is_numerical() => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::TrainingDiverged { epoch: 0, last_good: Box::new(models.clone()) });
    }
    let mut out = LossTerms::default();
    out.add_scaled(&acc, 1.0 / n as f64);
    Ok((out, skipped))
}

fn grad_norm(g: &Models) -> f64 {
    g.tensors().iter().map(|t| t.norm_squared()).sum::<f64>().sqrt()
}

fn scale_grads(g: &mut Models, s: f64) {
    for t in g.tensors_mut() {
        *t *= s;
    }
}

/// Trains the networks on `population`, holding out `1 − train_fraction` of it for validation.
pub fn train(population: &[ObjectSpec], cfg: &TrainConfig) -> Result<(Models, LossReport)> {
    train_from(population, cfg, Models::new(cfg.seed))
}

/// Like [`train`], starting from `models`.
pub fn train_from(population: &[ObjectSpec], cfg: &TrainConfig, mut models: Models) -> Result<(Models, LossReport)> {
    cfg.validate()?;
    if population.len() < 2 {
        return Err(Error::InvalidInput("population needs at least two objects".into()));
    }
    let (train_set, val_set) = split_population(population, cfg.train_fraction, cfg.seed);
    let val_set = if val_set.is_empty() { train_set[..1].to_vec() } else { val_set };
    let prior = prior_block(&ParameterRanges::table_one());
    let windows = validation_set(&val_set, cfg, &models, &prior)?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut report = LossReport::default();
    let (v0, s0) = validation_loss(&models, &val_set, &windows, cfg, &prior)?;
    report.epochs.push(EpochRecord { epoch: 0, pushes: 0, train: LossTerms::default(), val: v0, skipped_windows: s0 });
    let mut best = v0.total;
    let mut since_best = 0usize;
    let mut pushes = 0usize;
    let mut push_counter = 0u64;
    let mut last_good = models.clone();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, epoch as u64, Stream::Population));
        let mut acc_terms = LossTerms::default();
        let mut n_windows = 0usize;
        let mut skipped = 0usize;
        let mut batch = models.zeros_like();
        let mut in_batch = 0usize;
        for &oi in &order {
            let spec = &train_set[oi];
            let fcfg = cfg.filter_config(&spec.shape);
            for _ in 0..cfg.pushes_per_object {
                push_counter += 1;
                let strategy = cfg.strategy_config(mix(cfg.seed, push_counter));
                let push = collect_push(spec, &models, &fcfg, &strategy, &cfg.protocol, &prior, cfg.seed, push_counter)?;
                pushes += 1;
                let traj = push.trajectory;
                if traj.len() < 2 {
                    continue;
                }
                let mut seg_rng = rng_for(cfg.seed, push_counter, Stream::Segment);
                let max_start = traj.len().saturating_sub(cfg.window + 1);
                let mut starts: Vec<usize> =
                    (0..cfg.windows_per_push).map(|_| if max_start == 0 { 0 } else { seg_rng.gen_range(0..=max_start) }).collect();
                starts.sort_unstable();
                let fseed = mix(cfg.seed, push_counter);
                let inits = if cfg.carry_belief {
                    match carried_beliefs(&models, &traj, &spec.shape, &window_init(&traj, 0, &cfg.protocol, &prior), cfg, fseed, &starts) {
                        Ok(b) => b,
                        Err(e) if e.is_numerical() => {
                            log::debug!("skipping push: {e}");
                            skipped += starts.len();
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                } else {
                    starts.iter().map(|&s| window_init(&traj, s, &cfg.protocol, &prior)).collect()
                };
                for (&start, init) in starts.iter().zip(&inits) {
                    match window_loss(&models, &traj, &spec.shape, start, cfg.window, init, cfg, fseed, true) {
                        Ok((t, Some(g))) => {
                            for (a, b) in batch.tensors_mut().into_iter().zip(g.tensors()) {
                                *a += b;
                            }
                            acc_terms.add_scaled(&t, 1.0);
                            n_windows += 1;
                            in_batch += 1;
                        }
                        Ok(_) => {}
                        Err(e) if e.is_numerical() => {
                            log::debug!("skipping window: {e}");
                            skipped += 1;
                        }
                        Err(e) => return Err(e),
                    }
                    if in_batch == cfg.batch_size {
                        apply_batch(&mut adam, &mut models, &mut batch, in_batch, cfg.grad_clip);
                        in_batch = 0;
                        if !models.is_finite() {
                            return Err(Error::TrainingDiverged { epoch, last_good: Box::new(last_good) });
                        }
                    }
                }
            }
        }
        if in_batch > 0 {
            apply_batch(&mut adam, &mut models, &mut batch, in_batch, cfg.grad_clip);
        }
        if !models.is_finite() || n_windows == 0 || !acc_terms.total.is_finite() {
            return Err(Error::TrainingDiverged { epoch, last_good: Box::new(last_good) });
        }
        let mut train_terms = LossTerms::default();
        train_terms.add_scaled(&acc_terms, 1.0 / n_windows as f64);
        let (val, vs) = match validation_loss(&models, &val_set, &windows, cfg, &prior) {
            Ok(v) => v,
            Err(Error::TrainingDiverged { .. }) => return Err(Error::TrainingDiverged { epoch, last_good: Box::new(last_good) }),
            Err(e) => return Err(e),
        };
        if !val.total.is_finite() {
            return Err(Error::TrainingDiverged { epoch, last_good: Box::new(last_good) });
        }
        log::info!("epoch {epoch}: train {:.4} val {:.4} ({} pushes)", train_terms.total, val.total, pushes);
        report.epochs.push(EpochRecord { epoch, pushes, train: train_terms, val, skipped_windows: skipped + vs });
        last_good = models.clone();
        if val.total < best - 1e-4 * best.abs().max(1.0) {
            best = val.total;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::info!("validation loss plateaued; stopping after epoch {epoch}");
                break;
            }
        }
    }
    Ok((models, report))
}

fn apply_batch(adam: &mut Adam, models: &mut Models, batch: &mut Models, n: usize, clip: f64) {
    scale_grads(batch, 1.0 / n as f64);
    let norm = grad_norm(batch);
    if norm.is_finite() && norm > clip {
        scale_grads(batch, clip / norm);
    }
    adam.step_models(models, batch);
    for t in batch.tensors_mut() {
        t.fill(0.0);
    }
}

/// Trains only the mask-to-pose network with a squared-error loss on random placements.
pub fn train_visnet(models: &mut Models, shapes: &[Shape2D], steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    if shapes.is_empty() {
        return Err(Error::InvalidInput("need at least one shape".into()));
    }
    let frame = MaskFrame::workspace();
    let mut adam = Adam::new(lr, 0.9, 0.999, 1e-8);
    let mut losses = Vec::with_capacity(steps);
    let mut rng = rng_for(seed, 0, Stream::StartPose);
    for _ in 0..steps {
        let mut grads = models.zeros_like();
        let mut total = 0.0;
        for _ in 0..batch {
            let shape = &shapes[rng.gen_range(0..shapes.len())];
            let pose = Pose2D::new(uniform(&mut rng, -0.1, 0.1), uniform(&mut rng, -0.1, 0.1), uniform(&mut rng, -3.0, 3.0));
            let mask = rasterize_mask(shape, &pose, &frame)?;
            let mut tape = Tape::new();
            let bound = models.bind(&mut tape);
            let x = tape.constant(DMatrix::from_column_slice(mask.data.len(), 1, &mask.data));
            let pred = models.vis_net(&mut tape, &bound, x)?;
            let target = tape.constant(DMatrix::from_row_slice(1, 3, &pose.to_array()));
            let d = tape.sub(pred, target);
            // The heading is only weakly visible in a symmetric mask; weight it down.
            let wts = tape.constant(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.01]));
            let d = tape.mul_row(d, wts);
            let sq = tape.square(d);
            let l = tape.sum(sq);
            total += tape.scalar(l);
            let g = tape.backward(l);
            models.accumulate_grads(&bound, &g, &mut grads);
        }
        scale_grads(&mut grads, 1.0 / batch as f64);
        let vis_only: Vec<&DMatrix<f64>> = grads.vis.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
        let mut params: Vec<&mut DMatrix<f64>> = models.vis.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect();
        adam.step(&mut params, &vis_only);
        losses.push(total / batch as f64);
    }
    Ok(losses)
}

/// Writes a checkpoint and the loss report into `dir`.
pub fn save_run(dir: &Path, models: &Models, report: &LossReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    models.save(&dir.join("checkpoint.json"))?;
    report.write_csv(std::fs::File::create(dir.join("loss.csv"))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{default_library, rectangle};
    use crate::pushsim::generate_population;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            c: 10,
            epochs: 2,
            batch_size: 4,
            strategy: StrategyKind::Uniform,
            protocol: PushProtocol { t_h: 2.0, affordances: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn nll_unit_gaussian() {
        let v = gaussian_nll(&[0.0], &[0.0], &DMatrix::identity(1, 1)).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn nll_convex_in_log_sigma() {
        // Residual 0.1: minimum at σ = 0.1.
        let f = |ls: f64| gaussian_nll(&[0.1], &[0.0], &DMatrix::from_element(1, 1, (2.0 * ls).exp())).unwrap();
        let grid: Vec<f64> = (0..41).map(|i| -5.0 + 0.1 * i as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|l| f(*l)).collect();
        for w in vals.windows(3) {
            assert!(w[0] + w[2] - 2.0 * w[1] > 0.0);
        }
        let imin = (0..vals.len()).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
        assert_abs_diff_eq!(grid[imin], 0.1f64.ln(), epsilon = 0.051);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        // f(x) = (x − 3)², reference written out directly.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut adam = Adam::new(lr, b1, b2, eps);
        let mut x = DMatrix::from_element(1, 1, 0.0);
        let (mut xr, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = DMatrix::from_element(1, 1, 2.0 * (x[0] - 3.0));
            adam.step(&mut [&mut x], &[&g]);
            let gr = 2.0 * (xr - 3.0);
            m = b1 * m + (1.0 - b1) * gr;
            v = b2 * v + (1.0 - b2) * gr * gr;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            xr -= lr * mh / (vh.sqrt() + eps);
            assert!((x[0] - xr).abs() <= 1e-12);
        }
        assert!((x[0] - 3.0).abs() < 0.05);
    }

    fn one_push(cfg: &TrainConfig) -> (ObjectSpec, PushTrajectory) {
        let shape = rectangle("sq", 0.09, 0.09);
        let spec = ObjectSpec { shape: shape.clone(), params: crate::ObjectParams { m: 0.8, mu: 0.5, com_x: 0.01, com_y: -0.01, i_z: 1e-3 } };
        let models = Models::new(0);
        let fcfg = cfg.filter_config(&shape);
        let prior = prior_block(&ParameterRanges::table_one());
        let push = collect_push(&spec, &models, &fcfg, &cfg.strategy_config(1), &cfg.protocol, &prior, 5, 0).unwrap();
        (spec, push.trajectory)
    }

    #[test]
    fn zero_weights_zero_gradients() {
        let mut cfg = small_cfg();
        cfg.weights = LossWeights { nll_pose: 0.0, nll_param: 0.0, mse_tac: 0.0, mse_vis: 0.0 };
        let (spec, traj) = one_push(&cfg);
        let prior = prior_block(&ParameterRanges::table_one());
        let init = window_init(&traj, 0, &cfg.protocol, &prior);
        let models = Models::new(0);
        let (t, g) = window_loss(&models, &traj, &spec.shape, 0, 3, &init, &cfg, 1, true).unwrap();
        assert_eq!(t.total, 0.0);
        assert!(g.unwrap().tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn gradients_reach_every_filter_tensor() {
        let cfg = small_cfg();
        let (spec, traj) = one_push(&cfg);
        let prior = prior_block(&ParameterRanges::table_one());
        let init = window_init(&traj, 0, &cfg.protocol, &prior);
        let models = Models::new(0);
        let (_, g) = window_loss(&models, &traj, &spec.shape, 0, 5, &init, &cfg, 1, true).unwrap();
        let g = g.unwrap();
        for net in [&g.encoder, &g.process, &g.tactile, &g.obs_noise] {
            for (i, l) in net.layers.iter().enumerate() {
                assert!(l.w.norm() > 0.0, "{} layer {i} weight gradient is zero", net.name);
            }
        }
    }

    #[test]
    fn episode_loss_covers_the_push() {
        let cfg = small_cfg();
        let (spec, traj) = one_push(&cfg);
        let prior = prior_block(&ParameterRanges::table_one());
        let (t, g) = episode_loss(&Models::new(0), &traj, &spec.shape, &prior, &cfg, 2).unwrap();
        assert!(t.total.is_finite());
        assert_abs_diff_eq!(t.total, t.weighted_total(&cfg.weights), epsilon = 1e-9 * t.total.abs().max(1.0));
        assert!(g.is_finite());
    }

    #[test]
    fn carried_beliefs_match_stepwise_filtering() {
        let cfg = small_cfg();
        let (spec, traj) = one_push(&cfg);
        let prior = prior_block(&ParameterRanges::table_one());
        let init = window_init(&traj, 0, &cfg.protocol, &prior);
        let models = Models::new(0);
        let got = carried_beliefs(&models, &traj, &spec.shape, &init, &cfg, 4, &[0, 3, 3, 7]).unwrap();
        assert_eq!(got.len(), 4);
        assert!(got[0] == init);
        assert!(got[1] == got[2]);
        let b3 = carry_from(&models, &traj, &spec.shape, 0, 3, &init, &cfg, 4).unwrap();
        assert!(got[1] == b3);
        let b7 = carry_from(&models, &traj, &spec.shape, 3, 4, &b3, &cfg, 4).unwrap();
        assert!(got[3] == b7);
        assert!(carried_beliefs(&models, &traj, &spec.shape, &init, &cfg, 4, &[5, 2]).is_err());
        assert!(carried_beliefs(&models, &traj, &spec.shape, &init, &cfg, 4, &[traj.len()]).is_err());
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let pop = generate_population(&ParameterRanges::table_one(), &default_library(), 6, 3).unwrap();
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let (a, ra) = train(&pop, &cfg).unwrap();
        let (b, rb) = train(&pop, &cfg).unwrap();
        assert!(a == b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 2);
        let mut buf = Vec::new();
        ra.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn split_is_seeded_partition() {
        let pop = generate_population(&ParameterRanges::table_one(), &default_library(), 20, 3).unwrap();
        let (t, v) = split_population(&pop, 0.9, 4);
        assert_eq!((t.len(), v.len()), (18, 2));
        assert_eq!(split_population(&pop, 0.9, 4).1, v);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.train_fraction = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.train_fraction = 0.9;
        c.weights.mse_tac = -1.0;
        assert!(c.validate().is_err());
    }
}
