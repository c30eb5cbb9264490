//! Learned models of the filter and their checkpoints.
//!
//! Every network is a [`NetParams`] layer list evaluated on a [`Tape`], so gradients of any loss
//! built from the outputs reach the weights. Inputs are normalized by fixed affine maps before the
//! first layer and outputs are mapped to physical units by fixed scales after the last one.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{action_map, rasterize_mask, wrap_angle, MaskFrame, Pose2D, PushAction, Shape2D, Vec2, MASK_SIZE};
use crate::rng::{rng_for, Stream};
use crate::tape::{Tape, Var};
use crate::{PARAM_DIM, POSE_DIM, STATE_DIM};

/// Side of the egocentric frame the encoder sees (m).
pub const ENCODER_EXTENT: f64 = 0.3;
pub const ENCODING_DIM: usize = 16;
/// Floor added to every predicted variance.
pub const VAR_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    /// 3×3 convolution over an `h × w` map.
    Conv3x3 { h: usize, w: usize, stride: usize, pad: usize },
}

/// One layer: `w` is `in × out` (dense) or `(9·cin) × cout` (conv); `b` is `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    kind: LayerKind,
    activation: Activation,
    rows: usize,
    cols: usize,
    /// Row-major weights.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Serialize for Layer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let w = (0..self.w.nrows()).flat_map(|i| (0..self.w.ncols()).map(move |j| (i, j))).map(|ij| self.w[ij]).collect();
        LayerRecord {
            kind: self.kind,
            activation: self.activation,
            rows: self.w.nrows(),
            cols: self.w.ncols(),
            w,
            b: self.b.iter().cloned().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Layer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = LayerRecord::deserialize(d)?;
        if r.w.len() != r.rows * r.cols || r.b.len() != r.cols {
            return Err(serde::de::Error::custom("layer data does not match its declared shape"));
        }
        Ok(Layer {
            kind: r.kind,
            activation: r.activation,
            w: DMatrix::from_row_slice(r.rows, r.cols, &r.w),
            b: DMatrix::from_row_slice(1, r.cols, &r.b),
        })
    }
}

/// Ordered layer list of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Tape handles of a network's weights.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub layers: Vec<(Var, Var)>,
}

fn he_uniform(rows: usize, cols: usize, fan_in: usize, gain: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let lim = gain * (6.0 / fan_in as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim))
}

impl NetParams {
    /// Dense network with ReLU hidden layers and a linear output layer.
    pub fn mlp(name: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for k in 0..sizes.len() - 1 {
            let last = k == sizes.len() - 2;
            let gain = if last { 0.1 } else { 1.0 };
            layers.push(Layer {
                kind: LayerKind::Dense,
                activation: if last { Activation::Linear } else { Activation::Relu },
                w: he_uniform(sizes[k], sizes[k + 1], sizes[k], gain, rng),
                b: DMatrix::zeros(1, sizes[k + 1]),
            });
        }
        Self { name: name.into(), layers }
    }

    /// Stride-2 ReLU convolutions over a square map followed by a dense head.
    pub fn cnn(name: &str, side: usize, channels: &[usize], dense: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut hw = side;
        for k in 0..channels.len() - 1 {
            let fan_in = 9 * channels[k];
            layers.push(Layer {
                kind: LayerKind::Conv3x3 { h: hw, w: hw, stride: 2, pad: 1 },
                activation: Activation::Relu,
                w: he_uniform(fan_in, channels[k + 1], fan_in, 1.0, rng),
                b: DMatrix::zeros(1, channels[k + 1]),
            });
            hw /= 2;
        }
        let mut sizes = vec![hw * hw * channels[channels.len() - 1]];
        sizes.extend_from_slice(dense);
        layers.extend(Self::mlp(name, &sizes, rng).layers);
        Self { name: name.into(), layers }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundNet {
        BoundNet { layers: self.layers.iter().map(|l| (tape.param(&l.w), tape.param(&l.b))).collect() }
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0].kind {
            LayerKind::Dense => self.layers[0].w.nrows(),
            LayerKind::Conv3x3 { h, w, .. } => h * w * (self.layers[0].w.nrows() / 9),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.ncols()).unwrap_or(0)
    }

    /// Forward pass. Dense inputs are `batch × in`; convolutional inputs are `(h·w) × cin`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundNet, input: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(input);
        match self.layers[0].kind {
            LayerKind::Dense if cols != self.layers[0].w.nrows() => {
                return Err(Error::BadInput(format!("{}: expected {} inputs, got {cols}", self.name, self.layers[0].w.nrows())));
            }
            LayerKind::Conv3x3 { h, w, .. } if rows != h * w || 9 * cols != self.layers[0].w.nrows() => {
                return Err(Error::BadInput(format!("{}: expected a {h}x{w} map, got {rows}x{cols}", self.name)));
            }
            _ => {}
        }
        if !tape.value(input).iter().all(|v| v.is_finite()) {
            return Err(Error::BadInput(format!("{}: non-finite input", self.name)));
        }
        let mut x = input;
        let mut prev_conv = false;
        for (layer, &(w, b)) in self.layers.iter().zip(&bound.layers) {
            x = match layer.kind {
                LayerKind::Conv3x3 { h, w: wd, stride, pad } => {
                    prev_conv = true;
                    tape.conv2d(x, w, b, h, wd, stride, pad)
                }
                LayerKind::Dense => {
                    if prev_conv {
                        // Flatten the feature map, pixel-major within each channel.
                        let n = tape.value(x).len();
                        x = tape.reshape(x, 1, n);
                        prev_conv = false;
                    }
                    let y = tape.matmul(x, w);
                    tape.add_row(y, b)
                }
            };
            if layer.activation == Activation::Relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Fixed input normalization and output scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// State center subtracted before the networks (pose entries are relative to the step context).
    pub state_offset: [f64; STATE_DIM],
    pub state_scale: [f64; STATE_DIM],
    /// Per-step pose change per unit network output.
    pub delta_scale: [f64; POSE_DIM],
    /// Process variance per unit softplus output.
    pub q_scale: [f64; POSE_DIM],
    /// Contact force per unit network output (N).
    pub force_scale: f64,
    /// Observation variance per unit softplus output.
    pub r_scale: [f64; 6],
    pub obs_offset: [f64; 6],
    pub obs_scale: [f64; 6],
    /// Pose per unit VisNet output.
    pub vis_scale: [f64; POSE_DIM],
}

impl Default for Scaling {
    fn default() -> Self {
        Self {
            state_offset: [0.0, 0.0, 0.0, 0.7, 0.5, 0.0, 0.005, 1.0],
            state_scale: [0.05, 0.05, 0.5, 0.4, 0.15, 0.02, 0.02, 0.4],
            delta_scale: [0.003, 0.003, 0.02],
            q_scale: [1e-6, 1e-6, 1e-4],
            force_scale: 5.0,
            r_scale: [1e-4, 1e-4, 1e-3, 0.5, 0.5, 0.1],
            obs_offset: [0.0, 0.0, 0.0, 0.0, 0.0, 0.5],
            obs_scale: [0.1, 0.1, 1.0, 3.0, 3.0, 0.5],
            vis_scale: [0.1, 0.1, 1.0],
        }
    }
}

/// Where the networks are evaluated in one filter step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    /// Pose the sigma-point poses are expressed relative to (the prior pose mean).
    pub center: [f64; 3],
    /// The same center as a `1 × 3` tape value, so that gradients flow through it.
    pub center_var: Option<Var>,
    /// Shape-action encoding, `1 × 16` (shared) or `C × 16` (per point), if the models use one.
    pub encoding: Option<Var>,
    /// Push direction (rad). The learned models work in the frame whose x axis points along it.
    pub heading: f64,
}

/// Row-vector map taking world-frame planar offsets into the frame rotated by `heading`
/// (`inverse = false`) or back (`inverse = true`). Extra dimensions pass through.
fn heading_rotation(heading: f64, dim: usize, inverse: bool) -> DMatrix<f64> {
    let (s, c) = heading.sin_cos();
    let s = if inverse { -s } else { s };
    let mut r = DMatrix::identity(dim, dim);
    r[(0, 0)] = c;
    r[(0, 1)] = -s;
    r[(1, 0)] = s;
    r[(1, 1)] = c;
    r
}

/// The models a filter step needs. Implemented by the learned [`Models`] and by analytic stubs.
pub trait FilterModels {
    type Bound;

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Self::Bound;

    /// Shape-action encoding of the object at `pose` under `action`, or `None` if unused.
    fn encode(&self, tape: &mut Tape, b: &Self::Bound, shape: &Shape2D, pose: &Pose2D, action: &PushAction, dt: f64) -> Result<Option<Var>>;

    /// Pose increment (`C × 3`) and diagonal process variance (`C × 3`) per sigma point.
    fn process(&self, tape: &mut Tape, b: &Self::Bound, points: Var, ctx: &StepContext) -> Result<(Var, Var)>;

    /// Predicted tactile observation `(f_x, f_y, contact ∈ [0, 1])` per sigma point (`C × 3`).
    fn tactile(&self, tape: &mut Tape, b: &Self::Bound, points: Var, ctx: &StepContext) -> Result<Var>;

    /// Diagonal observation variance (`1 × 6`) for the observation `z = [z_v, z_t]` (`1 × 6`).
    fn obs_noise(&self, tape: &mut Tape, b: &Self::Bound, z: Var) -> Result<Var>;
}

/// The learned models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub encoder: NetParams,
    pub process: NetParams,
    pub tactile: NetParams,
    pub obs_noise: NetParams,
    pub vis: NetParams,
    pub scaling: Scaling,
}

#[derive(Debug, Clone)]
pub struct BoundModels {
    pub encoder: BoundNet,
    pub process: BoundNet,
    pub tactile: BoundNet,
    pub obs_noise: BoundNet,
    pub vis: BoundNet,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    models: Models,
}

/// Mask and action map stacked as a `4096 × 2` map for the encoder, drawn in the frame centered
/// on the object with its x axis along the push direction.
pub fn encoder_input(shape: &Shape2D, pose: &Pose2D, action: &PushAction, dt: f64) -> Result<DMatrix<f64>> {
    let frame = MaskFrame::snapped(Vec2::zeros(), ENCODER_EXTENT, MASK_SIZE);
    let (s, c) = action.pd.sin_cos();
    let rel = action.cp - Vec2::new(pose.x, pose.y);
    let local = Pose2D::new(0.0, 0.0, wrap_angle(pose.theta - action.pd));
    let action = PushAction { cp: Vec2::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y), pd: 0.0, v: action.v };
    let s = rasterize_mask(shape, &local, &frame)?;
    // A pusher that has lost contact may drift out of view; pin it to the frame border.
    let inset = 0.5 * frame.resolution;
    let hi = frame.origin + Vec2::repeat(frame.extent() - inset);
    let lo = frame.origin + Vec2::repeat(inset);
    let cp = Vec2::new(action.cp.x.clamp(lo.x, hi.x), action.cp.y.clamp(lo.y, hi.y));
    let m = action_map(&PushAction { cp, ..action }, dt, &frame)?;
    let n = MASK_SIZE * MASK_SIZE;
    let mut x = DMatrix::zeros(n, 2);
    for k in 0..n {
        x[(k, 0)] = s.data[k];
        x[(k, 1)] = m.data[k];
    }
    Ok(x)
}

impl Models {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, 0, Stream::Init);
        let enc_in = STATE_DIM + ENCODING_DIM;
        Self {
            encoder: NetParams::cnn("encoder", MASK_SIZE, &[2, 8, 16, 16], &[64, ENCODING_DIM], &mut rng),
            process: NetParams::mlp("process", &[enc_in, 64, 64, 6], &mut rng),
            tactile: NetParams::mlp("tactile", &[enc_in, 64, 64, 32, 3], &mut rng),
            obs_noise: NetParams::mlp("obs_noise", &[6, 32, 6], &mut rng),
            vis: NetParams::cnn("vis", MASK_SIZE, &[1, 8, 16, 16], &[64, 3], &mut rng),
            scaling: Scaling::default(),
        }
    }

    pub fn nets(&self) -> [&NetParams; 5] {
        [&self.encoder, &self.process, &self.tactile, &self.obs_noise, &self.vis]
    }

    pub fn nets_mut(&mut self) -> [&mut NetParams; 5] {
        [&mut self.encoder, &mut self.process, &mut self.tactile, &mut self.obs_noise, &mut self.vis]
    }

    /// All weight and bias matrices in a fixed order.
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        self.nets().into_iter().flat_map(|n| n.layers.iter().flat_map(|l| [&l.w, &l.b])).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.nets_mut().into_iter().flat_map(|n| n.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])).collect()
    }

    /// Copy with every tensor zeroed (the shape of a gradient).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Adds the tape gradients of the bound tensors into `acc` (same layout as `self`).
    pub fn accumulate_grads(&self, bound: &BoundModels, grads: &crate::tape::Gradients, acc: &mut Models) {
        let bound_nets = [&bound.encoder, &bound.process, &bound.tactile, &bound.obs_noise, &bound.vis];
        for (bn, an) in bound_nets.into_iter().zip(acc.nets_mut()) {
            for (&(w, b), layer) in bn.layers.iter().zip(an.layers.iter_mut()) {
                if let Some(g) = grads.get(w) {
                    layer.w += g;
                }
                if let Some(g) = grads.get(b) {
                    layer.b += g;
                }
            }
        }
    }

    fn normalized_points(&self, tape: &mut Tape, points: Var, ctx: &StepContext) -> Result<Var> {
        let (c, d) = tape.shape(points);
        if d != STATE_DIM {
            return Err(Error::BadInput(format!("sigma points must have {STATE_DIM} columns, got {d}")));
        }
        let s = &self.scaling;
        let mut offset = s.state_offset;
        offset[..3].copy_from_slice(&ctx.center);
        if ctx.center_var.is_some() {
            offset[..3].fill(0.0);
        }
        let off = tape.constant(DMatrix::from_row_slice(1, STATE_DIM, &offset.map(|v| -v)));
        let inv = tape.constant(DMatrix::from_row_slice(1, STATE_DIM, &s.state_scale.map(|v| 1.0 / v)));
        let mut x = tape.add_row(points, off);
        if let Some(cv) = ctx.center_var {
            let zeros = tape.constant(DMatrix::zeros(1, STATE_DIM - 3));
            let row = tape.hstack(&[cv, zeros]);
            let neg = tape.scale(row, -1.0);
            x = tape.add_row(x, neg);
        }
        let rot = tape.constant(heading_rotation(ctx.heading, STATE_DIM, false));
        let x = tape.matmul(x, rot);
        let x = tape.mul_row(x, inv);
        let enc = ctx.encoding.ok_or_else(|| Error::BadInput("missing shape-action encoding".into()))?;
        let (er, ec) = tape.shape(enc);
        if ec != ENCODING_DIM || (er != 1 && er != c) {
            return Err(Error::BadInput(format!("encoding must be 1 x 16 or {c} x 16, got {er} x {ec}")));
        }
        let e = if tape.shape(enc).0 == 1 { tape.repeat_rows(enc, c) } else { enc };
        Ok(tape.hstack(&[x, e]))
    }

    /// Shape-action encoding of a `4096 × 2` mask stack.
    pub fn shape_action_encode(&self, tape: &mut Tape, b: &BoundModels, masks: Var) -> Result<Var> {
        let (r, c) = tape.shape(masks);
        if (r, c) != (MASK_SIZE * MASK_SIZE, 2) {
            return Err(Error::BadInput(format!("mask stack must be 4096 x 2, got {r} x {c}")));
        }
        if tape.value(masks).iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::BadInput("mask values must lie in [0, 1]".into()));
        }
        self.encoder.forward(tape, &b.encoder, masks)
    }

    /// Pose estimate from a `4096 × 1` workspace mask.
    pub fn vis_net(&self, tape: &mut Tape, b: &BoundModels, mask: Var) -> Result<Var> {
        let out = self.vis.forward(tape, &b.vis, mask)?;
        let s = tape.constant(DMatrix::from_row_slice(1, 3, &self.scaling.vis_scale));
        Ok(tape.mul_row(out, s))
    }

    /// Plain-value process network for one point (used by tests and diagnostics).
    pub fn process_values(&self, point: &[f64; 8], encoding: &[f64; ENCODING_DIM], center: [f64; 3], heading: f64) -> Result<([f64; 3], [f64; 3])> {
        let mut tape = Tape::new();
        let b = FilterModels::bind(self, &mut tape);
        let p = tape.constant(DMatrix::from_row_slice(1, 8, point));
        let e = tape.constant(DMatrix::from_row_slice(1, ENCODING_DIM, encoding));
        let ctx = StepContext { center, center_var: None, encoding: Some(e), heading };
        let (d, q) = self.process(&mut tape, &b, p, &ctx)?;
        let (d, q) = (tape.value(d), tape.value(q));
        Ok(([d[0], d[1], d[2]], [q[0], q[1], q[2]]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, models: self.clone() };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint, rejecting version or architecture mismatches.
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!("version {} (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        let reference = Models::new(0);
        for (a, b) in ck.models.nets().iter().zip(reference.nets()) {
            let sa: Vec<_> = a.layers.iter().map(|l| (l.kind, l.w.shape(), l.b.shape())).collect();
            let sb: Vec<_> = b.layers.iter().map(|l| (l.kind, l.w.shape(), l.b.shape())).collect();
            if sa != sb {
                return Err(Error::CheckpointMismatch(format!("network {}", b.name)));
            }
        }
        if !ck.models.is_finite() {
            return Err(Error::CheckpointMismatch("non-finite weights".into()));
        }
        Ok(ck.models)
    }
}

impl FilterModels for Models {
    type Bound = BoundModels;

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundModels {
        BoundModels {
            encoder: self.encoder.bind(tape),
            process: self.process.bind(tape),
            tactile: self.tactile.bind(tape),
            obs_noise: self.obs_noise.bind(tape),
            vis: self.vis.bind(tape),
        }
    }

    fn encode(&self, tape: &mut Tape, b: &BoundModels, shape: &Shape2D, pose: &Pose2D, action: &PushAction, dt: f64) -> Result<Option<Var>> {
        let masks = tape.constant(encoder_input(shape, pose, action, dt)?);
        self.shape_action_encode(tape, b, masks).map(Some)
    }

    fn process(&self, tape: &mut Tape, b: &BoundModels, points: Var, ctx: &StepContext) -> Result<(Var, Var)> {
        let x = self.normalized_points(tape, points, ctx)?;
        let out = self.process.forward(tape, &b.process, x)?;
        let s = &self.scaling;
        let d = tape.cols(out, 0, 3);
        let ds = tape.constant(DMatrix::from_row_slice(1, 3, &s.delta_scale));
        let delta = tape.mul_row(d, ds);
        let back = tape.constant(heading_rotation(ctx.heading, POSE_DIM, true));
        let delta = tape.matmul(delta, back);
        let q = tape.cols(out, 3, 3);
        let q = tape.softplus(q);
        let qs = tape.constant(DMatrix::from_row_slice(1, 3, &s.q_scale));
        let q = tape.mul_row(q, qs);
        // Equal x and y variances keep Q diagonal in the world frame.
        let avg = tape.constant(DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]));
        let q = tape.matmul(q, avg);
        let q = tape.add_scalar(q, VAR_FLOOR);
        Ok((delta, q))
    }

    fn tactile(&self, tape: &mut Tape, b: &BoundModels, points: Var, ctx: &StepContext) -> Result<Var> {
        let x = self.normalized_points(tape, points, ctx)?;
        let out = self.tactile.forward(tape, &b.tactile, x)?;
        let f = tape.cols(out, 0, 2);
        let f = tape.scale(f, self.scaling.force_scale);
        let back = tape.constant(heading_rotation(ctx.heading, 2, true));
        let f = tape.matmul(f, back);
        let logit = tape.cols(out, 2, 1);
        let contact = tape.sigmoid(logit);
        Ok(tape.hstack(&[f, contact]))
    }

    fn obs_noise(&self, tape: &mut Tape, b: &BoundModels, z: Var) -> Result<Var> {
        if tape.shape(z) != (1, 6) {
            return Err(Error::BadInput("observation must be 1 x 6".into()));
        }
        let s = &self.scaling;
        let off = tape.constant(DMatrix::from_row_slice(1, 6, &s.obs_offset.map(|v| -v)));
        let inv = tape.constant(DMatrix::from_row_slice(1, 6, &s.obs_scale.map(|v| 1.0 / v)));
        let x = tape.add_row(z, off);
        let x = tape.mul_row(x, inv);
        let out = self.obs_noise.forward(tape, &b.obs_noise, x)?;
        let r = tape.softplus(out);
        let rs = tape.constant(DMatrix::from_row_slice(1, 6, &s.r_scale));
        let r = tape.mul_row(r, rs);
        Ok(tape.add_scalar(r, VAR_FLOOR))
    }
}

/// Workspace mask of the object as a `4096 × 1` VisNet input.
pub fn vis_input(shape: &Shape2D, pose: &Pose2D) -> Result<DMatrix<f64>> {
    let m = rasterize_mask(shape, pose, &MaskFrame::workspace())?;
    Ok(DMatrix::from_column_slice(m.data.len(), 1, &m.data))
}

/// Parameter columns of a state row, for readability at call sites.
pub fn param_cols() -> std::ops::Range<usize> {
    POSE_DIM..POSE_DIM + PARAM_DIM
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rectangle;
    use crate::tape::tests::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu_v(m: DMatrix<f64>) -> DMatrix<f64> {
        m.map(|v| v.max(0.0))
    }

    #[test]
    fn zero_mask_encoding_is_bias_propagation() {
        let models = Models::new(3);
        let mut tape = Tape::new();
        let b = FilterModels::bind(&models, &mut tape);
        let z = tape.constant(DMatrix::zeros(4096, 2));
        let e = models.shape_action_encode(&mut tape, &b, z).unwrap();
        // Direct evaluation without the tape as the oracle.
        let l = &models.encoder.layers;
        let mut x = DMatrix::<f64>::zeros(4096, 2);
        let mut hw = 64;
        for layer in &l[0..3] {
            let ho = hw / 2;
            let cin = x.ncols();
            let mut y = DMatrix::zeros(ho * ho, layer.w.ncols());
            for oy in 0..ho {
                for ox in 0..ho {
                    for co in 0..layer.w.ncols() {
                        let mut s = layer.b[(0, co)];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= hw as isize || ix >= hw as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    s += x[(iy as usize * hw + ix as usize, c)] * layer.w[((ky * 3 + kx) * cin + c, co)];
                                }
                            }
                        }
                        y[(oy * ho + ox, co)] = s.max(0.0);
                    }
                }
            }
            x = y;
            hw = ho;
        }
        let flat = DMatrix::from_column_slice(1, x.len(), x.as_slice());
        let h = relu_v(&flat * &l[3].w + &l[3].b);
        let out = &h * &l[4].w + &l[4].b;
        assert!((tape.value(e) - out).amax() < 1e-12);
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let models = Models::new(3);
        let mut tape = Tape::new();
        let b = FilterModels::bind(&models, &mut tape);
        let z = tape.constant(DMatrix::zeros(100, 2));
        assert!(matches!(models.shape_action_encode(&mut tape, &b, z), Err(Error::BadInput(_))));
        let big = tape.constant(DMatrix::from_element(4096, 2, 2.0));
        assert!(matches!(models.shape_action_encode(&mut tape, &b, big), Err(Error::BadInput(_))));
    }

    #[test]
    fn encoder_deterministic_on_real_masks() {
        let models = Models::new(1);
        let shape = rectangle("sq", 0.09, 0.09);
        let pose = Pose2D::new(0.01, -0.02, 0.3);
        let a = PushAction { cp: Vec2::new(-0.035, -0.02), pd: 0.1, v: 0.03 };
        let run = || {
            let mut tape = Tape::new();
            let b = FilterModels::bind(&models, &mut tape);
            let e = models.encode(&mut tape, &b, &shape, &pose, &a, 0.1).unwrap().unwrap();
            tape.value(e).clone()
        };
        assert_eq!(run(), run());
    }

    fn small_cnn(seed: u64) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetParams::cnn("small", 8, &[2, 3, 4], &[5, 4], &mut rng)
    }

    #[test]
    fn cnn_weight_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = small_cnn(5);
        let input = DMatrix::from_fn(64, 2, |_, _| rng.gen_range(0.0..1.0));
        let tensors: Vec<DMatrix<f64>> = net.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect();
        let kinds: Vec<_> = net.layers.iter().map(|l| (l.kind, l.activation)).collect();
        fd_check(tensors, 1e-5, 1e-4, move |t, v| {
            let x = t.constant(input.clone());
            let layers = NetParams {
                name: "fd".into(),
                layers: kinds
                    .iter()
                    .enumerate()
                    .map(|(k, (kind, act))| Layer {
                        kind: *kind,
                        activation: *act,
                        w: t.value(v[2 * k]).clone(),
                        b: t.value(v[2 * k + 1]).clone(),
                    })
                    .collect(),
            };
            let bound = BoundNet { layers: (0..kinds.len()).map(|k| (v[2 * k], v[2 * k + 1])).collect() };
            let y = layers.forward(t, &bound, x).unwrap();
            let sq = t.square(y);
            t.sum(sq)
        });
    }

    fn process_inputs(seed: u64, c: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = DMatrix::from_fn(c, 8, |_, j| {
            let s = Scaling::default();
            s.state_offset[j] + s.state_scale[j] * rng.gen_range(-1.5..1.5)
        });
        let enc = DMatrix::from_fn(1, ENCODING_DIM, |_, _| rng.gen_range(-1.0..1.0));
        (pts, enc)
    }

    #[test]
    fn process_positive_variance_and_batch_shape() {
        let models = Models::new(7);
        let mut tape = Tape::new();
        let b = FilterModels::bind(&models, &mut tape);
        let (pts, enc) = process_inputs(1, 100);
        let p = tape.constant(pts.clone());
        let e = tape.constant(enc.clone());
        let ctx = StepContext { center: [0.0; 3], center_var: None, encoding: Some(e), heading: 0.0 };
        let (d, q) = models.process(&mut tape, &b, p, &ctx).unwrap();
        assert_eq!(tape.shape(d), (100, 3));
        assert_eq!(tape.shape(q), (100, 3));
        assert!(tape.value(q).iter().all(|v| *v > 0.0));
        // Batched rows equal single-row evaluations exactly.
        for i in [0, 17, 99] {
            let row = pts.rows(i, 1).into_owned();
            let pr = tape.constant(row);
            let (d1, q1) = models.process(&mut tape, &b, pr, &ctx).unwrap();
            assert_eq!(tape.value(d1).as_slice(), tape.value(d).row(i).transpose().as_slice());
            assert_eq!(tape.value(q1).as_slice(), tape.value(q).row(i).transpose().as_slice());
        }
    }

    #[test]
    fn process_variance_positive_for_many_inputs() {
        let models = Models::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let b = FilterModels::bind(&models, &mut tape);
        let pts = DMatrix::from_fn(100_000, 8, |_, _| rng.gen_range(-50.0..50.0));
        let p = tape.constant(pts);
        let e = tape.constant(DMatrix::from_fn(1, ENCODING_DIM, |_, _| rng.gen_range(-30.0..30.0)));
        let ctx = StepContext { center: [0.0; 3], center_var: None, encoding: Some(e), heading: 0.0 };
        let (_, q) = models.process(&mut tape, &b, p, &ctx).unwrap();
        assert!(tape.value(q).iter().all(|v| *v >= VAR_FLOOR));
    }

    #[test]
    fn obs_noise_constant_case() {
        let mut models = Models::new(9);
        for l in &mut models.obs_noise.layers {
            l.w.fill(0.0);
        }
        models.obs_noise.layers[1].b = DMatrix::from_row_slice(1, 6, &[0.1, -0.2, 0.3, 1.0, -1.0, 0.0]);
        let mut tape = Tape::new();
        let b = FilterModels::bind(&models, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let z = tape.constant(DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-5.0..5.0)));
            let r = models.obs_noise(&mut tape, &b, z).unwrap();
            for j in 0..6 {
                let bj = models.obs_noise.layers[1].b[(0, j)];
                let expect = models.scaling.r_scale[j] * (bj.exp().ln_1p()) + VAR_FLOOR;
                assert!((tape.value(r)[(0, j)] - expect).abs() < 1e-15);
            }
        }
    }

    /// Rebuilds a network from tape leaves so finite differences perturb its weights.
    fn fd_net(net: &NetParams, f: impl Fn(&mut Tape, &NetParams, &BoundNet) -> Var) {
        let tensors: Vec<DMatrix<f64>> = net.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect();
        let proto = net.clone();
        fd_check(tensors, 1e-5, 1e-4, move |t, v| {
            let mut n = proto.clone();
            for (k, l) in n.layers.iter_mut().enumerate() {
                l.w = t.value(v[2 * k]).clone();
                l.b = t.value(v[2 * k + 1]).clone();
            }
            let bound = BoundNet { layers: (0..n.layers.len()).map(|k| (v[2 * k], v[2 * k + 1])).collect() };
            f(t, &n, &bound)
        });
    }

    #[test]
    fn head_gradients_match_fd() {
        let models = Models::new(10);
        let (pts, enc) = process_inputs(3, 4);
        let m = models.clone();
        fd_net(&models.process, |t, n, bound| {
            let mut mm = m.clone();
            mm.process = n.clone();
            let p = t.constant(pts.clone());
            let e = t.constant(enc.clone());
            let ctx = StepContext { center: [0.0; 3], center_var: None, encoding: Some(e), heading: 0.0 };
            let x = mm.normalized_points(t, p, &ctx).unwrap();
            let out = mm.process.forward(t, bound, x).unwrap();
            let sp = t.softplus(out);
            t.sum(sp)
        });
        fd_net(&models.tactile, |t, n, bound| {
            let p = t.constant(pts.clone());
            let e = t.constant(enc.clone());
            let ctx = StepContext { center: [0.0; 3], center_var: None, encoding: Some(e), heading: 0.0 };
            let x = m.normalized_points(t, p, &ctx).unwrap();
            let out = n.forward(t, bound, x).unwrap();
            let s = t.sigmoid(out);
            t.sum(s)
        });
        fd_net(&models.obs_noise, |t, n, bound| {
            let z = t.constant(DMatrix::from_row_slice(1, 6, &[0.1, 0.2, 0.3, 1.0, 2.0, 1.0]));
            let out = n.forward(t, bound, z).unwrap();
            let sp = t.softplus(out);
            t.sum(sp)
        });
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let models = Models::new(11);
        models.save(&path).unwrap();
        let back = Models::load(&path).unwrap();
        assert!(back == models);

        let mut bad = models.clone();
        bad.process.layers[0].w = DMatrix::zeros(24, 32);
        bad.process.layers[0].b = DMatrix::zeros(1, 32);
        bad.save(&path).unwrap();
        let r = Models::load(&path);
        assert!(matches!(r, Err(Error::CheckpointMismatch(_))), "{:?}", r.err());
    }

    #[test]
    fn checkpoint_is_row_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = NetParams::mlp("t", &[2, 3], &mut rng);
        net.layers[0].w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let j = serde_json::to_value(&net).unwrap();
        let w: Vec<f64> = serde_json::from_value(j["layers"][0]["w"].clone()).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
