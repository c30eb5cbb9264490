//! Ground-truth quasi-static planar pushing.
//!
//! The support friction is modeled by an ellipsoidal limit surface centered on the center of
//! mass, `(|F| / F_max)² + (τ / T_max)² = 1` with `F_max = μ m g` and `T_max = c F_max`, where the
//! characteristic length `c` is the radius of gyration of the support polygon about the center of
//! mass. The pusher is a point contact with Coulomb friction `μ_c`; the contact mode (stick or
//! slip) follows from the motion cone at the contact.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Matrix2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot, wrap_angle, Pose2D, PushAction, Shape2D, Vec2};
use crate::rng::{rng_for, Stream};

/// Gravitational acceleration (m/s²).
pub const G: f64 = 9.81;
/// Scale from SI inertia (kg·m²) to the g·m² units used in the filter state.
pub const INERTIA_STATE_SCALE: f64 = 1000.0;

/// Time-invariant object parameters (SI units; `com` is relative to the geometric center).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub m: f64,
    pub mu: f64,
    pub com_x: f64,
    pub com_y: f64,
    pub i_z: f64,
}

impl ObjectParams {
    pub fn com(&self) -> Vec2 {
        Vec2::new(self.com_x, self.com_y)
    }

    pub fn validate(&self, shape: &Shape2D) -> Result<()> {
        let finite = [self.m, self.mu, self.com_x, self.com_y, self.i_z].iter().all(|v| v.is_finite());
        if !finite || self.m <= 0.0 || self.mu <= 0.0 || self.i_z <= 0.0 {
            return Err(Error::InvalidInput(format!("non-physical parameters {self:?}")));
        }
        if !shape.contains(&self.com()) {
            return Err(Error::InvalidInput(format!("center of mass outside {}", shape.name)));
        }
        Ok(())
    }

    /// Parameter block of the filter state: `(m, μ, com_x, com_y, I_z [g·m²])`.
    pub fn to_state(&self) -> [f64; 5] {
        [self.m, self.mu, self.com_x, self.com_y, self.i_z * INERTIA_STATE_SCALE]
    }

    pub fn from_state(s: &[f64]) -> Self {
        Self { m: s[0], mu: s[1], com_x: s[2], com_y: s[3], i_z: s[4] / INERTIA_STATE_SCALE }
    }
}

/// Contact force on the object (world frame) and contact indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TactileObs {
    pub f: Vec2,
    pub contact: bool,
}

impl TactileObs {
    pub fn none() -> Self {
        Self { f: Vec2::zeros(), contact: false }
    }

    /// `(f_x, f_y, contact)` as used by the observation model.
    pub fn to_array(&self) -> [f64; 3] {
        [self.f.x, self.f.y, if self.contact { 1.0 } else { 0.0 }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Pusher-object Coulomb friction.
    pub mu_c: f64,
    pub g: f64,
    pub substeps: usize,
    /// Quasi-static speed bound (m/s).
    pub v_max: f64,
    /// Pusher-boundary gap beyond which contact is considered lost (m).
    pub contact_tol: f64,
    /// Half-width of the square workspace (m).
    pub workspace_half: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { mu_c: 0.3, g: G, substeps: 10, v_max: 0.03, contact_tol: 1e-4, workspace_half: 0.3 }
    }
}

/// Standard deviations of the synthetic sensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoise {
    pub vision: [f64; 3],
    /// Per-axis contact force noise (N), applied only while in contact.
    pub tactile: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { vision: [5e-3, 5e-3, 0.02], tactile: 0.05 }
    }
}

impl SensorNoise {
    pub fn exact() -> Self {
        Self { vision: [0.0; 3], tactile: 0.0 }
    }
}

/// Per-step physics bookkeeping used by the consistency checks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepDiagnostics {
    /// Largest `(F/F_max)² + (τ/T_max)²` over the substeps.
    pub max_ls_ratio: f64,
    /// Smallest contact power `F·v + τ ω` over the substeps.
    pub min_power: f64,
    /// Torque of the last contact force about the center of mass.
    pub torque: f64,
    pub sticking: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub pose: Pose2D,
    pub tactile: TactileObs,
    pub diagnostics: StepDiagnostics,
}

/// Quasi-static push simulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct PushSim {
    pub cfg: SimConfig,
}

struct Contact {
    /// Lever arm from the center of mass to the contact (world frame).
    r: Vec2,
    /// Inward normal (world frame).
    n: Vec2,
}

impl PushSim {
    pub fn new(cfg: SimConfig) -> Self {
        Self { cfg }
    }

    fn contact(&self, shape: &Shape2D, com_b: &Vec2, pose: &Pose2D, pusher: &Vec2) -> Option<Contact> {
        let pb = pose.inverse_transform_point(pusher);
        let bp = shape.nearest_boundary(&pb);
        if bp.signed_distance < -self.cfg.contact_tol {
            return None;
        }
        let r = rot(pose.theta) * (bp.point - com_b);
        let n = rot(pose.theta) * shape.inward_normal(bp.edge);
        Some(Contact { r, n })
    }

    /// Advances the object by one control tick of a point pusher moving from `action.cp` along
    /// `action.pd` at speed `action.v`.
    pub fn step(
        &self,
        shape: &Shape2D,
        params: &ObjectParams,
        pose: &Pose2D,
        action: &PushAction,
        dt: f64,
    ) -> Result<StepResult> {
        if !pose.is_finite() || !action.is_finite() || !dt.is_finite() {
            return Err(Error::InvalidInput("pose, action and dt must be finite".into()));
        }
        if dt <= 0.0 {
            return Err(Error::InvalidInput("dt must be positive".into()));
        }
        if action.v <= 0.0 || action.v > self.cfg.v_max + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "push speed {} outside (0, {}]",
                action.v, self.cfg.v_max
            )));
        }
        let com_b = params.com();
        let c2 = shape.polar_moment_about(&com_b) / shape.area();
        let f_max = params.mu * params.m * self.cfg.g;
        let t_max = c2.sqrt() * f_max;
        let vp = action.direction() * action.v;
        let h = dt / self.cfg.substeps as f64;

        let mut pose = *pose;
        let mut pusher = action.cp;
        let mut tactile = TactileObs::none();
        let mut diag = StepDiagnostics { min_power: f64::INFINITY, ..Default::default() };

        for _ in 0..self.cfg.substeps {
            let Some(Contact { r, n }) = self.contact(shape, &com_b, &pose, &pusher) else {
                tactile = TactileObs::none();
                break;
            };
            if vp.dot(&n) <= 0.0 {
                tactile = TactileObs::none();
                break;
            }
            // Contact-point velocity of the object per unit force direction: (I + r⊥ r⊥ᵀ / c²) f.
            let r_perp = Vec2::new(-r.y, r.x);
            let m = Matrix2::identity() + r_perp * r_perp.transpose() / c2;
            let t = Vec2::new(-n.y, n.x);
            let f_stick = m.try_inverse().expect("I + rr^T is invertible") * vp;
            let (f_n, f_t) = (f_stick.dot(&n), f_stick.dot(&t));
            let sticking = f_t.abs() <= self.cfg.mu_c * f_n;
            let (dir, alpha) = if sticking {
                (f_stick, 1.0)
            } else {
                let edge = n + t * (self.cfg.mu_c * f_t.signum());
                (edge, vp.dot(&n) / n.dot(&(m * edge)))
            };
            let torque_dir = r.x * dir.y - r.y * dir.x;
            let v_obj = dir * alpha;
            let omega = alpha * torque_dir / c2;

            let scale = 1.0 / ((dir.norm_squared() / (f_max * f_max)) + torque_dir * torque_dir / (t_max * t_max)).sqrt();
            let force = dir * scale;
            let torque = torque_dir * scale;
            let ls = (force.norm() / f_max).powi(2) + (torque / t_max).powi(2);
            diag.max_ls_ratio = diag.max_ls_ratio.max(ls);
            diag.min_power = diag.min_power.min(force.dot(&v_obj) + torque * omega);
            diag.torque = torque;
            diag.sticking = sticking;
            tactile = TactileObs { f: force, contact: true };

            // Rotate about the center of mass.
            let com_w = pose.transform_point(&com_b) + v_obj * h;
            let theta = pose.theta + omega * h;
            let origin = com_w - rot(theta) * com_b;
            pose = Pose2D::new(origin.x, origin.y, theta);
            pusher += vp * h;

            // Remove second-order penetration so the pusher stays on the boundary.
            let pb = pose.inverse_transform_point(&pusher);
            let bp = shape.nearest_boundary(&pb);
            if bp.signed_distance > 0.0 {
                let nw = rot(pose.theta) * shape.inward_normal(bp.edge);
                let o = pose.translation() + nw * bp.signed_distance;
                pose = Pose2D::new(o.x, o.y, pose.theta);
            }
        }
        if diag.min_power == f64::INFINITY {
            diag.min_power = 0.0;
        }
        Ok(StepResult { pose, tactile, diagnostics: diag })
    }

    /// Constant-velocity push over `t_h` seconds sampled every `dt`.
    ///
    /// Record `k` holds the state at `t = k dt`, the push applied over the following tick and the
    /// tactile reading measured during that tick. The rollout stops early, with `truncated` set,
    /// when the object leaves the workspace.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout(
        &self,
        shape: &Shape2D,
        params: &ObjectParams,
        pose0: &Pose2D,
        action0: &PushAction,
        t_h: f64,
        dt: f64,
        noise: &SensorNoise,
        seed: u64,
    ) -> Result<PushTrajectory> {
        if !(dt > 0.0) || !(t_h >= 0.0) {
            return Err(Error::InvalidInput("need dt > 0 and t_h >= 0".into()));
        }
        let n = (t_h / dt).round() as usize;
        let mut vis_rng = rng_for(seed, 0, Stream::Vision);
        let mut tac_rng = rng_for(seed, 0, Stream::Tactile);
        let mut steps = Vec::with_capacity(n);
        let mut pose = *pose0;
        let mut action = *action0;
        let mut truncated = false;
        for k in 0..n {
            if pose.x.abs() > self.cfg.workspace_half || pose.y.abs() > self.cfg.workspace_half {
                truncated = true;
                break;
            }
            let z_v = vision_sensor(&pose, &noise.vision, &mut vis_rng);
            let res = self.step(shape, params, &pose, &action, dt)?;
            let mut tactile = res.tactile;
            if tactile.contact && noise.tactile > 0.0 {
                let e: [f64; 2] = [tac_rng.sample(StandardNormal), tac_rng.sample(StandardNormal)];
                tactile.f += Vec2::new(e[0], e[1]) * noise.tactile;
            }
            steps.push(TrajectoryStep { t: k as f64 * dt, pose, action, z_v, tactile });
            pose = res.pose;
            action = action.advanced(dt);
        }
        Ok(PushTrajectory { dt, shape: shape.name.clone(), params: *params, steps, truncated })
    }
}

/// Oracle pose plus zero-mean Gaussian noise, with the angle re-wrapped.
pub fn vision_sensor(pose: &Pose2D, std: &[f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    let mut z = pose.to_array();
    for (zi, s) in z.iter_mut().zip(std) {
        let e: f64 = rng.sample(StandardNormal);
        *zi += s * e;
    }
    z[2] = wrap_angle(z[2]);
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: f64,
    pub pose: Pose2D,
    pub action: PushAction,
    pub z_v: [f64; 3],
    pub tactile: TactileObs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushTrajectory {
    pub dt: f64,
    pub shape: String,
    pub params: ObjectParams,
    pub steps: Vec<TrajectoryStep>,
    pub truncated: bool,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    t: f64,
    pose: [f64; 3],
    action: PushAction,
    z_v: [f64; 3],
    f: [f64; 2],
    contact: u8,
    params_gt: ObjectParams,
}

impl PushTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for s in &self.steps {
            let rec = JsonlRecord {
                t: s.t,
                pose: s.pose.to_array(),
                action: s.action,
                z_v: s.z_v,
                f: [s.tactile.f.x, s.tactile.f.y],
                contact: s.tactile.contact as u8,
                params_gt: self.params,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads tick records back; `dt` is recovered from consecutive timestamps.
    pub fn read_jsonl(r: impl BufRead, shape: &str, truncated: bool) -> Result<Self> {
        let mut steps = Vec::new();
        let mut params = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)?;
            params = Some(rec.params_gt);
            steps.push(TrajectoryStep {
                t: rec.t,
                pose: Pose2D::new(rec.pose[0], rec.pose[1], rec.pose[2]),
                action: rec.action,
                z_v: rec.z_v,
                tactile: TactileObs { f: Vec2::new(rec.f[0], rec.f[1]), contact: rec.contact != 0 },
            });
        }
        let params = params.ok_or_else(|| Error::InvalidInput("empty trajectory file".into()))?;
        let dt = if steps.len() >= 2 { steps[1].t - steps[0].t } else { 0.1 };
        Ok(Self { dt, shape: shape.to_string(), params, steps, truncated })
    }
}

/// Discrete parameter grid crossed with the shape library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRanges {
    pub mass: Vec<f64>,
    pub mu: Vec<f64>,
    pub com_x: Vec<f64>,
    pub com_y: Vec<f64>,
    /// kg·m²
    pub i_z: Vec<f64>,
}

impl ParameterRanges {
    /// The simulation grid: masses, friction coefficients, center-of-mass offsets and inertias.
    pub fn table_one() -> Self {
        Self {
            mass: vec![0.2, 0.5, 0.8, 1.2],
            mu: vec![0.35, 0.5, 0.7],
            com_x: vec![-0.02, -0.015, 0.0, 0.015, 0.02],
            com_y: vec![-0.02, -0.01, 0.0, 0.02, 0.03],
            i_z: vec![0.5e-3, 0.9e-3, 1.15e-3, 1.5e-3],
        }
    }

    pub fn combinations(&self) -> usize {
        self.mass.len() * self.mu.len() * self.com_x.len() * self.com_y.len() * self.i_z.len()
    }

    pub fn grid_size(&self, shapes: usize) -> usize {
        self.combinations() * shapes
    }

    /// `(min, max)` per parameter in filter-state units.
    pub fn state_bounds(&self) -> [(f64, f64); 5] {
        let mm = |v: &[f64], s: f64| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min) * s;
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * s;
            (lo, hi)
        };
        [
            mm(&self.mass, 1.0),
            mm(&self.mu, 1.0),
            mm(&self.com_x, 1.0),
            mm(&self.com_y, 1.0),
            mm(&self.i_z, INERTIA_STATE_SCALE),
        ]
    }

    fn is_empty(&self) -> bool {
        self.combinations() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape2D,
    pub params: ObjectParams,
}

/// Seeded subset of the feasible grid (center of mass strictly inside the polygon).
pub fn generate_population(
    ranges: &ParameterRanges,
    shapes: &[Shape2D],
    count: usize,
    seed: u64,
) -> Result<Vec<ObjectSpec>> {
    if ranges.is_empty() || shapes.is_empty() {
        return Err(Error::InfeasibleRanges);
    }
    let mut feasible = Vec::new();
    for shape in shapes {
        for &m in &ranges.mass {
            for &mu in &ranges.mu {
                for &cx in &ranges.com_x {
                    for &cy in &ranges.com_y {
                        for &iz in &ranges.i_z {
                            let params = ObjectParams { m, mu, com_x: cx, com_y: cy, i_z: iz };
                            if params.validate(shape).is_ok() {
                                feasible.push(ObjectSpec { shape: shape.clone(), params });
                            }
                        }
                    }
                }
            }
        }
    }
    if feasible.is_empty() {
        return Err(Error::InfeasibleRanges);
    }
    let mut idx: Vec<usize> = (0..feasible.len()).collect();
    idx.shuffle(&mut rng_for(seed, 0, Stream::Population));
    idx.truncate(count.min(feasible.len()));
    Ok(idx.into_iter().map(|i| feasible[i].clone()).collect())
}

pub fn save_population(path: &Path, pop: &[ObjectSpec]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(pop)?)?;
    Ok(())
}

pub fn load_population(path: &Path) -> Result<Vec<ObjectSpec>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{boundary_affordances, default_library, rectangle};
    use approx::assert_abs_diff_eq;

    fn params(m: f64, mu: f64, cx: f64, cy: f64) -> ObjectParams {
        ObjectParams { m, mu, com_x: cx, com_y: cy, i_z: 1e-3 }
    }

    fn square() -> Shape2D {
        rectangle("sq", 0.1, 0.1)
    }

    /// Push on the left face of the square at height `y`, along +x.
    fn left_push(y: f64) -> PushAction {
        PushAction { cp: Vec2::new(-0.05, y), pd: 0.0, v: 0.03 }
    }

    #[test]
    fn central_push_translates() {
        let sim = PushSim::default();
        let mut pose = Pose2D::identity();
        let mut a = left_push(0.0);
        for _ in 0..20 {
            let r = sim.step(&square(), &params(0.5, 0.5, 0.0, 0.0), &pose, &a, 0.1).unwrap();
            assert!((r.pose.theta - pose.theta).abs() < 1e-6);
            assert!(r.tactile.contact);
            pose = r.pose;
            a = a.advanced(0.1);
        }
        assert_abs_diff_eq!(pose.x, 20.0 * 0.003, epsilon = 1e-9);
    }

    #[test]
    fn friction_scales_force_not_motion() {
        let sim = PushSim::default();
        let p1 = params(0.5, 0.35, 0.01, 0.02);
        let p2 = params(0.5, 0.7, 0.01, 0.02);
        let t1 = sim.rollout(&square(), &p1, &Pose2D::identity(), &left_push(0.02), 3.0, 0.1, &SensorNoise::exact(), 1).unwrap();
        let t2 = sim.rollout(&square(), &p2, &Pose2D::identity(), &left_push(0.02), 3.0, 0.1, &SensorNoise::exact(), 1).unwrap();
        for (a, b) in t1.steps.iter().zip(&t2.steps) {
            assert_abs_diff_eq!(a.pose.x, b.pose.x, epsilon = 1e-9);
            assert_abs_diff_eq!(a.pose.y, b.pose.y, epsilon = 1e-9);
            assert_abs_diff_eq!(a.pose.theta, b.pose.theta, epsilon = 1e-9);
            assert_abs_diff_eq!(b.tactile.f.norm(), 2.0 * a.tactile.f.norm(), epsilon = 1e-9);
        }
    }

    #[test]
    fn offset_push_rotates_with_torque_sign() {
        let sim = PushSim::default();
        let p = params(0.8, 0.5, 0.0, 0.0);
        for &y in &[0.03, -0.03] {
            let mut pose = Pose2D::identity();
            let mut a = left_push(y);
            for _ in 0..30 {
                let r = sim.step(&square(), &p, &pose, &a, 0.1).unwrap();
                if !r.tactile.contact {
                    break;
                }
                let dth = wrap_angle(r.pose.theta - pose.theta);
                assert_eq!(dth.signum(), r.diagnostics.torque.signum());
                pose = r.pose;
                a = a.advanced(0.1);
            }
            // Pushing above the center along +x turns the object clockwise.
            assert_eq!(pose.theta.signum(), -y.signum());
        }
    }

    #[test]
    fn mass_scales_force_not_motion() {
        let sim = PushSim::default();
        let a = left_push(0.015);
        let r1 = sim.step(&square(), &params(0.4, 0.5, 0.0, 0.01), &Pose2D::identity(), &a, 0.1).unwrap();
        let r2 = sim.step(&square(), &params(0.8, 0.5, 0.0, 0.01), &Pose2D::identity(), &a, 0.1).unwrap();
        assert_eq!(r1.pose, r2.pose);
        assert_abs_diff_eq!(r2.tactile.f.norm(), 2.0 * r1.tactile.f.norm(), epsilon = 1e-9);
    }

    #[test]
    fn limit_surface_and_dissipation() {
        let sim = PushSim::default();
        let p = params(1.2, 0.35, -0.02, 0.03);
        let shape = &default_library()[1];
        for aff in boundary_affordances(shape, &Pose2D::identity(), 12).unwrap() {
            let a = PushAction { cp: aff.cp, pd: aff.cn + 0.05, v: 0.03 };
            let r = sim.step(shape, &p, &Pose2D::identity(), &a, 0.1).unwrap();
            assert!(r.diagnostics.max_ls_ratio <= 1.0 + 1e-9);
            assert!(r.diagnostics.min_power >= 0.0);
        }
    }

    #[test]
    fn separated_pusher_leaves_object_still() {
        let sim = PushSim::default();
        let a = PushAction { cp: Vec2::new(-0.2, 0.0), pd: 0.0, v: 0.03 };
        let r = sim.step(&square(), &params(0.5, 0.5, 0.0, 0.0), &Pose2D::identity(), &a, 0.1).unwrap();
        assert_eq!(r.pose, Pose2D::identity());
        assert!(!r.tactile.contact);
        assert_eq!(r.tactile.f, Vec2::zeros());
    }

    #[test]
    fn step_rejects_nan() {
        let sim = PushSim::default();
        let a = PushAction { cp: Vec2::new(f64::NAN, 0.0), pd: 0.0, v: 0.03 };
        assert!(matches!(
            sim.step(&square(), &params(0.5, 0.5, 0.0, 0.0), &Pose2D::identity(), &a, 0.1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn rollout_lengths() {
        let sim = PushSim::default();
        let p = params(0.5, 0.5, 0.0, 0.0);
        let start = Pose2D::new(-0.2, 0.0, 0.0);
        let a = PushAction { cp: Vec2::new(-0.25, 0.0), pd: 0.0, v: 0.03 };
        let t = sim.rollout(&square(), &p, &start, &a, 15.0, 0.1, &SensorNoise::default(), 3).unwrap();
        assert_eq!(t.len(), 150);
        assert!(!t.truncated);
        let travel = (t.steps.last().unwrap().action.cp - a.cp).norm() + 0.003;
        assert!(travel <= 0.45 + 1e-9);
        let empty = sim.rollout(&square(), &p, &start, &a, 0.0, 0.1, &SensorNoise::default(), 3).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn rollout_truncates_at_workspace_edge() {
        let sim = PushSim::default();
        let p = params(0.5, 0.5, 0.0, 0.0);
        let a = PushAction { cp: Vec2::new(0.15, 0.0), pd: 0.0, v: 0.03 };
        let t = sim.rollout(&square(), &p, &Pose2D::new(0.2, 0.0, 0.0), &a, 15.0, 0.1, &SensorNoise::default(), 3).unwrap();
        assert!(t.truncated);
        assert!(t.len() < 150);
        assert!(t.steps.iter().all(|s| s.pose.x.abs() <= 0.3));
    }

    #[test]
    fn vision_noise_statistics() {
        let pose = Pose2D::new(0.1, -0.1, 0.3);
        let mut rng = rng_for(7, 0, Stream::Vision);
        assert_eq!(vision_sensor(&pose, &[0.0; 3], &mut rng), pose.to_array());
        let std = [5e-3, 5e-3, 0.02];
        let n = 10_000;
        let draws: Vec<[f64; 3]> = (0..n).map(|_| vision_sensor(&pose, &std, &mut rng)).collect();
        for k in 0..3 {
            let truth = pose.to_array()[k];
            let var = draws.iter().map(|d| (d[k] - truth).powi(2)).sum::<f64>() / n as f64;
            assert!((var.sqrt() / std[k] - 1.0).abs() < 0.05, "axis {k}");
        }
        let near_pi = Pose2D::new(0.0, 0.0, std::f64::consts::PI - 1e-4);
        for _ in 0..100 {
            let z = vision_sensor(&near_pi, &[0.0, 0.0, 0.05], &mut rng);
            assert!(z[2] > -std::f64::consts::PI && z[2] <= std::f64::consts::PI);
        }
    }

    #[test]
    fn population_grid() {
        let ranges = ParameterRanges::table_one();
        let shapes = default_library();
        assert_eq!(ranges.grid_size(shapes.len()), 13200);
        let pop = generate_population(&ranges, &shapes, 825, 11).unwrap();
        assert_eq!(pop.len(), 825);
        for o in &pop {
            assert!(o.shape.contains(&o.params.com()));
        }
        for m in [0.2, 0.5, 0.8, 1.2] {
            assert!(pop.iter().any(|o| o.params.m == m));
        }
        let again = generate_population(&ranges, &shapes, 825, 11).unwrap();
        assert_eq!(serde_json::to_string(&pop).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn infeasible_population() {
        let mut ranges = ParameterRanges::table_one();
        ranges.com_x = vec![1.0];
        assert!(matches!(
            generate_population(&ranges, &default_library(), 10, 0),
            Err(Error::InfeasibleRanges)
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let sim = PushSim::default();
        let p = params(0.5, 0.5, 0.01, 0.0);
        let t = sim.rollout(&square(), &p, &Pose2D::identity(), &left_push(0.01), 1.0, 0.1, &SensorNoise::default(), 5).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 10);
        let back = PushTrajectory::read_jsonl(&buf[..], "sq", false).unwrap();
        assert_eq!(back.len(), t.len());
        assert_abs_diff_eq!(back.dt, 0.1, epsilon = 1e-12);
        assert_eq!(back.params, t.params);
    }
}
