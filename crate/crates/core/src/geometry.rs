//! Planar geometry: SE(2) poses, polygon shapes, binary segmentation masks, boundary contact
//! affordances and action maps.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

pub fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Planar pose of an object's geometric-center frame in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Body frame to world frame.
    pub fn transform_point(&self, p: &Vec2) -> Vec2 {
        rot(self.theta) * p + self.translation()
    }

    /// World frame to body frame.
    pub fn inverse_transform_point(&self, p: &Vec2) -> Vec2 {
        rot(-self.theta) * (p - self.translation())
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Simple counter-clockwise polygon in its body frame (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape2D {
    pub name: String,
    pub vertices: Vec<Vec2>,
}

fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn segments_intersect(p1: &Vec2, p2: &Vec2, q1: &Vec2, q2: &Vec2) -> bool {
    let d1 = cross(&(p2 - p1), &(q1 - p1));
    let d2 = cross(&(p2 - p1), &(q2 - p1));
    let d3 = cross(&(q2 - q1), &(p1 - q1));
    let d4 = cross(&(q2 - q1), &(p2 - q1));
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Nearest point on a polygon boundary.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryPoint {
    pub point: Vec2,
    pub edge: usize,
    /// Positive inside the polygon, negative outside.
    pub signed_distance: f64,
}

impl Shape2D {
    pub fn new(name: impl Into<String>, vertices: Vec<Vec2>) -> Result<Self> {
        let shape = Self { name: name.into(), vertices };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n < 3 {
            return Err(Error::DegenerateShape(format!("{}: fewer than 3 vertices", self.name)));
        }
        if self.vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::DegenerateShape(format!("{}: non-finite vertex", self.name)));
        }
        if self.signed_area() <= 0.0 {
            return Err(Error::DegenerateShape(format!(
                "{}: signed area must be positive (counter-clockwise)",
                self.name
            )));
        }
        for i in 0..n {
            let (a1, a2) = self.edge(i);
            for j in (i + 2)..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (b1, b2) = self.edge(j);
                if segments_intersect(&a1, &a2, &b1, &b2) {
                    return Err(Error::DegenerateShape(format!(
                        "{}: edges {i} and {j} intersect",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn edge(&self, i: usize) -> (Vec2, Vec2) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let (a, b) = self.edge(i);
                cross(&a, &b)
            })
            .sum::<f64>()
            * 0.5
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len();
        let mut c = Vec2::zeros();
        for i in 0..n {
            let (a, b) = self.edge(i);
            c += (a + b) * cross(&a, &b);
        }
        c / (6.0 * self.signed_area())
    }

    /// Polar second moment of area `∫ |r - p|² dA` about `p`.
    pub fn polar_moment_about(&self, p: &Vec2) -> f64 {
        let n = self.vertices.len();
        let (mut ixx, mut iyy) = (0.0, 0.0);
        for i in 0..n {
            let (a, b) = self.edge(i);
            let w = cross(&a, &b);
            iyy += w * (a.x * a.x + a.x * b.x + b.x * b.x);
            ixx += w * (a.y * a.y + a.y * b.y + b.y * b.y);
        }
        let j0 = (ixx + iyy) / 12.0;
        let area = self.signed_area();
        j0 - 2.0 * p.dot(&(self.centroid() * area)) + area * p.norm_squared()
    }

    pub fn perimeter(&self) -> f64 {
        (0..self.vertices.len())
            .map(|i| {
                let (a, b) = self.edge(i);
                (b - a).norm()
            })
            .sum()
    }

    /// Inward unit normal of edge `i` (body frame).
    pub fn inward_normal(&self, i: usize) -> Vec2 {
        let (a, b) = self.edge(i);
        let d = (b - a).normalize();
        Vec2::new(-d.y, d.x)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (vi, vj) = (self.vertices[i], self.vertices[j]);
            if (vi.y > p.y) != (vj.y > p.y) && p.x < (vj.x - vi.x) * (p.y - vi.y) / (vj.y - vi.y) + vi.x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn nearest_boundary(&self, p: &Vec2) -> BoundaryPoint {
        let mut best = (f64::INFINITY, Vec2::zeros(), 0usize);
        for i in 0..self.vertices.len() {
            let (a, b) = self.edge(i);
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, q, i);
            }
        }
        let dist = best.0.sqrt();
        let signed = if self.contains(p) { dist } else { -dist };
        BoundaryPoint { point: best.1, edge: best.2, signed_distance: signed }
    }

    /// Axis-aligned bounding box `(min, max)` in the body frame.
    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Point on the boundary at arc length `s` (wrapped) measured from vertex 0, with its edge.
    pub fn point_at_arclength(&self, s: f64) -> (Vec2, usize) {
        let total = self.perimeter();
        let mut s = s.rem_euclid(total);
        for i in 0..self.vertices.len() {
            let (a, b) = self.edge(i);
            let len = (b - a).norm();
            if s <= len {
                return (a + (b - a) * (s / len), i);
            }
            s -= len;
        }
        let last = self.vertices.len() - 1;
        (self.vertices[0], last)
    }

    /// Copy translated so that the area centroid sits at the origin.
    pub fn centered(&self) -> Self {
        let c = self.centroid();
        Self { name: self.name.clone(), vertices: self.vertices.iter().map(|v| v - c).collect() }
    }

    pub fn transformed_vertices(&self, pose: &Pose2D) -> Vec<Vec2> {
        self.vertices.iter().map(|v| pose.transform_point(v)).collect()
    }
}

fn regular_polygon(name: &str, n: usize, rx: f64, ry: f64, phase: f64) -> Shape2D {
    let vertices = (0..n)
        .map(|k| {
            let a = phase + 2.0 * PI * k as f64 / n as f64;
            Vec2::new(rx * a.cos(), ry * a.sin())
        })
        .collect();
    Shape2D { name: name.to_string(), vertices }
}

fn polygon(name: &str, pts: &[(f64, f64)]) -> Shape2D {
    Shape2D { name: name.to_string(), vertices: pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect() }.centered()
}

/// Regular `n`-gon of circumradius `r` centered at the origin.
pub fn regular_ngon(n: usize, r: f64) -> Shape2D {
    regular_polygon(&format!("ngon{n}"), n, r, r, 0.0)
}

pub fn rectangle(name: &str, w: f64, h: f64) -> Shape2D {
    polygon(name, &[(-w / 2.0, -h / 2.0), (w / 2.0, -h / 2.0), (w / 2.0, h / 2.0), (-w / 2.0, h / 2.0)])
}

/// The eleven built-in test shapes (rectangles, triangles, ellipses, a hexagon and a
/// butterfly), all centered on their area centroid.
pub fn default_library() -> Vec<Shape2D> {
    vec![
        rectangle("rect1", 0.09, 0.09),
        rectangle("rect2", 0.09, 0.12),
        rectangle("rect3", 0.135, 0.09),
        polygon("tri1", &[(0.0, 0.0), (0.125, 0.0), (0.0, 0.125)]),
        polygon("tri2", &[(-0.07, 0.0), (0.07, 0.0), (0.0, 0.11)]),
        polygon("tri3", &[(0.0, 0.0), (0.15, 0.0), (0.04, 0.1)]),
        regular_polygon("ellip1", 32, 0.0525, 0.0525, 0.0),
        regular_polygon("ellip2", 32, 0.0525, 0.0654, 0.0),
        regular_polygon("ellip3", 32, 0.0525, 0.0785, 0.0),
        regular_polygon("hex", 6, 0.0606, 0.0606, 0.0),
        polygon(
            "butter",
            &[(-0.065, -0.055), (0.0, -0.025), (0.065, -0.055), (0.065, 0.055), (0.0, 0.025), (-0.065, 0.055)],
        ),
    ]
}

pub fn load_library(path: &Path) -> Result<Vec<Shape2D>> {
    let text = std::fs::read_to_string(path)?;
    let shapes: Vec<Shape2D> = serde_json::from_str(&text)?;
    for s in &shapes {
        s.validate()?;
    }
    Ok(shapes)
}

pub fn save_library(path: &Path, shapes: &[Shape2D]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(shapes)?)?;
    Ok(())
}

/// Placement of a square pixel grid in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskFrame {
    /// World coordinate of the lower-left corner of pixel (0, 0).
    pub origin: Vec2,
    /// Meters per pixel.
    pub resolution: f64,
    pub size: usize,
}

pub const MASK_SIZE: usize = 64;
pub const WORKSPACE_EXTENT: f64 = 0.6;

impl MaskFrame {
    pub fn new(origin: Vec2, resolution: f64, size: usize) -> Result<Self> {
        if !(resolution > 0.0) || size == 0 {
            return Err(Error::InvalidInput("mask frame needs resolution > 0 and size > 0".into()));
        }
        Ok(Self { origin, resolution, size })
    }

    /// `size x size` frame of side `extent` centered on `center`.
    pub fn centered(center: Vec2, extent: f64, size: usize) -> Self {
        let resolution = extent / size as f64;
        Self { origin: center - Vec2::repeat(extent / 2.0), resolution, size }
    }

    /// Like [`MaskFrame::centered`] but with the origin snapped to the global pixel lattice, so
    /// frames centered on nearby points share pixel boundaries.
    pub fn snapped(center: Vec2, extent: f64, size: usize) -> Self {
        let resolution = extent / size as f64;
        let half = size as f64 / 2.0;
        let origin = Vec2::new(
            ((center.x / resolution).round() - half) * resolution,
            ((center.y / resolution).round() - half) * resolution,
        );
        Self { origin, resolution, size }
    }

    /// The default 64 x 64 frame over the 0.6 m workspace centered at the world origin.
    pub fn workspace() -> Self {
        Self::centered(Vec2::zeros(), WORKSPACE_EXTENT, MASK_SIZE)
    }

    pub fn extent(&self) -> f64 {
        self.resolution * self.size as f64
    }

    /// World coordinate of the center of pixel `(row, col)`; rows run along +y, columns along +x.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vec2 {
        self.origin + Vec2::new((col as f64 + 0.5) * self.resolution, (row as f64 + 0.5) * self.resolution)
    }

    /// Continuous pixel coordinates `(col, row)` of a world point.
    pub fn to_pixel_coords(&self, p: &Vec2) -> Vec2 {
        (p - self.origin) / self.resolution
    }

    pub fn pixel_of(&self, p: &Vec2) -> Option<(usize, usize)> {
        let q = self.to_pixel_coords(p);
        let (c, r) = (q.x.floor(), q.y.floor());
        let n = self.size as f64;
        if c >= 0.0 && r >= 0.0 && c < n && r < n {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

/// Square grid of values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub frame: MaskFrame,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn zeros(frame: MaskFrame) -> Self {
        Self { frame, data: vec![0.0; frame.size * frame.size] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.frame.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let n = self.frame.size;
        self.data[row * n + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Covered area in m² (sum of values times pixel area).
    pub fn area(&self) -> f64 {
        self.sum() * self.frame.resolution * self.frame.resolution
    }

    /// Binary-safe 8-bit PGM export for debugging; row 0 is written last so +y points up.
    pub fn write_pgm(&self, w: &mut impl Write) -> std::io::Result<()> {
        let n = self.frame.size;
        write!(w, "P5\n{n} {n}\n255\n")?;
        let mut bytes = Vec::with_capacity(n * n);
        for r in (0..n).rev() {
            for c in 0..n {
                bytes.push((self.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)
    }
}

/// Binary mask of `shape` placed at `pose`: 1 for pixel centers inside the polygon.
pub fn rasterize_mask(shape: &Shape2D, pose: &Pose2D, frame: &MaskFrame) -> Result<Mask> {
    let world = Shape2D { name: shape.name.clone(), vertices: shape.transformed_vertices(pose) };
    let (lo, hi) = world.bounding_box();
    let plo = frame.to_pixel_coords(&lo);
    let phi = frame.to_pixel_coords(&hi);
    let n = frame.size as f64;
    if phi.x < 0.0 || phi.y < 0.0 || plo.x >= n || plo.y >= n {
        return Err(Error::ShapeOutOfFrame);
    }
    let c0 = plo.x.floor().max(0.0) as usize;
    let r0 = plo.y.floor().max(0.0) as usize;
    let c1 = (phi.x.ceil().min(n - 1.0)) as usize;
    let r1 = (phi.y.ceil().min(n - 1.0)) as usize;
    let mut mask = Mask::zeros(*frame);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if world.contains(&frame.pixel_center(r, c)) {
                mask.set(r, c, 1.0);
            }
        }
    }
    Ok(mask)
}

/// A candidate contact: boundary point and inward normal angle, both in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactAffordance {
    pub cp: Vec2,
    pub cn: f64,
}

/// Affordance at boundary arc length `s` for the shape placed at `pose`.
pub fn affordance_at(shape: &Shape2D, pose: &Pose2D, s: f64) -> ContactAffordance {
    let (p, edge) = shape.point_at_arclength(s);
    let n = rot(pose.theta) * shape.inward_normal(edge);
    ContactAffordance { cp: pose.transform_point(&p), cn: n.y.atan2(n.x) }
}

/// `count` affordances spaced evenly by arc length, starting at the midpoint of edge 0.
pub fn boundary_affordances(shape: &Shape2D, pose: &Pose2D, count: usize) -> Result<Vec<ContactAffordance>> {
    if count == 0 {
        return Err(Error::InvalidInput("affordance count must be >= 1".into()));
    }
    shape.validate()?;
    let total = shape.perimeter();
    let (a, b) = shape.edge(0);
    let start = 0.5 * (b - a).norm();
    Ok((0..count)
        .map(|k| affordance_at(shape, pose, start + k as f64 * total / count as f64))
        .collect())
}

/// Push parameterization: contact point, push direction and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    pub cp: Vec2,
    pub pd: f64,
    pub v: f64,
}

impl PushAction {
    pub fn direction(&self) -> Vec2 {
        Vec2::new(self.pd.cos(), self.pd.sin())
    }

    pub fn is_finite(&self) -> bool {
        self.cp.x.is_finite() && self.cp.y.is_finite() && self.pd.is_finite() && self.v.is_finite()
    }

    /// The same push with the contact point advanced by `dt` seconds of pusher travel.
    pub fn advanced(&self, dt: f64) -> Self {
        Self { cp: self.cp + self.direction() * (self.v * dt), ..*self }
    }
}

/// Gaussian spread (pixels) along the push direction: one control step of travel, at least 2 px.
pub fn action_spread_px(v: f64, dt: f64, resolution: f64) -> f64 {
    (v * dt / resolution).max(2.0)
}

/// Anisotropic precision matrix of the action map for push direction `pd` and spread `s` (px).
pub fn action_precision(pd: f64, s: f64) -> Matrix2<f64> {
    let (sn, cs) = pd.sin_cos();
    let s2 = s * s;
    let off = (2.0 * pd).sin() / (4.0 * s2) - (2.0 * pd).sin() / 4.0;
    Matrix2::new(cs * cs / (2.0 * s2) + sn * sn / 2.0, off, off, sn * sn / (2.0 * s2) + cs * cs / 2.0)
}

/// 2D Gaussian action map centered on the pixel containing the contact point.
pub fn action_map(action: &PushAction, dt: f64, frame: &MaskFrame) -> Result<Mask> {
    if !(action.v > 0.0) {
        return Err(Error::InvalidInput("push speed must be positive".into()));
    }
    let (r0, c0) = frame
        .pixel_of(&action.cp)
        .ok_or(Error::ContactOutOfFrame(action.cp.x, action.cp.y))?;
    let k = action_precision(action.pd, action_spread_px(action.v, dt, frame.resolution));
    let mut mask = Mask::zeros(*frame);
    for r in 0..frame.size {
        for c in 0..frame.size {
            let d = Vec2::new(c as f64 - c0 as f64, r as f64 - r0 as f64);
            let q = d.dot(&(k * d));
            mask.set(r, c, (-0.5 * q).exp().max(f64::MIN_POSITIVE));
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_square() -> Shape2D {
        rectangle("unit", 1.0, 1.0)
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(PI + 0.1), -PI + 0.1, epsilon = 1e-12);
    }

    #[test]
    fn library_shapes_are_valid() {
        let lib = default_library();
        assert_eq!(lib.len(), 11);
        for s in &lib {
            s.validate().unwrap();
            assert!(s.centroid().norm() < 1e-12, "{}", s.name);
        }
    }

    #[test]
    fn rejects_clockwise_and_self_intersecting() {
        let cw = vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(1.0, 1.0), Vec2::new(1.0, 0.0)];
        assert!(Shape2D::new("cw", cw).is_err());
        let bowtie = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
        assert!(Shape2D::new("bowtie", bowtie).is_err());
        assert!(Shape2D::new("line", vec![Vec2::zeros(), Vec2::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn polar_moment_of_square() {
        // a^4 / 6 about the center.
        let s = rectangle("sq", 0.1, 0.1);
        assert_abs_diff_eq!(s.polar_moment_about(&Vec2::zeros()), 1e-4 / 6.0, epsilon = 1e-15);
        let off = Vec2::new(0.01, -0.02);
        assert_abs_diff_eq!(
            s.polar_moment_about(&off),
            1e-4 / 6.0 + 0.01 * off.norm_squared(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn unit_square_mask_area() {
        let frame = MaskFrame::centered(Vec2::zeros(), 1.0, 64);
        let m = rasterize_mask(&unit_square(), &Pose2D::identity(), &frame).unwrap();
        assert!((m.area() - 1.0).abs() < 0.02);
        let rotated = rasterize_mask(&unit_square(), &Pose2D::new(0.0, 0.0, PI / 2.0), &frame).unwrap();
        assert_eq!(m, rotated);
    }

    #[test]
    fn mask_area_matches_polygon_area() {
        let frame = MaskFrame::workspace();
        for s in default_library() {
            for &th in &[0.0, 0.3, 1.1, -2.0] {
                let m = rasterize_mask(&s, &Pose2D::new(0.013, -0.021, th), &frame).unwrap();
                let rel = (m.area() - s.area()).abs() / s.area();
                // small shapes are only ~10 px across at 9.4 mm/px
                assert!(rel < 0.1, "{} at {th}: {rel}", s.name);
            }
        }
        let big = rectangle("big", 0.3, 0.2);
        let m = rasterize_mask(&big, &Pose2D::new(0.01, 0.0, 0.4), &frame).unwrap();
        assert!((m.area() - big.area()).abs() / big.area() < 0.02);
    }

    #[test]
    fn mask_translation_equivariance() {
        let frame = MaskFrame::workspace();
        let s = &default_library()[3];
        let res = frame.resolution;
        let a = rasterize_mask(s, &Pose2D::new(0.0011, 0.0023, 0.2), &frame).unwrap();
        let (kx, ky) = (3usize, 5usize);
        let b = rasterize_mask(s, &Pose2D::new(0.0011 + kx as f64 * res, 0.0023 + ky as f64 * res, 0.2), &frame)
            .unwrap();
        for r in 0..frame.size - ky {
            for c in 0..frame.size - kx {
                assert_eq!(a.get(r, c), b.get(r + ky, c + kx));
            }
        }
    }

    #[test]
    fn out_of_frame_shape_errors() {
        let frame = MaskFrame::workspace();
        let e = rasterize_mask(&unit_square(), &Pose2D::new(5.0, 5.0, 0.0), &frame);
        assert!(matches!(e, Err(Error::ShapeOutOfFrame)));
    }

    #[test]
    fn square_affordances_one_per_edge() {
        let a = boundary_affordances(&unit_square(), &Pose2D::identity(), 4).unwrap();
        let expected = [(0.0, -0.5, PI / 2.0), (0.5, 0.0, PI), (0.0, 0.5, -PI / 2.0), (-0.5, 0.0, 0.0)];
        for (aff, (x, y, n)) in a.iter().zip(expected) {
            assert_abs_diff_eq!(aff.cp.x, x, epsilon = 1e-12);
            assert_abs_diff_eq!(aff.cp.y, y, epsilon = 1e-12);
            assert_abs_diff_eq!(wrap_angle(aff.cn - n), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ngon_normals_point_to_centroid() {
        let s = regular_ngon(32, 0.05);
        for a in boundary_affordances(&s, &Pose2D::identity(), 8).unwrap() {
            let to_center = -a.cp;
            let ang = to_center.y.atan2(to_center.x);
            assert!(wrap_angle(ang - a.cn).abs() < 1e-6);
        }
    }

    #[test]
    fn affordances_rotate_with_pose() {
        let s = &default_library()[10];
        let th = 0.77;
        let base = boundary_affordances(s, &Pose2D::identity(), 9).unwrap();
        let turned = boundary_affordances(s, &Pose2D::new(0.0, 0.0, th), 9).unwrap();
        for (a, b) in base.iter().zip(&turned) {
            let cp = rot(th) * a.cp;
            assert_abs_diff_eq!((cp - b.cp).norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(wrap_angle(a.cn + th - b.cn), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn affordance_count_zero_is_error() {
        assert!(boundary_affordances(&unit_square(), &Pose2D::identity(), 0).is_err());
    }

    fn push(cp: Vec2, pd: f64) -> PushAction {
        PushAction { cp, pd, v: 0.03 }
    }

    #[test]
    fn action_map_peak_and_range() {
        let frame = MaskFrame::workspace();
        let a = push(Vec2::new(0.01, -0.02), 0.4);
        let m = action_map(&a, 0.1, &frame).unwrap();
        let (r0, c0) = frame.pixel_of(&a.cp).unwrap();
        assert_eq!(m.get(r0, c0), 1.0);
        for r in 0..frame.size {
            for c in 0..frame.size {
                let v = m.get(r, c);
                assert!(v > 0.0 && v <= 1.0);
                if (r, c) != (r0, c0) {
                    assert!(v < 1.0);
                }
            }
        }
    }

    #[test]
    fn action_map_anisotropy_along_push() {
        let frame = MaskFrame::workspace();
        let a = push(Vec2::zeros(), 0.0);
        let m = action_map(&a, 0.1, &frame).unwrap();
        let (r0, c0) = frame.pixel_of(&a.cp).unwrap();
        let s = action_spread_px(0.03, 0.1, frame.resolution);
        let d = 3.0;
        // pd = 0: K = diag(1/(2 s^2), 1/2)
        let along = (-0.5 * d * d / (2.0 * s * s)).exp();
        let across = (-0.5 * d * d / 2.0).exp();
        assert_abs_diff_eq!(m.get(r0, c0 + 3), along, epsilon = 1e-14);
        assert_abs_diff_eq!(m.get(r0 + 3, c0), across, epsilon = 1e-14);
        assert!(m.get(r0, c0 + 3) > m.get(r0 + 3, c0));
    }

    #[test]
    fn action_precision_is_pi_periodic() {
        for &pd in &[0.0, 0.3, 1.2, -2.5] {
            let a = action_precision(pd, 2.5);
            let b = action_precision(pd + PI, 2.5);
            assert_abs_diff_eq!((a - b).abs().max(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn action_map_contact_out_of_frame() {
        let frame = MaskFrame::workspace();
        let e = action_map(&push(Vec2::new(1.0, 0.0), 0.0), 0.1, &frame);
        assert!(matches!(e, Err(Error::ContactOutOfFrame(..))));
    }

    #[test]
    fn pgm_export_has_header() {
        let frame = MaskFrame::workspace();
        let m = rasterize_mask(&unit_square(), &Pose2D::identity(), &frame).unwrap();
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(buf.len(), 13 + 64 * 64);
    }
}
