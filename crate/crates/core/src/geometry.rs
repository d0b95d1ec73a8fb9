//! Finger and object geometry.
//!
//! A finger pair is described by a [`ControlVector`]: `N` normalized
//! protrusion values per finger, placed at evenly spaced stations along the
//! finger length and chained into `(N - 1) / 3` cubic Bézier segments that
//! share endpoints. Each finger is a height field over its length axis.
//!
//! Objects are simple counterclockwise polygons centered on their area
//! centroid, with a canonical 100-point contour used as the network input.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point = [f64; 2];

/// Number of contour samples per object.
pub const CONTOUR_POINTS: usize = 100;

/// Evaluates a scalar cubic Bézier segment at `t` in `[0, 1]`.
pub fn bezier_eval(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("Bézier parameter {t} outside [0, 1]")));
    }
    let s = 1.0 - t;
    Ok(s * s * s * p0 + 3.0 * s * s * t * p1 + 3.0 * s * t * t * p2 + t * t * t * p3)
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut r = theta - two_pi * ((theta + PI) / two_pi).floor();
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_delta(dtheta: f64) -> f64 {
    -wrap_angle(-dtheta)
}

/// Physical layout of a finger pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerGeometry {
    /// Control points per finger (`N = 3·S + 1`).
    #[serde(rename = "N", alias = "n_per_finger")]
    pub n_per_finger: usize,
    /// Finger length in mm.
    #[serde(rename = "L", alias = "length")]
    pub length: f64,
    /// Maximum protrusion magnitude in mm.
    pub d_max: f64,
    /// Height-field samples per finger.
    pub samples: usize,
}

impl Default for FingerGeometry {
    fn default() -> Self {
        Self { n_per_finger: 16, length: 100.0, d_max: 15.0, samples: 256 }
    }
}

impl FingerGeometry {
    pub fn validate(&self) -> Result<()> {
        check_control_count(self.n_per_finger)?;
        if !(self.length > 0.0 && self.d_max > 0.0) {
            return Err(Error::InvalidParameter("finger length and d_max must be positive".into()));
        }
        if self.samples < 256 {
            return Err(Error::InvalidParameter(format!(
                "finger profile needs at least 256 samples, got {}",
                self.samples
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        2 * self.n_per_finger
    }
}

fn check_control_count(n: usize) -> Result<()> {
    if n < 4 || n % 3 != 1 {
        return Err(Error::ControlPointCount(format!(
            "{n} control points per finger; need N >= 4 with N = 3·S + 1"
        )));
    }
    Ok(())
}

/// Normalized finger-pair parameters, left finger first.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    values: Vec<f64>,
    n_per_finger: usize,
}

impl ControlVector {
    pub fn new(values: Vec<f64>, n_per_finger: usize) -> Result<Self> {
        check_control_count(n_per_finger)?;
        if values.len() != 2 * n_per_finger {
            return Err(Error::ControlPointCount(format!(
                "expected {} values for N = {n_per_finger}, got {}",
                2 * n_per_finger,
                values.len()
            )));
        }
        if let Some((index, &value)) =
            values.iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::ControlValueOutOfRange { index, value });
        }
        Ok(Self { values, n_per_finger })
    }

    /// Builds a vector by clamping every entry into `[-1, 1]`.
    pub fn clamped(values: &[f64], n_per_finger: usize) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::ControlValueOutOfRange { index: i, value: f64::NAN });
        }
        Self::new(values.iter().map(|v| v.clamp(-1.0, 1.0)).collect(), n_per_finger)
    }

    pub fn zeros(n_per_finger: usize) -> Result<Self> {
        Self::new(vec![0.0; 2 * n_per_finger], n_per_finger)
    }

    pub fn uniform<R: Rng + ?Sized>(rng: &mut R, n_per_finger: usize) -> Result<Self> {
        let values = (0..2 * n_per_finger).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(values, n_per_finger)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_per_finger(&self) -> usize {
        self.n_per_finger
    }

    pub fn side(&self, side: Side) -> &[f64] {
        match side {
            Side::Left => &self.values[..self.n_per_finger],
            Side::Right => &self.values[self.n_per_finger..],
        }
    }

    /// Swaps the two fingers, which mirrors the gripper about its closing
    /// axis.
    pub fn swapped(&self) -> Self {
        let mut values = self.side(Side::Right).to_vec();
        values.extend_from_slice(self.side(Side::Left));
        Self { values, n_per_finger: self.n_per_finger }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

/// A finger surface as a height field: protrusion toward the object (mm)
/// sampled uniformly along the finger length.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerProfile {
    pub side: Side,
    length: f64,
    spacing: f64,
    heights: Vec<f64>,
}

impl FingerProfile {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    /// Sample positions along the finger.
    pub fn xs(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.heights.len()).map(move |j| j as f64 * self.spacing)
    }

    /// Samples as `(x, protrusion)` pairs.
    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs().zip(self.heights.iter().copied())
    }

    /// Linearly interpolated protrusion and its slope at position `u` along
    /// the finger. Outside `[0, L]` the end value is held with zero slope.
    #[inline]
    pub fn height_and_slope(&self, u: f64) -> (f64, f64) {
        let n = self.heights.len();
        if u <= 0.0 {
            return (self.heights[0], 0.0);
        }
        if u >= self.length {
            return (self.heights[n - 1], 0.0);
        }
        let pos = u / self.spacing;
        let i = (pos as usize).min(n - 2);
        let t = pos - i as f64;
        let h0 = self.heights[i];
        let h1 = self.heights[i + 1];
        (h0 + t * (h1 - h0), (h1 - h0) / self.spacing)
    }

    pub fn height(&self, u: f64) -> f64 {
        self.height_and_slope(u).0
    }
}

/// Builds one finger's height field from a control vector.
pub fn finger_profile(m: &ControlVector, side: Side, geom: &FingerGeometry) -> Result<FingerProfile> {
    geom.validate()?;
    if m.n_per_finger() != geom.n_per_finger {
        return Err(Error::ControlPointCount(format!(
            "control vector has N = {}, geometry expects {}",
            m.n_per_finger(),
            geom.n_per_finger
        )));
    }
    let ctrl = m.side(side);
    let n = ctrl.len();
    let segments = (n - 1) / 3;
    let station = geom.length / (n - 1) as f64;
    let samples = geom.samples;

    // Sample the planar curve uniformly in its global parameter.
    let mut curve = Vec::with_capacity(samples);
    for j in 0..samples {
        let u = j as f64 / (samples - 1) as f64 * segments as f64;
        let seg = (u.floor() as usize).min(segments - 1);
        let t = (u - seg as f64).clamp(0.0, 1.0);
        let k = 3 * seg;
        let xs: [f64; 4] = std::array::from_fn(|i| (k + i) as f64 * station);
        let x = bezier_eval(xs[0], xs[1], xs[2], xs[3], t)?;
        let h = bezier_eval(ctrl[k], ctrl[k + 1], ctrl[k + 2], ctrl[k + 3], t)? * geom.d_max;
        curve.push((x, h));
    }

    // Re-index onto a uniform grid in x; the curve's x is monotone.
    let spacing = geom.length / (samples - 1) as f64;
    let mut heights = Vec::with_capacity(samples);
    let mut seg = 0;
    for j in 0..samples {
        let x = j as f64 * spacing;
        while seg + 2 < samples && curve[seg + 1].0 < x {
            seg += 1;
        }
        let (x0, h0) = curve[seg];
        let (x1, h1) = curve[seg + 1];
        let t = if x1 > x0 { ((x - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 0.0 };
        heights.push(h0 + t * (h1 - h0));
    }
    Ok(FingerProfile { side, length: geom.length, spacing, heights })
}

/// Built-in object families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapePreset {
    Square,
    Tee,
    Ell,
    Triangle,
    Pentagon,
    Cam,
}

impl ShapePreset {
    pub const ALL: [ShapePreset; 6] = [
        ShapePreset::Square,
        ShapePreset::Tee,
        ShapePreset::Ell,
        ShapePreset::Triangle,
        ShapePreset::Pentagon,
        ShapePreset::Cam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapePreset::Square => "square",
            ShapePreset::Tee => "tee",
            ShapePreset::Ell => "ell",
            ShapePreset::Triangle => "triangle",
            ShapePreset::Pentagon => "pentagon",
            ShapePreset::Cam => "cam",
        }
    }
}

impl fmt::Display for ShapePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownShape(s.to_string()))
    }
}

/// A centered, simple, counterclockwise polygon with its canonical contour.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectShape {
    pub id: String,
    /// Preset and scale the shape was generated from, if any.
    pub origin: Option<(ShapePreset, f64)>,
    vertices: Vec<Point>,
    contour: Vec<Point>,
}

impl ObjectShape {
    /// Builds a shape from polygon vertices in either winding; the polygon is
    /// re-centered on its area centroid and oriented counterclockwise.
    pub fn from_vertices(id: impl Into<String>, vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidParameter("polygon needs at least 3 vertices".into()));
        }
        if !is_simple(&vertices) {
            return Err(Error::InvalidParameter("polygon is not simple".into()));
        }
        let mut vertices = vertices;
        let area = signed_area(&vertices);
        if area.abs() < 1e-12 {
            return Err(Error::InvalidParameter("polygon has zero area".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let c = area_centroid(&vertices);
        for v in &mut vertices {
            v[0] -= c[0];
            v[1] -= c[1];
        }
        let contour = sample_contour(&vertices, CONTOUR_POINTS);
        Ok(Self { id: id.into(), origin: None, vertices, contour })
    }

    /// Rebuilds a shape from vertices that are already counterclockwise and
    /// centred, keeping them bit for bit.
    pub fn from_centered_vertices(id: impl Into<String>, origin: Option<(ShapePreset, f64)>, vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 || !is_simple(&vertices) {
            return Err(Error::InvalidParameter("polygon needs at least 3 vertices and must be simple".into()));
        }
        if signed_area(&vertices) <= 0.0 {
            return Err(Error::InvalidParameter("vertices must wind counterclockwise".into()));
        }
        let c = area_centroid(&vertices);
        let scale = vertices.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
        if c[0].hypot(c[1]) > 1e-9 * scale.max(1.0) {
            return Err(Error::InvalidParameter(format!("vertices are not centred (centroid at {c:?})")));
        }
        let contour = sample_contour(&vertices, CONTOUR_POINTS);
        Ok(Self { id: id.into(), origin, vertices, contour })
    }

    pub fn regular_polygon(id: impl Into<String>, sides: usize, radius: f64) -> Result<Self> {
        if sides < 3 || !(radius > 0.0) {
            return Err(Error::InvalidParameter("regular polygon needs >= 3 sides and radius > 0".into()));
        }
        let verts = (0..sides)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / sides as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::from_vertices(id, verts)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn contour(&self) -> &[Point] {
        &self.contour
    }

    /// Contour flattened as `x0, y0, x1, y1, ...`.
    pub fn flattened_contour(&self) -> Vec<f64> {
        self.contour.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Largest distance of any vertex from the centroid.
    pub fn radius(&self) -> f64 {
        self.vertices.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max)
    }

    /// Reflection about the x-axis (`y -> -y`).
    ///
    /// The contour is the exact mirror image of this shape's contour,
    /// reordered to stay counterclockwise with the canonical start.
    pub fn mirrored(&self) -> Self {
        let mirror = |pts: &[Point]| -> Vec<Point> { pts.iter().rev().map(|p| [p[0], -p[1]]).collect() };
        let vertices = rotate_to_canonical(mirror(&self.vertices));
        let contour = rotate_to_canonical(mirror(&self.contour));
        Self { id: format!("{}_mirror", self.id), origin: None, vertices, contour }
    }
}

/// Generates a preset shape. `scale` is the characteristic size in mm.
pub fn make_shape(preset: ShapePreset, scale: f64) -> Result<ObjectShape> {
    if !(10.0..=60.0).contains(&scale) {
        return Err(Error::InvalidParameter(format!("shape scale {scale} outside [10, 60] mm")));
    }
    let h = scale / 2.0;
    let t = scale / 6.0;
    let verts: Vec<Point> = match preset {
        ShapePreset::Square => vec![[h, -h], [h, h], [-h, h], [-h, -h]],
        ShapePreset::Tee => vec![
            [-t, -h],
            [t, -h],
            [t, t],
            [h, t],
            [h, h],
            [-h, h],
            [-h, t],
            [-t, t],
        ],
        ShapePreset::Ell => vec![[-h, -h], [h, -h], [h, -t], [-t, -t], [-t, h], [-h, h]],
        ShapePreset::Triangle => {
            let r = scale / 3f64.sqrt();
            (0..3)
                .map(|i| {
                    let a = PI / 2.0 + 2.0 * PI * i as f64 / 3.0;
                    [r * a.cos(), r * a.sin()]
                })
                .collect()
        }
        ShapePreset::Pentagon => (0..5)
            .map(|i| {
                let a = PI / 2.0 + 2.0 * PI * i as f64 / 5.0;
                [h * a.cos(), h * a.sin()]
            })
            .collect(),
        ShapePreset::Cam => (0..48)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / 48.0;
                let r = h * (0.7 + 0.3 * a.cos());
                [r * a.cos(), r * a.sin()]
            })
            .collect(),
    };
    let mut shape = ObjectShape::from_vertices(format!("{}_{}", preset.name(), fmt_scale(scale)), verts)?;
    shape.origin = Some((preset, scale));
    Ok(shape)
}

fn fmt_scale(scale: f64) -> String {
    if scale.fract() == 0.0 {
        format!("{scale:.0}")
    } else {
        format!("{scale}").replace('.', "p")
    }
}

pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    a / 2.0
}

fn area_centroid(poly: &[Point]) -> Point {
    let n = poly.len();
    let (mut cx, mut cy, mut a) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let cross = p[0] * q[1] - q[0] * p[1];
        a += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    [cx / (3.0 * a), cy / (3.0 * a)]
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    fn orient(p: Point, q: Point, r: Point) -> f64 {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    }
    fn on_segment(p: Point, q: Point, r: Point) -> bool {
        r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    }
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// True when no two non-adjacent edges intersect.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Index of the canonical start: maximal x, ties broken by maximal y.
fn canonical_start(pts: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in pts.iter().enumerate() {
        let b = pts[best];
        if p[0] > b[0] || (p[0] == b[0] && p[1] > b[1]) {
            best = i;
        }
    }
    best
}

fn rotate_to_canonical(mut pts: Vec<Point>) -> Vec<Point> {
    let s = canonical_start(&pts);
    pts.rotate_left(s);
    pts
}

/// Samples `count` points uniformly by arc length along a CCW polygon,
/// starting at the canonical start vertex.
fn sample_contour(poly: &[Point], count: usize) -> Vec<Point> {
    let ring = rotate_to_canonical(poly.to_vec());
    let n = ring.len();
    let edge_len: Vec<f64> = (0..n)
        .map(|i| {
            let p = ring[i];
            let q = ring[(i + 1) % n];
            (q[0] - p[0]).hypot(q[1] - p[1])
        })
        .collect();
    let perimeter: f64 = edge_len.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut edge = 0;
    let mut edge_start = 0.0;
    for k in 0..count {
        let s = perimeter * k as f64 / count as f64;
        while edge + 1 < n && edge_start + edge_len[edge] <= s {
            edge_start += edge_len[edge];
            edge += 1;
        }
        let p = ring[edge];
        let q = ring[(edge + 1) % n];
        let t = ((s - edge_start) / edge_len[edge]).clamp(0.0, 1.0);
        out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
    }
    out
}

/// Planar object pose in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub theta: f64,
    pub x: f64,
    pub y: f64,
}

impl Pose {
    pub fn new(theta: f64, x: f64, y: f64) -> Self {
        Self { theta: wrap_angle(theta), x, y }
    }

    /// Pose reflected about the x-axis.
    pub fn mirrored(&self) -> Self {
        Pose::new(-self.theta, self.x, -self.y)
    }
}

/// Object motion caused by one interaction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaPose {
    pub dtheta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl DeltaPose {
    pub fn new(dtheta: f64, dx: f64, dy: f64) -> Self {
        Self { dtheta: wrap_delta(dtheta), dx, dy }
    }

    pub fn between(from: &Pose, to: &Pose) -> Self {
        DeltaPose::new(to.theta - from.theta, to.x - from.x, to.y - from.y)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dtheta, self.dx, self.dy]
    }
}

/// Regular grid of initial poses, enumerated with orientation outermost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGrid {
    pub n_theta: usize,
    pub n_x: usize,
    pub n_y: usize,
    /// Half-width of the position square in mm.
    #[serde(rename = "r", alias = "radius")]
    pub radius: f64,
}

impl Default for PoseGrid {
    fn default() -> Self {
        Self { n_theta: 360, n_x: 5, n_y: 5, radius: 3.0 }
    }
}

impl PoseGrid {
    pub fn new(n_theta: usize, n_x: usize, n_y: usize, radius: f64) -> Result<Self> {
        let g = Self { n_theta, n_x, n_y, radius };
        g.validate()?;
        Ok(g)
    }

    /// Orientations only, at the gripper center.
    pub fn orientations(n_theta: usize) -> Self {
        Self { n_theta, n_x: 1, n_y: 1, radius: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_theta == 0 || self.n_x == 0 || self.n_y == 0 {
            return Err(Error::InvalidParameter("pose grid dimensions must be positive".into()));
        }
        if !(self.radius >= 0.0) {
            return Err(Error::InvalidParameter("pose grid radius must be >= 0".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_theta * self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta(&self, i: usize) -> f64 {
        -PI + 2.0 * PI * i as f64 / self.n_theta as f64
    }

    fn axis(&self, n: usize, j: usize) -> f64 {
        if n == 1 {
            0.0
        } else {
            -self.radius + 2.0 * self.radius * j as f64 / (n - 1) as f64
        }
    }

    pub fn pose(&self, i_theta: usize, i_x: usize, i_y: usize) -> Pose {
        Pose { theta: self.theta(i_theta), x: self.axis(self.n_x, i_x), y: self.axis(self.n_y, i_y) }
    }

    pub fn index(&self, i_theta: usize, i_x: usize, i_y: usize) -> usize {
        (i_theta * self.n_x + i_x) * self.n_y + i_y
    }

    /// All cells in row-major order (orientation, then x, then y).
    pub fn cells(&self) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.len());
        for it in 0..self.n_theta {
            for ix in 0..self.n_x {
                for iy in 0..self.n_y {
                    out.push(self.pose(it, ix, iy));
                }
            }
        }
        out
    }

    /// Orientation index of a flat cell index.
    pub fn theta_index(&self, cell: usize) -> usize {
        cell / (self.n_x * self.n_y)
    }
}

/// Rotates the contour by `pose.theta`, then translates by `(x, y)`.
pub fn transform(shape: &ObjectShape, pose: &Pose) -> Vec<Point> {
    let (s, c) = pose.theta.sin_cos();
    shape
        .contour()
        .iter()
        .map(|p| [c * p[0] - s * p[1] + pose.x, s * p[0] + c * p[1] + pose.y])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binom(n: u64, k: u64) -> f64 {
        (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64)
    }

    fn bernstein(ctrl: &[f64], t: f64) -> f64 {
        (0..4).map(|i| binom(3, i as u64) * (1.0 - t).powi(3 - i) * t.powi(i) * ctrl[i as usize]).sum()
    }

    #[test]
    fn bezier_examples() {
        for &t in &[0.0, 0.3, 1.0] {
            assert!((bezier_eval(2.5, 2.5, 2.5, 2.5, t).unwrap() - 2.5).abs() < 1e-15);
            assert!((bezier_eval(0.0, 1.0, 2.0, 3.0, t).unwrap() - 3.0 * t).abs() < 1e-15);
        }
        // (1-t)^3*0 + 3(1-t)^2 t*1 + 3(1-t)t^2*0 + t^3*1 at t = 1/2: 3/8 + 1/8.
        assert!((bezier_eval(0.0, 1.0, 0.0, 1.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(bezier_eval(0.0, 0.0, 0.0, 0.0, 1.5).is_err());
        assert!(bezier_eval(0.0, 0.0, 0.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn control_vector_validation() {
        assert!(ControlVector::new(vec![0.0; 32], 16).is_ok());
        assert!(matches!(ControlVector::new(vec![0.0; 30], 15), Err(Error::ControlPointCount(_))));
        assert!(matches!(ControlVector::new(vec![0.0; 6], 3), Err(Error::ControlPointCount(_))));
        assert!(matches!(ControlVector::new(vec![0.0; 31], 16), Err(Error::ControlPointCount(_))));
        assert!(matches!(
            ControlVector::new(vec![1.5; 8], 4),
            Err(Error::ControlValueOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn flat_and_constant_profiles() {
        let g = FingerGeometry::default();
        let zero = ControlVector::zeros(16).unwrap();
        let p = finger_profile(&zero, Side::Left, &g).unwrap();
        assert!(p.heights().iter().all(|&h| h == 0.0));
        let half = ControlVector::new(vec![0.5; 32], 16).unwrap();
        let p = finger_profile(&half, Side::Right, &g).unwrap();
        assert!(p.heights().iter().all(|&h| (h - 7.5).abs() < 1e-12));
        assert!(p.len() >= 256);
        let xs: Vec<f64> = p.xs().collect();
        assert!(xs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn alternating_profile_matches_dense_bernstein() {
        let g = FingerGeometry::default();
        let vals: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let m = ControlVector::new(vals, 16).unwrap();
        for side in [Side::Left, Side::Right] {
            let p = finger_profile(&m, side, &g).unwrap();
            let ctrl = m.side(side);
            let seg_len = g.length / 5.0;
            for (x, h) in p.samples() {
                let seg = ((x / seg_len).floor() as usize).min(4);
                let t = x / seg_len - seg as f64;
                let expect = bernstein(&ctrl[3 * seg..3 * seg + 4], t) * g.d_max;
                assert!((h - expect).abs() < 1e-9, "x = {x}: {h} vs {expect}");
            }
        }
    }

    #[test]
    fn wrong_control_count_for_geometry() {
        let g = FingerGeometry::default();
        let m = ControlVector::zeros(7).unwrap();
        assert!(matches!(finger_profile(&m, Side::Left, &g), Err(Error::ControlPointCount(_))));
    }

    #[test]
    fn square_preset() {
        let s = make_shape(ShapePreset::Square, 40.0).unwrap();
        assert_eq!(s.vertices().len(), 4);
        for v in s.vertices() {
            assert!((v[0].abs() - 20.0).abs() < 1e-12 && (v[1].abs() - 20.0).abs() < 1e-12);
        }
        let c = area_centroid(s.vertices());
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        assert_eq!(s.contour()[0], [20.0, 20.0]);
    }

    #[test]
    fn tee_is_simple_and_ccw() {
        let s = make_shape(ShapePreset::Tee, 40.0).unwrap();
        assert_eq!(s.vertices().len(), 8);
        assert!(signed_area(s.vertices()) > 0.0);
        assert!(is_simple(s.vertices()));
        // A bow-tie is rejected.
        let bowtie = vec![[0.0, 0.0], [10.0, 10.0], [10.0, 0.0], [0.0, 10.0]];
        assert!(ObjectShape::from_vertices("bowtie", bowtie).is_err());
    }

    /// Arc-length position of a boundary point, found independently by
    /// projecting onto the closest polygon edge.
    fn arc_position(poly: &[Point], p: Point) -> f64 {
        let n = poly.len();
        let mut best = (f64::INFINITY, 0.0);
        let mut acc = 0.0;
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            let t = (((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len)).clamp(0.0, 1.0);
            let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            let d = (q[0] - p[0]).hypot(q[1] - p[1]);
            if d < best.0 - 1e-12 {
                best = (d, acc + t * len);
            }
            acc += len;
        }
        best.1
    }

    #[test]
    fn contour_gaps_are_uniform() {
        for preset in ShapePreset::ALL {
            let s = make_shape(preset, 30.0).unwrap();
            let ring = rotate_to_canonical(s.vertices().to_vec());
            let perim: f64 = (0..ring.len())
                .map(|i| {
                    let a = ring[i];
                    let b = ring[(i + 1) % ring.len()];
                    (b[0] - a[0]).hypot(b[1] - a[1])
                })
                .sum();
            let contour = s.contour();
            assert_eq!(contour.len(), 100);
            let pos: Vec<f64> = contour.iter().map(|&p| arc_position(&ring, p)).collect();
            let gap = perim / 100.0;
            for k in 0..100 {
                let next = if k == 99 { perim } else { pos[k + 1] };
                let d = next - pos[k];
                assert!(((d - gap) / gap).abs() < 1e-9, "{preset}: gap {k} = {d}, want {gap}");
            }
        }
    }

    #[test]
    fn unknown_preset_and_bad_scale() {
        assert!(matches!("blob".parse::<ShapePreset>(), Err(Error::UnknownShape(_))));
        assert!(make_shape(ShapePreset::Square, 5.0).is_err());
    }

    #[test]
    fn transform_examples() {
        let s = make_shape(ShapePreset::Square, 40.0).unwrap();
        assert_eq!(transform(&s, &Pose::default()), s.contour());
        let rotated = transform(&s, &Pose::new(PI - 1e-15, 0.0, 0.0));
        for p in rotated {
            assert!(s.contour().iter().any(|q| (q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9));
        }
        let pt = ObjectShape {
            id: "pt".into(),
            origin: None,
            vertices: vec![],
            contour: vec![[3.0, 0.0]],
        };
        let out = transform(&pt, &Pose::new(PI / 2.0, 1.0, 2.0));
        assert!((out[0][0] - 1.0).abs() < 1e-12 && (out[0][1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mirrored_shape_is_exact_reflection() {
        let s = make_shape(ShapePreset::Tee, 30.0).unwrap();
        let m = s.mirrored();
        assert!(signed_area(m.vertices()) > 0.0);
        for p in s.contour() {
            assert!(m.contour().contains(&[p[0], -p[1]]));
        }
    }

    #[test]
    fn grid_layout() {
        let g = PoseGrid::new(360, 5, 5, 3.0).unwrap();
        assert_eq!(g.len(), 9000);
        let cells = g.cells();
        assert_eq!(cells[g.index(2, 1, 3)], g.pose(2, 1, 3));
        assert_eq!(g.theta_index(g.index(7, 4, 4)), 7);
        assert_eq!(g.pose(0, 0, 0), Pose { theta: -PI, x: -3.0, y: -3.0 });
        assert_eq!(g.pose(180, 2, 2), Pose { theta: 0.0, x: 0.0, y: 0.0 });
    }

    proptest! {
        #[test]
        fn wrap_properties(theta in -50.0f64..50.0) {
            let w = wrap_angle(theta);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert_eq!(wrap_angle(w), w);
            let shifted = wrap_angle(theta + 2.0 * PI);
            let d = (shifted - w).abs();
            prop_assert!(d < 1e-12 || (2.0 * PI - d) < 1e-12);
            let wd = wrap_delta(theta);
            prop_assert!(wd > -PI && wd <= PI);
        }

        #[test]
        fn profile_hull_endpoints_and_lipschitz(
            vals in proptest::collection::vec(-1.0f64..=1.0, 32),
            idx in 0usize..32,
            delta in -0.5f64..0.5,
        ) {
            let g = FingerGeometry::default();
            let m = ControlVector::new(vals.clone(), 16).unwrap();
            for side in [Side::Left, Side::Right] {
                let p = finger_profile(&m, side, &g).unwrap();
                let ctrl = m.side(side);
                let seg_len = g.length / 5.0;
                for (x, h) in p.samples() {
                    let seg = ((x / seg_len).floor() as usize).min(4);
                    let c = &ctrl[3 * seg..3 * seg + 4];
                    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min) * g.d_max;
                    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * g.d_max;
                    prop_assert!(h >= lo - 1e-9 && h <= hi + 1e-9);
                }
                let hs = p.heights();
                prop_assert!((hs[0] - ctrl[0] * g.d_max).abs() <= 1e-6 * g.d_max);
                prop_assert!((hs[hs.len() - 1] - ctrl[15] * g.d_max).abs() <= 1e-6 * g.d_max);
            }
            let mut perturbed = vals;
            perturbed[idx] = (perturbed[idx] + delta).clamp(-1.0, 1.0);
            let actual = (perturbed[idx] - m.values()[idx]).abs();
            let m2 = ControlVector::new(perturbed, 16).unwrap();
            for side in [Side::Left, Side::Right] {
                let a = finger_profile(&m, side, &g).unwrap();
                let b = finger_profile(&m2, side, &g).unwrap();
                for (ha, hb) in a.heights().iter().zip(b.heights()) {
                    prop_assert!((ha - hb).abs() <= actual * g.d_max + 1e-9);
                }
            }
        }
    }
}
