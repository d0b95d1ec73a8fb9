//! Deterministic quasi-static model of one parallel-jaw open-close action.
//!
//! Frame: the jaws close along ±y, the finger length runs along x with the
//! finger spanning `x ∈ [-L/2, L/2]`. Up is −x, down is +x, left is −y and
//! right is +y. The left finger surface sits at `y = -(gap/2 - prot_left(x))`
//! and the right one at `y = gap/2 - prot_right(x)`.
//!
//! After each gap decrement the object pose is relaxed by damped gradient
//! descent on the penetration energy `E = Σ d_i²` of its contour samples.
//! All reductions use exact summation, so a mirrored setup produces exactly
//! the mirrored motion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{InteractionProfile, ProfileSource};
use crate::geometry::{finger_profile, ControlVector, DeltaPose, FingerGeometry, FingerProfile, ObjectShape, Point, Pose, PoseGrid, Side};
use crate::util::ExactSum;
use crate::{Error, Result};

/// Relative energy decrease over [`STAGNATION_WINDOW`] iterations below which
/// the object counts as jammed.
const STAGNATION_REL: f64 = 1e-6;
const STAGNATION_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Jaw gap before closing (mm).
    pub gap_open: f64,
    /// Smallest gap the jaws reach (mm).
    pub gap_min: f64,
    /// Gap decrement per closing level (mm).
    pub close_step: f64,
    /// Friction factor; tangential (x) corrections are scaled by `1/(1+mu)`.
    pub mu: f64,
    /// Penetration tolerance (mm); a level is resolved once `E < pen_tol²`.
    pub pen_tol: f64,
    pub max_resolve_iters: usize,
    /// Per-iteration rotation cap (rad).
    pub step_cap_theta: f64,
    /// Per-iteration translation cap (mm).
    pub step_cap_xy: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            gap_open: 80.0,
            gap_min: 2.0,
            close_step: 0.5,
            mu: 0.5,
            pen_tol: 1e-3,
            max_resolve_iters: 200,
            step_cap_theta: 0.01,
            step_cap_xy: 0.2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gap_open > self.gap_min
            && self.gap_min > 0.0
            && self.close_step > 0.0
            && self.mu >= 0.0
            && self.pen_tol > 0.0
            && self.max_resolve_iters > 0
            && self.step_cap_theta > 0.0
            && self.step_cap_xy > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid simulator config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub delta: DeltaPose,
    pub final_gap: f64,
    pub jammed: bool,
    pub resolve_iterations: usize,
}

/// A finger pair ready for contact queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Jaw {
    left: FingerProfile,
    right: FingerProfile,
    length: f64,
}

impl Jaw {
    pub fn new(m: &ControlVector, geom: &FingerGeometry) -> Result<Self> {
        Ok(Self {
            left: finger_profile(m, Side::Left, geom)?,
            right: finger_profile(m, Side::Right, geom)?,
            length: geom.length,
        })
    }

    pub fn from_profiles(left: FingerProfile, right: FingerProfile) -> Result<Self> {
        if left.length() != right.length() {
            return Err(Error::InvalidParameter("finger lengths differ".into()));
        }
        let length = left.length();
        Ok(Self { left, right, length })
    }

    pub fn left(&self) -> &FingerProfile {
        &self.left
    }

    pub fn right(&self) -> &FingerProfile {
        &self.right
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// The jaw reflected about the closing axis: fingers swap sides.
    pub fn mirrored(&self) -> Self {
        let mut left = self.right.clone();
        let mut right = self.left.clone();
        left.side = Side::Left;
        right.side = Side::Right;
        Self { left, right, length: self.length }
    }
}

#[derive(Debug, Clone, Copy)]
struct ContactState {
    energy: f64,
    grad: [f64; 3],
    active: usize,
}

struct Contact<'a> {
    jaw: &'a Jaw,
    contour: &'a [Point],
    half_len: f64,
    inv_rho2: f64,
    sums: [ExactSum; 4],
}

impl<'a> Contact<'a> {
    fn new(jaw: &'a Jaw, shape: &'a ObjectShape) -> Self {
        let contour = shape.contour();
        let rho2 = crate::util::exact_sum(contour.iter().map(|p| p[0] * p[0] + p[1] * p[1])) / contour.len() as f64;
        Self {
            jaw,
            contour,
            half_len: jaw.length / 2.0,
            inv_rho2: 1.0 / rho2.max(1e-12),
            sums: Default::default(),
        }
    }

    /// Gap at which the first contact would occur for this pose.
    fn contact_gap(&self, q: &Pose) -> f64 {
        let (s, c) = q.theta.sin_cos();
        let mut g = f64::NEG_INFINITY;
        for p in self.contour {
            let px = (c * p[0] - s * p[1]) + q.x;
            let py = (s * p[0] + c * p[1]) + q.y;
            let u = px + self.half_len;
            let hl = self.jaw.left.height(u);
            let hr = self.jaw.right.height(u);
            g = g.max(2.0 * (hl - py)).max(2.0 * (hr + py));
        }
        g
    }

    fn in_workspace(&self, q: &Pose, gap_open: f64) -> bool {
        let (s, c) = q.theta.sin_cos();
        let half_gap = gap_open / 2.0;
        self.contour.iter().all(|p| {
            let px = (c * p[0] - s * p[1]) + q.x;
            let py = (s * p[0] + c * p[1]) + q.y;
            let u = px + self.half_len;
            (0.0..=self.jaw.length).contains(&u)
                && (self.jaw.left.height(u) - half_gap) - py < 0.0
                && (self.jaw.right.height(u) - half_gap) + py < 0.0
        })
    }

    fn evaluate(&mut self, q: &Pose, gap: f64) -> ContactState {
        let (s, c) = q.theta.sin_cos();
        let half_gap = gap / 2.0;
        for acc in &mut self.sums {
            acc.clear();
        }
        let mut active = 0;
        let [e, gt, gx, gy] = &mut self.sums;
        for p in self.contour {
            let rx = c * p[0] - s * p[1];
            let ry = s * p[0] + c * p[1];
            let py = ry + q.y;
            let u = (rx + q.x) + self.half_len;

            let (hl, sl) = self.jaw.left.height_and_slope(u);
            let dl = (hl - half_gap) - py;
            if dl > 0.0 {
                active += 1;
                let w = 2.0 * dl;
                e.add(dl * dl);
                gt.add(w * (-(sl * ry) - rx));
                gx.add(w * sl);
                gy.add(-w);
            }
            let (hr, sr) = self.jaw.right.height_and_slope(u);
            let dr = (hr - half_gap) + py;
            if dr > 0.0 {
                active += 1;
                let w = 2.0 * dr;
                e.add(dr * dr);
                gt.add(w * (-(sr * ry) + rx));
                gx.add(w * sr);
                gy.add(w);
            }
        }
        ContactState { energy: e.total(), grad: [gt.total(), gx.total(), gy.total()], active }
    }
}

/// Per-level record of accepted energies, for inspection in tests.
pub type EnergyTrace = Vec<Vec<f64>>;

/// Simulates one closing action from `pose` and returns the object motion.
pub fn close_once(shape: &ObjectShape, jaw: &Jaw, pose: &Pose, cfg: &SimConfig) -> Result<SimResult> {
    simulate(shape, jaw, pose, cfg, None)
}

/// As [`close_once`], also returning the accepted energies of every resolve
/// phase.
pub fn close_once_traced(shape: &ObjectShape, jaw: &Jaw, pose: &Pose, cfg: &SimConfig) -> Result<(SimResult, EnergyTrace)> {
    let mut trace = Vec::new();
    let r = simulate(shape, jaw, pose, cfg, Some(&mut trace))?;
    Ok((r, trace))
}

fn simulate(shape: &ObjectShape, jaw: &Jaw, pose: &Pose, cfg: &SimConfig, mut trace: Option<&mut EnergyTrace>) -> Result<SimResult> {
    let start = Pose::new(pose.theta, pose.x, pose.y);
    let mut contact = Contact::new(jaw, shape);
    if !contact.in_workspace(&start, cfg.gap_open) {
        return Err(Error::OutOfWorkspace(format!(
            "object {} at ({:.4}, {:.4}, {:.4}) is not inside the open jaw",
            shape.id, start.theta, start.x, start.y
        )));
    }

    let levels = ((cfg.gap_open - cfg.gap_min) / cfg.close_step).ceil() as usize;
    let gap_at = |k: usize| (cfg.gap_open - k as f64 * cfg.close_step).max(cfg.gap_min);
    let no_motion = SimResult { delta: DeltaPose::default(), final_gap: cfg.gap_min, jammed: false, resolve_iterations: 0 };

    let first_contact = contact.contact_gap(&start);
    if first_contact < cfg.gap_min - cfg.close_step {
        return Ok(no_motion);
    }
    // Levels above the first contact leave the object untouched.
    let skip = ((cfg.gap_open - first_contact) / cfg.close_step).floor() as isize - 1;
    let first_level = skip.max(1) as usize;

    let tol2 = cfg.pen_tol * cfg.pen_tol;
    let mut q = start;
    let mut iterations = 0;
    let mut final_gap = cfg.gap_min;
    let mut jammed = false;
    let mut settled = (q, gap_at(first_level - 1));
    let mut history: Vec<f64> = Vec::with_capacity(cfg.max_resolve_iters + 1);

    for k in first_level..=levels {
        let gap = gap_at(k);
        final_gap = gap;
        let mut state = contact.evaluate(&q, gap);
        history.clear();
        history.push(state.energy);
        let mut lambda = 1.0;
        for it in 0..cfg.max_resolve_iters {
            if state.energy < tol2 {
                break;
            }
            iterations += 1;
            let eta = lambda / (2.0 * state.active.max(1) as f64);
            let dth = (-eta * state.grad[0] * contact.inv_rho2).clamp(-cfg.step_cap_theta, cfg.step_cap_theta);
            let dx = (-eta * state.grad[1] / (1.0 + cfg.mu)).clamp(-cfg.step_cap_xy, cfg.step_cap_xy);
            let dy = (-eta * state.grad[2]).clamp(-cfg.step_cap_xy, cfg.step_cap_xy);
            let trial = Pose { theta: q.theta + dth, x: q.x + dx, y: q.y + dy };
            let next = contact.evaluate(&trial, gap);
            if next.energy <= state.energy {
                q = trial;
                state = next;
                lambda = (lambda * 2.0).min(1.0);
            } else {
                lambda *= 0.5;
            }
            history.push(state.energy);
            if it + 1 >= STAGNATION_WINDOW {
                let past = history[history.len() - 1 - STAGNATION_WINDOW];
                if past - state.energy < STAGNATION_REL * past {
                    break;
                }
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            let mut accepted = history.clone();
            accepted.dedup();
            t.push(accepted);
        }
        if state.energy >= tol2 {
            // The jaw stops at the last gap the object could settle at.
            jammed = true;
            (q, final_gap) = settled;
            break;
        }
        settled = (q, gap);
    }

    Ok(SimResult {
        delta: DeltaPose::between(&start, &q),
        final_gap,
        jammed,
        resolve_iterations: iterations,
    })
}

/// A multi-action trajectory. `poses[0]` is the initial pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub poses: Vec<Pose>,
    /// Accumulated (unwrapped) rotation after each action.
    pub total_rotation: Vec<f64>,
    /// Set when the object left the workspace before all actions ran.
    pub truncated: bool,
}

impl Rollout {
    pub fn last(&self) -> &Pose {
        self.poses.last().expect("rollout has an initial pose")
    }
}

/// Repeats the open-close action `n_actions` times; the object is not
/// re-centered between actions.
pub fn rollout(shape: &ObjectShape, jaw: &Jaw, pose0: &Pose, n_actions: usize, cfg: &SimConfig) -> Rollout {
    let mut poses = Vec::with_capacity(n_actions + 1);
    let mut total_rotation = Vec::with_capacity(n_actions + 1);
    let mut pose = Pose::new(pose0.theta, pose0.x, pose0.y);
    poses.push(pose);
    total_rotation.push(0.0);
    let mut rot = 0.0;
    for _ in 0..n_actions {
        match close_once(shape, jaw, &pose, cfg) {
            Ok(r) => {
                pose = Pose::new(pose.theta + r.delta.dtheta, pose.x + r.delta.dx, pose.y + r.delta.dy);
                rot += r.delta.dtheta;
                poses.push(pose);
                total_rotation.push(rot);
            }
            Err(_) => return Rollout { poses, total_rotation, truncated: true },
        }
    }
    Rollout { poses, total_rotation, truncated: false }
}

/// Ground-truth interaction profile over a pose grid. Cells whose initial
/// pose is outside the workspace are masked.
pub fn gt_profile(shape: &ObjectShape, jaw: &Jaw, grid: &PoseGrid, cfg: &SimConfig) -> InteractionProfile {
    let results: Vec<Option<DeltaPose>> = grid
        .cells()
        .par_iter()
        .map(|p| close_once(shape, jaw, p, cfg).ok().map(|r| r.delta))
        .collect();
    InteractionProfile::from_cells(*grid, results, ProfileSource::GroundTruth)
}
