//! Ground-truth evaluation of designs: success rates, task metrics,
//! convergence ranges, rollout progress and the best-of / mean-of protocols.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::InteractionProfile;
use crate::geometry::{wrap_delta, ControlVector, DeltaPose, FingerGeometry, ObjectShape, Pose, PoseGrid};
use crate::objectives::TaskSpec;
use crate::simulator::{gt_profile, rollout, Jaw, SimConfig};
use crate::{Error, Result};

/// Tolerances of the convergence-range metric, in degrees.
pub const RANGE_TOLERANCES_DEG: [f64; 3] = [3.0, 5.0, 10.0];

/// Motion a single closure must exceed to count as a success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Radians.
    pub rot: f64,
    /// Millimetres along x.
    pub x: f64,
    /// Millimetres along y.
    pub y: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { rot: 0.03, x: 3.0, y: 2.0 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.rot > 0.0 && self.x > 0.0 && self.y > 0.0) {
            return Err(Error::InvalidParameter(format!("thresholds must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Whether `task` has a per-closure success rule.
pub fn has_success_rule(task: &str) -> bool {
    matches!(task, "up" | "down" | "left" | "right" | "clock" | "counter" | "rotate" | "clockup" | "clockleft")
}

/// Success of one closure for a builtin task.
pub fn task_success(task: &str, d: &DeltaPose, th: &Thresholds) -> Result<bool> {
    Ok(match task {
        "up" => d.dx < -th.x,
        "down" => d.dx > th.x,
        "left" => d.dy < -th.y,
        "right" => d.dy > th.y,
        "clock" => d.dtheta < -th.rot,
        "counter" => d.dtheta > th.rot,
        "rotate" => d.dtheta.abs() > th.rot,
        "clockup" => d.dtheta < -th.rot && d.dx < -th.x,
        "clockleft" => d.dtheta < -th.rot && d.dy < -th.y,
        _ => return Err(Error::UnknownTask(format!("{task} has no success rule"))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub percent: f64,
    pub successes: usize,
    /// Denominator: cells minus masked cells.
    pub valid: usize,
    pub masked: usize,
}

/// Success rate over the valid cells of a profile.
pub fn success_rate_from_profile(task: &str, profile: &InteractionProfile, th: &Thresholds) -> Result<SuccessRate> {
    let mut successes = 0;
    let mut valid = 0;
    for d in profile.valid() {
        valid += 1;
        successes += usize::from(task_success(task, d, th)?);
    }
    if profile.masked > 0 {
        log::warn!("{} of {} cells masked; excluded from the success rate", profile.masked, profile.len());
    }
    let percent = if valid == 0 { 0.0 } else { 100.0 * successes as f64 / valid as f64 };
    Ok(SuccessRate { percent, successes, valid, masked: profile.masked })
}

/// Ground-truth profile at `n_orientations` centred poses.
pub fn center_profile(shape: &ObjectShape, jaw: &Jaw, n_orientations: usize, cfg: &SimConfig) -> Result<InteractionProfile> {
    let grid = PoseGrid::orientations(n_orientations);
    grid.validate()?;
    Ok(gt_profile(shape, jaw, &grid, cfg))
}

/// One closure per centred orientation, scored against the thresholds.
pub fn success_rate(shape: &ObjectShape, jaw: &Jaw, task: &str, n_orientations: usize, cfg: &SimConfig, th: &Thresholds) -> Result<SuccessRate> {
    th.validate()?;
    if !has_success_rule(task) {
        return Err(Error::UnknownTask(format!("{task} has no success rule")));
    }
    success_rate_from_profile(task, &center_profile(shape, jaw, n_orientations, cfg)?, th)
}

/// Mean of `f` over the valid cells (the ground-truth task metric when the
/// profile comes from the simulator).
pub fn task_metric(task: &TaskSpec, profile: &InteractionProfile) -> f64 {
    let (sum, n) = profile.valid_cells().fold((0.0, 0usize), |(s, n), (_, p, d)| (s + task.value(p.theta, d), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// One text line per orientation: index, θ, validity and motion.
pub fn orientation_log(profile: &InteractionProfile) -> String {
    let mut out = String::from("index\ttheta\tvalid\tdtheta\tdx\tdy\n");
    for (i, pose) in profile.grid.cells().iter().enumerate() {
        let d = &profile.deltas[i];
        let _ = writeln!(out, "{i}\t{:.9}\t{}\t{:.9}\t{:.9}\t{:.9}", pose.theta, u8::from(profile.mask[i]), d.dtheta, d.dx, d.dy);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRange {
    /// Arc of initial orientations, in degrees.
    pub range_deg: f64,
    /// Final orientation the arc converges to.
    pub target: Option<f64>,
}

/// Longest circular arc of initial orientations whose final orientations
/// all lie within `tol` (radians) of one observed final orientation.
/// `finals[i]` belongs to the `i`-th of `n` evenly spaced initials; `None`
/// marks a truncated rollout. Ties go to the earliest candidate.
pub fn convergence_range_from_finals(finals: &[Option<f64>], tol: f64) -> ConvergenceRange {
    let n = finals.len();
    let mut best = ConvergenceRange { range_deg: 0.0, target: None };
    let mut best_len = 0;
    for c in finals.iter().flatten() {
        let ok = |i: usize| finals[i].is_some_and(|f| wrap_delta(f - c).abs() <= tol);
        let len = if (0..n).all(ok) {
            n
        } else {
            // Start scanning just after a failing index so runs never wrap
            // past the scan window.
            let start = (0..n).find(|&i| !ok(i)).unwrap_or(0);
            let (mut run, mut longest) = (0, 0);
            for j in 1..=n {
                if ok((start + j) % n) {
                    run += 1;
                    longest = longest.max(run);
                } else {
                    run = 0;
                }
            }
            longest
        };
        if len > best_len {
            best_len = len;
            best = ConvergenceRange { range_deg: 360.0 * len as f64 / n as f64, target: Some(*c) };
        }
    }
    best
}

/// Rolls out `n_actions` closures from each centred orientation.
pub fn rollouts(shape: &ObjectShape, jaw: &Jaw, n_orientations: usize, n_actions: usize, cfg: &SimConfig) -> Vec<crate::simulator::Rollout> {
    let grid = PoseGrid::orientations(n_orientations);
    grid.cells().par_iter().map(|p| rollout(shape, jaw, p, n_actions, cfg)).collect()
}

/// Final orientations of full rollouts; truncated ones are `None`.
pub fn final_orientations(runs: &[crate::simulator::Rollout]) -> Vec<Option<f64>> {
    runs.iter().map(|r| (!r.truncated).then(|| r.last().theta)).collect()
}

pub fn convergence_range(shape: &ObjectShape, jaw: &Jaw, cfg: &SimConfig, tol_deg: f64, n_actions: usize, n_orientations: usize) -> ConvergenceRange {
    let runs = rollouts(shape, jaw, n_orientations, n_actions, cfg);
    convergence_range_from_finals(&final_orientations(&runs), tol_deg.to_radians())
}

/// Mean `|wrap(θ_t − θ_target)|` after each action; truncated rollouts hold
/// their last pose. Length `n_actions + 1`.
pub fn progress_from_rollouts(runs: &[crate::simulator::Rollout], theta_target: f64, n_actions: usize) -> Vec<f64> {
    (0..=n_actions)
        .map(|t| {
            let total: f64 = runs.iter().map(|r| wrap_delta(r.poses[t.min(r.poses.len() - 1)].theta - theta_target).abs()).sum();
            total / runs.len().max(1) as f64
        })
        .collect()
}

pub fn progress_curve(shape: &ObjectShape, jaw: &Jaw, theta_target: f64, n_actions: usize, n_orientations: usize, cfg: &SimConfig) -> Vec<f64> {
    progress_from_rollouts(&rollouts(shape, jaw, n_orientations, n_actions, cfg), theta_target, n_actions)
}

/// What [`evaluate_design`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub thresholds: Thresholds,
    pub n_orientations: usize,
    pub n_actions: usize,
    /// Designs per (approach, shape, task).
    pub n_seeds: usize,
    /// Run multi-action rollouts (final poses and convergence ranges).
    pub rollouts: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { thresholds: Thresholds::default(), n_orientations: 360, n_actions: 40, n_seeds: 16, rollouts: false }
    }
}

/// A task under evaluation: its name (a builtin or a label) and expression.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub spec: TaskSpec,
}

impl EvalTask {
    pub fn builtin(name: &str) -> Result<Self> {
        Ok(Self { name: name.to_string(), spec: TaskSpec::builtin(name)? })
    }
}

/// Ground-truth evaluation of one design on one shape and task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEval {
    pub approach: String,
    pub shape: String,
    pub task: String,
    pub seed: u64,
    /// Success rate in percent, for tasks with a success rule.
    pub success: Option<f64>,
    /// Mean task objective over valid centred orientations.
    pub metric: f64,
    /// Mean (Δθ, Δx, Δy) after one closure.
    pub mean_delta: [f64; 3],
    pub masked: usize,
    /// Mean final (θ, x, y) after the rollouts.
    pub final_mean: Option<[f64; 3]>,
    /// Convergence ranges in degrees at 3°, 5° and 10°.
    pub ranges: Option<[f64; 3]>,
    /// Empirical convergence target at 5°.
    pub converge_target: Option<f64>,
    /// Wrapped distance from the design-stage target, when one exists.
    pub target_error: Option<f64>,
}

impl DesignEval {
    /// The quantity the best-of protocol maximizes: convergence range at 5°
    /// for convergence tasks, the success rate where defined, otherwise the
    /// task metric.
    pub fn selection_metric(&self) -> f64 {
        if self.task == "converge" {
            if let Some(r) = self.ranges {
                return r[1];
            }
        }
        self.success.unwrap_or(self.metric)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_design(
    approach: &str,
    seed: u64,
    m: &ControlVector,
    shape: &ObjectShape,
    task: &EvalTask,
    opts: &EvalOptions,
    geom: &FingerGeometry,
    cfg: &SimConfig,
) -> Result<DesignEval> {
    Ok(evaluate_design_with_profile(approach, seed, m, shape, task, opts, geom, cfg)?.0)
}

/// [`evaluate_design`] that also returns the centred ground-truth profile.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_design_with_profile(
    approach: &str,
    seed: u64,
    m: &ControlVector,
    shape: &ObjectShape,
    task: &EvalTask,
    opts: &EvalOptions,
    geom: &FingerGeometry,
    cfg: &SimConfig,
) -> Result<(DesignEval, InteractionProfile)> {
    let jaw = Jaw::new(m, geom)?;
    let profile = center_profile(shape, &jaw, opts.n_orientations, cfg)?;
    let success = if has_success_rule(&task.name) {
        Some(success_rate_from_profile(&task.name, &profile, &opts.thresholds)?.percent)
    } else {
        None
    };
    let n_valid = profile.valid().count().max(1) as f64;
    let mut mean_delta = [0.0; 3];
    for d in profile.valid() {
        for (acc, v) in mean_delta.iter_mut().zip(d.as_array()) {
            *acc += v / n_valid;
        }
    }
    let mut eval = DesignEval {
        approach: approach.to_string(),
        shape: shape.id.clone(),
        task: task.name.clone(),
        seed,
        success,
        metric: if task.spec.needs_target() { f64::NAN } else { task_metric(&task.spec, &profile) },
        mean_delta,
        masked: profile.masked,
        final_mean: None,
        ranges: None,
        converge_target: None,
        target_error: None,
    };
    if opts.rollouts {
        let runs = rollouts(shape, &jaw, opts.n_orientations, opts.n_actions, cfg);
        let finals = final_orientations(&runs);
        let full: Vec<&Pose> = runs.iter().filter(|r| !r.truncated).map(|r| r.last()).collect();
        if !full.is_empty() {
            let k = full.len() as f64;
            eval.final_mean = Some([
                full.iter().map(|p| p.theta).sum::<f64>() / k,
                full.iter().map(|p| p.x).sum::<f64>() / k,
                full.iter().map(|p| p.y).sum::<f64>() / k,
            ]);
        }
        let ranges = RANGE_TOLERANCES_DEG.map(|t| convergence_range_from_finals(&finals, t.to_radians()));
        eval.ranges = Some(ranges.map(|r| r.range_deg));
        eval.converge_target = ranges[1].target;
        if let (Some(t), Some(c)) = (task.spec.target(), ranges[1].target) {
            eval.target_error = Some(wrap_delta(c - t).abs());
        }
    }
    Ok((eval, profile))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[serde(alias = "best")]
    BestOf16,
    #[serde(alias = "mean")]
    MeanOf16,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" | "best_of_16" => Ok(Self::BestOf16),
            "mean" | "mean_of_16" => Ok(Self::MeanOf16),
            _ => Err(Error::InvalidParameter(format!("unknown aggregation {s:?} (expected best or mean)"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BestOf16 => "best_of_16",
            Self::MeanOf16 => "mean_of_16",
        })
    }
}

/// One aggregated row; `shape` is `"mean"` for the across-shape average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: String,
    pub task: String,
    pub shape: String,
    pub n: usize,
    /// Seed picked by the best-of protocol.
    pub seed: Option<u64>,
    pub success: Option<f64>,
    pub metric: f64,
    pub mean_delta: [f64; 3],
    pub final_mean: Option<[f64; 3]>,
    pub ranges: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub rows: Vec<ReportRow>,
    /// `(approach, shape, task, seed, message)` of designs that failed.
    pub failures: Vec<(String, String, String, u64, String)>,
}

fn mean_opt<const N: usize>(vals: &[Option<[f64; N]>]) -> Option<[f64; N]> {
    let some: Vec<&[f64; N]> = vals.iter().flatten().collect();
    if some.is_empty() {
        return None;
    }
    let mut out = [0.0; N];
    for v in &some {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x / some.len() as f64;
        }
    }
    Some(out)
}

fn mean_scalar(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn combine(approach: &str, task: &str, shape: &str, rows: &[ReportRow], seed: Option<u64>) -> ReportRow {
    ReportRow {
        approach: approach.to_string(),
        task: task.to_string(),
        shape: shape.to_string(),
        n: rows.iter().map(|r| r.n).sum(),
        seed,
        success: mean_scalar(rows.iter().map(|r| r.success)),
        metric: mean_scalar(rows.iter().map(|r| Some(r.metric).filter(|m| m.is_finite()))).unwrap_or(f64::NAN),
        mean_delta: mean_opt(&rows.iter().map(|r| Some(r.mean_delta)).collect::<Vec<_>>()).unwrap_or([f64::NAN; 3]),
        final_mean: mean_opt(&rows.iter().map(|r| r.final_mean).collect::<Vec<_>>()),
        ranges: mean_opt(&rows.iter().map(|r| r.ranges).collect::<Vec<_>>()),
    }
}

fn single(e: &DesignEval) -> ReportRow {
    ReportRow {
        approach: e.approach.clone(),
        task: e.task.clone(),
        shape: e.shape.clone(),
        n: 1,
        seed: Some(e.seed),
        success: e.success,
        metric: e.metric,
        mean_delta: e.mean_delta,
        final_mean: e.final_mean,
        ranges: e.ranges,
    }
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Aggregates evaluations into per-shape rows followed by an across-shape
/// `"mean"` row for every (approach, task), in first-seen order.
pub fn aggregate(evals: &[DesignEval], agg: Aggregation) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for approach in first_seen(evals.iter().map(|e| e.approach.as_str())) {
        for task in first_seen(evals.iter().filter(|e| e.approach == approach).map(|e| e.task.as_str())) {
            let cell: Vec<&DesignEval> = evals.iter().filter(|e| e.approach == approach && e.task == task).collect();
            let mut per_shape = Vec::new();
            for shape in first_seen(cell.iter().map(|e| e.shape.as_str())) {
                let mut seeds: Vec<&DesignEval> = cell.iter().copied().filter(|e| e.shape == shape).collect();
                seeds.sort_by_key(|e| e.seed);
                let row = match agg {
                    Aggregation::BestOf16 => {
                        let best = seeds
                            .iter()
                            .copied()
                            .reduce(|a, b| if b.selection_metric() > a.selection_metric() { b } else { a })
                            .expect("non-empty cell");
                        single(best)
                    }
                    Aggregation::MeanOf16 => combine(approach, task, shape, &seeds.iter().map(|e| single(e)).collect::<Vec<_>>(), None),
                };
                per_shape.push(row);
            }
            let mut mean = combine(approach, task, "mean", &per_shape, None);
            mean.n = per_shape.len();
            rows.extend(per_shape);
            rows.push(mean);
        }
    }
    rows
}

/// A design generator: `(shape, task, seed) ↦ m`.
pub type Approach<'a> = (&'a str, &'a (dyn Fn(&ObjectShape, &EvalTask, u64) -> Result<ControlVector> + Sync));

/// Generates `opts.n_seeds` designs per (approach, shape, task), evaluates
/// them against the simulator and aggregates. Failed designs are listed in
/// the report and skipped.
pub fn run_protocol(
    approaches: &[Approach<'_>],
    shapes: &[ObjectShape],
    tasks: &[EvalTask],
    opts: &EvalOptions,
    agg: Aggregation,
    geom: &FingerGeometry,
    cfg: &SimConfig,
) -> EvalReport {
    let mut evals = Vec::new();
    let mut failures = Vec::new();
    for (name, gen) in approaches {
        for task in tasks {
            for shape in shapes {
                for seed in 0..opts.n_seeds as u64 {
                    match gen(shape, task, seed).and_then(|m| evaluate_design(name, seed, &m, shape, task, opts, geom, cfg)) {
                        Ok(e) => evals.push(e),
                        Err(err) => failures.push((name.to_string(), shape.id.clone(), task.name.clone(), seed, err.to_string())),
                    }
                }
            }
        }
    }
    EvalReport { aggregation: agg, rows: aggregate(&evals, agg), failures }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Tab-separated table, one row per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "aggregation\tapproach\ttask\tshape\tn\tseed\tsuccess_pct\tmetric\tmean_dtheta\tmean_dx\tmean_dy\tfinal_theta\tfinal_x\tfinal_y\trange3_deg\trange5_deg\trange10_deg\n",
        );
        for r in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.aggregation,
                r.approach,
                r.task,
                r.shape,
                r.n,
                r.seed.map_or_else(|| "-".to_string(), |s| s.to_string()),
                cell(r.success),
                cell(Some(r.metric).filter(|m| m.is_finite())),
            );
            for v in r.mean_delta {
                let _ = write!(out, "\t{}", cell(Some(v)));
            }
            for i in 0..3 {
                let _ = write!(out, "\t{}", cell(r.final_mean.map(|f| f[i])));
            }
            for i in 0..3 {
                let _ = write!(out, "\t{}", cell(r.ranges.map(|f| f[i])));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Row for `(approach, task, shape)`.
    pub fn row(&self, approach: &str, task: &str, shape: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.approach == approach && r.task == task && r.shape == shape)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::Rng;

    use super::*;
    use crate::dynamics::ProfileSource;
    use crate::geometry::{make_shape, ObjectShape, ShapePreset};
    use crate::util::rng;

    fn synthetic(deltas: Vec<DeltaPose>) -> InteractionProfile {
        let grid = PoseGrid::orientations(deltas.len());
        InteractionProfile::from_cells(grid, deltas.into_iter().map(Some).collect(), ProfileSource::GroundTruth)
    }

    #[test]
    fn uniform_push_right_always_succeeds() {
        let p = synthetic(vec![DeltaPose::new(0.0, 0.0, 2.5); 360]);
        let r = success_rate_from_profile("right", &p, &Thresholds::default()).unwrap();
        assert_eq!(r.percent, 100.0);
        assert_eq!(r.valid, 360);
    }

    #[test]
    fn half_counter_rotation_is_half_success() {
        let deltas = (0..360).map(|i| DeltaPose::new(if i % 2 == 0 { 0.05 } else { -0.05 }, 0.0, 0.0)).collect();
        let r = success_rate_from_profile("counter", &synthetic(deltas), &Thresholds::default()).unwrap();
        assert_eq!(r.percent, 50.0);
    }

    #[test]
    fn masked_cells_leave_the_denominator() {
        let grid = PoseGrid::orientations(10);
        let cells = (0..10).map(|i| (i >= 2).then(|| DeltaPose::new(0.1, 0.0, 0.0))).collect();
        let p = InteractionProfile::from_cells(grid, cells, ProfileSource::GroundTruth);
        let r = success_rate_from_profile("rotate", &p, &Thresholds::default()).unwrap();
        assert_eq!((r.valid, r.masked, r.successes), (8, 2, 8));
        let log = orientation_log(&p);
        assert_eq!(log.lines().filter(|l| l.split('\t').nth(2) == Some("1")).count(), 8);
    }

    #[test]
    fn conjunctive_rules() {
        let th = Thresholds::default();
        assert!(task_success("clockup", &DeltaPose::new(-0.05, -4.0, 0.0), &th).unwrap());
        assert!(!task_success("clockup", &DeltaPose::new(-0.05, 0.0, 0.0), &th).unwrap());
        assert!(!task_success("clockleft", &DeltaPose::new(0.0, 0.0, -3.0), &th).unwrap());
        assert!(task_success("rotate", &DeltaPose::new(-0.05, 0.0, 0.0), &th).unwrap());
        assert!(task_success("converge", &DeltaPose::default(), &th).is_err());
    }

    #[test]
    fn flat_fingers_do_not_shift_a_disc() {
        let shape = ObjectShape::regular_polygon("disc", 64, 25.0).unwrap();
        let geom = FingerGeometry::default();
        let jaw = Jaw::new(&ControlVector::zeros(geom.n_per_finger).unwrap(), &geom).unwrap();
        let r = success_rate(&shape, &jaw, "up", 36, &SimConfig::default(), &Thresholds::default()).unwrap();
        assert_eq!(r.percent, 0.0);
    }

    /// Independent oracle: every candidate, every start, walk forward.
    fn brute_range(finals: &[Option<f64>], tol: f64) -> (usize, Option<f64>) {
        let n = finals.len();
        let mut best = (0, None);
        for c in finals.iter().flatten() {
            let close = |i: usize| match finals[i % n] {
                Some(f) => {
                    let d = (f - c).rem_euclid(2.0 * PI);
                    d.min(2.0 * PI - d) <= tol
                }
                None => false,
            };
            let mut len = 0;
            for s in 0..n {
                let mut l = 0;
                while l < n && close(s + l) {
                    l += 1;
                }
                len = len.max(l);
            }
            if len > best.0 {
                best = (len, Some(*c));
            }
        }
        best
    }

    #[test]
    fn convergence_range_matches_brute_force() {
        let mut r = rng(99);
        for trial in 0..100 {
            let n = 120;
            let centre: f64 = r.random_range(-PI..PI);
            let finals: Vec<Option<f64>> = (0..n)
                .map(|_| match r.random_range(0..10) {
                    0 => None,
                    1..=5 => Some(centre + r.random_range(-0.15..0.15)),
                    _ => Some(r.random_range(-PI..PI)),
                })
                .collect();
            for tol_deg in RANGE_TOLERANCES_DEG {
                let got = convergence_range_from_finals(&finals, tol_deg.to_radians());
                let (len, target) = brute_range(&finals, tol_deg.to_radians());
                assert_eq!(got.range_deg, 360.0 * len as f64 / n as f64, "trial {trial}");
                assert_eq!(got.target, target);
            }
        }
    }

    #[test]
    fn convergence_range_examples() {
        let same = vec![Some(0.3); 360];
        assert_eq!(convergence_range_from_finals(&same, 0.01).range_deg, 360.0);
        let finals: Vec<Option<f64>> = (0..360).map(|i| Some(if (100..220).contains(&i) { 0.0 } else { -PI + (i as f64) * 0.5 })).collect();
        // Scattered finals are 0.5 rad apart; keep them clear of zero too.
        let finals: Vec<Option<f64>> = finals
            .into_iter()
            .enumerate()
            .map(|(i, f)| if (100..220).contains(&i) { f } else { f.map(|v| if wrap_delta(v).abs() < 0.2 { 2.5 + i as f64 } else { v }) })
            .collect();
        let r = convergence_range_from_finals(&finals, 5f64.to_radians());
        assert_eq!(r.range_deg, 120.0);
        assert_eq!(r.target, Some(0.0));
    }

    #[test]
    fn range_is_monotone_in_tolerance() {
        let mut r = rng(4);
        for _ in 0..20 {
            let finals: Vec<Option<f64>> = (0..90).map(|_| Some(r.random_range(-0.5..0.5))).collect();
            let v = RANGE_TOLERANCES_DEG.map(|t| convergence_range_from_finals(&finals, t.to_radians()).range_deg);
            assert!(v[0] <= v[1] && v[1] <= v[2]);
        }
    }

    #[test]
    fn shifted_angles_change_nothing() {
        let mut r = rng(8);
        let finals: Vec<Option<f64>> = (0..72).map(|_| Some(r.random_range(-0.3..0.3))).collect();
        let shifted: Vec<Option<f64>> = finals.iter().map(|f| f.map(|v| v + 2.0 * PI)).collect();
        let a = convergence_range_from_finals(&finals, 0.1);
        let b = convergence_range_from_finals(&shifted, 0.1);
        assert_eq!(a.range_deg, b.range_deg);
    }

    #[test]
    fn flat_fingers_progress_is_flat() {
        let shape = ObjectShape::regular_polygon("disc", 64, 25.0).unwrap();
        let geom = FingerGeometry::default();
        let jaw = Jaw::new(&ControlVector::zeros(geom.n_per_finger).unwrap(), &geom).unwrap();
        let curve = progress_curve(&shape, &jaw, 0.0, 5, 12, &SimConfig::default());
        assert_eq!(curve.len(), 6);
        for v in &curve {
            assert!((v - curve[0]).abs() < 1e-3);
        }
    }

    fn fake(approach: &str, shape: &str, seed: u64, success: f64) -> DesignEval {
        DesignEval {
            approach: approach.into(),
            shape: shape.into(),
            task: "right".into(),
            seed,
            success: Some(success),
            metric: success / 100.0,
            mean_delta: [0.0, 0.0, success / 10.0],
            masked: 0,
            final_mean: None,
            ranges: None,
            converge_target: None,
            target_error: None,
        }
    }

    #[test]
    fn best_dominates_mean() {
        let mut evals = Vec::new();
        for (i, shape) in ["a", "b", "c"].iter().enumerate() {
            for seed in 0..16 {
                evals.push(fake("dgdm", shape, seed, ((seed * 7 + i as u64 * 13) % 50) as f64));
            }
        }
        let best = aggregate(&evals, Aggregation::BestOf16);
        let mean = aggregate(&evals, Aggregation::MeanOf16);
        assert_eq!(best.len(), 4);
        for (b, m) in best.iter().zip(&mean) {
            assert!(b.success.unwrap() >= m.success.unwrap());
        }
    }

    #[test]
    fn single_design_report_is_the_evaluation() {
        let shape = make_shape(ShapePreset::Square, 25.0).unwrap();
        let geom = FingerGeometry::default();
        let opts = EvalOptions { n_orientations: 36, n_seeds: 1, ..Default::default() };
        let task = EvalTask::builtin("right").unwrap();
        let m = ControlVector::uniform(&mut rng(2), geom.n_per_finger).unwrap();
        let gen = move |_: &ObjectShape, _: &EvalTask, _: u64| Ok(m.clone());
        let cfg = SimConfig::default();
        let report = run_protocol(&[("x", &gen)], std::slice::from_ref(&shape), std::slice::from_ref(&task), &opts, Aggregation::BestOf16, &geom, &cfg);
        let direct = evaluate_design("x", 0, &gen(&shape, &task, 0).unwrap(), &shape, &task, &opts, &geom, &cfg).unwrap();
        let row = report.row("x", "right", &shape.id).unwrap();
        assert_eq!(row.success, direct.success);
        assert_eq!(row.metric, direct.metric);
        assert_eq!(report.row("x", "right", "mean").unwrap().success, direct.success);
        let again = run_protocol(&[("x", &gen)], std::slice::from_ref(&shape), std::slice::from_ref(&task), &opts, Aggregation::BestOf16, &geom, &cfg);
        assert_eq!(report.to_tsv(), again.to_tsv());
    }
}
