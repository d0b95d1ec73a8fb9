//! End-to-end steps shared by the command line and the experiments:
//! shapes, data, training, design generation and evaluation.

use std::str::FromStr;

use crate::config::Config;
use crate::diffusion::{guided_sample, sample_seed, train_denoiser, Denoiser, DenoiserLog, StepLog};
use crate::dynamics::{generate_dataset, train, DynamicsModel, GenerationReport, InteractionDataset, TrainLog};
use crate::eval::{evaluate_design, DesignEval, EvalTask};
use crate::geometry::{make_shape, ControlVector, ObjectShape, PoseGrid};
use crate::io::Design;
use crate::objectives::{select_convergence_target, ScaledObjective, TaskSpec};
use crate::search::{cmaes_optimize, gd_optimize};
use crate::util::{derive_seed, rng};
use crate::{Error, Result};

/// The configured shapes.
pub fn make_shapes(cfg: &Config) -> Result<Vec<ObjectShape>> {
    cfg.data.presets.iter().map(|p| make_shape(*p, cfg.data.scale)).collect()
}

pub fn generate(cfg: &Config, shapes: &[ObjectShape]) -> Result<(InteractionDataset, GenerationReport)> {
    generate_dataset(shapes, cfg.data.n_fingers, &cfg.geometry, &cfg.grid, &cfg.simulator, derive_seed(cfg.seeds.master, "data", 0))
}

pub fn train_dynamics(cfg: &Config, ds: &InteractionDataset, shapes: &[ObjectShape]) -> Result<(DynamicsModel, TrainLog)> {
    train(ds, shapes, cfg.grid.radius, &cfg.dynamics, derive_seed(cfg.seeds.master, "dynamics", 0))
}

pub fn train_diffusion(cfg: &Config) -> Result<(Denoiser, DenoiserLog)> {
    train_denoiser(cfg.geometry.n_per_finger, &cfg.diffusion, derive_seed(cfg.seeds.master, "diffusion", 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Dynamics-guided diffusion sampling.
    Dgdm,
    /// Diffusion sampling without guidance.
    Unguided,
    /// Projected gradient ascent from a uniform random start.
    Gd,
    Cmaes,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dgdm, Method::Unguided, Method::Gd, Method::Cmaes];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dgdm => "dgdm",
            Method::Unguided => "unguided",
            Method::Gd => "gd",
            Method::Cmaes => "cmaes",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?} (expected dgdm, unguided, gd or cmaes)")))
    }
}

/// Parses task text: a builtin name (`right`, `converge`, ...) or a full
/// expression. Objects named in the text override `objects`.
pub fn parse_task(text: &str) -> Result<TaskSpec> {
    let t = text.trim();
    if t == "converge" {
        return TaskSpec::parse("converge()");
    }
    if crate::objectives::BUILTINS.contains(&t) {
        return TaskSpec::builtin(t);
    }
    TaskSpec::parse(t)
}

/// Fills an open convergence target from the model's pseudo profile at the
/// zero probe design.
pub fn resolve_target(cfg: &Config, task: TaskSpec, model: &DynamicsModel, shapes: &[&ObjectShape]) -> Result<TaskSpec> {
    if !task.needs_target() {
        return Ok(task);
    }
    let grid = PoseGrid::new(cfg.design.target_orientations, cfg.grid.n_x, cfg.grid.n_y, cfg.grid.radius)?;
    let probe = ControlVector::zeros(cfg.geometry.n_per_finger)?;
    let target = select_convergence_target(model, shapes, &probe, &grid)?;
    log::info!("convergence target {target:.6} rad");
    Ok(task.with_target(target))
}

/// Seed of design `index` for a master seed; shared by every method so the
/// same index starts from the same noise or initial design.
pub fn design_seed(master: u64, index: usize) -> u64 {
    sample_seed(derive_seed(master, "design", 0), index as u64)
}

/// One generated design plus its per-step sampling log (diffusion methods).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub design: Design,
    pub steps: Vec<StepLog>,
}

/// Generates `count` designs for a task whose target is already resolved.
/// The diffusion methods need `den`.
#[allow(clippy::too_many_arguments)]
pub fn design(
    cfg: &Config,
    model: &DynamicsModel,
    den: Option<&Denoiser>,
    task: &TaskSpec,
    task_text: &str,
    shapes: &[&ObjectShape],
    method: Method,
    scale: f64,
    count: usize,
) -> Result<Vec<Generated>> {
    if task.needs_target() {
        return Err(Error::InvalidParameter("resolve the convergence target before designing".into()));
    }
    if !(scale >= 0.0) {
        return Err(Error::InvalidParameter(format!("guidance scale must be >= 0, got {scale}")));
    }
    let n = cfg.geometry.n_per_finger;
    let den = match (method, den) {
        (Method::Dgdm | Method::Unguided, None) => return Err(Error::InvalidParameter(format!("method {method} needs a denoiser"))),
        (_, d) => d,
    };
    let objective = ScaledObjective::new(task, model, shapes.to_vec(), cfg.grid);
    let d = &cfg.diffusion;
    (0..count)
        .map(|index| {
            let seed = design_seed(cfg.seeds.master, index);
            let (m, steps) = match method {
                Method::Dgdm => {
                    let den = den.expect("checked above");
                    let s = guided_sample(den, Some(|m: &[f64]| objective.value_and_grad(m)), scale, d.k_inf, d.spacing, n, seed)?;
                    (s.m, s.steps)
                }
                Method::Unguided => {
                    let s = crate::diffusion::ddim_sample(den.expect("checked above"), d.k_inf, d.spacing, n, seed)?;
                    (s.m, s.steps)
                }
                Method::Gd => {
                    let m0 = ControlVector::uniform(&mut rng(seed), n)?;
                    (gd_optimize(|m: &[f64]| objective.value_and_grad(m), &m0, &cfg.design.gd)?.m, Vec::new())
                }
                Method::Cmaes => {
                    let m0 = ControlVector::uniform(&mut rng(seed), n)?;
                    let obj = |m: &[f64]| objective.value(&ControlVector::clamped(m, n)?);
                    (cmaes_optimize(obj, &m0, &cfg.design.cmaes, derive_seed(seed, "cmaes", 0))?.0, Vec::new())
                }
            };
            let design = Design {
                method: method.to_string(),
                task: task_text.to_string(),
                objects: shapes.iter().map(|s| s.id.clone()).collect(),
                scale: if matches!(method, Method::Dgdm) { scale } else { 0.0 },
                seed,
                index,
                theta_target: task.target(),
                predicted_f: objective.value(&m)?,
                m,
            };
            Ok(Generated { design, steps })
        })
        .collect()
}

/// Ground-truth evaluation of a design on one of its objects.
pub fn evaluate(cfg: &Config, design: &Design, task: &EvalTask, shape: &ObjectShape) -> Result<DesignEval> {
    evaluate_design(&design.method, design.index as u64, &design.m, shape, task, &cfg.eval, &cfg.geometry, &cfg.simulator)
}

/// Task under evaluation for a design: its text resolved with the design's
/// recorded target.
pub fn eval_task(design: &Design) -> Result<EvalTask> {
    let mut spec = parse_task(&design.task)?;
    if spec.needs_target() {
        let t = design.theta_target.ok_or_else(|| Error::InvalidParameter(format!("design {} lacks a convergence target", design.index)))?;
        spec = spec.with_target(t);
    }
    let name = if crate::objectives::BUILTINS.contains(&design.task.trim()) { design.task.trim().to_string() } else { design.task.clone() };
    Ok(EvalTask { name, spec })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methods_parse_and_print() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn tasks_parse_from_names_and_expressions() {
        assert!(parse_task("right").unwrap().target().is_none());
        assert!(parse_task("converge").unwrap().needs_target());
        assert_eq!(parse_task("converge(target=0.5)").unwrap().target(), Some(0.5));
        assert!(parse_task("sum(neg(dtheta), neg(dx))").is_ok());
        assert!(parse_task("sideways").is_err());
    }

    #[test]
    fn design_seeds_are_method_independent() {
        assert_eq!(design_seed(3, 2), design_seed(3, 2));
        assert_ne!(design_seed(3, 2), design_seed(3, 1));
        assert_ne!(design_seed(3, 2), design_seed(4, 2));
    }
}
