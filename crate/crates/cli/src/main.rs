//! `grip`: shapes, data, training, design generation and evaluation.

mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use grip_core::dynamics::resolve_shapes;
use grip_core::eval::{aggregate, evaluate_design_with_profile, Aggregation, DesignEval, EvalReport};
use grip_core::io::{format_design, load_design, load_shape_dir, save_shape, Design};
use grip_core::pipeline::{self, Method};
use grip_core::{Config, Denoiser, DynamicsModel, InteractionDataset, ObjectShape, PoseGrid, ShapePreset};

#[derive(Parser)]
#[command(name = "grip", version, about = "Task-driven design of parallel-jaw gripper fingers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `diffusion.K=15` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let cfg = match &self.config {
            Some(p) => Config::load(p, &self.overrides).with_context(|| format!("loading {}", p.display()))?,
            None => Config::with_overrides(&Config::default(), &self.overrides)?,
        };
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write preset object shapes.
    GenShapes {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated presets (square, tee, triangle, ...).
        #[arg(long, value_delimiter = ',', default_value = "square,tee,triangle")]
        presets: Vec<ShapePreset>,
        /// Comma-separated scales in mm.
        #[arg(long, value_delimiter = ',', default_value = "25")]
        scales: Vec<f64>,
    },
    /// Simulate random finger pairs on every shape and grid cell.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shape directory; the configured presets are used when omitted.
        #[arg(long)]
        shapes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dynamics network on a dataset.
    TrainDynamics {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Shape directory for shapes that are not presets.
        #[arg(long)]
        shapes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on the uniform design prior.
    TrainDiffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate designs for a task.
    Design {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Task name (right, clockup, converge, ...) or expression.
        #[arg(long)]
        task: String,
        /// Comma-separated shape ids; defaults to the configured presets.
        #[arg(long, value_delimiter = ',')]
        objects: Vec<String>,
        #[arg(long)]
        shapes: Option<PathBuf>,
        #[arg(long, default_value = "dgdm")]
        method: Method,
        /// Guidance scale; defaults to `design.scale`.
        #[arg(long)]
        scale: Option<f64>,
        /// Number of designs; defaults to `design.samples`.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        dynamics: PathBuf,
        /// Denoiser checkpoint (dgdm and unguided).
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate design files against the simulator.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory searched recursively for `*.design` files.
        #[arg(long)]
        designs: PathBuf,
        /// Comma-separated tasks to report; all tasks found when omitted.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long, default_value = "best")]
        agg: Aggregation,
        #[arg(long)]
        shapes: Option<PathBuf>,
        /// Dynamics checkpoint for predicted profiles in the plots.
        #[arg(long)]
        dynamics: Option<PathBuf>,
        /// Output directory for `report.tsv`, `report.json` and `plots/`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenShapes { out, presets, scales } => gen_shapes(&out, &presets, &scales),
        Command::GenData { cfg, shapes, out } => gen_data(&cfg.load()?, shapes.as_deref(), &out),
        Command::TrainDynamics { cfg, data, shapes, out } => train_dynamics(&cfg.load()?, &data, shapes.as_deref(), &out),
        Command::TrainDiffusion { cfg, out } => train_diffusion(&cfg.load()?, &out),
        Command::Design { cfg, task, objects, shapes, method, scale, samples, dynamics, denoiser, out } => {
            let cfg = cfg.load()?;
            let req = DesignRequest {
                task: &task,
                objects: &objects,
                shapes: shapes.as_deref(),
                method,
                scale: scale.unwrap_or(cfg.design.scale),
                samples: samples.unwrap_or(cfg.design.samples),
                dynamics: &dynamics,
                denoiser: denoiser.as_deref(),
            };
            design(&cfg, &req, &out)
        }
        Command::Evaluate { cfg, designs, tasks, agg, shapes, dynamics, out } => {
            evaluate(&cfg.load()?, &designs, &tasks, agg, shapes.as_deref(), dynamics.as_deref(), &out)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_shapes(out: &Path, presets: &[ShapePreset], scales: &[f64]) -> Result<()> {
    create_dir(out)?;
    for &preset in presets {
        for &scale in scales {
            let shape = grip_core::geometry::make_shape(preset, scale)?;
            let path = out.join(format!("{}.shape", shape.id));
            save_shape(&shape, &path).with_context(|| format!("writing {}", path.display()))?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn config_shapes(cfg: &Config, dir: Option<&Path>) -> Result<Vec<ObjectShape>> {
    match dir {
        Some(d) => {
            let shapes = load_shape_dir(d).with_context(|| format!("reading shapes from {}", d.display()))?;
            if shapes.is_empty() {
                bail!("no .shape files in {}", d.display());
            }
            Ok(shapes)
        }
        None => Ok(pipeline::make_shapes(cfg)?),
    }
}

fn gen_data(cfg: &Config, shapes: Option<&Path>, out: &Path) -> Result<()> {
    let shapes = config_shapes(cfg, shapes)?;
    let (ds, report) = pipeline::generate(cfg, &shapes)?;
    let total = report.records + report.masked;
    log::info!(
        "{} records, {} masked cells ({:.3}%) over {} shapes",
        report.records,
        report.masked,
        100.0 * report.masked as f64 / total.max(1) as f64,
        shapes.len()
    );
    ds.save(out).with_context(|| format!("writing {}", out.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_dynamics(cfg: &Config, data: &Path, shapes_dir: Option<&Path>, out: &Path) -> Result<()> {
    let ds = InteractionDataset::load(data).with_context(|| format!("reading {}", data.display()))?;
    let known = match shapes_dir {
        Some(d) => load_shape_dir(d)?,
        None => pipeline::make_shapes(cfg)?,
    };
    let shapes = resolve_shapes(&ds.shape_ids, &known)?;
    let (model, tlog) = pipeline::train_dynamics(cfg, &ds, &shapes)?;
    model.save(out).with_context(|| format!("writing {}", out.display()))?;
    let mut curve = format!("# baseline\t{}\nepoch\ttrain\tholdout\n", tlog.baseline);
    for (i, (t, h)) in tlog.train_loss.iter().zip(&tlog.holdout_loss).enumerate() {
        let _ = writeln!(curve, "{}\t{t}\t{h}", i + 1);
    }
    write(&sibling(out, ".log.tsv"), curve)?;
    log::info!(
        "best holdout {:.6} at epoch {} ({:.3} of the mean baseline {:.6})",
        tlog.best_holdout,
        tlog.best_epoch,
        tlog.best_holdout / tlog.baseline,
        tlog.baseline
    );
    Ok(())
}

fn train_diffusion(cfg: &Config, out: &Path) -> Result<()> {
    let (den, dlog) = pipeline::train_diffusion(cfg)?;
    den.save(out).with_context(|| format!("writing {}", out.display()))?;
    let mut curve = format!("# initial\t{}\nepoch\tvalidation\n", dlog.initial_loss);
    for (i, l) in dlog.losses.iter().enumerate() {
        let _ = writeln!(curve, "{}\t{l}", i + 1);
    }
    write(&sibling(out, ".log.tsv"), curve)?;
    log::info!("best validation loss {:.6} at epoch {}", dlog.best_loss, dlog.best_epoch);
    Ok(())
}

struct DesignRequest<'a> {
    task: &'a str,
    objects: &'a [String],
    shapes: Option<&'a Path>,
    method: Method,
    scale: f64,
    samples: usize,
    dynamics: &'a Path,
    denoiser: Option<&'a Path>,
}

fn design(cfg: &Config, req: &DesignRequest<'_>, out: &Path) -> Result<()> {
    let spec = pipeline::parse_task(req.task)?;
    let known = match req.shapes {
        Some(d) => load_shape_dir(d)?,
        None => pipeline::make_shapes(cfg)?,
    };
    let ids: Vec<String> = if !spec.objects.is_empty() {
        spec.objects.clone()
    } else if !req.objects.is_empty() {
        req.objects.to_vec()
    } else {
        known.iter().map(|s| s.id.clone()).collect()
    };
    let shapes = resolve_shapes(&ids, &known)?;
    let refs: Vec<&ObjectShape> = shapes.iter().collect();
    let model = DynamicsModel::load(req.dynamics).with_context(|| format!("reading {}", req.dynamics.display()))?;
    if matches!(req.method, Method::Dgdm | Method::Unguided) && req.denoiser.is_none() {
        bail!("--denoiser is required for method {}", req.method);
    }
    let den = req.denoiser.map(|p| Denoiser::load(p).with_context(|| format!("reading {}", p.display()))).transpose()?;
    let spec = pipeline::resolve_target(cfg, spec, &model, &refs)?;
    let start = std::time::Instant::now();
    let generated = pipeline::design(cfg, &model, den.as_ref(), &spec, req.task.trim(), &refs, req.method, req.scale, req.samples)?;
    log::info!("{} designs in {:.2}s", generated.len(), start.elapsed().as_secs_f64());

    create_dir(out)?;
    let mut steps = String::from("index\tstep\tk\teps_norm\tgrad_norm\tobjective\n");
    for g in &generated {
        let d = &g.design;
        let stem = format!("design_{:02}", d.index);
        write(&out.join(format!("{stem}.design")), format_design(d))?;
        let title = format!("{} {} #{} F̂={:.4}", d.method, d.task, d.index, d.predicted_f);
        write(&out.join(format!("{stem}.svg")), svg::finger_pair(&d.m, &cfg.geometry, &shapes[0], &title)?)?;
        for s in &g.steps {
            let _ = writeln!(steps, "{}\t{}\t{}\t{}\t{}\t{}", d.index, s.step, s.k, s.eps_norm, s.grad_norm, s.objective);
        }
    }
    if !generated.iter().all(|g| g.steps.is_empty()) {
        write(&out.join("sampling.tsv"), steps)?;
    }
    Ok(())
}

/// Every `*.design` file below `dir`, sorted by path.
fn find_designs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "design") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn slug(s: &str) -> String {
    let mut out: String = s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    out.truncate(40);
    out
}

fn evaluate(cfg: &Config, dir: &Path, tasks: &[String], agg: Aggregation, shapes_dir: Option<&Path>, dynamics: Option<&Path>, out: &Path) -> Result<()> {
    let known = match shapes_dir {
        Some(d) => load_shape_dir(d)?,
        None => pipeline::make_shapes(cfg)?,
    };
    let model = dynamics.map(|p| DynamicsModel::load(p).with_context(|| format!("reading {}", p.display()))).transpose()?;
    let mut failures = Vec::new();
    let mut designs: Vec<Design> = Vec::new();
    for path in find_designs(dir)? {
        match load_design(&path) {
            Ok(d) => designs.push(d),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures.push(("-".to_string(), "-".to_string(), "-".to_string(), 0, format!("{}: {e}", path.display())));
            }
        }
    }
    designs.retain(|d| tasks.is_empty() || tasks.iter().any(|t| t.trim() == d.task.trim()));
    for t in tasks {
        if !designs.iter().any(|d| d.task.trim() == t.trim()) {
            log::warn!("no designs for task {t}");
            failures.push(("-".to_string(), "-".to_string(), t.clone(), 0, "no designs found".to_string()));
        }
    }
    designs.sort_by(|a, b| (&a.method, &a.task, a.index).cmp(&(&b.method, &b.task, b.index)));

    let plots = out.join("plots");
    create_dir(&plots)?;
    let grid = PoseGrid::orientations(cfg.eval.n_orientations);
    let mut evals: Vec<DesignEval> = Vec::new();
    for d in &designs {
        let task = match pipeline::eval_task(d) {
            Ok(t) => t,
            Err(e) => {
                failures.push((d.method.clone(), "-".to_string(), d.task.clone(), d.index as u64, e.to_string()));
                continue;
            }
        };
        for id in &d.objects {
            let shape = match resolve_shapes(std::slice::from_ref(id), &known) {
                Ok(mut s) => s.remove(0),
                Err(e) => {
                    log::warn!("design {} {} #{}: {e}", d.method, d.task, d.index);
                    failures.push((d.method.clone(), id.clone(), task.name.clone(), d.index as u64, e.to_string()));
                    continue;
                }
            };
            let res = evaluate_design_with_profile(&d.method, d.index as u64, &d.m, &shape, &task, &cfg.eval, &cfg.geometry, &cfg.simulator);
            match res {
                Ok((e, truth)) => {
                    let predicted = model.as_ref().map(|m| m.predict_profile(&shape, &d.m, &grid)).transpose()?;
                    let title = format!("{} {} #{} on {}", d.method, task.name, d.index, shape.id);
                    let name = format!("{}_{}_{:02}_{}.svg", slug(&d.method), slug(&task.name), d.index, slug(&shape.id));
                    write(&plots.join(name), svg::profile_plot(&truth, predicted.as_ref(), &title))?;
                    evals.push(e);
                }
                Err(err) => {
                    log::warn!("design {} {} #{} on {}: {err}", d.method, d.task, d.index, shape.id);
                    failures.push((d.method.clone(), shape.id.clone(), task.name.clone(), d.index as u64, err.to_string()));
                }
            }
        }
    }
    let report = EvalReport { aggregation: agg, rows: aggregate(&evals, agg), failures };
    write(&out.join("report.tsv"), report.to_tsv())?;
    write(&out.join("report.json"), report.to_json())?;
    log::info!("{} evaluations, {} rows, {} failures", evals.len(), report.rows.len(), report.failures.len());
    Ok(())
}
