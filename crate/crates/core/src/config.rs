//! JSON experiment configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::DiffusionConfig;
use crate::dynamics::DynamicsConfig;
use crate::eval::EvalOptions;
use crate::geometry::{FingerGeometry, PoseGrid, ShapePreset};
use crate::search::{CmaesConfig, GdConfig};
use crate::simulator::SimConfig;
use crate::{Error, Result};

/// Shapes and fingers of the generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub presets: Vec<ShapePreset>,
    /// Shape scale in mm.
    pub scale: f64,
    /// Random finger pairs per shape.
    pub n_fingers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { presets: vec![ShapePreset::Square, ShapePreset::Tee, ShapePreset::Triangle], scale: 25.0, n_fingers: 64 }
    }
}

/// Design generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    /// Guidance scale `s`.
    pub scale: f64,
    pub samples: usize,
    pub gd: GdConfig,
    pub cmaes: CmaesConfig,
    /// Orientations of the pseudo profile used to pick convergence targets.
    pub target_orientations: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { scale: 32.0, samples: 16, gd: GdConfig::default(), cmaes: CmaesConfig::default(), target_orientations: 72 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub master: u64,
}

/// Complete configuration. Every section and key is optional; missing
/// values take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub geometry: FingerGeometry,
    pub simulator: SimConfig,
    pub grid: PoseGrid,
    pub data: DataConfig,
    pub dynamics: DynamicsConfig,
    pub diffusion: DiffusionConfig,
    pub design: DesignConfig,
    pub eval: EvalOptions,
    pub seeds: Seeds,
}

impl Default for Config {
    /// Desk scale: 3 shapes, 64 fingers, a 72×3×3 grid.
    fn default() -> Self {
        Self {
            geometry: FingerGeometry::default(),
            simulator: SimConfig::default(),
            grid: PoseGrid { n_theta: 72, n_x: 3, n_y: 3, radius: 3.0 },
            data: DataConfig::default(),
            dynamics: DynamicsConfig::default(),
            diffusion: DiffusionConfig::default(),
            design: DesignConfig::default(),
            eval: EvalOptions::default(),
            seeds: Seeds::default(),
        }
    }
}

impl Config {

    /// Parses JSON text, applying `overrides` (`a.b=value`) first.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config { path: "<root>".into(), message: e.to_string() })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, overrides)
    }

    /// Defaults with overrides applied.
    pub fn with_overrides(base: &Config, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(base).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| Error::Config { path: e.path().to_string(), message: e.inner().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::Config { path: section.to_string(), message: other.to_string() },
            })
        };
        wrap("geometry", self.geometry.validate())?;
        wrap("simulator", self.simulator.validate())?;
        wrap("grid", self.grid.validate())?;
        wrap("dynamics", self.dynamics.validate())?;
        wrap("diffusion", self.diffusion.validate())?;
        wrap("eval.thresholds", self.eval.thresholds.validate())?;
        wrap("design.cmaes.budget", self.design.cmaes.budget.validate())?;
        let positive = [
            ("data.n_fingers", self.data.n_fingers),
            ("design.samples", self.design.samples),
            ("eval.n_orientations", self.eval.n_orientations),
            ("eval.n_seeds", self.eval.n_seeds),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::Config { path: path.into(), message: "must be positive".into() });
            }
        }
        if self.data.presets.is_empty() {
            return Err(Error::Config { path: "data.presets".into(), message: "needs at least one shape".into() });
        }
        if !(self.design.scale >= 0.0) {
            return Err(Error::Config { path: "design.scale".into(), message: "guidance scale must be >= 0".into() });
        }
        if !(self.design.gd.lr > 0.0) || !(self.design.cmaes.sigma0 > 0.0) {
            return Err(Error::Config { path: "design".into(), message: "step sizes must be positive".into() });
        }
        if self.design.target_orientations < 36 {
            return Err(Error::Config { path: "design.target_orientations".into(), message: "needs at least 36 orientations".into() });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config { path: spec.into(), message: "override must look like key.path=value".into() })?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config { path: spec.into(), message: "empty override path".into() });
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config { path: keys[..i].join("."), message: "not an object".into() })?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}
