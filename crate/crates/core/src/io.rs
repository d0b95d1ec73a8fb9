//! Text formats for shapes and designs.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file parses back to bit-identical values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::{ControlVector, ObjectShape, ShapePreset};
use crate::{Error, Result};

const SHAPE_MAGIC: &str = "grip-shape 1";
const DESIGN_MAGIC: &str = "grip-design 1";

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::format(format!("line {line}: bad number {s:?}")))
}

/// Shape file: header, id, optional origin, then one `x y` vertex per line.
pub fn format_shape(shape: &ObjectShape) -> String {
    let mut out = format!("{SHAPE_MAGIC}\nid {}\n", shape.id);
    if let Some((preset, scale)) = shape.origin {
        let _ = writeln!(out, "origin {preset} {scale}");
    }
    let _ = writeln!(out, "vertices {}", shape.vertices().len());
    for v in shape.vertices() {
        let _ = writeln!(out, "{} {}", v[0], v[1]);
    }
    out
}

pub fn parse_shape(text: &str) -> Result<ObjectShape> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::format(format!("shape file ends before {what}")));
    let (_, magic) = next("header")?;
    if magic != SHAPE_MAGIC {
        return Err(Error::format(format!("not a shape file (header {magic:?})")));
    }
    let (ln, id_line) = next("id")?;
    let id = id_line.strip_prefix("id ").ok_or_else(|| Error::format(format!("line {ln}: expected `id <name>`")))?.to_string();
    let (mut ln, mut line) = next("vertices")?;
    let mut origin = None;
    if let Some(rest) = line.strip_prefix("origin ") {
        let (p, s) = rest.split_once(' ').ok_or_else(|| Error::format(format!("line {ln}: expected `origin <preset> <scale>`")))?;
        origin = Some((p.parse::<ShapePreset>()?, parse_f64(s, ln)?));
        (ln, line) = next("vertices")?;
    }
    let count: usize = line
        .strip_prefix("vertices ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| Error::format(format!("line {ln}: expected `vertices <count>`")))?;
    let mut vertices = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, l) = next("all vertices")?;
        let (x, y) = l.split_once(' ').ok_or_else(|| Error::format(format!("line {ln}: expected `x y`")))?;
        vertices.push([parse_f64(x, ln)?, parse_f64(y, ln)?]);
    }
    ObjectShape::from_centered_vertices(id, origin, vertices)
}

pub fn save_shape(shape: &ObjectShape, path: &Path) -> Result<()> {
    std::fs::write(path, format_shape(shape))?;
    Ok(())
}

pub fn load_shape(path: &Path) -> Result<ObjectShape> {
    parse_shape(&std::fs::read_to_string(path)?)
}

/// Loads every `*.shape` file of a directory, sorted by file name.
pub fn load_shape_dir(dir: &Path) -> Result<Vec<ObjectShape>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "shape"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_shape(p)).collect()
}

/// A generated design with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub method: String,
    /// Task expression as text.
    pub task: String,
    pub objects: Vec<String>,
    pub scale: f64,
    pub seed: u64,
    pub index: usize,
    pub theta_target: Option<f64>,
    /// Model-predicted objective at the design.
    pub predicted_f: f64,
    pub m: ControlVector,
}

/// Header of `key value` lines followed by `values` and one control value per line.
pub fn format_design(d: &Design) -> String {
    let mut out = format!("{DESIGN_MAGIC}\n");
    let _ = writeln!(out, "method {}", d.method);
    let _ = writeln!(out, "task {}", d.task);
    let _ = writeln!(out, "objects {}", d.objects.join(","));
    let _ = writeln!(out, "scale {}", d.scale);
    let _ = writeln!(out, "seed {}", d.seed);
    let _ = writeln!(out, "index {}", d.index);
    let _ = writeln!(out, "theta_target {}", d.theta_target.map_or_else(|| "-".to_string(), |t| t.to_string()));
    let _ = writeln!(out, "predicted_f {}", d.predicted_f);
    let _ = writeln!(out, "N {}", d.m.n_per_finger());
    out.push_str("values\n");
    for v in d.m.values() {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn parse_design(text: &str) -> Result<Design> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == DESIGN_MAGIC => {}
        _ => return Err(Error::format("not a design file")),
    }
    let mut header = BTreeMap::new();
    for (ln, line) in lines.by_ref() {
        if line.trim() == "values" {
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| Error::format(format!("line {ln}: expected `key value`")))?;
        header.insert(k.to_string(), (ln, v.to_string()));
    }
    let get = |k: &str| header.get(k).ok_or_else(|| Error::format(format!("design header lacks `{k}`")));
    let num = |k: &str| -> Result<f64> {
        let (ln, v) = get(k)?;
        parse_f64(v, *ln)
    };
    let int = |k: &str| -> Result<u64> {
        let (ln, v) = get(k)?;
        v.trim().parse().map_err(|_| Error::format(format!("line {ln}: bad integer for `{k}`")))
    };
    let n = int("N")? as usize;
    let values = lines.filter(|(_, l)| !l.trim().is_empty()).map(|(ln, l)| parse_f64(l, ln)).collect::<Result<Vec<_>>>()?;
    let theta_target = match get("theta_target")?.1.trim() {
        "-" => None,
        _ => Some(num("theta_target")?),
    };
    let objects = get("objects")?.1.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    Ok(Design {
        method: get("method")?.1.clone(),
        task: get("task")?.1.clone(),
        objects,
        scale: num("scale")?,
        seed: int("seed")?,
        index: int("index")? as usize,
        theta_target,
        predicted_f: num("predicted_f")?,
        m: ControlVector::new(values, n)?,
    })
}

pub fn load_design(path: &Path) -> Result<Design> {
    parse_design(&std::fs::read_to_string(path)?)
}
