//! Learned interaction dynamics `D(o, m, p) -> Δp`: datasets generated by the
//! simulator, the encoder/trunk network, training, prediction over pose
//! grids, and gradients of weighted predictions with respect to `m`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{make_shape, wrap_angle, ControlVector, DeltaPose, ObjectShape, Pose, PoseGrid, ShapePreset, Side, CONTOUR_POINTS};
use crate::nn::{posenc_into, read_f64, read_u64, Activation, Adam, Cache, Mlp};
use crate::simulator::{close_once, Jaw, SimConfig};
use crate::util::{derive_seed, exact_sum, fmt_sig9, quantize_sig9, rng};
use crate::geometry::FingerGeometry;
use crate::{Error, Result};

/// Contour coordinates are divided by this before entering the object encoder.
pub const CONTOUR_SCALE: f64 = 50.0;

const DATA_MAGIC: &str = "DGDMDATA";
const MODEL_MAGIC: &[u8; 8] = b"DGDMDYN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    GroundTruth,
    Predicted,
}

/// Object motion over every cell of a pose grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionProfile {
    pub grid: PoseGrid,
    pub deltas: Vec<DeltaPose>,
    /// `true` for cells holding a valid motion.
    pub mask: Vec<bool>,
    pub source: ProfileSource,
    pub masked: usize,
}

impl InteractionProfile {
    pub fn from_cells(grid: PoseGrid, cells: Vec<Option<DeltaPose>>, source: ProfileSource) -> Self {
        let mask: Vec<bool> = cells.iter().map(Option::is_some).collect();
        let masked = mask.iter().filter(|m| !**m).count();
        let deltas = cells.into_iter().map(Option::unwrap_or_default).collect();
        Self { grid, deltas, mask, source, masked }
    }

    pub fn from_deltas(grid: PoseGrid, deltas: Vec<DeltaPose>, source: ProfileSource) -> Result<Self> {
        if deltas.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: deltas.len() });
        }
        let mask = vec![true; deltas.len()];
        Ok(Self { grid, deltas, mask, source, masked: 0 })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn valid(&self) -> impl Iterator<Item = &DeltaPose> + '_ {
        self.deltas.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(d, _)| d)
    }

    /// `(cell index, initial pose, motion)` for valid cells.
    pub fn valid_cells(&self) -> impl Iterator<Item = (usize, Pose, &DeltaPose)> + '_ {
        let cells = self.grid.cells();
        self.deltas
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask[*i])
            .map(move |(i, d)| (i, cells[i], d))
    }

    /// Mean rotation over the valid positions of each orientation; `None`
    /// where every position is masked.
    pub fn mean_dtheta_per_orientation(&self) -> Vec<Option<f64>> {
        let per = self.grid.n_x * self.grid.n_y;
        (0..self.grid.n_theta)
            .map(|t| {
                let cells = t * per..(t + 1) * per;
                let vals: Vec<f64> = cells.filter(|&i| self.mask[i]).map(|i| self.deltas[i].dtheta).collect();
                (!vals.is_empty()).then(|| exact_sum(vals.iter().copied()) / vals.len() as f64)
            })
            .collect()
    }
}

/// One simulated interaction. Shapes and fingers are stored once and
/// referenced by index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub shape: usize,
    pub finger: usize,
    pub pose: Pose,
    pub delta: DeltaPose,
}

/// Mean and standard deviation of `(Δθ, Δx, Δy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DeltaStats {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl DeltaStats {
    fn from_records(records: &[Record]) -> Self {
        if records.is_empty() {
            return Self::default();
        }
        let n = records.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for k in 0..3 {
            let mu = exact_sum(records.iter().map(|r| r.delta.as_array()[k])) / n;
            let var = exact_sum(records.iter().map(|r| (r.delta.as_array()[k] - mu).powi(2))) / n;
            mean[k] = quantize_sig9(mu);
            let sd = quantize_sig9(var.sqrt());
            std[k] = if sd > 1e-12 { sd } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn normalize(&self, d: &DeltaPose) -> [f64; 3] {
        let a = d.as_array();
        std::array::from_fn(|k| (a[k] - self.mean[k]) / self.std[k])
    }

    pub fn denormalize(&self, z: &[f64]) -> DeltaPose {
        DeltaPose::new(
            self.mean[0] + self.std[0] * z[0],
            self.mean[1] + self.std[1] * z[1],
            self.mean[2] + self.std[2] * z[2],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub n_per_finger: usize,
    pub shape_ids: Vec<String>,
    pub fingers: Vec<ControlVector>,
    pub records: Vec<Record>,
    pub stats: DeltaStats,
}

/// Counts reported by [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationReport {
    pub records: usize,
    pub masked: usize,
}

/// Simulates every (shape, finger, grid cell) combination. Finger vectors
/// are drawn uniformly from `[-1, 1]^{2N}`; cells outside the workspace are
/// dropped and counted.
pub fn generate_dataset(
    shapes: &[ObjectShape],
    n_fingers: usize,
    geom: &FingerGeometry,
    grid: &PoseGrid,
    cfg: &SimConfig,
    seed: u64,
) -> Result<(InteractionDataset, GenerationReport)> {
    if shapes.is_empty() || n_fingers == 0 {
        return Err(Error::InvalidParameter("need at least one shape and one finger".into()));
    }
    for s in shapes {
        check_id(&s.id)?;
    }
    geom.validate()?;
    grid.validate()?;
    cfg.validate()?;
    let mut r = rng(derive_seed(seed, "dataset.fingers", 0));
    let fingers = (0..n_fingers)
        .map(|_| {
            let m = ControlVector::uniform(&mut r, geom.n_per_finger)?;
            let q: Vec<f64> = m.values().iter().map(|v| quantize_sig9(*v)).collect();
            ControlVector::new(q, geom.n_per_finger)
        })
        .collect::<Result<Vec<_>>>()?;
    let jaws = fingers.iter().map(|m| Jaw::new(m, geom)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<Pose> = grid
        .cells()
        .into_iter()
        .map(|p| Pose::new(quantize_sig9(p.theta), quantize_sig9(p.x), quantize_sig9(p.y)))
        .collect();

    let pairs: Vec<(usize, usize)> = (0..shapes.len()).flat_map(|s| (0..n_fingers).map(move |f| (s, f))).collect();
    let chunks: Vec<Vec<Option<Record>>> = pairs
        .par_iter()
        .map(|&(si, fi)| {
            cells
                .iter()
                .map(|pose| {
                    close_once(&shapes[si], &jaws[fi], pose, cfg).ok().map(|res| Record {
                        shape: si,
                        finger: fi,
                        pose: *pose,
                        delta: DeltaPose {
                            dtheta: quantize_sig9(res.delta.dtheta),
                            dx: quantize_sig9(res.delta.dx),
                            dy: quantize_sig9(res.delta.dy),
                        },
                    })
                })
                .collect()
        })
        .collect();
    let total: usize = chunks.iter().map(Vec::len).sum();
    let records: Vec<Record> = chunks.into_iter().flatten().flatten().collect();
    let report = GenerationReport { records: records.len(), masked: total - records.len() };
    let stats = DeltaStats::from_records(&records);
    let ds = InteractionDataset {
        n_per_finger: geom.n_per_finger,
        shape_ids: shapes.iter().map(|s| s.id.clone()).collect(),
        fingers,
        records,
        stats,
    };
    Ok((ds, report))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(Error::InvalidParameter(format!("shape id {id:?} must be non-empty without whitespace")));
    }
    Ok(())
}

/// Resolves shape ids: ids found in `known` win, otherwise `<preset>_<scale>`
/// ids are rebuilt from the preset.
pub fn resolve_shapes(ids: &[String], known: &[ObjectShape]) -> Result<Vec<ObjectShape>> {
    ids.iter()
        .map(|id| {
            if let Some(s) = known.iter().find(|s| &s.id == id) {
                return Ok(s.clone());
            }
            let (name, scale) = id.rsplit_once('_').ok_or_else(|| Error::UnknownShape(id.clone()))?;
            let preset: ShapePreset = name.parse()?;
            let scale: f64 = scale.parse().map_err(|_| Error::UnknownShape(id.clone()))?;
            make_shape(preset, scale)
        })
        .collect()
}

impl InteractionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Holdout membership (about 10%) from a hash of the record inputs.
    pub fn is_holdout(&self, r: &Record) -> bool {
        let mut h = Sha256::new();
        h.update(self.shape_ids[r.shape].as_bytes());
        for v in self.fingers[r.finger].values() {
            h.update(v.to_le_bytes());
        }
        for v in [r.pose.theta, r.pose.x, r.pose.y] {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 10 == 0
    }

    /// Train and holdout record indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.records.len()).partition(|&i| !self.is_holdout(&self.records[i]))
    }

    /// Copy with the motions permuted across records (a control that destroys
    /// any input-output relation).
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut deltas: Vec<DeltaPose> = self.records.iter().map(|r| r.delta).collect();
        deltas.shuffle(&mut rng(derive_seed(seed, "dataset.shuffle", 0)));
        let mut out = self.clone();
        for (r, d) in out.records.iter_mut().zip(deltas) {
            r.delta = d;
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut line = format!("{DATA_MAGIC} 1 N={} stats=", self.n_per_finger);
        let stats: Vec<String> = self.stats.mean.iter().chain(&self.stats.std).map(|v| fmt_sig9(*v)).collect();
        line.push_str(&stats.join(","));
        writeln!(w, "{line}")?;
        let finger_text: Vec<String> =
            self.fingers.iter().map(|m| m.values().iter().map(|v| fmt_sig9(*v)).collect::<Vec<_>>().join(" ")).collect();
        for r in &self.records {
            line.clear();
            let _ = write!(line, "{} {}", self.shape_ids[r.shape], finger_text[r.finger]);
            for v in [r.pose.theta, r.pose.x, r.pose.y, r.delta.dtheta, r.delta.dx, r.delta.dy] {
                line.push(' ');
                line.push_str(&fmt_sig9(v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| Error::format("empty dataset file"))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(DATA_MAGIC) || parts.next() != Some("1") {
            return Err(Error::format("not a version-1 dataset file"));
        }
        let n: usize = parts
            .next()
            .and_then(|p| p.strip_prefix("N="))
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::format("missing N= in dataset header"))?;
        let stats: Vec<f64> = parts
            .next()
            .and_then(|p| p.strip_prefix("stats="))
            .map(|p| p.split(',').map(str::parse).collect::<std::result::Result<Vec<f64>, _>>())
            .transpose()
            .map_err(|e| Error::format(format!("bad stats: {e}")))?
            .ok_or_else(|| Error::format("missing stats= in dataset header"))?;
        if stats.len() != 6 {
            return Err(Error::format("stats must hold 6 values"));
        }
        let stats = DeltaStats { mean: [stats[0], stats[1], stats[2]], std: [stats[3], stats[4], stats[5]] };

        let mut ds = InteractionDataset { n_per_finger: n, shape_ids: Vec::new(), fingers: Vec::new(), records: Vec::new(), stats };
        let mut shape_index: HashMap<String, usize> = HashMap::new();
        let mut finger_index: HashMap<Vec<u64>, usize> = HashMap::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(format!("dataset line {}: {msg}", lineno + 2));
            let mut tok = line.split_whitespace();
            let id = tok.next().ok_or_else(|| bad("missing shape id"))?;
            let vals = tok.map(str::parse::<f64>).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(&e.to_string()))?;
            if vals.len() != 2 * n + 6 {
                return Err(bad(&format!("expected {} numbers, got {}", 2 * n + 6, vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            let shape = *shape_index.entry(id.to_string()).or_insert_with(|| {
                ds.shape_ids.push(id.to_string());
                ds.shape_ids.len() - 1
            });
            let key: Vec<u64> = vals[..2 * n].iter().map(|v| v.to_bits()).collect();
            let finger = match finger_index.get(&key) {
                Some(&i) => i,
                None => {
                    ds.fingers.push(ControlVector::new(vals[..2 * n].to_vec(), n).map_err(|e| bad(&e.to_string()))?);
                    finger_index.insert(key, ds.fingers.len() - 1);
                    ds.fingers.len() - 1
                }
            };
            let t = &vals[2 * n..];
            ds.records.push(Record {
                shape,
                finger,
                pose: Pose { theta: t[0], x: t[1], y: t[2] },
                delta: DeltaPose { dtheta: t[3], dx: t[4], dy: t[5] },
            });
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Hidden width of every network.
    #[serde(alias = "widths")]
    pub width: usize,
    /// Dense layers in the trunk.
    pub trunk_layers: usize,
    /// Positional-encoding bands for the pose.
    #[serde(rename = "B")]
    pub bands: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Also train on every training record turned half a circle about the
    /// jaw center (see [`half_turn`]).
    pub augment: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { width: 64, trunk_layers: 8, bands: 6, epochs: 60, lr: 1e-3, batch: 256, augment: true }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.trunk_layers == 0 || self.bands == 0 || self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid dynamics config: {self:?}")));
        }
        Ok(())
    }
}

/// The surrogate network: object and finger encoders feeding a trunk that
/// also sees the encoded initial pose.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    n_per_finger: usize,
    bands: usize,
    /// Position normalizer (the grid radius used for training).
    radius: f64,
    pub stats: DeltaStats,
    object_encoder: Mlp,
    finger_encoder: Mlp,
    trunk: Mlp,
}

/// Per-epoch losses (mean squared error on z-scored motion).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    /// Holdout error of always predicting the training mean.
    pub baseline: f64,
    pub best_epoch: usize,
    pub best_holdout: f64,
}

struct Batch {
    obj_cache: Cache,
    finger_cache: Cache,
    trunk_cache: Cache,
    obj_rows: Vec<usize>,
    finger_rows: Vec<usize>,
}

impl DynamicsModel {
    pub fn new(n_per_finger: usize, radius: f64, stats: DeltaStats, cfg: &DynamicsConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut r = rng(derive_seed(seed, "dynamics.init", 0));
        let object_encoder = Mlp::new(&[2 * CONTOUR_POINTS, w, w], Activation::Tanh, &mut r)?;
        let finger_encoder = Mlp::new(&[2 * n_per_finger, w, w], Activation::Tanh, &mut r)?;
        let mut dims = vec![2 * w + 6 * cfg.bands];
        dims.extend(std::iter::repeat_n(w, cfg.trunk_layers - 1));
        dims.push(3);
        let trunk = Mlp::new(&dims, Activation::Identity, &mut r)?;
        Ok(Self {
            n_per_finger,
            bands: cfg.bands,
            radius: if radius > 0.0 { radius } else { 1.0 },
            stats,
            object_encoder,
            finger_encoder,
            trunk,
        })
    }

    pub fn n_per_finger(&self) -> usize {
        self.n_per_finger
    }

    pub fn width(&self) -> usize {
        self.finger_encoder.output_dim()
    }

    fn emb_dim(&self) -> usize {
        self.width()
    }

    fn shape_input(shape: &ObjectShape) -> Vec<f64> {
        shape.flattened_contour().into_iter().map(|v| v / CONTOUR_SCALE).collect()
    }

    fn pose_features(&self, p: &Pose, out: &mut Vec<f64>) {
        posenc_into(&[p.theta / std::f64::consts::PI, p.x / self.radius, p.y / self.radius], self.bands, out);
    }

    fn check_finger(&self, m: &ControlVector) -> Result<()> {
        if m.n_per_finger() != self.n_per_finger {
            return Err(Error::DimensionMismatch { expected: 2 * self.n_per_finger, got: m.values().len() });
        }
        Ok(())
    }

    fn trunk_input(&self, obj: &[Array2<f64>], fing: &[Array2<f64>], rows: &[(usize, usize, Pose)]) -> Array2<f64> {
        let e = self.emb_dim();
        let cols = 2 * e + 6 * self.bands;
        let mut x = Array2::zeros((rows.len(), cols));
        let mut pe = Vec::with_capacity(6 * self.bands);
        for (i, (o, f, p)) in rows.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.slice_mut(s![..e]).assign(&obj[*o].row(0));
            row.slice_mut(s![e..2 * e]).assign(&fing[*f].row(0));
            pe.clear();
            self.pose_features(p, &mut pe);
            for (dst, v) in row.slice_mut(s![2 * e..]).iter_mut().zip(&pe) {
                *dst = *v;
            }
        }
        x
    }

    fn embed(net: &Mlp, input: &[f64]) -> Result<Array2<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        net.forward(x)
    }

    /// Predictions for a batch of initial poses.
    pub fn predict_poses(&self, shape: &ObjectShape, m: &ControlVector, poses: &[Pose]) -> Result<Vec<DeltaPose>> {
        self.check_finger(m)?;
        let obj = Self::embed(&self.object_encoder, &Self::shape_input(shape))?;
        let fing = Self::embed(&self.finger_encoder, m.values())?;
        let rows: Vec<(usize, usize, Pose)> = poses.iter().map(|p| (0, 0, *p)).collect();
        let z = self.trunk.forward(self.trunk_input(&[obj], &[fing], &rows).view())?;
        Ok(z.rows().into_iter().map(|r| self.stats.denormalize(r.as_slice().expect("contiguous"))).collect())
    }

    pub fn predict(&self, shape: &ObjectShape, m: &ControlVector, pose: &Pose) -> Result<DeltaPose> {
        Ok(self.predict_poses(shape, m, std::slice::from_ref(pose))?[0])
    }

    pub fn predict_profile(&self, shape: &ObjectShape, m: &ControlVector, grid: &PoseGrid) -> Result<InteractionProfile> {
        let deltas = self.predict_poses(shape, m, &grid.cells())?;
        InteractionProfile::from_deltas(*grid, deltas, ProfileSource::Predicted)
    }

    /// Gradient with respect to `m` of `Σ_shapes Σ_cells w · Δp_pred`, where
    /// `weight_fn(shape_index, cell_index, pose, prediction)` supplies the
    /// per-cell weights `w` on `(Δθ, Δx, Δy)`. Also returns the predicted
    /// profiles.
    pub fn grad_and_profiles<F>(
        &self,
        shapes: &[&ObjectShape],
        m: &[f64],
        grid: &PoseGrid,
        weight_fn: F,
    ) -> Result<(Vec<f64>, Vec<InteractionProfile>)>
    where
        F: Fn(usize, usize, &Pose, &DeltaPose) -> [f64; 3],
    {
        if m.len() != 2 * self.n_per_finger {
            return Err(Error::DimensionMismatch { expected: 2 * self.n_per_finger, got: m.len() });
        }
        let e = self.emb_dim();
        let cells = grid.cells();
        let fx = ArrayView2::from_shape((1, m.len()), m).map_err(|err| Error::InvalidParameter(err.to_string()))?;
        let finger_cache = self.finger_encoder.forward_cached(fx)?;
        let fing = finger_cache.output().clone();
        let mut d_emb = Array2::<f64>::zeros((1, e));
        let mut profiles = Vec::with_capacity(shapes.len());
        for (si, shape) in shapes.iter().enumerate() {
            let obj = Self::embed(&self.object_encoder, &Self::shape_input(shape))?;
            let rows: Vec<(usize, usize, Pose)> = cells.iter().map(|p| (0, 0, *p)).collect();
            let cache = self.trunk.forward_cached(self.trunk_input(&[obj], std::slice::from_ref(&fing), &rows).view())?;
            let mut dy = Array2::<f64>::zeros((cells.len(), 3));
            let mut deltas = Vec::with_capacity(cells.len());
            for (ci, (z, p)) in cache.output().rows().into_iter().zip(&cells).enumerate() {
                let pred = self.stats.denormalize(z.as_slice().expect("contiguous"));
                let w = weight_fn(si, ci, p, &pred);
                for k in 0..3 {
                    dy[[ci, k]] = w[k] * self.stats.std[k];
                }
                deltas.push(pred);
            }
            let dx = self.trunk.backward_input(&cache, dy.view())?;
            d_emb += &dx.slice(s![.., e..2 * e]).sum_axis(Axis(0)).insert_axis(Axis(0));
            profiles.push(InteractionProfile::from_deltas(*grid, deltas, ProfileSource::Predicted)?);
        }
        let dm = self.finger_encoder.backward_input(&finger_cache, d_emb.view())?;
        Ok((dm.into_raw_vec_and_offset().0, profiles))
    }

    pub fn grad_wrt_fingers<F>(&self, shapes: &[&ObjectShape], m: &[f64], grid: &PoseGrid, weight_fn: F) -> Result<Vec<f64>>
    where
        F: Fn(usize, usize, &Pose, &DeltaPose) -> [f64; 3],
    {
        Ok(self.grad_and_profiles(shapes, m, grid, weight_fn)?.0)
    }

    fn forward_batch(&self, shape_inputs: &[Vec<f64>], ds: &InteractionDataset, idx: &[usize]) -> Result<Batch> {
        let mut obj_map: HashMap<usize, usize> = HashMap::new();
        let mut fin_map: HashMap<usize, usize> = HashMap::new();
        let mut obj_rows = Vec::new();
        let mut finger_rows = Vec::new();
        let mut rows = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = &ds.records[i];
            let o = *obj_map.entry(r.shape).or_insert_with(|| {
                obj_rows.push(r.shape);
                obj_rows.len() - 1
            });
            let f = *fin_map.entry(r.finger).or_insert_with(|| {
                finger_rows.push(r.finger);
                finger_rows.len() - 1
            });
            rows.push((o, f, r.pose));
        }
        let mut ox = Array2::zeros((obj_rows.len(), 2 * CONTOUR_POINTS));
        for (k, &s) in obj_rows.iter().enumerate() {
            ox.row_mut(k).iter_mut().zip(&shape_inputs[s]).for_each(|(d, v)| *d = *v);
        }
        let mut fx = Array2::zeros((finger_rows.len(), 2 * self.n_per_finger));
        for (k, &f) in finger_rows.iter().enumerate() {
            fx.row_mut(k).iter_mut().zip(ds.fingers[f].values()).for_each(|(d, v)| *d = *v);
        }
        let obj_cache = self.object_encoder.forward_cached(ox.view())?;
        let finger_cache = self.finger_encoder.forward_cached(fx.view())?;
        let split = |a: &Array2<f64>| -> Vec<Array2<f64>> { a.rows().into_iter().map(|r| r.to_owned().insert_axis(Axis(0))).collect() };
        let x = self.trunk_input(&split(obj_cache.output()), &split(finger_cache.output()), &rows);
        let trunk_cache = self.trunk.forward_cached(x.view())?;
        let obj_rows = rows.iter().map(|r| r.0).collect();
        let finger_rows = rows.iter().map(|r| r.1).collect();
        Ok(Batch { obj_cache, finger_cache, trunk_cache, obj_rows, finger_rows })
    }

    fn targets(&self, ds: &InteractionDataset, idx: &[usize]) -> Array2<f64> {
        let mut y = Array2::zeros((idx.len(), 3));
        for (k, &i) in idx.iter().enumerate() {
            let z = self.stats.normalize(&ds.records[i].delta);
            for c in 0..3 {
                y[[k, c]] = z[c];
            }
        }
        y
    }

    /// Mean squared error on z-scored motion over the given records.
    pub fn mse(&self, shapes: &[ObjectShape], ds: &InteractionDataset, idx: &[usize]) -> Result<f64> {
        let inputs: Vec<Vec<f64>> = shapes.iter().map(Self::shape_input).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(2048) {
            let b = self.forward_batch(&inputs, ds, chunk)?;
            let y = self.targets(ds, chunk);
            total += (b.trunk_cache.output() - &y).mapv(|v| v * v).sum();
        }
        Ok(total / (3 * idx.len().max(1)) as f64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        for v in [self.n_per_finger, self.bands, self.width(), self.trunk.n_layers()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.radius.to_le_bytes())?;
        w.write_all(&CONTOUR_SCALE.to_le_bytes())?;
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        self.object_encoder.write_to(w)?;
        self.finger_encoder.write_to(w)?;
        self.trunk.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("not a dynamics checkpoint"));
        }
        let n_per_finger = read_u64(r)? as usize;
        let bands = read_u64(r)? as usize;
        let width = read_u64(r)? as usize;
        let _trunk_layers = read_u64(r)?;
        let radius = read_f64(r)?;
        let scale = read_f64(r)?;
        if scale != CONTOUR_SCALE {
            return Err(Error::format(format!("unsupported contour scale {scale}")));
        }
        let vals: Vec<f64> = (0..6).map(|_| read_f64(r)).collect::<Result<_>>()?;
        let stats = DeltaStats { mean: [vals[0], vals[1], vals[2]], std: [vals[3], vals[4], vals[5]] };
        let object_encoder = Mlp::read_from(r, Activation::Tanh)?;
        let finger_encoder = Mlp::read_from(r, Activation::Tanh)?;
        let trunk = Mlp::read_from(r, Activation::Identity)?;
        let consistent = object_encoder.dims() == [2 * CONTOUR_POINTS, width, width]
            && finger_encoder.dims() == [2 * n_per_finger, width, width]
            && trunk.input_dim() == 2 * width + 6 * bands
            && trunk.output_dim() == 3
            && stats.std.iter().all(|s| *s > 0.0);
        if !consistent {
            return Err(Error::format("inconsistent dynamics checkpoint"));
        }
        Ok(Self { n_per_finger, bands, radius, stats, object_encoder, finger_encoder, trunk })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

/// Trains a model on `ds` (shapes resolved in dataset order) and returns the
/// epoch with the lowest holdout loss.
pub fn train(ds: &InteractionDataset, shapes: &[ObjectShape], radius: f64, cfg: &DynamicsConfig, seed: u64) -> Result<(DynamicsModel, TrainLog)> {
    if shapes.len() != ds.shape_ids.len() {
        return Err(Error::DimensionMismatch { expected: ds.shape_ids.len(), got: shapes.len() });
    }
    let (train_idx, mut hold_idx) = ds.split();
    if train_idx.is_empty() {
        return Err(Error::InvalidParameter("empty training split".into()));
    }
    if hold_idx.is_empty() {
        hold_idx = train_idx.clone();
    }
    let mut model = DynamicsModel::new(ds.n_per_finger, radius, ds.stats, cfg, seed)?;
    let inputs: Vec<Vec<f64>> = shapes.iter().map(DynamicsModel::shape_input).collect();
    let baseline = mean_baseline(ds, &model.stats, &train_idx, &hold_idx);

    // Turned copies are appended after the original records and join the
    // training split only, so holdout indices keep pointing at originals.
    let augmented;
    let (ds, train_idx) = if cfg.augment {
        let (a, extra) = with_half_turns(ds, &train_idx)?;
        augmented = a;
        (&augmented, train_idx.into_iter().chain(extra).collect::<Vec<_>>())
    } else {
        (ds, train_idx)
    };

    let mut log = TrainLog { baseline, best_holdout: f64::INFINITY, ..Default::default() };
    let mut opt_o = Adam::new(&model.object_encoder, cfg.lr);
    let mut opt_f = Adam::new(&model.finger_encoder, cfg.lr);
    let mut opt_t = Adam::new(&model.trunk, cfg.lr);
    let mut r = rng(derive_seed(seed, "dynamics.batches", 0));
    let mut order = train_idx.clone();
    let mut best = model.clone();
    let e = model.emb_dim();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let b = model.forward_batch(&inputs, ds, chunk)?;
            let y = model.targets(ds, chunk);
            let diff = b.trunk_cache.output() - &y;
            sum += diff.mapv(|v| v * v).sum();
            let dy = diff * (2.0 / (3 * chunk.len()) as f64);
            let (g_t, dx) = model.trunk.backward(&b.trunk_cache, dy.view())?;
            let mut d_obj = Array2::zeros(b.obj_cache.output().raw_dim());
            let mut d_fin = Array2::zeros(b.finger_cache.output().raw_dim());
            for (k, row) in dx.rows().into_iter().enumerate() {
                let mut o = d_obj.row_mut(b.obj_rows[k]);
                o += &row.slice(s![..e]);
                let mut f = d_fin.row_mut(b.finger_rows[k]);
                f += &row.slice(s![e..2 * e]);
            }
            let (g_o, _) = model.object_encoder.backward(&b.obj_cache, d_obj.view())?;
            let (g_f, _) = model.finger_encoder.backward(&b.finger_cache, d_fin.view())?;
            if !(g_t.is_finite() && g_o.is_finite() && g_f.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient in epoch {epoch}")));
            }
            opt_t.step(&mut model.trunk, &g_t);
            opt_o.step(&mut model.object_encoder, &g_o);
            opt_f.step(&mut model.finger_encoder, &g_f);
        }
        let train_loss = sum / (3 * order.len()) as f64;
        let hold = model.mse(shapes, ds, &hold_idx)?;
        if !train_loss.is_finite() || !hold.is_finite() {
            return Err(Error::Diverged(format!("loss became non-finite in epoch {epoch}")));
        }
        log::info!("dynamics epoch {epoch}: train {train_loss:.6} holdout {hold:.6} (baseline {:.6})", log.baseline);
        log.train_loss.push(train_loss);
        log.holdout_loss.push(hold);
        if hold < log.best_holdout {
            log.best_holdout = hold;
            log.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, log))
}

/// The same interaction seen after turning the whole scene by π about the
/// jaw center: the fingers swap sides and run backwards along the jaw, the
/// pose becomes `(θ + π, −x, −y)` and the motion `(Δθ, −Δx, −Δy)`.
pub fn half_turn(m: &ControlVector, pose: &Pose, delta: &DeltaPose) -> Result<(ControlVector, Pose, DeltaPose)> {
    let n = m.n_per_finger();
    let mut v: Vec<f64> = m.side(Side::Right).iter().rev().copied().collect();
    v.extend(m.side(Side::Left).iter().rev());
    let turned = Pose::new(wrap_angle(pose.theta + std::f64::consts::PI), -pose.x, -pose.y);
    Ok((ControlVector::new(v, n)?, turned, DeltaPose { dtheta: delta.dtheta, dx: -delta.dx, dy: -delta.dy }))
}

/// `ds` plus the half-turned copy of every record in `idx`; returns the new
/// record indices.
fn with_half_turns(ds: &InteractionDataset, idx: &[usize]) -> Result<(InteractionDataset, Vec<usize>)> {
    let mut out = ds.clone();
    let nf = ds.fingers.len();
    for m in &ds.fingers {
        let (t, _, _) = half_turn(m, &Pose::new(0.0, 0.0, 0.0), &DeltaPose::default())?;
        out.fingers.push(t);
    }
    let start = out.records.len();
    for &i in idx {
        let r = &ds.records[i];
        let (_, pose, delta) = half_turn(&ds.fingers[r.finger], &r.pose, &r.delta)?;
        out.records.push(Record { shape: r.shape, finger: r.finger + nf, pose, delta });
    }
    let end = out.records.len();
    Ok((out, (start..end).collect()))
}

/// Holdout MSE of predicting the training-split mean (z-scored units).
fn mean_baseline(ds: &InteractionDataset, stats: &DeltaStats, train_idx: &[usize], hold_idx: &[usize]) -> f64 {
    let mut mean = [0.0; 3];
    for (k, m) in mean.iter_mut().enumerate() {
        *m = exact_sum(train_idx.iter().map(|&i| stats.normalize(&ds.records[i].delta)[k])) / train_idx.len() as f64;
    }
    let sq = exact_sum(hold_idx.iter().flat_map(|&i| {
        let z = stats.normalize(&ds.records[i].delta);
        (0..3).map(move |k| (z[k] - mean[k]).powi(2))
    }));
    sq / (3 * hold_idx.len()) as f64
}
