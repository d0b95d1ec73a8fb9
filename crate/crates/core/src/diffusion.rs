//! Unconditional diffusion over finger control vectors, DDIM sampling, and
//! dynamics-guided sampling.
//!
//! Guidance shifts each noise prediction by the objective gradient:
//! `ε̂ = ε_θ(m_k, k) − s·√(1−ᾱ_k)·∇F(m_k)`, followed by the deterministic
//! DDIM update `m_{k'} = √ᾱ_{k'}·(m_k − √(1−ᾱ_k)·ε̂)/√ᾱ_k + √(1−ᾱ_{k'})·ε̂`.

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::ControlVector;
use crate::nn::{posenc_into, read_f64, read_u64, Activation, Adam, Mlp};
use crate::util::{derive_seed, rng};
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"DGDMDIF1";
/// Largest per-step noise fraction.
pub const BETA_MAX: f64 = 0.999;
/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Positional-encoding bands for the timestep.
pub const TIME_BANDS: usize = 4;

/// Squared-cosine noise schedule with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    k: usize,
    s0: f64,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// `f(k) = cos²(((k/K) + s₀)/(1 + s₀)·π/2)`; `β_k = min(1 − f(k)/f(k−1), β_max)`
    /// and `ᾱ_k = Π_{i≤k} (1 − β_i)`. Below the clip this equals `f(k)/f(0)`.
    pub fn new(k: usize) -> Result<Self> {
        Self::with_offset(k, COSINE_OFFSET)
    }

    pub fn with_offset(k: usize, s0: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidParameter(format!("schedule needs K >= 2, got {k}")));
        }
        let f = |i: usize| (((i as f64 / k as f64) + s0) / (1.0 + s0) * PI / 2.0).cos().powi(2);
        let f0 = f(0);
        let mut alpha_bar = vec![1.0];
        let mut beta = vec![0.0];
        let mut clipped = false;
        for i in 1..=k {
            let b = (1.0 - f(i) / f(i - 1)).min(BETA_MAX);
            clipped |= b == BETA_MAX;
            let prev = alpha_bar[i - 1];
            // Until the first clipped step the product equals the closed form.
            let a = if clipped { prev * (1.0 - b) } else { f(i) / f0 };
            beta.push(b);
            alpha_bar.push(a);
        }
        Ok(Self { k, s0, alpha_bar, beta })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn offset(&self) -> f64 {
        self.s0
    }

    /// `ᾱ_k` for `k ∈ 0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    /// `√ᾱ_k·m0 + √(1−ᾱ_k)·ε`.
    pub fn q_sample(&self, m0: &[f64], k: usize, eps: &[f64]) -> Vec<f64> {
        let a = self.alpha_bar[k];
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        m0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect()
    }
}

/// How inference timesteps are placed on `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// `1, 1+c, 1+2c, …` with `c = K / K_inf` (e.g. 13, 10, 7, 4, 1 for 15/5).
    Leading,
    /// `K, K−c, …` (e.g. 15, 12, 9, 6, 3 for 15/5).
    Trailing,
}

/// Descending inference timesteps.
pub fn inference_timesteps(k: usize, k_inf: usize, spacing: Spacing) -> Result<Vec<usize>> {
    if k_inf == 0 || k_inf > k {
        return Err(Error::InvalidParameter(format!("need 1 <= K_inf <= K, got K_inf = {k_inf}, K = {k}")));
    }
    let mut t: Vec<usize> = match spacing {
        Spacing::Leading => (0..k_inf).map(|i| 1 + i * (k / k_inf)).collect(),
        Spacing::Trailing => (0..k_inf).map(|i| k - (i * k) / k_inf).collect(),
    };
    t.sort_unstable_by(|a, b| b.cmp(a));
    Ok(t)
}

/// Anything that predicts the noise in `m_k`.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict_noise(&self, m: &[f64], k: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_inf")]
    pub k_inf: usize,
    pub spacing: Spacing,
    /// Hidden width of the denoiser.
    #[serde(alias = "widths")]
    pub width: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    /// Size of the fixed training set of clean vectors.
    pub n_samples: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { k: 15, k_inf: 5, spacing: Spacing::Leading, width: 64, hidden_layers: 4, epochs: 400, n_samples: 8192, lr: 1e-3, batch: 256 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        inference_timesteps(self.k, self.k_inf, self.spacing)?;
        if self.width == 0 || self.hidden_layers == 0 || self.epochs == 0 || self.n_samples == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid diffusion config: {self:?}")));
        }
        Ok(())
    }
}

/// Time-conditioned MLP noise predictor.
///
/// `ε̂(m, k) = a_k·m + c_k·net(m/√v_k, posenc(k/K))` with
/// `v_k = ᾱ_k·σ² + 1 − ᾱ_k` the variance of `m_k` under the uniform prior
/// (`σ² = 1/3`), `c_k = √(ᾱ_k·σ²/v_k)` and learned per-step skip gains `a_k`
/// starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    n_per_finger: usize,
    schedule: NoiseSchedule,
    net: Mlp,
    skip: Vec<f64>,
}

/// Variance of one coordinate of the uniform prior on `[-1, 1]`.
const PRIOR_VAR: f64 = 1.0 / 3.0;

fn time_features(k: usize, big_k: usize, out: &mut Vec<f64>) {
    posenc_into(&[k as f64 / big_k as f64], TIME_BANDS, out);
}

impl Denoiser {
    pub fn new(n_per_finger: usize, schedule: NoiseSchedule, width: usize, hidden_layers: usize, seed: u64) -> Result<Self> {
        let d = 2 * n_per_finger;
        let mut dims = vec![d + 2 * TIME_BANDS];
        dims.extend(std::iter::repeat_n(width, hidden_layers));
        dims.push(d);
        let net = Mlp::new(&dims, Activation::Identity, &mut rng(derive_seed(seed, "diffusion.init", 0)))?;
        let skip = vec![0.0; schedule.k + 1];
        Ok(Self { n_per_finger, schedule, net, skip })
    }

    pub fn n_per_finger(&self) -> usize {
        self.n_per_finger
    }

    pub fn dim(&self) -> usize {
        2 * self.n_per_finger
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Skip gains `a_0..=a_K`.
    pub fn skip(&self) -> &[f64] {
        &self.skip
    }

    /// `(1/√v_k, c_k)`.
    fn scales(&self, k: usize) -> (f64, f64) {
        let a = self.schedule.alpha_bar(k);
        let v = a * PRIOR_VAR + 1.0 - a;
        (1.0 / v.sqrt(), (a * PRIOR_VAR / v).sqrt())
    }

    fn inputs(&self, ms: &[Vec<f64>], ks: &[usize]) -> Array2<f64> {
        let d = self.dim();
        let mut x = Array2::zeros((ms.len(), d + 2 * TIME_BANDS));
        let mut tf = Vec::with_capacity(2 * TIME_BANDS);
        for (i, (m, &k)) in ms.iter().zip(ks).enumerate() {
            let (c_in, _) = self.scales(k);
            let mut row = x.row_mut(i);
            for (dst, v) in row.iter_mut().zip(m) {
                *dst = c_in * v;
            }
            tf.clear();
            time_features(k, self.schedule.k, &mut tf);
            for (dst, v) in row.iter_mut().skip(d).zip(&tf) {
                *dst = *v;
            }
        }
        x
    }

    /// Combines raw network outputs with the skip path, in place.
    fn combine(&self, out: &mut Array2<f64>, ms: &[Vec<f64>], ks: &[usize]) {
        for ((mut row, m), &k) in out.rows_mut().into_iter().zip(ms).zip(ks) {
            let (_, c_out) = self.scales(k);
            let a = self.skip[k];
            for (o, x) in row.iter_mut().zip(m) {
                *o = a * x + c_out * *o;
            }
        }
    }

    fn predict_batch(&self, ms: &[Vec<f64>], ks: &[usize]) -> Result<Array2<f64>> {
        let mut out = self.net.forward(self.inputs(ms, ks).view())?;
        self.combine(&mut out, ms, ks);
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(self.n_per_finger as u64).to_le_bytes())?;
        w.write_all(&(self.schedule.k as u64).to_le_bytes())?;
        w.write_all(&self.schedule.s0.to_le_bytes())?;
        w.write_all(&(TIME_BANDS as u64).to_le_bytes())?;
        for a in &self.skip {
            w.write_all(&a.to_le_bytes())?;
        }
        self.net.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("not a denoiser checkpoint"));
        }
        let n_per_finger = read_u64(r)? as usize;
        let k = read_u64(r)? as usize;
        let s0 = read_f64(r)?;
        let bands = read_u64(r)? as usize;
        if bands != TIME_BANDS {
            return Err(Error::format(format!("unsupported time bands {bands}")));
        }
        let schedule = NoiseSchedule::with_offset(k, s0)?;
        let skip = (0..=k).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let net = Mlp::read_from(r, Activation::Identity)?;
        if net.input_dim() != 2 * n_per_finger + 2 * TIME_BANDS || net.output_dim() != 2 * n_per_finger {
            return Err(Error::format("inconsistent denoiser checkpoint"));
        }
        Ok(Self { n_per_finger, schedule, net, skip })
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

impl NoisePredictor for Denoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, m: &[f64], k: usize) -> Result<Vec<f64>> {
        if m.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: m.len() });
        }
        Ok(self.predict_batch(&[m.to_vec()], &[k])?.into_raw_vec_and_offset().0)
    }
}

/// Loss history of [`train_denoiser`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenoiserLog {
    /// Validation loss before training.
    pub initial_loss: f64,
    /// Validation loss after every epoch.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_epoch: usize,
}

struct NoisyBatch {
    ms: Vec<Vec<f64>>,
    ks: Vec<usize>,
    eps: Array2<f64>,
}

fn noisy_batch<R: Rng>(clean: &[Vec<f64>], idx: &[usize], sched: &NoiseSchedule, r: &mut R) -> NoisyBatch {
    let d = clean[0].len();
    let mut ms = Vec::with_capacity(idx.len());
    let mut ks = Vec::with_capacity(idx.len());
    let mut eps = Array2::zeros((idx.len(), d));
    for (row, &i) in idx.iter().enumerate() {
        let k = r.random_range(1..=sched.k);
        let e: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        ms.push(sched.q_sample(&clean[i], k, &e));
        ks.push(k);
        eps.row_mut(row).iter_mut().zip(&e).for_each(|(dst, v)| *dst = *v);
    }
    NoisyBatch { ms, ks, eps }
}

fn batch_loss(den: &Denoiser, b: &NoisyBatch) -> Result<f64> {
    let out = den.predict_batch(&b.ms, &b.ks)?;
    Ok((out - &b.eps).mapv(|v| v * v).mean().unwrap_or(f64::NAN))
}

/// Adam moments for the skip gains, matching [`Adam`].
struct SkipMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl SkipMoments {
    fn step(&mut self, opt: &Adam, skip: &mut [f64], g: &[f64]) {
        let t = opt.steps() as i32;
        let (c1, c2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
        for (((p, g), m), v) in skip.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            *p -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.eps);
        }
    }
}

/// Trains a denoiser on `n_samples` vectors drawn uniformly from
/// `[-1, 1]^{2N}` with fresh `(k, ε)` every epoch, keeping the weights with
/// the lowest loss on a fixed validation set.
pub fn train_denoiser(n_per_finger: usize, cfg: &DiffusionConfig, seed: u64) -> Result<(Denoiser, DenoiserLog)> {
    cfg.validate()?;
    let sched = NoiseSchedule::new(cfg.k)?;
    let mut den = Denoiser::new(n_per_finger, sched.clone(), cfg.width, cfg.hidden_layers, seed)?;
    let d = den.dim();
    let mut data_rng = rng(derive_seed(seed, "diffusion.data", 0));
    let clean: Vec<Vec<f64>> = (0..cfg.n_samples).map(|_| (0..d).map(|_| data_rng.random_range(-1.0..=1.0)).collect()).collect();
    let val_clean: Vec<Vec<f64>> = (0..2048).map(|_| (0..d).map(|_| data_rng.random_range(-1.0..=1.0)).collect()).collect();
    let all: Vec<usize> = (0..val_clean.len()).collect();
    let val = noisy_batch(&val_clean, &all, &sched, &mut rng(derive_seed(seed, "diffusion.validation", 0)));

    let mut log = DenoiserLog { initial_loss: batch_loss(&den, &val)?, ..Default::default() };
    log.best_loss = log.initial_loss;
    let mut best = den.clone();
    let mut opt = Adam::new(&den.net, cfg.lr);
    let mut skip_moments = SkipMoments { m: vec![0.0; cfg.k + 1], v: vec![0.0; cfg.k + 1] };
    let mut r = rng(derive_seed(seed, "diffusion.batches", 0));
    let mut order: Vec<usize> = (0..clean.len()).collect();
    for epoch in 0..cfg.epochs {
        // Cosine learning-rate decay over the run.
        opt.lr = cfg.lr * 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos());
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch) {
            let b = noisy_batch(&clean, chunk, &sched, &mut r);
            let cache = den.net.forward_cached(den.inputs(&b.ms, &b.ks).view())?;
            let mut pred = cache.output().to_owned();
            den.combine(&mut pred, &b.ms, &b.ks);
            let mut dy = (pred - &b.eps) * (2.0 / (chunk.len() * d) as f64);
            let mut skip_grad = vec![0.0; cfg.k + 1];
            for ((mut row, m), &k) in dy.rows_mut().into_iter().zip(&b.ms).zip(&b.ks) {
                let (_, c_out) = den.scales(k);
                skip_grad[k] += row.iter().zip(m).map(|(g, x)| g * x).sum::<f64>();
                row.mapv_inplace(|g| g * c_out);
            }
            let (g, _) = den.net.backward(&cache, dy.view())?;
            if !g.is_finite() || skip_grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite denoiser gradient in epoch {epoch}")));
            }
            opt.step(&mut den.net, &g);
            skip_moments.step(&opt, &mut den.skip, &skip_grad);
        }
        let loss = batch_loss(&den, &val)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("denoiser loss became non-finite in epoch {epoch}")));
        }
        log::debug!("denoiser epoch {epoch}: validation loss {loss:.6}");
        log.losses.push(loss);
        if loss < log.best_loss {
            log.best_loss = loss;
            log.best_epoch = epoch;
            best = den.clone();
        }
    }
    Ok((best, log))
}

/// One logged denoising step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub k: usize,
    pub eps_norm: f64,
    pub grad_norm: f64,
    /// Objective at `m_k` (NaN when unguided).
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Final vector clamped into `[-1, 1]`.
    pub m: ControlVector,
    /// Final vector before clamping.
    pub raw: Vec<f64>,
    pub steps: Vec<StepLog>,
}

/// Deterministic DDIM update from `k` to `k_next` for a given noise estimate.
pub fn ddim_step(sched: &NoiseSchedule, m: &[f64], k: usize, k_next: usize, eps_hat: &[f64]) -> Vec<f64> {
    let a = sched.alpha_bar(k);
    let a_next = sched.alpha_bar(k_next);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let (sa_next, sb_next) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    m.iter().zip(eps_hat).map(|(x, e)| sa_next * ((x - sb * e) / sa) + sb_next * e).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Seed of sample `index` in a batch drawn with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, "diffusion.sample", index)
}

/// Guided DDIM sampling. `objective(m)` returns `(F(m), ∇F(m))`; with
/// `None` (or `s = 0` and the same objective) the guidance term vanishes.
pub fn guided_sample<P, G>(den: &P, mut objective: Option<G>, s: f64, k_inf: usize, spacing: Spacing, n_per_finger: usize, seed: u64) -> Result<Sample>
where
    P: NoisePredictor + ?Sized,
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let sched = den.schedule();
    let steps = inference_timesteps(sched.k(), k_inf, spacing)?;
    let d = 2 * n_per_finger;
    let mut r = rng(seed);
    let mut m: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let mut logs = Vec::with_capacity(steps.len());
    for (i, &k) in steps.iter().enumerate() {
        let k_next = steps.get(i + 1).copied().unwrap_or(0);
        let mut eps = den.predict_noise(&m, k)?;
        if eps.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: eps.len() });
        }
        let mut log = StepLog { step: i, k, eps_norm: 0.0, grad_norm: 0.0, objective: f64::NAN };
        if let Some(obj) = objective.as_mut() {
            let (f, g) = obj(&m)?;
            if g.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: g.len() });
            }
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::GuidanceNaN { step: i, k });
            }
            let c = s * (1.0 - sched.alpha_bar(k)).sqrt();
            for (e, gi) in eps.iter_mut().zip(&g) {
                *e -= c * gi;
            }
            log.grad_norm = norm(&g);
            log.objective = f;
        }
        log.eps_norm = norm(&eps);
        log::trace!("sample step {i} k={k} |eps|={:.6} |grad|={:.6} F={:.6}", log.eps_norm, log.grad_norm, log.objective);
        logs.push(log);
        m = ddim_step(sched, &m, k, k_next, &eps);
    }
    let cv = ControlVector::clamped(&m, n_per_finger)?;
    Ok(Sample { m: cv, raw: m, steps: logs })
}

/// Unguided DDIM sampling.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(den: &P, k_inf: usize, spacing: Spacing, n_per_finger: usize, seed: u64) -> Result<Sample> {
    guided_sample::<P, fn(&[f64]) -> Result<(f64, Vec<f64>)>>(den, None, 0.0, k_inf, spacing, n_per_finger, seed)
}

/// Formats step logs, one line per step.
pub fn format_step_logs(sample_index: usize, steps: &[StepLog]) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(&format!(
            "sample={sample_index} step={} k={} eps_norm={} grad_norm={} F={}\n",
            s.step,
            s.k,
            crate::util::fmt_sig9(s.eps_norm),
            crate::util::fmt_sig9(s.grad_norm),
            crate::util::fmt_sig9(s.objective)
        ));
    }
    out
}
