//! Dense multilayer perceptrons with reverse-mode gradients, Adam, and
//! sinusoidal positional encoding.
//!
//! Layers compute `a_{l+1} = act(a_l · W_l + b_l)` on row-major batches with
//! `W_l` of shape `(in, out)`. Hidden layers use tanh; the output activation
//! is chosen per network.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"DGDMNET1";

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

/// Sinusoidal encoding: for each component `u` and band `l` emits
/// `sin(2^l π u), cos(2^l π u)`.
pub fn posenc(v: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * v.len());
    posenc_into(v, bands, &mut out);
    out
}

pub fn posenc_into(v: &[f64], bands: usize, out: &mut Vec<f64>) {
    for &u in v {
        let mut freq = PI;
        for _ in 0..bands {
            let (s, c) = (freq * u).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    /// Multiplies `delta` by the derivative, given the activated output.
    fn backprop(self, delta: &mut Array2<f64>, out: &Array2<f64>) {
        if self == Activation::Tanh {
            Zip::from(delta).and(out).for_each(|d, &a| *d *= 1.0 - a * a);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    output: Activation,
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.biases == other.biases && self.output == other.output
    }
}

/// Activations retained by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct Cache {
    stamp: u64,
    /// Input of every layer; `acts[0]` is the network input.
    acts: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl Cache {
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// Flattened in parameter order (weights then biases, per layer).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Random network with weights and biases uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer dims {dims:?}")));
        }
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((pair[0], pair[1]), |_| rng.random_range(-bound..bound)));
            biases.push(Array1::from_shape_fn(pair[1], |_| rng.random_range(-bound..bound)));
        }
        Ok(Self { weights, biases, output, stamp: fresh_stamp() })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, output: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidParameter("need one bias per weight matrix".into()));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(Error::DimensionMismatch { expected: w.ncols(), got: b.len() });
            }
            if l > 0 && weights[l - 1].ncols() != w.nrows() {
                return Err(Error::DimensionMismatch { expected: weights[l - 1].ncols(), got: w.nrows() });
            }
        }
        let net = Self { weights, biases, output, stamp: fresh_stamp() };
        if !net.is_finite() {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].nrows()];
        d.extend(self.weights.iter().map(|w| w.ncols()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn locate(&self, mut i: usize) -> (usize, Option<(usize, usize)>, usize) {
        for l in 0..self.weights.len() {
            let w = &self.weights[l];
            if i < w.len() {
                return (l, Some((i / w.ncols(), i % w.ncols())), 0);
            }
            i -= w.len();
            if i < self.biases[l].len() {
                return (l, None, i);
            }
            i -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in [`Grads::flat`] order.
    pub fn param(&self, i: usize) -> f64 {
        match self.locate(i) {
            (l, Some(rc), _) => self.weights[l][rc],
            (l, None, j) => self.biases[l][j],
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        match self.locate(i) {
            (l, Some(rc), _) => self.weights[l][rc] = v,
            (l, None, j) => self.biases[l][j] = v,
        }
        self.stamp = fresh_stamp();
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    fn layer(&self, l: usize, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weights[l]);
        z += &self.biases[l];
        let act = if l + 1 == self.weights.len() { self.output } else { Activation::Tanh };
        act.apply(&mut z);
        z
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = self.layer(0, &x);
        for l in 1..self.weights.len() {
            a = self.layer(l, &a.view());
        }
        Ok(a)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<Cache> {
        self.check_input(&x)?;
        let mut acts = Vec::with_capacity(self.weights.len());
        acts.push(x.to_owned());
        for l in 0..self.weights.len() - 1 {
            let next = self.layer(l, &acts[l].view());
            acts.push(next);
        }
        let out = self.layer(self.weights.len() - 1, &acts[self.weights.len() - 1].view());
        Ok(Cache { stamp: self.stamp, acts, out })
    }

    fn run_backward(&self, cache: &Cache, dy: ArrayView2<f64>, mut grads: Option<&mut Grads>) -> Result<Array2<f64>> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        if dy.dim() != cache.out.dim() {
            return Err(Error::DimensionMismatch { expected: cache.out.ncols(), got: dy.ncols() });
        }
        let mut delta = dy.to_owned();
        self.output.backprop(&mut delta, &cache.out);
        for l in (0..self.weights.len()).rev() {
            if let Some(g) = grads.as_deref_mut() {
                g.weights[l] = cache.acts[l].t().dot(&delta);
                g.biases[l] = delta.sum_axis(Axis(0));
            }
            let mut prev = delta.dot(&self.weights[l].t());
            if l > 0 {
                Activation::Tanh.backprop(&mut prev, &cache.acts[l]);
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradients of `Σ y ⊙ dy` with respect to every parameter and the input.
    pub fn backward(&self, cache: &Cache, dy: ArrayView2<f64>) -> Result<(Grads, Array2<f64>)> {
        let mut g = Grads::zeros_like(self);
        let dx = self.run_backward(cache, dy, Some(&mut g))?;
        Ok((g, dx))
    }

    /// Input gradient only.
    pub fn backward_input(&self, cache: &Cache, dy: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.run_backward(cache, dy, None)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.weights.len() as u64).to_le_bytes())?;
        for d in self.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for v in wt.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in b.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, output: Activation) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a network checkpoint"));
        }
        let n_layers = read_u64(r)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::format(format!("implausible layer count {n_layers}")));
        }
        let dims = (0..=n_layers).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims.iter().any(|&d| d == 0 || d > 1 << 20) {
            return Err(Error::format(format!("implausible layer dims {dims:?}")));
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for pair in dims.windows(2) {
            let w = (0..pair[0] * pair[1]).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let b = (0..pair[1]).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            weights.push(Array2::from_shape_vec((pair[0], pair[1]), w).expect("shape matches length"));
            biases.push(Array1::from(b));
        }
        Self::from_parts(weights, biases, output)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Grads::zeros_like(net), v: Grads::zeros_like(net) }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected descent step.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            Zip::from(&mut net.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(update);
            Zip::from(&mut net.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(update);
        }
        net.stamp = fresh_stamp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use ndarray::{array, Array};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn posenc_examples() {
        assert_eq!(posenc(&[0.0], 2), vec![0.0, 1.0, 0.0, 1.0]);
        let e = posenc(&[1.0], 1);
        assert!(close(e[0], 0.0, 1e-15) && e[1] == -1.0);
        let e = posenc(&[0.5], 3);
        for (a, b) in e.iter().zip([1.0, 0.0, 0.0, -1.0, 0.0, 1.0]) {
            assert!(close(*a, b, 1e-12), "{e:?}");
        }
        assert_eq!(posenc(&[0.1, 0.2, 0.3], 6).len(), 36);
    }

    #[test]
    fn zero_and_identity_nets() {
        let z = Mlp::from_parts(vec![Array2::zeros((3, 4)), Array2::zeros((4, 2))], vec![Array1::zeros(4), Array1::zeros(2)], Activation::Identity)
            .unwrap();
        let y = z.forward(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
        let id = Mlp::from_parts(vec![Array2::eye(3)], vec![Array1::zeros(3)], Activation::Identity).unwrap();
        let x = array![[1.5, -2.0, 0.25], [0.0, 4.0, -1.0]];
        assert_eq!(id.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::new(&[3, 4, 2], Activation::Identity, &mut rng(1)).unwrap();
        assert!(matches!(net.forward(Array2::zeros((1, 5)).view()), Err(Error::DimensionMismatch { expected: 3, got: 5 })));
    }

    #[test]
    fn forward_matches_scalar_reimplementation() {
        let net = Mlp::new(&[5, 7, 3], Activation::Identity, &mut rng(2)).unwrap();
        let x = [0.3, -0.7, 1.1, 0.05, -0.4];
        let y = net.forward_one(&x).unwrap();
        let (w0, b0, w1, b1) = (&net.weights()[0], &net.biases()[0], &net.weights()[1], &net.biases()[1]);
        let mut h = [0.0; 7];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = b0[j];
            for i in 0..5 {
                s += x[i] * w0[[i, j]];
            }
            *hj = s.tanh();
        }
        for k in 0..3 {
            let mut s = b1[k];
            for j in 0..7 {
                s += h[j] * w1[[j, k]];
            }
            assert!(close(y[k], s, 1e-12));
        }
    }

    #[test]
    fn linear_input_grad_is_transpose() {
        let w = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let net = Mlp::from_parts(vec![w.clone()], vec![Array1::zeros(2)], Activation::Identity).unwrap();
        let cache = net.forward_cached(array![[0.1, 0.2, 0.3]].view()).unwrap();
        let dy = array![[0.5, -1.0]];
        let (_, dx) = net.backward(&cache, dy.view()).unwrap();
        assert_eq!(dx.row(0).to_vec(), w.dot(&dy.row(0)).to_vec());
    }

    #[test]
    fn zero_dy_gives_zero_grads() {
        let net = Mlp::new(&[4, 6, 6, 2], Activation::Tanh, &mut rng(3)).unwrap();
        let cache = net.forward_cached(Array2::from_elem((3, 4), 0.3).view()).unwrap();
        let (g, dx) = net.backward(&cache, Array2::zeros((3, 2)).view()).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Mlp::new(&[2, 3, 1], Activation::Identity, &mut rng(4)).unwrap();
        let cache = net.forward_cached(array![[0.1, 0.2]].view()).unwrap();
        let other = Mlp::new(&[2, 3, 1], Activation::Identity, &mut rng(4)).unwrap();
        assert!(matches!(other.backward(&cache, array![[1.0]].view()), Err(Error::StaleCache)));
        let g = Grads::zeros_like(&net);
        Adam::new(&net, 1e-3).step(&mut net, &g);
        assert!(matches!(net.backward(&cache, array![[1.0]].view()), Err(Error::StaleCache)));
    }

    fn finite_difference_check(dims: &[usize], output: Activation, seed: u64) {
        let mut r = rng(seed);
        let mut net = Mlp::new(dims, output, &mut r).unwrap();
        let batch = 3;
        let x = Array::from_shape_fn((batch, dims[0]), |_| r.random_range(-1.0..1.0));
        let dy = Array::from_shape_fn((batch, *dims.last().unwrap()), |_| r.random_range(-1.0..1.0));
        let objective = |n: &Mlp, x: &Array2<f64>| (n.forward(x.view()).unwrap() * &dy).sum();
        let cache = net.forward_cached(x.view()).unwrap();
        let (g, dx) = net.backward(&cache, dy.view()).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        let flat = g.flat();
        let mut worst: f64 = 0.0;
        for (i, &gi) in flat.iter().enumerate() {
            let p = net.param(i);
            net.set_param(i, p + h);
            let fp = objective(&net, &x);
            net.set_param(i, p - h);
            let fm = objective(&net, &x);
            net.set_param(i, p);
            worst = worst.max(rel((fp - fm) / (2.0 * h), gi));
        }
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            worst = worst.max(rel((objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h), dx[idx]));
        }
        assert!(worst <= 1e-6, "worst relative error {worst:e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(&[4, 6, 5, 3], Activation::Identity, 11);
        finite_difference_check(&[3, 8, 2], Activation::Tanh, 12);
    }

    #[test]
    fn adam_examples() {
        let mut net = Mlp::from_parts(vec![array![[0.5]]], vec![array![-0.25]], Activation::Identity).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, 0.1);
        opt.step(&mut net, &Grads::zeros_like(&before));
        assert_eq!(net.weights(), before.weights());
        assert_eq!(net.biases(), before.biases());

        let mut opt = Adam::new(&net, 0.01);
        let g = Grads { weights: vec![array![[3.0]]], biases: vec![array![-0.2]] };
        opt.step(&mut net, &g);
        assert!(close(net.weights()[0][[0, 0]] - 0.5, -0.01, 1e-4));
        assert!(close(net.biases()[0][0] + 0.25, 0.01, 1e-4));

        // Minimize (w - 3)^2 through the bias of a zero-input net.
        let mut net = Mlp::from_parts(vec![array![[0.0]]], vec![array![0.0]], Activation::Identity).unwrap();
        let mut opt = Adam::new(&net, 0.1);
        for _ in 0..200 {
            let w = net.biases()[0][0];
            let g = Grads { weights: vec![array![[0.0]]], biases: vec![array![2.0 * (w - 3.0)]] };
            opt.step(&mut net, &g);
        }
        assert!((net.biases()[0][0] - 3.0).abs() < 1e-2, "{}", net.biases()[0][0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Mlp::new(&[5, 9, 4], Activation::Tanh, &mut rng(5)).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DGDMNET1");
        assert_eq!(buf.len(), 8 + 8 + 3 * 8 + 8 * net.num_params());
        let back = Mlp::read_from(&mut buf.as_slice(), Activation::Tanh).unwrap();
        assert_eq!(back.weights(), net.weights());
        assert_eq!(back.biases(), net.biases());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(Mlp::read_from(&mut &buf[..20], Activation::Tanh).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Mlp::new(&[3, 4, 2], Activation::Identity, &mut rng(9)).unwrap();
        let b = Mlp::new(&[3, 4, 2], Activation::Identity, &mut rng(9)).unwrap();
        assert_eq!(a.weights(), b.weights());
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.weights()[0].iter().all(|v| v.abs() < bound));
    }
}
