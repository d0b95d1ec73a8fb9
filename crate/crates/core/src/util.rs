//! Small numeric and reproducibility helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a component seed from the master seed.
///
/// The seed is the first eight bytes (little-endian) of
/// `SHA-256(master_le_bytes || component_name || index_le_bytes)`.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(component.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Correctly rounded floating-point sum (Shewchuk's exact partials).
///
/// The result does not depend on the order of the inputs, which keeps the
/// contact model exactly mirror-equivariant.
#[derive(Debug, Default, Clone)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self { partials: Vec::with_capacity(8) }
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn total(&self) -> f64 {
        let p = &self.partials;
        if p.is_empty() {
            return 0.0;
        }
        let mut n = p.len() - 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Half-way rounding correction.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = ExactSum::new();
    for v in values {
        s.add(v);
    }
    s.total()
}

/// Formats a value with 9 significant digits in scientific notation.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rounds a value to what [`fmt_sig9`] followed by parsing yields.
pub fn quantize_sig9(v: f64) -> f64 {
    fmt_sig9(v).parse().expect("formatted float parses")
}
