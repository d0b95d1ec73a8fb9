//! Baseline design optimizers: projected gradient ascent and CMA-ES.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::ControlVector;
use crate::util::rng;
use crate::{Error, Result};

/// Smallest eigenvalue kept in the CMA-ES covariance.
pub const EIGEN_FLOOR: f64 = 1e-14;
/// Resampling attempts for an out-of-box candidate before clipping.
pub const MAX_RESAMPLES: usize = 100;

/// Evaluation, time and stagnation limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBudget {
    pub max_evals: usize,
    /// Wall-clock limit; `None` keeps runs reproducible.
    pub max_seconds: Option<f64>,
    /// Stop once recent objective values span less than this.
    pub tol: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { max_evals: 3000, max_seconds: None, tol: 1e-12 }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        let secs_ok = self.max_seconds.is_none_or(|s| s > 0.0);
        if self.max_evals == 0 || !secs_ok || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("search budget must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdResult {
    pub m: ControlVector,
    pub value: f64,
    /// Objective of every visited iterate, starting with `m0`.
    pub history: Vec<f64>,
}

/// Projected gradient ascent `m ← clip(m + lr·∇F(m), [-1, 1])` returning the
/// best visited iterate. `objective(m)` yields `(F(m), ∇F(m))`; a non-finite
/// value or gradient ends the run with the best iterate so far.
pub fn gd_optimize<G>(mut objective: G, m0: &ControlVector, cfg: &GdConfig) -> Result<GdResult>
where
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidParameter(format!("gradient step must be positive, got {}", cfg.lr)));
    }
    let n = m0.n_per_finger();
    let mut m = m0.values().to_vec();
    let mut best = (m0.clone(), f64::NEG_INFINITY);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (f, g) = objective(&m)?;
        if g.len() != m.len() {
            return Err(Error::DimensionMismatch { expected: m.len(), got: g.len() });
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            log::warn!("gradient ascent stopped at step {step}: non-finite objective or gradient");
            break;
        }
        history.push(f);
        if f > best.1 {
            best = (ControlVector::clamped(&m, n)?, f);
        }
        if step == cfg.steps {
            break;
        }
        for (x, gi) in m.iter_mut().zip(&g) {
            *x = (*x + cfg.lr * gi).clamp(-1.0, 1.0);
        }
    }
    Ok(GdResult { m: best.0, value: best.1, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmaesConfig {
    pub sigma0: f64,
    pub budget: SearchBudget,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self { sigma0: 0.3, budget: SearchBudget::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesResult {
    pub x: Vec<f64>,
    /// Best (lowest) objective value.
    pub value: f64,
    pub evals: usize,
    pub generations: usize,
    /// Smallest covariance eigenvalue over all generations.
    pub min_eigenvalue: f64,
}

/// Population size `4 + ⌊3·ln n⌋`.
pub fn population_size(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

/// Minimizes `f` with a (μ/μ_w, λ) CMA-ES using rank-one and rank-μ
/// covariance updates and cumulative step-size adaptation. With `bounds`,
/// out-of-box candidates are resampled up to [`MAX_RESAMPLES`] times and then
/// clipped. Non-finite objective values rank last.
pub fn cmaes_minimize<F>(mut f: F, x0: &[f64], bounds: Option<(f64, f64)>, cfg: &CmaesConfig, seed: u64) -> Result<CmaesResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    cfg.budget.validate()?;
    let n = x0.len();
    if n == 0 || !(cfg.sigma0 > 0.0) {
        return Err(Error::InvalidParameter("CMA-ES needs a non-empty start and positive sigma".into()));
    }
    let start = Instant::now();
    let mut r = rng(seed);
    let nf = n as f64;

    let lambda = population_size(n);
    let mu = lambda / 2;
    let raw_w: Vec<f64> = (0..mu).map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln()).collect();
    let wsum: f64 = raw_w.iter().sum();
    let w: Vec<f64> = raw_w.iter().map(|v| v / wsum).collect();
    let mu_eff = 1.0 / w.iter().map(|v| v * v).sum::<f64>();

    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let clip = |x: &mut DVector<f64>| {
        if let Some((lo, hi)) = bounds {
            x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    };
    let inside = |x: &DVector<f64>| bounds.is_none_or(|(lo, hi)| x.iter().all(|v| (lo..=hi).contains(v)));

    let mut mean = DVector::from_column_slice(x0);
    clip(&mut mean);
    let mut sigma = cfg.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut basis = DMatrix::<f64>::identity(n, n);
    let mut diag = DVector::<f64>::from_element(n, 1.0);
    let mut p_sigma = DVector::<f64>::zeros(n);
    let mut p_c = DVector::<f64>::zeros(n);
    let mut min_eig = 1.0f64;

    let mut best_x = mean.clone();
    let mut best_f = f64::INFINITY;
    let mut evals = 0;
    let mut generations = 0;
    let mut recent: Vec<f64> = Vec::new();
    let window = 10 + (30.0 * nf / lambda as f64).ceil() as usize;

    'outer: while evals + lambda <= cfg.budget.max_evals {
        if cfg.budget.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() > s) {
            break;
        }
        let mut pop: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let draw = |r: &mut rand_chacha::ChaCha8Rng| {
                let z = DVector::<f64>::from_fn(n, |_, _| r.sample(StandardNormal));
                let y = &basis * z.component_mul(&diag);
                &mean + sigma * &y
            };
            let mut x = draw(&mut r);
            let mut tries = 0;
            while !inside(&x) && tries < MAX_RESAMPLES {
                x = draw(&mut r);
                tries += 1;
            }
            clip(&mut x);
            let y = (&x - &mean) / sigma;
            let fx = f(x.as_slice())?;
            evals += 1;
            let fx = if fx.is_finite() { fx } else { f64::INFINITY };
            if fx < best_f {
                best_f = fx;
                best_x = x.clone();
            }
            pop.push((fx, x, y));
        }
        generations += 1;
        pop.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut y_w = DVector::<f64>::zeros(n);
        for (wi, (_, _, y)) in w.iter().zip(&pop) {
            y_w += *wi * y;
        }
        mean += sigma * &y_w;
        clip(&mut mean);

        // C^{-1/2}·y_w through the eigenbasis.
        let inv_sqrt_y = &basis * (basis.transpose() * &y_w).component_div(&diag);
        p_sigma = (1.0 - c_sigma) * &p_sigma + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * inv_sqrt_y;
        let ps_norm = p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - c_sigma).powi(2 * generations as i32)).sqrt() / chi_n < 1.4 + 2.0 / (nf + 1.0);
        let h = if h_sigma { 1.0 } else { 0.0 };
        p_c = (1.0 - c_c) * &p_c + h * (c_c * (2.0 - c_c) * mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (wi, (_, _, y)) in w.iter().zip(&pop) {
            rank_mu += *wi * y * y.transpose();
        }
        let delta_h = (1.0 - h) * c_c * (2.0 - c_c);
        cov = (1.0 - c1 - c_mu) * &cov + c1 * (&p_c * p_c.transpose() + delta_h * &cov) + c_mu * rank_mu;
        cov = 0.5 * (&cov + cov.transpose());

        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();

        let eig = SymmetricEigen::new(cov.clone());
        let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        min_eig = min_eig.min(vals.min());
        basis = eig.eigenvectors;
        diag = vals.map(f64::sqrt);
        cov = &basis * DMatrix::from_diagonal(&vals) * basis.transpose();
        cov = 0.5 * (&cov + cov.transpose());

        recent.push(pop[0].0);
        if recent.len() > window {
            recent.remove(0);
        }
        if recent.len() == window {
            let lo = recent.iter().chain(pop.iter().map(|p| &p.0)).copied().fold(f64::INFINITY, f64::min);
            let hi = recent.iter().chain(pop.iter().map(|p| &p.0)).copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < cfg.budget.tol {
                log::debug!("CMA-ES stagnated after {generations} generations");
                break 'outer;
            }
        }
        if !sigma.is_finite() || sigma * diag.max() < 1e-300 {
            break;
        }
    }
    Ok(CmaesResult { x: best_x.as_slice().to_vec(), value: best_f, evals, generations, min_eigenvalue: min_eig })
}

/// Maximizes a design objective over `[-1, 1]^{2N}` with CMA-ES.
pub fn cmaes_optimize<F>(mut objective: F, m0: &ControlVector, cfg: &CmaesConfig, seed: u64) -> Result<(ControlVector, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let res = cmaes_minimize(|m| objective(m).map(|v| -v), m0.values(), Some((-1.0, 1.0)), cfg, seed)?;
    Ok((ControlVector::clamped(&res.x, m0.n_per_finger())?, -res.value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> Result<f64> {
        Ok(x.iter().map(|v| v * v).sum())
    }

    fn rosenbrock(x: &[f64]) -> Result<f64> {
        Ok(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2))
    }

    fn budget(max_evals: usize) -> CmaesConfig {
        CmaesConfig { sigma0: 0.3, budget: SearchBudget { max_evals, max_seconds: None, tol: 1e-15 } }
    }

    #[test]
    fn population_sizes() {
        assert_eq!(population_size(2), 6);
        assert_eq!(population_size(8), 10);
        assert_eq!(population_size(32), 14);
    }

    #[test]
    fn sphere_within_budget() {
        let res = cmaes_minimize(sphere, &[1.0; 8], None, &budget(2000), 11).unwrap();
        assert!(res.value < 1e-6, "{res:?}");
        assert!(res.evals <= 2000);
        assert!(res.min_eigenvalue >= EIGEN_FLOOR);
    }

    #[test]
    fn rosenbrock_within_budget() {
        let res = cmaes_minimize(rosenbrock, &[-1.2, 1.0], None, &budget(4000), 5).unwrap();
        assert!(res.value < 1e-4, "{res:?}");
    }

    #[test]
    fn seeded_runs_repeat() {
        let a = cmaes_minimize(rosenbrock, &[-1.2, 1.0], None, &budget(600), 3).unwrap();
        let b = cmaes_minimize(rosenbrock, &[-1.2, 1.0], None, &budget(600), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boxed_search_stays_inside() {
        let target = [1.7, -0.4, 0.2, -2.0, 0.0, 0.9, -1.1, 0.5];
        let m0 = ControlVector::zeros(4).unwrap();
        let mut seen_outside = false;
        let (m, _) = cmaes_optimize(
            |x| {
                seen_outside |= x.iter().any(|v| v.abs() > 1.0);
                Ok(-x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            },
            &m0,
            &budget(3000),
            2,
        )
        .unwrap();
        assert!(!seen_outside);
        for (v, t) in m.values().iter().zip(&target) {
            assert!((v - t.clamp(-1.0, 1.0)).abs() < 1e-2, "{v} vs {t}");
        }
    }

    fn quadratic(target: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |m: &[f64]| {
            let f = -m.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let g = m.iter().zip(&target).map(|(a, b)| -2.0 * (a - b)).collect();
            Ok((f, g))
        }
    }

    #[test]
    fn zero_gradient_returns_start() {
        let m0 = ControlVector::new(vec![0.3, -0.2, 0.5, 0.1, 0.0, -1.0, 1.0, 0.7], 4).unwrap();
        let res = gd_optimize(|m: &[f64]| Ok((0.0, vec![0.0; m.len()])), &m0, &GdConfig::default()).unwrap();
        assert_eq!(res.m, m0);
    }

    #[test]
    fn gradient_ascent_reaches_interior_optimum() {
        let target = vec![0.4, -0.3, 0.8, -0.9, 0.1, 0.0, -0.5, 0.6];
        let res = gd_optimize(quadratic(target.clone()), &ControlVector::zeros(4).unwrap(), &GdConfig::default()).unwrap();
        for (v, t) in res.m.values().iter().zip(&target) {
            assert!((v - t).abs() < 1e-3);
        }
    }

    #[test]
    fn gradient_ascent_projects_onto_box() {
        let target = vec![1.6, -0.3, -2.5, 0.2, 1.0, -1.0, 3.0, 0.0];
        let res = gd_optimize(quadratic(target.clone()), &ControlVector::zeros(4).unwrap(), &GdConfig::default()).unwrap();
        for (v, t) in res.m.values().iter().zip(&target) {
            assert!((v - t.clamp(-1.0, 1.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn gradient_ascent_stops_on_nan() {
        let mut calls = 0;
        let cfg = GdConfig::default();
        let res = gd_optimize(
            |m: &[f64]| {
                calls += 1;
                if calls > 3 {
                    Ok((f64::NAN, vec![0.0; m.len()]))
                } else {
                    Ok((m[0], vec![1.0; m.len()]))
                }
            },
            &ControlVector::zeros(4).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(res.history.len(), 3);
        assert!((res.value - 2.0 * cfg.lr).abs() < 1e-12);
    }
}
