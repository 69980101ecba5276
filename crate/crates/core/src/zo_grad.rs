//! Zeroth-order input-gradient estimation from loss-value queries, and its
//! composition with generator Jacobian products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    /// Random directions per datum.
    pub q: usize,
    /// Smoothing radius in input units.
    pub mu: f64,
    pub seed: u64,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self { q: 100, mu: 0.005, seed: 0 }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("need q >= 1 and mu > 0, got q={} mu={}", self.q, self.mu)));
        }
        Ok(())
    }

    /// Loss evaluations charged per datum.
    pub fn queries_per_datum(&self) -> u64 {
        self.q as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub grad: Vec<f64>,
    pub queries_used: u64,
}

/// Draws `q` directions uniformly on the unit sphere in `dim` dimensions.
pub fn sample_sphere_directions(dim: usize, q: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_directions(dim, q, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_directions(dim: usize, q: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(Error::Input("direction dimension must be positive".into()));
    }
    Ok((0..q)
        .map(|_| loop {
            let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-300 {
                u.iter_mut().for_each(|v| *v /= n);
                break u;
            }
        })
        .collect())
}

/// Forward-difference estimate at `x` against fixed directions, given the
/// base loss and the perturbed losses (one per direction).
fn combine(x_len: usize, dirs: &[Vec<f64>], mu: f64, base: f64, perturbed: &[f64]) -> Result<Vec<f64>> {
    if !base.is_finite() {
        return Err(Error::Estimation { direction: None, value: base });
    }
    let mut grad = vec![0.0; x_len];
    let k = x_len as f64 / (mu * dirs.len() as f64);
    for (i, (u, &l)) in dirs.iter().zip(perturbed).enumerate() {
        if !l.is_finite() {
            return Err(Error::Estimation { direction: Some(i), value: l });
        }
        let w = k * (l - base);
        grad.iter_mut().zip(u).for_each(|(g, ui)| *g += w * ui);
    }
    Ok(grad)
}

/// Estimate with caller-supplied unit directions.
pub fn estimate_with_directions(
    mut loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    dirs: &[Vec<f64>],
    mu: f64,
) -> Result<GradEstimate> {
    if dirs.iter().any(|u| u.len() != x.len()) {
        return Err(Error::Input("direction length differs from input length".into()));
    }
    let base = loss_fn(x)?;
    let mut xp = vec![0.0; x.len()];
    let mut perturbed = Vec::with_capacity(dirs.len());
    for u in dirs {
        xp.iter_mut().zip(x.iter().zip(u)).for_each(|(p, (xi, ui))| *p = xi + mu * ui);
        perturbed.push(loss_fn(&xp)?);
    }
    Ok(GradEstimate { grad: combine(x.len(), dirs, mu, base, &perturbed)?, queries_used: dirs.len() as u64 + 1 })
}

/// Randomized gradient estimate of a black-box scalar loss at `x`, with
/// directions seeded from `cfg.seed`.
pub fn estimate_input_grad(loss_fn: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], cfg: &ZoConfig) -> Result<GradEstimate> {
    estimate_input_grad_with(loss_fn, x, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn estimate_input_grad_with(
    loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    cfg: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    cfg.validate()?;
    let dirs = sample_directions(x.len(), cfg.q, rng)?;
    estimate_with_directions(loss_fn, x, &dirs, cfg.mu)
}

/// Per-datum estimates for a whole batch.
///
/// For every row `b` of `x`, `loss_rows(b, probes)` receives a `(q+1)`-row
/// tensor holding the base point followed by its perturbations and must
/// return one loss per probe row. Directions are fresh per datum.
pub fn estimate_batch_grads(
    mut loss_rows: impl FnMut(usize, &Tensor) -> Result<Vec<f64>>,
    x: &Tensor,
    cfg: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, u64)> {
    cfg.validate()?;
    let d = x.row_len();
    let mut grads = Tensor::zeros(x.shape.clone());
    let mut queries = 0;
    for b in 0..x.batch() {
        let dirs = sample_directions(d, cfg.q, rng)?;
        let xb = x.row(b);
        let mut probe = Vec::with_capacity((cfg.q + 1) * d);
        probe.extend_from_slice(xb);
        for u in &dirs {
            probe.extend(xb.iter().zip(u).map(|(xi, ui)| xi + cfg.mu * ui));
        }
        let mut shape = x.shape.clone();
        shape[0] = cfg.q + 1;
        let probes = Tensor { shape, data: probe };
        let losses = loss_rows(b, &probes)?;
        if losses.len() != cfg.q + 1 {
            return Err(Error::Input(format!("expected {} probe losses, got {}", cfg.q + 1, losses.len())));
        }
        queries += cfg.queries_per_datum();
        let g = combine(d, &dirs, cfg.mu, losses[0], &losses[1..])?;
        grads.row_mut(b).copy_from_slice(&g);
    }
    Ok((grads, queries))
}

/// Vector-Jacobian products of a differentiable generator at a fixed forward pass.
pub trait JacobianProducts {
    /// Shape of the generated batch.
    fn output_shape(&self) -> &[usize];
    /// `(vᵀ ∂x̂/∂θ_G` summed over the batch, `vᵀ ∂x̂/∂z` per datum`)`.
    fn vjp(&self, v: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// Chains per-datum input gradients through the generator: the parameter
/// gradient is the batch mean, the latent gradient is per datum.
pub fn estimated_generator_grads(grad_x: &Tensor, jac: &impl JacobianProducts) -> Result<(Vec<f64>, Tensor)> {
    let out = jac.output_shape();
    if grad_x.batch() != out[0] || grad_x.row_len() != out[1..].iter().product::<usize>() {
        return Err(Error::Input(format!(
            "input gradient {:?} does not match generator output {:?}",
            grad_x.shape, out
        )));
    }
    let mut v = grad_x.clone();
    v.shape = out.to_vec();
    let (mut g_theta, g_z) = jac.vjp(&v)?;
    let inv_b = 1.0 / out[0] as f64;
    g_theta.iter_mut().for_each(|g| *g *= inv_b);
    Ok((g_theta, g_z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&d) / norm(b)
    }

    #[test]
    fn one_dimensional_directions_are_signs() {
        for u in sample_sphere_directions(1, 50, 3).unwrap() {
            assert!(u[0] == 1.0 || u[0] == -1.0);
        }
    }

    #[test]
    fn directions_are_unit_and_deterministic() {
        let a = sample_sphere_directions(17, 40, 9).unwrap();
        let b = sample_sphere_directions(17, 40, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|u| (norm(u) - 1.0).abs() < 1e-6));
        assert_ne!(a, sample_sphere_directions(17, 40, 10).unwrap());
    }

    #[test]
    fn zero_dimension_is_an_input_error() {
        assert!(matches!(sample_sphere_directions(0, 3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn sphere_coordinates_average_to_zero() {
        let dirs = sample_sphere_directions(64, 10_000, 1).unwrap();
        let bound = 3.0 * (1.0 / (64.0f64 * 10_000.0).sqrt()) * 3.0;
        for k in 0..64 {
            let m = dirs.iter().map(|u| u[k]).sum::<f64>() / dirs.len() as f64;
            assert!(m.abs() < bound, "coord {k}: {m}");
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let cfg = ZoConfig { q: 20, mu: 0.01, seed: 1 };
        let g = estimate_input_grad(|_| Ok(3.5), &[0.1, 0.2, 0.3], &cfg).unwrap();
        assert!(g.grad.iter().all(|&v| v == 0.0));
        assert_eq!(g.queries_used, 21);
    }

    #[test]
    fn linear_loss_mean_estimate_recovers_slope() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = vec![0.5; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ZoConfig { q: 100, mu: 0.005, seed: 0 };
        let mut mean = vec![0.0; 20];
        for _ in 0..200 {
            let g = estimate_input_grad_with(|v| Ok(v.iter().zip(&a).map(|(p, q)| p * q).sum()), &x, &cfg, &mut rng).unwrap();
            mean.iter_mut().zip(&g.grad).for_each(|(m, v)| *m += v / 200.0);
        }
        assert!(rel_err(&mean, &a) < 0.05, "{}", rel_err(&mean, &a));
    }

    #[test]
    fn quadratic_loss_mean_estimate_recovers_point() {
        let x0: Vec<f64> = (0..10).map(|i| 0.3 + 0.1 * i as f64).collect();
        let cfg = ZoConfig { q: 5000, mu: 1e-3, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mean = vec![0.0; 10];
        for _ in 0..100 {
            let g = estimate_input_grad_with(|v| Ok(0.5 * v.iter().map(|t| t * t).sum::<f64>()), &x0, &cfg, &mut rng).unwrap();
            mean.iter_mut().zip(&g.grad).for_each(|(m, v)| *m += v / 100.0);
        }
        assert!(rel_err(&mean, &x0) < 0.05, "{}", rel_err(&mean, &x0));
    }

    #[test]
    fn every_call_uses_q_plus_one_queries() {
        let calls = Cell::new(0u64);
        let cfg = ZoConfig { q: 37, mu: 0.01, seed: 2 };
        let g = estimate_input_grad(
            |v| {
                calls.set(calls.get() + 1);
                Ok(v[0])
            },
            &[1.0, 2.0],
            &cfg,
        )
        .unwrap();
        assert_eq!(calls.get(), 38);
        assert_eq!(g.queries_used, 38);
    }

    #[test]
    fn doubling_mu_leaves_linear_estimate_unchanged() {
        let a = [0.3, -1.2, 0.8, 2.0];
        let x = [0.1, 0.2, 0.3, 0.4];
        let dirs = sample_sphere_directions(4, 25, 5).unwrap();
        let f = |v: &[f64]| Ok(v.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>());
        let g1 = estimate_with_directions(f, &x, &dirs, 0.01).unwrap();
        let g2 = estimate_with_directions(f, &x, &dirs, 0.02).unwrap();
        for (p, q) in g1.grad.iter().zip(&g2.grad) {
            assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn variance_decays_like_one_over_q() {
        let a: Vec<f64> = (0..20).map(|i| 1.0 + (i as f64).cos()).collect();
        let x = vec![0.0; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pts = Vec::new();
        for q in [10usize, 100, 1000] {
            let cfg = ZoConfig { q, mu: 0.01, seed: 0 };
            let reps = 200;
            let mut var = 0.0;
            for _ in 0..reps {
                let g = estimate_input_grad_with(|v| Ok(v.iter().zip(&a).map(|(p, q)| p * q).sum()), &x, &cfg, &mut rng).unwrap();
                var += g.grad.iter().zip(&a).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / reps as f64;
            }
            pts.push(((q as f64).ln(), var.ln()));
        }
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() < 0.15, "slope {slope}");
    }

    #[test]
    fn non_finite_loss_reports_direction() {
        let cfg = ZoConfig { q: 5, mu: 0.1, seed: 0 };
        let n = Cell::new(0);
        let err = estimate_input_grad(
            |_| {
                n.set(n.get() + 1);
                Ok(if n.get() == 4 { f64::NAN } else { 1.0 })
            },
            &[0.0, 0.0],
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Estimation { direction: Some(2), .. }), "{err:?}");
        let err = estimate_input_grad(|_| Ok(f64::INFINITY), &[0.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Estimation { direction: None, .. }));
    }

    #[test]
    fn batch_estimator_matches_single_datum_estimator() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let cfg = ZoConfig { q: 8, mu: 0.01, seed: 0 };
        let loss = |v: &[f64]| v[0] * v[1] + v[2].sin();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, used) = estimate_batch_grads(|_, p| Ok(p.rows().map(loss).collect()), &x, &cfg, &mut rng).unwrap();
        assert_eq!(used, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for b in 0..2 {
            let single = estimate_input_grad_with(|v| Ok(loss(v)), x.row(b), &cfg, &mut rng).unwrap();
            for (p, q) in g.row(b).iter().zip(&single.grad) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    struct Scaled {
        c: f64,
        shape: Vec<usize>,
    }

    impl JacobianProducts for Scaled {
        fn output_shape(&self) -> &[usize] {
            &self.shape
        }
        fn vjp(&self, v: &Tensor) -> Result<(Vec<f64>, Tensor)> {
            Ok((vec![], v.scaled(self.c)))
        }
    }

    #[test]
    fn identity_and_scalar_generators() {
        let gx = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 4.0]).unwrap();
        let (_, gz) = estimated_generator_grads(&gx, &Scaled { c: 1.0, shape: vec![2, 3] }).unwrap();
        assert_eq!(gz.data, gx.data);
        let (_, gz) = estimated_generator_grads(&gx, &Scaled { c: -2.5, shape: vec![2, 3] }).unwrap();
        assert_eq!(gz.data, gx.scaled(-2.5).data);
        assert!(matches!(
            estimated_generator_grads(&gx, &Scaled { c: 1.0, shape: vec![3, 2] }),
            Err(Error::Input(_))
        ));
    }
}
