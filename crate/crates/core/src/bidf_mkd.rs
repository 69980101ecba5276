//! Bi-level meta knowledge distillation: the inner level clones an API into a
//! task-specific model, the outer level updates the shared initialization
//! through that adaptation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api_pool::{ApiHandle, ArchTag};
use crate::error::{Error, Result};
use crate::nn::loss::{ce_to_labels, kl_to_targets, softmax, Reduction, PROB_FLOOR};
use crate::nn::{argmax, Adam, BnMode, Dual, Network, Real, Tensor, Trace};
use crate::task_recovery::{RecoveredBatch, TaskEpisode};

/// The meta-learned initialization and its optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    arch: ArchTag,
    net: Network,
    pub theta: Vec<f64>,
    opt: Adam,
}

impl MetaModel {
    /// Fresh model with an `ways`-wide head. Meta architectures carry no batch
    /// norm so that every prediction depends on its own input only.
    pub fn new(arch: &ArchTag, input_shape: &[usize], ways: usize, seed: u64) -> Result<Self> {
        let net = arch.network(input_shape, ways, false)?;
        let theta = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let opt = Adam::new(theta.len());
        Ok(Self { arch: arch.clone(), net, theta, opt })
    }

    pub fn arch(&self) -> &ArchTag {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn ways(&self) -> usize {
        self.net.output_len()
    }

    pub fn forward<T: Real>(&self, theta: &[T], x: &Tensor<T>) -> Result<Trace<T>> {
        self.net.forward(theta, &[], x, BnMode::Running)
    }

    pub fn probs(&self, theta: &[f64], x: &Tensor) -> Result<Tensor> {
        Ok(softmax(self.forward(theta, x)?.output()))
    }

    /// Copy of the parameters with a fresh optimizer.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::Input("parameter vector does not fit the architecture".into()));
        }
        Ok(Self { arch: self.arch.clone(), net: self.net.clone(), opt: Adam::new(theta.len()), theta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Api(usize),
    Interpolated(u64),
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedParams {
    pub theta_i: Vec<f64>,
    pub source: TaskSource,
    pub steps: usize,
    /// Inner objective before each step and after the last one.
    pub inner_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerOuterConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub second_order: bool,
    /// Sum meta-gradients over a batch of tasks before one update, instead
    /// of updating after each task.
    pub accumulate_batch: bool,
}

impl Default for InnerOuterConfig {
    fn default() -> Self {
        Self { inner_steps: 5, inner_lr: 0.01, outer_lr: 0.001, second_order: true, accumulate_batch: false }
    }
}

impl InnerOuterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("inner_lr and outer_lr must be positive".into()));
        }
        Ok(())
    }
}

/// `Σ p log(p/q)` with both arguments floored.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(PROB_FLOOR);
            a * (a.ln() - b.max(PROB_FLOOR).ln())
        })
        .sum::<f64>()
        .max(0.0))
}

/// Supervision for one level of the bi-level problem.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// KL from the model's prediction to fixed soft labels.
    Soft(&'a Tensor, Reduction),
    /// Cross-entropy against hard labels.
    Hard(&'a [usize], Reduction),
}

/// Loss and parameter gradient of `target` at `theta`.
pub fn loss_and_grad<T: Real>(net: &Network, theta: &[T], x: &Tensor<T>, target: Target<'_>) -> Result<(T, Vec<T>)> {
    let trace = net.forward(theta, &[], x, BnMode::Running)?;
    let (loss, gl) = match target {
        Target::Soft(t, r) => kl_to_targets(trace.output(), t, r)?,
        Target::Hard(y, r) => ce_to_labels(trace.output(), y, r)?,
    };
    Ok((loss, net.backward(theta, &trace, gl, false).params))
}

/// Plain gradient descent from `theta`; returns every iterate and the loss at each.
pub fn adapt(net: &Network, theta: &[f64], x: &Tensor, target: Target<'_>, steps: usize, lr: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut iterates = vec![theta.to_vec()];
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let cur = iterates.last().unwrap();
        let (l, g) = loss_and_grad(net, cur, x, target)?;
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("inner objective diverged at loss {l}")));
        }
        losses.push(l);
        let next: Vec<f64> = cur.iter().zip(&g).map(|(p, gi)| p - lr * gi).collect();
        iterates.push(next);
    }
    let last = iterates.last().unwrap();
    losses.push(loss_and_grad(net, last, x, target)?.0);
    Ok((iterates, losses))
}

fn hvp(net: &Network, theta: &[f64], v: &[f64], x: &Tensor, target: Target<'_>) -> Result<Vec<f64>> {
    let dual: Vec<Dual> = theta.iter().zip(v).map(|(&re, &eps)| Dual { re, eps }).collect();
    let (_, g) = loss_and_grad(net, &dual, &x.to_dual(), target)?;
    Ok(g.into_iter().map(|d| d.eps).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilevelOutcome {
    /// Gradient of the outer objective with respect to the initialization.
    pub grad: Vec<f64>,
    pub outer_loss: f64,
    pub theta_i: Vec<f64>,
    pub inner_loss: Vec<f64>,
}

/// Outer gradient of `outer(θ_K)` where `θ_K` is `steps` descent steps of
/// `inner` from `theta`. Exact second order when requested.
pub fn bilevel_grad(
    net: &Network,
    theta: &[f64],
    inner: (&Tensor, Target<'_>),
    outer: (&Tensor, Target<'_>),
    cfg: &InnerOuterConfig,
) -> Result<BilevelOutcome> {
    let (iterates, inner_loss) = adapt(net, theta, inner.0, inner.1, cfg.inner_steps, cfg.inner_lr)?;
    let theta_k = iterates.last().unwrap();
    let (outer_loss, mut g) = loss_and_grad(net, theta_k, outer.0, outer.1)?;
    if cfg.second_order {
        for th in iterates[..cfg.inner_steps].iter().rev() {
            let hv = hvp(net, th, &g, inner.0, inner.1)?;
            g.iter_mut().zip(&hv).for_each(|(gi, h)| *gi -= cfg.inner_lr * h);
        }
    }
    if !outer_loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("outer objective gave loss {outer_loss}")));
    }
    Ok(BilevelOutcome { grad: g, outer_loss, theta_i: theta_k.clone(), inner_loss })
}

fn check_head(meta: &MetaModel, api: &ApiHandle) -> Result<()> {
    if meta.ways() != api.ways() {
        return Err(Error::Input(format!("meta head has {} ways, api {} has {}", meta.ways(), api.api_id(), api.ways())));
    }
    Ok(())
}

/// Clones the API into a task model on its recovered support set.
pub fn inner_distill(meta: &MetaModel, api: &ApiHandle, support: &mut RecoveredBatch, cfg: &InnerOuterConfig) -> Result<AdaptedParams> {
    if support.api_id != api.api_id() {
        return Err(Error::Input(format!("support recovered from api {}, not {}", support.api_id, api.api_id())));
    }
    check_head(meta, api)?;
    let soft = support.set.ensure_soft(api)?.clone();
    if soft.shape != [support.set.len(), meta.ways()] {
        return Err(Error::Input(format!("cached soft labels {:?} do not fit the support set", soft.shape)));
    }
    let (mut iterates, inner_loss) = adapt(
        &meta.net,
        &meta.theta,
        &support.set.inputs,
        Target::Soft(&soft, Reduction::Sum),
        cfg.inner_steps,
        cfg.inner_lr,
    )?;
    Ok(AdaptedParams {
        theta_i: iterates.pop().expect("adapt keeps the start point"),
        source: TaskSource::Api(api.api_id()),
        steps: cfg.inner_steps,
        inner_loss,
    })
}

fn episode_targets(api: &ApiHandle, episode: &mut TaskEpisode) -> Result<(Tensor, Tensor)> {
    if episode.api_id != Some(api.api_id()) {
        return Err(Error::Input(format!("episode does not belong to api {}", api.api_id())));
    }
    let s = episode.support.ensure_soft(api)?.clone();
    let q = episode.query.ensure_soft(api)?.clone();
    Ok((s, q))
}

/// Meta-gradient of the query KL through inner distillation on the support set.
pub fn outer_distill_grad(meta: &MetaModel, api: &ApiHandle, episode: &mut TaskEpisode, cfg: &InnerOuterConfig) -> Result<BilevelOutcome> {
    check_head(meta, api)?;
    let (s, q) = episode_targets(api, episode)?;
    bilevel_grad(
        &meta.net,
        &meta.theta,
        (&episode.support.inputs, Target::Soft(&s, Reduction::Sum)),
        (&episode.query.inputs, Target::Soft(&q, Reduction::Sum)),
        cfg,
    )
}

/// Adaptive-moment step on the meta parameters.
pub fn meta_update(meta: &mut MetaModel, grad: &[f64], outer_lr: f64) -> Result<()> {
    meta.opt.step(&mut meta.theta, grad, outer_lr)
}

/// Mean query KL after inner adaptation and the rate at which the adapted
/// model's argmax disagrees with the API on the query set.
pub fn knowledge_vanish_score(meta: &MetaModel, api: &ApiHandle, episode: &mut TaskEpisode, cfg: &InnerOuterConfig) -> Result<(f64, f64)> {
    check_head(meta, api)?;
    let (s, q) = episode_targets(api, episode)?;
    let (iterates, _) = adapt(&meta.net, &meta.theta, &episode.support.inputs, Target::Soft(&s, Reduction::Sum), cfg.inner_steps, cfg.inner_lr)?;
    let f = meta.probs(iterates.last().unwrap(), &episode.query.inputs)?;
    let n = episode.query.len().max(1) as f64;
    let mut kl = 0.0;
    let mut disagree = 0usize;
    for (fr, ar) in f.rows().zip(q.rows()) {
        kl += kl_divergence(fr, ar)?;
        disagree += usize::from(argmax(fr) != argmax(ar));
    }
    Ok((kl / n, disagree as f64 / n))
}
