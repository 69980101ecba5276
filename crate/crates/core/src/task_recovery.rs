//! Inverting an API into labeled synthetic inputs, and assembling the
//! resulting support/query episodes.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::api_pool::ApiHandle;
use crate::bidf_mkd::{kl_divergence, AdaptedParams, MetaModel};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::generator::{GeneratorState, LatentBatch};
use crate::nn::loss::{kl_to_targets, Reduction, PROB_FLOOR};
use crate::nn::{argmax, Tensor};
use crate::zo_grad::{estimate_batch_grads, estimated_generator_grads, ZoConfig};

/// Inputs with class positions and, once queried, the API's soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub soft: Option<Tensor>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.batch() != labels.len() && !(labels.is_empty() && inputs.data.is_empty()) {
            return Err(Error::Input(format!("{} inputs with {} labels", inputs.batch(), labels.len())));
        }
        Ok(Self { inputs, labels, soft: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Queries the API once for this set's soft labels unless already cached.
    pub fn ensure_soft(&mut self, api: &ApiHandle) -> Result<&Tensor> {
        if self.soft.is_none() {
            self.soft = Some(api.infer(&self.inputs)?);
        }
        Ok(self.soft.as_ref().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredBatch {
    pub set: LabeledSet,
    pub api_id: usize,
    pub queries_used: u64,
    /// Mean objective at the base points for each update step.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Recovered,
    Interpolated,
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpisode {
    pub support: LabeledSet,
    pub query: LabeledSet,
    pub api_id: Option<usize>,
    pub origin: Origin,
    /// Global class behind each label position.
    pub classes: Vec<ClassId>,
}

impl TaskEpisode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub lambda_q: f64,
    pub recover_epochs: usize,
    pub batch_per_set: usize,
    pub gen_lr: f64,
    /// Differentiate the task-model branch exactly instead of folding it
    /// into the zeroth-order scalar.
    pub exact_task_branch: bool,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self { lambda_q: 1.0, recover_epochs: 200, batch_per_set: 30, gen_lr: 0.001, exact_task_branch: true }
    }
}

impl BoundaryConfig {
    pub fn validate(&self, ways: usize) -> Result<()> {
        if self.batch_per_set == 0 || ways == 0 || self.batch_per_set % ways != 0 {
            return Err(Error::Config(format!(
                "batch_per_set {} must be a positive multiple of {ways} ways",
                self.batch_per_set
            )));
        }
        if !(self.lambda_q >= 0.0 && self.gen_lr > 0.0) {
            return Err(Error::Config("lambda_q must be >= 0 and gen_lr > 0".into()));
        }
        Ok(())
    }
}

/// Where input gradients come from during recovery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradSource {
    ZerothOrder(ZoConfig),
    /// Exact gradients through a white-box API.
    Whitebox,
}

pub fn ce_loss(probs: &[f64], y: usize) -> Result<f64> {
    probs
        .get(y)
        .map(|p| -p.max(PROB_FLOOR).ln())
        .ok_or_else(|| Error::Input(format!("label {y} out of range for {} classes", probs.len())))
}

/// True when both distributions put their (lowest-index) maximum on the same class.
pub fn boundary_eta(task_probs: &[f64], api_probs: &[f64]) -> bool {
    argmax(task_probs) == argmax(api_probs)
}

/// Cross-entropy toward `y` minus the weighted disagreement term, active only
/// where the task model and the API agree.
pub fn boundary_loss(y: usize, api_probs: &[f64], task_probs: &[f64], lambda_q: f64) -> Result<f64> {
    let ce = ce_loss(api_probs, y)?;
    if lambda_q == 0.0 || !boundary_eta(task_probs, api_probs) {
        return Ok(ce);
    }
    Ok(ce - lambda_q * kl_divergence(task_probs, api_probs)?)
}

enum Objective<'a> {
    Ce,
    Boundary { meta: &'a MetaModel, theta: &'a [f64], lambda: f64, exact_task_branch: bool },
}

impl Objective<'_> {
    fn task_probs(&self, x: &Tensor) -> Result<Option<Tensor>> {
        match self {
            Objective::Ce => Ok(None),
            Objective::Boundary { meta, theta, .. } => meta.probs(theta, x).map(Some),
        }
    }
}

/// Recovers a support set by minimizing per-datum cross-entropy toward the
/// assigned labels.
pub fn recover_support(
    api: &ApiHandle,
    gen: &mut GeneratorState,
    z: &mut LatentBatch,
    cfg: &BoundaryConfig,
    grads: GradSource,
    rng: &mut impl Rng,
) -> Result<RecoveredBatch> {
    recover(api, gen, z, cfg, grads, Objective::Ce, rng)
}

/// Recovers a query set near the task model's decision boundaries.
#[allow(clippy::too_many_arguments)]
pub fn recover_query(
    api: &ApiHandle,
    meta: &MetaModel,
    task: &AdaptedParams,
    gen: &mut GeneratorState,
    z: &mut LatentBatch,
    cfg: &BoundaryConfig,
    grads: GradSource,
    rng: &mut impl Rng,
) -> Result<RecoveredBatch> {
    let obj = Objective::Boundary {
        meta,
        theta: &task.theta_i,
        lambda: cfg.lambda_q,
        exact_task_branch: cfg.exact_task_branch,
    };
    recover(api, gen, z, cfg, grads, obj, rng)
}

fn recover(
    api: &ApiHandle,
    gen: &mut GeneratorState,
    z: &mut LatentBatch,
    cfg: &BoundaryConfig,
    source: GradSource,
    obj: Objective<'_>,
    rng: &mut impl Rng,
) -> Result<RecoveredBatch> {
    if z.labels.iter().any(|&y| y >= api.ways()) {
        return Err(Error::Input(format!("latent labels exceed the api's {} classes", api.ways())));
    }
    let start = api.query_count();
    let mut history = Vec::with_capacity(cfg.recover_epochs);
    for _ in 0..cfg.recover_epochs {
        let (g_theta, g_z) = {
            let pass = gen.forward(z)?;
            let x = pass.inputs();
            let (gx, mean_loss) = match source {
                GradSource::ZerothOrder(zo) => zo_input_grads(api, x, &z.labels, &obj, &zo, rng)?,
                GradSource::Whitebox => whitebox_input_grads(api, x, &z.labels, &obj)?,
            };
            history.push(mean_loss);
            estimated_generator_grads(&gx, &pass)?
        };
        gen.apply_estimated_grads(z, (&g_theta, &g_z), cfg.gen_lr)?;
    }
    let inputs = gen.forward(z)?.inputs().clone();
    Ok(RecoveredBatch {
        set: LabeledSet::new(inputs, z.labels.clone())?,
        api_id: api.api_id(),
        queries_used: api.query_count() - start,
        loss_history: history,
    })
}

fn zo_input_grads(
    api: &ApiHandle,
    x: &Tensor,
    labels: &[usize],
    obj: &Objective<'_>,
    zo: &ZoConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, f64)> {
    let b = x.batch();
    let mut base_api: Vec<Vec<f64>> = vec![Vec::new(); b];
    let mut base_loss = vec![0.0; b];
    let task_base = match obj {
        Objective::Boundary { exact_task_branch: true, .. } => obj.task_probs(x)?,
        _ => None,
    };
    let (mut gx, _) = estimate_batch_grads(
        |i, probes| {
            let a = api.infer(probes)?;
            let y = labels[i];
            base_api[i] = a.row(0).to_vec();
            let losses: Vec<f64> = match obj {
                Objective::Ce => a.rows().map(|r| ce_loss(r, y)).collect::<Result<_>>()?,
                Objective::Boundary { lambda, exact_task_branch: false, .. } => {
                    // The agreement indicator is piecewise constant; it is read
                    // at the base point so probes do not straddle its jumps.
                    let f = obj.task_probs(probes)?.expect("boundary objective has a task model");
                    let on = *lambda != 0.0 && boundary_eta(f.row(0), a.row(0));
                    a.rows()
                        .zip(f.rows())
                        .map(|(ar, fr)| {
                            let ce = ce_loss(ar, y)?;
                            Ok(if on { ce - lambda * kl_divergence(fr, ar)? } else { ce })
                        })
                        .collect::<Result<_>>()?
                }
                Objective::Boundary { lambda, exact_task_branch: true, .. } => {
                    let f0 = task_base.as_ref().unwrap().row(i);
                    let on = *lambda != 0.0 && boundary_eta(f0, a.row(0));
                    a.rows()
                        .map(|ar| {
                            let ce = ce_loss(ar, y)?;
                            Ok(if on { ce - lambda * kl_divergence(f0, ar)? } else { ce })
                        })
                        .collect::<Result<_>>()?
                }
            };
            base_loss[i] = losses[0];
            Ok(losses)
        },
        x,
        zo,
        rng,
    )?;
    if let (Objective::Boundary { meta, theta, lambda, .. }, Some(f0)) = (obj, &task_base) {
        let active: Vec<f64> =
            (0..b).map(|i| if boundary_eta(f0.row(i), &base_api[i]) { -lambda } else { 0.0 }).collect();
        let a0 = Tensor::from_rows(&[api.ways()], &base_api)?;
        add_task_branch(&mut gx, meta, theta, x, &a0, &active)?;
    }
    Ok((gx, base_loss.iter().sum::<f64>() / b as f64))
}

/// Adds `w_i · ∂ KL(F(x_i) ‖ a_i) / ∂x_i` to each row of `gx`.
fn add_task_branch(gx: &mut Tensor, meta: &MetaModel, theta: &[f64], x: &Tensor, a: &Tensor, w: &[f64]) -> Result<()> {
    if w.iter().all(|&v| v == 0.0) {
        return Ok(());
    }
    let trace = meta.forward(theta, x)?;
    let (_, mut gl) = kl_to_targets(trace.output(), a, Reduction::Sum)?;
    for (i, &wi) in w.iter().enumerate() {
        gl.row_mut(i).iter_mut().for_each(|v| *v *= wi);
    }
    let g = meta.network().backward(theta, &trace, gl, true).input.expect("input gradient requested");
    gx.data.iter_mut().zip(&g.data).for_each(|(d, s)| *d += s);
    Ok(())
}

fn whitebox_input_grads(api: &ApiHandle, x: &Tensor, labels: &[usize], obj: &Objective<'_>) -> Result<(Tensor, f64)> {
    let (a, token) = api.infer_whitebox(x)?;
    let f = obj.task_probs(x)?;
    let mut grad_a = Tensor::zeros(a.shape.clone());
    let mut weights = vec![0.0; x.batch()];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let ar = a.row(i);
        let g = grad_a.row_mut(i);
        if ar[y] > PROB_FLOOR {
            g[y] = -1.0 / ar[y];
        }
        total += ce_loss(ar, y)?;
        if let (Objective::Boundary { lambda, .. }, Some(f)) = (obj, &f) {
            let fr = f.row(i);
            if *lambda != 0.0 && boundary_eta(fr, ar) {
                weights[i] = -lambda;
                total -= lambda * kl_divergence(fr, ar)?;
                for k in 0..ar.len() {
                    if ar[k] > PROB_FLOOR {
                        g[k] += lambda * fr[k].max(PROB_FLOOR) / ar[k];
                    }
                }
            }
        }
    }
    let mut gx = token.input_grad(&grad_a)?;
    gx.shape = x.shape.clone();
    if let Objective::Boundary { meta, theta, .. } = obj {
        add_task_branch(&mut gx, meta, theta, x, &a, &weights)?;
    }
    Ok((gx, total / x.batch() as f64))
}

/// Fraction of inputs the API assigns to their target label. Consumes one
/// query per input.
pub fn label_fidelity(api: &ApiHandle, set: &LabeledSet) -> Result<f64> {
    let p = api.infer(&set.inputs)?;
    let hits = p.rows().zip(&set.labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(hits as f64 / set.len().max(1) as f64)
}

/// Pairs a recovered support and query set into an episode.
pub fn split_episode(
    support: RecoveredBatch,
    query: RecoveredBatch,
    classes: &[ClassId],
    allow_empty: bool,
) -> Result<TaskEpisode> {
    if support.api_id != query.api_id {
        return Err(Error::Input(format!(
            "support from api {} and query from api {}",
            support.api_id, query.api_id
        )));
    }
    if !allow_empty && (support.set.is_empty() || query.set.is_empty()) {
        return Err(Error::Input("episode has an empty support or query set".into()));
    }
    for s in [&support.set, &query.set] {
        if s.labels.iter().any(|&y| y >= classes.len()) {
            return Err(Error::Input("episode label outside its label space".into()));
        }
        if !s.is_empty() && s.inputs.sample_shape() != support.set.inputs.sample_shape() {
            return Err(Error::Input("support and query inputs differ in shape".into()));
        }
    }
    Ok(TaskEpisode {
        support: support.set,
        query: query.set,
        api_id: Some(support.api_id),
        origin: Origin::Recovered,
        classes: classes.to_vec(),
    })
}

const EPISODE_MAGIC: &[u8; 4] = b"BBEP";
const EPISODE_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    put_u64(w, t.shape.len() as u64)?;
    for &d in &t.shape {
        put_u64(w, d as u64)?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = get_u64(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| get_u64(r).map(|v| v as usize)).collect::<std::io::Result<_>>()?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(get_u64(r)?));
    }
    Tensor::new(shape, data)
}

fn put_set(w: &mut impl Write, s: &LabeledSet) -> std::io::Result<()> {
    put_tensor(w, &s.inputs)?;
    put_u64(w, s.labels.len() as u64)?;
    for &y in &s.labels {
        put_u64(w, y as u64)?;
    }
    match &s.soft {
        Some(t) => {
            w.write_all(&[1])?;
            put_tensor(w, t)
        }
        None => w.write_all(&[0]),
    }
}

fn get_set(r: &mut impl Read) -> Result<LabeledSet> {
    let inputs = get_tensor(r)?;
    let n = get_u64(r)? as usize;
    let labels = (0..n).map(|_| get_u64(r).map(|v| v as usize)).collect::<std::io::Result<Vec<_>>>()?;
    let mut flag = [0u8];
    r.read_exact(&mut flag)?;
    let mut set = LabeledSet::new(inputs, labels)?;
    if flag[0] == 1 {
        set.soft = Some(get_tensor(r)?);
    }
    Ok(set)
}

/// Writes episodes to a little-endian binary archive.
pub fn write_episodes(path: &Path, episodes: &[TaskEpisode]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EPISODE_MAGIC)?;
    w.write_all(&EPISODE_VERSION.to_le_bytes())?;
    put_u64(&mut w, episodes.len() as u64)?;
    for e in episodes {
        let origin = match e.origin {
            Origin::Recovered => 0u8,
            Origin::Interpolated => 1,
            Origin::Real => 2,
        };
        w.write_all(&[origin])?;
        put_u64(&mut w, e.api_id.map_or(u64::MAX, |v| v as u64))?;
        put_u64(&mut w, e.classes.len() as u64)?;
        for c in &e.classes {
            w.write_all(&c.0.to_le_bytes())?;
        }
        put_set(&mut w, &e.support)?;
        put_set(&mut w, &e.query)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<TaskEpisode>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != EPISODE_MAGIC || u32::from_le_bytes(head[4..].try_into().unwrap()) != EPISODE_VERSION {
        return Err(Error::Format(format!("{} is not an episode archive", path.display())));
    }
    let n = get_u64(&mut r)? as usize;
    (0..n)
        .map(|_| {
            let mut o = [0u8];
            r.read_exact(&mut o)?;
            let origin = match o[0] {
                0 => Origin::Recovered,
                1 => Origin::Interpolated,
                2 => Origin::Real,
                v => return Err(Error::Format(format!("unknown episode origin {v}"))),
            };
            let api = get_u64(&mut r)?;
            let k = get_u64(&mut r)? as usize;
            let mut classes = Vec::with_capacity(k);
            for _ in 0..k {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                classes.push(ClassId(u32::from_le_bytes(b)));
            }
            Ok(TaskEpisode {
                support: get_set(&mut r)?,
                query: get_set(&mut r)?,
                api_id: (api != u64::MAX).then_some(api as usize),
                origin,
                classes,
            })
        })
        .collect()
}
