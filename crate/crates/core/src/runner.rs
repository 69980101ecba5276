//! Meta-training loop, baselines, ablation sweeps and report export.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::api_pool::{build_pool, load_pool, ApiHandle};
use crate::bidf_mkd::{adapt, inner_distill, kl_divergence, meta_update, outer_distill_grad, MetaModel, Target};
use crate::config::{Components, GradMode, RunConfig};
use crate::data::{build_sources, derive_seed, DataSource, SourcePair};
use crate::error::{Error, Result};
use crate::generator::{balanced_labels, init_generator, GeneratorConfig, LatentBatch};
use crate::harness::{evaluate, evaluate_best_api, test_episodes, EvalReport};
use crate::nn::loss::Reduction;
use crate::nn::{argmax, Tensor};
use crate::replay::{replay_grad, MemoryBank};
use crate::task_recovery::{recover_query, recover_support, split_episode, GradSource, LabeledSet, RecoveredBatch, TaskEpisode};
use crate::zo_grad::ZoConfig;

/// Sources and the API pool a run draws from.
pub struct Experiment {
    pub sources: Vec<SourcePair>,
    pub pool: Vec<ApiHandle>,
}

impl Experiment {
    /// Builds the sources and pre-trains the pool described by `cfg`.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let sources = build_sources(&cfg.sources)?;
        let train: Vec<DataSource> = sources.iter().map(|p| p.train.clone()).collect();
        let pool = build_pool(&cfg.scenario, &train, &cfg.pretrain, cfg.seed)?;
        Ok(Self { sources, pool })
    }

    /// Loads the pool saved under [`pool_dir`] when present, otherwise builds it.
    pub fn load_or_build(cfg: &RunConfig) -> Result<Self> {
        let dir = pool_dir(cfg);
        if !dir.join("manifest.json").exists() {
            return Self::build(cfg);
        }
        cfg.validate()?;
        let pool = load_pool(&dir, cfg.pretrain.whitebox)?;
        log::info!("loaded {} apis from {}", pool.len(), dir.display());
        Self::from_parts(build_sources(&cfg.sources)?, pool)
    }

    pub fn from_parts(sources: Vec<SourcePair>, pool: Vec<ApiHandle>) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("empty api pool".into()));
        }
        Ok(Self { sources, pool })
    }

    /// The first `cfg.scenario.num_apis` APIs.
    pub fn apis(&self, cfg: &RunConfig) -> Result<&[ApiHandle]> {
        let n = cfg.scenario.num_apis;
        if n == 0 || n > self.pool.len() {
            return Err(Error::Config(format!("{n} apis requested from a pool of {}", self.pool.len())));
        }
        Ok(&self.pool[..n])
    }

    pub fn eval_source(&self, cfg: &RunConfig) -> Result<&DataSource> {
        self.sources
            .iter()
            .find(|p| p.test.source_id == cfg.eval_source)
            .map(|p| &p.test)
            .ok_or_else(|| Error::Config(format!("eval source {} not loaded", cfg.eval_source)))
    }

    /// Evaluation episodes; identical for every method under one seed.
    pub fn test_episodes(&self, cfg: &RunConfig) -> Result<Vec<TaskEpisode>> {
        test_episodes(self.eval_source(cfg)?, &cfg.eval, derive_seed(&[cfg.seed, 0x7E57]))
    }

    fn input_shape(&self) -> &[usize] {
        self.pool[0].input_shape()
    }

    fn generator_config(&self, cfg: &RunConfig) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: cfg.generator.latent_dim,
            out_shape: self.input_shape().to_vec(),
            nf: cfg.generator.nf,
            mode: cfg.generator.mode,
        }
    }

    fn initial_meta(&self, cfg: &RunConfig) -> Result<MetaModel> {
        MetaModel::new(&cfg.meta_arch, self.input_shape(), cfg.scenario.ways, derive_seed(&[cfg.seed, 0x3E7A]))
    }
}

fn queries_of(apis: &[ApiHandle]) -> u64 {
    apis.iter().map(ApiHandle::query_count).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Bidf,
    Replay,
    Failed,
}

/// Per-slot record; fields not produced by the slot kind are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub slot: u64,
    pub kind: Option<SlotKind>,
    pub api_id: Option<usize>,
    pub queries: u64,
    pub support_loss: Option<f64>,
    pub query_loss: Option<f64>,
    pub inner_kl_first: Option<f64>,
    pub inner_kl_last: Option<f64>,
    pub outer_loss: Option<f64>,
    pub disagreement: Option<f64>,
    pub replay_loss: Option<f64>,
    pub error: Option<String>,
}

const CSV_HEADER: &str =
    "slot,kind,api_id,queries,support_loss,query_loss,inner_kl_first,inner_kl_last,outer_loss,disagreement,replay_loss";

impl SlotMetrics {
    fn csv_row(&self) -> String {
        fn opt<T: fmt::Display>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let kind = match self.kind {
            Some(SlotKind::Bidf) => "bidf",
            Some(SlotKind::Replay) => "replay",
            Some(SlotKind::Failed) | None => "failed",
        };
        [
            self.slot.to_string(),
            kind.into(),
            opt(self.api_id),
            self.queries.to_string(),
            opt(self.support_loss),
            opt(self.query_loss),
            opt(self.inner_kl_first),
            opt(self.inner_kl_last),
            opt(self.outer_loss),
            opt(self.disagreement),
            opt(self.replay_loss),
        ]
        .join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    config_hash: String,
    slot: u64,
    meta: MetaModel,
    pending: Option<(Vec<f64>, usize)>,
    queries: u64,
    failures: usize,
    metrics: Vec<SlotMetrics>,
}

/// Everything needed to continue a run from a slot boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config_hash: String,
    /// Next slot to execute.
    pub slot: u64,
    pub meta: MetaModel,
    pub bank: MemoryBank,
    /// Summed gradients and their count when updates are batched.
    pub pending: Option<(Vec<f64>, usize)>,
    pub queries: u64,
    pub failures: usize,
    pub metrics: Vec<SlotMetrics>,
}

impl RunState {
    pub fn new(exp: &Experiment, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash(),
            slot: 0,
            meta: exp.initial_meta(cfg)?,
            bank: MemoryBank::new(cfg.replay.capacity)?,
            pending: None,
            queries: 0,
            failures: 0,
            metrics: Vec::new(),
        })
    }

    pub fn iteration(&self, cfg: &RunConfig) -> u64 {
        self.slot / cfg.batch_size as u64
    }

    pub fn count(&self, kind: SlotKind) -> usize {
        self.metrics.iter().filter(|m| m.kind == Some(kind)).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let snap = Snapshot {
            config_hash: self.config_hash.clone(),
            slot: self.slot,
            meta: self.meta.clone(),
            pending: self.pending.clone(),
            queries: self.queries,
            failures: self.failures,
            metrics: self.metrics.clone(),
        };
        let tmp = dir.join("state.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&snap)?)?;
        self.bank.save(&dir.join("bank.bin"))?;
        std::fs::rename(tmp, dir.join("state.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let snap: Snapshot = serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)?;
        if snap.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint in {} was written by config {}, not {}",
                dir.display(),
                snap.config_hash,
                cfg.hash()
            )));
        }
        Ok(Self {
            config_hash: snap.config_hash,
            slot: snap.slot,
            meta: snap.meta,
            bank: MemoryBank::load(&dir.join("bank.bin"), cfg.replay.capacity)?,
            pending: snap.pending,
            queries: snap.queries,
            failures: snap.failures,
            metrics: snap.metrics,
        })
    }
}

/// Pool directory, keyed by the fields that determine the pool's weights.
pub fn pool_dir(cfg: &RunConfig) -> PathBuf {
    let mut pretrain = cfg.pretrain.clone();
    pretrain.whitebox = false;
    let key = serde_json::json!([cfg.seed, cfg.sources, cfg.scenario, pretrain]).to_string();
    let digest = hex::encode(sha2::Sha256::digest(key.as_bytes()));
    cfg.output_dir.join("pools").join(&digest[..16])
}

/// Per-run output directory, keyed by config hash.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.hash()[..16])
}

pub fn total_slots(cfg: &RunConfig) -> u64 {
    (cfg.max_iterations * cfg.batch_size) as u64
}

fn grad_source(cfg: &RunConfig, rng: &mut impl Rng) -> GradSource {
    match cfg.mode {
        GradMode::Zo => GradSource::ZerothOrder(ZoConfig { seed: rng.random(), ..cfg.zo }),
        GradMode::Fo => GradSource::Whitebox,
    }
}

/// Recovers one set with a freshly initialized generator and latent batch.
fn recover_fresh(
    exp: &Experiment,
    cfg: &RunConfig,
    api: &ApiHandle,
    boundary: Option<(&MetaModel, &crate::bidf_mkd::AdaptedParams)>,
    seed: u64,
) -> Result<RecoveredBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = init_generator(&exp.generator_config(cfg), rng.random())?;
    let mut z = LatentBatch::sample(cfg.generator.latent_dim, balanced_labels(cfg.recovery.batch_per_set, api.ways()), &mut rng);
    let grads = grad_source(cfg, &mut rng);
    match boundary {
        Some((meta, task)) => recover_query(api, meta, task, &mut gen, &mut z, &cfg.recovery, grads, &mut rng),
        None => recover_support(api, &mut gen, &mut z, &cfg.recovery, grads, &mut rng),
    }
}

fn apply_grad(state: &mut RunState, cfg: &RunConfig, grad: Vec<f64>) -> Result<()> {
    if !cfg.bilevel.accumulate_batch {
        return meta_update(&mut state.meta, &grad, cfg.bilevel.outer_lr);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("meta-gradient".into()));
    }
    match &mut state.pending {
        Some((sum, n)) => {
            sum.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
            *n += 1;
        }
        None => state.pending = Some((grad, 1)),
    }
    Ok(())
}

fn flush_pending(state: &mut RunState, cfg: &RunConfig) -> Result<()> {
    if let Some((sum, n)) = state.pending.take() {
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        meta_update(&mut state.meta, &mean, cfg.bilevel.outer_lr)?;
    }
    Ok(())
}

fn last(v: &[f64]) -> Option<f64> {
    v.last().copied()
}

fn disagreement(meta: &MetaModel, theta: &[f64], set: &LabeledSet) -> Result<Option<f64>> {
    let Some(soft) = &set.soft else { return Ok(None) };
    let f = meta.probs(theta, &set.inputs)?;
    let n = f.rows().zip(soft.rows()).filter(|(a, b)| argmax(a) != argmax(b)).count();
    Ok(Some(n as f64 / set.len().max(1) as f64))
}

fn bidf_slot(exp: &Experiment, cfg: &RunConfig, apis: &[ApiHandle], state: &mut RunState, rng: &mut ChaCha8Rng, m: &mut SlotMetrics) -> Result<()> {
    let Components { bidf, boundary } = cfg.components;
    let api = &apis[rng.random_range(0..apis.len())];
    m.api_id = Some(api.api_id());
    let (s_seed, q_seed) = (rng.random(), rng.random());
    let mut support = recover_fresh(exp, cfg, api, None, s_seed)?;
    m.support_loss = last(&support.loss_history);
    let task = if bidf || boundary { Some(inner_distill(&state.meta, api, &mut support, &cfg.bilevel)?) } else { None };
    if let Some(t) = &task {
        m.inner_kl_first = t.inner_loss.first().copied();
        m.inner_kl_last = last(&t.inner_loss);
    }
    let query = match (&task, boundary) {
        (Some(t), true) => recover_fresh(exp, cfg, api, Some((&state.meta, t)), q_seed)?,
        _ => recover_fresh(exp, cfg, api, None, q_seed)?,
    };
    m.query_loss = last(&query.loss_history);
    let mut episode = split_episode(support, query, api.label_space(), false)?;
    if bidf {
        let out = outer_distill_grad(&state.meta, api, &mut episode, &cfg.bilevel)?;
        m.outer_loss = Some(out.outer_loss);
        m.disagreement = disagreement(&state.meta, &out.theta_i, &episode.query)?;
        apply_grad(state, cfg, out.grad)?;
    }
    state.bank.push(episode);
    Ok(())
}

fn run_slot(exp: &Experiment, cfg: &RunConfig, apis: &[ApiHandle], state: &mut RunState, m: &mut SlotMetrics) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5107, state.slot]));
    let want_replay = rng.random::<f64>() < cfg.replay.p_replay;
    let task_seed: u64 = rng.random();
    if want_replay && !state.bank.is_empty() {
        let r = &cfg.replay;
        match state.bank.sample_interpolated(cfg.scenario.ways, r.shots, r.query_shots, task_seed) {
            Ok(task) => {
                m.kind = Some(SlotKind::Replay);
                let out = replay_grad(&state.meta, &task, &cfg.bilevel)?;
                m.replay_loss = Some(out.outer_loss);
                return apply_grad(state, cfg, out.grad);
            }
            Err(Error::Sampling(msg)) => log::debug!("slot {}: replay unavailable ({msg}); recovering instead", state.slot),
            Err(e) => return Err(e),
        }
    }
    m.kind = Some(SlotKind::Bidf);
    bidf_slot(exp, cfg, apis, state, &mut rng, m)
}

/// Executes slots until `until` (exclusive) or the configured total,
/// checkpointing at the configured iteration cadence.
pub fn train_until(exp: &Experiment, cfg: &RunConfig, state: &mut RunState, until: u64) -> Result<()> {
    cfg.validate()?;
    let apis = exp.apis(cfg)?;
    if cfg.mode == GradMode::Fo && !apis.iter().all(ApiHandle::whitebox_enabled) {
        return Err(Error::Config("mode = fo needs a pool built with whitebox access".into()));
    }
    let end = until.min(total_slots(cfg));
    let bs = cfg.batch_size as u64;
    while state.slot < end {
        let before = queries_of(apis);
        let mut m = SlotMetrics { slot: state.slot, ..Default::default() };
        let saved_meta = state.meta.clone();
        let saved_pending = state.pending.clone();
        if let Err(e) = run_slot(exp, cfg, apis, state, &mut m) {
            if matches!(e, Error::Config(_) | Error::Io(_) | Error::Permission(_)) {
                return Err(e);
            }
            log::warn!("slot {} failed: {e}", state.slot);
            state.meta = saved_meta;
            state.pending = saved_pending;
            state.failures += 1;
            m.kind = Some(SlotKind::Failed);
            m.error = Some(e.to_string());
        }
        m.queries = queries_of(apis) - before;
        state.queries += m.queries;
        if let (Some(SlotKind::Bidf), Some(l)) = (m.kind, m.outer_loss) {
            log::debug!("slot {} api {:?}: outer KL {l:.4}", state.slot, m.api_id);
        }
        state.metrics.push(m);
        state.slot += 1;
        if state.slot % bs == 0 {
            flush_pending(state, cfg)?;
            let it = state.slot / bs;
            if it % 25 == 0 {
                log::info!("iteration {it}/{}: {} queries so far", cfg.max_iterations, state.queries);
            }
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every as u64 == 0 {
                state.save(&run_dir(cfg).join("checkpoint"))?;
            }
        }
        if state.failures > cfg.max_slot_failures {
            return Err(Error::Aborted(format!(
                "{} failed slots exceed the limit of {}",
                state.failures, cfg.max_slot_failures
            )));
        }
    }
    Ok(())
}

/// Runs the full meta-training loop, optionally continuing from the
/// checkpoint in the run directory.
pub fn run_meta_training(exp: &Experiment, cfg: &RunConfig, resume: bool) -> Result<RunState> {
    let ckpt = run_dir(cfg).join("checkpoint");
    let mut state = if resume && ckpt.join("state.json").exists() {
        let s = RunState::load(&ckpt, cfg)?;
        log::info!("resuming at slot {}", s.slot);
        s
    } else {
        RunState::new(exp, cfg)?
    };
    train_until(exp, cfg, &mut state, u64::MAX)?;
    Ok(state)
}

/// Exact query count of a run: every recovered set costs `q + 1` probes per
/// datum per epoch (one per datum in first-order mode), plus one labelling
/// query per datum for each set whose soft labels are needed.
pub fn predicted_queries(cfg: &RunConfig, bidf_slots: usize) -> u64 {
    let b = cfg.recovery.batch_per_set as u64;
    let per_probe = match cfg.mode {
        GradMode::Zo => cfg.zo.queries_per_datum(),
        GradMode::Fo => 1,
    };
    let recovery = 2 * cfg.recovery.recover_epochs as u64 * b * per_probe;
    let labels = match (cfg.components.bidf, cfg.components.boundary) {
        (true, _) => 2 * b,
        (false, true) => b,
        (false, false) => 0,
    };
    bidf_slots as u64 * (recovery + labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    BestApi,
    SingleDfkd,
    DistillAvg,
    WhiteboxFo,
    BidfMkd,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Random, Method::BestApi, Method::SingleDfkd, Method::DistillAvg, Method::WhiteboxFo, Method::BidfMkd];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::BestApi => "best_api",
            Method::SingleDfkd => "single_dfkd",
            Method::DistillAvg => "distill_avg",
            Method::WhiteboxFo => "whitebox_fo",
            Method::BidfMkd => "bidf_mkd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A trained initialization and the queries spent on it.
pub struct Trained {
    pub meta: MetaModel,
    pub queries: u64,
    pub state: Option<RunState>,
}

fn single_dfkd(exp: &Experiment, cfg: &RunConfig) -> Result<Trained> {
    let apis = exp.apis(cfg)?;
    let before = queries_of(apis);
    let mut meta = exp.initial_meta(cfg)?;
    for slot in 0..total_slots(cfg) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5D, slot]));
        let api = &apis[rng.random_range(0..apis.len())];
        let mut support = recover_fresh(exp, cfg, api, None, rng.random())?;
        meta.theta = inner_distill(&meta, api, &mut support, &cfg.bilevel)?.theta_i;
    }
    Ok(Trained { meta, queries: queries_of(apis) - before, state: None })
}

fn distill_avg(exp: &Experiment, cfg: &RunConfig) -> Result<Trained> {
    let apis = exp.apis(cfg)?;
    let before = queries_of(apis);
    let meta = exp.initial_meta(cfg)?;
    let mut avg = vec![0.0; meta.theta.len()];
    for api in apis {
        let seed = derive_seed(&[cfg.seed, 0xDA, api.api_id() as u64]);
        let mut s = recover_fresh(exp, cfg, api, None, derive_seed(&[seed, 0]))?.set;
        let mut q = recover_fresh(exp, cfg, api, None, derive_seed(&[seed, 1]))?.set;
        let soft = Tensor::concat(&[s.ensure_soft(api)?, q.ensure_soft(api)?])?;
        let x = Tensor::concat(&[&s.inputs, &q.inputs])?;
        let (it, _) = adapt(meta.network(), &meta.theta, &x, Target::Soft(&soft, Reduction::Sum), cfg.distill_steps, cfg.bilevel.inner_lr)?;
        avg.iter_mut().zip(it.last().unwrap()).for_each(|(a, t)| *a += t / apis.len() as f64);
    }
    Ok(Trained { meta: meta.with_theta(avg)?, queries: queries_of(apis) - before, state: None })
}

/// Trains the initialization for `method`; `best_api` has none.
pub fn train_method(exp: &Experiment, cfg: &RunConfig, method: Method) -> Result<Option<Trained>> {
    Ok(Some(match method {
        Method::Random => Trained { meta: exp.initial_meta(cfg)?, queries: 0, state: None },
        Method::BestApi => return Ok(None),
        Method::SingleDfkd => single_dfkd(exp, cfg)?,
        Method::DistillAvg => distill_avg(exp, cfg)?,
        Method::WhiteboxFo | Method::BidfMkd => {
            let mut c = cfg.clone();
            if method == Method::WhiteboxFo {
                c.mode = GradMode::Fo;
                c.pretrain.whitebox = true;
            }
            let state = run_meta_training(exp, &c, false)?;
            Trained { meta: state.meta.clone(), queries: state.queries, state: Some(state) }
        }
    }))
}

/// Trains `method` and evaluates it on `episodes`.
pub fn run_baseline(exp: &Experiment, cfg: &RunConfig, method: Method, episodes: &[TaskEpisode]) -> Result<(EvalReport, Option<Trained>)> {
    match train_method(exp, cfg, method)? {
        None => {
            let apis = exp.apis(cfg)?;
            let best = apis
                .iter()
                .max_by(|a, b| a.reported_accuracy().total_cmp(&b.reported_accuracy()))
                .expect("non-empty pool");
            Ok((evaluate_best_api(best, episodes, cfg.eval.ways)?, None))
        }
        Some(t) => {
            let r = evaluate(&t.meta, episodes, &cfg.eval, method.tag(), t.queries, cfg.workers)?;
            Ok((r, Some(t)))
        }
    }
}

/// Paired (boundary, cross-entropy) post-adaptation query KL over `n`
/// recovered tasks; both query sets start from the same generator and latents.
pub fn boundary_vs_ce_kl(exp: &Experiment, cfg: &RunConfig, meta: &MetaModel, n: usize) -> Result<Vec<(f64, f64)>> {
    let apis = exp.apis(cfg)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(&[cfg.seed, 0xB0C, i as u64]);
        let api = &apis[i % apis.len()];
        let mut support = recover_fresh(exp, cfg, api, None, derive_seed(&[seed, 0]))?;
        let task = inner_distill(meta, api, &mut support, &cfg.bilevel)?;
        let qb = recover_fresh(exp, cfg, api, Some((meta, &task)), derive_seed(&[seed, 1]))?;
        let qc = recover_fresh(exp, cfg, api, None, derive_seed(&[seed, 1]))?;
        let mut kl = [0.0; 2];
        for (k, mut q) in [qb.set, qc.set].into_iter().enumerate() {
            let a = q.ensure_soft(api)?.clone();
            let f = meta.probs(&task.theta_i, &q.inputs)?;
            let total: f64 = f.rows().zip(a.rows()).map(|(fr, ar)| kl_divergence(fr, ar)).sum::<Result<f64>>()?;
            kl[k] = total / q.len() as f64;
        }
        out.push((kl[0], kl[1]));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    QSweep,
    ApiCountSweep,
    LambdaSweep,
    ShotSweep,
    FoVsZo,
    ComponentToggle,
}

impl AblationKind {
    pub const ALL: [AblationKind; 6] = [
        AblationKind::QSweep,
        AblationKind::ApiCountSweep,
        AblationKind::LambdaSweep,
        AblationKind::ShotSweep,
        AblationKind::FoVsZo,
        AblationKind::ComponentToggle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationKind::QSweep => "q_sweep",
            AblationKind::ApiCountSweep => "api_count_sweep",
            AblationKind::LambdaSweep => "lambda_sweep",
            AblationKind::ShotSweep => "shot_sweep",
            AblationKind::FoVsZo => "fo_vs_zo",
            AblationKind::ComponentToggle => "component_toggle",
        }
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Labelled config variants for one sweep, derived from `base`.
pub fn ablation_variants(kind: AblationKind, base: &RunConfig) -> Vec<(String, f64, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match kind {
        AblationKind::QSweep => [10usize, 50, 100]
            .into_iter()
            .map(|q| (format!("q={q}"), q as f64, with(&|c| c.zo.q = q)))
            .collect(),
        AblationKind::ApiCountSweep => [1usize, 5, 10, 20, 50, 100]
            .into_iter()
            .filter(|&n| n <= base.scenario.num_apis)
            .map(|n| (format!("apis={n}"), n as f64, with(&|c| c.scenario.num_apis = n)))
            .collect(),
        AblationKind::LambdaSweep => [0.1, 1.0, 10.0]
            .into_iter()
            .map(|l| (format!("lambda_q={l}"), l, with(&|c| c.recovery.lambda_q = l)))
            .collect(),
        AblationKind::ShotSweep => [1usize, 5, 10, 20]
            .into_iter()
            .map(|k| (format!("{k}-shot"), k as f64, with(&|c| c.eval.shots = k)))
            .collect(),
        AblationKind::FoVsZo => vec![
            ("zo".into(), 0.0, with(&|c| c.mode = GradMode::Zo)),
            (
                "fo".into(),
                1.0,
                with(&|c| {
                    c.mode = GradMode::Fo;
                    c.pretrain.whitebox = true;
                }),
            ),
        ],
        AblationKind::ComponentToggle => [("vanilla", false, false), ("+bidf", true, false), ("+boundary", false, true), ("full", true, true)]
            .into_iter()
            .enumerate()
            .map(|(i, (name, bidf, boundary))| (name.to_string(), i as f64, with(&|c| c.components = Components { bidf, boundary })))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub value: f64,
    pub report: EvalReport,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn markdown(&self) -> String {
        let reports: Vec<EvalReport> =
            self.rows.iter().map(|r| EvalReport { method_tag: r.label.clone(), ..r.report.clone() }).collect();
        crate::harness::comparison_table(self.kind.tag(), &reports)
    }

    /// Plot-ready series: one line per row.
    pub fn csv(&self) -> String {
        let mut out = String::from("label,value,mean_accuracy,ci95,queries,wall_secs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.label, r.value, r.report.mean_accuracy, r.report.ci95, r.report.query_ledger_total, r.wall_secs
            ));
        }
        out
    }
}

/// Trains and evaluates the full method under every variant of one sweep.
pub fn run_ablation(exp: &Experiment, kind: AblationKind, base: &RunConfig) -> Result<AblationTable> {
    base.validate()?;
    let mut rows = Vec::new();
    for (label, value, cfg) in ablation_variants(kind, base) {
        cfg.validate()?;
        let start = Instant::now();
        let state = run_meta_training(exp, &cfg, false)?;
        let episodes = exp.test_episodes(&cfg)?;
        let report = evaluate(&state.meta, &episodes, &cfg.eval, &label, state.queries, cfg.workers)?;
        log::info!("{} {label}: {:.2}%", kind.tag(), 100.0 * report.mean_accuracy);
        rows.push(AblationRow { label, value, report, wall_secs: start.elapsed().as_secs_f64() });
    }
    Ok(AblationTable { kind, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub queries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub slots: u64,
    pub bidf_slots: usize,
    pub replay_slots: usize,
    pub failed_slots: usize,
    pub queries: u64,
    pub methods: BTreeMap<String, MethodSummary>,
}

fn episode_by_label(meta_inputs: &LabeledSet, ways: usize) -> Vec<Vec<&[f64]>> {
    let mut cols = vec![Vec::new(); ways];
    for (row, &y) in meta_inputs.inputs.rows().zip(&meta_inputs.labels) {
        if y < ways {
            cols[y].push(row);
        }
    }
    cols
}

/// Renders a support set as a grid with one column per label. Vector samples
/// become horizontal strips; images keep their layout.
pub fn sample_grid(set: &LabeledSet, ways: usize) -> Result<image::RgbImage> {
    let shape = set.inputs.sample_shape();
    let (c, h, w, scale) = match shape {
        [d] => (1, 1, *d, 8u32),
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w, 2u32),
        _ => return Err(Error::Input(format!("cannot render samples of shape {shape:?}"))),
    };
    let cols = episode_by_label(set, ways);
    let rows = cols.iter().map(Vec::len).max().unwrap_or(0);
    let (cell_w, cell_h) = (w as u32 * scale + 2, h as u32 * scale + 2);
    let mut img = image::RgbImage::new((ways as u32 * cell_w).max(1), (rows as u32 * cell_h).max(1));
    for (cx, col) in cols.iter().enumerate() {
        for (cy, x) in col.iter().enumerate() {
            for py in 0..h * scale as usize {
                for px in 0..w * scale as usize {
                    let (i, j) = (py / scale as usize, px / scale as usize);
                    let px_val = |ch: usize| (x[(ch.min(c - 1) * h + i) * w + j].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel(
                        cx as u32 * cell_w + 1 + px as u32,
                        cy as u32 * cell_h + 1 + py as u32,
                        image::Rgb([px_val(0), px_val(1), px_val(2)]),
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Writes metrics, reports, a recovered-sample grid and a summary under
/// `dir/<config hash prefix>/`. Output depends only on the inputs.
pub fn export_report(dir: &Path, cfg: &RunConfig, state: &RunState, reports: &[EvalReport]) -> Result<PathBuf> {
    let hash = cfg.hash();
    let out = dir.join(&hash[..16]);
    std::fs::create_dir_all(&out)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for m in &state.metrics {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    std::fs::write(out.join("reports.json"), serde_json::to_vec_pretty(reports)?)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    if let Some(ep) = state.bank.entries().last() {
        sample_grid(&ep.support, ep.ways())?
            .save_with_format(out.join("samples.png"), image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let summary = Summary {
        config_hash: hash,
        slots: state.slot,
        bidf_slots: state.count(SlotKind::Bidf),
        replay_slots: state.count(SlotKind::Replay),
        failed_slots: state.count(SlotKind::Failed),
        queries: state.queries,
        methods: reports
            .iter()
            .map(|r| {
                let s = MethodSummary { mean_accuracy: r.mean_accuracy, ci95: r.ci95, queries: r.query_ledger_total };
                (r.method_tag.clone(), s)
            })
            .collect(),
    };
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(out)
}
