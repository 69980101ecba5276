//! Pool of inference-only classifier APIs.
//!
//! An [`ApiHandle`] wraps a pre-trained model behind probability-only
//! inference and counts every input it is asked to classify. The wrapped
//! parameters are private to this module:
//!
//! ```compile_fail
//! fn peek(api: &bbdfml::api_pool::ApiHandle) -> usize {
//!     api.model.params.len()
//! }
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, ClassId, DataSource};
use crate::error::{Error, Result};
use crate::nn::loss::{ce_to_labels, softmax, softmax_backward, Reduction};
use crate::nn::{argmax, Adam, BnMode, Layer, Network, Tensor, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Same source, same architecture.
    SS,
    /// Same source, heterogeneous architectures.
    SH,
    /// Multiple sources, heterogeneous architectures.
    MH,
}

/// Symbolic architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchTag {
    /// ReLU perceptron with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// Four blocks of 3×3 conv, (batch norm), ReLU and 2×2 max pooling.
    Conv4 { filters: usize },
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchTag::Mlp { hidden } => {
                let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
                write!(f, "mlp-{}", h.join("x"))
            }
            ArchTag::Conv4 { filters } => write!(f, "conv4-{filters}"),
        }
    }
}

impl ArchTag {
    /// Classifier network with a `ways`-wide head. `norm` adds batch norm to
    /// conv blocks.
    pub fn network(&self, input_shape: &[usize], ways: usize, norm: bool) -> Result<Network> {
        let mut layers = Vec::new();
        match self {
            ArchTag::Mlp { hidden } => {
                let mut width: usize = input_shape.iter().product();
                if input_shape.len() > 1 {
                    layers.push(Layer::Reshape { shape: vec![width] });
                }
                for &h in hidden {
                    layers.push(Layer::Linear { inputs: width, outputs: h });
                    layers.push(Layer::Relu);
                    width = h;
                }
                layers.push(Layer::Linear { inputs: width, outputs: ways });
            }
            ArchTag::Conv4 { filters } => {
                if input_shape.len() != 3 {
                    return Err(Error::Config(format!("conv4 needs [c, h, w] inputs, got {input_shape:?}")));
                }
                let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
                for _ in 0..4 {
                    if h < 2 || w < 2 {
                        return Err(Error::Config(format!(
                            "input {input_shape:?} too small for four pooling stages"
                        )));
                    }
                    layers.push(Layer::Conv2d { in_channels: c, out_channels: *filters, kernel: 3, stride: 1, padding: 1 });
                    if norm {
                        layers.push(Layer::BatchNorm { channels: *filters });
                    }
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2);
                    c = *filters;
                    h /= 2;
                    w /= 2;
                }
                layers.push(Layer::Reshape { shape: vec![c * h * w] });
                layers.push(Layer::Linear { inputs: c * h * w, outputs: ways });
            }
        }
        Network::new(layers, input_shape.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub num_apis: usize,
    pub ways: usize,
    pub source_distributions: Vec<String>,
    pub arch_menu: Vec<ArchTag>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_apis == 0 || self.ways < 2 {
            return Err(Error::Config("scenario needs num_apis >= 1 and ways >= 2".into()));
        }
        let (s, a) = (self.source_distributions.len(), self.arch_menu.len());
        let ok = match self.scenario {
            Scenario::SS => s == 1 && a == 1,
            Scenario::SH => s == 1 && a > 1,
            Scenario::MH => s > 1 && a > 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "scenario {:?} is inconsistent with {s} sources and {a} architectures",
                self.scenario
            )));
        }
        Ok(())
    }
}

/// Supervised pre-training budget for each API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_per_class: usize,
    /// Held-out samples used for `reported_accuracy`.
    pub heldout: usize,
    /// APIs below this held-out accuracy are kept but flagged.
    pub accuracy_floor: f64,
    /// Expose exact input gradients (first-order upper-bound baseline only).
    pub whitebox: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch_size: 32,
            train_per_class: 100,
            heldout: 200,
            accuracy_floor: 0.5,
            whitebox: false,
        }
    }
}

#[derive(Clone, Debug)]
struct SealedModel {
    net: Network,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

impl SealedModel {
    fn logits(&self, x: &Tensor) -> Result<Trace<f64>> {
        self.net.forward(&self.params, &self.buffers, x, BnMode::Running)
    }
}

/// An opaque classifier exposing only probability-vector inference.
#[derive(Debug)]
pub struct ApiHandle {
    api_id: usize,
    label_space: Vec<ClassId>,
    arch_tag: ArchTag,
    source_id: String,
    reported_accuracy: f64,
    low_quality: bool,
    whitebox: bool,
    query_count: AtomicU64,
    query_budget: AtomicU64,
    model: SealedModel,
}

/// Exact input-gradient access for one white-box inference call.
pub struct InputGrad<'a> {
    api: &'a ApiHandle,
    trace: Trace<f64>,
    probs: Tensor,
}

impl InputGrad<'_> {
    /// Pulls a gradient with respect to the returned probabilities back to the inputs.
    pub fn input_grad(&self, grad_probs: &Tensor) -> Result<Tensor> {
        if grad_probs.shape != self.probs.shape {
            return Err(Error::Input(format!(
                "probability cotangent {:?} does not match {:?}",
                grad_probs.shape, self.probs.shape
            )));
        }
        let gl = softmax_backward(&self.probs, grad_probs);
        let m = &self.api.model;
        let g = m.net.backward(&m.params, &self.trace, gl, true);
        let mut gi = g.input.expect("input gradient requested");
        gi.shape = self.trace.input().shape.clone();
        Ok(gi)
    }
}

impl ApiHandle {
    pub fn api_id(&self) -> usize {
        self.api_id
    }

    pub fn label_space(&self) -> &[ClassId] {
        &self.label_space
    }

    pub fn ways(&self) -> usize {
        self.label_space.len()
    }

    pub fn arch_tag(&self) -> &ArchTag {
        &self.arch_tag
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn reported_accuracy(&self) -> f64 {
        self.reported_accuracy
    }

    pub fn is_low_quality(&self) -> bool {
        self.low_quality
    }

    pub fn whitebox_enabled(&self) -> bool {
        self.whitebox
    }

    pub fn input_shape(&self) -> &[usize] {
        self.model.net.input_shape()
    }

    pub fn query_count(&self) -> u64 {
        self.query_count.load(Ordering::SeqCst)
    }

    /// Caps total queries; further inference fails with [`Error::Query`].
    pub fn set_query_budget(&self, budget: Option<u64>) {
        self.query_budget.store(budget.unwrap_or(u64::MAX), Ordering::SeqCst);
    }

    fn charge(&self, x: &Tensor) -> Result<()> {
        self.model.net.check_input(x)?;
        let n = x.batch() as u64;
        let budget = self.query_budget.load(Ordering::SeqCst);
        let prev = self
            .query_count
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| (c + n <= budget).then_some(c + n))
            .map_err(|c| Error::Query {
                api_id: self.api_id,
                queries: c,
                reason: format!("query budget of {budget} exhausted"),
            })?;
        debug_assert!(prev + n <= budget);
        Ok(())
    }

    /// Class-probability vectors for a batch of inputs.
    pub fn infer(&self, inputs: &Tensor) -> Result<Tensor> {
        self.charge(inputs)?;
        let trace = self.model.logits(inputs)?;
        Ok(softmax(trace.output()))
    }

    /// Inference plus exact input-gradient access; requires a white-box pool.
    pub fn infer_whitebox(&self, inputs: &Tensor) -> Result<(Tensor, InputGrad<'_>)> {
        if !self.whitebox {
            return Err(Error::Permission(format!("api {} was built without white-box access", self.api_id)));
        }
        self.charge(inputs)?;
        let trace = self.model.logits(inputs)?;
        let probs = softmax(trace.output());
        Ok((probs.clone(), InputGrad { api: self, trace, probs }))
    }
}

fn train_api(
    net: &Network,
    source: &DataSource,
    classes: &[ClassId],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut items = Vec::new();
    for (pos, &c) in classes.iter().enumerate() {
        for i in source.train_indices(c, cfg.train_per_class) {
            items.push((c, i, pos));
        }
    }
    let inputs = source.batch(&items.iter().map(|&(c, i, _)| (c, i)).collect::<Vec<_>>())?;
    let labels: Vec<usize> = items.iter().map(|&(_, _, y)| y).collect();
    let mut params = net.init_params(rng);
    let mut buffers = net.init_buffers();
    let mut opt = Adam::new(params.len());
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let bs = cfg.batch_size.max(2);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let x = inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&k| labels[k]).collect();
            let trace = net.forward(&params, &buffers, &x, BnMode::Batch)?;
            let (_, gl) = ce_to_labels(trace.output(), &y, Reduction::Mean)?;
            let g = net.backward(&params, &trace, gl, false);
            net.update_running(&mut buffers, &trace, 0.1);
            opt.step(&mut params, &g.params, cfg.lr)?;
        }
    }
    Ok((params, buffers))
}

fn heldout_accuracy(model: &SealedModel, source: &DataSource, classes: &[ClassId], total: usize) -> Result<f64> {
    let n = classes.len();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for (pos, &c) in classes.iter().enumerate() {
        let count = total / n + usize::from(pos < total % n);
        for i in source.heldout_indices(c, count) {
            items.push((c, i));
            labels.push(pos);
        }
    }
    let x = source.batch(&items)?;
    let logits = model.logits(&x)?;
    let correct = logits.output().rows().zip(&labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Builds and pre-trains `cfg.num_apis` APIs from the meta-train splits in `sources`.
pub fn build_pool(
    cfg: &ScenarioConfig,
    sources: &[DataSource],
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<Vec<ApiHandle>> {
    cfg.validate()?;
    let chosen: Vec<&DataSource> = cfg
        .source_distributions
        .iter()
        .map(|id| {
            sources
                .iter()
                .find(|s| &s.source_id == id)
                .ok_or_else(|| Error::Config(format!("unknown source {id}")))
        })
        .collect::<Result<_>>()?;
    for s in &chosen {
        if s.class_ids.len() < cfg.ways {
            return Err(Error::Config(format!(
                "source {} has {} meta-train classes, {} ways requested",
                s.source_id,
                s.class_ids.len(),
                cfg.ways
            )));
        }
    }
    let mut pool = Vec::with_capacity(cfg.num_apis);
    for api_id in 0..cfg.num_apis {
        let source = chosen[api_id % chosen.len()];
        let arch = &cfg.arch_menu[(api_id / chosen.len()) % cfg.arch_menu.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xA91, api_id as u64]));
        let mut classes = source.class_ids.clone();
        classes.shuffle(&mut rng);
        classes.truncate(cfg.ways);
        let net = arch.network(&source.input_shape, cfg.ways, true)?;
        let (params, buffers) = train_api(&net, source, &classes, pretrain, &mut rng)?;
        let model = SealedModel { net, params, buffers };
        let acc = heldout_accuracy(&model, source, &classes, pretrain.heldout)?;
        let low_quality = acc < pretrain.accuracy_floor;
        if low_quality {
            log::warn!("api {api_id} ({arch}) reached only {acc:.3} held-out accuracy");
        }
        pool.push(ApiHandle {
            api_id,
            label_space: classes,
            arch_tag: arch.clone(),
            source_id: source.source_id.clone(),
            reported_accuracy: acc,
            low_quality,
            whitebox: pretrain.whitebox,
            query_count: AtomicU64::new(0),
            query_budget: AtomicU64::new(u64::MAX),
            model,
        });
    }
    Ok(pool)
}

/// One manifest record per API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub api_id: usize,
    pub arch_tag: ArchTag,
    pub source_id: String,
    pub label_space: Vec<ClassId>,
    pub reported_accuracy: f64,
    pub low_quality: bool,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub apis: Vec<ManifestRecord>,
}

const CKPT_MAGIC: &[u8; 8] = b"BBAPI\x00\x00\x01";

fn write_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read) -> std::io::Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

/// Writes `manifest.json` plus one opaque checkpoint per API under `dir`.
pub fn save_pool(pool: &[ApiHandle], dir: &Path) -> Result<PoolManifest> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(pool.len());
    for api in pool {
        let name = PathBuf::from(format!("api_{:04}.ckpt", api.api_id));
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
        f.write_all(CKPT_MAGIC)?;
        let arch = serde_json::to_vec(&api.model.net)?;
        f.write_all(&(arch.len() as u64).to_le_bytes())?;
        f.write_all(&arch)?;
        write_f64s(&mut f, &api.model.params)?;
        write_f64s(&mut f, &api.model.buffers)?;
        f.flush()?;
        records.push(ManifestRecord {
            api_id: api.api_id,
            arch_tag: api.arch_tag.clone(),
            source_id: api.source_id.clone(),
            label_space: api.label_space.clone(),
            reported_accuracy: api.reported_accuracy,
            low_quality: api.low_quality,
            checkpoint: name,
        });
    }
    let manifest = PoolManifest { apis: records };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Restores a pool written by [`save_pool`]. Query counters start at zero.
pub fn load_pool(dir: &Path, whitebox: bool) -> Result<Vec<ApiHandle>> {
    let manifest: PoolManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest
        .apis
        .into_iter()
        .map(|rec| {
            let mut f = std::io::BufReader::new(std::fs::File::open(dir.join(&rec.checkpoint))?);
            let mut magic = [0u8; 8];
            f.read_exact(&mut magic)?;
            if &magic != CKPT_MAGIC {
                return Err(Error::Format(format!("{} is not an api checkpoint", rec.checkpoint.display())));
            }
            let n = read_u64(&mut f)? as usize;
            let mut arch = vec![0u8; n];
            f.read_exact(&mut arch)?;
            let net: Network = serde_json::from_slice(&arch)?;
            let params = read_f64s(&mut f)?;
            let buffers = read_f64s(&mut f)?;
            if params.len() != net.num_params() || buffers.len() != net.num_buffers() || net.output_len() != rec.label_space.len() {
                return Err(Error::Format(format!("checkpoint {} is inconsistent", rec.checkpoint.display())));
            }
            Ok(ApiHandle {
                api_id: rec.api_id,
                label_space: rec.label_space,
                arch_tag: rec.arch_tag,
                source_id: rec.source_id,
                reported_accuracy: rec.reported_accuracy,
                low_quality: rec.low_quality,
                whitebox,
                query_count: AtomicU64::new(0),
                query_budget: AtomicU64::new(u64::MAX),
                model: SealedModel { net, params, buffers },
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Handle around an explicit model, for tests elsewhere in the crate.
    pub fn handle_from_model(api_id: usize, net: Network, params: Vec<f64>, classes: Vec<ClassId>, whitebox: bool) -> ApiHandle {
        let buffers = net.init_buffers();
        ApiHandle {
            api_id,
            label_space: classes,
            arch_tag: ArchTag::Mlp { hidden: vec![] },
            source_id: "stub".into(),
            reported_accuracy: 1.0,
            low_quality: false,
            whitebox,
            query_count: AtomicU64::new(0),
            query_budget: AtomicU64::new(u64::MAX),
            model: SealedModel { net, params, buffers },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceSpec;

    fn source(train: usize) -> DataSource {
        SourceSpec::Gaussian {
            id: "g".into(),
            dim: 8,
            informative_dims: 3,
            train_classes: train,
            test_classes: 5,
            spread: 0.25,
            within: 0.04,
            noise: 0.05,
            seed: 2,
        }
        .build(0)
        .unwrap()
        .train
    }

    fn quick() -> PretrainConfig {
        PretrainConfig { epochs: 15, train_per_class: 40, heldout: 200, ..Default::default() }
    }

    fn ss(n: usize, ways: usize) -> ScenarioConfig {
        ScenarioConfig {
            scenario: Scenario::SS,
            num_apis: n,
            ways,
            source_distributions: vec!["g".into()],
            arch_menu: vec![ArchTag::Mlp { hidden: vec![16] }],
        }
    }

    #[test]
    fn forced_subset_when_source_has_exactly_n_classes() {
        let pool = build_pool(&ss(1, 5), &[source(5)], &quick(), 1).unwrap();
        assert_eq!(pool.len(), 1);
        let mut got = pool[0].label_space().to_vec();
        got.sort();
        assert_eq!(got, source(5).class_ids);
    }

    #[test]
    fn hundred_apis_over_sixty_four_classes() {
        let cfg = PretrainConfig { epochs: 1, train_per_class: 4, heldout: 10, ..Default::default() };
        let src = source(64);
        let pool = build_pool(&ss(100, 5), std::slice::from_ref(&src), &cfg, 4).unwrap();
        assert_eq!(pool.len(), 100);
        for api in &pool {
            let mut ls = api.label_space().to_vec();
            ls.sort();
            ls.dedup();
            assert_eq!(ls.len(), 5);
            assert!(ls.iter().all(|c| src.contains(*c)));
        }
    }

    #[test]
    fn insufficient_classes_is_a_config_error() {
        assert!(matches!(build_pool(&ss(1, 6), &[source(5)], &quick(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_shape_invariants() {
        let mut cfg = ss(2, 5);
        cfg.scenario = Scenario::SH;
        assert!(cfg.validate().is_err());
        cfg.arch_menu.push(ArchTag::Mlp { hidden: vec![8, 8] });
        assert!(cfg.validate().is_ok());
        cfg.scenario = Scenario::MH;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mh_pool_covers_every_source() {
        let specs: Vec<DataSource> = (0..3)
            .map(|k| {
                SourceSpec::Gaussian {
                    id: format!("g{k}"),
                    dim: 8,
                    informative_dims: 3,
                    train_classes: 6,
                    test_classes: 5,
                    spread: 0.25,
                    within: 0.04,
                    noise: 0.05,
                    seed: k as u64,
                }
                .build(100 * k as u32)
                .unwrap()
                .train
            })
            .collect();
        let cfg = ScenarioConfig {
            scenario: Scenario::MH,
            num_apis: 6,
            ways: 5,
            source_distributions: vec!["g0".into(), "g1".into(), "g2".into()],
            arch_menu: vec![ArchTag::Mlp { hidden: vec![8] }, ArchTag::Mlp { hidden: vec![8, 8] }],
        };
        let pt = PretrainConfig { epochs: 2, train_per_class: 10, heldout: 20, ..Default::default() };
        let pool = build_pool(&cfg, &specs, &pt, 3).unwrap();
        for k in 0..3 {
            assert!(pool.iter().any(|a| a.source_id() == format!("g{k}")));
        }
        let archs: std::collections::BTreeSet<String> = pool.iter().map(|a| a.arch_tag().to_string()).collect();
        assert_eq!(archs.len(), 2);
        for a in &pool {
            assert!(a.label_space().iter().all(|c| specs.iter().find(|s| s.source_id == a.source_id()).unwrap().contains(*c)));
        }
    }

    #[test]
    fn infer_counts_queries_and_normalizes() {
        let src = source(6);
        let pool = build_pool(&ss(1, 5), std::slice::from_ref(&src), &quick(), 5).unwrap();
        let api = &pool[0];
        assert!(api.reported_accuracy() > 0.8, "accuracy {}", api.reported_accuracy());
        let items: Vec<_> = (0..7).map(|i| (api.label_space()[i % 5], i)).collect();
        let x = src.batch(&items).unwrap();
        let p = api.infer(&x).unwrap();
        assert_eq!(api.query_count(), 7);
        assert_eq!(p.shape, vec![7, 5]);
        for r in p.rows() {
            assert!(r.iter().all(|&v| v >= 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let again = api.infer(&x).unwrap();
        assert_eq!(p.data, again.data);
        assert_eq!(api.query_count(), 14);
        let bad = Tensor::new(vec![1, 9], vec![0.0; 9]).unwrap();
        assert!(matches!(api.infer(&bad), Err(Error::Input(_))));
        assert_eq!(api.query_count(), 14);
    }

    #[test]
    fn conv4_api_infers_on_images() {
        let g = SourceSpec::Glyphs { id: "s".into(), img_size: 16, train_classes: 5, test_classes: 2, strokes: 2, seed: 1 }
            .build(0)
            .unwrap()
            .train;
        let cfg = ScenarioConfig {
            scenario: Scenario::SS,
            num_apis: 1,
            ways: 5,
            source_distributions: vec!["s".into()],
            arch_menu: vec![ArchTag::Conv4 { filters: 4 }],
        };
        let pt = PretrainConfig { epochs: 2, train_per_class: 8, heldout: 10, ..Default::default() };
        let pool = build_pool(&cfg, std::slice::from_ref(&g), &pt, 0).unwrap();
        let x = g.batch(&[(ClassId(0), 0), (ClassId(1), 0)]).unwrap();
        let p = pool[0].infer(&x).unwrap();
        assert_eq!(p.shape, vec![2, 5]);
    }

    #[test]
    fn whitebox_gradient_matches_finite_differences() {
        let src = source(6);
        let pt = PretrainConfig { whitebox: true, ..quick() };
        let pool = build_pool(&ss(1, 5), std::slice::from_ref(&src), &pt, 6).unwrap();
        let api = &pool[0];
        let x = src.batch(&[(api.label_space()[2], 3)]).unwrap();
        let (p, token) = api.infer_whitebox(&x).unwrap();
        assert_eq!(api.query_count(), 1);
        // d(-ln p_2)/dx
        let mut gp = Tensor::zeros(p.shape.clone());
        gp.data[2] = -1.0 / p.data[2];
        let g = token.input_grad(&gp).unwrap();
        let loss = |x: &Tensor| -api.infer(x).unwrap().data[2].ln();
        let h = 1e-6;
        for k in 0..8 {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let rel = (fd - g.data[k]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4 || (fd - g.data[k]).abs() < 1e-9, "coord {k}: fd {fd} vs {}", g.data[k]);
        }
    }

    #[test]
    fn whitebox_requires_permission() {
        let src = source(6);
        let pool = build_pool(&ss(1, 5), std::slice::from_ref(&src), &quick(), 6).unwrap();
        let x = src.batch(&[(pool[0].label_space()[0], 0)]).unwrap();
        assert!(matches!(pool[0].infer_whitebox(&x), Err(Error::Permission(_))));
        assert_eq!(pool[0].query_count(), 0);
    }

    #[test]
    fn constant_output_stub_has_zero_input_gradient() {
        // Single class: softmax is identically 1, so CE is flat in the input.
        let net = Network::new(vec![Layer::Linear { inputs: 3, outputs: 1 }], vec![3]).unwrap();
        let api = testing::handle_from_model(0, net, vec![0.3, -0.2, 0.5, 0.1], vec![ClassId(0)], true);
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.4, 0.6]).unwrap();
        let (p, token) = api.infer_whitebox(&x).unwrap();
        let gp = Tensor::new(vec![1, 1], vec![-1.0 / p.data[0]]).unwrap();
        let g = token.input_grad(&gp).unwrap();
        assert!(g.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn pool_builds_are_deterministic() {
        let src = source(8);
        let a = build_pool(&ss(3, 5), std::slice::from_ref(&src), &quick(), 17).unwrap();
        let b = build_pool(&ss(3, 5), std::slice::from_ref(&src), &quick(), 17).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label_space(), y.label_space());
            assert_eq!(x.reported_accuracy(), y.reported_accuracy());
        }
    }

    #[test]
    fn manifest_round_trip_preserves_inference() {
        let src = source(6);
        let pool = build_pool(&ss(2, 5), std::slice::from_ref(&src), &quick(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_pool(&pool, dir.path()).unwrap();
        assert_eq!(manifest.apis.len(), 2);
        let loaded = load_pool(dir.path(), false).unwrap();
        let x = src.batch(&[(pool[1].label_space()[0], 1)]).unwrap();
        assert_eq!(pool[1].infer(&x).unwrap().data, loaded[1].infer(&x).unwrap().data);
        assert_eq!(loaded[1].label_space(), pool[1].label_space());
        assert_eq!(loaded[1].reported_accuracy(), pool[1].reported_accuracy());
    }

    #[test]
    fn concurrent_inference_counts_every_input() {
        let src = source(6);
        let pool = build_pool(&ss(1, 5), std::slice::from_ref(&src), &quick(), 9).unwrap();
        let api = &pool[0];
        let x = src.batch(&[(api.label_space()[0], 0), (api.label_space()[1], 0), (api.label_space()[2], 0)]).unwrap();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..25 {
                        api.infer(&x).unwrap();
                    }
                });
            }
        });
        assert_eq!(api.query_count(), 4 * 25 * 3);
    }

    #[test]
    fn exhausted_budget_fails_without_charging() {
        let src = source(6);
        let pool = build_pool(&ss(1, 5), std::slice::from_ref(&src), &quick(), 9).unwrap();
        let api = &pool[0];
        api.set_query_budget(Some(5));
        let x = src.batch(&[(api.label_space()[0], 0); 3]).unwrap();
        api.infer(&x).unwrap();
        assert!(matches!(api.infer(&x), Err(Error::Query { queries: 3, .. })));
        assert_eq!(api.query_count(), 3);
    }
}
