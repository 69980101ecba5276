//! Run configuration, named presets and the config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::api_pool::{ArchTag, PretrainConfig, Scenario, ScenarioConfig};
use crate::bidf_mkd::InnerOuterConfig;
use crate::data::SourceSpec;
use crate::error::{Error, Result};
use crate::generator::GeneratorMode;
use crate::harness::EpisodeSpec;
use crate::task_recovery::BoundaryConfig;
use crate::zo_grad::ZoConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Zo,
    Fo,
}

/// Which parts of the meta-training loop are active. Task replay is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Outer-level distillation update from recovered episodes.
    pub bidf: bool,
    /// Boundary objective for recovered query sets.
    pub boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub latent_dim: usize,
    pub nf: usize,
    pub mode: GeneratorMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub p_replay: f64,
    pub shots: usize,
    pub query_shots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sources: Vec<SourceSpec>,
    /// Source whose meta-test split provides evaluation episodes.
    pub eval_source: String,
    pub scenario: ScenarioConfig,
    pub pretrain: PretrainConfig,
    pub meta_arch: ArchTag,
    pub generator: GeneratorSettings,
    pub recovery: BoundaryConfig,
    pub zo: ZoConfig,
    pub bilevel: InnerOuterConfig,
    pub replay: ReplayConfig,
    pub eval: EpisodeSpec,
    pub mode: GradMode,
    pub components: Components,
    pub max_iterations: usize,
    pub batch_size: usize,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Failed slots tolerated before the run aborts.
    pub max_slot_failures: usize,
    /// Plain SGD steps used by the distill-and-average baseline.
    pub distill_steps: usize,
    pub workers: usize,
}

impl RunConfig {
    /// Full-scale settings: 100 conv APIs on 32×32 colour glyph-style data.
    pub fn full() -> Self {
        let src = SourceSpec::Glyphs { id: "glyphs".into(), img_size: 32, train_classes: 64, test_classes: 20, strokes: 4, seed: 7 };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            sources: vec![src],
            eval_source: "glyphs".into(),
            scenario: ScenarioConfig {
                scenario: Scenario::SS,
                num_apis: 100,
                ways: 5,
                source_distributions: vec!["glyphs".into()],
                arch_menu: vec![ArchTag::Conv4 { filters: 32 }],
            },
            pretrain: PretrainConfig::default(),
            meta_arch: ArchTag::Conv4 { filters: 32 },
            generator: GeneratorSettings { latent_dim: 256, nf: 64, mode: GeneratorMode::Conv },
            recovery: BoundaryConfig::default(),
            zo: ZoConfig::default(),
            bilevel: InnerOuterConfig::default(),
            replay: ReplayConfig { capacity: 100, p_replay: 0.5, shots: 1, query_shots: 15 },
            eval: EpisodeSpec::default(),
            mode: GradMode::Zo,
            components: Components { bidf: true, boundary: true },
            max_iterations: 10_000,
            batch_size: 4,
            checkpoint_every: 500,
            max_slot_failures: 100,
            distill_steps: 100,
            workers: 1,
        }
    }

    /// Single-core profile: 20 dense APIs on synthetic Gaussian clusters.
    pub fn desk() -> Self {
        let src = SourceSpec::Gaussian {
            id: "gauss".into(),
            dim: 16,
            informative_dims: 4,
            train_classes: 40,
            test_classes: 20,
            spread: 0.4,
            within: 0.04,
            noise: 0.05,
            seed: 11,
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            sources: vec![src],
            eval_source: "gauss".into(),
            scenario: ScenarioConfig {
                scenario: Scenario::SS,
                num_apis: 20,
                ways: 5,
                source_distributions: vec!["gauss".into()],
                arch_menu: vec![ArchTag::Mlp { hidden: vec![32] }],
            },
            pretrain: PretrainConfig { epochs: 20, ..PretrainConfig::default() },
            meta_arch: ArchTag::Mlp { hidden: vec![32] },
            generator: GeneratorSettings { latent_dim: 8, nf: 32, mode: GeneratorMode::Dense },
            recovery: BoundaryConfig { recover_epochs: 50, gen_lr: 0.01, ..BoundaryConfig::default() },
            zo: ZoConfig { q: 50, ..ZoConfig::default() },
            bilevel: InnerOuterConfig { outer_lr: 0.003, ..InnerOuterConfig::default() },
            replay: ReplayConfig { capacity: 50, p_replay: 0.5, shots: 1, query_shots: 5 },
            eval: EpisodeSpec { num_episodes: 100, adapt_lr: 0.1, ..EpisodeSpec::default() },
            mode: GradMode::Zo,
            components: Components { bidf: true, boundary: true },
            max_iterations: 300,
            batch_size: 1,
            checkpoint_every: 50,
            max_slot_failures: 20,
            distill_steps: 100,
            workers: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.recovery.validate(self.scenario.ways)?;
        self.zo.validate()?;
        self.bilevel.validate()?;
        self.eval.validate()?;
        if self.mode == GradMode::Fo && !self.pretrain.whitebox {
            return Err(Error::Config("mode = fo requires pretrain.whitebox = true".into()));
        }
        if self.eval.ways != self.scenario.ways {
            return Err(Error::Config(format!("eval.ways {} differs from scenario.ways {}", self.eval.ways, self.scenario.ways)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.replay.p_replay) {
            return Err(Error::Config(format!("p_replay {} outside [0, 1]", self.replay.p_replay)));
        }
        if self.replay.capacity == 0 || self.replay.shots == 0 || self.replay.query_shots == 0 {
            return Err(Error::Config("replay capacity, shots and query_shots must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if !self.sources.iter().any(|s| s.id() == self.eval_source) {
            return Err(Error::Config(format!("eval_source {} is not among the sources", self.eval_source)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies a `dotted.key=value` override; the value is parsed as TOML and
    /// falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: serde_json::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => serde_json::to_value(t.remove("v").unwrap())?,
            Err(_) => serde_json::Value::String(raw.to_string()),
        };
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for part in key.trim().split('.') {
            node = match node {
                serde_json::Value::Object(map) => {
                    map.get_mut(part).ok_or_else(|| Error::Config(format!("unknown config key {key}")))?
                }
                serde_json::Value::Array(items) => {
                    let i: usize = part.parse().map_err(|_| Error::Config(format!("{part} in {key} is not an index")))?;
                    items.get_mut(i).ok_or_else(|| Error::Config(format!("index {i} out of range in {key}")))?
                }
                _ => return Err(Error::Config(format!("{key} descends into a scalar"))),
            };
        }
        *node = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical (key-sorted) JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
