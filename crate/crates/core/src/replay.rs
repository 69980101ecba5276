//! FIFO memory of recovered episodes and replay over tasks interpolated
//! from it.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bidf_mkd::{bilevel_grad, meta_update, BilevelOutcome, InnerOuterConfig, MetaModel, Target};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::nn::loss::Reduction;
use crate::nn::Tensor;
use crate::task_recovery::{read_episodes, write_episodes, LabeledSet, TaskEpisode};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<TaskEpisode>,
}

/// An N-way task assembled from stored samples of possibly different episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedTask {
    pub support: LabeledSet,
    pub query: LabeledSet,
    /// Global class behind each remapped label.
    pub class_map: Vec<ClassId>,
}

/// Location of one stored sample: (entry, from query set, row).
type Slot = (usize, bool, usize);

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &TaskEpisode> {
        self.entries.iter()
    }

    /// Appends an episode, evicting the oldest ones beyond capacity.
    pub fn push(&mut self, episode: TaskEpisode) {
        self.entries.push_back(episode);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Stored samples per global class, support and query pooled.
    pub fn class_index(&self) -> BTreeMap<ClassId, Vec<Slot>> {
        let mut idx: BTreeMap<ClassId, Vec<Slot>> = BTreeMap::new();
        for (e, ep) in self.entries.iter().enumerate() {
            for (is_query, set) in [(false, &ep.support), (true, &ep.query)] {
                for (row, &y) in set.labels.iter().enumerate() {
                    idx.entry(ep.classes[y]).or_default().push((e, is_query, row));
                }
            }
        }
        idx
    }

    fn row(&self, (e, is_query, row): Slot) -> &[f64] {
        let ep = &self.entries[e];
        if is_query { ep.query.inputs.row(row) } else { ep.support.inputs.row(row) }
    }

    /// Draws `ways` distinct stored classes and `shots` + `query_shots`
    /// distinct samples of each; labels are remapped to `0..ways`.
    pub fn sample_interpolated(&self, ways: usize, shots: usize, query_shots: usize, seed: u64) -> Result<InterpolatedTask> {
        if ways == 0 || shots == 0 || query_shots == 0 {
            return Err(Error::Config("ways, shots and query_shots must be positive".into()));
        }
        let need = shots + query_shots;
        let idx = self.class_index();
        let eligible: Vec<(&ClassId, &Vec<Slot>)> = idx.iter().filter(|(_, v)| v.len() >= need).collect();
        if eligible.len() < ways {
            return Err(Error::Sampling(format!(
                "{ways}-way task needs {need} samples in each of {ways} classes; only {} of {} stored classes qualify",
                eligible.len(),
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: Vec<_> = eligible.choose_multiple(&mut rng, ways).collect();
        let shape = self.entries[0].support.inputs.sample_shape().to_vec();
        let (mut s_rows, mut q_rows) = (Vec::new(), Vec::new());
        let (mut s_lab, mut q_lab) = (Vec::new(), Vec::new());
        let mut class_map = Vec::with_capacity(ways);
        for (pos, (class, slots)) in chosen.into_iter().enumerate() {
            class_map.push(**class);
            let mut pick: Vec<Slot> = slots.choose_multiple(&mut rng, need).copied().collect();
            pick.shuffle(&mut rng);
            for (k, slot) in pick.into_iter().enumerate() {
                if k < shots {
                    s_rows.push(self.row(slot));
                    s_lab.push(pos);
                } else {
                    q_rows.push(self.row(slot));
                    q_lab.push(pos);
                }
            }
        }
        Ok(InterpolatedTask {
            support: LabeledSet::new(Tensor::from_rows(&shape, &s_rows)?, s_lab)?,
            query: LabeledSet::new(Tensor::from_rows(&shape, &q_rows)?, q_lab)?,
            class_map,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_episodes(path, &self.entries.iter().cloned().collect::<Vec<_>>())
    }

    pub fn load(path: &Path, capacity: usize) -> Result<Self> {
        let mut bank = Self::new(capacity)?;
        for e in read_episodes(path)? {
            bank.push(e);
        }
        Ok(bank)
    }
}

/// Meta-gradient of the query cross-entropy after cross-entropy adaptation
/// on the support set. Uses no API.
pub fn replay_grad(meta: &MetaModel, task: &InterpolatedTask, cfg: &InnerOuterConfig) -> Result<BilevelOutcome> {
    if task.class_map.len() != meta.ways() {
        return Err(Error::Input(format!("{}-way task for a {}-way head", task.class_map.len(), meta.ways())));
    }
    bilevel_grad(
        meta.network(),
        &meta.theta,
        (&task.support.inputs, Target::Hard(&task.support.labels, Reduction::Mean)),
        (&task.query.inputs, Target::Hard(&task.query.labels, Reduction::Mean)),
        cfg,
    )
}

/// One replay step: [`replay_grad`] followed by an outer update.
pub fn replay_update(meta: &mut MetaModel, task: &InterpolatedTask, cfg: &InnerOuterConfig) -> Result<BilevelOutcome> {
    let out = replay_grad(meta, task, cfg)?;
    meta_update(meta, &out.grad, cfg.outer_lr)?;
    Ok(out)
}
