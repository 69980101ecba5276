#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use bbdfml::config::RunConfig;
use bbdfml::data::{ClassId, ClassSampler, DataSource, Split};
use bbdfml::Result;

/// A few-second variant of the desk profile.
pub fn tiny_cfg() -> RunConfig {
    let mut c = RunConfig::desk();
    c.scenario.num_apis = 3;
    c.pretrain.epochs = 3;
    c.pretrain.train_per_class = 20;
    c.pretrain.heldout = 20;
    c.recovery.recover_epochs = 3;
    c.recovery.batch_per_set = 10;
    c.zo.q = 4;
    c.max_iterations = 8;
    c.checkpoint_every = 0;
    c.eval.num_episodes = 5;
    c.distill_steps = 5;
    c
}

/// Wraps a split and logs every class it is asked for.
#[derive(Debug)]
pub struct Recording {
    pub inner: DataSource,
    pub log: Arc<Mutex<Vec<ClassId>>>,
}

impl ClassSampler for Recording {
    fn input_shape(&self) -> &[usize] {
        &self.inner.input_shape
    }

    fn capacity(&self, class: ClassId) -> Option<usize> {
        self.inner.capacity(class)
    }

    fn sample(&self, class: ClassId, index: usize) -> Result<Vec<f64>> {
        self.log.lock().unwrap().push(class);
        self.inner.sample(class, index)
    }
}

/// Replaces `split` with a recording twin sharing its classes.
pub fn recorded(split: &DataSource) -> (DataSource, Arc<Mutex<Vec<ClassId>>>) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let rec = Recording { inner: split.clone(), log: log.clone() };
    let src = DataSource::new(split.source_id.clone(), split.class_ids.clone(), Split::MetaTest, Arc::new(rec));
    (src, log)
}
