//! Few-shot evaluation on unseen classes, reports and comparison tables.

use rand::seq::index::sample as sample_indices;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api_pool::ApiHandle;
use crate::bidf_mkd::{adapt, MetaModel, Target};
use crate::data::{derive_seed, DataSource, Split};
use crate::error::{Error, Result};
use crate::nn::loss::Reduction;
use crate::nn::argmax;
use crate::task_recovery::{LabeledSet, Origin, TaskEpisode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub query_shots: usize,
    pub num_episodes: usize,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { ways: 5, shots: 1, query_shots: 15, num_episodes: 600, adapt_steps: 10, adapt_lr: 0.01 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 || self.query_shots == 0 || self.num_episodes == 0 || !(self.adapt_lr > 0.0) {
            return Err(Error::Config(format!("episode spec fields must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_tag: String,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub query_ledger_total: u64,
}

impl EvalReport {
    /// Mean and 95% half-width (1.96 · sample std / √n).
    pub fn from_accuracies(method_tag: &str, per_episode: Vec<f64>, query_ledger_total: u64) -> Self {
        let n = per_episode.len().max(1) as f64;
        let mean = per_episode.iter().sum::<f64>() / n;
        let var = if per_episode.len() > 1 {
            per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            method_tag: method_tag.to_string(),
            mean_accuracy: mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
            per_episode,
            query_ledger_total,
        }
    }
}

/// A balanced real-data episode from a meta-test split.
pub fn sample_test_episode(source: &DataSource, spec: &EpisodeSpec, seed: u64) -> Result<TaskEpisode> {
    if source.split != Split::MetaTest {
        return Err(Error::Sampling(format!("source {} is not a meta-test split", source.source_id)));
    }
    let need = spec.shots + spec.query_shots;
    let eligible: Vec<_> = source.class_ids.iter().filter(|&&c| source.capacity(c).is_none_or(|n| n >= need)).collect();
    if eligible.len() < spec.ways {
        return Err(Error::Sampling(format!(
            "{}-way episodes need {} classes with {need} samples; {} has {}",
            spec.ways,
            spec.ways,
            source.source_id,
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<_> = eligible.choose_multiple(&mut rng, spec.ways).map(|&&c| c).collect();
    let (mut s_items, mut q_items, mut s_lab, mut q_lab) = (vec![], vec![], vec![], vec![]);
    for (pos, &c) in classes.iter().enumerate() {
        let pool = source.capacity(c).unwrap_or(1 << 16);
        let idx = sample_indices(&mut rng, pool, need).into_vec();
        for (k, i) in idx.into_iter().enumerate() {
            if k < spec.shots {
                s_items.push((c, i));
                s_lab.push(pos);
            } else {
                q_items.push((c, i));
                q_lab.push(pos);
            }
        }
    }
    Ok(TaskEpisode {
        support: LabeledSet::new(source.batch(&s_items)?, s_lab)?,
        query: LabeledSet::new(source.batch(&q_items)?, q_lab)?,
        api_id: None,
        origin: Origin::Real,
        classes,
    })
}

/// `spec.num_episodes` episodes with per-episode seeds derived from `seed`.
pub fn test_episodes(source: &DataSource, spec: &EpisodeSpec, seed: u64) -> Result<Vec<TaskEpisode>> {
    (0..spec.num_episodes).map(|i| sample_test_episode(source, spec, derive_seed(&[seed, 0xE7A1, i as u64]))).collect()
}

fn query_accuracy(pred_rows: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    let hits = pred_rows.zip(labels).filter(|(p, y)| p == *y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Fine-tunes a copy of the initialization on the support set and returns
/// query accuracy.
pub fn adapt_and_eval(meta: &MetaModel, episode: &TaskEpisode, spec: &EpisodeSpec) -> Result<f64> {
    if meta.ways() != episode.ways() {
        return Err(Error::Input(format!("{}-way head for a {}-way episode", meta.ways(), episode.ways())));
    }
    let (iterates, _) = adapt(
        meta.network(),
        &meta.theta,
        &episode.support.inputs,
        Target::Hard(&episode.support.labels, Reduction::Mean),
        spec.adapt_steps,
        spec.adapt_lr,
    )?;
    let p = meta.probs(iterates.last().unwrap(), &episode.query.inputs)?;
    Ok(query_accuracy(p.rows().map(argmax), &episode.query.labels))
}

/// Evaluates one initialization over a fixed episode list, splitting the
/// episodes across `workers` threads.
pub fn evaluate(meta: &MetaModel, episodes: &[TaskEpisode], spec: &EpisodeSpec, tag: &str, ledger: u64, workers: usize) -> Result<EvalReport> {
    let workers = workers.clamp(1, episodes.len().max(1));
    let chunk = episodes.len().div_ceil(workers).max(1);
    let per: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| adapt_and_eval(meta, e, spec)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut accs = Vec::with_capacity(episodes.len());
    for r in per {
        accs.extend(r?);
    }
    Ok(EvalReport::from_accuracies(tag, accs, ledger))
}

/// Labels query points with the API's own argmax, mapped onto the episode's
/// classes by index.
pub fn evaluate_best_api(api: &ApiHandle, episodes: &[TaskEpisode], ways: usize) -> Result<EvalReport> {
    let before = api.query_count();
    let accs = episodes
        .iter()
        .map(|e| {
            let p = api.infer(&e.query.inputs)?;
            Ok(query_accuracy(p.rows().map(|r| argmax(r) % ways), &e.query.labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies("best_api", accs, api.query_count() - before))
}

/// One-sided sign test p-value for "differences are positive"; zero
/// differences are dropped.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    let k = diffs.iter().filter(|d| **d > 0.0).count();
    binomial_upper_tail(n, k)
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for j in 0..=n {
        if j > 0 {
            ln_c += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= k {
            total += (ln_c + ln_half_n).exp();
        }
    }
    total.min(1.0)
}

/// Markdown comparison table, accuracies in percent.
pub fn comparison_table(title: &str, rows: &[EvalReport]) -> String {
    let mut out = format!("| {title} | accuracy (%) | ci95 | queries |\n|---|---:|---:|---:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {} |\n",
            r.method_tag,
            100.0 * r.mean_accuracy,
            100.0 * r.ci95,
            r.query_ledger_total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api_pool::ArchTag;
    use crate::data::SourceSpec;
    use crate::nn::Tensor;

    fn test_split() -> (DataSource, DataSource) {
        let p = SourceSpec::Gaussian {
            id: "g".into(),
            dim: 12,
            informative_dims: 4,
            train_classes: 10,
            test_classes: 8,
            spread: 0.25,
            within: 0.05,
            noise: 0.05,
            seed: 1,
        }
        .build(0)
        .unwrap();
        (p.train, p.test)
    }

    #[test]
    fn episode_sizes_and_determinism() {
        let (train, test) = test_split();
        let spec = EpisodeSpec::default();
        let e = sample_test_episode(&test, &spec, 4).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
        assert_eq!(e.origin, Origin::Real);
        assert_eq!(e, sample_test_episode(&test, &spec, 4).unwrap());
        assert!(e.classes.iter().all(|c| !train.contains(*c)));
        assert!(sample_test_episode(&train, &spec, 0).is_err());
        let wide = EpisodeSpec { ways: 9, ..spec };
        assert!(matches!(sample_test_episode(&test, &wide, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies("x", vec![0.2, 0.4, 0.6], 7);
        assert!((r.mean_accuracy - 0.4).abs() < 1e-12);
        assert!((r.ci95 - 1.96 * 0.2 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_adaptation_is_zero_shot_and_leaves_theta() {
        let (_, test) = test_split();
        let meta = MetaModel::new(&ArchTag::Mlp { hidden: vec![8] }, &[12], 5, 3).unwrap();
        let e = sample_test_episode(&test, &EpisodeSpec::default(), 1).unwrap();
        let spec = EpisodeSpec { adapt_steps: 0, ..Default::default() };
        let p = meta.probs(&meta.theta, &e.query.inputs).unwrap();
        let zero_shot = query_accuracy(p.rows().map(argmax), &e.query.labels);
        let t0 = meta.theta.clone();
        assert_eq!(adapt_and_eval(&meta, &e, &spec).unwrap(), zero_shot);
        adapt_and_eval(&meta, &e, &EpisodeSpec::default()).unwrap();
        assert_eq!(meta.theta, t0);
    }

    #[test]
    fn perfect_model_scores_one() {
        // Linear head reading the first coordinate, which encodes the label.
        let mut meta = MetaModel::new(&ArchTag::Mlp { hidden: vec![] }, &[2], 2, 0).unwrap();
        meta.theta = vec![50.0, 0.0, -50.0, 0.0, -25.0, 25.0];
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let set = LabeledSet::new(x, vec![0, 1, 0, 1]).unwrap();
        let e = TaskEpisode {
            support: set.clone(),
            query: set,
            api_id: None,
            origin: Origin::Real,
            classes: vec![crate::data::ClassId(0), crate::data::ClassId(1)],
        };
        assert_eq!(adapt_and_eval(&meta, &e, &EpisodeSpec { ways: 2, ..Default::default() }).unwrap(), 1.0);
    }

    #[test]
    fn random_init_is_near_chance() {
        let (_, test) = test_split();
        let spec = EpisodeSpec { num_episodes: 200, ..Default::default() };
        let eps = test_episodes(&test, &spec, 0).unwrap();
        let mut accs = Vec::new();
        for (i, e) in eps.iter().enumerate() {
            let meta = MetaModel::new(&ArchTag::Mlp { hidden: vec![16] }, &[12], 5, i as u64).unwrap();
            accs.push(adapt_and_eval(&meta, e, &spec).unwrap());
        }
        let r = EvalReport::from_accuracies("random", accs, 0);
        assert!((0.15..0.25).contains(&r.mean_accuracy), "{}", r.mean_accuracy);
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let (_, test) = test_split();
        let spec = EpisodeSpec { num_episodes: 9, ..Default::default() };
        let eps = test_episodes(&test, &spec, 1).unwrap();
        let meta = MetaModel::new(&ArchTag::Mlp { hidden: vec![8] }, &[12], 5, 3).unwrap();
        let a = evaluate(&meta, &eps, &spec, "m", 0, 1).unwrap();
        let b = evaluate(&meta, &eps, &spec, "m", 0, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(&[1.0; 5]) - 1.0 / 32.0).abs() < 1e-12);
        assert!((sign_test_p(&[1.0, -1.0]) - 0.75).abs() < 1e-12);
        assert_eq!(sign_test_p(&[-1.0, -2.0]), 1.0);
        assert!(sign_test_p(&[1.0; 20]) < 1e-5);
    }

    #[test]
    fn table_has_one_row_per_report() {
        let t = comparison_table("method", &[EvalReport::from_accuracies("a", vec![0.5], 1), EvalReport::from_accuracies("b", vec![0.25], 2)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("| a | 50.00 |"));
    }
}
