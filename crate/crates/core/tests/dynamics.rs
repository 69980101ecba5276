//! Training dynamics on the desk preset.

use bbdfml::bidf_mkd::{inner_distill, InnerOuterConfig, MetaModel};
use bbdfml::config::RunConfig;
use bbdfml::generator::{balanced_labels, init_generator, GeneratorConfig, LatentBatch};
use bbdfml::harness::sign_test_p;
use bbdfml::runner::{boundary_vs_ce_kl, run_meta_training, Experiment, SlotKind};
use bbdfml::task_recovery::{recover_support, GradSource};
use bbdfml::zo_grad::ZoConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk(num_apis: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.scenario.num_apis = num_apis;
    cfg.checkpoint_every = 0;
    cfg
}

#[test]
fn inner_kl_decreases_on_fresh_episodes() {
    let cfg = desk(4);
    let exp = Experiment::build(&cfg).unwrap();
    let gcfg = GeneratorConfig {
        latent_dim: cfg.generator.latent_dim,
        out_shape: exp.pool[0].input_shape().to_vec(),
        nf: cfg.generator.nf,
        mode: cfg.generator.mode,
    };
    let meta = MetaModel::new(&cfg.meta_arch, exp.pool[0].input_shape(), 5, 3).unwrap();
    let icfg = InnerOuterConfig { inner_steps: 5, inner_lr: 0.01, ..cfg.bilevel.clone() };
    let mut bad = 0;
    for e in 0..20u64 {
        let api = &exp.pool[e as usize % exp.pool.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(e);
        let mut gen = init_generator(&gcfg, e).unwrap();
        let mut z = LatentBatch::sample(gcfg.latent_dim, balanced_labels(cfg.recovery.batch_per_set, 5), &mut rng);
        let zo = GradSource::ZerothOrder(ZoConfig { seed: e, ..cfg.zo });
        let mut support = recover_support(api, &mut gen, &mut z, &cfg.recovery, zo, &mut rng).unwrap();
        let task = inner_distill(&meta, api, &mut support, &icfg).unwrap();
        assert_eq!(task.inner_loss.len(), 6);
        bad += task.inner_loss.windows(2).filter(|w| w[1] >= w[0]).count();
    }
    assert!(bad <= 1, "{bad} non-decreasing inner steps over 20 episodes");
}

#[test]
fn desk_run_lowers_outer_kl_and_boundary_queries_raise_it() {
    let cfg = desk(20);
    let exp = Experiment::build(&cfg).unwrap();
    let state = run_meta_training(&exp, &cfg, false).unwrap();
    assert_eq!(state.count(SlotKind::Failed), 0);
    let outer: Vec<f64> = state.metrics.iter().filter_map(|m| m.outer_loss).collect();
    let third = outer.len() / 3;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&outer[..third]), mean(&outer[outer.len() - third..]));
    assert!(late < early, "outer KL {early:.3} early vs {late:.3} late");

    let pairs = boundary_vs_ce_kl(&exp, &cfg, &state.meta, 20).unwrap();
    let diffs: Vec<f64> = pairs.iter().map(|(b, c)| b - c).collect();
    assert!(sign_test_p(&diffs) < 0.05, "{pairs:?}");
}
