mod common;

use bbdfml::api_pool::{load_pool, save_pool};
use bbdfml::config::{Components, GradMode};
use bbdfml::runner::*;
use bbdfml::Error;
use common::tiny_cfg;

#[test]
fn zero_iterations_return_the_initial_state() {
    let mut cfg = tiny_cfg();
    cfg.max_iterations = 0;
    let exp = Experiment::build(&cfg).unwrap();
    let state = run_meta_training(&exp, &cfg, false).unwrap();
    assert_eq!(state, RunState::new(&exp, &cfg).unwrap());
    assert_eq!(state.queries, 0);
    assert_eq!(exp.pool.iter().map(|a| a.query_count()).sum::<u64>(), 0);
}

#[test]
fn query_ledger_is_conserved() {
    for (bidf, boundary) in [(true, true), (false, false), (false, true), (true, false)] {
        let mut cfg = tiny_cfg();
        cfg.components = Components { bidf, boundary };
        let exp = Experiment::build(&cfg).unwrap();
        let state = run_meta_training(&exp, &cfg, false).unwrap();
        let per_slot: u64 = state.metrics.iter().map(|m| m.queries).sum();
        let pool: u64 = exp.pool.iter().map(|a| a.query_count()).sum();
        let predicted = predicted_queries(&cfg, state.count(SlotKind::Bidf));
        assert!(state.count(SlotKind::Bidf) > 0);
        assert_eq!(state.queries, per_slot);
        assert_eq!(state.queries, pool);
        assert_eq!(state.queries, predicted, "components {bidf}/{boundary}");
    }
}

#[test]
fn first_order_ledger_is_one_query_per_datum_and_epoch() {
    let mut cfg = tiny_cfg();
    cfg.mode = GradMode::Fo;
    cfg.pretrain.whitebox = true;
    let exp = Experiment::build(&cfg).unwrap();
    let state = run_meta_training(&exp, &cfg, false).unwrap();
    assert_eq!(state.queries, predicted_queries(&cfg, state.count(SlotKind::Bidf)));
}

#[test]
fn fo_mode_rejects_a_sealed_pool() {
    let cfg = tiny_cfg();
    let exp = Experiment::build(&cfg).unwrap();
    let mut fo = cfg.clone();
    fo.mode = GradMode::Fo;
    fo.pretrain.whitebox = true;
    assert!(matches!(run_meta_training(&exp, &fo, false), Err(Error::Config(_))));
}

#[test]
fn replay_only_run_with_seeded_bank_spends_no_queries() {
    let cfg = tiny_cfg();
    let exp = Experiment::build(&cfg).unwrap();
    let mut state = run_meta_training(&exp, &cfg, false).unwrap();
    assert!(!state.bank.is_empty());
    let mut replay_cfg = cfg.clone();
    replay_cfg.replay.p_replay = 1.0;
    replay_cfg.max_iterations = 2 * cfg.max_iterations;
    let before: u64 = exp.pool.iter().map(|a| a.query_count()).sum();
    state.config_hash = replay_cfg.hash();
    let start = state.slot;
    train_until(&exp, &replay_cfg, &mut state, u64::MAX).unwrap();
    assert!(state.metrics[start as usize..].iter().all(|m| m.kind == Some(SlotKind::Replay) && m.queries == 0));
    assert_eq!(exp.pool.iter().map(|a| a.query_count()).sum::<u64>(), before);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.output_dir = dir.path().to_path_buf();
    let exp = Experiment::build(&cfg).unwrap();
    let full = run_meta_training(&exp, &cfg, false).unwrap();
    for cut in [1, 3, 5] {
        let exp = Experiment::build(&cfg).unwrap();
        let mut part = RunState::new(&exp, &cfg).unwrap();
        train_until(&exp, &cfg, &mut part, cut).unwrap();
        let ckpt = dir.path().join(format!("cut{cut}"));
        part.save(&ckpt).unwrap();
        let mut resumed = RunState::load(&ckpt, &cfg).unwrap();
        assert_eq!(resumed, part);
        let exp = Experiment::build(&cfg).unwrap();
        train_until(&exp, &cfg, &mut resumed, u64::MAX).unwrap();
        assert_eq!(resumed, full, "resumed at slot {cut}");
    }
}

#[test]
fn checkpoints_follow_the_cadence_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.checkpoint_every = 3;
    let exp = Experiment::build(&cfg).unwrap();
    let mut state = RunState::new(&exp, &cfg).unwrap();
    train_until(&exp, &cfg, &mut state, 4).unwrap();
    let ckpt = run_dir(&cfg).join("checkpoint");
    assert_eq!(RunState::load(&ckpt, &cfg).unwrap().slot, 3);
    let resumed = run_meta_training(&Experiment::build(&cfg).unwrap(), &cfg, true).unwrap();
    let fresh = run_meta_training(&Experiment::build(&cfg).unwrap(), &cfg, false).unwrap();
    assert_eq!(resumed, fresh);
    let mut other = cfg.clone();
    other.zo.q += 1;
    assert!(matches!(RunState::load(&ckpt, &other), Err(Error::Config(_))));
}

#[test]
fn batched_updates_apply_once_per_iteration() {
    let mut cfg = tiny_cfg();
    cfg.batch_size = 2;
    cfg.max_iterations = 3;
    cfg.bilevel.accumulate_batch = true;
    let exp = Experiment::build(&cfg).unwrap();
    let mut state = RunState::new(&exp, &cfg).unwrap();
    let theta0 = state.meta.theta.clone();
    train_until(&exp, &cfg, &mut state, 1).unwrap();
    assert_eq!(state.meta.theta, theta0);
    assert!(state.pending.is_some());
    train_until(&exp, &cfg, &mut state, 2).unwrap();
    assert!(state.pending.is_none());
    assert_ne!(state.meta.theta, theta0);
    let mut per_slot = cfg.clone();
    per_slot.bilevel.accumulate_batch = false;
    let a = run_meta_training(&exp, &per_slot, false).unwrap();
    assert_ne!(a.meta.theta, state.meta.theta);
}

#[test]
fn failed_slots_are_skipped_until_the_threshold() {
    let mut cfg = tiny_cfg();
    cfg.replay.p_replay = 0.0;
    let exp = Experiment::build(&cfg).unwrap();
    for api in &exp.pool {
        api.set_query_budget(Some(0));
    }
    let mut state = RunState::new(&exp, &cfg).unwrap();
    cfg.max_slot_failures = 100;
    train_until(&exp, &cfg, &mut state, 3).unwrap();
    assert_eq!(state.failures, 3);
    assert!(state.metrics.iter().all(|m| m.kind == Some(SlotKind::Failed) && m.error.is_some()));
    assert_eq!(state.meta, RunState::new(&exp, &cfg).unwrap().meta);
    cfg.max_slot_failures = 4;
    assert!(matches!(train_until(&exp, &cfg, &mut state, u64::MAX), Err(Error::Aborted(_))));
    assert_eq!(state.failures, 5);
}

#[test]
fn pool_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.output_dir = dir.path().to_path_buf();
    let built = Experiment::build(&cfg).unwrap();
    save_pool(&built.pool, &pool_dir(&cfg)).unwrap();
    let loaded = Experiment::load_or_build(&cfg).unwrap();
    let a = run_meta_training(&built, &cfg, false).unwrap();
    let b = run_meta_training(&loaded, &cfg, false).unwrap();
    assert_eq!(a, b);
    assert!(load_pool(&pool_dir(&cfg), true).unwrap().iter().all(|h| h.whitebox_enabled()));
}

#[test]
fn baselines_produce_reports() {
    let cfg = tiny_cfg();
    let exp = Experiment::build(&cfg).unwrap();
    let episodes = exp.test_episodes(&cfg).unwrap();
    for m in Method::ALL {
        let mut c = cfg.clone();
        if m == Method::WhiteboxFo {
            c.pretrain.whitebox = true;
        }
        let exp = if m == Method::WhiteboxFo { Experiment::build(&c).unwrap() } else { Experiment::build(&cfg).unwrap() };
        let (r, trained) = run_baseline(&exp, &c, m, &episodes).unwrap();
        assert_eq!(r.method_tag, m.tag());
        assert_eq!(r.per_episode.len(), cfg.eval.num_episodes);
        assert!((0.0..=1.0).contains(&r.mean_accuracy));
        assert_eq!(trained.is_none(), m == Method::BestApi);
        if m == Method::Random {
            assert_eq!(r.query_ledger_total, 0);
        } else {
            assert!(r.query_ledger_total > 0, "{m}");
        }
    }
}

#[test]
fn export_is_deterministic_and_handles_empty_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.max_iterations = 0;
    let exp = Experiment::build(&cfg).unwrap();
    let empty = run_meta_training(&exp, &cfg, false).unwrap();
    let out = export_report(dir.path(), &cfg, &empty, &[]).unwrap();
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let summary: Summary = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!((summary.slots, summary.queries), (0, 0));
    assert!(!out.join("samples.png").exists());

    let cfg = tiny_cfg();
    let state = run_meta_training(&exp, &cfg, false).unwrap();
    let episodes = exp.test_episodes(&cfg).unwrap();
    let report = bbdfml::harness::evaluate(&state.meta, &episodes, &cfg.eval, "bidf_mkd", state.queries, 1).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = export_report(&a, &cfg, &state, std::slice::from_ref(&report)).unwrap();
    let out_b = export_report(&b, &cfg, &state, std::slice::from_ref(&report)).unwrap();
    for f in ["metrics.csv", "reports.json", "summary.json", "samples.png", "config.toml"] {
        assert_eq!(std::fs::read(out_a.join(f)).unwrap(), std::fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + state.metrics.len());
    assert!(out_a.ends_with(&cfg.hash()[..16]));
}

#[test]
fn ablation_grids() {
    let cfg = tiny_cfg();
    let labels = |k| ablation_variants(k, &cfg).into_iter().map(|v| v.0).collect::<Vec<_>>();
    assert_eq!(labels(AblationKind::QSweep), ["q=10", "q=50", "q=100"]);
    assert_eq!(labels(AblationKind::ApiCountSweep), ["apis=1"]);
    assert_eq!(labels(AblationKind::LambdaSweep), ["lambda_q=0.1", "lambda_q=1", "lambda_q=10"]);
    assert_eq!(labels(AblationKind::ComponentToggle), ["vanilla", "+bidf", "+boundary", "full"]);
    for k in AblationKind::ALL {
        for (_, _, c) in ablation_variants(k, &cfg) {
            c.validate().unwrap();
        }
        assert_eq!(k.tag().parse::<AblationKind>().unwrap(), k);
    }
    let exp = Experiment::build(&cfg).unwrap();
    let t = run_ablation(&exp, AblationKind::ComponentToggle, &cfg).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.csv().lines().count(), 5);
    assert_eq!(t.markdown().lines().count(), 6);
}
