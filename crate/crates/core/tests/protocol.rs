mod common;

use std::fs;
use std::path::Path;

use lipose::checkpoint::Checkpoint;
use lipose::error::Error;
use lipose::lifelong::{
    adapt_phase, build_stream, checkpoint_path, evaluate_model, initialize, load_run, run_experiment, RunOptions,
};
use lipose::metrics::mpjpe;
use lipose::posefile::read_pose_file;
use lipose::skeleton::Skeleton;

use common::tiny_config;

fn opts(out: &Path, seed: u64) -> RunOptions {
    RunOptions {
        seed,
        out: out.to_path_buf(),
        force: false,
        resume: false,
        stop_after: None,
    }
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "checkpoints", "logs"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.path())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn previous_domains_are_unreadable_during_adaptation() {
    let cfg = tiny_config();
    let skel = Skeleton::canonical();
    let mut stream = build_stream(&cfg, &skel).unwrap();
    stream.enter_phase(2).unwrap();
    for j in [0, 1] {
        assert!(matches!(stream.open_train(j), Err(Error::AccessViolation(_))));
    }
    assert!(stream.open_train(2).is_ok());
    // Evaluation splits stay open for metrics.
    assert!(stream.open_eval(0).unwrap().has_labels());
    assert!(matches!(stream.enter_phase(1), Err(Error::AccessViolation(_))));
    let log = stream.access_log();
    assert_eq!(log.iter().filter(|r| !r.granted).count(), 2);
    // Target training splits never carry labels.
    assert!(!stream.open_train(2).unwrap().has_labels());
}

#[test]
fn adapting_against_the_wrong_phase_is_refused() {
    let cfg = tiny_config();
    let skel = Skeleton::canonical();
    let mut stream = build_stream(&cfg, &skel).unwrap();
    let state = initialize(&cfg, &stream, &skel, 1, &mut Vec::new()).unwrap();
    stream.enter_phase(2).unwrap();
    // The state expects phase 1, whose data is now in the past.
    let err = adapt_phase(&state, &stream, &cfg, &mut Vec::new()).unwrap_err();
    assert!(matches!(err, Error::AccessViolation(_)), "{err}");
}

#[test]
fn resume_matches_an_uninterrupted_run_bitwise() {
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_experiment(&cfg, &opts(a.path(), 5)).unwrap();
    let first = run_experiment(
        &cfg,
        &RunOptions {
            stop_after: Some(1),
            ..opts(b.path(), 5)
        },
    )
    .unwrap();
    assert_eq!(first.state.phase, 1);
    let resumed = run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(b.path(), 5)
        },
    )
    .unwrap();
    assert_eq!(resumed.state.digest(), full.state.digest());
    assert_eq!(artifacts(&full.dir), artifacts(&resumed.dir));
}

#[test]
fn identical_seeds_give_identical_reports_and_refuse_overwrite() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let first = run_experiment(&cfg, &opts(out.path(), 9)).unwrap();
    let reports = artifacts(&first.dir);
    assert!(matches!(
        run_experiment(&cfg, &opts(out.path(), 9)),
        Err(Error::RunExists(_))
    ));
    let again = run_experiment(
        &cfg,
        &RunOptions {
            force: true,
            ..opts(out.path(), 9)
        },
    )
    .unwrap();
    assert_eq!(first.dir, again.dir);
    assert_eq!(reports, artifacts(&again.dir));

    let other = run_experiment(&cfg, &opts(out.path(), 10)).unwrap();
    assert_ne!(other.dir, first.dir);
    assert_ne!(other.history.state_digests, first.history.state_digests);
}

#[test]
fn ablations_get_distinct_directories_and_series() {
    let out = tempfile::tempdir().unwrap();
    let base = tiny_config();
    let mut variants = vec![base.clone()];
    let mut no_de = base.clone();
    no_de.generator.use_de = false;
    let mut no_ema = base.clone();
    no_ema.ablation.use_ema = false;
    let mut no_dis = base.clone();
    no_dis.ablation.use_dis = false;
    variants.extend([no_de, no_ema, no_dis]);
    let runs: Vec<_> = variants
        .iter()
        .map(|c| run_experiment(c, &opts(out.path(), 3)).unwrap())
        .collect();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            assert_ne!(runs[i].dir, runs[j].dir);
            assert_ne!(runs[i].history.live, runs[j].history.live, "variants {i} and {j}");
        }
    }
}

#[test]
fn unit_eta_keeps_the_pretrained_anchor() {
    let mut cfg = tiny_config();
    cfg.training.ema_eta = 1.0;
    let out = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &opts(out.path(), 2)).unwrap();
    let anchor = |j| {
        Checkpoint::load(&checkpoint_path(&run.dir, j))
            .unwrap()
            .model("anchor")
            .unwrap()
    };
    let a0 = anchor(0);
    for j in 1..=2 {
        assert_eq!(anchor(j).params(), a0.params());
        assert_ne!(
            Checkpoint::load(&checkpoint_path(&run.dir, j))
                .unwrap()
                .model("live")
                .unwrap()
                .params(),
            a0.params()
        );
    }
}

#[test]
fn ema_handoff_blends_entry_and_exit_parameters() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &opts(out.path(), 4)).unwrap();
    let eta = cfg.training.ema_eta;
    for j in 1..=2 {
        let prev = Checkpoint::load(&checkpoint_path(&run.dir, j - 1))
            .unwrap()
            .model("anchor")
            .unwrap();
        let ck = Checkpoint::load(&checkpoint_path(&run.dir, j)).unwrap();
        let (anchor, live) = (ck.model("anchor").unwrap(), ck.model("live").unwrap());
        for ((a, p), l) in anchor.params().iter().zip(prev.params()).zip(live.params()) {
            for ((a, p), l) in a.iter().zip(p.iter()).zip(l.iter()) {
                // Independent recomputation of the blend.
                let want = if p == l { *p } else { eta * p + (1.0 - eta) * l };
                assert_eq!(a.to_bits(), want.to_bits());
            }
        }
    }
}

#[test]
fn zero_epoch_phase_leaves_the_anchor_unchanged() {
    let mut cfg = tiny_config();
    cfg.training.adapt_epochs = 0;
    let skel = Skeleton::canonical();
    let mut stream = build_stream(&cfg, &skel).unwrap();
    let s0 = initialize(&cfg, &stream, &skel, 1, &mut Vec::new()).unwrap();
    stream.enter_phase(1).unwrap();
    let s1 = adapt_phase(&s0, &stream, &cfg, &mut Vec::new()).unwrap();
    assert_eq!(s1.anchor.model.params(), s0.anchor.model.params());
    // Generators and critic carry over untouched; the sampler still trains.
    assert_eq!(s1.generators.models.digest(), s0.generators.models.digest());
    assert_eq!(s1.discriminator.digest(), s0.discriminator.digest());
    assert_ne!(s1.sampler.model.digest(), s0.sampler.model.digest());
}

#[test]
fn repeated_phase_gives_identical_state() {
    let cfg = tiny_config();
    let skel = Skeleton::canonical();
    let mut stream = build_stream(&cfg, &skel).unwrap();
    let s0 = initialize(&cfg, &stream, &skel, 8, &mut Vec::new()).unwrap();
    stream.enter_phase(1).unwrap();
    let a = adapt_phase(&s0, &stream, &cfg, &mut Vec::new()).unwrap();
    let b = adapt_phase(&s0, &stream, &cfg, &mut Vec::new()).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), s0.digest());
}

#[test]
fn no_targets_means_pretraining_and_source_evaluation_only() {
    let mut cfg = tiny_config();
    cfg.targets.clear();
    let out = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &opts(out.path(), 1)).unwrap();
    assert_eq!(run.state.phase, 0);
    assert_eq!(run.history.anchor.len(), 1);
    assert!(run.history.anchor[0].domains.is_empty());
    assert!(run.history.live.is_empty());
    assert!(run.history.forgetting().is_empty());
    assert!(checkpoint_path(&run.dir, 0).exists());
    assert!(!checkpoint_path(&run.dir, 1).exists());
}

#[test]
fn reports_cover_exactly_the_seen_domains() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &opts(out.path(), 6)).unwrap();
    let names = ["tga", "tgb"];
    for (j, r) in run.history.anchor.iter().enumerate() {
        assert_eq!(r.phase, j);
        let seen: Vec<_> = r.domains.iter().map(|d| d.domain.as_str()).collect();
        assert_eq!(seen, names[..j]);
        if j > 0 {
            let mean = r.domains.iter().map(|d| d.mpjpe).sum::<f64>() / j as f64;
            assert!((r.avg_mpjpe.unwrap() - mean).abs() <= 1e-12);
            let mean_pa = r.domains.iter().map(|d| d.pa_mpjpe).sum::<f64>() / j as f64;
            assert!((r.avg_pa_mpjpe.unwrap() - mean_pa).abs() <= 1e-12);
        }
    }
    let so = run.history.source_only.as_ref().unwrap();
    assert_eq!(so.domains.len(), 2);
    // The recorded source-only numbers are the pretrained model's.
    let skel = Skeleton::canonical();
    let stream = build_stream(&cfg, &skel).unwrap();
    let a0 = lipose::estimator::LiftingModel::from_parts(
        Checkpoint::load(&checkpoint_path(&run.dir, 0))
            .unwrap()
            .model("anchor")
            .unwrap(),
        run.state.anchor.meta(),
    )
    .unwrap();
    let m = evaluate_model(&a0, stream.open_eval(1).unwrap()).unwrap();
    assert_eq!(m.mpjpe, so.domains[0].mpjpe);

    let f = run.history.forgetting();
    assert_eq!(f.len(), 1);
    assert_eq!((f[0].domain.as_str(), f[0].phase), ("tga", 2));
    let want = run.history.anchor[2].domains[0].mpjpe - run.history.anchor[1].domains[0].mpjpe;
    assert!((f[0].mpjpe - want).abs() <= 1e-12);
}

#[test]
fn artifacts_carry_hash_and_seed() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &opts(out.path(), 12)).unwrap();
    let hash = cfg.hash();
    assert!(run.dir.ends_with(format!("{hash}-seed12")));
    for j in 0..=2 {
        let ck = Checkpoint::load(&checkpoint_path(&run.dir, j)).unwrap();
        assert_eq!((ck.config_hash.as_str(), ck.seed), (hash.as_str(), 12));
    }
    let table = fs::read_to_string(run.dir.join("report.txt")).unwrap();
    assert!(table.starts_with(&format!("# config_hash={hash} seed=12\n")));
    for name in ["report.jsonl", "forgetting.jsonl"] {
        for line in fs::read_to_string(run.dir.join(name)).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["config_hash"], hash.as_str(), "{name}");
            assert_eq!(v["seed"], 12, "{name}");
        }
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], hash.as_str());

    let (state, history) = load_run(&run.dir).unwrap();
    assert_eq!(state.digest(), run.state.digest());
    assert_eq!(history, run.history);

    let data = tempfile::tempdir().unwrap();
    let skel = Skeleton::canonical();
    let ds = lipose::synth::synth_domain(&lipose::synth::SynthDomainSpec::plain("p", 1), &skel, 4).unwrap();
    let stem = data.path().join("p");
    lipose::posefile::write_dataset(&stem, &ds, &skel, &hash, 12).unwrap();
    let (p2, p3) = lipose::posefile::pair_paths(&stem);
    for p in [p2, p3] {
        let f = read_pose_file(&p, &skel).unwrap();
        assert_eq!((f.header.config_hash.as_str(), f.header.seed), (hash.as_str(), 12));
    }
}

#[test]
fn pretraining_beats_the_untrained_model() {
    let cfg = tiny_config();
    let skel = Skeleton::canonical();
    let stream = build_stream(&cfg, &skel).unwrap();
    let source = stream.open_eval(0).unwrap();
    let state = initialize(&cfg, &stream, &skel, 1, &mut Vec::new()).unwrap();
    let fresh = lipose::estimator::LiftingModel::new(
        cfg.frames,
        &cfg.estimator,
        16,
        &source.camera,
        &mut lipose::seeding::rng_for(1, "init", 0),
    )
    .unwrap();
    let (trained, untrained) = (
        evaluate_model(&state.anchor, source).unwrap(),
        evaluate_model(&fresh, source).unwrap(),
    );
    assert!(trained.mpjpe < untrained.mpjpe, "{trained:?} vs {untrained:?}");
}

#[test]
fn ground_truth_predictions_score_zero() {
    let skel = Skeleton::canonical();
    let ds = lipose::synth::synth_domain(&lipose::synth::SynthDomainSpec::plain("g", 3), &skel, 5).unwrap();
    for p in ds.all_3d().unwrap() {
        assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
        assert!(lipose::metrics::pa_mpjpe(&p, &p).unwrap() < 1e-9);
    }
}

#[test]
fn vacuous_shift_is_rejected() {
    let mut cfg = tiny_config();
    cfg.shift_margin_mm = Some(1e6);
    let out = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, &opts(out.path(), 1)).unwrap_err();
    assert!(err.to_string().contains("shift_margin_mm"), "{err}");
}
