use std::fs;

use asanet::config::RunConfig;
use asanet::core::eval::{EvalConfig, Setup};
use asanet::core::synth::{gen_dataset, make_batch, GenConfig};
use asanet::core::train::Trainer;
use asanet::runner::{self, TrainOptions};
use asanet::{checkpoint, dataset, export, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    let mut c = RunConfig::smoke();
    c.schedule.schedule.total_epochs = 4;
    c.schedule.schedule.decay_epochs = vec![2];
    c.schedule.checkpoint_every = 2;
    c
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&GenConfig {
        num_identities: 3,
        tracklets_per_identity: 4,
        ..GenConfig::default()
    })
    .unwrap();
    dataset::save(&ds, dir.path()).unwrap();
    let back = dataset::load(dir.path()).unwrap();
    assert_eq!(back.config, ds.config);
    assert_eq!(back.tracklets, ds.tracklets);
    assert_eq!(back.identities, ds.identities);
    assert_eq!(back.frames, ds.frames);
}

#[test]
fn same_seed_same_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = GenConfig {
        num_identities: 3,
        ..GenConfig::default()
    };
    dataset::save(&gen_dataset(&cfg).unwrap(), a.path()).unwrap();
    dataset::save(&gen_dataset(&cfg).unwrap(), b.path()).unwrap();
    for f in ["manifest.json", "frames.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn truncated_frames_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&GenConfig {
        num_identities: 2,
        tracklets_per_identity: 2,
        ..GenConfig::default()
    })
    .unwrap();
    dataset::save(&ds, dir.path()).unwrap();
    let p = dir.path().join("frames.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(dataset::load(dir.path()), Err(Error::Format(_))));
}

fn trained(cfg: &RunConfig) -> (Trainer, asanet::core::synth::Dataset) {
    let mut cfg = cfg.clone();
    let ds = runner::dataset_for(&cfg).unwrap();
    runner::fit_to_dataset(&mut cfg, &ds);
    let (t, _) = runner::train(&cfg, &ds, &TrainOptions::default()).unwrap();
    (t, ds)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (mut trainer, ds) = trained(&tiny());
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&trainer, dir.path()).unwrap();
    let mut back = checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.epoch, trainer.epoch);
    assert_eq!(back.optim.step, trainer.optim.step);
    assert_eq!(back.optim.m, trainer.optim.m);
    assert_eq!(back.optim.v, trainer.optim.v);
    for (a, b) in back.model.params.iter().zip(trainer.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = make_batch(&ds, &[0, 1, 2], 4, &mut rng).unwrap();
    for t in [&mut trainer, &mut back] {
        t.model.set_mode(asanet::core::nn::Mode::Eval);
    }
    let (fa, fb) = (
        trainer.model.forward_full(&batch.frames).unwrap(),
        back.model.forward_full(&batch.frames).unwrap(),
    );
    assert_eq!(fa, fb);
}

#[test]
fn manifest_lists_every_parameter_once() {
    let trainer = Trainer::new(tiny().train_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&trainer, dir.path()).unwrap();
    let m: checkpoint::Manifest = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let mut names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.len(), trainer.model.params.len());
    names.sort();
    names.dedup();
    assert_eq!(names.len(), trainer.model.params.len());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let trainer = Trainer::new(tiny().train_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&trainer, dir.path()).unwrap();
    let p = dir.path().join("weights.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Format(_))));
    fs::write(&p, []).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Format(_))));
    assert!(matches!(
        checkpoint::load(&dir.path().join("missing")),
        Err(Error::Format(_))
    ));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny();
    let ds = runner::dataset_for(&cfg).unwrap();
    let mut cfg2 = cfg.clone();
    runner::fit_to_dataset(&mut cfg2, &ds);
    let (full, _) = runner::train(&cfg2, &ds, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = TrainOptions {
        out: Some(dir.path().to_path_buf()),
        resume: None,
        stop_after: Some(2),
    };
    runner::train(&cfg2, &ds, &first).unwrap();
    let second = TrainOptions {
        out: Some(dir.path().to_path_buf()),
        resume: Some(dir.path().join("checkpoint")),
        stop_after: None,
    };
    let (resumed, _) = runner::train(&cfg2, &ds, &second).unwrap();
    for (a, b) in full.model.params.iter().zip(resumed.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,xent,wrt,cent,bce,pmi,lambda_pmi,total");
    assert_eq!(log.lines().count() - 1, full.optim.step as usize);
}

#[test]
fn exports_are_consistent() {
    let (mut trainer, ds) = trained(&tiny());
    let dir = tempfile::tempdir().unwrap();
    let cfg = EvalConfig {
        frames: 4,
        setup: Setup::Mixing,
        ..EvalConfig::default()
    };
    let r = runner::evaluate_to(
        &mut trainer,
        &ds,
        &cfg,
        dir.path(),
        &runner::EvalOptions { mask_tracklets: 2 },
    )
    .unwrap();
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["map"].as_f64().unwrap(), r.map);
    assert_eq!(metrics["queries"].as_u64().unwrap() as usize, r.queries.len());

    let mut ranked = csv::Reader::from_path(dir.path().join("ranked_lists.csv")).unwrap();
    assert_eq!(ranked.records().count(), r.queries.len());
    let mut cmc = csv::Reader::from_path(dir.path().join("cmc.csv")).unwrap();
    assert_eq!(cmc.records().count(), r.cmc.len());
    assert!(fs::read_to_string(dir.path().join("cmc.svg")).unwrap().starts_with("<svg"));

    let (m, f) = export::load_features(dir.path()).unwrap();
    assert_eq!(m.rows, f.shape()[0]);
    assert_eq!(m.dim, trainer.config.model.feature_dim());

    let masks = dir.path().join("masks");
    let first = fs::read_dir(&masks).unwrap().next().unwrap().unwrap().path();
    let img = fs::read(first.join("0.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n"));
}
