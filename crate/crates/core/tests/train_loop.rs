mod common;

use common::*;
use headfield::train::checkpoint::{checkpoint_file, CONFIG_FILE, LOCK_FILE, METRICS_FILE};
use headfield::train::loss::*;
use headfield::train::*;
use headfield::Error;
use proptest::prelude::*;

#[test]
fn bce_closed_forms() {
    assert!((bce_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert!((bce_logit(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    assert!(bce_logit(60.0, 1.0) < 1e-20);
    assert!(bce_logit(-60.0, 0.0) < 1e-20);
    assert!((bce_logit(-3.0, 1.0) - (1.0 + 3f64.exp()).ln()).abs() < 1e-14);
}

proptest! {
    #[test]
    fn bce_is_non_negative(l in -50.0..50.0f64, y in 0.0..=1.0f64) {
        prop_assert!(bce_logit(l, y) >= 0.0);
    }
}

#[test]
fn antiparallel_normals_cost_two_per_point() {
    let (ds, cfg) = tiny();
    let mut w = LossWeights::default();
    w.normal_point = 0.7;
    w.reg = 0.0;
    let model = init_model(&ds, &cfg).unwrap();
    let mut targets = stage2_targets(&model, &ds, &cfg).unwrap();
    let t = &mut targets[0];
    let z = model.latent(t.subject).unwrap().clone();
    for p in t.points.iter_mut() {
        let st = shade_tape(&model.canonical, p, &z, &t.params);
        p.normal = -st.normal;
        p.color = st.color;
    }
    t.pixels.clear();
    t.const_color = 0.0;
    t.const_normal = 0.0;
    let item = Stage2Item {
        target: t,
        points: (0..t.points.len()).collect(),
        pixels: vec![],
    };
    let (terms, _) = loss_stage2(&model, &[item], &w, false).unwrap();
    assert!((terms.normal_point - 2.0).abs() < 1e-12);
    assert!(terms.color_point.abs() < 1e-24);
    assert!((terms.total - 2.0 * w.normal * w.normal_point).abs() < 1e-12);
}

#[test]
fn empty_batches_are_rejected() {
    let (ds, cfg) = tiny();
    let model = init_model(&ds, &cfg).unwrap();
    let shared = shared_targets(&ds.head, &cfg.model.deform.canonical_theta).unwrap();
    assert!(loss_stage1(&model, &shared, &[], &LossWeights::default(), false).is_err());
    assert!(loss_stage2(&model, &[], &LossWeights::default(), false).is_err());
}

#[test]
fn training_is_deterministic_per_seed() {
    let (ds, cfg) = tiny();
    let a = train_stage(1, &ds, &cfg, None, None, None).unwrap();
    let b = train_stage(1, &ds, &cfg, None, None, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let mut other = cfg.clone();
    other.seed = 5;
    let c = train_stage(1, &ds, &other, None, None, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn stage_two_leaves_stage_one_parameters_untouched() {
    let (ds, cfg) = tiny();
    let s1 = train_stage(1, &ds, &cfg, None, None, None).unwrap();
    let before = s1.model.clone();
    let s2 = train_stage(2, &ds, &cfg, Some(s1), None, None).unwrap();
    let after = &s2.model;
    assert_eq!(before.canonical.geometry.params(), after.canonical.geometry.params());
    assert_eq!(before.canonical.volume.generator.params(), after.canonical.volume.generator.params());
    assert_eq!(before.deform.shape_net.params(), after.deform.shape_net.params());
    assert_eq!(before.deform.bases_net.params(), after.deform.bases_net.params());
    for (x, y) in before.latents.entries.iter().zip(&after.latents.entries) {
        assert_eq!(x.z_shape, y.z_shape);
    }
    assert_ne!(before.canonical.texture.params(), after.canonical.texture.params());
    assert_eq!(s2.log.len(), cfg.epochs_stage1 + cfg.epochs_stage2);
    assert!(s2.log.iter().all(|l| l.loss.is_finite() && l.loss >= 0.0));
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint() {
    let (ds, cfg) = tiny();
    assert!(matches!(train_stage(2, &ds, &cfg, None, None, None), Err(Error::ContractViolation(_))));
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let (ds, mut cfg) = tiny();
    cfg.epochs_stage1 = 1;
    let ck = train_stage(1, &ds, &cfg, None, None, None).unwrap();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(back, ck);
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&bad, "mem".as_ref()).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "mem".as_ref()).is_err());
}

#[test]
fn directory_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let lock = DirLock::acquire(dir.path()).unwrap();
    assert!(dir.path().join(LOCK_FILE).exists());
    assert!(DirLock::acquire(dir.path()).is_err());
    let (ds, cfg) = tiny();
    assert!(train_stage(1, &ds, &cfg, None, Some(dir.path()), None).is_err());
    drop(lock);
    assert!(!dir.path().join(LOCK_FILE).exists());
    assert!(DirLock::acquire(dir.path()).is_ok());
}

#[test]
fn resume_continues_epoch_numbering() {
    let (ds, mut cfg) = tiny();
    let dir = tempfile::tempdir().unwrap();
    cfg.epochs_stage1 = 1;
    train_stage(1, &ds, &cfg, None, Some(dir.path()), None).unwrap();
    let ck = Checkpoint::load(&dir.path().join(checkpoint_file(1))).unwrap();
    assert_eq!(ck.epochs_done, 1);
    cfg.epochs_stage1 = 3;
    let resumed = train_stage(1, &ds, &cfg, Some(ck), Some(dir.path()), None).unwrap();
    let epochs: Vec<usize> = resumed.log.iter().map(|l| l.epoch).collect();
    assert_eq!(epochs, vec![0, 1, 2]);
    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert!(dir.path().join(CONFIG_FILE).exists());
    assert!(!dir.path().join(LOCK_FILE).exists());

    let straight = train_stage(1, &ds, &cfg, None, None, None).unwrap();
    assert_eq!(straight.log, resumed.log);
    assert_eq!(straight.model, resumed.model);
}
