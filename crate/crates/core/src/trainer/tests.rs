use super::*;
use crate::scene::GeneratorConfig;

fn tiny_dataset() -> Dataset {
    let g = GeneratorConfig { num_points: 600, image_size: [16, 16], n_views: 2, room: [0.8, 0.8, 0.5], ..Default::default() };
    Dataset::generate(&g, 4, 2, 0.5, 7).unwrap()
}

fn tiny_config(ablation: Ablation) -> RunConfig {
    RunConfig {
        epochs: 3,
        widths_3d: vec![4, 8],
        widths_2d: vec![4, 8],
        heads: 2,
        views_per_scene: 2,
        window: 5,
        ablation,
        ..Default::default()
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let ds = tiny_dataset();
    let cfg = tiny_config(Ablation::FULL);
    let a = train(&ds, &cfg, None).unwrap();
    let b = train(&ds, &cfg, None).unwrap();
    assert_eq!(a.log_text().unwrap(), b.log_text().unwrap());
    assert_eq!(a.records.len(), 3);
    assert_eq!(a.records.iter().map(|r| r.uses_unlabeled).collect::<Vec<_>>(), vec![false, false, true]);
}

#[test]
fn loss_identity_and_phase_one_zeros() {
    let ds = tiny_dataset();
    let r = train(&ds, &tiny_config(Ablation::FULL), None).unwrap();
    for rec in &r.records {
        assert!(rec.loss.identity_residual() < 1e-9);
        if !rec.uses_unlabeled {
            assert_eq!((rec.loss.l3d_unlabeled, rec.loss.l2d_unlabeled), (0.0, 0.0));
        }
    }
    assert!(r.records[2].retained_3d.is_some());
    assert_eq!(r.records[0].loss.lambda_c, 5.0);
    let teacher = r.teacher.unwrap();
    assert!(teacher.iter().all(|(_, t)| !t.requires_grad() && !t.has_grad()));
}

#[test]
fn without_pseudo_labels_phase_two_is_phase_one() {
    let ds = tiny_dataset();
    let a = train(&ds, &tiny_config(Ablation::BASELINE), None).unwrap();
    let b = train(&ds, &RunConfig { phase1_fraction: 1.0, ..tiny_config(Ablation::BASELINE) }, None).unwrap();
    assert_eq!(a.log_text().unwrap(), b.log_text().unwrap());
}

#[test]
fn writes_log_and_checkpoints() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { plo_debug: true, ..tiny_config(Ablation::FULL) };
    let r = train(&ds, &cfg, Some(dir.path())).unwrap();
    let paths = RunPaths { dir: dir.path().to_path_buf() };
    assert_eq!(fs::read_to_string(paths.metrics()).unwrap(), r.log_text().unwrap());
    for name in ["phase1", "final", "teacher"] {
        assert!(paths.checkpoint(name).exists(), "{name}");
    }
    assert!(!fs::read_to_string(paths.plo_debug()).unwrap().is_empty());
}

#[test]
fn missing_split_is_config_error() {
    let mut ds = tiny_dataset();
    for e in &mut ds.manifest.scenes {
        if e.split == Split::Val {
            e.split = Split::Unlabeled;
        }
    }
    assert!(matches!(train(&ds, &tiny_config(Ablation::FULL), None), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { lr: 1e200, ..tiny_config(Ablation::BASELINE) };
    let e = train(&ds, &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(e, Error::NonFinite(_)), "{e}");
    assert!(dir.path().join("nan_dump.json").exists());
}
