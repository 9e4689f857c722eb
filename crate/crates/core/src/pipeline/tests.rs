use super::*;
use crate::data::{synthesize, MotionConfig, Split, SynthConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        patch_samples: 4,
        feature_dim: 4,
        encoder_channels: vec![4, 4],
        hidden: 8,
        ..ModelConfig::default()
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 3, learning_rate: 1e-3, model: tiny_model(), ..TrainConfig::default() }
}

fn tiny_data() -> crate::data::Dataset<f32> {
    let cfg = SynthConfig {
        motion: MotionConfig { sequences: 4, frames_per_sequence: 2, ..MotionConfig::default() },
        points_per_scan: 800,
        ..SynthConfig::default()
    };
    synthesize(&cfg).unwrap()
}

#[test]
fn schedule_examples() {
    let s = ScheduleConfig::default();
    let w = |e| {
        let l = loss_schedule(e, &s);
        (l.chamfer, l.normal, l.residual, l.color)
    };
    assert_eq!(w(0), (2e4, 0.0, 2e3, 0.0));
    assert_eq!(w(199), (2e4, 0.0, 2e3, 0.0));
    assert_eq!(w(200), (2e4, 0.1, 2e3, 0.1));
    let early = ScheduleConfig { head_enable_epoch: 5, ..s };
    assert_eq!(loss_schedule(4, &early).normal, 0.0);
    assert_eq!(loss_schedule(5, &early).normal, 0.1);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { grad_clip: Some(-1.0), ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn plateau_monitor() {
    let falling: Vec<f64> = (0..60).map(|e| 100.0 * 0.97f64.powi(e)).collect();
    let flat = vec![1.0; 60];
    assert!(!(0..60).any(|e| plateau_at(&falling, e, 20, 1000)));
    assert!(plateau_at(&flat, 39, 20, 1000));
    assert!(!plateau_at(&flat, 38, 20, 1000));
    assert!(!plateau_at(&flat, 39, 20, 30));
    assert!(!plateau_at(&flat, 39, 0, 1000));
}

#[test]
fn training_is_deterministic_and_persists_history_and_checkpoint() {
    let ds = tiny_data();
    let frames = ds.collect(Split::Train);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 1, ..tiny_config(2) };
    let a = train(&cfg, &ds.template, &frames, Some(dir.path())).unwrap();
    let b = train(&cfg, &ds.template, &frames, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history.len(), 2 * frames.len().div_ceil(3));
    // heads stay off before the enable epoch
    assert!(a.history.iter().all(|r| r.weighted[1] == 0.0 && r.weighted[3] == 0.0));

    let rows = read_history(&dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(rows, a.history);
    assert!(dir.path().join("checkpoint_e0001.alec").exists());
    let path = a.checkpoint.clone().unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint_bytes(&b.model, Some(&b.optimizer), 2));

    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.epochs, 2);
    assert!(back.model.is_trained());
    assert_eq!(back.optimizer.as_ref().unwrap(), &a.optimizer);
    let tpl = ds.template.cast::<f32>();
    let body = PosedBody::new(&tpl, &frames[0].pose.cast()).unwrap();
    assert_eq!(back.model.predict(&body).unwrap(), a.model.predict(&body).unwrap());
    assert_eq!(checkpoint_dtype(&path).unwrap(), crate::DType::F32);
    // widening load keeps working
    assert!(load_checkpoint::<f64>(&path).is_ok());
}

#[test]
fn heads_switch_on_at_the_enable_epoch() {
    let ds = tiny_data();
    let frames = ds.collect(Split::Train);
    let mut cfg = tiny_config(2);
    cfg.schedule.head_enable_epoch = 1;
    let out = train(&cfg, &ds.template, &frames, None).unwrap();
    let last = out.history.last().unwrap();
    assert!(last.weighted[1] > 0.0 && last.weighted[3] > 0.0);
    assert_eq!(out.history[0].weighted[1], 0.0);
}

#[test]
fn truncated_checkpoint_and_toggle_round_trip() {
    let ds = tiny_data();
    let tpl = ds.template.cast::<f64>();
    let cfg = ModelConfig { predict_normals: false, ..tiny_model() };
    let model = ScaleModel::for_template(cfg, &tpl, 0).unwrap();
    let bytes = checkpoint_bytes(&model, None, 0);
    let p = Path::new("x.alec");
    assert!(matches!(checkpoint_from_bytes::<f64>(&bytes[..bytes.len() / 2], p), Err(Error::Format { .. })));
    let back = checkpoint_from_bytes::<f64>(&bytes, p).unwrap();
    assert!(back.optimizer.is_none());
    let body = PosedBody::new(&tpl, &crate::body::Pose::identity(tpl.joint_count())).unwrap();
    assert!(back.model.predict(&body).unwrap().normals.is_none());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let ds = tiny_data();
    let mut frames = ds.collect(Split::Train);
    frames[0].scan.points.iter_mut().for_each(|p| p[0] = 1e30);
    let err = train(&tiny_config(1), &ds.template, &frames, None).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }), "{err}");
    assert!(err.to_string().contains("seq"));
}

#[test]
fn evaluation_reports() {
    let ds = tiny_data();
    let frames = ds.collect(Split::Test);
    let tpl = ds.template.cast::<f32>();
    let model = ScaleModel::for_template(tiny_model(), &tpl, 1).unwrap();

    // prediction equal to the ground truth scores zero
    let mut exact = frames.clone();
    for f in &mut exact {
        let cloud = model.predict(&PosedBody::new(&tpl, &f.pose.cast()).unwrap()).unwrap();
        f.scan.points = cloud.points;
        f.scan.normals = cloud.normals.unwrap();
    }
    let r = evaluate(&model, &ds.template, &exact, None, 3, 0).unwrap();
    assert_eq!(r.chamfer, 0.0);
    assert_eq!(r.normal, Some(0.0));

    let a = evaluate(&model, &ds.template, &frames, ds.generator.as_ref(), 3, 9).unwrap();
    let b = evaluate(&model, &ds.template, &frames, ds.generator.as_ref(), 3, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.repeats, a.seeds.len()), (3, 3));
    assert_ne!(a.frames[0].chamfer[0], a.frames[0].chamfer[1]);
    assert_eq!(a.chamfer_scaled, a.chamfer * 1e4);
    assert_eq!(a.normal_scaled, a.normal.map(|n| n * 10.0));
    assert!(a.table().contains("Chamfer-L2 (×1e-4 m²)") && a.table().contains("Normal diff (×1e-1)"));
    assert!(evaluate(&model, &ds.template, &[], None, 3, 0).is_err());
}
