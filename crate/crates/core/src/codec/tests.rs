use super::*;
use crate::body::{make_procedural_body, BodyConfig, Pose};
use crate::geom;

fn small_config() -> ModelConfig {
    ModelConfig {
        patch_samples: 4,
        feature_dim: 4,
        uv_resolution: 32,
        encoder_channels: vec![4, 4],
        hidden: 8,
        ..ModelConfig::default()
    }
}

fn template() -> BodyTemplate<f64> {
    make_procedural_body(&BodyConfig::default(), 3).unwrap()
}

fn bent_pose(joints: usize) -> Pose<f64> {
    let mut pose = Pose::identity(joints);
    pose.joint_rotations[5] = geom::axis_angle([0.0, 1.0, 0.0], 0.8);
    pose.joint_rotations[9] = geom::axis_angle([1.0, 0.0, 0.0], -0.5);
    pose
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig { patch_samples: 5, ..small_config() },
        ModelConfig { uv_resolution: 30, ..small_config() },
        ModelConfig { encoder_channels: vec![], ..small_config() },
        ModelConfig { hidden: 0, ..small_config() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let m = ModelConfig { uv_resolution: 64, ..small_config() };
    assert!(matches!(ScaleModel::for_template(m, &template(), 0), Err(Error::Mismatch(_))));
}

#[test]
fn zero_residual_puts_every_sample_on_its_body_point() {
    let tpl = template();
    let mut model = ScaleModel::for_template(ModelConfig { patch_samples: 16, ..small_config() }, &tpl, 1).unwrap();
    model.zero_residual_head();
    let body = PosedBody::new(&tpl, &bent_pose(tpl.joint_count())).unwrap();
    let cloud = model.predict(&body).unwrap();
    assert_eq!(cloud.len(), 798 * 16);
    for (i, x) in cloud.points.iter().enumerate() {
        assert!(geom::dist2(*x, body.points[i / 16]) < 1e-24);
    }
    let normals = cloud.normals.unwrap();
    assert!(normals.iter().all(|n| (geom::norm(*n) - 1.0).abs() < 1e-12));
    assert!(cloud.colors.unwrap().iter().flatten().all(|&c| c > 0.0 && c < 1.0));
}

#[test]
fn rigid_root_motion_moves_the_cloud_rigidly() {
    let tpl = template();
    let model = ScaleModel::for_template(small_config(), &tpl, 2).unwrap();
    let pose = bent_pose(tpl.joint_count());
    let r = geom::axis_angle([0.3, 0.9, 0.1], 1.1);
    let d = [0.4, -0.2, 1.5];
    let a = model.predict(&PosedBody::new(&tpl, &pose).unwrap()).unwrap();
    let b = model.predict(&PosedBody::new(&tpl, &pose.with_root_motion(&r, d)).unwrap()).unwrap();
    for (x, y) in a.points.iter().zip(&b.points) {
        let moved = geom::add(geom::mat_vec(&r, *x), d);
        assert!(geom::dist2(moved, *y).sqrt() < 1e-9);
    }
    for (x, y) in a.normals.unwrap().iter().zip(b.normals.unwrap().iter()) {
        assert!(geom::dist2(geom::mat_vec(&r, *x), *y).sqrt() < 1e-9);
    }
    // residuals are expressed in the local frames and do not change
    assert!(a.residuals.iter().zip(&b.residuals).all(|(u, v)| geom::dist2(*u, *v) < 1e-18));
}

#[test]
fn articulation_toggle_changes_only_the_frame() {
    let tpl = template();
    let on = ScaleModel::for_template(small_config(), &tpl, 4).unwrap();
    let off = ScaleModel::for_template(ModelConfig { use_articulation: false, ..small_config() }, &tpl, 4).unwrap();
    let body = PosedBody::new(&tpl, &bent_pose(tpl.joint_count())).unwrap();
    let (a, b) = (on.predict(&body).unwrap(), off.predict(&body).unwrap());
    assert_eq!(a.residuals, b.residuals);
    for (i, (x, y)) in a.points.iter().zip(&b.points).enumerate() {
        let t = body.points[a.patch[i]];
        let r = a.residuals[i];
        assert!(geom::dist2(*x, geom::add(geom::mat_vec(&body.frames[a.patch[i]], r), t)) < 1e-20);
        assert!(geom::dist2(*y, geom::add(r, t)) < 1e-20);
    }
}

#[test]
fn uk_toggle_and_head_toggles_shape_the_parameters() {
    let tpl = template();
    let full = ScaleModel::for_template(small_config(), &tpl, 0).unwrap();
    let lean = ScaleModel::for_template(
        ModelConfig { use_u_k: false, predict_normals: false, predict_colors: false, ..small_config() },
        &tpl,
        0,
    )
    .unwrap();
    assert_eq!(full.params().get("dec.l1.w_patch").unwrap().shape(), [6, 8]);
    assert_eq!(lean.params().get("dec.l1.w_patch").unwrap().shape(), [4, 8]);
    assert!(lean.params().get("head.nrm.out.w").is_none());
    let body = PosedBody::new(&tpl, &Pose::identity(tpl.joint_count())).unwrap();
    let cloud = lean.predict(&body).unwrap();
    assert!(cloud.normals.is_none() && cloud.colors.is_none());
}

#[test]
fn explicit_samples_match_the_grid_prediction() {
    let tpl = template();
    let model = ScaleModel::for_template(small_config(), &tpl, 5).unwrap();
    let body = PosedBody::new(&tpl, &bent_pose(tpl.joint_count())).unwrap();
    let full = model.predict(&body).unwrap();
    // eval mode is row-independent, so a subset reproduces the same points
    let samples = PatchSamples { patch: vec![7, 3, 7], p: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]] };
    let sub = model.predict_samples(&[&body], &[&samples]).unwrap().remove(0);
    for (s, row) in [(0, 28), (1, 15), (2, 29)] {
        assert!(geom::dist2(sub.points[s], full.points[row]) < 1e-24);
    }
}

#[test]
fn k_mismatch_and_untrained_sampling_are_rejected() {
    let tpl = template();
    let mut model = ScaleModel::for_template(small_config(), &tpl, 0).unwrap();
    let other = make_procedural_body::<f64>(&BodyConfig { uv_resolution: 64, ..BodyConfig::default() }, 0).unwrap();
    let big = ModelConfig { uv_resolution: 64, ..small_config() };
    let other_model = ScaleModel::for_template(big, &other, 0).unwrap();
    let body = PosedBody::new(&tpl, &Pose::identity(tpl.joint_count())).unwrap();
    assert!(matches!(other_model.predict(&body), Err(Error::Mismatch(_))));
    assert!(model.adaptive_sample(&body, 1000.0, 0).is_err());
    model.set_trained(true);
    let (cloud, areas) = model.adaptive_sample(&body, 1000.0, 0).unwrap();
    let expected: usize = patch_counts(&areas, 1000.0).iter().sum();
    assert_eq!(cloud.len(), expected);
    assert!(model.adaptive_sample(&body, 0.0, 0).is_err());
}

#[test]
fn train_forward_updates_running_stats_and_yields_gradients() {
    let tpl = template();
    let mut model = ScaleModel::for_template(small_config(), &tpl, 6).unwrap();
    let before = model.buffers().clone();
    let body = PosedBody::new(&tpl, &bent_pose(tpl.joint_count())).unwrap();
    let grid = PatchSamples::grid(tpl.chart_len(), 4).unwrap();
    let mut tape = Tape::new();
    let rec = model.record_train(&mut tape, &[&body, &body], &[&grid, &grid], Heads::ALL).unwrap();
    assert_eq!(rec.frames.len(), 2);
    assert_ne!(&before, model.buffers());
    let s = tape.sum_sq(rec.frames[1].points);
    let mut g = tape.backward(s).unwrap();
    let grads = rec.param_grads(&mut g, model.params());
    assert_eq!(grads.len(), model.params().len());
    assert!(grads[0].data().iter().any(|v| *v != 0.0));
}

#[test]
fn from_parts_round_trips() {
    let tpl = template();
    let model = ScaleModel::for_template(small_config(), &tpl, 8).unwrap();
    let params = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let bufs = model.buffers().iter().map(|(n, s)| (n.clone(), s.clone())).collect();
    let back = ScaleModel::from_parts(small_config(), tpl.chart_pixels(), params, bufs, true).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.chart_uv, tpl.chart_uv());
    assert!(back.is_trained());
}
