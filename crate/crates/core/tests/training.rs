use weakpoint_core::cloudstore::PointCloud;
use weakpoint_core::mprm::{MprmModel, PathId};
use weakpoint_core::pipeline::{
    build_inputs, generate_pseudo_labels, generate_rooms, stack_inputs, train_classifier, PipelineConfig, PreparedScene, Sgd,
    CLASSES,
};
use weakpoint_core::numerics::Tape;
use weakpoint_core::weaksup::{class_frequencies, WeakLabel};

fn tiny_config() -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.seed = 5;
    config.geometry.first_cell = 0.15;
    config.mprm.widths = [8, 16, 32];
    config.scenes.count = 3;
    config.classifier.epochs = 2;
    config
}

fn rooms(config: &PipelineConfig) -> Vec<PreparedScene> {
    generate_rooms(&config.scenes.room, config.scenes.count, config.seed)
        .unwrap()
        .iter()
        .map(|(id, c)| PreparedScene::new(id.clone(), c, config, true).unwrap())
        .collect()
}

#[test]
fn subcloud_labels_are_sparser_than_scene_labels() {
    let mut config = tiny_config();
    config.scenes.count = 20;
    let scenes = rooms(&config);
    let scene_labels: Vec<WeakLabel> = scenes.iter().map(|s| s.scene_label.clone()).collect();
    let sub_labels: Vec<WeakLabel> = scenes
        .iter()
        .flat_map(|s| s.subclouds.iter().map(|x| x.weak_label.clone().unwrap()))
        .collect();
    let per_scene = class_frequencies(&scene_labels).unwrap();
    let per_sub = class_frequencies(&sub_labels).unwrap();
    for (c, (s, b)) in per_scene.iter().zip(&per_sub).enumerate() {
        assert!(b <= s, "{}: subcloud {b} above scene {s}", CLASSES[c].0);
    }
    assert!(per_sub.iter().sum::<f64>() < per_scene.iter().sum::<f64>());
}

#[test]
fn classifier_loss_decreases_on_tiny_scenes() {
    let mut config = tiny_config();
    config.classifier.epochs = 40;
    let scenes = rooms(&config);
    let (_, logs) = train_classifier(&scenes, &config, |_| {}).unwrap();
    let first = logs[0].loss;
    let tail: f64 = logs[logs.len() - 5..].iter().map(|l| l.loss).sum::<f64>() / 5.0;
    assert!(logs.iter().all(|l| l.loss.is_finite()));
    assert!(tail < 0.7 * first, "first {first}, last five mean {tail}");
}

#[test]
fn same_seed_trains_bit_identical_weights() {
    let config = tiny_config();
    let scenes = rooms(&config);
    let (a, la) = train_classifier(&scenes, &config, |_| {}).unwrap();
    let (b, lb) = train_classifier(&scenes, &config, |_| {}).unwrap();
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        let same = pa.value.iter().zip(&pb.value).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{} differs", pa.name);
    }
    let bits = |logs: &[weakpoint_core::pipeline::EpochLog]| logs.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
}

#[test]
fn every_parameter_receives_gradient_within_two_steps() {
    let config = tiny_config();
    let scenes = rooms(&config);
    let scene = &scenes[0];
    let disp = config.geometry.disposition().unwrap();
    let members: Vec<&[usize]> = scene.subclouds.iter().take(3).map(|s| s.member_indices.as_slice()).collect();
    let labels: Vec<WeakLabel> = scene.subclouds.iter().take(3).map(|s| s.weak_label.clone().unwrap()).collect();
    let inputs = build_inputs(&scene.cloud, &members, &config, &disp, 3).unwrap();
    let refs: Vec<_> = inputs.iter().collect();
    let mut model = MprmModel::new(&config.geometry, &config.mprm, config.num_classes, config.seed).unwrap();
    let mut sgd = Sgd::new(&model.store, 0.9);
    let mut touched = vec![false; model.store.len()];
    for step in 0..2 {
        let mut tape = Tape::new();
        let (pyr, x) = stack_inputs(&mut tape, &refs).unwrap();
        let heads = model.forward(&mut tape, &pyr, x, &PathId::HEADS, Some(step)).unwrap();
        let (loss, _) = model.loss(&mut tape, &heads, &labels).unwrap();
        tape.backward(loss).unwrap();
        model.store.zero_grad();
        model.store.accumulate(&tape);
        for (t, (_, p)) in touched.iter_mut().zip(model.store.iter()) {
            *t |= p.grad.iter().any(|g| *g != 0.0);
        }
        sgd.step(&mut model.store, 0.05).unwrap();
    }
    let missing: Vec<&str> = model.store.iter().zip(&touched).filter(|(_, t)| !**t).map(|((_, p), _)| p.name.as_str()).collect();
    assert!(missing.is_empty(), "no gradient reached {missing:?}");
}

/// Two colored blobs side by side; subclouds near either end see one class.
fn separable_scene() -> PointCloud {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    let step = 0.15;
    for i in 0..40 {
        for j in 0..14 {
            for k in 0..3 {
                let p = [i as f64 * step, j as f64 * step, k as f64 * step];
                let class = usize::from(p[0] >= 3.0);
                positions.push(p);
                colors.push(if class == 0 { [0.9, 0.1, 0.1] } else { [0.1, 0.2, 0.9] });
                labels.push(class as i32);
            }
        }
    }
    PointCloud::new(positions, colors, Some(labels)).unwrap()
}

#[test]
fn separable_scene_gets_accurate_pseudo_labels() {
    let mut config = tiny_config();
    config.num_classes = 2;
    config.classifier.epochs = 40;
    let scene = PreparedScene::new("blobs", &separable_scene(), &config, true).unwrap();
    let scenes = vec![scene];
    let (model, _) = train_classifier(&scenes, &config, |_| {}).unwrap();
    config.pcam.paths = "all".into();
    let (_, report) = generate_pseudo_labels(&model, &scenes, &config).unwrap();
    assert!(report.metrics.miou > 0.8, "mIoU {}", report.metrics.miou);
}
