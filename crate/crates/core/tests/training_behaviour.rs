use sena_core::checkpoint;
use sena_core::datasets::make_synthetic_task;
use sena_core::layers::softmax_forward;
use sena_core::model::LayerScope;
use sena_core::training::{
    evaluate, frozen_checksum, train_finetune, train_lwf, train_sena, train_task, LwfConfig, SgdConfig,
};
use sena_core::{Architecture, Dataset, MultiTaskModel, Rng, SenaError, SplitSpec, TaskData};

fn small_arch() -> Architecture {
    Architecture {
        input_channels: 3,
        input_size: 32,
        trunk_filters: 8,
        branch_filters: 8,
        kernel: 3,
        dense_units: 32,
        block_dropout: 0.25,
        head_dropout: 0.5,
    }
}

fn quick_cfg(epochs: usize) -> SgdConfig {
    SgdConfig {
        epochs,
        batch_size: 16,
        ..SgdConfig::default()
    }
}

fn task(seed: u64, index: usize) -> TaskData {
    let pool = make_synthetic_task(seed, index, 4, 20).unwrap();
    TaskData::from_pool(&pool, &SplitSpec::synthetic(seed)).unwrap()
}

fn params_of(model: &MultiTaskModel, scope: &LayerScope) -> Vec<Vec<u32>> {
    model
        .layers()
        .filter(|(s, _)| s == scope)
        .flat_map(|(_, l)| l.params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn overfits_32_samples_in_200_epochs() {
    let pool = make_synthetic_task(5, 0, 4, 8).unwrap();
    let cfg = SgdConfig {
        epochs: 200,
        batch_size: 32,
        ..SgdConfig::default()
    };
    let mut rng = Rng::new(5);
    let mut model = MultiTaskModel::build_isolated(small_arch(), "t", 4, &mut rng).unwrap();
    let report = train_task(&mut model, "t", &pool, None, &cfg, &mut rng).unwrap();
    assert_eq!(report.epochs.len(), 200);
    assert_eq!(evaluate(&model, "t", &pool, 32).unwrap(), 1.0);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let data = task(3, 0);
    let run = || {
        let mut rng = Rng::new(11);
        let mut model = MultiTaskModel::build_isolated(small_arch(), "t", 4, &mut rng).unwrap();
        let report = train_task(&mut model, "t", &data.train, Some(&data.validation), &quick_cfg(3), &mut rng).unwrap();
        (model, report.without_timing())
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(checkpoint::encode(&m1), checkpoint::encode(&m2));
}

#[test]
fn all_frozen_training_changes_nothing_but_reports_loss() {
    let data = task(4, 0);
    let mut rng = Rng::new(4);
    let mut model = MultiTaskModel::build_isolated(small_arch(), "t", 4, &mut rng).unwrap();
    model.freeze_all();
    let before = checkpoint::encode(&model);
    let report = train_task(&mut model, "t", &data.train, None, &quick_cfg(2), &mut rng).unwrap();
    assert_eq!(checkpoint::encode(&model), before);
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.train_loss.is_finite() && e.train_loss > 0.0));
}

#[test]
fn out_of_range_label_is_rejected() {
    let data = task(4, 0);
    let mut rng = Rng::new(4);
    let mut model = MultiTaskModel::build_isolated(small_arch(), "t", 3, &mut rng).unwrap();
    let err = train_task(&mut model, "t", &data.train, None, &quick_cfg(1), &mut rng).unwrap_err();
    assert!(matches!(err, SenaError::InvalidLabel { n_classes: 3, .. }));
}

#[test]
fn sena_keeps_trunk_and_old_branch_while_finetune_moves_the_trunk() {
    let (a, b) = (task(6, 0), task(6, 1));
    let mut rng = Rng::new(6);
    let mut base = MultiTaskModel::build_isolated(small_arch(), "a", 4, &mut rng).unwrap();
    train_task(&mut base, "a", &a.train, None, &quick_cfg(2), &mut rng).unwrap();
    let logits_before = base.logits("a", a.test.images()).unwrap();

    let mut sena = base.clone();
    train_sena(&mut sena, "b", &b.train, None, &quick_cfg(2), None, false, &mut rng.clone()).unwrap();
    assert_eq!(params_of(&sena, &LayerScope::Trunk), params_of(&base, &LayerScope::Trunk));
    assert_eq!(
        params_of(&sena, &LayerScope::Body("a".into())),
        params_of(&base, &LayerScope::Body("a".into()))
    );
    assert!(sena.logits("a", a.test.images()).unwrap().bit_eq(&logits_before));
    assert_eq!(sena.task_ids(), vec!["a", "b"]);

    let mut ft = base.clone();
    train_finetune(&mut ft, "b", &b.train, None, &quick_cfg(2), &mut rng.clone()).unwrap();
    assert_ne!(params_of(&ft, &LayerScope::Trunk), params_of(&base, &LayerScope::Trunk));
}

#[test]
fn unfreeze_phase2_moves_the_trunk() {
    let (a, b) = (task(8, 0), task(8, 1));
    let mut rng = Rng::new(8);
    let mut base = MultiTaskModel::build_isolated(small_arch(), "a", 4, &mut rng).unwrap();
    train_task(&mut base, "a", &a.train, None, &quick_cfg(1), &mut rng).unwrap();
    let mut m = base.clone();
    let report = train_sena(&mut m, "b", &b.train, None, &quick_cfg(1), None, true, &mut rng).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_ne!(params_of(&m, &LayerScope::Trunk), params_of(&base, &LayerScope::Trunk));
    // Afterwards only the new branch is trainable.
    assert!(m
        .freeze_report()
        .iter()
        .all(|e| e.frozen == !matches!(&e.scope, LayerScope::Body(t) | LayerScope::Head(t) if t == "b")));
}

#[test]
fn lwf_without_distillation_or_joint_phase_is_feature_extraction() {
    let (a, b) = (task(9, 0), task(9, 1));
    let mut rng = Rng::new(9);
    let mut base = MultiTaskModel::build_isolated(small_arch(), "a", 4, &mut rng).unwrap();
    train_task(&mut base, "a", &a.train, None, &quick_cfg(1), &mut rng).unwrap();
    let lwf = LwfConfig {
        distill_weight: 0.0,
        warmup_epochs: 2,
        joint_epochs: Some(0),
        ..LwfConfig::default()
    };
    let mut m = base.clone();
    let before = frozen_checksum(&base);
    let report = train_lwf(&mut m, "b", &b.train, None, &quick_cfg(1), &lwf, &mut rng).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(params_of(&m, &LayerScope::Trunk), params_of(&base, &LayerScope::Trunk));
    assert_eq!(
        params_of(&m, &LayerScope::Body("a".into())),
        params_of(&base, &LayerScope::Body("a".into()))
    );
    assert!(m.logits("a", a.test.images()).unwrap().bit_eq(&base.logits("a", a.test.images()).unwrap()));
    assert_ne!(frozen_checksum(&m), before);
    // The new head sits on the old body: no new body parameters.
    assert_eq!(
        m.parameter_count(),
        base.parameter_count() + small_arch().head_param_count(4)
    );
}

#[test]
fn lwf_joint_phase_trains_the_shared_path() {
    let (a, b) = (task(10, 0), task(10, 1));
    let mut rng = Rng::new(10);
    let mut base = MultiTaskModel::build_isolated(small_arch(), "a", 4, &mut rng).unwrap();
    train_task(&mut base, "a", &a.train, None, &quick_cfg(1), &mut rng).unwrap();
    let lwf = LwfConfig {
        warmup_epochs: 1,
        joint_epochs: Some(1),
        ..LwfConfig::default()
    };
    let mut m = base.clone();
    let report = train_lwf(&mut m, "b", &b.train, None, &quick_cfg(1), &lwf, &mut rng).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_ne!(params_of(&m, &LayerScope::Trunk), params_of(&base, &LayerScope::Trunk));
    assert_ne!(
        params_of(&m, &LayerScope::Head("a".into())),
        params_of(&base, &LayerScope::Head("a".into()))
    );
}

/// Loss on a single fixed batch with dropout disabled and a small step size.
#[test]
fn loss_on_a_fixed_tiny_batch_mostly_decreases() {
    let arch = Architecture {
        block_dropout: 0.0,
        head_dropout: 0.0,
        ..small_arch()
    };
    let cfg = SgdConfig {
        learning_rate: 0.002,
        epochs: 15,
        batch_size: 16,
        ..SgdConfig::default()
    };
    let mut monotone = 0;
    let runs = 10;
    for seed in 0..runs {
        let batch = make_synthetic_task(seed, 0, 4, 4).unwrap();
        let mut rng = Rng::new(seed);
        let mut model = MultiTaskModel::build_isolated(arch.clone(), "t", 4, &mut rng).unwrap();
        let report = train_task(&mut model, "t", &batch, None, &cfg, &mut rng).unwrap();
        let losses: Vec<f32> = report.epochs.iter().map(|e| e.train_loss).collect();
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone * 10 >= runs * 9, "{monotone}/{runs} runs non-increasing");
}

#[test]
fn checkpoint_round_trip_is_bit_exact_for_every_task() {
    let (a, b) = (task(12, 0), task(12, 1));
    let mut rng = Rng::new(12);
    let mut model = MultiTaskModel::build_isolated(small_arch(), "a", 4, &mut rng).unwrap();
    train_task(&mut model, "a", &a.train, None, &quick_cfg(1), &mut rng).unwrap();
    train_sena(&mut model, "b", &b.train, None, &quick_cfg(1), None, false, &mut rng).unwrap();
    model.add_head("c", 3, "a", &mut rng).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sena");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.task_ids(), vec!["a", "b", "c"]);
    for t in ["a", "b", "c"] {
        let x = a.test.images();
        assert!(loaded.logits(t, x).unwrap().bit_eq(&model.logits(t, x).unwrap()));
    }
    assert_eq!(loaded.freeze_report(), model.freeze_report());
    assert_eq!(checkpoint::encode(&loaded), checkpoint::encode(&model));
}

#[test]
fn two_task_checkpoint_lists_two_registry_entries() {
    let mut rng = Rng::new(1);
    let mut model = MultiTaskModel::build_isolated(small_arch(), "cifar10", 10, &mut rng).unwrap();
    model.add_task("svhn", 11, None, &mut rng).unwrap();
    let loaded = checkpoint::decode(&checkpoint::encode(&model)).unwrap();
    assert_eq!(loaded.task_ids(), vec!["cifar10", "svhn"]);
    assert_eq!(loaded.n_classes("svhn").unwrap(), 11);
}

#[test]
fn evaluation_ignores_dropout() {
    let data: Dataset = make_synthetic_task(1, 0, 4, 4).unwrap();
    let mut rng = Rng::new(1);
    let model = MultiTaskModel::build_isolated(small_arch(), "t", 4, &mut rng).unwrap();
    let a = softmax_forward(&model.logits("t", data.images()).unwrap()).unwrap();
    let b = model.forward_task("t", data.images(), None).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(evaluate(&model, "t", &data, 3).unwrap(), evaluate(&model, "t", &data, 16).unwrap());
}
