use geomae_core::data::SyntheticChips;
use geomae_core::finetune::{
    predict_source, synthetic_task, InputsOf, FineTuneConfig, FineTuneModel, FineTuneObjective, HeadKind, LabeledSubset,
    Predictions, Target, TargetKind,
};
use geomae_core::mae::EncoderConfig;
use geomae_core::optim::AdamWConfig;
use geomae_core::patchify::PatchSize;
use geomae_core::seed::rng_for;
use geomae_core::trainer::{train, ChannelStats, LoopConfig, Objective, ScheduleConfig, TrainState};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        patch: PatchSize::square(4),
        channels: 3,
    }
}

fn config(head: HeadKind, classes: usize) -> FineTuneConfig {
    FineTuneConfig {
        encoder: small_encoder(),
        head,
        n_classes: classes,
        frames: 2,
        image: (16, 16),
        aux: Some((2, (3, 3))),
        freeze_backbone: false,
        class_weights: None,
    }
}

fn loop_cfg(epochs: f64, patience: Option<usize>) -> LoopConfig {
    LoopConfig {
        batch_size: 8,
        epochs,
        max_steps: None,
        checkpoint_every: None,
        patience,
        schedule: ScheduleConfig {
            max_lr: 3e-3,
            start_lr: 1e-6,
            warmup_epochs: 0.5,
            total_epochs: epochs,
            min_lr: 1e-5,
            weight_decay: 0.05,
        },
        optim: AdamWConfig::default(),
        seed: 5,
    }
}

#[test]
fn segmentation_fine_tuning_beats_chance() {
    let chips = SyntheticChips::new(160, 2, 3, 16, 21);
    let data = synthetic_task(&chips, TargetKind::Mask, 3).unwrap();
    let train_set = LabeledSubset {
        inner: &data,
        indices: (0..144).collect(),
    };
    let val_set = LabeledSubset {
        inner: &data,
        indices: (144..160).collect(),
    };
    let mut obj = FineTuneObjective {
        model: FineTuneModel::new(config(HeadKind::ConvUp, 3), &mut rng_for(5, "init")).unwrap(),
        train: &train_set,
        val: Some(&val_set),
        norm: Some(ChannelStats::estimate(&InputsOf(&train_set), 64).unwrap()),
        eval_batch: 8,
    };
    let mut cfg = loop_cfg(10.0, None);
    cfg.schedule.max_lr = 1e-2;
    let before = obj.val_loss().unwrap().unwrap();
    let state = TrainState::fresh(&obj, &cfg).unwrap();
    train(&mut obj, &cfg, state, None).unwrap();
    let after = obj.val_loss().unwrap().unwrap();
    let Predictions::Masks(pred) = obj.predict_all(&val_set).unwrap() else { panic!() };
    let mut hits = 0;
    let mut total = 0;
    for (i, p) in pred.iter().enumerate() {
        let Target::Mask(truth) = &data[144 + i].target else { panic!() };
        hits += p.iter().zip(truth).filter(|(a, b)| a == b).count();
        total += p.len();
    }
    let acc = hits as f64 / total as f64;
    println!("val loss {before} -> {after}, pixel accuracy {acc}");
    assert!(after < before);
    assert!(acc > 0.6, "accuracy {acc}");
}

#[test]
fn early_stopping_halts_when_validation_loss_rises() {
    let chips = SyntheticChips::new(16, 2, 3, 16, 8);
    let data = synthetic_task(&chips, TargetKind::Class, 2).unwrap();
    // Same inputs with every label flipped: fitting one set hurts the other.
    let flipped: Vec<_> = data
        .iter()
        .cloned()
        .map(|mut s| {
            if let Target::Class(c) = s.target {
                s.target = Target::Class(1 - c);
            }
            s
        })
        .collect();
    let mut c = config(HeadKind::Classifier, 2);
    c.freeze_backbone = true;
    let mut obj = FineTuneObjective {
        model: FineTuneModel::new(c, &mut rng_for(1, "init")).unwrap(),
        train: &data,
        val: Some(&flipped),
        norm: None,
        eval_batch: 16,
    };
    let encoder = |o: &FineTuneObjective| {
        o.params()
            .iter()
            .filter(|(_, n, _)| n.starts_with("encoder."))
            .map(|(_, _, t)| t.clone())
            .collect::<Vec<_>>()
    };
    let cfg = loop_cfg(100.0, Some(3));
    let before = encoder(&obj);
    let state = TrainState::fresh(&obj, &cfg).unwrap();
    let done = train(&mut obj, &cfg, state, None).unwrap();
    assert!(done.stopped_early);
    assert_eq!(done.bad_epochs, 3);
    assert!(done.trace.len() < 100 * 2);
    assert_eq!(encoder(&obj), before);
}

#[test]
fn regression_head_leaves_backbone_gradient_at_zero() {
    let chips = SyntheticChips::new(12, 2, 3, 16, 2);
    let data = synthetic_task(&chips, TargetKind::Value, 0).unwrap();
    let obj = FineTuneObjective {
        model: FineTuneModel::new(config(HeadKind::Gpp, 0), &mut rng_for(4, "init")).unwrap(),
        train: &data,
        val: None,
        norm: None,
        eval_batch: 4,
    };
    let (_, grads) = obj.loss_grad(&(0..12).collect::<Vec<_>>(), 0).unwrap();
    let mut backbone = 0.0;
    let mut head = 0.0;
    for ((_, name, _), g) in obj.params().iter().zip(&grads) {
        let sq: f64 = g.data().iter().map(|v| v * v).sum();
        if name.starts_with("encoder.") {
            backbone += sq;
        } else {
            head += sq;
        }
    }
    assert_eq!(backbone, 0.0);
    assert!(head > 0.0);
    let Predictions::Values(v) = predict_source(&obj.model, &data, None, 5).unwrap() else { panic!() };
    assert_eq!(v.len(), 12);
}
