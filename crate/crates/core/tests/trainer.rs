use std::fs;

use geomae_core::data::SyntheticChips;
use geomae_core::mae::{Mae, MaeConfig};
use geomae_core::optim::AdamWConfig;
use geomae_core::seed::rng_for;
use geomae_core::trainer::{
    load_checkpoint, train, ChannelStats, LoopConfig, Objective, PretrainObjective, PretrainSettings, Preprocess,
    ScheduleConfig, TrainState, TRACE_FILE,
};

fn toy_loop(seed: u64, steps: u64) -> LoopConfig {
    LoopConfig {
        batch_size: 8,
        epochs: 1.6,
        max_steps: Some(steps),
        checkpoint_every: None,
        patience: None,
        schedule: ScheduleConfig {
            max_lr: 2e-3,
            start_lr: 1e-6,
            warmup_epochs: 0.16,
            total_epochs: 1.6,
            min_lr: 1e-5,
            weight_decay: 0.05,
        },
        optim: AdamWConfig::default(),
        seed,
    }
}

fn objective(src: &SyntheticChips, seed: u64) -> PretrainObjective<'_> {
    let model = Mae::new(MaeConfig::preset("tiny").unwrap(), &mut rng_for(seed, "init")).unwrap();
    PretrainObjective {
        model,
        source: src,
        settings: PretrainSettings::default(),
        prep: Preprocess {
            crop: None,
            flip: true,
            norm: Some(ChannelStats::estimate(src, 64).unwrap()),
        },
        seed,
    }
}

#[test]
fn toy_pretraining_halves_the_loss() {
    let src = SyntheticChips::new(1000, 4, 6, 32, 7);
    let cfg = toy_loop(7, 200);
    let mut obj = objective(&src, 7);
    let state = TrainState::fresh(&obj, &cfg).unwrap();
    let out = train(&mut obj, &cfg, state, None).unwrap();
    let first: f64 = out.trace[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let last: f64 = out.trace[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    println!("initial {} final {} (first-10 {first}, last-10 {last})", out.trace[0].loss, out.trace[199].loss);
    assert_eq!(out.trace.len(), 200);
    assert!(out.trace[199].loss <= 0.5 * out.trace[0].loss);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let src = SyntheticChips::new(40, 2, 6, 32, 1);
    let mut cfg = toy_loop(1, 3);
    cfg.schedule = ScheduleConfig {
        max_lr: 0.0,
        start_lr: 0.0,
        ..cfg.schedule
    };
    let mut obj = objective(&src, 1);
    let before = obj.params().clone();
    // start_lr < max_lr is part of the schedule contract, so drive the
    // optimiser directly at lr 0 instead.
    assert!(cfg.schedule.validate().is_err());
    let mut state = TrainState::fresh(&obj, &toy_loop(1, 3)).unwrap();
    for step in 0..3 {
        let (_, grads) = obj.loss_grad(&[0, 1, 2, 3], step).unwrap();
        state.opt.step(obj.params_mut(), &grads, 0.0).unwrap();
    }
    assert_eq!(obj.params(), &before);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let src = SyntheticChips::new(64, 4, 6, 32, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_loop(3, 12);
    cfg.checkpoint_every = Some(5);

    let mut full = objective(&src, 3);
    let s = TrainState::fresh(&full, &cfg).unwrap();
    let done = train(&mut full, &cfg, s, Some(dir.path())).unwrap();

    let mut resumed = objective(&src, 99);
    let ck = dir.path().join("checkpoints").join("step-000005");
    let state = load_checkpoint(&ck, &mut resumed, &cfg).unwrap();
    assert_eq!(state.step, 5);
    resumed.seed = 3;
    let again = train(&mut resumed, &cfg, state, None).unwrap();

    assert_eq!(again.trace, done.trace);
    assert_eq!(resumed.params(), full.params());
    assert_eq!(again.opt, done.opt);
    let trace = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    assert!(trace.starts_with("step,epoch_fraction,lr,loss\n0,0,"));
}

#[test]
fn same_seed_gives_identical_trace() {
    let src = SyntheticChips::new(32, 4, 6, 32, 5);
    let cfg = toy_loop(5, 6);
    let run = || {
        let mut o = objective(&src, 5);
        let s = TrainState::fresh(&o, &cfg).unwrap();
        train(&mut o, &cfg, s, None).unwrap().trace
    };
    assert_eq!(run(), run());
}
