//! Labeled data, fine-tuning runs and scoring shared by the `finetune`,
//! `eval` and `benchmark` commands.

use std::path::Path;

use geomae_bench::metrics::{confusion, regression_scores, scores};
use geomae_bench::protocol::HParams;
use geomae_core::checkpoint::Checkpoint;
use geomae_core::data::SyntheticChips;
use geomae_core::finetune::{
    encoder_config_from_meta, predict_source, synthetic_task, FineTuneConfig, FineTuneModel, FineTuneObjective, HeadKind, InputsOf,
    LabeledSample, LabeledSource, ManifestSamples, Predictions, Target,
};
use geomae_core::heads::upsample_blocks;
use geomae_core::mae::EncoderConfig;
use geomae_core::seed::{rng_for, sub_seed};
use geomae_core::trainer::{train, ChannelStats, TrainState};

use crate::config::ExperimentConfig;
use crate::exit::{CliError, Result};

pub struct TaskData {
    pub train: Box<dyn LabeledSource>,
    pub val: Option<Box<dyn LabeledSource>>,
    pub test: Option<Box<dyn LabeledSource>>,
}

/// Manifests when configured; otherwise a synthetic task whose chips are
/// fixed by the master seed and split train / val / test from the end.
pub fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    cfg.check_manifests()?;
    let kind = cfg.head()?.target();
    let d = &cfg.data;
    if let Some(m) = &d.manifest {
        let open = |p: &Path| -> Result<Box<dyn LabeledSource>> { Ok(Box::new(ManifestSamples::open(p, kind)?)) };
        let train = open(m)?;
        if train.is_empty() {
            return Err(CliError::data(format!("{}: no samples", m.display())));
        }
        return Ok(TaskData {
            train,
            val: d.val_manifest.as_deref().map(open).transpose()?,
            test: d.test_manifest.as_deref().map(open).transpose()?,
        });
    }
    let (train, val, test) = synthetic_splits(cfg)?;
    let boxed = |v: Vec<LabeledSample>| (!v.is_empty()).then(|| Box::new(v) as Box<dyn LabeledSource>);
    Ok(TaskData {
        train: Box::new(train),
        val: boxed(val),
        test: boxed(test),
    })
}

/// The synthetic task as (train, val, test).
pub fn synthetic_splits(cfg: &ExperimentConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>)> {
    let d = &cfg.data;
    let s = &d.synthetic;
    let chips = SyntheticChips::new(s.count, s.frames, s.channels, s.size, sub_seed(cfg.seed, "data"));
    let mut all = synthetic_task(&chips, cfg.head()?.target(), cfg.finetune.n_classes)?;
    let n = all.len();
    let n_test = (n as f64 * d.test_fraction).round() as usize;
    let n_val = (n as f64 * d.val_fraction).round() as usize;
    if n_test + n_val >= n {
        return Err(CliError::config(format!("{n} synthetic samples leave nothing to train on")));
    }
    let test = all.split_off(n - n_test);
    let val = all.split_off(n - n_test - n_val);
    Ok((all, val, test))
}

/// Describes how two encoder configurations differ, field by field.
pub fn encoder_mismatch(found: &EncoderConfig, want: &EncoderConfig) -> Option<String> {
    let mut diffs = Vec::new();
    let mut cmp = |name: &str, a: String, b: String| {
        if a != b {
            diffs.push(format!("{name} {a} vs {b}"));
        }
    };
    cmp("dim", found.dim.to_string(), want.dim.to_string());
    cmp("depth", found.depth.to_string(), want.depth.to_string());
    cmp("heads", found.heads.to_string(), want.heads.to_string());
    cmp("mlp_ratio", found.mlp_ratio.to_string(), want.mlp_ratio.to_string());
    cmp("patch", format!("{:?}", found.patch), format!("{:?}", want.patch));
    cmp("channels", found.channels.to_string(), want.channels.to_string());
    (!diffs.is_empty()).then(|| diffs.join(", "))
}

/// Number of decoding blocks a head is built with.
pub fn head_depth(ft: &FineTuneConfig) -> Result<usize> {
    Ok(match ft.head {
        HeadKind::Classifier => 1,
        HeadKind::Deconv => 4,
        HeadKind::ConvUp => {
            let (_, gh, gw) = ft.grid()?;
            upsample_blocks((gh, gw), ft.image)
        }
        HeadKind::Gpp => 3,
    })
}

pub fn finetune_config(cfg: &ExperimentConfig, data: &TaskData) -> Result<FineTuneConfig> {
    let first = data.train.sample(0)?;
    let s = first.chip.values.shape().to_vec();
    let encoder = cfg.model.mae_config()?.encoder;
    if s[1] != encoder.channels {
        return Err(CliError::config(format!(
            "model expects {} channels but the data has {}",
            encoder.channels, s[1]
        )));
    }
    let aux = first.aux.as_ref().map(|a| {
        let a = a.shape();
        (a[0], (a[1], a[2]))
    });
    let ft = FineTuneConfig {
        encoder,
        head: cfg.head()?,
        n_classes: cfg.finetune.n_classes,
        frames: s[0],
        image: (s[2], s[3]),
        aux,
        freeze_backbone: cfg.finetune.freeze_backbone,
        class_weights: cfg.finetune.class_weights.clone(),
    };
    ft.validate()?;
    Ok(ft)
}

pub struct Trained {
    pub model: FineTuneModel,
    pub norm: Option<ChannelStats>,
    pub state: TrainState,
}

/// One fine-tuning run. `hp` replaces the configured learning rate and
/// weight decay; its decoder depth must match the head.
pub fn fine_tune(cfg: &ExperimentConfig, data: &TaskData, hp: Option<&HParams>, seed: u64, out: Option<&Path>) -> Result<Trained> {
    let ft = finetune_config(cfg, data)?;
    if let Some(hp) = hp {
        let depth = head_depth(&ft)?;
        if hp.decoder_depth != depth {
            return Err(CliError::config(format!(
                "head {} is built with depth {depth}, not {}",
                ft.head.name(),
                hp.decoder_depth
            )));
        }
    }
    let mut model = FineTuneModel::new(ft, &mut rng_for(seed, "init"))?;
    let mut norm = None;
    if let Some(path) = &cfg.finetune.backbone {
        let ck = Checkpoint::load(&crate::commands::resolve_checkpoint(path)).map_err(|e| CliError::from(e).context("backbone"))?;
        let found = encoder_config_from_meta(&ck)?;
        if let Some(d) = encoder_mismatch(&found, &model.cfg.encoder) {
            return Err(CliError::config(format!(
                "backbone {} does not match the model config: {d}",
                path.display()
            )));
        }
        model.load_backbone(&ck.tensors)?;
        norm = ChannelStats::from_meta(&ck.meta)?;
    }
    let norm = match norm {
        Some(n) => Some(n),
        None => Some(ChannelStats::estimate(&InputsOf(data.train.as_ref()), cfg.data.stats_chips)?),
    };
    let mut lc = cfg.schedule.loop_config(seed)?;
    if let Some(hp) = hp {
        lc.schedule.max_lr = hp.lr;
        lc.schedule.weight_decay = hp.weight_decay;
        lc.schedule.validate()?;
    }
    let mut obj = FineTuneObjective {
        model,
        train: data.train.as_ref(),
        val: data.val.as_deref(),
        norm,
        eval_batch: cfg.finetune.eval_batch,
    };
    let state = TrainState::fresh(&obj, &lc)?;
    let state = train(&mut obj, &lc, state, out)?;
    Ok(Trained {
        model: obj.model,
        norm: obj.norm,
        state,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Name and value of every metric, primary first.
    pub metrics: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn primary(&self) -> (&str, f64) {
        let (k, v) = &self.metrics[0];
        (k, *v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

/// Primary metric: overall accuracy for classes, mean IoU for masks, R² for
/// values.
pub fn score_predictions(preds: &Predictions, targets: &[Target], n_classes: usize) -> Result<Evaluation> {
    let labels = |want: &dyn Fn(&Target) -> Option<Vec<usize>>| -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for t in targets {
            out.extend(want(t).ok_or_else(|| CliError::data("targets do not match the head"))?);
        }
        Ok(out)
    };
    let class_metrics = |pred: Vec<usize>, truth: Vec<usize>, primary: &str| -> Result<Evaluation> {
        let s = scores(&confusion(&pred, &truth, n_classes)?)?;
        let mut m = vec![
            ("overall_acc".to_string(), s.overall_acc),
            ("miou".to_string(), s.miou),
            ("macro_f1".to_string(), s.macro_f1),
            ("weighted_f1".to_string(), s.weighted_f1),
            ("precision".to_string(), s.precision),
            ("recall".to_string(), s.recall),
        ];
        for (c, v) in s.per_class_iou.iter().enumerate() {
            if let Some(v) = v {
                m.push((format!("iou_{c}"), *v));
            }
        }
        let at = m.iter().position(|(k, _)| k == primary).expect("primary metric listed");
        m.swap(0, at);
        Ok(Evaluation { metrics: m })
    };
    match preds {
        Predictions::Classes(p) => {
            let truth = labels(&|t| match t {
                Target::Class(c) => Some(vec![*c]),
                _ => None,
            })?;
            class_metrics(p.clone(), truth, "overall_acc")
        }
        Predictions::Masks(p) => {
            let truth = labels(&|t| match t {
                Target::Mask(m) => Some(m.clone()),
                _ => None,
            })?;
            class_metrics(p.concat(), truth, "miou")
        }
        Predictions::Values(p) => {
            let truth: Vec<f64> = targets
                .iter()
                .map(|t| match t {
                    Target::Value(v) => Ok(*v),
                    _ => Err(CliError::data("targets do not match the head")),
                })
                .collect::<Result<_>>()?;
            let r = regression_scores(p, &truth)?;
            Ok(Evaluation {
                metrics: vec![("r2".into(), r.r2), ("rmse".into(), r.rmse)],
            })
        }
    }
}

pub fn evaluate(model: &FineTuneModel, norm: Option<&ChannelStats>, source: &dyn LabeledSource, batch: usize) -> Result<Evaluation> {
    if source.is_empty() {
        return Err(CliError::data("nothing to evaluate"));
    }
    let preds = predict_source(model, source, norm, batch)?;
    let targets = (0..source.len()).map(|i| Ok(source.sample(i)?.target)).collect::<Result<Vec<_>>>()?;
    score_predictions(&preds, &targets, model.cfg.n_classes)
}
