//! Experiment configuration: a TOML file, command-line overrides on top,
//! then validation. Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use geomae_core::finetune::{HeadKind, TargetKind};
use geomae_core::mae::{DecoderConfig, EncoderConfig, MaeConfig};
use geomae_core::optim::AdamWConfig;
use geomae_core::patchify::PatchSize;
use geomae_core::trainer::{LoopConfig, PretrainSettings, ScheduleConfig};

use crate::exit::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Pretrain,
    Classify,
    Segment,
    Regress,
}

impl Task {
    pub fn target(self) -> Option<TargetKind> {
        match self {
            Task::Pretrain => None,
            Task::Classify => Some(TargetKind::Class),
            Task::Segment => Some(TargetKind::Mask),
            Task::Regress => Some(TargetKind::Value),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Trained checkpoint read by `eval` and `embed`.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub benchmark: BenchmarkSection,
}

/// A preset, with any field overridable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub patch: Option<usize>,
    pub channels: Option<usize>,
    pub decoder_dim: Option<usize>,
    pub decoder_depth: Option<usize>,
    pub decoder_heads: Option<usize>,
    pub norm_pix: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            dim: None,
            depth: None,
            heads: None,
            mlp_ratio: None,
            patch: None,
            channels: None,
            decoder_dim: None,
            decoder_depth: None,
            decoder_heads: None,
            norm_pix: false,
        }
    }
}

impl ModelSection {
    pub fn mae_config(&self) -> Result<MaeConfig> {
        let base = MaeConfig::preset(&self.preset).map_err(CliError::config)?;
        let e = base.encoder;
        let d = base.decoder;
        let cfg = MaeConfig {
            encoder: EncoderConfig {
                dim: self.dim.unwrap_or(e.dim),
                depth: self.depth.unwrap_or(e.depth),
                heads: self.heads.unwrap_or(e.heads),
                mlp_ratio: self.mlp_ratio.unwrap_or(e.mlp_ratio),
                patch: self.patch.map_or(e.patch, PatchSize::square),
                channels: self.channels.unwrap_or(e.channels),
            },
            decoder: DecoderConfig {
                dim: self.decoder_dim.unwrap_or(d.dim),
                depth: self.decoder_depth.unwrap_or(d.depth),
                heads: self.decoder_heads.unwrap_or(d.heads),
                ..d
            },
            norm_pix: self.norm_pix,
        };
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Chip manifest for pretraining and embedding, task manifest for
    /// fine-tuning tasks.
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Generated chips used when no manifest is given.
    pub synthetic: SyntheticSection,
    /// Held-out shares of a synthetic task, taken from the end.
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Chips used to estimate per-channel statistics.
    pub stats_chips: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            val_manifest: None,
            test_manifest: None,
            synthetic: SyntheticSection::default(),
            val_fraction: 0.1,
            test_fraction: 0.1,
            stats_chips: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub count: usize,
    pub frames: usize,
    pub channels: usize,
    pub size: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            count: 1000,
            frames: 4,
            channels: 6,
            size: 32,
        }
    }
}

/// Loop length, batch size, learning-rate schedule and weight decay.
/// Epoch counts may be fractional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub batch_size: usize,
    pub epochs: f64,
    pub max_steps: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub patience: Option<usize>,
    pub max_lr: f64,
    pub start_lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            batch_size: 8,
            epochs: 1.6,
            max_steps: None,
            checkpoint_every: None,
            patience: None,
            max_lr: 2e-3,
            start_lr: 1e-6,
            warmup_epochs: 0.16,
            min_lr: 1e-5,
            weight_decay: 0.05,
        }
    }
}

impl ScheduleSection {
    pub fn loop_config(&self, seed: u64) -> Result<LoopConfig> {
        let schedule = ScheduleConfig {
            max_lr: self.max_lr,
            start_lr: self.start_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
        };
        schedule.validate().map_err(CliError::config)?;
        if self.batch_size == 0 {
            return Err(CliError::config("schedule.batch_size must be positive"));
        }
        Ok(LoopConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            checkpoint_every: self.checkpoint_every,
            patience: self.patience,
            schedule,
            optim: AdamWConfig::default(),
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub mask_ratio: f64,
    pub drop_prob: f64,
    pub flip: bool,
    /// Random crop `[h, w]` during training.
    pub crop: Option<[usize; 2]>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainSettings::default();
        PretrainSection {
            mask_ratio: d.mask_ratio,
            drop_prob: d.drop_prob,
            flip: true,
            crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// `classifier`, `deconv`, `convup` or `gpp`; chosen from the task when
    /// absent.
    pub head: Option<String>,
    pub n_classes: usize,
    /// Pretraining checkpoint whose encoder initialises the backbone.
    pub backbone: Option<PathBuf>,
    pub freeze_backbone: bool,
    pub class_weights: Option<Vec<f64>>,
    pub eval_batch: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            head: None,
            n_classes: 3,
            backbone: None,
            freeze_backbone: false,
            class_weights: None,
            eval_batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub dataset: String,
    pub budget: usize,
    pub repeats: usize,
    pub lr: [f64; 2],
    pub weight_decay: [f64; 2],
    /// Head depths to search; defaults to the depth the head is built with.
    pub decoder_depth: Option<Vec<usize>>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            dataset: "synthetic".into(),
            budget: 10,
            repeats: 10,
            lr: [1e-4, 1e-2],
            weight_decay: [1e-4, 0.1],
            decoder_depth: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    /// `dotted.key=value`; the value is read as TOML and falls back to a
    /// plain string.
    pub set: Vec<String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("config {} not readable: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(self, o: &Overrides) -> Result<Self> {
        let mut table = toml::Table::try_from(&self).expect("config serialises to a table");
        for kv in &o.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("override {kv:?} is not KEY=VALUE")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut table;
            for p in &parts[..parts.len() - 1] {
                cur = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| CliError::config(format!("override {key}: {p} is not a section")))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), value);
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::config(format!("after overrides: {e}")))?;
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(p) = &o.out {
            cfg.out = Some(p.clone());
        }
        if let Some(p) = &o.preset {
            cfg.model.preset = p.clone();
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::config("no output directory: pass --out or set `out` in the config"))
    }

    pub fn head(&self) -> Result<HeadKind> {
        let target = self
            .task
            .target()
            .ok_or_else(|| CliError::config("task = \"pretrain\" has no head; set task to classify, segment or regress"))?;
        let head = match &self.finetune.head {
            Some(h) => h.parse::<HeadKind>().map_err(CliError::config)?,
            None => match target {
                TargetKind::Class => HeadKind::Classifier,
                TargetKind::Mask => HeadKind::ConvUp,
                TargetKind::Value => HeadKind::Gpp,
            },
        };
        if head.target() != target {
            return Err(CliError::config(format!(
                "head {} does not fit task {:?}",
                head.name(),
                self.task
            )));
        }
        Ok(head)
    }

    pub fn pretrain_settings(&self) -> Result<PretrainSettings> {
        let p = &self.pretrain;
        if !(0.0..1.0).contains(&p.mask_ratio) || !(0.0..=1.0).contains(&p.drop_prob) {
            return Err(CliError::config(format!(
                "pretrain.mask_ratio must lie in [0, 1) and drop_prob in [0, 1], got {} and {}",
                p.mask_ratio, p.drop_prob
            )));
        }
        Ok(PretrainSettings {
            mask_ratio: p.mask_ratio,
            drop_prob: p.drop_prob,
        })
    }

    /// Input manifests that are named must exist.
    pub fn check_manifests(&self) -> Result<()> {
        let d = &self.data;
        for p in [&d.manifest, &d.val_manifest, &d.test_manifest].into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::config(format!("manifest not found: {}", p.display())));
            }
        }
        let fr = [d.val_fraction, d.test_fraction];
        if fr.iter().any(|f| !(0.0..1.0).contains(f)) || fr.iter().sum::<f64>() >= 1.0 {
            return Err(CliError::config("data.val_fraction and data.test_fraction must be in [0, 1) and sum below 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_toml(), "t").unwrap(), c);
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
task = "segment"
seed = 9
out = "runs/seg"

[model]
preset = "tiny"
dim = 32
patch = 8
channels = 3

[data]
manifest = "task.csv"
val_fraction = 0.2

[data.synthetic]
count = 50
frames = 2

[schedule]
max_steps = 40
max_lr = 1e-3
start_lr = 1e-6
patience = 3

[finetune]
head = "deconv"
class_weights = [1.0, 2.5, 0.5]
freeze_backbone = true

[benchmark]
budget = 4
decoder_depth = [4]
"#;
        let c = ExperimentConfig::parse(text, "t").unwrap();
        assert_eq!(c.task, Task::Segment);
        assert_eq!(c.model.dim, Some(32));
        assert_eq!(c.schedule.max_lr, 1e-3);
        assert_eq!(c.data.synthetic.count, 50);
        assert_eq!(c.data.synthetic.size, 32);
        let again = ExperimentConfig::parse(&c.to_toml(), "t").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let e = ExperimentConfig::parse("seed = 1\n\n[model]\npreset = \"tiny\"\nwidth = 3\n", "cfg.toml").unwrap_err();
        assert_eq!(e.code, crate::exit::CONFIG);
        assert!(e.message.contains("line 5"), "{}", e.message);
        assert!(e.message.contains("width"), "{}", e.message);
        let e = ExperimentConfig::parse("seed = \"x\"\n", "cfg.toml").unwrap_err();
        assert!(e.message.contains("line 1"), "{}", e.message);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = Overrides {
            seed: Some(4),
            out: Some("o".into()),
            preset: Some("300M".into()),
            set: vec![
                "schedule.max_steps=12".into(),
                "finetune.head=convup".into(),
                "task=\"classify\"".into(),
                "data.synthetic.size=16".into(),
            ],
        };
        let c = ExperimentConfig::default().apply(&o).unwrap();
        assert_eq!((c.seed, c.model.preset.as_str()), (4, "300M"));
        assert_eq!(c.schedule.max_steps, Some(12));
        assert_eq!(c.finetune.head.as_deref(), Some("convup"));
        assert_eq!(c.task, Task::Classify);
        assert_eq!(c.data.synthetic.size, 16);
        assert!(c.head().is_err());
        let bad = Overrides {
            set: vec!["model.nope=1".into()],
            ..Overrides::default()
        };
        assert!(ExperimentConfig::default().apply(&bad).is_err());
    }

    #[test]
    fn model_section_builds_presets() {
        let m = ModelSection::default().mae_config().unwrap();
        assert_eq!(m.encoder.dim, 64);
        let bad = ModelSection {
            heads: Some(5),
            ..ModelSection::default()
        };
        assert!(bad.mae_config().is_err());
    }
}
