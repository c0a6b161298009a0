//! Learning-rate schedule, augmentation, and a deterministic, resumable
//! training loop shared by pretraining and fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{stack, Chip, ChipSource};
use crate::error::{invalid, Error, Result};
use crate::mae::{draw_drops, Mae, StepDraw};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::seed::rng_indexed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub start_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            max_lr: 5e-4,
            start_lr: 1e-6,
            warmup_epochs: 40.0,
            total_epochs: 400.0,
            min_lr: 0.0,
            weight_decay: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.max_lr, self.start_lr, self.warmup_epochs, self.total_epochs, self.min_lr]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.start_lr >= self.max_lr || self.warmup_epochs >= self.total_epochs || self.min_lr > self.max_lr {
            return Err(invalid!(
                "schedule needs 0 ≤ start_lr < max_lr, min_lr ≤ max_lr and 0 ≤ warmup < total epochs: {self:?}"
            ));
        }
        Ok(())
    }
}

/// Linear warmup from `start_lr` to `max_lr`, then half-cosine to `min_lr`
/// at `total_epochs`; `min_lr` beyond that.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    let e = epoch.max(0.0);
    if e < cfg.warmup_epochs {
        return cfg.start_lr + (cfg.max_lr - cfg.start_lr) * e / cfg.warmup_epochs;
    }
    let progress = ((e - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)).min(1.0);
    cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Random crop plus optional horizontal flip of a `[T, C, H, W]` sample;
/// one offset and one flip decision for every frame.
pub fn augment(sample: &Tensor, crop: (usize, usize), flip: bool, rng: &mut impl Rng) -> Result<Tensor> {
    let s = sample.shape();
    if s.len() != 4 {
        return Err(invalid!("augment expects [T, C, H, W], got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    if crop.0 == 0 || crop.1 == 0 || crop.0 > h || crop.1 > w {
        return Err(invalid!("cannot crop {h}x{w} to {}x{}", crop.0, crop.1));
    }
    let oy = rng.random_range(0..=h - crop.0);
    let ox = rng.random_range(0..=w - crop.1);
    let mirror = flip && rng.random::<bool>();
    Ok(crop_flip(sample, (oy, ox), crop, mirror))
}

/// The deterministic part of [`augment`].
pub fn crop_flip(sample: &Tensor, offset: (usize, usize), size: (usize, usize), mirror: bool) -> Tensor {
    let s = sample.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(planes * size.0 * size.1);
    for p in 0..planes {
        let plane = &sample.data()[p * h * w..(p + 1) * h * w];
        for y in offset.0..offset.0 + size.0 {
            let row = &plane[y * w + offset.1..y * w + offset.1 + size.1];
            if mirror {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], size.0, size.1], out).expect("crop shape")
}

/// Per-channel reflectance standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over the first `limit` chips of `source`.
    pub fn estimate(source: &dyn ChipSource, limit: usize) -> Result<Self> {
        let n = source.len().min(limit);
        if n == 0 {
            return Err(invalid!("cannot estimate channel statistics from no chips"));
        }
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        let mut count = 0usize;
        for i in 0..n {
            let c = source.chip(i)?;
            let s = c.values.shape();
            let (ch, plane) = (s[1], s[2] * s[3]);
            if sum.is_empty() {
                sum = vec![0.0; ch];
                sq = vec![0.0; ch];
            } else if sum.len() != ch {
                return Err(invalid!("chip {i} has {ch} channels, expected {}", sum.len()));
            }
            for (k, block) in c.values.data().chunks(plane).enumerate() {
                let band = k % ch;
                for v in block {
                    sum[band] += v;
                    sq[band] += v * v;
                }
            }
            count += s[0] * plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, values: &mut Tensor) -> Result<()> {
        let s = values.shape().to_vec();
        let n = s.len();
        if n < 3 || s[n - 3] != self.mean.len() {
            return Err(invalid!("statistics for {} channels applied to {s:?}", self.mean.len()));
        }
        let (ch, plane) = (s[n - 3], s[n - 2] * s[n - 1]);
        for (k, block) in values.data_mut().chunks_mut(plane).enumerate() {
            let band = k % ch;
            for v in block {
                *v = (*v - self.mean[band]) / self.std[band];
            }
        }
        Ok(())
    }

    pub fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        meta.insert("norm.mean".into(), join(&self.mean));
        meta.insert("norm.std".into(), join(&self.std));
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Option<Self>> {
        let parse = |k: &str| -> Result<Option<Vec<f64>>> {
            meta.get(k)
                .map(|s| {
                    s.split(';')
                        .map(|x| x.parse::<f64>().map_err(|_| invalid!("{k}: bad value {x:?}")))
                        .collect()
                })
                .transpose()
        };
        match (parse("norm.mean")?, parse("norm.std")?) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Some(ChannelStats { mean, std })),
            (None, None) => Ok(None),
            _ => Err(invalid!("inconsistent normalisation statistics")),
        }
    }
}

/// Input preparation shared by training and evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Preprocess {
    pub crop: Option<(usize, usize)>,
    pub flip: bool,
    pub norm: Option<ChannelStats>,
}

impl Preprocess {
    /// Augmented (when `rng` is given) and normalised chip.
    pub fn prepare(&self, mut chip: Chip, rng: Option<&mut dyn rand::RngCore>) -> Result<Chip> {
        match (rng, self.crop) {
            (Some(rng), crop) => {
                let s = chip.values.shape();
                let size = crop.unwrap_or((s[2], s[3]));
                chip.values = augment(&chip.values, size, self.flip, &mut RngRef(rng))?;
            }
            (None, Some(size)) => {
                let s = chip.values.shape();
                if size.0 > s[2] || size.1 > s[3] {
                    return Err(invalid!("cannot crop {}x{} to {}x{}", s[2], s[3], size.0, size.1));
                }
                let off = ((s[2] - size.0) / 2, (s[3] - size.1) / 2);
                chip.values = crop_flip(&chip.values, off, size, false);
            }
            (None, None) => {}
        }
        if let Some(n) = &self.norm {
            n.apply(&mut chip.values)?;
        }
        Ok(chip)
    }
}

struct RngRef<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngRef<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Something the loop can optimise.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Number of training samples.
    fn train_len(&self) -> usize;
    /// Loss and per-parameter gradients on the given samples. Any randomness
    /// must derive from `step`.
    fn loss_grad(&self, indices: &[usize], step: u64) -> Result<(f64, Vec<Tensor>)>;
    /// Which parameters the optimiser may change.
    fn trainable(&self) -> Vec<bool> {
        vec![true; self.params().len()]
    }
    /// Validation loss, if a validation set exists.
    fn val_loss(&self) -> Result<Option<f64>> {
        Ok(None)
    }
    /// Description stored alongside parameters in checkpoints.
    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub batch_size: usize,
    /// Length of the run in epochs; may be fractional.
    pub epochs: f64,
    pub max_steps: Option<u64>,
    pub checkpoint_every: Option<u64>,
    /// Early-stopping patience in epochs, on validation loss.
    pub patience: Option<usize>,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl LoopConfig {
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.batch_size.max(1)).max(1) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        let t = (self.epochs * self.steps_per_epoch(n) as f64).round() as u64;
        self.max_steps.map_or(t, |m| m.min(t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch_fraction: f64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| invalid!("loss trace: {e}");
    w.write_record(["step", "epoch_fraction", "lr", "loss"]).map_err(err)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.epoch_fraction.to_string(), r.lr.to_string(), r.loss.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| err(csv::Error::from(e.into_error())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(bytes.as_slice()).records().enumerate() {
        let bad = || Error::Format {
            what: "loss trace",
            detail: format!("row {}", i + 2),
        };
        let rec = rec.map_err(|_| bad())?;
        let num = |k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        out.push(TraceRow {
            step: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            epoch_fraction: num(1)?,
            lr: num(2)?,
            loss: num(3)?,
        });
    }
    Ok(out)
}

/// Loop state; everything needed to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub opt: AdamW,
    pub trace: Vec<TraceRow>,
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn fresh(obj: &dyn Objective, cfg: &LoopConfig) -> Result<Self> {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: cfg.schedule.weight_decay,
                ..cfg.optim
            },
            obj.params(),
        );
        opt.set_trainable(obj.trainable())?;
        Ok(TrainState {
            step: 0,
            opt,
            trace: Vec::new(),
            best_val: None,
            bad_epochs: 0,
            stopped_early: false,
        })
    }
}

pub const TRACE_FILE: &str = "loss_trace.csv";

/// Parameters, optimiser moments, loop counters and the trace so far.
pub fn save_checkpoint(dir: &Path, obj: &dyn Objective, state: &TrainState) -> Result<()> {
    let mut tensors = obj.params().clone();
    state.opt.export(obj.params(), &mut tensors);
    let mut meta = obj.meta();
    meta.insert("train.step".into(), state.step.to_string());
    meta.insert("train.optim_t".into(), state.opt.t.to_string());
    meta.insert("train.bad_epochs".into(), state.bad_epochs.to_string());
    meta.insert("train.stopped_early".into(), state.stopped_early.to_string());
    if let Some(b) = state.best_val {
        meta.insert("train.best_val".into(), b.to_string());
    }
    Checkpoint::new(tensors, meta).save(dir)?;
    write_trace(&dir.join(TRACE_FILE), &state.trace)
}

/// Restores parameters into `obj` and returns the loop state.
pub fn load_checkpoint(dir: &Path, obj: &mut dyn Objective, cfg: &LoopConfig) -> Result<TrainState> {
    let ck = Checkpoint::load(dir)?;
    obj.params_mut().load_from(&ck.tensors)?;
    let mut state = TrainState::fresh(obj, cfg)?;
    state.opt.import(obj.params(), &ck.tensors, ck.meta_parse("train.optim_t")?)?;
    state.step = ck.meta_parse("train.step")?;
    state.bad_epochs = ck.meta_parse("train.bad_epochs")?;
    state.stopped_early = ck.meta_parse("train.stopped_early")?;
    state.best_val = match ck.meta.get("train.best_val") {
        Some(_) => Some(ck.meta_parse("train.best_val")?),
        None => None,
    };
    state.trace = read_trace(&dir.join(TRACE_FILE))?;
    Ok(state)
}

/// Sample indices for `step`: epoch-wise permutations seeded by epoch.
pub fn batch_indices(cfg: &LoopConfig, n: usize, step: u64) -> Vec<usize> {
    let spe = cfg.steps_per_epoch(n);
    let (epoch, k) = (step / spe, (step % spe) as usize);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_indexed(cfg.seed, "data", epoch));
    let bs = cfg.batch_size.min(n);
    perm[k * bs..(k + 1) * bs].to_vec()
}

/// Runs from `state.step` to the configured end. Checkpoints go to
/// `out/checkpoints/step-NNNNNN` and, at the end, `out/checkpoint`.
pub fn train(obj: &mut dyn Objective, cfg: &LoopConfig, mut state: TrainState, out: Option<&Path>) -> Result<TrainState> {
    cfg.schedule.validate()?;
    let n = obj.train_len();
    if n == 0 || cfg.batch_size == 0 {
        return Err(invalid!("training needs samples and a positive batch size"));
    }
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    while state.step < total && !state.stopped_early {
        let step = state.step;
        let epoch_fraction = step as f64 / spe as f64;
        let lr = lr_at(epoch_fraction, &cfg.schedule);
        let idx = batch_indices(cfg, n, step);
        let (loss, grads) = obj.loss_grad(&idx, step)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {step}")));
        }
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} at step {step}",
                obj.params().name(obj.params().iter().nth(bad).unwrap().0)
            )));
        }
        state.opt.step(obj.params_mut(), &grads, lr)?;
        state.trace.push(TraceRow {
            step,
            epoch_fraction,
            lr,
            loss,
        });
        state.step += 1;
        log::debug!("step {step} lr {lr:.3e} loss {loss:.6}");

        if state.step.is_multiple_of(spe) {
            if let (Some(v), Some(patience)) = (obj.val_loss()?, cfg.patience) {
                if state.best_val.is_none_or(|b| v < b) {
                    state.best_val = Some(v);
                    state.bad_epochs = 0;
                } else {
                    state.bad_epochs += 1;
                    if state.bad_epochs >= patience {
                        log::info!("early stop after epoch {}", state.step / spe);
                        state.stopped_early = true;
                    }
                }
            }
        }
        if let (Some(out), Some(every)) = (out, cfg.checkpoint_every) {
            if every > 0 && state.step.is_multiple_of(every) {
                save_checkpoint(&out.join("checkpoints").join(format!("step-{:06}", state.step)), obj, &state)?;
            }
        }
    }
    if let Some(out) = out {
        save_checkpoint(&out.join("checkpoint"), obj, &state)?;
        write_trace(&out.join(TRACE_FILE), &state.trace)?;
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainSettings {
    pub mask_ratio: f64,
    pub drop_prob: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            mask_ratio: 0.75,
            drop_prob: 0.1,
        }
    }
}

/// Masked reconstruction over a chip source.
pub struct PretrainObjective<'a> {
    pub model: Mae,
    pub source: &'a dyn ChipSource,
    pub settings: PretrainSettings,
    pub prep: Preprocess,
    pub seed: u64,
}

impl PretrainObjective<'_> {
    pub fn batch(&self, indices: &[usize], step: u64) -> Result<crate::patchify::ReflectanceBatch> {
        let mut rng = rng_indexed(self.seed, "augment", step);
        let chips = indices
            .iter()
            .map(|&i| self.prep.prepare(self.source.chip(i)?, Some(&mut rng)))
            .collect::<Result<Vec<_>>>()?;
        stack(&chips)
    }

    pub fn draw(&self, batch: &crate::patchify::ReflectanceBatch, step: u64) -> Result<StepDraw> {
        let plan = self
            .model
            .draw_plan(batch, self.settings.mask_ratio, &mut rng_indexed(self.seed, "mask", step))?;
        let drops = draw_drops(batch, self.settings.drop_prob, &mut rng_indexed(self.seed, "drop", step))?;
        Ok(StepDraw { plan, drops })
    }
}

impl Objective for PretrainObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn train_len(&self) -> usize {
        self.source.len()
    }

    fn loss_grad(&self, indices: &[usize], step: u64) -> Result<(f64, Vec<Tensor>)> {
        let batch = self.batch(indices, step)?;
        let draw = self.draw(&batch, step)?;
        self.model.grad(&batch, &draw)
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut m = mae_meta(&self.model.cfg);
        m.insert("task".into(), "pretrain".into());
        m.insert("mask_ratio".into(), self.settings.mask_ratio.to_string());
        m.insert("drop_prob".into(), self.settings.drop_prob.to_string());
        if let Some(n) = &self.prep.norm {
            n.to_meta(&mut m);
        }
        m
    }
}

/// Architecture description for checkpoints.
pub fn mae_meta(cfg: &crate::mae::MaeConfig) -> BTreeMap<String, String> {
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    let mut m = BTreeMap::new();
    for (k, v) in [
        ("encoder.dim", e.dim.to_string()),
        ("encoder.depth", e.depth.to_string()),
        ("encoder.heads", e.heads.to_string()),
        ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
        ("encoder.patch", e.patch.h.to_string()),
        ("encoder.channels", e.channels.to_string()),
        ("decoder.dim", d.dim.to_string()),
        ("decoder.depth", d.depth.to_string()),
        ("decoder.heads", d.heads.to_string()),
        ("decoder.mlp_ratio", d.mlp_ratio.to_string()),
        ("norm_pix", cfg.norm_pix.to_string()),
    ] {
        m.insert(k.to_string(), v);
    }
    m
}

/// Inverse of [`mae_meta`].
pub fn mae_config_from_meta(ck: &Checkpoint) -> Result<crate::mae::MaeConfig> {
    use crate::mae::{DecoderConfig, EncoderConfig, MaeConfig};
    use crate::patchify::PatchSize;
    Ok(MaeConfig {
        encoder: EncoderConfig {
            dim: ck.meta_parse("encoder.dim")?,
            depth: ck.meta_parse("encoder.depth")?,
            heads: ck.meta_parse("encoder.heads")?,
            mlp_ratio: ck.meta_parse("encoder.mlp_ratio")?,
            patch: PatchSize::square(ck.meta_parse("encoder.patch")?),
            channels: ck.meta_parse("encoder.channels")?,
        },
        decoder: DecoderConfig {
            dim: ck.meta_parse("decoder.dim")?,
            depth: ck.meta_parse("decoder.depth")?,
            heads: ck.meta_parse("decoder.heads")?,
            mlp_ratio: ck.meta_parse("decoder.mlp_ratio")?,
        },
        norm_pix: ck.meta_parse("norm_pix")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn schedule_anchors() {
        let c = ScheduleConfig::default();
        assert_eq!(lr_at(0.0, &c), 1e-6);
        assert_eq!(lr_at(40.0, &c), 5e-4);
        assert_eq!(lr_at(400.0, &c), 0.0);
        assert_eq!(lr_at(1000.0, &c), 0.0);
        let below = lr_at(40.0 - 1e-9, &c);
        assert!((below - 5e-4).abs() < 1e-12);
        assert!(ScheduleConfig { warmup_epochs: 400.0, ..c }.validate().is_err());
        assert!(ScheduleConfig { start_lr: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn crop_window_matches_source() {
        let src = Tensor::from_fn(&[2, 3, 10, 9], |i| i as f64);
        let mut rng = rng_for(0, "aug");
        let out = augment(&src, (4, 5), false, &mut rng).unwrap();
        let mut rng = rng_for(0, "aug");
        let oy = rng.random_range(0..=6usize);
        let ox = rng.random_range(0..=4usize);
        for p in 0..6 {
            for y in 0..4 {
                for x in 0..5 {
                    let want = src.data()[p * 90 + (oy + y) * 9 + ox + x];
                    assert_eq!(out.data()[p * 20 + y * 5 + x], want);
                }
            }
        }
        assert!(augment(&src, (11, 2), false, &mut rng).is_err());
    }

    #[test]
    fn flip_is_shared_across_frames_and_involutive() {
        let src = Tensor::from_fn(&[4, 2, 6, 6], |i| ((i * 31) % 17) as f64);
        let once = crop_flip(&src, (0, 0), (6, 6), true);
        assert_eq!(crop_flip(&once, (0, 0), (6, 6), true), src);
        for seed in 0..20 {
            let out = augment(&src, (4, 4), true, &mut rng_for(seed, "aug")).unwrap();
            let found = (0..=2).any(|oy| {
                (0..=2).any(|ox| {
                    [false, true].iter().any(|&m| {
                        crop_flip(&src, (oy, ox), (4, 4), m) == out
                    })
                })
            });
            assert!(found, "seed {seed}: frames not cropped consistently");
        }
    }

    #[test]
    fn stats_round_trip_through_meta() {
        let s = ChannelStats {
            mean: vec![0.1, 0.30000000000000004],
            std: vec![1.0 / 3.0, 2.5],
        };
        let mut m = BTreeMap::new();
        s.to_meta(&mut m);
        assert_eq!(ChannelStats::from_meta(&m).unwrap(), Some(s));
        assert_eq!(ChannelStats::from_meta(&BTreeMap::new()).unwrap(), None);
    }
}
