//! Supervised fine-tuning: the encoder over the full token grid feeding one
//! task head, trained through the shared loop in [`crate::trainer`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::chip::{format_date, parse_date, read_chip, ChipRecord};
use crate::data::{stack, Chip, ChipSource, SyntheticChips};
use crate::error::{invalid, Error, Result};
use crate::heads::{
    frames_to_channels, AuxVariables, ClassifierHead, ConvUpHead, ConvUpHeadConfig, DeconvHead, DeconvHeadConfig,
    GppHead, GppHeadConfig,
};
use crate::mae::{init_params, EncoderConfig, Encoder};
use crate::nn::ParamStore;
use crate::patchify::{grid_dims, ReflectanceBatch};
use crate::posenc::GeoTemporalMetadata;
use crate::tensor::Tensor;
use crate::trainer::{ChannelStats, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Pooled tokens to class logits.
    Classifier,
    /// Transposed-convolution segmentation decoder.
    Deconv,
    /// Upsample-and-convolve segmentation decoder.
    ConvUp,
    /// Frozen-latent regressor with an auxiliary CNN branch.
    Gpp,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Classifier => "classifier",
            HeadKind::Deconv => "deconv",
            HeadKind::ConvUp => "convup",
            HeadKind::Gpp => "gpp",
        }
    }

    pub fn target(self) -> TargetKind {
        match self {
            HeadKind::Classifier => TargetKind::Class,
            HeadKind::Deconv | HeadKind::ConvUp => TargetKind::Mask,
            HeadKind::Gpp => TargetKind::Value,
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "classifier" => HeadKind::Classifier,
            "deconv" => HeadKind::Deconv,
            "convup" => HeadKind::ConvUp,
            "gpp" => HeadKind::Gpp,
            _ => return Err(invalid!("unknown head {s:?}; expected classifier, deconv, convup or gpp")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Class,
    Mask,
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Row-major labels, one per pixel.
    Mask(Vec<usize>),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub chip: Chip,
    pub target: Target,
    /// `[K, h, w]` co-located variables for the regression head.
    pub aux: Option<Tensor>,
}

pub trait LabeledSource {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<LabeledSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabeledSource for Vec<LabeledSample> {
    fn len(&self) -> usize {
        <[LabeledSample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<LabeledSample> {
        self.get(index).cloned().ok_or_else(|| invalid!("sample {index} out of range"))
    }
}

/// Borrowed window over another labeled source.
pub struct LabeledSubset<'a> {
    pub inner: &'a dyn LabeledSource,
    pub indices: Vec<usize>,
}

impl LabeledSource for LabeledSubset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample(&self, index: usize) -> Result<LabeledSample> {
        let i = *self.indices.get(index).ok_or_else(|| invalid!("sample {index} out of range"))?;
        self.inner.sample(i)
    }
}

/// The input chips of a labeled source, e.g. for channel statistics.
pub struct InputsOf<'a>(pub &'a dyn LabeledSource);

impl ChipSource for InputsOf<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn chip(&self, index: usize) -> Result<Chip> {
        Ok(self.0.sample(index)?.chip)
    }
}

/// One row of a task manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub input: ChipRecord,
    /// Class index, regression value, or a label-chip path, as written.
    pub target: String,
    pub aux: Option<PathBuf>,
}

const TASK_HEADER: [&str; 6] = ["file", "lat", "lon", "dates", "target", "aux"];

/// Task manifests extend chip manifests with `target` and `aux` columns.
/// Paths are written as given and resolved against the manifest directory
/// on read.
pub fn write_task_manifest(path: &Path, records: &[TaskRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Format {
        what: "task manifest",
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TASK_HEADER).map_err(err)?;
    for r in records {
        let (lat, lon, dates) = match &r.input.meta {
            Some(m) => (
                m.lat.to_string(),
                m.lon.to_string(),
                m.dates.iter().map(|d| format_date(*d)).collect::<Vec<_>>().join(";"),
            ),
            None => Default::default(),
        };
        let aux = r.aux.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        w.write_record([&*r.input.file.to_string_lossy(), &lat, &lon, &dates, &r.target, &aux])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| err(csv::Error::from(e.into_error())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_task_manifest(path: &Path) -> Result<Vec<TaskRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(bytes.as_slice()).records().enumerate() {
        let row = i + 2;
        let bad = |detail: String| Error::Format {
            what: "task manifest",
            detail: format!("row {row}: {detail}"),
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != TASK_HEADER.len() {
            return Err(bad(format!("expected {} columns, found {}", TASK_HEADER.len(), rec.len())));
        }
        let meta = match (&rec[1], &rec[2], &rec[3]) {
            ("", "", "") => None,
            (lat, lon, dates) => {
                let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
                Some(GeoTemporalMetadata {
                    lat: num(lat)?,
                    lon: num(lon)?,
                    dates: dates
                        .split(';')
                        .map(parse_date)
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| bad(e.to_string()))?,
                })
            }
        };
        if rec[4].is_empty() {
            return Err(bad("empty target".into()));
        }
        out.push(TaskRecord {
            input: ChipRecord {
                file: base.join(&rec[0]),
                meta,
            },
            target: rec[4].to_string(),
            aux: (!rec[5].is_empty()).then(|| base.join(&rec[5])),
        });
    }
    Ok(out)
}

/// Labeled samples listed in a task manifest, read on demand.
pub struct ManifestSamples {
    pub records: Vec<TaskRecord>,
    pub kind: TargetKind,
    base: PathBuf,
}

impl ManifestSamples {
    pub fn open(path: &Path, kind: TargetKind) -> Result<Self> {
        Ok(ManifestSamples {
            records: read_task_manifest(path)?,
            kind,
            base: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }
}

impl LabeledSource for ManifestSamples {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn sample(&self, index: usize) -> Result<LabeledSample> {
        let r = self.records.get(index).ok_or_else(|| invalid!("sample {index} out of range"))?;
        let mut values = read_chip(&r.input.file)?;
        if values.ndim() == 3 {
            let s = values.shape().to_vec();
            values = values.reshape(&[1, s[0], s[1], s[2]])?;
        }
        let bad = |what: &str| Error::Format {
            what: "task manifest",
            detail: format!("{}: target {:?} is not {what}", r.input.file.display(), r.target),
        };
        let target = match self.kind {
            TargetKind::Class => Target::Class(r.target.trim().parse().map_err(|_| bad("a class index"))?),
            TargetKind::Value => Target::Value(r.target.trim().parse().map_err(|_| bad("a number"))?),
            TargetKind::Mask => {
                let labels = read_chip(&self.base.join(r.target.trim()))?;
                let labels = labels
                    .data()
                    .iter()
                    .map(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize).ok_or_else(|| bad("a label chip")))
                    .collect::<Result<Vec<_>>>()?;
                Target::Mask(labels)
            }
        };
        let aux = r.aux.as_deref().map(read_chip).transpose()?;
        Ok(LabeledSample {
            chip: Chip {
                values,
                meta: r.input.meta.clone(),
            },
            target,
            aux,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    /// Classes for classifier and segmentation heads; ignored by `Gpp`.
    pub n_classes: usize,
    pub frames: usize,
    pub image: (usize, usize),
    /// `(channels, (h, w))` of the auxiliary grid for `Gpp`.
    pub aux: Option<(usize, (usize, usize))>,
    pub freeze_backbone: bool,
    /// Per-class loss weights; uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
}

impl FineTuneConfig {
    pub fn grid(&self) -> Result<(usize, usize, usize)> {
        grid_dims(self.frames, self.image.0, self.image.1, self.encoder.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.grid()?;
        if self.head != HeadKind::Gpp && self.n_classes < 2 {
            return Err(invalid!("{} head needs at least 2 classes", self.head.name()));
        }
        if self.head == HeadKind::Gpp && self.aux.is_none() {
            return Err(invalid!("gpp head needs auxiliary channels and size"));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.n_classes || w.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(invalid!("class_weights needs {} positive finite entries", self.n_classes));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.class_weights.clone().unwrap_or_else(|| vec![1.0; self.n_classes])
    }

    pub fn to_meta(&self, m: &mut BTreeMap<String, String>) {
        encoder_meta(&self.encoder, m);
        m.insert("task.head".into(), self.head.name().into());
        m.insert("task.n_classes".into(), self.n_classes.to_string());
        m.insert("task.frames".into(), self.frames.to_string());
        m.insert("task.image".into(), format!("{}x{}", self.image.0, self.image.1));
        m.insert("task.freeze_backbone".into(), self.freeze_backbone.to_string());
        if let Some((k, (h, w))) = self.aux {
            m.insert("task.aux".into(), format!("{k}x{h}x{w}"));
        }
        if let Some(w) = &self.class_weights {
            m.insert(
                "task.class_weights".into(),
                w.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            );
        }
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self> {
        let dims = |key: &str| -> Result<Vec<usize>> {
            ck.meta_value(key)?
                .split('x')
                .map(|v| v.parse().map_err(|_| invalid!("meta {key}: bad size {v:?}")))
                .collect()
        };
        let image = dims("task.image")?;
        if image.len() != 2 {
            return Err(invalid!("meta task.image must be HxW"));
        }
        let aux = match ck.meta.get("task.aux") {
            Some(_) => match dims("task.aux")?[..] {
                [k, h, w] => Some((k, (h, w))),
                _ => return Err(invalid!("meta task.aux must be KxHxW")),
            },
            None => None,
        };
        let class_weights = ck
            .meta
            .get("task.class_weights")
            .map(|s| {
                s.split(';')
                    .map(|v| v.parse().map_err(|_| invalid!("meta task.class_weights: bad value {v:?}")))
                    .collect::<Result<Vec<f64>>>()
            })
            .transpose()?;
        Ok(FineTuneConfig {
            encoder: encoder_config_from_meta(ck)?,
            head: ck.meta_value("task.head")?.parse()?,
            n_classes: ck.meta_parse("task.n_classes")?,
            frames: ck.meta_parse("task.frames")?,
            image: (image[0], image[1]),
            aux,
            freeze_backbone: ck.meta_parse("task.freeze_backbone")?,
            class_weights,
        })
    }
}

pub fn encoder_meta(e: &EncoderConfig, m: &mut BTreeMap<String, String>) {
    for (k, v) in [
        ("encoder.dim", e.dim.to_string()),
        ("encoder.depth", e.depth.to_string()),
        ("encoder.heads", e.heads.to_string()),
        ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
        ("encoder.patch", e.patch.h.to_string()),
        ("encoder.channels", e.channels.to_string()),
    ] {
        m.insert(k.into(), v);
    }
}

pub fn encoder_config_from_meta(ck: &Checkpoint) -> Result<EncoderConfig> {
    Ok(EncoderConfig {
        dim: ck.meta_parse("encoder.dim")?,
        depth: ck.meta_parse("encoder.depth")?,
        heads: ck.meta_parse("encoder.heads")?,
        mlp_ratio: ck.meta_parse("encoder.mlp_ratio")?,
        patch: crate::patchify::PatchSize::square(ck.meta_parse("encoder.patch")?),
        channels: ck.meta_parse("encoder.channels")?,
    })
}

#[derive(Clone, Debug)]
enum Head {
    Classifier(ClassifierHead),
    Deconv(DeconvHead),
    ConvUp(ConvUpHead),
    Gpp(GppHead),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Classes(Vec<usize>),
    /// One row-major label map per sample.
    Masks(Vec<Vec<usize>>),
    Values(Vec<f64>),
}

/// Encoder plus task head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct FineTuneModel {
    pub cfg: FineTuneConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    head: Head,
}

impl FineTuneModel {
    pub fn new(cfg: FineTuneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_params(&cfg.encoder.param_specs(), &mut params, rng);
        let encoder = Encoder::bind(cfg.encoder, &params)?;
        let (t, gh, gw) = cfg.grid()?;
        let d = cfg.encoder.dim;
        let head = match cfg.head {
            HeadKind::Classifier => Head::Classifier(ClassifierHead::init(d, cfg.n_classes, &mut params, rng)?),
            HeadKind::Deconv => Head::Deconv(DeconvHead::init(
                DeconvHeadConfig::new(t * d, cfg.n_classes),
                &mut params,
                rng,
            )?),
            HeadKind::ConvUp => Head::ConvUp(ConvUpHead::init(
                ConvUpHeadConfig::new(t * d, (gh, gw), cfg.image, cfg.n_classes)?,
                &mut params,
                rng,
            )?),
            HeadKind::Gpp => {
                let (k, size) = cfg.aux.expect("validated");
                Head::Gpp(GppHead::init(GppHeadConfig::new(t * gh * gw * d, k, size), &mut params, rng)?)
            }
        };
        Ok(FineTuneModel {
            cfg,
            params,
            encoder,
            head,
        })
    }

    /// Rebuilds a model from a fine-tuning checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = FineTuneConfig::from_meta(ck)?;
        let mut rng = crate::seed::rng_for(0, "init");
        let mut m = Self::new(cfg, &mut rng)?;
        m.params.load_from(&ck.tensors)?;
        Ok(m)
    }

    /// Copies every encoder tensor from `source` (e.g. a pretraining
    /// checkpoint); the head keeps its initialisation.
    pub fn load_backbone(&mut self, source: &ParamStore) -> Result<()> {
        for spec in self.cfg.encoder.param_specs() {
            let from = source
                .id(&spec.name)
                .ok_or_else(|| invalid!("backbone checkpoint lacks {}", spec.name))?;
            let t = source.get(from);
            if t.shape() != spec.shape.as_slice() {
                return Err(invalid!(
                    "backbone tensor {} has shape {:?}, model expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ));
            }
            let to = self.params.id(&spec.name).expect("encoder parameter");
            *self.params.get_mut(to) = t.clone();
        }
        Ok(())
    }

    pub fn trainable(&self) -> Vec<bool> {
        let frozen: std::collections::HashSet<String> = if self.cfg.freeze_backbone {
            self.cfg.encoder.param_specs().into_iter().map(|s| s.name).collect()
        } else {
            Default::default()
        };
        self.params.iter().map(|(_, n, _)| !frozen.contains(n)).collect()
    }

    fn check_batch(&self, batch: &ReflectanceBatch) -> Result<()> {
        let (_, t, c, h, w) = batch.dims();
        if (t, c, (h, w)) != (self.cfg.frames, self.cfg.encoder.channels, self.cfg.image) {
            return Err(invalid!(
                "model expects chips of {} frames × {} bands × {}x{}, got {t} × {c} × {h}x{w}",
                self.cfg.frames,
                self.cfg.encoder.channels,
                self.cfg.image.0,
                self.cfg.image.1
            ));
        }
        Ok(())
    }

    /// Head output: logits `[B, K]`, `[B, K, H, W]`, or values `[B, 1]`.
    pub fn build(&self, g: &mut Graph, batch: &ReflectanceBatch, aux: Option<&AuxVariables>) -> Result<NodeId> {
        self.check_batch(batch)?;
        let (latent, dims) = if self.cfg.freeze_backbone {
            // Run the backbone on a scratch graph so backward never visits it.
            let mut scratch = Graph::new();
            let (z, dims) = self.encoder.encode_all(&mut scratch, &self.params, batch)?;
            (g.input(scratch.value(z).clone()), dims)
        } else {
            self.encoder.encode_all(g, &self.params, batch)?
        };
        match &self.head {
            Head::Classifier(h) => h.forward(g, &self.params, latent),
            Head::Deconv(h) => {
                let x = frames_to_channels(g, latent, dims)?;
                h.forward(g, &self.params, x, self.cfg.image)
            }
            Head::ConvUp(h) => {
                let x = frames_to_channels(g, latent, dims)?;
                h.forward(g, &self.params, x, self.cfg.image)
            }
            Head::Gpp(h) => {
                let aux = aux.ok_or_else(|| invalid!("gpp head needs auxiliary variables"))?;
                h.forward(g, &self.params, latent, aux)
            }
        }
    }

    /// Loss node for a prepared batch.
    pub fn loss(&self, g: &mut Graph, batch: &Prepared) -> Result<NodeId> {
        let out = self.build(g, &batch.inputs, batch.aux.as_ref())?;
        match &batch.targets {
            Targets::Labels(labels) => g.weighted_cross_entropy(out, labels, &self.cfg.weights()),
            Targets::Values(v) => {
                let t = Tensor::from_vec(&[v.len(), 1], v.clone())?;
                g.mse(out, &t)
            }
        }
    }

    pub fn loss_grad(&self, batch: &Prepared) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, batch)?;
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?.param_grads(&self.params)))
    }

    pub fn loss_value(&self, batch: &Prepared) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, batch)?;
        Ok(g.value(loss).item())
    }

    pub fn predict(&self, batch: &Prepared) -> Result<Predictions> {
        let mut g = Graph::new();
        let out = self.build(&mut g, &batch.inputs, batch.aux.as_ref())?;
        let y = g.value(out);
        let argmax = |row: &mut dyn Iterator<Item = f64>| {
            row.enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
                .0
        };
        let s = y.shape();
        Ok(match self.cfg.head {
            HeadKind::Classifier => {
                Predictions::Classes(y.data().chunks(s[1]).map(|r| argmax(&mut r.iter().copied())).collect())
            }
            HeadKind::Deconv | HeadKind::ConvUp => {
                let (k, hw) = (s[1], s[2] * s[3]);
                Predictions::Masks(
                    y.data()
                        .chunks(k * hw)
                        .map(|sample| (0..hw).map(|q| argmax(&mut (0..k).map(|c| sample[c * hw + q]))).collect())
                        .collect(),
                )
            }
            HeadKind::Gpp => Predictions::Values(y.data().to_vec()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One label per sample, or per pixel for masks, flattened.
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

/// Normalised, stacked inputs with their targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: ReflectanceBatch,
    pub aux: Option<AuxVariables>,
    pub targets: Targets,
}

pub fn prepare(samples: Vec<LabeledSample>, norm: Option<&ChannelStats>, kind: TargetKind) -> Result<Prepared> {
    let mut chips = Vec::with_capacity(samples.len());
    let mut aux = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for s in samples {
        let mut chip = s.chip;
        if let Some(n) = norm {
            n.apply(&mut chip.values)?;
        }
        let (h, w) = {
            let sh = chip.values.shape();
            (sh[2], sh[3])
        };
        chips.push(chip);
        match (kind, s.target) {
            (TargetKind::Class, Target::Class(c)) => labels.push(c),
            (TargetKind::Mask, Target::Mask(m)) if m.len() == h * w => labels.extend(m),
            (TargetKind::Mask, Target::Mask(m)) => {
                return Err(invalid!("label map has {} pixels, chip has {h}x{w}", m.len()));
            }
            (TargetKind::Value, Target::Value(v)) => values.push(v),
            (k, t) => return Err(invalid!("{k:?} task given target {t:?}")),
        }
        aux.extend(s.aux);
    }
    let n = chips.len();
    let aux = match aux.len() {
        0 => None,
        m if m == n => {
            let shape = aux[0].shape().to_vec();
            if aux.iter().any(|a| a.shape() != shape.as_slice()) || shape.len() != 3 {
                return Err(invalid!("auxiliary grids must share one [K, h, w] shape"));
            }
            let data = aux.iter().flat_map(|a| a.data().iter().copied()).collect();
            Some(AuxVariables::new(Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data)?)?)
        }
        _ => return Err(invalid!("auxiliary variables present for only some samples")),
    };
    Ok(Prepared {
        inputs: stack(&chips)?,
        aux,
        targets: match kind {
            TargetKind::Value => Targets::Values(values),
            _ => Targets::Labels(labels),
        },
    })
}

/// Fine-tuning as a training objective. No random augmentation; inputs are
/// only normalised.
pub struct FineTuneObjective<'a> {
    pub model: FineTuneModel,
    pub train: &'a dyn LabeledSource,
    pub val: Option<&'a dyn LabeledSource>,
    pub norm: Option<ChannelStats>,
    pub eval_batch: usize,
}

impl FineTuneObjective<'_> {
    pub fn batch(&self, source: &dyn LabeledSource, indices: &[usize]) -> Result<Prepared> {
        let samples = indices.iter().map(|&i| source.sample(i)).collect::<Result<Vec<_>>>()?;
        prepare(samples, self.norm.as_ref(), self.model.cfg.head.target())
    }

    /// Predictions over a whole source, in order.
    pub fn predict_all(&self, source: &dyn LabeledSource) -> Result<Predictions> {
        predict_source(&self.model, source, self.norm.as_ref(), self.eval_batch)
    }
}

pub fn predict_source(
    model: &FineTuneModel,
    source: &dyn LabeledSource,
    norm: Option<&ChannelStats>,
    batch: usize,
) -> Result<Predictions> {
    let kind = model.cfg.head.target();
    let mut out = match kind {
        TargetKind::Class => Predictions::Classes(Vec::new()),
        TargetKind::Mask => Predictions::Masks(Vec::new()),
        TargetKind::Value => Predictions::Values(Vec::new()),
    };
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let samples = chunk.iter().map(|&i| source.sample(i)).collect::<Result<Vec<_>>>()?;
        match (&mut out, model.predict(&prepare(samples, norm, kind)?)?) {
            (Predictions::Classes(a), Predictions::Classes(b)) => a.extend(b),
            (Predictions::Masks(a), Predictions::Masks(b)) => a.extend(b),
            (Predictions::Values(a), Predictions::Values(b)) => a.extend(b),
            _ => unreachable!("head and target kinds agree"),
        }
    }
    Ok(out)
}

impl Objective for FineTuneObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, indices: &[usize], _step: u64) -> Result<(f64, Vec<Tensor>)> {
        self.model.loss_grad(&self.batch(self.train, indices)?)
    }

    fn trainable(&self) -> Vec<bool> {
        self.model.trainable()
    }

    /// Sample-weighted mean of batch losses.
    fn val_loss(&self) -> Result<Option<f64>> {
        let Some(val) = self.val else { return Ok(None) };
        if val.is_empty() {
            return Ok(None);
        }
        let idx: Vec<usize> = (0..val.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(self.eval_batch.max(1)) {
            total += self.model.loss_value(&self.batch(val, chunk)?)? * chunk.len() as f64;
        }
        Ok(Some(total / val.len() as f64))
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        self.model.cfg.to_meta(&mut m);
        m.insert("task".into(), "finetune".into());
        if let Some(n) = &self.norm {
            n.to_meta(&mut m);
        }
        m
    }
}

/// Labeled samples whose targets come from the land cover behind
/// [`SyntheticChips`]: the dominant class, the per-pixel class map, or a
/// productivity value driven by vegetated fraction, season and an
/// auxiliary radiation grid. Classes fold modulo `n_classes`.
pub fn synthetic_task(chips: &SyntheticChips, kind: TargetKind, n_classes: usize) -> Result<Vec<LabeledSample>> {
    if n_classes == 0 && kind != TargetKind::Value {
        return Err(invalid!("a labeled task needs classes"));
    }
    // How strongly each land-cover class contributes to productivity.
    const VEGETATION: [f64; SyntheticChips::CLASSES] = [0.0, 0.2, 0.9, 0.6, 1.0, 0.1];
    (0..chips.len())
        .map(|i| {
            let chip = chips.chip(i)?;
            let cover = chips.land_cover(i)?;
            let mut aux = None;
            let target = match kind {
                TargetKind::Class => {
                    let mut counts = vec![0usize; n_classes];
                    for &k in &cover {
                        counts[k % n_classes] += 1;
                    }
                    let best = (0..n_classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
                    Target::Class(best)
                }
                TargetKind::Mask => Target::Mask(cover.iter().map(|k| k % n_classes).collect()),
                TargetKind::Value => {
                    let mut rng = crate::seed::rng_indexed(chips.seed, "synthetic-aux", i as u64);
                    let radiation: f64 = rng.random_range(0.5..1.5);
                    let meta = chip.meta.as_ref().expect("synthetic chips carry metadata");
                    let last = meta.dates.last().expect("at least one frame");
                    let season = 1.0 + 0.3 * (std::f64::consts::TAU * last.doy as f64 / 365.0).sin();
                    let veg = cover.iter().map(|&k| VEGETATION[k]).sum::<f64>() / cover.len() as f64;
                    let warmth = meta.lat.to_radians().cos();
                    aux = Some(Tensor::from_fn(&[2, 3, 3], |q| {
                        if q < 9 {
                            radiation * (1.0 + 0.02 * (q as f64 - 4.0))
                        } else {
                            warmth
                        }
                    }));
                    Target::Value(veg * radiation * season)
                }
            };
            Ok(LabeledSample { chip, target, aux })
        })
        .collect()
}
