//! Transformer encoder over visible tokens, a light decoder that fills in
//! masked slots with a learned token, and the masked reconstruction loss.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::nn::{trunc_normal, ParamId, ParamStore};
use crate::patchify::{grid_dims, patchify_pixels, MaskPlan, PatchSize, ReflectanceBatch};
use crate::posenc::{bias_terms, sample_drop_flags, sincos_3d, DropFlags};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch: PatchSize,
    pub channels: usize,
}

impl EncoderConfig {
    /// `"tiny"`, `"300M"` or `"600M"`.
    pub fn preset(name: &str) -> Result<Self> {
        let (dim, depth, heads, side) = match name {
            "tiny" => (64, 2, 4, 16),
            "300M" => (1024, 24, 16, 16),
            "600M" => (1280, 32, 16, 14),
            _ => return Err(invalid!("unknown preset {name:?} (expected tiny, 300M or 600M)")),
        };
        Ok(EncoderConfig {
            dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            patch: PatchSize::square(side),
            channels: 6,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        check_width(self.dim, self.heads, "encoder")?;
        if self.channels == 0 || self.mlp_hidden() == 0 {
            return Err(invalid!("encoder needs at least one channel and a non-empty MLP"));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch.pixels(self.channels)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut v = vec![
            ParamSpec::new("encoder.patch_embed.weight", &[self.patch_pixels(), d], Init::Normal),
            ParamSpec::new("encoder.patch_embed.bias", &[d], Init::Zeros),
            ParamSpec::new("encoder.meta.w_time", &[], Init::Ones),
            ParamSpec::new("encoder.meta.w_loc", &[], Init::Ones),
        ];
        for i in 0..self.depth {
            v.extend(block_specs(&format!("encoder.blocks.{i}"), d, self.mlp_hidden()));
        }
        v.push(ParamSpec::new("encoder.norm.weight", &[d], Init::Ones));
        v.push(ParamSpec::new("encoder.norm.bias", &[d], Init::Zeros));
        v
    }

    /// Closed-form encoder parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, p) = (self.dim, self.mlp_hidden(), self.patch_pixels());
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        p * d + d + 2 + self.depth * block + 2 * d
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 512,
            depth: 8,
            heads: 16,
            mlp_ratio: 4.0,
        }
    }
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        DecoderConfig {
            dim: 32,
            depth: 1,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn param_specs(&self, enc: &EncoderConfig) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut v = vec![
            ParamSpec::new("decoder.embed.weight", &[enc.dim, d], Init::Normal),
            ParamSpec::new("decoder.embed.bias", &[d], Init::Zeros),
            ParamSpec::new("decoder.mask_token", &[d], Init::Normal),
        ];
        for i in 0..self.depth {
            v.extend(block_specs(&format!("decoder.blocks.{i}"), d, self.mlp_hidden()));
        }
        v.push(ParamSpec::new("decoder.norm.weight", &[d], Init::Ones));
        v.push(ParamSpec::new("decoder.norm.bias", &[d], Init::Zeros));
        v.push(ParamSpec::new("decoder.pred.weight", &[d, enc.patch_pixels()], Init::Normal));
        v.push(ParamSpec::new("decoder.pred.bias", &[enc.patch_pixels()], Init::Zeros));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaeConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub norm_pix: bool,
}

impl MaeConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let encoder = EncoderConfig::preset(name)?;
        let decoder = if name == "tiny" {
            DecoderConfig::tiny()
        } else {
            DecoderConfig::default()
        };
        Ok(MaeConfig {
            encoder,
            decoder,
            norm_pix: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        check_width(self.decoder.dim, self.decoder.heads, "decoder")?;
        if self.decoder.mlp_hidden() == 0 {
            return Err(invalid!("decoder MLP is empty"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.encoder.param_specs();
        v.extend(self.decoder.param_specs(&self.encoder));
        v
    }
}

fn check_width(dim: usize, heads: usize, what: &str) -> Result<()> {
    if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(invalid!("{what} width {dim} not divisible into {heads} heads"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn block_specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
    let p = |s: &str| format!("{prefix}.{s}");
    vec![
        ParamSpec::new(p("norm1.weight"), &[d], Init::Ones),
        ParamSpec::new(p("norm1.bias"), &[d], Init::Zeros),
        ParamSpec::new(p("attn.qkv.weight"), &[d, 3 * d], Init::Normal),
        ParamSpec::new(p("attn.qkv.bias"), &[3 * d], Init::Zeros),
        ParamSpec::new(p("attn.proj.weight"), &[d, d], Init::Normal),
        ParamSpec::new(p("attn.proj.bias"), &[d], Init::Zeros),
        ParamSpec::new(p("norm2.weight"), &[d], Init::Ones),
        ParamSpec::new(p("norm2.bias"), &[d], Init::Zeros),
        ParamSpec::new(p("mlp.fc1.weight"), &[d, hidden], Init::Normal),
        ParamSpec::new(p("mlp.fc1.bias"), &[hidden], Init::Zeros),
        ParamSpec::new(p("mlp.fc2.weight"), &[hidden, d], Init::Normal),
        ParamSpec::new(p("mlp.fc2.bias"), &[d], Init::Zeros),
    ]
}

/// Appends freshly initialised parameters to `store`, in spec order.
pub fn init_params(specs: &[ParamSpec], store: &mut ParamStore, rng: &mut impl Rng) {
    for s in specs {
        let t = match s.init {
            Init::Normal => trunc_normal(&s.shape, INIT_STD, rng),
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::full(&s.shape, 1.0),
        };
        store.push(s.name.clone(), t);
    }
}

fn lookup(store: &ParamStore, spec: &ParamSpec) -> Result<ParamId> {
    let id = store
        .id(&spec.name)
        .ok_or_else(|| invalid!("parameter {} missing", spec.name))?;
    if store.get(id).shape() != spec.shape.as_slice() {
        return Err(invalid!(
            "parameter {} has shape {:?}, expected {:?}",
            spec.name,
            store.get(id).shape(),
            spec.shape
        ));
    }
    Ok(id)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

fn bind_blocks(ids: &[ParamId], depth: usize) -> Vec<Block> {
    (0..depth)
        .map(|i| {
            let b = &ids[i * 12..(i + 1) * 12];
            Block {
                ln1: (b[0], b[1]),
                qkv: (b[2], b[3]),
                proj: (b[4], b[5]),
                ln2: (b[6], b[7]),
                fc1: (b[8], b[9]),
                fc2: (b[10], b[11]),
            }
        })
        .collect()
}

/// Pre-norm transformer block on `[B, N, D]`.
fn block(g: &mut Graph, store: &ParamStore, blk: &Block, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let bh = b * heads;

    let (g1, b1) = (g.param(store, blk.ln1.0), g.param(store, blk.ln1.1));
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let (wq, bq) = (g.param(store, blk.qkv.0), g.param(store, blk.qkv.1));
    let qkv = g.linear(h, wq, Some(bq))?;
    let qkv = g.reshape(qkv, &[b, n, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3 * bh, n, dh])?;
    let q = g.narrow(qkv, 0, 0, bh)?;
    let k = g.narrow(qkv, 0, bh, bh)?;
    let v = g.narrow(qkv, 0, 2 * bh, bh)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let o = g.bmm(attn, v, false)?;
    let o = g.reshape(o, &[b, heads, n, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, n, d])?;
    let (wp, bp) = (g.param(store, blk.proj.0), g.param(store, blk.proj.1));
    let o = g.linear(o, wp, Some(bp))?;
    let x = g.add(x, o)?;

    let (g2, b2) = (g.param(store, blk.ln2.0), g.param(store, blk.ln2.1));
    let h = g.layer_norm(x, g2, b2, LN_EPS)?;
    let (w1, c1) = (g.param(store, blk.fc1.0), g.param(store, blk.fc1.1));
    let h = g.linear(h, w1, Some(c1))?;
    let h = g.gelu(h);
    let (w2, c2) = (g.param(store, blk.fc2.0), g.param(store, blk.fc2.1));
    let h = g.linear(h, w2, Some(c2))?;
    g.add(x, h)
}

/// Parameter handles for the encoder inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    embed: (ParamId, ParamId),
    w_time: ParamId,
    w_loc: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
}

impl Encoder {
    pub fn bind(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ids = cfg
            .param_specs()
            .iter()
            .map(|s| lookup(store, s))
            .collect::<Result<Vec<_>>>()?;
        let nb = cfg.depth * 12;
        Ok(Encoder {
            cfg,
            embed: (ids[0], ids[1]),
            w_time: ids[2],
            w_loc: ids[3],
            blocks: bind_blocks(&ids[4..4 + nb], cfg.depth),
            norm: (ids[4 + nb], ids[5 + nb]),
        })
    }

    pub fn w_time(&self) -> ParamId {
        self.w_time
    }

    pub fn w_loc(&self) -> ParamId {
        self.w_loc
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        self.cfg
            .param_specs()
            .iter()
            .filter_map(|s| store.id(&s.name))
            .collect()
    }

    /// Embedded tokens `[B, L, D]` with the positional table and, when the
    /// batch carries metadata, the metadata bias. `drops` defaults to
    /// keeping both terms for every sample.
    pub fn tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ReflectanceBatch,
        drops: Option<&[DropFlags]>,
    ) -> Result<(NodeId, (usize, usize, usize))> {
        let (b, t, c, h, w) = batch.dims();
        if c != self.cfg.channels {
            return Err(invalid!("batch has {c} channels, encoder expects {}", self.cfg.channels));
        }
        let dims = grid_dims(t, h, w, self.cfg.patch)?;
        let pix = g.input(patchify_pixels(&batch.values, self.cfg.patch)?);
        let (ew, eb) = (g.param(store, self.embed.0), g.param(store, self.embed.1));
        let x = g.linear(pix, ew, Some(eb))?;
        let pos = sincos_3d(dims.0, dims.1, dims.2, self.cfg.dim)?;
        let pos = g.input(pos.values().clone());
        let mut x = g.add_suffix(x, pos)?;
        if let Some(meta) = &batch.meta {
            let keep = vec![DropFlags::KEEP; b];
            let drops = drops.unwrap_or(&keep);
            if drops.len() != b {
                return Err(invalid!("{} drop flags for batch of {b}", drops.len()));
            }
            let terms = bias_terms(meta, dims, self.cfg.dim, drops)?;
            for (term, wid) in [(terms.time, self.w_time), (terms.loc, self.w_loc)] {
                if let Some(term) = term {
                    let term = g.input(term);
                    let wn = g.param(store, wid);
                    let scaled = g.scale_by(term, wn)?;
                    x = g.add(x, scaled)?;
                }
            }
        }
        Ok((x, dims))
    }

    /// Transformer blocks plus final layer norm on `[B, N, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(invalid!("encoder expects [B, N, {}], got {s:?}", self.cfg.dim));
        }
        let mut x = x;
        for blk in &self.blocks {
            x = block(g, store, blk, x, self.cfg.heads)?;
        }
        let (gn, bn) = (g.param(store, self.norm.0), g.param(store, self.norm.1));
        g.layer_norm(x, gn, bn, LN_EPS)
    }

    /// Latent for the full, unmasked token grid: `[B, L, D]`.
    pub fn encode_all(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ReflectanceBatch,
    ) -> Result<(NodeId, (usize, usize, usize))> {
        let (x, dims) = self.tokens(g, store, batch, None)?;
        Ok((self.forward(g, store, x)?, dims))
    }
}

/// Parameter handles for the decoder inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    embed: (ParamId, ParamId),
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
    pred: (ParamId, ParamId),
}

impl Decoder {
    pub fn bind(cfg: DecoderConfig, enc: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        check_width(cfg.dim, cfg.heads, "decoder")?;
        let ids = cfg
            .param_specs(enc)
            .iter()
            .map(|s| lookup(store, s))
            .collect::<Result<Vec<_>>>()?;
        let nb = cfg.depth * 12;
        let tail = &ids[3 + nb..];
        Ok(Decoder {
            cfg,
            embed: (ids[0], ids[1]),
            mask_token: ids[2],
            blocks: bind_blocks(&ids[3..3 + nb], cfg.depth),
            norm: (tail[0], tail[1]),
            pred: (tail[2], tail[3]),
        })
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    /// `latent: [B, keep, D_enc]` → pixel predictions `[B, L, P]` for every
    /// token in canonical order.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: NodeId,
        plan: &MaskPlan,
        dims: (usize, usize, usize),
    ) -> Result<NodeId> {
        let s = g.shape(latent).to_vec();
        let l = dims.0 * dims.1 * dims.2;
        if s.len() != 3 || plan.batch() != s[0] || plan.tokens() != l || plan.keep_count != s[1] {
            return Err(invalid!(
                "mask plan ({} samples, {} of {} kept) does not fit latent {s:?} over {l} tokens",
                plan.batch(),
                plan.keep_count,
                plan.tokens()
            ));
        }
        let b = s[0];
        let (ew, eb) = (g.param(store, self.embed.0), g.param(store, self.embed.1));
        let mut y = g.linear(latent, ew, Some(eb))?;
        if l > plan.keep_count {
            let mt = g.param(store, self.mask_token);
            let fill = g.expand_rows(mt, b, l - plan.keep_count)?;
            y = g.concat(&[y, fill], 1)?;
        }
        let y = g.gather_rows(y, &plan.restore)?;
        let pos = sincos_3d(dims.0, dims.1, dims.2, self.cfg.dim)?;
        let pos = g.input(pos.values().clone());
        let mut y = g.add_suffix(y, pos)?;
        for blk in &self.blocks {
            y = block(g, store, blk, y, self.cfg.heads)?;
        }
        let (gn, bn) = (g.param(store, self.norm.0), g.param(store, self.norm.1));
        let y = g.layer_norm(y, gn, bn, LN_EPS)?;
        let (pw, pb) = (g.param(store, self.pred.0), g.param(store, self.pred.1));
        g.linear(y, pw, Some(pb))
    }
}

/// Per-token standardisation (unbiased variance, ε = 1e-6).
pub fn normalize_tokens(target: &Tensor) -> Tensor {
    let p = *target.shape().last().unwrap_or(&1);
    let mut out = target.clone();
    for tok in out.data_mut().chunks_mut(p) {
        let n = tok.len() as f64;
        let mean = tok.iter().sum::<f64>() / n;
        let var = tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = (var + 1e-6).sqrt();
        for v in tok.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    out
}

/// Mean over masked tokens of the per-token mean squared error.
pub fn mae_loss(pred: &Tensor, target: &Tensor, mask: &[Vec<bool>], norm_pix: bool) -> Result<f64> {
    let s = pred.shape();
    if s.len() != 3 || target.shape() != s {
        return Err(invalid!("prediction {s:?} vs target {:?}", target.shape()));
    }
    if mask.len() != s[0] || mask.iter().any(|m| m.len() != s[1]) {
        return Err(invalid!("mask does not match [B, L] = [{}, {}]", s[0], s[1]));
    }
    let target = if norm_pix { normalize_tokens(target) } else { target.clone() };
    let p = s[2];
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &m) in mask.iter().flatten().enumerate() {
        if m {
            let a = &pred.data()[i * p..(i + 1) * p];
            let b = &target.data()[i * p..(i + 1) * p];
            total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / p as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid!("no masked tokens, loss undefined"));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutput {
    /// `[B, L, ph·pw·C]`.
    pub pred_pixels: Tensor,
    pub loss: f64,
    /// `[B][L]`, `true` for masked tokens.
    pub mask: Vec<Vec<bool>>,
}

/// Random choices made by one pretraining step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw {
    pub plan: MaskPlan,
    pub drops: Vec<DropFlags>,
}

/// Full masked autoencoder: one parameter store holding encoder and decoder.
#[derive(Clone, Debug)]
pub struct Mae {
    pub cfg: MaeConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Mae {
    pub fn new(cfg: MaeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_params(&cfg.param_specs(), &mut params, rng);
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: MaeConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::bind(cfg.encoder, &params)?;
        let decoder = Decoder::bind(cfg.decoder, &cfg.encoder, &params)?;
        Ok(Mae {
            cfg,
            params,
            encoder,
            decoder,
        })
    }

    /// Mask plan and drop flags for one step, both drawn from `rng`.
    pub fn draw(&self, batch: &ReflectanceBatch, mask_ratio: f64, drop_prob: f64, rng: &mut impl Rng) -> Result<StepDraw> {
        let plan = self.draw_plan(batch, mask_ratio, rng)?;
        let drops = draw_drops(batch, drop_prob, rng)?;
        Ok(StepDraw { plan, drops })
    }

    pub fn draw_plan(&self, batch: &ReflectanceBatch, mask_ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
        let (b, t, _, h, w) = batch.dims();
        let (gt, gh, gw) = grid_dims(t, h, w, self.cfg.encoder.patch)?;
        MaskPlan::random(b, gt * gh * gw, mask_ratio, rng)
    }

    /// Builds the pretraining graph; returns `(pred, loss)` nodes.
    pub fn build(&self, g: &mut Graph, batch: &ReflectanceBatch, draw: &StepDraw) -> Result<(NodeId, NodeId)> {
        let (x, dims) = self.encoder.tokens(g, &self.params, batch, Some(&draw.drops))?;
        let l = dims.0 * dims.1 * dims.2;
        if draw.plan.batch() != g.shape(x)[0] || draw.plan.tokens() != l {
            return Err(invalid!("mask plan does not fit batch"));
        }
        let visible = g.gather_rows(x, &draw.plan.keep_indices())?;
        let latent = self.encoder.forward(g, &self.params, visible)?;
        let pred = self.decoder.forward(g, &self.params, latent, &draw.plan, dims)?;
        let mut target = patchify_pixels(&batch.values, self.cfg.encoder.patch)?;
        if self.cfg.norm_pix {
            target = normalize_tokens(&target);
        }
        let loss = g.masked_mse(pred, &target, &draw.plan.mask)?;
        Ok((pred, loss))
    }

    /// Forward pass with given random choices.
    pub fn forward(&self, batch: &ReflectanceBatch, draw: &StepDraw) -> Result<PretrainOutput> {
        let mut g = Graph::new();
        let (pred, loss) = self.build(&mut g, batch, draw)?;
        Ok(PretrainOutput {
            pred_pixels: g.value(pred).clone(),
            loss: g.value(loss).item(),
            mask: draw.plan.mask.clone(),
        })
    }

    pub fn pretrain_step(
        &self,
        batch: &ReflectanceBatch,
        mask_ratio: f64,
        drop_prob: f64,
        rng: &mut impl Rng,
    ) -> Result<PretrainOutput> {
        let draw = self.draw(batch, mask_ratio, drop_prob, rng)?;
        self.forward(batch, &draw)
    }

    /// Loss and gradient for every parameter, in store order. Pure in the
    /// parameters and inputs.
    pub fn grad(&self, batch: &ReflectanceBatch, draw: &StepDraw) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (_, loss) = self.build(&mut g, batch, draw)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.param_grads(&self.params);
        Ok((value, grads))
    }

    /// Encoder output for visible tokens only: `[B, keep, D]`.
    pub fn encode_visible(&self, batch: &ReflectanceBatch, draw: &StepDraw) -> Result<Tensor> {
        let mut g = Graph::new();
        let (x, _) = self.encoder.tokens(&mut g, &self.params, batch, Some(&draw.drops))?;
        let visible = g.gather_rows(x, &draw.plan.keep_indices())?;
        let latent = self.encoder.forward(&mut g, &self.params, visible)?;
        Ok(g.value(latent).clone())
    }
}

/// Per-sample drop flags. Without metadata nothing is drawn and every
/// term counts as dropped.
pub fn draw_drops(batch: &ReflectanceBatch, drop_prob: f64, rng: &mut impl Rng) -> Result<Vec<DropFlags>> {
    let b = batch.dims().0;
    match batch.meta {
        Some(_) => (0..b).map(|_| sample_drop_flags(drop_prob, rng)).collect(),
        None => Ok(vec![DropFlags::ALL; b]),
    }
}

/// Runs the encoder stack on already-embedded tokens `[B, N, D]`.
pub fn encoder_forward(encoder: &Encoder, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(tokens.clone());
    let y = encoder.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}

/// Runs the decoder on a latent `[B, keep, D_enc]`.
pub fn decoder_forward(
    decoder: &Decoder,
    store: &ParamStore,
    latent: &Tensor,
    plan: &MaskPlan,
    dims: (usize, usize, usize),
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(latent.clone());
    let y = decoder.forward(&mut g, store, x, plan, dims)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::{AcqDate, GeoTemporalMetadata};
    use crate::seed::rng_for;
    use rand::Rng;

    fn small_cfg() -> MaeConfig {
        MaeConfig {
            encoder: EncoderConfig {
                dim: 16,
                depth: 2,
                heads: 2,
                mlp_ratio: 2.0,
                patch: PatchSize::square(4),
                channels: 2,
            },
            decoder: DecoderConfig {
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2.0,
            },
            norm_pix: false,
        }
    }

    fn batch(b: usize, t: usize, c: usize, hw: usize, seed: u64, meta: bool) -> ReflectanceBatch {
        let mut rng = rng_for(seed, "batch");
        let v = Tensor::from_fn(&[b, t, c, hw, hw], |_| rng.random_range(-1.0..1.0));
        let m = meta.then(|| {
            (0..b)
                .map(|i| GeoTemporalMetadata {
                    lat: 10.0 + i as f64,
                    lon: -40.0 + 3.0 * i as f64,
                    dates: (0..t).map(|k| AcqDate::new(2020, 30 + 40 * k as u16).unwrap()).collect(),
                })
                .collect()
        });
        ReflectanceBatch::new(v, m).unwrap()
    }

    #[test]
    fn presets_validate_and_count_matches_shapes() {
        for name in ["tiny", "300M", "600M"] {
            let cfg = MaeConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let from_specs: usize = cfg.encoder.param_specs().iter().map(ParamSpec::numel).sum();
            assert_eq!(from_specs, cfg.encoder.param_count(), "{name}");
        }
        assert!(EncoderConfig::preset("huge").is_err());
    }

    #[test]
    fn depth_zero_is_layer_norm() {
        let mut cfg = small_cfg();
        cfg.encoder.depth = 0;
        let mut rng = rng_for(1, "init");
        let m = Mae::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16], |i| ((i * 7) % 11) as f64 - 5.0);
        let y = encoder_forward(&m.encoder, &m.params, &x).unwrap();
        for (row, out) in x.data().chunks(16).zip(y.data().chunks(16)) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for (a, b) in row.iter().zip(out) {
                assert!(((a - mean) / (var + LN_EPS).sqrt() - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut rng = rng_for(1, "init");
        let m = Mae::new(small_cfg(), &mut rng).unwrap();
        assert!(encoder_forward(&m.encoder, &m.params, &Tensor::zeros(&[1, 2, 15])).is_err());
    }

    #[test]
    fn loss_examples() {
        let t = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        let mask = vec![vec![true, false]];
        assert_eq!(mae_loss(&t, &t, &mask, false).unwrap(), 0.0);
        let p = t.map(|v| v + 0.5);
        assert_eq!(mae_loss(&p, &t, &mask, false).unwrap(), 0.25);
        assert!(mae_loss(&p, &t, &[vec![false, false]], false).is_err());
    }

    #[test]
    fn zero_ratio_decodes_every_token() {
        let cfg = small_cfg();
        let mut rng = rng_for(2, "init");
        let m = Mae::new(cfg, &mut rng).unwrap();
        let latent = Tensor::from_fn(&[2, 8, 16], |i| (i as f64 * 0.1).sin());
        let plan = MaskPlan::identity(2, 8);
        let out = decoder_forward(&m.decoder, &m.params, &latent, &plan, (2, 2, 2)).unwrap();
        assert_eq!(out.shape(), &[2, 8, 32]);
        assert!(out.all_finite());
        assert!(decoder_forward(&m.decoder, &m.params, &latent, &MaskPlan::identity(2, 9), (2, 2, 2)).is_err());
    }

    #[test]
    fn forced_drop_matches_no_metadata() {
        let mut rng = rng_for(3, "init");
        let m = Mae::new(small_cfg(), &mut rng).unwrap();
        let with = batch(2, 2, 2, 8, 4, true);
        let without = ReflectanceBatch::new(with.values.clone(), None).unwrap();
        let mut r = rng_for(5, "draw");
        let mut draw = m.draw(&with, 0.5, 0.1, &mut r).unwrap();
        draw.drops = vec![DropFlags::ALL; 2];
        let a = m.encode_visible(&with, &draw).unwrap();
        let b = m.encode_visible(&without, &draw).unwrap();
        assert_eq!(a, b);
        draw.drops = vec![DropFlags::KEEP; 2];
        assert_ne!(m.encode_visible(&with, &draw).unwrap(), b);
    }

    #[test]
    fn pretrain_step_smoke_and_determinism() {
        let cfg = MaeConfig::preset("tiny").unwrap();
        let mut rng = rng_for(6, "init");
        let m = Mae::new(cfg, &mut rng).unwrap();
        let b = batch(2, 2, 6, 32, 7, true);
        let a = m.pretrain_step(&b, 0.75, 0.1, &mut rng_for(8, "step")).unwrap();
        let c = m.pretrain_step(&b, 0.75, 0.1, &mut rng_for(8, "step")).unwrap();
        assert!(a.loss.is_finite() && a.loss > 0.0);
        assert_eq!(a, c);
        assert_eq!(a.pred_pixels.shape(), &[2, 8, 16 * 16 * 6]);
    }

    #[test]
    fn sharded_gradients_sum() {
        let mut rng = rng_for(9, "init");
        let m = Mae::new(small_cfg(), &mut rng).unwrap();
        let b = batch(2, 2, 2, 8, 10, true);
        let draw = m.draw(&b, 0.5, 0.3, &mut rng_for(11, "d")).unwrap();
        let (_, full) = m.grad(&b, &draw).unwrap();
        let mut acc: Vec<Tensor> = full.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for i in 0..2 {
            let vals = Tensor::from_vec(
                &[1, 2, 2, 8, 8],
                b.values.data()[i * 256..(i + 1) * 256].to_vec(),
            )
            .unwrap();
            let shard = ReflectanceBatch::new(vals, Some(vec![b.meta.as_ref().unwrap()[i].clone()])).unwrap();
            let d = StepDraw {
                plan: draw.plan.select(&[i]),
                drops: vec![draw.drops[i]],
            };
            let (_, g) = m.grad(&shard, &d).unwrap();
            for (a, t) in acc.iter_mut().zip(g) {
                a.add_assign(&t.scale(0.5));
            }
        }
        for (a, f) in acc.iter().zip(&full) {
            assert!(a.max_abs_diff(f) < 1e-12);
        }
    }
}
