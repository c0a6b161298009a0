//! A small tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Every op evaluates eagerly and records enough state to push gradients back
//! to its inputs. Nodes created from parameters are tracked so that
//! [`Gradients::param_grads`] can hand back one gradient per [`ParamStore`]
//! entry.

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
struct Lerp {
    lo: usize,
    hi: usize,
    frac: f64,
}

enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    AddSuffix(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<Vec<usize>>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    ExpandRows(NodeId),
    MeanRows(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: NodeId,
        rows: Vec<Lerp>,
        cols: Vec<Lerp>,
    },
    UpNearest {
        x: NodeId,
        factor: usize,
    },
    /// Loss ops cache d(loss)/d(input) at forward time.
    Loss {
        x: NodeId,
        dx: Tensor,
    },
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Binds a parameter into the graph, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id.index()) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id.index(), n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(invalid!("add: shapes {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of
    /// `a`; `b` is repeated over the leading axes.
    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(invalid!("add_suffix: {sb:?} is not a suffix of {sa:?}"));
        }
        let mut out = va.clone();
        let n = vb.len().max(1);
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, v) in chunk.iter_mut().zip(vb.data()) {
                *o += v;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddSuffix(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// `x * s` for a single-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(invalid!("scale_by: factor must hold one element"));
        }
        let out = self.value(x).scale(self.value(s).item());
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, ng))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.ndim() != 2 || vx.ndim() == 0 || *vx.shape().last().unwrap() != vw.shape()[0] {
            return Err(invalid!(
                "linear: input {:?} incompatible with weight {:?}",
                vx.shape(),
                vw.shape()
            ));
        }
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        let m = vx.len() / k;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        gemm(m, k, n, vx.data(), false, vw.data(), false, out.data_mut(), false);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [n] {
                return Err(invalid!("linear: bias {:?} for width {n}", vb.shape()));
            }
            for row in out.data_mut().chunks_mut(n) {
                for (o, v) in row.iter_mut().zip(vb.data()) {
                    *o += v;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Batched product `[G, M, K] · [G, K, N]`, or `[G, M, K] · [G, N, K]ᵀ`
    /// with `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(invalid!("bmm: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros(&[g, m, n]);
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, ng))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap_or(&0);
        if n == 0 || self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(invalid!("layer_norm: affine params do not match width {n}"));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.len() / n;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out.data_mut()[r * n + j] = h * g[j] + bt[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid!("narrow: [{start}, {}) of axis {axis} in {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, ng))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let out = self.value(x).permute(perm)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Per-sample row selection: `[B, L, D]` → `[B, K, D]` with
    /// `out[b, k] = x[b, idx[b][k]]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[Vec<usize>]) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || idx.len() != s[0] {
            return Err(invalid!("gather_rows: input {s:?}, {} index rows", idx.len()));
        }
        let (l, d) = (s[1], s[2]);
        let k = idx.first().map_or(0, |r| r.len());
        if idx.iter().any(|r| r.len() != k || r.iter().any(|&i| i >= l)) {
            return Err(invalid!("gather_rows: ragged or out-of-range indices"));
        }
        let mut out = Tensor::zeros(&[s[0], k, d]);
        for (b, rows) in idx.iter().enumerate() {
            for (j, &i) in rows.iter().enumerate() {
                let src = &vx.data()[(b * l + i) * d..(b * l + i + 1) * d];
                out.data_mut()[(b * k + j) * d..(b * k + j + 1) * d].copy_from_slice(src);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(invalid!("concat: axis {axis} out of range"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(invalid!("concat: {s:?} vs {first:?} along {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Repeats a vector `[D]` into `[batch, rows, D]`.
    pub fn expand_rows(&mut self, v: NodeId, batch: usize, rows: usize) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.ndim() != 1 {
            return Err(invalid!("expand_rows: expected a vector, got {:?}", vv.shape()));
        }
        let d = vv.len();
        let mut data = Vec::with_capacity(batch * rows * d);
        for _ in 0..batch * rows {
            data.extend_from_slice(vv.data());
        }
        let out = Tensor::from_vec(&[batch, rows, d], data)?;
        let ng = self.ng(v);
        Ok(self.push(out, Op::ExpandRows(v), ng))
    }

    /// Mean over axis 1 of `[B, L, D]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(invalid!("mean_rows: expected [B, L>0, D], got {s:?}"));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            for li in 0..l {
                for j in 0..d {
                    out.data_mut()[bi * d + j] += vx.data()[(bi * l + li) * d + j];
                }
            }
        }
        let out = out.scale(1.0 / l as f64);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanRows(x), ng))
    }

    /// Stride-1 convolution on `[B, C, H, W]` with square kernel
    /// `w: [Cout, Cin, k, k]` and zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || vb.shape() != [sw[0]]
        {
            return Err(invalid!("conv2d: input {sx:?}, weight {sw:?}"));
        }
        let (bn, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid!("conv2d: kernel {k} larger than padded input"));
        }
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
        let ck = cin * k * k;
        let geo = Geometry {
            c: cin,
            h,
            w: wd,
            k,
            stride: 1,
            pad,
            gh: oh,
            gw: ow,
        };
        let mut cols = vec![0.0; ck * oh * ow];
        for bi in 0..bn {
            im2col(&vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd], &geo, &mut cols);
            let ob = &mut out.data_mut()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            gemm(cout, ck, oh * ow, vw.data(), false, &cols, false, ob, false);
            for (co, plane) in ob.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += vb.data()[co]);
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, ng))
    }

    /// Transposed convolution on `[B, Cin, H, W]` with `w: [Cin, Cout, k, k]`;
    /// output side `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || vb.shape() != [sw[1]]
        {
            return Err(invalid!("conv_transpose2d: input {sx:?}, weight {sw:?}"));
        }
        let (bn, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[1], sw[2]);
        if stride == 0 || (h - 1) * stride + k < 2 * pad + 1 {
            return Err(invalid!("conv_transpose2d: empty output"));
        }
        let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
        let geo = Geometry {
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            gh: h,
            gw: wd,
        };
        let ck = cout * k * k;
        let mut cols = vec![0.0; ck * h * wd];
        let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
        for bi in 0..bn {
            let xb = &vx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            gemm(ck, cin, h * wd, vw.data(), true, xb, false, &mut cols, false);
            let ob = &mut out.data_mut()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            col2im(&cols, &geo, ob);
            for (co, plane) in ob.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += vb.data()[co]);
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Bilinear resize of `[B, C, H, W]` with the half-pixel
    /// (align-corners = false) convention.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(invalid!("resize_bilinear: input {s:?} to {out_h}x{out_w}"));
        }
        let rows = lerp_table(s[2], out_h);
        let cols = lerp_table(s[3], out_w);
        let out = resize_forward(self.value(x), &rows, &cols);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Resize { x, rows, cols }, ng))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 || factor == 0 {
            return Err(invalid!("upsample_nearest: input {s:?}, factor {factor}"));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
        for p in 0..bc {
            for y in 0..oh {
                for xx in 0..ow {
                    out.data_mut()[(p * oh + y) * ow + xx] =
                        vx.data()[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::UpNearest { x, factor }, ng))
    }

    /// Mean over masked tokens of the per-token mean squared error.
    /// `pred` and `target` are `[B, L, P]`, `mask` is `[B][L]` with `true`
    /// marking a masked token.
    pub fn masked_mse(&mut self, pred: NodeId, target: &Tensor, mask: &[Vec<bool>]) -> Result<NodeId> {
        let vp = self.value(pred);
        let s = vp.shape();
        if s.len() != 3 || target.shape() != s || mask.len() != s[0] || mask.iter().any(|m| m.len() != s[1])
        {
            return Err(invalid!(
                "masked_mse: pred {s:?}, target {:?}, mask {}",
                target.shape(),
                mask.len()
            ));
        }
        let p = s[2];
        let n_masked = mask.iter().flatten().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(invalid!("masked_mse: no masked tokens, loss undefined"));
        }
        let mut dx = Tensor::zeros(s);
        let mut loss = 0.0;
        let denom = (p * n_masked) as f64;
        for (t, &m) in mask.iter().flatten().enumerate() {
            if !m {
                continue;
            }
            let mut tok = 0.0;
            for j in t * p..(t + 1) * p {
                let d = vp.data()[j] - target.data()[j];
                tok += d * d;
                dx.data_mut()[j] = 2.0 * d / denom;
            }
            loss += tok / p as f64;
        }
        let out = Tensor::scalar(loss / n_masked as f64);
        let ng = self.ng(pred);
        Ok(self.push(out, Op::Loss { x: pred, dx }, ng))
    }

    /// Plain mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() || vp.is_empty() {
            return Err(invalid!("mse: {:?} vs {:?}", vp.shape(), target.shape()));
        }
        let n = vp.len() as f64;
        let mut loss = 0.0;
        let mut dx = Tensor::zeros(vp.shape());
        for (i, (a, b)) in vp.data().iter().zip(target.data()).enumerate() {
            let d = a - b;
            loss += d * d;
            dx.data_mut()[i] = 2.0 * d / n;
        }
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss / n), Op::Loss { x: pred, dx }, ng))
    }

    /// Class-weighted cross-entropy on logits `[B, C, ...]` with one label per
    /// `(b, spatial)` position, normalised by the sum of applied weights.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() < 2 || weights.len() != s[1] {
            return Err(invalid!(
                "weighted_cross_entropy: logits {s:?}, {} weights",
                weights.len()
            ));
        }
        let (b, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        if labels.len() != b * sp {
            return Err(invalid!(
                "weighted_cross_entropy: {} labels for {} positions",
                labels.len(),
                b * sp
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(invalid!("label {bad} out of range for {c} classes"));
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(invalid!("class weights must be positive and finite"));
        }
        let total_w: f64 = labels.iter().map(|&y| weights[y]).sum();
        let mut loss = 0.0;
        let mut dx = Tensor::zeros(s);
        let mut probs = vec![0.0; c];
        for bi in 0..b {
            for q in 0..sp {
                let at = |ci: usize| (bi * c + ci) * sp + q;
                let mx = (0..c).map(|ci| vl.data()[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (ci, pr) in probs.iter_mut().enumerate() {
                    *pr = (vl.data()[at(ci)] - mx).exp();
                    z += *pr;
                }
                let y = labels[bi * sp + q];
                let wy = weights[y];
                loss += wy * -((vl.data()[at(y)] - mx) - z.ln());
                for (ci, pr) in probs.iter().enumerate() {
                    let p = pr / z;
                    let ind = if ci == y { 1.0 } else { 0.0 };
                    dx.data_mut()[at(ci)] = wy * (p - ind) / total_w;
                }
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss / total_w), Op::Loss { x: logits, dx }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&p, &n)| grads[n.0].take().map(|g| (p, g)))
            .collect();
        Ok(Gradients { params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddSuffix(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let n = gb.len().max(1);
                    for chunk in g.data().chunks(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.scale(*s)),
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).item();
                self.acc(grads, *x, g.scale(sv));
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    self.acc(grads, *s, Tensor::full(self.shape(*s), d));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.len() / k;
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(vx.shape());
                    gemm(m, n, k, g.data(), false, vw.data(), true, gx.data_mut(), false);
                    self.acc(grads, *x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Tensor::zeros(vw.shape());
                    gemm(k, m, n, vx.data(), true, g.data(), false, gw.data_mut(), false);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros(&[n]);
                        for row in g.data().chunks(n) {
                            for (o, v) in gb.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.acc(grads, *b, gb);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = out.shape()[2];
                let (sa, sb, so) = (m * k, k * n, m * n);
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    for i in 0..gn {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * so..(i + 1) * so],
                            false,
                            &vb.data()[i * sb..(i + 1) * sb],
                            !trans_b,
                            &mut ga.data_mut()[i * sa..(i + 1) * sa],
                            false,
                        );
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    for i in 0..gn {
                        let gi = &g.data()[i * so..(i + 1) * so];
                        let ai = &va.data()[i * sa..(i + 1) * sa];
                        let dst = &mut gb.data_mut()[i * sb..(i + 1) * sb];
                        if *trans_b {
                            // B stored [N, K]: dB = dCᵀ · A
                            gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                let rows = xhat.len() / n;
                let mut gx = Tensor::zeros(self.shape(*x));
                let mut gg = Tensor::zeros(&[n]);
                let mut gbt = Tensor::zeros(&[n]);
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                        gg.data_mut()[j] += gr[j] * hr[j];
                        gbt.data_mut()[j] += gr[j];
                    }
                    let scale = rstd[r] / n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        gx.data_mut()[r * n + j] = scale * (n as f64 * dh - s1 - hr[j] * s2);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gbt);
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(vx.data()) {
                    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    *o *= cdf + v * pdf;
                }
                self.acc(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut gx = Tensor::zeros(out.shape());
                for ((dst, y), dy) in gx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(out.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = y[j] * (dy[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                self.acc(grads, *x, gx);
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut gx = Tensor::zeros(s);
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    gx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, g.permute(&inv).expect("permute grad"));
            }
            Op::GatherRows { x, idx } => {
                let s = self.shape(*x);
                let (l, d) = (s[1], s[2]);
                let k = out.shape()[1];
                let mut gx = Tensor::zeros(s);
                for (b, rows) in idx.iter().enumerate() {
                    for (j, &i) in rows.iter().enumerate() {
                        for c in 0..d {
                            gx.data_mut()[(b * l + i) * d + c] += g.data()[(b * k + j) * d + c];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let w = self.shape(x)[*axis] * inner;
                    if self.ng(x) {
                        let mut gx = Tensor::zeros(self.shape(x));
                        for o in 0..outer {
                            gx.data_mut()[o * w..(o + 1) * w]
                                .copy_from_slice(&g.data()[o * total + offset..o * total + offset + w]);
                        }
                        self.acc(grads, x, gx);
                    }
                    offset += w;
                }
            }
            Op::ExpandRows(v) => {
                let d = self.value(*v).len();
                let mut gv = Tensor::zeros(&[d]);
                for row in g.data().chunks(d) {
                    for (o, x) in gv.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
                self.acc(grads, *v, gv);
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (b, l, d) = (s[0], s[1], s[2]);
                let mut gx = Tensor::zeros(s);
                let inv = 1.0 / l as f64;
                for bi in 0..b {
                    for li in 0..l {
                        for j in 0..d {
                            gx.data_mut()[(bi * l + li) * d + j] = g.data()[bi * d + j] * inv;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (bn, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (cout, k) = (vw.shape()[0], vw.shape()[2]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let geo = Geometry {
                    c: cin,
                    h,
                    w: wd,
                    k,
                    stride: 1,
                    pad: *pad,
                    gh: oh,
                    gw: ow,
                };
                let ck = cin * k * k;
                let mut cols = vec![0.0; ck * oh * ow];
                let mut dcols = vec![0.0; ck * oh * ow];
                let mut gx = Tensor::zeros(vx.shape());
                let mut gw = Tensor::zeros(vw.shape());
                let mut gb = Tensor::zeros(&[cout]);
                let img = cin * h * wd;
                for bi in 0..bn {
                    let gb_out = &g.data()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                    for (co, plane) in gb_out.chunks(oh * ow).enumerate() {
                        gb.data_mut()[co] += plane.iter().sum::<f64>();
                    }
                    if self.ng(*w) {
                        im2col(&vx.data()[bi * img..(bi + 1) * img], &geo, &mut cols);
                        gemm(cout, oh * ow, ck, gb_out, false, &cols, true, gw.data_mut(), true);
                    }
                    if self.ng(*x) {
                        gemm(ck, cout, oh * ow, vw.data(), true, gb_out, false, &mut dcols, false);
                        col2im(&dcols, &geo, &mut gx.data_mut()[bi * img..(bi + 1) * img]);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                self.acc(grads, *b, gb);
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (bn, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (cout, k) = (vw.shape()[1], vw.shape()[2]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let geo = Geometry {
                    c: cout,
                    h: oh,
                    w: ow,
                    k,
                    stride: *stride,
                    pad: *pad,
                    gh: h,
                    gw: wd,
                };
                let ck = cout * k * k;
                let mut dcols = vec![0.0; ck * h * wd];
                let mut gx = Tensor::zeros(vx.shape());
                let mut gw = Tensor::zeros(vw.shape());
                let mut gb = Tensor::zeros(&[cout]);
                let img = cin * h * wd;
                for bi in 0..bn {
                    let go = &g.data()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                    for (co, plane) in go.chunks(oh * ow).enumerate() {
                        gb.data_mut()[co] += plane.iter().sum::<f64>();
                    }
                    im2col(go, &geo, &mut dcols);
                    if self.ng(*x) {
                        gemm(
                            cin,
                            ck,
                            h * wd,
                            vw.data(),
                            false,
                            &dcols,
                            false,
                            &mut gx.data_mut()[bi * img..(bi + 1) * img],
                            false,
                        );
                    }
                    if self.ng(*w) {
                        let xb = &vx.data()[bi * img..(bi + 1) * img];
                        gemm(cin, h * wd, ck, xb, false, &dcols, true, gw.data_mut(), true);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                self.acc(grads, *b, gb);
            }
            Op::Resize { x, rows, cols } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (rows.len(), cols.len());
                let mut gx = Tensor::zeros(s);
                for p in 0..s[0] * s[1] {
                    let src = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    let go = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    for (y, ry) in rows.iter().enumerate() {
                        for (xx, cx) in cols.iter().enumerate() {
                            let v = go[y * ow + xx];
                            src[ry.lo * w + cx.lo] += v * (1.0 - ry.frac) * (1.0 - cx.frac);
                            src[ry.lo * w + cx.hi] += v * (1.0 - ry.frac) * cx.frac;
                            src[ry.hi * w + cx.lo] += v * ry.frac * (1.0 - cx.frac);
                            src[ry.hi * w + cx.hi] += v * ry.frac * cx.frac;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::UpNearest { x, factor } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = Tensor::zeros(s);
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx.data_mut()[(p * h + y / factor) * w + xx / factor] +=
                                g.data()[(p * oh + y) * ow + xx];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Loss { x, dx } => self.acc(grads, *x, dx.scale(g.item())),
            Op::Sum(x) => self.acc(grads, *x, Tensor::full(self.shape(*x), g.item())),
        }
    }
}

/// Gradients of a scalar with respect to every parameter bound in the graph.
pub struct Gradients {
    params: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id.index())
    }

    /// One gradient per store entry; parameters the loss never touched get
    /// zeros.
    pub fn param_grads(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.params
                    .remove(&id.index())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Image geometry for `im2col`: a `[c, h, w]` image read through a `k×k`
/// window on a `gh×gw` grid of positions `(gy·stride - pad, gx·stride - pad)`.
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
}

impl Geometry {
    fn src(&self, g: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (g * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col(img: &[f64], geo: &Geometry, cols: &mut [f64]) {
    let n = geo.gh * geo.gw;
    for c in 0..geo.c {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for gy in 0..geo.gh {
                    let sy = geo.src(gy, ky, geo.h);
                    for gx in 0..geo.gw {
                        dst[gy * geo.gw + gx] = match (sy, geo.src(gx, kx, geo.w)) {
                            (Some(y), Some(x)) => img[(c * geo.h + y) * geo.w + x],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
fn col2im(cols: &[f64], geo: &Geometry, img: &mut [f64]) {
    let n = geo.gh * geo.gw;
    for c in 0..geo.c {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for gy in 0..geo.gh {
                    let Some(y) = geo.src(gy, ky, geo.h) else { continue };
                    for gx in 0..geo.gw {
                        if let Some(x) = geo.src(gx, kx, geo.w) {
                            img[(c * geo.h + y) * geo.w + x] += src[gy * geo.gw + gx];
                        }
                    }
                }
            }
        }
    }
}

fn lerp_table(input: usize, output: usize) -> Vec<Lerp> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Lerp {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

fn resize_forward(x: &Tensor, rows: &[Lerp], cols: &[Lerp]) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
    for p in 0..s[0] * s[1] {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (y, ry) in rows.iter().enumerate() {
            for (xx, cx) in cols.iter().enumerate() {
                let top = src[ry.lo * w + cx.lo] * (1.0 - cx.frac) + src[ry.lo * w + cx.hi] * cx.frac;
                let bot = src[ry.hi * w + cx.lo] * (1.0 - cx.frac) + src[ry.hi * w + cx.hi] * cx.frac;
                dst[y * ow + xx] = top * (1.0 - ry.frac) + bot * ry.frac;
            }
        }
    }
    out
}

/// Non-differentiable bilinear resize of `[B, C, H, W]` (half-pixel
/// convention), shared with chip preparation.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
        return Err(invalid!("resize_bilinear: input {s:?} to {out_h}x{out_w}"));
    }
    Ok(resize_forward(x, &lerp_table(s[2], out_h), &lerp_table(s[3], out_w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Fourth-order central differences of `f` with respect to every
    /// parameter, compared with the tape gradients.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> NodeId) {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        let grads = g.backward(out).unwrap().param_grads(store);
        let h = 1e-4;
        let eval = |s: &ParamStore| {
            let mut g = Graph::new();
            let o = f(&mut g, s);
            g.value(o).item()
        };
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (pi, id) in ids.into_iter().enumerate() {
            for j in 0..store.get(id).len() {
                let orig = store.get(id).data()[j];
                let mut at = |d: f64| {
                    store.get_mut(id).data_mut()[j] = orig + d;
                    let v = eval(store);
                    store.get_mut(id).data_mut()[j] = orig;
                    v
                };
                let num = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                let ana = grads[pi].data()[j];
                let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-7);
                assert!(err < 1e-6, "param {pi}[{j}]: analytic {ana} vs numeric {num}");
            }
        }
    }

    #[test]
    fn linear_layernorm_gelu_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let x = s.push("x", rand_tensor(&[2, 3, 4], &mut rng));
        let w = s.push("w", rand_tensor(&[4, 5], &mut rng));
        let b = s.push("b", rand_tensor(&[5], &mut rng));
        let gam = s.push("g", rand_tensor(&[5], &mut rng));
        let bet = s.push("beta", rand_tensor(&[5], &mut rng));
        let probe = rand_tensor(&[2, 3, 5], &mut rng);
        check(&mut s, |g, st| {
            let (x, w, b) = (g.param(st, x), g.param(st, w), g.param(st, b));
            let y = g.linear(x, w, Some(b)).unwrap();
            let (gm, bt) = (g.param(st, gam), g.param(st, bet));
            let y = g.layer_norm(y, gm, bt, 1e-6).unwrap();
            let y = g.gelu(y);
            let y = g.softmax(y);
            let p = g.input(probe.clone());
            let y = g.add(y, p).unwrap();
            let y = g.gelu(y);
            g.sum(y)
        });
    }

    #[test]
    fn bmm_permute_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let a = s.push("a", rand_tensor(&[2, 3, 4], &mut rng));
        let b = s.push("b", rand_tensor(&[2, 5, 4], &mut rng));
        let c = s.push("c", rand_tensor(&[2, 4, 3], &mut rng));
        let v = s.push("v", rand_tensor(&[3], &mut rng));
        let sc = s.push("s", Tensor::scalar(0.7));
        check(&mut s, |g, st| {
            let (a, b, c, v, sc) = (
                g.param(st, a),
                g.param(st, b),
                g.param(st, c),
                g.param(st, v),
                g.param(st, sc),
            );
            let ab = g.bmm(a, b, true).unwrap(); // [2,3,5]
            let ab = g.narrow(ab, 2, 1, 3).unwrap(); // [2,3,3]
            let ab = g.concat(&[ab, ab], 2).unwrap(); // [2,3,6]
            let ab = g.narrow(ab, 2, 1, 5).unwrap(); // [2,3,5]
            let ab = g.permute(ab, &[0, 2, 1]).unwrap(); // [2,5,3]
            let ac = g.bmm(a, c, false).unwrap(); // [2,3,3]
            let e = g.expand_rows(v, 2, 2).unwrap(); // [2,2,3]
            let cat = g.concat(&[ab, ac, e], 1).unwrap(); // [2,10,3]
            let gat = g.gather_rows(cat, &[vec![9, 0, 3, 3], vec![1, 8, 2, 5]]).unwrap();
            let m = g.mean_rows(gat).unwrap();
            let m = g.scale_by(m, sc).unwrap();
            let m = g.add_suffix(m, v).unwrap();
            let sq = g.gelu(m);
            let cat2 = g.concat(&[sq, m], 1).unwrap();
            g.sum(cat2)
        });
    }

    #[test]
    fn conv_deconv_resize_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let x = s.push("x", rand_tensor(&[2, 2, 3, 3], &mut rng));
        let wt = s.push("wt", rand_tensor(&[2, 3, 2, 2], &mut rng));
        let bt = s.push("bt", rand_tensor(&[3], &mut rng));
        let wc = s.push("wc", rand_tensor(&[2, 3, 3, 3], &mut rng));
        let bc = s.push("bc", rand_tensor(&[2], &mut rng));
        let probe = rand_tensor(&[2, 2, 5, 5], &mut rng);
        check(&mut s, |g, st| {
            let x = g.param(st, x);
            let (wt, bt, wc, bc) = (g.param(st, wt), g.param(st, bt), g.param(st, wc), g.param(st, bc));
            let y = g.conv_transpose2d(x, wt, bt, 2, 0).unwrap(); // [2,3,6,6]
            let y = g.conv2d(y, wc, bc, 1).unwrap(); // [2,2,6,6]
            let y = g.resize_bilinear(y, 5, 5).unwrap();
            let p = g.input(probe.clone());
            let y = g.add(y, p).unwrap();
            let y = g.gelu(y);
            let y = g.upsample_nearest(y, 2).unwrap();
            let y = g.resize_bilinear(y, 7, 3).unwrap();
            let y = g.relu(y);
            g.sum(y)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let p = s.push("p", rand_tensor(&[2, 3, 4], &mut rng));
        let t = rand_tensor(&[2, 3, 4], &mut rng);
        let mask = vec![vec![true, false, true], vec![false, false, true]];
        check(&mut s, |g, st| {
            let p = g.param(st, p);
            let a = g.masked_mse(p, &t, &mask).unwrap();
            let b = g.mse(p, &t).unwrap();
            let p2 = g.reshape(p, &[2, 3, 2, 2]).unwrap();
            let c = g.weighted_cross_entropy(p2, &[0, 2, 1, 1, 2, 0, 0, 1], &[0.5, 2.0, 1.0]).unwrap();
            let ab = g.add(a, b).unwrap();
            g.add(ab, c).unwrap()
        });
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[1, 2, 4, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xn, wn, bn, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 4, 5]);
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                    continue;
                                }
                                acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * 4 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                    assert!((out.data()[(co * 4 + oy) * 5 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[1, 2, 3, 2], &mut rng);
        let w = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let b = Tensor::zeros(&[3]);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(b));
        let y = g.conv_transpose2d(xn, wn, bn, 2, 0).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 6, 4]);
        let mut expect = vec![0.0; 3 * 6 * 4];
        for ci in 0..2 {
            for iy in 0..3 {
                for ix in 0..2 {
                    for co in 0..3 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                expect[(co * 6 + iy * 2 + ky) * 4 + ix * 2 + kx] +=
                                    x.data()[(ci * 3 + iy) * 2 + ix] * w.data()[((ci * 3 + co) * 2 + ky) * 2 + kx];
                            }
                        }
                    }
                }
            }
        }
        for (a, e) in out.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_same_size_is_identity_and_constant_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[1, 2, 5, 4], &mut rng);
        assert_eq!(resize_bilinear(&x, 5, 4).unwrap(), x);
        let c = Tensor::full(&[1, 1, 2, 2], 0.25);
        let up = resize_bilinear(&c, 7, 9).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
