//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and enough context to
//! compute its vector-Jacobian product. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`GradTape::backward`] simply walks it in reverse.
//!
//! A tape supports exactly one backward pass.

use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::kernels::{col2im, conv2d_forward, gemm, im2row, ConvGeom, Mat};
use crate::tensor::NdTensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    Silu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-sample (mean, 1/std).
        stats: Vec<(f64, f64)>,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Softmax(Var),
    /// `out[i] = in[index[i]]` for a bijective index map.
    Permute {
        x: Var,
        index: Vec<u32>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Element> {
    value: NdTensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Clone)]
pub struct GradTape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

pub type Tape = GradTape<f32>;
pub type Tape64 = GradTape<f64>;

/// Gradients of the leaves that required them.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<NdTensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&NdTensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` never influenced the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> NdTensor<T> {
        self.get(v).cloned().unwrap_or_else(|| NdTensor::zeros(shape))
    }
}

impl<T: Element> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(op: &'static str, a: &NdTensor<T>, b: &NdTensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn leaf(&mut self, value: NdTensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: NdTensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: NdTensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &NdTensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: NdTensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let out = self.value(a).zip_with(self.value(b), f)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c_t = T::of(c);
        let out = self.value(a).map(|v| v * c_t);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c_t = T::of(c);
        let out = self.value(a).map(|v| v + c_t);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let lo_t = T::of(lo);
        let out = self.value(a).map(|v| if v > lo_t { v } else { lo_t });
        self.push("clamp_min", out, Op::ClampMin(a, lo), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push("sum", NdTensor::scalar(T::of(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean_f64();
        self.push("mean", NdTensor::scalar(T::of(m)), Op::Mean(a), &[a])
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mse", va, vb)?;
        let n = va.numel() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
            .sum();
        self.push("mse", NdTensor::scalar(T::of(s / n)), Op::Mse(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// `x [N,Din] · wᵀ + b` with `w [Dout,Din]`, `b [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        gemm(
            Mat::new(self.value(x).data(), n, din),
            Mat::new(self.value(w).data(), dout, din).t(),
            &mut out,
            T::zero(),
        );
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![dout],
                    rhs: self.shape(b).to_vec(),
                });
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(o, &bb)| *o = *o + bb);
            }
            inputs.push(b);
        }
        let value = NdTensor::new([n, dout], out)?;
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    /// Batched cross-correlation, `x [N,C,H,W]`, `w [O,C,kH,kW]`, optional `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(invalid("conv2d", format!("bias shape {:?}, expected [{}]", self.shape(b), geom.c_out)));
            }
        }
        let n = self.shape(x)[0];
        let out = conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = NdTensor::new([n, geom.c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Nearest-neighbour 2× upsampling of `[N,C,H,W]`, cropped to `out_h × out_w`.
    ///
    /// Output pixel `(y, x)` reads input `(min(y/2, H-1), min(x/2, W-1))`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || out_h > 2 * s[2] || out_w > 2 * s[3] {
            return Err(invalid("upsample2x", format!("cannot upsample {s:?} to {out_h}x{out_w}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * out_h * out_w);
        for plane in 0..nc {
            for y in 0..out_h {
                let row = &src[(plane * h + (y / 2).min(h - 1)) * w..][..w];
                out.extend((0..out_w).map(|xx| row[(xx / 2).min(w - 1)]));
            }
        }
        let value = NdTensor::new([s[0], s[1], out_h, out_w], out)?;
        self.push("upsample2x", value, Op::Upsample2x(x), &[x])
    }

    /// Single-group normalization of each sample over `(C,H,W)` with
    /// per-channel affine `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(invalid("group_norm", format!("input {s:?} with affine {:?}", self.shape(gamma))));
        }
        let (n, c) = (s[0], s[1]);
        let per = s[1..].iter().product::<usize>();
        let hw = per / c;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n);
        for b in 0..n {
            let xs = &xv[b * per..(b + 1) * per];
            let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / per as f64;
            let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / per as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            let os = &mut out[b * per..(b + 1) * per];
            for ch in 0..c {
                let (gc, bc) = (g[ch].f64(), bt[ch].f64());
                for i in ch * hw..(ch + 1) * hw {
                    os[i] = T::of((xs[i].f64() - mean) * rstd * gc + bc);
                }
            }
            stats.push((mean, rstd));
        }
        let value = NdTensor::new(s, out)?;
        self.push("group_norm", value, Op::GroupNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Feature-wise affine modulation: `x·(1 + scale) + shift` with
    /// `scale`, `shift` of shape `[N,C]` broadcast over the trailing axes of `x [N,C,...]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let nc = [s[0], s.get(1).copied().unwrap_or(0)];
        if s.len() < 2 || self.shape(scale) != nc || self.shape(shift) != nc {
            return Err(invalid(
                "film",
                format!("input {s:?}, scale {:?}, shift {:?}", self.shape(scale), self.shape(shift)),
            ));
        }
        let inner = s[2..].iter().product::<usize>();
        let (xv, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.chunks(inner).enumerate() {
            let (a, b) = (T::one() + sc[i], sh[i]);
            out.extend(chunk.iter().map(|&v| v * a + b));
        }
        let value = NdTensor::new(s, out)?;
        self.push("film", value, Op::Film { x, scale, shift }, &[x, scale, shift])
    }

    /// Concatenate along axis 1; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if first.len() < 2 {
            return Err(invalid("concat", "inputs need rank >= 2"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let n = first[0];
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for &p in parts {
                let w = self.shape(p)[1] * inner;
                out.extend_from_slice(&self.value(p).data()[b * w..(b + 1) * w]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let value = NdTensor::new(shape, out)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Slice `[start, end)` along axis 1.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start >= end || end > s[1] {
            return Err(invalid("slice", format!("range {start}..{end} on {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * (end - start) * inner);
        for b in 0..s[0] {
            let base = b * s[1] * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[1] = end - start;
        let value = NdTensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, start }, &[x])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(invalid("mean_axis", format!("axis {axis} on {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..][..inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v.f64();
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = NdTensor::new(shape, out.into_iter().map(|v| T::of(v / len as f64)).collect())?;
        self.push("mean_axis", value, Op::MeanAxis { x, axis }, &[x])
    }

    /// Rows of a `[V,D]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(invalid("gather", format!("table must be [V,D], got {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(invalid("gather", format!("row {bad} out of range for {} rows", s[0])));
        }
        let d = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = NdTensor::new([ids.len(), d], out)?;
        self.push("gather", value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`, logits `[N,K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(invalid("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut nll = 0.0;
        for (row, &label) in lv.chunks(k).zip(labels) {
            let p = softmax_row(row);
            nll -= p[label].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        let value = NdTensor::scalar(T::of(nll / labels.len() as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(k)
            .flat_map(softmax_row)
            .map(T::of)
            .collect();
        let value = NdTensor::new(s, out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Depth-to-space: `[N, C·r², H, W] → [N, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(invalid("pixel_shuffle", format!("cannot shuffle {s:?} by {r}")));
        }
        let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let (oh, ow) = (h * r, w * r);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let src_c = ch * r * r + (y % r) * r + xx % r;
                        index.push((((b * c * r * r + src_c) * h + y / r) * w + xx / r) as u32);
                    }
                }
            }
        }
        self.permute(x, index, vec![n, c, oh, ow], "pixel_shuffle")
    }

    /// Space-to-depth: `[N, C, H, W] → [N, C·r², H/r, W/r]`; inverse of [`Self::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(invalid("pixel_unshuffle", format!("cannot unshuffle {s:?} by {r}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / r, w / r);
        let mut index = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        for y in 0..oh {
                            for xx in 0..ow {
                                index.push((((b * c + ch) * h + y * r + i) * w + xx * r + j) as u32);
                            }
                        }
                    }
                }
            }
        }
        self.permute(x, index, vec![n, c * r * r, oh, ow], "pixel_unshuffle")
    }

    fn permute(&mut self, x: Var, index: Vec<u32>, shape: Vec<usize>, name: &'static str) -> Result<Var> {
        let xv = self.value(x).data();
        let out = index.iter().map(|&i| xv[i as usize]).collect();
        let value = NdTensor::new(shape, out)?;
        self.push(name, value, Op::Permute { x, index }, &[x])
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            macro_rules! acc {
                ($v:expr, $f:expr) => {
                    accumulate(&mut grads, nodes, $v, $f)
                };
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc!(*b, |s| add_into(s, &g));
                    pass_through(&mut grads, nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    acc!(*a, |s| add_into(s, &g));
                    acc!(*b, |s| s.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d - v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc!(*a, |s| {
                        for ((d, &gv), &bv) in s.iter_mut().zip(&g).zip(vb) {
                            *d = *d + gv * bv;
                        }
                    });
                    acc!(*b, |s| {
                        for ((d, &gv), &av) in s.iter_mut().zip(&g).zip(va) {
                            *d = *d + gv * av;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = T::of(*c);
                    acc!(*a, |s| s.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v * c));
                }
                Op::AddScalar(a) | Op::Reshape(a) => pass_through(&mut grads, nodes, *a, g),
                Op::Exp(a) => {
                    let out = node.value.data();
                    acc!(*a, |s| {
                        for ((d, &gv), &o) in s.iter_mut().zip(&g).zip(out) {
                            *d = *d + gv * o;
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    acc!(*a, |s| {
                        for ((d, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                            if xv > T::zero() {
                                *d = *d + gv;
                            }
                        }
                    });
                }
                Op::ClampMin(a, lo) => {
                    let (x, lo) = (nodes[a.0].value.data(), T::of(*lo));
                    acc!(*a, |s| {
                        for ((d, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                            if xv > lo {
                                *d = *d + gv;
                            }
                        }
                    });
                }
                Op::Silu(a) => {
                    let x = nodes[a.0].value.data();
                    acc!(*a, |s| {
                        for ((d, &gv), &xv) in s.iter_mut().zip(&g).zip(x) {
                            let sg = sigmoid(xv);
                            *d = *d + gv * sg * (T::one() + xv * (T::one() - sg));
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc!(*a, |s| s.iter_mut().for_each(|d| *d = *d + g0));
                }
                Op::Mean(a) => {
                    let g0 = T::of(g[0].f64() / nodes[a.0].value.numel() as f64);
                    acc!(*a, |s| s.iter_mut().for_each(|d| *d = *d + g0));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let k = 2.0 * g[0].f64() / va.len() as f64;
                    let diff: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| T::of(k * (x.f64() - y.f64()))).collect();
                    acc!(*a, |s| add_into(s, &diff));
                    acc!(*b, |s| s.iter_mut().zip(&diff).for_each(|(d, &v)| *d = *d - v));
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc!(*a, |s| gemm(Mat::new(&g, m, n), Mat::new(vb, k, n).t(), s, T::one()));
                    acc!(*b, |s| gemm(Mat::new(va, m, k).t(), Mat::new(&g, m, n), s, T::one()));
                }
                Op::Linear { x, w, b } => {
                    let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                    let (n, din, dout) = (sx[0], sx[1], sw[0]);
                    let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    acc!(*x, |s| gemm(Mat::new(&g, n, dout), Mat::new(vw, dout, din), s, T::one()));
                    acc!(*w, |s| gemm(Mat::new(&g, n, dout).t(), Mat::new(vx, n, din), s, T::one()));
                    if let Some(b) = b {
                        acc!(*b, |s| {
                            for row in g.chunks(dout) {
                                add_into(s, row);
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    conv2d_backward(geom, &mut grads, nodes, &g, *x, *w, *b);
                }
                Op::Upsample2x(x) => {
                    let s_in = nodes[x.0].value.shape();
                    let s_out = node.value.shape();
                    let (nc, h, w) = (s_in[0] * s_in[1], s_in[2], s_in[3]);
                    let (oh, ow) = (s_out[2], s_out[3]);
                    acc!(*x, |s| {
                        for plane in 0..nc {
                            for y in 0..oh {
                                let dst = (plane * h + (y / 2).min(h - 1)) * w;
                                let src = &g[(plane * oh + y) * ow..][..ow];
                                for (xx, &gv) in src.iter().enumerate() {
                                    let j = dst + (xx / 2).min(w - 1);
                                    s[j] = s[j] + gv;
                                }
                            }
                        }
                    });
                }
                Op::GroupNorm { x, gamma, beta, stats } => {
                    let shape = nodes[x.0].value.shape();
                    let c = shape[1];
                    let per: usize = shape[1..].iter().product();
                    let hw = per / c;
                    let xv = nodes[x.0].value.data();
                    let gm = nodes[gamma.0].value.data();
                    let mut d_gamma = vec![0.0f64; c];
                    let mut d_beta = vec![0.0f64; c];
                    let mut d_x = vec![T::zero(); xv.len()];
                    for (b, &(mean, rstd)) in stats.iter().enumerate() {
                        let xs = &xv[b * per..(b + 1) * per];
                        let gs = &g[b * per..(b + 1) * per];
                        let mut sum_gx = 0.0;
                        let mut sum_gx_xhat = 0.0;
                        for ch in 0..c {
                            let gc = gm[ch].f64();
                            for i in ch * hw..(ch + 1) * hw {
                                let xhat = (xs[i].f64() - mean) * rstd;
                                let gi = gs[i].f64();
                                d_gamma[ch] += gi * xhat;
                                d_beta[ch] += gi;
                                sum_gx += gi * gc;
                                sum_gx_xhat += gi * gc * xhat;
                            }
                        }
                        let (m1, m2) = (sum_gx / per as f64, sum_gx_xhat / per as f64);
                        for ch in 0..c {
                            let gc = gm[ch].f64();
                            for i in ch * hw..(ch + 1) * hw {
                                let xhat = (xs[i].f64() - mean) * rstd;
                                d_x[b * per + i] = T::of(rstd * (gs[i].f64() * gc - m1 - xhat * m2));
                            }
                        }
                    }
                    acc!(*x, |s| add_into(s, &d_x));
                    acc!(*gamma, |s| add_f64_into(s, &d_gamma));
                    acc!(*beta, |s| add_f64_into(s, &d_beta));
                }
                Op::Film { x, scale, shift } => {
                    let xv = nodes[x.0].value.data();
                    let sc = nodes[scale.0].value.data();
                    let inner = xv.len() / sc.len();
                    acc!(*x, |s| {
                        for (i, (ds, gs)) in s.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                            let a = T::one() + sc[i];
                            ds.iter_mut().zip(gs).for_each(|(d, &gv)| *d = *d + gv * a);
                        }
                    });
                    acc!(*scale, |s| {
                        for (i, (xs, gs)) in xv.chunks(inner).zip(g.chunks(inner)).enumerate() {
                            let dot: f64 = xs.iter().zip(gs).map(|(&a, &b)| a.f64() * b.f64()).sum();
                            s[i] = s[i] + T::of(dot);
                        }
                    });
                    acc!(*shift, |s| {
                        for (i, gs) in g.chunks(inner).enumerate() {
                            s[i] = s[i] + T::of(gs.iter().map(|v| v.f64()).sum());
                        }
                    });
                }
                Op::Concat(parts) => {
                    let out_shape = node.value.shape();
                    let inner: usize = out_shape[2..].iter().product();
                    let (n, total) = (out_shape[0], out_shape[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p.0].value.shape()[1];
                        acc!(p, |s| {
                            for b in 0..n {
                                let src = &g[(b * total + offset) * inner..][..c * inner];
                                add_into(&mut s[b * c * inner..(b + 1) * c * inner], src);
                            }
                        });
                        offset += c;
                    }
                }
                Op::Slice { x, start } => {
                    let in_shape = nodes[x.0].value.shape();
                    let out_c = node.value.shape()[1];
                    let inner: usize = in_shape[2..].iter().product();
                    let (n, c) = (in_shape[0], in_shape[1]);
                    acc!(*x, |s| {
                        for b in 0..n {
                            let dst = &mut s[(b * c + start) * inner..][..out_c * inner];
                            add_into(dst, &g[b * out_c * inner..(b + 1) * out_c * inner]);
                        }
                    });
                }
                Op::MeanAxis { x, axis } => {
                    let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let inv = T::of(1.0 / len as f64);
                    acc!(*x, |s| {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut s[(o * len + l) * inner..][..inner];
                                dst.iter_mut().zip(src).for_each(|(d, &gv)| *d = *d + gv * inv);
                            }
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    acc!(*table, |s| {
                        for (row, &id) in ids.iter().enumerate() {
                            add_into(&mut s[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                        }
                    });
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = probs.len() / labels.len();
                    let scale = g[0].f64() / labels.len() as f64;
                    acc!(*logits, |s| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                let idx = r * k + j;
                                s[idx] = s[idx] + T::of(scale * (probs[idx] - onehot));
                            }
                        }
                    });
                }
                Op::Permute { x, index } => {
                    acc!(*x, |s| {
                        for (&i, &gv) in index.iter().zip(&g) {
                            s[i as usize] = s[i as usize] + gv;
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let k = *node.value.shape().last().unwrap_or(&1);
                    acc!(*x, |s| {
                        for ((ds, ys), gs) in s.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                            let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a.f64() * b.f64()).sum();
                            for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                                *d = *d + T::of(yv.f64() * (gv.f64() - dot));
                            }
                        }
                    });
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => NdTensor::new(node.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let target = &nodes[v.0];
    if target.requires_grad {
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.numel()]);
        f(slot);
    }
}

/// Accumulate an unchanged upstream gradient, moving it when the slot is empty.
fn pass_through<T: Element>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, g: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(slot) => add_into(slot, &g),
        empty => *empty = Some(g),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn add_f64_into<T: Element>(dst: &mut [T], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + T::of(s));
}

fn softmax_row<T: Element>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn conv2d_backward<T: Element>(
    geom: &ConvGeom,
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    g: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
) {
    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
    let (kl, p) = (geom.patch_len(), geom.out_positions());
    let img_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let n = xv.len() / img_len;
    let mut cols = vec![T::zero(); kl * p];

    // The weight gradient contracts over output positions; packing that long
    // inner dimension from a transposed operand is several times slower
    // than unfolding straight into row layout.
    accumulate(grads, nodes, w, |s| {
        let mut rows = vec![T::zero(); kl * p];
        for bi in 0..n {
            im2row(geom, &xv[bi * img_len..(bi + 1) * img_len], &mut rows);
            let gb = &g[bi * out_len..(bi + 1) * out_len];
            gemm(Mat::new(gb, geom.c_out, p), Mat::new(&rows, p, kl), s, T::one());
        }
    });
    accumulate(grads, nodes, x, |s| {
        for bi in 0..n {
            let gb = &g[bi * out_len..(bi + 1) * out_len];
            gemm(Mat::new(wv, geom.c_out, kl).t(), Mat::new(gb, geom.c_out, p), &mut cols, T::zero());
            col2im(geom, &cols, &mut s[bi * img_len..(bi + 1) * img_len]);
        }
    });
    if let Some(b) = b {
        accumulate(grads, nodes, b, |s| {
            for bi in 0..n {
                for (o, row) in g[bi * out_len..(bi + 1) * out_len].chunks(p).enumerate() {
                    s[o] = s[o] + T::of(row.iter().map(|v| v.f64()).sum());
                }
            }
        });
    }
}
