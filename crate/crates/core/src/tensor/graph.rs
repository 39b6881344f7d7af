use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Attention weights captured while tracing is enabled.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub label: String,
    /// One `n_q × n_k` row-stochastic matrix per head.
    pub heads: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn rows(&self) -> usize {
        self.heads[0].shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.heads[0].shape()[1]
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    AddScalar(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Upsample(Var),
    AvgPool(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Focal {
        x: Var,
        dx: Vec<T>,
    },
    Bce {
        x: Var,
        dx: Vec<T>,
    },
    BoxReg {
        pred: Var,
        dx: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape over dense tensors.
///
/// In recording mode every primitive stores what its backward pass needs;
/// in inference mode nothing but values is kept and [`Graph::backward`] fails.
pub struct Graph<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    recording: bool,
    bound: HashMap<ParamId, Var>,
    trace: Option<Vec<AttentionRecord<T>>>,
    pub ln_eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self::build(Some(store), true)
    }

    /// A graph that keeps only forward values.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::build(Some(store), false)
    }

    /// A recording graph with no parameters; inputs are bound explicitly.
    pub fn standalone() -> Self {
        Self::build(None, true)
    }

    fn build(store: Option<&'p ParamStore<T>>, recording: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            recording,
            bound: HashMap::new(),
            trace: None,
            ln_eps: LAYER_NORM_EPS,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn enable_attention_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn tracing_attention(&self) -> bool {
        self.trace.is_some()
    }

    pub fn take_attention_trace(&mut self) -> Vec<AttentionRecord<T>> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub(crate) fn record_attention(&mut self, record: AttentionRecord<T>) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(record);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter (once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let v = self.input(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[.., j] + bias[j]` over the last dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return shape_err("add_row", self.shape(x), self.shape(bias));
        }
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    fn channel_split(&self, op: &'static str, x: Var, per_channel: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        let c = shape[0];
        if self.shape(per_channel) != [c] {
            return shape_err(op, shape, self.shape(per_channel));
        }
        Ok((c, shape[1..].iter().product()))
    }

    /// `x[c, ..] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, plane) = self.channel_split("add_channel", x, bias)?;
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .chunks(plane)
            .zip(&b)
            .flat_map(|(ch, &c)| ch.iter().map(move |&v| v + c))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddChannel(x, bias), &[x, bias]))
    }

    /// `x[c, ..] · scale[c]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (_, plane) = self.channel_split("mul_channel", x, scale)?;
        let s = self.data(scale).to_vec();
        let data = self
            .data(x)
            .chunks(plane)
            .zip(&s)
            .flat_map(|(ch, &c)| ch.iter().map(move |&v| v * c))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::MulChannel(x, scale), &[x, scale]))
    }

    /// Adds a one-element tensor to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("add_scalar", self.shape(x), self.shape(s));
        }
        let c = self.data(s)[0];
        let data = self.data(x).iter().map(|&v| v + c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddScalar(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let data = self.data(x).iter().map(|&v| v * f).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.exp()).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(out, Op::Exp(x), &[x])
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => invalid(format!("{op}: expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new([c, r], out)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last dimension, then `· gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let eps = T::of(self.ln_eps);
        let dn = T::of(d as f64);
        let n = self.value(x).numel() / d;
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let data = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let &[o, ci, k, k2] = self.shape(w) else {
            return shape_err("conv2d", self.shape(x), self.shape(w));
        };
        if ci != c || k != k2 {
            return shape_err("conv2d", self.shape(x), self.shape(w));
        }
        let supported = matches!((k, pad), (1, 0) | (3, 1) | (5, 2)) && (stride == 1 || stride == 2);
        if !supported {
            return invalid(format!(
                "conv2d: unsupported geometry kernel {k} stride {stride} padding {pad}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("conv2d bias", self.shape(w), self.shape(b));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return invalid("conv2d: input smaller than kernel");
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(self.data(x), &geom);
        let mut out = vec![T::zero(); o * ho * wo];
        T::gemm(o, c * k * k, ho * wo, self.data(w), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bias = self.data(b);
            for (ch, &bv) in out.chunks_mut(ho * wo).zip(bias) {
                ch.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new([o, ho, wo], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        let cols = if self.recording { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, &inputs))
    }

    /// Per-channel convolution of `x: [C, H, W]` with a data-dependent kernel `[C, k, k]`, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (kc, kh, kw) = self.value(kernel).chw()?;
        if kc != c || kh != kw || h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err("depthwise_conv2d", self.shape(x), self.shape(kernel));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            k: kh,
            stride: 1,
            pad,
        };
        let out = kernels::depthwise_forward(self.data(x), self.data(kernel), &geom);
        let out = Tensor::new([c, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(out, Op::DepthwiseConv { x, k: kernel, geom }, &[x, kernel]))
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.value(x).chw()?;
        self.upsample_nearest_2x_to(x, 2 * h, 2 * w)
    }

    /// Nearest 2× upsampling cropped to `out_h × out_w` (each at most twice the input).
    pub fn upsample_nearest_2x_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if out_h > 2 * h || out_w > 2 * w || out_h + 1 < 2 * h || out_w + 1 < 2 * w {
            return shape_err("upsample_nearest_2x", self.shape(x), &[c, out_h, out_w]);
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                for xx in 0..out_w {
                    out.push(src[(ch * h + y / 2) * w + xx / 2]);
                }
            }
        }
        let out = Tensor::new([c, out_h, out_w], out)?;
        Ok(self.push(out, Op::Upsample(x), &[x]))
    }

    /// Adaptive average pooling of `[C, H, W]` to `[C, out_h, out_w]`.
    ///
    /// Output cell `i` averages input rows `⌊iH/out⌋ .. ⌈(i+1)H/out⌉`; when the
    /// output is larger than the input this replicates cells.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if out_h == 0 || out_w == 0 {
            return invalid("adaptive_avg_pool: zero output extent");
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = kernels::pool_range(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::pool_range(ox, w, out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[(ch * h + y) * w + xx];
                        }
                    }
                    out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let out = Tensor::new([c, out_h, out_w], out)?;
        Ok(self.push(out, Op::AvgPool(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat_rows: no inputs");
        };
        let (_, d) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != d {
                return shape_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let out = Tensor::new([rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > r {
            return invalid(format!("slice_rows: rows {start}..{} out of {r}", start + len));
        }
        let data = self.data(x)[start * d..(start + len) * d].to_vec();
        let out = Tensor::new([len, d], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat_cols: no inputs");
        };
        let (n, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != n {
                return shape_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new([n, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > d {
            return invalid(format!("slice_cols: cols {start}..{} out of {d}", start + len));
        }
        let src = self.data(x);
        let data = (0..n)
            .flat_map(|i| src[i * d + start..i * d + start + len].iter().copied())
            .collect();
        let out = Tensor::new([n, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = self.matrix_dims("gather_rows", x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return invalid("gather_rows: index out of range or empty");
        }
        let src = self.data(x);
        let data = idx
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let out = Tensor::new([idx.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ w ⊙ x` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul(x, w)?;
        Ok(self.sum(p))
    }

    /// Sigmoid focal loss summed over every logit.
    pub fn focal_loss_sum(&mut self, logits: Var, labels: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
        if self.value(logits).numel() != labels.len() {
            return shape_err("focal_loss", self.shape(logits), &[labels.len()]);
        }
        let mut total = 0.0;
        let mut dx = Vec::with_capacity(labels.len());
        for (&x, &y) in self.data(logits).iter().zip(labels) {
            let (l, g) = crate::loss::focal_terms(x.f64(), y, alpha, gamma);
            total += l;
            dx.push(T::of(g));
        }
        Ok(self.push(Tensor::scalar(T::of(total)), Op::Focal { x: logits, dx }, &[logits]))
    }

    /// `Σ w_i · BCE(σ(x_i), t_i)` with constant soft targets and weights.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n {
            return shape_err("bce_with_logits", self.shape(logits), &[targets.len()]);
        }
        let mut total = 0.0;
        let mut dx = Vec::with_capacity(n);
        for ((&x, &t), &w) in self.data(logits).iter().zip(targets).zip(weights) {
            let x = x.f64();
            // softplus(x) - t·x
            total += w * (crate::loss::softplus(x) - t * x);
            dx.push(T::of(w * (crate::loss::sigmoid(x) - t)));
        }
        Ok(self.push(Tensor::scalar(T::of(total)), Op::Bce { x: logits, dx }, &[logits]))
    }

    /// Sum over rows of `L1/norm + (1 − GIoU)` between `(l,t,r,b)` distance rows.
    pub fn box_regression_sum(&mut self, pred: Var, targets: &[[f64; 4]], norm: f64) -> Result<Var> {
        let (n, four) = self.matrix_dims("box_regression", pred)?;
        if four != 4 || n != targets.len() {
            return shape_err("box_regression", self.shape(pred), &[targets.len(), 4]);
        }
        let mut total = 0.0;
        let mut dx = Vec::with_capacity(n * 4);
        for (row, tgt) in self.data(pred).chunks(4).zip(targets) {
            let p = [row[0].f64(), row[1].f64(), row[2].f64(), row[3].f64()];
            let (l, g) = crate::loss::distance_loss_and_grad(&p, tgt, norm);
            total += l;
            dx.extend(g.iter().map(|&v| T::of(v)));
        }
        Ok(self.push(Tensor::scalar(T::of(total)), Op::BoxReg { pred, dx }, &[pred]))
    }

    /// Reverse pass from a one-element `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.recording {
            return invalid("backward on an inference graph");
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let bound = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, bound })
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                let d = self.value(*b).numel();
                acc(*b, &mut |g| {
                    for row in gy.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::AddChannel(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                let plane = gy.len() / self.value(*b).numel();
                acc(*b, &mut |g| {
                    for (gc, ch) in g.iter_mut().zip(gy.chunks(plane)) {
                        *gc += ch.iter().copied().sum::<T>();
                    }
                });
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*s, &mut |g| g[0] += gy.iter().copied().sum::<T>());
            }
            Op::MulChannel(x, s) => {
                let sv = self.data(*s);
                let xv = self.data(*x);
                let plane = gy.len() / sv.len();
                acc(*x, &mut |g| {
                    for ((gc, dc), &c) in g.chunks_mut(plane).zip(gy.chunks(plane)).zip(sv) {
                        gc.iter_mut().zip(dc).for_each(|(g, &d)| *g += d * c);
                    }
                });
                acc(*s, &mut |g| {
                    for ((gs, dc), xc) in g.iter_mut().zip(gy.chunks(plane)).zip(xv.chunks(plane)) {
                        *gs += dc.iter().zip(xc).map(|(&d, &v)| d * v).sum::<T>();
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *f)),
            Op::Relu(x) => {
                let xv = self.data(*x);
                acc(*x, &mut |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |g| {
                for ((g, &d), &o) in g.iter_mut().zip(gy).zip(y) {
                    *g += d * o;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |g| T::gemm(m, n, k, gy, false, bv, true, g, true));
                acc(*b, &mut |g| T::gemm(k, m, n, av, true, gy, false, g, true));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                        let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((g, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.data(*gain);
                let d = gv.len();
                let dn = T::of(d as f64);
                acc(*x, &mut |g| {
                    for (((gr, dr), xr), &r) in g
                        .chunks_mut(d)
                        .zip(gy.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd)
                    {
                        let dxhat: Vec<T> = dr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((g, &dh), &xh) in gr.iter_mut().zip(&dxhat).zip(xr) {
                            *g += r * (dh - mean_d - xh * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (dr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for ((g, &dv), &xh) in g.iter_mut().zip(dr).zip(xr) {
                            *g += dv * xh;
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for dr in gy.chunks(d) {
                        add_into(g, dr);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.shape(*w)[0];
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.out_h() * geom.out_w();
                acc(*w, &mut |g| T::gemm(o, hw, ckk, gy, false, cols, true, g, true));
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for (gb, ch) in g.iter_mut().zip(gy.chunks(hw)) {
                            *gb += ch.iter().copied().sum::<T>();
                        }
                    });
                }
                let wv = self.data(*w);
                acc(*x, &mut |g| {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    T::gemm(ckk, o, hw, wv, true, gy, false, &mut dcols, false);
                    kernels::col2im_add(&dcols, geom, g);
                });
            }
            Op::DepthwiseConv { x, k, geom } => {
                let (xv, kv) = (self.data(*x), self.data(*k));
                let mut dx = self.nodes[x.0].needs_grad.then(|| vec![T::zero(); xv.len()]);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![T::zero(); kv.len()]);
                kernels::depthwise_backward(xv, kv, gy, geom, dx.as_mut(), dk.as_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |g| add_into(g, &dx));
                }
                if let Some(dk) = dk {
                    acc(*k, &mut |g| add_into(g, &dk));
                }
            }
            Op::Upsample(x) => {
                let (_, h, w) = self.value(*x).chw().expect("rank 3");
                let (c, oh, ow) = node.value.chw().expect("rank 3");
                acc(*x, &mut |g| {
                    for ch in 0..c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                g[(ch * h + yy / 2) * w + xx / 2] += gy[(ch * oh + yy) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x) => {
                let (_, h, w) = self.value(*x).chw().expect("rank 3");
                let (c, oh, ow) = node.value.chw().expect("rank 3");
                acc(*x, &mut |g| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1) = kernels::pool_range(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = kernels::pool_range(ox, w, ow);
                                let d = gy[(ch * oh + oy) * ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        g[(ch * h + yy) * w + xx] += d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |g| add_into(g, &gy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.shape(*x)[1];
                acc(*x, &mut |g| add_into(&mut g[start * d..start * d + gy.len()], gy));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (n, c) = (self.shape(p)[0], self.shape(p)[1]);
                    acc(p, &mut |g| {
                        for i in 0..n {
                            add_into(&mut g[i * c..(i + 1) * c], &gy[i * total + offset..i * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (i, row) in gy.chunks(len).enumerate() {
                        add_into(&mut g[i * d + start..i * d + start + len], row);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                acc(*x, &mut |g| {
                    for (row, &i) in gy.chunks(d).zip(idx) {
                        add_into(&mut g[i * d..(i + 1) * d], row);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::Focal { x, dx } | Op::Bce { x, dx } | Op::BoxReg { pred: x, dx } => {
                acc(*x, &mut |g| {
                    for (g, &d) in g.iter_mut().zip(dx) {
                        *g += d * gy[0];
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, `None` if `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().copied()
    }
}
