//! Wengert tape: records primitive ops during the forward pass and replays
//! them in exact reverse order to accumulate gradients.
//!
//! A tape and its buffers are confined to one logical thread for the duration
//! of a forward/backward pass; independent passes may run concurrently.

pub use super::ops::Conv2dSpec;
use super::ops::{self, conv_out_extent};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a buffer on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

struct Buffer<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    /// Leaves: gradient requested by the caller. Interior buffers: any
    /// upstream leaf requires grad, so a gradient must flow through.
    needs_grad: bool,
    is_leaf: bool,
}

enum Op<T> {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Div { a: Var, b: Var, out: Var },
    Neg { a: Var, out: Var },
    Scale { a: Var, c: T, out: Var },
    AddScalar { a: Var, out: Var },
    Square { a: Var, out: Var },
    Sqrt { a: Var, out: Var },
    Abs { a: Var, out: Var },
    Relu { a: Var, out: Var },
    Sigmoid { a: Var, out: Var },
    SoftmaxLastDim { a: Var, out: Var, cols: usize },
    Linear { x: Var, w: Var, b: Option<Var>, out: Var, n: usize, d: usize, k: usize },
    MatmulTa { a: Var, b: Var, out: Var, bsz: usize, d1: usize, d2: usize },
    Outer { u: Var, v: Var, out: Var },
    RowSlice { m: Var, out: Var, row: usize, cols: usize },
    WeightedSum { xs: Vec<Var>, gates: Var, out: Var },
    ConcatC { xs: Vec<Var>, out: Var },
    Offset2d { a: Var, out: Var, dh: usize, dw: usize },
    Conv2d { x: Var, w: Var, out: Var, spec: Conv2dSpec },
    MaxPool { x: Var, out: Var, argmax: Vec<usize> },
    AvgPool { x: Var, out: Var, k: usize, stride: usize, padding: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, out: Var, mean: Vec<T>, inv_std: Vec<T> },
    MeanSpatial { x: Var, out: Var },
    SumAll { a: Var, out: Var },
    MeanAll { a: Var, out: Var },
    SumAxis0 { a: Var, out: Var, rows: usize, cols: usize },
    MeanAxis0 { a: Var, out: Var, rows: usize, cols: usize },
    SubRow { a: Var, r: Var, out: Var, rows: usize, cols: usize },
    CrossEntropy { logits: Var, out: Var, labels: Vec<usize>, lse: Vec<T> },
}

/// Gradients produced by a backward pass, indexed by `Var`.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a variable, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

/// Recorded forward pass over tensors of element type `T`.
pub struct Tape<T> {
    bufs: Vec<Buffer<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Register a leaf tensor. Gradients are reported only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.bufs.len();
        self.bufs.push(Buffer {
            shape: t.shape().to_vec(),
            data: t.into_data(),
            needs_grad: requires_grad,
            is_leaf: true,
        });
        Var(id)
    }

    /// Constant all-zero leaf (the `none` operation output).
    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        self.leaf(Tensor::zeros(shape), false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.bufs[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.bufs[v.0].shape.clone(), self.bufs[v.0].data.clone())
            .expect("tape buffer is internally consistent")
    }

    /// Scalar value of a one-element buffer.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.bufs[v.0].data.len(), 1);
        self.bufs[v.0].data[0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> Var {
        let id = self.bufs.len();
        self.bufs.push(Buffer {
            data,
            shape,
            needs_grad,
            is_leaf: false,
        });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.bufs[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.bufs[a.0].shape != self.bufs[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.bufs[a.0].shape, self.bufs[b.0].shape
            )));
        }
        Ok(())
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        let s = &self.bufs[v.0].shape;
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected 4-d NCHW tensor, got shape {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// Elementwise division. Errors on any zero divisor entry.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if let Some(i) = self.bufs[b.0].data.iter().position(|&v| v == T::ZERO) {
            return Err(Error::Numeric(format!(
                "div: zero divisor at flat index {i}"
            )));
        }
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Div { a, b, out });
        Ok(out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.bufs[a.0].data.iter().map(|&x| -x).collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Neg { a, out });
        out
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.bufs[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let data = self.bufs[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::AddScalar { a, out });
        out
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = self.bufs[a.0].data.iter().map(|&x| x * x).collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Square { a, out });
        out
    }

    /// Elementwise square root. Errors on negative entries.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.bufs[a.0].data.iter().position(|&v| v < T::ZERO) {
            return Err(Error::Numeric(format!(
                "sqrt: negative input at flat index {i}"
            )));
        }
        let data: Vec<T> = self.bufs[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Sqrt { a, out });
        Ok(out)
    }

    /// |x|, with subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.bufs[a.0].data.iter().map(|&x| x.abs()).collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Abs { a, out });
        out
    }

    // ---- activations -------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.bufs[a.0]
            .data
            .iter()
            .map(|&x| x.maximum(T::ZERO))
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Relu { a, out });
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.bufs[a.0]
            .data
            .iter()
            .map(|&x| super::sigmoid(x))
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::Sigmoid { a, out });
        out
    }

    /// Shift-stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let shape = self.bufs[a.0].shape.clone();
        let cols = *shape.last().expect("softmax input has at least one axis");
        let rows = self.bufs[a.0].data.len() / cols;
        let mut data = vec![T::ZERO; self.bufs[a.0].data.len()];
        ops::softmax_rows(&self.bufs[a.0].data, rows, cols, &mut data);
        let ng = self.needs(a);
        let out = self.push(data, shape, ng);
        self.ops.push(Op::SoftmaxLastDim { a, out, cols });
        out
    }

    // ---- linear algebra ----------------------------------------------

    /// Affine map: `[N,D] x [D,K] (+ [K]) -> [N,K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.bufs[x.0].shape.clone();
        let ws = self.bufs[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "linear: expected 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear: inner dims differ, input D={} vs weight D={}",
                xs[1], ws[0]
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        if let Some(bv) = b {
            let bs = &self.bufs[bv.0].shape;
            if bs.as_slice() != [k] {
                return Err(Error::ShapeMismatch(format!(
                    "linear: bias shape {bs:?}, expected [{k}]"
                )));
            }
        }
        let mut data = vec![T::ZERO; n * k];
        ops::linear_forward(
            &self.bufs[x.0].data,
            &self.bufs[w.0].data,
            b.map(|bv| self.bufs[bv.0].data.as_slice()),
            n,
            d,
            k,
            &mut data,
        );
        let ng = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        let out = self.push(data, vec![n, k], ng);
        self.ops.push(Op::Linear { x, w, b, out, n, d, k });
        Ok(out)
    }

    /// `a^T b` for `a: [B,D1]`, `b: [B,D2]` -> `[D1,D2]`.
    pub fn matmul_ta(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.bufs[a.0].shape.clone();
        let sb = self.bufs[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul_ta: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (bsz, d1, d2) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::ZERO; d1 * d2];
        for bi in 0..bsz {
            let a_row = &self.bufs[a.0].data[bi * d1..(bi + 1) * d1];
            let b_row = &self.bufs[b.0].data[bi * d2..(bi + 1) * d2];
            for (i, &av) in a_row.iter().enumerate() {
                let out_row = &mut data[i * d2..(i + 1) * d2];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        let out = self.push(data, vec![d1, d2], ng);
        self.ops.push(Op::MatmulTa { a, b, out, bsz, d1, d2 });
        Ok(out)
    }

    /// Outer product of two vectors: `[D1] x [D2] -> [D1,D2]`.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let su = self.bufs[u.0].shape.clone();
        let sv = self.bufs[v.0].shape.clone();
        if su.len() != 1 || sv.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "outer: expected vectors, got {su:?} and {sv:?}"
            )));
        }
        let (d1, d2) = (su[0], sv[0]);
        let mut data = vec![T::ZERO; d1 * d2];
        for i in 0..d1 {
            let uv = self.bufs[u.0].data[i];
            for j in 0..d2 {
                data[i * d2 + j] = uv * self.bufs[v.0].data[j];
            }
        }
        let ng = self.needs(u) || self.needs(v);
        let out = self.push(data, vec![d1, d2], ng);
        self.ops.push(Op::Outer { u, v, out });
        Ok(out)
    }

    /// One row of a matrix: `[R,C]` -> `[C]`.
    pub fn row(&mut self, m: Var, row: usize) -> Result<Var> {
        let s = self.bufs[m.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row: expected a matrix, got shape {s:?}"
            )));
        }
        if row >= s[0] {
            return Err(Error::InvalidArg(format!(
                "row index {row} out of range for {} rows",
                s[0]
            )));
        }
        let cols = s[1];
        let data = self.bufs[m.0].data[row * cols..(row + 1) * cols].to_vec();
        let ng = self.needs(m);
        let out = self.push(data, vec![cols], ng);
        self.ops.push(Op::RowSlice { m, out, row, cols });
        Ok(out)
    }

    /// Gated combination `sum_k gates[k] * xs[k]`; all inputs share a shape
    /// and `gates` is a vector of matching length.
    pub fn weighted_sum(&mut self, xs: &[Var], gates: Var) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("weighted_sum: no inputs".into()));
        }
        let gshape = self.bufs[gates.0].shape.clone();
        if gshape.len() != 1 || gshape[0] != xs.len() {
            return Err(Error::ShapeMismatch(format!(
                "weighted_sum: gate shape {gshape:?} for {} inputs",
                xs.len()
            )));
        }
        for (k, &x) in xs.iter().enumerate() {
            if self.bufs[x.0].shape != self.bufs[xs[0].0].shape {
                return Err(Error::ShapeMismatch(format!(
                    "weighted_sum: input {k} has shape {:?}, expected {:?}",
                    self.bufs[x.0].shape, self.bufs[xs[0].0].shape
                )));
            }
        }
        let numel = self.bufs[xs[0].0].data.len();
        let mut data = vec![T::ZERO; numel];
        for (k, &x) in xs.iter().enumerate() {
            let g = self.bufs[gates.0].data[k];
            if g == T::ZERO {
                continue;
            }
            for (o, &v) in data.iter_mut().zip(self.bufs[x.0].data.iter()) {
                *o += g * v;
            }
        }
        let shape = self.bufs[xs[0].0].shape.clone();
        let ng = self.needs(gates) || xs.iter().any(|&x| self.needs(x));
        let out = self.push(data, shape, ng);
        self.ops.push(Op::WeightedSum {
            xs: xs.to_vec(),
            gates,
            out,
        });
        Ok(out)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat_channels: no inputs".into()));
        }
        let first = self.dims4(xs[0], "concat_channels")?;
        let mut c_total = 0;
        for &x in xs {
            let d = self.dims4(x, "concat_channels")?;
            if [d[0], d[2], d[3]] != [first[0], first[2], first[3]] {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: incompatible N/H/W in {:?} vs {:?}",
                    d, first
                )));
            }
            c_total += d[1];
        }
        let [n, _, h, w] = first;
        let plane = h * w;
        let mut data = vec![T::ZERO; n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0;
            for &x in xs {
                let cx = self.bufs[x.0].shape[1];
                let src = &self.bufs[x.0].data[ni * cx * plane..(ni + 1) * cx * plane];
                let dst_base = (ni * c_total + c_off) * plane;
                data[dst_base..dst_base + cx * plane].copy_from_slice(src);
                c_off += cx;
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        let out = self.push(data, vec![n, c_total, h, w], ng);
        self.ops.push(Op::ConcatC { xs: xs.to_vec(), out });
        Ok(out)
    }

    /// Spatial crop dropping the first `dh` rows and `dw` columns.
    pub fn offset2d(&mut self, a: Var, dh: usize, dw: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(a, "offset2d")?;
        if dh >= h || dw >= w {
            return Err(Error::ShapeMismatch(format!(
                "offset2d: offset ({dh},{dw}) leaves no extent from {h}x{w}"
            )));
        }
        let (nh, nw) = (h - dh, w - dw);
        let mut data = vec![T::ZERO; n * c * nh * nw];
        for nc in 0..n * c {
            let src = &self.bufs[a.0].data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * nh * nw..(nc + 1) * nh * nw];
            for hi in 0..nh {
                let s = &src[(hi + dh) * w + dw..(hi + dh) * w + dw + nw];
                dst[hi * nw..(hi + 1) * nw].copy_from_slice(s);
            }
        }
        let ng = self.needs(a);
        let out = self.push(data, vec![n, c, nh, nw], ng);
        self.ops.push(Op::Offset2d { a, out, dh, dw });
        Ok(out)
    }

    // ---- structured network ops ----------------------------------------

    /// 2-d convolution, NCHW input and `[out_c, in_c/groups, kh, kw]` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let xd = self.dims4(x, "conv2d input")?;
        let wd = self.dims4(w, "conv2d weight")?;
        let [n, ic, h, wi] = xd;
        let [oc, icg, kh, kw] = wd;
        if spec.groups == 0 {
            return Err(Error::InvalidArg("conv2d: groups must be positive".into()));
        }
        if ic % spec.groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: in_c={ic} not divisible by groups={}",
                spec.groups
            )));
        }
        if icg != ic / spec.groups {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: weight in_c/groups={icg}, expected {}",
                ic / spec.groups
            )));
        }
        if oc % spec.groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: out_c={oc} not divisible by groups={}",
                spec.groups
            )));
        }
        let oh = conv_out_extent(h, kh, spec.stride, spec.padding, spec.dilation, "conv2d H")?;
        let ow = conv_out_extent(wi, kw, spec.stride, spec.padding, spec.dilation, "conv2d W")?;
        let odim = [n, oc, oh, ow];
        let mut data = vec![T::ZERO; n * oc * oh * ow];
        ops::conv2d_forward(
            &self.bufs[x.0].data,
            xd,
            &self.bufs[w.0].data,
            wd,
            spec,
            &mut data,
            odim,
        );
        let ng = self.needs(x) || self.needs(w);
        let out = self.push(data, odim.to_vec(), ng);
        self.ops.push(Op::Conv2d { x, w, out, spec });
        Ok(out)
    }

    /// Max or average pooling with a square window.
    pub fn pool2d(
        &mut self,
        x: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xd = self.dims4(x, "pool2d input")?;
        if window == 0 {
            return Err(Error::InvalidArg("pool2d: window must be positive".into()));
        }
        if padding >= window {
            return Err(Error::InvalidArg(format!(
                "pool2d: padding {padding} must be smaller than window {window}"
            )));
        }
        let [n, c, h, w] = xd;
        let oh = conv_out_extent(h, window, stride, padding, 1, "pool2d H")?;
        let ow = conv_out_extent(w, window, stride, padding, 1, "pool2d W")?;
        let odim = [n, c, oh, ow];
        let mut data = vec![T::ZERO; n * c * oh * ow];
        let ng = self.needs(x);
        let out = match kind {
            PoolKind::Max => {
                let mut argmax = vec![0usize; n * c * oh * ow];
                ops::max_pool_forward(
                    &self.bufs[x.0].data,
                    xd,
                    window,
                    stride,
                    padding,
                    &mut data,
                    odim,
                    &mut argmax,
                );
                let out = self.push(data, odim.to_vec(), ng);
                self.ops.push(Op::MaxPool { x, out, argmax });
                out
            }
            PoolKind::Avg => {
                ops::avg_pool_forward(
                    &self.bufs[x.0].data,
                    xd,
                    window,
                    stride,
                    padding,
                    &mut data,
                    odim,
                );
                let out = self.push(data, odim.to_vec(), ng);
                self.ops.push(Op::AvgPool {
                    x,
                    out,
                    k: window,
                    stride,
                    padding,
                });
                out
            }
        };
        Ok(out)
    }

    /// Batch norm over (N, H, W) per channel, always using batch statistics,
    /// differentiable through the statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xd = self.dims4(x, "batch_norm input")?;
        let [n, c, h, w] = xd;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.bufs[v.0].shape;
            if s.as_slice() != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "batch_norm: {name} shape {s:?}, expected [{c}]"
                )));
            }
        }
        if n * h * w < 2 {
            return Err(Error::InvalidArg(format!(
                "batch_norm: needs at least 2 values per channel, got {}",
                n * h * w
            )));
        }
        let (mean, inv_std) = ops::batch_stats(&self.bufs[x.0].data, xd, eps);
        let plane = h * w;
        let mut data = vec![T::ZERO; n * c * plane];
        for ni in 0..n {
            for ci in 0..c {
                let g = self.bufs[gamma.0].data[ci];
                let b = self.bufs[beta.0].data[ci];
                let mu = mean[ci];
                let is = inv_std[ci];
                let base = (ni * c + ci) * plane;
                let src = &self.bufs[x.0].data[base..base + plane];
                let dst = &mut data[base..base + plane];
                for (o, &v) in dst.iter_mut().zip(src.iter()) {
                    *o = g * ((v - mu) * is) + b;
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(data, vec![n, c, h, w], ng);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            mean,
            inv_std,
        });
        Ok(out)
    }

    /// Global average pool: `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "mean_spatial")?;
        let plane = h * w;
        let inv = T::ONE / T::from_f64(plane as f64);
        let mut data = vec![T::ZERO; n * c];
        for nc in 0..n * c {
            let mut acc = T::ZERO;
            for &v in &self.bufs[x.0].data[nc * plane..(nc + 1) * plane] {
                acc += v;
            }
            data[nc] = acc * inv;
        }
        let ng = self.needs(x);
        let out = self.push(data, vec![n, c], ng);
        self.ops.push(Op::MeanSpatial { x, out });
        Ok(out)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in &self.bufs[a.0].data {
            acc += v;
        }
        let ng = self.needs(a);
        let out = self.push(vec![acc], vec![1], ng);
        self.ops.push(Op::SumAll { a, out });
        out
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.bufs[a.0].data.len();
        let mut acc = T::ZERO;
        for &v in &self.bufs[a.0].data {
            acc += v;
        }
        let ng = self.needs(a);
        let out = self.push(vec![acc / T::from_f64(n as f64)], vec![1], ng);
        self.ops.push(Op::MeanAll { a, out });
        out
    }

    fn axis0_dims(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.bufs[a.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Column sums of a matrix: `[R,C] -> [C]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.axis0_dims(a, "sum_axis0")?;
        let mut data = vec![T::ZERO; cols];
        for r in 0..rows {
            for (o, &v) in data
                .iter_mut()
                .zip(self.bufs[a.0].data[r * cols..(r + 1) * cols].iter())
            {
                *o += v;
            }
        }
        let ng = self.needs(a);
        let out = self.push(data, vec![cols], ng);
        self.ops.push(Op::SumAxis0 { a, out, rows, cols });
        Ok(out)
    }

    /// Column means of a matrix: `[R,C] -> [C]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.axis0_dims(a, "mean_axis0")?;
        let inv = T::ONE / T::from_f64(rows as f64);
        let mut data = vec![T::ZERO; cols];
        for r in 0..rows {
            for (o, &v) in data
                .iter_mut()
                .zip(self.bufs[a.0].data[r * cols..(r + 1) * cols].iter())
            {
                *o += v;
            }
        }
        for o in data.iter_mut() {
            *o *= inv;
        }
        let ng = self.needs(a);
        let out = self.push(data, vec![cols], ng);
        self.ops.push(Op::MeanAxis0 { a, out, rows, cols });
        Ok(out)
    }

    /// Broadcast row subtraction: `a[r,c] - v[c]`.
    pub fn sub_row_broadcast(&mut self, a: Var, r: Var) -> Result<Var> {
        let (rows, cols) = self.axis0_dims(a, "sub_row_broadcast")?;
        if self.bufs[r.0].shape.as_slice() != [cols] {
            return Err(Error::ShapeMismatch(format!(
                "sub_row_broadcast: row shape {:?}, expected [{cols}]",
                self.bufs[r.0].shape
            )));
        }
        let mut data = vec![T::ZERO; rows * cols];
        for ri in 0..rows {
            for ci in 0..cols {
                data[ri * cols + ci] =
                    self.bufs[a.0].data[ri * cols + ci] - self.bufs[r.0].data[ci];
            }
        }
        let ng = self.needs(a) || self.needs(r);
        let out = self.push(data, vec![rows, cols], ng);
        self.ops.push(Op::SubRow { a, r, out, rows, cols });
        Ok(out)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, fused for
    /// numerical stability.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.axis0_dims(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArg(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let lse = ops::log_sum_exp_rows(&self.bufs[logits.0].data, n, c);
        let mut acc = T::ZERO;
        for (ni, &l) in labels.iter().enumerate() {
            acc += lse[ni] - self.bufs[logits.0].data[ni * c + l];
        }
        let loss = acc / T::from_f64(n as f64);
        let ng = self.needs(logits);
        let out = self.push(vec![loss], vec![1], ng);
        self.ops.push(Op::CrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            lse,
        });
        Ok(out)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar root. Returns a gradient per buffer that a
    /// gradient flowed to; leaves registered with `requires_grad` are always
    /// populated (with zeros if unreached).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.bufs[root.0].data.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: root must be scalar, got shape {:?}",
                self.bufs[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.bufs.len()];
        grads[root.0] = Some(vec![T::ONE]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }

        for (i, buf) in self.bufs.iter().enumerate() {
            if buf.is_leaf && buf.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::ZERO; buf.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi += d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op<T>, grads: &mut Vec<Option<Vec<T>>>) {
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out.0].clone() {
                    Some(g) => g,
                    None => return,
                }
            };
        }

        match op {
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    Self::accumulate(grads, *a, &g);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, &g);
                }
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    Self::accumulate(grads, *a, &g);
                }
                if self.needs(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    Self::accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[b.0].data.iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[a.0].data.iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    Self::accumulate(grads, *b, &d);
                }
            }
            Op::Div { a, b, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[b.0].data.iter())
                        .map(|(&gv, &bv)| gv / bv)
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[out.0].data.iter())
                        .zip(self.bufs[b.0].data.iter())
                        .map(|((&gv, &ov), &bv)| -gv * ov / bv)
                        .collect();
                    Self::accumulate(grads, *b, &d);
                }
            }
            Op::Neg { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().map(|&v| -v).collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::Scale { a, c, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().map(|&v| v * *c).collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::AddScalar { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    Self::accumulate(grads, *a, &g);
                }
            }
            Op::Square { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let two = T::from_f64(2.0);
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[a.0].data.iter())
                        .map(|(&gv, &av)| gv * two * av)
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::Sqrt { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let half = T::from_f64(0.5);
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[out.0].data.iter())
                        .map(|(&gv, &ov)| gv * half / ov)
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::Abs { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[a.0].data.iter())
                        .map(|(&gv, &av)| {
                            if av > T::ZERO {
                                gv
                            } else if av < T::ZERO {
                                -gv
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::Relu { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[a.0].data.iter())
                        .map(|(&gv, &av)| if av > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::Sigmoid { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d: Vec<T> = g
                        .iter()
                        .zip(self.bufs[out.0].data.iter())
                        .map(|(&gv, &ov)| gv * ov * (T::ONE - ov))
                        .collect();
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::SoftmaxLastDim { a, out, cols } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let rows = g.len() / cols;
                    let y = &self.bufs[out.0].data;
                    let mut d = vec![T::ZERO; g.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = T::ZERO;
                        for i in 0..*cols {
                            dot += g[base + i] * y[base + i];
                        }
                        for i in 0..*cols {
                            d[base + i] = y[base + i] * (g[base + i] - dot);
                        }
                    }
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::Linear { x, w, b, out, n, d, k } => {
                let g = out_grad!(out);
                if self.needs(*x) {
                    let wv = &self.bufs[w.0].data;
                    let mut dx = vec![T::ZERO; n * d];
                    for ni in 0..*n {
                        for di in 0..*d {
                            let mut acc = T::ZERO;
                            let w_row = &wv[di * k..(di + 1) * k];
                            let g_row = &g[ni * k..(ni + 1) * k];
                            for (wj, gj) in w_row.iter().zip(g_row.iter()) {
                                acc += *wj * *gj;
                            }
                            dx[ni * d + di] = acc;
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let xv = &self.bufs[x.0].data;
                    let mut dw = vec![T::ZERO; d * k];
                    for ni in 0..*n {
                        let x_row = &xv[ni * d..(ni + 1) * d];
                        let g_row = &g[ni * k..(ni + 1) * k];
                        for (di, &xd) in x_row.iter().enumerate() {
                            if xd == T::ZERO {
                                continue;
                            }
                            let dw_row = &mut dw[di * k..(di + 1) * k];
                            for (o, &gv) in dw_row.iter_mut().zip(g_row.iter()) {
                                *o += xd * gv;
                            }
                        }
                    }
                    Self::accumulate(grads, *w, &dw);
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        let mut db = vec![T::ZERO; *k];
                        for ni in 0..*n {
                            for (o, &gv) in db.iter_mut().zip(g[ni * k..(ni + 1) * k].iter()) {
                                *o += gv;
                            }
                        }
                        Self::accumulate(grads, *bv, &db);
                    }
                }
            }
            Op::MatmulTa { a, b, out, bsz, d1, d2 } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    // d_a[b,i] = sum_j g[i,j] * b[b,j]
                    let bv = &self.bufs[b.0].data;
                    let mut da = vec![T::ZERO; bsz * d1];
                    for bi in 0..*bsz {
                        for i in 0..*d1 {
                            let mut acc = T::ZERO;
                            let g_row = &g[i * d2..(i + 1) * d2];
                            let b_row = &bv[bi * d2..(bi + 1) * d2];
                            for (gj, bj) in g_row.iter().zip(b_row.iter()) {
                                acc += *gj * *bj;
                            }
                            da[bi * d1 + i] = acc;
                        }
                    }
                    Self::accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // d_b[b,j] = sum_i a[b,i] * g[i,j]
                    let av = &self.bufs[a.0].data;
                    let mut db = vec![T::ZERO; bsz * d2];
                    for bi in 0..*bsz {
                        let a_row = &av[bi * d1..(bi + 1) * d1];
                        let db_row = &mut db[bi * d2..(bi + 1) * d2];
                        for (i, &ai) in a_row.iter().enumerate() {
                            if ai == T::ZERO {
                                continue;
                            }
                            let g_row = &g[i * d2..(i + 1) * d2];
                            for (o, &gv) in db_row.iter_mut().zip(g_row.iter()) {
                                *o += ai * gv;
                            }
                        }
                    }
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Outer { u, v, out } => {
                let g = out_grad!(out);
                let d1 = self.bufs[u.0].data.len();
                let d2 = self.bufs[v.0].data.len();
                if self.needs(*u) {
                    let mut du = vec![T::ZERO; d1];
                    for i in 0..d1 {
                        let mut acc = T::ZERO;
                        for j in 0..d2 {
                            acc += g[i * d2 + j] * self.bufs[v.0].data[j];
                        }
                        du[i] = acc;
                    }
                    Self::accumulate(grads, *u, &du);
                }
                if self.needs(*v) {
                    let mut dv = vec![T::ZERO; d2];
                    for j in 0..d2 {
                        let mut acc = T::ZERO;
                        for i in 0..d1 {
                            acc += g[i * d2 + j] * self.bufs[u.0].data[i];
                        }
                        dv[j] = acc;
                    }
                    Self::accumulate(grads, *v, &dv);
                }
            }
            Op::RowSlice { m, out, row, cols } => {
                let g = out_grad!(out);
                if self.needs(*m) {
                    let mut dm = vec![T::ZERO; self.bufs[m.0].data.len()];
                    dm[row * cols..(row + 1) * cols].copy_from_slice(&g);
                    Self::accumulate(grads, *m, &dm);
                }
            }
            Op::WeightedSum { xs, gates, out } => {
                let g = out_grad!(out);
                for (k, &x) in xs.iter().enumerate() {
                    if self.needs(x) {
                        let gk = self.bufs[gates.0].data[k];
                        let d: Vec<T> = g.iter().map(|&v| v * gk).collect();
                        Self::accumulate(grads, x, &d);
                    }
                }
                if self.needs(*gates) {
                    let mut dg = vec![T::ZERO; xs.len()];
                    for (k, &x) in xs.iter().enumerate() {
                        let mut acc = T::ZERO;
                        for (&gv, &xv) in g.iter().zip(self.bufs[x.0].data.iter()) {
                            acc += gv * xv;
                        }
                        dg[k] = acc;
                    }
                    Self::accumulate(grads, *gates, &dg);
                }
            }
            Op::ConcatC { xs, out } => {
                let g = out_grad!(out);
                let os = &self.bufs[out.0].shape;
                let (n, c_total, plane) = (os[0], os[1], os[2] * os[3]);
                let mut c_off = 0;
                for &x in xs {
                    let cx = self.bufs[x.0].shape[1];
                    if self.needs(x) {
                        let mut dx = vec![T::ZERO; self.bufs[x.0].data.len()];
                        for ni in 0..n {
                            let src_base = (ni * c_total + c_off) * plane;
                            let dst_base = ni * cx * plane;
                            dx[dst_base..dst_base + cx * plane]
                                .copy_from_slice(&g[src_base..src_base + cx * plane]);
                        }
                        Self::accumulate(grads, x, &dx);
                    }
                    c_off += cx;
                }
            }
            Op::Offset2d { a, out, dh, dw } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let s = &self.bufs[a.0].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let os = &self.bufs[out.0].shape;
                    let (nh, nw) = (os[2], os[3]);
                    let mut da = vec![T::ZERO; self.bufs[a.0].data.len()];
                    for nc in 0..n * c {
                        let src = &g[nc * nh * nw..(nc + 1) * nh * nw];
                        let dst = &mut da[nc * h * w..(nc + 1) * h * w];
                        for hi in 0..nh {
                            let d_row = &mut dst[(hi + dh) * w + dw..(hi + dh) * w + dw + nw];
                            for (o, &v) in d_row.iter_mut().zip(src[hi * nw..(hi + 1) * nw].iter())
                            {
                                *o += v;
                            }
                        }
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Conv2d { x, w, out, spec } => {
                let g = out_grad!(out);
                let xd = {
                    let s = &self.bufs[x.0].shape;
                    [s[0], s[1], s[2], s[3]]
                };
                let wd = {
                    let s = &self.bufs[w.0].shape;
                    [s[0], s[1], s[2], s[3]]
                };
                let od = {
                    let s = &self.bufs[out.0].shape;
                    [s[0], s[1], s[2], s[3]]
                };
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = if need_x {
                    Some(vec![T::ZERO; self.bufs[x.0].data.len()])
                } else {
                    None
                };
                let mut dw = if need_w {
                    Some(vec![T::ZERO; self.bufs[w.0].data.len()])
                } else {
                    None
                };
                ops::conv2d_backward(
                    &self.bufs[x.0].data,
                    xd,
                    &self.bufs[w.0].data,
                    wd,
                    *spec,
                    &g,
                    od,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, &dw);
                }
            }
            Op::MaxPool { x, out, argmax } => {
                let g = out_grad!(out);
                if self.needs(*x) {
                    let s = &self.bufs[x.0].shape;
                    let plane = s[2] * s[3];
                    let os = &self.bufs[out.0].shape;
                    let out_plane = os[2] * os[3];
                    let mut dx = vec![T::ZERO; self.bufs[x.0].data.len()];
                    for nc in 0..s[0] * s[1] {
                        let g_p = &g[nc * out_plane..(nc + 1) * out_plane];
                        let am_p = &argmax[nc * out_plane..(nc + 1) * out_plane];
                        let dx_p = &mut dx[nc * plane..(nc + 1) * plane];
                        for (gv, &idx) in g_p.iter().zip(am_p.iter()) {
                            dx_p[idx] += *gv;
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::AvgPool {
                x,
                out,
                k,
                stride,
                padding,
            } => {
                let g = out_grad!(out);
                if self.needs(*x) {
                    let s = &self.bufs[x.0].shape;
                    let xd = [s[0], s[1], s[2], s[3]];
                    let os = &self.bufs[out.0].shape;
                    let od = [os[0], os[1], os[2], os[3]];
                    let mut dx = vec![T::ZERO; self.bufs[x.0].data.len()];
                    ops::avg_pool_backward(&g, od, xd, *k, *stride, *padding, &mut dx);
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                out,
                mean,
                inv_std,
            } => {
                let g = out_grad!(out);
                let s = &self.bufs[x.0].shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = T::from_f64((n * plane) as f64);
                // Per-channel sums of d_out and d_out * x_hat.
                let mut s1 = vec![T::ZERO; c];
                let mut s2 = vec![T::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let mu = mean[ci];
                        let is = inv_std[ci];
                        for i in 0..plane {
                            let gv = g[base + i];
                            let xh = (self.bufs[x.0].data[base + i] - mu) * is;
                            s1[ci] += gv;
                            s2[ci] += gv * xh;
                        }
                    }
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, &s1);
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, &s2);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; self.bufs[x.0].data.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mu = mean[ci];
                            let is = inv_std[ci];
                            let ga = self.bufs[gamma.0].data[ci];
                            let mean_g = s1[ci] / m;
                            let mean_gxh = s2[ci] / m;
                            for i in 0..plane {
                                let xh = (self.bufs[x.0].data[base + i] - mu) * is;
                                dx[base + i] = ga * is * (g[base + i] - mean_g - xh * mean_gxh);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::MeanSpatial { x, out } => {
                let g = out_grad!(out);
                if self.needs(*x) {
                    let s = &self.bufs[x.0].shape;
                    let plane = s[2] * s[3];
                    let inv = T::ONE / T::from_f64(plane as f64);
                    let mut dx = vec![T::ZERO; self.bufs[x.0].data.len()];
                    for nc in 0..s[0] * s[1] {
                        let gv = g[nc] * inv;
                        for d in dx[nc * plane..(nc + 1) * plane].iter_mut() {
                            *d = gv;
                        }
                    }
                    Self::accumulate(grads, *x, &dx);
                }
            }
            Op::SumAll { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let d = vec![g[0]; self.bufs[a.0].data.len()];
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::MeanAll { a, out } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let n = self.bufs[a.0].data.len();
                    let gv = g[0] / T::from_f64(n as f64);
                    let d = vec![gv; n];
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::SumAxis0 { a, out, rows, cols } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let mut d = vec![T::ZERO; rows * cols];
                    for r in 0..*rows {
                        d[r * cols..(r + 1) * cols].copy_from_slice(&g);
                    }
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::MeanAxis0 { a, out, rows, cols } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    let inv = T::ONE / T::from_f64(*rows as f64);
                    let scaled: Vec<T> = g.iter().map(|&v| v * inv).collect();
                    let mut d = vec![T::ZERO; rows * cols];
                    for r in 0..*rows {
                        d[r * cols..(r + 1) * cols].copy_from_slice(&scaled);
                    }
                    Self::accumulate(grads, *a, &d);
                }
            }
            Op::SubRow { a, r, out, rows, cols } => {
                let g = out_grad!(out);
                if self.needs(*a) {
                    Self::accumulate(grads, *a, &g);
                }
                if self.needs(*r) {
                    let mut dr = vec![T::ZERO; *cols];
                    for ri in 0..*rows {
                        for ci in 0..*cols {
                            dr[ci] -= g[ri * cols + ci];
                        }
                    }
                    Self::accumulate(grads, *r, &dr);
                }
            }
            Op::CrossEntropy {
                logits,
                out,
                labels,
                lse,
            } => {
                let g = out_grad!(out);
                if self.needs(*logits) {
                    let s = &self.bufs[logits.0].shape;
                    let (n, c) = (s[0], s[1]);
                    let scale = g[0] / T::from_f64(n as f64);
                    let mut d = vec![T::ZERO; n * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let p = (self.bufs[logits.0].data[ni * c + ci] - lse[ni]).exp();
                            let ind = if labels[ni] == ci { T::ONE } else { T::ZERO };
                            d[ni * c + ci] = (p - ind) * scale;
                        }
                    }
                    Self::accumulate(grads, *logits, &d);
                }
            }
        }
    }
}
