use super::{matmul_nn, matmul_nt, matmul_tn, shape_err, Element, NumericsError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Temporal padding of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero padding giving output length `ceil(L / stride)`, so stride 1
    /// preserves length. Odd totals put the extra zero on the right.
    SameZero,
    /// No padding: output length `(L - kernel) / stride + 1`.
    None,
}

impl Padding {
    /// Output length and left padding for an input of length `len`.
    pub fn geometry(self, len: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        if kernel == 0 || stride == 0 || len == 0 {
            return None;
        }
        match self {
            Padding::SameZero => {
                let out_len = len.div_ceil(stride);
                let total = ((out_len - 1) * stride + kernel).saturating_sub(len);
                Some((out_len, total / 2))
            }
            Padding::None => (len >= kernel).then(|| ((len - kernel) / stride + 1, 0)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    len: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize, mean: bool },
    Reshape(Var),
    Permute021(Var),
    SliceLast { x: Var, start: usize },
    SelectStep { x: Var, step: usize },
    StackSteps(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    AvgPool { x: Var, pool: usize, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    SigmoidBce { logits: Var, targets: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { mean: false, .. } => "sum_axis",
            Op::SumAxis { mean: true, .. } => "mean_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute021(..) => "permute",
            Op::SliceLast { .. } => "slice_last",
            Op::SelectStep { .. } => "select_step",
            Op::StackSteps(..) => "stack_steps",
            Op::Conv1d { .. } => "conv1d",
            Op::AvgPool { .. } => "avg_pool1d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the batch and temporal axes.
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(usize, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, if it participated.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds each bound parameter's gradient into `params[index]`.
    /// Parameters the loss does not reach are left untouched.
    pub fn accumulate_into(&self, params: &mut [Tensor<T>]) -> Result<()> {
        for &(index, node) in &self.bindings {
            let Some(g) = self.grads[node].as_deref() else {
                continue;
            };
            let p = params.get_mut(index).ok_or(NumericsError::MissingGrad(index))?;
            p.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape<T: Element = f64> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are validated on push")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: op.name(),
                phase: "forward",
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("constant", format!("{shape:?} vs {} values", data.len())));
        }
        self.push(shape, data, Op::Leaf, &[])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    /// Elementwise product with a non-differentiable buffer (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("mul_const", format!("{} vs {}", c.len(), self.value(x).len())));
        }
        let data = self.value(x).iter().zip(&c).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::MulConst(x, c), &[x])
    }

    /// `x[n, c, ...] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = *self.shape(bias).first().unwrap_or(&0);
        if shape.len() < 2 || self.shape(bias).len() != 1 || shape[1] != channels {
            return Err(shape_err(
                "add_bias",
                format!("input {shape:?} with bias {:?}", self.shape(bias)),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % channels])
            .collect();
        self.push(shape, data, Op::AddBias(x, bias), &[x, bias])
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(m, k, n, self.value(a), self.value(b), &mut out, false);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "softmax",
                detail: "empty axis".into(),
            });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(shape, out, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).len() as f64);
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Vec::new(), vec![s / n], Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidArgument {
                op: name,
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let div = T::of(n as f64);
            out.iter_mut().for_each(|v| *v /= div);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(out_shape, out, Op::SumAxis { x, axis, mean }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    /// `[a, b, c] -> [a, c, b]`.
    pub fn permute_021(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("permute", format!("expected rank 3, got {s:?}")));
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[(i * c + k) * b + j] = src[(i * b + j) * c + k];
                }
            }
        }
        self.push(vec![a, c, b], out, Op::Permute021(x), &[x])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if len == 0 || start + len > width {
            return Err(shape_err("slice_last", format!("{start}..{} of {width}", start + len)));
        }
        let data: Vec<T> = self
            .value(x)
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push(out_shape, data, Op::SliceLast { x, start }, &[x])
    }

    /// `x[:, step, :]` of a `[batch, steps, features]` tensor.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || step >= s[1] {
            return Err(shape_err("select_step", format!("step {step} of {s:?}")));
        }
        let (b, l, f) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(b * f);
        for i in 0..b {
            let base = (i * l + step) * f;
            out.extend_from_slice(&src[base..base + f]);
        }
        self.push(vec![b, f], out, Op::SelectStep { x, step }, &[x])
    }

    /// Stacks `[batch, units]` tensors into `[batch, steps, units]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps.first().ok_or_else(|| NumericsError::InvalidArgument {
            op: "stack_steps",
            detail: "no steps".into(),
        })?;
        let s = self.shape(first).to_vec();
        if s.len() != 2 || steps.iter().any(|&v| self.shape(v) != s.as_slice()) {
            return Err(shape_err("stack_steps", "steps must share a [batch, units] shape"));
        }
        let (b, u, l) = (s[0], s[1], steps.len());
        let mut out = vec![T::zero(); b * l * u];
        for (t, &v) in steps.iter().enumerate() {
            let src = self.value(v);
            for i in 0..b {
                out[(i * l + t) * u..(i * l + t + 1) * u].copy_from_slice(&src[i * u..(i + 1) * u]);
            }
        }
        self.push(vec![b, l, u], out, Op::StackSteps(steps.to_vec()), steps)
    }

    /// Cross-correlation of `x[batch, in, len]` with `w[out, in, kernel]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err("conv1d", format!("input {xs:?} with weights {ws:?}")));
        }
        let (batch, in_ch, len) = (xs[0], xs[1], xs[2]);
        let (out_ch, kernel) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(shape_err("conv1d", format!("bias {:?} for {out_ch} filters", self.shape(b))));
            }
        }
        let (out_len, pad_left) = padding.geometry(len, kernel, stride).ok_or_else(|| {
            NumericsError::InvalidArgument {
                op: "conv1d",
                detail: format!("input length {len}, kernel {kernel}, stride {stride}"),
            }
        })?;
        let geom = ConvGeom {
            batch,
            in_ch,
            len,
            out_ch,
            kernel,
            stride,
            pad_left,
            out_len,
        };
        let bl = batch * out_len;
        let ck = in_ch * kernel;
        let src = self.value(x);
        let mut cols = vec![T::zero(); ck * bl];
        for c in 0..in_ch {
            for k in 0..kernel {
                let row = &mut cols[(c * kernel + k) * bl..(c * kernel + k + 1) * bl];
                for b in 0..batch {
                    let xrow = &src[(b * in_ch + c) * len..(b * in_ch + c + 1) * len];
                    for t in 0..out_len {
                        let pos = t * stride + k;
                        if pos >= pad_left && pos - pad_left < len {
                            row[b * out_len + t] = xrow[pos - pad_left];
                        }
                    }
                }
            }
        }
        let mut y = vec![T::zero(); out_ch * bl];
        matmul_nn(out_ch, ck, bl, self.value(w), &cols, &mut y, false);
        let mut out = vec![T::zero(); batch * out_ch * out_len];
        let bvals = bias.map(|b| self.value(b));
        for o in 0..out_ch {
            let shift = bvals.map_or(T::zero(), |bv| bv[o]);
            for b in 0..batch {
                let dst = &mut out[(b * out_ch + o) * out_len..(b * out_ch + o + 1) * out_len];
                let src = &y[o * bl + b * out_len..o * bl + (b + 1) * out_len];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            vec![batch, out_ch, out_len],
            out,
            Op::Conv1d { x, w, b: bias, geom, cols },
            &inputs,
        )
    }

    /// Windowed mean over the last axis of `[batch, channels, len]`; no padding.
    pub fn avg_pool1d(&mut self, x: Var, pool: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pool == 0 || stride == 0 {
            return Err(shape_err("avg_pool1d", format!("input {s:?}, pool {pool}, stride {stride}")));
        }
        let len = s[2];
        if len < pool {
            return Err(NumericsError::InvalidArgument {
                op: "avg_pool1d",
                detail: format!("window {pool} longer than sequence {len}"),
            });
        }
        let out_len = (len - pool) / stride + 1;
        let div = T::of(pool as f64);
        let src = self.value(x);
        let mut out = Vec::with_capacity(s[0] * s[1] * out_len);
        for row in src.chunks(len) {
            for t in 0..out_len {
                let w = &row[t * stride..t * stride + pool];
                out.push(w.iter().fold(T::zero(), |a, &v| a + v) / div);
            }
        }
        self.push(vec![s[0], s[1], out_len], out, Op::AvgPool { x, pool, stride }, &[x])
    }

    fn bn_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if !(s.len() == 2 || s.len() == 3) {
            return Err(shape_err(op, format!("expected [batch, channels(, len)], got {s:?}")));
        }
        let (batch, ch) = (s[0], s[1]);
        let len = if s.len() == 3 { s[2] } else { 1 };
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err(op, format!("affine parameters must be [{ch}]")));
        }
        Ok((batch, ch, len))
    }

    /// Training-mode batch normalization over the batch and temporal axes.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (batch, ch, len) = self.bn_layout("batch_norm", x, gamma, beta)?;
        let count = batch * len;
        let src = self.value(x);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for b in 0..batch {
            for c in 0..ch {
                for &v in &src[(b * ch + c) * len..(b * ch + c + 1) * len] {
                    mean[c] += v;
                }
            }
        }
        let n = T::of(count as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        for b in 0..batch {
            for c in 0..ch {
                for &v in &src[(b * ch + c) * len..(b * ch + c + 1) * len] {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let v = self.normalize(x, gamma, beta, &mean, inv_std, true, len, ch)?;
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, ch, len) = self.bn_layout("batch_norm", x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(shape_err("batch_norm", "running statistics do not match channels"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false, len, ch)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
        len: usize,
        ch: usize,
    ) -> Result<Var> {
        let src = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, &v) in src.iter().enumerate() {
            let c = (i / len) % ch;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(h * g[c] + bt[c]);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        )
    }

    /// Mean categorical cross-entropy of softmax(`logits[batch, classes]`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[1] == 0 {
            return Err(shape_err("softmax_cross_entropy", format!("logits {s:?}, {} targets", targets.len())));
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(NumericsError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("target class {bad} out of {k}"),
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = loss / T::of(targets.len() as f64);
        self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe { logits, probs, targets: targets.to_vec() },
            &[logits],
        )
    }

    /// Mean elementwise binary cross-entropy of sigmoid(`logits`) against 0/1 targets.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.is_empty() {
            return Err(shape_err("sigmoid_bce", format!("{} logits, {} targets", z.len(), targets.len())));
        }
        let total = z.iter().zip(targets).fold(T::zero(), |acc, (&v, &y)| {
            acc + v.max(T::zero()) - v * y + (T::one() + (-v.abs()).exp()).ln()
        });
        let loss = total / T::of(z.len() as f64);
        self.push(
            Vec::new(),
            vec![loss],
            Op::SigmoidBce { logits, targets: targets.to_vec() },
            &[logits],
        )
    }

    /// Propagates d(loss)/d(node) to every differentiable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite {
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let bindings = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, bindings })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, &c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].data.as_slice();
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&d| d * *s).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::MulConst(x, c) => acc(*x, g.iter().zip(c).map(|(&d, &m)| d * m).collect()),
            Op::AddBias(x, bias) => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let ch = nodes[bias.0].data.len();
                    let inner: usize = node.shape[2..].iter().product();
                    let mut gb = vec![T::zero(); ch];
                    for (i, &d) in g.iter().enumerate() {
                        gb[(i / inner) % ch] += d;
                    }
                    acc(*bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_nt(m, n, k, g, val(*b), &mut ga, false);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_tn(k, m, n, val(*a), g, &mut gb, false);
                    acc(*b, gb);
                }
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(&node.data).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(&node.data).map(|(&d, &y)| d * (T::one() - y * y)).collect(),
            ),
            Op::Softmax(x) => {
                let width = *node.shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(width).zip(node.data.chunks(width)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&d, &y)| a + d * y);
                    gx.extend(gr.iter().zip(yr).map(|(&d, &y)| y * (d - dot)));
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.0].data.len()]),
            Op::Mean(x) => {
                let n = nodes[x.0].data.len();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAxis { x, axis, mean } => {
                let shape = &nodes[x.0].shape;
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = if *mean { T::one() / T::of(n as f64) } else { T::one() };
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            gx[(o * n + a) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute021(x) => {
                let s = &nodes[x.0].shape;
                let (a, b, c) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); g.len()];
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            gx[(i * b + j) * c + k] = g[(i * c + k) * b + j];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SliceLast { x, start } => {
                let width = *nodes[x.0].shape.last().unwrap();
                let len = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); nodes[x.0].data.len()];
                for (row, gr) in gx.chunks_mut(width).zip(g.chunks(len)) {
                    row[*start..*start + len].copy_from_slice(gr);
                }
                acc(*x, gx);
            }
            Op::SelectStep { x, step } => {
                let s = &nodes[x.0].shape;
                let (b, l, f) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); b * l * f];
                for i in 0..b {
                    let base = (i * l + step) * f;
                    gx[base..base + f].copy_from_slice(&g[i * f..(i + 1) * f]);
                }
                acc(*x, gx);
            }
            Op::StackSteps(steps) => {
                let (b, l, u) = (node.shape[0], node.shape[1], node.shape[2]);
                for (t, &v) in steps.iter().enumerate() {
                    if !wants(v) {
                        continue;
                    }
                    let mut gv = vec![T::zero(); b * u];
                    for i in 0..b {
                        gv[i * u..(i + 1) * u].copy_from_slice(&g[(i * l + t) * u..(i * l + t + 1) * u]);
                    }
                    acc(v, gv);
                }
            }
            Op::Conv1d { x, w, b, geom, cols } => {
                let ConvGeom { batch, in_ch, len, out_ch, kernel, stride, pad_left, out_len } = *geom;
                let bl = batch * out_len;
                let ck = in_ch * kernel;
                let mut gy = vec![T::zero(); out_ch * bl];
                for bi in 0..batch {
                    for o in 0..out_ch {
                        gy[o * bl + bi * out_len..o * bl + (bi + 1) * out_len]
                            .copy_from_slice(&g[(bi * out_ch + o) * out_len..(bi * out_ch + o + 1) * out_len]);
                    }
                }
                if let Some(bv) = b {
                    if wants(*bv) {
                        let gb = gy.chunks(bl).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
                        acc(*bv, gb);
                    }
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); out_ch * ck];
                    matmul_nt(out_ch, bl, ck, &gy, cols, &mut gw, false);
                    acc(*w, gw);
                }
                if wants(*x) {
                    let mut gcols = vec![T::zero(); ck * bl];
                    matmul_tn(ck, out_ch, bl, val(*w), &gy, &mut gcols, false);
                    let mut gx = vec![T::zero(); batch * in_ch * len];
                    for c in 0..in_ch {
                        for k in 0..kernel {
                            let row = &gcols[(c * kernel + k) * bl..(c * kernel + k + 1) * bl];
                            for bi in 0..batch {
                                let xrow = &mut gx[(bi * in_ch + c) * len..(bi * in_ch + c + 1) * len];
                                for t in 0..out_len {
                                    let pos = t * stride + k;
                                    if pos >= pad_left && pos - pad_left < len {
                                        xrow[pos - pad_left] += row[bi * out_len + t];
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::AvgPool { x, pool, stride } => {
                let len = *nodes[x.0].shape.last().unwrap();
                let out_len = *node.shape.last().unwrap();
                let div = T::of(*pool as f64);
                let mut gx = vec![T::zero(); nodes[x.0].data.len()];
                for (row, gr) in gx.chunks_mut(len).zip(g.chunks(out_len)) {
                    for (t, &d) in gr.iter().enumerate() {
                        for v in &mut row[t * stride..t * stride + pool] {
                            *v += d / div;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let ch = inv_std.len();
                let len = if node.shape.len() == 3 { node.shape[2] } else { 1 };
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for (i, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                    let c = (i / len) % ch;
                    sum_g[c] += d;
                    sum_gx[c] += d * h;
                }
                if wants(*gamma) {
                    acc(*gamma, sum_gx.clone());
                }
                if wants(*beta) {
                    acc(*beta, sum_g.clone());
                }
                if wants(*x) {
                    let gam = val(*gamma);
                    let count = T::of((g.len() / ch) as f64);
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&d, &h))| {
                            let c = (i / len) % ch;
                            if *batch_stats {
                                gam[c] * inv_std[c] * (d - sum_g[c] / count - h * sum_gx[c] / count)
                            } else {
                                gam[c] * inv_std[c] * d
                            }
                        })
                        .collect();
                    acc(*x, gx);
                }
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                let k = nodes[logits.0].shape[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut gx = probs.clone();
                for (row, &t) in gx.chunks_mut(k).zip(targets) {
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, gx);
            }
            Op::SigmoidBce { logits, targets } => {
                let z = val(*logits);
                let scale = g[0] / T::of(z.len() as f64);
                acc(
                    *logits,
                    z.iter().zip(targets).map(|(&v, &y)| (sigmoid(v) - y) * scale).collect(),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.3, -1.0, 2.0]);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).err(), Some(NumericsError::TapeConsumed));
        tape.reset();
        assert!(tape.is_empty());
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let loss = tape.sum(x).unwrap();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert_eq!(tape.backward(x).err(), Some(NumericsError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let c = tape.constant(vec![2], vec![5.0, 7.0]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0, 7.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unreached_parameters_stay_untouched() {
        let mut params = vec![
            Tensor::<f64>::new(vec![1], vec![2.0]).unwrap().with_grad(),
            Tensor::<f64>::new(vec![1], vec![3.0]).unwrap().with_grad(),
        ];
        let mut tape = Tape::new();
        let a = tape.param(0, &params[0]);
        let _b = tape.param(1, &params[1]);
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[4.0]);
        assert!(params[1].grad().is_none());
    }

    #[test]
    fn nan_in_forward_names_the_op() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1e300]);
        let y = tape.mul(x, x).unwrap_err();
        assert_eq!(y, NumericsError::NonFinite { op: "mul", phase: "forward" });
    }

    #[test]
    fn sigmoid_and_softmax_reference_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let p = tape.softmax(x).unwrap();
        assert_eq!(tape.value(p), &[0.5, 0.5]);

        let big = tape.constant(vec![2], vec![-800.0, 800.0]).unwrap();
        let s = tape.sigmoid(big).unwrap();
        assert_eq!(tape.value(s), &[0.0, 1.0]);
        let p = tape.softmax(big).unwrap();
        assert_eq!(tape.value(p), &[0.0, 1.0]);
    }

    #[test]
    fn tanh_derivative_at_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1.0]);
        let y = tape.tanh(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap()[0];
        assert!((g - 0.419_974_341_614_026).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(tape.add(a, b), Err(NumericsError::ShapeMismatch { .. })));
        let m = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(tape.matmul(m, m).is_err());
        let e = tape.constant(vec![2, 1], vec![0.0; 2]).unwrap();
        assert!(tape.slice_last(e, 1, 1).is_err());
    }

    #[test]
    fn conv_same_padding_preserves_length_for_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = tape.constant(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = tape.conv1d(x, w, None, Padding::SameZero, 1).unwrap();
        // pad left 0, right 1
        assert_eq!(tape.value(y), &[3.0, 5.0, 7.0, 9.0, 5.0]);
    }
}
