use crate::conv::{self, ConvGeom};
use crate::error::{AutodiffError, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SubRow(Var, Var),
    ChannelBias(Var, Var),
    Linear(Var, Var, Var),
    Conv(Var, Var, ConvGeom),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    GatherRows(Vec<Var>, Vec<(usize, usize)>),
    L2Normalize(Var, Vec<f64>, f64),
    Cosine(Var, Var, Vec<(f64, f64)>, f64),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Trainable leaves receive a gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient left by the last [`Tape::backward`], if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            self.node(*v)?;
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(&[a])?;
        let v = self.map(a, |x| k * x);
        Ok(self.push(v, Op::Scale(a, k), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(&[a])?;
        let v = self.map(a, |x| x + k);
        Ok(self.push(v, Op::AddScalar(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.map(a, |x| x * x);
        Ok(self.push(v, Op::Square(a), &[a]))
    }

    /// Elementwise square root; inputs must be positive for a finite gradient.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.map(a, f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.map(a, |x| x.max(0.0));
        Ok(self.push(v, Op::Relu(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(AutodiffError::Usage("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Mean over all leading axes: `[.., E]` viewed as `[M, E]` -> `[E]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let t = self.value(a);
        let e = t.last_dim();
        let m = t.numel() / e.max(1);
        if m == 0 {
            return Err(AutodiffError::Usage("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; e];
        for row in t.data().chunks(e) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::from_vec(out), Op::MeanRows(a), &[a]))
    }

    /// `a[.., E] - row[E]` broadcast over leading axes.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(&[a, row])?;
        let e = self.value(a).last_dim();
        if self.shape(row) != [e] {
            return Err(shape_err("sub_row", &[e], self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(e)
            .flat_map(|c| c.iter().zip(&r).map(|(x, y)| x - y).collect::<Vec<_>>())
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::SubRow(a, row), &[a, row]))
    }

    /// Adds `bias[C]` to every position of `x[B, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(&[x, bias])?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Dimension {
                op: "channel_bias",
                axis: 1,
                detail: format!("input needs a channel axis, got {shape:?}"),
            });
        }
        if self.shape(bias) != [shape[1]] {
            return Err(shape_err("channel_bias", &[shape[1]], self.shape(bias)));
        }
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let c = b[i % shape[1]];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ChannelBias(x, bias), &[x, bias]))
    }

    /// `x[N, in] · Wᵀ + b` with `W[out, in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 {
            return Err(AutodiffError::Dimension {
                op: "linear",
                axis: xs.len(),
                detail: format!("input must be [N, in], got {xs:?}"),
            });
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(AutodiffError::Dimension {
                op: "linear",
                axis: 1,
                detail: format!("weight {ws:?} incompatible with input {xs:?}"),
            });
        }
        if self.shape(b) != [ws[0]] {
            return Err(shape_err("linear", &[ws[0]], self.shape(b)));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            for o in 0..dout {
                let row = &xd[i * din..(i + 1) * din];
                let wr = &wd[o * din..(o + 1) * din];
                out[i * dout + o] = bd[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let v = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(v, Op::Linear(x, w, b), &[x, w, b]))
    }

    /// 3-D cross-correlation, `input[B, Cin, X, Y, Z]`, `kernel[Cout, Cin, k, k, k]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv("conv3d", 3, input, kernel, stride, padding)
    }

    /// 2-D cross-correlation, `input[B, Cin, H, W]`, `kernel[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv("conv2d", 2, input, kernel, stride, padding)
    }

    fn conv(
        &mut self,
        op: &'static str,
        spatial: usize,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(&[input, kernel])?;
        let g = ConvGeom::infer(op, spatial, self.shape(input), self.shape(kernel), stride, padding)?;
        let out = conv::forward(self.value(input).data(), self.value(kernel).data(), &g);
        let mut shape = vec![g.batch, g.cout];
        shape.extend_from_slice(&g.out_dims[..spatial]);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Conv(input, kernel, g), &[input, kernel]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(AutodiffError::Usage(format!("permute: {axes:?} is not a permutation of {} axes", shape.len())));
        }
        let data = permute_data(self.value(a).data(), &shape, axes);
        let out_shape = axes.iter().map(|&i| shape[i]).collect();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(shape_err("reshape", shape, self.shape(a)));
        }
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Builds `[picks.len(), E]` from rows of the sources, each viewed as
    /// `[rows, E]` over its last axis. A pick is `(source index, row)`.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        self.check(sources)?;
        let Some(first) = sources.first() else {
            return Err(AutodiffError::Usage("gather_rows needs at least one source".into()));
        };
        let e = self.value(*first).last_dim();
        for s in sources {
            if self.value(*s).last_dim() != e {
                return Err(AutodiffError::Dimension {
                    op: "gather_rows",
                    axis: self.shape(*s).len().saturating_sub(1),
                    detail: format!("row width {} differs from {e}", self.value(*s).last_dim()),
                });
            }
        }
        let mut data = Vec::with_capacity(picks.len() * e);
        for &(src, row) in picks {
            let t = sources
                .get(src)
                .map(|s| self.value(*s))
                .ok_or_else(|| AutodiffError::Usage(format!("gather_rows: source {src} out of range")))?;
            if (row + 1) * e > t.numel() {
                return Err(AutodiffError::Dimension {
                    op: "gather_rows",
                    axis: 0,
                    detail: format!("row {row} out of range for source {src} with {} rows", t.numel() / e),
                });
            }
            data.extend_from_slice(&t.data()[row * e..(row + 1) * e]);
        }
        let v = Tensor::new(vec![picks.len(), e], data)?;
        Ok(self.push(v, Op::GatherRows(sources.to_vec(), picks.to_vec()), sources))
    }

    /// Divides every last-axis slice by `max(‖x‖, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check(&[a])?;
        let t = self.value(a);
        let e = t.last_dim();
        if e == 0 {
            return Err(AutodiffError::Usage("l2_normalize over empty axis".into()));
        }
        let mut norms = Vec::with_capacity(t.numel() / e);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(e) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = n.max(eps);
            norms.push(n);
            data.extend(row.iter().map(|x| x / d));
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::L2Normalize(a, norms, eps), &[a]))
    }

    /// `(a·b) / (max(‖a‖,eps)·max(‖b‖,eps))` per last-axis slice; drops the last axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let e = ta.last_dim();
        let mut norms = Vec::new();
        let mut out = Vec::new();
        if e > 0 {
            for (ra, rb) in ta.data().chunks(e).zip(tb.data().chunks(e)) {
                let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out.push(dot / (na.max(eps) * nb.max(eps)));
                norms.push((na, nb));
            }
        }
        let shape = ta.shape()[..ta.ndim().saturating_sub(1)].to_vec();
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Cosine(a, b, norms, eps), &[a, b]))
    }

    /// Mean binary cross-entropy of `logits[N]` against `targets` in `{0,1}`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.check(&[logits])?;
        let z = self.value(logits);
        if z.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", &[targets.len()], z.shape()));
        }
        let n = targets.len() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.to_vec()), &[logits]))
    }

    /// Reverse pass from a scalar `loss`, overwriting the gradients of every
    /// node that requires one. Trainable leaves the loss does not depend on
    /// get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.grad = None;
            if !node.requires_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            match grads.get_mut(i).and_then(Option::take) {
                Some(g) => node.grad = Some(Tensor::new(shape, g)?),
                None if matches!(node.op, Op::Leaf) => node.grad = Some(Tensor::zeros(&shape)),
                None => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect());
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let n = val(*a).len();
                let e = g.len();
                let m = (n / e) as f64;
                acc(*a, (0..n).map(|j| g[j % e] / m).collect());
            }
            Op::SubRow(a, row) => {
                acc(*a, g.to_vec());
                if wants(*row) {
                    let e = val(*row).len();
                    let mut d = vec![0.0; e];
                    for chunk in g.chunks(e) {
                        d.iter_mut().zip(chunk).for_each(|(a, b)| *a -= b);
                    }
                    acc(*row, d);
                }
            }
            Op::ChannelBias(x, bias) => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let c = val(*bias).len();
                    let shape = self.nodes[x.0].value.shape();
                    let inner: usize = shape[2..].iter().product::<usize>().max(1);
                    let mut d = vec![0.0; c];
                    for (k, chunk) in g.chunks(inner).enumerate() {
                        d[k % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*bias, d);
                }
            }
            Op::Linear(x, w, b) => {
                let xs = self.nodes[x.0].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = val(*b).len();
                if wants(*x) {
                    let wd = val(*w);
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            for k in 0..din {
                                dx[i * din + k] += go * wd[o * din + k];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*w) {
                    let xd = val(*x);
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            for k in 0..din {
                                dw[o * din + k] += go * xd[i * din + k];
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc(*b, db);
                }
            }
            Op::Conv(input, kernel, geom) => {
                if wants(*input) {
                    acc(*input, conv::backward_input(g, val(*kernel), geom));
                }
                if wants(*kernel) {
                    acc(*kernel, conv::backward_kernel(val(*input), g, geom));
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(*a, permute_data(g, node.value.shape(), &inverse));
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::GatherRows(sources, picks) => {
                let e = node.value.last_dim();
                let mut deltas: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|s| wants(*s).then(|| vec![0.0; val(*s).len()]))
                    .collect();
                for (k, &(src, row)) in picks.iter().enumerate() {
                    if let Some(d) = &mut deltas[src] {
                        let dst = &mut d[row * e..(row + 1) * e];
                        dst.iter_mut().zip(&g[k * e..(k + 1) * e]).for_each(|(a, b)| *a += b);
                    }
                }
                for (s, d) in sources.iter().zip(deltas) {
                    if let Some(d) = d {
                        acc(*s, d);
                    }
                }
            }
            Op::L2Normalize(a, norms, eps) => {
                let e = node.value.last_dim();
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = r * e..(r + 1) * e;
                    let (yr, gr) = (&y[s.clone()], &g[s.clone()]);
                    if n > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, gy), yy) in dx[s].iter_mut().zip(gr).zip(yr) {
                            *d = (gy - yy * dot) / n;
                        }
                    } else {
                        for (d, gy) in dx[s].iter_mut().zip(gr) {
                            *d = gy / eps;
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Cosine(a, b, norms, eps) => {
                let (ad, bd) = (val(*a), val(*b));
                let e = if norms.is_empty() { 0 } else { ad.len() / norms.len() };
                let c = node.value.data();
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    let (ma, mb) = (na.max(*eps), nb.max(*eps));
                    let s = r * e..(r + 1) * e;
                    for j in s {
                        // d/da of (a·b)/(ma·mb); the norm term only where ‖a‖ > eps.
                        let mut ga = bd[j] / (ma * mb);
                        if na > *eps {
                            ga -= c[r] * ad[j] / (na * na);
                        }
                        let mut gb = ad[j] / (ma * mb);
                        if nb > *eps {
                            gb -= c[r] * bd[j] / (nb * nb);
                        }
                        da[j] = g[r] * ga;
                        db[j] = g[r] * gb;
                    }
                }
                if wants(*a) {
                    acc(*a, da);
                }
                if wants(*b) {
                    acc(*b, db);
                }
            }
            Op::BceWithLogits(z, targets) => {
                let n = targets.len() as f64;
                let d = val(*z)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (1.0 / (1.0 + (-z).exp()) - t) / n)
                    .collect();
                acc(*z, d);
            }
        }
        Ok(())
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::EPS_NORM;

    fn vec_leaf(tape: &mut Tape, v: &[f64], grad: bool) -> Var {
        tape.leaf(Tensor::from_vec(v.to_vec()), grad)
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0, 0.0, 2.0], false);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0, 2.0], true);
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = t.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0, 3.0], true);
        let sq = t.square(x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0], true);
        let c = vec_leaf(&mut t, &[5.0], false);
        let l = t.sum(c).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0], true);
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[3.0, 4.0], false);
        let y = t.l2_normalize(x, EPS_NORM).unwrap();
        assert!((t.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.8).abs() < 1e-15);

        let u = vec_leaf(&mut t, &[0.0, 1.0, 0.0], false);
        let yu = t.l2_normalize(u, EPS_NORM).unwrap();
        assert_eq!(t.value(yu).data(), &[0.0, 1.0, 0.0]);

        let z = vec_leaf(&mut t, &[0.0, 0.0], false);
        let yz = t.l2_normalize(z, EPS_NORM).unwrap();
        assert_eq!(t.value(yz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_cases() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0, -0.5], false);
        let na = vec_leaf(&mut t, &[-1.0, -2.0, 0.5], false);
        let e1 = vec_leaf(&mut t, &[1.0, 0.0, 0.0], false);
        let e2 = vec_leaf(&mut t, &[0.0, 1.0, 0.0], false);
        let same = t.cosine_similarity(a, a, EPS_NORM).unwrap();
        let opp = t.cosine_similarity(a, na, EPS_NORM).unwrap();
        let orth = t.cosine_similarity(e1, e2, EPS_NORM).unwrap();
        assert!((t.value(same).item().unwrap() - 1.0).abs() < 1e-15);
        assert!((t.value(opp).item().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(t.value(orth).item().unwrap(), 0.0);
    }

    #[test]
    fn permute_roundtrip_matches_manual() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(y), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        let (xd, yd) = (t.value(x).data(), t.value(y).data());
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(yd[(k * 2 + i) * 3 + j], xd[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.gather_rows(&[x], &[(0, 2)]).is_err());
        assert!(t.gather_rows(&[x], &[(1, 0)]).is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, b), Err(AutodiffError::Shape { .. })));
        assert!(t.cosine_similarity(a, b, EPS_NORM).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut t = Tape::new();
        let w = vec_leaf(&mut t, &[1.0, 2.0], false);
        let x = vec_leaf(&mut t, &[3.0, 4.0], true);
        let y = t.mul(w, x).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(w).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }
}
