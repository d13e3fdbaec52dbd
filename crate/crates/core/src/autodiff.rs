//! Reverse-mode differentiation over a per-step computation graph.
//!
//! A [`Graph`] records every op applied during a forward pass together with
//! whatever the backward pass needs (argmax indices, normalized activations,
//! row norms). [`Graph::backward`] then walks the node list in reverse. The
//! layer set is exactly what the embedding and baseline networks use.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    Relu { input: Var },
    BatchNorm { input: Var, scale: Var, shift: Var, normalized: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool { input: Var, argmax: Vec<u32> },
    Reshape { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    L2Normalize { input: Var, norms: Vec<T> },
    GatherRows { input: Var, rows: Vec<usize> },
    Sub { lhs: Var, rhs: Var },
    Square { input: Var },
    SumRows { input: Var },
    AddScalar { input: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    BceWithLogits { logits: Var, targets: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (n − 1 denominator), the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

/// Records ops for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn check_nchw<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected [B, C, H, W], got {s:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every gradient buffer so backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Valid 2-D cross-correlation with stride 1 and no padding.
    ///
    /// `input` is `[B, Cin, H, W]`, `kernel` is `[Cout, Cin, KH, KW]`, and the
    /// optional `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let [b, cin, h, wd] = check_nchw("conv2d", x)?;
        let [cout, kcin, kh, kw] = check_nchw("conv2d", w)?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        if h < kh || wd < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{wd} smaller than kernel {kh}x{kw}"),
            ));
        }
        if let Some(bv) = bias {
            let bs = self.nodes[bv.0].value.shape();
            if bs != [cout] {
                return Err(Error::shape("conv2d", format!("bias shape {bs:?}, expected [{cout}]")));
            }
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let geom = ConvGeom { cin, h, w: wd, kh, kw, oh, ow };
        let kdim = cin * kh * kw;
        let plane = oh * ow;
        let in_sz = cin * h * wd;
        let mut out = vec![T::zero(); b * cout * plane];
        let xd = x.data();
        let wdt = w.data();
        let bias_data = bias.map(|bv| self.nodes[bv.0].value.data());
        out.par_chunks_mut(cout * plane).enumerate().for_each(|(bi, ob)| {
            let mut col = vec![T::zero(); kdim * plane];
            im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &geom, &mut col);
            if let Some(bd) = bias_data {
                for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                    chunk.fill(bd[co]);
                }
            }
            let beta = if bias_data.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, kdim, plane, T::one(), wdt, kdim as isize, 1, &col, plane as isize, 1, beta, ob, plane as isize, 1);
        });
        let requires = self.needs(input) || self.needs(kernel) || bias.is_some_and(|bv| self.needs(bv));
        let value = Tensor::new([b, cout, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, requires))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let requires = self.needs(input);
        self.push(value, Op::Relu { input }, requires)
    }

    /// Train-mode batch norm: normalizes each channel by its batch mean and
    /// biased variance, then applies `scale`/`shift`. Returns the observed
    /// statistics so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let x = &self.nodes[input.0].value;
        let [b, c, h, w] = check_nchw("batch_norm", x)?;
        self.check_affine(scale, shift, c)?;
        let n = b * h * w;
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let plane = h * w;
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                s += xd[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / n as f64;
            let mut ss = 0.0f64;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                ss += xd[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
            mean[ch] = T::from_f64(m);
            var[ch] = T::from_f64(ss / n as f64);
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased: var
                .iter()
                .map(|&v| T::from_f64(v.as_f64() * n as f64 / (n - 1) as f64))
                .collect(),
        };
        let v = self.batch_norm_apply(input, scale, shift, &mean, &var, eps, true)?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let [_, c, _, _] = check_nchw("batch_norm", &self.nodes[input.0].value)?;
        self.check_affine(scale, shift, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats must have {c} channels")));
        }
        self.batch_norm_apply(input, scale, shift, running_mean, running_var, eps, false)
    }

    fn check_affine(&self, scale: Var, shift: Var, c: usize) -> Result<()> {
        for v in [scale, shift] {
            let s = self.nodes[v.0].value.shape();
            if s != [c] {
                return Err(Error::shape("batch_norm", format!("affine shape {s:?}, expected [{c}]")));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        batch_stats: bool,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [b, c, h, w] = check_nchw("batch_norm", x)?;
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.nodes[scale.0].value.data();
        let beta = self.nodes[shift.0].value.data();
        let mut normalized = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let requires = self.needs(input) || self.needs(scale) || self.needs(shift);
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(value, Op::BatchNorm { input, scale, shift, normalized, inv_std, batch_stats }, requires))
    }

    /// Non-overlapping max pooling with a square window equal to its stride.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let [b, c, h, w] = check_nchw("max_pool2d", x)?;
        if window == 0 || h < window || w < window {
            return Err(Error::shape("max_pool2d", format!("{h}x{w} input, window {window}")));
        }
        let (oh, ow) = (h / window, w / window);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = base + oy * window * w + ox * window;
                    let mut best = xd[best_i];
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * w + ox * window + dx;
                            // strict comparison keeps the first maximum in row-major order
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i as u32);
                }
            }
        }
        let requires = self.needs(input);
        let value = Tensor::new([b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, requires))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.nodes[input.0].value.clone().reshape(shape)?;
        let requires = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, requires))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.nodes[input.0].value.shape();
        let b = s[0];
        let rest = s[1..].iter().product::<usize>();
        self.reshape(input, [b, rest])
    }

    /// `input · weightᵀ + bias` with `input [B, Nin]`, `weight [Nout, Nin]`, `bias [Nout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let bvec = &self.nodes[bias.0].value;
        let (b, nin) = match *x.shape() {
            [b, n] => (b, n),
            ref s => return Err(Error::shape("linear", format!("input must be [B, Nin], got {s:?}"))),
        };
        let nout = match *w.shape() {
            [o, i] if i == nin => o,
            ref s => {
                return Err(Error::shape("linear", format!("weight {s:?} incompatible with input width {nin}")))
            }
        };
        if bvec.shape() != [nout] {
            return Err(Error::shape("linear", format!("bias {:?}, expected [{nout}]", bvec.shape())));
        }
        let mut out = Vec::with_capacity(b * nout);
        for _ in 0..b {
            out.extend_from_slice(bvec.data());
        }
        T::gemm(b, nin, nout, T::one(), x.data(), nin as isize, 1, w.data(), 1, nin as isize, T::one(), &mut out, nout as isize, 1);
        let requires = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new([b, nout], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, requires))
    }

    /// Scales each row of a `[B, d]` tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        const GUARD: f64 = 1e-12;
        let x = &self.nodes[input.0].value;
        let (b, d) = match *x.shape() {
            [b, d] => (b, d),
            ref s => return Err(Error::shape("l2_normalize", format!("expected [B, d], got {s:?}"))),
        };
        let mut norms = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b * d);
        for r in 0..b {
            let row = &x.data()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if !(norm > GUARD) {
                return Err(Error::DegenerateRow { row: r, norm });
            }
            out.extend(row.iter().map(|v| T::from_f64(v.as_f64() / norm)));
            norms.push(T::from_f64(norm));
        }
        let requires = self.needs(input);
        let value = Tensor::new([b, d], out)?;
        Ok(self.push(value, Op::L2Normalize { input, norms }, requires))
    }

    /// Selects rows of a `[B, ...]` tensor; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let n = x.shape().first().copied().unwrap_or(0);
        let width: usize = x.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("gather_rows", format!("row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(x.row(r));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let requires = self.needs(input);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GatherRows { input, rows: rows.to_vec() }, requires))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        if a.shape() != b.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let requires = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::Sub { lhs, rhs }, requires))
    }

    pub fn square(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0].value.map(|v| v * v);
        let requires = self.needs(input);
        self.push(value, Op::Square { input }, requires)
    }

    /// `[B, d] -> [B]` row sums.
    pub fn sum_rows(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (b, d) = match *x.shape() {
            [b, d] => (b, d),
            ref s => return Err(Error::shape("sum_rows", format!("expected [B, d], got {s:?}"))),
        };
        let data = (0..b).map(|r| x.data()[r * d..(r + 1) * d].iter().copied().sum()).collect();
        let requires = self.needs(input);
        let value = Tensor::new([b], data)?;
        Ok(self.push(value, Op::SumRows { input }, requires))
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let value = self.nodes[input.0].value.map(|v| v + c);
        let requires = self.needs(input);
        self.push(value, Op::AddScalar { input }, requires)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.nodes[input.0].value.map(|v| v * factor);
        let requires = self.needs(input);
        self.push(value, Op::Scale { input, factor }, requires)
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.nodes[input.0].value.data().iter().copied().sum();
        let requires = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, requires)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in the overflow-free `max(z,0) − z·t + ln(1 + e^−|z|)` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if z.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", z.numel(), targets.len()),
            ));
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&zi, &ti)| {
                let (zi, ti) = (zi.as_f64(), ti.as_f64());
                zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p()
            })
            .sum();
        let requires = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / n)),
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            requires,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
            None => node.grad = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Ops are moved out temporarily so their saved buffers can be read
        // while other nodes' gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => self.back_conv2d(i, g, *input, *kernel, *bias),
            Op::Relu { input } => {
                let x = self.nodes[input.0].value.data();
                let d = x.iter().zip(g).map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(*input, d);
            }
            Op::BatchNorm { input, scale, shift, normalized, inv_std, batch_stats } => {
                self.back_batch_norm(g, *input, *scale, *shift, normalized, inv_std, *batch_stats)
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.nodes[input.0].value.numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx as usize] = d[idx as usize] + gv;
                }
                self.accumulate(*input, d);
            }
            Op::Reshape { input } => self.accumulate(*input, g.to_vec()),
            Op::Linear { input, weight, bias } => self.back_linear(g, *input, *weight, *bias),
            Op::L2Normalize { input, norms } => {
                let y = self.nodes[i].value.data();
                let d = y.len() / norms.len().max(1);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                self.accumulate(*input, dx);
            }
            Op::GatherRows { input, rows } => {
                let x = &self.nodes[input.0].value;
                let width: usize = x.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); x.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        dx[r * width + c] = dx[r * width + c] + g[k * width + c];
                    }
                }
                self.accumulate(*input, dx);
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(*lhs, g.to_vec());
                self.accumulate(*rhs, g.iter().map(|&v| -v).collect());
            }
            Op::Square { input } => {
                let x = self.nodes[input.0].value.data();
                let two = T::from_f64(2.0);
                let d = x.iter().zip(g).map(|(&xv, &gv)| two * xv * gv).collect();
                self.accumulate(*input, d);
            }
            Op::SumRows { input } => {
                let x = &self.nodes[input.0].value;
                let d = x.shape()[1];
                let dx = (0..x.numel()).map(|k| g[k / d]).collect();
                self.accumulate(*input, dx);
            }
            Op::AddScalar { input } => self.accumulate(*input, g.to_vec()),
            Op::Scale { input, factor } => {
                let f = *factor;
                self.accumulate(*input, g.iter().map(|&v| v * f).collect());
            }
            Op::Sum { input } => {
                let n = self.nodes[input.0].value.numel();
                self.accumulate(*input, vec![g[0]; n]);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.nodes[logits.0].value.data();
                let n = T::from_f64(targets.len().max(1) as f64);
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &ti)| (sigmoid(zi) - ti) * g[0] / n)
                    .collect();
                self.accumulate(*logits, d);
            }
        }
        self.nodes[i].op = op;
    }

    fn back_conv2d(&mut self, i: usize, g: &[T], input: Var, kernel: Var, bias: Option<Var>) {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let [b, cin, h, wd] = check_nchw("conv2d", x).expect("validated in forward");
        let [cout, _, kh, kw] = check_nchw("conv2d", w).expect("validated in forward");
        let [_, _, oh, ow] = check_nchw("conv2d", &self.nodes[i].value).expect("validated in forward");
        let geom = ConvGeom { cin, h, w: wd, kh, kw, oh, ow };
        let kdim = cin * kh * kw;
        let plane = oh * ow;
        let in_sz = cin * h * wd;
        let need_x = self.needs(input);
        let need_w = self.needs(kernel);
        let xd = x.data();
        let wdt = w.data();

        let bias_grad = bias.filter(|bv| self.needs(*bv)).map(|bv| {
            let mut db = vec![T::zero(); cout];
            for bi in 0..b {
                for (co, acc) in db.iter_mut().enumerate() {
                    let off = (bi * cout + co) * plane;
                    *acc = *acc + g[off..off + plane].iter().copied().sum();
                }
            }
            (bv, db)
        });
        // Per-image partials, reduced in index order so the result does not
        // depend on thread scheduling.
        let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..b)
            .into_par_iter()
            .filter(|_| need_x || need_w)
            .map(|bi| {
                let gb = &g[bi * cout * plane..(bi + 1) * cout * plane];
                let dw = need_w.then(|| {
                    let mut col = vec![T::zero(); kdim * plane];
                    im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &geom, &mut col);
                    let mut dw = vec![T::zero(); cout * kdim];
                    T::gemm(cout, plane, kdim, T::one(), gb, plane as isize, 1, &col, 1, plane as isize, T::zero(), &mut dw, kdim as isize, 1);
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dcol = vec![T::zero(); kdim * plane];
                    T::gemm(kdim, cout, plane, T::one(), wdt, 1, kdim as isize, gb, plane as isize, 1, T::zero(), &mut dcol, plane as isize, 1);
                    let mut dx = vec![T::zero(); in_sz];
                    col2im(&dcol, &geom, &mut dx);
                    dx
                });
                (dw, dx)
            })
            .collect();
        if let Some((bv, db)) = bias_grad {
            self.accumulate(bv, db);
        }
        if need_w {
            let mut dw = vec![T::zero(); cout * kdim];
            for (p, _) in &partials {
                if let Some(p) = p {
                    dw.iter_mut().zip(p).for_each(|(a, &v)| *a = *a + v);
                }
            }
            self.accumulate(kernel, dw);
        }
        if need_x {
            let mut dx = Vec::with_capacity(b * in_sz);
            for (_, p) in partials {
                dx.extend(p.expect("computed when input needs grad"));
            }
            self.accumulate(input, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_batch_norm(
        &mut self,
        g: &[T],
        input: Var,
        scale: Var,
        shift: Var,
        normalized: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) {
        let [b, c, h, w] = check_nchw("batch_norm", &self.nodes[input.0].value).expect("validated in forward");
        let plane = h * w;
        let n = (b * plane) as f64;
        let gamma = self.nodes[scale.0].value.data().to_vec();
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for k in off..off + plane {
                    dbeta[ch] += g[k].as_f64();
                    dgamma[ch] += (g[k] * normalized[k]).as_f64();
                }
            }
        }
        if self.needs(input) {
            let mut dx = vec![T::zero(); g.len()];
            for ch in 0..c {
                let gi = gamma[ch].as_f64() * inv_std[ch].as_f64();
                let (mb, mg) = if batch_stats { (dbeta[ch] / n, dgamma[ch] / n) } else { (0.0, 0.0) };
                for bi in 0..b {
                    let off = (bi * c + ch) * plane;
                    for k in off..off + plane {
                        let v = gi * (g[k].as_f64() - mb - normalized[k].as_f64() * mg);
                        dx[k] = T::from_f64(v);
                    }
                }
            }
            self.accumulate(input, dx);
        }
        self.accumulate(scale, dgamma.into_iter().map(T::from_f64).collect());
        self.accumulate(shift, dbeta.into_iter().map(T::from_f64).collect());
    }

    fn back_linear(&mut self, g: &[T], input: Var, weight: Var, bias: Var) {
        let (need_x, need_w) = (self.needs(input), self.needs(weight));
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (b, nin) = (x.shape()[0], x.shape()[1]);
        let nout = w.shape()[0];
        let dx = need_x.then(|| {
            let mut dx = vec![T::zero(); b * nin];
            T::gemm(b, nout, nin, T::one(), g, nout as isize, 1, w.data(), nin as isize, 1, T::zero(), &mut dx, nin as isize, 1);
            dx
        });
        let dw = need_w.then(|| {
            let mut dw = vec![T::zero(); nout * nin];
            T::gemm(nout, b, nin, T::one(), g, 1, nout as isize, x.data(), nin as isize, 1, T::zero(), &mut dw, nin as isize, 1);
            dw
        });
        let mut db = vec![T::zero(); nout];
        for r in 0..b {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = *acc + g[r * nout + o];
            }
        }
        if let Some(dx) = dx {
            self.accumulate(input, dx);
        }
        if let Some(dw) = dw {
            self.accumulate(weight, dw);
        }
        self.accumulate(bias, db);
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Unfolds one image into a `[Cin·KH·KW, OH·OW]` patch matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.oh {
                    let src = ci * g.h * g.w + (oy + ki) * g.w + kj;
                    col[row + oy * g.ow..row + (oy + 1) * g.ow].copy_from_slice(&x[src..src + g.ow]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.oh {
                    let dst = ci * g.h * g.w + (oy + ki) * g.w + kj;
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for (d, &s) in x[dst..dst + g.ow].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}
