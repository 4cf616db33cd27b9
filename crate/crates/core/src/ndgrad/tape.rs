use rand::Rng;

use crate::error::{ensure, Error, Result};

use super::kernels::{conv_out_len, matmul_acc, ConvGeom, View};
use super::{Array, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub running_mean: Array<F>,
    pub running_var: Array<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Array::zeros(&[channels]),
            running_var: Array::full(&[channels], F::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    GatedResidual { x: Var, wg: Var, bg: Var, wf: Var, bf: Var, geom: ConvGeom, gate: Vec<F>, filt: Vec<F> },
    AvgPoolTime(Var),
    Dense { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F>, train: bool },
    Dropout { x: Var, mask: Vec<F> },
    SliceTime { x: Var, start: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    Mse { pred: Var, target: Var },
    SmoothL1 { pred: Var, target: Var },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Array<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes only reference earlier nodes, so creation order is a topological
/// order and the backward pass walks it in reverse.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp_act())
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh_act(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a diverged trunk still surfaces in the loss
        self.unary(a, |v| if v < F::zero() { F::zero() } else { v }, Op::Relu(a))
    }

    fn conv_operands(&self, x: Var, w: Var, b: Var) -> Result<(usize, usize, usize, usize, usize)> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        ensure!(xs.len() == 3, "conv input must be [B, C_in, T], got {xs:?}");
        ensure!(ws.len() == 3, "conv weight must be [C_out, C_in, K], got {ws:?}");
        ensure!(
            ws[1] == xs[1],
            "conv weight expects {} input channels but input has {}",
            ws[1],
            xs[1]
        );
        ensure!(bs == [ws[0]], "conv bias must be [{}], got {bs:?}", ws[0]);
        Ok((xs[0], xs[1], xs[2], ws[0], ws[2]))
    }

    fn conv_with(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let mut out = vec![F::zero(); geom.batch * geom.c_out * geom.t_out];
        geom.forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let value = Array::new(vec![geom.batch, geom.c_out, geom.t_out], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Same-length causal dilated convolution: `out[t]` reads only `x[<= t]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (batch, c_in, t, c_out, width) = self.conv_operands(x, w, b)?;
        ensure!(dilation >= 1, "dilation must be >= 1");
        self.conv_with(x, w, b, ConvGeom::causal(batch, c_in, t, c_out, width, dilation))
    }

    /// Valid (unpadded) strided convolution; `T_out = (T - K) / stride + 1`.
    pub fn strided_conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, c_in, t, c_out, width) = self.conv_operands(x, w, b)?;
        ensure!(stride >= 1, "stride must be >= 1");
        ensure!(
            conv_out_len(t, width, stride).is_some(),
            "strided conv needs at least {width} frames, got {t}"
        );
        self.conv_with(x, w, b, ConvGeom::strided(batch, c_in, t, c_out, width, stride))
    }

    /// Fused residual atom: `x + sigmoid(wg ⊛ x + bg) * tanh(wf ⊛ x + bf)`
    /// with same-length causal dilated convolutions.
    ///
    /// Numerically identical to composing `causal_conv1d`, `sigmoid`, `tanh`,
    /// `mul` and `add`, but records a single node.
    pub fn gated_residual(&mut self, x: Var, wg: Var, bg: Var, wf: Var, bf: Var, dilation: usize) -> Result<Var> {
        let (batch, c_in, t, c_out, width) = self.conv_operands(x, wg, bg)?;
        let f_dims = self.conv_operands(x, wf, bf)?;
        ensure!(f_dims == (batch, c_in, t, c_out, width), "gate and filter weights differ in shape");
        ensure!(c_out == c_in, "residual atom needs C_out == C_in, got {c_out} vs {c_in}");
        ensure!(dilation >= 1, "dilation must be >= 1");
        let geom = ConvGeom::causal(batch, c_in, t, c_out, width, dilation);
        let n = batch * c_out * t;
        let xd = self.value(x).data();
        let mut gate = vec![F::zero(); n];
        let mut filt = vec![F::zero(); n];
        geom.forward(xd, self.value(wg).data(), self.value(bg).data(), &mut gate);
        geom.forward(xd, self.value(wf).data(), self.value(bf).data(), &mut filt);
        let mut out = vec![F::zero(); n];
        for ((o, &xv), (gv, fv)) in out.iter_mut().zip(xd).zip(gate.iter_mut().zip(filt.iter_mut())) {
            *gv = sigmoid(*gv);
            *fv = fv.tanh_act();
            *o = xv + *gv * *fv;
        }
        let value = Array::new(vec![batch, c_out, t], out)?;
        let rg = self.rg(&[x, wg, bg, wf, bf]);
        Ok(self.push(value, Op::GatedResidual { x, wg, bg, wf, bf, geom, gate, filt }, rg))
    }

    /// Mean over the time axis: `[B, C, T] -> [B, C]`.
    pub fn avg_pool_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 3, "avg_pool_time expects [B, C, T], got {xs:?}");
        let t = xs[2];
        let inv = F::one() / F::of(t as f64);
        let data = self.value(x).data().chunks_exact(t).map(|row| row.iter().copied().sum::<F>() * inv).collect();
        let value = Array::new(vec![xs[0], xs[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPoolTime(x), rg))
    }

    /// Affine map `[B, F] · [F, U] + [U]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        ensure!(xs.len() == 2 && ws.len() == 2, "dense expects [B, F] and [F, U], got {xs:?}, {ws:?}");
        ensure!(xs[1] == ws[0], "dense inner dimension mismatch: input {} vs weight {}", xs[1], ws[0]);
        ensure!(bs == [ws[1]], "dense bias must be [{}], got {bs:?}", ws[1]);
        let (rows, inner, units) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(rows * units);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        matmul_acc(
            rows,
            inner,
            units,
            self.value(x).data(),
            View::new(0, inner, 1),
            self.value(w).data(),
            View::new(0, units, 1),
            &mut out,
            View::new(0, units, 1),
        );
        let value = Array::new(vec![rows, units], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Batch normalization over axis 1 of a `[B, C]` or `[B, C, T]` input.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState<F>, mode: Mode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 2 || xs.len() == 3, "batch_norm expects [B, C] or [B, C, T], got {xs:?}");
        let (batch, ch) = (xs[0], xs[1]);
        let inner = if xs.len() == 3 { xs[2] } else { 1 };
        ensure!(self.shape(gamma) == [ch] && self.shape(beta) == [ch], "batch_norm gamma/beta must be [{ch}]");
        ensure!(state.channels() == ch, "batch_norm state has {} channels, input {ch}", state.channels());
        let xd = self.value(x).data();
        let count = batch * inner;
        let eps = F::of(state.eps);
        let mut inv_std = vec![F::zero(); ch];
        let mut mean = vec![F::zero(); ch];
        let train = mode == Mode::Train;
        if train {
            ensure!(batch >= 2, "batch_norm in train mode needs batch size >= 2, got {batch}");
            let nf = F::of(count as f64);
            for c in 0..ch {
                let mut s = F::zero();
                for b in 0..batch {
                    s += xd[(b * ch + c) * inner..(b * ch + c + 1) * inner].iter().copied().sum::<F>();
                }
                let m = s / nf;
                let mut ss = F::zero();
                for b in 0..batch {
                    for &v in &xd[(b * ch + c) * inner..(b * ch + c + 1) * inner] {
                        ss += (v - m) * (v - m);
                    }
                }
                let var = ss / nf;
                mean[c] = m;
                inv_std[c] = F::one() / (var + eps).sqrt();
                let mom = F::of(state.momentum);
                let unbiased = ss / F::of((count - 1).max(1) as f64);
                let rm = &mut state.running_mean.data_mut()[c];
                *rm = (F::one() - mom) * *rm + mom * m;
                let rv = &mut state.running_var.data_mut()[c];
                *rv = (F::one() - mom) * *rv + mom * unbiased;
            }
        } else {
            for c in 0..ch {
                mean[c] = state.running_mean.data()[c];
                inv_std[c] = F::one() / (state.running_var.data()[c] + eps).sqrt();
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let c = (i / inner) % ch;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(g[c] * h + bt[c]);
        }
        let value = Array::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1), got {rate}");
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Array::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Frames `start..start+len` of a `[B, C, T]` value.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 3, "slice_time expects [B, C, T], got {xs:?}");
        ensure!(len >= 1 && start + len <= xs[2], "slice {start}..{} out of range for T={}", start + len, xs[2]);
        let t = xs[2];
        let mut data = Vec::with_capacity(xs[0] * xs[1] * len);
        for row in self.value(x).data().chunks_exact(t) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Array::new(vec![xs[0], xs[1], len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceTime { x, start }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        ensure!(ls.len() == 2, "logits must be [B, C], got {ls:?}");
        let (batch, classes) = (ls[0], ls[1]);
        ensure!(labels.len() == batch, "{} labels for batch of {batch}", labels.len());
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0f64;
        for (row, &label) in z.chunks_exact(classes).zip(labels) {
            let (arg, max) = row.iter().enumerate().fold((0, F::neg_infinity()), |(ai, am), (i, &v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
            let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom: F = exps.iter().copied().sum();
            // log-sum-exp minus the max term, kept accurate for confident rows
            let rest: F = exps.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, &e)| e).sum();
            let lse_minus_max = rest.ln_1p();
            total += (lse_minus_max + max - row[label]).as_f64();
            probs.extend(exps.iter().map(|&e| e / denom));
        }
        let value = Array::scalar(F::of(total / batch as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| {
                let d = (p - t).as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Array::scalar(F::of(s / n)), Op::Mse { pred, target }, rg))
    }

    /// Mean smooth-L1 (Huber with unit threshold) loss.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1_loss")?;
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| smooth_l1((p - t).as_f64()))
            .sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Array::scalar(F::of(s / n)), Op::SmoothL1 { pred, target }, rg))
    }

    /// `Σ weight_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        ensure!(!terms.is_empty(), "weighted_sum needs at least one term");
        let mut total = F::zero();
        for &(v, w) in terms {
            ensure!(self.value(v).len() == 1, "weighted_sum terms must be scalars");
            total += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Array::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_array(&self, v: Var) -> Option<Array<F>> {
        self.grad(v).map(|g| Array::new(self.shape(v).to_vec(), g.to_vec()).expect("grad matches value shape"))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// a gradient. Intermediate gradients are released as soon as they are
    /// consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape; call reset() first".into()));
        }
        ensure!(self.value(loss).len() == 1, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        self.backward_done = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![F::one()]);

        fn slot<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'a mut Vec<F>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(s) = slot(&mut grads, nodes, *v) {
                            s.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            s[j] += g[j] * bv[j];
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for j in 0..g.len() {
                            s[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        s.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv * *c);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            s[j] += g[j] * y[j] * (F::one() - y[j]);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            s[j] += g[j] * (F::one() - y[j] * y[j]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let xv = nodes[a.0].value.data();
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for j in 0..g.len() {
                            if xv[j] > F::zero() {
                                s[j] += g[j];
                            }
                        }
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    conv_backward(&mut grads, nodes, geom, *x, *w, *b, &g);
                }
                Op::GatedResidual { x, wg, bg, wf, bf, geom, gate, filt } => {
                    let mut dg = vec![F::zero(); g.len()];
                    let mut df = vec![F::zero(); g.len()];
                    for ((&gj, (&s, &th)), (a, b)) in g.iter().zip(gate.iter().zip(filt)).zip(dg.iter_mut().zip(df.iter_mut())) {
                        *a = gj * th * s * (F::one() - s);
                        *b = gj * s * (F::one() - th * th);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        s.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                    }
                    conv_backward(&mut grads, nodes, geom, *x, *wg, *bg, &dg);
                    conv_backward(&mut grads, nodes, geom, *x, *wf, *bf, &df);
                }
                Op::AvgPoolTime(a) => {
                    let t = nodes[a.0].value.dim(2);
                    let inv = F::one() / F::of(t as f64);
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for (row, &gv) in s.chunks_exact_mut(t).zip(&g) {
                            row.iter_mut().for_each(|d| *d += gv * inv);
                        }
                    }
                }
                Op::Dense { x, w, b } => {
                    let (rows, inner) = (nodes[x.0].value.dim(0), nodes[x.0].value.dim(1));
                    let units = nodes[w.0].value.dim(1);
                    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        // dx = g · Wᵀ
                        matmul_acc(rows, units, inner, &g, View::new(0, units, 1), wv, View::new(0, 1, units), s, View::new(0, inner, 1));
                    }
                    if let Some(s) = slot(&mut grads, nodes, *w) {
                        // dW = xᵀ · g
                        matmul_acc(inner, rows, units, xv, View::new(0, 1, inner), &g, View::new(0, units, 1), s, View::new(0, units, 1));
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for row in g.chunks_exact(units) {
                            s.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let xs = nodes[x.0].value.shape();
                    let (batch, ch) = (xs[0], xs[1]);
                    let inner = if xs.len() == 3 { xs[2] } else { 1 };
                    let gam = nodes[gamma.0].value.data();
                    let chan = |i: usize| (i / inner) % ch;
                    let mut sum_g = vec![F::zero(); ch];
                    let mut sum_gx = vec![F::zero(); ch];
                    for (j, &gv) in g.iter().enumerate() {
                        let c = chan(j);
                        sum_g[c] += gv;
                        sum_gx[c] += gv * xhat[j];
                    }
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        if *train {
                            let n = F::of((batch * inner) as f64);
                            for j in 0..g.len() {
                                let c = chan(j);
                                s[j] += gam[c] * inv_std[c] / n * (n * g[j] - sum_g[c] - xhat[j] * sum_gx[c]);
                            }
                        } else {
                            for j in 0..g.len() {
                                let c = chan(j);
                                s[j] += g[j] * gam[c] * inv_std[c];
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *gamma) {
                        s.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *beta) {
                        s.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for j in 0..g.len() {
                            s[j] += g[j] * mask[j];
                        }
                    }
                }
                Op::SliceTime { x, start } => {
                    let t = nodes[x.0].value.dim(2);
                    let len = node.value.dim(2);
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for (row, grow) in s.chunks_exact_mut(t).zip(g.chunks_exact(len)) {
                            row[*start..start + len].iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let classes = nodes[logits.0].value.dim(1);
                    let scale = g[0] / F::of(labels.len() as f64);
                    if let Some(s) = slot(&mut grads, nodes, *logits) {
                        for (r, &label) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let onehot = if c == label { F::one() } else { F::zero() };
                                s[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                            }
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
                    let scale = g[0] * F::of(2.0 / p.len() as f64);
                    if let Some(s) = slot(&mut grads, nodes, *pred) {
                        for j in 0..p.len() {
                            s[j] += scale * (p[j] - t[j]);
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *target) {
                        for j in 0..p.len() {
                            s[j] -= scale * (p[j] - t[j]);
                        }
                    }
                }
                Op::SmoothL1 { pred, target } => {
                    let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
                    let scale = g[0] / F::of(p.len() as f64);
                    let slope = |d: F| if d.abs() < F::one() { d } else { d.signum() };
                    if let Some(s) = slot(&mut grads, nodes, *pred) {
                        for j in 0..p.len() {
                            s[j] += scale * slope(p[j] - t[j]);
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *target) {
                        for j in 0..p.len() {
                            s[j] -= scale * slope(p[j] - t[j]);
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if let Some(s) = slot(&mut grads, nodes, v) {
                            s[0] += g[0] * w;
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn conv_backward<F: Scalar>(
    grads: &mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    geom: &ConvGeom,
    x: Var,
    w: Var,
    b: Var,
    g: &[F],
) {
    let need = |v: Var| nodes[v.0].requires_grad;
    let alloc = |grads: &mut [Option<Vec<F>>], v: Var| {
        grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]);
    };
    if need(x) {
        alloc(grads, x);
        geom.backward_input(nodes[w.0].value.data(), g, grads[x.0].as_mut().unwrap());
    }
    if need(w) {
        alloc(grads, w);
        geom.backward_weight(nodes[x.0].value.data(), g, grads[w.0].as_mut().unwrap());
    }
    if need(b) {
        alloc(grads, b);
        geom.backward_bias(g, grads[b.0].as_mut().unwrap());
    }
}

/// Per-element smooth-L1: `d²/2` below unit magnitude, `|d| - 1/2` above.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}
