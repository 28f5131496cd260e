//! Tape-based reverse-mode autodiff over dense f32 tensors.
//!
//! A [`Tape`] owns every tensor created through it; a [`Tensor`] is a copyable
//! handle into that tape. Each op computes its value eagerly and, when any
//! input is grad-enabled, records a step so [`Tape::backward`] can replay the
//! tape in reverse and accumulate gradients. Ops run on one thread and keep a
//! fixed accumulation order, so identical inputs give bit-identical values and
//! gradients.
//!
//! Op math sticks to what the model needs: 2-D matmul, same-shape add and
//! multiply, concat along the last axis, mean along one axis, affine `x*W + b`,
//! layer-norm and softmax over the last axis, sigmoid, relu, 2-D transpose,
//! scaling by a constant, and a mean-reduced binary cross-entropy. There is no
//! general broadcasting.

use crate::error::{Error, Result};
use crate::nn::Param;

/// Epsilon inside layer-norm's `1/sqrt(var + eps)`.
///
/// Small enough that a normalized row keeps variance 1 to well under 1e-5
/// even for short rows with small variance.
pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f32 = 1e-7;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Vec<f32>,
    grad_enabled: bool,
}

/// One recorded op. Fields are node indices plus whatever forward state the
/// backward rule needs.
enum Step {
    Matmul { a: usize, b: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    ConcatLast { inputs: Vec<usize>, out: usize },
    MeanAxis { x: usize, axis: usize, out: usize },
    Linear { x: usize, w: usize, b: usize, out: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, out: usize, mean: Vec<f32>, inv_std: Vec<f32> },
    SoftmaxLast { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Relu { x: usize, out: usize },
    Transpose { x: usize, out: usize },
    Scale { x: usize, c: f32, out: usize },
    BceMean { pred: usize, target: usize, out: usize },
}

/// Records values and ops for one forward pass plus at most one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    steps: Vec<Step>,
    params: Vec<(String, Tensor)>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), steps: Vec::new(), params: Vec::new(), backward_done: false }
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Vec<f32>, grad_enabled: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, grad: Vec::new(), grad_enabled });
        Tensor(self.nodes.len() - 1)
    }

    /// New tensor that gradients do not flow into.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        self.tensor(shape, data, false)
    }

    /// New tensor, grad-enabled on request.
    pub fn tensor(&mut self, shape: &[usize], data: Vec<f32>, grad_enabled: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} wants {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(self.push_node(shape.to_vec(), data, grad_enabled))
    }

    /// Binds a named parameter as a grad-enabled leaf. Each parameter may be
    /// bound once per tape; the name is how its gradient is read back.
    pub fn param(&mut self, p: &Param) -> Result<Tensor> {
        if self.params.iter().any(|(n, _)| n == &p.name) {
            return Err(Error::Autodiff(format!("parameter {} bound twice", p.name)));
        }
        let t = self.tensor(&p.shape, p.data.clone(), true)?;
        self.params.push((p.name.clone(), t));
        Ok(t)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f32] {
        &self.nodes[t.0].value
    }

    pub fn grad_enabled(&self, t: Tensor) -> bool {
        self.nodes[t.0].grad_enabled
    }

    /// Gradient of the backward root with respect to `t`.
    pub fn grad(&self, t: Tensor) -> Result<&[f32]> {
        if !self.backward_done {
            return Err(Error::Autodiff("grad read before backward".into()));
        }
        if !self.nodes[t.0].grad_enabled {
            return Err(Error::Autodiff("grad of a tensor that is not grad-enabled".into()));
        }
        Ok(&self.nodes[t.0].grad)
    }

    /// Gradients of every bound parameter, keyed by parameter name.
    pub fn param_grads(&self) -> Result<std::collections::BTreeMap<String, Vec<f32>>> {
        let mut out = std::collections::BTreeMap::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), self.grad(*t)?.to_vec());
        }
        Ok(out)
    }

    fn any_grad(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].grad_enabled)
    }

    fn record(&mut self, step: Step) {
        self.steps.push(step);
    }

    // ---- ops ----

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            matmul_acc(av, bv, &mut out, m, k, n, false, false);
        }
        let grad = self.any_grad(&[a, b]);
        let t = self.push_node(vec![m, n], out, grad);
        if grad {
            self.record(Step::Matmul { a: a.0, b: b.0, out: t.0 });
        }
        Ok(t)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("add", format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        let v: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let grad = self.any_grad(&[a, b]);
        let t = self.push_node(sa, v, grad);
        if grad {
            self.record(Step::Add { a: a.0, b: b.0, out: t.0 });
        }
        Ok(t)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("mul", format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        let v: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let grad = self.any_grad(&[a, b]);
        let t = self.push_node(sa, v, grad);
        if grad {
            self.record(Step::Mul { a: a.0, b: b.0, out: t.0 });
        }
        Ok(t)
    }

    /// Concatenation along the last axis. All inputs must share rank and
    /// leading dimensions.
    pub fn concat_last(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(shape_err("concat_last", "no inputs".into()));
        }
        let lead = self.shape(inputs[0])[..self.shape(inputs[0]).len() - 1].to_vec();
        let mut last = 0;
        for &t in inputs {
            let s = self.shape(t);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(shape_err(
                    "concat_last",
                    format!("input {s:?} does not match leading dims {lead:?}"),
                ));
            }
            last += s[s.len() - 1];
        }
        let rows = numel(&lead);
        let mut v = vec![0.0f32; rows * last];
        let mut col0 = 0;
        for &t in inputs {
            let s = self.shape(t);
            let w = s[s.len() - 1];
            let src = self.value(t);
            for r in 0..rows {
                let dst = r * last + col0;
                v[dst..dst + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        let mut shape = lead;
        shape.push(last);
        let grad = self.any_grad(inputs);
        let t = self.push_node(shape, v, grad);
        if grad {
            self.record(Step::ConcatLast { inputs: inputs.iter().map(|t| t.0).collect(), out: t.0 });
        }
        Ok(t)
    }

    /// Mean along `axis`; the axis is dropped from the output shape.
    pub fn mean_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} out of range for {s:?}")));
        }
        if s[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {s:?} is empty")));
        }
        let outer: usize = s[..axis].iter().product();
        let alen = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut v = vec![0.0f32; outer * inner];
        {
            let xv = self.value(x);
            for o in 0..outer {
                for a in 0..alen {
                    let base = (o * alen + a) * inner;
                    for i in 0..inner {
                        v[o * inner + i] += xv[base + i];
                    }
                }
            }
        }
        let scale = 1.0 / alen as f32;
        for e in v.iter_mut() {
            *e *= scale;
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let grad = self.any_grad(&[x]);
        let t = self.push_node(shape, v, grad);
        if grad {
            self.record(Step::MeanAxis { x: x.0, axis, out: t.0 });
        }
        Ok(t)
    }

    /// Affine map `x*W + b` with `x: [t,i]`, `w: [i,o]`, `b: [o]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(shape_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (t_, i_, o_) = (sx[0], sx[1], sw[1]);
        let mut v = vec![0.0f32; t_ * o_];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            for r in 0..t_ {
                v[r * o_..(r + 1) * o_].copy_from_slice(bv);
            }
            matmul_acc(xv, wv, &mut v, t_, i_, o_, false, false);
        }
        let grad = self.any_grad(&[x, w, b]);
        let t = self.push_node(vec![t_, o_], v, grad);
        if grad {
            self.record(Step::Linear { x: x.0, w: w.0, b: b.0, out: t.0 });
        }
        Ok(t)
    }

    /// Layer normalization over the last axis with learnable `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| shape_err("layer_norm", "rank 0 input".into()))?;
        if n == 0 {
            return Err(shape_err("layer_norm", format!("empty last axis in {s:?}")));
        }
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{n}] for input {s:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = numel(&s) / n;
        let mut v = vec![0.0f32; rows * n];
        let mut means = vec![0.0f32; rows];
        let mut inv_stds = vec![0.0f32; rows];
        {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f32>() / n as f32;
                let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f32>() / n as f32;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                means[r] = mean;
                inv_stds[r] = inv_std;
                for c in 0..n {
                    v[r * n + c] = (row[c] - mean) * inv_std * gv[c] + bv[c];
                }
            }
        }
        let grad = self.any_grad(&[x, gamma, beta]);
        let t = self.push_node(s, v, grad);
        if grad {
            self.record(Step::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                out: t.0,
                mean: means,
                inv_std: inv_stds,
            });
        }
        Ok(t)
    }

    /// Softmax over the last axis, with max subtraction for stability.
    pub fn softmax_last(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| shape_err("softmax_last", "rank 0 input".into()))?;
        if n == 0 {
            return Err(shape_err("softmax_last", format!("empty last axis in {s:?}")));
        }
        let rows = numel(&s) / n;
        let mut v = vec![0.0f32; rows * n];
        {
            let xv = self.value(x);
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for c in 0..n {
                    let e = (row[c] - max).exp();
                    v[r * n + c] = e;
                    sum += e;
                }
                for c in 0..n {
                    v[r * n + c] /= sum;
                }
            }
        }
        let grad = self.any_grad(&[x]);
        let t = self.push_node(s, v, grad);
        if grad {
            self.record(Step::SoftmaxLast { x: x.0, out: t.0 });
        }
        Ok(t)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let v: Vec<f32> = self.value(x).iter().map(|&e| stable_sigmoid(e)).collect();
        let grad = self.any_grad(&[x]);
        let t = self.push_node(s, v, grad);
        if grad {
            self.record(Step::Sigmoid { x: x.0, out: t.0 });
        }
        Ok(t)
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let v: Vec<f32> = self.value(x).iter().map(|&e| e.max(0.0)).collect();
        let grad = self.any_grad(&[x]);
        let t = self.push_node(s, v, grad);
        if grad {
            self.record(Step::Relu { x: x.0, out: t.0 });
        }
        Ok(t)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("want rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let mut v = vec![0.0f32; m * n];
        {
            let xv = self.value(x);
            for r in 0..m {
                for c in 0..n {
                    v[c * m + r] = xv[r * n + c];
                }
            }
        }
        let grad = self.any_grad(&[x]);
        let t = self.push_node(vec![n, m], v, grad);
        if grad {
            self.record(Step::Transpose { x: x.0, out: t.0 });
        }
        Ok(t)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: Tensor, c: f32) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let v: Vec<f32> = self.value(x).iter().map(|&e| e * c).collect();
        let grad = self.any_grad(&[x]);
        let t = self.push_node(s, v, grad);
        if grad {
            self.record(Step::Scale { x: x.0, c, out: t.0 });
        }
        Ok(t)
    }

    /// Multi-label binary cross-entropy, mean over all elements.
    ///
    /// `target` values must be exactly 0 or 1; predictions are clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]` before the log, and no gradient flows where
    /// the clamp is active.
    pub fn bce_mean(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if sp != st {
            return Err(shape_err("bce_mean", format!("pred {sp:?} vs target {st:?}")));
        }
        if numel(&sp) == 0 {
            return Err(shape_err("bce_mean", "empty input".into()));
        }
        for &y in self.value(target) {
            if y != 0.0 && y != 1.0 {
                return Err(shape_err("bce_mean", format!("target value {y} outside {{0,1}}")));
            }
        }
        let n = numel(&sp) as f32;
        let mut acc = 0.0f32;
        {
            let (pv, tv) = (self.value(pred), self.value(target));
            for (&p, &y) in pv.iter().zip(tv) {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                acc += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
        }
        let grad = self.any_grad(&[pred]);
        let t = self.push_node(vec![], vec![acc / n], grad);
        if grad {
            self.record(Step::BceMean { pred: pred.0, target: target.0, out: t.0 });
        }
        Ok(t)
    }

    // ---- backward ----

    /// Replays the tape in reverse from the scalar `root`, accumulating
    /// gradients into every grad-enabled tensor. Allowed once per tape.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward called twice on one tape".into()));
        }
        if !self.nodes[root.0].shape.is_empty() {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        if !self.nodes[root.0].grad_enabled {
            return Err(Error::Autodiff("backward root is not grad-enabled".into()));
        }
        for node in self.nodes.iter_mut() {
            if node.grad_enabled {
                node.grad = vec![0.0f32; node.value.len()];
            }
        }
        self.nodes[root.0].grad[0] = 1.0;
        for si in (0..self.steps.len()).rev() {
            self.step_backward(si);
        }
        self.backward_done = true;
        Ok(())
    }

    fn step_backward(&mut self, si: usize) {
        // Steps only exist when the output is grad-enabled, so out.grad is
        // allocated. Inputs that are not grad-enabled are skipped.
        let step = &self.steps[si];
        match *step {
            Step::Matmul { a, b, out } => {
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let g = std::mem::take(&mut self.nodes[out].grad);
                if self.nodes[a].grad_enabled {
                    let bv = std::mem::take(&mut self.nodes[b].value);
                    let ga = &mut self.nodes[a].grad;
                    // dA = G * B^T
                    matmul_acc(&g, &bv, ga, m, n, k, false, true);
                    self.nodes[b].value = bv;
                }
                if self.nodes[b].grad_enabled {
                    let av = std::mem::take(&mut self.nodes[a].value);
                    let gb = &mut self.nodes[b].grad;
                    // dB = A^T * G
                    matmul_acc(&av, &g, gb, k, m, n, true, false);
                    self.nodes[a].value = av;
                }
                self.nodes[out].grad = g;
            }
            Step::Add { a, b, out } => {
                let g = std::mem::take(&mut self.nodes[out].grad);
                if self.nodes[a].grad_enabled {
                    for (d, &s) in self.nodes[a].grad.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                if self.nodes[b].grad_enabled {
                    for (d, &s) in self.nodes[b].grad.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                self.nodes[out].grad = g;
            }
            Step::Mul { a, b, out } => {
                let g = std::mem::take(&mut self.nodes[out].grad);
                if self.nodes[a].grad_enabled {
                    let bv = std::mem::take(&mut self.nodes[b].value);
                    for i in 0..g.len() {
                        self.nodes[a].grad[i] += g[i] * bv[i];
                    }
                    self.nodes[b].value = bv;
                }
                if self.nodes[b].grad_enabled {
                    let av = std::mem::take(&mut self.nodes[a].value);
                    for i in 0..g.len() {
                        self.nodes[b].grad[i] += g[i] * av[i];
                    }
                    self.nodes[a].value = av;
                }
                self.nodes[out].grad = g;
            }
            Step::ConcatLast { ref inputs, out } => {
                let inputs = inputs.clone();
                let g = std::mem::take(&mut self.nodes[out].grad);
                let out_last = *self.nodes[out].shape.last().unwrap();
                let rows = g.len() / out_last;
                let mut col0 = 0;
                for t in inputs {
                    let w = *self.nodes[t].shape.last().unwrap();
                    if self.nodes[t].grad_enabled {
                        for r in 0..rows {
                            let src = r * out_last + col0;
                            for c in 0..w {
                                self.nodes[t].grad[r * w + c] += g[src + c];
                            }
                        }
                    }
                    col0 += w;
                }
                self.nodes[out].grad = g;
            }
            Step::MeanAxis { x, axis, out } => {
                if self.nodes[x].grad_enabled {
                    let s = self.nodes[x].shape.clone();
                    let outer: usize = s[..axis].iter().product();
                    let alen = s[axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let g = std::mem::take(&mut self.nodes[out].grad);
                    let scale = 1.0 / alen as f32;
                    for o in 0..outer {
                        for a in 0..alen {
                            let base = (o * alen + a) * inner;
                            for i in 0..inner {
                                self.nodes[x].grad[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                    self.nodes[out].grad = g;
                }
            }
            Step::Linear { x, w, b, out } => {
                let (sx, sw) = (self.nodes[x].shape.clone(), self.nodes[w].shape.clone());
                let (t_, i_, o_) = (sx[0], sx[1], sw[1]);
                let g = std::mem::take(&mut self.nodes[out].grad);
                if self.nodes[x].grad_enabled {
                    let wv = std::mem::take(&mut self.nodes[w].value);
                    matmul_acc(&g, &wv, &mut self.nodes[x].grad, t_, o_, i_, false, true);
                    self.nodes[w].value = wv;
                }
                if self.nodes[w].grad_enabled {
                    let xv = std::mem::take(&mut self.nodes[x].value);
                    matmul_acc(&xv, &g, &mut self.nodes[w].grad, i_, t_, o_, true, false);
                    self.nodes[x].value = xv;
                }
                if self.nodes[b].grad_enabled {
                    for r in 0..t_ {
                        for c in 0..o_ {
                            self.nodes[b].grad[c] += g[r * o_ + c];
                        }
                    }
                }
                self.nodes[out].grad = g;
            }
            Step::LayerNorm { x, gamma, beta, out, ref mean, ref inv_std } => {
                let n = *self.nodes[x].shape.last().unwrap();
                let rows = self.nodes[x].value.len() / n;
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let g = std::mem::take(&mut self.nodes[out].grad);
                let xv = std::mem::take(&mut self.nodes[x].value);
                let gv = std::mem::take(&mut self.nodes[gamma].value);
                for r in 0..rows {
                    let (m, is) = (mean[r], inv_std[r]);
                    let row = &xv[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    if self.nodes[gamma].grad_enabled || self.nodes[beta].grad_enabled {
                        for c in 0..n {
                            let xhat = (row[c] - m) * is;
                            if self.nodes[gamma].grad_enabled {
                                self.nodes[gamma].grad[c] += grow[c] * xhat;
                            }
                            if self.nodes[beta].grad_enabled {
                                self.nodes[beta].grad[c] += grow[c];
                            }
                        }
                    }
                    if self.nodes[x].grad_enabled {
                        // dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                        let mut sum_d = 0.0f32;
                        let mut sum_dx = 0.0f32;
                        for c in 0..n {
                            let xhat = (row[c] - m) * is;
                            let dxhat = grow[c] * gv[c];
                            sum_d += dxhat;
                            sum_dx += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f32;
                        for c in 0..n {
                            let xhat = (row[c] - m) * is;
                            let dxhat = grow[c] * gv[c];
                            self.nodes[x].grad[r * n + c] +=
                                is * (dxhat - sum_d * inv_n - xhat * sum_dx * inv_n);
                        }
                    }
                }
                self.nodes[gamma].value = gv;
                self.nodes[x].value = xv;
                self.nodes[out].grad = g;
            }
            Step::SoftmaxLast { x, out } => {
                if self.nodes[x].grad_enabled {
                    let n = *self.nodes[out].shape.last().unwrap();
                    let g = std::mem::take(&mut self.nodes[out].grad);
                    let sv = std::mem::take(&mut self.nodes[out].value);
                    let rows = sv.len() / n;
                    for r in 0..rows {
                        let srow = &sv[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f32 = srow.iter().zip(grow).map(|(&s, &gg)| s * gg).sum();
                        for c in 0..n {
                            self.nodes[x].grad[r * n + c] += srow[c] * (grow[c] - dot);
                        }
                    }
                    self.nodes[out].value = sv;
                    self.nodes[out].grad = g;
                }
            }
            Step::Sigmoid { x, out } => {
                if self.nodes[x].grad_enabled {
                    let g = std::mem::take(&mut self.nodes[out].grad);
                    let sv = std::mem::take(&mut self.nodes[out].value);
                    for i in 0..g.len() {
                        self.nodes[x].grad[i] += g[i] * sv[i] * (1.0 - sv[i]);
                    }
                    self.nodes[out].value = sv;
                    self.nodes[out].grad = g;
                }
            }
            Step::Relu { x, out } => {
                if self.nodes[x].grad_enabled {
                    let g = std::mem::take(&mut self.nodes[out].grad);
                    let xv = std::mem::take(&mut self.nodes[x].value);
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            self.nodes[x].grad[i] += g[i];
                        }
                    }
                    self.nodes[x].value = xv;
                    self.nodes[out].grad = g;
                }
            }
            Step::Transpose { x, out } => {
                if self.nodes[x].grad_enabled {
                    let s = self.nodes[out].shape.clone();
                    let (m, n) = (s[0], s[1]);
                    let g = std::mem::take(&mut self.nodes[out].grad);
                    for r in 0..m {
                        for c in 0..n {
                            self.nodes[x].grad[c * m + r] += g[r * n + c];
                        }
                    }
                    self.nodes[out].grad = g;
                }
            }
            Step::Scale { x, c, out } => {
                if self.nodes[x].grad_enabled {
                    let g = std::mem::take(&mut self.nodes[out].grad);
                    for (gx, gi) in self.nodes[x].grad.iter_mut().zip(&g) {
                        *gx += gi * c;
                    }
                    self.nodes[out].grad = g;
                }
            }
            Step::BceMean { pred, target, out } => {
                if self.nodes[pred].grad_enabled {
                    let g0 = self.nodes[out].grad[0];
                    let tv = std::mem::take(&mut self.nodes[target].value);
                    let pv = std::mem::take(&mut self.nodes[pred].value);
                    let inv_n = 1.0 / pv.len() as f32;
                    let grads = self.nodes[pred].grad.iter_mut().zip(pv.iter().zip(&tv));
                    for (slot, (&p, &y)) in grads {
                        // No gradient where the clamp is active.
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            continue;
                        }
                        *slot += g0 * inv_n * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                    self.nodes[pred].value = pv;
                    self.nodes[target].value = tv;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `out += A*B` with optional transposes, all matrices row-major.
/// `m, k, n` describe the logical (post-transpose) product.
#[allow(clippy::too_many_arguments)]
fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    for i in 0..m {
        for l in 0..k {
            let av = if ta { a[l * m + i] } else { a[i * k + l] };
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            if tb {
                for j in 0..n {
                    orow[j] += av * b[j * k + l];
                }
            } else {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
