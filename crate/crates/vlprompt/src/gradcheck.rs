//! Finite-difference verification of every gradient the tape produces.
//!
//! Each check builds the function under test twice: once on the 32-bit tape,
//! whose backward pass supplies the analytic gradients, and once as a plain
//! 64-bit evaluation that only the central-difference oracle calls. The two
//! implementations share no code, so agreement is evidence that the backward
//! rules are right, not merely that they are consistent with themselves.
//!
//! Scalar-valued checks (the loss) are differentiated directly; ops with
//! tensor outputs are reduced to a scalar through a weighted mean against a
//! fixed random matrix, which makes the scalar sensitive to every output
//! element.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{DecoderBlock, Module, MultiheadAttention};
use crate::prompter::{ModelDims, ModelWeights, PrompterWeights};
use crate::tensor::{Tape, Tensor, BCE_EPS, LAYER_NORM_EPS};
use crate::vision::{vision_forward, VisionInputs};

/// Central-difference step, applied to the 64-bit oracle.
pub const FD_STEP: f64 = 1e-4;
/// A check passes when every element's error stays under this bound.
pub const REL_ERR_LIMIT: f64 = 1e-4;

/// Outcome of one named gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    /// How many scalar quantities were perturbed.
    pub elements: usize,
    pub max_rel_err: f64,
    /// Which quantity produced the worst error, e.g. `blk.ff1.w[3]`.
    pub worst: String,
    pub passed: bool,
}

/// Every check in the suite, in run order.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }
}

/// Error between an analytic and a finite-difference derivative, measured
/// relative to the larger of the two magnitudes, floored at one. The floor
/// makes the measure an absolute error for small gradients, where the
/// 32-bit forward pass cannot resolve differences a pure ratio would
/// amplify.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

// ---- the perturbation harness ----

struct Entry {
    name: String,
    offset: usize,
    len: usize,
}

/// Named views into one flat vector of 64-bit values.
struct Lookup<'a> {
    entries: &'a [Entry],
    data: &'a [f64],
}

impl Lookup<'_> {
    fn get(&self, name: &str) -> &[f64] {
        for e in self.entries {
            if e.name == name {
                return &self.data[e.offset..e.offset + e.len];
            }
        }
        panic!("gradient check referenced unknown quantity {name:?}");
    }

    fn mat(&self, name: &str, rows: usize, cols: usize) -> M {
        M::from(self.get(name), rows, cols)
    }
}

/// One check under construction: the differentiated quantities, their
/// current values, and the analytic gradients the tape produced for them.
struct Check {
    entries: Vec<Entry>,
    flat: Vec<f64>,
    analytic: Vec<f64>,
}

impl Check {
    fn new() -> Self {
        Check { entries: Vec::new(), flat: Vec::new(), analytic: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, values: &[f32], grads: &[f32]) {
        assert_eq!(values.len(), grads.len(), "value/grad length mismatch");
        let offset = self.flat.len();
        self.flat.extend(values.iter().map(|&v| v as f64));
        self.analytic.extend(grads.iter().map(|&g| g as f64));
        self.entries.push(Entry { name: name.into(), offset, len: values.len() });
    }

    /// Pushes every parameter of `module` with its gradient from the tape.
    fn push_module(&mut self, module: &impl Module, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let mut missing = None;
        module.visit(&mut |p| {
            if missing.is_some() {
                return;
            }
            match grads.get(&p.name) {
                Some(g) => self.push(p.name.clone(), &p.data, g),
                None => missing = Some(p.name.clone()),
            }
        });
        match missing {
            Some(name) => Err(Error::Verification(format!("no gradient recorded for {name}"))),
            None => Ok(()),
        }
    }

    /// Perturbs every element both ways, evaluates the 64-bit oracle, and
    /// compares the central difference with the analytic gradient.
    fn run(mut self, label: &str, eval: impl Fn(&Lookup<'_>) -> f64) -> CheckResult {
        let mut max_rel = 0.0f64;
        let mut worst = String::new();
        for ei in 0..self.entries.len() {
            for i in 0..self.entries[ei].len {
                let idx = self.entries[ei].offset + i;
                let orig = self.flat[idx];
                self.flat[idx] = orig + FD_STEP;
                let up = eval(&Lookup { entries: &self.entries, data: &self.flat });
                self.flat[idx] = orig - FD_STEP;
                let down = eval(&Lookup { entries: &self.entries, data: &self.flat });
                self.flat[idx] = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                let err = rel_err(self.analytic[idx], fd);
                if err > max_rel {
                    max_rel = err;
                    worst = format!("{}[{i}]", self.entries[ei].name);
                }
            }
        }
        CheckResult {
            name: label.to_string(),
            elements: self.flat.len(),
            max_rel_err: max_rel,
            worst,
            passed: max_rel < REL_ERR_LIMIT,
        }
    }
}

// ---- 64-bit reference pieces ----

/// A dense row-major 64-bit matrix for the reference forward passes.
#[derive(Clone)]
struct M {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl M {
    fn from(v: &[f64], r: usize, c: usize) -> M {
        assert_eq!(v.len(), r * c, "matrix data does not fill {r}x{c}");
        M { r, c, v: v.to_vec() }
    }
}

fn m_matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut v = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for k in 0..a.c {
            let aik = a.v[i * a.c + k];
            for j in 0..b.c {
                v[i * b.c + j] += aik * b.v[k * b.c + j];
            }
        }
    }
    M { r: a.r, c: b.c, v }
}

fn m_add(a: &M, b: &M) -> M {
    assert_eq!((a.r, a.c), (b.r, b.c));
    M { r: a.r, c: a.c, v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect() }
}

fn m_mul(a: &M, b: &M) -> M {
    assert_eq!((a.r, a.c), (b.r, b.c));
    M { r: a.r, c: a.c, v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect() }
}

fn m_scale(a: &M, c: f64) -> M {
    M { r: a.r, c: a.c, v: a.v.iter().map(|x| x * c).collect() }
}

fn m_transpose(a: &M) -> M {
    let mut v = vec![0.0; a.v.len()];
    for i in 0..a.r {
        for j in 0..a.c {
            v[j * a.r + i] = a.v[i * a.c + j];
        }
    }
    M { r: a.c, c: a.r, v }
}

fn m_concat_cols(parts: &[&M]) -> M {
    let rows = parts[0].r;
    let cols: usize = parts.iter().map(|p| p.c).sum();
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            assert_eq!(p.r, rows);
            v.extend_from_slice(&p.v[r * p.c..(r + 1) * p.c]);
        }
    }
    M { r: rows, c: cols, v }
}

fn m_linear(x: &M, w: &M, b: &[f64]) -> M {
    assert_eq!(w.c, b.len());
    let mut out = m_matmul(x, w);
    for r in 0..out.r {
        for c in 0..out.c {
            out.v[r * out.c + c] += b[c];
        }
    }
    out
}

fn m_layer_norm(x: &M, gamma: &[f64], beta: &[f64]) -> M {
    let n = x.c;
    let eps = LAYER_NORM_EPS as f64;
    let mut v = vec![0.0; x.v.len()];
    for r in 0..x.r {
        let row = &x.v[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..n {
            v[r * n + c] = (row[c] - mean) * inv_std * gamma[c] + beta[c];
        }
    }
    M { r: x.r, c: x.c, v }
}

fn m_softmax_rows(x: &M) -> M {
    let n = x.c;
    let mut v = vec![0.0; x.v.len()];
    for r in 0..x.r {
        let row = &x.v[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..n {
            let e = (row[c] - max).exp();
            v[r * n + c] = e;
            sum += e;
        }
        for c in 0..n {
            v[r * n + c] /= sum;
        }
    }
    M { r: x.r, c: x.c, v }
}

fn m_sigmoid(x: &M) -> M {
    M { r: x.r, c: x.c, v: x.v.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect() }
}

fn m_relu(x: &M) -> M {
    M { r: x.r, c: x.c, v: x.v.iter().map(|&e| e.max(0.0)).collect() }
}

fn m_weighted_mean(x: &M, w: &M) -> f64 {
    assert_eq!((x.r, x.c), (w.r, w.c));
    x.v.iter().zip(&w.v).map(|(a, b)| a * b).sum::<f64>() / x.v.len() as f64
}

fn m_bce_mean(pred: &M, target: &M) -> f64 {
    assert_eq!((pred.r, pred.c), (target.r, target.c));
    let eps = BCE_EPS as f64;
    let mut acc = 0.0;
    for (&p, &y) in pred.v.iter().zip(&target.v) {
        let p = p.clamp(eps, 1.0 - eps);
        acc += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    acc / pred.v.len() as f64
}

/// Multi-head cross-attention, reading its projections from `lk` under
/// `prefix`: per head a scaled dot-product attention, heads concatenated,
/// then the output projection.
fn m_mha(lk: &Lookup<'_>, prefix: &str, heads: usize, query: &M, memory: &M) -> M {
    let dim = query.c;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = m_linear(query, &lk.mat(&format!("{prefix}.h{h}.q.w"), dim, hd), lk.get(&format!("{prefix}.h{h}.q.b")));
        let k = m_linear(memory, &lk.mat(&format!("{prefix}.h{h}.k.w"), dim, hd), lk.get(&format!("{prefix}.h{h}.k.b")));
        let v = m_linear(memory, &lk.mat(&format!("{prefix}.h{h}.v.w"), dim, hd), lk.get(&format!("{prefix}.h{h}.v.b")));
        let scores = m_scale(&m_matmul(&q, &m_transpose(&k)), scale);
        let attn = m_softmax_rows(&scores);
        outs.push(m_matmul(&attn, &v));
    }
    let refs: Vec<&M> = outs.iter().collect();
    let cat = m_concat_cols(&refs);
    m_linear(&cat, &lk.mat(&format!("{prefix}.out.w"), dim, dim), lk.get(&format!("{prefix}.out.b")))
}

/// Decoder block: self-attention, cross-attention, feed-forward, each
/// followed by a residual add and layer-norm.
fn m_block(lk: &Lookup<'_>, prefix: &str, heads: usize, x: &M, memory: &M) -> M {
    let dim = x.c;
    let sa = m_mha(lk, &format!("{prefix}.sa"), heads, x, x);
    let x1 = m_layer_norm(&m_add(x, &sa), lk.get(&format!("{prefix}.ln1.g")), lk.get(&format!("{prefix}.ln1.b")));
    let ca = m_mha(lk, &format!("{prefix}.ca"), heads, &x1, memory);
    let x2 = m_layer_norm(&m_add(&x1, &ca), lk.get(&format!("{prefix}.ln2.g")), lk.get(&format!("{prefix}.ln2.b")));
    let h = m_relu(&m_linear(&x2, &lk.mat(&format!("{prefix}.ff1.w"), dim, 4 * dim), lk.get(&format!("{prefix}.ff1.b"))));
    let ff = m_linear(&h, &lk.mat(&format!("{prefix}.ff2.w"), 4 * dim, dim), lk.get(&format!("{prefix}.ff2.b")));
    m_layer_norm(&m_add(&x2, &ff), lk.get(&format!("{prefix}.ln3.g")), lk.get(&format!("{prefix}.ln3.b")))
}

/// Decoder stack: `depth` blocks over the same memory, then the head.
fn m_stack(lk: &Lookup<'_>, prefix: &str, heads: usize, depth: usize, head_out: usize, query: &M, memory: &M) -> M {
    let mut x = query.clone();
    for i in 0..depth {
        x = m_block(lk, &format!("{prefix}.b{i}"), heads, &x, memory);
    }
    let dim = x.c;
    m_linear(&x, &lk.mat(&format!("{prefix}.head.w"), dim, head_out), lk.get(&format!("{prefix}.head.b")))
}

/// The three-layer gate network under the `prompter.gate*` names.
fn m_gate(lk: &Lookup<'_>, dim: usize, k: usize, x: &M) -> M {
    let h = m_relu(&m_linear(x, &lk.mat("prompter.gate1.w", dim, dim), lk.get("prompter.gate1.b")));
    let h = m_relu(&m_linear(&h, &lk.mat("prompter.gate2.w", dim, dim), lk.get("prompter.gate2.b")));
    m_linear(&h, &lk.mat("prompter.gate3.w", dim, k), lk.get("prompter.gate3.b"))
}

// ---- random instances ----

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values kept away from zero so no finite-difference step crosses the
/// relu kink.
fn uniform_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0f32);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.random_range(0..2) == 0 { 0.0 } else { 1.0 }).collect()
}

/// Reduces `t` to its mean over all elements, weighted by `weights`.
fn tape_weighted_mean(tape: &mut Tape, t: Tensor, weights: Tensor) -> Result<Tensor> {
    let mut cur = tape.mul(t, weights)?;
    while !tape.shape(cur).is_empty() {
        cur = tape.mean_axis(cur, 0)?;
    }
    Ok(cur)
}

// ---- individual checks ----

fn check_matmul(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (3, 4, 2);
    let a_data = uniform(&mut rng, m * k, -1.0, 1.0);
    let b_data = uniform(&mut rng, k * n, -1.0, 1.0);
    let r_data = uniform(&mut rng, m * n, -1.0, 1.0);

    let mut tape = Tape::new();
    let a = tape.tensor(&[m, k], a_data.clone(), true)?;
    let b = tape.tensor(&[k, n], b_data.clone(), true)?;
    let r = tape.constant(&[m, n], r_data.clone())?;
    let out = tape.matmul(a, b)?;
    let loss = tape_weighted_mean(&mut tape, out, r)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("a", &a_data, tape.grad(a)?);
    check.push("b", &b_data, tape.grad(b)?);
    let rr: Vec<f64> = r_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("matmul", move |lk| {
        let out = m_matmul(&lk.mat("a", m, k), &lk.mat("b", k, n));
        m_weighted_mean(&out, &M::from(&rr, m, n))
    }))
}

fn check_add_mul(seed: u64, multiply: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r_, c_) = (3, 4);
    let a_data = uniform(&mut rng, r_ * c_, -1.0, 1.0);
    let b_data = uniform(&mut rng, r_ * c_, -1.0, 1.0);
    let w_data = uniform(&mut rng, r_ * c_, -1.0, 1.0);

    let mut tape = Tape::new();
    let a = tape.tensor(&[r_, c_], a_data.clone(), true)?;
    let b = tape.tensor(&[r_, c_], b_data.clone(), true)?;
    let w = tape.constant(&[r_, c_], w_data.clone())?;
    let out = if multiply { tape.mul(a, b)? } else { tape.add(a, b)? };
    let loss = tape_weighted_mean(&mut tape, out, w)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("a", &a_data, tape.grad(a)?);
    check.push("b", &b_data, tape.grad(b)?);
    let ww: Vec<f64> = w_data.iter().map(|&v| v as f64).collect();
    let label = if multiply { "elementwise multiply" } else { "add" };
    Ok(check.run(label, move |lk| {
        let (a, b) = (lk.mat("a", r_, c_), lk.mat("b", r_, c_));
        let out = if multiply { m_mul(&a, &b) } else { m_add(&a, &b) };
        m_weighted_mean(&out, &M::from(&ww, r_, c_))
    }))
}

fn check_concat(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 3;
    let widths = [2usize, 3, 1];
    let datas: Vec<Vec<f32>> = widths.iter().map(|&w| uniform(&mut rng, rows * w, -1.0, 1.0)).collect();
    let total: usize = widths.iter().sum();
    let w_data = uniform(&mut rng, rows * total, -1.0, 1.0);

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = widths
        .iter()
        .zip(&datas)
        .map(|(&w, d)| tape.tensor(&[rows, w], d.clone(), true))
        .collect::<Result<_>>()?;
    let w = tape.constant(&[rows, total], w_data.clone())?;
    let out = tape.concat_last(&leaves)?;
    let loss = tape_weighted_mean(&mut tape, out, w)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    for (i, (d, &t)) in datas.iter().zip(&leaves).enumerate() {
        check.push(format!("part{i}"), d, tape.grad(t)?);
    }
    let ww: Vec<f64> = w_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("concat along last axis", move |lk| {
        let parts: Vec<M> = widths.iter().enumerate().map(|(i, &w)| lk.mat(&format!("part{i}"), rows, w)).collect();
        let refs: Vec<&M> = parts.iter().collect();
        m_weighted_mean(&m_concat_cols(&refs), &M::from(&ww, rows, total))
    }))
}

fn check_mean_axis(seed: u64, axis: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2usize, 3, 4];
    let n: usize = shape.iter().product();
    let x_data = uniform(&mut rng, n, -1.0, 1.0);
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let out_n: usize = out_shape.iter().product();
    let w_data = uniform(&mut rng, out_n, -1.0, 1.0);

    let mut tape = Tape::new();
    let x = tape.tensor(&shape, x_data.clone(), true)?;
    let w = tape.constant(&out_shape, w_data.clone())?;
    let out = tape.mean_axis(x, axis)?;
    let loss = tape_weighted_mean(&mut tape, out, w)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("x", &x_data, tape.grad(x)?);
    let ww: Vec<f64> = w_data.iter().map(|&v| v as f64).collect();
    Ok(check.run(&format!("mean along axis {axis}"), move |lk| {
        let x = lk.get("x");
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..alen {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * alen + a) * inner + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= alen as f64;
        }
        out.iter().zip(&ww).map(|(a, b)| a * b).sum::<f64>() / out.len() as f64
    }))
}

fn check_linear(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, i, o) = (4, 3, 5);
    let x_data = uniform(&mut rng, t * i, -1.0, 1.0);
    let w_data = uniform(&mut rng, i * o, -1.0, 1.0);
    let b_data = uniform(&mut rng, o, -1.0, 1.0);
    let r_data = uniform(&mut rng, t * o, -1.0, 1.0);

    let mut tape = Tape::new();
    let x = tape.tensor(&[t, i], x_data.clone(), true)?;
    let w = tape.tensor(&[i, o], w_data.clone(), true)?;
    let b = tape.tensor(&[o], b_data.clone(), true)?;
    let r = tape.constant(&[t, o], r_data.clone())?;
    let out = tape.linear(x, w, b)?;
    let loss = tape_weighted_mean(&mut tape, out, r)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("x", &x_data, tape.grad(x)?);
    check.push("w", &w_data, tape.grad(w)?);
    check.push("b", &b_data, tape.grad(b)?);
    let rr: Vec<f64> = r_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("linear", move |lk| {
        let out = m_linear(&lk.mat("x", t, i), &lk.mat("w", i, o), lk.get("b"));
        m_weighted_mean(&out, &M::from(&rr, t, o))
    }))
}

fn check_layer_norm(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (3, 6);
    let x_data = uniform(&mut rng, t * d, -1.0, 1.0);
    let g_data = uniform(&mut rng, d, 0.5, 1.5);
    let b_data = uniform(&mut rng, d, -0.5, 0.5);
    let r_data = uniform(&mut rng, t * d, -1.0, 1.0);

    let mut tape = Tape::new();
    let x = tape.tensor(&[t, d], x_data.clone(), true)?;
    let g = tape.tensor(&[d], g_data.clone(), true)?;
    let b = tape.tensor(&[d], b_data.clone(), true)?;
    let r = tape.constant(&[t, d], r_data.clone())?;
    let out = tape.layer_norm(x, g, b)?;
    let loss = tape_weighted_mean(&mut tape, out, r)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("x", &x_data, tape.grad(x)?);
    check.push("g", &g_data, tape.grad(g)?);
    check.push("b", &b_data, tape.grad(b)?);
    let rr: Vec<f64> = r_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("layer-norm", move |lk| {
        let out = m_layer_norm(&lk.mat("x", t, d), lk.get("g"), lk.get("b"));
        m_weighted_mean(&out, &M::from(&rr, t, d))
    }))
}

fn check_unary(seed: u64, which: &str) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (3, 5);
    let x_data = if which == "relu" { uniform_off_kink(&mut rng, t * d) } else { uniform(&mut rng, t * d, -2.0, 2.0) };
    let r_data = uniform(&mut rng, t * d, -1.0, 1.0);

    let mut tape = Tape::new();
    let x = tape.tensor(&[t, d], x_data.clone(), true)?;
    let r = tape.constant(&[t, d], r_data.clone())?;
    let out = match which {
        "softmax" => tape.softmax_last(x)?,
        "sigmoid" => tape.sigmoid(x)?,
        "relu" => tape.relu(x)?,
        "scale" => tape.scale(x, 1.7)?,
        "transpose" => tape.transpose(x)?,
        other => return Err(Error::Verification(format!("unknown unary check {other}"))),
    };
    let w = if which == "transpose" {
        let wt = uniform(&mut rng, d * t, -1.0, 1.0);
        tape.constant(&[d, t], wt)?
    } else {
        r
    };
    let loss = tape_weighted_mean(&mut tape, out, w)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("x", &x_data, tape.grad(x)?);
    let ww: Vec<f64> = tape.value(w).iter().map(|&v| v as f64).collect();
    let which = which.to_string();
    let label = which.clone();
    Ok(check.run(&label, move |lk| {
        let x = lk.mat("x", t, d);
        let out = match which.as_str() {
            "softmax" => m_softmax_rows(&x),
            "sigmoid" => m_sigmoid(&x),
            "relu" => m_relu(&x),
            "scale" => m_scale(&x, 1.7f32 as f64),
            "transpose" => m_transpose(&x),
            _ => unreachable!(),
        };
        let (wr, wc) = (out.r, out.c);
        m_weighted_mean(&out, &M::from(&ww, wr, wc))
    }))
}

fn check_bce(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (3, 4);
    let p_data = uniform(&mut rng, t * d, 0.2, 0.8);
    let y_data = binary(&mut rng, t * d);

    let mut tape = Tape::new();
    let p = tape.tensor(&[t, d], p_data.clone(), true)?;
    let y = tape.constant(&[t, d], y_data.clone())?;
    let loss = tape.bce_mean(p, y)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("p", &p_data, tape.grad(p)?);
    let yy: Vec<f64> = y_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("binary cross-entropy", move |lk| {
        m_bce_mean(&lk.mat("p", t, d), &M::from(&yy, t, d))
    }))
}

/// The textbook composite: mean of `sigmoid(x·W)` differentiated through
/// both ops at once.
fn check_mean_sigmoid_linear(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, i, o) = (3, 4, 2);
    let x_data = uniform(&mut rng, t * i, -1.0, 1.0);
    let w_data = uniform(&mut rng, i * o, -1.0, 1.0);

    let mut tape = Tape::new();
    let x = tape.constant(&[t, i], x_data.clone())?;
    let w = tape.tensor(&[i, o], w_data.clone(), true)?;
    let z = tape.matmul(x, w)?;
    let s = tape.sigmoid(z)?;
    let ones = tape.constant(&[t, o], vec![1.0; t * o])?;
    let loss = tape_weighted_mean(&mut tape, s, ones)?;
    tape.backward(loss)?;

    let mut check = Check::new();
    check.push("w", &w_data, tape.grad(w)?);
    let xx: Vec<f64> = x_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("mean of sigmoid of matmul", move |lk| {
        let s = m_sigmoid(&m_matmul(&M::from(&xx, t, i), &lk.mat("w", i, o)));
        s.v.iter().sum::<f64>() / s.v.len() as f64
    }))
}

fn check_attention(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tq, tk, d, heads) = (3, 5, 8, 2);
    let mha = MultiheadAttention::init("mha", d, heads, &mut rng)?;
    let q_data = uniform(&mut rng, tq * d, -1.0, 1.0);
    let m_data = uniform(&mut rng, tk * d, -1.0, 1.0);
    let r_data = uniform(&mut rng, tq * d, -1.0, 1.0);

    let mut tape = Tape::new();
    let bound = mha.bind(&mut tape)?;
    let q = tape.tensor(&[tq, d], q_data.clone(), true)?;
    let m = tape.tensor(&[tk, d], m_data.clone(), true)?;
    let r = tape.constant(&[tq, d], r_data.clone())?;
    let out = bound.forward(&mut tape, q, m)?;
    let loss = tape_weighted_mean(&mut tape, out, r)?;
    tape.backward(loss)?;
    let grads = tape.param_grads()?;

    let mut check = Check::new();
    check.push("query", &q_data, tape.grad(q)?);
    check.push("memory", &m_data, tape.grad(m)?);
    check.push_module(&mha, &grads)?;
    let rr: Vec<f64> = r_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("multi-head cross-attention", move |lk| {
        let out = m_mha(lk, "mha", heads, &lk.mat("query", tq, d), &lk.mat("memory", tk, d));
        m_weighted_mean(&out, &M::from(&rr, tq, d))
    }))
}

fn check_decoder_block(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tq, tk, d, heads) = (3, 5, 8, 2);
    let block = DecoderBlock::init("blk", d, heads, &mut rng)?;
    let x_data = uniform(&mut rng, tq * d, -1.0, 1.0);
    let m_data = uniform(&mut rng, tk * d, -1.0, 1.0);
    let r_data = uniform(&mut rng, tq * d, -1.0, 1.0);

    let mut tape = Tape::new();
    let bound = block.bind(&mut tape)?;
    let x = tape.tensor(&[tq, d], x_data.clone(), true)?;
    let m = tape.tensor(&[tk, d], m_data.clone(), true)?;
    let r = tape.constant(&[tq, d], r_data.clone())?;
    let out = bound.forward(&mut tape, x, m)?;
    let loss = tape_weighted_mean(&mut tape, out, r)?;
    tape.backward(loss)?;
    let grads = tape.param_grads()?;

    let mut check = Check::new();
    check.push("x", &x_data, tape.grad(x)?);
    check.push("memory", &m_data, tape.grad(m)?);
    check.push_module(&block, &grads)?;
    let rr: Vec<f64> = r_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("decoder block", move |lk| {
        let out = m_block(lk, "blk", heads, &lk.mat("x", tq, d), &lk.mat("memory", tk, d));
        m_weighted_mean(&out, &M::from(&rr, tq, d))
    }))
}

fn check_proposer_decode(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, d, k, heads, blocks) = (2, 8, 3, 2, 2);
    let dims = ModelDims { d_map: 4, d_v: 5, d_l: 6, d, heads, decoder_blocks: blocks };
    let weights = PrompterWeights::init(&dims, k, &mut rng)?;
    let q_data = uniform(&mut rng, p * d, -1.0, 1.0);
    let m_data = uniform(&mut rng, p * d, -1.0, 1.0);
    let r_data = uniform(&mut rng, p * k, -1.0, 1.0);

    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape)?;
    let q = tape.tensor(&[p, d], q_data.clone(), true)?;
    let m = tape.tensor(&[p, d], m_data.clone(), true)?;
    let r = tape.constant(&[p, k], r_data.clone())?;
    let out = bound.rp_decode(&mut tape, q, m)?;
    let loss = tape_weighted_mean(&mut tape, out, r)?;
    tape.backward(loss)?;
    let grads = tape.param_grads()?;

    let mut check = Check::new();
    check.push("query", &q_data, tape.grad(q)?);
    check.push("memory", &m_data, tape.grad(m)?);
    check.push_module(&weights.rp, &grads)?;
    let rr: Vec<f64> = r_data.iter().map(|&v| v as f64).collect();
    Ok(check.run("proposer decode", move |lk| {
        let logits = m_stack(lk, "prompter.rp", heads, blocks, k, &lk.mat("query", p, d), &lk.mat("memory", p, d));
        m_weighted_mean(&m_sigmoid(&logits), &M::from(&rr, p, k))
    }))
}

/// The whole pipeline — vision stage, projections, both decodes, the gate,
/// and the three-term training loss — differentiated with respect to every
/// parameter in the model.
fn check_full_model(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (3usize, 3usize);
    let p = n * (n - 1);
    let dims = ModelDims { d_map: 4, d_v: 5, d_l: 6, d: 8, heads: 2, decoder_blocks: 2 };
    let model = ModelWeights::init(&dims, k, &mut rng)?;

    let pair_data = uniform(&mut rng, p * 2 * dims.d_map, -1.0, 1.0);
    let spatial_data = uniform(&mut rng, p * 6, -1.0, 1.0);
    let rp_data = uniform(&mut rng, p * dims.d_l, -1.0, 1.0);
    let rj_data: Vec<Vec<f32>> = (0..k).map(|_| uniform(&mut rng, p * dims.d_l, -1.0, 1.0)).collect();
    let y_data = binary(&mut rng, p * k);

    let mut tape = Tape::new();
    let bound_v = model.vision.bind(&mut tape)?;
    let bound_p = model.prompter.bind(&mut tape)?;
    let inputs = VisionInputs {
        pair_feats: pair_data.clone(),
        spatial: spatial_data.clone(),
        pair_count: p,
        d_map: dims.d_map,
    };
    let f_v = vision_forward(&mut tape, &bound_v, &inputs)?;
    let f_rp = tape.constant(&[p, dims.d_l], rp_data.clone())?;
    let f_rj: Vec<Tensor> = rj_data
        .iter()
        .map(|d| tape.constant(&[p, dims.d_l], d.clone()))
        .collect::<Result<_>>()?;
    let out = bound_p.forward_raw(&mut tape, f_v, f_rp, &f_rj)?;
    let y = tape.constant(&[p, k], y_data.clone())?;
    let l1 = tape.bce_mean(out.r_rp, y)?;
    let l2 = tape.bce_mean(out.r_rj, y)?;
    let l3 = tape.bce_mean(out.r, y)?;
    let l12 = tape.add(l1, l2)?;
    let loss = tape.add(l12, l3)?;
    tape.backward(loss)?;
    let grads = tape.param_grads()?;

    let mut check = Check::new();
    check.push_module(&model, &grads)?;

    let to64 = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let pair64 = to64(&pair_data);
    let spatial64 = to64(&spatial_data);
    let rp64 = to64(&rp_data);
    let rj64: Vec<Vec<f64>> = rj_data.iter().map(|d| to64(d)).collect();
    let y64 = to64(&y_data);
    let (d_map, d_v, d_l, d, heads, blocks) = (dims.d_map, dims.d_v, dims.d_l, dims.d, dims.heads, dims.decoder_blocks);

    Ok(check.run("full model with training loss", move |lk| {
        // Vision stage.
        let pooled = m_linear(&M::from(&pair64, p, 2 * d_map), &lk.mat("vision.pair.w", 2 * d_map, d_v), lk.get("vision.pair.b"));
        let sp = m_linear(&M::from(&spatial64, p, 6), &lk.mat("vision.spatial.w", 6, d_v), lk.get("vision.spatial.b"));
        let f_v_raw = m_linear(&m_add(&pooled, &sp), &lk.mat("vision.out.w", d_v, d_v), lk.get("vision.out.b"));
        // Projections to the shared width.
        let f_v = m_linear(&f_v_raw, &lk.mat("prompter.proj_v.w", d_v, d), lk.get("prompter.proj_v.b"));
        let f_rp = m_linear(&M::from(&rp64, p, d_l), &lk.mat("prompter.proj_rp.w", d_l, d), lk.get("prompter.proj_rp.b"));
        let f_rj: Vec<M> = rj64
            .iter()
            .map(|m| m_linear(&M::from(m, p, d_l), &lk.mat("prompter.proj_rj.w", d_l, d), lk.get("prompter.proj_rj.b")))
            .collect();
        // Proposer branch.
        let r_rp = m_sigmoid(&m_stack(lk, "prompter.rp", heads, blocks, k, &f_v, &f_rp));
        // Judger branch: same stack weights, one pass per relation.
        let cols: Vec<M> = f_rj.iter().map(|mem| m_stack(lk, "prompter.rj", heads, blocks, 1, &f_v, mem)).collect();
        let col_refs: Vec<&M> = cols.iter().collect();
        let r_rj = m_sigmoid(&m_concat_cols(&col_refs));
        // Gate over the two feature mixes.
        let mut sum = f_rj[0].clone();
        for t in &f_rj[1..] {
            sum = m_add(&sum, t);
        }
        let f_rj_mean = m_scale(&sum, 1.0 / k as f64);
        let ga = m_gate(lk, d, k, &m_add(&f_v, &f_rp));
        let gb = m_gate(lk, d, k, &m_add(&f_v, &f_rj_mean));
        let w_rp = m_sigmoid(&m_add(&ga, &m_scale(&gb, -1.0)));
        let w_rj = m_sigmoid(&m_add(&gb, &m_scale(&ga, -1.0)));
        let r = m_add(&m_mul(&w_rp, &r_rp), &m_mul(&w_rj, &r_rj));
        let y = M::from(&y64, p, k);
        m_bce_mean(&r_rp, &y) + m_bce_mean(&r_rj, &y) + m_bce_mean(&r, &y)
    }))
}

/// Runs every gradient check with instance data derived from `seed`.
pub fn run_full_suite(seed: u64) -> Result<GradCheckReport> {
    let results = vec![
        check_matmul(seed)?,
        check_add_mul(seed.wrapping_add(1), false)?,
        check_add_mul(seed.wrapping_add(2), true)?,
        check_concat(seed.wrapping_add(3))?,
        check_mean_axis(seed.wrapping_add(4), 0)?,
        check_mean_axis(seed.wrapping_add(5), 1)?,
        check_mean_axis(seed.wrapping_add(6), 2)?,
        check_linear(seed.wrapping_add(7))?,
        check_layer_norm(seed.wrapping_add(8))?,
        check_unary(seed.wrapping_add(9), "softmax")?,
        check_unary(seed.wrapping_add(10), "sigmoid")?,
        check_unary(seed.wrapping_add(11), "relu")?,
        check_unary(seed.wrapping_add(12), "scale")?,
        check_unary(seed.wrapping_add(13), "transpose")?,
        check_bce(seed.wrapping_add(14))?,
        check_mean_sigmoid_linear(seed.wrapping_add(15))?,
        check_attention(seed.wrapping_add(16))?,
        check_decoder_block(seed.wrapping_add(17))?,
        check_proposer_decode(seed.wrapping_add(18))?,
        check_full_model(seed.wrapping_add(19))?,
    ];
    Ok(GradCheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_matches_finite_differences() {
        let report = run_full_suite(7).unwrap();
        for r in &report.results {
            assert!(
                r.passed,
                "{} failed: max relative error {} at {} over {} elements",
                r.name, r.max_rel_err, r.worst, r.elements
            );
        }
        assert_eq!(report.results.len(), 20);
        assert!(report.passed());
    }

    #[test]
    fn the_oracle_catches_a_wrong_gradient() {
        // Same harness, deliberately corrupted analytic gradient: the suite
        // must flag it, otherwise a silent all-pass would be meaningless.
        let mut tape = Tape::new();
        let x_data = vec![0.3f32, -0.7, 1.1, 0.4];
        let x = tape.tensor(&[2, 2], x_data.clone(), true).unwrap();
        let w = tape.constant(&[2, 2], vec![1.0; 4]).unwrap();
        let out = tape.sigmoid(x).unwrap();
        let loss = tape_weighted_mean(&mut tape, out, w).unwrap();
        tape.backward(loss).unwrap();

        let mut wrong: Vec<f32> = tape.grad(x).unwrap().to_vec();
        wrong[2] += 0.05;
        let mut check = Check::new();
        check.push("x", &x_data, &wrong);
        let result = check.run("corrupted sigmoid", |lk| {
            let s = m_sigmoid(&lk.mat("x", 2, 2));
            s.v.iter().sum::<f64>() / 4.0
        });
        assert!(!result.passed);
        assert!(result.worst.contains("x[2]"));
    }
}
