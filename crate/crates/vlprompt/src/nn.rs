//! Model building blocks: named parameters, linear layers, multi-head
//! attention, and the transformer decoder block used by both decoders.
//!
//! Parameters live outside any tape as plain f32 buffers. Each training step
//! binds them onto a fresh [`Tape`] as grad-enabled leaves, runs forward and
//! backward, and reads gradients back by parameter name. The [`Module`] trait
//! walks a model's parameters in a fixed construction order, which is what
//! makes optimizer updates and checkpoints deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// A named trainable buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        let shape = shape.to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { name: name.into(), shape, data }
    }

    /// `uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))` from the given generator.
    pub fn init_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Param::new(name, shape, data)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param::new(name, shape, vec![1.0; n])
    }
}

/// Walks every parameter of a model in a fixed order.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.data.len());
        n
    }

    /// Binds every parameter onto `tape` so a later `param_grads` sees all of
    /// them. Forward code still binds layers individually; this exists for
    /// whole-model passes.
    fn bind_all(&self, tape: &mut Tape) -> Result<()> {
        let mut err = None;
        self.visit(&mut |p| {
            if err.is_none() {
                if let Err(e) = tape.param(p) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Affine layer `x*W + b`. `w` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn init(prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::init_uniform(format!("{prefix}.w"), &[in_dim, out_dim], in_dim, rng),
            b: Param::init_uniform(format!("{prefix}.b"), &[out_dim], in_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundLinear> {
        Ok(BoundLinear { w: tape.param(&self.w)?, b: tape.param(&self.b)? })
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Tensor,
    pub b: Tensor,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        tape.linear(x, self.w, self.b)
    }
}

/// Learnable layer-norm scale and shift, initialized to the identity.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn init(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::ones(format!("{prefix}.g"), &[dim]),
            beta: Param::zeros(format!("{prefix}.b"), &[dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundLayerNorm> {
        Ok(BoundLayerNorm { gamma: tape.param(&self.gamma)?, beta: tape.param(&self.beta)? })
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Each head owns its own `dim -> dim/heads` query/key/value projections
/// (together equivalent to one `dim -> dim` projection split by columns);
/// head outputs are concatenated and passed through a final linear layer.
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    pub heads: Vec<HeadProj>,
    pub out: Linear,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct HeadProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl MultiheadAttention {
    pub fn init(prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible into {heads} heads"
            )));
        }
        let hd = dim / heads;
        let head_projs = (0..heads)
            .map(|h| HeadProj {
                q: Linear::init(&format!("{prefix}.h{h}.q"), dim, hd, rng),
                k: Linear::init(&format!("{prefix}.h{h}.k"), dim, hd, rng),
                v: Linear::init(&format!("{prefix}.h{h}.v"), dim, hd, rng),
            })
            .collect();
        Ok(MultiheadAttention { heads: head_projs, out: Linear::init(&format!("{prefix}.out"), dim, dim, rng), dim })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundMha> {
        let heads = self
            .heads
            .iter()
            .map(|h| {
                Ok(BoundHead { q: h.q.bind(tape)?, k: h.k.bind(tape)?, v: h.v.bind(tape)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundMha { heads, out: self.out.bind(tape)?, head_dim: self.dim / self.heads.len() })
    }
}

impl Module for MultiheadAttention {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for h in &self.heads {
            h.q.visit(f);
            h.k.visit(f);
            h.v.visit(f);
        }
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for h in &mut self.heads {
            h.q.visit_mut(f);
            h.k.visit_mut(f);
            h.v.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}

pub struct BoundHead {
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
}

pub struct BoundMha {
    pub heads: Vec<BoundHead>,
    pub out: BoundLinear,
    pub head_dim: usize,
}

impl BoundMha {
    /// `query: [t_q, dim]`, `memory: [t_k, dim]` -> `[t_q, dim]`.
    /// Self-attention is `forward(tape, x, x)`.
    pub fn forward(&self, tape: &mut Tape, query: Tensor, memory: Tensor) -> Result<Tensor> {
        let scale = 1.0 / (self.head_dim as f32).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = h.q.forward(tape, query)?;
            let k = h.k.forward(tape, memory)?;
            let v = h.v.forward(tape, memory)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_last(scores)?;
            head_outs.push(tape.matmul(attn, v)?);
        }
        let cat = tape.concat_last(&head_outs)?;
        self.out.forward(tape, cat)
    }
}

/// Transformer decoder block: self-attention, cross-attention against an
/// external memory, then a feed-forward net, each followed by a residual add
/// and layer-norm (post-norm). The feed-forward hidden width is `4 * dim`.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: MultiheadAttention,
    pub cross_attn: MultiheadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    pub fn init(prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: MultiheadAttention::init(&format!("{prefix}.sa"), dim, heads, rng)?,
            cross_attn: MultiheadAttention::init(&format!("{prefix}.ca"), dim, heads, rng)?,
            ff1: Linear::init(&format!("{prefix}.ff1"), dim, 4 * dim, rng),
            ff2: Linear::init(&format!("{prefix}.ff2"), 4 * dim, dim, rng),
            ln1: LayerNorm::init(&format!("{prefix}.ln1"), dim),
            ln2: LayerNorm::init(&format!("{prefix}.ln2"), dim),
            ln3: LayerNorm::init(&format!("{prefix}.ln3"), dim),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundBlock> {
        Ok(BoundBlock {
            self_attn: self.self_attn.bind(tape)?,
            cross_attn: self.cross_attn.bind(tape)?,
            ff1: self.ff1.bind(tape)?,
            ff2: self.ff2.bind(tape)?,
            ln1: self.ln1.bind(tape)?,
            ln2: self.ln2.bind(tape)?,
            ln3: self.ln3.bind(tape)?,
        })
    }
}

impl Module for DecoderBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.self_attn.visit(f);
        self.cross_attn.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
        self.ln1.visit(f);
        self.ln2.visit(f);
        self.ln3.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.self_attn.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ln3.visit_mut(f);
    }
}

pub struct BoundBlock {
    pub self_attn: BoundMha,
    pub cross_attn: BoundMha,
    pub ff1: BoundLinear,
    pub ff2: BoundLinear,
    pub ln1: BoundLayerNorm,
    pub ln2: BoundLayerNorm,
    pub ln3: BoundLayerNorm,
}

impl BoundBlock {
    pub fn forward(&self, tape: &mut Tape, x: Tensor, memory: Tensor) -> Result<Tensor> {
        let sa = self.self_attn.forward(tape, x, x)?;
        let x = {
            let sum = tape.add(x, sa)?;
            self.ln1.forward(tape, sum)?
        };
        let ca = self.cross_attn.forward(tape, x, memory)?;
        let x = {
            let sum = tape.add(x, ca)?;
            self.ln2.forward(tape, sum)?
        };
        let h = self.ff1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let ff = self.ff2.forward(tape, h)?;
        let sum = tape.add(x, ff)?;
        self.ln3.forward(tape, sum)
    }
}

/// A stack of decoder blocks followed by a linear head.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub blocks: Vec<DecoderBlock>,
    pub head: Linear,
}

impl DecoderStack {
    pub fn init(prefix: &str, dim: usize, heads: usize, depth: usize, head_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        let blocks = (0..depth)
            .map(|i| DecoderBlock::init(&format!("{prefix}.b{i}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderStack { blocks, head: Linear::init(&format!("{prefix}.head"), dim, head_out, rng) })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundStack> {
        Ok(BoundStack {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect::<Result<Vec<_>>>()?,
            head: self.head.bind(tape)?,
        })
    }
}

impl Module for DecoderStack {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

pub struct BoundStack {
    pub blocks: Vec<BoundBlock>,
    pub head: Tensor2Head,
}

/// Alias kept separate so the head can be reused without rebinding.
pub type Tensor2Head = BoundLinear;

impl BoundStack {
    /// Runs the blocks over `query` against `memory`, then the head.
    /// Returns head logits; callers apply their own squashing.
    pub fn decode(&self, tape: &mut Tape, query: Tensor, memory: Tensor) -> Result<Tensor> {
        let mut x = query;
        for b in &self.blocks {
            x = b.forward(tape, x, memory)?;
        }
        self.head.forward(tape, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Zeroes every bias so attention reduces to its algebraic core.
    fn zero_biases(m: &mut impl Module) {
        m.visit_mut(&mut |p| {
            if p.name.ends_with(".b") && p.shape.len() == 1 {
                p.data.iter_mut().for_each(|e| *e = 0.0);
            }
        });
    }

    #[test]
    fn single_head_identity_attention_matches_hand_computation() {
        let mut r = rng(0);
        let mut mha = MultiheadAttention::init("t", 4, 1, &mut r).unwrap();
        // Identity projections, zero biases.
        let eye: Vec<f32> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        mha.heads[0].q.w.data = eye.clone();
        mha.heads[0].k.w.data = eye.clone();
        mha.heads[0].v.w.data = eye.clone();
        mha.out.w.data = eye;
        zero_biases(&mut mha);

        let mut tape = Tape::new();
        let bound = mha.bind(&mut tape).unwrap();
        let q = tape
            .constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let mem = tape
            .constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0])
            .unwrap();
        let out = bound.forward(&mut tape, q, mem).unwrap();

        // scores/sqrt(4): [[0.5, 0.0], [0.0, 1.0]] -> softmax rows ->
        // weighted averages of the two value rows.
        let a0 = (0.5f32).exp() / ((0.5f32).exp() + 1.0);
        let a1 = 1.0 / (1.0 + 1.0f32.exp());
        let want = [a0, 2.0 * (1.0 - a0), 0.0, 0.0, a1, 2.0 * (1.0 - a1), 0.0, 0.0];
        for (got, want) in tape.value(out).iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut r = rng(0);
        assert!(MultiheadAttention::init("t", 6, 4, &mut r).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = DecoderStack::init("d", 8, 2, 2, 3, &mut rng(7)).unwrap();
        let b = DecoderStack::init("d", 8, 2, 2, 3, &mut rng(7)).unwrap();
        let c = DecoderStack::init("d", 8, 2, 2, 3, &mut rng(8)).unwrap();
        let flat = |m: &DecoderStack| {
            let mut v = Vec::new();
            m.visit(&mut |p| v.extend_from_slice(&p.data));
            v
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let lin = Linear::init("t", 64, 16, &mut rng(3));
        let bound = 1.0 / 8.0;
        assert!(lin.w.data.iter().all(|&v| v > -bound && v < bound));
        assert!(lin.b.data.iter().all(|&v| v > -bound && v < bound));
    }

    #[test]
    fn param_names_are_unique() {
        let stack = DecoderStack::init("d", 8, 2, 2, 4, &mut rng(1)).unwrap();
        let mut names = Vec::new();
        stack.visit(&mut |p| names.push(p.name.clone()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    #[test]
    fn block_output_shape_matches_query() {
        let mut r = rng(5);
        let block = DecoderBlock::init("b", 8, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = block.bind(&mut tape).unwrap();
        let x = tape.constant(&[3, 8], (0..24).map(|i| i as f32 * 0.1).collect()).unwrap();
        let mem = tape.constant(&[5, 8], (0..40).map(|i| (i as f32 * 0.07).sin()).collect()).unwrap();
        let y = bound.forward(&mut tape, x, mem).unwrap();
        assert_eq!(tape.shape(y), &[3, 8]);
    }

    #[test]
    fn permuting_query_rows_permutes_block_output_rows() {
        let mut r = rng(9);
        let block = DecoderBlock::init("b", 8, 4, &mut r).unwrap();
        let perm = [2usize, 0, 1];

        let xv: Vec<f32> = (0..24).map(|i| ((i * 37 % 12) as f32 - 6.0) * 0.17).collect();
        let mv: Vec<f32> = (0..16).map(|i| ((i * 29 % 10) as f32 - 5.0) * 0.23).collect();

        let run = |x: &[f32]| {
            let mut tape = Tape::new();
            let bound = block.bind(&mut tape).unwrap();
            let xt = tape.constant(&[3, 8], x.to_vec()).unwrap();
            let mt = tape.constant(&[2, 8], mv.clone()).unwrap();
            let y = bound.forward(&mut tape, xt, mt).unwrap();
            tape.value(y).to_vec()
        };

        let base = run(&xv);
        let mut xp = vec![0.0f32; 24];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * 8..(dst + 1) * 8].copy_from_slice(&xv[src * 8..(src + 1) * 8]);
        }
        let permuted = run(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let (a, b) = (permuted[dst * 8 + c], base[src * 8 + c]);
                assert!((a - b).abs() < 1e-6, "row {dst} col {c}: {a} vs {b}");
            }
        }
    }
}
