//! Two cross-attention scoring branches over shared-width features, and the
//! learned gate that blends them into one relation score per pair.
//!
//! The proposer branch reads each pair's vision token against that pair's
//! language feature and scores every relation at once. The judger branch
//! scores one relation at a time: the same decoder weights run once per
//! relation, attending only to that relation's language feature, so each
//! output column depends only on its own relation's evidence. A three-layer
//! gate network turns the two feature streams into per-element mixing
//! weights that sum to one, which makes the fused score a convex
//! combination of the two branch scores.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::db::LanguageFeatures;
use crate::nn::{BoundLinear, BoundStack, DecoderStack, Linear, Module, Param};
use crate::tensor::{Tape, Tensor};
use crate::vision::VisionWeights;

/// Widths and depths that size the whole relation model.
///
/// The relation count is deliberately not part of this struct: it comes from
/// the vocabulary, and keeping it out prevents a config file from silently
/// disagreeing with the vocabulary it is used with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Channels of the scene feature map that masks are pooled over.
    pub d_map: usize,
    /// Width of the pairwise vision features.
    pub d_v: usize,
    /// Width of the language embeddings.
    pub d_l: usize,
    /// Shared width both streams are projected to before decoding.
    pub d: usize,
    /// Attention heads per decoder block; must divide `d`.
    pub heads: usize,
    /// Decoder blocks per branch.
    pub decoder_blocks: usize,
}

/// Which score tensor drives ranking and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// The gated blend of both branches (the default).
    Fused,
    /// The proposer branch alone.
    ProposerBranch,
    /// The judger branch alone.
    JudgerBranch,
}

impl ScoreSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(ScoreSource::Fused),
            "proposer" => Ok(ScoreSource::ProposerBranch),
            "judger" => Ok(ScoreSource::JudgerBranch),
            other => Err(Error::Config(format!(
                "unknown score source {other:?} (expected fused, proposer, or judger)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreSource::Fused => "fused",
            ScoreSource::ProposerBranch => "proposer",
            ScoreSource::JudgerBranch => "judger",
        }
    }
}

/// Trainable weights for the projection, decoding, and gating stages.
#[derive(Debug, Clone)]
pub struct PrompterWeights {
    dim: usize,
    relation_count: usize,
    /// Vision features `d_v` → `d`.
    pub proj_v: Linear,
    /// Pair-level language features `d_l` → `d`.
    pub proj_rp: Linear,
    /// Per-relation language features `d_l` → `d`.
    pub proj_rj: Linear,
    /// Proposer decoder; head emits one logit per relation.
    pub rp: DecoderStack,
    /// Judger decoder; head emits a single logit, run once per relation
    /// with the same weights each time.
    pub rj: DecoderStack,
    /// Gate network layers `d` → `d` → `d` → relation count.
    pub gate_in: Linear,
    pub gate_mid: Linear,
    pub gate_out: Linear,
}

impl PrompterWeights {
    pub fn init(dims: &ModelDims, relation_count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if relation_count == 0 {
            return Err(Error::Config("relation count must be at least 1".into()));
        }
        if dims.d == 0 || dims.d_v == 0 || dims.d_l == 0 {
            return Err(Error::Config(format!(
                "model widths must be positive (d={}, d_v={}, d_l={})",
                dims.d, dims.d_v, dims.d_l
            )));
        }
        Ok(PrompterWeights {
            dim: dims.d,
            relation_count,
            proj_v: Linear::init("prompter.proj_v", dims.d_v, dims.d, rng),
            proj_rp: Linear::init("prompter.proj_rp", dims.d_l, dims.d, rng),
            proj_rj: Linear::init("prompter.proj_rj", dims.d_l, dims.d, rng),
            rp: DecoderStack::init("prompter.rp", dims.d, dims.heads, dims.decoder_blocks, relation_count, rng)?,
            rj: DecoderStack::init("prompter.rj", dims.d, dims.heads, dims.decoder_blocks, 1, rng)?,
            gate_in: Linear::init("prompter.gate1", dims.d, dims.d, rng),
            gate_mid: Linear::init("prompter.gate2", dims.d, dims.d, rng),
            gate_out: Linear::init("prompter.gate3", dims.d, relation_count, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPrompter> {
        Ok(BoundPrompter {
            dim: self.dim,
            relation_count: self.relation_count,
            proj_v: self.proj_v.bind(tape)?,
            proj_rp: self.proj_rp.bind(tape)?,
            proj_rj: self.proj_rj.bind(tape)?,
            rp: self.rp.bind(tape)?,
            rj: self.rj.bind(tape)?,
            gate_in: self.gate_in.bind(tape)?,
            gate_mid: self.gate_mid.bind(tape)?,
            gate_out: self.gate_out.bind(tape)?,
        })
    }
}

impl Module for PrompterWeights {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.proj_v.visit(f);
        self.proj_rp.visit(f);
        self.proj_rj.visit(f);
        self.rp.visit(f);
        self.rj.visit(f);
        self.gate_in.visit(f);
        self.gate_mid.visit(f);
        self.gate_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.proj_v.visit_mut(f);
        self.proj_rp.visit_mut(f);
        self.proj_rj.visit_mut(f);
        self.rp.visit_mut(f);
        self.rj.visit_mut(f);
        self.gate_in.visit_mut(f);
        self.gate_mid.visit_mut(f);
        self.gate_out.visit_mut(f);
    }
}

/// Prompter weights bound onto a tape for one forward/backward pass.
pub struct BoundPrompter {
    dim: usize,
    relation_count: usize,
    proj_v: BoundLinear,
    proj_rp: BoundLinear,
    proj_rj: BoundLinear,
    rp: BoundStack,
    rj: BoundStack,
    gate_in: BoundLinear,
    gate_mid: BoundLinear,
    gate_out: BoundLinear,
}

/// Tape handles for the five per-pair relation tensors, each `[P, K]`.
#[derive(Debug, Clone, Copy)]
pub struct PrompterOutput {
    /// Proposer-branch scores in (0,1).
    pub r_rp: Tensor,
    /// Judger-branch scores in (0,1).
    pub r_rj: Tensor,
    /// Gate weight on the proposer branch.
    pub w_rp: Tensor,
    /// Gate weight on the judger branch; `w_rp + w_rj = 1` elementwise.
    pub w_rj: Tensor,
    /// Fused scores, elementwise between the two branch scores.
    pub r: Tensor,
}

impl PrompterOutput {
    /// The tensor a given ranking configuration reads its scores from.
    pub fn scores(&self, source: ScoreSource) -> Tensor {
        match source {
            ScoreSource::Fused => self.r,
            ScoreSource::ProposerBranch => self.r_rp,
            ScoreSource::JudgerBranch => self.r_rj,
        }
    }
}

impl BoundPrompter {
    /// Checks that `t` is a `[tokens, dim]` matrix at the shared width and
    /// returns its token count.
    fn token_count(&self, tape: &Tape, t: Tensor, stream: &str) -> Result<usize> {
        let s = tape.shape(t);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Shape {
                op: "prompter",
                detail: format!("{stream} must be [tokens, {}], got {s:?}", self.dim),
            });
        }
        Ok(s[0])
    }

    /// Proposer decode: cross-attends the vision tokens over the pair-level
    /// language tokens and scores all relations per pair.
    ///
    /// Both streams index the same pair list, so their token counts must
    /// match. Returns `[P, K]` scores in (0,1).
    pub fn rp_decode(&self, tape: &mut Tape, query: Tensor, memory: Tensor) -> Result<Tensor> {
        let nq = self.token_count(tape, query, "proposer query")?;
        let nm = self.token_count(tape, memory, "proposer memory")?;
        if nq != nm {
            return Err(Error::Shape {
                op: "rp_decode",
                detail: format!("query has {nq} pair tokens but memory has {nm}; both index the same pair list"),
            });
        }
        let logits = self.rp.decode(tape, query, memory)?;
        tape.sigmoid(logits)
    }

    /// Judger decode: one decoder pass per relation, each attending only to
    /// that relation's language tokens, with the block and head weights
    /// shared across passes.
    ///
    /// `memories[k]` holds relation `k`'s `[P, d]` language tokens. Returns
    /// `[P, K]` scores in (0,1); column `k` depends only on `memories[k]`.
    pub fn rj_decode(&self, tape: &mut Tape, query: Tensor, memories: &[Tensor]) -> Result<Tensor> {
        if memories.len() != self.relation_count {
            return Err(Error::Shape {
                op: "rj_decode",
                detail: format!(
                    "got {} relation memories, model scores {} relations",
                    memories.len(),
                    self.relation_count
                ),
            });
        }
        let nq = self.token_count(tape, query, "judger query")?;
        let mut columns = Vec::with_capacity(memories.len());
        for (k, &memory) in memories.iter().enumerate() {
            let nm = self.token_count(tape, memory, "judger memory")?;
            if nm != nq {
                return Err(Error::Shape {
                    op: "rj_decode",
                    detail: format!(
                        "relation {k} memory has {nm} pair tokens but the query has {nq}; both index the same pair list"
                    ),
                });
            }
            columns.push(self.rj.decode(tape, query, memory)?);
        }
        let logits = tape.concat_last(&columns)?;
        tape.sigmoid(logits)
    }

    /// The three-layer gate network, producing one logit per (pair, relation).
    fn gate_logits(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let h = self.gate_in.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.gate_mid.forward(tape, h)?;
        let h = tape.relu(h)?;
        self.gate_out.forward(tape, h)
    }

    /// Blends the two branch scores with learned per-element weights.
    ///
    /// The gate sees `f_v + f_rp` for the proposer side and
    /// `f_v + f_rj_mean` (the judger features averaged over relations) for
    /// the judger side, both through the same network. The two logits are
    /// normalized against each other — `w_rp = sigmoid(a − b)`,
    /// `w_rj = sigmoid(b − a)` — so they sum to one and the fused score
    /// stays between the branch scores.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        r_rp: Tensor,
        r_rj: Tensor,
        f_v: Tensor,
        f_rp: Tensor,
        f_rj_mean: Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let a_in = tape.add(f_v, f_rp)?;
        let b_in = tape.add(f_v, f_rj_mean)?;
        let a = self.gate_logits(tape, a_in)?;
        let b = self.gate_logits(tape, b_in)?;
        let neg_b = tape.scale(b, -1.0)?;
        let a_minus_b = tape.add(a, neg_b)?;
        let w_rp = tape.sigmoid(a_minus_b)?;
        let neg_a = tape.scale(a, -1.0)?;
        let b_minus_a = tape.add(b, neg_a)?;
        let w_rj = tape.sigmoid(b_minus_a)?;
        let from_rp = tape.mul(w_rp, r_rp)?;
        let from_rj = tape.mul(w_rj, r_rj)?;
        let r = tape.add(from_rp, from_rj)?;
        Ok((w_rp, w_rj, r))
    }

    /// Full prompter over already-projected `[P, d]` streams: both decodes,
    /// the relation-axis mean of the judger features, and the gate.
    pub fn forward_projected(
        &self,
        tape: &mut Tape,
        f_v: Tensor,
        f_rp: Tensor,
        f_rj: &[Tensor],
    ) -> Result<PrompterOutput> {
        let r_rp = self.rp_decode(tape, f_v, f_rp)?;
        let r_rj = self.rj_decode(tape, f_v, f_rj)?;
        let mut sum = f_rj[0];
        for &t in &f_rj[1..] {
            sum = tape.add(sum, t)?;
        }
        let f_rj_mean = tape.scale(sum, 1.0 / f_rj.len() as f32)?;
        let (w_rp, w_rj, r) = self.fuse(tape, r_rp, r_rj, f_v, f_rp, f_rj_mean)?;
        Ok(PrompterOutput { r_rp, r_rj, w_rp, w_rj, r })
    }

    /// Full prompter over raw-width streams: projects the vision tokens
    /// (`[P, d_v]`), the pair-level language tokens (`[P, d_l]`), and each
    /// relation's language tokens (`[P, d_l]` apiece) to the shared width,
    /// then runs [`BoundPrompter::forward_projected`].
    pub fn forward_raw(
        &self,
        tape: &mut Tape,
        f_v: Tensor,
        f_rp: Tensor,
        f_rj: &[Tensor],
    ) -> Result<PrompterOutput> {
        if f_rj.len() != self.relation_count {
            return Err(Error::Shape {
                op: "prompter forward",
                detail: format!(
                    "got {} relation feature matrices, model scores {} relations",
                    f_rj.len(),
                    self.relation_count
                ),
            });
        }
        let f_v_p = self.proj_v.forward(tape, f_v)?;
        let f_rp_p = self.proj_rp.forward(tape, f_rp)?;
        let mut f_rj_p = Vec::with_capacity(f_rj.len());
        for &t in f_rj {
            f_rj_p.push(self.proj_rj.forward(tape, t)?);
        }
        self.forward_projected(tape, f_v_p, f_rp_p, &f_rj_p)
    }

    /// Full prompter over a scene's vision tokens and its looked-up language
    /// features. `f_v` is the `[P, d_v]` output of the vision stage on the
    /// same tape; the language features enter the tape as constants.
    pub fn forward(&self, tape: &mut Tape, f_v: Tensor, lang: &LanguageFeatures) -> Result<PrompterOutput> {
        let s = tape.shape(f_v).to_vec();
        if s.len() != 2 || s[0] != lang.pair_count() {
            return Err(Error::Shape {
                op: "prompter forward",
                detail: format!(
                    "vision features are {s:?} but the language features cover {} pairs",
                    lang.pair_count()
                ),
            });
        }
        if lang.relation_count() != self.relation_count {
            return Err(Error::Shape {
                op: "prompter forward",
                detail: format!(
                    "language features cover {} relations, model scores {}",
                    lang.relation_count(),
                    self.relation_count
                ),
            });
        }
        let p = lang.pair_count();
        let dl = lang.dim();
        let f_rp = tape.constant(&[p, dl], lang.proposer_matrix().to_vec())?;
        let mut f_rj = Vec::with_capacity(self.relation_count);
        for k in 0..self.relation_count {
            f_rj.push(tape.constant(&[p, dl], lang.judger_matrix(k).to_vec())?);
        }
        let f_v_p = self.proj_v.forward(tape, f_v)?;
        let f_rp_p = self.proj_rp.forward(tape, f_rp)?;
        let mut f_rj_p = Vec::with_capacity(f_rj.len());
        for &t in &f_rj {
            f_rj_p.push(self.proj_rj.forward(tape, t)?);
        }
        self.forward_projected(tape, f_v_p, f_rp_p, &f_rj_p)
    }
}

/// Every trainable weight in the pipeline: the vision stage plus the
/// prompter. This is the unit that checkpoints save and the optimizer steps.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub vision: VisionWeights,
    pub prompter: PrompterWeights,
}

impl ModelWeights {
    pub fn init(dims: &ModelDims, relation_count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ModelWeights {
            vision: VisionWeights::init(dims.d_map, dims.d_v, rng),
            prompter: PrompterWeights::init(dims, relation_count, rng)?,
        })
    }
}

impl Module for ModelWeights {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.vision.visit(f);
        self.prompter.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.vision.visit_mut(f);
        self.prompter.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dims(d_v: usize, d_l: usize, d: usize, heads: usize, blocks: usize) -> ModelDims {
        ModelDims { d_map: 4, d_v, d_l, d, heads, decoder_blocks: blocks }
    }

    fn rand_const(tape: &mut Tape, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        tape.constant(&[rows, cols], data).unwrap()
    }

    fn filled(tape: &mut Tape, rows: usize, cols: usize, v: f32) -> Tensor {
        tape.constant(&[rows, cols], vec![v; rows * cols]).unwrap()
    }

    /// Raw-width inputs for one synthetic scene of `p` pairs.
    fn raw_inputs(
        tape: &mut Tape,
        p: usize,
        d_v: usize,
        d_l: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Tensor, Vec<Tensor>) {
        let f_v = rand_const(tape, p, d_v, rng);
        let f_rp = rand_const(tape, p, d_l, rng);
        let f_rj = (0..k).map(|_| rand_const(tape, p, d_l, rng)).collect();
        (f_v, f_rp, f_rj)
    }

    #[test]
    fn output_shapes_and_ranges() {
        let (p, k) = (6, 4);
        let w = PrompterWeights::init(&dims(5, 7, 8, 2, 2), k, &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let (f_v, f_rp, f_rj) = raw_inputs(&mut tape, p, 5, 7, k, &mut rng(2));
        let out = bound.forward_raw(&mut tape, f_v, f_rp, &f_rj).unwrap();

        for t in [out.r_rp, out.r_rj, out.w_rp, out.w_rj, out.r] {
            assert_eq!(tape.shape(t), &[p, k]);
            for &v in tape.value(t) {
                assert!(v > 0.0 && v < 1.0, "value {v} outside (0,1)");
            }
        }
        let (wp, wj) = (tape.value(out.w_rp), tape.value(out.w_rj));
        for (a, b) in wp.iter().zip(wj) {
            assert!((a + b - 1.0).abs() < 1e-6, "gate weights sum to {}", a + b);
        }
        assert_eq!(out.scores(ScoreSource::Fused), out.r);
        assert_eq!(out.scores(ScoreSource::ProposerBranch), out.r_rp);
        assert_eq!(out.scores(ScoreSource::JudgerBranch), out.r_rj);
    }

    #[test]
    fn score_source_names_round_trip() {
        for s in [ScoreSource::Fused, ScoreSource::ProposerBranch, ScoreSource::JudgerBranch] {
            assert_eq!(ScoreSource::parse(s.name()).unwrap(), s);
        }
        assert!(ScoreSource::parse("ensemble").is_err());
    }

    #[test]
    fn identical_tokens_get_identical_rows() {
        let d = 8;
        let w = PrompterWeights::init(&dims(5, 7, d, 2, 2), 3, &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let mut r = rng(4);
        let qrow: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mrow: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let query = tape.constant(&[2, d], [qrow.clone(), qrow].concat()).unwrap();
        let memory = tape.constant(&[2, d], [mrow.clone(), mrow].concat()).unwrap();
        let out = bound.rp_decode(&mut tape, query, memory).unwrap();
        let v = tape.value(out);
        let (row0, row1) = v.split_at(v.len() / 2);
        for (a, b) in row0.iter().zip(row1) {
            assert!((a - b).abs() < 1e-6, "duplicated tokens scored {a} vs {b}");
        }
    }

    #[test]
    fn token_count_mismatch_is_rejected() {
        let d = 8;
        let w = PrompterWeights::init(&dims(5, 7, d, 2, 1), 2, &mut rng(5)).unwrap();
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let mut r = rng(6);
        let q3 = rand_const(&mut tape, 3, d, &mut r);
        let m2 = rand_const(&mut tape, 2, d, &mut r);
        assert!(bound.rp_decode(&mut tape, q3, m2).is_err());
        let m2b = rand_const(&mut tape, 2, d, &mut r);
        assert!(bound.rj_decode(&mut tape, q3, &[m2, m2b]).is_err());
        // Wrong number of relation memories is also a shape error.
        let m3 = rand_const(&mut tape, 3, d, &mut r);
        assert!(bound.rj_decode(&mut tape, q3, &[m3]).is_err());
    }

    /// Values of one full run, for cross-tape comparisons.
    fn run_raw(w: &PrompterWeights, p: usize, k: usize, seed: u64, perturb: Option<(usize, f32)>) -> [Vec<f32>; 5] {
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let mut r = rng(seed);
        let (f_v, f_rp, f_rj) = raw_inputs(&mut tape, p, 5, 7, k, &mut r);
        let f_rj = match perturb {
            None => f_rj,
            Some((slice, delta)) => {
                let mut out = f_rj;
                let mut data = tape.value(out[slice]).to_vec();
                data[0] += delta;
                out[slice] = tape.constant(&[p, 7], data).unwrap();
                out
            }
        };
        let o = bound.forward_raw(&mut tape, f_v, f_rp, &f_rj).unwrap();
        [o.r_rp, o.r_rj, o.w_rp, o.w_rj, o.r].map(|t| tape.value(t).to_vec())
    }

    #[test]
    fn judger_columns_are_independent() {
        let (p, k, kp) = (6, 3, 1);
        let w = PrompterWeights::init(&dims(5, 7, 8, 2, 2), k, &mut rng(7)).unwrap();
        let base = run_raw(&w, p, k, 8, None);
        let bumped = run_raw(&w, p, k, 8, Some((kp, 0.25)));

        // The proposer branch never reads the judger features.
        assert_eq!(base[0], bumped[0], "proposer scores must not change");
        let (rj_a, rj_b) = (&base[1], &bumped[1]);
        let mut changed = false;
        for row in 0..p {
            for col in 0..k {
                let (a, b) = (rj_a[row * k + col], rj_b[row * k + col]);
                if col == kp {
                    changed |= a != b;
                } else {
                    assert_eq!(a.to_bits(), b.to_bits(), "column {col} moved with relation {kp}");
                }
            }
        }
        assert!(changed, "perturbed relation column never moved");
    }

    #[test]
    fn single_relation_judger_matches_plain_decode() {
        let (p, d) = (4, 8);
        let w = PrompterWeights::init(&dims(5, 7, d, 2, 2), 1, &mut rng(9)).unwrap();

        let mut tape_a = Tape::new();
        let bound_a = w.bind(&mut tape_a).unwrap();
        let mut r = rng(10);
        let qdata: Vec<f32> = (0..p * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mdata: Vec<f32> = (0..p * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let q = tape_a.constant(&[p, d], qdata.clone()).unwrap();
        let m = tape_a.constant(&[p, d], mdata.clone()).unwrap();
        let via_judger = bound_a.rj_decode(&mut tape_a, q, &[m]).unwrap();
        let a = tape_a.value(via_judger).to_vec();

        // Same weights, single plain decode through the 1-wide head.
        let mut tape_b = Tape::new();
        let bound_b = w.bind(&mut tape_b).unwrap();
        let q = tape_b.constant(&[p, d], qdata).unwrap();
        let m = tape_b.constant(&[p, d], mdata).unwrap();
        let logits = bound_b.rj.decode(&mut tape_b, q, m).unwrap();
        let plain = tape_b.sigmoid(logits).unwrap();
        let b = tape_b.value(plain).to_vec();

        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "judger path {x} vs plain decode {y}");
        }
    }

    /// Gate layers rewritten so the network passes positive features through
    /// and sums them: layer weights become identity, the output layer all
    /// ones, and every bias zero.
    fn make_gate_passthrough(w: &mut PrompterWeights) {
        let d = w.dim();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        w.gate_in.w.data = eye.clone();
        w.gate_in.b.data = vec![0.0; d];
        w.gate_mid.w.data = eye;
        w.gate_mid.b.data = vec![0.0; d];
        w.gate_out.w.data = vec![1.0; d * w.relation_count()];
        w.gate_out.b.data = vec![0.0; w.relation_count()];
    }

    #[test]
    fn saturated_gate_returns_the_proposer_branch() {
        let (p, k, d) = (3, 2, 4);
        let mut w = PrompterWeights::init(&dims(5, 7, d, 2, 1), k, &mut rng(11)).unwrap();
        make_gate_passthrough(&mut w);

        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let mut r = rng(12);
        let r_rp_data: Vec<f32> = (0..p * k).map(|_| r.random_range(0.05..0.95)).collect();
        let r_rj_data: Vec<f32> = (0..p * k).map(|_| r.random_range(0.05..0.95)).collect();
        let r_rp = tape.constant(&[p, k], r_rp_data.clone()).unwrap();
        let r_rj = tape.constant(&[p, k], r_rj_data).unwrap();
        // Proposer-side gate input 10 + 10 = 20 per feature → logit 80;
        // judger-side input 10 − 30 = −20, cut to zero by the relu → logit 0.
        let f_v = filled(&mut tape, p, d, 10.0);
        let f_rp = filled(&mut tape, p, d, 10.0);
        let f_rj_mean = filled(&mut tape, p, d, -30.0);
        let (w_rp, _w_rj, fused) = bound.fuse(&mut tape, r_rp, r_rj, f_v, f_rp, f_rj_mean).unwrap();

        for &g in tape.value(w_rp) {
            assert!(g > 1.0 - 1e-6, "gate should saturate toward the proposer, got {g}");
        }
        for (got, want) in tape.value(fused).iter().zip(&r_rp_data) {
            assert!((got - want).abs() < 1e-6, "fused {got} should equal proposer {want}");
        }
    }

    #[test]
    fn equal_gate_inputs_average_the_branches() {
        let (p, k, d) = (3, 2, 4);
        let w = PrompterWeights::init(&dims(5, 7, d, 2, 1), k, &mut rng(13)).unwrap();
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let mut r = rng(14);
        let r_rp_data: Vec<f32> = (0..p * k).map(|_| r.random_range(0.05..0.95)).collect();
        let r_rj_data: Vec<f32> = (0..p * k).map(|_| r.random_range(0.05..0.95)).collect();
        let r_rp = tape.constant(&[p, k], r_rp_data.clone()).unwrap();
        let r_rj = tape.constant(&[p, k], r_rj_data.clone()).unwrap();
        let f_v = rand_const(&mut tape, p, d, &mut r);
        let shared: Vec<f32> = (0..p * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let f_rp = tape.constant(&[p, d], shared.clone()).unwrap();
        let f_rj_mean = tape.constant(&[p, d], shared).unwrap();
        let (w_rp, w_rj, fused) = bound.fuse(&mut tape, r_rp, r_rj, f_v, f_rp, f_rj_mean).unwrap();

        for (&a, &b) in tape.value(w_rp).iter().zip(tape.value(w_rj)) {
            assert_eq!(a, 0.5, "identical gate inputs must split the gate evenly");
            assert_eq!(b, 0.5);
        }
        for ((got, a), b) in tape.value(fused).iter().zip(&r_rp_data).zip(&r_rj_data) {
            let want = 0.5 * a + 0.5 * b;
            assert!((got - want).abs() < 1e-7, "fused {got} vs mean {want}");
        }
    }

    #[test]
    fn fused_scores_stay_between_the_branches() {
        let (p, k) = (6, 3);
        let w = PrompterWeights::init(&dims(5, 7, 8, 2, 2), k, &mut rng(15)).unwrap();
        for seed in 16..20 {
            let out = run_raw(&w, p, k, seed, None);
            let (rp, rj, fused) = (&out[0], &out[1], &out[4]);
            for i in 0..p * k {
                let (lo, hi) = (rp[i].min(rj[i]), rp[i].max(rj[i]));
                assert!(
                    fused[i] >= lo - 1e-6 && fused[i] <= hi + 1e-6,
                    "fused {} outside [{lo}, {hi}]",
                    fused[i]
                );
            }
        }
    }

    #[test]
    fn permuting_pair_rows_permutes_all_outputs() {
        let (p, k, d_v, d_l) = (6, 3, 5, 7);
        let w = PrompterWeights::init(&dims(d_v, d_l, 8, 2, 2), k, &mut rng(21)).unwrap();
        let mut r = rng(22);
        let v_data: Vec<f32> = (0..p * d_v).map(|_| r.random_range(-1.0..1.0)).collect();
        let rp_data: Vec<f32> = (0..p * d_l).map(|_| r.random_range(-1.0..1.0)).collect();
        let rj_data: Vec<Vec<f32>> =
            (0..k).map(|_| (0..p * d_l).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let perm = [3, 0, 5, 1, 4, 2];

        let permute = |data: &[f32], width: usize| -> Vec<f32> {
            let mut out = vec![0.0; data.len()];
            for (new_row, &old_row) in perm.iter().enumerate() {
                out[new_row * width..(new_row + 1) * width]
                    .copy_from_slice(&data[old_row * width..(old_row + 1) * width]);
            }
            out
        };

        let run = |v: &[f32], rp: &[f32], rj: &[Vec<f32>]| -> [Vec<f32>; 5] {
            let mut tape = Tape::new();
            let bound = w.bind(&mut tape).unwrap();
            let f_v = tape.constant(&[p, d_v], v.to_vec()).unwrap();
            let f_rp = tape.constant(&[p, d_l], rp.to_vec()).unwrap();
            let f_rj: Vec<Tensor> =
                rj.iter().map(|m| tape.constant(&[p, d_l], m.clone()).unwrap()).collect();
            let o = bound.forward_raw(&mut tape, f_v, f_rp, &f_rj).unwrap();
            [o.r_rp, o.r_rj, o.w_rp, o.w_rj, o.r].map(|t| tape.value(t).to_vec())
        };

        let base = run(&v_data, &rp_data, &rj_data);
        let rj_perm: Vec<Vec<f32>> = rj_data.iter().map(|m| permute(m, d_l)).collect();
        let shuffled = run(&permute(&v_data, d_v), &permute(&rp_data, d_l), &rj_perm);

        for (b, s) in base.iter().zip(&shuffled) {
            for (new_row, &old_row) in perm.iter().enumerate() {
                for col in 0..k {
                    let (x, y) = (b[old_row * k + col], s[new_row * k + col]);
                    assert!((x - y).abs() < 1e-6, "row {old_row} moved: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn relation_signal_comes_only_from_the_head() {
        // With zero language features and zero biases, nothing upstream of
        // the proposer head carries a relation index; making the head's
        // columns equal must make every score column equal.
        let (p, k, d_v, d_l, d) = (4, 3, 5, 7, 8);
        let mut w = PrompterWeights::init(&dims(d_v, d_l, d, 2, 2), k, &mut rng(23)).unwrap();
        w.visit_mut(&mut |p| {
            if p.shape.len() == 1 && p.name.ends_with(".b") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let head = &mut w.rp.head.w.data;
        for row in 0..d {
            let first = head[row * k];
            for col in 1..k {
                head[row * k + col] = first;
            }
        }

        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let mut r = rng(24);
        let f_v = rand_const(&mut tape, p, d_v, &mut r);
        let f_rp = filled(&mut tape, p, d_l, 0.0);
        let f_rj: Vec<Tensor> = (0..k).map(|_| filled(&mut tape, p, d_l, 0.0)).collect();
        let out = bound.forward_raw(&mut tape, f_v, f_rp, &f_rj).unwrap();
        let v = tape.value(out.r_rp);
        for row in 0..p {
            for col in 1..k {
                let (a, b) = (v[row * k], v[row * k + col]);
                assert!((a - b).abs() < 1e-6, "columns {a} vs {b} differ at row {row}");
            }
        }
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let (p, k) = (6, 3);
        let w = PrompterWeights::init(&dims(5, 7, 8, 2, 2), k, &mut rng(25)).unwrap();
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape).unwrap();
        let (f_v, f_rp, f_rj) = raw_inputs(&mut tape, p, 5, 7, k, &mut rng(26));
        let out = bound.forward_raw(&mut tape, f_v, f_rp, &f_rj).unwrap();
        let targets = tape.constant(&[p, k], vec![1.0; p * k]).unwrap();
        let loss = tape.bce_mean(out.r, targets).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads().unwrap();

        let mut missing = Vec::new();
        w.visit(&mut |param| {
            match grads.get(&param.name) {
                None => missing.push(param.name.clone()),
                Some(g) => {
                    assert!(g.iter().all(|v| v.is_finite()), "{} has a non-finite grad", param.name);
                }
            }
        });
        assert!(missing.is_empty(), "no grads for {missing:?}");
        for name in ["prompter.proj_v.w", "prompter.proj_rp.w", "prompter.proj_rj.w", "prompter.gate3.w", "prompter.rp.head.w", "prompter.rj.head.w"] {
            let g = &grads[name];
            assert!(g.iter().any(|v| *v != 0.0), "{name} never received gradient");
        }
    }

    #[test]
    fn model_weights_have_unique_names() {
        let model = ModelWeights::init(
            &ModelDims { d_map: 4, d_v: 5, d_l: 7, d: 8, heads: 2, decoder_blocks: 2 },
            3,
            &mut rng(27),
        )
        .unwrap();
        let mut names = std::collections::BTreeSet::new();
        let mut count = 0usize;
        model.visit(&mut |p| {
            names.insert(p.name.clone());
            count += 1;
        });
        assert_eq!(names.len(), count, "duplicate parameter names");
        assert!(names.iter().any(|n| n.starts_with("vision.")));
        assert!(names.iter().any(|n| n.starts_with("prompter.")));
    }

    #[test]
    fn zero_relations_and_zero_widths_are_rejected() {
        assert!(PrompterWeights::init(&dims(5, 7, 8, 2, 2), 0, &mut rng(28)).is_err());
        assert!(PrompterWeights::init(&dims(0, 7, 8, 2, 2), 3, &mut rng(28)).is_err());
        assert!(PrompterWeights::init(&dims(5, 7, 0, 2, 2), 3, &mut rng(28)).is_err());
    }
}
