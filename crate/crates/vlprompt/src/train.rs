//! Multi-label relation training: targets from scene ground truth, a
//! three-part loss over both branch scores and the fused score, and a
//! deterministic AdamW loop over cached per-scene inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::db::{judger_key, proposer_key, retrieve, FeatureDb, LanguageFeatures};
use crate::nn::Module;
use crate::optim::{lr_at_step, AdamW, AdamWConfig};
use crate::prompter::{ModelWeights, PrompterOutput};
use crate::scene::{Scene, Vocabulary};
use crate::tensor::{Tape, Tensor};
use crate::vision::{vision_forward, vision_inputs, PairIndex, VisionInputs};

/// Multi-hot relation targets for every ordered object pair of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationTargets {
    pair_count: usize,
    relation_count: usize,
    /// `[pair][relation]` row-major, values in {0, 1}.
    data: Vec<f32>,
}

impl RelationTargets {
    /// Marks one cell per ground-truth triplet. A pair may carry several
    /// relations; rows for unrelated pairs stay all zero.
    pub fn from_scene(scene: &Scene, pairs: &PairIndex, relation_count: usize) -> Result<Self> {
        if pairs.object_count() != scene.objects.len() {
            return Err(Error::Data(format!(
                "pair index covers {} objects, scene has {}",
                pairs.object_count(),
                scene.objects.len()
            )));
        }
        let mut data = vec![0.0f32; pairs.len() * relation_count];
        for t in &scene.gt {
            let row = pairs.row(t.subject, t.object).ok_or_else(|| {
                Error::Data(format!(
                    "triplet ({}, {}, {}) does not name a valid ordered pair",
                    t.subject, t.object, t.relation
                ))
            })?;
            if t.relation >= relation_count {
                return Err(Error::Data(format!(
                    "triplet relation {} is out of range for {relation_count} relations",
                    t.relation
                )));
            }
            data[row * relation_count + t.relation] = 1.0;
        }
        Ok(RelationTargets { pair_count: pairs.len(), relation_count, data })
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// The targets as a `[P, K]` constant on `tape`.
    pub fn leaf(&self, tape: &mut Tape) -> Result<Tensor> {
        tape.constant(&[self.pair_count, self.relation_count], self.data.clone())
    }
}

/// Sum of the binary cross-entropies of the proposer scores, the judger
/// scores, and the fused scores against the same targets. Training all
/// three keeps both branches useful on their own, which is what lets the
/// gate choose between them.
pub fn relation_loss(tape: &mut Tape, output: &PrompterOutput, targets: Tensor) -> Result<Tensor> {
    let l_rp = tape.bce_mean(output.r_rp, targets)?;
    let l_rj = tape.bce_mean(output.r_rj, targets)?;
    let l_fused = tape.bce_mean(output.r, targets)?;
    let partial = tape.add(l_rp, l_rj)?;
    tape.add(partial, l_fused)
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub steps: usize,
    /// Steps at which the learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    /// Scenes averaged into each update, drawn round-robin from the
    /// training set.
    pub batch_size: usize,
    /// Seeds weight initialization in drivers that create the model.
    pub seed: u64,
    /// Weighting coefficient between a segmentation loss and the relation
    /// loss in the full system. The mask stage is not trained here, so the
    /// value is carried in configs but never applied.
    pub seg_loss_weight: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-2,
            steps: 200,
            milestones: Vec::new(),
            batch_size: 4,
            seed: 0,
            seg_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("step count must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "milestones must be strictly increasing, got {:?}",
                    self.milestones
                )));
            }
        }
        Ok(())
    }
}

/// Everything the loop needs per scene, computed once and reused every
/// epoch: pooled vision inputs, looked-up language features, and targets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub pairs: PairIndex,
    pub vision: VisionInputs,
    pub lang: LanguageFeatures,
    pub targets: RelationTargets,
}

impl PreparedScene {
    /// Builds one scene's cached inputs from already-validated databases.
    pub fn new(scene: &Scene, vocab: &Vocabulary, db_rp: &FeatureDb, db_rj: &FeatureDb) -> Result<Self> {
        let pairs = PairIndex::new(scene.objects.len())?;
        let vision = vision_inputs(scene, &pairs)?;
        let categories: Vec<usize> = scene.objects.iter().map(|o| o.category).collect();
        let lang = retrieve(db_rp, db_rj, &categories, vocab)?;
        let targets = RelationTargets::from_scene(scene, &pairs, vocab.relation_count())?;
        Ok(PreparedScene { pairs, vision, lang, targets })
    }

    /// Builds one scene's cached inputs from directly supplied language
    /// features (no databases), for synthetic pipelines and tests.
    pub fn with_language(scene: &Scene, vocab: &Vocabulary, lang: LanguageFeatures) -> Result<Self> {
        let pairs = PairIndex::new(scene.objects.len())?;
        if lang.pair_count() != pairs.len() || lang.relation_count() != vocab.relation_count() {
            return Err(Error::Data(format!(
                "language features cover {} pairs x {} relations, scene needs {} x {}",
                lang.pair_count(),
                lang.relation_count(),
                pairs.len(),
                vocab.relation_count()
            )));
        }
        let vision = vision_inputs(scene, &pairs)?;
        let targets = RelationTargets::from_scene(scene, &pairs, vocab.relation_count())?;
        Ok(PreparedScene { pairs, vision, lang, targets })
    }
}

/// Every database key the scenes will look up that is absent, sorted.
/// Empty means training can start.
pub fn missing_language_keys(
    scenes: &[Scene],
    vocab: &Vocabulary,
    db_rp: &FeatureDb,
    db_rj: &FeatureDb,
) -> Vec<String> {
    let mut missing = BTreeSet::new();
    for scene in scenes {
        for (i, a) in scene.objects.iter().enumerate() {
            for (j, b) in scene.objects.iter().enumerate() {
                if i == j {
                    continue;
                }
                let sub = vocab.object_name(a.category);
                let obj = vocab.object_name(b.category);
                let pk = proposer_key(sub, obj);
                if db_rp.get(&pk).is_none() {
                    missing.insert(pk);
                }
                for k in 0..vocab.relation_count() {
                    let jk = judger_key(sub, vocab.relation_name(k), obj);
                    if db_rj.get(&jk).is_none() {
                        missing.insert(jk);
                    }
                }
            }
        }
    }
    missing.into_iter().collect()
}

/// Prepares every scene, first checking the databases cover them and
/// reporting the complete list of absent keys if not.
pub fn prepare_scenes(
    scenes: &[Scene],
    vocab: &Vocabulary,
    db_rp: &FeatureDb,
    db_rj: &FeatureDb,
) -> Result<Vec<PreparedScene>> {
    let missing = missing_language_keys(scenes, vocab, db_rp, db_rj);
    if !missing.is_empty() {
        let same_category = scenes.iter().any(|s| {
            s.objects.iter().enumerate().any(|(i, a)| {
                s.objects.iter().enumerate().any(|(j, b)| i != j && a.category == b.category)
            })
        });
        let hint = if same_category {
            " (same-category pairs need databases built with include_same_category)"
        } else {
            ""
        };
        return Err(Error::Data(format!(
            "{} language feature keys are missing{hint}: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    scenes.iter().map(|s| PreparedScene::new(s, vocab, db_rp, db_rj)).collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

/// Per-step records of a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f32 {
        self.records.last().map(|r| r.loss).unwrap_or(f32::NAN)
    }
}

/// Serializes records as the log format: one JSON object per line.
pub fn write_log(records: &[StepRecord], out: &mut dyn Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("could not encode log record: {e}")))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io("training log".into(), e))?;
    }
    Ok(())
}

/// Runs AdamW over all model weights. Batches cycle round-robin through
/// `scenes` in order; each step averages gradients over the batch, applies
/// the step-decayed learning rate, and records `{step, loss, lr}`. The loss
/// recorded at a step is measured before that step's update.
///
/// Single-threaded and fully deterministic: the same model, scenes, and
/// config produce a bit-identical loss curve.
pub fn train(model: &mut ModelWeights, scenes: &[PreparedScene], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to train on".into()));
    }
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at_step(cfg.lr, &cfg.milestones, step);
        let mut batch_grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut batch_loss = 0.0f32;
        for b in 0..cfg.batch_size {
            let scene = &scenes[(step * cfg.batch_size + b) % scenes.len()];
            let (loss, grads) = scene_loss_and_grads(model, scene)?;
            batch_loss += loss;
            for (name, g) in grads {
                match batch_grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => {
                        batch_grads.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for g in batch_grads.values_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        opt.step(lr, model, &batch_grads)?;
        records.push(StepRecord { step, loss: batch_loss * inv, lr });
    }
    Ok(TrainReport { records })
}

/// Forward and backward for one scene on a fresh tape; returns the scalar
/// loss and the per-parameter gradients.
fn scene_loss_and_grads(model: &ModelWeights, scene: &PreparedScene) -> Result<(f32, BTreeMap<String, Vec<f32>>)> {
    let mut tape = Tape::new();
    let bound_v = model.vision.bind(&mut tape)?;
    let bound_p = model.prompter.bind(&mut tape)?;
    let f_v = vision_forward(&mut tape, &bound_v, &scene.vision)?;
    let out = bound_p.forward(&mut tape, f_v, &scene.lang)?;
    let targets = scene.targets.leaf(&mut tape)?;
    let loss = relation_loss(&mut tape, &out, targets)?;
    let loss_value = tape.value(loss)[0];
    tape.backward(loss)?;
    Ok((loss_value, tape.param_grads()?))
}

/// Evaluates the mean training loss of `model` over `scenes` without
/// touching any weights.
pub fn mean_loss(model: &ModelWeights, scenes: &[PreparedScene]) -> Result<f32> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let mut total = 0.0f32;
    for scene in scenes {
        let mut tape = Tape::new();
        let bound_v = model.vision.bind(&mut tape)?;
        let bound_p = model.prompter.bind(&mut tape)?;
        let f_v = vision_forward(&mut tape, &bound_v, &scene.vision)?;
        let out = bound_p.forward(&mut tape, f_v, &scene.lang)?;
        let targets = scene.targets.leaf(&mut tape)?;
        let loss = relation_loss(&mut tape, &out, targets)?;
        total += tape.value(loss)[0];
    }
    Ok(total / scenes.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompter::ModelDims;
    use crate::scene::{synth_scene, synthetic_vocabulary, SynthParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_dims(d_map: usize) -> ModelDims {
        ModelDims { d_map, d_v: 6, d_l: 5, d: 8, heads: 2, decoder_blocks: 1 }
    }

    /// Deterministic random language features sized for `scene`.
    fn random_lang(pair_count: usize, k: usize, d_l: usize, seed: u64) -> LanguageFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rp: Vec<f32> = (0..pair_count * d_l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rj: Vec<f32> = (0..k * pair_count * d_l).map(|_| rng.random_range(-1.0..1.0)).collect();
        LanguageFeatures::from_parts(pair_count, k, d_l, rp, rj).unwrap()
    }

    #[test]
    fn targets_mirror_ground_truth() {
        let vocab = synthetic_vocabulary(5, 6).unwrap();
        let params = SynthParams { d_map: 4, ..SynthParams::default() };
        let scene = synth_scene(&vocab, &params, 3).unwrap();
        let pairs = PairIndex::new(scene.objects.len()).unwrap();
        let targets = RelationTargets::from_scene(&scene, &pairs, 6).unwrap();

        let mut expected_ones = BTreeSet::new();
        for t in &scene.gt {
            let row = pairs.row(t.subject, t.object).unwrap();
            expected_ones.insert(row * 6 + t.relation);
        }
        assert!(!expected_ones.is_empty());
        for (i, &v) in targets.values().iter().enumerate() {
            let want = if expected_ones.contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(v, want, "cell {i}");
        }
    }

    #[test]
    fn out_of_range_relation_is_rejected() {
        let vocab = synthetic_vocabulary(5, 6).unwrap();
        let params = SynthParams { d_map: 4, ..SynthParams::default() };
        let mut scene = synth_scene(&vocab, &params, 3).unwrap();
        scene.gt[0].relation = 6;
        let pairs = PairIndex::new(scene.objects.len()).unwrap();
        assert!(RelationTargets::from_scene(&scene, &pairs, 6).is_err());
    }

    /// Fabricates a PrompterOutput whose five tensors are given constants.
    fn fixed_output(tape: &mut Tape, p: usize, k: usize, rp: &[f32], rj: &[f32], fused: &[f32]) -> PrompterOutput {
        let half = vec![0.5f32; p * k];
        PrompterOutput {
            r_rp: tape.constant(&[p, k], rp.to_vec()).unwrap(),
            r_rj: tape.constant(&[p, k], rj.to_vec()).unwrap(),
            w_rp: tape.constant(&[p, k], half.clone()).unwrap(),
            w_rj: tape.constant(&[p, k], half).unwrap(),
            r: tape.constant(&[p, k], fused.to_vec()).unwrap(),
        }
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let (p, k) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rp: Vec<f32> = (0..p * k).map(|_| rng.random_range(0.05..0.95)).collect();
        let rj: Vec<f32> = (0..p * k).map(|_| rng.random_range(0.05..0.95)).collect();
        let fused: Vec<f32> = (0..p * k).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<f32> = (0..p * k).map(|_| if rng.random_range(0..2) == 0 { 0.0 } else { 1.0 }).collect();

        let mut tape = Tape::new();
        let out = fixed_output(&mut tape, p, k, &rp, &rj, &fused);
        let targets = tape.constant(&[p, k], y.clone()).unwrap();
        let loss = relation_loss(&mut tape, &out, targets).unwrap();
        let got = tape.value(loss)[0] as f64;

        let bce = |pred: &[f32]| -> f64 {
            let mut acc = 0.0f64;
            for (&pv, &yv) in pred.iter().zip(&y) {
                let (pv, yv) = (pv as f64, yv as f64);
                acc -= yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln();
            }
            acc / pred.len() as f64
        };
        let want = bce(&rp) + bce(&rj) + bce(&fused);
        assert!((got - want).abs() < 1e-6, "loss {got} vs oracle {want}");
    }

    #[test]
    fn perfect_predictions_give_negligible_loss() {
        let (p, k) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f32> = (0..p * k).map(|_| if rng.random_range(0..2) == 0 { 0.0 } else { 1.0 }).collect();
        let mut tape = Tape::new();
        let out = fixed_output(&mut tape, p, k, &y, &y, &y);
        let targets = tape.constant(&[p, k], y).unwrap();
        let loss = relation_loss(&mut tape, &out, targets).unwrap();
        let bound = 3.0 * 1e-7 * (1e-7f32).ln().abs();
        assert!(tape.value(loss)[0] <= bound, "loss {} above {bound}", tape.value(loss)[0]);
    }

    #[test]
    fn coin_flip_predictions_cost_three_ln_two() {
        let (p, k) = (3, 4);
        let half = vec![0.5f32; p * k];
        let y: Vec<f32> = (0..p * k).map(|i| (i % 2) as f32).collect();
        let mut tape = Tape::new();
        let out = fixed_output(&mut tape, p, k, &half, &half, &half);
        let targets = tape.constant(&[p, k], y).unwrap();
        let loss = relation_loss(&mut tape, &out, targets).unwrap();
        let want = 3.0 * std::f32::consts::LN_2;
        assert!((tape.value(loss)[0] - want).abs() < 1e-5);
    }

    fn toy_setup(n_scenes: usize, seed: u64) -> (Vocabulary, Vec<PreparedScene>, ModelWeights) {
        let vocab = synthetic_vocabulary(5, 6).unwrap();
        let params = SynthParams { d_map: 4, ..SynthParams::default() };
        let scenes: Vec<PreparedScene> = (0..n_scenes)
            .map(|i| {
                let scene = synth_scene(&vocab, &params, 100 + i as u64).unwrap();
                let pairs = PairIndex::new(scene.objects.len()).unwrap();
                let lang = random_lang(pairs.len(), 6, 5, 50 + i as u64);
                PreparedScene::with_language(&scene, &vocab, lang).unwrap()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelWeights::init(&toy_dims(4), 6, &mut rng).unwrap();
        (vocab, scenes, model)
    }

    #[test]
    fn untrained_loss_sits_near_three_ln_two() {
        let (_vocab, scenes, mut model) = toy_setup(2, 7);
        let cfg = TrainConfig { steps: 1, batch_size: 2, ..TrainConfig::default() };
        let report = train(&mut model, &scenes, &cfg).unwrap();
        let want = 3.0 * std::f32::consts::LN_2;
        let got = report.records[0].loss;
        assert!((got - want).abs() / want < 0.10, "initial loss {got}, expected within 10% of {want}");
    }

    #[test]
    fn same_seed_gives_bit_identical_curves() {
        let runs: Vec<Vec<u32>> = (0..2)
            .map(|_| {
                let (_v, scenes, mut model) = toy_setup(3, 8);
                let cfg = TrainConfig { steps: 6, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
                let report = train(&mut model, &scenes, &cfg).unwrap();
                report.records.iter().map(|r| r.loss.to_bits()).collect()
            })
            .collect();
        assert_eq!(runs[0], runs[1], "loss curves diverged across identical runs");
    }

    #[test]
    fn short_run_reduces_loss() {
        let (_vocab, scenes, mut model) = toy_setup(3, 9);
        let before = mean_loss(&model, &scenes).unwrap();
        let cfg = TrainConfig { steps: 30, batch_size: 3, lr: 1e-3, ..TrainConfig::default() };
        train(&mut model, &scenes, &cfg).unwrap();
        let after = mean_loss(&model, &scenes).unwrap();
        assert!(after < before, "loss went from {before} to {after}");
    }

    #[test]
    fn milestones_cut_the_recorded_lr() {
        let (_vocab, scenes, mut model) = toy_setup(2, 10);
        let cfg = TrainConfig { steps: 4, batch_size: 1, milestones: vec![2], ..TrainConfig::default() };
        let report = train(&mut model, &scenes, &cfg).unwrap();
        assert_eq!(report.records[1].lr, 1e-4);
        assert_eq!(report.records[2].lr, 1e-5);
        assert_eq!(report.records[3].lr, 1e-5);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { milestones: vec![5, 5], ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { milestones: vec![9, 3], ..ok }.validate().is_err());
    }

    #[test]
    fn log_lines_are_one_json_object_per_step() {
        let records = vec![
            StepRecord { step: 0, loss: 2.0795, lr: 1e-4 },
            StepRecord { step: 1, loss: 1.9, lr: 1e-5 },
        ];
        let mut buf = Vec::new();
        write_log(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (line, rec) in lines.iter().zip(&records) {
            let back: StepRecord = serde_json::from_str(line).unwrap();
            assert_eq!(back.step, rec.step);
            assert_eq!(back.loss.to_bits(), rec.loss.to_bits());
            assert_eq!(back.lr.to_bits(), rec.lr.to_bits());
        }
    }

    #[test]
    fn missing_keys_are_reported_in_full_before_training() {
        use crate::lang::backend::MockEmbed;
        use crate::lang::db::{BuildOptions, DbKind};

        let vocab = synthetic_vocabulary(3, 2).unwrap();
        let params = SynthParams { n_objects: 3, d_map: 4, ..SynthParams::default() };
        let scene = synth_scene(&vocab, &params, 11).unwrap();
        let embed = MockEmbed::new(5);

        // Proposer database complete, judger database cut short.
        let mut db_rp = FeatureDb::new(DbKind::Proposer, 5, embed.id(), &vocab);
        db_rp.build(&vocab, &embed, &BuildOptions::default()).unwrap();
        let mut db_rj = FeatureDb::new(DbKind::Judger, 5, embed.id(), &vocab);
        let opts = BuildOptions { max_calls: Some(3), ..BuildOptions::default() };
        db_rj.build(&vocab, &embed, &opts).unwrap();

        let missing = missing_language_keys(std::slice::from_ref(&scene), &vocab, &db_rp, &db_rj);
        assert!(!missing.is_empty());
        let err = prepare_scenes(std::slice::from_ref(&scene), &vocab, &db_rp, &db_rj).unwrap_err();
        let msg = err.to_string();
        for key in &missing {
            assert!(msg.contains(key.as_str()), "error message lacks missing key {key}: {msg}");
        }

        // Completing the judger database clears the way.
        db_rj.build(&vocab, &embed, &BuildOptions::default()).unwrap();
        assert!(prepare_scenes(std::slice::from_ref(&scene), &vocab, &db_rp, &db_rj).is_ok());
    }
}
