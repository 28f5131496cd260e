//! Pairwise vision features.
//!
//! For every ordered pair of scene objects this module pools the feature map
//! under each mask, concatenates subject and object vectors, computes a
//! six-component spatial descriptor from the two boxes, and mixes everything
//! through three trainable linear layers:
//!
//! ```text
//! pooled_i, pooled_j --concat--> pair --FC--> a
//!                                              + --FC--> features per pair
//! boxes     --spatial_vector--> spatial --FC--> b
//! ```

use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear, Module};
use crate::scene::{mask_to_bbox, BBox, FeatureMap, Mask, Scene};
use crate::tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Enumeration of ordered object pairs: subject index outer, object index
/// inner, diagonal skipped. For 3 objects the rows are
/// `(0,1) (0,2) (1,0) (1,2) (2,0) (2,1)`.
#[derive(Debug, Clone)]
pub struct PairIndex {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Data(format!("pair enumeration needs >= 2 objects, got {n}")));
        }
        let mut pairs = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        Ok(PairIndex { n, pairs })
    }

    pub fn object_count(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, row: usize) -> (usize, usize) {
        self.pairs[row]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn row(&self, subject: usize, object: usize) -> Option<usize> {
        self.pairs.iter().position(|&(i, j)| i == subject && j == object)
    }
}

/// Mean of each feature-map channel over the mask's true cells. The mask must
/// already be at feature-map resolution and must be non-empty.
pub fn mask_pool(fm: &FeatureMap, mask: &Mask) -> Result<Vec<f32>> {
    if mask.height != fm.height || mask.width != fm.width {
        return Err(Error::Data(format!(
            "mask {}x{} does not match feature map {}x{}",
            mask.height, mask.width, fm.height, fm.width
        )));
    }
    let m = mask.count();
    if m == 0 {
        return Err(Error::Data("mask pools over zero cells".into()));
    }
    let mut out = vec![0.0f32; fm.channels];
    for (d, out_d) in out.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for r in 0..fm.height {
            for c in 0..fm.width {
                if mask.get(r, c) {
                    acc += fm.get(d, r, c);
                }
            }
        }
        *out_d = acc / m as f32;
    }
    Ok(out)
}

/// Intersection over union of two center-format boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix = (a.x + a.w / 2.0).min(b.x + b.w / 2.0) - (a.x - a.w / 2.0).max(b.x - b.w / 2.0);
    let iy = (a.y + a.h / 2.0).min(b.y + b.h / 2.0) - (a.y - a.h / 2.0).max(b.y - b.h / 2.0);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    inter / union
}

/// Six-component spatial descriptor for an ordered (subject, object) pair:
/// center offset normalized by the subject's scale, relative scale, box IoU,
/// and both aspect ratios. Identical boxes give exactly
/// `[0, 0, 1, 1, w/h, w/h]`.
pub fn spatial_vector(bi: &BBox, bj: &BBox) -> [f32; 6] {
    let scale_i = (bi.w * bi.h).sqrt();
    [
        (bj.x - bi.x) / scale_i,
        (bj.y - bi.y) / scale_i,
        ((bj.w * bj.h) / (bi.w * bi.h)).sqrt(),
        iou(bi, bj),
        bi.w / bi.h,
        bj.w / bj.h,
    ]
}

/// Trainable vision-side weights.
#[derive(Debug, Clone)]
pub struct VisionWeights {
    pub spatial: Linear,
    pub pair: Linear,
    pub out: Linear,
}

impl VisionWeights {
    pub fn init(d_map: usize, d_v: usize, rng: &mut ChaCha8Rng) -> Self {
        VisionWeights {
            spatial: Linear::init("vision.spatial", 6, d_v, rng),
            pair: Linear::init("vision.pair", 2 * d_map, d_v, rng),
            out: Linear::init("vision.out", d_v, d_v, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundVision> {
        Ok(BoundVision {
            spatial: self.spatial.bind(tape)?,
            pair: self.pair.bind(tape)?,
            out: self.out.bind(tape)?,
        })
    }
}

impl Module for VisionWeights {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a crate::nn::Param)) {
        self.spatial.visit(f);
        self.pair.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        self.spatial.visit_mut(f);
        self.pair.visit_mut(f);
        self.out.visit_mut(f);
    }
}

pub struct BoundVision {
    pub spatial: BoundLinear,
    pub pair: BoundLinear,
    pub out: BoundLinear,
}

/// Per-scene constants the vision forward consumes. These depend only on the
/// scene, so callers cache them across training steps.
#[derive(Debug, Clone)]
pub struct VisionInputs {
    /// `[P, 2*d_map]` row-major: pooled subject vector then object vector.
    pub pair_feats: Vec<f32>,
    /// `[P, 6]` row-major spatial descriptors.
    pub spatial: Vec<f32>,
    pub pair_count: usize,
    pub d_map: usize,
}

/// Pools, concatenates, and measures every ordered pair of `scene`.
pub fn vision_inputs(scene: &Scene, pairs: &PairIndex) -> Result<VisionInputs> {
    if pairs.object_count() != scene.objects.len() {
        return Err(Error::Data(format!(
            "pair index covers {} objects, scene has {}",
            pairs.object_count(),
            scene.objects.len()
        )));
    }
    let d = scene.feature_map.channels;
    let mut pooled = Vec::with_capacity(scene.objects.len());
    let mut boxes = Vec::with_capacity(scene.objects.len());
    for i in 0..scene.objects.len() {
        let mask = scene.feature_mask(i);
        pooled.push(mask_pool(&scene.feature_map, &mask)?);
        boxes.push(mask_to_bbox(&mask)?);
    }
    let mut pair_feats = Vec::with_capacity(pairs.len() * 2 * d);
    let mut spatial = Vec::with_capacity(pairs.len() * 6);
    for &(i, j) in pairs.pairs() {
        pair_feats.extend_from_slice(&pooled[i]);
        pair_feats.extend_from_slice(&pooled[j]);
        spatial.extend_from_slice(&spatial_vector(&boxes[i], &boxes[j]));
    }
    Ok(VisionInputs { pair_feats, spatial, pair_count: pairs.len(), d_map: d })
}

/// Runs the three linear layers over cached inputs. Returns the `[P, d_v]`
/// pairwise vision features, grad-enabled through the layer weights.
pub fn vision_forward(tape: &mut Tape, bound: &BoundVision, inputs: &VisionInputs) -> Result<Tensor> {
    let p = inputs.pair_count;
    let pair_leaf = tape.constant(&[p, 2 * inputs.d_map], inputs.pair_feats.clone())?;
    let spatial_leaf = tape.constant(&[p, 6], inputs.spatial.clone())?;
    let a = bound.pair.forward(tape, pair_leaf)?;
    let b = bound.spatial.forward(tape, spatial_leaf)?;
    let sum = tape.add(a, b)?;
    bound.out.forward(tape, sum)
}
