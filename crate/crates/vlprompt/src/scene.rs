//! Scenes on disk and in memory: vocabularies, masks, feature maps, ground
//! truth, and a seeded synthetic scene generator.
//!
//! A scene is a directory holding `manifest.json` (dimensions, objects as
//! run-length masks, ground-truth triplets, vocabulary fingerprint) and
//! `feature_map.bin` (raw little-endian f32, channel-major). Loads verify
//! every declared invariant; saves are byte-deterministic so load/save
//! round-trips are exact.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{hex64, Fnv64};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_MAP_FILE: &str = "feature_map.bin";

/// Object and relation category names. Names are unique, non-empty, and may
/// not contain `#`, which the feature-DB key format reserves as a separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    objects: Vec<String>,
    relations: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyJson {
    objects: Vec<String>,
    relations: Vec<String>,
}

impl Vocabulary {
    pub fn new(objects: Vec<String>, relations: Vec<String>) -> Result<Self> {
        for (kind, names) in [("object", &objects), ("relation", &relations)] {
            if names.is_empty() {
                return Err(Error::Data(format!("vocabulary has no {kind} names")));
            }
            let mut seen = std::collections::BTreeSet::new();
            for n in names {
                if n.is_empty() {
                    return Err(Error::Data(format!("empty {kind} name")));
                }
                if n.contains('#') {
                    return Err(Error::Data(format!("{kind} name {n:?} contains reserved '#'")));
                }
                if !seen.insert(n) {
                    return Err(Error::Data(format!("duplicate {kind} name {n:?}")));
                }
            }
        }
        Ok(Vocabulary { objects, relations })
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn object_name(&self, i: usize) -> &str {
        &self.objects[i]
    }

    pub fn relation_name(&self, k: usize) -> &str {
        &self.relations[k]
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|n| n == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|n| n == name)
    }

    /// Stable fingerprint over both name lists, order-sensitive.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new().write_str("objects");
        for n in &self.objects {
            h = h.write_str(n);
        }
        h = h.write_str("relations");
        for n in &self.relations {
            h = h.write_str(n);
        }
        h.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = VocabularyJson { objects: self.objects.clone(), relations: self.relations.clone() };
        let mut text = serde_json::to_string_pretty(&json)
            .map_err(|e| Error::Data(format!("vocabulary encode: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let json: VocabularyJson = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("vocabulary {}: {e}", path.display())))?;
        Vocabulary::new(json.objects, json.relations)
    }
}

/// Binary mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Data(format!(
                "mask bits {} do not fill {height}x{width}",
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major run lengths, alternating background/foreground and starting
    /// with a (possibly zero) background run. Runs sum to `height * width`.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let total: usize = runs.iter().sum();
        if total != height * width {
            return Err(Error::Data(format!(
                "rle sums to {total}, mask is {height}x{width}"
            )));
        }
        let mut bits = Vec::with_capacity(total);
        let mut fg = false;
        for &run in runs {
            bits.extend(std::iter::repeat_n(fg, run));
            fg = !fg;
        }
        Mask::new(height, width, bits)
    }

    /// Nearest-neighbor resample. Output cell `(r, c)` copies source cell
    /// `(floor(r*H/H'), floor(c*W/W'))`.
    pub fn rescale(&self, height: usize, width: usize) -> Mask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Mask::empty(height, width);
        for r in 0..height {
            let sr = r * self.height / height;
            for c in 0..width {
                let sc = c * self.width / width;
                out.set(r, c, self.get(sr, sc));
            }
        }
        out
    }
}

/// Axis-aligned box in cell units: center `(x, y)` plus width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

/// Tight box around a mask's true cells. A single cell at row `r`, column `c`
/// maps to center `(c + 0.5, r + 0.5)` with unit width and height.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                any = true;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if !any {
        return Err(Error::Data("empty mask has no bounding box".into()));
    }
    let w = (c1 - c0 + 1) as f32;
    let h = (r1 - r0 + 1) as f32;
    Ok(BBox { x: c0 as f32 + w / 2.0, y: r0 as f32 + h / 2.0, w, h })
}

/// Dense feature map, channel-major: `data[d][h][w]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "feature map data {} does not fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn get(&self, d: usize, r: usize, c: usize) -> f32 {
        self.data[(d * self.height + r) * self.width + c]
    }

    pub fn set(&mut self, d: usize, r: usize, c: usize, v: f32) {
        self.data[(d * self.height + r) * self.width + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub subject: usize,
    pub object: usize,
    pub relation: usize,
}

#[derive(Debug, Clone)]
pub struct ObjectInstance {
    pub category: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub feat_height: usize,
    pub feat_width: usize,
    pub feature_map: FeatureMap,
    pub objects: Vec<ObjectInstance>,
    pub gt: Vec<Triplet>,
    pub vocab_fingerprint: u64,
}

impl Scene {
    /// Object mask resampled to feature-map resolution.
    pub fn feature_mask(&self, i: usize) -> Mask {
        self.objects[i].mask.rescale(self.feat_height, self.feat_width)
    }

    fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(Error::Data(format!(
                "scene needs at least 2 objects, has {}",
                self.objects.len()
            )));
        }
        if self.vocab_fingerprint != vocab.fingerprint() {
            return Err(Error::Data(format!(
                "scene was built against vocabulary {}, got {}",
                hex64(self.vocab_fingerprint),
                hex64(vocab.fingerprint())
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.category >= vocab.object_count() {
                return Err(Error::Data(format!(
                    "object {i} category {} out of range (C = {})",
                    o.category,
                    vocab.object_count()
                )));
            }
            if o.mask.height != self.height || o.mask.width != self.width {
                return Err(Error::Data(format!(
                    "object {i} mask is {}x{}, scene is {}x{}",
                    o.mask.height, o.mask.width, self.height, self.width
                )));
            }
            if o.mask.count() == 0 {
                return Err(Error::Data(format!("object {i} mask is empty")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.gt {
            if t.subject >= self.objects.len() || t.object >= self.objects.len() {
                return Err(Error::Data(format!(
                    "gt triplet ({}, {}, {}) references a missing object",
                    t.subject, t.object, t.relation
                )));
            }
            if t.subject == t.object {
                return Err(Error::Data(format!(
                    "gt triplet has subject == object == {}",
                    t.subject
                )));
            }
            if t.relation >= vocab.relation_count() {
                return Err(Error::Data(format!(
                    "gt relation {} out of range (K = {})",
                    t.relation,
                    vocab.relation_count()
                )));
            }
            if !seen.insert((t.subject, t.object, t.relation)) {
                return Err(Error::Data(format!(
                    "duplicate gt triplet ({}, {}, {})",
                    t.subject, t.object, t.relation
                )));
            }
        }
        if self.feature_map.height != self.feat_height
            || self.feature_map.width != self.feat_width
        {
            return Err(Error::Data("feature map does not match declared resolution".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ObjectJson {
    category: usize,
    rle: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    height: usize,
    width: usize,
    feat_height: usize,
    feat_width: usize,
    d_map: usize,
    vocab_hash: String,
    objects: Vec<ObjectJson>,
    gt_triplets: Vec<[usize; 3]>,
}

/// Writes `manifest.json` plus `feature_map.bin` under `dir`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = ManifestJson {
        height: scene.height,
        width: scene.width,
        feat_height: scene.feat_height,
        feat_width: scene.feat_width,
        d_map: scene.feature_map.channels,
        vocab_hash: hex64(scene.vocab_fingerprint),
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectJson { category: o.category, rle: o.mask.to_rle() })
            .collect(),
        gt_triplets: scene.gt.iter().map(|t| [t.subject, t.object, t.relation]).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    text.push('\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut blob = Vec::with_capacity(scene.feature_map.data.len() * 4);
    for v in &scene.feature_map.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let bpath = dir.join(FEATURE_MAP_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(bpath.display().to_string(), e))?;
    Ok(())
}

/// Reads a scene directory and checks it against `vocab`.
pub fn load_scene(dir: &Path, vocab: &Vocabulary) -> Result<Scene> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: ManifestJson = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("manifest {}: {e}", mpath.display())))?;

    let bpath = dir.join(FEATURE_MAP_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(bpath.display().to_string(), e))?;
    let want = manifest.d_map * manifest.feat_height * manifest.feat_width * 4;
    if blob.len() != want {
        return Err(Error::Data(format!(
            "feature map blob is {} bytes, manifest wants {want}",
            blob.len()
        )));
    }
    let data: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let feature_map = FeatureMap::new(manifest.d_map, manifest.feat_height, manifest.feat_width, data)?;

    let vocab_fingerprint = u64::from_str_radix(&manifest.vocab_hash, 16)
        .map_err(|_| Error::Data(format!("bad vocab_hash {:?}", manifest.vocab_hash)))?;

    let objects = manifest
        .objects
        .iter()
        .map(|o| {
            Ok(ObjectInstance {
                category: o.category,
                mask: Mask::from_rle(manifest.height, manifest.width, &o.rle)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gt = manifest
        .gt_triplets
        .iter()
        .map(|&[s, o, r]| Triplet { subject: s, object: o, relation: r })
        .collect();

    let scene = Scene {
        height: manifest.height,
        width: manifest.width,
        feat_height: manifest.feat_height,
        feat_width: manifest.feat_width,
        feature_map,
        objects,
        gt,
        vocab_fingerprint,
    };
    scene.validate(vocab)?;
    Ok(scene)
}

/// How ground-truth relations are derived from scene geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// `(i, j, 0)` whenever object `i`'s box center is strictly left of
    /// object `j`'s.
    LeftOf,
    /// Exactly one relation per ordered pair, derived from the dominant
    /// center offset direction and, when K > 4, the category sum parity.
    CatSpatial,
}

impl Rule {
    pub fn parse(s: &str) -> Result<Rule> {
        match s {
            "left-of" => Ok(Rule::LeftOf),
            "cat-spatial" => Ok(Rule::CatSpatial),
            other => Err(Error::Config(format!("unknown rule {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::LeftOf => "left-of",
            Rule::CatSpatial => "cat-spatial",
        }
    }

    /// Relations for one ordered pair given box centers and categories.
    pub fn relations(
        self,
        bi: &BBox,
        bj: &BBox,
        cat_i: usize,
        cat_j: usize,
        k: usize,
    ) -> Vec<usize> {
        match self {
            Rule::LeftOf => {
                if bi.x < bj.x {
                    vec![0]
                } else {
                    vec![]
                }
            }
            Rule::CatSpatial => {
                let dx = bj.x - bi.x;
                let dy = bj.y - bi.y;
                let base = if dx.abs() >= dy.abs() {
                    if dx >= 0.0 {
                        0
                    } else {
                        1
                    }
                } else if dy >= 0.0 {
                    2
                } else {
                    3
                };
                let rel = if k > 4 && (cat_i + cat_j) % 2 == 1 {
                    4 + (cat_i + cat_j + base) % (k - 4)
                } else {
                    base % k
                };
                vec![rel]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_objects: usize,
    pub height: usize,
    pub width: usize,
    pub d_map: usize,
    pub rule: Rule,
    /// Standard deviation of the additive cell noise.
    pub noise: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { n_objects: 4, height: 16, width: 16, d_map: 16, rule: Rule::CatSpatial, noise: 0.05 }
    }
}

pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; u1 kept away from zero.
    let u1: f32 = rng.random_range(1e-7f32..1.0);
    let u2: f32 = rng.random_range(0.0f32..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Per-category channel signature planted inside that category's masks.
/// Depends only on the vocabulary and channel count, not the scene seed.
pub fn category_signature(vocab: &Vocabulary, category: usize, d_map: usize) -> Vec<f32> {
    let seed = Fnv64::with_seed(vocab.fingerprint())
        .write_str("signature")
        .write_u64(category as u64)
        .write_u64(d_map as u64)
        .finish();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..d_map).map(|_| gauss(&mut rng)).collect()
}

use rand::SeedableRng;

/// Deterministically generates one scene: non-overlapping rectangular
/// objects, a feature map carrying each category's linear signature inside
/// its mask, and ground truth derived from `params.rule`. The same seed and
/// parameters always produce an identical scene.
pub fn synth_scene(vocab: &Vocabulary, params: &SynthParams, seed: u64) -> Result<Scene> {
    let c = vocab.object_count();
    let k = vocab.relation_count();
    let n = params.n_objects;
    if n < 2 {
        return Err(Error::Config(format!("scene needs at least 2 objects, asked for {n}")));
    }
    if n > 4 * c {
        return Err(Error::Config(format!(
            "{n} objects over {c} categories exceeds the repetition bound of 4 per category"
        )));
    }
    if params.height < 4 || params.width < 4 {
        return Err(Error::Config(format!(
            "grid {}x{} is too small to place objects",
            params.height, params.width
        )));
    }
    if params.d_map == 0 {
        return Err(Error::Config("feature map needs at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Categories: distinct while they fit, repetition beyond that.
    let categories: Vec<usize> = if n <= c {
        let mut all: Vec<usize> = (0..c).collect();
        for i in 0..n {
            let j = rng.random_range(i..c);
            all.swap(i, j);
        }
        all.truncate(n);
        all
    } else {
        (0..n).map(|_| rng.random_range(0..c)).collect()
    };

    // Non-overlapping axis-aligned rectangles, bounded retries.
    let max_w = (params.width / 2).max(2);
    let max_h = (params.height / 2).max(2);
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new(); // (r0, c0, h, w)
    let mut attempts = 0;
    while rects.len() < n {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Data(format!(
                "could not place {n} non-overlapping objects on a {}x{} grid",
                params.height, params.width
            )));
        }
        let h = rng.random_range(2..=max_h);
        let w = rng.random_range(2..=max_w);
        let r0 = rng.random_range(0..=params.height - h);
        let c0 = rng.random_range(0..=params.width - w);
        let overlaps = rects.iter().any(|&(rr, cc, hh, ww)| {
            r0 < rr + hh && rr < r0 + h && c0 < cc + ww && cc < c0 + w
        });
        if !overlaps {
            rects.push((r0, c0, h, w));
        }
    }

    let mut objects = Vec::with_capacity(n);
    for (&cat, &(r0, c0, h, w)) in categories.iter().zip(&rects) {
        let mut mask = Mask::empty(params.height, params.width);
        for r in r0..r0 + h {
            for cc in c0..c0 + w {
                mask.set(r, cc, true);
            }
        }
        objects.push(ObjectInstance { category: cat, mask });
    }

    // Feature map at mask resolution: background noise everywhere, the
    // category signature added inside each object's mask.
    let mut fm = FeatureMap::new(
        params.d_map,
        params.height,
        params.width,
        vec![0.0; params.d_map * params.height * params.width],
    )?;
    for d in 0..params.d_map {
        for r in 0..params.height {
            for cc in 0..params.width {
                fm.set(d, r, cc, gauss(&mut rng) * params.noise);
            }
        }
    }
    for o in &objects {
        let sig = category_signature(vocab, o.category, params.d_map);
        for (d, &sig_d) in sig.iter().enumerate() {
            for r in 0..params.height {
                for cc in 0..params.width {
                    if o.mask.get(r, cc) {
                        let v = fm.get(d, r, cc) + sig_d;
                        fm.set(d, r, cc, v);
                    }
                }
            }
        }
    }

    let boxes: Vec<BBox> =
        objects.iter().map(|o| mask_to_bbox(&o.mask)).collect::<Result<Vec<_>>>()?;
    let mut gt = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for rel in params.rule.relations(&boxes[i], &boxes[j], objects[i].category, objects[j].category, k) {
                gt.push(Triplet { subject: i, object: j, relation: rel });
            }
        }
    }

    let scene = Scene {
        height: params.height,
        width: params.width,
        feat_height: params.height,
        feat_width: params.width,
        feature_map: fm,
        objects,
        gt,
        vocab_fingerprint: vocab.fingerprint(),
    };
    scene.validate(vocab)?;
    Ok(scene)
}

/// Convenience vocabulary for synthetic runs: `thing-00 .. thing-(C-1)` and
/// `rel-00 .. rel-(K-1)`.
pub fn synthetic_vocabulary(c: usize, k: usize) -> Result<Vocabulary> {
    Vocabulary::new(
        (0..c).map(|i| format!("thing-{i:02}")).collect(),
        (0..k).map(|i| format!("rel-{i:02}")).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        synthetic_vocabulary(5, 6).unwrap()
    }

    #[test]
    fn vocabulary_rejects_bad_names() {
        assert!(Vocabulary::new(vec![], vec!["a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], vec!["r".into()]).is_err());
        assert!(Vocabulary::new(vec!["a#b".into()], vec!["r".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into()], vec!["".into()]).is_err());
    }

    #[test]
    fn fingerprint_is_order_sensitive() {
        let a = Vocabulary::new(vec!["x".into(), "y".into()], vec!["r".into()]).unwrap();
        let b = Vocabulary::new(vec!["y".into(), "x".into()], vec!["r".into()]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn rle_roundtrip() {
        let mut m = Mask::empty(4, 4);
        m.set(0, 0, true);
        m.set(2, 1, true);
        m.set(2, 2, true);
        m.set(3, 3, true);
        let rle = m.to_rle();
        assert_eq!(rle.iter().sum::<usize>(), 16);
        let back = Mask::from_rle(4, 4, &rle).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn rle_all_foreground_starts_with_zero_run() {
        let m = Mask::new(2, 2, vec![true; 4]).unwrap();
        assert_eq!(m.to_rle(), vec![0, 4]);
    }

    #[test]
    fn rle_wrong_total_rejected() {
        assert!(Mask::from_rle(2, 2, &[1, 2]).is_err());
    }

    #[test]
    fn bbox_single_cell() {
        let mut m = Mask::empty(4, 4);
        m.set(2, 1, true);
        let b = mask_to_bbox(&m).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (1.5, 2.5, 1.0, 1.0));
    }

    #[test]
    fn bbox_spanning_block() {
        let mut m = Mask::empty(6, 6);
        for r in 1..4 {
            for c in 2..6 {
                m.set(r, c, true);
            }
        }
        let b = mask_to_bbox(&m).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (4.0, 2.5, 4.0, 3.0));
    }

    #[test]
    fn bbox_empty_mask_rejected() {
        assert!(mask_to_bbox(&Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn rescale_halves_cleanly() {
        let mut m = Mask::empty(4, 4);
        for r in 0..2 {
            for c in 0..4 {
                m.set(r, c, true);
            }
        }
        let s = m.rescale(2, 2);
        assert!(s.get(0, 0) && s.get(0, 1));
        assert!(!s.get(1, 0) && !s.get(1, 1));
    }

    #[test]
    fn scene_roundtrip_is_byte_exact() {
        let v = vocab();
        let scene = synth_scene(&v, &SynthParams::default(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        save_scene(&scene, &d1).unwrap();
        let loaded = load_scene(&d1, &v).unwrap();
        save_scene(&loaded, &d2).unwrap();
        let m1 = std::fs::read(d1.join(MANIFEST_FILE)).unwrap();
        let m2 = std::fs::read(d2.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2);
        let b1 = std::fs::read(d1.join(FEATURE_MAP_FILE)).unwrap();
        let b2 = std::fs::read(d2.join(FEATURE_MAP_FILE)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn loader_rejects_wrong_vocabulary() {
        let v = vocab();
        let scene = synth_scene(&v, &SynthParams::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let other = synthetic_vocabulary(5, 7).unwrap();
        assert!(load_scene(dir.path(), &other).is_err());
    }

    #[test]
    fn loader_rejects_truncated_blob() {
        let v = vocab();
        let scene = synth_scene(&v, &SynthParams::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let bpath = dir.path().join(FEATURE_MAP_FILE);
        let blob = std::fs::read(&bpath).unwrap();
        std::fs::write(&bpath, &blob[..blob.len() - 8]).unwrap();
        assert!(load_scene(dir.path(), &v).is_err());
    }

    #[test]
    fn loader_rejects_out_of_range_category() {
        let v = vocab();
        let scene = synth_scene(&v, &SynthParams::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap().replace("\"category\": 0", "\"category\": 99");
        std::fs::write(&mpath, text).unwrap();
        assert!(load_scene(dir.path(), &v).is_err());
    }

    #[test]
    fn synth_same_seed_bit_identical() {
        let v = vocab();
        let a = synth_scene(&v, &SynthParams::default(), 5).unwrap();
        let b = synth_scene(&v, &SynthParams::default(), 5).unwrap();
        assert_eq!(a.feature_map.data, b.feature_map.data);
        assert_eq!(a.gt, b.gt);
        let c = synth_scene(&v, &SynthParams::default(), 6).unwrap();
        assert_ne!(a.feature_map.data, c.feature_map.data);
    }

    #[test]
    fn synth_rejects_excessive_objects() {
        let v = synthetic_vocabulary(2, 3).unwrap();
        let p = SynthParams { n_objects: 9, ..Default::default() };
        assert!(synth_scene(&v, &p, 0).is_err());
    }

    #[test]
    fn synth_categories_distinct_when_they_fit() {
        let v = vocab();
        let s = synth_scene(&v, &SynthParams::default(), 3).unwrap();
        let mut cats: Vec<usize> = s.objects.iter().map(|o| o.category).collect();
        cats.sort();
        cats.dedup();
        assert_eq!(cats.len(), s.objects.len());
    }

    #[test]
    fn left_of_rule_emits_relation_zero() {
        let v = vocab();
        let p = SynthParams { rule: Rule::LeftOf, ..Default::default() };
        // Scan a few seeds for a scene where object 0 sits left of object 1;
        // the rule must then include (0, 1, 0).
        let mut found = false;
        for seed in 0..20 {
            let s = synth_scene(&v, &p, seed).unwrap();
            let b0 = mask_to_bbox(&s.objects[0].mask).unwrap();
            let b1 = mask_to_bbox(&s.objects[1].mask).unwrap();
            if b0.x < b1.x {
                found = true;
                assert!(
                    s.gt.iter().any(|t| t.subject == 0 && t.object == 1 && t.relation == 0),
                    "seed {seed}: missing (0, 1, 0)"
                );
            }
        }
        assert!(found);
    }

    #[test]
    fn cat_spatial_rule_recomputable_from_geometry() {
        let v = vocab();
        let s = synth_scene(&v, &SynthParams::default(), 9).unwrap();
        let k = v.relation_count();
        let boxes: Vec<BBox> =
            s.objects.iter().map(|o| mask_to_bbox(&o.mask).unwrap()).collect();
        for t in &s.gt {
            let want = Rule::CatSpatial.relations(
                &boxes[t.subject],
                &boxes[t.object],
                s.objects[t.subject].category,
                s.objects[t.object].category,
                k,
            );
            assert_eq!(want, vec![t.relation]);
        }
        // Exactly one relation per ordered pair.
        assert_eq!(s.gt.len(), s.objects.len() * (s.objects.len() - 1));
    }

    #[test]
    fn signatures_are_category_stable() {
        let v = vocab();
        let a = category_signature(&v, 2, 16);
        let b = category_signature(&v, 2, 16);
        let c = category_signature(&v, 3, 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
