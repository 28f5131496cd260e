//! Feature database: category-keyed description vectors, built once per
//! vocabulary and reused across every scene.
//!
//! Two kinds exist, mirroring the two dialogues:
//! - **proposer**: one entry per ordered category pair, key `sub#obj`;
//! - **judger**: one entry per (subject, relation, object), key `sub#rel#obj`.
//!
//! `#` is the key separator and is therefore forbidden in vocabulary names
//! (enforced by [`Vocabulary`]). By default same-category pairs are skipped,
//! giving C·(C−1) proposer and C·(C−1)·K judger entries; an option includes
//! the `name#name` keys for scenes with repeated categories.
//!
//! On disk a database is a JSON-lines file: one header line carrying
//! `{dim, kind, encoder, vocab_hash, count}`, then one `{key, values}` line
//! per entry in lexicographic key order. Values are written as
//! shortest-round-trip decimals of the exact 32-bit floats, so save → load is
//! bit-exact. Files are replaced atomically (write to temp, then rename), and
//! a partial database can be reloaded and resumed: existing keys are skipped,
//! so resuming costs zero backend calls for work already done.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::hex64;
use crate::scene::Vocabulary;
use crate::vision::PairIndex;

use super::backend::{ChatBackend, EmbedBackend};
use super::prompt::{build_rj_prompt, build_rp_prompt, complete_rp_description};
use super::PromptStyle;

/// Which dialogue a database caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbKind {
    /// Ordered category pairs, key `sub#obj`.
    Proposer,
    /// Category pairs crossed with every relation, key `sub#rel#obj`.
    Judger,
}

impl DbKind {
    pub fn tag(self) -> &'static str {
        match self {
            DbKind::Proposer => "proposer",
            DbKind::Judger => "judger",
        }
    }

    pub fn parse(s: &str) -> Result<DbKind> {
        match s {
            "proposer" => Ok(DbKind::Proposer),
            "judger" => Ok(DbKind::Judger),
            other => Err(Error::Data(format!(
                "unknown feature-database kind '{other}' (expected 'proposer' or 'judger')"
            ))),
        }
    }
}

/// Key for one proposer entry.
pub fn proposer_key(subject: &str, object: &str) -> String {
    format!("{subject}#{object}")
}

/// Key for one judger entry.
pub fn judger_key(subject: &str, relation: &str, object: &str) -> String {
    format!("{subject}#{relation}#{object}")
}

/// One database entry to be built: its key plus the names that parameterize
/// the dialogue.
#[derive(Debug, Clone)]
struct KeySpec {
    key: String,
    subject: usize,
    object: usize,
    relation: Option<usize>,
}

fn expected_specs(vocab: &Vocabulary, kind: DbKind, include_same: bool) -> Vec<KeySpec> {
    let mut out = Vec::new();
    for s in 0..vocab.object_count() {
        for o in 0..vocab.object_count() {
            if s == o && !include_same {
                continue;
            }
            let sub = vocab.object_name(s);
            let obj = vocab.object_name(o);
            match kind {
                DbKind::Proposer => out.push(KeySpec {
                    key: proposer_key(sub, obj),
                    subject: s,
                    object: o,
                    relation: None,
                }),
                DbKind::Judger => {
                    for k in 0..vocab.relation_count() {
                        out.push(KeySpec {
                            key: judger_key(sub, vocab.relation_name(k), obj),
                            subject: s,
                            object: o,
                            relation: Some(k),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Keys a complete database of this kind holds, in canonical build order
/// (subject-major, then object, then relation).
pub fn expected_keys(vocab: &Vocabulary, kind: DbKind, include_same: bool) -> Vec<String> {
    expected_specs(vocab, kind, include_same).into_iter().map(|s| s.key).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DbHeader {
    dim: usize,
    kind: String,
    encoder: String,
    vocab_hash: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DbEntry {
    key: String,
    values: Vec<f32>,
}

/// Options for [`FeatureDb::build`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Also enumerate `name#name` keys for same-category pairs.
    pub include_same_category: bool,
    /// Worker threads issuing backend calls; 0 and 1 both mean sequential.
    pub jobs: usize,
    /// Budget on new entries attempted this run; `None` builds everything.
    /// Entries are attempted in canonical order, so a budgeted run is a
    /// deterministic prefix of a full one.
    pub max_calls: Option<u64>,
    /// Dialogue turn order to render.
    pub style: PromptStyle,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            include_same_category: false,
            jobs: 1,
            max_calls: None,
            style: PromptStyle::default(),
        }
    }
}

/// Outcome of one [`FeatureDb::build`] run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildReport {
    /// Size of a complete database under these options.
    pub total_keys: usize,
    /// Entries already present before this run.
    pub already_present: usize,
    /// Entries this run tried to build (bounded by `max_calls`).
    pub attempted: usize,
    /// Entries this run actually added.
    pub built: usize,
    /// Entries still absent after this run.
    pub missing_after: usize,
}

/// In-memory feature database; see the module docs for the disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDb {
    dim: usize,
    kind: DbKind,
    encoder: String,
    vocab_hash: u64,
    entries: BTreeMap<String, Vec<f32>>,
}

impl FeatureDb {
    /// An empty database bound to an encoder and a vocabulary fingerprint.
    pub fn new(kind: DbKind, dim: usize, encoder: impl Into<String>, vocab: &Vocabulary) -> Self {
        FeatureDb {
            dim,
            kind,
            encoder: encoder.into(),
            vocab_hash: vocab.fingerprint(),
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> DbKind {
        self.kind
    }

    pub fn encoder(&self) -> &str {
        &self.encoder
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Inserts one entry. The vector length must match the database dim and
    /// every value must be finite (non-finite floats do not survive the JSON
    /// round trip).
    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim {
            return Err(Error::Data(format!(
                "entry '{key}' has {} values but the database dim is {}",
                values.len(),
                self.dim
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("entry '{key}' has non-finite value {bad}")));
        }
        self.entries.insert(key, values);
        Ok(())
    }

    /// Errors unless this database was built for `vocab` and is of `kind`.
    pub fn ensure_matches(&self, vocab: &Vocabulary, kind: DbKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Data(format!(
                "feature database is of kind '{}' but '{}' is required",
                self.kind.tag(),
                kind.tag()
            )));
        }
        if self.vocab_hash != vocab.fingerprint() {
            return Err(Error::Data(format!(
                "feature database was built for vocabulary {} but the current vocabulary is {}",
                hex64(self.vocab_hash),
                hex64(vocab.fingerprint())
            )));
        }
        Ok(())
    }

    /// Keys a complete database would hold but this one does not.
    pub fn missing_keys(&self, vocab: &Vocabulary, include_same: bool) -> Vec<String> {
        expected_keys(vocab, self.kind, include_same)
            .into_iter()
            .filter(|k| !self.entries.contains_key(k))
            .collect()
    }

    pub fn is_complete(&self, vocab: &Vocabulary, include_same: bool) -> bool {
        self.missing_keys(vocab, include_same).is_empty()
    }

    /// Writes the database, replacing `path` atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let header = DbHeader {
            dim: self.dim,
            kind: self.kind.tag().to_string(),
            encoder: self.encoder.clone(),
            vocab_hash: hex64(self.vocab_hash),
            count: self.entries.len(),
        };
        let mut text = serde_json::to_string(&header).expect("header serializes infallibly");
        text.push('\n');
        for (key, values) in &self.entries {
            let line = serde_json::to_string(&DbEntry {
                key: key.clone(),
                values: values.clone(),
            })
            .expect("entry serializes infallibly");
            text.push_str(&line);
            text.push('\n');
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Reads a database written by [`FeatureDb::save`]. The header count must
    /// match the number of entry lines exactly, keys must be unique, and every
    /// vector must have the header's dim.
    pub fn load(path: &Path) -> Result<FeatureDb> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = BufReader::new(file).lines();
        let where_ = || path.display();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty feature-database file", where_())))?
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: DbHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Data(format!("{}: bad header: {e}", where_())))?;
        if header.dim == 0 {
            return Err(Error::Data(format!("{}: header dim must be positive", where_())));
        }
        let kind = DbKind::parse(&header.kind)?;
        let vocab_hash = u64::from_str_radix(&header.vocab_hash, 16).map_err(|_| {
            Error::Data(format!(
                "{}: header vocab_hash '{}' is not a hex hash",
                where_(),
                header.vocab_hash
            ))
        })?;
        let mut entries = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if entries.len() == header.count {
                return Err(Error::Data(format!(
                    "{}: more entry lines than the header count {}",
                    where_(),
                    header.count
                )));
            }
            let entry: DbEntry = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}: bad entry on line {}: {e}", where_(), i + 2))
            })?;
            if entry.values.len() != header.dim {
                return Err(Error::Data(format!(
                    "{}: entry '{}' has {} values but the header dim is {}",
                    where_(),
                    entry.key,
                    entry.values.len(),
                    header.dim
                )));
            }
            if entries.insert(entry.key.clone(), entry.values).is_some() {
                return Err(Error::Data(format!(
                    "{}: duplicate key '{}'",
                    where_(),
                    entry.key
                )));
            }
        }
        if entries.len() != header.count {
            return Err(Error::Data(format!(
                "{}: file ends after {} of {} entries",
                where_(),
                entries.len(),
                header.count
            )));
        }
        Ok(FeatureDb { dim: header.dim, kind, encoder: header.encoder, vocab_hash, entries })
    }

    /// Builds the missing entries by running the dialogue → description →
    /// vector pipeline per key. Entries already present are skipped without
    /// any backend call, so re-running over a complete database is free and
    /// an interrupted run can resume. On a backend failure the entries
    /// finished so far stay in the database and the error reports progress
    /// plus a sample of the keys still missing.
    pub fn build(
        &mut self,
        vocab: &Vocabulary,
        chat: &dyn ChatBackend,
        embed: &dyn EmbedBackend,
        opts: &BuildOptions,
    ) -> Result<BuildReport> {
        self.ensure_matches(vocab, self.kind)?;
        if embed.dim() != self.dim {
            return Err(Error::Data(format!(
                "encoder dim {} does not match database dim {}",
                embed.dim(),
                self.dim
            )));
        }
        if embed.id() != self.encoder {
            return Err(Error::Data(format!(
                "database was built with encoder '{}' but the current encoder is '{}'",
                self.encoder,
                embed.id()
            )));
        }
        let expected = expected_specs(vocab, self.kind, opts.include_same_category);
        let total_keys = expected.len();
        let todo: Vec<&KeySpec> =
            expected.iter().filter(|s| !self.entries.contains_key(&s.key)).collect();
        let already_present = total_keys - todo.len();
        let budget = match opts.max_calls {
            Some(m) => (m as usize).min(todo.len()),
            None => todo.len(),
        };
        let attempts = &todo[..budget];

        let kind = self.kind;
        let process = |spec: &KeySpec| -> Result<Vec<f32>> {
            let sub = vocab.object_name(spec.subject);
            let obj = vocab.object_name(spec.object);
            let text = match (kind, spec.relation) {
                (DbKind::Proposer, None) => {
                    let msgs = build_rp_prompt(sub, obj, vocab, opts.style)?;
                    let reply = chat.chat(&msgs)?;
                    complete_rp_description(&reply, sub, obj, vocab)
                }
                (DbKind::Judger, Some(k)) => {
                    let msgs =
                        build_rj_prompt(sub, vocab.relation_name(k), obj, vocab, opts.style)?;
                    chat.chat(&msgs)?
                }
                _ => unreachable!("key specs always match the database kind"),
            };
            embed.embed(&text)
        };

        let mut first_error: Option<Error> = None;
        let mut finished: Vec<(String, Vec<f32>)> = Vec::new();
        let jobs = opts.jobs.max(1).min(attempts.len().max(1));
        if jobs <= 1 {
            for spec in attempts {
                match process(spec) {
                    Ok(values) => finished.push((spec.key.clone(), values)),
                    Err(e) => {
                        first_error = Some(e);
                        break;
                    }
                }
            }
        } else {
            let cursor = AtomicUsize::new(0);
            let cancel = AtomicBool::new(false);
            let done = Mutex::new(Vec::new());
            let failure = Mutex::new(None::<Error>);
            std::thread::scope(|scope| {
                for _ in 0..jobs {
                    scope.spawn(|| loop {
                        if cancel.load(Ordering::Relaxed) {
                            break;
                        }
                        let i = cursor.fetch_add(1, Ordering::Relaxed);
                        if i >= attempts.len() {
                            break;
                        }
                        match process(attempts[i]) {
                            Ok(values) => {
                                done.lock().unwrap().push((attempts[i].key.clone(), values));
                            }
                            Err(e) => {
                                let mut slot = failure.lock().unwrap();
                                if slot.is_none() {
                                    *slot = Some(e);
                                }
                                cancel.store(true, Ordering::Relaxed);
                                break;
                            }
                        }
                    });
                }
            });
            finished = done.into_inner().unwrap();
            first_error = failure.into_inner().unwrap();
        }

        let built = finished.len();
        for (key, values) in finished {
            self.insert(key, values)?;
        }
        let missing_after = total_keys - already_present - built;

        if let Some(err) = first_error {
            let missing = self.missing_keys(vocab, opts.include_same_category);
            let shown = missing.iter().take(8).cloned().collect::<Vec<_>>().join(", ");
            let more = missing.len().saturating_sub(8);
            let suffix = if more > 0 { format!(" (+{more} more)") } else { String::new() };
            let progress = format!(
                "built {built} new entries, {} keys still missing: {shown}{suffix}",
                missing.len()
            );
            return Err(match err {
                Error::Backend { kind, detail } => Error::Backend {
                    kind,
                    detail: format!("{detail}; {progress}"),
                },
                other => other,
            });
        }
        Ok(BuildReport { total_keys, already_present, attempted: budget, built, missing_after })
    }
}

/// Per-scene language features gathered from the two databases: one vector
/// per ordered object pair (proposer) and one per pair and relation (judger).
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageFeatures {
    pair_count: usize,
    relation_count: usize,
    dim: usize,
    /// `[pair][dim]`, row-major.
    rp: Vec<f32>,
    /// `[relation][pair][dim]`: one pair-major matrix per relation.
    rj: Vec<f32>,
}

impl LanguageFeatures {
    /// Assembles features directly from raw buffers: `rp` is `[pair][dim]`
    /// row-major, `rj` is `[relation][pair][dim]`. Used by tests and
    /// synthetic pipelines that bypass the databases.
    pub fn from_parts(
        pair_count: usize,
        relation_count: usize,
        dim: usize,
        rp: Vec<f32>,
        rj: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 || relation_count == 0 {
            return Err(Error::Data(format!(
                "language features need positive dim and relation count, got {dim} and {relation_count}"
            )));
        }
        if rp.len() != pair_count * dim {
            return Err(Error::Data(format!(
                "pair-feature buffer holds {} values, {pair_count} pairs at dim {dim} need {}",
                rp.len(),
                pair_count * dim
            )));
        }
        if rj.len() != relation_count * pair_count * dim {
            return Err(Error::Data(format!(
                "relation-feature buffer holds {} values, {relation_count}x{pair_count} at dim {dim} need {}",
                rj.len(),
                relation_count * pair_count * dim
            )));
        }
        Ok(LanguageFeatures { pair_count, relation_count, dim, rp, rj })
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Proposer features as one `pair_count × dim` row-major matrix.
    pub fn proposer_matrix(&self) -> &[f32] {
        &self.rp
    }

    pub fn proposer_row(&self, pair: usize) -> &[f32] {
        &self.rp[pair * self.dim..(pair + 1) * self.dim]
    }

    /// Judger features for one relation as a `pair_count × dim` row-major
    /// matrix (rows in pair order).
    pub fn judger_matrix(&self, relation: usize) -> &[f32] {
        let stride = self.pair_count * self.dim;
        &self.rj[relation * stride..(relation + 1) * stride]
    }

    pub fn judger_vector(&self, pair: usize, relation: usize) -> &[f32] {
        let start = (relation * self.pair_count + pair) * self.dim;
        &self.rj[start..start + self.dim]
    }
}

/// Looks up the language features for every ordered object pair of a scene,
/// given the scene objects' category ids in scene order. Rows follow
/// [`PairIndex`] order. Every needed key must be present; a missing key is an
/// error naming it.
pub fn retrieve(
    db_rp: &FeatureDb,
    db_rj: &FeatureDb,
    categories: &[usize],
    vocab: &Vocabulary,
) -> Result<LanguageFeatures> {
    db_rp.ensure_matches(vocab, DbKind::Proposer)?;
    db_rj.ensure_matches(vocab, DbKind::Judger)?;
    if db_rp.dim() != db_rj.dim() {
        return Err(Error::Data(format!(
            "proposer dim {} and judger dim {} differ",
            db_rp.dim(),
            db_rj.dim()
        )));
    }
    for &c in categories {
        if c >= vocab.object_count() {
            return Err(Error::Data(format!(
                "category id {c} is out of range for a vocabulary of {} objects",
                vocab.object_count()
            )));
        }
    }
    let pairs = PairIndex::new(categories.len())?;
    let dim = db_rp.dim();
    let k_count = vocab.relation_count();
    let p_count = pairs.len();

    let fetch = |db: &FeatureDb, key: &str, same: bool| -> Result<Vec<f32>> {
        match db.get(key) {
            Some(v) => Ok(v.to_vec()),
            None => {
                let hint = if same {
                    "; same-category pairs need a database built with include_same_category"
                } else {
                    ""
                };
                Err(Error::Data(format!(
                    "feature database ({}) is missing key '{key}'{hint}",
                    db.kind().tag()
                )))
            }
        }
    };

    let mut rp = Vec::with_capacity(p_count * dim);
    let mut rj = vec![0.0f32; k_count * p_count * dim];
    for (p, &(i, j)) in pairs.pairs().iter().enumerate() {
        let sub = vocab.object_name(categories[i]);
        let obj = vocab.object_name(categories[j]);
        let same = categories[i] == categories[j];
        rp.extend_from_slice(&fetch(db_rp, &proposer_key(sub, obj), same)?);
        for k in 0..k_count {
            let v = fetch(db_rj, &judger_key(sub, vocab.relation_name(k), obj), same)?;
            let start = (k * p_count + p) * dim;
            rj[start..start + dim].copy_from_slice(&v);
        }
    }
    Ok(LanguageFeatures { pair_count: p_count, relation_count: k_count, dim, rp, rj })
}
