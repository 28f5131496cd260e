//! Chat and embedding backends.
//!
//! The pipeline talks to two services: a chat model that answers the relation
//! dialogues, and a text encoder that maps a description to a fixed-size
//! vector. Both are behind traits so the feature-database builder can run
//! against the real HTTP clients ([`super::http`]) or against the
//! deterministic in-process mocks defined here, which exercise the entire
//! pipeline offline and reproducibly.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::scene::gauss;

use super::{DialogueMessage, Role};

/// A chat-completion service: takes a dialogue, returns the reply text.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, messages: &[DialogueMessage]) -> Result<String>;
    /// Number of `chat` invocations so far (retries not counted).
    fn calls(&self) -> u64;
}

/// A text-embedding service: takes text, returns a vector of fixed length.
pub trait EmbedBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
    /// Length of every vector this encoder produces.
    fn dim(&self) -> usize;
    /// Stable identifier recorded in feature-database metadata.
    fn id(&self) -> String;
    /// Number of `embed` invocations so far (retries not counted).
    fn calls(&self) -> u64;
}

fn capitalized(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// What a mock chat call understood from the rendered dialogue.
enum ParsedPrompt {
    Proposer { subject: String, object: String, relations: Vec<String> },
    Judger { subject: String, object: String, relation: String },
}

fn parse_relation_list(content: &str) -> Option<Vec<String>> {
    let rest = content.strip_prefix("They are ")?.strip_suffix('.')?;
    let mut names = Vec::new();
    for item in rest.split(", ") {
        names.push(item.strip_prefix('\'')?.strip_suffix('\'')?.to_string());
    }
    Some(names)
}

fn parse_prompt(messages: &[DialogueMessage]) -> Option<ParsedPrompt> {
    let last = messages.iter().rev().find(|m| m.role == Role::User)?;
    if let Some(rest) = last.content.strip_prefix("The subject is a ") {
        if let Some((subject, rest)) = rest.split_once(", the object is a ") {
            let (object, rest) = rest.split_once(", and the relation is ")?;
            let relation = rest.strip_suffix('.')?;
            return Some(ParsedPrompt::Judger {
                subject: subject.to_string(),
                object: object.to_string(),
                relation: relation.to_string(),
            });
        }
        let (subject, rest) = rest.split_once(", and the object is a ")?;
        let object = rest.strip_suffix('.')?;
        let relations = messages
            .iter()
            .filter(|m| m.role == Role::User)
            .find_map(|m| parse_relation_list(&m.content))?;
        return Some(ParsedPrompt::Proposer {
            subject: subject.to_string(),
            object: object.to_string(),
            relations,
        });
    }
    None
}

fn dialogue_seed(messages: &[DialogueMessage]) -> u64 {
    let mut h = Fnv64::new();
    for m in messages {
        h = h.write_str(m.role.as_str()).write_str(&m.content);
    }
    h.finish()
}

/// Offline chat model. Answers proposer dialogues with a numbered list of a
/// seeded subset of the offered relations (never empty) and judger dialogues
/// with a yes/no verdict, both styled after real model output. Deterministic:
/// the reply is a pure function of the messages.
#[derive(Debug, Default)]
pub struct MockChat {
    calls: AtomicU64,
}

impl MockChat {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, messages: &[DialogueMessage]) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let parsed = parse_prompt(messages).ok_or_else(|| Error::Backend {
            kind: crate::error::BackendErrorKind::Malformed,
            detail: "mock chat could not parse the dialogue".into(),
        })?;
        let seed = dialogue_seed(messages);
        match parsed {
            ParsedPrompt::Proposer { subject, object, relations } => {
                let mut chosen: Vec<&String> = Vec::new();
                for (k, rel) in relations.iter().enumerate() {
                    let h = Fnv64::with_seed(seed).write_u64(k as u64).finish();
                    if h % 8 < 3 {
                        chosen.push(rel);
                    }
                }
                if chosen.is_empty() {
                    chosen.push(&relations[(seed % relations.len() as u64) as usize]);
                }
                let mut text = format!(
                    "Based on the given subject ({subject}) and object ({object}), here are \
                     some possible relations between them:"
                );
                for (i, rel) in chosen.iter().enumerate() {
                    text.push_str(&format!(
                        " {}. {}: The {subject} could be {rel} the {object}.",
                        i + 1,
                        capitalized(rel),
                    ));
                }
                text.push_str(&format!(
                    " These are just a few possible relations between a {subject} and a \
                     {object}."
                ));
                Ok(text)
            }
            ParsedPrompt::Judger { subject, object, relation } => {
                if seed.is_multiple_of(2) {
                    Ok(format!(
                        "Based on my knowledge, the relation {relation} is likely to exist \
                         between {subject} and {object}. This is because it is common in \
                         real life."
                    ))
                } else {
                    Ok(format!(
                        "No, the relation {relation} is not likely to exist between \
                         {subject} and {object}. This is because it is not common in real \
                         life."
                    ))
                }
            }
        }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Offline text encoder: a bag-of-tokens model. Each lowercased alphanumeric
/// token hashes to a fixed Gaussian basis vector; the vectors of all tokens
/// (with multiplicity) are summed and the result is L2-normalized. Token
/// order does not matter; token multiset does.
#[derive(Debug)]
pub struct MockEmbed {
    dim: usize,
    calls: AtomicU64,
}

impl MockEmbed {
    pub fn new(dim: usize) -> Self {
        MockEmbed { dim, calls: AtomicU64::new(0) }
    }
}

impl EmbedBackend for MockEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut acc = vec![0.0f32; self.dim];
        let mut tokens = 0usize;
        for raw in text.split(|c: char| !c.is_alphanumeric()) {
            if raw.is_empty() {
                continue;
            }
            tokens += 1;
            let token = raw.to_lowercase();
            let seed = Fnv64::new()
                .write_str("embed-token")
                .write_str(&token)
                .write_u64(self.dim as u64)
                .finish();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for slot in acc.iter_mut() {
                *slot += gauss(&mut rng);
            }
        }
        if tokens == 0 {
            return Err(Error::Data(
                "cannot encode text with no alphanumeric tokens".into(),
            ));
        }
        let norm = acc.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Data("encoded text collapsed to a zero vector".into()));
        }
        for v in acc.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(acc)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("mock-embed-v1-d{}", self.dim)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
