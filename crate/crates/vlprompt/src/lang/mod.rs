//! Language side of the relation pipeline.
//!
//! Relation knowledge is mined from a chat model in two forms: a *proposer*
//! dialogue that asks, for an ordered pair of object categories, which
//! relations could plausibly hold, and a *judger* dialogue that asks whether
//! one specific relation is plausible. The resulting descriptions are turned
//! into fixed-size vectors by a text encoder and cached in a [`db::FeatureDb`]
//! keyed by category names, so the expensive backend calls happen once per
//! vocabulary rather than once per scene.
//!
//! Submodules:
//! - [`prompt`] — dialogue templates and description completion.
//! - [`backend`] — chat/embedding traits plus deterministic offline mocks.
//! - [`http`] — JSON-over-HTTP clients implementing the backend traits.
//! - [`db`] — the feature database: build, persist, retrieve.

pub mod backend;
pub mod db;
pub mod http;
pub mod prompt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speaker of one dialogue turn, in chat-completion wire vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One turn of a chat dialogue; serializes to the `{role, content}` wire shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueMessage {
    pub role: Role,
    pub content: String,
}

impl DialogueMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        DialogueMessage { role, content: content.into() }
    }
}

/// Turn-order flavor of the rendered dialogues.
///
/// Some chat APIs accept an assistant turn directly after the system message;
/// others require the first non-system turn to come from the user. In the
/// latter case the opening assistant question is folded into the system
/// message and the dialogue starts with a user turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptStyle {
    /// System message first, then an assistant question opens the exchange.
    #[default]
    AssistantFirst,
    /// Opening question folded into the system message; a user turn follows.
    UserFirst,
}

impl PromptStyle {
    pub fn parse(s: &str) -> Result<PromptStyle> {
        match s {
            "assistant-first" => Ok(PromptStyle::AssistantFirst),
            "user-first" => Ok(PromptStyle::UserFirst),
            other => Err(Error::Config(format!(
                "unknown prompt style '{other}' (expected 'assistant-first' or 'user-first')"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::AssistantFirst => "assistant-first",
            PromptStyle::UserFirst => "user-first",
        }
    }
}
