//! Dialogue templates for mining relation knowledge from a chat model, and
//! the completion step that makes every proposer description mention all K
//! relations.
//!
//! Two dialogues exist:
//! - the **relation proposer** dialogue asks, given a subject and object
//!   category, which of the vocabulary's relations might hold between them;
//! - the **relation judger** dialogue asks whether one named relation is
//!   likely between the two.
//!
//! Both are worked-example dialogues: the scripted turns state the task, list
//! the candidate relations (proposer only), walk through a person/sports-ball
//! example, and end with a user turn naming the actual subject and object
//! (and relation, for the judger). Rendering is a pure function of the names,
//! the vocabulary, and the [`PromptStyle`].

use crate::error::{Error, Result};
use crate::scene::Vocabulary;

use super::{DialogueMessage, PromptStyle, Role};

/// Proposer system text; `{count}` below is the relation count K.
fn rp_system(k: usize) -> String {
    format!(
        concat!(
            "You are asked to play the role of a relation proposer. Given the category names ",
            "of two objects in an image, you are to infer what kind of relation might exist ",
            "between them based on your knowledge, and provide the reasons for each possible ",
            "relation. In the relation between the two objects in the image, we refer to one ",
            "object as the subject and the other as the object. There may or may not be a ",
            "relation between the subject and the object. Please note that this relation has ",
            "an order, that is, the subject comes first and the object comes after. If there ",
            "is a relation between the two, these relations must belong to one of the ",
            "pre-defined {count} different types."
        ),
        count = k
    )
}

fn rp_ask_list(k: usize) -> String {
    format!("What are the {k} relations?")
}

/// The user turn enumerating every relation name, quoted, comma-separated.
fn relation_list_turn(vocab: &Vocabulary) -> String {
    let quoted: Vec<String> =
        vocab.relations().iter().map(|r| format!("'{r}'")).collect();
    format!("They are {}.", quoted.join(", "))
}

const RP_ASK_EXAMPLE: &str = "Can you give me an example?";

const RP_EXAMPLE: &str = concat!(
    "For example, the subject is a person, and the object is a sports ball. The possible ",
    "relations between them could be: 1. Beside: The person could be standing beside the ",
    "sports ball. 2. Looking at: The person might be looking at the ball to better control ",
    "it. 3. Playing: This is because it's very common in real life for a person to be ",
    "playing with a sports ball. 4. Chasing: The person might be chasing after the ball."
);

const RP_READY: &str = "Ok, I got it. Please give me the subject and object of the image.";

const RJ_SYSTEM: &str = concat!(
    "You are asked to play the role of a relation judger. Given the category names of two ",
    "objects in an image, and providing you with a relation category name, you need to ",
    "predict whether this relation is likely to exist in the image based on your knowledge, ",
    "and give the reason for its existence. For two objects, we call the first object ",
    "subject and the second object object."
);

const RJ_ASK_EXAMPLE: &str = "Yes, I understand. Can you give me an example?";

const RJ_EXAMPLE: &str = concat!(
    "For example, the input is: the subject is a 'person', the object is a 'sports ball' ",
    "and the relation is 'playing'. The output should be Yes, the relation is likely to ",
    "exist in the image. This is because it's very common in real life for a person to be ",
    "playing with a sports ball."
);

const RJ_READY: &str = "Ok, I got it. Please give me the subject, object and relation names.";

fn msg(role: Role, content: impl Into<String>) -> DialogueMessage {
    DialogueMessage::new(role, content)
}

fn check_object(vocab: &Vocabulary, name: &str) -> Result<()> {
    if vocab.object_index(name).is_none() {
        return Err(Error::Data(format!("object name '{name}' is not in the vocabulary")));
    }
    Ok(())
}

fn check_relation(vocab: &Vocabulary, name: &str) -> Result<()> {
    if vocab.relation_index(name).is_none() {
        return Err(Error::Data(format!("relation name '{name}' is not in the vocabulary")));
    }
    Ok(())
}

/// Renders the relation-proposer dialogue for one ordered (subject, object)
/// category pair. Both names must exist in the vocabulary.
pub fn build_rp_prompt(
    subject: &str,
    object: &str,
    vocab: &Vocabulary,
    style: PromptStyle,
) -> Result<Vec<DialogueMessage>> {
    check_object(vocab, subject)?;
    check_object(vocab, object)?;
    let k = vocab.relation_count();
    let final_turn =
        format!("The subject is a {subject}, and the object is a {object}.");
    let msgs = match style {
        PromptStyle::AssistantFirst => vec![
            msg(Role::System, rp_system(k)),
            msg(Role::Assistant, rp_ask_list(k)),
            msg(Role::User, relation_list_turn(vocab)),
            msg(Role::Assistant, RP_ASK_EXAMPLE),
            msg(Role::User, RP_EXAMPLE),
            msg(Role::Assistant, RP_READY),
            msg(Role::User, final_turn),
        ],
        PromptStyle::UserFirst => vec![
            msg(Role::System, format!("{} {}", rp_system(k), rp_ask_list(k))),
            msg(Role::User, relation_list_turn(vocab)),
            msg(Role::Assistant, RP_ASK_EXAMPLE),
            msg(Role::User, RP_EXAMPLE),
            msg(Role::Assistant, RP_READY),
            msg(Role::User, final_turn),
        ],
    };
    Ok(msgs)
}

/// Renders the relation-judger dialogue for one (subject, relation, object)
/// triple. All three names must exist in the vocabulary.
pub fn build_rj_prompt(
    subject: &str,
    relation: &str,
    object: &str,
    vocab: &Vocabulary,
    style: PromptStyle,
) -> Result<Vec<DialogueMessage>> {
    check_object(vocab, subject)?;
    check_object(vocab, object)?;
    check_relation(vocab, relation)?;
    let final_turn = format!(
        "The subject is a {subject}, the object is a {object}, and the relation is {relation}."
    );
    let msgs = match style {
        PromptStyle::AssistantFirst => vec![
            msg(Role::System, RJ_SYSTEM),
            msg(Role::Assistant, RJ_ASK_EXAMPLE),
            msg(Role::User, RJ_EXAMPLE),
            msg(Role::Assistant, RJ_READY),
            msg(Role::User, final_turn),
        ],
        PromptStyle::UserFirst => vec![
            msg(Role::System, format!("{RJ_SYSTEM} Please give me an example.")),
            msg(Role::User, RJ_EXAMPLE),
            msg(Role::Assistant, RJ_READY),
            msg(Role::User, final_turn),
        ],
    };
    Ok(msgs)
}

/// Pretty-printed JSON rendering of a dialogue, newline-terminated. This is
/// the canonical on-disk / on-stdout form of a rendered prompt.
pub fn render_dialogue_json(messages: &[DialogueMessage]) -> String {
    let mut s = serde_json::to_string_pretty(messages)
        .expect("dialogue messages serialize infallibly");
    s.push('\n');
    s
}

/// True when `phrase` occurs in `haystack` delimited by non-alphanumeric
/// characters (or the text boundary) on both sides. Both arguments must
/// already be lowercased by the caller.
fn contains_whole_phrase(haystack: &str, phrase: &str) -> bool {
    if phrase.is_empty() {
        return false;
    }
    for (idx, m) in haystack.match_indices(phrase) {
        let before_ok =
            haystack[..idx].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok =
            haystack[idx + m.len()..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
    }
    false
}

/// Which vocabulary relations the description text mentions, by
/// case-insensitive whole-phrase match. Multiword names match as phrases;
/// a name occurring inside a longer word does not count.
pub fn mentioned_relations(text: &str, vocab: &Vocabulary) -> Vec<bool> {
    let lower = text.to_lowercase();
    vocab
        .relations()
        .iter()
        .map(|r| contains_whole_phrase(&lower, &r.to_lowercase()))
        .collect()
}

/// The sentence appended for one relation the proposer left out.
pub fn unlikely_sentence(subject: &str, object: &str, relation: &str) -> String {
    format!("It is not likely for {subject} and {object} to have relation {relation}.")
}

/// Completes a proposer description so it mentions every relation in the
/// vocabulary: for each relation name not already present (case-insensitive
/// whole-phrase match), a template sentence naming it is appended, in
/// vocabulary order. Pure text transform; applying it twice is a no-op.
pub fn complete_rp_description(
    text: &str,
    subject: &str,
    object: &str,
    vocab: &Vocabulary,
) -> String {
    let mentioned = mentioned_relations(text, vocab);
    let mut out = text.to_string();
    for (k, seen) in mentioned.iter().enumerate() {
        if !seen {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&unlikely_sentence(subject, object, vocab.relation_name(k)));
        }
    }
    out
}
