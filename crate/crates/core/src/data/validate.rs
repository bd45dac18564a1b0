use serde::{Deserialize, Serialize};

use super::lexicon::KEEP_LATIN;
use super::{Conversation, DataError, Message, Role, TransliterationTable};

pub const MIN_LENGTH_RATIO: f64 = 0.7;
pub const MAX_LATIN_SHARE: f64 = 0.35;

/// An SFT record; translation records also carry their source/target pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<String>,
}

impl SftRecord {
    pub fn conversation(&self) -> Conversation {
        Conversation::new(self.messages.clone())
    }
}

impl From<Conversation> for SftRecord {
    fn from(c: Conversation) -> Self {
        Self {
            messages: c.messages,
            src: None,
            tgt: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    RoleFlow,
    EmptyMessage,
    LengthRatio,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::RoleFlow => "role-flow",
            Rule::EmptyMessage => "empty-message",
            Rule::LengthRatio => "length-ratio",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Index of the record in the input.
    pub record: usize,
    pub rule: Rule,
}

/// `min(|s|, |t|) / max(|s|, |t|)` in characters; two empty strings give 1.
pub fn length_ratio(src: &str, tgt: &str) -> f64 {
    let (a, b) = (src.chars().count(), tgt.chars().count());
    if a.max(b) == 0 {
        return 1.0;
    }
    a.min(b) as f64 / a.max(b) as f64
}

/// First rule a record violates, checked in the order role flow, empty
/// content, length ratio.
pub fn check_record(r: &SftRecord) -> Option<Rule> {
    let conv = r.conversation();
    if !conv.role_flow_ok() {
        return Some(Rule::RoleFlow);
    }
    if r.messages.iter().any(|m| m.content.trim().is_empty()) {
        return Some(Rule::EmptyMessage);
    }
    if let (Some(s), Some(t)) = (&r.src, &r.tgt) {
        if length_ratio(s, t) < MIN_LENGTH_RATIO {
            return Some(Rule::LengthRatio);
        }
    }
    None
}

pub fn validate_conversations(dataset: &[SftRecord]) -> (Vec<SftRecord>, Vec<Rejection>) {
    let mut accepted = Vec::new();
    let mut report = Vec::new();
    for (i, r) in dataset.iter().enumerate() {
        match check_record(r) {
            None => accepted.push(r.clone()),
            Some(rule) => report.push(Rejection { record: i, rule }),
        }
    }
    (accepted, report)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Texts with a whitespace word count in `[min_words, max_words]`.
pub fn filter_by_length<S: AsRef<str> + Clone>(texts: &[S], min_words: usize, max_words: usize) -> Result<Vec<S>, DataError> {
    if min_words > max_words {
        return Err(DataError::InvalidWindow {
            min: min_words,
            max: max_words,
        });
    }
    Ok(texts
        .iter()
        .filter(|t| (min_words..=max_words).contains(&word_count(t.as_ref())))
        .cloned()
        .collect())
}

pub fn is_latin_word(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_alphabetic())
}

/// At least one Latin-script word, and Latin words under 35% of all words.
pub fn code_switch_eligible(text: &str) -> bool {
    let total = word_count(text);
    let latin = text.split_whitespace().filter(|w| is_latin_word(w)).count();
    latin >= 1 && (latin as f64) < MAX_LATIN_SHARE * total as f64
}

pub fn keep_in_latin(word: &str) -> bool {
    let bare = word.trim_matches(|c: char| !c.is_alphanumeric());
    KEEP_LATIN.iter().any(|k| k.eq_ignore_ascii_case(bare))
}

/// Rewrite stray Latin-script words in Arabic script, keeping allowlisted terms.
pub fn correct_text(text: &str, table: &TransliterationTable) -> String {
    text.split(' ')
        .map(|w| {
            if is_latin_word(w) && !keep_in_latin(w) {
                table.to_arabic(w)
            } else {
                w.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Apply [`correct_text`] to every assistant message.
pub fn synth_corrector(conv: &Conversation, table: &TransliterationTable) -> Conversation {
    Conversation::new(
        conv.messages
            .iter()
            .map(|m| match m.role {
                Role::Assistant => Message::assistant(correct_text(&m.content, table)),
                _ => m.clone(),
            })
            .collect(),
    )
}
