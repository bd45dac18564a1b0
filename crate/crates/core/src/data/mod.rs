//! Conversations, script labels and synthetic dual-script corpora.

mod conversation;
pub(crate) mod corpus;
pub mod lexicon;
mod records;
mod script;
mod templates;
mod translit;
mod validate;

pub use conversation::{Conversation, Message, Role};
pub use corpus::{generate_corpus, CorpusSpec, Domain, MarkovChain, TaggedSentence, GRAMMAR_SEED, MAX_WORDS, MIN_WORDS};
pub use records::{parse_jsonl, read_jsonl, to_jsonl, write_jsonl, ParallelRecord};
pub use script::{
    arabic_fraction, classify_script, is_arabic_letter, is_arabizi_digit, Script, ARABIC_THRESHOLD,
    LATIN_THRESHOLD,
};
pub use templates::{
    instantiate_template, render_target, translate_words, Language, Task, TemplateRequest, Variant,
};
pub use translit::{Direction, TableError, TransliterationTable, DEFAULT_RULES};
pub use validate::{
    check_record, code_switch_eligible, correct_text, filter_by_length, is_latin_word, keep_in_latin,
    length_ratio, synth_corrector, validate_conversations, word_count, Rejection, Rule, SftRecord,
    MAX_LATIN_SHARE, MIN_LENGTH_RATIO,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("{task:?} from {from:?} to {to:?} is not supported")]
    UnsupportedDirection { task: Task, from: Language, to: Language },
    #[error("empty source text")]
    EmptySource,
    #[error("missing target language")]
    MissingTargetLanguage,
    #[error("unfilled template placeholder {{{0}}}")]
    UnfilledPlaceholder(String),
    #[error("min_words {min} exceeds max_words {max}")]
    InvalidWindow { min: usize, max: usize },
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
