use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::MarkovChain;
use super::lexicon::{from_gloss, gloss};
use super::{Conversation, DataError, Message, TransliterationTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Translate,
    Transliterate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    /// Egyptian Arabic, as a translation language.
    Egyptian,
    English,
    /// Arabic script, as a transliteration target.
    Arabic,
    /// Arabizi.
    Franco,
}

impl Language {
    /// Name as it appears inside Egyptian instructions.
    pub fn name(self) -> &'static str {
        match self {
            Language::Egyptian => "مصري",
            Language::English => "انجليزي",
            Language::Arabic => "عربي",
            Language::Franco => "فرانكو",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    /// Three solved examples precede the query in one user message.
    FewShot,
    /// Three user/assistant exchanges; later turns use continuation templates.
    MultiTurn,
}

pub const TRANSLATE_TEMPLATES: &[&str] = &[
    "ممكن تترجملي من ال{src} لل{tgt}:\n{text}\n",
    "ترجملي من ال{src} لل{tgt}:\n{text}\n",
    "ترجملي لل{tgt}:\n{text}\n",
];
pub const TRANSLATE_CONTINUATION: &str = "ترجم:\n{text}";

pub const TRANSLITERATE_TEMPLATES: &[&str] = &[
    "اكتبلي الكلام ده بال{tgt}:\n{text}\n",
    "حول من ال{src} لل{tgt}:\n{text}\n",
    "ممكن تكتبلي بال{tgt}:\n{text}\n",
];
pub const TRANSLITERATE_CONTINUATION: &str = "وده كمان:\n{text}";

pub const SHOTS: usize = 3;
pub const TURNS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateRequest<'a> {
    pub task: Task,
    pub source: &'a str,
    pub src_lang: Language,
    pub tgt_lang: Option<Language>,
    pub variant: Variant,
}

/// Word-by-word rendering through the lexicon glossary; unknown words are kept.
pub fn translate_words(text: &str, from: Language, to: Language) -> Result<String, DataError> {
    let f: fn(&str) -> Option<&'static str> = match (from, to) {
        (Language::Egyptian, Language::English) => gloss,
        (Language::English, Language::Egyptian) => from_gloss,
        _ => return Err(DataError::UnsupportedDirection { task: Task::Translate, from, to }),
    };
    Ok(text
        .split_whitespace()
        .map(|w| f(w).unwrap_or(w))
        .collect::<Vec<_>>()
        .join(" "))
}

/// Target text for `source` under `task` in the given direction.
pub fn render_target(
    task: Task,
    source: &str,
    from: Language,
    to: Language,
    table: &TransliterationTable,
) -> Result<String, DataError> {
    match (task, from, to) {
        (Task::Translate, _, _) => translate_words(source, from, to),
        (Task::Transliterate, Language::Arabic, Language::Franco) => Ok(table.to_latin(source)),
        (Task::Transliterate, Language::Franco, Language::Arabic) => Ok(table.to_arabic(source)),
        _ => Err(DataError::UnsupportedDirection { task, from, to }),
    }
}

fn fill(template: &str, src: Language, tgt: Language, text: &str) -> Result<String, DataError> {
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        let name = &rest[start + 1..start + len];
        if !matches!(name, "src" | "tgt" | "text") {
            return Err(DataError::UnfilledPlaceholder(name.to_string()));
        }
        rest = &rest[start + len..];
    }
    Ok(template
        .replace("{src}", src.name())
        .replace("{tgt}", tgt.name())
        .replace("{text}", text))
}

/// Extra source sentence in `lang` for shots and follow-up turns.
fn extra_source(lang: Language, table: &TransliterationTable, rng: &mut ChaCha8Rng) -> String {
    match lang {
        Language::English => MarkovChain::english().sentence(rng),
        Language::Franco => table.to_latin(&MarkovChain::egyptian().sentence(rng)),
        Language::Egyptian | Language::Arabic => MarkovChain::egyptian().sentence(rng),
    }
}

/// Build an instruction conversation from one of the surface templates,
/// chosen by `seed`.
pub fn instantiate_template(
    req: &TemplateRequest<'_>,
    table: &TransliterationTable,
    seed: u64,
) -> Result<Conversation, DataError> {
    if req.source.trim().is_empty() {
        return Err(DataError::EmptySource);
    }
    let tgt = req.tgt_lang.ok_or(DataError::MissingTargetLanguage)?;
    let (templates, continuation) = match req.task {
        Task::Translate => (TRANSLATE_TEMPLATES, TRANSLATE_CONTINUATION),
        Task::Transliterate => (TRANSLITERATE_TEMPLATES, TRANSLITERATE_CONTINUATION),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = templates[rng.random_range(0..templates.len())];
    let target = render_target(req.task, req.source, req.src_lang, tgt, table)?;

    let messages = match req.variant {
        Variant::Single => vec![
            Message::user(fill(template, req.src_lang, tgt, req.source)?),
            Message::assistant(target),
        ],
        Variant::FewShot => {
            let mut prefix = String::new();
            for _ in 0..SHOTS {
                let s = extra_source(req.src_lang, table, &mut rng);
                let t = render_target(req.task, &s, req.src_lang, tgt, table)?;
                prefix.push_str(&format!("{s}\n{t}\n\n"));
            }
            vec![
                Message::user(prefix + &fill(template, req.src_lang, tgt, req.source)?),
                Message::assistant(target),
            ]
        }
        Variant::MultiTurn => {
            let mut msgs = vec![
                Message::user(fill(template, req.src_lang, tgt, req.source)?),
                Message::assistant(target),
            ];
            for _ in 1..TURNS {
                let s = extra_source(req.src_lang, table, &mut rng);
                let t = render_target(req.task, &s, req.src_lang, tgt, table)?;
                msgs.push(Message::user(fill(continuation, req.src_lang, tgt, &s)?));
                msgs.push(Message::assistant(t));
            }
            msgs
        }
    };
    Ok(Conversation::new(messages))
}
