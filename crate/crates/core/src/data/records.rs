use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::templates::Language;
use super::DataError;

/// A source/target pair for translation or transliteration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelRecord {
    pub src: String,
    pub tgt: String,
    pub src_lang: Language,
    pub tgt_lang: Language,
}

/// One JSON value per non-empty line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Json {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    std::fs::write(path, to_jsonl(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Conversation, Message};

    #[test]
    fn conversation_lines() {
        let c = vec![Conversation::new(vec![Message::user("hi"), Message::assistant("ok")])];
        let text = to_jsonl(&c);
        assert_eq!(
            text,
            "{\"messages\":[{\"role\":\"user\",\"content\":\"hi\"},{\"role\":\"assistant\",\"content\":\"ok\"}]}\n"
        );
        assert_eq!(parse_jsonl::<Conversation>(&text).unwrap(), c);
        let err = parse_jsonl::<Conversation>("\n{bad").unwrap_err();
        assert!(matches!(err, DataError::Json { line: 2, .. }));
    }

    #[test]
    fn parallel_record_shape() {
        let r = ParallelRecord {
            src: "حاجة".into(),
            tgt: "7aga".into(),
            src_lang: Language::Arabic,
            tgt_lang: Language::Franco,
        };
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"src_lang\":\"arabic\""));
    }
}
