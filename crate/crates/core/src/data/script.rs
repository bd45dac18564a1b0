use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Writing-system label of a text span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Arabic,
    Latin,
    Mixed,
    Other,
}

impl Script {
    pub const ALL: [Script; 4] = [Script::Arabic, Script::Latin, Script::Mixed, Script::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Script::Arabic => "arabic",
            Script::Latin => "latin",
            Script::Mixed => "mixed",
            Script::Other => "other",
        }
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Script {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Script::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown script label {s:?}"))
    }
}

pub const ARABIC_THRESHOLD: f64 = 0.9;
pub const LATIN_THRESHOLD: f64 = 0.1;

pub fn is_arabic_letter(c: char) -> bool {
    matches!(c, '\u{0621}'..='\u{064A}' | '\u{0671}'..='\u{06D3}' | '\u{06FA}'..='\u{06FF}')
}

/// Digits Arabizi uses as letters (`7aga`, `3arabi`).
pub fn is_arabizi_digit(c: char) -> bool {
    matches!(c, '2' | '3' | '5' | '6' | '7' | '8' | '9')
}

/// Fraction of Arabic-script letters among script letters, if any. Arabizi
/// digits count as Latin letters inside words that also contain ASCII letters.
pub fn arabic_fraction(text: &str) -> Option<f64> {
    let (mut ar, mut la) = (0usize, 0usize);
    for word in text.split_whitespace() {
        let latin_word = word.chars().any(|c| c.is_ascii_alphabetic());
        for c in word.chars() {
            if is_arabic_letter(c) {
                ar += 1;
            } else if c.is_ascii_alphabetic() || (latin_word && is_arabizi_digit(c)) {
                la += 1;
            }
        }
    }
    (ar + la > 0).then(|| ar as f64 / (ar + la) as f64)
}

pub fn classify_script(text: &str) -> Script {
    match arabic_fraction(text) {
        None => Script::Other,
        Some(f) if f >= ARABIC_THRESHOLD => Script::Arabic,
        Some(f) if f <= LATIN_THRESHOLD => Script::Latin,
        Some(_) => Script::Mixed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(classify_script("حاجة جامدة"), Script::Arabic);
        assert_eq!(classify_script("7aga gameda"), Script::Latin);
        assert_eq!(classify_script("ده WiFi"), Script::Mixed);
        assert_eq!(classify_script("2024 ... 40"), Script::Other);
        assert_eq!(classify_script(""), Script::Other);
    }

    #[test]
    fn label_roundtrip() {
        for s in Script::ALL {
            assert_eq!(s.as_str().parse::<Script>().unwrap(), s);
        }
    }
}
