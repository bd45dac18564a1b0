use std::fmt;
use std::str::FromStr;

use super::script::is_arabic_letter;

/// Built-in rule file: `arabic<TAB>latin`; a trailing `$` on the Latin side
/// restricts the rule to word-final position.
pub const DEFAULT_RULES: &str = "\
# letters
ا\ta
ب\tb
ت\tt
ج\tg
ح\t7
خ\tkh
د\td
ر\tr
ز\tz
س\ts
ش\tsh
ص\t9
ط\t6
ع\t3
غ\tgh
ف\tf
ق\t2
ك\tk
ل\tl
م\tm
ن\tn
ه\th
و\tw
ي\ty
# word-final taa marbuta
ة\ta$
# clusters
مد\tmed
";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToLatin,
    ToArabic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub arabic: Vec<char>,
    pub latin: Vec<char>,
    pub word_final: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for TableError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule file line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for TableError {}

/// Ordered rewrite rules applied greedily, longest match first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransliterationTable {
    rules: Vec<Rule>,
    /// Rule indices by descending Arabic / Latin length.
    by_arabic: Vec<usize>,
    by_latin: Vec<usize>,
}

impl Default for TransliterationTable {
    fn default() -> Self {
        DEFAULT_RULES.parse().expect("built-in rules are valid")
    }
}

impl FromStr for TransliterationTable {
    type Err = TableError;

    fn from_str(text: &str) -> Result<Self, TableError> {
        let mut rules: Vec<Rule> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| TableError { line: i + 1, msg };
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (ar, la) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `arabic<TAB>latin`".into()))?;
            let (la, word_final) = match la.strip_suffix('$') {
                Some(l) => (l, true),
                None => (la, false),
            };
            if ar.is_empty() || la.is_empty() {
                return Err(err("empty rule side".into()));
            }
            if !ar.chars().all(is_arabic_letter) {
                return Err(err(format!("{ar:?} is not Arabic-script")));
            }
            if !la.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()) {
                return Err(err(format!("{la:?} must be lowercase ASCII letters or digits")));
            }
            let rule = Rule {
                arabic: ar.chars().collect(),
                latin: la.chars().collect(),
                word_final,
            };
            for r in &rules {
                if r.arabic == rule.arabic {
                    return Err(err(format!("duplicate Arabic side {ar:?}")));
                }
                if r.latin == rule.latin && r.word_final == rule.word_final {
                    return Err(err(format!("duplicate Latin side {la:?}")));
                }
            }
            rules.push(rule);
        }
        if rules.is_empty() {
            return Err(TableError {
                line: 0,
                msg: "no rules".into(),
            });
        }
        Ok(Self::from_rules(rules))
    }
}

impl TransliterationTable {
    fn from_rules(rules: Vec<Rule>) -> Self {
        let order = |key: fn(&Rule) -> usize| {
            let mut idx: Vec<usize> = (0..rules.len()).collect();
            // Longer matches first; word-final rules before general ones of equal length.
            idx.sort_by_key(|&i| (std::cmp::Reverse(key(&rules[i])), !rules[i].word_final, i));
            idx
        };
        let by_arabic = order(|r| r.arabic.len());
        let by_latin = order(|r| r.latin.len());
        Self {
            rules,
            by_arabic,
            by_latin,
        }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn load(path: &std::path::Path) -> Result<Self, Box<dyn std::error::Error>> {
        Ok(std::fs::read_to_string(path)?.parse()?)
    }

    pub fn transliterate(&self, text: &str, direction: Direction) -> String {
        let chars: Vec<char> = text.chars().collect();
        let (order, in_word): (&[usize], fn(char) -> bool) = match direction {
            Direction::ToLatin => (&self.by_arabic, is_arabic_letter),
            Direction::ToArabic => (&self.by_latin, |c: char| c.is_ascii_alphanumeric()),
        };
        let mut out = String::with_capacity(text.len() * 2);
        let mut i = 0;
        'outer: while i < chars.len() {
            for &ri in order {
                let r = &self.rules[ri];
                let (from, to) = match direction {
                    Direction::ToLatin => (&r.arabic, &r.latin),
                    Direction::ToArabic => (&r.latin, &r.arabic),
                };
                let end = i + from.len();
                if end > chars.len() || chars[i..end] != from[..] {
                    continue;
                }
                if r.word_final && chars.get(end).is_some_and(|&c| in_word(c)) {
                    continue;
                }
                out.extend(to.iter());
                i = end;
                continue 'outer;
            }
            out.push(chars[i]);
            i += 1;
        }
        out
    }

    pub fn to_latin(&self, text: &str) -> String {
        self.transliterate(text, Direction::ToLatin)
    }

    pub fn to_arabic(&self, text: &str) -> String {
        self.transliterate(text, Direction::ToArabic)
    }

    /// Words whose round trip fails.
    pub fn round_trip_failures<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        words
            .into_iter()
            .filter(|w| self.to_arabic(&self.to_latin(w)) != *w)
            .map(str::to_string)
            .collect()
    }
}
