use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{egyptian_words, english_words, KEEP_LATIN};
use super::{classify_script, DataError, Script, TransliterationTable};

/// Fixed seed of the chain's transition structure; sampling uses the corpus seed.
pub const GRAMMAR_SEED: u64 = 0x5EED_0F_6A11;
const SUCCESSORS: usize = 4;
const SUCCESSOR_WEIGHTS: [f64; SUCCESSORS] = [0.4, 0.3, 0.2, 0.1];
pub const MIN_WORDS: usize = 4;
pub const MAX_WORDS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    BranchArabic,
    BranchLatin,
    /// English-gloss text in a disjoint ASCII lexicon.
    BaseDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_sentences: usize,
    #[serde(default = "default_latin_ratio")]
    pub latin_ratio: f64,
    /// Share of Arabic-script sentences that receive one code-switched word.
    #[serde(default)]
    pub noise_level: f64,
    pub seed: u64,
    pub domain: Domain,
}

fn default_latin_ratio() -> f64 {
    0.25
}

impl CorpusSpec {
    pub fn new(domain: Domain, n_sentences: usize, latin_ratio: f64, seed: u64) -> Self {
        Self {
            n_sentences,
            latin_ratio,
            noise_level: 0.0,
            seed,
            domain,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.latin_ratio) {
            return Err(DataError::InvalidSpec(format!(
                "latin_ratio {} outside [0, 1]",
                self.latin_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(DataError::InvalidSpec(format!(
                "noise_level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub text: String,
    pub script: Script,
    /// Arabic-script original of a transliterated sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-2 Markov chain whose successor sets are a fixed function of the
/// previous two words.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    words: Vec<&'static str>,
}

impl MarkovChain {
    pub fn new(words: Vec<&'static str>) -> Self {
        Self { words }
    }

    pub fn egyptian() -> Self {
        Self::new(egyptian_words().collect())
    }

    pub fn english() -> Self {
        Self::new(english_words().collect())
    }

    pub fn words(&self) -> &[&'static str] {
        &self.words
    }

    /// Candidate successors of the state `(a, b)`; `usize::MAX` marks sentence start.
    pub fn successors(&self, a: usize, b: usize) -> [usize; SUCCESSORS] {
        let base = mix(GRAMMAR_SEED ^ mix(a as u64) ^ mix(b as u64).rotate_left(17));
        std::array::from_fn(|j| (mix(base.wrapping_add(j as u64)) % self.words.len() as u64) as usize)
    }

    pub fn sentence(&self, rng: &mut impl Rng) -> String {
        let n = rng.random_range(MIN_WORDS..=MAX_WORDS);
        let (mut a, mut b) = (usize::MAX, usize::MAX);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let cands = self.successors(a, b);
            let mut u: f64 = rng.random();
            let mut pick = cands[SUCCESSORS - 1];
            for (c, w) in cands.iter().zip(SUCCESSOR_WEIGHTS) {
                if u < w {
                    pick = *c;
                    break;
                }
                u -= w;
            }
            out.push(self.words[pick]);
            (a, b) = (b, pick);
        }
        out.join(" ")
    }
}

/// Seeded corpus with an exact Latin-script allocation of
/// `round(latin_ratio · n)` sentences.
pub fn generate_corpus(spec: &CorpusSpec, table: &TransliterationTable) -> Result<Vec<TaggedSentence>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_sentences;
    if spec.domain == Domain::BaseDomain {
        let chain = MarkovChain::english();
        return Ok((0..n)
            .map(|_| {
                let text = chain.sentence(&mut rng);
                TaggedSentence {
                    script: classify_script(&text),
                    text,
                    source: None,
                }
            })
            .collect());
    }
    let chain = MarkovChain::egyptian();
    let originals: Vec<String> = (0..n).map(|_| chain.sentence(&mut rng)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_latin = (spec.latin_ratio * n as f64).round() as usize;
    let mut latin = vec![false; n];
    for &i in &order[..n_latin] {
        latin[i] = true;
    }
    let arabic_ids: Vec<usize> = order[n_latin..].to_vec();
    let n_noisy = (spec.noise_level * arabic_ids.len() as f64).round() as usize;
    let mut noisy = vec![false; n];
    for &i in &arabic_ids[..n_noisy] {
        noisy[i] = true;
    }
    let mut out = Vec::with_capacity(n);
    for (i, original) in originals.into_iter().enumerate() {
        let (text, source) = if latin[i] {
            (table.to_latin(&original), Some(original))
        } else if noisy[i] {
            (code_switch(&original, table, &mut rng), None)
        } else {
            (original, None)
        };
        out.push(TaggedSentence {
            script: classify_script(&text),
            text,
            source,
        });
    }
    Ok(out)
}

/// Replace one word by its Arabizi form, or insert a keep-in-Latin term.
pub(crate) fn code_switch(sentence: &str, table: &TransliterationTable, rng: &mut impl Rng) -> String {
    let mut words: Vec<String> = sentence.split(' ').map(str::to_string).collect();
    let pos = rng.random_range(0..words.len());
    if rng.random_bool(0.5) {
        words[pos] = table.to_latin(&words[pos]);
    } else {
        let term = KEEP_LATIN[rng.random_range(0..KEEP_LATIN.len())];
        words.insert(pos, term.to_string());
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_latin_allocation() {
        let t = TransliterationTable::default();
        let spec = CorpusSpec::new(Domain::BranchArabic, 1000, 0.25, 3);
        let c = generate_corpus(&spec, &t).unwrap();
        assert_eq!(c.iter().filter(|s| s.script == Script::Latin).count(), 250);
        assert_eq!(c.iter().filter(|s| s.script == Script::Arabic).count(), 750);
        assert_eq!(c, generate_corpus(&spec, &t).unwrap());
    }

    #[test]
    fn rejects_bad_ratio() {
        let spec = CorpusSpec::new(Domain::BranchLatin, 10, 1.5, 0);
        assert!(generate_corpus(&spec, &TransliterationTable::default()).is_err());
    }

    #[test]
    fn base_domain_is_ascii() {
        let spec = CorpusSpec::new(Domain::BaseDomain, 50, 0.0, 1);
        for s in generate_corpus(&spec, &TransliterationTable::default()).unwrap() {
            assert!(s.text.is_ascii());
            assert_eq!(s.script, Script::Latin);
        }
    }
}
