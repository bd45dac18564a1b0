//! Synthetic instruction data and evaluation fixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::code_switch;
use crate::data::{
    instantiate_template, lexicon, Conversation, DataError, Language, MarkovChain, Message, SftRecord, TaggedSentence,
    Task, TemplateRequest, TransliterationTable, Variant,
};
use crate::eval::{GenItem, McTask};
use crate::tokenizer::encode_document;

pub const COMPOSE_ARABIC: &str = "اكتبلي جملة فيها كلمة {word}";
pub const COMPOSE_FRANCO: &str = "ektebly gomla feha kelmet {word}";
pub const TRANSLITERATE_PROMPT: &str = "اكتبلي الكلام ده بالفرانكو:\n";

/// Join consecutive sentences into `BEGIN … END` token documents.
pub fn documents(sentences: &[TaggedSentence], per_doc: usize) -> Vec<Vec<u32>> {
    sentences
        .chunks(per_doc.max(1))
        .map(|c| {
            let text: Vec<&str> = c.iter().map(|s| s.text.as_str()).collect();
            encode_document(&text.join("\n"))
        })
        .collect()
}

fn sentence_with(chain: &MarkovChain, word: &str, rng: &mut ChaCha8Rng) -> String {
    let s = chain.sentence(rng);
    format!("{word} {s}")
}

/// Instruction mix: transliteration both ways, translation both ways, and
/// sentence composition in each script. `noise` is the share of
/// Arabic-script compositions that receive a code-switched word.
pub fn sft_mix(n: usize, noise: f64, table: &TransliterationTable, seed: u64) -> Result<Vec<SftRecord>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::egyptian();
    let english = MarkovChain::english();
    let words: Vec<&str> = lexicon::egyptian_words().collect();
    let variants = [Variant::Single, Variant::Single, Variant::FewShot, Variant::MultiTurn];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let variant = variants[rng.random_range(0..variants.len())];
        let tseed = rng.random::<u64>();
        let egyptian = chain.sentence(&mut rng);
        let record = match i % 6 {
            0 | 1 => {
                let (source, src, tgt) = if i % 6 == 0 {
                    (egyptian.clone(), Language::Arabic, Language::Franco)
                } else {
                    (table.to_latin(&egyptian), Language::Franco, Language::Arabic)
                };
                let req = TemplateRequest {
                    task: Task::Transliterate,
                    source: &source,
                    src_lang: src,
                    tgt_lang: Some(tgt),
                    variant,
                };
                let conv = instantiate_template(&req, table, tseed)?;
                let tgt_text = conv.messages[1].content.clone();
                SftRecord {
                    messages: conv.messages,
                    src: Some(source),
                    tgt: Some(tgt_text),
                }
            }
            2 | 3 => {
                let (source, src, tgt) = if i % 6 == 2 {
                    (egyptian.clone(), Language::Egyptian, Language::English)
                } else {
                    (english.sentence(&mut rng), Language::English, Language::Egyptian)
                };
                let req = TemplateRequest {
                    task: Task::Translate,
                    source: &source,
                    src_lang: src,
                    tgt_lang: Some(tgt),
                    variant,
                };
                let conv = instantiate_template(&req, table, tseed)?;
                let tgt_text = conv.messages[1].content.clone();
                SftRecord {
                    messages: conv.messages,
                    src: Some(source),
                    tgt: Some(tgt_text),
                }
            }
            4 => {
                let word = words[rng.random_range(0..words.len())];
                let mut answer = sentence_with(&chain, word, &mut rng);
                if rng.random_bool(noise) {
                    answer = code_switch(&answer, table, &mut rng);
                }
                SftRecord::from(Conversation::new(vec![
                    Message::user(COMPOSE_ARABIC.replace("{word}", word)),
                    Message::assistant(answer),
                ]))
            }
            _ => {
                let word = words[rng.random_range(0..words.len())];
                let answer = table.to_latin(&sentence_with(&chain, word, &mut rng));
                SftRecord::from(Conversation::new(vec![
                    Message::user(COMPOSE_FRANCO.replace("{word}", &table.to_latin(word))),
                    Message::assistant(answer),
                ]))
            }
        };
        out.push(record);
    }
    Ok(out)
}

/// Cloze items: the first three words of a sentence as context, its
/// remainder against three remainders from other sentences.
pub fn cloze_tasks(sentences: &[TaggedSentence], n: usize, seed: u64) -> Vec<McTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split: Vec<(String, String)> = sentences
        .iter()
        .filter_map(|s| {
            let w: Vec<&str> = s.text.split(' ').collect();
            (w.len() >= 5).then(|| (w[..3].join(" "), format!(" {}", w[3..].join(" "))))
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..split.len().min(n) {
        let (context, gold_text) = &split[i];
        let mut choices = vec![gold_text.clone()];
        while choices.len() < 4 && split.len() > 4 {
            let c = &split[rng.random_range(0..split.len())].1;
            if !choices.contains(c) {
                choices.push(c.clone());
            }
        }
        choices.shuffle(&mut rng);
        let gold = choices.iter().position(|c| c == gold_text).expect("gold present");
        out.push(McTask {
            context: context.clone(),
            choices,
            gold,
            apply_chat_template: false,
        });
    }
    out
}

/// Pick the Arabizi rendering of an Arabic-script sentence among four.
pub fn transliteration_choice_tasks(
    sentences: &[TaggedSentence],
    table: &TransliterationTable,
    n: usize,
    seed: u64,
) -> Vec<McTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latin: Vec<String> = sentences.iter().map(|s| table.to_latin(&s.text)).collect();
    let mut out = Vec::new();
    for (i, s) in sentences.iter().take(n).enumerate() {
        let mut choices = vec![latin[i].clone()];
        while choices.len() < 4 && latin.len() > 4 {
            let c = &latin[rng.random_range(0..latin.len())];
            if !choices.contains(c) {
                choices.push(c.clone());
            }
        }
        choices.shuffle(&mut rng);
        let gold = choices.iter().position(|c| *c == latin[i]).expect("gold present");
        out.push(McTask {
            context: format!("{TRANSLITERATE_PROMPT}{}\n", s.text),
            choices,
            gold,
            apply_chat_template: true,
        });
    }
    out
}

pub fn transliteration_generation(sentences: &[TaggedSentence], table: &TransliterationTable, n: usize) -> Vec<GenItem> {
    sentences
        .iter()
        .take(n)
        .map(|s| GenItem {
            prompt: format!("{TRANSLITERATE_PROMPT}{}\n", s.text),
            reference: table.to_latin(&s.text),
        })
        .collect()
}

pub fn translation_generation(sentences: &[TaggedSentence], n: usize) -> Result<Vec<GenItem>, DataError> {
    sentences
        .iter()
        .take(n)
        .map(|s| {
            Ok(GenItem {
                prompt: format!("ترجملي لل{}:\n{}\n", Language::English.name(), s.text),
                reference: crate::data::translate_words(&s.text, Language::Egyptian, Language::English)?,
            })
        })
        .collect()
}
