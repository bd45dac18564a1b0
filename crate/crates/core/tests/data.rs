mod common;

use btxforge_core::data::lexicon::{egyptian_words, LEXICON};
use btxforge_core::data::{
    check_record, classify_script, code_switch_eligible, generate_corpus, validate_conversations, CorpusSpec, Domain,
    Message, MarkovChain, Role, Script, SftRecord, TransliterationTable,
};
use common::{code_switch_fixture, validation_fixture};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn whole_lexicon_round_trips() {
    let table = TransliterationTable::default();
    let failures = table.round_trip_failures(egyptian_words());
    assert!(failures.is_empty(), "{failures:?}");
    assert_eq!(egyptian_words().count(), LEXICON.len());
}

#[test]
fn transliterated_sentences_classify_as_latin() {
    let table = TransliterationTable::default();
    let chain = MarkovChain::egyptian();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let s = chain.sentence(&mut rng);
        assert_eq!(classify_script(&s), Script::Arabic, "{s}");
        assert_eq!(classify_script(&table.to_latin(&s)), Script::Latin, "{s}");
    }
}

#[test]
fn validation_fixture_verdicts() {
    let (records, expected) = validation_fixture();
    assert_eq!(records.len(), expected.len());
    for (i, (r, want)) in records.iter().zip(&expected).enumerate() {
        let got = check_record(r).map_or("accept", |rule| rule.as_str());
        assert_eq!(got, want, "record {i}");
    }
    let (accepted, rejected) = validate_conversations(&records);
    assert_eq!(accepted.len(), expected.iter().filter(|e| *e == "accept").count());
    assert!(rejected.iter().all(|r| expected[r.record] == r.rule.as_str()));
}

#[test]
fn code_switch_fixture_verdicts() {
    for (text, eligible) in code_switch_fixture() {
        assert_eq!(code_switch_eligible(&text), eligible, "{text}");
    }
}

#[test]
fn corpus_respects_script_allocation() {
    let table = TransliterationTable::default();
    for (n, ratio) in [(200, 0.25), (101, 0.5), (50, 0.0), (37, 1.0)] {
        let spec = CorpusSpec::new(Domain::BranchArabic, n, ratio, 9);
        let corpus = generate_corpus(&spec, &table).unwrap();
        assert_eq!(corpus.len(), n);
        let latin: Vec<_> = corpus.iter().filter(|s| s.source.is_some()).collect();
        assert_eq!(latin.len(), (ratio * n as f64).round() as usize);
        for s in &corpus {
            match &s.source {
                Some(orig) => {
                    assert_eq!(s.script, Script::Latin);
                    assert_eq!(table.to_latin(orig), s.text);
                }
                None => assert_eq!(s.script, Script::Arabic),
            }
        }
        assert_eq!(corpus, generate_corpus(&spec, &table).unwrap());
    }
}

fn role() -> impl Strategy<Value = Role> {
    prop_oneof![Just(Role::System), Just(Role::User), Just(Role::Assistant)]
}

fn record() -> impl Strategy<Value = SftRecord> {
    (
        prop::collection::vec((role(), "[a-z ]{0,6}"), 0..5),
        prop::option::of(("[a-z]{0,9}", "[a-z]{0,9}")),
    )
        .prop_map(|(msgs, pair)| SftRecord {
            messages: msgs.into_iter().map(|(r, c)| Message::new(r, c)).collect(),
            src: pair.as_ref().map(|p| p.0.clone()),
            tgt: pair.map(|p| p.1),
        })
}

proptest! {
    #[test]
    fn validation_is_idempotent(records in prop::collection::vec(record(), 0..20)) {
        let (accepted, rejected) = validate_conversations(&records);
        prop_assert_eq!(accepted.len() + rejected.len(), records.len());
        let (again, none) = validate_conversations(&accepted);
        prop_assert!(none.is_empty());
        prop_assert_eq!(again, accepted);
    }
}
