use std::io::Write;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use slstm_core::data::metrics::{accuracy, span_f1};
use slstm_core::data::synth::{self, bracket_depths, classification_label};
use slstm_core::data::tags::{bio_to_bioes, bioes_spans, bioes_to_bio, is_bioes_well_formed};
use slstm_core::data::{self, ConllOptions, Labels, Vocab, BOS, EOS, UNK};
use slstm_core::Error;
use tempfile::NamedTempFile;

fn file(contents: &str) -> NamedTempFile {
    let mut f = NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn vocab_reserves_the_first_four_ids() {
    let mut v = Vocab::new();
    assert_eq!(v.len(), 4);
    assert_eq!(v.token_of(BOS), Some("<s>"));
    assert_eq!(v.token_of(EOS), Some("</s>"));
    let ids = v.encode(&["a", "b", "a"], true);
    assert_eq!(ids, vec![BOS, 4, 5, 4, EOS]);
    assert_eq!(v.encode(&["c"], false), vec![BOS, UNK, EOS]);
    let again = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
    assert_eq!(again, v);
    assert_eq!(again.hash(), v.hash());
    assert!(Vocab::from_tokens(strings(&["x", "y"])).is_err());
}

#[test]
fn embeddings_add_reserved_rows() {
    let f = file("cat 0.1 0.2 0.3\ndog 0.3 0.0 -0.3\n");
    let (vocab, m) = data::load_embeddings(f.path(), 3, 7, None).unwrap();
    assert_eq!(vocab.len(), 6);
    assert_eq!(m.shape(), &[6, 3]);
    assert!(m.row(0).iter().all(|&v| v == 0.0));
    for (k, want) in [0.2, 0.1, 0.0].iter().enumerate() {
        assert_abs_diff_eq!(m.get(UNK, k), *want, epsilon = 1e-15);
    }
    for r in [BOS, EOS] {
        assert!(m.row(r).iter().all(|v| v.abs() < 0.05));
    }
    assert_eq!(m.row(vocab.id_of("dog").unwrap()), &[0.3, 0.0, -0.3]);
    let (_, again) = data::load_embeddings(f.path(), 3, 7, None).unwrap();
    assert_eq!(again, m);

    let keep = |t: &str| t == "dog";
    let (small, sm) = data::load_embeddings(f.path(), 3, 7, Some(&keep)).unwrap();
    assert_eq!(small.len(), 5);
    assert_eq!(sm.row(UNK), m.row(UNK));
}

#[test]
fn malformed_embedding_line_reports_its_number() {
    let f = file("dog 0.1 0.2 0.3\ncat 0.1 x\n");
    match data::load_embeddings(f.path(), 3, 0, None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    let f = file("dog 0.1 0.2 0.3\ncat 0.1 0.2 x\n");
    assert!(matches!(data::load_embeddings(f.path(), 3, 0, None), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn classification_tsv() {
    let f = file("1\tHello World\n0\t\nneg\tworld\n");
    let mut vocab = Vocab::new();
    let mut labels = Labels::new();
    let ex = data::load_classification_tsv(f.path(), &mut vocab, &mut labels, true).unwrap();
    assert_eq!(ex.len(), 3);
    let h = vocab.id_of("hello").unwrap();
    let w = vocab.id_of("world").unwrap();
    assert_eq!(ex[0].tokens, vec![BOS, h, w, EOS]);
    assert_eq!(labels.name_of(ex[0].label), Some("1"));
    assert_eq!(ex[1].tokens, vec![BOS, EOS]);
    assert_eq!((ex[0].label, ex[1].label, ex[2].label), (0, 1, 2));

    let bad = file("1\tfine\nno tab here\n");
    assert!(matches!(
        data::load_classification_tsv(bad.path(), &mut vocab, &mut labels, true),
        Err(Error::Parse { line: 2, .. })
    ));
}

#[test]
fn conll_reading() {
    let f = file("-DOCSTART- -X- O O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\n\nPeter NNP B-NP B-PER\nBlackburn NNP I-NP I-PER\n");
    let mut vocab = Vocab::new();
    let mut labels = Labels::new();
    let ex = data::load_conll(f.path(), &mut vocab, &mut labels, ConllOptions::default()).unwrap();
    assert_eq!(ex.len(), 2);
    assert_eq!(ex[0].tokens.len(), 4);
    let names: Vec<&str> = ex[1].tags.iter().map(|&t| labels.name_of(t).unwrap()).collect();
    assert_eq!(names, vec!["B-PER", "E-PER"]);
    assert!(vocab.id_of("EU").is_some(), "case is preserved");
    assert!(vocab.id_of("-DOCSTART-").is_none());

    let raw = data::read_conll(f.path(), 3).unwrap();
    assert_eq!(raw[0].1, strings(&["B-ORG", "O"]));

    let opts = ConllOptions { column: 4, ..Default::default() };
    assert!(matches!(data::load_conll(f.path(), &mut vocab, &mut labels, opts), Err(Error::Parse { line: 3, .. })));
    let ragged = file("a B-X\nb c O\n");
    assert!(matches!(data::read_conll(ragged.path(), 1), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn conll_digit_normalisation_is_optional() {
    let f = file("in O\n1996 O\n");
    let mut vocab = Vocab::new();
    let mut labels = Labels::new();
    data::load_conll(f.path(), &mut vocab, &mut labels, ConllOptions { column: 1, ..Default::default() }).unwrap();
    assert!(vocab.id_of("1996").is_some());
    let opts = ConllOptions { column: 1, normalize_digits: true, ..Default::default() };
    data::load_conll(f.path(), &mut vocab, &mut labels, opts).unwrap();
    assert!(vocab.id_of("0000").is_some());
}

#[test]
fn bio_to_bioes_examples() {
    assert_eq!(bio_to_bioes(&["B-PER"]).0, strings(&["S-PER"]));
    assert_eq!(bio_to_bioes(&["B-LOC", "I-LOC", "I-LOC"]).0, strings(&["B-LOC", "I-LOC", "E-LOC"]));
    let (tags, repairs) = bio_to_bioes(&["O", "I-ORG"]);
    assert_eq!(tags, strings(&["O", "S-ORG"]));
    assert_eq!(repairs.len(), 1);
    assert_eq!(repairs[0].index, 1);
    let (tags, repairs) = bio_to_bioes(&["B-PER", "I-LOC", "O"]);
    assert_eq!(tags, strings(&["S-PER", "S-LOC", "O"]));
    assert_eq!(repairs.len(), 1);
}

#[test]
fn well_formedness_checker() {
    assert!(is_bioes_well_formed(&["B-X", "I-X", "E-X", "O", "S-Y"]));
    assert!(!is_bioes_well_formed(&["B-X", "O"]));
    assert!(!is_bioes_well_formed(&["I-X", "E-X"]));
    assert!(!is_bioes_well_formed(&["B-X", "E-Y"]));
    assert!(!is_bioes_well_formed(&["B-X"]));
    assert!(!is_bioes_well_formed(&["Q"]));
}

#[test]
fn span_scores() {
    let gold = vec![strings(&["B-PER", "E-PER", "O", "S-LOC"])];
    let perfect = span_f1(&gold, &gold);
    assert_eq!(perfect.f1, 100.0);
    let all_o = vec![strings(&["O", "O", "O", "O"])];
    assert_eq!(span_f1(&all_o, &gold).f1, 0.0);
    let half = vec![strings(&["B-PER", "E-PER", "O", "S-PER"])];
    let s = span_f1(&half, &gold);
    assert_abs_diff_eq!(s.precision, 50.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.recall, 50.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.f1, 50.0, epsilon = 1e-12);
    assert_eq!(bioes_spans(&["B-X", "I-X", "O", "E-X"]), vec![]);
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]), 75.0);
}

#[test]
fn synthetic_classification() {
    let mut toks = vec![synth::filler(0); 64];
    toks[0] = "A".into();
    toks[63] = "B".into();
    assert_eq!(classification_label(&toks, 64), 1);
    let none = vec![synth::filler(3); 40];
    assert_eq!(classification_label(&none, 64), 0);
    let mut near = none.clone();
    near[2] = "A".into();
    near[10] = "B".into();
    assert_eq!(classification_label(&near, 64), 0);
    let mut reversed = none.clone();
    reversed[0] = "B".into();
    reversed[39] = "A".into();
    assert_eq!(classification_label(&reversed, 64), 0);

    let set = synth::synth_classification(10_000, 64, 7).unwrap();
    let pos = set.iter().filter(|(_, y)| *y == 1).count() as f64 / 1e4;
    assert!((0.45..=0.55).contains(&pos), "balance {pos}");
    for (t, y) in &set {
        assert!(t.len() <= 64 && t.len() >= 34);
        assert_eq!(*y, classification_label(t, 64));
    }
    assert_eq!(set, synth::synth_classification(10_000, 64, 7).unwrap());
    assert!(synth::synth_classification(10, 7, 0).is_err());
}

/// Independent stack walk for the depth tags.
fn stack_depths(tokens: &[String]) -> Vec<usize> {
    let mut stack = Vec::new();
    let mut tags = Vec::new();
    for t in tokens {
        if t == "(" {
            stack.push(());
            tags.push(stack.len().min(3));
        } else if t == ")" {
            tags.push(stack.len().min(3));
            stack.pop();
        } else {
            tags.push(stack.len().min(3));
        }
    }
    tags
}

#[test]
fn synthetic_tagging() {
    assert_eq!(bracket_depths(&["(", "(", ")", ")"]), vec![1, 2, 2, 1]);
    assert_eq!(bracket_depths(&["w1", "w2", "w3"]), vec![0, 0, 0]);
    let set = synth::synth_tagging(2000, 32, 3).unwrap();
    let mut seen = [false; 4];
    for (t, tags) in &set {
        assert!(t.len() >= 16 && t.len() <= 32);
        assert_eq!(tags, &stack_depths(t));
        for &d in tags {
            seen[d] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
    assert!(synth::synth_tagging(1, 3, 0).is_err());
}

fn bio_tag() -> impl Strategy<Value = String> {
    prop_oneof![Just("O".to_string()), "[BI]-(PER|LOC)".prop_map(|s| s)]
}

proptest! {
    #[test]
    fn bioes_conversion_properties(tags in prop::collection::vec(bio_tag(), 0..12)) {
        let (bioes, _) = bio_to_bioes(&tags);
        prop_assert!(is_bioes_well_formed(&bioes));
        let again = bio_to_bioes(&bioes_to_bio(&bioes)).0;
        prop_assert_eq!(again, bioes);
    }

    #[test]
    fn vocab_round_trip(words in prop::collection::vec("[a-z]{1,4}", 0..30)) {
        let mut v = Vocab::new();
        v.encode(&words, true);
        for i in 0..v.len() {
            prop_assert_eq!(v.id_of(v.token_of(i).unwrap()), Some(i));
        }
    }
}
