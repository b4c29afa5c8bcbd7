mod common;

use std::collections::BTreeMap;

use common::cider_oracle;

use proptest::prelude::*;
use sinet_core::metrics::{bleu, cider_d, clipped_precision, evaluate, rouge_l};

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn refs(xs: &[&[&str]]) -> Vec<Vec<String>> {
    xs.iter().map(|r| strings(r)).collect()
}

#[test]
fn cider_three_segment_corpus_matches_dense_oracle() {
    let cands = ["a man is playing a guitar", "a woman slices an onion", "the dog runs on the grass"];
    let references: [&[&str]; 3] = [
        &["a man plays the guitar", "a man is playing a guitar on stage"],
        &["a woman is slicing an onion", "someone cuts an onion"],
        &["a dog runs across the grass", "the dog is running", "a dog plays outside"],
    ];
    let expected = cider_oracle(&cands, &references);
    let got = cider_d(&strings(&cands), &refs(&references)).unwrap();
    assert!(expected > 0.0);
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn cider_length_penalty_for_twenty_extra_words() {
    // `z` occurs in every document, so its IDF is zero and only `a`
    // contributes: unigram cosine 1, higher orders 0.
    let long = format!("a{}", " z".repeat(21));
    let mut preds = BTreeMap::new();
    preds.insert("s1".to_string(), long);
    preds.insert("s2".to_string(), "z b".to_string());
    let mut references = BTreeMap::new();
    references.insert("s1".to_string(), strings(&["z a"]));
    references.insert("s2".to_string(), strings(&["z b"]));
    let report = evaluate(&preds, &references).unwrap();
    let expected = 10.0 / 4.0 * (-400.0f64 / (2.0 * 36.0)).exp();
    assert!((report.per_segment["s1"].cider_d - expected).abs() < 1e-12);
}

#[test]
fn cider_single_segment_is_zero() {
    let c = cider_d(&strings(&["a b c"]), &refs(&[&["a b c"]])).unwrap();
    assert_eq!(c, 0.0);
}

#[test]
fn bleu_clipping_hand_count() {
    let (m, t) = clipped_precision("the cat the cat", &strings(&["the cat sat"]), 1);
    assert_eq!((m, t), (2, 4));
}

#[test]
fn bleu_brevity_and_geometric_mean() {
    // Candidate 4 tokens, closest reference 6: bp = exp(1 − 6/4).
    let b = bleu(&strings(&["a b c d"]), &refs(&[&["a b c d e f", "x y z x y z x y z"]]), 2).unwrap();
    let bp = (1.0f64 - 6.0 / 4.0).exp();
    assert!((b[0] - bp).abs() < 1e-12);
    assert!((b[1] - bp).abs() < 1e-12);
    // Equal distance 3 vs 5 around 4: the shorter wins, so no penalty.
    let b = bleu(&strings(&["a b c d"]), &refs(&[&["a b c", "a b c d e"]]), 1).unwrap();
    assert!((b[0] - 1.0).abs() < 1e-12);
}

#[test]
fn bleu_zero_order_zeroes_higher_orders() {
    let b = bleu(&strings(&["b a"]), &refs(&[&["a b"]]), 4).unwrap();
    assert_eq!(b[0], 1.0);
    assert_eq!(&b[1..], &[0.0, 0.0, 0.0]);
}

#[test]
fn rouge_lcs_example() {
    let r = rouge_l(&strings(&["a b c d"]), &refs(&[&["a c d b"]])).unwrap();
    let (p, rec, beta) = (0.75, 0.75, 1.2f64);
    let f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
    assert!((r - f).abs() < 1e-12);
}

#[test]
fn identical_corpus_scores_one() {
    let c = strings(&["a man rides a horse", "two dogs play in the snow"]);
    let r: Vec<Vec<String>> = c.iter().map(|s| vec![s.clone()]).collect();
    assert_eq!(bleu(&c, &r, 4).unwrap(), vec![1.0; 4]);
    assert_eq!(rouge_l(&c, &r).unwrap(), 1.0);
}

#[test]
fn disjoint_scores_zero() {
    let b = bleu(&strings(&["x y z"]), &refs(&[&["a b c"]]), 4).unwrap();
    assert_eq!(b, vec![0.0; 4]);
    assert_eq!(rouge_l(&strings(&["x y z"]), &refs(&[&["a b c"]])).unwrap(), 0.0);
}

#[test]
fn empty_candidate_list_is_an_error() {
    assert!(bleu(&[], &[], 4).is_err());
    assert!(rouge_l(&[], &[]).is_err());
    assert!(cider_d(&[], &[]).is_err());
}

#[test]
fn extra_reference_can_lower_bleu_through_brevity() {
    // Closest reference length moves from 3 (no penalty) to 6.
    let before = bleu(&strings(&["a b c d e"]), &refs(&[&["a b c"]]), 1).unwrap()[0];
    let after = bleu(&strings(&["a b c d e"]), &refs(&[&["a b c", "q r s t u v"]]), 1).unwrap()[0];
    assert!(after < before);
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8).prop_map(|w| w.join(" "))
}

fn relabel(s: &str) -> String {
    s.split_whitespace().map(|w| format!("tok_{w}")).collect::<Vec<_>>().join(" ")
}

proptest! {
    #[test]
    fn prop_self_scores_one(c in prop::collection::vec(sentence(), 1..5)) {
        let r: Vec<Vec<String>> = c.iter().map(|s| vec![s.clone()]).collect();
        for v in bleu(&c, &r, 4).unwrap() {
            prop_assert!(v == 1.0 || v == 0.0);
        }
        prop_assert_eq!(bleu(&c, &r, 1).unwrap()[0], 1.0);
        prop_assert_eq!(rouge_l(&c, &r).unwrap(), 1.0);
    }

    #[test]
    fn prop_relabeling_invariance(
        c in prop::collection::vec(sentence(), 2..5),
        extra in prop::collection::vec(sentence(), 2..5),
    ) {
        let r: Vec<Vec<String>> = c.iter().zip(extra.iter().cycle()).map(|(a, b)| vec![b.clone(), a.clone()]).collect();
        let c2: Vec<String> = c.iter().map(|s| relabel(s)).collect();
        let r2: Vec<Vec<String>> = r.iter().map(|rs| rs.iter().map(|s| relabel(s)).collect()).collect();
        prop_assert_eq!(bleu(&c, &r, 4).unwrap(), bleu(&c2, &r2, 4).unwrap());
        prop_assert_eq!(rouge_l(&c, &r).unwrap(), rouge_l(&c2, &r2).unwrap());
        prop_assert!((cider_d(&c, &r).unwrap() - cider_d(&c2, &r2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn prop_extra_reference_never_hurts_rouge_or_precision(
        c in sentence(), r in sentence(), unrelated in sentence(),
    ) {
        let one = refs(&[&[r.as_str()]]);
        let two = refs(&[&[r.as_str(), unrelated.as_str()]]);
        let cs = vec![c.clone()];
        prop_assert!(rouge_l(&cs, &two).unwrap() >= rouge_l(&cs, &one).unwrap());
        for n in 1..=4 {
            let (m1, _) = clipped_precision(&c, &one[0], n);
            let (m2, _) = clipped_precision(&c, &two[0], n);
            prop_assert!(m2 >= m1);
        }
    }

    #[test]
    fn prop_scores_in_range(c in prop::collection::vec(sentence(), 2..5), r in prop::collection::vec(sentence(), 2..5)) {
        let n = c.len().min(r.len());
        let rr: Vec<Vec<String>> = r[..n].iter().map(|s| vec![s.clone()]).collect();
        for v in bleu(&c[..n], &rr, 4).unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let rl = rouge_l(&c[..n], &rr).unwrap();
        prop_assert!((0.0..=1.0).contains(&rl));
        let cd = cider_d(&c[..n], &rr).unwrap();
        prop_assert!(cd >= 0.0 && cd.is_finite());
    }
}
