//! Metric fidelity against independently computed oracles: frozen BLEU
//! fixtures, hand-computed F1/ROUGE values, and property checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use ueidg_core::metrics::{rouge_l, sacre_bleu, token_f1};

#[derive(Deserialize)]
struct BleuFixture {
    name: String,
    hyps: Vec<String>,
    refs: Vec<String>,
    bleu: f64,
}

#[test]
fn bleu_matches_frozen_reference_fixtures() {
    let raw = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/bleu.json"));
    let fixtures: Vec<BleuFixture> = serde_json::from_str(raw).unwrap();
    assert!(fixtures.len() >= 5, "need at least five frozen fixtures");
    for fx in &fixtures {
        let got = sacre_bleu(&fx.hyps, &fx.refs).unwrap();
        assert!(
            (got - fx.bleu).abs() < 0.1,
            "{}: got {got:.6}, frozen {:.6}",
            fx.name,
            fx.bleu
        );
    }
}

#[test]
fn token_f1_hand_computed_fixtures() {
    // (prediction, reference, expected) — worked by hand with SQuAD-style
    // normalization: lowercase, strip punctuation, drop a/an/the.
    let cases: &[(&str, &str, f64)] = &[
        ("the cat sat", "the cat sat", 1.0),
        // pred {x,b,c} vs ref {b,c,d}: common 2, P=R=2/3
        ("x b c", "b c d", 2.0 / 3.0),
        ("", "x", 0.0),
        ("x", "", 0.0),
        ("", "", 1.0),
        // articles vanish: pred {} vs ref {} -> both empty
        ("the a an", "a the", 1.0),
        // "The Cat!" -> {cat}; "cat" -> {cat}
        ("The Cat!", "cat", 1.0),
        // pred {b,b} vs ref {b}: common 1, P=1/2, R=1 -> 2/3
        ("b b", "b", 2.0 / 3.0),
        // pred {u,v,w,z} vs ref {u,v}: common 2, P=1/2, R=1 -> 2/3
        ("u v w z", "u v", 2.0 / 3.0),
        // disjoint
        ("qq ww", "ee rr", 0.0),
        // pred {one,two,three} vs ref {two,three,four,five}:
        // common 2, P=2/3, R=1/2 -> 2*(1/3)/(7/6) = 4/7
        ("one two three", "two three four five", 4.0 / 7.0),
        // punctuation-only strings normalize to empty on both sides
        ("!!!", "??", 1.0),
    ];
    assert!(cases.len() >= 10);
    for (pred, reference, expected) in cases {
        let got = token_f1(pred, reference);
        assert!(
            (got - expected).abs() < 1e-12,
            "token_f1({pred:?}, {reference:?}) = {got}, expected {expected}"
        );
    }
}

#[test]
fn rouge_l_hand_computed_fixtures() {
    // Hand-worked LCS over lowercase whitespace tokens, beta = 1.
    let cases: &[(&str, &str, f64)] = &[
        ("the cat sat", "the cat ran", 2.0 / 3.0),
        ("the cat sat", "the cat sat", 1.0),
        ("aa bb", "cc dd", 0.0),
        ("", "", 1.0),
        ("x", "", 0.0),
        ("", "x", 0.0),
        // LCS("a c", "a b c") = 2: P=1, R=2/3 -> 4/5
        ("a c", "a b c", 0.8),
        // LCS("a b c d", "b d") = 2: P=1/2, R=1 -> 2/3
        ("a b c d", "b d", 2.0 / 3.0),
        // order matters for LCS: LCS("b a", "a b") = 1: P=R=1/2 -> 1/2
        ("b a", "a b", 0.5),
        // case-insensitive identity
        ("The Cat", "the cat", 1.0),
        // LCS("x y z", "x q z") = 2 -> 2/3
        ("x y z", "x q z", 2.0 / 3.0),
        // LCS("m n o p", "n p q") = 2: P=1/2, R=2/3 -> 4/7
        ("m n o p", "n p q", 4.0 / 7.0),
    ];
    assert!(cases.len() >= 10);
    for (pred, reference, expected) in cases {
        let got = rouge_l(pred, reference);
        assert!(
            (got - expected).abs() < 1e-12,
            "rouge_l({pred:?}, {reference:?}) = {got}, expected {expected}"
        );
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, min_tokens: usize) -> String {
    let words = [
        "cat", "dog", "harbor", "museum", "opens", "nine", "free", "sunday", "ticket", "mat",
        "runs", "12.50", "quay", "bell", "stone",
    ];
    let n = rng.gen_range(min_tokens..min_tokens + 8);
    (0..n)
        .map(|_| words[rng.gen_range(0..words.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn identity_attains_maximum_on_random_strings() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        // >= 4 tokens so a 4-gram exists and BLEU can reach 100.
        let s = random_sentence(&mut rng, 4);
        assert!((token_f1(&s, &s) - 1.0).abs() < 1e-12, "{s}");
        assert!((rouge_l(&s, &s) - 1.0).abs() < 1e-12, "{s}");
        let v = vec![s.clone()];
        let b = sacre_bleu(&v, &v).unwrap();
        assert!((b - 100.0).abs() < 1e-9, "{s}: {b}");
    }
}

/// Plain recursive-with-memo LCS, written independently of the library's
/// rolling-array version.
fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    let mut memo = vec![vec![usize::MAX; b.len() + 1]; a.len() + 1];
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut Vec<Vec<usize>>) -> usize {
        if i == 0 || j == 0 {
            return 0;
        }
        if memo[i][j] != usize::MAX {
            return memo[i][j];
        }
        let v = if a[i - 1] == b[j - 1] {
            go(a, b, i - 1, j - 1, memo) + 1
        } else {
            go(a, b, i - 1, j, memo).max(go(a, b, i, j - 1, memo))
        };
        memo[i][j] = v;
        v
    }
    go(a, b, a.len(), b.len(), &mut memo)
}

#[test]
fn rouge_lcs_matches_independent_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for _ in 0..100 {
        let p = random_sentence(&mut rng, 1);
        let r = random_sentence(&mut rng, 1);
        let pt: Vec<&str> = p.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        let lcs = lcs_oracle(&pt, &rt) as f64;
        let expected = if lcs == 0.0 {
            0.0
        } else {
            let pr = lcs / pt.len() as f64;
            let rc = lcs / rt.len() as f64;
            2.0 * pr * rc / (pr + rc)
        };
        let got = rouge_l(&p, &r);
        assert!(
            (got - expected).abs() < 1e-12,
            "rouge_l({p:?}, {r:?}) = {got}, oracle {expected}"
        );
    }
}

#[test]
fn scores_stay_in_declared_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let p = random_sentence(&mut rng, 1);
        let r = random_sentence(&mut rng, 1);
        let f = token_f1(&p, &r);
        let l = rouge_l(&p, &r);
        let b = sacre_bleu(&[p.clone()], &[r.clone()]).unwrap();
        assert!((0.0..=1.0).contains(&f));
        assert!((0.0..=1.0).contains(&l));
        assert!((0.0..=100.0 + 1e-9).contains(&b));
    }
}
