//! BLEU and ROUGE on a shared tokenizer. Scores are in [0, 100].

use std::collections::HashMap;

/// Lowercase, split on whitespace, and make every punctuation character its
/// own token. Idempotent on `tokens.join(" ")`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped overlap of n-gram multisets and the two totals.
fn ngram_overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hit = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hit, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Modified (clipped) n-gram precisions for n = 1..=4, as fractions.
pub fn ngram_precisions(candidate: &str, reference: &str) -> [f64; 4] {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let mut p = [0.0; 4];
    for (k, slot) in p.iter_mut().enumerate() {
        let (hit, total, _) = ngram_overlap(&c, &r, k + 1);
        if total > 0 {
            *slot = hit as f64 / total as f64;
        }
    }
    p
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Cumulative BLEU-n with uniform weights and no smoothing.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4, got {n}");
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() {
        log::warn!("BLEU of an empty candidate is 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (hit, total, _) = ngram_overlap(&c, &r, k);
        if hit == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (hit as f64 / total as f64).ln();
    }
    100.0 * brevity_penalty(c.len(), r.len()) * (log_sum / n as f64).exp()
}

fn f1(hit: usize, cand_total: usize, ref_total: usize) -> f64 {
    if hit == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = hit as f64 / cand_total as f64;
    let r = hit as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
    Lsum,
}

fn lcs_table(a: &[String], b: &[String]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            t[i + 1][j + 1] = if a[i] == b[j] { t[i][j] + 1 } else { t[i][j + 1].max(t[i + 1][j]) };
        }
    }
    t
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Positions in `reference` covered by one LCS with `cand`.
fn lcs_ref_positions(reference: &[String], cand: &[String]) -> Vec<usize> {
    let t = lcs_table(reference, cand);
    let (mut i, mut j) = (reference.len(), cand.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == cand[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Union-LCS hits over newline-split sentences, clipped by token counts so a
/// token is never credited more often than it occurs on either side.
fn union_lcs_hits(cand: &[Vec<String>], reference: &[Vec<String>]) -> usize {
    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    let mut ref_left: HashMap<&str, usize> = HashMap::new();
    for t in cand.iter().flatten() {
        *cand_left.entry(t).or_insert(0) += 1;
    }
    for t in reference.iter().flatten() {
        *ref_left.entry(t).or_insert(0) += 1;
    }
    let mut hits = 0;
    for r in reference {
        let mut union: Vec<usize> = cand.iter().flat_map(|c| lcs_ref_positions(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for pos in union {
            let tok = r[pos].as_str();
            let (cl, rl) = (cand_left.get_mut(tok).unwrap(), ref_left.get_mut(tok).unwrap());
            if *cl > 0 && *rl > 0 {
                *cl -= 1;
                *rl -= 1;
                hits += 1;
            }
        }
    }
    hits
}

/// ROUGE F1.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let score = match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (h, c, r) = ngram_overlap(&tokenize(candidate), &tokenize(reference), n);
            f1(h, c, r)
        }
        RougeVariant::L => {
            let (c, r) = (tokenize(candidate), tokenize(reference));
            f1(lcs_len(&c, &r), c.len(), r.len())
        }
        RougeVariant::Lsum => {
            let sents = |s: &str| -> Vec<Vec<String>> {
                s.lines().map(tokenize).filter(|t| !t.is_empty()).collect()
            };
            let (c, r) = (sents(candidate), sents(reference));
            let total = |x: &[Vec<String>]| x.iter().map(Vec::len).sum::<usize>();
            f1(union_lcs_hits(&c, &r), total(&c), total(&r))
        }
    };
    100.0 * score
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ANSWER: &str = "Given: v = 12 m/s, t = 5 s\nFormula: d = v * t\nSubstitute: d = 12 * 5\nCompute: d = 60\nAnswer: 60 m";

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Hello, World!  v=12"), ["hello", ",", "world", "!", "v", "=", "12"]);
        assert!(tokenize("  \n").is_empty());
    }

    #[test]
    fn bleu_clipped_unigram() {
        let b = bleu_n("the the the the the the the", "the cat is on the mat", 1);
        assert!((b / 100.0 - 2.0 / 7.0).abs() < 1e-6, "{b}");
    }

    #[test]
    fn brevity_penalty_formula() {
        assert!((brevity_penalty(1, 2) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(3, 2), 1.0);
        // c=1, r=2 with a perfect unigram match
        assert!((bleu_n("cat", "cat sat", 1) / 100.0 - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn identity_and_empty() {
        for n in 1..=4 {
            assert_eq!(bleu_n(ANSWER, ANSWER, n), 100.0);
        }
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L, RougeVariant::Lsum] {
            assert_eq!(rouge(ANSWER, ANSWER, v), 100.0);
            assert_eq!(rouge("a b c", "x y z", v), 0.0);
            assert_eq!(rouge("", ANSWER, v), 0.0);
        }
        assert_eq!(bleu_n("", ANSWER, 1), 0.0);
    }

    #[test]
    fn rouge_l_hand_lcs() {
        assert!((rouge("a b c d", "a c b d", RougeVariant::L) / 100.0 - 0.75).abs() < 1e-6);
    }

    #[test]
    fn rouge_lsum_union() {
        // reference sentence "a b c d"; candidate sentences "a b" and "c d" jointly cover it
        let s = rouge("a b\nc d", "a b c d", RougeVariant::Lsum);
        assert!((s - 100.0).abs() < 1e-9);
        // whole-text LCS does not see the sentence split
        let l = rouge("c d\na b", "a b c d", RougeVariant::L);
        assert!((l - 50.0).abs() < 1e-9);
        assert!((rouge("c d\na b", "a b c d", RougeVariant::Lsum) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_unigram_bigram_hand() {
        // cand: the cat sat; ref: the cat ran away
        // unigrams: hit 2, P 2/3, R 2/4; bigrams: hit 1, P 1/2, R 1/3
        let r1 = rouge("the cat sat", "the cat ran away", RougeVariant::One) / 100.0;
        assert!((r1 - 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5)).abs() < 1e-12);
        let r2 = rouge("the cat sat", "the cat ran away", RougeVariant::Two) / 100.0;
        assert!((r2 - 2.0 * 0.5 * (1.0 / 3.0) / (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    fn text() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "=", "5", "\n"], 0..24).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn bounded_and_retokenize_invariant(c in text(), r in text()) {
            let rt = |s: &str| s.lines().map(|l| tokenize(l).join(" ")).collect::<Vec<_>>().join("\n");
            for n in 1..=4 {
                let b = bleu_n(&c, &r, n);
                prop_assert!((0.0..=100.0).contains(&b));
                prop_assert_eq!(b, bleu_n(&rt(&c), &rt(&r), n));
            }
            for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L, RougeVariant::Lsum] {
                let s = rouge(&c, &r, v);
                prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
                prop_assert_eq!(s, rouge(&rt(&c), &rt(&r), v));
            }
        }

        #[test]
        fn bleu_non_increasing_in_n(c in text(), r in text()) {
            for n in 1..4 {
                prop_assert!(bleu_n(&c, &r, n + 1) <= bleu_n(&c, &r, n) + 1e-9);
            }
        }
    }
}
