//! METEOR with exact and Porter-stem matching stages (no synonym stage).

use std::collections::HashMap;

use super::text::tokenize;

const BEAM: usize = 64;

/// An alignment: `cand[i]` matched to `reference[align[i]]`.
type Align = Vec<Option<usize>>;

/// Chunks in an alignment: maximal runs of candidate tokens matched to
/// consecutive reference positions.
pub fn count_chunks(align: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for &a in align {
        if let Some(j) = a {
            if prev.is_none_or(|p| p + 1 != j) {
                chunks += 1;
            }
        }
        prev = a;
    }
    chunks
}

#[derive(Clone)]
struct State {
    align: Align,
    used: Vec<bool>,
    chunks: usize,
    matched: usize,
}

/// One matching stage: extends `base` with matches between still-unaligned
/// tokens whose keys agree, maximizing matches and then minimizing chunks
/// with a beam search over candidate positions.
fn stage(base: &Align, base_used: &[bool], ck: &[String], rk: &[String]) -> Align {
    // max matches this stage: sum over keys of min(free cand, free ref)
    let mut free_c: HashMap<&str, usize> = HashMap::new();
    let mut free_r: HashMap<&str, usize> = HashMap::new();
    for (i, k) in ck.iter().enumerate() {
        if base[i].is_none() {
            *free_c.entry(k).or_insert(0) += 1;
        }
    }
    for (j, k) in rk.iter().enumerate() {
        if !base_used[j] {
            *free_r.entry(k).or_insert(0) += 1;
        }
    }
    let target: usize = free_c.iter().map(|(k, &n)| n.min(free_r.get(k).copied().unwrap_or(0))).sum();
    if target == 0 {
        return base.clone();
    }
    // cand tokens still unaligned after position i, per key
    let mut rest_c: Vec<HashMap<&str, usize>> = vec![HashMap::new(); ck.len() + 1];
    for i in (0..ck.len()).rev() {
        rest_c[i] = rest_c[i + 1].clone();
        if base[i].is_none() {
            *rest_c[i].entry(&ck[i]).or_insert(0) += 1;
        }
    }
    let bound = |s: &State, i: usize| -> usize {
        let mut fr: HashMap<&str, usize> = HashMap::new();
        for (j, k) in rk.iter().enumerate() {
            if !s.used[j] {
                *fr.entry(k).or_insert(0) += 1;
            }
        }
        s.matched + rest_c[i].iter().map(|(k, &n)| n.min(fr.get(k).copied().unwrap_or(0))).sum::<usize>()
    };
    let mut beam = vec![State { align: base.clone(), used: base_used.to_vec(), chunks: 0, matched: 0 }];
    for i in 0..ck.len() {
        let mut next: Vec<State> = Vec::new();
        for s in &beam {
            if s.align[i].is_some() {
                next.push(s.clone());
                continue;
            }
            for j in (0..rk.len()).filter(|&j| !s.used[j] && rk[j] == ck[i]) {
                let mut t = s.clone();
                t.align[i] = Some(j);
                t.used[j] = true;
                t.matched += 1;
                next.push(t);
            }
            let mut skip = s.clone();
            skip.align[i] = None;
            next.push(skip);
        }
        next.retain(|s| bound(s, i + 1) == target);
        for s in &mut next {
            s.chunks = count_chunks(&s.align[..=i]);
        }
        next.sort_by(|a, b| a.chunks.cmp(&b.chunks).then_with(|| a.align.cmp(&b.align)));
        next.dedup_by(|a, b| a.align == b.align);
        next.truncate(BEAM);
        beam = next;
    }
    // every survivor reached the target; the first has the fewest chunks
    beam.into_iter().next().map(|s| s.align).unwrap_or_else(|| base.clone())
}

/// Alignment after the exact and stem stages.
pub fn align(cand: &[String], reference: &[String]) -> Align {
    let exact = stage(&vec![None; cand.len()], &vec![false; reference.len()], cand, reference);
    let mut used = vec![false; reference.len()];
    for j in exact.iter().flatten() {
        used[*j] = true;
    }
    let stem = |t: &[String]| -> Vec<String> { t.iter().map(|w| porter_stemmer::stem(w)).collect() };
    stage(&exact, &used, &stem(cand), &stem(reference))
}

/// METEOR score in [0, 100].
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let a = align(&c, &r);
    let m = a.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rc / (rc + 9.0 * p);
    let frag = count_chunks(&a) as f64 / m as f64;
    100.0 * f_mean * (1.0 - 0.5 * frag.powi(3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identity_on_the_mat() {
        let s = meteor("on the mat", "on the mat");
        assert!((s / 100.0 - (1.0 - 0.5 / 27.0)).abs() < 1e-6, "{s}");
    }

    #[test]
    fn identity_formula_and_floor() {
        for m in 3..40 {
            let t: Vec<String> = (0..m).map(|i| format!("w{i}")).collect();
            let s = meteor(&t.join(" "), &t.join(" "));
            let exact = 100.0 * (1.0 - 0.5 / (m * m) as f64 * (1.0 / m as f64));
            assert!((s - exact).abs() < 1e-9);
            assert!(s >= 98.0);
        }
    }

    #[test]
    fn zero_matches() {
        assert_eq!(meteor("a b c", "x y z"), 0.0);
        assert_eq!(meteor("", "x"), 0.0);
    }

    #[test]
    fn stem_stage_matches_running_run() {
        assert_eq!(porter_stemmer::stem("running"), "run");
        assert_eq!(porter_stemmer::stem("run"), "run");
        let a = align(&toks("running"), &toks("run"));
        assert_eq!(a, vec![Some(0)]);
        // one match, one chunk: P = R = 1, penalty 0.5
        assert!((meteor("running", "run") - 50.0).abs() < 1e-9);
    }

    #[test]
    fn exact_stage_wins_over_stem() {
        // "runs" must pair with the exact "runs", leaving "running"/"run" for the stem stage
        let a = align(&toks("runs running"), &toks("run runs"));
        assert_eq!(a, vec![Some(1), Some(0)]);
    }

    #[test]
    fn alignment_minimizes_chunks() {
        // a greedy left-to-right pairing gives "the"->0 and two chunks;
        // the best alignment keeps "the cat" contiguous
        let a = align(&toks("the cat"), &toks("the dog saw the cat"));
        assert_eq!(count_chunks(&a), 1);
        assert_eq!(a, vec![Some(3), Some(4)]);
    }

    #[test]
    fn hand_computed_fragmented() {
        // cand "a b c d", ref "a c b d": 4 matches, alignment 0,2,1,3 -> 4 chunks
        let s = meteor("a b c d", "a c b d") / 100.0;
        assert!((s - (1.0 - 0.5)).abs() < 1e-12);
        // cand "a b x", ref "a b y z": m=2, P=2/3, R=1/2, one chunk
        let (p, r) = (2.0 / 3.0, 0.5);
        let f = 10.0 * p * r / (r + 9.0 * p);
        let want = f * (1.0 - 0.5 * (0.5f64).powi(3));
        assert!((meteor("a b x", "a b y z") / 100.0 - want).abs() < 1e-12);
    }
}
