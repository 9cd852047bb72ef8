//! Six-answer candidate sets, rankings over them, and the accept/reject
//! pairs derived from a ranking.

mod prompt;
mod ranker;
mod store;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use prompt::{build_ranking_prompt, default_few_shots, parse_ranking_explanation, parse_ranking_reply, FewShot};
pub use ranker::{RankerAdapter, RankerTransport};
pub use store::{select_rankings, RankingStore};

use crate::error::{Error, Result};
use crate::policy::{DecodeMode, PolicyModel, Vocab};
use crate::seed;
use crate::taskgen::{corrupt_answer, grade, CorruptionMode, QAItem};

pub const NUM_ANSWERS: usize = 6;
pub const GOLD_SOURCE: &str = "gold";

pub fn labels() -> Vec<String> {
    (0..NUM_ANSWERS).map(|i| format!("model{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub label: String,
    pub source: String,
    pub text: String,
}

/// Answers sorted by anonymized label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub question_id: String,
    pub question: String,
    pub shuffle_seed: u64,
    pub answers: Vec<Candidate>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.answers.len() != NUM_ANSWERS {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {NUM_ANSWERS} answers, got {}",
                self.question_id,
                self.answers.len()
            )));
        }
        let sources: HashSet<_> = self.answers.iter().map(|a| a.source.as_str()).collect();
        let labels: HashSet<_> = self.answers.iter().map(|a| a.label.as_str()).collect();
        if sources.len() != NUM_ANSWERS || labels.len() != NUM_ANSWERS {
            return Err(Error::InvalidArgument(format!("{}: duplicate source or label", self.question_id)));
        }
        if !sources.contains(GOLD_SOURCE) {
            return Err(Error::InvalidArgument(format!("{}: no gold answer", self.question_id)));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.answers.iter().map(|a| a.label.clone()).collect()
    }

    pub fn by_label(&self, label: &str) -> Option<&Candidate> {
        self.answers.iter().find(|a| a.label == label)
    }

    pub fn label_of(&self, source: &str) -> Option<&str> {
        self.answers.iter().find(|a| a.source == source).map(|a| a.label.as_str())
    }

    pub fn gold(&self) -> &Candidate {
        self.answers.iter().find(|a| a.source == GOLD_SOURCE).expect("validated set has gold")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterKind {
    Human,
    Ai,
    Mock,
}

impl RaterKind {
    /// Lower wins when several rankings exist for one question.
    pub fn precedence(self) -> u8 {
        match self {
            RaterKind::Human => 0,
            RaterKind::Ai => 1,
            RaterKind::Mock => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rater {
    pub kind: RaterKind,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ranking {
    pub question_id: String,
    pub rater: Rater,
    /// Labels best to worst.
    pub order: Vec<String>,
    pub explanation: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub question_id: String,
    pub pair_index: usize,
    pub question: String,
    pub accepted: String,
    pub rejected: String,
}

/// A source of candidate answers.
pub trait AnswerGenerator {
    fn name(&self) -> &str;
    fn answer(&self, item: &QAItem, seed: u64) -> Result<String>;
}

/// Corrupts the gold answer with a fixed mode and severity.
#[derive(Debug, Clone)]
pub struct CorruptionGenerator {
    pub name: String,
    pub mode: CorruptionMode,
    pub severity: u8,
}

impl AnswerGenerator for CorruptionGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn answer(&self, item: &QAItem, seed: u64) -> Result<String> {
        corrupt_answer(item, self.mode, self.severity, seed)
            .map_err(|e| Error::Generator { name: self.name.clone(), msg: e.to_string() })
    }
}

/// The default five synthetic answerers: severities 1, 1, 2, 3, 3.
pub fn synthetic_generators() -> Vec<CorruptionGenerator> {
    use CorruptionMode::*;
    [(Computation, 1), (Conceptual, 1), (Grounding, 2), (Deduction, 3), (Computation, 3)]
        .into_iter()
        .map(|(mode, severity)| CorruptionGenerator {
            name: format!("{}-s{severity}", serde_json::to_value(mode).unwrap().as_str().unwrap()),
            mode,
            severity,
        })
        .collect()
}

/// Greedy completions from a policy checkpoint.
pub struct PolicyGenerator {
    pub name: String,
    pub model: PolicyModel,
    pub max_tokens: usize,
}

impl AnswerGenerator for PolicyGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn answer(&self, item: &QAItem, _seed: u64) -> Result<String> {
        let wrap = |e: Error| Error::Generator { name: self.name.clone(), msg: e.to_string() };
        let vocab = Vocab::new();
        let prompt = vocab.encode_prompt(&item.question).map_err(wrap)?;
        let room = self.model.config.context_length.saturating_sub(prompt.len());
        let g = self.model.generate(&prompt, DecodeMode::Greedy, self.max_tokens.min(room)).map_err(wrap)?;
        Ok(vocab.decode(g.text_tokens()))
    }
}

/// Gold plus five generated answers, labelled `model0..model5` through a
/// permutation seeded by `seed`.
pub fn collect_candidates(item: &QAItem, generators: &[&dyn AnswerGenerator], seed: u64) -> Result<CandidateSet> {
    if generators.len() != NUM_ANSWERS - 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} generators, got {}",
            NUM_ANSWERS - 1,
            generators.len()
        )));
    }
    let mut sources = vec![(GOLD_SOURCE.to_string(), item.answer.clone())];
    for (k, gen) in generators.iter().enumerate() {
        if gen.name() == GOLD_SOURCE || sources.iter().any(|(s, _)| s == gen.name()) {
            return Err(Error::InvalidArgument(format!("duplicate generator name {}", gen.name())));
        }
        let text = gen.answer(item, seed::mix(seed, k as u64 + 1))?;
        sources.push((gen.name().to_string(), text));
    }
    let mut perm: Vec<usize> = (0..NUM_ANSWERS).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // label i shows source perm[i]
    let answers = perm
        .iter()
        .enumerate()
        .map(|(i, &s)| Candidate { label: format!("model{i}"), source: sources[s].0.clone(), text: sources[s].1.clone() })
        .collect();
    Ok(CandidateSet { question_id: item.id.clone(), question: item.question.clone(), shuffle_seed: seed, answers })
}

/// Fixed timestamp on mock rankings so the mock path stays a pure function.
pub const MOCK_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

/// Rule-based ranking against the gold answer: correct final value first,
/// then step-count closeness. Remaining ties go by text, and byte-identical
/// texts by label. Gold is always first.
pub fn mock_rank(set: &CandidateSet) -> Result<Ranking> {
    set.validate()?;
    let gold = set.gold();
    let mut keyed: Vec<_> = set
        .answers
        .iter()
        .map(|a| ((a.source != GOLD_SOURCE, grade(&a.text, &gold.text)), label_index(&a.label), a))
        .collect();
    // equal grades fall back to the text so relabelling cannot reorder them
    keyed.sort_by(|x, y| (x.0, &x.2.text, x.1).cmp(&(y.0, &y.2.text, y.1)));
    let order: Vec<String> = keyed.iter().map(|(_, _, a)| a.label.clone()).collect();
    Ok(Ranking {
        question_id: set.question_id.clone(),
        rater: Rater { kind: RaterKind::Mock, id: "mock".into() },
        explanation: format!("Ranked by final-answer match with the reference, then step count; {} is the reference.", gold.label),
        order,
        timestamp: MOCK_TIMESTAMP.into(),
    })
}

fn label_index(label: &str) -> (usize, &str) {
    let n = label.strip_prefix("model").and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
    (n, label)
}

/// Checks that `order` is a permutation of `expected`.
pub fn check_permutation(order: &[String], expected: &[String]) -> Result<()> {
    if order.len() != expected.len() {
        return Err(Error::Permutation(format!("{} labels, expected {}", order.len(), expected.len())));
    }
    let mut seen = HashSet::new();
    for l in order {
        if !expected.contains(l) {
            return Err(Error::Permutation(format!("unknown label {l:?}")));
        }
        if !seen.insert(l) {
            return Err(Error::Permutation(format!("duplicate label {l:?}")));
        }
    }
    Ok(())
}

/// Pairs rank 1 with 6, 2 with 5 and 3 with 4.
pub fn pairs_from_ranking(set: &CandidateSet, ranking: &Ranking) -> Result<Vec<PreferencePair>> {
    if ranking.question_id != set.question_id {
        return Err(Error::InvalidArgument(format!(
            "ranking for {} applied to {}",
            ranking.question_id, set.question_id
        )));
    }
    check_permutation(&ranking.order, &set.labels())?;
    let n = ranking.order.len();
    (0..n / 2)
        .map(|i| {
            let acc = set.by_label(&ranking.order[i]).expect("checked permutation");
            let rej = set.by_label(&ranking.order[n - 1 - i]).expect("checked permutation");
            Ok(PreferencePair {
                question_id: set.question_id.clone(),
                pair_index: i,
                question: set.question.clone(),
                accepted: acc.text.clone(),
                rejected: rej.text.clone(),
            })
        })
        .collect()
}

/// Pairs for every candidate set that has a ranking, in candidate order.
/// Sets without a ranking are skipped.
pub fn build_preferences(sets: &[CandidateSet], rankings: &BTreeMap<String, Ranking>) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::with_capacity(sets.len() * 3);
    for set in sets {
        if let Some(r) = rankings.get(&set.question_id) {
            out.extend(pairs_from_ranking(set, r)?);
        }
    }
    Ok(out)
}
