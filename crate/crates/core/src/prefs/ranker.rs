//! AI ranker with validated replies, bounded retries and a mock fallback.

use super::prompt::{build_ranking_prompt, default_few_shots, parse_ranking_explanation, parse_ranking_reply, FewShot};
use super::{mock_rank, CandidateSet, Rater, RaterKind, Ranking};
use crate::error::Result;

/// Sends a prompt to a language model and returns its reply text.
pub trait RankerTransport: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub struct RankerAdapter {
    transport: Option<Box<dyn RankerTransport>>,
    rater_id: String,
    retries: u32,
    few_shots: Vec<FewShot>,
}

impl RankerAdapter {
    /// Rule-based ranking, no network.
    pub fn mock() -> Self {
        RankerAdapter { transport: None, rater_id: "mock".into(), retries: 0, few_shots: Vec::new() }
    }

    pub fn external(transport: Box<dyn RankerTransport>, rater_id: impl Into<String>, retries: u32) -> Self {
        RankerAdapter { transport: Some(transport), rater_id: rater_id.into(), retries, few_shots: default_few_shots() }
    }

    pub fn with_few_shots(mut self, few_shots: Vec<FewShot>) -> Self {
        self.few_shots = few_shots;
        self
    }

    pub fn is_mock(&self) -> bool {
        self.transport.is_none()
    }

    /// Ranks `set`. An external ranker gets `1 + retries` attempts; after
    /// that the mock ranking is returned and a warning logged.
    pub fn rank(&self, set: &CandidateSet, timestamp: &str) -> Result<Ranking> {
        let Some(transport) = &self.transport else {
            return mock_rank(set);
        };
        let prompt = build_ranking_prompt(set, &self.few_shots)?;
        let labels = set.labels();
        for attempt in 0..=self.retries {
            let reply = match transport.complete(&prompt) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}: ranker attempt {} failed: {e}", set.question_id, attempt + 1);
                    continue;
                }
            };
            match parse_ranking_reply(&reply, &labels) {
                Ok(order) => {
                    return Ok(Ranking {
                        question_id: set.question_id.clone(),
                        rater: Rater { kind: RaterKind::Ai, id: self.rater_id.clone() },
                        order,
                        explanation: parse_ranking_explanation(&reply),
                        timestamp: timestamp.to_string(),
                    })
                }
                Err(e) => log::warn!("{}: invalid ranker reply on attempt {}: {e}", set.question_id, attempt + 1),
            }
        }
        log::warn!("{}: ranker exhausted {} attempts, using mock ranking", set.question_id, self.retries + 1);
        mock_rank(set)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::error::Error;
    use crate::prefs::{collect_candidates, synthetic_generators, AnswerGenerator};
    use crate::taskgen::kinematics_item;

    struct Scripted {
        replies: Vec<Result<String>>,
        calls: Arc<AtomicUsize>,
    }

    impl RankerTransport for Scripted {
        fn complete(&self, _prompt: &str) -> Result<String> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            match &self.replies[i.min(self.replies.len() - 1)] {
                Ok(s) => Ok(s.clone()),
                Err(e) => Err(Error::Ranker(e.to_string())),
            }
        }
    }

    fn set() -> CandidateSet {
        let g = synthetic_generators();
        let refs: Vec<&dyn AnswerGenerator> = g.iter().map(|g| g as &dyn AnswerGenerator).collect();
        collect_candidates(&kinematics_item(5.0, 6.0), &refs, 1).unwrap()
    }

    fn adapter(replies: Vec<Result<String>>, retries: u32) -> (RankerAdapter, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let t = Scripted { replies, calls: calls.clone() };
        (RankerAdapter::external(Box::new(t), "llm", retries), calls)
    }

    #[test]
    fn retries_then_succeeds() {
        let good = "## Ranking: model5>model4>model3>model2>model1>model0\n## Explanation: fine".to_string();
        let (a, calls) = adapter(vec![Ok("nonsense".into()), Err(Error::Ranker("timeout".into())), Ok(good)], 2);
        let r = a.rank(&set(), "t").unwrap();
        assert_eq!(r.rater.kind, RaterKind::Ai);
        assert_eq!(r.order[0], "model5");
        assert_eq!(r.explanation, "fine");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn falls_back_to_mock() {
        let (a, calls) = adapter(vec![Ok("## Ranking: model0>model0".into())], 1);
        let s = set();
        let r = a.rank(&s, "t").unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(r, mock_rank(&s).unwrap());
    }
}
