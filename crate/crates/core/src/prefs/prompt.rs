//! Ranking prompt construction and reply parsing. Replies carry a
//! `## Ranking: model2>model1>...` line and an optional `## Explanation:`.

use std::fmt::Write;

use super::{check_permutation, CandidateSet};
use crate::error::{Error, Result};
use crate::taskgen::{corrupt_answer, kinematics_item, make_item, CorruptionMode, Givens, Topic, Transform};

const RANKING_TAG: &str = "## Ranking:";
const EXPLANATION_TAG: &str = "## Explanation:";

/// A human-ranked example shown to the AI ranker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShot {
    pub question: String,
    /// (label, text), in label order.
    pub answers: Vec<(String, String)>,
    pub ranking: Vec<String>,
    pub explanation: String,
}

/// Two worked examples: a four-answer one and a six-answer one.
pub fn default_few_shots() -> Vec<FewShot> {
    let kin = kinematics_item(12.0, 5.0);
    let c = |item, mode, sev| corrupt_answer(item, mode, sev, 0).expect("valid corruption");
    let four = FewShot {
        question: kin.question.clone(),
        answers: vec![
            ("model0".into(), c(&kin, CorruptionMode::Deduction, 3)),
            ("model1".into(), c(&kin, CorruptionMode::Computation, 1)),
            ("model2".into(), kin.answer.clone()),
            ("model3".into(), c(&kin, CorruptionMode::Conceptual, 2)),
        ],
        ranking: ["model2", "model1", "model3", "model0"].map(String::from).to_vec(),
        explanation: "model2 uses d = v * t and reaches 60 m. model1 sets up the formula correctly but \
                      multiplies wrongly. model3 divides instead of multiplying and skips a step. model0 \
                      answers a different question and omits most of the working."
            .into(),
    };
    let en = make_item("few-shot-energy", Topic::Energy, Givens { a: 4.0, b: 3.0 }, 0, Transform::Base);
    let six = FewShot {
        question: en.question.clone(),
        answers: vec![
            ("model0".into(), c(&en, CorruptionMode::Computation, 3)),
            ("model1".into(), c(&en, CorruptionMode::Grounding, 2)),
            ("model2".into(), c(&en, CorruptionMode::Conceptual, 1)),
            ("model3".into(), en.answer.clone()),
            ("model4".into(), c(&en, CorruptionMode::Computation, 1)),
            ("model5".into(), c(&en, CorruptionMode::Deduction, 3)),
        ],
        ranking: ["model3", "model2", "model4", "model1", "model0", "model5"].map(String::from).to_vec(),
        explanation: "model3 applies E = m * v^2 / 2 and gets 18 J. model2 and model4 show every step but \
                      reach a wrong value. model1 mixes up the givens. model0 and model5 drop most steps \
                      and end with wrong answers."
            .into(),
    };
    vec![four, six]
}

fn write_answers<'a>(out: &mut String, answers: impl Iterator<Item = (&'a str, &'a str)>) {
    for (label, text) in answers {
        let _ = writeln!(out, "### {label}:\n{text}\n");
    }
}

/// Prompt asking for a best-to-worst ranking of the six anonymized answers.
pub fn build_ranking_prompt(set: &CandidateSet, few_shots: &[FewShot]) -> Result<String> {
    if few_shots.is_empty() {
        return Err(Error::InvalidArgument("few-shot bank is empty".into()));
    }
    let labels = set.labels();
    let mut out = String::new();
    out.push_str(
        "You are judging answers to a physics question. Rank all answers from best to worst reasoning. \
         Lower ranks signify higher-quality reasoning: check the formula, the substitution, the arithmetic \
         and the final answer with its unit.\n",
    );
    let _ = writeln!(
        out,
        "Reply with a line \"{RANKING_TAG} \" followed by every label separated by \">\", best first, \
         then a line \"{EXPLANATION_TAG} \" with a short justification.\n"
    );
    for (i, shot) in few_shots.iter().enumerate() {
        let _ = writeln!(out, "# Example {}\n## Question:\n{}\n", i + 1, shot.question);
        write_answers(&mut out, shot.answers.iter().map(|(l, t)| (l.as_str(), t.as_str())));
        let _ = writeln!(out, "{RANKING_TAG} {}\n{EXPLANATION_TAG} {}\n", shot.ranking.join(">"), shot.explanation);
    }
    let _ = writeln!(out, "# Task\n## Question:\n{}\n", set.question);
    write_answers(&mut out, set.answers.iter().map(|a| (a.label.as_str(), a.text.as_str())));
    let _ = writeln!(out, "Rank these {} answers: {}.", labels.len(), labels.join(", "));
    Ok(out)
}

/// Order from the first `## Ranking:` line of `text`.
pub fn parse_ranking_reply(text: &str, expected: &[String]) -> Result<Vec<String>> {
    let line = text
        .lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix(RANKING_TAG))
        .ok_or(Error::MissingRankingLine)?;
    let order: Vec<String> = line.split('>').map(|s| s.trim().to_string()).collect();
    check_permutation(&order, expected)?;
    Ok(order)
}

/// Text after `## Explanation:` up to the end of the reply, or empty.
pub fn parse_ranking_explanation(text: &str) -> String {
    match text.find(EXPLANATION_TAG) {
        Some(i) => text[i + EXPLANATION_TAG.len()..].trim().to_string(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefs::{collect_candidates, synthetic_generators, AnswerGenerator};

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("model{i}")).collect()
    }

    fn sample_set() -> CandidateSet {
        let g = synthetic_generators();
        let refs: Vec<&dyn AnswerGenerator> = g.iter().map(|g| g as &dyn AnswerGenerator).collect();
        collect_candidates(&kinematics_item(7.0, 3.0), &refs, 5).unwrap()
    }

    #[test]
    fn parses_appendix_format() {
        let order = parse_ranking_reply("## Ranking: model2>model1>model3>model0", &labels(4)).unwrap();
        assert_eq!(order, ["model2", "model1", "model3", "model0"]);
    }

    #[test]
    fn duplicate_is_permutation_error() {
        let r = parse_ranking_reply("## Ranking: model0>model0>model1>model2>model3>model4", &labels(6));
        assert!(matches!(r, Err(Error::Permutation(_))));
        let r = parse_ranking_reply("## Ranking: model0>model1", &labels(6));
        assert!(matches!(r, Err(Error::Permutation(_))));
    }

    #[test]
    fn missing_line_and_prose() {
        assert!(matches!(parse_ranking_reply("model0 is best", &labels(2)), Err(Error::MissingRankingLine)));
        let reply = "Let me compare.\nmodel1 is wrong.\n  ## Ranking:  model1 > model0\n## Explanation: because";
        assert_eq!(parse_ranking_reply(reply, &labels(2)).unwrap(), ["model1", "model0"]);
        assert_eq!(parse_ranking_explanation(reply), "because");
    }

    #[test]
    fn prompt_contents() {
        let set = sample_set();
        let shots = default_few_shots();
        let p = build_ranking_prompt(&set, &shots).unwrap();
        for a in &set.answers {
            assert!(p.contains(&a.text));
        }
        assert!(p.contains(&set.question));
        assert!(p.contains("## Ranking: model2>model1>model3>model0"));
        assert!(p.contains("\">\""));
        assert_eq!(p, build_ranking_prompt(&set, &shots).unwrap());
        assert!(build_ranking_prompt(&set, &[]).is_err());
    }

    #[test]
    fn few_shot_rankings_agree_with_mock() {
        // the bank must teach the same preferences the mock grader applies
        for shot in default_few_shots() {
            let gold = shot.answers.iter().find(|(l, _)| *l == shot.ranking[0]).unwrap().1.clone();
            let grades: Vec<_> = shot
                .ranking
                .iter()
                .map(|l| crate::taskgen::grade(&shot.answers.iter().find(|(x, _)| x == l).unwrap().1, &gold))
                .collect();
            assert!(grades.windows(2).all(|w| w[0] <= w[1]), "{grades:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn any_permutation_round_trips(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut order = labels(6);
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let reply = format!("intro\n## Ranking: {}\n## Explanation: x", order.join(" > "));
            proptest::prop_assert_eq!(parse_ranking_reply(&reply, &labels(6)).unwrap(), order);
        }
    }
}
