//! Evaluation: text-overlap metrics, answer accuracy, the reasoning rubric
//! and the error taxonomy, assembled into one JSON report.

mod meteor;
mod report;
mod rubric;
mod text;

pub use meteor::{align, count_chunks, meteor};
pub use report::{build_report, Annotation, EvalReport, MetricBlock, Prediction, ReportMetadata, SettingReport};
pub use rubric::{
    error_report, reasoning_score, score_distribution, AcBreakdown, ErrorLabel, ErrorReport, LabeledResponse, RubricWeights,
    ScoreDistribution, Skill, SkillAnnotation, SkillBar,
};
pub use text::{bleu_n, brevity_penalty, lcs_len, ngram_precisions, rouge, tokenize, RougeVariant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::parse_final_answer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub wrong: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Final-answer accuracy over (prediction, gold answer) pairs. An unparseable
/// prediction counts as wrong; an unparseable gold answer is an error.
pub fn answer_accuracy<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for (pred, gold) in pairs {
        let g = parse_final_answer(gold).ok_or_else(|| Error::Parse(format!("gold answer has no final line: {gold:?}")))?;
        let ok = parse_final_answer(pred).is_some_and(|p| p.matches(&g));
        acc.total += 1;
        if ok {
            acc.correct += 1;
        } else {
            acc.wrong += 1;
        }
    }
    Ok(acc)
}
