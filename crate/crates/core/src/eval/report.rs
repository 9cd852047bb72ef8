use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::rubric::{error_report, score_distribution, ErrorLabel, ErrorReport, LabeledResponse, RubricWeights, ScoreDistribution, SkillAnnotation};
use super::text::{bleu_n, ngram_precisions, rouge, RougeVariant};
use super::{answer_accuracy, meteor, Accuracy};
use crate::error::{Error, Result};
use crate::taskgen::QAItem;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub question_id: String,
    pub setting: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub question_id: String,
    pub setting: String,
    pub skills: SkillAnnotation,
    pub error_label: ErrorLabel,
    #[serde(default)]
    pub correct_wrong_reason: bool,
}

/// Corpus-level text metrics, each the item mean in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub meteor: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bertscore: Option<f64>,
}

impl MetricBlock {
    fn values(&self) -> [f64; 9] {
        [self.meteor, self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge1, self.rouge2, self.rouge_l, self.rouge_lsum]
    }

    fn item(cand: &str, reference: &str) -> [f64; 9] {
        [
            meteor(cand, reference),
            bleu_n(cand, reference, 1),
            bleu_n(cand, reference, 2),
            bleu_n(cand, reference, 3),
            bleu_n(cand, reference, 4),
            rouge(cand, reference, RougeVariant::One),
            rouge(cand, reference, RougeVariant::Two),
            rouge(cand, reference, RougeVariant::L),
            rouge(cand, reference, RougeVariant::Lsum),
        ]
    }

    fn from_values(v: [f64; 9]) -> Self {
        MetricBlock {
            meteor: v[0],
            bleu1: v[1],
            bleu2: v[2],
            bleu3: v[3],
            bleu4: v[4],
            rouge1: v[5],
            rouge2: v[6],
            rouge_l: v[7],
            rouge_lsum: v[8],
            bertscore: None,
        }
    }

    pub fn in_range(&self) -> bool {
        self.values().iter().all(|v| (0.0..=100.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub n_items: usize,
    pub metrics: MetricBlock,
    /// Isolated clipped n-gram precisions (percent), n = 1..=4, item means.
    pub bleu_precisions: [f64; 4],
    pub accuracy: Accuracy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<ErrorReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<ScoreDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tokenizer: String,
    pub bleu: String,
    pub rouge: String,
    pub meteor: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        ReportMetadata {
            tokenizer: "lowercase; whitespace split; punctuation characters are separate tokens".into(),
            bleu: "cumulative BLEU-n, uniform weights, brevity penalty, no smoothing".into(),
            rouge: "F1".into(),
            meteor: "exact and Porter-stem matching stages only; no synonym stage".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: BTreeMap<String, SettingReport>,
    pub metadata: ReportMetadata,
}

/// Per-setting report over `predictions` scored against `gold`. Settings
/// named in `settings` with no predictions are left out with a warning.
pub fn build_report(
    settings: &[String],
    predictions: &[Prediction],
    gold: &[QAItem],
    annotations: &[Annotation],
) -> Result<EvalReport> {
    if settings.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one setting".into()));
    }
    let gold_by_id: HashMap<&str, &QAItem> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let weights = RubricWeights::default();
    let mut out = BTreeMap::new();
    for setting in settings {
        let preds: Vec<&Prediction> = predictions.iter().filter(|p| &p.setting == setting).collect();
        if preds.is_empty() {
            log::warn!("setting {setting} has no predictions; omitted from the report");
            continue;
        }
        let mut sums = [0.0; 9];
        let mut prec = [0.0; 4];
        let mut pairs = Vec::with_capacity(preds.len());
        for p in &preds {
            let g = gold_by_id
                .get(p.question_id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("prediction for unknown question {}", p.question_id)))?;
            for (s, v) in sums.iter_mut().zip(MetricBlock::item(&p.text, &g.answer)) {
                *s += v;
            }
            for (s, v) in prec.iter_mut().zip(ngram_precisions(&p.text, &g.answer)) {
                *s += 100.0 * v;
            }
            pairs.push((p.text.as_str(), g.answer.as_str()));
        }
        let n = preds.len() as f64;
        let notes: Vec<&Annotation> = annotations.iter().filter(|a| &a.setting == setting).collect();
        let (errors, rubric) = if notes.is_empty() {
            (None, None)
        } else {
            let labels: Vec<LabeledResponse> = notes
                .iter()
                .map(|a| LabeledResponse { label: a.error_label, correct_wrong_reason: a.correct_wrong_reason })
                .collect();
            let skills: Vec<SkillAnnotation> = notes.iter().map(|a| a.skills.clone()).collect();
            (Some(error_report(&labels)), Some(score_distribution(&skills, &weights)?))
        };
        out.insert(
            setting.clone(),
            SettingReport {
                n_items: preds.len(),
                metrics: MetricBlock::from_values(sums.map(|s| s / n)),
                bleu_precisions: prec.map(|s| s / n),
                accuracy: answer_accuracy(pairs)?,
                errors,
                rubric,
            },
        );
    }
    Ok(EvalReport { settings: out, metadata: ReportMetadata::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::generate_dataset;

    fn preds(setting: &str, items: &[QAItem]) -> Vec<Prediction> {
        items
            .iter()
            .map(|g| Prediction { question_id: g.id.clone(), setting: setting.into(), text: g.answer.clone() })
            .collect()
    }

    #[test]
    fn identity_corpus_and_schema() {
        let gold = generate_dataset(2, 1).unwrap();
        let mut p = preds("sft", &gold);
        p.extend(preds("ppo", &gold));
        let r = build_report(&["sft".into(), "ppo".into(), "dpo".into()], &p, &gold, &[]).unwrap();
        assert_eq!(r.settings.len(), 2, "empty setting omitted");
        let sft = &r.settings["sft"];
        let m = &sft.metrics;
        for v in [m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge1, m.rouge2, m.rouge_l, m.rouge_lsum] {
            assert!((v - 100.0).abs() < 1e-9, "{v}");
        }
        assert!(m.meteor >= 98.0 && m.in_range());
        assert_eq!(sft.accuracy.correct, gold.len());
        assert_eq!(r.settings["sft"], r.settings["ppo"]);
        let json = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = json["settings"]["sft"]["metrics"].as_object().unwrap().keys().collect();
        let mut want = ["meteor", "bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rouge2", "rougeL", "rougeLsum"];
        want.sort();
        assert_eq!(keys, want);
    }

    #[test]
    fn annotations_feed_errors_and_rubric() {
        let gold = generate_dataset(1, 2).unwrap();
        let p = preds("ppo", &gold);
        let notes: Vec<Annotation> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| Annotation {
                question_id: g.id.clone(),
                setting: "ppo".into(),
                skills: SkillAnnotation::perfect(),
                error_label: if i % 2 == 0 { ErrorLabel::Perfect } else { ErrorLabel::Computation },
                correct_wrong_reason: i == 1,
            })
            .collect();
        let r = build_report(&["ppo".into()], &p, &gold, &notes).unwrap();
        let e = r.settings["ppo"].errors.as_ref().unwrap();
        assert_eq!(e.total, notes.len());
        assert_eq!(e.correct_wrong_reason, 1);
        assert_eq!(r.settings["ppo"].rubric.as_ref().unwrap().mean_score, 1.0);
    }

    #[test]
    fn errors() {
        let gold = generate_dataset(1, 2).unwrap();
        assert!(build_report(&[], &[], &gold, &[]).is_err());
        let bad = vec![Prediction { question_id: "nope".into(), setting: "sft".into(), text: "x".into() }];
        assert!(build_report(&["sft".into()], &bad, &gold, &[]).is_err());
    }
}
