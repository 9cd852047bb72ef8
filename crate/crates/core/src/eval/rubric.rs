//! Reasoning-score rubric, score distribution and the error taxonomy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Skill weights in hundredths so that the sum is exactly 1.00.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricWeights {
    pub ca: u32,
    pub pd: u32,
    pub ac_formulation: u32,
    pub ac_arithmetic: u32,
    pub lr: u32,
    pub cu: u32,
    pub ed: u32,
}

impl Default for RubricWeights {
    fn default() -> Self {
        RubricWeights { ca: 15, pd: 20, ac_formulation: 10, ac_arithmetic: 15, lr: 15, cu: 15, ed: 10 }
    }
}

impl RubricWeights {
    /// Sum in hundredths.
    pub fn total(&self) -> u32 {
        self.ca + self.pd + self.ac_formulation + self.ac_arithmetic + self.lr + self.cu + self.ed
    }

    pub fn ac(&self) -> u32 {
        self.ac_formulation + self.ac_arithmetic
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() != 100 {
            return Err(Error::InvalidArgument(format!("rubric weights sum to {}/100", self.total())));
        }
        Ok(())
    }

    /// Weight as a fraction of 1.
    pub fn fraction(hundredths: u32) -> f64 {
        hundredths as f64 / 100.0
    }

    /// (skill, weight) in the CA -> ED order, with AC as one skill.
    pub fn skills(&self) -> [(Skill, u32); 6] {
        [
            (Skill::Ca, self.ca),
            (Skill::Pd, self.pd),
            (Skill::Ac, self.ac()),
            (Skill::Lr, self.lr),
            (Skill::Cu, self.cu),
            (Skill::Ed, self.ed),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Skill {
    #[serde(rename = "CA")]
    Ca,
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "AC")]
    Ac,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "CU")]
    Cu,
    #[serde(rename = "ED")]
    Ed,
}

/// Per-response skill attainment, each in [0, 1].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillAnnotation {
    #[serde(rename = "CA")]
    pub ca: f64,
    #[serde(rename = "PD")]
    pub pd: f64,
    #[serde(rename = "AC_form")]
    pub ac_formulation: f64,
    #[serde(rename = "AC_arith")]
    pub ac_arithmetic: f64,
    #[serde(rename = "LR")]
    pub lr: f64,
    #[serde(rename = "CU")]
    pub cu: f64,
    #[serde(rename = "ED")]
    pub ed: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub annotator: String,
}

impl SkillAnnotation {
    pub fn perfect() -> Self {
        SkillAnnotation { ca: 1.0, pd: 1.0, ac_formulation: 1.0, ac_arithmetic: 1.0, lr: 1.0, cu: 1.0, ed: 1.0, annotator: String::new() }
    }

    fn components(&self) -> [f64; 7] {
        [self.ca, self.pd, self.ac_formulation, self.ac_arithmetic, self.lr, self.cu, self.ed]
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.components() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidArgument(format!("skill component {c} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Attainment of one skill; AC combines its two parts by weight.
    fn attainment(&self, skill: Skill, w: &RubricWeights) -> f64 {
        match skill {
            Skill::Ca => self.ca,
            Skill::Pd => self.pd,
            Skill::Ac => {
                (w.ac_formulation as f64 * self.ac_formulation + w.ac_arithmetic as f64 * self.ac_arithmetic)
                    / w.ac() as f64
            }
            Skill::Lr => self.lr,
            Skill::Cu => self.cu,
            Skill::Ed => self.ed,
        }
    }
}

/// Weighted sum of the components, in [0, 1].
pub fn reasoning_score(a: &SkillAnnotation, w: &RubricWeights) -> Result<f64> {
    w.validate()?;
    a.validate()?;
    let ws = [w.ca, w.pd, w.ac_formulation, w.ac_arithmetic, w.lr, w.cu, w.ed];
    let s: f64 = ws.iter().zip(a.components()).map(|(&w, c)| w as f64 * c).sum();
    Ok(s / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillBar {
    pub skill: Skill,
    /// Mean attainment, percent.
    pub attainment_pct: f64,
    /// Running sum of weighted attainment from CA up to this skill, percent.
    pub cumulative_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcBreakdown {
    /// Share of responses setting up the correct equation.
    pub formulation_pct: f64,
    /// Among those, the share that also computes correctly.
    pub correct_sequence_pct: f64,
    /// Among those, the share that fails the arithmetic.
    pub arithmetic_failure_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub n: usize,
    pub bars: Vec<SkillBar>,
    pub mean_score: f64,
    pub ac: AcBreakdown,
}

pub fn score_distribution(annotations: &[SkillAnnotation], w: &RubricWeights) -> Result<ScoreDistribution> {
    if annotations.is_empty() {
        return Err(Error::InvalidArgument("score distribution needs at least one annotation".into()));
    }
    w.validate()?;
    let n = annotations.len() as f64;
    let mut bars = Vec::with_capacity(6);
    let mut cum = 0.0;
    for (skill, weight) in w.skills() {
        let mean = annotations.iter().map(|a| a.attainment(skill, w)).sum::<f64>() / n;
        cum += weight as f64 * mean;
        bars.push(SkillBar { skill, attainment_pct: 100.0 * mean, cumulative_pct: cum });
    }
    let mut mean_score = 0.0;
    for a in annotations {
        mean_score += reasoning_score(a, w)?;
    }
    let form: f64 = annotations.iter().map(|a| a.ac_formulation).sum();
    let both: f64 = annotations.iter().map(|a| a.ac_formulation * a.ac_arithmetic).sum();
    let correct_sequence_pct = if form > 0.0 { 100.0 * both / form } else { 0.0 };
    Ok(ScoreDistribution {
        n: annotations.len(),
        bars,
        mean_score: mean_score / n,
        ac: AcBreakdown {
            formulation_pct: 100.0 * form / n,
            correct_sequence_pct,
            arithmetic_failure_pct: if form > 0.0 { 100.0 - correct_sequence_pct } else { 0.0 },
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLabel {
    Computation,
    ProblemDeduction,
    Conceptual,
    Grounding,
    Perfect,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 5] =
        [ErrorLabel::Computation, ErrorLabel::ProblemDeduction, ErrorLabel::Conceptual, ErrorLabel::Grounding, ErrorLabel::Perfect];
}

/// One inspected response: a primary label plus the overlapping
/// correct-for-the-wrong-reason flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledResponse {
    pub label: ErrorLabel,
    #[serde(default)]
    pub correct_wrong_reason: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub computation: usize,
    pub problem_deduction: usize,
    pub conceptual: usize,
    pub grounding: usize,
    pub perfect: usize,
    pub total: usize,
    /// Tallied separately; does not take part in the partition.
    pub correct_wrong_reason: usize,
}

impl ErrorReport {
    pub fn count(&self, label: ErrorLabel) -> usize {
        match label {
            ErrorLabel::Computation => self.computation,
            ErrorLabel::ProblemDeduction => self.problem_deduction,
            ErrorLabel::Conceptual => self.conceptual,
            ErrorLabel::Grounding => self.grounding,
            ErrorLabel::Perfect => self.perfect,
        }
    }

    fn slot(&mut self, label: ErrorLabel) -> &mut usize {
        match label {
            ErrorLabel::Computation => &mut self.computation,
            ErrorLabel::ProblemDeduction => &mut self.problem_deduction,
            ErrorLabel::Conceptual => &mut self.conceptual,
            ErrorLabel::Grounding => &mut self.grounding,
            ErrorLabel::Perfect => &mut self.perfect,
        }
    }

    /// Responses reproducing these counts, in label order.
    pub fn expand(&self) -> Vec<LabeledResponse> {
        let mut out: Vec<LabeledResponse> = ErrorLabel::ALL
            .iter()
            .flat_map(|&l| std::iter::repeat_n(LabeledResponse { label: l, correct_wrong_reason: false }, self.count(l)))
            .collect();
        for r in out.iter_mut().take(self.correct_wrong_reason) {
            r.correct_wrong_reason = true;
        }
        out
    }
}

pub fn error_report(labels: &[LabeledResponse]) -> ErrorReport {
    let mut r = ErrorReport::default();
    for l in labels {
        *r.slot(l.label) += 1;
        r.correct_wrong_reason += l.correct_wrong_reason as usize;
    }
    r.total = labels.len();
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn only(f: impl FnOnce(&mut SkillAnnotation)) -> SkillAnnotation {
        let mut a = SkillAnnotation::default();
        f(&mut a);
        a
    }

    #[test]
    fn weights_sum_exactly() {
        let w = RubricWeights::default();
        assert_eq!(w.total(), 100);
        assert_eq!(w.ac(), 25);
        let fsum: f64 = [w.ca, w.pd, w.ac(), w.lr, w.cu, w.ed].iter().map(|&x| x as f64).sum::<f64>() / 100.0;
        assert_eq!(fsum, 1.0);
    }

    #[test]
    fn score_examples() {
        let w = RubricWeights::default();
        assert_eq!(reasoning_score(&SkillAnnotation::perfect(), &w).unwrap(), 1.0);
        assert_eq!(reasoning_score(&only(|a| a.ac_formulation = 1.0), &w).unwrap(), 0.10);
        assert_eq!(reasoning_score(&only(|a| { a.ca = 1.0; a.pd = 1.0 }), &w).unwrap(), 0.35);
        assert!(reasoning_score(&only(|a| a.lr = 1.5), &w).is_err());
        let bad = RubricWeights { ed: 11, ..w };
        assert!(reasoning_score(&SkillAnnotation::perfect(), &bad).is_err());
    }

    #[test]
    fn distribution_saturates_and_unit_case() {
        let w = RubricWeights::default();
        let d = score_distribution(&vec![SkillAnnotation::perfect(); 5], &w).unwrap();
        assert!(d.bars.iter().all(|b| b.attainment_pct == 100.0));
        assert_eq!(d.bars.last().unwrap().cumulative_pct, 100.0);
        let d = score_distribution(&[only(|a| a.ca = 1.0)], &w).unwrap();
        assert_eq!(d.bars[0].attainment_pct, 100.0);
        assert!(d.bars[1..].iter().all(|b| b.attainment_pct == 0.0));
        assert!(score_distribution(&[], &w).is_err());
    }

    #[test]
    fn arithmetic_failure_share() {
        // 91 of 100 set up the equation; 70 of those compute it correctly
        let mut v = Vec::new();
        for i in 0..100 {
            v.push(only(|a| {
                a.ac_formulation = (i < 91) as u8 as f64;
                a.ac_arithmetic = (i < 70) as u8 as f64;
            }));
        }
        let d = score_distribution(&v, &RubricWeights::default()).unwrap();
        assert!((d.ac.formulation_pct - 91.0).abs() < 1e-9);
        assert!((d.ac.correct_sequence_pct - 76.92).abs() < 5e-3);
        assert!((d.ac.arithmetic_failure_pct - 23.08).abs() < 5e-3);
    }

    #[test]
    fn table_counts_round_trip() {
        let counts = ErrorReport {
            computation: 35,
            problem_deduction: 10,
            conceptual: 9,
            grounding: 8,
            perfect: 38,
            total: 100,
            correct_wrong_reason: 10,
        };
        let mut labels = counts.expand();
        assert_eq!(labels.len(), 100);
        labels.reverse();
        assert_eq!(error_report(&labels), counts);
        assert_eq!(error_report(&[]), ErrorReport::default());
    }

    proptest::proptest! {
        #[test]
        fn counts_partition(idx in proptest::collection::vec((0usize..5, proptest::bool::ANY), 0..200)) {
            let labels: Vec<_> = idx.iter().map(|&(i, f)| LabeledResponse { label: ErrorLabel::ALL[i], correct_wrong_reason: f }).collect();
            let r = error_report(&labels);
            proptest::prop_assert_eq!(ErrorLabel::ALL.iter().map(|&l| r.count(l)).sum::<usize>(), labels.len());
            proptest::prop_assert_eq!(r.total, labels.len());
        }

        #[test]
        fn score_linear_in_components(c in proptest::collection::vec(0.0f64..=1.0, 7), k in 0usize..7, t in 0.0f64..=1.0) {
            let w = RubricWeights::default();
            let mk = |v: &[f64]| SkillAnnotation { ca: v[0], pd: v[1], ac_formulation: v[2], ac_arithmetic: v[3], lr: v[4], cu: v[5], ed: v[6], annotator: String::new() };
            let (mut lo, mut hi, mut mid) = (c.clone(), c.clone(), c.clone());
            lo[k] = 0.0;
            hi[k] = 1.0;
            mid[k] = t;
            let (s0, s1, st) = (reasoning_score(&mk(&lo), &w).unwrap(), reasoning_score(&mk(&hi), &w).unwrap(), reasoning_score(&mk(&mid), &w).unwrap());
            proptest::prop_assert!((st - (s0 + t * (s1 - s0))).abs() < 1e-12);
            proptest::prop_assert!(s1 <= 1.0);
        }
    }
}
