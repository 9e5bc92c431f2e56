//! Element ablation: drop every sentence carrying one criminal element and
//! compare predictions on the complete and the reduced facts.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{AnnotatedCase, AnnotatedCaseSet, Case, ElementKind};
use crate::error::{Error, Result};
use crate::metrics::{dist_summary, five_number, DistSummary, FiveNumber};
use crate::models::ChargeModel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblatedCase {
    pub original_id: String,
    pub removed: ElementKind,
    pub case: Case,
    /// Original indices of the surviving sentences.
    pub kept: Vec<usize>,
}

/// Removes every sentence whose label set contains `element`, multi-label
/// sentences included.
pub fn remove_element(annotated: &AnnotatedCase, element: ElementKind) -> Result<AblatedCase> {
    let case = &annotated.case;
    if case.charge.is_innocent() {
        return Err(Error::Ablation(format!("case `{}` is not a guilty case", case.id)));
    }
    let kept: Vec<usize> = annotated
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.contains(element))
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptiedCase(case.id.clone()));
    }
    let sentences = kept.iter().map(|&i| case.sentences[i].clone()).collect();
    Ok(AblatedCase {
        original_id: case.id.clone(),
        removed: element,
        case: Case::new(case.id.clone(), sentences, case.charge.clone(), case.split, case.source)?,
        kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationPair {
    pub case_id: String,
    pub gold: String,
    pub pred_before: String,
    pub pred_after: String,
    pub p_orig_before: f64,
    pub p_orig_after: f64,
    pub p_innocent_before: f64,
    pub p_innocent_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyResult {
    pub element: ElementKind,
    pub evaluated: usize,
    pub skipped: usize,
    /// Fraction of evaluated cases whose predicted charge is unchanged.
    pub consistency: f64,
    /// The same ratio restricted to cases originally predicted correctly.
    pub consistency_correct: Option<f64>,
    pub evaluated_correct: usize,
    /// Accuracy against the gold charge, before and after removal.
    pub gold_accuracy_before: f64,
    pub gold_accuracy_after: f64,
    pub pairs: Vec<AblationPair>,
}

impl ConsistencyResult {
    pub fn mean_innocent_before(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.p_innocent_before))
    }

    pub fn mean_innocent_after(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.p_innocent_after))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn run_ablation(
    model: &dyn ChargeModel,
    set: &AnnotatedCaseSet,
    element: ElementKind,
) -> Result<ConsistencyResult> {
    let guilty: Vec<&AnnotatedCase> = set.iter().filter(|a| !a.case.charge.is_innocent()).collect();
    if guilty.is_empty() {
        return Err(Error::Ablation("no guilty annotated cases to ablate".into()));
    }
    let outcomes: Vec<Option<AblationPair>> = guilty
        .par_iter()
        .map(|a| {
            let ablated = match remove_element(a, element) {
                Ok(c) => c,
                Err(Error::EmptiedCase(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let before = model.predict(&a.case)?;
            let after = model.predict(&ablated.case)?;
            Ok(Some(AblationPair {
                case_id: a.case.id.clone(),
                gold: a.case.charge.to_string(),
                pred_before: before.argmax().to_string(),
                pred_after: after.argmax().to_string(),
                p_orig_before: before.prob(&a.case.charge),
                p_orig_after: after.prob(&a.case.charge),
                p_innocent_before: before.innocent(),
                p_innocent_after: after.innocent(),
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = outcomes.iter().filter(|o| o.is_none()).count();
    let pairs: Vec<AblationPair> = outcomes.into_iter().flatten().collect();
    if pairs.is_empty() {
        return Err(Error::Ablation(format!(
            "removing {element} empties all {skipped} guilty cases"
        )));
    }
    let n = pairs.len() as f64;
    let same = pairs.iter().filter(|p| p.pred_before == p.pred_after).count();
    let correct: Vec<&AblationPair> = pairs.iter().filter(|p| p.pred_before == p.gold).collect();
    let correct_same = correct.iter().filter(|p| p.pred_after == p.gold).count();
    Ok(ConsistencyResult {
        element,
        evaluated: pairs.len(),
        skipped,
        consistency: same as f64 / n,
        consistency_correct: (!correct.is_empty()).then(|| correct_same as f64 / correct.len() as f64),
        evaluated_correct: correct.len(),
        gold_accuracy_before: correct.len() as f64 / n,
        gold_accuracy_after: pairs.iter().filter(|p| p.pred_after == p.gold).count() as f64 / n,
        pairs,
    })
}

/// Distribution statistics for one condition ("Complete", "-Subject", ...).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub cases: usize,
    /// Histogram and quartiles of the original-charge probability.
    pub confidence: DistSummary,
    /// Quartiles of the INNOCENT probability.
    pub innocent: FiveNumber,
}

pub fn condition_label(element: Option<ElementKind>) -> String {
    match element {
        None => "Complete".to_string(),
        Some(k) => format!("-{}", k.short()),
    }
}

/// "Complete" (every evaluated case, before removal, once), then one entry
/// per ablation result.
pub fn confidence_summary(results: &[ConsistencyResult]) -> Result<Vec<ConditionSummary>> {
    if results.is_empty() || results.iter().all(|r| r.pairs.is_empty()) {
        return Err(Error::Ablation("no ablation results to summarize".into()));
    }
    let mut seen = BTreeSet::new();
    let complete: Vec<&AblationPair> = results
        .iter()
        .flat_map(|r| &r.pairs)
        .filter(|p| seen.insert(p.case_id.as_str()))
        .collect();
    let mut out = vec![ConditionSummary {
        condition: condition_label(None),
        cases: complete.len(),
        confidence: dist_summary(&complete.iter().map(|p| p.p_orig_before).collect::<Vec<_>>())?,
        innocent: five_number(&complete.iter().map(|p| p.p_innocent_before).collect::<Vec<_>>())?,
    }];
    for r in results {
        out.push(ConditionSummary {
            condition: condition_label(Some(r.element)),
            cases: r.pairs.len(),
            confidence: dist_summary(&r.pairs.iter().map(|p| p.p_orig_after).collect::<Vec<_>>())?,
            innocent: five_number(&r.pairs.iter().map(|p| p.p_innocent_after).collect::<Vec<_>>())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChargeLabel, ElementSet, Split};

    fn annotated(labels: Vec<ElementSet>) -> AnnotatedCase {
        let texts: Vec<String> = (0..labels.len()).map(|i| format!("s{i}")).collect();
        let case = Case::from_texts("c", &texts, ChargeLabel::charge("x"), Split::Test).unwrap();
        AnnotatedCase::new(case, labels).unwrap()
    }

    fn set(kinds: &[ElementKind]) -> ElementSet {
        ElementSet::from_kinds(kinds.iter().copied())
    }

    use ElementKind::*;

    #[test]
    fn removes_only_matching_sentences() {
        let a = annotated(vec![set(&[Subject]), set(&[Conduct]), ElementSet::EMPTY]);
        let r = remove_element(&a, Conduct).unwrap();
        assert_eq!(r.kept, vec![0, 2]);
        assert_eq!(r.case.sentences[1].text(), "s2");
    }

    #[test]
    fn multi_label_sentence_is_dropped_whole() {
        let a = annotated(vec![set(&[Conduct, MentalState]), set(&[Object])]);
        assert_eq!(remove_element(&a, Conduct).unwrap().kept, vec![1]);
    }

    #[test]
    fn emptied_case_is_an_error() {
        let a = annotated(vec![set(&[Conduct]), set(&[Conduct])]);
        assert!(matches!(remove_element(&a, Conduct), Err(Error::EmptiedCase(_))));
    }

    #[test]
    fn innocent_cases_are_not_ablated() {
        let mut a = annotated(vec![set(&[Conduct]), ElementSet::EMPTY]);
        a.case.charge = ChargeLabel::Innocent;
        assert!(matches!(remove_element(&a, Conduct), Err(Error::Ablation(_))));
    }

    #[test]
    fn labels_follow_figure_conventions() {
        assert_eq!(condition_label(Some(MentalState)), "-Mental");
        assert_eq!(condition_label(None), "Complete");
    }
}
