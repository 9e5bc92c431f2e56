use std::collections::BTreeMap;

use serde::Serialize;

use super::{AnnotatedCaseSet, CaseSet, ElementKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl Summary {
    fn of(values: &[usize]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        Some(Summary {
            min: *values.iter().min().unwrap(),
            max: *values.iter().max().unwrap(),
            mean: values.iter().sum::<usize>() as f64 / values.len() as f64,
        })
    }
}

/// Sentence and token count distributions of a case set.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SegmentReport {
    pub cases: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub sentences_per_case: Option<Summary>,
    pub tokens_per_sentence: Option<Summary>,
    /// `(case id, sentence index)` of every sentence without tokens.
    pub empty_sentences: Vec<(String, usize)>,
}

impl SegmentReport {
    pub fn is_empty(&self) -> bool {
        self.cases == 0
    }
}

pub fn segment_check(cases: &CaseSet) -> SegmentReport {
    let mut per_case = Vec::new();
    let mut per_sentence = Vec::new();
    let mut empty = Vec::new();
    for case in cases {
        per_case.push(case.sentences.len());
        for (i, s) in case.sentences.iter().enumerate() {
            per_sentence.push(s.tokens().len());
            if s.tokens().is_empty() {
                empty.push((case.id.clone(), i));
            }
        }
    }
    SegmentReport {
        cases: cases.len(),
        sentences: per_sentence.len(),
        tokens: per_sentence.iter().sum(),
        sentences_per_case: Summary::of(&per_case),
        tokens_per_sentence: Summary::of(&per_sentence),
        empty_sentences: empty,
    }
}

/// Per-charge sentence counts by element, NA sentences and case count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ElementTableRow {
    pub charge: String,
    pub elements: [usize; 4],
    pub na: usize,
    pub cases: usize,
}

/// Element statistics per charge, in first-seen charge order, with a final `All` row.
pub fn element_table(set: &AnnotatedCaseSet) -> Vec<ElementTableRow> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, ElementTableRow> = BTreeMap::new();
    let mut all = ElementTableRow {
        charge: "All".to_string(),
        ..Default::default()
    };
    for ann in set {
        let name = ann.case.charge.as_str().to_string();
        if !rows.contains_key(&name) {
            order.push(name.clone());
        }
        let row = rows.entry(name.clone()).or_insert_with(|| ElementTableRow {
            charge: name,
            ..Default::default()
        });
        row.cases += 1;
        all.cases += 1;
        for labels in &ann.labels {
            if labels.is_empty() {
                row.na += 1;
                all.na += 1;
            }
            for kind in ElementKind::ALL {
                if labels.contains(kind) {
                    row.elements[kind.index()] += 1;
                    all.elements[kind.index()] += 1;
                }
            }
        }
    }
    let mut out: Vec<ElementTableRow> = order.into_iter().map(|c| rows.remove(&c).unwrap()).collect();
    out.push(all);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Case, ChargeLabel, Split};

    #[test]
    fn mean_tokens_per_sentence() {
        let set = CaseSet::new(vec![Case::from_texts(
            "c",
            &["a b c", "a b c d e"],
            ChargeLabel::charge("x"),
            Split::Train,
        )
        .unwrap()])
        .unwrap();
        let report = segment_check(&set);
        assert_eq!(report.tokens_per_sentence.unwrap().mean, 4.0);
        assert_eq!(report.sentences_per_case.unwrap().max, 2);
        assert!(report.empty_sentences.is_empty());
    }

    #[test]
    fn empty_set_gives_empty_report() {
        let report = segment_check(&CaseSet::default());
        assert!(report.is_empty());
        assert_eq!(report, SegmentReport::default());
    }
}
