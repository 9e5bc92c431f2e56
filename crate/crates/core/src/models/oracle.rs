//! Rule model over planted element markers.
//!
//! A case is guilty only if markers of all four element kinds occur in it.
//! Among the charges, the one with the most fully satisfied elements wins,
//! then the one with the most satisfied concepts (so a charge whose conduct
//! additionally requires a weapon beats the plain one when a weapon is
//! mentioned), then the earlier charge.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};

use super::{ChargeDistribution, EncoderOutput};
use crate::corpus::{Case, ChargeLabel, ElementKind, ElementKnowledge, ElementSet, LabelSet};
use crate::error::{Error, Result};

fn kinds_in<'a>(knowledge: &ElementKnowledge, tokens: impl Iterator<Item = &'a str>) -> ElementSet {
    tokens
        .filter_map(|t| knowledge.marker_kind(t))
        .fold(ElementSet::EMPTY, ElementSet::with)
}

/// Element kinds present in the case and, per known charge,
/// `(fully satisfied elements, satisfied concepts)`.
pub fn oracle_scores(knowledge: &ElementKnowledge, case: &Case) -> (ElementSet, Vec<(usize, usize)>) {
    let tokens: BTreeSet<&str> = case.tokens().collect();
    let present = kinds_in(knowledge, tokens.iter().copied());
    let scores = knowledge
        .requirements
        .iter()
        .map(|req| {
            let mut elements = 0;
            let mut concepts = 0;
            for kind in ElementKind::ALL {
                let needed = &req[kind.index()];
                let hit = needed
                    .iter()
                    .filter(|alts| alts.iter().any(|m| tokens.contains(m.as_str())))
                    .count();
                concepts += hit;
                if hit == needed.len() {
                    elements += 1;
                }
            }
            (elements, concepts)
        })
        .collect();
    (present, scores)
}

pub(crate) fn predict(
    knowledge: &ElementKnowledge,
    labels: &LabelSet,
    case: &Case,
) -> Result<ChargeDistribution> {
    if case.token_count() == 0 {
        return Err(Error::Model(format!("case `{}` has no tokens", case.id)));
    }
    let (present, scores) = oracle_scores(knowledge, case);
    if present != ElementSet::FULL {
        return Ok(ChargeDistribution::one_hot(labels, labels.innocent_index()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let index = labels
        .index_of(&ChargeLabel::charge(knowledge.charges[best].as_str()))
        .expect("oracle charges checked against labels");
    Ok(ChargeDistribution::one_hot(labels, index))
}

/// Every token carries the 4-dim indicator of the element kinds whose markers
/// occur in its sentence, so sentence vectors are that indicator exactly.
pub(crate) fn encode(knowledge: &ElementKnowledge, case: &Case) -> Result<EncoderOutput> {
    if case.token_count() == 0 {
        return Err(Error::Model(format!("case `{}` has no tokens", case.id)));
    }
    let mut tokens = Array2::zeros((case.token_count(), 4));
    let mut row = 0;
    for s in &case.sentences {
        let kinds = kinds_in(knowledge, s.tokens().iter().map(String::as_str));
        for _ in s.tokens() {
            for k in kinds.iter() {
                tokens[[row, k.index()]] = 1.0;
            }
            row += 1;
        }
    }
    let fact = Array1::from_iter(
        ElementKind::ALL
            .iter()
            .map(|k| f64::from(u8::from(kinds_in(knowledge, case.tokens()).contains(*k)))),
    );
    EncoderOutput::from_tokens(tokens, fact, &case.sentence_spans())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SynthSpec, Split};
    use crate::models::{ChargeModel, ModelBundle};

    fn oracle() -> (SynthSpec, ModelBundle) {
        let spec = SynthSpec::default_legal();
        let labels = LabelSet::new(&spec.charge_set().unwrap());
        let bundle = ModelBundle::oracle(&labels, spec.knowledge().unwrap()).unwrap();
        (spec, bundle)
    }

    #[test]
    fn convicts_complete_cases_of_their_charge() {
        let (spec, bundle) = oracle();
        let (cases, _) = spec.with_seed(3).generate().unwrap();
        for case in cases.iter().filter(|c| !c.charge.is_innocent()).take(80) {
            let d = bundle.predict(case).unwrap();
            assert_eq!(d.prob(&case.charge), 1.0, "{}", case.id);
        }
    }

    #[test]
    fn acquits_when_conduct_is_missing() {
        let (spec, bundle) = oracle();
        let (_, ann) = spec.with_seed(3).generate().unwrap();
        let ac = ann.iter().find(|a| !a.case.charge.is_innocent()).unwrap();
        let kept: Vec<&str> = ac
            .case
            .sentences
            .iter()
            .zip(&ac.labels)
            .filter(|(_, l)| !l.contains(ElementKind::Conduct))
            .map(|(s, _)| s.text())
            .collect();
        let case = Case::from_texts("x", &kept, ac.case.charge.clone(), Split::Test).unwrap();
        assert_eq!(bundle.predict(&case).unwrap().innocent(), 1.0);
    }

    #[test]
    fn sentence_vectors_are_element_indicators() {
        let (spec, bundle) = oracle();
        let (_, ann) = spec.with_seed(5).generate().unwrap();
        for ac in ann.iter().take(30) {
            let out = bundle.encode(&ac.case).unwrap();
            for (i, labels) in ac.labels.iter().enumerate() {
                for k in ElementKind::ALL {
                    assert_eq!(out.sentence_vectors[[i, k.index()]] == 1.0, labels.contains(k));
                }
            }
        }
    }
}
