//! Confusing-charge perturbation: insert a circumstance that makes the facts
//! meet a neighbouring charge and check whether the prediction moves.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    tokenize, AnnotatedCaseSet, Case, CaseSet, ChargeLabel, ElementKind, ElementSet, Sentence, Split, SynthSpec,
};
use crate::error::{Error, Result};
use crate::models::ChargeModel;

/// Where a circumstance is inserted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Appended as a clause to the first Conduct sentence, when annotations exist.
    #[default]
    ConductSentence,
    AppendEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Commonality {
    Common,
    Uncommon,
}

impl fmt::Display for Commonality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Commonality::Common => "common",
            Commonality::Uncommon => "uncommon",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRule {
    pub source: String,
    pub target: String,
    pub knowledge: String,
    pub circumstance: String,
    /// English rendering when `circumstance` is in another language.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss: Option<String>,
    pub commonality: Commonality,
    #[serde(default)]
    pub anchor: Anchor,
}

impl PerturbationRule {
    pub fn id(&self) -> String {
        format!("{}->{}:{}", self.source, self.target, self.commonality)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::Perturbation(format!("rule {} maps a charge onto itself", self.id())));
        }
        if tokenize(&self.circumstance).is_empty() {
            return Err(Error::Perturbation(format!("rule {} has an empty circumstance", self.id())));
        }
        Ok(())
    }
}

fn real(
    source: &str,
    target: &str,
    knowledge: &str,
    circumstance: &str,
    gloss: &str,
    commonality: Commonality,
) -> PerturbationRule {
    PerturbationRule {
        source: source.into(),
        target: target.into(),
        knowledge: knowledge.into(),
        circumstance: circumstance.into(),
        gloss: Some(gloss.into()),
        commonality,
        anchor: Anchor::ConductSentence,
    }
}

/// The six rules for the real charge set (Forcible Seizure, Theft, Traffic
/// Accident, Robbery, Negligent Homicide), with Chinese circumstance text.
pub fn builtin_rules() -> Vec<PerturbationRule> {
    use Commonality::*;
    vec![
        real("FS", "Rob", "armed with weapon", "持棍棒", "armed with a baton", Uncommon),
        real("FS", "Rob", "armed with weapon", "持刀", "armed with a knife", Common),
        real("TFT", "Rob", "using violence", "用辣椒水喷向保安", "spray the security guards with pepper", Uncommon),
        real("TFT", "Rob", "using violence", "持弹簧刀划伤追赶者", "hurt pursuers with a switchblade", Common),
        real("TA", "NH", "on non-public transport road", "在正在维修下水道的道路上", "on a road where the sewer is being repaired", Uncommon),
        real("TA", "NH", "on non-public transport road", "在封闭施工的道路上", "on a road closed for construction", Common),
    ]
}

/// Rules for a synthetic corpus, two per declared confusion.
pub fn synthetic_rules(spec: &SynthSpec) -> Result<Vec<PerturbationRule>> {
    spec.validate()?;
    let mut out = Vec::new();
    for c in &spec.confusions {
        for (text, commonality) in [(&c.uncommon, Commonality::Uncommon), (&c.common, Commonality::Common)] {
            out.push(PerturbationRule {
                source: c.source.clone(),
                target: c.target.clone(),
                knowledge: c.knowledge.clone(),
                circumstance: text.clone(),
                gloss: None,
                commonality,
                anchor: c.anchor,
            });
        }
    }
    Ok(out)
}

/// One JSON rule per line.
pub fn parse_rules(text: &str, origin: &Path) -> Result<Vec<PerturbationRule>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rule: PerturbationRule = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rule.validate()?;
        out.push(rule);
    }
    Ok(out)
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<Vec<PerturbationRule>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules(&text, path)
}

pub fn rules_to_jsonl(rules: &[PerturbationRule]) -> String {
    rules
        .iter()
        .map(|r| serde_json::to_string(r).expect("rule serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedCase {
    pub original_id: String,
    pub case: Case,
    pub rule_id: String,
    /// Index of the modified sentence (equal to the original sentence count
    /// when the circumstance was appended as a new sentence).
    pub sentence: usize,
}

fn contains_run(haystack: &[&str], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(a, b)| *a == b))
}

/// Joins a clause onto a sentence without disturbing its existing tokens.
fn attach(text: &str, clause: &str) -> String {
    if clause.chars().any(crate::corpus::is_cjk) {
        let trimmed = text.trim_end();
        match trimmed.char_indices().last() {
            Some((i, c)) if matches!(c, '。' | '！' | '？') => format!("{}，{clause}{c}", &trimmed[..i]),
            _ => format!("{trimmed}，{clause}"),
        }
    } else {
        format!("{} {clause}", text.trim_end())
    }
}

/// Inserts the rule's circumstance once. `labels` are the case's sentence
/// annotations, if any; without them (or without a Conduct sentence) the
/// circumstance becomes a new final sentence.
pub fn apply_rule(case: &Case, labels: Option<&[ElementSet]>, rule: &PerturbationRule) -> Result<PerturbedCase> {
    rule.validate()?;
    if case.charge != ChargeLabel::charge(rule.source.as_str()) {
        return Err(Error::Perturbation(format!(
            "rule {} applies to `{}` cases, `{}` is `{}`",
            rule.id(),
            rule.source,
            case.id,
            case.charge
        )));
    }
    let tokens: Vec<&str> = case.tokens().collect();
    if contains_run(&tokens, &tokenize(&rule.circumstance)) {
        return Err(Error::Perturbation(format!(
            "case `{}` already contains the circumstance of {}",
            case.id,
            rule.id()
        )));
    }
    let anchor = match (rule.anchor, labels) {
        (Anchor::ConductSentence, Some(l)) => l.iter().position(|s| s.contains(ElementKind::Conduct)),
        _ => None,
    };
    let mut sentences = case.sentences.clone();
    let index = match anchor {
        Some(i) => {
            sentences[i] = Sentence::new(attach(sentences[i].text(), &rule.circumstance))?;
            i
        }
        None => {
            sentences.push(Sentence::new(rule.circumstance.clone())?);
            sentences.len() - 1
        }
    };
    let modified = Case::new(case.id.clone(), sentences, case.charge.clone(), case.split, case.source)?;
    Ok(PerturbedCase {
        original_id: case.id.clone(),
        case: modified,
        rule_id: rule.id(),
        sentence: index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbedPrediction {
    pub case_id: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionResult {
    pub rule: PerturbationRule,
    pub sample: usize,
    /// Sampled cases the model originally predicted as the source charge.
    pub eligible: usize,
    pub retained: usize,
    /// Sampled cases still predicted as the source charge, eligible or not.
    pub retained_raw: usize,
    /// `retained / eligible`; `None` when nothing was eligible.
    pub ratio: Option<f64>,
    pub ratio_raw: f64,
    pub predictions: Vec<PerturbedPrediction>,
}

/// Samples up to `n` valid/test cases of the rule's source charge and
/// measures how often the prediction survives the perturbation.
pub fn run_perturbation(
    model: &dyn ChargeModel,
    cases: &CaseSet,
    annotations: Option<&AnnotatedCaseSet>,
    rule: &PerturbationRule,
    n: usize,
    seed: u64,
) -> Result<RetentionResult> {
    rule.validate()?;
    let source = ChargeLabel::charge(rule.source.as_str());
    let mut pool: Vec<&Case> = cases
        .iter()
        .filter(|c| matches!(c.split, Split::Valid | Split::Test) && c.charge == source)
        .collect();
    if pool.is_empty() {
        return Err(Error::Perturbation(format!(
            "no valid/test cases of `{}` to perturb with {}",
            rule.source,
            rule.id()
        )));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.truncate(n.min(pool.len()));
    let index = annotations.map(|a| a.label_index());
    let predictions: Vec<PerturbedPrediction> = pool
        .par_iter()
        .map(|case| {
            let labels = index.as_ref().and_then(|i| i.get(case.id.as_str()).copied());
            let perturbed = apply_rule(case, labels, rule)?;
            Ok(PerturbedPrediction {
                case_id: case.id.clone(),
                before: model.predict(case)?.argmax().to_string(),
                after: model.predict(&perturbed.case)?.argmax().to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let eligible = predictions.iter().filter(|p| p.before == rule.source).count();
    let retained = predictions
        .iter()
        .filter(|p| p.before == rule.source && p.after == rule.source)
        .count();
    let retained_raw = predictions.iter().filter(|p| p.after == rule.source).count();
    if eligible == 0 {
        log::warn!("{}: no sampled case was originally predicted as `{}`", rule.id(), rule.source);
    }
    Ok(RetentionResult {
        rule: rule.clone(),
        sample: predictions.len(),
        eligible,
        retained,
        retained_raw,
        ratio: (eligible > 0).then(|| retained as f64 / eligible as f64),
        ratio_raw: retained_raw as f64 / predictions.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs_case() -> Case {
        Case::from_texts(
            "fs1",
            &["the man walked on the street", "he snatched a bag from a woman", "the bag held cash"],
            ChargeLabel::charge("FS"),
            Split::Test,
        )
        .unwrap()
    }

    fn knife() -> PerturbationRule {
        PerturbationRule {
            source: "FS".into(),
            target: "Rob".into(),
            knowledge: "armed with weapon".into(),
            circumstance: "armed with a knife".into(),
            gloss: None,
            commonality: Commonality::Common,
            anchor: Anchor::ConductSentence,
        }
    }

    fn labels() -> Vec<ElementSet> {
        vec![
            ElementSet::from_kinds([ElementKind::Subject]),
            ElementSet::from_kinds([ElementKind::Conduct]),
            ElementSet::from_kinds([ElementKind::Object]),
        ]
    }

    #[test]
    fn builtin_rules_pair_common_and_uncommon() {
        let rules = builtin_rules();
        assert_eq!(rules.len(), 6);
        for pair in rules.chunks(2) {
            assert_eq!(pair[0].source, pair[1].source);
            assert_ne!(pair[0].commonality, pair[1].commonality);
        }
    }

    #[test]
    fn inserts_into_conduct_sentence_only() {
        let case = fs_case();
        let p = apply_rule(&case, Some(&labels()), &knife()).unwrap();
        assert_eq!(p.sentence, 1);
        assert_eq!(p.case.sentences[1].text(), "he snatched a bag from a woman armed with a knife");
        assert_eq!(p.case.sentences[0], case.sentences[0]);
        assert_eq!(p.case.sentences[2], case.sentences[2]);
    }

    #[test]
    fn second_application_is_rejected() {
        let p = apply_rule(&fs_case(), Some(&labels()), &knife()).unwrap();
        assert!(apply_rule(&p.case, Some(&labels()), &knife()).is_err());
    }

    #[test]
    fn no_conduct_sentence_appends_at_end() {
        let case = fs_case();
        let p = apply_rule(&case, Some(&[ElementSet::EMPTY; 3]), &knife()).unwrap();
        assert_eq!(p.sentence, 3);
        assert_eq!(p.case.sentences.len(), 4);
        let p = apply_rule(&case, None, &knife()).unwrap();
        assert_eq!(p.case.sentences[3].text(), "armed with a knife");
    }

    #[test]
    fn wrong_charge_is_rejected() {
        let mut rule = knife();
        rule.source = "TFT".into();
        assert!(apply_rule(&fs_case(), None, &rule).is_err());
    }

    #[test]
    fn chinese_clause_goes_before_final_stop() {
        let case = Case::from_texts("z", &["他抢走了手机。"], ChargeLabel::charge("FS"), Split::Test).unwrap();
        let rule = builtin_rules().remove(1);
        let p = apply_rule(&case, Some(&[ElementSet::from_kinds([ElementKind::Conduct])]), &rule).unwrap();
        assert_eq!(p.case.sentences[0].text(), "他抢走了手机，持刀。");
    }

    #[test]
    fn rule_file_round_trips() {
        let rules = builtin_rules();
        let text = rules_to_jsonl(&rules);
        assert_eq!(parse_rules(&text, Path::new("rules.jsonl")).unwrap(), rules);
    }
}
