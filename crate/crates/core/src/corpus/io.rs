//! JSON-lines ingestion and serialization for cases and element annotations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AnnotatedCase, AnnotatedCaseSet, Case, CaseSet, ChargeLabel, ChargeSet, ElementKind,
    ElementSet, Sentence, Source, Split,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    id: String,
    sentences: Vec<String>,
    charge: String,
    split: Split,
    #[serde(default = "default_source")]
    source: Source,
}

fn default_source() -> Source {
    Source::Criminal
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: String,
    labels: Vec<Vec<String>>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cases(path: impl AsRef<Path>, charges: &ChargeSet) -> Result<CaseSet> {
    let path = path.as_ref();
    parse_cases(&read(path)?, path, charges)
}

/// Parses case records; `origin` is only used in error messages.
pub fn parse_cases(text: &str, origin: &Path, charges: &ChargeSet) -> Result<CaseSet> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: CaseRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let sentences = record
            .sentences
            .into_iter()
            .map(Sentence::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(e.to_string()))?;
        let case = Case::new(
            record.id,
            sentences,
            ChargeLabel::charge(record.charge),
            record.split,
            record.source,
        )
        .map_err(|e| parse_err(e.to_string()))?;
        cases.push(case);
    }
    let set = CaseSet::new(cases)?;
    set.validate_charges(charges)?;
    Ok(set)
}

pub fn cases_to_jsonl(cases: &CaseSet) -> String {
    let mut out = String::new();
    for case in cases {
        let record = CaseRecord {
            id: case.id.clone(),
            sentences: case.sentences.iter().map(|s| s.text().to_string()).collect(),
            charge: case.charge.as_str().to_string(),
            split: case.split,
            source: case.source,
        };
        out.push_str(&serde_json::to_string(&record).expect("case record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_cases(cases: &CaseSet, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &cases_to_jsonl(cases))
}

pub fn load_annotations(path: impl AsRef<Path>, cases: &CaseSet) -> Result<AnnotatedCaseSet> {
    let path = path.as_ref();
    parse_annotations(&read(path)?, path, cases)
}

pub fn parse_annotations(text: &str, origin: &Path, cases: &CaseSet) -> Result<AnnotatedCaseSet> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let case = cases.get(&record.id).ok_or_else(|| {
            Error::Validation(format!(
                "line {}: annotation references unknown case `{}`",
                i + 1,
                record.id
            ))
        })?;
        let labels = record
            .labels
            .iter()
            .map(|kinds| {
                kinds
                    .iter()
                    .map(|k| k.parse::<ElementKind>())
                    .collect::<Result<Vec<_>>>()
                    .map(ElementSet::from_kinds)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(AnnotatedCase::new(case.clone(), labels)?);
    }
    AnnotatedCaseSet::new(out)
}

pub fn annotations_to_jsonl(set: &AnnotatedCaseSet) -> String {
    let mut out = String::new();
    for ann in set {
        let record = AnnotationRecord {
            id: ann.case.id.clone(),
            labels: ann
                .labels
                .iter()
                .map(|s| s.iter().map(|k| k.as_str().to_string()).collect())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("annotation record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_annotations(set: &AnnotatedCaseSet, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &annotations_to_jsonl(set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn charges() -> ChargeSet {
        ChargeSet::new(["Theft", "Robbery"]).unwrap()
    }

    const THREE: &str = concat!(
        r#"{"id":"c1","sentences":["he took the bag","he ran"],"charge":"Theft","split":"train","source":"criminal"}"#,
        "\n",
        r#"{"id":"c2","sentences":["he drew a knife"],"charge":"Robbery","split":"valid","source":"criminal"}"#,
        "\n",
        r#"{"id":"c3","sentences":["他捡到钱包。","还给了失主。"],"charge":"INNOCENT","split":"test","source":"innocent"}"#,
        "\n",
    );

    #[test]
    fn loads_three_records_and_round_trips() {
        let set = parse_cases(THREE, Path::new("mem"), &charges()).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.cases()[2].charge, ChargeLabel::Innocent);
        assert_eq!(set.cases()[2].sentences[0].tokens().len(), 6);
        assert_eq!(cases_to_jsonl(&set), THREE);
    }

    #[test]
    fn missing_charge_names_line() {
        let text = format!(
            "{}\n{}\n",
            r#"{"id":"c1","sentences":["a"],"charge":"Theft","split":"train"}"#,
            r#"{"id":"c2","sentences":["a"],"split":"train"}"#
        );
        match parse_cases(&text, Path::new("f.jsonl"), &charges()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("charge"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let line = r#"{"id":"c1","sentences":["a"],"charge":"Theft","split":"train"}"#;
        let text = format!("{line}\n{line}\n");
        let err = parse_cases(&text, Path::new("f"), &charges()).unwrap_err();
        assert!(err.to_string().contains("duplicate case id `c1`"), "{err}");
    }

    #[test]
    fn unknown_charge_lists_label() {
        let text = r#"{"id":"c1","sentences":["a"],"charge":"Arson","split":"train"}"#;
        let err = parse_cases(text, Path::new("f"), &charges()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("Arson"));
    }

    #[test]
    fn empty_sentence_is_a_parse_error() {
        let text = r#"{"id":"c1","sentences":["a",""],"charge":"Theft","split":"train"}"#;
        assert!(matches!(
            parse_cases(text, Path::new("f"), &charges()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    fn three_sentence_case() -> CaseSet {
        let text = r#"{"id":"c1","sentences":["x","y","z"],"charge":"Theft","split":"train"}"#;
        parse_cases(text, Path::new("f"), &charges()).unwrap()
    }

    #[test]
    fn annotations_parse_multi_label_and_na() {
        let cases = three_sentence_case();
        let text = r#"{"id":"c1","labels":[["Conduct"],[],["Subject","MentalState"]]}"#;
        let ann = parse_annotations(text, Path::new("a"), &cases).unwrap();
        let labels = &ann.cases()[0].labels;
        assert_eq!(labels[0], ElementSet::from_kinds([ElementKind::Conduct]));
        assert!(labels[1].is_empty());
        assert_eq!(
            labels[2],
            ElementSet::from_kinds([ElementKind::Subject, ElementKind::MentalState])
        );
        assert_eq!(annotations_to_jsonl(&ann).trim_end(), text);
    }

    #[test]
    fn annotation_length_mismatch() {
        let cases = three_sentence_case();
        let text = r#"{"id":"c1","labels":[["Conduct"],[]]}"#;
        let err = parse_annotations(text, Path::new("a"), &cases).unwrap_err();
        assert!(err.to_string().contains("3 sentences but 2"), "{err}");
    }

    #[test]
    fn annotation_unknown_element() {
        let cases = three_sentence_case();
        let text = r#"{"id":"c1","labels":[["Weapon"],[],[]]}"#;
        let err = parse_annotations(text, Path::new("a"), &cases).unwrap_err();
        assert!(err.to_string().contains("Weapon"));
    }

    #[test]
    fn annotation_unknown_case() {
        let cases = three_sentence_case();
        let text = r#"{"id":"c9","labels":[[],[],[]]}"#;
        assert!(parse_annotations(text, Path::new("a"), &cases).is_err());
    }
}
