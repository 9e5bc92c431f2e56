//! Case data model: charges, criminal elements, sentences and case sets.
//!
//! Sentences are stored pre-segmented. Each sentence keeps its original text
//! (so files round-trip byte for byte) alongside its token sequence.

mod io;
mod split;
mod stats;
mod synth;

pub use io::{
    annotations_to_jsonl, cases_to_jsonl, load_annotations, load_cases, parse_annotations,
    parse_cases, save_annotations, save_cases,
};
pub use split::{apportion, merge_innocent};
pub use stats::{element_table, segment_check, ElementTableRow, SegmentReport, Summary};
pub use synth::{ChargeTemplate, ConfusionDef, ElementDef, ElementKnowledge, SynthSpec};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label for cases whose defendant is not guilty of any charge.
pub const INNOCENT: &str = "INNOCENT";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChargeLabel {
    Charge(String),
    Innocent,
}

impl ChargeLabel {
    pub fn charge(name: impl Into<String>) -> Self {
        let name = name.into();
        if name == INNOCENT {
            ChargeLabel::Innocent
        } else {
            ChargeLabel::Charge(name)
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            ChargeLabel::Charge(name) => name,
            ChargeLabel::Innocent => INNOCENT,
        }
    }

    pub fn is_innocent(&self) -> bool {
        matches!(self, ChargeLabel::Innocent)
    }
}

impl fmt::Display for ChargeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ChargeLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ChargeLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(ChargeLabel::charge(String::deserialize(d)?))
    }
}

/// The closed charge set `Y`, in a fixed order. `INNOCENT` is not a member;
/// it is appended to every prediction label set by [`LabelSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeSet(Vec<String>);

impl ChargeSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for name in &names {
            if name == INNOCENT {
                return Err(Error::Validation(format!(
                    "`{INNOCENT}` is reserved and cannot be listed as a charge"
                )));
            }
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid charge name `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("charge `{name}` listed twice")));
            }
        }
        Ok(ChargeSet(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: &ChargeLabel) -> bool {
        match label {
            ChargeLabel::Innocent => true,
            ChargeLabel::Charge(name) => self.0.iter().any(|c| c == name),
        }
    }
}

/// Prediction label space: every charge of a [`ChargeSet`] followed by `INNOCENT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<ChargeLabel>,
}

impl LabelSet {
    pub fn new(charges: &ChargeSet) -> Self {
        let mut labels: Vec<ChargeLabel> = charges
            .names()
            .iter()
            .map(|c| ChargeLabel::Charge(c.clone()))
            .collect();
        labels.push(ChargeLabel::Innocent);
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ChargeLabel] {
        &self.labels
    }

    pub fn index_of(&self, label: &ChargeLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn innocent_index(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn label(&self, index: usize) -> &ChargeLabel {
        &self.labels[index]
    }

    pub fn charge_set(&self) -> ChargeSet {
        ChargeSet(
            self.labels
                .iter()
                .filter(|l| !l.is_innocent())
                .map(|l| l.as_str().to_string())
                .collect(),
        )
    }
}

/// One of the four criminal elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementKind {
    Subject,
    MentalState,
    Conduct,
    Object,
}

impl ElementKind {
    pub const ALL: [ElementKind; 4] = [
        ElementKind::Subject,
        ElementKind::MentalState,
        ElementKind::Conduct,
        ElementKind::Object,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Subject => "Subject",
            ElementKind::MentalState => "MentalState",
            ElementKind::Conduct => "Conduct",
            ElementKind::Object => "Object",
        }
    }

    /// Short name used in report headers.
    pub fn short(self) -> &'static str {
        match self {
            ElementKind::Subject => "Subject",
            ElementKind::MentalState => "Mental",
            ElementKind::Conduct => "Conduct",
            ElementKind::Object => "Object",
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Subject" => Ok(ElementKind::Subject),
            "MentalState" => Ok(ElementKind::MentalState),
            "Conduct" => Ok(ElementKind::Conduct),
            "Object" => Ok(ElementKind::Object),
            other => Err(Error::Validation(format!(
                "unknown element kind `{other}` (expected Subject, MentalState, Conduct or Object)"
            ))),
        }
    }
}

/// Subset of the four element kinds. The empty set encodes NA.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementSet(u8);

impl ElementSet {
    pub const EMPTY: ElementSet = ElementSet(0);
    pub const FULL: ElementSet = ElementSet(0b1111);

    pub fn from_kinds<I: IntoIterator<Item = ElementKind>>(kinds: I) -> Self {
        kinds.into_iter().fold(ElementSet::EMPTY, |s, k| s.with(k))
    }

    pub fn from_bits(bits: u8) -> Self {
        ElementSet(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, kind: ElementKind) -> Self {
        ElementSet(self.0 | (1 << kind.index()))
    }

    pub fn without(self, kind: ElementKind) -> Self {
        ElementSet(self.0 & !(1 << kind.index()))
    }

    pub fn contains(self, kind: ElementKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }

    pub fn union(self, other: ElementSet) -> Self {
        ElementSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = ElementKind> {
        ElementKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }
}

impl Serialize for ElementSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.len()))?;
        for kind in self.iter() {
            seq.serialize_element(kind.as_str())?;
        }
        seq.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Criminal,
    Innocent,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    text: String,
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(Error::Validation(format!("empty sentence `{text}`")));
        }
        Ok(Sentence { text, tokens })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One legal case: an ordered fact description and its charge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub charge: ChargeLabel,
    pub split: Split,
    pub source: Source,
}

impl Case {
    pub fn new(
        id: impl Into<String>,
        sentences: Vec<Sentence>,
        charge: ChargeLabel,
        split: Split,
        source: Source,
    ) -> Result<Self> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(Error::Validation(format!("case `{id}` has no sentences")));
        }
        Ok(Case {
            id,
            sentences,
            charge,
            split,
            source,
        })
    }

    /// Builds a case from raw sentence strings.
    pub fn from_texts<S: AsRef<str>>(
        id: impl Into<String>,
        texts: &[S],
        charge: ChargeLabel,
        split: Split,
    ) -> Result<Self> {
        let sentences = texts
            .iter()
            .map(|t| Sentence::new(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Case::new(id, sentences, charge, split, Source::Criminal)
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// All tokens of the fact description, in order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
    }

    /// Half-open token ranges of each sentence within [`Case::tokens`].
    pub fn sentence_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.sentences
            .iter()
            .map(|s| {
                let span = (start, start + s.tokens.len());
                start = span.1;
                span
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaseSet {
    cases: Vec<Case>,
}

impl CaseSet {
    pub fn new(cases: Vec<Case>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for case in &cases {
            if !seen.insert(case.id.as_str()) {
                return Err(Error::Validation(format!("duplicate case id `{}`", case.id)));
            }
        }
        Ok(CaseSet { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Case> {
        self.cases.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn in_splits(&self, splits: &[Split]) -> CaseSet {
        CaseSet {
            cases: self
                .cases
                .iter()
                .filter(|c| splits.contains(&c.split))
                .cloned()
                .collect(),
        }
    }

    pub fn into_cases(self) -> Vec<Case> {
        self.cases
    }

    /// Checks every charge against `charges`, listing all offending labels.
    pub fn validate_charges(&self, charges: &ChargeSet) -> Result<()> {
        let unknown: BTreeSet<&str> = self
            .cases
            .iter()
            .filter(|c| !charges.contains(&c.charge))
            .map(|c| c.charge.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "unknown charge label(s): {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

impl<'a> IntoIterator for &'a CaseSet {
    type Item = &'a Case;
    type IntoIter = std::slice::Iter<'a, Case>;

    fn into_iter(self) -> Self::IntoIter {
        self.cases.iter()
    }
}

/// A case with one [`ElementSet`] per sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedCase {
    pub case: Case,
    pub labels: Vec<ElementSet>,
}

impl AnnotatedCase {
    pub fn new(case: Case, labels: Vec<ElementSet>) -> Result<Self> {
        if labels.len() != case.sentences.len() {
            return Err(Error::Validation(format!(
                "case `{}` has {} sentences but {} label sets",
                case.id,
                case.sentences.len(),
                labels.len()
            )));
        }
        Ok(AnnotatedCase { case, labels })
    }

    /// Union of all sentence labels.
    pub fn elements(&self) -> ElementSet {
        self.labels
            .iter()
            .fold(ElementSet::EMPTY, |acc, s| acc.union(*s))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotatedCaseSet {
    cases: Vec<AnnotatedCase>,
}

impl AnnotatedCaseSet {
    pub fn new(cases: Vec<AnnotatedCase>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &cases {
            if !seen.insert(c.case.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate annotation for case `{}`",
                    c.case.id
                )));
            }
        }
        Ok(AnnotatedCaseSet { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[AnnotatedCase] {
        &self.cases
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AnnotatedCase> {
        self.cases.iter()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedCase> {
        self.cases.iter().find(|c| c.case.id == id)
    }

    pub fn filter<F: Fn(&AnnotatedCase) -> bool>(&self, keep: F) -> AnnotatedCaseSet {
        AnnotatedCaseSet {
            cases: self.cases.iter().filter(|c| keep(c)).cloned().collect(),
        }
    }

    pub fn in_splits(&self, splits: &[Split]) -> AnnotatedCaseSet {
        self.filter(|c| splits.contains(&c.case.split))
    }

    /// Maps case id to its per-sentence labels.
    pub fn label_index(&self) -> HashMap<&str, &[ElementSet]> {
        self.cases
            .iter()
            .map(|c| (c.case.id.as_str(), c.labels.as_slice()))
            .collect()
    }

    pub fn case_set(&self) -> CaseSet {
        CaseSet {
            cases: self.cases.iter().map(|c| c.case.clone()).collect(),
        }
    }
}

impl<'a> IntoIterator for &'a AnnotatedCaseSet {
    type Item = &'a AnnotatedCase;
    type IntoIter = std::slice::Iter<'a, AnnotatedCase>;

    fn into_iter(self) -> Self::IntoIter {
        self.cases.iter()
    }
}

/// Proportional train/valid/test split, e.g. 5:3:2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl SplitRatio {
    pub fn new(train: u32, valid: u32, test: u32) -> Result<Self> {
        let r = SplitRatio { train, valid, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.valid == 0 || self.test == 0 {
            return Err(Error::Validation(format!(
                "split ratio parts must be positive, got {}:{}:{}",
                self.train, self.valid, self.test
            )));
        }
        Ok(())
    }

    pub fn parts(&self) -> [u32; 3] {
        [self.train, self.valid, self.test]
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 5,
            valid: 3,
            test: 2,
        }
    }
}

pub(crate) fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3000}'..='\u{303F}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{4E00}'..='\u{9FFF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{FF00}'..='\u{FFEF}')
}

/// Character tokens for CJK text, whitespace-separated words otherwise.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() || is_cjk(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if is_cjk(c) && c != '\u{3000}' {
                tokens.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Splits raw text after sentence-final punctuation (`。！？.!?`).
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '。' | '！' | '？' | '.' | '!' | '?') {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_cjk_per_character_and_latin_by_whitespace() {
        assert_eq!(tokenize("持刀 抢劫"), vec!["持", "刀", "抢", "劫"]);
        assert_eq!(tokenize(" armed  with a knife "), vec!["armed", "with", "a", "knife"]);
        assert_eq!(tokenize("A持刀b"), vec!["A", "持", "刀", "b"]);
    }

    #[test]
    fn splits_on_final_punctuation() {
        assert_eq!(
            split_sentences("他持刀。 Then he ran! ok"),
            vec!["他持刀。", "Then he ran!", "ok"]
        );
    }

    #[test]
    fn element_set_ops() {
        let s = ElementSet::from_kinds([ElementKind::Conduct, ElementKind::MentalState]);
        assert_eq!(s.len(), 2);
        assert!(s.contains(ElementKind::Conduct));
        assert!(!s.contains(ElementKind::Object));
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![ElementKind::MentalState, ElementKind::Conduct]
        );
        assert!(s.without(ElementKind::Conduct).without(ElementKind::MentalState).is_empty());
        assert_eq!(ElementSet::from_kinds(ElementKind::ALL), ElementSet::FULL);
    }

    #[test]
    fn unknown_element_kind_is_rejected() {
        assert!("Weapon".parse::<ElementKind>().is_err());
        assert_eq!("Object".parse::<ElementKind>().unwrap(), ElementKind::Object);
    }

    #[test]
    fn charge_set_rejects_reserved_and_duplicates() {
        assert!(ChargeSet::new(["a", "INNOCENT"]).is_err());
        assert!(ChargeSet::new(["a", "a"]).is_err());
        let set = ChargeSet::new(["a", "b"]).unwrap();
        let labels = LabelSet::new(&set);
        assert_eq!(labels.len(), 3);
        assert_eq!(labels.innocent_index(), 2);
        assert_eq!(labels.index_of(&ChargeLabel::charge("b")), Some(1));
    }

    #[test]
    fn sentence_spans_cover_tokens() {
        let case = Case::from_texts("c", &["a b", "c", "d e f"], ChargeLabel::charge("x"), Split::Train)
            .unwrap();
        assert_eq!(case.sentence_spans(), vec![(0, 2), (2, 3), (3, 6)]);
        assert_eq!(case.token_count(), 6);
    }

    #[test]
    fn empty_sentence_is_invalid() {
        assert!(Sentence::new("   ").is_err());
        assert!(Case::new("c", vec![], ChargeLabel::Innocent, Split::Test, Source::Innocent).is_err());
    }
}
