use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Case, CaseSet};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token index. Index 0 is padding, 1 is unknown, the rest are ordered by
/// descending training frequency and then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Vocabulary over an explicit token list (reserved entries are added in front).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for t in tokens {
            let t = t.into();
            if !all.contains(&t) {
                all.push(t);
            }
        }
        Vocab::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_case(&self, case: &Case) -> Vec<usize> {
        case.tokens().map(|t| self.id(t)).collect()
    }
}

pub fn build_vocab(cases: &CaseSet, min_count: usize) -> Result<Vocab> {
    if cases.is_empty() {
        return Err(Error::Model("cannot build a vocabulary from an empty case set".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for case in cases {
        for t in case.tokens() {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && *t != PAD_TOKEN && *t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(Vocab::from_tokens(kept.into_iter().map(|(t, _)| t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChargeLabel, Split};

    fn corpus() -> CaseSet {
        CaseSet::new(vec![Case::from_texts("c", &["a a b"], ChargeLabel::charge("x"), Split::Train).unwrap()])
            .unwrap()
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = build_vocab(&corpus(), 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn rare_tokens_map_to_unknown() {
        let v = build_vocab(&corpus(), 2).unwrap();
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("a"), 2);
    }

    #[test]
    fn builds_are_identical_and_round_trip() {
        let a = build_vocab(&corpus(), 1).unwrap();
        assert_eq!(a, build_vocab(&corpus(), 1).unwrap());
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), a);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab(&CaseSet::default(), 1).is_err());
    }
}
