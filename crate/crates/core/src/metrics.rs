//! Metric kernel shared by every audit stage.
//!
//! Zero denominators evaluate to 0 (never NaN) and are logged at debug level.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ElementKind, ElementSet};
use crate::error::{Error, Result};

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize, what: &str) -> f64 {
    if den == 0 {
        log::debug!("zero denominator for {what}; using 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        let precision = ratio(tp, tp + fp, "precision");
        let recall = ratio(tp, tp + fn_, "recall");
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    /// Unweighted mean of several results.
    pub fn mean(items: &[Prf]) -> Prf {
        if items.is_empty() {
            return Prf::default();
        }
        let n = items.len() as f64;
        Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    }
}

/// Per-label one-vs-rest counts for single-label predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Metric("empty input".into()));
    }
    Ok(())
}

pub fn accuracy<L: PartialEq>(gold: &[L], pred: &[L]) -> Result<f64> {
    check_aligned(gold.len(), pred.len())?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn confusion<L: Ord + Clone>(
    gold: &[L],
    pred: &[L],
    label_set: &[L],
) -> Result<BTreeMap<L, ConfusionCounts>> {
    check_aligned(gold.len(), pred.len())?;
    let mut out: BTreeMap<L, ConfusionCounts> =
        label_set.iter().map(|l| (l.clone(), ConfusionCounts::default())).collect();
    if gold.iter().chain(pred).any(|l| !out.contains_key(l)) {
        return Err(Error::Metric("label outside the label set".into()));
    }
    for (label, counts) in out.iter_mut() {
        for (g, p) in gold.iter().zip(pred) {
            match (g == label, p == label) {
                (true, true) => counts.tp += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(out)
}

/// Macro P/R/F1 over the labels that have at least one gold instance.
pub fn macro_prf<L: Ord + Clone>(gold: &[L], pred: &[L], label_set: &[L]) -> Result<Prf> {
    let table = confusion(gold, pred, label_set)?;
    let per_label: Vec<Prf> = table
        .values()
        .filter(|c| c.support() > 0)
        .map(ConfusionCounts::prf)
        .collect();
    Ok(Prf::mean(&per_label))
}

/// Pooled TP/FP/FN over (item, kind) pairs of multi-label element predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MicroCounts {
    pub fn add(&mut self, other: MicroCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn record(&mut self, gold: bool, pred: bool) {
        match (gold, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => {}
        }
    }
}

pub fn micro_counts(
    gold: &[ElementSet],
    pred: &[ElementSet],
    kinds: &[ElementKind],
) -> Result<MicroCounts> {
    check_aligned(gold.len(), pred.len())?;
    let mut counts = MicroCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        for &k in kinds {
            counts.record(g.contains(k), p.contains(k));
        }
    }
    Ok(counts)
}

pub fn micro_prf(gold: &[ElementSet], pred: &[ElementSet], kinds: &[ElementKind]) -> Result<Prf> {
    Ok(micro_counts(gold, pred, kinds)?.prf())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub observed: f64,
    pub expected: f64,
    pub kappa: f64,
}

/// Cohen's kappa with marginal-product expected agreement.
pub fn cohen_kappa<L: Ord>(a: &[L], b: &[L]) -> Result<AgreementReport> {
    check_aligned(a.len(), b.len())?;
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marginals: BTreeMap<&L, (usize, usize)> = BTreeMap::new();
    for x in a {
        marginals.entry(x).or_default().0 += 1;
    }
    for y in b {
        marginals.entry(y).or_default().1 += 1;
    }
    let expected: f64 = marginals
        .values()
        .map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n))
        .sum();
    let kappa = if expected >= 1.0 {
        1.0
    } else {
        ((observed - expected) / (1.0 - expected)).clamp(-1.0, 1.0)
    };
    Ok(AgreementReport {
        observed,
        expected,
        kappa,
    })
}

pub const HISTOGRAM_BINS: usize = 20;

/// Equal-width histogram over [0, 1]. Bins are right-closed, `(lo, hi]`, and
/// the first bin also holds 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub histogram: Histogram,
    pub five: FiveNumber,
}

fn check_unit_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Metric("no values to summarize".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Metric(format!("value {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    check_unit_values(values)?;
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut i = ((v * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        while i > 0 && v <= edges[i] {
            i -= 1;
        }
        while i + 1 < bins && v > edges[i + 1] {
            i += 1;
        }
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Linear interpolation between closest ranks on a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn five_number(values: &[f64]) -> Result<FiveNumber> {
    if values.is_empty() {
        return Err(Error::Metric("no values to summarize".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(FiveNumber {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

pub fn dist_summary(values: &[f64]) -> Result<DistSummary> {
    Ok(DistSummary {
        histogram: histogram(values, HISTOGRAM_BINS)?,
        five: five_number(values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ElementKind::*;

    fn set(kinds: &[ElementKind]) -> ElementSet {
        ElementSet::from_kinds(kinds.iter().copied())
    }

    #[test]
    fn perfect_macro() {
        let g = ["a", "b", "c", "a"];
        let prf = macro_prf(&g, &g, &["a", "b", "c"]).unwrap();
        assert_eq!(prf, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn majority_collapse_macro_f1_is_one_third() {
        // class a: tp 2, fp 2 -> P 1/2, R 1, F1 2/3; class b: all zero.
        let gold = ["a", "a", "b", "b"];
        let pred = ["a", "a", "a", "a"];
        assert_eq!(accuracy(&gold, &pred).unwrap(), 0.5);
        let table = confusion(&gold, &pred, &["a", "b"]).unwrap();
        assert!((table["a"].prf().f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(table["b"].prf().precision, 0.0);
        let prf = macro_prf(&gold, &pred, &["a", "b"]).unwrap();
        assert!((prf.f1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((prf.precision - 0.25).abs() < 1e-12);
        assert!((prf.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_support_labels_are_excluded_from_macro() {
        let prf = macro_prf(&["a", "a"], &["a", "a"], &["a", "b", "c"]).unwrap();
        assert_eq!(prf.f1, 1.0);
    }

    #[test]
    fn empty_or_misaligned_input_errors() {
        assert!(macro_prf::<&str>(&[], &[], &["a"]).is_err());
        assert!(accuracy(&["a"], &["a", "b"]).is_err());
        assert!(micro_prf(&[], &[], &ElementKind::ALL).is_err());
        assert!(macro_prf(&["z"], &["a"], &["a"]).is_err());
    }

    #[test]
    fn micro_cases() {
        let one = micro_prf(&[set(&[Conduct])], &[set(&[Conduct])], &ElementKind::ALL).unwrap();
        assert_eq!(one, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        let partial = micro_prf(
            &[set(&[Conduct, MentalState])],
            &[set(&[Conduct])],
            &ElementKind::ALL,
        )
        .unwrap();
        assert_eq!(partial.precision, 1.0);
        assert_eq!(partial.recall, 0.5);
        assert!((partial.f1 - 2.0 / 3.0).abs() < 1e-12);
        let none = micro_prf(
            &[set(&[Conduct]), set(&[Object])],
            &[ElementSet::EMPTY, ElementSet::EMPTY],
            &ElementKind::ALL,
        )
        .unwrap();
        assert_eq!(none, Prf::default());
    }

    #[test]
    fn kappa_hand_cases() {
        let same = cohen_kappa(&["x", "y", "x"], &["x", "y", "x"]).unwrap();
        assert_eq!(same.kappa, 1.0);
        let zero = cohen_kappa(&["x", "x", "y", "y"], &["x", "y", "x", "y"]).unwrap();
        assert_eq!((zero.observed, zero.expected, zero.kappa), (0.5, 0.5, 0.0));
        let neg = cohen_kappa(&["x", "y"], &["y", "x"]).unwrap();
        assert_eq!((neg.observed, neg.expected, neg.kappa), (0.0, 0.5, -1.0));
        let constant = cohen_kappa(&["x", "x"], &["x", "x"]).unwrap();
        assert_eq!(constant.kappa, 1.0);
        assert!(cohen_kappa(&["x"], &["x", "y"]).is_err());
    }

    #[test]
    fn dist_summary_constant_values() {
        let s = dist_summary(&[0.5, 0.5]).unwrap();
        let occupied: Vec<usize> = (0..HISTOGRAM_BINS).filter(|&i| s.histogram.counts[i] > 0).collect();
        assert_eq!(occupied, vec![9]);
        assert_eq!((s.histogram.edges[9], s.histogram.edges[10]), (0.45, 0.5));
        assert_eq!(s.five, FiveNumber { min: 0.5, q1: 0.5, median: 0.5, q3: 0.5, max: 0.5 });
    }

    #[test]
    fn quartiles_of_even_grid() {
        let f = five_number(&[1.0, 0.25, 0.0, 0.75, 0.5]).unwrap();
        assert_eq!((f.q1, f.median, f.q3), (0.25, 0.5, 0.75));
    }

    #[test]
    fn histogram_boundaries() {
        let h = histogram(&[0.0, 1.0, 0.15, 0.05], 20).unwrap();
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[2], 1);
        assert_eq!(h.counts[19], 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert!(histogram(&[1.2], 20).is_err());
        assert!(histogram(&[], 20).is_err());
    }
}
