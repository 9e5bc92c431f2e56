//! Linear element probes over frozen sentence representations.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedCaseSet, ChargeLabel, ElementKind, ElementSet};
use crate::error::{Error, Result};
use crate::metrics::{MicroCounts, Prf};
use crate::models::ChargeModel;

/// How NA sentences enter the micro counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Pool over the four element kinds only; NA is the all-negative outcome.
    #[default]
    FourKinds,
    /// Additionally count NA (empty set) as a fifth label.
    WithNa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub folds: usize,
    pub seed: u64,
    pub pooling: Pooling,
    /// Full-batch gradient steps per head.
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    /// Probe INNOCENT cases too (reported as their own group).
    pub include_innocent: bool,
    /// Sampling rounds of the frequency-random baseline.
    pub baseline_trials: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            seed: 0,
            pooling: Pooling::FourKinds,
            steps: 400,
            lr: 1.0,
            l2: 1e-4,
            include_innocent: false,
            baseline_trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub vector: Array1<f64>,
    pub target: ElementSet,
    pub charge: ChargeLabel,
    pub case_id: String,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub rows: Vec<ProbeRow>,
    pub folds: usize,
    /// Charges in first-seen order.
    pub charges: Vec<ChargeLabel>,
}

impl ProbeDataset {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.vector.len())
    }

    /// Case id to fold.
    pub fn case_folds(&self) -> BTreeMap<&str, usize> {
        self.rows.iter().map(|r| (r.case_id.as_str(), r.fold)).collect()
    }

    fn matrix(&self, rows: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), self.dim()));
        for (i, &r) in rows.iter().enumerate() {
            x.row_mut(i).assign(&self.rows[r].vector);
        }
        x
    }
}

fn charges_in_order(set: &AnnotatedCaseSet) -> Vec<ChargeLabel> {
    let mut seen = BTreeSet::new();
    set.iter()
        .map(|a| a.case.charge.clone())
        .filter(|c| seen.insert(c.clone()))
        .collect()
}

/// Charge-stratified case-level folds. Cases of each charge are shuffled and
/// dealt round-robin, continuing the rotation across charges so global fold
/// sizes also differ by at most one.
pub fn assign_folds(set: &AnnotatedCaseSet, folds: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("probing needs at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let mut next = 0;
    for charge in charges_in_order(set) {
        let mut ids: Vec<&str> = set
            .iter()
            .filter(|a| a.case.charge == charge)
            .map(|a| a.case.id.as_str())
            .collect();
        if ids.len() < folds {
            return Err(Error::Stratification {
                charge: charge.to_string(),
                cases: ids.len(),
                folds,
            });
        }
        ids.shuffle(&mut rng);
        for id in ids {
            out.insert(id.to_string(), next % folds);
            next += 1;
        }
    }
    Ok(out)
}

pub fn extract_probe_dataset(
    model: &dyn ChargeModel,
    set: &AnnotatedCaseSet,
    folds: usize,
    seed: u64,
) -> Result<ProbeDataset> {
    let assignment = assign_folds(set, folds, seed)?;
    let encoded: Vec<_> = set
        .cases()
        .par_iter()
        .map(|a| model.encode(&a.case))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (ann, out) in set.iter().zip(encoded) {
        let fold = assignment[&ann.case.id];
        for (i, target) in ann.labels.iter().enumerate() {
            rows.push(ProbeRow {
                vector: out.sentence_vectors.row(i).to_owned(),
                target: *target,
                charge: ann.case.charge.clone(),
                case_id: ann.case.id.clone(),
                fold,
            });
        }
    }
    Ok(ProbeDataset {
        rows,
        folds,
        charges: charges_in_order(set),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub weights: Array1<f64>,
    pub bias: f64,
    /// Set when every training row had the same class.
    pub constant: Option<bool>,
}

/// Four logistic heads on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub heads: Vec<ProbeHead>,
    pub threshold: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProbeModel {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    /// Head probabilities for each row of `x`, one column per element kind.
    pub fn probabilities(&self, x: &Array2<f64>) -> Array2<f64> {
        let z = self.standardize(x);
        let mut out = Array2::zeros((x.nrows(), self.heads.len()));
        for (k, head) in self.heads.iter().enumerate() {
            let col = match head.constant {
                Some(v) => Array1::from_elem(x.nrows(), if v { 1.0 } else { 0.0 }),
                None => z.dot(&head.weights).mapv(|s| sigmoid(s + head.bias)),
            };
            out.column_mut(k).assign(&col);
        }
        out
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<ElementSet> {
        self.probabilities(x)
            .rows()
            .into_iter()
            .map(|p| {
                ElementKind::ALL
                    .into_iter()
                    .filter(|k| p[k.index()] > self.threshold)
                    .fold(ElementSet::EMPTY, ElementSet::with)
            })
            .collect()
    }
}

/// Fits the four heads on every row outside `held_out`.
pub fn train_probe(dataset: &ProbeDataset, held_out: usize, config: &ProbeConfig) -> Result<ProbeModel> {
    if dataset.folds < 2 {
        return Err(Error::Config("probing needs at least 2 folds".into()));
    }
    let train: Vec<usize> = (0..dataset.rows.len())
        .filter(|&i| dataset.rows[i].fold != held_out)
        .collect();
    if train.is_empty() {
        return Err(Error::Config(format!("no training rows outside fold {held_out}")));
    }
    let x = dataset.matrix(&train);
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let scale = x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (&x - &mean) / &scale;
    let mut heads = Vec::with_capacity(4);
    for kind in ElementKind::ALL {
        let y: Array1<f64> = train
            .iter()
            .map(|&i| f64::from(u8::from(dataset.rows[i].target.contains(kind))))
            .collect();
        let positives = y.sum();
        if positives == 0.0 || positives == n {
            log::info!(
                "probe head {kind} (held-out fold {held_out}): all training rows {}, fitting constant",
                if positives == 0.0 { "negative" } else { "positive" }
            );
            heads.push(ProbeHead {
                weights: Array1::zeros(z.ncols()),
                bias: 0.0,
                constant: Some(positives == n),
            });
            continue;
        }
        let mut w = Array1::<f64>::zeros(z.ncols());
        let mut b = 0.0;
        for _ in 0..config.steps {
            let p = z.dot(&w).mapv(|s| sigmoid(s + b));
            let err = &p - &y;
            let gw = z.t().dot(&err) / n + &(&w * config.l2);
            let gb = err.sum() / n;
            w = w - &(gw * config.lr);
            b -= config.lr * gb;
        }
        heads.push(ProbeHead {
            weights: w,
            bias: b,
            constant: None,
        });
    }
    Ok(ProbeModel {
        mean,
        scale,
        heads,
        threshold: 0.5,
    })
}

/// Micro counts of one (charge, fold, element) cell. `element` is `None` for NA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountRow {
    pub charge: String,
    pub fold: usize,
    pub element: Option<ElementKind>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChargeProbe {
    pub charge: String,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub counts: Vec<CountRow>,
    pub per_charge: Vec<ChargeProbe>,
    /// Unweighted mean over charges.
    pub macro_avg: Prf,
}

impl ProbeReport {
    pub fn charge(&self, name: &str) -> Option<&Prf> {
        self.per_charge.iter().find(|c| c.charge == name).map(|c| &c.prf)
    }
}

fn cells(gold: ElementSet, pred: ElementSet, pooling: Pooling) -> Vec<(Option<ElementKind>, bool, bool)> {
    let mut out: Vec<_> = ElementKind::ALL
        .into_iter()
        .map(|k| (Some(k), gold.contains(k), pred.contains(k)))
        .collect();
    if pooling == Pooling::WithNa {
        out.push((None, gold.is_empty(), pred.is_empty()));
    }
    out
}

/// Builds a report from per-fold gold/pred pairs, grouped by charge.
fn summarize(
    charges: &[ChargeLabel],
    folds: usize,
    pairs: &[(usize, ChargeLabel, ElementSet, ElementSet)],
    pooling: Pooling,
) -> ProbeReport {
    let mut counts = Vec::new();
    let mut per_charge = Vec::new();
    for charge in charges {
        let mut fold_prf = Vec::new();
        for fold in 0..folds {
            let mut by_cell: BTreeMap<usize, MicroCounts> = BTreeMap::new();
            let mut any = false;
            for (f, c, gold, pred) in pairs {
                if *f != fold || c != charge {
                    continue;
                }
                any = true;
                for (i, (_, g, p)) in cells(*gold, *pred, pooling).into_iter().enumerate() {
                    by_cell.entry(i).or_default().record(g, p);
                }
            }
            if !any {
                continue;
            }
            let mut pooled = MicroCounts::default();
            let elements: Vec<Option<ElementKind>> =
                cells(ElementSet::EMPTY, ElementSet::EMPTY, pooling).into_iter().map(|c| c.0).collect();
            for (i, element) in elements.into_iter().enumerate() {
                let m = by_cell.get(&i).copied().unwrap_or_default();
                pooled.add(m);
                counts.push(CountRow {
                    charge: charge.to_string(),
                    fold,
                    element,
                    tp: m.tp,
                    fp: m.fp,
                    fn_: m.fn_,
                });
            }
            fold_prf.push(pooled.prf());
        }
        per_charge.push(ChargeProbe {
            charge: charge.to_string(),
            prf: Prf::mean(&fold_prf),
        });
    }
    let macro_avg = Prf::mean(&per_charge.iter().map(|c| c.prf).collect::<Vec<_>>());
    ProbeReport {
        counts,
        per_charge,
        macro_avg,
    }
}

fn probe_pool(set: &AnnotatedCaseSet, config: &ProbeConfig) -> Result<AnnotatedCaseSet> {
    let pool = if config.include_innocent {
        set.clone()
    } else {
        set.filter(|a| !a.case.charge.is_innocent())
    };
    if pool.is_empty() {
        return Err(Error::Validation("no annotated cases to probe".into()));
    }
    Ok(pool)
}

/// k-fold rotation of [`train_probe`]; per-charge micro P/R/F1 averaged over folds.
pub fn run_probing(model: &dyn ChargeModel, set: &AnnotatedCaseSet, config: &ProbeConfig) -> Result<ProbeReport> {
    let pool = probe_pool(set, config)?;
    let dataset = extract_probe_dataset(model, &pool, config.folds, config.seed)?;
    probe_dataset(&dataset, config)
}

/// Cross-validated probing of an already extracted dataset.
pub fn probe_dataset(dataset: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeReport> {
    let per_fold: Vec<Vec<(usize, ChargeLabel, ElementSet, ElementSet)>> = (0..dataset.folds)
        .into_par_iter()
        .map(|fold| {
            let probe = train_probe(dataset, fold, config)?;
            let held: Vec<usize> = (0..dataset.rows.len())
                .filter(|&i| dataset.rows[i].fold == fold)
                .collect();
            let preds = probe.predict(&dataset.matrix(&held));
            Ok(held
                .iter()
                .zip(preds)
                .map(|(&i, p)| (fold, dataset.rows[i].charge.clone(), dataset.rows[i].target, p))
                .collect())
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = per_fold.into_iter().flatten().collect();
    Ok(summarize(&dataset.charges, dataset.folds, &pairs, config.pooling))
}

/// Assigns every held-out sentence an element set sampled independently per
/// kind with that kind's frequency in the training folds; metrics averaged
/// over trials.
pub fn random_baseline(set: &AnnotatedCaseSet, config: &ProbeConfig) -> Result<ProbeReport> {
    let pool = probe_pool(set, config)?;
    let assignment = assign_folds(&pool, config.folds, config.seed)?;
    let freq: Vec<Vec<f64>> = (0..config.folds)
        .map(|fold| {
            let train: Vec<&ElementSet> = pool
                .iter()
                .filter(|a| assignment[&a.case.id] != fold)
                .flat_map(|a| a.labels.iter())
                .collect();
            ElementKind::ALL
                .into_iter()
                .map(|k| train.iter().filter(|l| l.contains(k)).count() as f64 / train.len().max(1) as f64)
                .collect()
        })
        .collect();
    let charges = charges_in_order(&pool);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let trials = config.baseline_trials.max(1);
    let mut trial_reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut pairs = Vec::new();
        for ann in &pool {
            let fold = assignment[&ann.case.id];
            for gold in &ann.labels {
                let pred = ElementKind::ALL
                    .into_iter()
                    .filter(|k| rng.gen::<f64>() < freq[fold][k.index()])
                    .fold(ElementSet::EMPTY, ElementSet::with);
                pairs.push((fold, ann.case.charge.clone(), *gold, pred));
            }
        }
        trial_reports.push(summarize(&charges, config.folds, &pairs, config.pooling));
    }
    let per_charge = charges
        .iter()
        .enumerate()
        .map(|(i, c)| ChargeProbe {
            charge: c.to_string(),
            prf: Prf::mean(&trial_reports.iter().map(|r| r.per_charge[i].prf).collect::<Vec<_>>()),
        })
        .collect::<Vec<_>>();
    let macro_avg = Prf::mean(&per_charge.iter().map(|c| c.prf).collect::<Vec<_>>());
    Ok(ProbeReport {
        counts: Vec::new(),
        per_charge,
        macro_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnnotatedCase, Case, Split};
    use ndarray::array;

    fn annotated(n: usize, labels: &[ElementSet]) -> AnnotatedCaseSet {
        let texts: Vec<String> = (0..labels.len()).map(|i| format!("w{i}")).collect();
        AnnotatedCaseSet::new(
            (0..n)
                .map(|i| {
                    let case =
                        Case::from_texts(format!("c{i}"), &texts, ChargeLabel::charge("x"), Split::Train).unwrap();
                    AnnotatedCase::new(case, labels.to_vec()).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn dataset(rows: Vec<(Array1<f64>, ElementSet)>, folds: usize) -> ProbeDataset {
        ProbeDataset {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (vector, target))| ProbeRow {
                    vector,
                    target,
                    charge: ChargeLabel::charge("x"),
                    case_id: format!("c{i}"),
                    fold: i % folds,
                })
                .collect(),
            folds,
            charges: vec![ChargeLabel::charge("x")],
        }
    }

    #[test]
    fn folds_are_case_level_and_balanced() {
        let c = ElementSet::from_kinds([ElementKind::Conduct]);
        let set = annotated(10, &[c, c, c]);
        let folds = assign_folds(&set, 5, 1).unwrap();
        let mut sizes = [0; 5];
        for f in folds.values() {
            sizes[*f] += 1;
        }
        assert_eq!(sizes, [2; 5]);
        assert_eq!(folds, assign_folds(&set, 5, 1).unwrap());
    }

    #[test]
    fn too_few_cases_for_folds() {
        let set = annotated(3, &[ElementSet::EMPTY]);
        assert!(matches!(assign_folds(&set, 5, 0), Err(Error::Stratification { cases: 3, .. })));
    }

    #[test]
    fn zero_vectors_give_majority_rule() {
        // Conduct in 3 of 4 rows, others never: majority predicts {Conduct} everywhere.
        let c = ElementSet::from_kinds([ElementKind::Conduct]);
        let rows = (0..40)
            .map(|i| (Array1::zeros(3), if (i / 2) % 4 == 0 { ElementSet::EMPTY } else { c }))
            .collect();
        let ds = dataset(rows, 2);
        let report = probe_dataset(&ds, &ProbeConfig { folds: 2, ..ProbeConfig::default() }).unwrap();
        // tp = 30, fp = 10, fn = 0 over both folds; each fold is identical in ratio.
        let prf = report.charge("x").unwrap();
        assert!((prf.precision - 0.75).abs() < 1e-12);
        assert!((prf.recall - 1.0).abs() < 1e-12);
        assert!((prf.f1 - 2.0 * 0.75 / 1.75).abs() < 1e-12);
    }

    #[test]
    fn half_probability_is_negative() {
        let probe = ProbeModel {
            mean: array![0.0],
            scale: array![1.0],
            heads: (0..4)
                .map(|_| ProbeHead {
                    weights: array![0.0],
                    bias: 0.0,
                    constant: None,
                })
                .collect(),
            threshold: 0.5,
        };
        assert_eq!(probe.predict(&array![[3.0]]), vec![ElementSet::EMPTY]);
    }

    #[test]
    fn decodable_vectors_probe_perfectly() {
        let rows = (0..60)
            .map(|i| {
                let kind = ElementKind::ALL[i % 4];
                let mut v = Array1::zeros(6);
                v[kind.index()] = 1.0;
                v[5] = (i as f64 * 0.37).sin();
                (v, ElementSet::from_kinds([kind]))
            })
            .collect();
        let report = probe_dataset(&dataset(rows, 3), &ProbeConfig { folds: 3, ..ProbeConfig::default() }).unwrap();
        assert_eq!(report.charge("x").unwrap().f1, 1.0);
    }

    #[test]
    fn degenerate_frequency_baseline_is_perfect() {
        let c = ElementSet::from_kinds([ElementKind::Conduct]);
        let report = random_baseline(&annotated(6, &[c, c]), &ProbeConfig::default()).unwrap();
        let prf = report.charge("x").unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn with_na_pooling_adds_a_cell() {
        let pairs = vec![(0, ChargeLabel::charge("x"), ElementSet::EMPTY, ElementSet::EMPTY)];
        let four = summarize(&[ChargeLabel::charge("x")], 1, &pairs, Pooling::FourKinds);
        let five = summarize(&[ChargeLabel::charge("x")], 1, &pairs, Pooling::WithNa);
        assert_eq!(four.counts.len(), 4);
        assert_eq!(five.counts.len(), 5);
        assert_eq!(four.per_charge[0].prf.f1, 0.0);
        assert_eq!(five.per_charge[0].prf.f1, 1.0);
    }
}
