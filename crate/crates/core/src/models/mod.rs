//! Charge classifiers behind one encoder/predictor contract.

mod bundle;
mod external;
mod gradcheck;
mod nets;
mod oracle;
pub mod tape;
mod train;
mod vocab;

pub use bundle::{AttributeSpec, AuxSpec, ModelBundle, BUNDLE_FORMAT_VERSION};
pub use external::{AdapterRegistry, ConstantAdapter, EncoderAdapter, ExternalModel, NativeAdapter};
pub use gradcheck::{grad_check, zero_loss_gradient_norm};
pub use nets::{forward_batch, forward_tape, init_params, load_params, Architecture, Dims, Forward, HeadSizes, Params};
pub use oracle::oracle_scores;
pub use train::{evaluate, train, AuxTask, ChargeMetrics, EpochLog, TrainConfig, TrainContext};
pub use vocab::{build_vocab, Vocab, PAD, UNK};

use ndarray::{Array1, Array2, Axis};

use crate::corpus::{Case, ChargeLabel, LabelSet};
use crate::error::{Error, Result};

/// Probability per label of a [`LabelSet`], in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeDistribution {
    labels: Vec<ChargeLabel>,
    probs: Vec<f64>,
}

impl ChargeDistribution {
    pub fn new(labels: &LabelSet, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Model(format!(
                "distribution has {} entries for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Model("distribution has a negative or non-finite entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Model(format!("distribution sums to {sum}")));
        }
        Ok(ChargeDistribution {
            labels: labels.labels().to_vec(),
            probs,
        })
    }

    pub fn from_logits(labels: &LabelSet, logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Model("non-finite logit".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        ChargeDistribution::new(labels, exp.into_iter().map(|e| e / sum).collect())
    }

    pub fn one_hot(labels: &LabelSet, index: usize) -> Self {
        let mut probs = vec![0.0; labels.len()];
        probs[index] = 1.0;
        ChargeDistribution {
            labels: labels.labels().to_vec(),
            probs,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[ChargeLabel] {
        &self.labels
    }

    pub fn prob(&self, label: &ChargeLabel) -> f64 {
        self.labels
            .iter()
            .position(|l| l == label)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn innocent(&self) -> f64 {
        self.prob(&ChargeLabel::Innocent)
    }

    /// Index of the most probable label; ties go to the earlier label.
    pub fn argmax_index(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmax(&self) -> &ChargeLabel {
        &self.labels[self.argmax_index()]
    }
}

/// Frozen encoder output for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub token_vectors: Array2<f64>,
    pub fact: Array1<f64>,
    pub sentence_vectors: Array2<f64>,
}

impl EncoderOutput {
    /// Mean-pools `token_vectors` over each half-open sentence span.
    pub fn from_tokens(
        token_vectors: Array2<f64>,
        fact: Array1<f64>,
        spans: &[(usize, usize)],
    ) -> Result<Self> {
        let width = token_vectors.ncols();
        let mut sentence_vectors = Array2::zeros((spans.len(), width));
        for (i, &(start, end)) in spans.iter().enumerate() {
            if start >= end || end > token_vectors.nrows() {
                return Err(Error::Model(format!("sentence span {start}..{end} is invalid")));
            }
            let mean = token_vectors
                .slice(ndarray::s![start..end, ..])
                .mean_axis(Axis(0))
                .expect("non-empty span");
            sentence_vectors.row_mut(i).assign(&mean);
        }
        Ok(EncoderOutput {
            token_vectors,
            fact,
            sentence_vectors,
        })
    }

    pub fn width(&self) -> usize {
        self.token_vectors.ncols()
    }

    /// Shape and finiteness check against the case it claims to encode.
    pub fn check(&self, case: &Case) -> std::result::Result<(), String> {
        let d = self.token_vectors.ncols();
        if self.token_vectors.nrows() != case.token_count() {
            return Err(format!(
                "{} token vectors for {} tokens",
                self.token_vectors.nrows(),
                case.token_count()
            ));
        }
        if self.sentence_vectors.nrows() != case.sentences.len() {
            return Err(format!(
                "{} sentence vectors for {} sentences",
                self.sentence_vectors.nrows(),
                case.sentences.len()
            ));
        }
        if self.sentence_vectors.ncols() != d || self.fact.len() != d {
            return Err(format!(
                "inconsistent widths: tokens {d}, sentences {}, fact {}",
                self.sentence_vectors.ncols(),
                self.fact.len()
            ));
        }
        let finite = self.token_vectors.iter().all(|v| v.is_finite())
            && self.sentence_vectors.iter().all(|v| v.is_finite())
            && self.fact.iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite entries".into());
        }
        Ok(())
    }
}

/// Anything the audits can probe and query.
pub trait ChargeModel: Send + Sync {
    /// Short tag used in reports.
    fn name(&self) -> String;
    fn labels(&self) -> &LabelSet;
    fn encode(&self, case: &Case) -> Result<EncoderOutput>;
    fn predict(&self, case: &Case) -> Result<ChargeDistribution>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ChargeSet;
    use ndarray::array;

    #[test]
    fn mean_pooling_per_sentence() {
        let out = EncoderOutput::from_tokens(
            array![[1.0, 3.0], [3.0, 5.0], [7.0, 7.0]],
            array![0.0, 0.0],
            &[(0, 2), (2, 3)],
        )
        .unwrap();
        assert_eq!(out.sentence_vectors, array![[2.0, 4.0], [7.0, 7.0]]);
    }

    #[test]
    fn distribution_from_logits_is_normalized() {
        let labels = LabelSet::new(&ChargeSet::new(["a", "b"]).unwrap());
        let d = ChargeDistribution::from_logits(&labels, &[1000.0, -3.0, 2.5]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d.argmax().as_str(), "a");
        assert!(ChargeDistribution::new(&labels, vec![0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_first() {
        let labels = LabelSet::new(&ChargeSet::new(["a", "b"]).unwrap());
        let d = ChargeDistribution::from_logits(&labels, &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(d.argmax_index(), 1);
    }
}
