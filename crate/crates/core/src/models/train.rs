use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{AttributeSpec, AuxSpec, ModelBundle};
use super::nets::{forward_tape, init_params, load_params, Architecture, Dims, HeadSizes, Params};
use super::tape::{Tape, Var};
use super::vocab::{build_vocab, UNK};
use super::ChargeModel;
use crate::corpus::{CaseSet, ChargeLabel, ElementKnowledge, LabelSet};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_prf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    Article,
    Term,
    Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub dims: Dims,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// `None` picks the architecture's own heads (article and term for
    /// topjudge_cnn, attributes for fewshot_attr).
    pub aux_tasks: Option<Vec<AuxTask>>,
    /// Weight of each article/term cross-entropy.
    pub aux_weight: f64,
    /// Weight of each attribute binary cross-entropy.
    pub attribute_weight: f64,
    pub min_count: usize,
    /// Probability of replacing a training token with `<unk>`.
    pub unk_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::AttnBilstm,
            dims: Dims::default(),
            epochs: 12,
            batch_size: 8,
            lr: 0.5,
            clip: 5.0,
            seed: 0,
            aux_tasks: None,
            aux_weight: 1.0,
            attribute_weight: 1.0,
            min_count: 1,
            unk_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn tasks(&self) -> Vec<AuxTask> {
        self.aux_tasks.clone().unwrap_or_else(|| match self.architecture {
            Architecture::TopjudgeCnn => vec![AuxTask::Article, AuxTask::Term],
            Architecture::FewshotAttr => vec![AuxTask::Attributes],
            _ => Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.clip.is_finite() && self.clip >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive and clip non-negative, got lr {} clip {}",
                self.lr, self.clip
            )));
        }
        if self.aux_weight < 0.0 || self.attribute_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.unk_rate) {
            return Err(Error::Config(format!("unk_rate must lie in [0, 1), got {}", self.unk_rate)));
        }
        for task in self.tasks() {
            let ok = match task {
                AuxTask::Article | AuxTask::Term => self.architecture == Architecture::TopjudgeCnn,
                AuxTask::Attributes => self.architecture == Architecture::FewshotAttr,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "auxiliary task {task:?} is not available for `{}`",
                    self.architecture
                )));
            }
        }
        Ok(())
    }
}

/// Inputs to training that are not hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub labels: LabelSet,
    pub attributes: Option<AttributeSpec>,
    /// Required by `fet_oracle`.
    pub knowledge: Option<ElementKnowledge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Targets {
    pub label: usize,
    pub article: Option<usize>,
    pub term: Option<usize>,
    pub attributes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Weights {
    pub aux: f64,
    pub attribute: f64,
}

pub(crate) fn loss_tape(
    arch: Architecture,
    dims: &Dims,
    tape: &mut Tape,
    params: &Params,
    ids: &[usize],
    targets: &Targets,
    weights: Weights,
) -> Result<(Var, super::nets::ParamVars)> {
    let vars = load_params(tape, params);
    let heads = forward_tape(arch, dims, tape, &vars, ids)?;
    let mut terms = vec![(tape.softmax_ce(heads.charge, targets.label), 1.0)];
    if let (Some(h), Some(t)) = (heads.article, targets.article) {
        terms.push((tape.softmax_ce(h, t), weights.aux));
    }
    if let (Some(h), Some(t)) = (heads.term, targets.term) {
        terms.push((tape.softmax_ce(h, t), weights.aux));
    }
    if let (Some(h), Some(t)) = (heads.attributes, &targets.attributes) {
        let w = vec![weights.attribute; t.len()];
        terms.push((tape.sigmoid_bce(h, t, &w), 1.0));
    }
    Ok((tape.weighted_sum(&terms), vars))
}

/// Loss of one example and its gradient for every parameter.
pub(crate) fn loss_and_grads(
    arch: Architecture,
    dims: &Dims,
    params: &Params,
    ids: &[usize],
    targets: &Targets,
    weights: Weights,
) -> Result<(f64, Params)> {
    let mut tape = Tape::new();
    let (loss, vars) = loss_tape(arch, dims, &mut tape, params, ids, targets, weights)?;
    let mut grads = tape.backward(loss);
    let out = vars
        .into_iter()
        .map(|(name, v)| {
            let g = grads[v.index()]
                .take()
                .unwrap_or_else(|| ndarray::Array2::zeros(params[&name].dim()));
            (name, g)
        })
        .collect();
    Ok((tape.scalar(loss), out))
}

fn targets_for(
    label: &ChargeLabel,
    labels: &LabelSet,
    aux: &AuxSpec,
    attributes: Option<&AttributeSpec>,
    tasks: &[AuxTask],
) -> Result<Targets> {
    let index = labels
        .index_of(label)
        .ok_or_else(|| Error::Validation(format!("label `{label}` is outside the label set")))?;
    Ok(Targets {
        label: index,
        article: tasks.contains(&AuxTask::Article).then(|| aux.articles[index]),
        term: tasks.contains(&AuxTask::Term).then(|| aux.terms[index]),
        attributes: if tasks.contains(&AuxTask::Attributes) {
            attributes.and_then(|a| a.targets(label))
        } else {
            None
        },
    })
}

fn valid_accuracy(bundle: &ModelBundle, cases: &CaseSet) -> Result<f64> {
    let mut correct = 0;
    for case in cases {
        if bundle.predict(case)?.argmax() == &case.charge {
            correct += 1;
        }
    }
    Ok(correct as f64 / cases.len() as f64)
}

/// Mini-batch gradient descent with global-norm clipping. Returns the
/// parameters of the epoch with the best validation accuracy (earliest on ties).
pub fn train(
    trainset: &CaseSet,
    validset: &CaseSet,
    config: &TrainConfig,
    ctx: &TrainContext,
) -> Result<ModelBundle> {
    if trainset.is_empty() || validset.is_empty() {
        return Err(Error::Validation("training and validation sets must be non-empty".into()));
    }
    let charges = ctx.labels.charge_set();
    trainset.validate_charges(&charges)?;
    validset.validate_charges(&charges)?;
    match config.architecture {
        Architecture::FetOracle => {
            let knowledge = ctx
                .knowledge
                .clone()
                .ok_or_else(|| Error::Config("fet_oracle needs element knowledge".into()))?;
            return ModelBundle::oracle(&ctx.labels, knowledge);
        }
        Architecture::ExternalAdapter => {
            return Err(Error::Config("external adapters are inference-only".into()));
        }
        _ => {}
    }
    config.validate()?;
    let tasks = config.tasks();
    let attributes = if tasks.contains(&AuxTask::Attributes) {
        let a = ctx
            .attributes
            .clone()
            .ok_or_else(|| Error::Config("attribute loss requested without an attribute spec".into()))?;
        a.covers(&charges)?;
        Some(a)
    } else {
        ctx.attributes.clone()
    };
    let aux = AuxSpec::for_labels(&ctx.labels);
    let vocab = build_vocab(trainset, config.min_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let heads = HeadSizes {
        labels: ctx.labels.len(),
        articles: aux.article_classes,
        terms: aux.term_classes,
        attributes: attributes.as_ref().map_or(0, AttributeSpec::len),
    };
    let params = init_params(config.architecture, &config.dims, vocab.len(), heads, &mut rng)?;
    let examples: Vec<(Vec<usize>, Targets)> = trainset
        .iter()
        .map(|c| {
            Ok((
                vocab.encode_case(c),
                targets_for(&c.charge, &ctx.labels, &aux, attributes.as_ref(), &tasks)?,
            ))
        })
        .collect::<Result<_>>()?;
    let weights = Weights {
        aux: config.aux_weight,
        attribute: config.attribute_weight,
    };

    let mut bundle = ModelBundle {
        architecture: config.architecture,
        labels: ctx.labels.clone(),
        vocab,
        config: config.clone(),
        aux,
        attributes,
        knowledge: None,
        adapter: None,
        params,
        history: Vec::new(),
    };
    let mut best: Option<(f64, Params)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut sum: Option<Params> = None;
            for &i in batch {
                let (ids, targets) = &examples[i];
                let dropped: Vec<usize>;
                let ids = if config.unk_rate > 0.0 {
                    dropped = ids
                        .iter()
                        .map(|&id| if rng.gen_bool(config.unk_rate) { UNK } else { id })
                        .collect();
                    &dropped
                } else {
                    ids
                };
                let (loss, grads) =
                    loss_and_grads(config.architecture, &config.dims, &bundle.params, ids, targets, weights)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            *acc.get_mut(&name).expect("same parameter set") += &g;
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            let norm = grads
                .values()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
                * scale;
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, loss: norm });
            }
            let clip = if config.clip > 0.0 && norm > config.clip {
                config.clip / norm
            } else {
                1.0
            };
            for (name, g) in grads.iter_mut() {
                *g *= scale * clip * config.lr;
                *bundle.params.get_mut(name).expect("same parameter set") -= &*g;
            }
        }
        let train_loss = total / examples.len() as f64;
        let acc = valid_accuracy(&bundle, validset)?;
        log::info!(
            "{} epoch {epoch}: loss {train_loss:.4}, valid accuracy {acc:.4}",
            config.architecture
        );
        bundle.history.push(EpochLog {
            epoch,
            train_loss,
            valid_accuracy: acc,
        });
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, bundle.params.clone()));
        }
    }
    bundle.params = best.expect("at least one epoch").1;
    Ok(bundle)
}

/// Accuracy and macro P/R/F1 over the labels present in the gold data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn evaluate(model: &dyn ChargeModel, cases: &CaseSet) -> Result<ChargeMetrics> {
    if cases.is_empty() {
        return Err(Error::Metric("cannot evaluate on an empty case set".into()));
    }
    let gold: Vec<ChargeLabel> = cases.iter().map(|c| c.charge.clone()).collect();
    let pred: Vec<ChargeLabel> = cases
        .iter()
        .map(|c| Ok(model.predict(c)?.argmax().clone()))
        .collect::<Result<_>>()?;
    let macro_ = macro_prf(&gold, &pred, model.labels().labels())?;
    Ok(ChargeMetrics {
        accuracy: accuracy(&gold, &pred)?,
        precision: macro_.precision,
        recall: macro_.recall,
        f1: macro_.f1,
    })
}
