use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::nets::{forward_batch, Architecture, Forward, Params};
use super::oracle;
use super::train::{EpochLog, TrainConfig};
use super::vocab::Vocab;
use super::{ChargeDistribution, ChargeModel, EncoderOutput};
use crate::corpus::{Case, ChargeLabel, ChargeSet, ElementKnowledge, LabelSet, SynthSpec};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Synthetic law-article and term targets for the TopJudge auxiliary heads,
/// indexed like the label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSpec {
    pub articles: Vec<usize>,
    pub terms: Vec<usize>,
    pub article_classes: usize,
    pub term_classes: usize,
}

impl AuxSpec {
    /// One article per label; terms in four coarse buckets, bucket 0 reserved
    /// for INNOCENT.
    pub fn for_labels(labels: &LabelSet) -> Self {
        let innocent = labels.innocent_index();
        AuxSpec {
            articles: (0..labels.len()).collect(),
            terms: (0..labels.len())
                .map(|i| if i == innocent { 0 } else { 1 + i % 3 })
                .collect(),
            article_classes: labels.len(),
            term_classes: 4,
        }
    }
}

/// Binary legal attributes with their per-charge values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub names: Vec<String>,
    pub assignments: BTreeMap<String, Vec<u8>>,
}

impl AttributeSpec {
    pub fn new(names: Vec<String>, assignments: BTreeMap<String, Vec<u8>>) -> Result<Self> {
        for (charge, values) in &assignments {
            if values.len() != names.len() {
                return Err(Error::Config(format!(
                    "charge `{charge}` assigns {} attributes, expected {}",
                    values.len(),
                    names.len()
                )));
            }
            if values.iter().any(|v| *v > 1) {
                return Err(Error::Config(format!("charge `{charge}` has a non-binary attribute")));
            }
        }
        Ok(AttributeSpec { names, assignments })
    }

    pub fn from_synth(spec: &SynthSpec) -> Result<Self> {
        let assignments = spec
            .charges
            .iter()
            .map(|t| {
                let values = spec
                    .attributes
                    .iter()
                    .map(|a| u8::from(t.attributes.contains(a)))
                    .collect();
                (t.name.clone(), values)
            })
            .collect();
        AttributeSpec::new(spec.attributes.clone(), assignments)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn covers(&self, charges: &ChargeSet) -> Result<()> {
        match charges.names().iter().find(|c| !self.assignments.contains_key(*c)) {
            Some(c) => Err(Error::Config(format!("attribute spec has no entry for charge `{c}`"))),
            None => Ok(()),
        }
    }

    /// Attribute targets for a label; INNOCENT has none.
    pub fn targets(&self, label: &ChargeLabel) -> Option<Vec<f64>> {
        match label {
            ChargeLabel::Innocent => None,
            ChargeLabel::Charge(c) => self
                .assignments
                .get(c)
                .map(|v| v.iter().map(|b| f64::from(*b)).collect()),
        }
    }
}

/// A frozen model: architecture, label space, vocabulary, parameters and the
/// configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub architecture: Architecture,
    pub labels: LabelSet,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub aux: AuxSpec,
    pub attributes: Option<AttributeSpec>,
    pub knowledge: Option<ElementKnowledge>,
    /// Adapter name for `external_adapter` bundles.
    pub adapter: Option<String>,
    pub params: Params,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    format_version: u32,
    architecture: Architecture,
    charges: Vec<String>,
    vocab: Vocab,
    config: TrainConfig,
    aux: AuxSpec,
    attributes: Option<AttributeSpec>,
    knowledge: Option<ElementKnowledge>,
    adapter: Option<String>,
    history: Vec<EpochLog>,
    parameters: BTreeMap<String, Tensor>,
}

impl ModelBundle {
    /// The rule model that convicts only when all four planted elements are present.
    pub fn oracle(labels: &LabelSet, knowledge: ElementKnowledge) -> Result<Self> {
        if let Some(c) = knowledge
            .charges
            .iter()
            .find(|c| labels.index_of(&ChargeLabel::charge(c.as_str())).is_none())
        {
            return Err(Error::Model(format!("oracle knows charge `{c}` outside the label set")));
        }
        Ok(ModelBundle {
            architecture: Architecture::FetOracle,
            labels: labels.clone(),
            vocab: Vocab::from_tokens(Vec::<String>::new()),
            config: TrainConfig {
                architecture: Architecture::FetOracle,
                ..TrainConfig::default()
            },
            aux: AuxSpec::for_labels(labels),
            attributes: None,
            knowledge: Some(knowledge),
            adapter: None,
            params: Params::new(),
            history: Vec::new(),
        })
    }

    /// Input-ignoring predictor that always puts its mass on `charge`.
    /// Backed by the built-in `constant` adapter.
    pub fn constant(labels: &LabelSet, charge: &ChargeLabel) -> Result<Self> {
        let index = labels
            .index_of(charge)
            .ok_or_else(|| Error::Model(format!("`{charge}` is not in the label set")))?;
        let mut bias = Array2::zeros((1, labels.len()));
        bias[[0, index]] = 30.0;
        let mut params = Params::new();
        params.insert("head.w".into(), Array2::zeros((super::external::CONSTANT_WIDTH, labels.len())));
        params.insert("head.b".into(), bias);
        Ok(ModelBundle {
            architecture: Architecture::ExternalAdapter,
            labels: labels.clone(),
            vocab: Vocab::from_tokens(Vec::<String>::new()),
            config: TrainConfig {
                architecture: Architecture::ExternalAdapter,
                ..TrainConfig::default()
            },
            aux: AuxSpec::for_labels(labels),
            attributes: None,
            knowledge: None,
            adapter: Some("constant".into()),
            params,
            history: Vec::new(),
        })
    }

    fn charge_head(&self) -> Option<&str> {
        match self.architecture {
            Architecture::AttnBilstm | Architecture::FewshotAttr => Some("charge.b"),
            Architecture::TopjudgeCnn => Some("charge.out.b"),
            Architecture::ExternalAdapter => Some("head.b"),
            Architecture::FetOracle => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(head) = self.charge_head() {
            let b = self
                .params
                .get(head)
                .ok_or_else(|| Error::Model(format!("bundle is missing its charge head `{head}`")))?;
            if b.ncols() != self.labels.len() {
                return Err(Error::Model(format!(
                    "charge head has {} outputs for {} labels",
                    b.ncols(),
                    self.labels.len()
                )));
            }
        }
        if self.architecture == Architecture::FetOracle && self.knowledge.is_none() {
            return Err(Error::Model("fet_oracle bundle carries no element knowledge".into()));
        }
        if self.architecture == Architecture::ExternalAdapter && self.adapter.is_none() {
            return Err(Error::Model("external_adapter bundle names no adapter".into()));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = BundleFile {
            format_version: BUNDLE_FORMAT_VERSION,
            architecture: self.architecture,
            charges: self.labels.charge_set().names().to_vec(),
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            aux: self.aux.clone(),
            attributes: self.attributes.clone(),
            knowledge: self.knowledge.clone(),
            adapter: self.adapter.clone(),
            history: self.history.clone(),
            parameters: self
                .params
                .iter()
                .map(|(k, v)| {
                    let (r, c) = v.dim();
                    (
                        k.clone(),
                        Tensor {
                            shape: [r, c],
                            data: v.iter().copied().collect(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Model(format!("cannot serialize bundle: {e}")))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: BundleFile =
            serde_json::from_str(text).map_err(|e| Error::Model(format!("malformed bundle: {e}")))?;
        if file.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported bundle format version {} (expected {BUNDLE_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let charges = ChargeSet::new(file.charges)?;
        let mut params = Params::new();
        for (name, t) in file.parameters {
            let array = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|e| Error::Model(format!("parameter `{name}`: {e}")))?;
            params.insert(name, array);
        }
        let bundle = ModelBundle {
            architecture: file.architecture,
            labels: LabelSet::new(&charges),
            vocab: file.vocab,
            config: file.config,
            aux: file.aux,
            attributes: file.attributes,
            knowledge: file.knowledge,
            adapter: file.adapter,
            params,
            history: file.history,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json_string()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelBundle::from_json_str(&text)
    }

    fn native(&self) -> Result<()> {
        if self.architecture.is_trainable() {
            Ok(())
        } else {
            Err(Error::Model(format!(
                "`{}` bundles have no native network",
                self.architecture
            )))
        }
    }

    /// Raw forward pass of a trainable bundle over several cases at once.
    pub fn forward(&self, cases: &[&Case]) -> Result<Vec<Forward>> {
        self.native()?;
        let ids: Vec<Vec<usize>> = cases.iter().map(|c| self.vocab.encode_case(c)).collect();
        forward_batch(self.architecture, &self.config.dims, &self.params, &ids)
    }

    /// Encodes several cases in one padded batch.
    pub fn encode_batch(&self, cases: &[&Case]) -> Result<Vec<EncoderOutput>> {
        match self.architecture {
            Architecture::FetOracle => cases.iter().map(|c| self.encode(c)).collect(),
            _ => self
                .forward(cases)?
                .into_iter()
                .zip(cases)
                .map(|(f, c)| EncoderOutput::from_tokens(f.token_vectors, f.fact, &c.sentence_spans()))
                .collect(),
        }
    }

    fn external_error(&self) -> Error {
        Error::Model(format!(
            "bundle uses external adapter `{}`; load it through an adapter registry",
            self.adapter.as_deref().unwrap_or("?")
        ))
    }
}

impl ChargeModel for ModelBundle {
    fn name(&self) -> String {
        match &self.adapter {
            Some(a) => format!("{}:{a}", self.architecture),
            None => self.architecture.to_string(),
        }
    }

    fn labels(&self) -> &LabelSet {
        &self.labels
    }

    fn encode(&self, case: &Case) -> Result<EncoderOutput> {
        match self.architecture {
            Architecture::FetOracle => oracle::encode(self.knowledge.as_ref().expect("validated"), case),
            Architecture::ExternalAdapter => Err(self.external_error()),
            _ => Ok(self.encode_batch(&[case])?.remove(0)),
        }
    }

    fn predict(&self, case: &Case) -> Result<ChargeDistribution> {
        match self.architecture {
            Architecture::FetOracle => {
                oracle::predict(self.knowledge.as_ref().expect("validated"), &self.labels, case)
            }
            Architecture::ExternalAdapter => Err(self.external_error()),
            _ => {
                let f = self.forward(&[case])?.remove(0);
                ChargeDistribution::from_logits(&self.labels, f.charge_logits.as_slice().expect("contiguous"))
            }
        }
    }
}
