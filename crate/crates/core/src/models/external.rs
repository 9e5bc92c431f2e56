//! Adapter slot for encoders implemented outside this crate.
//!
//! Adapters are inference-only. Prediction goes through an optional linear
//! head over the fact vector, or through logits the adapter supplies itself.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::bundle::ModelBundle;
use super::nets::Architecture;
use super::{ChargeDistribution, ChargeModel, EncoderOutput};
use crate::corpus::{Case, LabelSet};
use crate::error::{Error, Result};

pub(crate) const CONSTANT_WIDTH: usize = 4;

pub trait EncoderAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, case: &Case) -> Result<EncoderOutput>;

    /// Charge logits in label order, for adapters that carry their own classifier.
    fn logits(&self, _case: &Case, _output: &EncoderOutput) -> Option<Vec<f64>> {
        None
    }
}

/// Maps every token to the same vector.
#[derive(Debug, Clone)]
pub struct ConstantAdapter {
    pub value: Vec<f64>,
}

impl Default for ConstantAdapter {
    fn default() -> Self {
        ConstantAdapter {
            value: vec![0.0; CONSTANT_WIDTH],
        }
    }
}

impl EncoderAdapter for ConstantAdapter {
    fn name(&self) -> &str {
        "constant"
    }

    fn encode(&self, case: &Case) -> Result<EncoderOutput> {
        let n = case.token_count();
        let d = self.value.len();
        let tokens = Array2::from_shape_fn((n, d), |(_, j)| self.value[j]);
        EncoderOutput::from_tokens(tokens, Array1::from(self.value.clone()), &case.sentence_spans())
    }
}

/// Exposes a native bundle's encoder (and classifier) through the adapter interface.
#[derive(Debug, Clone)]
pub struct NativeAdapter {
    name: String,
    bundle: ModelBundle,
}

impl NativeAdapter {
    pub fn new(name: impl Into<String>, bundle: ModelBundle) -> Self {
        NativeAdapter {
            name: name.into(),
            bundle,
        }
    }
}

impl EncoderAdapter for NativeAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode(&self, case: &Case) -> Result<EncoderOutput> {
        self.bundle.encode(case)
    }

    fn logits(&self, case: &Case, _output: &EncoderOutput) -> Option<Vec<f64>> {
        let d = self.bundle.predict(case).ok()?;
        Some(d.probs().iter().map(|p| p.max(1e-300).ln()).collect())
    }
}

/// An adapter plus the label space and optional linear head it predicts with.
#[derive(Clone)]
pub struct ExternalModel {
    adapter: Arc<dyn EncoderAdapter>,
    labels: LabelSet,
    head: Option<(Array2<f64>, Array1<f64>)>,
}

impl std::fmt::Debug for ExternalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalModel")
            .field("adapter", &self.adapter.name())
            .field("labels", &self.labels)
            .field("head", &self.head.is_some())
            .finish()
    }
}

impl ExternalModel {
    pub fn new(
        adapter: Arc<dyn EncoderAdapter>,
        labels: LabelSet,
        head: Option<(Array2<f64>, Array1<f64>)>,
    ) -> Result<Self> {
        if let Some((w, b)) = &head {
            if w.ncols() != labels.len() || b.len() != labels.len() {
                return Err(Error::Model(format!(
                    "adapter head has {} outputs for {} labels",
                    w.ncols(),
                    labels.len()
                )));
            }
        }
        Ok(ExternalModel { adapter, labels, head })
    }

    fn contract(&self, message: String) -> Error {
        Error::Contract {
            adapter: self.adapter.name().to_string(),
            message,
        }
    }
}

impl ChargeModel for ExternalModel {
    fn name(&self) -> String {
        format!("{}:{}", Architecture::ExternalAdapter, self.adapter.name())
    }

    fn labels(&self) -> &LabelSet {
        &self.labels
    }

    fn encode(&self, case: &Case) -> Result<EncoderOutput> {
        let out = self.adapter.encode(case)?;
        out.check(case).map_err(|m| self.contract(m))?;
        Ok(out)
    }

    fn predict(&self, case: &Case) -> Result<ChargeDistribution> {
        let out = self.encode(case)?;
        let logits: Vec<f64> = match &self.head {
            Some((w, b)) => {
                if w.nrows() != out.fact.len() {
                    return Err(self.contract(format!(
                        "fact vector has width {}, head expects {}",
                        out.fact.len(),
                        w.nrows()
                    )));
                }
                (out.fact.dot(w) + b).to_vec()
            }
            None => self.adapter.logits(case, &out).ok_or_else(|| {
                Error::Model(format!("adapter `{}` has no classifier head", self.adapter.name()))
            })?,
        };
        if logits.len() != self.labels.len() || logits.iter().any(|z| !z.is_finite()) {
            return Err(self.contract(format!(
                "adapter produced {} logits (finite: {}) for {} labels",
                logits.len(),
                logits.iter().all(|z| z.is_finite()),
                self.labels.len()
            )));
        }
        ChargeDistribution::from_logits(&self.labels, &logits)
    }
}

/// Named adapters available to `external_adapter` bundles.
#[derive(Clone)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, Arc<dyn EncoderAdapter>>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut r = AdapterRegistry {
            adapters: BTreeMap::new(),
        };
        r.register(Arc::new(ConstantAdapter::default()))
            .expect("fresh registry");
        r
    }
}

impl AdapterRegistry {
    /// Registers an adapter and returns its architecture tag.
    pub fn register(&mut self, adapter: Arc<dyn EncoderAdapter>) -> Result<String> {
        let name = adapter.name().to_string();
        if name.is_empty() || self.adapters.contains_key(&name) {
            return Err(Error::Config(format!("adapter name `{name}` is empty or taken")));
        }
        self.adapters.insert(name.clone(), adapter);
        Ok(format!("{}:{name}", Architecture::ExternalAdapter))
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn EncoderAdapter>> {
        self.adapters.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.adapters.keys().map(String::as_str).collect()
    }

    /// Turns any bundle into a queryable model, resolving adapters by name.
    pub fn instantiate(&self, bundle: ModelBundle) -> Result<Arc<dyn ChargeModel>> {
        if bundle.architecture != Architecture::ExternalAdapter {
            return Ok(Arc::new(bundle));
        }
        let name = bundle.adapter.clone().unwrap_or_default();
        let adapter = self.get(&name).ok_or_else(|| {
            Error::Config(format!(
                "unknown adapter `{name}` (registered: {})",
                self.names().join(", ")
            ))
        })?;
        let head = match (bundle.params.get("head.w"), bundle.params.get("head.b")) {
            (Some(w), Some(b)) => Some((w.clone(), b.row(0).to_owned())),
            _ => None,
        };
        Ok(Arc::new(ExternalModel::new(adapter, bundle.labels, head)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChargeLabel, ChargeSet, Split};

    struct NanAdapter;

    impl EncoderAdapter for NanAdapter {
        fn name(&self) -> &str {
            "nan"
        }

        fn encode(&self, case: &Case) -> Result<EncoderOutput> {
            let n = case.token_count();
            EncoderOutput::from_tokens(
                Array2::from_elem((n, 2), f64::NAN),
                Array1::zeros(2),
                &case.sentence_spans(),
            )
        }
    }

    fn case() -> Case {
        Case::from_texts("c", &["a b", "c"], ChargeLabel::charge("x"), Split::Test).unwrap()
    }

    #[test]
    fn nan_output_is_a_contract_error() {
        let labels = LabelSet::new(&ChargeSet::new(["x"]).unwrap());
        let m = ExternalModel::new(Arc::new(NanAdapter), labels, None).unwrap();
        assert!(matches!(m.encode(&case()), Err(Error::Contract { .. })));
    }

    #[test]
    fn constant_bundle_predicts_its_charge() {
        let labels = LabelSet::new(&ChargeSet::new(["x", "y"]).unwrap());
        let bundle = ModelBundle::constant(&labels, &ChargeLabel::charge("y")).unwrap();
        let model = AdapterRegistry::default().instantiate(bundle).unwrap();
        assert_eq!(model.predict(&case()).unwrap().argmax().as_str(), "y");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut r = AdapterRegistry::default();
        assert!(r.register(Arc::new(ConstantAdapter::default())).is_err());
        assert_eq!(r.register(Arc::new(NanAdapter)).unwrap(), "external_adapter:nan");
    }
}
