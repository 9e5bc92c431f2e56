//! Planted-signal corpus generator.
//!
//! Every charge is assembled from four named element pools. An element pool
//! declares a list of *concepts*, each a set of alternative marker tokens, and
//! a list of phrases; every phrase must mention at least one marker of every
//! concept of its pool. Marker tokens belong to exactly one element kind and
//! never occur in filler text, so per-sentence element labels are exact by
//! construction and can be recovered from the text by [`ElementKnowledge`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apportion, merge_innocent, AnnotatedCase, AnnotatedCaseSet, Case, CaseSet, ChargeLabel,
    ChargeSet, ElementKind, ElementSet, Sentence, Source, SplitRatio, Split, INNOCENT,
};
use crate::error::{Error, Result};
use crate::perturb::Anchor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementDef {
    pub kind: ElementKind,
    /// Conjunction of concepts; each concept is a disjunction of marker tokens.
    pub concepts: Vec<Vec<String>>,
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeTemplate {
    pub name: String,
    pub subject: Option<String>,
    pub mental_state: Option<String>,
    pub conduct: Option<String>,
    pub object: Option<String>,
    /// Names of the binary attributes that hold for this charge.
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl ChargeTemplate {
    fn pool(&self, kind: ElementKind) -> Option<&str> {
        match kind {
            ElementKind::Subject => self.subject.as_deref(),
            ElementKind::MentalState => self.mental_state.as_deref(),
            ElementKind::Conduct => self.conduct.as_deref(),
            ElementKind::Object => self.object.as_deref(),
        }
    }
}

/// A confusing charge pair and the two circumstances that turn `source` facts
/// into `target` facts: one that co-occurs with `target` in generated text and
/// one built only from markers the generator never emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionDef {
    pub source: String,
    pub target: String,
    pub knowledge: String,
    pub common: String,
    pub uncommon: String,
    #[serde(default)]
    pub anchor: Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Master seed; generation refuses to run without one.
    #[serde(default)]
    pub seed: Option<u64>,
    pub cases_per_charge: usize,
    #[serde(default)]
    pub innocent_fraction: f64,
    /// Per-sentence probability of inserting one filler token.
    #[serde(default)]
    pub noise_rate: f64,
    /// Per-case probability of joining two element phrases into one sentence.
    #[serde(default)]
    pub multi_label_rate: f64,
    #[serde(default = "default_fillers")]
    pub fillers: [usize; 2],
    #[serde(default)]
    pub split: SplitRatio,
    pub filler: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub elements: BTreeMap<String, ElementDef>,
    pub charges: Vec<ChargeTemplate>,
    #[serde(default)]
    pub confusions: Vec<ConfusionDef>,
}

fn default_fillers() -> [usize; 2] {
    [1, 3]
}

/// What a perfect element extractor knows: per charge, the concepts each of
/// its four elements requires, and the element kind of every marker token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementKnowledge {
    pub charges: Vec<String>,
    pub requirements: Vec<[Vec<BTreeSet<String>>; 4]>,
    pub markers: BTreeMap<String, ElementKind>,
}

impl ElementKnowledge {
    pub fn marker_kind(&self, token: &str) -> Option<ElementKind> {
        self.markers.get(token).copied()
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Spec(format!("invalid spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("synth spec serializes")
    }

    pub fn charge_set(&self) -> Result<ChargeSet> {
        ChargeSet::new(self.charges.iter().map(|c| c.name.clone()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn element(&self, template: &ChargeTemplate, kind: ElementKind) -> Result<&ElementDef> {
        let name = template.pool(kind).ok_or_else(|| {
            Error::Spec(format!(
                "charge `{}` has no {} pool",
                template.name,
                kind.as_str()
            ))
        })?;
        let def = self.elements.get(name).ok_or_else(|| {
            Error::Spec(format!(
                "charge `{}` references unknown element pool `{name}`",
                template.name
            ))
        })?;
        if def.kind != kind {
            return Err(Error::Spec(format!(
                "pool `{name}` is a {} pool but charge `{}` uses it as {}",
                def.kind,
                template.name,
                kind.as_str()
            )));
        }
        Ok(def)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases_per_charge == 0 {
            return Err(Error::Spec("cases_per_charge must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.innocent_fraction) {
            return Err(Error::Spec("innocent_fraction must lie in [0, 1)".into()));
        }
        for (name, p) in [
            ("noise_rate", self.noise_rate),
            ("multi_label_rate", self.multi_label_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Spec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.fillers[0] > self.fillers[1] {
            return Err(Error::Spec("fillers must be [min, max] with min <= max".into()));
        }
        self.split.validate().map_err(|e| Error::Spec(e.to_string()))?;
        if self.charges.is_empty() {
            return Err(Error::Spec("no charges defined".into()));
        }
        self.charge_set().map_err(|e| Error::Spec(e.to_string()))?;

        let mut marker_kind: BTreeMap<&str, ElementKind> = BTreeMap::new();
        for (name, def) in &self.elements {
            if def.concepts.is_empty() || def.concepts.iter().any(Vec::is_empty) {
                return Err(Error::Spec(format!("pool `{name}` has an empty concept list")));
            }
            for token in def.concepts.iter().flatten() {
                if let Some(prev) = marker_kind.insert(token, def.kind) {
                    if prev != def.kind {
                        return Err(Error::Spec(format!(
                            "marker `{token}` is used by both {prev} and {} pools",
                            def.kind
                        )));
                    }
                }
            }
        }
        for (name, def) in &self.elements {
            for phrase in &def.phrases {
                let toks = words(phrase);
                for concept in &def.concepts {
                    if !concept.iter().any(|m| toks.contains(&m.as_str())) {
                        return Err(Error::Spec(format!(
                            "phrase `{phrase}` of pool `{name}` mentions none of {concept:?}"
                        )));
                    }
                }
                if let Some(t) = toks
                    .iter()
                    .find(|t| marker_kind.get(*t).is_some_and(|k| *k != def.kind))
                {
                    return Err(Error::Spec(format!(
                        "phrase `{phrase}` of pool `{name}` contains foreign marker `{t}`"
                    )));
                }
            }
        }
        if self.filler.is_empty() {
            return Err(Error::Spec("filler pool is empty".into()));
        }
        for f in &self.filler {
            if let Some(t) = words(f).into_iter().find(|t| marker_kind.contains_key(t)) {
                return Err(Error::Spec(format!("filler `{f}` contains marker `{t}`")));
            }
            if words(f).is_empty() {
                return Err(Error::Spec("filler sentences must be non-empty".into()));
            }
        }

        let mut signatures = BTreeMap::new();
        for t in &self.charges {
            let mut sig = Vec::new();
            for kind in ElementKind::ALL {
                let def = self.element(t, kind)?;
                if def.phrases.is_empty() {
                    return Err(Error::Spec(format!(
                        "charge `{}` has no {} phrases",
                        t.name,
                        kind.as_str()
                    )));
                }
                sig.push(t.pool(kind).unwrap().to_string());
            }
            if let Some(other) = signatures.insert(sig, t.name.clone()) {
                return Err(Error::Spec(format!(
                    "charges `{other}` and `{}` use identical element pools",
                    t.name
                )));
            }
            for attr in &t.attributes {
                if !self.attributes.contains(attr) {
                    return Err(Error::Spec(format!(
                        "charge `{}` names undeclared attribute `{attr}`",
                        t.name
                    )));
                }
            }
        }

        for c in &self.confusions {
            let source = self.template(&c.source)?;
            let target = self.template(&c.target)?;
            if source.name == target.name {
                return Err(Error::Spec(format!("confusion `{}` maps a charge to itself", c.source)));
            }
            let target_markers: BTreeSet<&str> = ElementKind::ALL
                .iter()
                .map(|k| self.element(target, *k))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flat_map(|d| d.concepts.iter().flatten().map(String::as_str))
                .collect();
            for circumstance in [&c.common, &c.uncommon] {
                if !words(circumstance).iter().any(|t| target_markers.contains(t)) {
                    return Err(Error::Spec(format!(
                        "circumstance `{circumstance}` carries no marker of `{}`",
                        c.target
                    )));
                }
            }
        }
        Ok(())
    }

    fn template(&self, name: &str) -> Result<&ChargeTemplate> {
        self.charges
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Spec(format!("unknown charge `{name}`")))
    }

    pub fn knowledge(&self) -> Result<ElementKnowledge> {
        self.validate()?;
        let mut requirements = Vec::new();
        for t in &self.charges {
            let mut req: [Vec<BTreeSet<String>>; 4] = Default::default();
            for kind in ElementKind::ALL {
                req[kind.index()] = self
                    .element(t, kind)?
                    .concepts
                    .iter()
                    .map(|c| c.iter().cloned().collect())
                    .collect();
            }
            requirements.push(req);
        }
        let markers = self
            .elements
            .values()
            .flat_map(|d| d.concepts.iter().flatten().map(move |t| (t.clone(), d.kind)))
            .collect();
        Ok(ElementKnowledge {
            charges: self.charges.iter().map(|c| c.name.clone()).collect(),
            requirements,
            markers,
        })
    }

    /// Generates the case set and its exact sentence-level element labels.
    pub fn generate(&self) -> Result<(CaseSet, AnnotatedCaseSet)> {
        self.validate()?;
        let seed = self
            .seed
            .ok_or_else(|| Error::Spec("an explicit `seed` is required for generation".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filler_tokens: Vec<&str> = {
            let set: BTreeSet<&str> = self.filler.iter().flat_map(|f| words(f)).collect();
            set.into_iter().collect()
        };

        let total = self.charges.len() * self.cases_per_charge;
        let innocent_total = (self.innocent_fraction * total as f64).round() as usize;
        let innocent_per_charge = equal_shares(innocent_total, self.charges.len());

        let mut guilty = Vec::new();
        let mut innocent = Vec::new();
        let mut labels: BTreeMap<String, Vec<ElementSet>> = BTreeMap::new();

        for (template, n_innocent) in self.charges.iter().zip(innocent_per_charge) {
            let n_guilty = self.cases_per_charge.saturating_sub(n_innocent);
            let mut batch = Vec::with_capacity(n_guilty);
            for j in 0..n_guilty {
                let id = format!("{}-{:04}", template.name, j);
                let (sentences, sets) =
                    self.compose(template, ElementSet::EMPTY, &filler_tokens, &mut rng)?;
                labels.insert(id.clone(), sets);
                batch.push(Case::new(
                    id,
                    sentences,
                    ChargeLabel::charge(template.name.clone()),
                    Split::Train,
                    Source::Synthetic,
                )?);
            }
            let mut order: Vec<usize> = (0..batch.len()).collect();
            order.shuffle(&mut rng);
            let sizes = apportion(batch.len(), &self.split);
            let mut pos = 0;
            for (split, size) in Split::ALL.into_iter().zip(sizes) {
                for &i in &order[pos..pos + size] {
                    batch[i].split = split;
                }
                pos += size;
            }
            guilty.extend(batch);

            for j in 0..n_innocent {
                let id = format!("{INNOCENT}-{}-{:04}", template.name, j);
                let omit_count = rng.gen_range(1..=3);
                let mut kinds = ElementKind::ALL.to_vec();
                kinds.shuffle(&mut rng);
                let omitted = ElementSet::from_kinds(kinds.into_iter().take(omit_count));
                let (sentences, sets) = self.compose(template, omitted, &filler_tokens, &mut rng)?;
                labels.insert(id.clone(), sets);
                innocent.push(Case::new(
                    id,
                    sentences,
                    ChargeLabel::Innocent,
                    Split::Train,
                    Source::Synthetic,
                )?);
            }
        }

        let merge_seed = rng.gen::<u64>();
        let cases = merge_innocent(
            &CaseSet::new(guilty)?,
            &CaseSet::new(innocent)?,
            &self.split,
            merge_seed,
        )?;
        let annotated = cases
            .iter()
            .map(|c| AnnotatedCase::new(c.clone(), labels.remove(&c.id).unwrap()))
            .collect::<Result<Vec<_>>>()?;
        Ok((cases, AnnotatedCaseSet::new(annotated)?))
    }

    fn compose(
        &self,
        template: &ChargeTemplate,
        omitted: ElementSet,
        filler_tokens: &[&str],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Sentence>, Vec<ElementSet>)> {
        let mut units: Vec<(String, ElementSet)> = Vec::new();
        for kind in ElementKind::ALL {
            if omitted.contains(kind) {
                continue;
            }
            let def = self.element(template, kind)?;
            let phrase = def.phrases.choose(rng).unwrap().clone();
            units.push((phrase, ElementSet::EMPTY.with(kind)));
        }
        if units.len() >= 2 && rng.gen_bool(self.multi_label_rate) {
            let mut picks: Vec<usize> = (0..units.len()).collect();
            picks.shuffle(rng);
            let (a, b) = (picks[0].min(picks[1]), picks[0].max(picks[1]));
            let (second, second_set) = units.remove(b);
            let first = &mut units[a];
            first.0 = format!("{} and {}", first.0, second);
            first.1 = first.1.union(second_set);
        }
        let mut n_fill = rng.gen_range(self.fillers[0]..=self.fillers[1]);
        if units.is_empty() {
            n_fill = n_fill.max(1);
        }
        for _ in 0..n_fill {
            units.push((self.filler.choose(rng).unwrap().clone(), ElementSet::EMPTY));
        }
        units.shuffle(rng);

        let mut sentences = Vec::with_capacity(units.len());
        let mut sets = Vec::with_capacity(units.len());
        for (text, set) in units {
            let text = if rng.gen_bool(self.noise_rate) {
                let mut toks = words(&text);
                let at = rng.gen_range(0..=toks.len());
                toks.insert(at, filler_tokens.choose(rng).unwrap());
                toks.join(" ")
            } else {
                text
            };
            sentences.push(Sentence::new(text)?);
            sets.push(set);
        }
        Ok((sentences, sets))
    }

    /// Built-in eight-charge legal world used by the CLI and acceptance suite.
    pub fn default_legal() -> Self {
        fn strs(v: &[&str]) -> Vec<String> {
            v.iter().map(|s| s.to_string()).collect()
        }
        fn pool(kind: ElementKind, concepts: &[&[&str]], phrases: &[&str]) -> ElementDef {
            ElementDef {
                kind,
                concepts: concepts.iter().map(|c| strs(c)).collect(),
                phrases: strs(phrases),
            }
        }
        use ElementKind::*;
        let mut elements = BTreeMap::new();
        let mut add = |name: &str, def: ElementDef| {
            elements.insert(name.to_string(), def);
        };
        add("sub_general", pool(Subject, &[&["defendant", "suspect"]], &[
            "the defendant was an adult resident of the county",
            "the suspect had reached the age of criminal responsibility",
            "the defendant was born in the city and had full capacity",
        ]));
        add("sub_functionary", pool(Subject, &[&["functionary", "official"]], &[
            "the accused served as a state functionary in the finance bureau",
            "the accused was a public official who managed the relief fund",
        ]));
        add("sub_employee", pool(Subject, &[&["employee", "clerk"]], &[
            "the accused worked as an employee of a private trading firm",
            "the accused was a clerk hired by a logistics firm",
        ]));
        add("men_possess", pool(MentalState, &[&["intending", "purpose"]], &[
            "he acted with the purpose of illegal possession",
            "he was intending to keep the money for himself",
            "intending to profit he planned the act in advance",
        ]));
        add("men_negligence", pool(MentalState, &[&["careless", "negligent"]], &[
            "he was careless and did not watch the way ahead",
            "he was negligent and failed to foresee the danger",
        ]));
        add("men_temporary", pool(MentalState, &[&["temporarily", "borrow"]], &[
            "he meant to use the money temporarily and return it later",
            "he planned to borrow the funds for a private business",
        ]));
        add("con_snatch", pool(Conduct, &[&["snatched", "grabbed"]], &[
            "he snatched the handbag from the victim and ran away",
            "he grabbed the phone from her hand in the street and fled",
        ]));
        add("con_steal", pool(Conduct, &[&["stole", "pilfered"]], &[
            "he secretly stole the wallet from a sleeping passenger",
            "he pilfered cash from the shop drawer at night",
        ]));
        add("con_rob", pool(
            Conduct,
            &[
                &["snatched", "grabbed", "stole", "pilfered", "took"],
                &["knife", "switchblade", "beat", "baton", "pepper"],
            ],
            &[
                "he snatched the handbag from the victim and ran away armed with a knife",
                "he grabbed the phone from her hand in the street armed with a knife",
                "he secretly stole the wallet from a sleeping passenger and hurt pursuers with a switchblade",
                "he pilfered cash from the shop drawer and hurt pursuers with a switchblade",
                "he took the wallet and beat the owner until he gave up",
            ],
        ));
        add("con_drive", pool(Conduct, &[&["drove", "driving"]], &[
            "he drove the truck too fast and hit a pedestrian",
            "while driving the van he struck a cyclist",
            "he drove a car in reverse and knocked over a worker",
        ]));
        add("con_embezzle", pool(Conduct, &[&["embezzled", "pocketed"]], &[
            "he embezzled the money into his own account",
            "he pocketed the payments he was entrusted to manage",
        ]));
        add("con_misuse", pool(Conduct, &[&["misappropriated", "diverted"]], &[
            "he misappropriated the funds for over three months without returning them",
            "he diverted the money to a friend and did not return it for five months",
        ]));
        add("obj_property", pool(Object, &[&["property", "belongings"]], &[
            "the property taken was worth five thousand yuan",
            "the belongings of the victim were valued at two thousand yuan",
        ]));
        add("obj_public_funds", pool(Object, &[&["treasury", "state-owned"]], &[
            "the money belonged to the state treasury",
            "the funds were state-owned assets of the bureau",
        ]));
        add("obj_corporate", pool(Object, &[&["corporate", "shareholders"]], &[
            "the money was corporate capital owned by the shareholders",
            "the corporate account of the firm suffered the loss",
        ]));
        add("obj_harm", pool(Object, &[&["died", "injured"]], &[
            "the victim died at the scene",
            "the pedestrian was severely injured",
        ]));
        add("obj_harm_nonpublic", pool(
            Object,
            &[&["died", "injured"], &["closed", "sewer"]],
            &[
                "the victim died on a road closed for construction",
                "the worker was injured on a road closed for construction",
            ],
        ));

        let charge = |name: &str, s: &str, m: &str, c: &str, o: &str, attrs: &[&str]| ChargeTemplate {
            name: name.to_string(),
            subject: Some(s.to_string()),
            mental_state: Some(m.to_string()),
            conduct: Some(c.to_string()),
            object: Some(o.to_string()),
            attributes: strs(attrs),
        };
        let charges = vec![
            charge("TA", "sub_general", "men_negligence", "con_drive", "obj_harm",
                &["death_or_injury", "negligence", "public_road"]),
            charge("NH", "sub_general", "men_negligence", "con_drive", "obj_harm_nonpublic",
                &["death_or_injury", "negligence"]),
            charge("FS", "sub_general", "men_possess", "con_snatch", "obj_property",
                &["taking_property", "open_taking"]),
            charge("Rob", "sub_general", "men_possess", "con_rob", "obj_property",
                &["taking_property", "open_taking", "violence"]),
            charge("TFT", "sub_general", "men_possess", "con_steal", "obj_property",
                &["taking_property", "secret_taking"]),
            charge("Cor", "sub_functionary", "men_possess", "con_embezzle", "obj_public_funds",
                &["taking_property", "public_office", "public_funds"]),
            charge("MoF", "sub_employee", "men_temporary", "con_misuse", "obj_corporate",
                &["temporary_use"]),
            charge("MoPF", "sub_functionary", "men_temporary", "con_misuse", "obj_public_funds",
                &["temporary_use", "public_office", "public_funds"]),
        ];
        let confusion = |source: &str, target: &str, knowledge: &str, common: &str, uncommon: &str| {
            ConfusionDef {
                source: source.to_string(),
                target: target.to_string(),
                knowledge: knowledge.to_string(),
                common: common.to_string(),
                uncommon: uncommon.to_string(),
                anchor: Anchor::ConductSentence,
            }
        };
        SynthSpec {
            seed: None,
            cases_per_charge: 120,
            innocent_fraction: 0.1,
            noise_rate: 0.1,
            multi_label_rate: 0.15,
            fillers: [1, 3],
            split: SplitRatio::default(),
            filler: strs(&[
                "the case was heard by the district court",
                "the police arrived at the scene later that day",
                "the weather was clear and the street was busy",
                "a witness with a phone recorded part of the event",
                "the family of the accused is being notified",
                "he lived on a road near the old market",
                "the evidence was gathered where the event happened",
                "the hearing was held in public with the parties present",
                "the prosecutor filed the indictment in the spring",
                "the accused later confessed to the police",
                "it was a normal evening with light traffic on the road",
                "the matter is being reviewed by the prosecutors",
                "records from the bank were submitted as evidence",
            ]),
            attributes: strs(&[
                "taking_property",
                "violence",
                "open_taking",
                "secret_taking",
                "death_or_injury",
                "negligence",
                "public_office",
                "public_funds",
                "temporary_use",
                "public_road",
            ]),
            elements,
            charges,
            confusions: vec![
                confusion("FS", "Rob", "armed with weapon", "armed with a knife", "wielding a baton"),
                confusion("TFT", "Rob", "using violence", "hurt pursuers with a switchblade",
                    "sprayed the guards with pepper"),
                confusion("TA", "NH", "on non-public transport road",
                    "on a road closed for construction", "on a road where the sewer is being repaired"),
            ],
        }
    }
}

fn equal_shares(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotations_to_jsonl, cases_to_jsonl};

    fn two_charge_spec(cases: usize, innocent: f64) -> SynthSpec {
        let mut spec = SynthSpec::default_legal();
        spec.charges.retain(|c| c.name == "FS" || c.name == "Cor");
        spec.confusions.clear();
        spec.cases_per_charge = cases;
        spec.innocent_fraction = innocent;
        spec.with_seed(11)
    }

    #[test]
    fn default_spec_is_valid_and_survives_toml() {
        let spec = SynthSpec::default_legal();
        spec.validate().unwrap();
        let back = SynthSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn guilty_cases_carry_all_four_elements() {
        let (cases, ann) = two_charge_spec(10, 0.0).generate().unwrap();
        assert_eq!(cases.len(), 20);
        for a in &ann {
            assert_eq!(a.elements(), ElementSet::FULL, "{}", a.case.id);
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let spec = two_charge_spec(10, 0.2);
        let (c1, a1) = spec.generate().unwrap();
        let (c2, a2) = spec.generate().unwrap();
        assert_eq!(cases_to_jsonl(&c1), cases_to_jsonl(&c2));
        assert_eq!(annotations_to_jsonl(&a1), annotations_to_jsonl(&a2));
        let (c3, _) = spec.clone().with_seed(12).generate().unwrap();
        assert_ne!(cases_to_jsonl(&c1), cases_to_jsonl(&c3));
    }

    #[test]
    fn innocent_fraction_counts_by_label_scan() {
        let (cases, ann) = two_charge_spec(50, 0.2).generate().unwrap();
        assert_eq!(cases.len(), 100);
        let innocent: Vec<_> = ann.iter().filter(|a| a.case.charge.is_innocent()).collect();
        assert_eq!(innocent.len(), 20);
        for a in innocent {
            let union = a.elements();
            assert!(union != ElementSet::FULL && union.len() < 4);
        }
    }

    #[test]
    fn missing_seed_is_an_error() {
        let mut spec = two_charge_spec(5, 0.0);
        spec.seed = None;
        assert!(matches!(spec.generate(), Err(Error::Spec(_))));
    }

    #[test]
    fn missing_element_pool_is_a_spec_error() {
        let mut spec = two_charge_spec(5, 0.0);
        spec.charges[0].conduct = None;
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("Conduct"), "{err}");
    }

    #[test]
    fn phrase_without_marker_is_rejected() {
        let mut spec = two_charge_spec(5, 0.0);
        spec.elements
            .get_mut("con_snatch")
            .unwrap()
            .phrases
            .push("he walked home".into());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn filler_with_marker_is_rejected() {
        let mut spec = two_charge_spec(5, 0.0);
        spec.filler.push("the knife was found later".into());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn splits_follow_ratio_per_charge() {
        let (cases, _) = two_charge_spec(20, 0.0).generate().unwrap();
        let fs: Vec<_> = cases.iter().filter(|c| c.charge.as_str() == "FS").collect();
        let count = |s: Split| fs.iter().filter(|c| c.split == s).count();
        assert_eq!([count(Split::Train), count(Split::Valid), count(Split::Test)], [10, 6, 4]);
    }

    #[test]
    fn knowledge_markers_are_kind_exclusive() {
        let k = SynthSpec::default_legal().knowledge().unwrap();
        assert_eq!(k.charges.len(), 8);
        assert_eq!(k.marker_kind("knife"), Some(ElementKind::Conduct));
        assert_eq!(k.marker_kind("closed"), Some(ElementKind::Object));
        assert_eq!(k.marker_kind("the"), None);
    }
}
