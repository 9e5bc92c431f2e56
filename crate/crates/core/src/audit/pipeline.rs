use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{sub_seed, tsv, AuditConfig, Corpus, Stage};
use crate::ablate::{confidence_summary, run_ablation};
use crate::corpus::{element_table, save_annotations, save_cases, ElementKind, ElementTableRow, Split};
use crate::error::{Error, Result};
use crate::models::{evaluate, train, AdapterRegistry, ChargeModel, ModelBundle};
use crate::perturb::run_perturbation;
use crate::probing::{random_baseline, run_probing, ProbeConfig, ProbeReport};

pub const MANIFEST: &str = "manifest.json";
pub const METADATA: &str = "metadata.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRow {
    pub charge: String,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub seed: u64,
    pub splits: Vec<SplitRow>,
    pub elements: Vec<ElementTableRow>,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>5} {:>5} {:>5} {:>5} {:>6}", "Charge", "Sub", "Men", "Con", "Obj", "NA", "Cases")?;
        for r in &self.elements {
            let [s, m, c, o] = r.elements;
            writeln!(f, "{:<10} {s:>5} {m:>5} {c:>5} {o:>5} {:>5} {:>6}", r.charge, r.na, r.cases)?;
        }
        writeln!(f)?;
        writeln!(f, "{:<10} {:>5} {:>5} {:>5} {:>6}", "Charge", "Train", "Valid", "Test", "Total")?;
        for r in &self.splits {
            writeln!(f, "{:<10} {:>5} {:>5} {:>5} {:>6}", r.charge, r.train, r.valid, r.test, r.total)?;
        }
        Ok(())
    }
}

fn split_rows(corpus: &Corpus) -> Vec<SplitRow> {
    let mut order: Vec<String> = corpus.charges.names().to_vec();
    order.push(crate::corpus::INNOCENT.to_string());
    let mut rows: Vec<SplitRow> = order
        .into_iter()
        .map(|charge| SplitRow {
            charge,
            train: 0,
            valid: 0,
            test: 0,
            total: 0,
        })
        .collect();
    let mut all = SplitRow {
        charge: "All".into(),
        train: 0,
        valid: 0,
        test: 0,
        total: 0,
    };
    for case in &corpus.cases {
        let i = rows.iter().position(|r| r.charge == case.charge.as_str()).expect("validated charge");
        for r in [&mut rows[i], &mut all] {
            match case.split {
                Split::Train => r.train += 1,
                Split::Valid => r.valid += 1,
                Split::Test => r.test += 1,
            }
            r.total += 1;
        }
    }
    rows.retain(|r| r.total > 0);
    rows.push(all);
    rows
}

/// Generates the synthetic corpus and writes `cases.jsonl`,
/// `annotations.jsonl` and the resolved `spec.toml`.
pub fn cmd_synth(cfg: &AuditConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    if cfg.corpus.cases.is_some() {
        return Err(Error::Config("`synth` generates a corpus; drop `corpus.cases`".into()));
    }
    let corpus = Corpus::load(cfg)?;
    let spec = corpus.spec.as_ref().expect("synthetic corpus");
    let annotations = corpus.annotations.as_ref().expect("synthetic corpus");
    create_dir(out)?;
    let files = vec![out.join("cases.jsonl"), out.join("annotations.jsonl"), out.join("spec.toml")];
    save_cases(&corpus.cases, &files[0])?;
    save_annotations(annotations, &files[1])?;
    write_text(&files[2], &spec.to_toml_string())?;
    Ok(SynthSummary {
        seed: spec.seed.expect("seed resolved"),
        splits: split_rows(&corpus),
        elements: element_table(annotations),
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub bundle: PathBuf,
    pub metrics: MetricsRow,
}

/// Trains every configured model on the train split (valid for model
/// selection), writes `<architecture>.json` bundles and `charge_metrics.tsv`
/// with macro metrics on the test split.
pub fn cmd_train(cfg: &AuditConfig, out: &Path) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    if cfg.models.is_empty() {
        return Err(Error::Config("no `models` to train".into()));
    }
    let master = cfg.master_seed()?;
    let corpus = Corpus::load(cfg)?;
    let ctx = corpus.train_context()?;
    let trainset = corpus.cases.in_splits(&[Split::Train]);
    let validset = corpus.cases.in_splits(&[Split::Valid]);
    let testset = corpus.cases.in_splits(&[Split::Test]);
    if testset.is_empty() {
        return Err(Error::Validation("the corpus has no test cases".into()));
    }
    create_dir(out)?;
    let mut outcomes = Vec::new();
    for model in &cfg.models {
        let mut config = model.clone();
        config.seed = sub_seed(master, &format!("train:{}", config.architecture));
        log::info!("training {} (seed {})", config.architecture, config.seed);
        let bundle = train(&trainset, &validset, &config, &ctx)?;
        let m = evaluate(&bundle, &testset)?;
        let path = out.join(format!("{}.json", config.architecture));
        bundle.save(&path)?;
        outcomes.push(TrainOutcome {
            bundle: path,
            metrics: MetricsRow {
                model: config.architecture.to_string(),
                accuracy: m.accuracy,
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
            },
        });
    }
    let rows: Vec<MetricsRow> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    tsv::write(&out.join("charge_metrics.tsv"), &rows)?;
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedStage {
    pub stage: Stage,
    pub model: Option<String>,
    pub error: String,
}

/// Record of an audit directory. Holds no timestamps, so two runs with the
/// same inputs write identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub models: Vec<String>,
    pub planned: Vec<Stage>,
    pub completed: Vec<Stage>,
    pub files: BTreeMap<Stage, Vec<String>>,
    pub failed: Option<FailedStage>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::Report(format!("{} has no stage manifest ({MANIFEST})", dir.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_text(&dir.join(MANIFEST), &text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

struct Audited {
    name: String,
    model: Arc<dyn ChargeModel>,
}

fn load_models(bundles: &[PathBuf], registry: &AdapterRegistry) -> Result<Vec<Audited>> {
    if bundles.is_empty() {
        return Err(Error::Config("`audit` needs at least one --bundle".into()));
    }
    let mut out: Vec<Audited> = Vec::new();
    for path in bundles {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("{} is not a bundle file", path.display())))?;
        if out.iter().any(|a| a.name == name) {
            return Err(Error::Config(format!("two bundles are named `{name}`")));
        }
        let bundle = ModelBundle::load(path)?;
        out.push(Audited {
            name,
            model: registry.instantiate(bundle)?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct ProbeRow<'a> {
    model: &'a str,
    charge: &'a str,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct ProbeCountRow<'a> {
    model: &'a str,
    charge: &'a str,
    fold: usize,
    element: &'a str,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

fn probe_rows<'a>(model: &'a str, report: &'a ProbeReport, rows: &mut Vec<ProbeRow<'a>>) {
    for c in &report.per_charge {
        rows.push(ProbeRow {
            model,
            charge: &c.charge,
            precision: c.prf.precision,
            recall: c.prf.recall,
            f1: c.prf.f1,
        });
    }
    rows.push(ProbeRow {
        model,
        charge: "Macro",
        precision: report.macro_avg.precision,
        recall: report.macro_avg.recall,
        f1: report.macro_avg.f1,
    });
}

#[derive(Serialize)]
struct RetentionRow<'a> {
    model: &'a str,
    rule: String,
    source: &'a str,
    target: &'a str,
    knowledge: &'a str,
    commonality: String,
    circumstance: &'a str,
    sample: usize,
    eligible: usize,
    retained: usize,
    ratio: Option<f64>,
    retained_raw: usize,
    ratio_raw: f64,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    model: &'a str,
    rule: &'a str,
    case_id: &'a str,
    before: &'a str,
    after: &'a str,
}

#[derive(Serialize)]
struct ConsistencyRow<'a> {
    model: &'a str,
    element: &'a str,
    evaluated: usize,
    skipped: usize,
    consistency: f64,
    consistency_correct: Option<f64>,
    evaluated_correct: usize,
    gold_accuracy_before: f64,
    gold_accuracy_after: f64,
    mean_innocent_before: f64,
    mean_innocent_after: f64,
}

#[derive(Serialize)]
struct PairRow<'a> {
    model: &'a str,
    element: &'a str,
    case_id: &'a str,
    gold: &'a str,
    pred_before: &'a str,
    pred_after: &'a str,
    p_orig_before: f64,
    p_orig_after: f64,
    p_innocent_before: f64,
    p_innocent_after: f64,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    model: &'a str,
    condition: &'a str,
    lo: f64,
    hi: f64,
    count: usize,
}

#[derive(Serialize)]
struct BoxRow<'a> {
    model: &'a str,
    condition: &'a str,
    quantity: &'a str,
    cases: usize,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

struct Ctx<'a> {
    cfg: &'a AuditConfig,
    corpus: &'a Corpus,
    models: &'a [Audited],
    dir: &'a Path,
    master: u64,
}

type StageResult = std::result::Result<Vec<String>, (Option<String>, Error)>;

fn on_model<T>(name: &str, r: Result<T>) -> std::result::Result<T, (Option<String>, Error)> {
    r.map_err(|e| (Some(name.to_string()), e))
}

fn global<T>(r: Result<T>) -> std::result::Result<T, (Option<String>, Error)> {
    r.map_err(|e| (None, e))
}

fn stage_evaluate(c: &Ctx) -> StageResult {
    let testset = c.corpus.cases.in_splits(&[Split::Test]);
    if testset.is_empty() {
        return Err((None, Error::Validation("the corpus has no test cases".into())));
    }
    let mut rows = Vec::new();
    for m in c.models {
        let r = on_model(&m.name, evaluate(m.model.as_ref(), &testset))?;
        rows.push(MetricsRow {
            model: m.name.clone(),
            accuracy: r.accuracy,
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
        });
    }
    global(tsv::write(&c.dir.join("charge_metrics.tsv"), &rows))?;
    Ok(vec!["charge_metrics.tsv".into()])
}

fn stage_probe(c: &Ctx) -> StageResult {
    let annotations = global(c.corpus.require_annotations())?;
    let config = ProbeConfig {
        seed: sub_seed(c.master, "probe"),
        ..c.cfg.probe.clone()
    };
    let baseline = global(random_baseline(annotations, &config))?;
    let mut reports = Vec::new();
    for m in c.models {
        reports.push(on_model(&m.name, run_probing(m.model.as_ref(), annotations, &config))?);
    }
    let mut rows = Vec::new();
    probe_rows("Random", &baseline, &mut rows);
    let mut counts = Vec::new();
    for (m, r) in c.models.iter().zip(&reports) {
        probe_rows(&m.name, r, &mut rows);
        for row in &r.counts {
            counts.push(ProbeCountRow {
                model: &m.name,
                charge: &row.charge,
                fold: row.fold,
                element: row.element.map_or("NA", ElementKind::short),
                tp: row.tp,
                fp: row.fp,
                fn_: row.fn_,
            });
        }
    }
    global(tsv::write(&c.dir.join("probe.tsv"), &rows))?;
    global(tsv::write(&c.dir.join("probe_counts.tsv"), &counts))?;
    Ok(vec!["probe.tsv".into(), "probe_counts.tsv".into()])
}

fn stage_perturb(c: &Ctx) -> StageResult {
    let rules = global(c.corpus.rules(c.cfg))?;
    let seed = sub_seed(c.master, "perturb");
    let mut results = Vec::new();
    for m in c.models {
        for rule in &rules {
            let r = run_perturbation(
                m.model.as_ref(),
                &c.corpus.cases,
                c.corpus.annotations.as_ref(),
                rule,
                c.cfg.perturb.n,
                seed,
            );
            results.push((m.name.as_str(), on_model(&m.name, r)?));
        }
    }
    let ids: Vec<String> = results.iter().map(|(_, r)| r.rule.id()).collect();
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for ((model, r), id) in results.iter().zip(&ids) {
        rows.push(RetentionRow {
            model,
            rule: id.clone(),
            source: &r.rule.source,
            target: &r.rule.target,
            knowledge: &r.rule.knowledge,
            commonality: r.rule.commonality.to_string(),
            circumstance: &r.rule.circumstance,
            sample: r.sample,
            eligible: r.eligible,
            retained: r.retained,
            ratio: r.ratio,
            retained_raw: r.retained_raw,
            ratio_raw: r.ratio_raw,
        });
        for p in &r.predictions {
            preds.push(PredictionRow {
                model,
                rule: id,
                case_id: &p.case_id,
                before: &p.before,
                after: &p.after,
            });
        }
    }
    global(tsv::write(&c.dir.join("retention.tsv"), &rows))?;
    global(tsv::write(&c.dir.join("perturbed_predictions.tsv"), &preds))?;
    Ok(vec!["retention.tsv".into(), "perturbed_predictions.tsv".into()])
}

fn stage_ablate(c: &Ctx) -> StageResult {
    let annotations = global(c.corpus.require_annotations())?.in_splits(&c.cfg.ablate.splits);
    let mut per_model = Vec::new();
    for m in c.models {
        let mut results = Vec::new();
        for kind in ElementKind::ALL {
            results.push(on_model(&m.name, run_ablation(m.model.as_ref(), &annotations, kind))?);
        }
        let summary = on_model(&m.name, confidence_summary(&results))?;
        per_model.push((m.name.as_str(), results, summary));
    }
    let (mut cons, mut pairs, mut hist, mut boxes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (model, results, summary) in &per_model {
        for r in results {
            cons.push(ConsistencyRow {
                model,
                element: r.element.short(),
                evaluated: r.evaluated,
                skipped: r.skipped,
                consistency: r.consistency,
                consistency_correct: r.consistency_correct,
                evaluated_correct: r.evaluated_correct,
                gold_accuracy_before: r.gold_accuracy_before,
                gold_accuracy_after: r.gold_accuracy_after,
                mean_innocent_before: r.mean_innocent_before(),
                mean_innocent_after: r.mean_innocent_after(),
            });
            for p in &r.pairs {
                pairs.push(PairRow {
                    model,
                    element: r.element.short(),
                    case_id: &p.case_id,
                    gold: &p.gold,
                    pred_before: &p.pred_before,
                    pred_after: &p.pred_after,
                    p_orig_before: p.p_orig_before,
                    p_orig_after: p.p_orig_after,
                    p_innocent_before: p.p_innocent_before,
                    p_innocent_after: p.p_innocent_after,
                });
            }
        }
        for s in summary {
            let h = &s.confidence.histogram;
            for (i, count) in h.counts.iter().enumerate() {
                hist.push(HistogramRow {
                    model,
                    condition: &s.condition,
                    lo: h.edges[i],
                    hi: h.edges[i + 1],
                    count: *count,
                });
            }
            for (quantity, f) in [("confidence", &s.confidence.five), ("innocent", &s.innocent)] {
                boxes.push(BoxRow {
                    model,
                    condition: &s.condition,
                    quantity,
                    cases: s.cases,
                    min: f.min,
                    q1: f.q1,
                    median: f.median,
                    q3: f.q3,
                    max: f.max,
                });
            }
        }
    }
    global(tsv::write(&c.dir.join("consistency.tsv"), &cons))?;
    global(tsv::write(&c.dir.join("ablation_pairs.tsv"), &pairs))?;
    global(tsv::write(&c.dir.join("confidence_histogram.tsv"), &hist))?;
    global(tsv::write(&c.dir.join("boxplot.tsv"), &boxes))?;
    Ok(vec![
        "consistency.tsv".into(),
        "ablation_pairs.tsv".into(),
        "confidence_histogram.tsv".into(),
        "boxplot.tsv".into(),
    ])
}

/// Runs the selected stages (all when `stages` is empty; charge metrics are
/// always computed) for every bundle into `out`. The manifest is rewritten
/// after each stage so a failure leaves the finished stages usable.
pub fn cmd_audit(
    cfg: &AuditConfig,
    bundles: &[PathBuf],
    stages: &[Stage],
    out: &Path,
    registry: &AdapterRegistry,
) -> Result<AuditSummary> {
    cfg.validate()?;
    let master = cfg.master_seed()?;
    let started = unix_now();
    let models = load_models(bundles, registry)?;
    let corpus = Corpus::load(cfg)?;
    for m in &models {
        if m.model.labels().charge_set() != corpus.charges {
            return Err(Error::Validation(format!(
                "bundle `{}` predicts charges [{}] but the corpus has [{}]",
                m.name,
                m.model.labels().charge_set().names().join(", "),
                corpus.charges.names().join(", ")
            )));
        }
    }
    let mut planned = vec![Stage::Evaluate];
    for s in Stage::ALL.into_iter().skip(1) {
        if stages.is_empty() || stages.contains(&s) {
            planned.push(s);
        }
    }
    create_dir(out)?;
    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: master,
        seeds: ["probe", "perturb"]
            .into_iter()
            .map(|t| (t.to_string(), sub_seed(master, t)))
            .collect(),
        models: models.iter().map(|m| m.name.clone()).collect(),
        planned: planned.clone(),
        completed: Vec::new(),
        files: BTreeMap::new(),
        failed: None,
    };
    manifest.save(out)?;
    let ctx = Ctx {
        cfg,
        corpus: &corpus,
        models: &models,
        dir: out,
        master,
    };
    for stage in planned {
        log::info!("stage {stage}");
        let result = match stage {
            Stage::Evaluate => stage_evaluate(&ctx),
            Stage::Probe => stage_probe(&ctx),
            Stage::Perturb => stage_perturb(&ctx),
            Stage::Ablate => stage_ablate(&ctx),
        };
        match result {
            Ok(files) => {
                manifest.completed.push(stage);
                manifest.files.insert(stage, files);
                manifest.save(out)?;
            }
            Err((model, error)) => {
                manifest.failed = Some(FailedStage {
                    stage,
                    model,
                    error: error.to_string(),
                });
                manifest.save(out)?;
                write_metadata(out, started)?;
                return Err(error);
            }
        }
    }
    write_metadata(out, started)?;
    Ok(AuditSummary {
        dir: out.to_path_buf(),
        manifest,
    })
}

fn write_metadata(dir: &Path, started: u64) -> Result<()> {
    let meta = serde_json::json!({ "started_unix": started, "finished_unix": unix_now() });
    write_text(&dir.join(METADATA), &format!("{meta}\n"))
}
