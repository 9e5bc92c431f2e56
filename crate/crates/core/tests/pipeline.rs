use std::path::{Path, PathBuf};

use fetcheck::audit::{cmd_audit, cmd_render, cmd_synth, cmd_train, AuditConfig, Corpus, Manifest, Stage};
use fetcheck::models::{evaluate, train, AdapterRegistry, Architecture, TrainConfig};
use fetcheck::{ChargeLabel, ErrorClass, ModelBundle, Split, SynthSpec};

fn small_config(dir: &Path) -> AuditConfig {
    let spec = SynthSpec {
        cases_per_charge: 12,
        ..SynthSpec::default_legal()
    };
    let path = dir.join("spec.toml");
    std::fs::write(&path, spec.to_toml_string()).unwrap();
    let mut cfg = AuditConfig {
        seed: Some(3),
        ..AuditConfig::default()
    };
    cfg.corpus.spec = Some(path);
    cfg.models = vec![TrainConfig {
        architecture: Architecture::FetOracle,
        ..TrainConfig::default()
    }];
    cfg.perturb.n = 10;
    cfg.probe.steps = 50;
    cfg
}

fn constant_bundle(cfg: &AuditConfig, dir: &Path, charge: &str) -> PathBuf {
    let corpus = Corpus::load(cfg).unwrap();
    let bundle = ModelBundle::constant(&corpus.labels(), &ChargeLabel::charge(charge)).unwrap();
    let path = dir.join(format!("constant_{charge}.json"));
    bundle.save(&path).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn constant_model_never_moves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let bundle = constant_bundle(&cfg, tmp.path(), "FS");
    let out = cmd_audit(&cfg, &[bundle], &[], &tmp.path().join("audit"), &AdapterRegistry::default()).unwrap();
    assert_eq!(out.manifest.completed, Stage::ALL.to_vec());

    let retention = read(out.dir.join("retention.tsv"));
    let fs_rows: Vec<&str> = retention.lines().filter(|l| l.contains("\tFS\t")).collect();
    assert_eq!(fs_rows.len(), 2);
    for row in fs_rows {
        assert!(row.contains("\t1.0\t"), "{row}");
    }
    let consistency = read(out.dir.join("consistency.tsv"));
    for row in consistency.lines().skip(1) {
        assert_eq!(row.split('\t').nth(4), Some("1.0"), "{row}");
    }
}

#[test]
fn probe_file_groups_rows_by_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = constant_bundle(&cfg, tmp.path(), "FS");
    let b = constant_bundle(&cfg, tmp.path(), "Rob");
    let out = cmd_audit(&cfg, &[a, b], &[Stage::Probe], &tmp.path().join("audit"), &AdapterRegistry::default()).unwrap();
    let models: Vec<String> = read(out.dir.join("probe.tsv"))
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    let mut groups = models.clone();
    groups.dedup();
    assert_eq!(groups, ["Random", "constant_FS", "constant_Rob"]);
    assert_eq!(models.len(), 3 * 9);
    assert_eq!(out.manifest.completed, [Stage::Evaluate, Stage::Probe]);
}

#[test]
fn duplicate_bundle_names_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = constant_bundle(&cfg, tmp.path(), "FS");
    let err = cmd_audit(&cfg, &[a.clone(), a], &[], &tmp.path().join("audit"), &AdapterRegistry::default()).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
}

#[test]
fn render_copies_cells_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let trained = cmd_train(&cfg, &tmp.path().join("models")).unwrap();
    let bundles = vec![trained[0].bundle.clone(), constant_bundle(&cfg, tmp.path(), "Cor")];
    let out = cmd_audit(&cfg, &bundles, &[], &tmp.path().join("audit"), &AdapterRegistry::default()).unwrap();

    let first = cmd_render(&out.dir).unwrap();
    let second = cmd_render(&out.dir).unwrap();
    assert_eq!(first, second);
    assert_eq!(read(out.dir.join("rendered/tables.md")), first.tables);

    let rendered = [
        ("consistency.tsv", vec!["consistency", "mean_innocent_after"]),
        ("retention.tsv", vec!["ratio", "ratio_raw"]),
        ("charge_metrics.tsv", vec!["accuracy", "f1", "precision", "recall"]),
    ];
    for (name, cols) in rendered {
        let text = read(out.dir.join(name));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        for row in lines {
            let cells: Vec<&str> = row.split('\t').collect();
            for col in &cols {
                let cell = cells[header.iter().position(|h| h == col).unwrap()];
                if !cell.is_empty() {
                    assert!(first.tables.contains(&format!(" {cell} ")), "{name}: `{cell}` not rendered");
                }
            }
        }
    }
    let density = read(out.dir.join("rendered/figure_confidence_density.tsv"));
    assert_eq!(density, read(out.dir.join("confidence_histogram.tsv")));
}

#[test]
fn render_refuses_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let err = cmd_render(tmp.path()).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Pipeline);
    assert!(err.to_string().contains("empty"));
}

#[test]
fn render_refuses_unfinished_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let bundle = constant_bundle(&cfg, tmp.path(), "FS");
    let out = cmd_audit(&cfg, &[bundle], &[], &tmp.path().join("audit"), &AdapterRegistry::default()).unwrap();
    let mut manifest = Manifest::load(&out.dir).unwrap();
    manifest.completed.retain(|s| *s != Stage::Ablate);
    std::fs::write(out.dir.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let err = cmd_render(&out.dir).unwrap_err();
    assert!(err.to_string().contains("stage `ablate`"), "{err}");

    std::fs::remove_file(out.dir.join("manifest.json")).unwrap();
    assert!(cmd_render(&out.dir).unwrap_err().to_string().contains("manifest"));
}

#[test]
fn audit_without_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    let bundle = constant_bundle(&cfg, tmp.path(), "FS");
    cfg.seed = None;
    let err = cmd_audit(&cfg, &[bundle], &[], &tmp.path().join("audit"), &AdapterRegistry::default()).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
    assert!(err.to_string().contains("seed"));
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = cmd_synth(&cfg, &tmp.path().join("a")).unwrap();
    let b = cmd_synth(&cfg, &tmp.path().join("b")).unwrap();
    for (x, y) in a.files.iter().zip(&b.files) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let other = AuditConfig {
        seed: Some(4),
        ..cfg
    };
    let c = cmd_synth(&other, &tmp.path().join("c")).unwrap();
    assert_ne!(read(&a.files[0]), read(&c.files[0]));
}

#[test]
fn separable_pair_is_learned() {
    let mut spec = SynthSpec::default_legal().with_seed(5);
    spec.charges.retain(|c| c.name == "Cor" || c.name == "TA");
    spec.confusions.clear();
    spec.innocent_fraction = 0.0;
    spec.cases_per_charge = 80;
    let (cases, _) = spec.generate().unwrap();
    let ctx = fetcheck::models::TrainContext {
        labels: fetcheck::LabelSet::new(&spec.charge_set().unwrap()),
        attributes: None,
        knowledge: None,
    };
    let config = TrainConfig {
        architecture: Architecture::AttnBilstm,
        seed: 5,
        ..fetcheck::audit::default_models()[0].clone()
    };
    let bundle = train(&cases.in_splits(&[Split::Train]), &cases.in_splits(&[Split::Valid]), &config, &ctx).unwrap();
    let model = AdapterRegistry::default().instantiate(bundle).unwrap();
    let metrics = evaluate(model.as_ref(), &cases.in_splits(&[Split::Test])).unwrap();
    assert!(metrics.accuracy >= 0.95, "accuracy {}", metrics.accuracy);
}
