use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use fetcheck::ablate::run_ablation;
use fetcheck::metrics::{cohen_kappa, dist_summary};
use fetcheck::models::{train, AdapterRegistry, Architecture, TrainConfig, TrainContext};
use fetcheck::perturb::{run_perturbation, synthetic_rules};
use fetcheck::probing::{extract_probe_dataset, train_probe, ProbeConfig};
use fetcheck::{AnnotatedCaseSet, CaseSet, ChargeModel, ElementKind, LabelSet, Split, SynthSpec};

struct Fixture {
    spec: SynthSpec,
    cases: CaseSet,
    annotations: AnnotatedCaseSet,
    model: Arc<dyn ChargeModel>,
}

fn corpus() -> (SynthSpec, CaseSet, AnnotatedCaseSet, TrainContext) {
    let spec = SynthSpec {
        cases_per_charge: 30,
        ..SynthSpec::default_legal()
    }
    .with_seed(1);
    let (cases, annotations) = spec.generate().unwrap();
    let ctx = TrainContext {
        labels: LabelSet::new(&spec.charge_set().unwrap()),
        attributes: None,
        knowledge: None,
    };
    (spec, cases, annotations, ctx)
}

fn fixture(arch: Architecture) -> Fixture {
    let (spec, cases, annotations, ctx) = corpus();
    let config = TrainConfig {
        architecture: arch,
        epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let bundle = train(&cases.in_splits(&[Split::Train]), &cases.in_splits(&[Split::Valid]), &config, &ctx).unwrap();
    let model = AdapterRegistry::default().instantiate(bundle).unwrap();
    Fixture {
        spec,
        cases,
        annotations,
        model,
    }
}

fn forward(c: &mut Criterion) {
    for arch in [Architecture::AttnBilstm, Architecture::TopjudgeCnn] {
        let f = fixture(arch);
        let batch: Vec<_> = f.cases.iter().take(32).collect();
        c.bench_function(&format!("predict_32/{arch}"), |b| {
            b.iter(|| {
                for case in &batch {
                    std::hint::black_box(f.model.predict(case).unwrap());
                }
            })
        });
    }
}

fn one_epoch(c: &mut Criterion) {
    let (_, cases, _, ctx) = corpus();
    let train_set = cases.in_splits(&[Split::Train]);
    let valid = cases.in_splits(&[Split::Valid]);
    let config = TrainConfig {
        architecture: Architecture::AttnBilstm,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("attn_bilstm_epoch", |b| b.iter(|| train(&train_set, &valid, &config, &ctx).unwrap()));
    group.finish();
}

fn probing(c: &mut Criterion) {
    let f = fixture(Architecture::AttnBilstm);
    let config = ProbeConfig::default();
    c.bench_function("probe_extract", |b| {
        b.iter(|| extract_probe_dataset(f.model.as_ref(), &f.annotations, config.folds, 3).unwrap())
    });
    let dataset = extract_probe_dataset(f.model.as_ref(), &f.annotations, config.folds, 3).unwrap();
    let mut group = c.benchmark_group("probe");
    group.sample_size(10);
    group.bench_function("train_one_fold", |b| b.iter(|| train_probe(&dataset, 0, &config).unwrap()));
    group.finish();
}

fn audits(c: &mut Criterion) {
    let f = fixture(Architecture::TopjudgeCnn);
    let rules = synthetic_rules(&f.spec).unwrap();
    c.bench_function("perturb_rule", |b| {
        b.iter(|| run_perturbation(f.model.as_ref(), &f.cases, Some(&f.annotations), &rules[0], 50, 5).unwrap())
    });
    let held = f.annotations.in_splits(&[Split::Valid, Split::Test]);
    c.bench_function("ablate_conduct", |b| {
        b.iter(|| run_ablation(f.model.as_ref(), &held, ElementKind::Conduct).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let a: Vec<u32> = (0..10_000).map(|i| (i * 7 + i / 13) % 9).collect();
    let b: Vec<u32> = (0..10_000).map(|i| (i * 5 + i / 11) % 9).collect();
    c.bench_function("kappa_10k", |bch| bch.iter(|| cohen_kappa(&a, &b).unwrap()));
    let values: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.618).fract()).collect();
    c.bench_function("dist_summary_10k", |bch| {
        bch.iter_batched(|| values.clone(), |v| dist_summary(&v).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, forward, one_epoch, probing, audits, metrics);
criterion_main!(benches);
