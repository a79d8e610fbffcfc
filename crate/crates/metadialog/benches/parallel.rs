//! Compares the data-parallel batch routines against single-threaded
//! execution. With the `parallel` feature each workload runs once on a
//! one-thread rayon pool and once on a pool sized to the machine; without
//! the feature only the sequential path exists and is benched directly.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use metadialog::corpus::{build_examples, ContextExample, Vocab};
use metadialog::datagen::{generate_corpus, ComplexityConfig};
use metadialog::domains::builtin;
use metadialog::model::{batch_backward, batch_loss, init_params, Mode, ModelConfig};
use metadialog::ParamSet;

struct Fixture {
    params: ParamSet,
    cfg: ModelConfig,
    vocab: Vocab,
    batch: Vec<ContextExample>,
}

fn fixture() -> Fixture {
    let spec = builtin("restaurant").unwrap();
    let kb = metadialog::schema::KnowledgeBase::generate(&spec, 50, 7);
    let dialogs = generate_corpus(&spec, &kb, &ComplexityConfig::default(), 8, 100).unwrap();
    let specs = vec![spec];
    let vocab = Vocab::from_dialogs(&dialogs, &specs).unwrap();
    let examples = build_examples(&dialogs, &specs, &vocab).unwrap();
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, vocab.len(), 1);
    let batch = examples.into_iter().take(32).collect();
    Fixture { params, cfg, vocab, batch }
}

fn run_forward(f: &Fixture) -> f64 {
    batch_loss(&f.params, &f.cfg, &f.vocab, &f.batch, Mode::Eval)
}

fn run_backward(f: &Fixture) -> f64 {
    let mut p = f.params.clone();
    batch_backward(&mut p, &f.cfg, &f.vocab, &f.batch, Mode::Train { dropout_seed: 3 })
}

#[cfg(feature = "parallel")]
fn bench_batch(c: &mut Criterion) {
    let f = fixture();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pooled = rayon::ThreadPoolBuilder::new().build().unwrap();

    let mut fwd = c.benchmark_group("batch_loss_32");
    fwd.bench_function("sequential", |b| b.iter(|| single.install(|| run_forward(&f))));
    fwd.bench_function("parallel", |b| b.iter(|| pooled.install(|| run_forward(&f))));
    fwd.finish();

    let mut bwd = c.benchmark_group("batch_backward_32");
    bwd.bench_function("sequential", |b| {
        b.iter_batched(|| (), |_| single.install(|| run_backward(&f)), BatchSize::SmallInput)
    });
    bwd.bench_function("parallel", |b| {
        b.iter_batched(|| (), |_| pooled.install(|| run_backward(&f)), BatchSize::SmallInput)
    });
    bwd.finish();
}

#[cfg(not(feature = "parallel"))]
fn bench_batch(c: &mut Criterion) {
    let f = fixture();
    c.bench_function("batch_loss_32/sequential", |b| b.iter(|| run_forward(&f)));
    c.bench_function("batch_backward_32/sequential", |b| {
        b.iter_batched(|| (), |_| run_backward(&f), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_batch
}
criterion_main!(benches);
