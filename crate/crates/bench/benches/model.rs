use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use darer_core::data::build_token_vocab;
use darer_core::graph::{build_drtg, build_satg};
use darer_core::synth::{gen_synthetic, SynthConfig};
use darer_core::{Darer, DarerConfig, Tape};

fn graphs(c: &mut Criterion) {
    let cfg = DarerConfig::default();
    let mut group = c.benchmark_group("graphs");
    for n in [8usize, 32] {
        let speakers: Vec<usize> = (0..n).map(|i| (i * 7 / 3) % 2 + 1).collect();
        group.bench_with_input(BenchmarkId::new("satg", n), &speakers, |b, s| {
            b.iter(|| build_satg(s, cfg.satg_scheme()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("drtg", n), &n, |b, &n| {
            b.iter(|| build_drtg(n, cfg.drtg_scheme()).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let corpus = gen_synthetic(&SynthConfig {
        n_dialogs: 4,
        min_utterances: 8,
        max_utterances: 8,
        ..Default::default()
    })
    .unwrap();
    let vocab = build_token_vocab(&corpus.dialogs, 1).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for steps in [0usize, 1, 3] {
        let cfg = DarerConfig {
            hidden_dim: 64,
            embed_dim: 64,
            steps,
            dropout: 0.0,
            ..Default::default()
        };
        let model = Darer::new(cfg, vocab.len(), 3, 4, 0).unwrap();
        let dialog = model.encode_dialog(&corpus.dialogs[0], &vocab).unwrap();
        group.bench_function(BenchmarkId::new("forward", steps), |b| {
            b.iter(|| model.predict(&dialog).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", steps), |b| {
            b.iter(|| {
                let mut tape = Tape::with_params(&model.params);
                let (_, loss) = model.loss(&mut tape, &dialog, None).unwrap();
                tape.backward(loss.grand).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, graphs, model);
criterion_main!(benches);
