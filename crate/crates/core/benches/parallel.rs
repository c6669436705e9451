//! Sequential against rayon-parallel execution for the two data-parallel
//! hot paths: per-example gradients of a training batch, and decoding.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use slp_core::composer::SpeechEmbeddingSequence;
use slp_core::exec::Execution;
use slp_core::generator::{decode_utterance, DecodeConfig, OutputKind};
use slp_core::model::{ModelConfig, SlpModel};
use slp_core::numkit::Tensor;
use slp_core::rng;
use slp_core::trainer::{MaskingPolicy, Regime, TrainConfig, Trainer, TrainingExample};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn model() -> SlpModel {
    let mut cfg = ModelConfig::desk(120);
    cfg.max_frames = 60;
    cfg.max_text = 12;
    SlpModel::init(cfg, 3).unwrap()
}

fn utterances(n: usize) -> Vec<TrainingExample> {
    let mut r = rng::stream(3, &[0xbe]);
    (0..n)
        .map(|i| {
            let frames = r.random_range(30..=60);
            let data = (0..frames * 32).map(|_| StandardNormal.sample(&mut r)).collect();
            let speech = SpeechEmbeddingSequence::new(Tensor::new(vec![frames, 32], data).unwrap(), format!("u{i}")).unwrap();
            let text = (0..r.random_range(4..=10)).map(|_| r.random_range(7..120)).collect();
            TrainingExample::new(speech, text).unwrap()
        })
        .collect()
}

fn batch_gradients(c: &mut Criterion) {
    let data = utterances(16);
    let batch: Vec<&TrainingExample> = data.iter().collect();
    let indices: Vec<usize> = (0..batch.len()).collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut tc = TrainConfig::new(Regime::PretrainAsr);
        tc.execution = exec;
        let trainer = Trainer::new(model(), tc, MaskingPolicy::default()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(name), &trainer, |b, t| {
            b.iter(|| t.batch_gradients(&batch, &indices, 0).unwrap())
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let data = utterances(8);
    let m = model();
    let cfg = DecodeConfig::new(OutputKind::Transcript, 8);
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.try_map_indexed(data.len(), |i| decode_utterance(&data[i].speech, &m, None, &cfg))
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, decoding);
criterion_main!(benches);
