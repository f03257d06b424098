//! Rayon path against the sequential fallback for the two data-parallel
//! hot spots: per-utterance decoding and per-utterance gradients.
//!
//! Without the `parallel` feature both arms take the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cba_core::decoding::{decode_utterances, DecodeConfig};
use cba_core::losses::TrainConfig;
use cba_core::model::{CbaModel, ModelConfig};
use cba_core::parallel::{map_ordered, Execution};
use cba_core::synth_data::FeatureSequence;
use cba_core::tensor::Matrix;
use cba_core::tokenizer::BpeModel;
use cba_core::train::utterance_gradients;

fn setup() -> (CbaModel, BpeModel, Vec<(String, FeatureSequence)>) {
    let corpus = ["ka lu mi", "ka mi ro", "lu ro ka mi", "mi mi ro"];
    let bpe = BpeModel::train(&corpus, 24, 1).unwrap();
    let cfg = ModelConfig {
        d_model: 32,
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        num_heads: 4,
        d_ff: 64,
        d_feat: 16,
        vocab_size: bpe.vocab_size(),
        bias_lstm_hidden: 32,
        subsample: 2,
    };
    let model = CbaModel::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items = (0..32)
        .map(|i| {
            let t = rng.gen_range(24..40);
            let data = (0..t * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = FeatureSequence::new(Matrix::from_vec(t, 16, data).unwrap()).unwrap();
            (format!("u{i}"), f)
        })
        .collect();
    (model, bpe, items)
}

fn bench(c: &mut Criterion) {
    let (model, bpe, items) = setup();
    let modes = [("auto", Execution::Auto), ("sequential", Execution::Sequential)];

    let dcfg = DecodeConfig {
        beam_size: 4,
        ..DecodeConfig::default()
    };
    let mut group = c.benchmark_group("decode_32_utterances");
    group.sample_size(10);
    for (name, exec) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| decode_utterances(&model, &bpe, &items, None, &dcfg, exec).unwrap())
        });
    }
    group.finish();

    let tcfg = TrainConfig::default();
    let targets: Vec<usize> = (4..bpe.vocab_size()).take(6).collect();
    let mut group = c.benchmark_group("gradients_32_utterances");
    group.sample_size(10);
    for (name, exec) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                map_ordered(&items, exec, |(_, f)| utterance_gradients(&model, f, &targets, None, &tcfg).unwrap().1)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
