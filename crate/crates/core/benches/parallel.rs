//! Sequential vs data-parallel execution of the two hot loops: per-sample
//! gradients of a training step and per-clip caption generation.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vidcap_core::data::{generate_clip, SynthSpec, Vocabulary};
use vidcap_core::exec::Execution;
use vidcap_core::infer::{generate_all, GenerateConfig};
use vidcap_core::model::ModelConfig;
use vidcap_core::train::{Example, TrainConfig, Trainer};

const CLIPS: usize = 8;

fn setup() -> (ModelConfig, Vocabulary, Vec<Example>) {
    let samples: Vec<_> = (0..CLIPS).map(|i| generate_clip(&SynthSpec::default(), i).unwrap()).collect();
    let vocab = Vocabulary::build(samples.iter().flat_map(|s| s.captions.iter().map(String::as_str))).unwrap();
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::toy()
    };
    let data = samples
        .into_iter()
        .map(|s| Example {
            ids: vocab.wrap(&s.captions[0]),
            clip: Arc::new(s.clip),
        })
        .collect();
    (model, vocab, data)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn train_step_gradients(c: &mut Criterion) {
    let (model, _, data) = setup();
    let cfg = TrainConfig {
        batch_size: CLIPS,
        accumulation_steps: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_step_gradients");
    group.sample_size(10);
    for (name, exec) in modes() {
        let trainer = Trainer::new(model.clone(), cfg.clone(), exec).unwrap();
        let indices = trainer.step_indices(0, data.len());
        let samples = trainer.prepare(0, &data, &indices).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.gradients(&data, &samples, 1.0).unwrap()))
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let (model, vocab, data) = setup();
    let params = vidcap_core::model::init_params::<f32>(&model, 0).unwrap();
    let clips: Vec<_> = data.iter().map(|e| (*e.clip).clone()).collect();
    let opts = GenerateConfig { beam: 2, max_len: 8 };
    let mut group = c.benchmark_group("generate_all");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(generate_all(&params, &model, &vocab, &clips, &opts, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step_gradients, generation);
criterion_main!(benches);
