use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use rationale_core::backend::{StepDistribution, TinyTransformer, TrainRecord, TransformerConfig};
use rationale_core::eval::corpus_bleu;
use rationale_core::losses::{mlr_loss, normalize_confidence_weights};
use rationale_core::selftrain::gold_records;
use rationale_core::text::Vocab;
use rationale_core::{LossConfig, PromptFormat, Role, Seq2Seq, SyntheticTaskSpec};

fn bleu(c: &mut Criterion) {
    let task = SyntheticTaskSpec::default().generate(0).unwrap();
    let refs: Vec<String> = task.test.iter().map(|e| e.explanation.clone()).collect();
    let mut cands = refs.clone();
    cands.rotate_left(1);
    c.bench_function("corpus_bleu/150 sentences", |b| b.iter(|| corpus_bleu(black_box(&cands), black_box(&refs)).unwrap()));
}

fn losses(c: &mut Criterion) {
    let v = 512;
    let dists: Vec<StepDistribution> = (0..32)
        .map(|t| {
            let raw: Vec<f64> = (0..v).map(|i| 1.0 + ((i * 7 + t * 13) % 17) as f64).collect();
            let s: f64 = raw.iter().sum();
            StepDistribution::new(raw.into_iter().map(|x| x / s).collect()).unwrap()
        })
        .collect();
    c.bench_function("mlr_loss/32 steps x 512", |b| b.iter(|| mlr_loss(black_box(&dists)).unwrap()));
    let conf: Vec<f64> = (0..16).map(|i| 0.05 * i as f64).collect();
    c.bench_function("normalize_confidence_weights/16", |b| b.iter(|| normalize_confidence_weights(black_box(&conf)).unwrap()));
}

fn transformer(c: &mut Criterion) {
    let task = SyntheticTaskSpec::default().generate(0).unwrap();
    let fmt = PromptFormat::default();
    let texts: Vec<String> = task
        .train
        .iter()
        .flat_map(|e| [fmt.predictor_input(&e.input_text), fmt.joint_target(&e.label, &e.explanation)])
        .collect();
    let vocab = Arc::new(Vocab::build(texts.iter().map(String::as_str)));
    let records = gold_records(&task.train[..8], Role::Joint, &fmt, 0.8).unwrap();
    let refs: Vec<&TrainRecord> = records.iter().collect();
    let weights = vec![1.0; refs.len()];
    let loss = LossConfig::default();
    let mut model = TinyTransformer::new(Role::Joint, vocab, TransformerConfig::default(), 0).unwrap();

    let mut group = c.benchmark_group("transformer");
    group.sample_size(20);
    group.bench_function("train_step/batch 8", |b| {
        b.iter(|| model.train_step(black_box(&refs), &weights, &loss).unwrap())
    });
    let inputs: Vec<String> = task.test[..32].iter().map(|e| fmt.predictor_input(&e.input_text)).collect();
    group.bench_function("generate_batch/32 inputs", |b| b.iter(|| model.generate_batch(black_box(&inputs), 24).unwrap()));
    group.finish();
}

criterion_group!(benches, bleu, losses, transformer);
criterion_main!(benches);
