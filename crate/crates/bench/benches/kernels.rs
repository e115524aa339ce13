use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use featmim::config::RunConfig;
use featmim::diversity::corpus_diversity;
use featmim::gradcheck::tiny_config;
use featmim::masking::{generate_mask, MaskSpec};
use featmim::model::{Bound, ModelParams};
use featmim::teacher::FrozenTeacher;
use featmim::trainer::{sample_loss, StepPath};
use featmim::{Tape, Tensor};

fn filled(shape: Vec<usize>, salt: usize) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i * 7919 + salt * 104_729) % 1013) as f32 / 506.5 - 1.0)
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = filled(vec![196, 256], 1);
    let b = filled(vec![256, 256], 2);
    c.bench_function("matmul 196x256x256", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn diversity(c: &mut Criterion) {
    let corpus: Vec<Tensor> = (0..16).map(|i| filled(vec![196, 64], i)).collect();
    c.bench_function("corpus_diversity 16x196x64", |bench| {
        bench.iter(|| corpus_diversity(black_box(&corpus)).unwrap())
    });
}

fn masking(c: &mut Criterion) {
    let spec = MaskSpec::default();
    c.bench_function("generate_mask 224/16/32", |bench| {
        bench.iter(|| generate_mask(black_box(&spec)).unwrap())
    });
}

fn small_run() -> RunConfig {
    let mut cfg = tiny_config();
    cfg.model.image_side = 32;
    cfg.model.embed_dim = 32;
    cfg.model.dec_width = 32;
    cfg.mask.image_side = 32;
    cfg.mask.block_side = 8;
    cfg
}

fn train_step(c: &mut Criterion) {
    let cfg = small_run();
    let image = filled(vec![3, 32, 32], 3);
    let teacher = FrozenTeacher::new(&cfg.teacher, 3).unwrap();
    let targets = teacher.extract("bench", &image, cfg.model.patch_side).unwrap().tokens;
    let mask = generate_mask(&cfg.mask).unwrap();
    let params: ModelParams = ModelParams::init(&cfg.model, 0).unwrap();
    c.bench_function("forward+backward 32px embed 32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let bound = Bound::new(&params, &tape).unwrap();
            let loss = sample_loss(&bound, &image, &targets, &mask, &cfg.loss, StepPath::Full).unwrap();
            tape.backward(loss.total).unwrap()
        })
    });
    c.bench_function("teacher extract 32px", |bench| {
        bench.iter(|| teacher.extract("bench", black_box(&image), 4).unwrap())
    });
}

criterion_group!(benches, matmul, diversity, masking, train_step);
criterion_main!(benches);
