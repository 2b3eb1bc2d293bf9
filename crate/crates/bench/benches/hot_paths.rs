use std::hint::black_box;

use attrshield::cbm::{fit_head, CbmConfig, CbmProbe};
use attrshield::datagen::{categories_for, generate, vocabulary_texts};
use attrshield::vlm::objective::{prompt_cross_entropy, ImageInput};
use attrshield::vlm::Vocabulary;
use attrshield::{ClassPrompt, DatasetSpec, DualEncoderModel, GeneratorKind, Image, ModelConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> DualEncoderModel {
    let texts = vocabulary_texts(GeneratorKind::ColoredMnist);
    let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
    DualEncoderModel::new(ModelConfig::default(), vocab, 10, 0).unwrap()
}

fn images(n: usize) -> Vec<Image> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| Image::from_fn(32, 32, |_, _| [r.random(), r.random(), r.random()]))
        .collect()
}

fn prompts() -> Vec<ClassPrompt> {
    categories_for(GeneratorKind::ColoredMnist, 10)
        .iter()
        .map(|c| ClassPrompt::new(c.id, format!("a photo of a {}, {}", c.name, c.core.join(", "))).unwrap())
        .collect()
}

fn encoders(c: &mut Criterion) {
    let m = model();
    let img = images(1).pop().unwrap();
    let p = prompts();
    c.bench_function("encode_image", |b| b.iter(|| m.encode_image(black_box(&img)).unwrap()));
    c.bench_function("encode_text", |b| b.iter(|| m.encode_text(black_box(&p[3])).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let m = model();
    let imgs = images(32);
    let p = prompts();
    let feats: Vec<Vec<f64>> = imgs.iter().map(|i| m.image_features(i).unwrap()).collect();
    let targets: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let w = vec![1.0 / 32.0; 32];
    c.bench_function("peft_batch_gradient_32", |b| {
        b.iter(|| {
            let inputs: Vec<ImageInput<'_>> = feats.iter().map(|f| ImageInput::Features(f)).collect();
            let mut g = m.params.zeros_like();
            prompt_cross_entropy(&m, &inputs, &targets, &w, &p, Some(&mut g)).unwrap()
        })
    });
    c.bench_function("full_batch_gradient_4", |b| {
        b.iter(|| {
            let inputs: Vec<ImageInput<'_>> = imgs[..4].iter().map(ImageInput::Pixels).collect();
            let mut g = m.params.zeros_like();
            prompt_cross_entropy(&m, &inputs, &targets[..4], &w[..4], &p, Some(&mut g)).unwrap()
        })
    });
}

fn probe_fit(c: &mut Criterion) {
    let (k, n) = (10, 40);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<Vec<f64>> = (0..160).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<usize> = (0..160).map(|i| i % k).collect();
    let empty = CbmProbe {
        bottleneck: vec![vec![0.0]; n],
        index: (0..n).map(|j| (j / 4, j % 4)).collect(),
        ranges: (0..k).map(|c| 4 * c..4 * c + 4).collect(),
        categories: (0..k).map(|c| c.to_string()).collect(),
        head: vec![vec![0.0; n]; k],
        scaling: None,
    };
    c.bench_function("cbm_fit_head_10x40", |b| {
        b.iter(|| {
            let mut probe = empty.clone();
            fit_head(&mut probe, &x, &y, &CbmConfig::default()).unwrap()
        })
    });
}

fn datagen(c: &mut Criterion) {
    let spec = DatasetSpec {
        generator: GeneratorKind::ShapesOnTextures,
        classes: 10,
        shots: 16,
        test_per_class: 10,
        rho: 0.95,
        test_rho: None,
        class_rho: None,
        seed: 0,
    };
    c.bench_function("generate_shapes_10x26", |b| b.iter(|| generate(black_box(&spec)).unwrap()));
}

criterion_group!(benches, encoders, training_step, probe_fit, datagen);
criterion_main!(benches);
