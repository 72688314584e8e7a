use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgcb_core::align::{ctc_forced_align, ctc_forward_backward};
use sgcb_core::nn::{
    log_softmax_rows, masked_prediction_loss, sample_mask, EncoderConfig, EncoderModel, ForwardOptions, HeadKind,
    MaskSpec,
};
use sgcb_core::quantize::{kmeans_assign, kmeans_fit, CodebookSource, FeatureKind, KmeansConfig};

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn encoder(c: &mut Criterion) {
    // Reference size: 2 layers, H=32, ~70 input frames per utterance.
    let model = EncoderModel::new(EncoderConfig::default(), HeadKind::Targets, 0).unwrap();
    let x = random(70, 8, 1);
    let mut mask = sample_mask(35, 0.08, 5, 2);
    if mask.is_empty() {
        mask = MaskSpec::from_starts(35, vec![3], 5);
    }
    let targets: Vec<u16> = (0..35).map(|i| (i % 13) as u16).collect();
    c.bench_function("encoder_forward", |b| {
        b.iter(|| model.forward(black_box(&x), &ForwardOptions::default()).unwrap())
    });
    c.bench_function("encoder_forward_backward_masked", |b| {
        b.iter(|| {
            let opts = ForwardOptions {
                mask: Some(&mask),
                dropout_seed: None,
            };
            let (out, cache) = model.forward(black_box(&x), &opts).unwrap();
            let (_, g) = masked_prediction_loss(&out.logits, &targets, &mask).unwrap();
            model.backward(&cache, &g, true)
        })
    });
}

fn ctc(c: &mut Criterion) {
    let lp = log_softmax_rows(&random(35, 13, 3).view());
    let target: Vec<u16> = (0..10).map(|i| 1 + (i % 12) as u16).collect();
    c.bench_function("ctc_forward_backward", |b| {
        b.iter(|| ctc_forward_backward(black_box(&lp.view()), &target).unwrap())
    });
    c.bench_function("ctc_forced_align", |b| {
        b.iter(|| ctc_forced_align(black_box(&lp.view()), &target).unwrap())
    });
}

fn kmeans(c: &mut Criterion) {
    let x = random(4000, 16, 4);
    let source = CodebookSource {
        kind: FeatureKind::Raw,
        model_hash: None,
        layer: None,
    };
    let config = KmeansConfig {
        k: 32,
        seed: 5,
        max_iters: 10,
        rel_tol: 0.0,
    };
    let cb = kmeans_fit(&x.view(), &config, source.clone()).unwrap();
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    group.bench_function("fit_4000x16_k32_10iters", |b| {
        b.iter_batched(
            || source.clone(),
            |s| kmeans_fit(black_box(&x.view()), &config, s).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("assign_4000x16_k32", |b| b.iter(|| kmeans_assign(&cb, black_box(&x.view())).unwrap()));
    group.finish();
}

criterion_group!(benches, encoder, ctc, kmeans);
criterion_main!(benches);
