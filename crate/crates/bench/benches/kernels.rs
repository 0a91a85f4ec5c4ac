use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sgxp_bench::{radiograph, radiographs};
use sgxp_core::autodiff::{Mode, Network};
use sgxp_core::classification::{init_classifier, ClassifierConfig};
use sgxp_core::seed::derive_rng;
use sgxp_core::segmentation::{build_unet, mask_metrics, postprocess_mask, UNetConfig};
use sgxp_core::xai::{gradcam, lime_explain, quickshift, LimeConfig};
use sgxp_core::{Image, Tensor};

fn classifier() -> Network<f32> {
    let cfg = ClassifierConfig {
        input_size: 64,
        channels: vec![8, 16, 32],
        head: vec![64, 32],
        dropout_rate: 0.2,
        bn_momentum: 0.9,
        ..Default::default()
    };
    init_classifier(&cfg, &["a".to_string(), "b".to_string()], 0).unwrap()
}

fn autodiff(c: &mut Criterion) {
    let net = classifier();
    let batch: Tensor<f32> = Image::batch(&radiographs(16, 64)).unwrap();
    c.bench_function("classifier forward, batch 16 at 64px", |b| {
        b.iter(|| black_box(net.forward_eval(&batch).unwrap().0))
    });
    c.bench_function("classifier forward+backward, batch 16 at 64px", |b| {
        let mut rng = derive_rng(0, "bench");
        b.iter(|| {
            let mut n = net.clone();
            let (y, mut tape) = n.forward(&batch, Mode::Train, &mut rng).unwrap();
            let dy = Tensor::full(y.shape(), 1.0);
            black_box(tape.backward(&n, &dy).unwrap())
        })
    });
    let unet = Network::<f32>::new(build_unet(&UNetConfig::default()).unwrap(), &mut derive_rng(0, "bench")).unwrap();
    let one: Tensor<f32> = Image::batch(&radiographs(1, 64)).unwrap();
    c.bench_function("U-Net forward, 64px", |b| b.iter(|| black_box(unet.forward_eval(&one).unwrap().0)));
}

fn morphology(c: &mut Criterion) {
    let (_, mask) = radiograph(400);
    c.bench_function("postprocess_mask 400px, radius 5", |b| b.iter(|| black_box(postprocess_mask(&mask, 5, 5))));
    let (_, other) = radiograph(400);
    c.bench_function("mask_metrics 400px", |b| b.iter(|| black_box(mask_metrics(&mask, &other).unwrap())));
}

fn explanation(c: &mut Criterion) {
    let (img, _) = radiograph(64);
    c.bench_function("quickshift 64px", |b| b.iter(|| black_box(quickshift(&img, 4.0, 8.0, 1.0).unwrap())));
    let cfg = LimeConfig { n_samples: 200, ..Default::default() };
    c.bench_function("LIME 200 samples, mean-intensity blackbox", |b| {
        b.iter(|| {
            let mut bb = |p: &Image| -> sgxp_core::Result<Vec<f64>> {
                let m = p.mean() as f64;
                Ok(vec![1.0 - m, m])
            };
            black_box(lime_explain(&img, &mut bb, 1, &cfg, &mut derive_rng(0, "bench")).unwrap())
        })
    });
    let net = classifier();
    c.bench_function("Grad-CAM 64px", |b| b.iter(|| black_box(gradcam(&net, &img, 1).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = autodiff, morphology, explanation
}
criterion_main!(benches);
