use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chase_core::backbone::{init_backbone, probs_from_logits, BackboneConfig, Binder};
use chase_core::consistency::jsd_loss;
use chase_core::evaluation::{assd, dsc};
use chase_core::heterofusion::{enumerate_views, hetero_forward_batch, widen_from_single, HeteroRequest};
use chase_core::nn::kernels::{conv2d_backward, conv2d_forward};
use chase_core::nn::{ConvGeom, Graph, Tensor};
use chase_core::pseudolabel::extract_holes;
use chase_core::synthdata::PhaseId;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random([8, 16, 48, 48], &mut rng);
    let w = random([32, 16, 3, 3], &mut rng);
    let b = random([32, 1, 1, 1], &mut rng);
    let geom = ConvGeom { kernel: 3, dilation: 1 };
    c.bench_function("conv3x3 forward 8x16x48x48 -> 32", |bn| {
        bn.iter(|| conv2d_forward(black_box(&x), &w, &b, geom))
    });
    let dout = conv2d_forward(&x, &w, &b, geom);
    c.bench_function("conv3x3 backward 8x16x48x48 -> 32", |bn| {
        bn.iter(|| conv2d_backward(black_box(&x), &w, &dout, geom, [true, true, true]))
    });
}

fn losses_and_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<Tensor> = (0..15).map(|_| probs_from_logits(&random([8, 3, 48, 48], &mut rng))).collect();
    let refs: Vec<&Tensor> = preds.iter().collect();
    c.bench_function("jsd 15 views 8x48x48", |bn| bn.iter(|| jsd_loss(black_box(&refs)).unwrap()));

    let shape = [16, 48, 48];
    let len = shape.iter().product();
    let ball = |r: f64, off: f64| -> Vec<bool> {
        (0..len)
            .map(|i| {
                let (z, y, x) = ((i / 2304) as f64, ((i / 48) % 48) as f64, (i % 48) as f64);
                ((z - 8.0) / 6.0).powi(2) + ((y - 24.0 - off) / r).powi(2) + ((x - 24.0) / r).powi(2) <= 1.0
            })
            .collect()
    };
    let (p, g) = (ball(15.0, 1.0), ball(14.0, 0.0));
    c.bench_function("dsc 16x48x48", |bn| bn.iter(|| dsc(black_box(&p), &g).unwrap()));
    c.bench_function("assd 16x48x48", |bn| bn.iter(|| assd(black_box(&p), &g, shape, [2.5, 0.8, 0.8]).unwrap()));
    let shell: Vec<bool> = p.iter().zip(ball(8.0, 0.0)).map(|(&a, b)| a && !b).collect();
    c.bench_function("extract_holes 16x48x48", |bn| bn.iter(|| extract_holes(black_box(&shell), shape, 100)));
}

fn network(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let params = widen_from_single(&init_backbone(&cfg, 2).unwrap(), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: BTreeMap<PhaseId, Tensor> = PhaseId::ALL.iter().map(|&p| (p, random([1, 1, 48, 48], &mut rng))).collect();
    let combos: Vec<_> = enumerate_views(&PhaseId::ALL).unwrap().into_iter().take(4).collect();
    c.bench_function("hetero forward+backward, 4 combos, 48x48", |bn| {
        bn.iter(|| {
            let mut g = Graph::new();
            let req = HeteroRequest {
                images: images.iter().map(|(&p, t)| (p, g.input(t.clone()))).collect(),
                combos: combos.clone(),
            };
            let outs = hetero_forward_batch(&mut g, &Binder::trainable(&params), &cfg, &[req]).unwrap();
            let finals: Vec<_> = outs[0].iter().map(|o| o.final_probs()).collect();
            let loss = chase_core::consistency::jsd(&mut g, &finals, false).unwrap();
            black_box(g.backward(loss).into_params())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, losses_and_metrics, network
}
criterion_main!(benches);
