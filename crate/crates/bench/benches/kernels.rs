use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dcunet_core::network::ops::{conv3d, ConvGeometry};
use dcunet_core::network::{build_network, NetworkConfig};
use dcunet_core::objectives::hd95;
use dcunet_core::patches::{plan_patches, stitch};
use dcunet_core::postprocess::{connected_components, Connectivity};
use dcunet_core::volumes::BoundingBox;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3d");
    for &(ch, n) in &[(4usize, 32usize), (16, 16)] {
        let geo = ConvGeometry {
            in_channels: ch,
            out_channels: ch,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let input = Array4::from_shape_fn((ch, n, n, n), |_| rng.random_range(-1.0..1.0));
        let weight: Vec<f64> = (0..geo.weight_len()).map(|_| rng.random_range(-0.1..0.1)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}ch_{n}^3")), &input, |b, x| {
            b.iter(|| conv3d(black_box(x), &weight, None, &geo))
        });
    }
    group.finish();

    let model = build_network(&NetworkConfig {
        patch_size: [32; 3],
        depth: 3,
        base_filters: 4,
        groupnorm_groups: 2,
        ..NetworkConfig::default()
    })
    .unwrap();
    let input = Array4::from_shape_fn((4, 32, 32, 32), |_| rng.random_range(-1.0..1.0));
    c.bench_function("network_forward_32^3", |b| b.iter(|| model.forward(black_box(&input), None).unwrap()));
}

fn components(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = Array3::from_shape_fn((64, 64, 64), |_| rng.random_bool(0.3));
    c.bench_function("connected_components_64^3", |b| {
        b.iter(|| connected_components(black_box(&mask), Connectivity::TwentySix))
    });
}

fn stitching(c: &mut Criterion) {
    let shape = [240, 240, 155];
    let bbox = BoundingBox::new([40, 50, 20], [200, 190, 140]);
    let plan = plan_patches(&bbox, shape, [64; 3]).unwrap();
    let patches: Vec<_> = plan.specs.iter().map(|s| Array4::from_elem((3, s.size[0], s.size[1], s.size[2]), 0.5)).collect();
    c.bench_function("stitch_240x240x155", |b| b.iter(|| stitch(black_box(&patches), &plan).unwrap()));
}

fn distance(c: &mut Criterion) {
    let ball = |r: f64, cx: f64| {
        Array3::from_shape_fn((64, 64, 64), |(x, y, z)| {
            let d = [x as f64 - cx, y as f64 - 32.0, z as f64 - 32.0];
            d.iter().map(|v| v * v).sum::<f64>() < r * r
        })
    };
    let (a, b) = (ball(18.0, 30.0), ball(16.0, 34.0));
    c.bench_function("hd95_64^3", |bench| bench.iter(|| hd95(black_box(&a), black_box(&b), [1.0; 3])));
}

criterion_group!(benches, conv, components, stitching, distance);
criterion_main!(benches);
