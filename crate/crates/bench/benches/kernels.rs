use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lumaflow_bench::{clips, net, paired};
use lumaflow_core::flow::sample_edit;
use lumaflow_core::metrics::{canny, horn_schunck, metric_sf, ssim};
use lumaflow_core::trainer::Trainer;
use lumaflow_core::{ConditionSet, Graph, NetConfig, SamplerConfig, Tensor, TrainConfig, VelocityModel};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for ch in [8usize, 16, 32] {
        let x = Tensor::<f32>::new(
            vec![8, ch, 32, 32],
            (0..8 * ch * 1024).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let w = Tensor::<f32>::new(
            vec![ch, ch, 3, 3],
            (0..ch * ch * 9).map(|i| (i as f32 * 0.11).cos() * 0.1).collect(),
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::new("forward_backward", ch), &ch, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
                let y = g.conv2d(xv, wv, 1, 1).unwrap();
                let l = g.mean(y).unwrap();
                g.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let clip = clips(1).remove(0);
    let cond = ConditionSet::reconstruction(&clip);
    let model = net(NetConfig::default());
    c.bench_function("velocity_net_forward_32x32x8", |b| {
        b.iter(|| model.velocity(&clip, 0.5, &cond).unwrap())
    });

    let data = clips(16);
    let cfg = TrainConfig {
        total_steps: usize::MAX,
        net: NetConfig {
            hidden: 16,
            depth: 1,
            groups: 4,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_batch8_h16", |b| {
        b.iter(|| trainer.train_step(&data).unwrap())
    });
    group.finish();

    let pair = paired();
    let small = net(NetConfig {
        hidden: 16,
        depth: 1,
        groups: 4,
        ..NetConfig::default()
    });
    let mut group = c.benchmark_group("editing");
    group.sample_size(10);
    group.bench_function("sample_edit_20_steps_h16", |b| {
        b.iter(|| sample_edit(&small, &pair.source, &pair.reference, &SamplerConfig::default()).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let pair = paired();
    let (a, b) = (pair.source.frame(0).luma(), pair.source.frame(1).luma());
    c.bench_function("ssim_32x32", |bch| bch.iter(|| ssim(&a, &b).unwrap()));
    c.bench_function("canny_32x32", |bch| bch.iter(|| canny(&a)));
    c.bench_function("horn_schunck_32x32", |bch| bch.iter(|| horn_schunck(&a, &b).unwrap()));
    c.bench_function("metric_sf_clip", |bch| {
        bch.iter(|| metric_sf(&pair.source, &pair.target_gt).unwrap())
    });
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);
