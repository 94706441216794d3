use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hvcomp::config::TrainConfig;
use hvcomp::data::{occupancy_oracle, ShapeSpec};
use hvcomp::decoder::grid_points;
use hvcomp::meshing::marching_cubes_closed;
use hvcomp::metrics::{chamfer_l1, tmd, uhd, TmdMode, UhdMode};
use hvcomp::model::{init_model, ModelConfig};
use hvcomp::pipeline::Model;
use hvcomp::train::{batch_for, elbo_loss};
use hvcomp_bench::{random_cloud, sphere_item};

fn training_step(c: &mut Criterion) {
    let cfg = TrainConfig {
        model: ModelConfig { resolution: 16, channels: 16, rank: 4, levels: 3, latent_dim: 8, ..ModelConfig::default() },
        batch: 1,
        queries: 1024,
        ..TrainConfig::default()
    };
    let store = init_model(&cfg.model, 0).unwrap();
    let items = vec![sphere_item(0)];
    let (batch, seeds) = batch_for(&cfg, &items, 1);
    c.bench_function("elbo_forward_backward_res16", |b| {
        b.iter(|| elbo_loss(&cfg.model, &store, black_box(&batch), &seeds, 0.1, false).unwrap())
    });
}

fn completion(c: &mut Criterion) {
    let mut cfg = TrainConfig::micro();
    cfg.grid = 32;
    let model = Model { store: init_model(&cfg.model, 0).unwrap(), cfg };
    let item = sphere_item(1);
    c.bench_function("prior_completion_grid32_micro", |b| {
        b.iter(|| model.complete(black_box(&item.partial), 3).unwrap())
    });
}

fn meshing(c: &mut Criterion) {
    let spec = ShapeSpec::sphere([0.0; 3], 0.4);
    let grid: Vec<f64> = grid_points(64).iter().map(|q| occupancy_oracle(&spec, q) as f64).collect();
    c.bench_function("marching_cubes_sphere_64", |b| {
        b.iter(|| marching_cubes_closed(black_box(&grid), 64, 0.5).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let a = random_cloud(2048, 1);
    let clouds: Vec<_> = (0..10).map(|s| random_cloud(2048, 10 + s)).collect();
    c.bench_function("chamfer_l1_2048", |b| b.iter(|| chamfer_l1(black_box(&a), &clouds[0]).unwrap()));
    c.bench_function("uhd_10x2048", |b| b.iter(|| uhd(black_box(&a), &clouds, UhdMode::MaxMin).unwrap()));
    c.bench_function("tmd_10x2048", |b| b.iter(|| tmd(black_box(&clouds), TmdMode::MeanPairs).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = training_step, completion, meshing, metrics
}
criterion_main!(benches);
