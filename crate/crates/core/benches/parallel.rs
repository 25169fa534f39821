use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gcf_core::data::{synth_image, Dataset, SynthOptions};
use gcf_core::model::ModelConfig;
use gcf_core::parallel::Parallelism;
use gcf_core::train::{batch_gradient, evaluate};
use gcf_core::{GcfModel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(per_class: usize) -> Dataset<f32> {
    let opts = SynthOptions {
        n_per_class: per_class,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..opts.classes {
        for _ in 0..per_class {
            let px = synth_image(class, &opts, &mut rng);
            let data = px.iter().map(|&p| p as f32 / 255.0).collect();
            images.push(Tensor::new(vec![1, opts.size, opts.size], data).unwrap());
            labels.push(class);
        }
    }
    Dataset {
        images,
        labels,
        num_classes: opts.classes,
    }
}

fn modes() -> Vec<(&'static str, Parallelism)> {
    let mut modes = vec![("sequential", Parallelism::Sequential)];
    if Parallelism::threads_available() {
        modes.push(("threads", Parallelism::Threads));
    }
    modes
}

fn bench_batch_gradient(c: &mut Criterion) {
    let data = dataset(5);
    let model = GcfModel::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(42);
    let batch: Vec<usize> = (0..32).collect();
    let mut group = c.benchmark_group("batch_gradient_32");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| batch_gradient(&model, &params, &data, &batch, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let data = dataset(10);
    let model = GcfModel::new(ModelConfig::default()).unwrap();
    let params = model.init_params::<f32>(42);
    let mut group = c.benchmark_group("evaluate_70");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate(&model, &params, &data, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradient, bench_evaluate);
criterion_main!(benches);
