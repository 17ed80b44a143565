//! Rayon pool against a single worker on the batched hot paths. Build with
//! `--no-default-features` to measure the plain sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;

use stn_icnn::data::{synth_face, Sample, SynthSpec};
use stn_icnn::gradcheck::randn;
use stn_icnn::pipeline::{ModelSet, PipelineConfig, PredictOptions, Trainable};
use stn_icnn::tensor::{Graph, Mode, Tensor};
use stn_icnn::train::{prepare, TargetWindow};

fn faces(n: usize) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| synth_face(format!("b{i}"), &SynthSpec::random(i, 176, 192).unwrap(), (81, 81)).unwrap().sample)
        .collect()
}

fn variants(c: &mut Criterion, name: &str, f: impl Fn() + Sync) {
    let mode = if stn_icnn::par::is_parallel() { "rayon" } else { "sequential-build" };
    let one = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut g = c.benchmark_group(name);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new(mode, "pool"), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new(mode, "one-worker"), |b| b.iter(|| one.install(&f)));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let models = ModelSet::<f32>::new(PipelineConfig::desk(), 0).unwrap();
    let x: Tensor<f32> = randn(&[4, 3, 128, 128], 1).cast();
    variants(c, "coarse_forward_backward_b4", || {
        let mut g = Graph::new();
        let bound = models.bind(&mut g, Trainable { coarse: true, ..Trainable::NONE });
        let xv = g.constant(x.clone());
        let z = models.coarse_forward(&mut g, &bound, Mode::Train, xv, &mut Vec::new()).unwrap();
        let l = g.mean(z);
        g.backward(l).unwrap();
    });

    let samples = faces(16);
    variants(c, "prepare_augmented_16", || {
        prepare(&samples, true, 0).unwrap();
    });

    let pres = prepare(&samples[..8], false, 0).unwrap();
    let mut trained = models.clone();
    let batch: Vec<_> = pres.iter().collect();
    // one train-mode pass per network primes the batchnorm running statistics
    let mut g = Graph::new();
    let bound = trained.bind(&mut g, Trainable::NONE);
    let (mut coarse, mut loc) = (Vec::new(), Vec::new());
    let x = g.constant(Tensor::stack(&pres.iter().map(|p| p.resized.clone()).collect::<Vec<_>>()).unwrap());
    let z = trained.coarse_forward(&mut g, &bound, Mode::Train, x, &mut coarse).unwrap();
    let rough = trained.encode_rough(&mut g, z).unwrap();
    trained.loc_forward(&mut g, &bound, Mode::Train, rough, &mut loc).unwrap();
    trained.coarse.store.apply_bn_updates(&coarse);
    trained.loc.store.apply_bn_updates(&loc);
    let mut g = Graph::new();
    let bound = trained.bind(&mut g, Trainable::NONE);
    let mut bn = Default::default();
    stn_icnn::train::e2e_objective(&trained, &mut g, &bound, &batch, None, TargetWindow::Predicted, &mut bn).unwrap();
    let stn_icnn::pipeline::BnStats { fine, .. } = bn;
    for (m, u) in trained.fine.iter_mut().zip(&fine) {
        m.store.apply_bn_updates(u);
    }
    variants(c, "predict_all_8", || {
        trained.predict_all(&pres, &PredictOptions::default()).unwrap();
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
