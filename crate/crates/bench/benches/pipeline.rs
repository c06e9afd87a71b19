use criterion::{criterion_group, criterion_main, Criterion};
use pr2r_bench::{pk_labels, random_images, random_tensor};
use pr2r_core::model::{ModelParams, Snapshot};
use pr2r_core::objectives::{condense_loss, id_loss, CondenseBatch};
use pr2r_core::{BackwardMode, Graph};

fn conv(c: &mut Criterion) {
    let x = random_images(8, 1);
    let kernel = random_tensor(&[16, 3, 3, 3], 2);
    c.bench_function("conv2d 8x3x32x16 -> 16 channels", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let kn = g.constant(kernel.clone());
            g.conv2d(xn, kn, 1, 1).unwrap()
        })
    });
}

fn id_loss_backward(c: &mut Criterion) {
    let params = ModelParams::init(3, 20).unwrap();
    let x = random_images(32, 4);
    let labels = pk_labels(8, 4);
    c.bench_function("id loss forward+backward, batch 32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let xn = g.constant(x.clone());
            let total = id_loss(&mut g, &params, &p, xn, &labels).unwrap().total(&mut g).unwrap();
            g.backward(total, &p.leaves(), BackwardMode::Values).unwrap()
        })
    });
}

fn condense_step(c: &mut Criterion) {
    let snapshots: Vec<Snapshot> = (0..4)
        .map(|k| Snapshot {
            stage: k + 1,
            params: ModelParams::init(10 + k as u64, 20).unwrap(),
        })
        .collect();
    let synthetic = random_images(2, 5);
    let real = random_images(4, 6);
    let others = random_images(8, 7);
    let syn_labels = vec![0; 2];
    let real_labels = vec![0; 4];
    let mut id_labels = syn_labels.clone();
    id_labels.extend(pk_labels(4, 2).iter().map(|l| l + 1));
    let mut group = c.benchmark_group("condensation");
    group.sample_size(10);
    group.bench_function("one identity, 4 snapshots, pixel gradient", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let syn = g.leaf(synthetic.clone());
            let rest = g.constant(others.clone());
            let id_images = g.concat_outer(&[syn, rest]).unwrap();
            let batch = CondenseBatch {
                synthetic: syn,
                synthetic_labels: &syn_labels,
                real: &real,
                real_labels: &real_labels,
                id_images,
                id_labels: &id_labels,
            };
            let (loss, _) = condense_loss(&mut g, &batch, &snapshots, 0.01).unwrap();
            g.backward(loss, &[("synthetic", syn)], BackwardMode::Values).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv, id_loss_backward, condense_step);
criterion_main!(benches);
