//! Gradients of gradients: the condensation objective differentiated back to
//! synthetic pixels, checked against central differences of its value.

use pr2r_core::gradcheck::{gather, numeric_gradient, relative_error, Coord};
use pr2r_core::model::{ModelParams, Snapshot};
use pr2r_core::objectives::{condense_loss, gradient_match_distance, id_loss, real_gradients, CondenseBatch};
use pr2r_core::{BackwardMode, Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * 3 * 32 * 16;
    Tensor::new(vec![n, 3, 32, 16], (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn snapshots(classes: usize) -> Vec<Snapshot> {
    (0..2)
        .map(|k| Snapshot {
            stage: k + 1,
            params: ModelParams::init(40 + k as u64, classes).unwrap(),
        })
        .collect()
}

struct Fixture {
    real: Tensor,
    real_labels: Vec<usize>,
    others: Tensor,
    other_labels: Vec<usize>,
    synthetic_labels: Vec<usize>,
    snapshots: Vec<Snapshot>,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            real: images(3, 1),
            real_labels: vec![0, 0, 0],
            others: images(2, 2),
            other_labels: vec![1, 1],
            synthetic_labels: vec![0, 0],
            snapshots: snapshots(2),
        }
    }

    /// Condensation objective with the synthetic batch on the graph as `syn`.
    fn loss(&self, g: &mut Graph, syn: NodeId, alpha: f64) -> Result<NodeId> {
        let others = g.constant(self.others.clone());
        let id_images = g.concat_outer(&[syn, others])?;
        let mut id_labels = self.synthetic_labels.clone();
        id_labels.extend(&self.other_labels);
        let batch = CondenseBatch {
            synthetic: syn,
            synthetic_labels: &self.synthetic_labels,
            real: &self.real,
            real_labels: &self.real_labels,
            id_images,
            id_labels: &id_labels,
        };
        Ok(condense_loss(g, &batch, &self.snapshots, alpha)?.0)
    }

    fn pixel_gradient(&self, synthetic: &Tensor, alpha: f64) -> Tensor {
        let mut g = Graph::new();
        let syn = g.leaf(synthetic.clone());
        let loss = self.loss(&mut g, syn, alpha).unwrap();
        g.backward(loss, &[("synthetic", syn)], BackwardMode::Values).unwrap().values().remove(0)
    }

    fn value(&self, synthetic: &Tensor, alpha: f64) -> Result<f64> {
        let mut g = Graph::new();
        let syn = g.constant(synthetic.clone());
        let loss = self.loss(&mut g, syn, alpha)?;
        Ok(g.value(loss).item())
    }
}

fn sampled(numel: usize, count: usize, seed: u64) -> Vec<Coord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Coord { input: 0, index: rng.gen_range(0..numel) }).collect()
}

#[test]
fn condense_pixel_gradients_match_finite_differences() {
    let fx = Fixture::new();
    let synthetic = images(2, 3);
    // A large alpha makes the matching term, the second-order part,
    // dominate the anchoring term.
    let alpha = 10.0;
    let analytic = fx.pixel_gradient(&synthetic, alpha);
    assert_eq!(analytic.shape(), synthetic.shape());
    let coords = sampled(synthetic.numel(), 48, 4);
    let inputs = vec![synthetic];
    let numeric = numeric_gradient(|ts| fx.value(&ts[0], alpha), &inputs, &coords, H).unwrap();
    let err = relative_error(&gather(&[analytic], &coords), &numeric);
    assert!(err <= 1e-4, "second-order relative error {err:e}");
}

#[test]
fn matching_term_contributes_to_pixel_gradients() {
    let fx = Fixture::new();
    let synthetic = images(2, 3);
    let with = fx.pixel_gradient(&synthetic, 10.0);
    let without = fx.pixel_gradient(&synthetic, 0.0);
    assert!(with.max_abs_diff(&without) > 1e-3);
}

/// Matching distance between the synthetic batch's gradients (recorded
/// differentiably) and the real batch's, plus its pixel gradient.
fn matching_at(params: &ModelParams, synthetic: &Tensor, real: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let mut g = Graph::new();
    let syn = g.leaf(synthetic.clone());
    let p = params.bind(&mut g, true);
    let loss = id_loss(&mut g, params, &p, syn, labels).unwrap();
    let total = loss.total(&mut g).unwrap();
    let inner = g.backward(total, &p.leaves(), BackwardMode::Differentiable).unwrap();
    let target = real_gradients(params, real, labels).unwrap();
    let d = gradient_match_distance(&mut g, &inner, &target).unwrap();
    let value = g.value(d).item();
    let grad = g
        .backward_through_gradients(d, &inner, &[("synthetic", syn)])
        .unwrap()
        .values()
        .remove(0);
    (value, grad)
}

#[test]
fn identical_batches_match_exactly() {
    let params = ModelParams::init(11, 3).unwrap();
    let real = images(6, 12);
    let labels = [0usize, 0, 1, 1, 2, 2];
    let (d, grad) = matching_at(&params, &real, &real, &labels);
    assert!(d.abs() <= 1e-10, "distance {d:e}");
    let max = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max <= 1e-8, "pixel gradient {max:e}");

    let other = images(6, 13);
    let (d, grad) = matching_at(&params, &other, &real, &labels);
    assert!(d > 1e-3);
    assert!(grad.data().iter().any(|v| v.abs() > 1e-8));
}
