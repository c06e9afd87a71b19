//! The fixed small networks: a convolutional embedder with an expanding
//! identity classifier, a kernel-prediction style network, and a frozen
//! perceptual feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 16;

const CONV1_OUT: usize = 8;
const CONV2_OUT: usize = 16;
const STYLE_HIDDEN: usize = 8;
/// 3×3×3×3 transfer kernel plus 3 bias values.
pub const STYLE_OUTPUTS: usize = 84;
const PERCEPTUAL_CHANNELS: usize = 8;

/// An ordered set of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Places every tensor on the graph, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            ids,
        }
    }

    fn expect_names(&self, what: &'static str, names: &[&str]) -> Result<()> {
        let have: Vec<&str> = self.entries.iter().map(|(n, _)| n.as_str()).collect();
        if have != names {
            return Err(Error::invalid(what, format!("expected tensors {names:?}, found {have:?}")));
        }
        Ok(())
    }
}

/// Graph nodes of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.ids[i]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn leaves(&self) -> Vec<(&str, NodeId)> {
        self.names.iter().map(String::as_str).zip(self.ids.iter().copied()).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

const MODEL_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "embed.weight",
    "embed.bias",
    "head.weight",
    "head.bias",
];

/// Embedder plus identity classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    params: ParamSet,
}

impl ModelParams {
    pub const ARCH: &'static str = "conv8-conv16-fc32";

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, for 3×32×16 inputs.
    pub fn init(seed: u64, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("init_params", "class count must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = CONV2_OUT * (IMAGE_HEIGHT / 4) * (IMAGE_WIDTH / 4);
        let entries = vec![
            ("conv1.weight".into(), uniform(&mut rng, &[CONV1_OUT, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9)),
            ("conv1.bias".into(), Tensor::zeros(&[CONV1_OUT])),
            ("conv2.weight".into(), uniform(&mut rng, &[CONV2_OUT, CONV1_OUT, 3, 3], CONV1_OUT * 9)),
            ("conv2.bias".into(), Tensor::zeros(&[CONV2_OUT])),
            ("embed.weight".into(), uniform(&mut rng, &[flat, EMBED_DIM], flat)),
            ("embed.bias".into(), Tensor::zeros(&[EMBED_DIM])),
            ("head.weight".into(), uniform(&mut rng, &[EMBED_DIM, class_count], EMBED_DIM)),
            ("head.bias".into(), Tensor::zeros(&[class_count])),
        ];
        Ok(ModelParams {
            params: ParamSet::new(entries),
        })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        params.expect_names("model params", &MODEL_NAMES)?;
        let m = ModelParams { params };
        let w = m.params.get("head.weight").unwrap();
        let b = m.params.get("head.bias").unwrap();
        if w.rank() != 2 || w.shape()[0] != EMBED_DIM || b.shape() != [w.shape()[1]] {
            return Err(Error::shape("model params", w.shape(), b.shape()));
        }
        Ok(m)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn class_count(&self) -> usize {
        self.params.get("head.bias").unwrap().numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// conv→relu→pool2→conv→relu→pool2→flatten→linear; raw embeddings `N×32`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, images: NodeId) -> Result<NodeId> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(Error::invalid(
                "embedder_forward",
                format!("image batch {shape:?} must be N×C×H×W with H, W divisible by 4"),
            ));
        }
        let x = g.conv2d_bias(images, p.id("conv1.weight"), p.id("conv1.bias"), 1, 1)?;
        let x = g.relu(x);
        let x = g.avg_pool(x, 2)?;
        let x = g.conv2d_bias(x, p.id("conv2.weight"), p.id("conv2.bias"), 1, 1)?;
        let x = g.relu(x);
        let x = g.avg_pool(x, 2)?;
        let n = shape[0];
        let flat = g.value(x).numel() / n;
        let x = g.reshape(x, &[n, flat])?;
        g.linear(x, p.id("embed.weight"), p.id("embed.bias"))
    }

    pub fn classify(&self, g: &mut Graph, p: &Bound, embeddings: NodeId) -> Result<NodeId> {
        let s = g.value(embeddings).shape();
        if s.len() != 2 || s[1] != EMBED_DIM {
            return Err(Error::shape("classifier_forward", s, &[EMBED_DIM]));
        }
        g.linear(embeddings, p.id("head.weight"), p.id("head.bias"))
    }

    /// Embeddings as plain values, for evaluation.
    pub fn embed_values(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let e = self.embed(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }

    pub fn logits_values(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let e = self.embed(&mut g, &p, x)?;
        let l = self.classify(&mut g, &p, e)?;
        Ok(g.value(l).clone())
    }

    /// Appends `new_classes` head columns; existing columns are kept bitwise.
    pub fn expand_head(&self, new_classes: usize, seed: u64) -> Result<ModelParams> {
        if new_classes == 0 {
            return Err(Error::invalid("expand_head", "new class count must be positive"));
        }
        let old = self.class_count();
        let total = old + new_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = uniform(&mut rng, &[EMBED_DIM, new_classes], EMBED_DIM);
        let w = self.params.get("head.weight").unwrap();
        let mut data = Vec::with_capacity(EMBED_DIM * total);
        for r in 0..EMBED_DIM {
            data.extend_from_slice(&w.data()[r * old..(r + 1) * old]);
            data.extend_from_slice(&fresh.data()[r * new_classes..(r + 1) * new_classes]);
        }
        let mut bias = self.params.get("head.bias").unwrap().data().to_vec();
        bias.resize(total, 0.0);
        let mut out = self.clone();
        for (name, t) in out.params.entries.iter_mut() {
            match name.as_str() {
                "head.weight" => *t = Tensor::from_raw(vec![EMBED_DIM, total], data.clone()),
                "head.bias" => *t = Tensor::from_vec(bias.clone()),
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Frozen parameters captured at a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub stage: usize,
    pub params: ModelParams,
}

const STYLE_NAMES: [&str; 4] = ["akp.conv.weight", "akp.conv.bias", "akp.fc.weight", "akp.fc.bias"];

/// Kernel-prediction network bound to one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel {
    pub domain: usize,
    params: ParamSet,
}

impl StyleModel {
    pub fn init(seed: u64, domain: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = vec![
            ("akp.conv.weight".into(), uniform(&mut rng, &[STYLE_HIDDEN, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9)),
            ("akp.conv.bias".into(), Tensor::zeros(&[STYLE_HIDDEN])),
            ("akp.fc.weight".into(), uniform(&mut rng, &[STYLE_HIDDEN, STYLE_OUTPUTS], STYLE_HIDDEN)),
            ("akp.fc.bias".into(), Tensor::zeros(&[STYLE_OUTPUTS])),
        ];
        StyleModel {
            domain,
            params: ParamSet::new(entries),
        }
    }

    pub fn from_params(domain: usize, params: ParamSet) -> Result<Self> {
        params.expect_names("style model", &STYLE_NAMES)?;
        Ok(StyleModel { domain, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Predicts a 3×3×3×3 kernel and 3 biases from one `1×3×H×W` image.
    pub fn predict_kernel(&self, g: &mut Graph, p: &Bound, image: NodeId) -> Result<(NodeId, NodeId)> {
        let s = g.value(image).shape().to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != IMAGE_CHANNELS {
            return Err(Error::shape("akpnet_predict_kernel", &s, &[1, IMAGE_CHANNELS]));
        }
        let x = g.conv2d_bias(image, p.id("akp.conv.weight"), p.id("akp.conv.bias"), 1, 1)?;
        let x = g.relu(x);
        let pooled = g.sum_to(x, &[1, STYLE_HIDDEN, 1, 1])?;
        let pooled = g.scale(pooled, 1.0 / (s[2] * s[3]) as f64);
        let feat = g.reshape(pooled, &[1, STYLE_HIDDEN])?;
        let out = g.linear(feat, p.id("akp.fc.weight"), p.id("akp.fc.bias"))?;
        let out = g.reshape(out, &[STYLE_OUTPUTS])?;
        let k: Vec<usize> = (0..81).collect();
        let kernel = g.index_select(out, &k)?;
        let kernel = g.reshape(kernel, &[3, 3, 3, 3])?;
        let bias = g.index_select(out, &[81, 82, 83])?;
        Ok((kernel, bias))
    }

    pub fn predict_kernel_values(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (k, b) = self.predict_kernel(&mut g, &p, x)?;
        Ok((g.value(k).clone(), g.value(b).clone()))
    }
}

/// Convolves an image with a predicted transfer kernel (padding 1, stride 1).
pub fn apply_transfer_kernel(g: &mut Graph, image: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
    g.conv2d_bias(image, kernel, bias, 1, 1)
}

pub fn apply_transfer_kernel_values(image: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, k, b) = (g.constant(image.clone()), g.constant(kernel.clone()), g.constant(bias.clone()));
    let y = apply_transfer_kernel(&mut g, x, k, b)?;
    Ok(g.value(y).clone())
}

/// Frozen random conv→relu→conv feature extractor for the perceptual loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    params: ParamSet,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = PERCEPTUAL_CHANNELS;
        let entries = vec![
            ("xi.conv1.weight".into(), uniform(&mut rng, &[c, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9)),
            ("xi.conv1.bias".into(), Tensor::zeros(&[c])),
            ("xi.conv2.weight".into(), uniform(&mut rng, &[c, c, 3, 3], c * 9)),
            ("xi.conv2.bias".into(), Tensor::zeros(&[c])),
        ];
        PerceptualExtractor {
            params: ParamSet::new(entries),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Parameters always enter the graph as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    pub fn features(&self, g: &mut Graph, p: &Bound, images: NodeId) -> Result<NodeId> {
        let x = g.conv2d_bias(images, p.id("xi.conv1.weight"), p.id("xi.conv1.bias"), 1, 1)?;
        let x = g.relu(x);
        g.conv2d_bias(x, p.id("xi.conv2.weight"), p.id("xi.conv2.bias"), 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BackwardMode;

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * IMAGE_HEIGHT * IMAGE_WIDTH;
        Tensor::new(vec![n, 3, IMAGE_HEIGHT, IMAGE_WIDTH], (0..len).map(|_| rng.gen()).collect()).unwrap()
    }

    fn zeroed(m: &ModelParams) -> ModelParams {
        let mut z = m.clone();
        for t in z.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ModelParams::init(3, 10).unwrap();
        assert_eq!(a, ModelParams::init(3, 10).unwrap());
        assert_ne!(a, ModelParams::init(4, 10).unwrap());
        for (name, t) in a.params().entries() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bound = 1.0 / 27f64.sqrt();
        let w = a.params().get("conv1.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // the sampled values should actually use most of the range
        assert!(w.data().iter().any(|v| v.abs() > 0.8 * bound));
    }

    #[test]
    fn embedder_shapes_and_errors() {
        let m = ModelParams::init(0, 5).unwrap();
        let e = m.embed_values(&images(4, 1)).unwrap();
        assert_eq!(e.shape(), &[4, EMBED_DIM]);
        let bad = Tensor::zeros(&[1, 3, 30, 16]);
        assert!(m.embed_values(&bad).is_err());
        assert!(m.embed_values(&zeroed(&m).embed_values(&images(1, 0)).unwrap()).is_err());
    }

    #[test]
    fn identical_images_identical_embeddings() {
        let m = ModelParams::init(0, 5).unwrap();
        let one = images(1, 9);
        let two = Tensor::stack_outer(&[one.clone(), one]).unwrap();
        let e = m.embed_values(&two).unwrap();
        assert_eq!(e.data()[..EMBED_DIM], e.data()[EMBED_DIM..]);
    }

    #[test]
    fn zero_weights_zero_outputs() {
        let m = zeroed(&ModelParams::init(0, 5).unwrap());
        let x = images(2, 1);
        assert!(m.embed_values(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let l = m.logits_values(&x).unwrap();
        assert_eq!(l.shape(), &[2, 5]);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_embedding_selects_head_row() {
        let m = ModelParams::init(2, 6).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let mut onehot = vec![0.0; EMBED_DIM];
        onehot[7] = 1.0;
        let e = g.constant(Tensor::new(vec![1, EMBED_DIM], onehot).unwrap());
        let l = m.classify(&mut g, &p, e).unwrap();
        let w = m.params().get("head.weight").unwrap();
        assert_eq!(g.value(l).data(), &w.data()[7 * 6..8 * 6]);
        let wrong = g.constant(Tensor::zeros(&[1, 7]));
        assert!(m.classify(&mut g, &p, wrong).is_err());
    }

    #[test]
    fn expand_head_preserves_old_logits() {
        let m = ModelParams::init(1, 10).unwrap();
        assert!(m.expand_head(0, 5).is_err());
        let m15 = m.expand_head(5, 5).unwrap();
        assert_eq!(m15.class_count(), 15);
        let x = images(3, 4);
        let (old, new) = (m.logits_values(&x).unwrap(), m15.logits_values(&x).unwrap());
        for r in 0..3 {
            assert_eq!(old.data()[r * 10..(r + 1) * 10], new.data()[r * 15..r * 15 + 10]);
        }
        let m20a = m15.expand_head(5, 6).unwrap();
        let m20b = m.expand_head(10, 7).unwrap();
        let (wa, wb) = (m20a.params().get("head.weight").unwrap(), m20b.params().get("head.weight").unwrap());
        for r in 0..EMBED_DIM {
            assert_eq!(wa.data()[r * 20..r * 20 + 10], wb.data()[r * 20..r * 20 + 10]);
        }
    }

    #[test]
    fn embedder_is_batch_permutation_equivariant() {
        let m = ModelParams::init(8, 4).unwrap();
        let x = images(3, 2);
        let perm = Tensor::stack_outer(&[x.slice_outer(2), x.slice_outer(0), x.slice_outer(1)]).unwrap();
        let (a, b) = (m.embed_values(&x).unwrap(), m.embed_values(&perm).unwrap());
        let row = |t: &Tensor, i: usize| t.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM].to_vec();
        assert_eq!(row(&a, 2), row(&b, 0));
        assert_eq!(row(&a, 0), row(&b, 1));
        assert_eq!(row(&a, 1), row(&b, 2));
    }

    #[test]
    fn style_kernel_cases() {
        let mut s = StyleModel::init(1, 0);
        let x = images(1, 3);
        let (k, b) = s.predict_kernel_values(&x).unwrap();
        assert_eq!((k.numel(), b.numel()), (81, 3));
        assert_eq!(k.shape(), &[3, 3, 3, 3]);
        assert_eq!(s.predict_kernel_values(&x).unwrap().0, k);
        for t in s.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (k, b) = s.predict_kernel_values(&x).unwrap();
        assert!(k.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn transfer_kernel_identity_and_constant() {
        let x = images(1, 5);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = apply_transfer_kernel_values(&x, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        let y = apply_transfer_kernel_values(&x, &Tensor::zeros(&[3, 3, 3, 3]), &Tensor::full(&[3], 0.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        let odd = Tensor::zeros(&[1, 3, 7, 5]);
        let y = apply_transfer_kernel_values(&odd, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.shape(), odd.shape());
    }

    #[test]
    fn perceptual_extractor_is_frozen() {
        let xi = PerceptualExtractor::new(11);
        let before = xi.params().clone();
        let mut g = Graph::new();
        let p = xi.bind(&mut g);
        let img = g.leaf(images(1, 1));
        let f = xi.features(&mut g, &p, img).unwrap();
        let f2 = xi.features(&mut g, &p, img).unwrap();
        assert_eq!(g.value(f), g.value(f2));
        let s = g.sum(f).unwrap();
        let mut leaves = p.leaves();
        leaves.push(("img", img));
        let grads = g.backward(s, &leaves, BackwardMode::Values).unwrap();
        for e in &grads.entries()[..4] {
            assert!(e.value.data().iter().all(|&v| v == 0.0), "{}", e.name);
        }
        assert!(grads.get("img").unwrap().data().iter().any(|&v| v != 0.0));
        assert_eq!(xi.params(), &before);
    }
}
