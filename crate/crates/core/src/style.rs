//! Style rehearsal: channel-statistics augmentation, per-domain kernel
//! prediction models, and transfer of images into a stored domain's look.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{BackwardMode, Graph};
use crate::model::{apply_transfer_kernel, PerceptualExtractor, StyleModel};
use crate::objectives::{style_recon_loss, LossBreakdown};
use crate::optim::SgdMomentum;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Per-channel mean and (population) standard deviation over all pixels of
/// a set of `3×H×W` images. The deviation is floored at [`STD_FLOOR`].
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<StyleStats> {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0usize;
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid("channel_stats", format!("expected 3×H×W, got {s:?}")));
        }
        let plane = s[1] * s[2];
        for (ch, chunk) in img.data().chunks(plane).enumerate() {
            sum[ch] += chunk.iter().sum::<f64>();
            sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return Err(Error::invalid("channel_stats", "no images"));
    }
    let n = count as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for ch in 0..3 {
        let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
        std[ch] = var.sqrt().max(STD_FLOOR);
    }
    Ok(StyleStats { mean, std })
}

/// Statistics of a uniformly drawn batch of `batch` samples.
pub fn sample_style_stats(samples: &[&Sample], batch: usize, rng: &mut impl Rng) -> Result<StyleStats> {
    if samples.is_empty() {
        return Err(Error::invalid("sample_style_stats", "empty domain"));
    }
    if batch == 0 || batch > samples.len() {
        return Err(Error::invalid(
            "sample_style_stats",
            format!("batch {batch} not in 1..={}", samples.len()),
        ));
    }
    let picks = index::sample(rng, samples.len(), batch);
    channel_stats(picks.iter().map(|i| &samples[i].image))
}

/// Renormalises each channel of a `3×H×W` image to the requested statistics,
/// without clamping.
pub fn channel_style_augment_unclamped(image: &Tensor, stats: &StyleStats) -> Result<Tensor> {
    let own = channel_stats([image])?;
    let plane = image.shape()[1] * image.shape()[2];
    let mut out = image.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let scale = stats.std[ch] / own.std[ch];
        for v in chunk {
            *v = scale * (*v - own.mean[ch]) + stats.mean[ch];
        }
    }
    Ok(out)
}

pub fn channel_style_augment(image: &Tensor, stats: &StyleStats) -> Result<Tensor> {
    Ok(channel_style_augment_unclamped(image, stats)?.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleTrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    /// Half-width of a uniform shift added to each sampled channel mean; the
    /// sampled deviations are also scaled by `exp(U(±jitter))`. Zero keeps
    /// the batch statistics as drawn.
    pub stats_jitter: f64,
    pub seed: u64,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        StyleTrainConfig {
            beta: 0.01,
            lr: 0.01,
            momentum: 0.9,
            steps: 150,
            batch: 4,
            stats_jitter: 0.25,
            seed: 0,
        }
    }
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.reshape(&shape)
}

/// Augmented inputs and reconstruction targets for one training batch.
fn training_pair(samples: &[&Sample], batch: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, Tensor)> {
    let picks = index::sample(rng, samples.len(), batch).into_vec();
    let mut stats = sample_style_stats(samples, batch, rng)?;
    if jitter > 0.0 {
        for c in 0..3 {
            stats.mean[c] += rng.gen_range(-jitter..=jitter);
            stats.std[c] = (stats.std[c] * rng.gen_range(-jitter..=jitter).exp()).max(STD_FLOOR);
        }
    }
    let inputs = picks
        .iter()
        .map(|&i| as_batch(&channel_style_augment(&samples[i].image, &stats)?))
        .collect::<Result<Vec<_>>>()?;
    let targets = Tensor::stack_outer(&picks.iter().map(|&i| as_batch(&samples[i].image)).collect::<Result<Vec<_>>>()?)?;
    Ok((inputs, targets))
}

/// Reconstruction loss of `model` on given inputs/targets; the model's
/// parameters are leaves when `trainable`.
fn reconstruction(
    g: &mut Graph,
    model: &StyleModel,
    xi: &PerceptualExtractor,
    inputs: &[Tensor],
    targets: &Tensor,
    beta: f64,
    trainable: bool,
) -> Result<(crate::graph::NodeId, LossBreakdown, crate::model::Bound)> {
    let p = model.bind(g, trainable);
    let mut outs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let x = g.constant(x.clone());
        let (k, b) = model.predict_kernel(g, &p, x)?;
        outs.push(apply_transfer_kernel(g, x, k, b)?);
    }
    let recon = g.concat_outer(&outs)?;
    let target = g.constant(targets.clone());
    let (total, loss) = style_recon_loss(g, recon, target, xi, beta)?;
    Ok((total, loss, p))
}

/// Trains a kernel-prediction model to restore `samples`' look from
/// channel-renormalised copies. Returns the model and the per-step losses.
pub fn train_style_model(
    domain: usize,
    samples: &[&Sample],
    xi: &PerceptualExtractor,
    config: &StyleTrainConfig,
) -> Result<(StyleModel, Vec<LossBreakdown>)> {
    if samples.is_empty() {
        return Err(Error::invalid("train_style_model", "domain has no samples"));
    }
    let batch = config.batch.min(samples.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = StyleModel::init(rng.gen(), domain);
    let mut opt = SgdMomentum::new(config.lr, config.momentum)?;
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (inputs, targets) = training_pair(samples, batch, config.stats_jitter, &mut rng)?;
        let mut g = Graph::new();
        let (total, loss, p) = reconstruction(&mut g, &model, xi, &inputs, &targets, config.beta, true)?;
        let grads = g.backward(total, &p.leaves(), BackwardMode::Values)?;
        opt.step(model.params_mut().tensors_mut(), &grads.values())?;
        trace.push(loss);
    }
    Ok((model, trace))
}

/// Mean reconstruction L1 of `model` on `samples`, each renormalised to the
/// statistics of the whole set.
pub fn reconstruction_l1(model: &StyleModel, samples: &[&Sample], xi: &PerceptualExtractor) -> Result<f64> {
    let stats = channel_stats(samples.iter().map(|s| &s.image))?;
    let inputs = samples
        .iter()
        .map(|s| as_batch(&channel_style_augment(&s.image, &stats)?))
        .collect::<Result<Vec<_>>>()?;
    let targets = Tensor::stack_outer(&samples.iter().map(|s| as_batch(&s.image)).collect::<Result<Vec<_>>>()?)?;
    let mut g = Graph::new();
    let (_, loss, _) = reconstruction(&mut g, model, xi, &inputs, &targets, 0.0, false)?;
    Ok(loss.get("l1").unwrap())
}

/// Renormalises a `3×H×W` image with `source_stats`, then applies the kernel
/// the target model predicts for it. The result is not clamped.
pub fn transfer_to_style(image: &Tensor, target: &StyleModel, source_stats: &StyleStats) -> Result<Tensor> {
    let augmented = as_batch(&channel_style_augment(image, source_stats)?)?;
    let mut g = Graph::new();
    let p = target.bind(&mut g, false);
    let x = g.constant(augmented);
    let (k, b) = target.predict_kernel(&mut g, &p, x)?;
    let y = apply_transfer_kernel(&mut g, x, k, b)?;
    g.value(y).reshape(image.shape())
}

/// [`transfer_to_style`] over an `N×3×H×W` batch.
pub fn transfer_batch(images: &Tensor, target: &StyleModel, source_stats: &StyleStats) -> Result<Tensor> {
    let n = images.shape()[0];
    let inner = &images.shape()[1..];
    let parts = (0..n)
        .map(|i| {
            let img = images.slice_outer(i).reshape(inner)?;
            as_batch(&transfer_to_style(&img, target, source_stats)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&parts)
}
