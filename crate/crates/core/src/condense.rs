//! Privacy-preserving replay samples: face masking, cluster-centre
//! initialisation, and gradient-matching pixel updates against stored
//! snapshots. Random and k-center selection are the baselines.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stack_images, Sample, HEAD_COLS, HEAD_ROWS};
use crate::error::{Error, Result};
use crate::graph::{BackwardMode, Graph};
use crate::model::{ModelParams, Snapshot};
use crate::objectives::{condense_loss, CondenseBatch, LossBreakdown};
use crate::optim::SgdMomentum;
use crate::tensor::Tensor;

pub const KMEANS_ITERATIONS: usize = 20;

/// Half-open rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Roi {
    /// The rendered head block.
    pub fn face() -> Self {
        Roi {
            row0: HEAD_ROWS.start,
            row1: HEAD_ROWS.end,
            col0: HEAD_COLS.start,
            col1: HEAD_COLS.end,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }
}

/// Symmetric reflection into `0..n` (`-1 → 0`, `n → n-1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Gaussian-blurs the ROI of a `C×H×W` image; everything outside is copied.
/// The kernel is truncated at radius `⌈3σ⌉` and renormalised; the ROI is
/// reflected at its own edges.
pub fn mask_face_roi(image: &Tensor, roi: Roi, sigma: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::invalid("mask_face_roi", format!("expected C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if roi.row0 >= roi.row1 || roi.col0 >= roi.col1 || roi.row1 > h || roi.col1 > w {
        return Err(Error::invalid("mask_face_roi", format!("roi {roi:?} is empty or outside {h}×{w}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("mask_face_roi", "sigma must be positive"));
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (rh, rw) = (roi.row1 - roi.row0, roi.col1 - roi.col0);
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    let mut tmp = vec![0.0; rh * rw];
    for ch in 0..c {
        let at = |r: usize, col: usize| src[(ch * h + roi.row0 + r) * w + roi.col0 + col];
        for r in 0..rh {
            for col in 0..rw {
                tmp[r * rw + col] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * at(r, reflect(col as isize + t as isize - radius, rw)))
                    .sum();
            }
        }
        for r in 0..rh {
            for col in 0..rw {
                dst[(ch * h + roi.row0 + r) * w + roi.col0 + col] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[reflect(r as isize + t as isize - radius, rh) * rw + col])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// A learnable replay image with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `3×32×16`, kept in `[0, 1]`.
    pub pixels: Tensor,
    /// Pixels right after masking, before any update.
    pub initial: Tensor,
    pub identity: usize,
    pub domain: usize,
    /// Id of the real sample the pixels were initialised from.
    pub source: usize,
    pub masked: bool,
    pub update_steps: usize,
    /// Euclidean distance between `pixels` and `initial`.
    pub l2_drift: f64,
}

impl SyntheticSample {
    pub fn mean_abs_drift(&self) -> f64 {
        self.pixels
            .data()
            .iter()
            .zip(self.initial.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.numel() as f64
    }
}

fn group_by_identity<'a>(samples: &[&'a Sample]) -> BTreeMap<usize, Vec<&'a Sample>> {
    let mut out: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.identity).or_default().push(s);
    }
    out
}

fn check_budget(op: &'static str, groups: &BTreeMap<usize, Vec<&Sample>>, budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(Error::invalid(op, "budget must be positive"));
    }
    if groups.is_empty() {
        return Err(Error::invalid(op, "no samples"));
    }
    for (id, g) in groups {
        if g.len() < budget {
            return Err(Error::invalid(
                op,
                format!("identity {id} has {} samples, fewer than budget {budget}", g.len()),
            ));
        }
    }
    Ok(())
}

/// Uniform selection without replacement, `budget` per identity.
pub fn select_random(samples: &[&Sample], budget: usize, seed: u64) -> Result<Vec<Sample>> {
    let groups = group_by_identity(samples);
    check_budget("select_random", &groups, budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for members in groups.values() {
        let mut picks = index::sample(&mut rng, members.len(), budget).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_point(points: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for p in points {
        for (a, v) in m.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= points.len() as f64);
    m
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Greedy farthest-point selection starting from the point nearest the mean.
/// Ties go to the lower index.
pub fn kcenter_indices(points: &[Vec<f64>], budget: usize) -> Vec<usize> {
    if points.is_empty() || budget == 0 {
        return Vec::new();
    }
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let mean = mean_point(&refs);
    let first = argmin(points.iter().map(|p| sq_dist(p, &mean)));
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < budget.min(points.len()) {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, &d) in nearest.iter().enumerate() {
            if !chosen.contains(&i) && d > best.1 {
                best = (i, d);
            }
        }
        let next = best.0;
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen
}

fn embeddings(model: &ModelParams, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let e = model.embed_values(&stack_images(samples.iter().copied())?)?;
    let d = e.shape()[1];
    Ok(e.data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// Per identity, k-center selection in the model's embedding space.
pub fn select_kcenter(samples: &[&Sample], model: &ModelParams, budget: usize) -> Result<Vec<Sample>> {
    let groups = group_by_identity(samples);
    check_budget("select_kcenter", &groups, budget)?;
    let mut out = Vec::new();
    for members in groups.values() {
        let points = embeddings(model, members)?;
        out.extend(kcenter_indices(&points, budget).into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

/// Result of [`kmeans`]: cluster index per point and the cluster centres.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl Clustering {
    pub fn within_cluster_ss(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &a)| sq_dist(p, &self.centers[a]))
            .sum()
    }
}

fn recompute_centers(points: &[Vec<f64>], assignment: &[usize], centers: &mut [Vec<f64>]) {
    for (k, c) in centers.iter_mut().enumerate() {
        let members: Vec<&[f64]> = points
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == k)
            .map(|(p, _)| p.as_slice())
            .collect();
        if !members.is_empty() {
            *c = mean_point(&members);
        }
    }
}

/// Moves the point farthest from its centre (among clusters with more than
/// one member) into each empty cluster.
fn fill_empty_clusters(points: &[Vec<f64>], assignment: &mut [usize], centers: &[Vec<f64>]) {
    let mut sizes = vec![0usize; centers.len()];
    assignment.iter().for_each(|&a| sizes[a] += 1);
    for k in 0..centers.len() {
        if sizes[k] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centers[assignment[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = donor {
            sizes[assignment[i]] -= 1;
            assignment[i] = k;
            sizes[k] += 1;
        }
    }
}

/// Lloyd iterations seeded by k-center, then single-point moves while any
/// move lowers the within-cluster sum of squares.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize) -> Clustering {
    let seeds = kcenter_indices(points, k);
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
    let mut assignment = vec![0; points.len()];
    for _ in 0..iterations {
        let next: Vec<usize> = points
            .iter()
            .map(|p| argmin(centers.iter().map(|c| sq_dist(p, c))))
            .collect();
        let changed = next != assignment;
        assignment = next;
        fill_empty_clusters(points, &mut assignment, &centers);
        recompute_centers(points, &assignment, &mut centers);
        if !changed {
            break;
        }
    }
    let mut sizes = vec![0usize; centers.len()];
    assignment.iter().for_each(|&a| sizes[a] += 1);
    loop {
        let mut moved = false;
        for i in 0..points.len() {
            let from = assignment[i];
            if sizes[from] <= 1 {
                continue;
            }
            let nf = sizes[from] as f64;
            let loss = nf / (nf - 1.0) * sq_dist(&points[i], &centers[from]);
            let mut best = (from, 0.0);
            for (to, c) in centers.iter().enumerate() {
                if to == from {
                    continue;
                }
                let nt = sizes[to] as f64;
                let gain = loss - nt / (nt + 1.0) * sq_dist(&points[i], c);
                if gain > best.1 + 1e-12 * loss.max(1e-300) {
                    best = (to, gain);
                }
            }
            if best.0 != from {
                assignment[i] = best.0;
                sizes[from] -= 1;
                sizes[best.0] += 1;
                recompute_centers(points, &assignment, &mut centers);
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    Clustering { assignment, centers }
}

/// Per identity: cluster the embeddings into `budget` groups, take the real
/// image nearest each centre, and mask its face region.
pub fn init_synthetic(
    samples: &[&Sample],
    model: &ModelParams,
    budget: usize,
    roi: Roi,
    sigma: f64,
) -> Result<Vec<SyntheticSample>> {
    let groups = group_by_identity(samples);
    check_budget("init_synthetic", &groups, budget)?;
    let mut out = Vec::new();
    for members in groups.values() {
        let points = embeddings(model, members)?;
        let clusters = kmeans(&points, budget, KMEANS_ITERATIONS);
        for (k, center) in clusters.centers.iter().enumerate() {
            let pick = points
                .iter()
                .enumerate()
                .filter(|(i, _)| clusters.assignment[*i] == k)
                .map(|(i, p)| (i, sq_dist(p, center)))
                .fold((usize::MAX, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
                .0;
            let src = members[pick];
            let masked = mask_face_roi(&src.image, roi, sigma)?;
            out.push(SyntheticSample {
                pixels: masked.clone(),
                initial: masked,
                identity: src.identity,
                domain: src.domain,
                source: src.id,
                masked: true,
                update_steps: 0,
                l2_drift: 0.0,
            });
        }
    }
    Ok(out)
}

/// Training-step indices `round(i·total/count)` for `i = 1..=count`.
pub fn snapshot_schedule(total_steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || total_steps == 0 || count > total_steps {
        return Err(Error::invalid(
            "snapshot_schedule",
            format!("need 1 ≤ count ≤ total steps, got count {count} and {total_steps} steps"),
        ));
    }
    Ok((1..=count).map(|i| (2 * i * total_steps + count) / (2 * count)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondenseConfig {
    pub alpha: f64,
    pub eta_s: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Upper bound on the real minibatch drawn per identity.
    pub real_batch: usize,
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            alpha: 0.01,
            eta_s: 0.002,
            momentum: 0.9,
            epochs: 3,
            real_batch: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondenseStep {
    pub step: usize,
    pub epoch: usize,
    pub identity: usize,
    pub loss: LossBreakdown,
}

/// Updates synthetic pixels in place. Each step takes one identity `c`: a
/// real minibatch of `c` and the synthetic samples of `c` are matched at every
/// snapshot, and all synthetic samples of the set anchor the ID loss.
pub fn condense_update(
    synthetics: &mut [SyntheticSample],
    real: &[&Sample],
    snapshots: &[Snapshot],
    classes: &BTreeMap<usize, usize>,
    config: &CondenseConfig,
) -> Result<Vec<CondenseStep>> {
    if synthetics.is_empty() {
        return Err(Error::invalid("condense_update", "no synthetic samples"));
    }
    if snapshots.is_empty() {
        return Err(Error::invalid("condense_update", "snapshot list is empty"));
    }
    let groups = group_by_identity(real);
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in synthetics.iter().enumerate() {
        by_identity.entry(s.identity).or_default().push(i);
    }
    for id in by_identity.keys() {
        if !groups.contains_key(id) {
            return Err(Error::invalid("condense_update", format!("identity {id} has no real samples")));
        }
        if !classes.contains_key(id) {
            return Err(Error::invalid("condense_update", format!("identity {id} has no classifier column")));
        }
    }
    let mut optimizers: BTreeMap<usize, SgdMomentum> = by_identity
        .keys()
        .map(|&id| Ok((id, SgdMomentum::new(config.eta_s, config.momentum)?)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    for epoch in 0..config.epochs {
        for (&id, members) in &by_identity {
            let pool = &groups[&id];
            let take = config.real_batch.min(pool.len()).max(1);
            let mut picks = index::sample(&mut rng, pool.len(), take).into_vec();
            picks.sort_unstable();
            let real_batch = stack_images(picks.iter().map(|&i| pool[i]))?;
            let class = classes[&id];
            let real_labels = vec![class; take];

            let mut g = Graph::new();
            let leaf = g.leaf(stack_images_of(synthetics, members)?);
            let syn_labels = vec![class; members.len()];
            let mut parts = Vec::new();
            let mut id_labels = Vec::new();
            for (&other, idx) in &by_identity {
                let node = if other == id {
                    leaf
                } else {
                    g.constant(stack_images_of(synthetics, idx)?)
                };
                parts.push(node);
                id_labels.extend(std::iter::repeat_n(classes[&other], idx.len()));
            }
            let id_images = if parts.len() == 1 { leaf } else { g.concat_outer(&parts)? };
            let batch = CondenseBatch {
                synthetic: leaf,
                synthetic_labels: &syn_labels,
                real: &real_batch,
                real_labels: &real_labels,
                id_images,
                id_labels: &id_labels,
            };
            let (total, loss) = condense_loss(&mut g, &batch, snapshots, config.alpha)?;
            let grads = g.backward(total, &[("pixels", leaf)], BackwardMode::Values)?;
            let mut pixels = g.value(leaf).clone();
            optimizers
                .get_mut(&id)
                .unwrap()
                .step(std::iter::once(&mut pixels), &grads.values())?;
            pixels.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            let per = pixels.numel() / members.len();
            for (j, &m) in members.iter().enumerate() {
                let s = &mut synthetics[m];
                let shape = s.pixels.shape().to_vec();
                s.pixels = Tensor::new(shape, pixels.data()[j * per..(j + 1) * per].to_vec())?;
                s.update_steps += 1;
                s.l2_drift = sq_dist(s.pixels.data(), s.initial.data()).sqrt();
            }
            trace.push(CondenseStep {
                step: trace.len() + 1,
                epoch,
                identity: id,
                loss,
            });
        }
    }
    Ok(trace)
}

fn stack_images_of(synthetics: &[SyntheticSample], idx: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = idx
        .iter()
        .map(|&i| {
            let s = synthetics[i].pixels.shape();
            let mut shape = vec![1];
            shape.extend_from_slice(s);
            synthetics[i].pixels.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_outer(&parts)
}

/// Stacks synthetic pixels into an `N×3×H×W` batch with their identities.
pub fn synthetic_batch(synthetics: &[&SyntheticSample]) -> Result<(Tensor, Vec<usize>)> {
    let parts: Vec<Tensor> = synthetics
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.pixels.shape());
            s.pixels.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Ok((Tensor::stack_outer(&parts)?, synthetics.iter().map(|s| s.identity).collect()))
}

/// Mean squared difference between horizontally and vertically adjacent
/// pixels inside the ROI.
pub fn high_frequency_energy(image: &Tensor, roi: Roi) -> f64 {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut total = 0.0;
    let mut n = 0;
    for ch in 0..c {
        for r in roi.row0..roi.row1 {
            for col in roi.col0..roi.col1 {
                let v = d[(ch * h + r) * w + col];
                if col + 1 < roi.col1 {
                    total += (v - d[(ch * h + r) * w + col + 1]).powi(2);
                    n += 1;
                }
                if r + 1 < roi.row1 {
                    total += (v - d[(ch * h + r + 1) * w + col]).powi(2);
                    n += 1;
                }
            }
        }
    }
    total / n.max(1) as f64
}
