//! Scalar training objectives built on the graph.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{BackwardMode, GradientMap, Graph, NodeId};
use crate::model::{Bound, ModelParams, PerceptualExtractor, Snapshot};
use crate::tensor::Tensor;

/// One named, weighted contribution to a total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<LossTerm>,
}

impl LossBreakdown {
    pub fn new(total: f64, components: Vec<LossTerm>) -> Self {
        LossBreakdown { total, components }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.value).sum()
    }
}

fn term(name: &str, weight: f64, value: f64) -> LossTerm {
    LossTerm {
        name: name.to_string(),
        weight,
        value,
    }
}

/// Mean negative log-softmax at the true class.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::invalid("cross_entropy", format!("logits must be N×C, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let lse = g.logsumexp_rows(logits)?;
    let lse = g.reshape(lse, &[n])?;
    let flat = g.reshape(logits, &[n * c])?;
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = g.index_select(flat, &picks)?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

fn pairwise_distances(e: &Tensor) -> Vec<f64> {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let x = e.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    out
}

/// Batch-hard soft-margin triplet loss: mean over anchors of
/// `ln(1 + exp(d_ap - d_an))`, hardest positive (the anchor included) and
/// hardest negative per anchor.
pub fn batch_hard_triplet(g: &mut Graph, embeddings: NodeId, labels: &[usize]) -> Result<NodeId> {
    let e = g.value(embeddings);
    let shape = e.shape().to_vec();
    if shape.len() != 2 || labels.len() != shape[0] {
        return Err(Error::shape("batch_hard_triplet", &shape, &[labels.len()]));
    }
    let ids: BTreeSet<usize> = labels.iter().copied().collect();
    if ids.len() < 2 {
        let only = labels.first().map_or("none".to_string(), |id| id.to_string());
        return Err(Error::TripletBatch(format!("identity {only} has no negatives in the batch")));
    }
    let n = shape[0];
    let dist = pairwise_distances(e);
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let mut p = i;
        let mut q = usize::MAX;
        for j in 0..n {
            if labels[j] == labels[i] {
                if row[j] > row[p] {
                    p = j;
                }
            } else if q == usize::MAX || row[j] < row[q] {
                q = j;
            }
        }
        pos.push(p);
        neg.push(q);
    }
    let anchors: Vec<usize> = (0..n).collect();
    let a = g.index_select(embeddings, &anchors)?;
    let p = g.index_select(embeddings, &pos)?;
    let q = g.index_select(embeddings, &neg)?;
    let dp = g.sub(a, p)?;
    let dp = g.norm_rows(dp)?;
    let dn = g.sub(a, q)?;
    let dn = g.norm_rows(dn)?;
    let margin = g.sub(dp, dn)?;
    let soft = g.softplus(margin);
    g.mean(soft)
}

/// CE and (when the batch holds at least two identities) triplet losses for
/// one forward pass. The triplet node is `None` on single-identity batches.
pub struct IdLoss {
    pub ce: NodeId,
    pub triplet: Option<NodeId>,
}

pub fn id_loss(g: &mut Graph, model: &ModelParams, p: &Bound, images: NodeId, labels: &[usize]) -> Result<IdLoss> {
    let emb = model.embed(g, p, images)?;
    let logits = model.classify(g, p, emb)?;
    let ce = cross_entropy(g, logits, labels)?;
    let distinct = labels.iter().collect::<BTreeSet<_>>().len();
    let triplet = if distinct >= 2 {
        Some(batch_hard_triplet(g, emb, labels)?)
    } else {
        None
    };
    Ok(IdLoss { ce, triplet })
}

impl IdLoss {
    pub fn total(&self, g: &mut Graph) -> Result<NodeId> {
        match self.triplet {
            Some(t) => g.add(self.ce, t),
            None => Ok(self.ce),
        }
    }

    pub fn triplet_value(&self, g: &Graph) -> f64 {
        self.triplet.map_or(0.0, |t| g.value(t).item())
    }
}

fn group_matrix(g: &mut Graph, node: NodeId) -> Result<NodeId> {
    let shape = g.value(node).shape().to_vec();
    let numel: usize = shape.iter().product();
    if shape.len() == 4 {
        g.reshape(node, &[shape[0], numel / shape[0]])
    } else {
        g.reshape(node, &[1, numel])
    }
}

fn grad_node(g: &mut Graph, map: &GradientMap, i: usize) -> NodeId {
    let e = &map.entries()[i];
    match e.node {
        Some(n) => n,
        None => g.constant(e.value.clone()),
    }
}

/// Sum over parameter groups of `1 - cos(a, b)`. Each tensor is one group,
/// except 4-d convolution kernels, which form one group per output channel.
/// Groups where both sides are zero contribute 0; where one side is zero, 1.
pub fn gradient_match_distance(g: &mut Graph, a: &GradientMap, b: &GradientMap) -> Result<NodeId> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(
            "gradient_match_distance",
            format!("gradient maps have {} and {} entries", a.len(), b.len()),
        ));
    }
    let mut total: Option<NodeId> = None;
    for (i, (ea, eb)) in a.entries().iter().zip(b.entries()).enumerate() {
        if ea.name != eb.name {
            return Err(Error::invalid(
                "gradient_match_distance",
                format!("leaf {} does not match leaf {}", ea.name, eb.name),
            ));
        }
        if ea.value.shape() != eb.value.shape() {
            return Err(Error::shape("gradient_match_distance", ea.value.shape(), eb.value.shape()));
        }
        let na = grad_node(g, a, i);
        let nb = grad_node(g, b, i);
        let ma = group_matrix(g, na)?;
        let mb = group_matrix(g, nb)?;
        let rows = g.value(ma).shape()[0];
        let live = count_live_groups(g.value(ma), g.value(mb));
        let prod = g.mul(ma, mb)?;
        let dot = g.sum_to(prod, &[rows, 1])?;
        let norm_a = g.norm_rows(ma)?;
        let norm_b = g.norm_rows(mb)?;
        let denom = g.mul(norm_a, norm_b)?;
        let cos = g.safe_div(dot, denom)?;
        let cos_sum = g.sum(cos)?;
        let d = g.affine(cos_sum, -1.0, live as f64);
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    Ok(total.unwrap())
}

/// Groups (rows) where at least one side is nonzero.
fn count_live_groups(a: &Tensor, b: &Tensor) -> usize {
    let cols = a.shape()[1];
    a.data()
        .chunks(cols)
        .zip(b.data().chunks(cols))
        .filter(|(ra, rb)| ra.iter().chain(rb.iter()).any(|&v| v != 0.0))
        .count()
}

/// First-order gradients of the ID loss of a real batch at `params`.
pub fn real_gradients(params: &ModelParams, images: &Tensor, labels: &[usize]) -> Result<GradientMap> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(images.clone());
    let loss = id_loss(&mut g, params, &p, x, labels)?;
    let total = loss.total(&mut g)?;
    g.backward(total, &p.leaves(), BackwardMode::Values)
}

/// Inputs to [`condense_loss`]. `synthetic` and `id_images` are nodes already
/// on the graph; pixel leaves are whatever the caller made them.
pub struct CondenseBatch<'a> {
    pub synthetic: NodeId,
    pub synthetic_labels: &'a [usize],
    pub real: &'a Tensor,
    pub real_labels: &'a [usize],
    /// Batch for the CE/triplet anchoring term, evaluated at the latest snapshot.
    pub id_images: NodeId,
    pub id_labels: &'a [usize],
}

/// `alpha · Σ_k D(∇L(synthetic; θ_k), ∇L(real; θ_k)) + CE + triplet`.
///
/// Synthetic-side gradients are recorded differentiably, so the returned node
/// can be differentiated back to the synthetic pixels.
pub fn condense_loss(
    g: &mut Graph,
    batch: &CondenseBatch<'_>,
    snapshots: &[Snapshot],
    alpha: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let Some(latest) = snapshots.last() else {
        return Err(Error::invalid("condense_loss", "snapshot list is empty"));
    };
    let mut matched: Option<NodeId> = None;
    if alpha != 0.0 {
        for snap in snapshots {
            let real = real_gradients(&snap.params, batch.real, batch.real_labels)?;
            let p = snap.params.bind(g, true);
            let loss = id_loss(g, &snap.params, &p, batch.synthetic, batch.synthetic_labels)?;
            let total = loss.total(g)?;
            let syn = g.backward(total, &p.leaves(), BackwardMode::Differentiable)?;
            let d = gradient_match_distance(g, &syn, &real)?;
            matched = Some(match matched {
                None => d,
                Some(m) => g.add(m, d)?,
            });
        }
    }
    let p = latest.params.bind(g, false);
    let anchor = id_loss(g, &latest.params, &p, batch.id_images, batch.id_labels)?;
    let mut total = anchor.total(g)?;
    let mut gm_value = 0.0;
    if let Some(m) = matched {
        gm_value = g.value(m).item();
        let weighted = g.scale(m, alpha);
        total = g.add(weighted, total)?;
    }
    let breakdown = LossBreakdown::new(
        g.value(total).item(),
        vec![
            term("grad_match", alpha, gm_value),
            term("ce", 1.0, g.value(anchor.ce).item()),
            term("triplet", 1.0, anchor.triplet_value(g)),
        ],
    );
    Ok((total, breakdown))
}

/// `mean|ŝ − s| + beta · mean((ξ(ŝ) − ξ(s))²)`.
pub fn style_recon_loss(
    g: &mut Graph,
    reconstructed: NodeId,
    target: NodeId,
    xi: &PerceptualExtractor,
    beta: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let diff = g.sub(reconstructed, target)?;
    let abs = g.abs(diff);
    let l1 = g.mean(abs)?;
    let p = xi.bind(g);
    let fr = xi.features(g, &p, reconstructed)?;
    let ft = xi.features(g, &p, target)?;
    let fd = g.sub(fr, ft)?;
    let sq = g.mul(fd, fd)?;
    let perc = g.mean(sq)?;
    let weighted = g.scale(perc, beta);
    let total = g.add(l1, weighted)?;
    let breakdown = LossBreakdown::new(
        g.value(total).item(),
        vec![term("l1", 1.0, g.value(l1).item()), term("perceptual", beta, g.value(perc).item())],
    );
    Ok((total, breakdown))
}
