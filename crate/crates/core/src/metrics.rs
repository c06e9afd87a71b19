//! Retrieval evaluation: cross-camera ranking, average precision, per-domain
//! mAP / Rank-1, and seen/unseen aggregation with a forgetting matrix.

use std::collections::BTreeMap;

use crate::data::{stack_images, Domain, Sample, Split};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Anything that maps an `N×3×H×W` batch to `N×D` embeddings.
pub trait Embedder {
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

impl Embedder for ModelParams {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.embed_values(images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub domain: usize,
    pub stage: usize,
    pub map: f64,
    pub rank1: f64,
    /// Queries that had at least one valid match.
    pub queries: usize,
    /// Queries skipped for lack of a valid match.
    pub skipped: usize,
    pub gallery: usize,
}

fn normalized_rows(e: &Tensor) -> Vec<Vec<f64>> {
    let d = e.shape()[1];
    e.data()
        .chunks(d)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

fn embed_samples(model: &dyn Embedder, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    Ok(normalized_rows(&model.embed(&stack_images(samples.iter().copied())?)?))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery indices ordered by distance to the query, excluding entries that
/// share the query's identity and camera. Ties go to the lower sample id.
fn rank_embedded(query: &Sample, q: &[f64], gallery: &[&Sample], g: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut keep: Vec<(f64, usize, usize)> = gallery
        .iter()
        .enumerate()
        .filter(|(_, s)| !(s.identity == query.identity && s.camera == query.camera))
        .map(|(i, s)| (sq_dist(q, &g[i]), s.id, i))
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid(
            "rank_gallery",
            format!("every gallery entry excluded for query {}", query.id),
        ));
    }
    keep.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keep.into_iter().map(|(_, _, i)| i).collect())
}

pub fn rank_gallery(query: &Sample, gallery: &[&Sample], model: &dyn Embedder) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::invalid("rank_gallery", "empty gallery"));
    }
    let q = embed_samples(model, &[query])?;
    let g = embed_samples(model, gallery)?;
    rank_embedded(query, &q[0], gallery, &g)
}

/// Mean over relevant positions `k` of precision at `k`.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::invalid("average_precision", "no relevant item"));
    }
    Ok(total / hits as f64)
}

pub fn evaluate_domain(model: &dyn Embedder, domain: &Domain, stage: usize) -> Result<MetricsRecord> {
    let queries: Vec<&Sample> = domain.split(Split::Query).collect();
    let gallery: Vec<&Sample> = domain.split(Split::Gallery).collect();
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid(
            "evaluate_domain",
            format!("domain {} needs queries and gallery", domain.id),
        ));
    }
    let q = embed_samples(model, &queries)?;
    let g = embed_samples(model, &gallery)?;
    let (mut ap_sum, mut top1, mut valid, mut skipped) = (0.0, 0usize, 0usize, 0usize);
    for (qi, query) in queries.iter().enumerate() {
        let order = match rank_embedded(query, &q[qi], &gallery, &g) {
            Ok(o) => o,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let flags: Vec<bool> = order.iter().map(|&i| gallery[i].identity == query.identity).collect();
        match average_precision(&flags) {
            Ok(ap) => {
                ap_sum += ap;
                valid += 1;
                if flags[0] {
                    top1 += 1;
                }
            }
            Err(_) => skipped += 1,
        }
    }
    if valid == 0 {
        return Err(Error::invalid(
            "evaluate_domain",
            format!("domain {} has no query with a valid match", domain.id),
        ));
    }
    Ok(MetricsRecord {
        domain: domain.id,
        stage,
        map: ap_sum / valid as f64,
        rank1: top1 as f64 / valid as f64,
        queries: valid,
        skipped,
        gallery: gallery.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub stages: Vec<usize>,
    /// Seen domains first, then unseen, as given.
    pub domains: Vec<usize>,
    /// `matrix[stage][domain]` is mAP.
    pub matrix: Vec<Vec<f64>>,
    pub rank1_matrix: Vec<Vec<f64>>,
    pub seen_map: f64,
    pub seen_rank1: f64,
    pub unseen_map: Option<f64>,
    pub unseen_rank1: Option<f64>,
    /// Per domain, best mAP over stages minus final-stage mAP.
    pub forgetting: Vec<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Arranges records into the stage × domain grid. Averages use the final stage.
pub fn aggregate_report(records: &[MetricsRecord], seen: &[usize], unseen: &[usize]) -> Result<Aggregate> {
    let mut cells: BTreeMap<(usize, usize), &MetricsRecord> = BTreeMap::new();
    for r in records {
        cells.insert((r.stage, r.domain), r);
    }
    let stages: Vec<usize> = records
        .iter()
        .map(|r| r.stage)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if stages.is_empty() || seen.is_empty() {
        return Err(Error::invalid("aggregate_report", "no records or no seen domains"));
    }
    let domains: Vec<usize> = seen.iter().chain(unseen).copied().collect();
    let missing: Vec<String> = stages
        .iter()
        .flat_map(|&s| domains.iter().map(move |&d| (s, d)))
        .filter(|k| !cells.contains_key(k))
        .map(|(s, d)| format!("stage {s} domain {d}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid("aggregate_report", format!("missing cells: {}", missing.join(", "))));
    }
    let grid = |f: fn(&MetricsRecord) -> f64| -> Vec<Vec<f64>> {
        stages
            .iter()
            .map(|&s| domains.iter().map(|&d| f(cells[&(s, d)])).collect())
            .collect()
    };
    let matrix = grid(|r| r.map);
    let rank1_matrix = grid(|r| r.rank1);
    let last = matrix.len() - 1;
    let ns = seen.len();
    let forgetting = (0..domains.len())
        .map(|j| {
            let best = matrix.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            best - matrix[last][j]
        })
        .collect();
    Ok(Aggregate {
        seen_map: mean(matrix[last][..ns].iter().copied()).unwrap(),
        seen_rank1: mean(rank1_matrix[last][..ns].iter().copied()).unwrap(),
        unseen_map: mean(matrix[last][ns..].iter().copied()),
        unseen_rank1: mean(rank1_matrix[last][ns..].iter().copied()),
        stages,
        domains,
        matrix,
        rank1_matrix,
        forgetting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true, false]).unwrap(), 0.5);
        assert_eq!(average_precision(&[true; 6]).unwrap(), 1.0);
        assert!(average_precision(&[false, false]).is_err());
    }

    fn record(stage: usize, domain: usize, map: f64) -> MetricsRecord {
        MetricsRecord {
            domain,
            stage,
            map,
            rank1: map,
            queries: 1,
            skipped: 0,
            gallery: 1,
        }
    }

    #[test]
    fn aggregate_cases() {
        let a = aggregate_report(&[record(1, 0, 0.7)], &[0], &[]).unwrap();
        assert_eq!(a.seen_map, 0.7);
        assert_eq!(a.unseen_map, None);
        let a = aggregate_report(&[record(1, 0, 0.4), record(1, 1, 0.6)], &[0, 1], &[]).unwrap();
        assert!((a.seen_map - 0.5).abs() < 1e-15);
        let col = [0.9, 0.8, 0.8, 0.5];
        let recs: Vec<_> = col.iter().enumerate().map(|(s, &m)| record(s, 3, m)).collect();
        let a = aggregate_report(&recs, &[3], &[]).unwrap();
        assert!((a.forgetting[0] - (0.9 - 0.5)).abs() < 1e-15);
        let err = aggregate_report(&[record(1, 0, 0.4), record(2, 1, 0.6)], &[0, 1], &[]).unwrap_err();
        assert!(err.to_string().contains("stage 1 domain 1"), "{err}");
    }

    fn brute_force_ap(rel: &[bool]) -> f64 {
        let n_rel = rel.iter().filter(|&&r| r).count();
        let mut total = 0.0;
        for k in 1..=rel.len() {
            if rel[k - 1] {
                let p_at_k = rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
                total += p_at_k;
            }
        }
        total / n_rel as f64
    }

    #[test]
    fn ap_matches_brute_force_on_all_short_lists() {
        for len in 1..=8 {
            for mask in 1u32..(1 << len) {
                let rel: Vec<bool> = (0..len).map(|i| mask & (1 << i) != 0).collect();
                assert_eq!(average_precision(&rel).unwrap(), brute_force_ap(&rel), "{rel:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn ap_in_unit_interval(rel in prop::collection::vec(any::<bool>(), 1..40)) {
            prop_assume!(rel.iter().any(|&r| r));
            let ap = average_precision(&rel).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }
}
