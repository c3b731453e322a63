//! Retrieval metrics (Recall@K, mAP@K, mAR@K), box IoU, and grounding
//! accuracy. Every aggregate here is checked against brute-force
//! enumeration in the tests; the implementations stay deliberately literal.

use std::collections::HashSet;

use super::grounding::BoxProposal;

/// One query's gallery ranking, best first.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Scores must be non-increasing and ids unique.
    pub fn check(&self) -> bool {
        if self.ids.len() != self.scores.len() {
            return false;
        }
        if self.scores.windows(2).any(|w| w[0] < w[1]) {
            return false;
        }
        let unique: HashSet<usize> = self.ids.iter().copied().collect();
        unique.len() == self.ids.len()
    }
}

/// Rankings for a batch of queries over one shared gallery.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub queries: Vec<RankedList>,
}

/// Full descending sort of gallery scores; ties keep the lower id first so
/// results are order-stable.
pub fn rank_by_scores(scores: &[f64]) -> RankedList {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sorted_scores = ids.iter().map(|&i| scores[i]).collect();
    RankedList {
        ids,
        scores: sorted_scores,
    }
}

/// Aggregated metrics at one cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAtK {
    pub k: usize,
    /// Fraction of queries with at least one relevant item in the top K.
    pub recall: f64,
    /// Mean average precision truncated at K, normalized by min(K, |rel|).
    pub map: f64,
    /// Mean recall of the relevant set at K, normalized by min(K, |rel|).
    pub mar: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn ap_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    ap / k.min(relevant.len()) as f64
}

/// Compute Recall@K / mAP@K / mAR@K for every K in `ks`. Queries with an
/// empty relevance set are skipped (with a warning) rather than counted as
/// failures.
pub fn retrieval_metrics(
    result: &RetrievalResult,
    relevance: &[Vec<usize>],
    ks: &[usize],
) -> Vec<MetricsAtK> {
    assert_eq!(
        result.queries.len(),
        relevance.len(),
        "one relevance set per query"
    );
    let sets: Vec<HashSet<usize>> = relevance
        .iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    for (i, s) in sets.iter().enumerate() {
        if s.is_empty() {
            eprintln!("warning: query {i} has an empty relevance set; skipped");
        }
    }
    ks.iter()
        .map(|&k| {
            let mut recall = 0.0;
            let mut map = 0.0;
            let mut mar = 0.0;
            let mut evaluated = 0usize;
            for (list, rel) in result.queries.iter().zip(&sets) {
                if rel.is_empty() {
                    continue;
                }
                evaluated += 1;
                let top = &list.ids[..k.min(list.ids.len())];
                let hits = top.iter().filter(|id| rel.contains(id)).count();
                if hits > 0 {
                    recall += 1.0;
                }
                map += ap_at_k(&list.ids, rel, k);
                mar += hits as f64 / k.min(rel.len()) as f64;
            }
            let n = evaluated.max(1) as f64;
            MetricsAtK {
                k,
                recall: recall / n,
                map: map / n,
                mar: mar / n,
                evaluated,
                skipped: sets.len() - evaluated,
            }
        })
        .collect()
}

/// Intersection over union of two half-open boxes.
pub fn iou(a: &BoxProposal, b: &BoxProposal) -> f64 {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let inter = ix2.saturating_sub(ix1) * iy2.saturating_sub(iy1);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of predictions whose IoU with the paired ground truth clears
/// each threshold.
pub fn grounding_accuracy(
    preds: &[BoxProposal],
    gts: &[BoxProposal],
    thresholds: &[f64],
) -> Vec<(f64, f64)> {
    assert_eq!(preds.len(), gts.len(), "one prediction per ground truth");
    thresholds
        .iter()
        .map(|&thr| {
            if preds.is_empty() {
                return (thr, 0.0);
            }
            let hits = preds
                .iter()
                .zip(gts)
                .filter(|(p, g)| iou(p, g) >= thr)
                .count();
            (thr, hits as f64 / preds.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn list(ids: Vec<usize>) -> RankedList {
        let n = ids.len();
        RankedList {
            ids,
            scores: (0..n).map(|i| -(i as f64)).collect(),
        }
    }

    #[test]
    fn relevant_at_rank_one_maxes_everything() {
        let result = RetrievalResult {
            queries: vec![list(vec![3, 1, 0])],
        };
        let m = retrieval_metrics(&result, &[vec![3]], &[1]);
        assert_eq!(m[0].recall, 1.0);
        assert_eq!(m[0].map, 1.0);
        assert_eq!(m[0].mar, 1.0);
        assert_eq!(m[0].evaluated, 1);
    }

    #[test]
    fn ranking_breaks_ties_toward_lower_ids() {
        let ranked = rank_by_scores(&[0.5, 0.9, 0.5, 0.1]);
        assert_eq!(ranked.ids, vec![1, 0, 2, 3]);
        assert!(ranked.check());
    }

    #[test]
    fn empty_relevance_queries_are_skipped_not_failed() {
        let result = RetrievalResult {
            queries: vec![list(vec![0, 1]), list(vec![1, 0])],
        };
        let m = retrieval_metrics(&result, &[vec![], vec![1]], &[1]);
        assert_eq!(m[0].evaluated, 1);
        assert_eq!(m[0].skipped, 1);
        assert_eq!(m[0].recall, 1.0);
    }

    /// Written from the definitions, independently of the library code:
    /// every prefix statistic is recounted from scratch.
    fn oracle(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64, f64) {
        let is_rel = |id: usize| relevant.contains(&id);
        let top: Vec<usize> = ranked.iter().take(k).copied().collect();
        let recall = if top.iter().any(|&id| is_rel(id)) { 1.0 } else { 0.0 };
        let mut ap = 0.0;
        for pos in 1..=top.len() {
            if is_rel(top[pos - 1]) {
                let mut hits_in_prefix = 0;
                for &id in top.iter().take(pos) {
                    if is_rel(id) {
                        hits_in_prefix += 1;
                    }
                }
                ap += hits_in_prefix as f64 / pos as f64;
            }
        }
        let denom = k.min(relevant.len()) as f64;
        let hits = top.iter().filter(|&&id| is_rel(id)).count() as f64;
        (recall, ap / denom, hits / denom)
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..250 {
            let gallery = rng.random_range(1..=100usize);
            let scores: Vec<f64> = (0..gallery).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ranked = rank_by_scores(&scores);
            let relevant: Vec<usize> =
                (0..gallery).filter(|_| rng.random_bool(0.2)).collect();
            if relevant.is_empty() {
                continue;
            }
            let k = rng.random_range(1..=gallery);
            let result = RetrievalResult {
                queries: vec![ranked.clone()],
            };
            let m = &retrieval_metrics(&result, &[relevant.clone()], &[k])[0];
            let (recall, ap, ar) = oracle(&ranked.ids, &relevant, k);
            assert_eq!(m.recall, recall);
            assert!((m.map - ap).abs() < 1e-12, "{} vs {ap}", m.map);
            assert!((m.mar - ar).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_spans_identity_overlap_and_disjoint() {
        let a = BoxProposal::new(0, 0, 2, 2).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoxProposal::new(1, 1, 3, 3).unwrap();
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        let c = BoxProposal::new(5, 5, 6, 6).unwrap();
        assert_eq!(iou(&a, &c), 0.0);
        assert_eq!(iou(&b, &a), iou(&a, &b));
    }

    #[test]
    fn grounding_accuracy_counts_threshold_hits() {
        let gt = BoxProposal::new(0, 0, 4, 4).unwrap();
        let exact = BoxProposal::new(0, 0, 4, 4).unwrap();
        let shifted = BoxProposal::new(1, 0, 5, 4).unwrap(); // IoU 12/20 = 0.6
        let acc = grounding_accuracy(
            &[exact, shifted],
            &[gt.clone(), gt],
            &[0.5, 0.7],
        );
        assert_eq!(acc[0], (0.5, 1.0));
        assert_eq!(acc[1], (0.7, 0.5));
    }
}
