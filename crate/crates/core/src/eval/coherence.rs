//! Intra- versus inter-group embedding distances for identifier groups.

use ace_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ids::SemanticIdentifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    /// Mean distance between members of the same group.
    pub intra: f64,
    /// Mean distance between members of different groups.
    pub inter: f64,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
    /// Whether the means come from sampled pairs.
    pub sampled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Groups keyed by the coarse token.
    pub coarse: PairStats,
    /// Groups keyed by `(k, v_1)`, comparing only pairs that share `k`.
    pub fine_within_coarse: PairStats,
    /// Coarse groups where the `(k, v_1)` split holds (intra < cross).
    pub coarse_groups_ordered: usize,
    /// Coarse groups with at least one intra and one cross pair.
    pub coarse_groups_compared: usize,
    pub max_pairs: usize,
}

fn dist(x: &Tensor<f32>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j))
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn choose2(n: usize) -> u64 {
    (n as u64) * (n as u64).saturating_sub(1) / 2
}

/// Mean within-group and cross-group distances among pairs that share
/// `scope` (all pairs when `scope` is `None`). Categories with more than
/// `max_pairs` pairs are estimated from `max_pairs` uniform samples.
pub fn pair_distances(x: &Tensor<f32>, labels: &[usize], scope: Option<&[usize]>, max_pairs: usize, rng: &mut Rng) -> PairStats {
    let n = labels.len();
    let scope_of = |i: usize| scope.map_or(0, |s| s[i]);
    // Members per scope and per (scope, label).
    let mut by_scope: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let mut by_group: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for i in 0..n {
        by_scope.entry(scope_of(i)).or_default().push(i);
        by_group.entry((scope_of(i), labels[i])).or_default().push(i);
    }
    let intra_total: u64 = by_group.values().map(|m| choose2(m.len())).sum();
    let scope_total: u64 = by_scope.values().map(|m| choose2(m.len())).sum();
    let inter_total = scope_total - intra_total;
    let exhaustive = intra_total + inter_total <= max_pairs as u64;
    let (mut intra, mut inter) = (0.0, 0.0);
    if exhaustive {
        for members in by_scope.values() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    let d = dist(x, i, j);
                    if labels[i] == labels[j] {
                        intra += d;
                    } else {
                        inter += d;
                    }
                }
            }
        }
        return PairStats {
            intra: intra / intra_total.max(1) as f64,
            inter: inter / inter_total.max(1) as f64,
            intra_pairs: intra_total,
            inter_pairs: inter_total,
            sampled: false,
        };
    }
    // Draw a pair uniformly from `groups` weighted by pair counts, keeping
    // it only when `keep` accepts it.
    let sample = |groups: Vec<&Vec<usize>>, count: u64, keep: &dyn Fn(usize, usize) -> bool, rng: &mut Rng| -> f64 {
        let weights: Vec<f64> = groups.iter().map(|m| choose2(m.len()) as f64).collect();
        let target = (max_pairs as u64).min(count);
        let mut sum = 0.0;
        let mut got = 0u64;
        while got < target {
            let m = groups[rng.weighted_index(&weights)];
            let a = rng.below(m.len());
            let mut b = rng.below(m.len() - 1);
            if b >= a {
                b += 1;
            }
            if keep(m[a], m[b]) {
                sum += dist(x, m[a], m[b]);
                got += 1;
            }
        }
        sum / target.max(1) as f64
    };
    let same = |i: usize, j: usize| labels[i] == labels[j];
    let intra_groups: Vec<&Vec<usize>> = by_group.values().filter(|m| m.len() > 1).collect();
    let scope_groups: Vec<&Vec<usize>> = by_scope.values().filter(|m| m.len() > 1).collect();
    let intra = if intra_total > 0 { sample(intra_groups, intra_total, &|_, _| true, rng) } else { 0.0 };
    let inter = if inter_total > 0 { sample(scope_groups, inter_total, &|i, j| !same(i, j), rng) } else { 0.0 };
    PairStats {
        intra,
        inter,
        intra_pairs: intra_total,
        inter_pairs: inter_total,
        sampled: true,
    }
}

/// Coherence of identifier groups over item embeddings. Items are put in
/// identifier order first, so the result does not depend on item order.
pub fn coherence_stats(embeddings: &Tensor<f32>, identifiers: &[SemanticIdentifier], max_pairs: usize, seed: u64) -> Result<CoherenceReport> {
    if embeddings.rows() != identifiers.len() {
        return Err(CoreError::invalid(format!("{} embeddings for {} identifiers", embeddings.rows(), identifiers.len())));
    }
    if identifiers.iter().any(|id| id.len() < 2) {
        return Err(CoreError::invalid("coherence needs identifiers with a coarse and a first fine token"));
    }
    let mut order: Vec<usize> = (0..identifiers.len()).collect();
    order.sort_by(|&a, &b| identifiers[a].cmp(&identifiers[b]));
    let d = embeddings.cols();
    let x = Tensor::new(vec![order.len(), d], order.iter().flat_map(|&i| embeddings.row(i).iter().copied()).collect())?;
    let coarse: Vec<usize> = order.iter().map(|&i| identifiers[i].0[0] as usize).collect();
    let fine: Vec<usize> = order.iter().map(|&i| identifiers[i].0[1] as usize).collect();
    let mut sizes = std::collections::BTreeMap::<usize, usize>::new();
    for &c in &coarse {
        *sizes.entry(c).or_default() += 1;
    }
    if sizes.len() < 2 || sizes.values().filter(|&&s| s >= 2).count() < 2 {
        return Err(CoreError::invalid("coherence needs at least two coarse groups with two members each"));
    }
    let root = Rng::new(seed);
    let coarse_stats = pair_distances(&x, &coarse, None, max_pairs, &mut root.substream(&[0]));
    let fine_stats = pair_distances(&x, &fine, Some(&coarse), max_pairs, &mut root.substream(&[1]));
    let (mut ordered, mut compared) = (0, 0);
    for (&k, _) in sizes.iter().filter(|(_, &s)| s >= 2) {
        let idx: Vec<usize> = (0..coarse.len()).filter(|&i| coarse[i] == k).collect();
        let sub = Tensor::new(vec![idx.len(), d], idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect())?;
        let labels: Vec<usize> = idx.iter().map(|&i| fine[i]).collect();
        let s = pair_distances(&sub, &labels, None, max_pairs, &mut root.substream(&[2, k as u64]));
        if s.intra_pairs > 0 && s.inter_pairs > 0 {
            compared += 1;
            ordered += usize::from(s.intra < s.inter);
        }
    }
    Ok(CoherenceReport {
        coarse: coarse_stats,
        fine_within_coarse: fine_stats,
        coarse_groups_ordered: ordered,
        coarse_groups_compared: compared,
        max_pairs,
    })
}
