//! Reference implementations shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskaffinity::matrix::{MatrixKind, PairwiseMatrix};
use taskaffinity::paneldata::TaskPanel;

/// Exhaustive UPGMA: every step recomputes each cluster-pair distance as
/// the plain mean over all cross pairs of leaves.
pub fn brute_force_upgma(d: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let n = d.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    for m in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in 0..clusters.len() {
                if a == b {
                    continue;
                }
                let (ia, la) = &clusters[a];
                let (ib, lb) = &clusters[b];
                if ia > ib {
                    continue;
                }
                let total: f64 = la.iter().flat_map(|&x| lb.iter().map(move |&y| d[x][y])).sum();
                let avg = total / (la.len() * lb.len()) as f64;
                let better = match best {
                    None => true,
                    Some((h, ba, bb)) => {
                        avg < h - 1e-12 || ((avg - h).abs() <= 1e-12 && (*ia, *ib) < (clusters[ba].0, clusters[bb].0))
                    }
                };
                if better {
                    best = Some((avg, a, b));
                }
            }
        }
        let (h, a, b) = best.unwrap();
        let (ia, la) = clusters[a].clone();
        let (ib, lb) = clusters[b].clone();
        merges.push((ia, ib, h));
        clusters.retain(|c| c.0 != ia && c.0 != ib);
        clusters.push((n + m, la.into_iter().chain(lb).collect()));
    }
    merges
}

pub fn to_matrix(d: &[Vec<f64>]) -> PairwiseMatrix {
    PairwiseMatrix::from_fn(d.len(), MatrixKind::Distance, |i, j| d[i][j]).unwrap()
}

pub fn random_distances(k: usize, rng: &mut ChaCha8Rng, integer: bool) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = if integer { rng.random_range(1..4) as f64 } else { rng.random_range(0.0..2.0) };
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Random panel where every task keeps at least one measured sample.
pub fn random_panel(n: usize, d: usize, k: usize, seed: u64) -> TaskPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut mask: Vec<bool> = (0..n * k).map(|_| rng.random_bool(0.7)).collect();
    mask[..k].fill(true);
    TaskPanel::new(
        d,
        features,
        labels,
        mask,
        (0..k).map(|t| format!("t{t}")).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
    )
    .unwrap()
}
