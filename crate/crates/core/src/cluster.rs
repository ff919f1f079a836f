//! Average-linkage (UPGMA) clustering of tasks, partition agreement
//! metrics, and random partitions for grouping baselines.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixKind, PairwiseMatrix};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("distance ({row}, {col}) is invalid; impute missing entries before clustering")]
    InvalidEntry { row: usize, col: usize },
    #[error("distance ({row}, {col}) = {value} is negative or not finite")]
    BadDistance { row: usize, col: usize, value: f64 },
    #[error("distance matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("diagonal distance ({index}, {index}) must be zero")]
    NonZeroDiagonal { index: usize },
    #[error("cannot cluster an empty task set")]
    Empty,
    #[error("k = {k} is outside 1..={n}")]
    GroupCount { k: usize, n: usize },
    #[error("partitions have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {label} is outside 0..{n_groups} or a group is empty")]
    BadLabels { label: usize, n_groups: usize },
}

/// One agglomeration step. Leaves are nodes `0..K`; the m-th merge creates
/// node `K + m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    n_leaves: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Merge list as `left,right,height` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["left", "right", "height"])?;
        for m in &self.merges {
            w.write_record([m.left.to_string(), m.right.to_string(), m.height.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Task-to-group assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    n_groups: usize,
}

impl Partition {
    /// Validates that labels cover `0..n_groups` with no empty group.
    pub fn new(labels: Vec<usize>, n_groups: usize) -> Result<Self, ClusterError> {
        let mut seen = vec![false; n_groups];
        for &l in &labels {
            if l >= n_groups {
                return Err(ClusterError::BadLabels { label: l, n_groups });
            }
            seen[l] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(ClusterError::BadLabels {
                label: empty,
                n_groups,
            });
        }
        Ok(Self { labels, n_groups })
    }

    /// Partition from arbitrary labels, renumbered by first occurrence.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let relabeled: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self {
            n_groups: map.len(),
            labels: relabeled,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member indices of each group, in label order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Same grouping with labels renumbered by first occurrence.
    pub fn canonical(&self) -> Self {
        Self::from_labels(&self.labels)
    }

    /// `task_name,group_id` CSV.
    pub fn write_csv<W: Write>(&self, names: &[String], out: W) -> Result<(), csv::Error> {
        assert_eq!(names.len(), self.labels.len(), "one name per task");
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task_name", "group_id"])?;
        for (name, l) in names.iter().zip(&self.labels) {
            w.write_record([name.as_str(), &l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_distances(d: &PairwiseMatrix) -> Result<(), ClusterError> {
    let n = d.n();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    for i in 0..n {
        for j in 0..n {
            let v = d.get(i, j).ok_or(ClusterError::InvalidEntry { row: i, col: j })?;
            if i == j && v != 0.0 {
                return Err(ClusterError::NonZeroDiagonal { index: i });
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(ClusterError::BadDistance { row: i, col: j, value: v });
            }
            if d.value(j, i) != v {
                return Err(ClusterError::NotSymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// UPGMA agglomeration. At each step the pair of active clusters with the
/// smallest mean inter-cluster distance merges; among equal distances the
/// lexicographically smallest pair of node ids wins. Distances to the new
/// cluster follow the size-weighted Lance–Williams update.
pub fn linkage_average(d: &PairwiseMatrix) -> Result<Dendrogram, ClusterError> {
    check_distances(d)?;
    let n = d.n();
    // Active clusters kept sorted by node id; `dist` is indexed by slot.
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| d.value(i, j)).collect()).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for m in 0..n.saturating_sub(1) {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                if dist[a][b] < best.2 {
                    best = (a, b, dist[a][b]);
                }
            }
        }
        let (a, b, height) = best;
        let (sa, sb) = (sizes[a], sizes[b]);
        let merged: Vec<f64> = (0..ids.len())
            .map(|c| (sa as f64 * dist[a][c] + sb as f64 * dist[b][c]) / (sa + sb) as f64)
            .collect();
        merges.push(Merge {
            left: ids[a],
            right: ids[b],
            height,
            size: sa + sb,
        });

        // Remove b then a (b > a), then append the new node, which has the
        // largest id so the slot order stays sorted by id.
        let keep: Vec<usize> = (0..ids.len()).filter(|&c| c != a && c != b).collect();
        let mut next_dist: Vec<Vec<f64>> = keep.iter().map(|&r| keep.iter().map(|&c| dist[r][c]).collect()).collect();
        for (row, &r) in next_dist.iter_mut().zip(&keep) {
            row.push(merged[r]);
        }
        let mut last: Vec<f64> = keep.iter().map(|&c| merged[c]).collect();
        last.push(0.0);
        next_dist.push(last);
        ids = keep.iter().map(|&c| ids[c]).chain(std::iter::once(n + m)).collect();
        sizes = keep.iter().map(|&c| sizes[c]).chain(std::iter::once(sa + sb)).collect();
        dist = next_dist;
    }
    Ok(Dendrogram { n_leaves: n, merges })
}

/// Partition into `k` groups by undoing the last `k − 1` merges. Groups are
/// numbered in order of their first leaf.
pub fn cut_k(dendrogram: &Dendrogram, k: usize) -> Result<Partition, ClusterError> {
    let n = dendrogram.n_leaves;
    if k == 0 || k > n {
        return Err(ClusterError::GroupCount { k, n });
    }
    // Union-find over leaves plus internal nodes.
    let mut parent: Vec<usize> = (0..n + dendrogram.merges.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (m, merge) in dendrogram.merges.iter().take(n - k).enumerate() {
        let node = n + m;
        let l = find(&mut parent, merge.left);
        let r = find(&mut parent, merge.right);
        parent[l] = node;
        parent[r] = node;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    Ok(Partition::from_labels(&roots))
}

fn contingency(a: &Partition, b: &Partition) -> Result<Vec<Vec<usize>>, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut table = vec![vec![0usize; b.n_groups]; a.n_groups];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        table[x][y] += 1;
    }
    Ok(table)
}

fn choose2(n: usize) -> i128 {
    let n = n as i128;
    n * (n - 1) / 2
}

/// Adjusted Rand index (Hubert–Arabie). When both partitions are trivial
/// in the same way the index is 1; any other zero-denominator case is 0.
pub fn ari(a: &Partition, b: &Partition) -> Result<f64, ClusterError> {
    let table = contingency(a, b)?;
    // Pair counts are integers; scaling numerator and denominator by
    // 2·C(n, 2) keeps the arithmetic exact until the final division.
    let index: i128 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: i128 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: i128 = (0..b.n_groups)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(a.len());
    if total == 0 {
        return Ok(1.0);
    }
    let num = 2 * (index * total - rows * cols);
    let den = (rows + cols) * total - 2 * rows * cols;
    if den == 0 {
        return Ok(if a.canonical() == b.canonical() { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalised by the arithmetic mean of the two
/// entropies; 1 when both partitions have zero entropy.
pub fn nmi(a: &Partition, b: &Partition) -> Result<f64, ClusterError> {
    let table = contingency(a, b)?;
    let n = a.len() as f64;
    if a.is_empty() {
        return Ok(1.0);
    }
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..b.n_groups).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let ha = entropy(row_sums.iter().copied(), n);
    let hb = entropy(col_sums.iter().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// Outcome of clustering a gradient matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub partition: Partition,
    /// Number of off-diagonal pairs whose similarity was imputed.
    pub imputed_pairs: usize,
}

/// Replaces invalid off-diagonal entries with the mean of the two tasks'
/// column means over valid off-diagonal entries. Returns the filled matrix
/// and the number of imputed pairs.
pub fn impute_column_means(g: &PairwiseMatrix) -> (PairwiseMatrix, usize) {
    let n = g.n();
    let valid: Vec<(usize, usize, f64)> = g.upper_triangle().collect();
    let overall = if valid.is_empty() {
        0.0
    } else {
        valid.iter().map(|v| v.2).sum::<f64>() / valid.len() as f64
    };
    let col_mean: Vec<f64> = (0..n)
        .map(|c| {
            let vals: Vec<f64> = (0..n).filter(|&r| r != c).filter_map(|r| g.get(r, c)).collect();
            if vals.is_empty() {
                overall
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let mut out = g.clone();
    let mut imputed = 0;
    for i in 0..n {
        out.set(i, i, 1.0);
        for j in i + 1..n {
            if !g.is_valid(i, j) {
                out.set(i, j, 0.5 * (col_mean[i] + col_mean[j]));
                imputed += 1;
            }
        }
    }
    (out, imputed)
}

/// Average-linkage clustering of `D = 1 − G` cut into `n_groups` groups.
pub fn group_tasks(g: &PairwiseMatrix, n_groups: usize) -> Result<Grouping, ClusterError> {
    let (filled, imputed_pairs) = impute_column_means(g);
    let n = g.n();
    let mut d = PairwiseMatrix::new(n, MatrixKind::Distance, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            d.set(i, j, (1.0 - filled.value(i, j)).max(0.0));
        }
    }
    let dendrogram = linkage_average(&d)?;
    Ok(Grouping {
        partition: cut_k(&dendrogram, n_groups)?,
        imputed_pairs,
    })
}

/// Uniform draw over all assignments of `k` items to `n_groups` labels in
/// which every label is used.
pub fn random_partition(k: usize, n_groups: usize, seed: u64) -> Result<Partition, ClusterError> {
    if n_groups == 0 || n_groups > k {
        return Err(ClusterError::GroupCount { k: n_groups, n: k });
    }
    // ways[m][u]: assignments of m remaining items that fill u empty labels
    // when n_groups − u labels are already used.
    let mut ways = vec![vec![0.0f64; n_groups + 1]; k + 1];
    ways[0][0] = 1.0;
    for m in 1..=k {
        for u in 0..=n_groups {
            let reuse = (n_groups - u) as f64 * ways[m - 1][u];
            let fresh = if u > 0 { u as f64 * ways[m - 1][u - 1] } else { 0.0 };
            ways[m][u] = reuse + fresh;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(k);
    let mut used: Vec<usize> = Vec::with_capacity(n_groups);
    let mut empty: Vec<usize> = (0..n_groups).collect();
    for m in (1..=k).rev() {
        let u = empty.len();
        let p_fresh = if u > 0 { u as f64 * ways[m - 1][u - 1] / ways[m][u] } else { 0.0 };
        if rng.random::<f64>() < p_fresh {
            let label = empty.swap_remove(rng.random_range(0..u));
            used.push(label);
            labels.push(label);
        } else {
            labels.push(used[rng.random_range(0..used.len())]);
        }
    }
    Partition::new(labels, n_groups)
}
