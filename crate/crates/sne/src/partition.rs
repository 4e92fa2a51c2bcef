//! Feature-index partitioning: fixed, k-means, size-balanced k-means,
//! agglomerative (complete linkage, cosine distance), and contiguous plans.
//!
//! Clustering operates on the columns of a feature matrix. Cosine geometry
//! is realized by L2-normalizing each column and running Euclidean k-means
//! on the unit sphere.

use crate::error::{Error, Result};
use crate::rng::SneRng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Teacher penultimate activations over a dataset pass: M samples × D dims.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Tensor, // [M, D]
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape.len() != 2 {
            return Err(Error::shape(
                "feature_matrix",
                format!("{:?}: expected [M, D]", values.shape),
            ));
        }
        if values.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape[1]
    }

    /// Column j as a dense vector of length M.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let (m, d) = (self.rows(), self.cols());
        (0..m).map(|i| self.values.data[i * d + j]).collect()
    }

    /// All columns L2-normalized (zero columns stay zero).
    pub fn normalized_columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols())
            .map(|j| {
                let mut c = self.column(j);
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    for v in c.iter_mut() {
                        *v /= n;
                    }
                }
                c
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Fixed,
    Kmeans,
    BalancedKmeans,
    Agglomerative,
    Contiguous,
}

impl std::fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PartitionScheme::Fixed => "fixed",
            PartitionScheme::Kmeans => "kmeans",
            PartitionScheme::BalancedKmeans => "balanced_kmeans",
            PartitionScheme::Agglomerative => "agglomerative",
            PartitionScheme::Contiguous => "contiguous",
        };
        f.write_str(s)
    }
}

/// N disjoint feature-index subsets covering {0..D−1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub subsets: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
    pub seed: Option<u64>,
    pub dims: usize,
}

impl PartitionPlan {
    pub fn n_students(&self) -> usize {
        self.subsets.len()
    }
}

/// Asserts disjointness and exact cover of {0..D−1}; reports duplicates and
/// gaps.
pub fn validate_partition(plan: &PartitionPlan, d: usize) -> Result<()> {
    let mut seen = vec![0usize; d];
    let mut problems = Vec::new();
    for (si, subset) in plan.subsets.iter().enumerate() {
        for &idx in subset {
            if idx >= d {
                problems.push(format!("subset {}: index {} out of range (D={})", si, idx, d));
            } else {
                seen[idx] += 1;
            }
        }
    }
    for (idx, &count) in seen.iter().enumerate() {
        if count > 1 {
            problems.push(format!("duplicate index {} ({} occurrences)", idx, count));
        } else if count == 0 {
            problems.push(format!("gap at index {}", idx));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid("validate_partition", problems.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedMode {
    Contiguous,
    Random { seed: u64 },
}

/// Equal-sized index split. Contiguous mode gives student j the columns
/// `[j·D/N, (j+1)·D/N)`; random mode applies a seeded shuffle first.
pub fn fixed_partition(d: usize, n: usize, mode: FixedMode) -> Result<PartitionPlan> {
    if n == 0 || n > d {
        return Err(Error::invalid(
            "fixed_partition",
            format!("need 1 <= N <= D, got N={} D={}", n, d),
        ));
    }
    let mut order: Vec<usize> = (0..d).collect();
    let (scheme_seed, scheme) = match mode {
        FixedMode::Contiguous => (None, PartitionScheme::Contiguous),
        FixedMode::Random { seed } => {
            use rand::seq::SliceRandom;
            let mut rng = crate::rng::substream(seed, "fixed_partition");
            order.shuffle(&mut rng);
            (Some(seed), PartitionScheme::Fixed)
        }
    };
    let mut subsets = Vec::with_capacity(n);
    for j in 0..n {
        let lo = j * d / n;
        let hi = (j + 1) * d / n;
        let mut s: Vec<usize> = order[lo..hi].to_vec();
        s.sort_unstable();
        subsets.push(s);
    }
    Ok(PartitionPlan {
        subsets,
        scheme,
        seed: scheme_seed,
        dims: d,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(points: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut cents = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (c, v) in cents[a].iter_mut().zip(p) {
            *c += v;
        }
    }
    for (c, &n) in cents.iter_mut().zip(&counts) {
        if n > 0 {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    cents
}

pub(crate) fn kmeans_objective(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let cents = centroids_of(points, assign, k);
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &cents[a]))
        .sum()
}

/// One Lloyd run from a k-means++ seeding. Returns (assignment, objective).
fn lloyd_run(points: &[Vec<f64>], k: usize, rng: &mut SneRng) -> (Vec<usize>, f64) {
    let d = points.len();
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..d)].clone());
    while centers.len() < k {
        let dists: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..d)
        } else {
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = d - 1;
            for (i, &w) in dists.iter().enumerate() {
                if pick < w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            chosen
        };
        centers.push(points[next].clone());
    }

    let mut assign = vec![0usize; d];
    let mut prev_obj = f64::INFINITY;
    for _ in 0..300 {
        // assignment step (first-min tie-break)
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let dd = sq_dist(p, c);
                if dd < best_d {
                    best_d = dd;
                    best = ci;
                }
            }
            assign[i] = best;
        }
        // empty clusters: re-seed from the column farthest from its centroid
        for ci in 0..k {
            if !assign.contains(&ci) {
                let far = (0..d)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[assign[a]])
                            .partial_cmp(&sq_dist(&points[b], &centers[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                assign[far] = ci;
            }
        }
        centers = centroids_of(points, &assign, k);
        let obj = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| sq_dist(p, &centers[a]))
            .sum::<f64>();
        if (prev_obj - obj).abs() < 1e-12 {
            break;
        }
        debug_assert!(obj <= prev_obj + 1e-9, "Lloyd objective increased");
        prev_obj = obj;
    }
    (assign.clone(), kmeans_objective(points, &assign, k))
}

fn assignment_to_plan(
    assign: &[usize],
    k: usize,
    scheme: PartitionScheme,
    seed: Option<u64>,
) -> PartitionPlan {
    let mut subsets = vec![Vec::new(); k];
    for (idx, &a) in assign.iter().enumerate() {
        subsets[a].push(idx);
    }
    // drop empty subsets only if k exceeded distinct assignments (cannot
    // happen after the empty-cluster re-seed, kept as a guard)
    PartitionPlan {
        subsets,
        scheme,
        seed,
        dims: assign.len(),
    }
}

const KMEANS_RESTARTS: usize = 10;

fn kmeans_assign(features: &FeatureMatrix, n: usize, seed: u64) -> Result<Vec<usize>> {
    let d = features.cols();
    if n == 0 || n > d {
        return Err(Error::invalid(
            "kmeans_partition",
            format!("need 1 <= N <= D, got N={} D={}", n, d),
        ));
    }
    if features.rows() < 2 {
        return Err(Error::invalid("kmeans_partition", "need M >= 2 samples"));
    }
    let points = features.normalized_columns();
    let mut rng = crate::rng::substream(seed, "kmeans");
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (assign, obj) = lloyd_run(&points, n, &mut rng);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((assign, obj));
        }
    }
    Ok(best.expect("at least one restart").0)
}

/// K-means over L2-normalized columns, best of several seeded restarts.
pub fn kmeans_partition(features: &FeatureMatrix, n: usize, seed: u64) -> Result<PartitionPlan> {
    let assign = kmeans_assign(features, n, seed)?;
    Ok(assignment_to_plan(&assign, n, PartitionScheme::Kmeans, Some(seed)))
}

/// K-means followed by greedy size balancing: deficient clusters pull the
/// columns closest to their centroid out of oversized clusters until all
/// sizes hit their target (sizes differ by at most one).
pub fn balanced_kmeans_partition(
    features: &FeatureMatrix,
    n: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let mut assign = kmeans_assign(features, n, seed)?;
    let d = features.cols();
    let points = features.normalized_columns();
    let targets: Vec<usize> = (0..n).map(|i| d / n + usize::from(i < d % n)).collect();
    let mut sizes = vec![0usize; n];
    for &a in &assign {
        sizes[a] += 1;
    }
    loop {
        let centroids = centroids_of(&points, &assign, n);
        let Some(deficit) = (0..n).find(|&c| sizes[c] < targets[c]) else {
            break;
        };
        // donor candidates: columns currently in oversized clusters, closest
        // to the deficient cluster's centroid first
        let mut candidates: Vec<usize> = (0..d)
            .filter(|&j| sizes[assign[j]] > targets[assign[j]])
            .collect();
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|&a, &b| {
            sq_dist(&points[a], &centroids[deficit])
                .partial_cmp(&sq_dist(&points[b], &centroids[deficit]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mover = candidates[0];
        sizes[assign[mover]] -= 1;
        assign[mover] = deficit;
        sizes[deficit] += 1;
    }
    Ok(assignment_to_plan(
        &assign,
        n,
        PartitionScheme::BalancedKmeans,
        Some(seed),
    ))
}

fn cosine_distance_matrix(features: &FeatureMatrix) -> Vec<Vec<f64>> {
    let points = features.normalized_columns();
    let d = points.len();
    let mut dist = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in (i + 1)..d {
            let dot: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
            let v = 1.0 - dot;
            dist[i][j] = v;
            dist[j][i] = v;
        }
    }
    dist
}

/// Bottom-up merging of column clusters with complete linkage over cosine
/// distance, stopping at N clusters. Lance-Williams max update; ties merge
/// the lowest-indexed pair.
pub fn agglomerative_partition(features: &FeatureMatrix, n: usize) -> Result<PartitionPlan> {
    let d = features.cols();
    if n == 0 || n > d {
        return Err(Error::invalid(
            "agglomerative_partition",
            format!("need 1 <= N <= D, got N={} D={}", n, d),
        ));
    }
    let mut dist = cosine_distance_matrix(features);
    let mut clusters: Vec<Option<Vec<usize>>> = (0..d).map(|i| Some(vec![i])).collect();
    let mut active = d;
    while active > n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..d {
            if clusters[i].is_none() {
                continue;
            }
            for j in (i + 1)..d {
                if clusters[j].is_none() {
                    continue;
                }
                if best.map_or(true, |(_, _, bd)| dist[i][j] < bd) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");
        let moved = clusters[j].take().expect("active cluster");
        clusters[i].as_mut().expect("active cluster").extend(moved);
        clusters[i].as_mut().unwrap().sort_unstable();
        for k in 0..d {
            if k != i && clusters[k].is_some() {
                let v = dist[i][k].max(dist[j][k]);
                dist[i][k] = v;
                dist[k][i] = v;
            }
        }
        active -= 1;
    }
    let subsets: Vec<Vec<usize>> = clusters.into_iter().flatten().collect();
    Ok(PartitionPlan {
        subsets,
        scheme: PartitionScheme::Agglomerative,
        seed: None,
        dims: d,
    })
}
