//! Weighted k-means with k-means++ seeding.
//!
//! Distances, sums and objectives are accumulated in `f64`. Nearest-centroid
//! ties resolve to the lowest centroid index, and Lloyd iterations stop as
//! soon as an iteration leaves every assignment unchanged.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Points above this count are assigned in parallel.
const PAR_ASSIGN_MIN_POINTS: usize = 2048;

/// A weighted set of `dim`-dimensional points stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    points: Vec<f32>,
    weights: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, points: Vec<f32>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("point dimension must be positive".into()));
        }
        if !points.len().is_multiple_of(dim) || points.len() / dim != weights.len() {
            return Err(Error::Shape(format!(
                "{} coordinates do not form {} points of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("point coordinates must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Shape(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Degenerate("no point has positive weight".into()));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    pub fn unweighted(dim: usize, points: Vec<f32>) -> Result<Self> {
        let n = points.len().checked_div(dim).unwrap_or(0);
        Self::new(dim, points, vec![1.0; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Indices of the first occurrence of each distinct positive-weight
    /// point, in input order. `-0.0` and `0.0` count as the same coordinate.
    pub fn distinct_positive(&self) -> Vec<usize> {
        let key = |i: usize| -> Vec<u32> {
            self.point(i)
                .iter()
                .map(|&v| if v == 0.0 { 0 } else { v.to_bits() })
                .collect()
        };
        let mut seen = std::collections::HashSet::new();
        (0..self.len())
            .filter(|&i| self.weights[i] > 0.0 && seen.insert(key(i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub dim: usize,
    /// `k * dim` centroid coordinates, centroid-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
    /// Weighted sum of squared distances to the assigned centroids.
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after initial assignment, then after every step.
    pub objective_history: Vec<f64>,
    pub converged: bool,
    /// Number of empty-cluster repairs performed.
    pub reseeds: usize,
    /// Fewer distinct positive-weight points than `k`: the trailing
    /// centroids duplicate the last distinct point.
    pub shortfall: bool,
}

impl ClusteringResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

#[inline]
fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

/// Nearest centroid with lowest-index tie-breaking. Exits a candidate early
/// once its partial distance reaches the running best.
#[inline]
fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = f64::INFINITY;
    let mut best_j = 0u32;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let mut d = 0.0;
        for (&a, &b) in x.iter().zip(c) {
            let diff = a as f64 - b;
            d += diff * diff;
            if d >= best {
                break;
            }
        }
        if d < best {
            best = d;
            best_j = j as u32;
        }
    }
    (best_j, best)
}

fn assign_all(points: &PointSet, centroids: &[f64], out: &mut [(u32, f64)]) {
    let dim = points.dim;
    if points.len() >= PAR_ASSIGN_MIN_POINTS {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(i, slot)| *slot = nearest(points.point(i), centroids, dim));
    } else {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = nearest(points.point(i), centroids, dim);
        }
    }
}

fn weighted_objective(points: &PointSet, nearest: &[(u32, f64)]) -> f64 {
    points
        .weights
        .iter()
        .zip(nearest)
        .map(|(w, (_, d))| w * d)
        .sum()
}

/// Index drawn with probability proportional to `mass`; the first index
/// whose running total exceeds the target wins.
fn sample_index(mass: &[f64], stream: &mut Stream) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let target = stream.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            acc += m;
            last_positive = Some(i);
            if acc > target {
                return Some(i);
            }
        }
    }
    // rounding left the target past the final partial sum
    last_positive
}

/// k-means++ seeding: the first centroid is drawn proportional to weight,
/// each later one proportional to weight times squared distance to the
/// nearest centroid chosen so far. Returns `k * dim` coordinates.
pub fn kmeans_pp_init(points: &PointSet, k: usize, seed: u64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let distinct = points.distinct_positive().len();
    if k > distinct {
        return Err(Error::Degenerate(format!(
            "k = {k} exceeds the {distinct} distinct positive-weight points"
        )));
    }
    let dim = points.dim;
    let mut stream = Stream::new(seed);
    let mut centroids = Vec::with_capacity(k * dim);

    let first = sample_index(&points.weights, &mut stream).expect("positive total weight");
    centroids.extend(points.point(first).iter().map(|&v| v as f64));
    let mut dist: Vec<f64> = (0..points.len())
        .map(|i| sq_dist(points.point(i), &centroids[..dim]))
        .collect();

    let mut mass = vec![0.0; points.len()];
    for _ in 1..k {
        for (m, (&w, &d)) in mass.iter_mut().zip(points.weights.iter().zip(&dist)) {
            *m = w * d;
        }
        let next = sample_index(&mass, &mut stream).ok_or_else(|| {
            Error::Degenerate(
                "every positive-weight point already coincides with a centroid".into(),
            )
        })?;
        let start = centroids.len();
        centroids.extend(points.point(next).iter().map(|&v| v as f64));
        let c = &centroids[start..];
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = sq_dist(points.point(i), c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(centroids)
}

/// Sets each centroid to the weighted mean of its members. Clusters with no
/// weight are reseeded (when `repair`) to the not-yet-used positive-weight
/// point with the largest weighted distance to its current centroid.
/// Returns the number of reseeds.
fn update_centroids(
    points: &PointSet,
    current: &[(u32, f64)],
    centroids: &mut [f64],
    repair: bool,
) -> usize {
    let dim = points.dim;
    let k = centroids.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k];
    for (i, &(j, _)) in current.iter().enumerate() {
        let w = points.weights[i];
        if w == 0.0 {
            continue;
        }
        let j = j as usize;
        mass[j] += w;
        for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(points.point(i)) {
            *s += w * x as f64;
        }
    }
    let mut used = vec![false; points.len()];
    let mut reseeds = 0;
    for j in 0..k {
        let c = &mut centroids[j * dim..(j + 1) * dim];
        if mass[j] > 0.0 {
            for (cv, s) in c.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *cv = s / mass[j];
            }
        } else if repair {
            let mut best: Option<(usize, f64)> = None;
            for (i, &(_, d)) in current.iter().enumerate() {
                let score = points.weights[i] * d;
                if points.weights[i] > 0.0 && !used[i] && score > best.map_or(0.0, |b| b.1) {
                    best = Some((i, score));
                }
            }
            if let Some((i, _)) = best {
                used[i] = true;
                for (cv, &x) in c.iter_mut().zip(points.point(i)) {
                    *cv = x as f64;
                }
                reseeds += 1;
            }
        }
    }
    reseeds
}

/// Lloyd's algorithm on weighted points from a k-means++ start.
///
/// Each step recomputes weighted means, repairs empty clusters, then
/// reassigns. If `max_iters` runs out before convergence a final mean
/// update keeps centroids consistent with the returned assignments.
pub fn weighted_kmeans(
    points: &PointSet,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusteringResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if max_iters == 0 {
        return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
    }
    let dim = points.dim;
    let distinct = points.distinct_positive();
    let mut current = vec![(0u32, 0.0f64); points.len()];

    if k > distinct.len() {
        let mut centroids = Vec::with_capacity(k * dim);
        for &i in &distinct {
            centroids.extend(points.point(i).iter().map(|&v| v as f64));
        }
        let last = *distinct.last().expect("at least one positive point");
        for _ in distinct.len()..k {
            centroids.extend(points.point(last).iter().map(|&v| v as f64));
        }
        assign_all(points, &centroids, &mut current);
        let objective = weighted_objective(points, &current);
        return Ok(ClusteringResult {
            dim,
            centroids,
            assignments: current.iter().map(|a| a.0).collect(),
            objective,
            iterations_run: 0,
            objective_history: vec![objective],
            converged: true,
            reseeds: 0,
            shortfall: true,
        });
    }

    let mut centroids = kmeans_pp_init(points, k, seed)?;
    assign_all(points, &centroids, &mut current);
    let mut history = vec![weighted_objective(points, &current)];
    let mut next = current.clone();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations_run = 0;

    for it in 1..=max_iters {
        reseeds += update_centroids(points, &current, &mut centroids, true);
        assign_all(points, &centroids, &mut next);
        iterations_run = it;
        let changed = next.iter().zip(&current).any(|(a, b)| a.0 != b.0);
        std::mem::swap(&mut current, &mut next);
        history.push(weighted_objective(points, &current));
        if !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        update_centroids(points, &current, &mut centroids, false);
        let dim = points.dim;
        for (i, slot) in current.iter_mut().enumerate() {
            let j = slot.0 as usize;
            slot.1 = sq_dist(points.point(i), &centroids[j * dim..(j + 1) * dim]);
        }
        history.push(weighted_objective(points, &current));
    }

    Ok(ClusteringResult {
        dim,
        centroids,
        assignments: current.iter().map(|a| a.0).collect(),
        objective: *history.last().expect("non-empty history"),
        iterations_run,
        objective_history: history,
        converged,
        reseeds,
        shortfall: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(values: &[f32], weights: &[f64]) -> PointSet {
        PointSet::new(1, values.to_vec(), weights.to_vec()).unwrap()
    }

    #[test]
    fn single_centroid_is_an_input_point() {
        let p = one_d(&[0.0, 10.0], &[1.0, 1.0]);
        for seed in 0..50 {
            let c = kmeans_pp_init(&p, 1, seed).unwrap();
            assert!(c == [0.0] || c == [10.0], "{c:?}");
        }
    }

    #[test]
    fn d2_weighting_forces_far_point() {
        let p = one_d(&[0.0, 0.0, 100.0], &[1.0, 1.0, 1.0]);
        for seed in 0..50 {
            let c = kmeans_pp_init(&p, 2, seed).unwrap();
            if c[0] == 0.0 {
                assert_eq!(c[1], 100.0);
            } else {
                assert_eq!(c, [100.0, 0.0]);
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let pts: Vec<f32> = (0..200).map(|i| ((i * 37) % 101) as f32 * 0.3).collect();
        let p = PointSet::unweighted(2, pts).unwrap();
        assert_eq!(
            kmeans_pp_init(&p, 7, 5).unwrap(),
            kmeans_pp_init(&p, 7, 5).unwrap()
        );
    }

    #[test]
    fn init_rejects_too_few_distinct_points() {
        let p = one_d(&[1.0, 1.0, 2.0, 5.0], &[1.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            kmeans_pp_init(&p, 3, 0),
            Err(Error::Degenerate(_))
        ));
        assert!(kmeans_pp_init(&p, 2, 0).is_ok());
    }

    #[test]
    fn zero_weight_points_are_never_sampled() {
        let p = one_d(&[0.0, 50.0, 1.0], &[1.0, 0.0, 1.0]);
        for seed in 0..100 {
            let c = kmeans_pp_init(&p, 2, seed).unwrap();
            assert!(!c.contains(&50.0));
        }
    }

    #[test]
    fn two_clusters_on_a_line() {
        let p = one_d(&[0.0, 1.0, 10.0, 11.0], &[1.0; 4]);
        for seed in 0..20 {
            let r = weighted_kmeans(&p, 2, 10, seed).unwrap();
            let mut c = r.centroids.clone();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, [0.5, 10.5]);
            assert_eq!(r.objective, 1.0);
            assert!(r.converged);
        }
    }

    #[test]
    fn exact_fit_when_k_equals_points() {
        let p = one_d(&[3.0, -1.0, 7.5, 2.0], &[1.0, 2.0, 0.5, 1.0]);
        let r = weighted_kmeans(&p, 4, 100, 9).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut c = r.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, [-1.0, 2.0, 3.0, 7.5]);
        assert!(!r.shortfall);
    }

    #[test]
    fn weighted_mean_single_cluster() {
        let p = one_d(&[0.0, 4.0], &[3.0, 1.0]);
        let r = weighted_kmeans(&p, 1, 100, 0).unwrap();
        assert_eq!(r.centroids, [1.0]);
        assert_eq!(r.objective, 3.0 * 1.0 + 1.0 * 9.0);
    }

    #[test]
    fn shortfall_duplicates_last_distinct_point() {
        let p = one_d(&[2.0, 2.0, -3.0, 2.0], &[1.0; 4]);
        let r = weighted_kmeans(&p, 4, 100, 0).unwrap();
        assert!(r.shortfall);
        assert_eq!(r.centroids, [2.0, -3.0, -3.0, -3.0]);
        assert_eq!(r.assignments, [0, 0, 1, 0]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn all_equal_points_give_copies() {
        let p = one_d(&[5.0; 6], &[1.0; 6]);
        let r = weighted_kmeans(&p, 4, 100, 0).unwrap();
        assert_eq!(r.centroids, [5.0; 4]);
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // centroid 1 starts far from every point and captures nothing
        let p = one_d(&[0.0, 1.0, 2.0, 9.0], &[1.0; 4]);
        let mut centroids = vec![1.0, 100.0];
        let mut current = vec![(0u32, 0.0); 4];
        assign_all(&p, &centroids, &mut current);
        let n = update_centroids(&p, &current, &mut centroids, true);
        assert_eq!(n, 1);
        assert_eq!(centroids, [3.0, 9.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let (j, d) = nearest(&[0.0], &[1.0, -1.0, 1.0], 1);
        assert_eq!((j, d), (0, 1.0));
    }

    #[test]
    fn pointset_validation() {
        assert!(PointSet::new(2, vec![0.0; 3], vec![1.0]).is_err());
        assert!(PointSet::new(1, vec![0.0], vec![-1.0]).is_err());
        assert!(matches!(
            PointSet::new(1, vec![0.0, 1.0], vec![0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(PointSet::new(1, vec![f32::INFINITY], vec![1.0]).is_err());
    }
}
