//! From a sparse deconvolution to a labeled per-profile estimate: group the
//! selected pixels into 8-connected clusters, take β-weighted centroids as the
//! projected component locations and rescale cluster masses to the estimated
//! total mass.

use std::collections::{HashMap, VecDeque};

use nalgebra::{Matrix2xX, Vector2};

use crate::error::{Error, Result};
use crate::imaging::{CandidateMask, DesignMatrix, PixelGrid, Profile};
use crate::sparse_solver::{calibrate_constraint, lars_lasso_path_lenient, LarsOptions, LassoPath, SparseSolution};

/// Clusters spanning more pixels than this in either direction are flagged
/// as probable merges of several components.
pub const MAX_CLUSTER_SPAN: usize = 5;

/// Disjoint groups of design columns (positions in the candidate mask).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    clusters: Vec<Vec<usize>>,
}

impl ClusterSet {
    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// True if some cluster's bounding box exceeds [`MAX_CLUSTER_SPAN`] pixels.
    pub fn has_oversized(&self, mask: &CandidateMask, grid: &PixelGrid) -> bool {
        self.clusters.iter().any(|c| {
            let coords: Vec<(usize, usize)> = c.iter().map(|&col| grid.coords(mask.indices()[col])).collect();
            let span = |f: fn(&(usize, usize)) -> usize| {
                let lo = coords.iter().map(f).min().unwrap_or(0);
                let hi = coords.iter().map(f).max().unwrap_or(0);
                hi - lo + 1
            };
            span(|c| c.0) > MAX_CLUSTER_SPAN || span(|c| c.1) > MAX_CLUSTER_SPAN
        })
    }
}

/// 8-connected components of the nonzero support on the pixel lattice.
/// Clusters are ordered by their smallest column-major pixel index.
pub fn cluster_nonzeros(solution: &SparseSolution, mask: &CandidateMask, grid: &PixelGrid) -> Result<ClusterSet> {
    if solution.beta.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: mask.len(), found: solution.beta.len() });
    }
    let support = solution.support();
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let by_pixel: HashMap<(usize, usize), usize> =
        support.iter().map(|&col| (grid.coords(mask.indices()[col]), col)).collect();
    let mut seen: HashMap<usize, bool> = HashMap::with_capacity(support.len());
    let mut clusters = Vec::new();
    let mut order = support.clone();
    order.sort_by_key(|&col| mask.indices()[col]);
    for &start in &order {
        if seen.contains_key(&start) {
            continue;
        }
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start, true);
        while let Some(col) = queue.pop_front() {
            members.push(col);
            let (i, j) = grid.coords(mask.indices()[col]);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 {
                        continue;
                    }
                    if let Some(&nb) = by_pixel.get(&(ni as usize, nj as usize)) {
                        if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(nb) {
                            e.insert(true);
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
        members.sort_by_key(|&col| mask.indices()[col]);
        clusters.push(members);
    }
    Ok(ClusterSet { clusters })
}

/// β-weighted centroid of the pixel centers in each cluster.
pub fn cluster_means(cs: &ClusterSet, solution: &SparseSolution, mask: &CandidateMask, grid: &PixelGrid) -> Result<Matrix2xX<f64>> {
    let mut out = Matrix2xX::zeros(cs.len());
    for (k, cluster) in cs.clusters.iter().enumerate() {
        let total: f64 = cluster.iter().map(|&c| solution.beta[c]).sum();
        if !(total > 0.0) {
            return Err(Error::ZeroWeightCluster { cluster: k });
        }
        let mut acc = Vector2::zeros();
        for &c in cluster {
            acc += grid.center_of(mask.indices()[c]) * solution.beta[c];
        }
        out.set_column(k, &(acc / total));
    }
    Ok(out)
}

/// Cluster masses rescaled so they sum to `mass`.
pub fn cluster_weights(cs: &ClusterSet, solution: &SparseSolution, mass: f64) -> Result<Vec<f64>> {
    if !(mass > 0.0) {
        return Err(Error::InvalidArgument(format!("mass must be positive, got {mass}")));
    }
    let sums: Vec<f64> = cs.clusters.iter().map(|c| c.iter().map(|&i| solution.beta[i]).sum()).collect();
    let total: f64 = sums.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeightCluster { cluster: 0 });
    }
    Ok(sums.iter().map(|s| s / total * mass).collect())
}

/// Labeled projected components recovered from one profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEstimate {
    pub profile_id: usize,
    /// Column k is the estimated projected location of component k.
    pub means2d: Matrix2xX<f64>,
    pub weights: Vec<f64>,
    /// `labels[k]` is the cluster index (in [`ClusterSet`] order) that became component k.
    pub labels: Vec<usize>,
    /// Estimated total mass the weights were rescaled to.
    pub mass: f64,
    /// Some cluster looked like several merged components.
    pub oversized: bool,
}

impl ProfileEstimate {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Projected locations with their centroid moved to the origin.
    pub fn centered_means(&self) -> Matrix2xX<f64> {
        crate::geometry::center_columns(&self.means2d)
    }

    /// Components reordered so that component i of the result is component perm[i].
    pub fn permuted(&self, perm: &[usize]) -> ProfileEstimate {
        ProfileEstimate {
            profile_id: self.profile_id,
            means2d: Matrix2xX::from_fn(perm.len(), |r, c| self.means2d[(r, perm[c])]),
            weights: perm.iter().map(|&i| self.weights[i]).collect(),
            labels: perm.iter().map(|&i| self.labels[i]).collect(),
            mass: self.mass,
            oversized: self.oversized,
        }
    }
}

/// Relabels components by strictly descending weight; ties go to the
/// lexicographically smaller location.
pub fn order_components(pe: &ProfileEstimate) -> ProfileEstimate {
    let mut perm: Vec<usize> = (0..pe.k()).collect();
    perm.sort_by(|&a, &b| {
        pe.weights[b]
            .total_cmp(&pe.weights[a])
            .then(pe.means2d[(0, a)].total_cmp(&pe.means2d[(0, b)]))
            .then(pe.means2d[(1, a)].total_cmp(&pe.means2d[(1, b)]))
    });
    pe.permuted(&perm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Nothing survived the sparse fit.
    EmptySupport,
    ComponentCount,
    MergedCluster,
    LeftOutlier,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectReason::EmptySupport => "empty-support",
            RejectReason::ComponentCount => "component-count",
            RejectReason::MergedCluster => "merged-cluster",
            RejectReason::LeftOutlier => "left-outlier",
        })
    }
}

/// Drops estimates with the wrong component count or a merged cluster, then
/// those whose smallest weight is below `Q1 − 1.5·IQR` of the pooled
/// smallest weights.
pub fn reject_outlier_profiles(
    estimates: Vec<ProfileEstimate>,
    expected_k: usize,
) -> (Vec<ProfileEstimate>, Vec<(ProfileEstimate, RejectReason)>) {
    let mut rejected = Vec::new();
    let mut candidates = Vec::new();
    for e in estimates {
        if e.k() != expected_k {
            rejected.push((e, RejectReason::ComponentCount));
        } else if e.oversized {
            rejected.push((e, RejectReason::MergedCluster));
        } else {
            candidates.push(e);
        }
    }
    if candidates.is_empty() {
        return (candidates, rejected);
    }
    let min_weight = |e: &ProfileEstimate| e.weights.iter().copied().fold(f64::INFINITY, f64::min);
    let mut pool: Vec<f64> = candidates.iter().map(min_weight).collect();
    pool.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&pool, 0.25);
    let q3 = quantile_sorted(&pool, 0.75);
    let fence = q1 - 1.5 * (q3 - q1);
    let mut kept = Vec::new();
    for e in candidates {
        if min_weight(&e) < fence {
            rejected.push((e, RejectReason::LeftOutlier));
        } else {
            kept.push(e);
        }
    }
    (kept, rejected)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconvolutionSettings {
    /// Working constraint as a fraction of the estimated mass.
    pub t_factor: f64,
    pub lars: LarsOptions,
}

impl Default for DeconvolutionSettings {
    fn default() -> Self {
        DeconvolutionSettings { t_factor: 0.95, lars: LarsOptions { max_steps: 2000, ..LarsOptions::default() } }
    }
}

/// Everything produced while deconvolving one profile.
#[derive(Debug, Clone)]
pub struct Deconvolution {
    pub path: LassoPath,
    pub solution: SparseSolution,
    pub clusters: ClusterSet,
    pub estimate: ProfileEstimate,
}

/// Number of 8-connected clusters in a solution (0 for an empty support).
pub fn cluster_count(solution: &SparseSolution, mask: &CandidateMask, grid: &PixelGrid) -> usize {
    cluster_nonzeros(solution, mask, grid).map_or(0, |c| c.len())
}

/// Runs the path at `t_factor·mass`, raises the constraint towards `mass`
/// while the cluster count is stable, and turns the result into an ordered
/// estimate.
pub fn deconvolve_profile(design: &DesignMatrix, profile: &Profile, mass: f64, settings: &DeconvolutionSettings) -> Result<Deconvolution> {
    if profile.grid != *design.grid() {
        return Err(Error::GridMismatch);
    }
    if !(mass > 0.0) {
        return Err(Error::EmptySupport);
    }
    let lars = LarsOptions { t_limit: Some(mass), ..settings.lars };
    let path = lars_lasso_path_lenient(design, profile.vectorized(), &lars)?;
    if let crate::sparse_solver::Termination::Breakdown { step, pivot } = path.termination() {
        log::debug!("profile {}: active set singular at step {step} (pivot {pivot:e}); path truncated at t={}", profile.id, path.max_t());
    }
    let (mask, grid) = (design.mask(), design.grid());
    let t_start = settings.t_factor * mass;
    let solution = calibrate_constraint(&path, t_start.min(mass), mass, |s| cluster_count(s, mask, grid))?;
    let clusters = cluster_nonzeros(&solution, mask, grid)?;
    let means2d = cluster_means(&clusters, &solution, mask, grid)?;
    let weights = cluster_weights(&clusters, &solution, mass)?;
    let raw = ProfileEstimate {
        profile_id: profile.id,
        means2d,
        labels: (0..weights.len()).collect(),
        weights,
        mass,
        oversized: clusters.has_oversized(mask, grid),
    };
    Ok(Deconvolution { path, solution, estimate: order_components(&raw), clusters })
}
