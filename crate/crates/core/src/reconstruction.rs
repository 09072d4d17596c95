//! Global weight and kernel estimation, assembly of the 3D estimate, volume
//! rendering, residuals and shape-level comparison.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector, Matrix2xX, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{factor_gram, Ensemble3, GramMatrix};
use crate::imaging::{render_mixture2, PixelGrid, Profile};
use crate::mixture::{gaussian_density, RadialMixture2, RadialMixture3};
use crate::shape_recovery::MAX_EXHAUSTIVE_K;

/// Weights below this after the fit are clamped here.
pub const MIN_WEIGHT: f64 = 1e-6;

/// Which pixels enter the stacked weight regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowSelection {
    All,
    /// Pixels within this distance of any labeled mean of the profile.
    Within(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    pub sse: f64,
    pub sigma2: f64,
    pub rows: usize,
    /// Components whose estimate was negative and got clamped.
    pub clamped: Vec<usize>,
}

/// Normal equations of the stacked regression: `(AᵀA, Aᵀy, yᵀy, rows)`.
fn stacked_normal_equations(
    profiles: &[Profile],
    means: &[Matrix2xX<f64>],
    sigma2: f64,
    rows: RowSelection,
) -> Result<(DMatrix<f64>, DVector<f64>, f64, usize)> {
    if profiles.len() != means.len() {
        return Err(Error::DimensionMismatch { expected: profiles.len(), found: means.len() });
    }
    let Some(k) = means.first().map(|m| m.ncols()) else {
        return Err(Error::InvalidArgument("weight regression needs at least one profile".into()));
    };
    let mut ata = DMatrix::zeros(k, k);
    let mut aty = DVector::zeros(k);
    let mut yty = 0.0;
    let mut used = 0usize;
    let mut a = vec![0.0; k];
    for (p, m) in profiles.iter().zip(means) {
        if m.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, found: m.ncols() });
        }
        let grid = &p.grid;
        let y = p.vectorized();
        for (j, &yj) in y.iter().enumerate() {
            let u = grid.center_of(j);
            if let RowSelection::Within(r) = rows {
                let r2 = r * r;
                if !m.column_iter().any(|c| (u - c).norm_squared() <= r2) {
                    continue;
                }
            }
            for (c, col) in m.column_iter().enumerate() {
                a[c] = gaussian_density((u - col).norm_squared(), sigma2, 2);
            }
            for r in 0..k {
                aty[r] += a[r] * yj;
                for c in 0..k {
                    ata[(r, c)] += a[r] * a[c];
                }
            }
            yty += yj * yj;
            used += 1;
        }
    }
    Ok((ata, aty, yty, used))
}

/// OLS for the shared mixing weights over all profiles' stacked base-profile
/// regressions, columns centered at each profile's labeled means.
pub fn estimate_weights_global(profiles: &[Profile], means: &[Matrix2xX<f64>], sigma2: f64, rows: RowSelection) -> Result<WeightFit> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let (ata, aty, yty, used) = stacked_normal_equations(profiles, means, sigma2, rows)?;
    let k = aty.len();
    let eig = SymmetricEigen::new(ata.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let rank = eig.eigenvalues.iter().filter(|&&v| v > 1e-12 * top && v > 0.0).count();
    if rank < k || used < k {
        return Err(Error::RankDeficient { rank: rank.min(used), needed: k });
    }
    let q = ata.clone().cholesky().map(|c| c.solve(&aty)).ok_or(Error::RankDeficient { rank, needed: k })?;
    let mut clamped = Vec::new();
    let weights: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v < MIN_WEIGHT {
                clamped.push(i);
                MIN_WEIGHT
            } else {
                v
            }
        })
        .collect();
    if !clamped.is_empty() {
        log::warn!("weight estimates for components {clamped:?} were below {MIN_WEIGHT} and have been clamped");
    }
    let qv = DVector::from_column_slice(&weights);
    let sse = (yty - 2.0 * qv.dot(&aty) + (qv.transpose() * &ata * &qv)[(0, 0)]).max(0.0);
    Ok(WeightFit { weights, sse, sigma2, rows: used, clamped })
}

/// `count` logarithmically spaced values over `[lo_factor, hi_factor]·center`.
pub fn log_grid(center: f64, lo_factor: f64, hi_factor: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![center];
    }
    let (a, b) = ((center * lo_factor).ln(), (center * hi_factor).ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// 20 points spanning a quarter to four times the deconvolution kernel σ².
pub fn default_sigma2_grid(kernel_sigma2: f64) -> Vec<f64> {
    log_grid(kernel_sigma2, 0.25, 4.0, 20)
}

/// The grid point with the smallest pooled residual SSE (earliest on ties).
pub fn sigma2_grid_search(profiles: &[Profile], means: &[Matrix2xX<f64>], grid: &[f64], rows: RowSelection) -> Result<WeightFit> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sigma2 grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("sigma2 grid values must be positive, got {bad}")));
    }
    let fits: Vec<WeightFit> = grid
        .par_iter()
        .map(|&s2| estimate_weights_global(profiles, means, s2, rows))
        .collect::<Result<Vec<_>>>()?;
    let best = fits.into_iter().reduce(|a, b| if b.sse < a.sse { b } else { a }).expect("nonempty");
    log::info!("sigma2 grid search: best {:.5} (sse {:.3e})", best.sigma2, best.sse);
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub mixture: RadialMixture3,
    pub gram_estimate: GramMatrix,
    pub sigma2_hat: f64,
    pub fit_sse: f64,
    pub provenance: String,
}

/// Means from [`factor_gram`], combined with the weights and a `√sigma2` kernel.
pub fn assemble(gram: &GramMatrix, weights: &[f64], sigma2: f64) -> Result<ReconstructionResult> {
    if weights.len() != gram.dim() {
        return Err(Error::DimensionMismatch { expected: gram.dim(), found: weights.len() });
    }
    let means = factor_gram(gram, 3)?;
    let mixture = RadialMixture3::new(means, weights.to_vec(), sigma2.sqrt())?;
    Ok(ReconstructionResult { mixture, gram_estimate: gram.clone(), sigma2_hat: sigma2, fit_sse: f64::NAN, provenance: String::new() })
}

/// Density values at voxel centers; index `(x, y, z)` is `x·V² + y·V + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub v: usize,
    pub extent: f64,
    pub values: Vec<f64>,
}

impl VolumeGrid {
    pub fn voxel_side(&self) -> f64 {
        2.0 * self.extent / self.v as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        -self.extent + (i as f64 + 0.5) * self.voxel_side()
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(x * self.v + y) * self.v + z]
    }

    /// Voxel sum times voxel volume.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.voxel_side().powi(3)
    }

    /// The `V × V` slice at first index `x`, rows `y`, columns `z`.
    pub fn slice(&self, x: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.v, self.v, |y, z| self.at(x, y, z))
    }
}

pub fn render_volume(m: &RadialMixture3, v: usize, extent: f64) -> Result<VolumeGrid> {
    if v < 2 {
        return Err(Error::InvalidArgument(format!("volume needs at least 2 voxels per side, got {v}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidArgument(format!("volume extent must be positive, got {extent}")));
    }
    let mut grid = VolumeGrid { v, extent, values: vec![0.0; v * v * v] };
    let h = grid.voxel_side();
    let c = |i: usize| -extent + (i as f64 + 0.5) * h;
    grid.values.par_chunks_mut(v * v).enumerate().for_each(|(x, slab)| {
        for y in 0..v {
            for z in 0..v {
                slab[y * v + z] = m.eval3(&Vector3::new(c(x), c(y), c(z)));
            }
        }
    });
    Ok(grid)
}

/// Noise-free profile of a 2D mixture with the given locations and weights.
pub fn fitted_profile(grid: &PixelGrid, means: &Matrix2xX<f64>, weights: &[f64], sigma2: f64, id: usize) -> Result<Profile> {
    let m2 = RadialMixture2::new(means.clone(), weights.to_vec(), sigma2.sqrt())?;
    Profile::new(*grid, render_mixture2(&m2, grid), id)
}

/// Entrywise data minus fit.
pub fn residual_map(profile: &Profile, fitted: &Profile) -> Result<DMatrix<f64>> {
    if profile.grid != fitted.grid {
        return Err(Error::GridMismatch);
    }
    Ok(&profile.pixels - &fitted.pixels)
}

fn centered_gram(m: &RadialMixture3) -> GramMatrix {
    m.means().centered().gram()
}

/// Permutation `perm` minimizing `‖Gb[perm, perm] − Ga‖_F` with that distance.
fn aligned_gram_distance(a: &GramMatrix, b: &GramMatrix) -> Result<(Vec<usize>, f64)> {
    let k = a.dim();
    if b.dim() != k {
        return Err(Error::ComponentMismatch(k, b.dim()));
    }
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::TooManyComponents(k));
    }
    let (am, bm) = (a.matrix(), b.matrix());
    let mut best = ((0..k).collect::<Vec<_>>(), f64::INFINITY);
    for perm in (0..k).permutations(k) {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                let d = bm[(perm[i], perm[j])] - am[(i, j)];
                s += d * d;
            }
        }
        if s < best.1 {
            best = (perm, s);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// Labeling of `estimate` that best matches `truth`, and the Frobenius gap.
pub fn align_gram(estimate: &GramMatrix, truth: &GramMatrix) -> Result<(Vec<usize>, f64)> {
    aligned_gram_distance(truth, estimate)
}

/// Labeling minimizing Gram gap plus L1 weight gap. Mirror-image components
/// have identical Gram rows, so the weights are needed to tell them apart.
/// Returns `(perm, gram gap, weight gap)`.
pub fn align_mixture(estimate: &GramMatrix, estimate_weights: &[f64], truth: &GramMatrix, truth_weights: &[f64]) -> Result<(Vec<usize>, f64, f64)> {
    let k = truth.dim();
    if estimate.dim() != k || estimate_weights.len() != k || truth_weights.len() != k {
        return Err(Error::ComponentMismatch(k, estimate.dim()));
    }
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::TooManyComponents(k));
    }
    let (em, tm) = (estimate.matrix(), truth.matrix());
    let mut best = ((0..k).collect::<Vec<_>>(), f64::INFINITY, f64::INFINITY);
    for perm in (0..k).permutations(k) {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                let d = em[(perm[i], perm[j])] - tm[(i, j)];
                s += d * d;
            }
        }
        let w: f64 = (0..k).map(|i| (estimate_weights[perm[i]] - truth_weights[i]).abs()).sum();
        if s.sqrt() + w < best.1 + best.2 {
            best = (perm, s.sqrt(), w);
        }
    }
    Ok(best)
}

/// Distance between shapes modulo O(3) and relabeling: the smallest centered
/// Gram gap over component permutations plus the L1 gap of sorted weights.
pub fn shape_distance(a: &RadialMixture3, b: &RadialMixture3) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::ComponentMismatch(a.k(), b.k()));
    }
    let (_, g) = aligned_gram_distance(&centered_gram(a), &centered_gram(b))?;
    let sorted = |m: &RadialMixture3| {
        let mut w = m.weights().to_vec();
        w.sort_by(f64::total_cmp);
        w
    };
    let w: f64 = sorted(a).iter().zip(sorted(b)).map(|(x, y)| (x - y).abs()).sum();
    Ok(g + w)
}

/// Mixture with means given as 3D points; convenience for tests and fixtures.
pub fn mixture_from_points(points: &[Vector3<f64>], weights: Vec<f64>, sigma: f64) -> Result<RadialMixture3> {
    RadialMixture3::new(Ensemble3::from_points(points), weights, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation3;
    use crate::mixture::pyramid_fixture;
    use approx::assert_relative_eq;

    fn two_component_profile(sigma2: f64) -> (Profile, Matrix2xX<f64>) {
        let grid = PixelGrid::new(24, 2.0).unwrap();
        let means = Matrix2xX::from_column_slice(&[-0.75, 0.0, 0.75, 0.25]);
        (fitted_profile(&grid, &means, &[0.3, 0.7], sigma2, 0).unwrap(), means)
    }

    #[test]
    fn exact_weights_noise_free() {
        let (p, m) = two_component_profile(0.1);
        let fit = estimate_weights_global(std::slice::from_ref(&p), std::slice::from_ref(&m), 0.1, RowSelection::All).unwrap();
        assert_relative_eq!(fit.weights[0], 0.3, epsilon = 1e-9);
        assert_relative_eq!(fit.weights[1], 0.7, epsilon = 1e-9);
        assert!(fit.sse < 1e-10);
        let twice = estimate_weights_global(&[p.clone(), p], &[m.clone(), m], 0.1, RowSelection::Within(0.9)).unwrap();
        assert_relative_eq!(twice.weights[1], 0.7, epsilon = 1e-9);
    }

    #[test]
    fn coincident_means_are_rank_deficient() {
        let (p, _) = two_component_profile(0.1);
        let same = Matrix2xX::from_column_slice(&[0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(estimate_weights_global(&[p], &[same], 0.1, RowSelection::All), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn grid_search_finds_generator() {
        let (p, m) = two_component_profile(0.1);
        let grid = log_grid(0.1, 0.25, 4.0, 9);
        assert!(grid.iter().any(|&g| (g - 0.1).abs() < 1e-12));
        let fit = sigma2_grid_search(std::slice::from_ref(&p), std::slice::from_ref(&m), &grid, RowSelection::All).unwrap();
        assert_relative_eq!(fit.sigma2, 0.1, epsilon = 1e-12);
        let single = sigma2_grid_search(&[p], &[m], &[0.3], RowSelection::All).unwrap();
        assert_eq!(single.sigma2, 0.3);
        assert_eq!(default_sigma2_grid(1.0).len(), 20);
    }

    #[test]
    fn single_component_assembles_at_origin() {
        let g = GramMatrix::zeros(1);
        let r = assemble(&g, &[1.0], 0.25).unwrap();
        assert_eq!(r.mixture.means().point(0), Vector3::zeros());
        assert_relative_eq!(r.mixture.kernel_sigma(), 0.5);
    }

    #[test]
    fn assemble_is_o3_equivalent() {
        let m = pyramid_fixture();
        let r = assemble(&centered_gram(&m), m.weights(), 0.46 * 0.46).unwrap();
        assert!(shape_distance(&m, &r.mixture).unwrap() < 1e-8);
    }

    #[test]
    fn shape_distance_invariances() {
        let m = pyramid_fixture();
        let u = Rotation3::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5).normalize(), 1.1);
        assert!(shape_distance(&m, &m.rotate(&u)).unwrap() < 1e-10);
        let pts: Vec<Vector3<f64>> = [3, 1, 0, 2].iter().map(|&i| m.means().point(i)).collect();
        let w: Vec<f64> = [3, 1, 0, 2].iter().map(|&i| m.weights()[i]).collect();
        let p = mixture_from_points(&pts, w, 0.46).unwrap();
        assert!(shape_distance(&m, &p).unwrap() < 1e-12);
        let single = mixture_from_points(&[Vector3::zeros()], vec![1.0], 0.46).unwrap();
        assert!(matches!(shape_distance(&m, &single), Err(Error::ComponentMismatch(4, 1))));
    }

    #[test]
    fn weights_break_mirror_ties() {
        let m = pyramid_fixture();
        let g = centered_gram(&m);
        let swap = [0, 2, 1, 3];
        let gs = g.permuted(&swap);
        let ws: Vec<f64> = swap.iter().map(|&i| m.weights()[i]).collect();
        let (perm, gap, wgap) = align_mixture(&gs, &ws, &g, m.weights()).unwrap();
        assert_eq!(perm, swap.to_vec());
        assert!(gap < 1e-12 && wgap < 1e-12);
    }

    #[test]
    fn volume_quadrature_and_symmetry() {
        let m = mixture_from_points(&[Vector3::new(0.5, 0.0, 0.0), Vector3::new(-0.5, 0.0, 0.0)], vec![0.5, 0.5], 0.3).unwrap();
        let vol = render_volume(&m, 40, 2.0).unwrap();
        assert_relative_eq!(vol.integral(), 1.0, epsilon = 1e-2);
        for y in [3, 17] {
            assert_relative_eq!(vol.at(2, y, 5), vol.at(37, y, 5), epsilon = 1e-14);
        }
        let far = mixture_from_points(&[Vector3::new(30.0, 0.0, 0.0)], vec![1.0], 0.3).unwrap();
        assert!(render_volume(&far, 4, 1.0).unwrap().values.iter().all(|&v| v < 1e-12));
        assert!(render_volume(&m, 1, 1.0).is_err());
    }

    #[test]
    fn residual_of_self_is_zero() {
        let (p, _) = two_component_profile(0.1);
        assert!(residual_map(&p, &p).unwrap().iter().all(|&v| v == 0.0));
        let other = Profile::zeros(PixelGrid::new(8, 2.0).unwrap(), 0);
        assert!(matches!(residual_map(&p, &other), Err(Error::GridMismatch)));
    }
}
