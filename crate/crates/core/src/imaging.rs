//! Pixel grids, profile rendering, candidate masks and the convolution design
//! matrix of Gaussian base profiles.

use std::sync::Arc;

use nalgebra::{DMatrix, Vector2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Rotation3;
use crate::mixture::{gaussian_density, RadialMixture2, RadialMixture3};
use crate::rng::rng_from_seed;

/// Minimum fraction of a base profile's mass that must fall inside the field
/// of view before a warning is emitted.
pub const MIN_COLUMN_MASS: f64 = 0.99;

/// T×T lattice over `[−L, L]²`. Pixel `(i, j)` (0-based, i = row) has center
/// `(−L + (i + ½)h, −L + (j + ½)h)` with `h = 2L/T`; linear indices are
/// column-major, `p = i + j·T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGrid {
    t: usize,
    extent: f64,
}

impl PixelGrid {
    pub fn new(t: usize, extent: f64) -> Result<Self> {
        if t < 2 {
            return Err(Error::InvalidArgument(format!("grid needs T >= 2, got {t}")));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid extent must be positive, got {extent}")));
        }
        Ok(PixelGrid { t, extent })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn pixel_side(&self) -> f64 {
        2.0 * self.extent / self.t as f64
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_side().powi(2)
    }

    pub fn len(&self) -> usize {
        self.t * self.t
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + j * self.t
    }

    pub fn coords(&self, p: usize) -> (usize, usize) {
        (p % self.t, p / self.t)
    }

    pub fn center(&self, i: usize, j: usize) -> Vector2<f64> {
        let h = self.pixel_side();
        Vector2::new(-self.extent + (i as f64 + 0.5) * h, -self.extent + (j as f64 + 0.5) * h)
    }

    pub fn center_of(&self, p: usize) -> Vector2<f64> {
        let (i, j) = self.coords(p);
        self.center(i, j)
    }
}

/// A discrete projection image.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub grid: PixelGrid,
    /// Row `i`, column `j`, stored column-major so `as_slice` is the
    /// vectorized profile.
    pub pixels: DMatrix<f64>,
    pub id: usize,
}

impl Profile {
    pub fn new(grid: PixelGrid, pixels: DMatrix<f64>, id: usize) -> Result<Self> {
        if pixels.nrows() != grid.t() || pixels.ncols() != grid.t() {
            return Err(Error::DimensionMismatch { expected: grid.t(), found: pixels.nrows().max(pixels.ncols()) });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("profile contains non-finite pixels".into()));
        }
        Ok(Profile { grid, pixels, id })
    }

    pub fn zeros(grid: PixelGrid, id: usize) -> Self {
        Profile { grid, pixels: DMatrix::zeros(grid.t(), grid.t()), id }
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn vectorized(&self) -> &[f64] {
        self.pixels.as_slice()
    }

    /// Pixel area times the pixel sum.
    pub fn total_intensity(&self) -> f64 {
        self.grid.pixel_area() * self.pixels.sum()
    }
}

/// Evaluates a 2D mixture at every pixel center.
pub fn render_mixture2(m: &RadialMixture2, grid: &PixelGrid) -> DMatrix<f64> {
    DMatrix::from_fn(grid.t(), grid.t(), |i, j| m.eval2(&grid.center(i, j)))
}

/// Projects `m` along `rotation`, samples it at pixel centers and adds
/// i.i.d. `N(0, noise_sd²)` noise drawn from `seed`.
pub fn render_profile(m: &RadialMixture3, rotation: &Rotation3, grid: &PixelGrid, noise_sd: f64, seed: u64) -> Result<Profile> {
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut pixels = render_mixture2(&m.project(rotation), grid);
    if noise_sd > 0.0 {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, noise_sd).expect("finite sd");
        for v in pixels.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Profile { grid: *grid, pixels, id: 0 })
}

/// Pixels whose centers lie strictly inside radius `w`, in column-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    indices: Vec<usize>,
    radius: f64,
}

impl CandidateMask {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn candidate_mask(grid: &PixelGrid, w: f64) -> Result<CandidateMask> {
    if !(w > grid.pixel_side()) {
        return Err(Error::InvalidArgument(format!(
            "mask radius {w} must exceed the pixel side {}",
            grid.pixel_side()
        )));
    }
    let indices: Vec<usize> = (0..grid.len()).filter(|&p| grid.center_of(p).norm() < w).collect();
    if indices.is_empty() {
        return Err(Error::EmptyMask { radius: w });
    }
    Ok(CandidateMask { indices, radius: w })
}

/// `X[j, c] = φ(u_j | u_{mask[c]}, σ²)` together with its cross-product `XᵀX`.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    grid: PixelGrid,
    mask: CandidateMask,
    sigma2: f64,
    x: DMatrix<f64>,
    xtx: Arc<DMatrix<f64>>,
}

impl DesignMatrix {
    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn mask(&self) -> &CandidateMask {
        &self.mask
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn cross_product(&self) -> &DMatrix<f64> {
        &self.xtx
    }

    pub fn shared_cross_product(&self) -> Arc<DMatrix<f64>> {
        Arc::clone(&self.xtx)
    }

    /// `Xᵀy` for a vectorized profile.
    pub fn correlate(&self, y: &[f64]) -> Result<nalgebra::DVector<f64>> {
        if y.len() != self.x.nrows() {
            return Err(Error::DimensionMismatch { expected: self.x.nrows(), found: y.len() });
        }
        Ok(self.x.tr_mul(&nalgebra::DVector::from_column_slice(y)))
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Pixel area times column sums: the discretized mass of each base profile.
    pub fn column_masses(&self) -> Vec<f64> {
        let a = self.grid.pixel_area();
        self.x.column_iter().map(|c| a * c.sum()).collect()
    }

    /// Pixel center of design column `c`.
    pub fn column_center(&self, c: usize) -> Vector2<f64> {
        self.grid.center_of(self.mask.indices[c])
    }
}

pub fn build_design_matrix(grid: &PixelGrid, mask: &CandidateMask, sigma2: f64) -> Result<DesignMatrix> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let n = grid.len();
    let centers: Vec<Vector2<f64>> = (0..n).map(|j| grid.center_of(j)).collect();
    let x = DMatrix::from_fn(n, mask.len(), |j, c| {
        gaussian_density((centers[j] - centers[mask.indices[c]]).norm_squared(), sigma2, 2)
    });
    let xtx = Arc::new(x.tr_mul(&x));
    let design = DesignMatrix { grid: *grid, mask: mask.clone(), sigma2, x, xtx };
    let low = design.column_masses().into_iter().filter(|&m| m < MIN_COLUMN_MASS).count();
    if low > 0 {
        log::warn!(
            "{low} of {} base profiles keep less than {MIN_COLUMN_MASS} of their mass inside the field of view; \
             shrink the mask radius or widen the grid",
            mask.len()
        );
    }
    Ok(design)
}

/// Average total intensity over the stack, clamped at zero.
pub fn estimate_mass(profiles: &[Profile]) -> Result<f64> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("mass estimate needs at least one profile".into()));
    }
    let m = profiles.iter().map(Profile::total_intensity).sum::<f64>() / profiles.len() as f64;
    Ok(m.max(0.0))
}
