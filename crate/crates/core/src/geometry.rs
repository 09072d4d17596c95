//! Rotations on SO(3), the 2x3 coordinate projection, Gram-matrix algebra and
//! the (stretched) Roman surface traced by projected Gram matrices.

use nalgebra::{DMatrix, Dim, Matrix, Matrix2xX, Matrix3, Matrix3xX, Storage, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Tolerance on ‖e‖ − 1 for direction arguments.
pub const UNIT_TOL: f64 = 1e-9;
/// Relative eigenvalue threshold separating signal from numerical rank.
pub const RANK_TOL: f64 = 1e-6;

/// A proper rotation of R³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    /// Wraps a matrix, checking orthogonality and orientation to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let defect = (m * m.transpose() - Matrix3::identity()).norm();
        let det = m.determinant();
        if defect > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "not a rotation (orthogonality defect {defect:e}, det {det})"
            )));
        }
        Ok(Rotation3(m))
    }

    /// Rotation by `angle` radians about a unit axis (Rodrigues).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        Rotation3(Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    /// `self · other`
    pub fn compose(&self, other: &Rotation3) -> Self {
        Rotation3(self.0 * other.0)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x
    }
}

/// Draws a Haar-uniform rotation: QR of a Gaussian matrix with the R diagonal
/// made positive, then a column flip to land in SO(3).
pub fn sample_haar_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3 {
    loop {
        let z = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = z.qr();
        let r = qr.r();
        if (0..3).any(|i| r[(i, i)].abs() < 1e-12) {
            continue;
        }
        let mut q = qr.q();
        for i in 0..3 {
            if r[(i, i)] < 0.0 {
                q.column_mut(i).neg_mut();
            }
        }
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        return Rotation3(q);
    }
}

/// Uniform direction on S².
pub fn sample_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// K×K symmetric nonnegative-definite matrix of inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Checks symmetry (1e-12 relative) and nonnegativity (eigenvalues ≥ −1e-9 relative).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!("matrix is not symmetric ({asym:e})")));
        }
        let g = GramMatrix(m);
        let min = g.eigenvalues().last().copied().unwrap_or(0.0);
        if min < -1e-9 * scale {
            return Err(Error::IndefiniteGram { min_eigenvalue: min });
        }
        Ok(g)
    }

    /// Wraps a matrix that is symmetric by construction; it is re-symmetrized
    /// to remove rounding asymmetry but otherwise unchecked.
    pub fn from_matrix_unchecked(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        GramMatrix((m + t) * 0.5)
    }

    pub fn zeros(k: usize) -> Self {
        GramMatrix(DMatrix::zeros(k, k))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn frobenius_distance(&self, other: &GramMatrix) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok((&self.0 - &other.0).norm())
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim() == 0 {
            return Vec::new();
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Simultaneous row/column permutation: entry (i, j) of the result is
    /// entry (perm[i], perm[j]) of `self`.
    pub fn permuted(&self, perm: &[usize]) -> GramMatrix {
        let k = perm.len();
        GramMatrix(DMatrix::from_fn(k, k, |i, j| self.0[(perm[i], perm[j])]))
    }
}

/// 3×K ensemble of component locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble3(Matrix3xX<f64>);

impl Ensemble3 {
    pub fn new(columns: Matrix3xX<f64>) -> Self {
        Ensemble3(columns)
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Self {
        Ensemble3(Matrix3xX::from_columns(points))
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn columns(&self) -> &Matrix3xX<f64> {
        &self.0
    }

    pub fn point(&self, k: usize) -> Vector3<f64> {
        self.0.column(k).into_owned()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.k() == 0 {
            return Vector3::zeros();
        }
        self.0.column_sum() / self.k() as f64
    }

    /// The ensemble translated so its (unweighted) centroid is the origin.
    pub fn centered(&self) -> Ensemble3 {
        let c = self.centroid();
        let mut m = self.0.clone();
        for mut col in m.column_iter_mut() {
            col -= c;
        }
        Ensemble3(m)
    }

    /// Left-multiplies every column by `b`.
    pub fn transformed(&self, b: &Matrix3<f64>) -> Ensemble3 {
        Ensemble3(b * &self.0)
    }

    pub fn gram(&self) -> GramMatrix {
        gram(&self.0)
    }

    /// Columns reordered so that column i of the result is column perm[i].
    pub fn permuted(&self, perm: &[usize]) -> Ensemble3 {
        Ensemble3(Matrix3xX::from_fn(perm.len(), |r, c| self.0[(r, perm[c])]))
    }
}

/// `H U μ_k` for every column: the first two rows of the rotated ensemble.
pub fn project(rotation: &Rotation3, means: &Ensemble3) -> Matrix2xX<f64> {
    let rotated = rotation.matrix() * means.columns();
    rotated.fixed_rows::<2>(0).into_owned()
}

/// Gram matrix `WᵀW` of the columns of any d×K matrix.
pub fn gram<R: Dim, C: Dim, S: Storage<f64, R, C>>(vectors: &Matrix<f64, R, C, S>) -> GramMatrix {
    let k = vectors.ncols();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = vectors.column(i).dot(&vectors.column(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    GramMatrix(g)
}

/// Subtracts the column mean from a 2×K matrix of projected means.
pub fn center_columns(points: &Matrix2xX<f64>) -> Matrix2xX<f64> {
    let k = points.ncols();
    if k == 0 {
        return points.clone();
    }
    let c = points.column_sum() / k as f64;
    let mut out = points.clone();
    for mut col in out.column_iter_mut() {
        col -= c;
    }
    out
}

/// Recovers an ensemble `V` (3×K) with `VᵀV = G`.
///
/// The top eigenpairs are kept (negative ones clamped to zero), and the result
/// is rotated into echelon form: column 1 on the first axis, column 2 in the
/// 1–2 plane, and in general the first column to leave the span of its
/// predecessors gets a positive leading coordinate on the new axis.
pub fn factor_gram(g: &GramMatrix, target_rank: usize) -> Result<Ensemble3> {
    if target_rank > 3 {
        return Err(Error::InvalidArgument(format!("target rank {target_rank} exceeds 3")));
    }
    let k = g.dim();
    if k == 0 {
        return Ok(Ensemble3(Matrix3xX::zeros(0)));
    }
    let eig = SymmetricEigen::new(g.matrix().clone());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if largest <= 0.0 {
        let min = eig.eigenvalues[order[k - 1]];
        if min < -1e-300 {
            return Err(Error::IndefiniteGram { min_eigenvalue: min });
        }
        return Ok(Ensemble3(Matrix3xX::zeros(k)));
    }
    let min = eig.eigenvalues[order[k - 1]];
    if min < -RANK_TOL * largest {
        return Err(Error::IndefiniteGram { min_eigenvalue: min });
    }
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > RANK_TOL * largest).count();
    if rank > target_rank {
        return Err(Error::NotLowRank { rank, target: target_rank });
    }

    // small but genuine directions below RANK_TOL are kept; only roundoff is dropped
    let kept = order.iter().take(target_rank.min(k)).filter(|&&i| eig.eigenvalues[i] > 1e-12 * largest).count();
    let mut v0 = Matrix3xX::zeros(k);
    for (row, &idx) in order.iter().take(kept).enumerate() {
        let s = eig.eigenvalues[idx].max(0.0).sqrt();
        for c in 0..k {
            v0[(row, c)] = s * eig.eigenvectors[(c, idx)];
        }
    }

    let basis = echelon_basis(&v0, largest.sqrt());
    Ok(Ensemble3(basis.transpose() * v0))
}

/// Orthonormal basis (as matrix columns) built by Gram–Schmidt over the
/// ensemble columns in order, completed with coordinate axes.
fn echelon_basis(v: &Matrix3xX<f64>, scale: f64) -> Matrix3<f64> {
    let mut basis: Vec<Vector3<f64>> = Vec::with_capacity(3);
    let candidates = v
        .column_iter()
        .map(|c| (c.into_owned(), 1e-9 * scale))
        .chain((0..3).map(|i| (Vector3::ith(i, 1.0), 1e-6)));
    for (c, tol) in candidates {
        if basis.len() == 3 {
            break;
        }
        let mut r = c;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                r -= b * b.dot(&r);
            }
        }
        let n = r.norm();
        if n > tol {
            basis.push(r / n);
        }
    }
    Matrix3::from_columns(&basis)
}

/// The Roman-surface map `(e₁,e₂,e₃) ↦ (e₂e₃, e₁e₃, e₁e₂)`.
pub fn roman_embed(e: &Vector3<f64>) -> Result<Vector3<f64>> {
    check_unit(e)?;
    Ok(Vector3::new(e.y * e.z, e.x * e.z, e.x * e.y))
}

/// Jacobian of [`roman_embed`] as a map on R³ (row i = gradient of output i).
pub fn roman_embed_jacobian(e: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, e.z, e.y, e.z, 0.0, e.x, e.y, e.x, 0.0)
}

fn check_unit(e: &Vector3<f64>) -> Result<()> {
    let norm = e.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit { norm });
    }
    Ok(())
}

/// `G(e) = Vᵀ(I − e eᵀ)V`, the Gram matrix of the ensemble seen along `e`.
pub fn projected_gram_at(factor: &Ensemble3, e: &Vector3<f64>) -> Result<GramMatrix> {
    check_unit(e)?;
    Ok(projected_gram_unchecked(factor, e))
}

fn projected_gram_unchecked(factor: &Ensemble3, e: &Vector3<f64>) -> GramMatrix {
    let v = factor.columns();
    let along = v.transpose() * e;
    let g = v.transpose() * v - &along * along.transpose();
    GramMatrix::from_matrix_unchecked(g)
}

/// Points sampled on the stretched Roman surface of an ensemble.
#[derive(Debug, Clone)]
pub struct RomanSample {
    pub points: Vec<GramMatrix>,
    pub seed: u64,
}

impl RomanSample {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, GramMatrix::dim)
    }
}

/// Samples `count` projected Gram matrices at uniformly random directions.
pub fn sample_roman_surface(factor: &Ensemble3, count: usize, seed: u64) -> RomanSample {
    let mut rng = rng_from_seed(seed);
    let points = (0..count)
        .map(|_| projected_gram_unchecked(factor, &sample_unit_vector(&mut rng)))
        .collect();
    RomanSample { points, seed }
}

/// Minimum Frobenius distance from `candidate` to the sampled locus.
pub fn roman_distance(candidate: &GramMatrix, locus: &RomanSample) -> Result<f64> {
    let k = candidate.dim();
    let mut best = f64::INFINITY;
    for s in &locus.points {
        if s.dim() != k {
            return Err(Error::DimensionMismatch { expected: s.dim(), found: k });
        }
        let d2 = candidate
            .matrix()
            .iter()
            .zip(s.matrix().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        best = best.min(d2);
    }
    if locus.points.is_empty() {
        return Err(Error::InvalidArgument("empty Roman locus".into()));
    }
    Ok(best.sqrt())
}
