//! Cross-profile shape estimation.
//!
//! Projected Gram matrices are averaged and scaled by 3/2 to estimate the 3D
//! Gram matrix, truncated to rank 3, and (for classes of similar views whose
//! components merged) completed by trying every duplication/labeling and
//! keeping the one closest to the Roman-surface locus of the current estimate.

use itertools::Itertools;
use nalgebra::{DMatrix, Matrix2xX, Matrix3xX, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{center_columns, factor_gram, gram, roman_distance, sample_roman_surface, Ensemble3, GramMatrix, RomanSample};
use crate::profile_estimation::ProfileEstimate;
use crate::rng::split_seed;

/// Largest component count for exhaustive permutation search.
pub const MAX_EXHAUSTIVE_K: usize = 8;

/// `(3 / 2N) Σ_n Gram(means_n)`.
pub fn average_gram(means: &[Matrix2xX<f64>]) -> Result<GramMatrix> {
    let Some(first) = means.first() else {
        return Err(Error::InvalidArgument("no projected ensembles to average".into()));
    };
    let k = first.ncols();
    let mut acc = DMatrix::zeros(k, k);
    for m in means {
        if m.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, found: m.ncols() });
        }
        acc += gram(m).matrix();
    }
    Ok(GramMatrix::from_matrix_unchecked(acc * (1.5 / means.len() as f64)))
}

/// Best rank-3 approximation (top singular triplets), symmetrized, with
/// negative eigenvalues clamped to zero.
pub fn rank3_truncate(g: &GramMatrix) -> GramMatrix {
    let k = g.dim();
    let m = g.matrix().clone();
    let approx = if k <= 3 {
        m
    } else {
        let svd = m.svd(true, true);
        let u = svd.u.expect("requested");
        let vt = svd.v_t.expect("requested");
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut out = DMatrix::zeros(k, k);
        for &i in order.iter().take(3) {
            out += u.column(i) * vt.row(i) * svd.singular_values[i];
        }
        out
    };
    let sym = (&approx + approx.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    GramMatrix::from_matrix_unchecked(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatch {
    /// Component i of the relabeled candidate is candidate component `perm[i]`.
    pub perm: Vec<usize>,
    pub distance: f64,
}

/// Labeling of `candidate` whose Gram matrix is closest (Frobenius) to
/// `reference`, by exhaustive search. Ties keep the earliest permutation in
/// lexicographic order.
pub fn procrustes_label(candidate: &Matrix2xX<f64>, reference: &GramMatrix) -> Result<LabelMatch> {
    let k = candidate.ncols();
    if k != reference.dim() {
        return Err(Error::DimensionMismatch { expected: reference.dim(), found: k });
    }
    best_permutation(&gram(candidate), reference)
}

/// Permutation `perm` minimizing `‖G[perm, perm] − reference‖_F`.
pub fn best_permutation(g: &GramMatrix, reference: &GramMatrix) -> Result<LabelMatch> {
    let k = g.dim();
    if k != reference.dim() {
        return Err(Error::DimensionMismatch { expected: reference.dim(), found: k });
    }
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::TooManyComponents(k));
    }
    let mut best = LabelMatch { perm: (0..k).collect(), distance: f64::INFINITY };
    for perm in (0..k).permutations(k) {
        let d = permuted_distance(g.matrix(), &perm, reference.matrix());
        if d < best.distance {
            best = LabelMatch { perm, distance: d };
        }
    }
    best.distance = best.distance.sqrt();
    Ok(best)
}

fn permuted_distance(g: &DMatrix<f64>, perm: &[usize], reference: &DMatrix<f64>) -> f64 {
    let k = perm.len();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = g[(perm[i], perm[j])] - reference[(i, j)];
            s += d * d;
        }
    }
    s
}

/// Profiles believed to show the particle from about the same viewpoint.
#[derive(Debug, Clone)]
pub struct ProfileClass {
    pub class_id: usize,
    pub members: Vec<ProfileEstimate>,
    pub declared_k: usize,
    /// Index into `members` of the generating profile.
    pub reference: usize,
}

impl ProfileClass {
    pub fn new(class_id: usize, members: Vec<ProfileEstimate>, reference: usize) -> Result<Self> {
        let Some(r) = members.get(reference) else {
            return Err(Error::InvalidArgument(format!("class {class_id}: reference index {reference} out of range")));
        };
        let declared_k = r.k();
        if let Some(bad) = members.iter().find(|m| m.k() != declared_k) {
            return Err(Error::DimensionMismatch { expected: declared_k, found: bad.k() });
        }
        Ok(ProfileClass { class_id, members, declared_k, reference })
    }

    /// Relabels every member to agree with the reference profile via
    /// [`procrustes_label`] on centered locations.
    pub fn aligned(&self) -> Result<ProfileClass> {
        let reference = gram(&self.members[self.reference].centered_means());
        let members = self
            .members
            .iter()
            .map(|m| Ok(m.permuted(&procrustes_label(&m.centered_means(), &reference)?.perm)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProfileClass { members, ..self.clone() })
    }

    /// `(3 / 2n) Σ Gram(centered member locations)`.
    pub fn average_gram(&self) -> Result<GramMatrix> {
        average_gram(&self.members.iter().map(ProfileEstimate::centered_means).collect::<Vec<_>>())
    }
}

/// One way of completing and labeling a class to `full_k` components.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCandidate {
    /// `(3 / 2n) Σ_j Gram([μ̂ʲ μ̂ʲ_dup] P)`: a 3D Gram estimate from the class.
    pub gram: GramMatrix,
    /// Column i of the completed ensemble is expanded column `permutation[i]`.
    pub permutation: Vec<usize>,
    /// Declared components appended as duplicates, in order.
    pub duplicated: Vec<usize>,
}

impl LabeledCandidate {
    /// For every full component, the declared component it is located at.
    pub fn source(&self, declared_k: usize) -> Vec<usize> {
        self.permutation
            .iter()
            .map(|&c| if c < declared_k { c } else { self.duplicated[c - declared_k] })
            .collect()
    }

    /// The member's locations completed to the full component set.
    pub fn complete(&self, member: &ProfileEstimate) -> Matrix2xX<f64> {
        let src = self.source(member.k());
        Matrix2xX::from_fn(src.len(), |r, c| member.means2d[(r, src[c])])
    }
}

fn expand(means: &Matrix2xX<f64>, dups: &[usize]) -> Matrix2xX<f64> {
    let k = means.ncols();
    Matrix2xX::from_fn(k + dups.len(), |r, c| if c < k { means[(r, c)] } else { means[(r, dups[c - k])] })
}

/// All duplication choices (one for a deficit of 1, unordered pairs with
/// repetition for a deficit of 2) combined with every permutation of the
/// `full_k` columns that keeps the first (largest) component in place.
/// Members should already be aligned to the class reference.
pub fn expand_with_multiplicity(class: &ProfileClass, full_k: usize) -> Result<Vec<LabeledCandidate>> {
    let k = class.declared_k;
    if full_k < k || full_k - k > 2 {
        return Err(Error::UnsupportedDeficit { declared: k, full: full_k });
    }
    if full_k > MAX_EXHAUSTIVE_K {
        return Err(Error::TooManyComponents(full_k));
    }
    let dup_sets: Vec<Vec<usize>> = match full_k - k {
        0 => vec![vec![]],
        1 => (0..k).map(|a| vec![a]).collect(),
        _ => (0..k).flat_map(|a| (a..k).map(move |b| vec![a, b])).collect(),
    };
    let n = class.members.len() as f64;
    let mut out = Vec::new();
    for dups in dup_sets {
        let mut sum = DMatrix::zeros(full_k, full_k);
        for m in &class.members {
            sum += gram(&center_columns(&expand(&m.means2d, &dups))).matrix();
        }
        let sum = GramMatrix::from_matrix_unchecked(sum);
        for rest in (1..full_k).permutations(full_k - 1) {
            let mut perm = Vec::with_capacity(full_k);
            perm.push(0);
            perm.extend(rest);
            let p = sum.permuted(&perm);
            out.push(LabeledCandidate {
                gram: GramMatrix::from_matrix_unchecked(p.matrix() * (1.5 / n)),
                permutation: perm,
                duplicated: dups.clone(),
            });
        }
    }
    Ok(out)
}

/// The candidate whose Gram estimate lies closest to the locus;
/// ties go to the earliest candidate.
pub fn select_candidate(candidates: &[LabeledCandidate], locus: &RomanSample) -> Result<(LabeledCandidate, f64)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to select from".into()));
    }
    let distances: Vec<f64> = candidates
        .par_iter()
        .map(|c| roman_distance(&c.gram, locus))
        .collect::<Result<Vec<_>>>()?;
    let (idx, d) = distances
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &d)| if d < acc.1 { (i, d) } else { acc });
    Ok((candidates[idx].clone(), d))
}

/// Profile-count weighted pool of class-level estimates (each already
/// carrying the 3/2 factor), truncated to rank 3.
pub fn merge_class_grams(grams: &[(GramMatrix, usize)]) -> Result<GramMatrix> {
    let Some((first, _)) = grams.first() else {
        return Err(Error::InvalidArgument("no class estimates to merge".into()));
    };
    let k = first.dim();
    let mut acc = DMatrix::zeros(k, k);
    let mut total = 0usize;
    for (g, n) in grams {
        if g.dim() != k {
            return Err(Error::DimensionMismatch { expected: k, found: g.dim() });
        }
        acc += g.matrix() * (*n as f64);
        total += n;
    }
    if total == 0 {
        return Err(Error::InvalidArgument("class profile counts sum to zero".into()));
    }
    Ok(rank3_truncate(&GramMatrix::from_matrix_unchecked(acc / total as f64)))
}

/// In-plane coordinates of an ensemble projected along `axis`, expressed in
/// an orthonormal basis of the plane orthogonal to it.
pub fn project_along(ensemble: &Ensemble3, axis: &Vector3<f64>) -> Result<Matrix2xX<f64>> {
    let e = axis.normalize();
    if !((axis.norm() - 1.0).abs() <= crate::geometry::UNIT_TOL) {
        return Err(Error::NotUnit { norm: axis.norm() });
    }
    let helper = if e.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = (helper - e * e.dot(&helper)).normalize();
    let b2 = e.cross(&b1);
    let v: &Matrix3xX<f64> = ensemble.columns();
    Ok(Matrix2xX::from_fn(v.ncols(), |r, c| if r == 0 { b1.dot(&v.column(c)) } else { b2.dot(&v.column(c)) }))
}

/// Exact Gram reconstruction from views along three orthogonal axes:
/// `½ Σ_i Gram(projection_i)`.
pub fn triad_gram(projections: [&Matrix2xX<f64>; 3], axes: [&Vector3<f64>; 3]) -> Result<GramMatrix> {
    for i in 0..3 {
        let n = axes[i].norm();
        if (n - 1.0).abs() > crate::geometry::UNIT_TOL {
            return Err(Error::NotUnit { norm: n });
        }
        for j in (i + 1)..3 {
            let dot = axes[i].dot(axes[j]);
            if dot.abs() > 1e-9 {
                return Err(Error::NotOrthogonal { dot });
            }
        }
    }
    let k = projections[0].ncols();
    let mut acc = DMatrix::zeros(k, k);
    for p in projections {
        if p.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, found: p.ncols() });
        }
        acc += gram(p).matrix();
    }
    Ok(GramMatrix::from_matrix_unchecked(acc * 0.5))
}

/// Outcome of processing one class.
#[derive(Debug, Clone)]
pub struct ClassOutcome {
    pub class_id: usize,
    /// Members relabeled to agree with the class reference.
    pub aligned: ProfileClass,
    /// Completion chosen for the class (identity for the first class).
    pub selected: LabeledCandidate,
    /// Distance of the selection to the Roman locus (`None` for the first class).
    pub roman_distance: Option<f64>,
    pub candidates_considered: usize,
    /// Cumulative Gram estimate after merging this class.
    pub cumulative: GramMatrix,
}

#[derive(Debug, Clone)]
pub struct ClassRecovery {
    pub gram: GramMatrix,
    pub classes: Vec<ClassOutcome>,
}

impl ClassRecovery {
    /// Every member's locations completed to the full component labeling.
    pub fn completed_means(&self) -> Vec<(usize, Matrix2xX<f64>)> {
        self.classes
            .iter()
            .flat_map(|c| c.aligned.members.iter().map(move |m| (m.profile_id, c.selected.complete(m))))
            .collect()
    }

    /// Third eigenvalue of the pooled Gram over the first: how far the pooled
    /// views are from a single planar view.
    pub fn diagnosticity(&self) -> f64 {
        diagnosticity(&self.gram)
    }
}

pub fn diagnosticity(g: &GramMatrix) -> f64 {
    let ev = g.eigenvalues();
    match (ev.first(), ev.get(2)) {
        (Some(&a), Some(&c)) if a > 0.0 => c / a,
        _ => 0.0,
    }
}

/// Class-by-class Gram estimation. The first class must show all `full_k`
/// components; each later class is completed against the Roman locus of the
/// estimate pooled from the classes before it.
pub fn recover_from_classes(classes: &[ProfileClass], full_k: usize, roman_samples: usize, seed: u64) -> Result<ClassRecovery> {
    let Some(first) = classes.first() else {
        return Err(Error::InvalidArgument("no profile classes given".into()));
    };
    if first.declared_k != full_k {
        return Err(Error::InvalidArgument(format!(
            "first class must show all {full_k} components, it has {}",
            first.declared_k
        )));
    }
    let mut outcomes = Vec::new();
    let mut pooled: Vec<(GramMatrix, usize)> = Vec::new();
    let mut cumulative = GramMatrix::zeros(full_k);
    for (ci, class) in classes.iter().enumerate() {
        let aligned = class.aligned()?;
        let n = aligned.members.len();
        let (selected, distance, considered) = if ci == 0 {
            let g = aligned.average_gram()?;
            let identity = LabeledCandidate {
                gram: g,
                permutation: (0..full_k).collect(),
                duplicated: Vec::new(),
            };
            (identity, None, 1)
        } else {
            let factor = factor_gram(&cumulative, 3)?;
            let locus = sample_roman_surface(&factor, roman_samples, split_seed(seed, class.class_id as u64));
            let candidates = expand_with_multiplicity(&aligned, full_k)?;
            let (best, d) = select_candidate(&candidates, &locus)?;
            (best, Some(d), candidates.len())
        };
        pooled.push((selected.gram.clone(), n));
        cumulative = merge_class_grams(&pooled)?;
        log::info!(
            "class {}: {} members, {} declared components, {} candidates{}",
            class.class_id,
            n,
            class.declared_k,
            considered,
            distance.map(|d| format!(", Roman distance {d:.4}")).unwrap_or_default()
        );
        outcomes.push(ClassOutcome {
            class_id: class.class_id,
            aligned,
            selected,
            roman_distance: distance,
            candidates_considered: considered,
            cumulative: cumulative.clone(),
        });
    }
    Ok(ClassRecovery { gram: cumulative, classes: outcomes })
}
