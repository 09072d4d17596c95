//! Shared helpers for the integration and acceptance tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use itertools::Itertools;
use nalgebra::{Matrix2xX, Matrix3, Vector3};
use rand::Rng;
use sparsetomo_core::geometry::{Ensemble3, Rotation3};
use sparsetomo_core::imaging::{build_design_matrix, candidate_mask, render_profile, DesignMatrix, PixelGrid};
use sparsetomo_core::mixture::RadialMixture3;
use sparsetomo_core::profile_estimation::{deconvolve_profile, DeconvolutionSettings, ProfileEstimate};
use sparsetomo_core::rng::{rng_from_seed, split_seed};
use sparsetomo_core::shape_recovery::{recover_from_classes, ClassRecovery, ProfileClass};

pub mod oracle;

/// Angle between the two engineered class directions.
pub const CLASS_ANGLE_DEG: f64 = 35.0;

/// Viewing directions of the two classes.
pub fn class_directions() -> [Vector3<f64>; 2] {
    let th = CLASS_ANGLE_DEG.to_radians();
    [Vector3::x(), Vector3::new(th.cos(), 0.0, th.sin())]
}

/// Six components, all resolved when seen along the first class direction;
/// the last two line up along the second one and merge.
pub fn six_component_mixture() -> RadialMixture3 {
    let e2 = class_directions()[1];
    let mid = Vector3::new(0.40, 0.13, -0.30);
    let pts = [
        Vector3::new(-0.29, 0.60, 0.50),
        Vector3::new(0.30, -0.92, -0.26),
        Vector3::new(0.06, 0.81, -0.12),
        Vector3::new(0.35, -0.65, 0.68),
        mid + e2 * 0.65,
        mid - e2 * 0.65,
    ];
    RadialMixture3::new(Ensemble3::from_points(&pts), vec![0.30, 0.19, 0.15, 0.13, 0.12, 0.11], 0.2).unwrap()
}

/// Rotation whose viewing direction (third row) is `d`.
pub fn looking_along(d: &Vector3<f64>) -> Rotation3 {
    let d = d.normalize();
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = (helper - d * d.dot(&helper)).normalize();
    let b = d.cross(&a);
    Rotation3::from_matrix(Matrix3::from_rows(&[a.transpose(), b.transpose(), d.transpose()])).unwrap()
}

/// A view along `d` tilted by up to `tilt` radians, spun in-plane and
/// flipped (viewed from behind) half of the time.
pub fn perturbed_view<R: Rng>(rng: &mut R, d: &Vector3<f64>, tilt: f64) -> Rotation3 {
    let base = looking_along(d);
    let axis = {
        let t = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 0.0);
        if t.norm() < 1e-6 { Vector3::x() } else { t.normalize() }
    };
    let tilt = Rotation3::from_axis_angle(&axis, tilt * rng.random::<f64>());
    let spin = Rotation3::from_axis_angle(&Vector3::z(), 2.0 * PI * rng.random::<f64>());
    let flip = if rng.random::<bool>() { Rotation3::from_axis_angle(&Vector3::y(), PI) } else { Rotation3::identity() };
    spin.compose(&flip).compose(&tilt).compose(&base)
}

pub struct MultiClassSetup {
    pub mixture: RadialMixture3,
    pub grid: PixelGrid,
    pub design: DesignMatrix,
    pub settings: DeconvolutionSettings,
    pub noise_sd: f64,
    /// Largest tilt away from the class direction, per class.
    pub tilt: [f64; 2],
    pub members: [usize; 2],
}

impl MultiClassSetup {
    pub fn new() -> Self {
        let mixture = six_component_mixture();
        let grid = PixelGrid::new(48, 2.2).unwrap();
        let mask = candidate_mask(&grid, 1.6).unwrap();
        let design = build_design_matrix(&grid, &mask, 0.04).unwrap();
        MultiClassSetup {
            mixture,
            grid,
            design,
            settings: DeconvolutionSettings::default(),
            noise_sd: 1e-4,
            tilt: [5f64.to_radians(), 5f64.to_radians()],
            members: [4, 4],
        }
    }
}

pub struct Trial {
    pub recovery: ClassRecovery,
    pub class1: Vec<(ProfileEstimate, Rotation3)>,
    pub class2: Vec<(ProfileEstimate, Rotation3)>,
    /// For each full position, the declared class-2 component it should map to.
    pub expected_source: Vec<usize>,
}

pub enum TrialFailure {
    /// Deconvolution did not give the engineered component counts.
    Counts(Vec<usize>, Vec<usize>),
    Error(String),
}

fn best_assignment(est: &Matrix2xX<f64>, truth: &Matrix2xX<f64>) -> Vec<usize> {
    // truth column j -> estimate column perm[j]
    let k = truth.ncols();
    (0..k)
        .permutations(k)
        .min_by(|a, b| {
            let cost = |p: &Vec<usize>| (0..k).map(|j| (est.column(p[j]) - truth.column(j)).norm()).sum::<f64>();
            cost(a).total_cmp(&cost(b))
        })
        .unwrap()
}

fn nearest(est: &Matrix2xX<f64>, x: nalgebra::VectorView2<f64>) -> usize {
    (0..est.ncols())
        .min_by(|&a, &b| (est.column(a) - x).norm().total_cmp(&(est.column(b) - x).norm()))
        .unwrap()
}

/// One seeded two-class run through simulation, deconvolution and
/// class-by-class Gram recovery.
pub fn multiclass_trial(setup: &MultiClassSetup, seed: u64) -> Result<Trial, TrialFailure> {
    let mut rng = rng_from_seed(split_seed(seed, 0));
    let m = &setup.mixture;
    let mut draw = |d: Vector3<f64>, class: u64| {
        (0..setup.members[class as usize - 1])
            .map(|j| {
                let u = perturbed_view(&mut rng, &d, setup.tilt[class as usize - 1]);
                let p = render_profile(m, &u, &setup.grid, setup.noise_sd, split_seed(seed, 100 * class + j as u64 + 1))
                    .unwrap()
                    .with_id((10 * class) as usize + j);
                let mass = p.total_intensity();
                deconvolve_profile(&setup.design, &p, mass, &setup.settings)
                    .map(|d| (d.estimate, u))
                    .map_err(|e| TrialFailure::Error(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let [d1, d2] = class_directions();
    let class1 = draw(d1, 1)?;
    let class2 = draw(d2, 2)?;
    let k1: Vec<usize> = class1.iter().map(|e| e.0.k()).collect();
    let k2: Vec<usize> = class2.iter().map(|e| e.0.k()).collect();
    if k1.iter().any(|&k| k != 6) || k2.iter().any(|&k| k != 5) {
        return Err(TrialFailure::Counts(k1, k2));
    }
    let c1 = ProfileClass::new(1, class1.iter().map(|e| e.0.clone()).collect(), 0).map_err(|e| TrialFailure::Error(e.to_string()))?;
    let c2 = ProfileClass::new(2, class2.iter().map(|e| e.0.clone()).collect(), 0).map_err(|e| TrialFailure::Error(e.to_string()))?;
    let recovery = recover_from_classes(&[c1, c2], 6, 1000, seed).map_err(|e| TrialFailure::Error(e.to_string()))?;

    // class-1 reference labels -> 3D components
    let proj = |u: &Rotation3| sparsetomo_core::geometry::project(u, m.means());
    let (ref1, u1) = &class1[0];
    let label_to_comp = best_assignment(&ref1.means2d, &proj(u1));
    let mut comp_of_label = [0; 6];
    for (comp, &label) in label_to_comp.iter().enumerate() {
        comp_of_label[label] = comp;
    }
    let (ref2, u2) = &class2[0];
    let p2 = proj(u2);
    let expected_source = (0..6).map(|i| nearest(&ref2.means2d, p2.column(comp_of_label[i]))).collect();
    Ok(Trial { recovery, class1, class2, expected_source })
}
