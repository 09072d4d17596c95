use std::collections::BTreeSet;

use nalgebra::{Matrix3xX, Vector2, Vector3};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use sparsetomo_core::geometry::{project, sample_haar_rotation, Ensemble3, Rotation3};
use sparsetomo_core::imaging::{
    build_design_matrix, candidate_mask, estimate_mass, render_mixture2, render_profile, PixelGrid, Profile,
};
use sparsetomo_core::mixture::{pyramid_fixture, RadialMixture2, RadialMixture3};
use sparsetomo_core::profile_estimation::{cluster_nonzeros, deconvolve_profile, order_components, DeconvolutionSettings};
use sparsetomo_core::rng::{rng_from_seed, split_seed};
use sparsetomo_core::sparse_solver::SparseSolution;

fn random_mixture(seed: u64, k: usize, sigma: f64) -> RadialMixture3 {
    let mut rng = rng_from_seed(seed);
    let means = Matrix3xX::from_fn(k, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    RadialMixture3::new(Ensemble3::new(means), raw.iter().map(|w| w / total).collect(), sigma).unwrap()
}

#[test]
fn eval3_at_pyramid_apex_is_direct_sum() {
    let m = pyramid_fixture();
    let x = Vector3::new(0.0, 0.0, 0.8);
    let s2: f64 = 0.46 * 0.46;
    let pts: [(f64, f64, f64); 4] = [(0.0, 0.8, -0.3), (0.7, -0.4, -0.3), (-0.7, -0.4, -0.3), (0.0, 0.0, 0.8)];
    let q = [0.18, 0.26, 0.21, 0.35];
    let want: f64 = pts
        .iter()
        .zip(q)
        .map(|(p, q)| {
            let d2 = (x.x - p.0).powi(2) + (x.y - p.1).powi(2) + (x.z - p.2).powi(2);
            q * (-d2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).powf(1.5)
        })
        .sum();
    assert!((m.eval3(&x) - want).abs() < 1e-14);
    let c = m.means().centroid();
    assert!((c - Vector3::new(0.0, 0.0, -0.025)).norm() < 1e-15);
}

#[test]
fn density_integrates_to_mass() {
    let m = pyramid_fixture();
    let half = 4.0 * 0.46 + 0.85;
    let n = 60;
    let h = 2.0 * half / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = |a: usize| -half + (a as f64 + 0.5) * h;
                acc += m.eval3(&Vector3::new(c(i), c(j), c(k)));
            }
        }
    }
    assert!((acc * h * h * h - 1.0).abs() < 1e-3);
}

#[test]
fn projection_is_marginal_along_view() {
    let m = random_mixture(4, 3, 0.4);
    let u = sample_haar_rotation(&mut rng_from_seed(2));
    let p = m.project(&u);
    let rotated = m.rotate(&u);
    // trapezoid rule in the viewing coordinate
    let (lo, hi, n) = (-6.0, 6.0, 2400);
    let h = (hi - lo) / n as f64;
    for (a, b) in [(0.1, -0.3), (0.0, 0.0), (0.7, 0.4)] {
        let mut s = 0.0;
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let f = rotated.eval3(&Vector3::new(a, b, z));
            s += if i == 0 || i == n { 0.5 * f } else { f };
        }
        assert!((s * h - p.eval2(&Vector2::new(a, b))).abs() < 1e-6);
    }
}

#[test]
fn noise_free_pyramid_cluster_means_near_truth() {
    let grid = PixelGrid::new(64, 2.2).unwrap();
    let mask = candidate_mask(&grid, std::f64::consts::FRAC_PI_3).unwrap();
    let design = build_design_matrix(&grid, &mask, 0.46 * 0.46).unwrap();
    let m = pyramid_fixture();
    let diag = 2.0 * 2f64.sqrt() * 2.2 / 64.0;
    let mut rng = rng_from_seed(31);
    let (mut four, mut good) = (0, 0);
    let n = 30;
    for i in 0..n {
        let u = sample_haar_rotation(&mut rng);
        let p = render_profile(&m, &u, &grid, 1e-4, split_seed(31, i)).unwrap();
        let truth = project(&u, m.means());
        let d = deconvolve_profile(&design, &p, 1.0, &DeconvolutionSettings::default()).unwrap();
        if d.estimate.k() != 4 {
            continue;
        }
        four += 1;
        let ok = (0..4).all(|c| truth.column_iter().any(|t| (d.estimate.means2d.column(c) - t).norm() < 2.0 * diag));
        good += ok as usize;
    }
    assert!(four > 0);
    assert!(good as f64 >= 0.8 * four as f64, "{good}/{four}");
}

#[test]
fn mass_estimate_of_inside_mixture() {
    let grid = PixelGrid::new(64, 2.2).unwrap();
    let m = pyramid_fixture();
    let mut rng = rng_from_seed(3);
    let clean: Vec<Profile> = (0..5).map(|i| render_profile(&m, &sample_haar_rotation(&mut rng), &grid, 0.0, i).unwrap()).collect();
    let m_hat = estimate_mass(&clean).unwrap();
    assert!((m_hat - 1.0).abs() < 0.01);
    let noisy: Vec<Profile> = clean
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = rng_from_seed(50 + i as u64);
            let px = p.pixels.map(|v| v + 1e-3 * r.sample::<f64, _>(StandardNormal));
            Profile::new(grid, px, i).unwrap()
        })
        .collect();
    // each profile sum moves by about noise_sd · pixel area · T
    let bound = 4.0 * 1e-3 * grid.pixel_area() * 64.0;
    assert!((estimate_mass(&noisy).unwrap() - m_hat).abs() < bound);
}

#[test]
fn far_mixture_renders_black() {
    let grid = PixelGrid::new(16, 1.0).unwrap();
    let m = RadialMixture3::new(Ensemble3::from_points(&[Vector3::new(40.0, 0.0, 0.0)]), vec![1.0], 0.3).unwrap();
    let p = render_profile(&m, &Rotation3::identity(), &grid, 0.0, 0).unwrap();
    assert!(p.pixels.amax() < 1e-12);
}

#[test]
fn design_reproduces_mixture_on_pixel_centers() {
    let grid = PixelGrid::new(24, 2.0).unwrap();
    let mask = candidate_mask(&grid, 1.2).unwrap();
    let s2: f64 = 0.09;
    let design = build_design_matrix(&grid, &mask, s2).unwrap();
    let picks = [5usize, 40, 77];
    let w = [0.5, 0.3, 0.2];
    let means = nalgebra::Matrix2xX::from_fn(3, |r, c| grid.center_of(mask.indices()[picks[c]])[r]);
    let m2 = RadialMixture2::new(means, w.to_vec(), s2.sqrt()).unwrap();
    let img = render_mixture2(&m2, &grid);
    let mut beta = nalgebra::DVector::zeros(mask.len());
    for (p, w) in picks.iter().zip(w) {
        beta[*p] = w;
    }
    let fit = design.matrix() * beta;
    let flat = Profile::new(grid, img, 0).unwrap();
    for (a, b) in fit.iter().zip(flat.vectorized()) {
        assert!((a - b).abs() < 1e-10);
    }
}

/// Independent 8-connectivity partition by flood fill on pixel coordinates.
fn flood_partition(pixels: &[(usize, usize)]) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let all: BTreeSet<(usize, usize)> = pixels.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut parts = BTreeSet::new();
    for &p in &all {
        if seen.contains(&p) {
            continue;
        }
        let mut part = BTreeSet::new();
        let mut stack = vec![p];
        while let Some(q) = stack.pop() {
            if !seen.insert(q) {
                continue;
            }
            part.insert(q);
            for &r in &all {
                if !seen.contains(&r) && r.0.abs_diff(q.0) <= 1 && r.1.abs_diff(q.1) <= 1 {
                    stack.push(r);
                }
            }
        }
        parts.insert(part);
    }
    parts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_is_change_of_variables(seed in any::<u64>(), k in 1usize..5) {
        let m = random_mixture(seed, k, 0.35);
        let mut rng = rng_from_seed(seed ^ 9);
        let u = sample_haar_rotation(&mut rng);
        let x = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        prop_assert!((m.rotate(&u).eval3(&u.apply(&x)) - m.eval3(&x)).abs() < 1e-12);
        let mut w0 = m.weights().to_vec();
        let mut w1 = m.rotate(&u).weights().to_vec();
        w0.sort_by(f64::total_cmp);
        w1.sort_by(f64::total_cmp);
        prop_assert_eq!(w0, w1);
        prop_assert!(m.rotate(&u).means().gram().frobenius_distance(&m.means().gram()).unwrap() < 1e-12);
    }

    #[test]
    fn rendering_is_linear(seed in any::<u64>()) {
        let grid = PixelGrid::new(20, 1.5).unwrap();
        let a = random_mixture(seed, 2, 0.3);
        let b = random_mixture(seed ^ 1, 3, 0.3);
        let u = sample_haar_rotation(&mut rng_from_seed(seed));
        let sum = render_profile(&a.merged(&b).unwrap(), &u, &grid, 0.0, 0).unwrap().pixels;
        let parts = render_profile(&a, &u, &grid, 0.0, 0).unwrap().pixels + render_profile(&b, &u, &grid, 0.0, 0).unwrap().pixels;
        prop_assert!((sum - parts).amax() < 1e-13);
    }

    #[test]
    fn mask_grows_with_radius_and_is_square_symmetric(t in 4usize..30, w1 in 0.2f64..1.5, dw in 0.0f64..1.0) {
        let grid = PixelGrid::new(t, 1.0).unwrap();
        prop_assume!(w1 > grid.pixel_side());
        let small = candidate_mask(&grid, w1);
        let big = candidate_mask(&grid, w1 + dw).unwrap();
        if let Ok(small) = small {
            prop_assert!(small.indices().iter().all(|p| big.indices().contains(p)));
        }
        let set: BTreeSet<(usize, usize)> = big.indices().iter().map(|&p| grid.coords(p)).collect();
        for &(i, j) in &set {
            prop_assert!(set.contains(&(j, t - 1 - i)));
        }
    }

    #[test]
    fn clusters_match_flood_fill(seed in any::<u64>(), density in 0.02f64..0.3) {
        let grid = PixelGrid::new(12, 1.0).unwrap();
        let mask = candidate_mask(&grid, 1.5).unwrap();
        let mut rng = rng_from_seed(seed);
        let mut beta: Vec<f64> = (0..mask.len()).map(|_| if rng.random_bool(density) { rng.random_range(0.01..1.0) } else { 0.0 }).collect();
        if beta.iter().all(|b| *b == 0.0) {
            beta[0] = 0.5;
        }
        let sol = SparseSolution { t: beta.iter().sum(), beta: beta.clone(), residual_sse: 0.0 };
        let cs = cluster_nonzeros(&sol, &mask, &grid).unwrap();
        let got: BTreeSet<BTreeSet<(usize, usize)>> =
            cs.clusters().iter().map(|c| c.iter().map(|&col| grid.coords(mask.indices()[col])).collect()).collect();
        let support: Vec<(usize, usize)> = (0..beta.len()).filter(|&c| beta[c] != 0.0).map(|c| grid.coords(mask.indices()[c])).collect();
        prop_assert_eq!(got, flood_partition(&support));
    }

    #[test]
    fn ordering_is_idempotent(seed in any::<u64>(), k in 1usize..6) {
        let grid = PixelGrid::new(32, 2.0).unwrap();
        let mask = candidate_mask(&grid, 1.5).unwrap();
        let design = build_design_matrix(&grid, &mask, 0.05).unwrap();
        let m = random_mixture(seed, k, 0.22);
        let u = sample_haar_rotation(&mut rng_from_seed(seed));
        let p = render_profile(&m, &u, &grid, 0.0, 0).unwrap();
        if let Ok(d) = deconvolve_profile(&design, &p, p.total_intensity(), &DeconvolutionSettings::default()) {
            let once = d.estimate.clone();
            prop_assert_eq!(order_components(&once), once.clone());
            prop_assert!(once.weights.windows(2).all(|w| w[0] >= w[1]));
            let sum: f64 = once.weights.iter().sum();
            prop_assert!((sum - once.mass).abs() < 1e-9 * once.mass.max(1.0));
        }
    }
}

#[test]
fn seeded_renders_are_reproducible() {
    let grid = PixelGrid::new(16, 1.0).unwrap();
    let m = pyramid_fixture();
    let u = Rotation3::identity();
    let a = render_profile(&m, &u, &grid, 1e-3, 17).unwrap();
    let b = render_profile(&m, &u, &grid, 1e-3, 17).unwrap();
    assert_eq!(a.pixels, b.pixels);
    let c = render_profile(&m, &u, &grid, 1e-3, 18).unwrap();
    assert_ne!(a.pixels, c.pixels);
}
