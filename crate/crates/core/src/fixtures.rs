//! Reference values for the four-component pyramid.
//!
//! Component order in the matrices is by descending true weight: apex
//! (0.35), then (0.7, −0.4, −0.3) with 0.26, (−0.7, −0.4, −0.3) with 0.21 and
//! (0, 0.8, −0.3) with 0.18. The weight tables are in ascending order.

use nalgebra::{DMatrix, Matrix3xX};

use crate::geometry::GramMatrix;

/// Reference Gram matrix of the centered pyramid ensemble (3 decimals).
pub fn reference_gram() -> GramMatrix {
    GramMatrix::from_matrix_unchecked(DMatrix::from_row_slice(
        4,
        4,
        &[
            0.681, -0.227, -0.227, -0.227, //
            -0.227, 0.726, -0.254, -0.244, //
            -0.227, -0.254, 0.726, -0.244, //
            -0.227, -0.244, -0.244, 0.716,
        ],
    ))
}

/// Reference Gram estimate from the 53 usable simulated profiles.
pub fn reference_gram_estimate() -> GramMatrix {
    GramMatrix::from_matrix_unchecked(DMatrix::from_row_slice(
        4,
        4,
        &[
            0.696, -0.176, -0.279, -0.241, //
            -0.176, 0.660, -0.247, -0.237, //
            -0.279, -0.247, 0.736, -0.209, //
            -0.241, -0.237, -0.209, 0.687,
        ],
    ))
}

/// Reference echelon-form factor of [`reference_gram`].
pub fn reference_means() -> Matrix3xX<f64> {
    Matrix3xX::from_row_slice(&[
        0.825, -0.275, -0.275, -0.275, //
        0.000, 0.806, -0.409, -0.397, //
        0.000, 0.000, 0.695, -0.695,
    ])
}

/// Reference echelon-form factor of [`reference_gram_estimate`].
pub fn reference_means_estimate() -> Matrix3xX<f64> {
    Matrix3xX::from_row_slice(&[
        0.834, -0.211, -0.335, -0.289, //
        0.000, 0.784, -0.405, -0.380, //
        0.000, 0.000, 0.678, -0.678,
    ])
}

/// True weights as tabulated (ascending).
pub const TABLE_TRUE_WEIGHTS: [f64; 4] = [0.180, 0.210, 0.260, 0.350];

/// Estimated weights as tabulated (same columns as [`TABLE_TRUE_WEIGHTS`]).
pub const TABLE_ESTIMATED_WEIGHTS: [f64; 4] = [0.170, 0.210, 0.263, 0.357];

/// Profiles out of 150 that showed four usable clusters.
pub const USABLE_PROFILES: (usize, usize) = (53, 150);

/// Kernel variance reported for the real-data case; reference only.
pub const REAL_DATA_SIGMA2: f64 = 0.0571;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gram;
    use crate::mixture::pyramid_fixture;
    use approx::assert_relative_eq;

    #[test]
    fn reference_gram_matches_fixture_to_rounding() {
        let m = pyramid_fixture();
        let order = [3, 1, 2, 0];
        let g = m.means().centered().gram().permuted(&order);
        assert!((g.matrix() - reference_gram().matrix()).amax() < 6e-4);
    }

    #[test]
    fn reference_factors_match_reference_grams() {
        let g = gram(&reference_means());
        assert!((g.matrix() - reference_gram().matrix()).amax() < 2e-3);
        let gh = gram(&reference_means_estimate());
        assert!((gh.matrix() - reference_gram_estimate().matrix()).amax() < 2e-3);
    }

    #[test]
    fn table_difference() {
        let d: f64 = TABLE_TRUE_WEIGHTS.iter().zip(TABLE_ESTIMATED_WEIGHTS).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert_relative_eq!(d, 0.010, epsilon = 1e-12);
    }
}
