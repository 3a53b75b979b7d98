use crate::error::Result;
use crate::raster::{gradients, to_grayscale, ImageRGB, ScalarField};

/// Smoothing constant of the robust norm.
pub const ROBUST_EPSILON: f64 = 1e-4;

/// Smooth approximation of `|x|`: `sqrt(x² + ε)`.
#[inline]
pub fn robust_norm(x: f64, epsilon: f64) -> f64 {
    (x * x + epsilon).sqrt()
}

/// Weight of the quadratic majorizer of [`robust_norm`] at `x`.
#[inline]
pub fn irls_weight(x: f64, epsilon: f64) -> f64 {
    1.0 / (2.0 * robust_norm(x, epsilon))
}

/// Logistic soft threshold `(1 + exp((x - midpoint) / slope))⁻¹`, decreasing in `x`.
#[inline]
pub fn soft_threshold(x: f64, midpoint: f64, slope: f64) -> f64 {
    let z = (x - midpoint) / slope;
    if z > 700.0 {
        0.0
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Edge-aware smoothness weights from forward luminance gradients.
pub fn smoothness_weights(img: &ImageRGB, midpoint: f64, slope: f64) -> Result<(ScalarField, ScalarField)> {
    let (gx, gy) = gradients(&to_grayscale(img))?;
    Ok((gx.map(|g| soft_threshold(g.abs(), midpoint, slope)), gy.map(|g| soft_threshold(g.abs(), midpoint, slope))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn robust_norm_values() {
        assert!((robust_norm(0.0, ROBUST_EPSILON) - 0.01).abs() < 1e-15);
        assert!((robust_norm(3.0, ROBUST_EPSILON) - 3.0000167).abs() < 1e-7);
        assert!((irls_weight(0.0, ROBUST_EPSILON) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_closed_forms() {
        assert!((soft_threshold(0.0, 0.05, 0.01) - 0.9933).abs() < 1e-4);
        assert!((soft_threshold(0.05, 0.05, 0.01) - 0.5).abs() < 1e-12);
        assert!((soft_threshold(0.1, 0.05, 0.01) - 0.0067).abs() < 1e-4);
        assert_eq!(soft_threshold(100.0, 0.05, 0.01), 0.0);
    }

    #[test]
    fn smoothness_weights_at_edges() {
        let flat = ImageRGB::filled(4, 4, [0.5; 3]);
        let (sx, sy) = smoothness_weights(&flat, 0.05, 0.01).unwrap();
        assert!(sx.data().iter().chain(sy.data()).all(|s| (s - 0.9933).abs() < 1e-4));

        for (step, expected) in [(0.05, 0.5), (0.1, 0.0067)] {
            let img = ImageRGB::from_fn(4, 2, |x, _| if x >= 2 { [0.2 + step; 3] } else { [0.2; 3] });
            let (sx, _) = smoothness_weights(&img, 0.05, 0.01).unwrap();
            assert!((sx.get(1, 0) - expected).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn robust_norm_is_even(x in -1e3f64..1e3) {
            prop_assert_eq!(robust_norm(x, ROBUST_EPSILON), robust_norm(-x, ROBUST_EPSILON));
        }

        #[test]
        fn soft_threshold_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (s_lo, s_hi) = (soft_threshold(lo, 0.05, 0.01), soft_threshold(hi, 0.05, 0.01));
            prop_assert!(s_hi <= s_lo);
            prop_assert!((0.0..1.0).contains(&s_hi));
        }
    }
}
