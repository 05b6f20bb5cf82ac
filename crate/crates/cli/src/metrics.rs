//! Image comparison metrics.

use puppetry_core::nn::FeatureMap;

/// Mean over pixels of the Euclidean RGB distance, divided by `sqrt(3)` so
/// that black against white scores 1.
pub fn mean_color_distance(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "images differ in shape");
    assert_eq!(a.channels, 3, "expected RGB images");
    let n = a.plane_len();
    let total: f64 = (0..n)
        .map(|p| {
            (0..3)
                .map(|c| {
                    let d = a.data[c * n + p] as f64 - b.data[c * n + p] as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / (n.max(1) as f64 * 3f64.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32) -> FeatureMap<f32> {
        FeatureMap::from_vec(3, 4, 5, vec![v; 60]).unwrap()
    }

    #[test]
    fn identical_images_score_zero() {
        let mut a = flat(0.3);
        a.data[7] = 0.9;
        assert_eq!(mean_color_distance(&a, &a), 0.0);
    }

    #[test]
    fn black_against_white_scores_one() {
        assert!((mean_color_distance(&flat(0.0), &flat(1.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_channel_offset_on_one_pixel() {
        let a = flat(0.5);
        let mut b = a.clone();
        b.data[0] += 0.25;
        let expect = 0.25 / (20.0 * 3f64.sqrt());
        assert!((mean_color_distance(&a, &b) - expect).abs() < 1e-9);
    }
}
