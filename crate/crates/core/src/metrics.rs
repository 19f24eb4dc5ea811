//! Image metrics: SSIM with the standard 11x11 Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03, unit dynamic range), averaged over
//! channels, plus plain L1.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Array2<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[y, x]] = v;
            total += v;
        }
    }
    w / total
}

/// Structural similarity between two same-shaped images in `[0, 1]`.
/// Windows are evaluated where they fit entirely (valid positions) and
/// the per-window index is averaged over positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(
            format!("{:?}", a.data.dim()),
            format!("{:?}", b.data.dim()),
            "ssim",
        ));
    }
    let (h, w, _) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} inputs, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (K1 * 1.0) * (K1 * 1.0);
    let c2 = (K2 * 1.0) * (K2 * 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let g = win[[wy, wx]];
                        mu_a += g * a.data[[oy + wy, ox + wx, ch]];
                        mu_b += g * b.data[[oy + wy, ox + wx, ch]];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let g = win[[wy, wx]];
                        let da = a.data[[oy + wy, ox + wx, ch]] - mu_a;
                        let db = b.data[[oy + wy, ox + wx, ch]] - mu_b;
                        var_a += g * da * da;
                        var_b += g * db * db;
                        cov += g * da * db;
                    }
                }
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean absolute difference.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(
            format!("{:?}", a.data.dim()),
            format!("{:?}", b.data.dim()),
            "l1",
        ));
    }
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            f(y, x, c).clamp(0.0, 1.0)
        }))
        .unwrap()
    }

    fn random_img(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = crate::autodiff::nn::seeded_rng(seed);
        img(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn ssim_self_is_one_and_symmetric() {
        let a = random_img(16, 16, 1);
        let b = random_img(16, 16, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_inverted_binary_image_scores_low() {
        // a binary image with no mid-gray: inversion is structurally
        // anti-correlated
        let a = img(16, 16, |y, x, _| ((x / 4 + y / 4) % 2) as f64);
        let b = img(16, 16, |y, x, _| 1.0 - ((x / 4 + y / 4) % 2) as f64);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.2, "inverted pattern should score low, got {s}");
    }

    /// Windowed loop oracle written independently of `ssim` internals.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (h, w, _) = a.data.dim();
        let half = 5.0;
        let mut weights = vec![];
        let mut wsum = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                let v =
                    (-(((x as f64 - half).powi(2) + (y as f64 - half).powi(2)) / (2.0 * 2.25)))
                        .exp();
                weights.push(v);
                wsum += v;
            }
        }
        for v in &mut weights {
            *v /= wsum;
        }
        let mut vals = vec![];
        for ch in 0..3 {
            for oy in 0..=(h - 11) {
                for ox in 0..=(w - 11) {
                    let mut ma = 0.0;
                    let mut mb = 0.0;
                    for y in 0..11 {
                        for x in 0..11 {
                            ma += weights[y * 11 + x] * a.data[[oy + y, ox + x, ch]];
                            mb += weights[y * 11 + x] * b.data[[oy + y, ox + x, ch]];
                        }
                    }
                    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                    for y in 0..11 {
                        for x in 0..11 {
                            let g = weights[y * 11 + x];
                            va += g * (a.data[[oy + y, ox + x, ch]] - ma).powi(2);
                            vb += g * (b.data[[oy + y, ox + x, ch]] - mb).powi(2);
                            cab += g
                                * (a.data[[oy + y, ox + x, ch]] - ma)
                                * (b.data[[oy + y, ox + x, ch]] - mb);
                        }
                    }
                    let c1 = 0.0001;
                    let c2 = 0.0009;
                    vals.push(
                        ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                    );
                }
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_windowed_loop_oracle() {
        for seed in 0..5u64 {
            let a = random_img(16, 16, 100 + seed);
            let b = random_img(16, 16, 200 + seed);
            let got = ssim(&a, &b).unwrap();
            let expect = ssim_oracle(&a, &b);
            assert!((got - expect).abs() < 1e-6, "seed {seed}: {got} vs {expect}");
        }
    }

    #[test]
    fn ssim_rejects_shape_mismatch_and_tiny_inputs() {
        let a = random_img(16, 16, 1);
        let b = random_img(12, 16, 1);
        assert!(ssim(&a, &b).is_err());
        let tiny = random_img(8, 8, 1);
        assert!(ssim(&tiny, &tiny).is_err());
    }
}
