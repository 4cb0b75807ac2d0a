//! Image metrics against independent references.

use anr_core::metrics::{feature_distance, frame_metrics, ssim};
use anr_core::nn::params::seeded_rng;
use anr_core::Tensor;
use rand::Rng;

/// Straightforward SSIM: for every valid 11×11 window, weighted mean,
/// variance and covariance computed directly from the 2D Gaussian.
fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[2], a.shape()[3]);
    let luma = |t: &Tensor, y: usize, x: usize| {
        let d = t.data();
        let p = h * w;
        let i = y * w + x;
        let rgb = [d[i], d[p + i], d[2 * p + i]].map(|v| (v + 1.0) / 2.0);
        0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    };
    let mut kernel = [[0.0; 11]; 11];
    let mut s = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / 4.5).exp();
            s += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut n = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let mut acc = [0.0; 2];
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / s;
                    acc[0] += k * luma(a, y0 + i, x0 + j);
                    acc[1] += k * luma(b, y0 + i, x0 + j);
                }
            }
            let (ma, mb) = (acc[0], acc[1]);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / s;
                    let da = luma(a, y0 + i, x0 + j) - ma;
                    let db = luma(b, y0 + i, x0 + j) - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    total / n as f64
}

fn noise_image(seed: u64, amp: f64, base: &Tensor) -> Tensor {
    let mut rng = seeded_rng(seed, 5);
    let data = base.data().iter().map(|v| (v + rng.random_range(-amp..=amp)).clamp(-1.0, 1.0)).collect();
    Tensor::from_vec(base.shape(), data).unwrap()
}

fn smooth_image(h: usize, w: usize) -> Tensor {
    let mut v = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                v.push(0.6 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos()));
            }
        }
    }
    Tensor::from_vec(&[1, 3, h, w], v).unwrap()
}

#[test]
fn constant_images_match_the_reference_and_closed_form() {
    let a = Tensor::full(&[1, 3, 16, 16], 0.2);
    let b = Tensor::full(&[1, 3, 16, 16], 0.3);
    let got = ssim(&a, &b).unwrap();
    assert!((got - reference_ssim(&a, &b)).abs() < 1e-6);
    // Flat windows: only the luminance term survives.
    let (ya, yb) = (0.6, 0.65);
    let closed = (2.0 * ya * yb + 1e-4) / (ya * ya + yb * yb + 1e-4);
    assert!((got - closed).abs() < 1e-9, "{got} vs {closed}");
}

#[test]
fn textured_images_match_the_reference() {
    let base = smooth_image(24, 20);
    for seed in 0..3 {
        let other = noise_image(seed, 0.3, &base);
        let got = ssim(&base, &other).unwrap();
        let want = reference_ssim(&base, &other);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got < 1.0);
    }
}

#[test]
fn feature_distance_grows_with_noise() {
    let base = smooth_image(32, 32);
    let med = |amp: f64| {
        let mut v: Vec<f64> = (0..5)
            .map(|s| feature_distance(&base, &noise_image(s, amp, &base)).unwrap())
            .collect();
        v.sort_by(f64::total_cmp);
        v[2]
    };
    let (lo, hi) = (med(0.05), med(0.2));
    assert!(0.0 < lo && lo < hi, "{lo} vs {hi}");
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let img = smooth_image(32, 32);
    let mut mask = Tensor::zeros(&[1, 1, 32, 32]);
    for y in 8..24 {
        for x in 4..28 {
            mask.data_mut()[y * 32 + x] = 1.0;
        }
    }
    let coverage: Vec<u8> = (0..32 * 32).map(|i| u8::from(i % 32 < 20)).collect();
    let m = frame_metrics(0, &img, &mask, &img, &mask, &coverage).unwrap();
    assert!((m.ssim - 1.0).abs() < 1e-9);
    assert_eq!(m.feature_distance, 0.0);
    assert_eq!(m.masked_l1, 0.0);
    assert_eq!(m.mask_iou, 1.0);
    assert_eq!(m.band_intersection, m.band_union);
    assert_eq!(m.band_union, 16 * 8);
}
