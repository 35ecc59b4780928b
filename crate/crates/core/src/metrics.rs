//! Image quality metrics on `[0, 1]` images: PSNR and SSIM.

use crate::error::{contract, Result};
use crate::nn::chw_dims;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mse: length mismatch");
    pred.iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64
}

/// `10·log₁₀(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> f64 {
    let e = mse(pred, target);
    if e == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB)
}

/// Grayscale plane of a `3×H×W` (BT.601) or `1×H×W` image.
pub fn luma(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = chw_dims(img)?;
    let d = img.data();
    let n = h * w;
    match c {
        1 => Ok((d.to_vec(), h, w)),
        3 => Ok((
            (0..n)
                .map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i])
                .collect(),
            h,
            w,
        )),
        _ => Err(contract(format!("luma: expected 1 or 3 channels, got {c}"))),
    }
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * wo + x])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimComponents {
    pub ssim: f64,
    /// Mean of `(2μₓμᵧ + C₁)/(μₓ² + μᵧ² + C₁)`.
    pub luminance: f64,
    /// Mean of `(2σₓᵧ + C₂)/(σₓ² + σᵧ² + C₂)`.
    pub contrast_structure: f64,
}

pub fn ssim_components(pred: &Tensor, target: &Tensor) -> Result<SsimComponents> {
    if pred.shape() != target.shape() {
        return Err(contract(format!(
            "ssim: shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let (x, h, w) = luma(pred)?;
    let (y, _, _) = luma(target)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract(format!(
            "ssim: {h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let product = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&product(&x, &x), h, w, &taps);
    let yy = filter_valid(&product(&y, &y), h, w, &taps);
    let xy = filter_valid(&product(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len() as f64;
    let (mut s, mut l, mut cs) = (0.0, 0.0, 0.0);
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let con = (2.0 * cov + c2) / (vx + vy + c2);
        s += lum * con;
        l += lum;
        cs += con;
    }
    Ok(SsimComponents {
        ssim: s / n,
        luminance: l / n,
        contrast_structure: cs / n,
    })
}

/// Mean local SSIM over all valid 11×11 Gaussian window positions.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(ssim_components(pred, target)?.ssim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::uniform01;

    #[test]
    fn psnr_closed_form() {
        let target = vec![0.5; 100];
        let pred = vec![0.51; 100];
        let got = psnr(&pred, &target, 1.0);
        assert!((mse(&pred, &target) - 1e-4).abs() < 1e-15);
        assert!((got - 40.0).abs() < 1e-9, "{got}");
        assert_eq!(psnr(&target, &target, 1.0), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let a = uniform01(&[3, 8, 8], 1).to_vec();
        let b = uniform01(&[3, 8, 8], 2).to_vec();
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let sq: f64 = diffs.iter().map(|d| d * d).sum();
        let want = 10.0 * (1.0 / (sq / diffs.len() as f64)).log10();
        assert!((psnr(&a, &b, 1.0) - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = uniform01(&[1, 16, 16], 3).to_vec();
        let noise = uniform01(&[1, 16, 16], 4).to_vec();
        let scores: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|amp| {
                let noisy: Vec<f64> = base
                    .iter()
                    .zip(&noise)
                    .map(|(b, n)| b + amp * (n - 0.5))
                    .collect();
                psnr(&noisy, &base, 1.0)
            })
            .collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
    }

    #[test]
    fn identical_images_score_one() {
        let a = uniform01(&[3, 16, 16], 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_only_changes_luminance() {
        let a = Tensor::full(&[1, 16, 16], 0.2);
        let b = Tensor::full(&[1, 16, 16], 0.7);
        let c = ssim_components(&b, &a).unwrap();
        assert!(c.luminance < 1.0);
        assert!((c.contrast_structure - 1.0).abs() < 1e-12);
        let c1 = SSIM_K1 * SSIM_K1;
        let want = (2.0 * 0.2 * 0.7 + c1) / (0.04 + 0.49 + c1);
        assert!((c.ssim - want).abs() < 1e-12);
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Tensor::zeros(&[1, 10, 32]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = uniform01(&[3, 16, 20], 6);
        let b = uniform01(&[3, 16, 20], 7);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    /// Direct sliding-window SSIM with two-pass moments.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (x, h, w) = luma(a).unwrap();
        let (y, _, _) = luma(b).unwrap();
        let k = SSIM_WINDOW;
        let c = (k as f64 - 1.0) / 2.0;
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                g[i * k + j] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let total: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= total);
        let (c1, c2) = ((SSIM_K1 * 1.0f64).powi(2), (SSIM_K2 * 1.0f64).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let at = |p: &[f64], i: usize, j: usize| p[(oy + i) * w + ox + j];
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += g[i * k + j] * at(&x, i, j);
                        my += g[i * k + j] * at(&y, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (dx, dy) = (at(&x, i, j) - mx, at(&y, i, j) - my);
                        vx += g[i * k + j] * dx * dx;
                        vy += g[i * k + j] * dy * dy;
                        cov += g[i * k + j] * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn matches_sliding_window_oracle() {
        for seed in 0..5 {
            let a = uniform01(&[3, 32, 32], 10 + seed);
            let b = uniform01(&[3, 32, 32], 20 + seed);
            let got = ssim(&a, &b).unwrap();
            assert!((got - ssim_oracle(&a, &b)).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&got));
        }
    }
}
