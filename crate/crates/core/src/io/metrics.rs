//! Image quality metrics.

use crate::error::{Error, Result};
use crate::fields::Grid;
use crate::real::Real;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<R, S>(a: &Grid<R>, b: &Grid<S>) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::Invalid(format!(
            "image shapes differ: {}×{}×{} vs {}×{}×{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse<R: Real, S: Real>(a: &Grid<R>, b: &Grid<S>) -> Result<f64> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Invalid("empty image".into()));
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for images in `[0,1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr<R: Real, S: Real>(a: &Grid<R>, b: &Grid<S>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// `41.85` style, or `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

/// Rec. 601 luma of an RGB image (or the single channel of a gray one).
pub fn luminance<R: Real>(img: &Grid<R>) -> Vec<f64> {
    match img.channels {
        1 => img.data.iter().map(|v| v.as_f64()).collect(),
        _ => img
            .data
            .chunks_exact(img.channels)
            .map(|p| 0.299 * p[0].as_f64() + 0.587 * p[1].as_f64() + 0.114 * p[2].as_f64())
            .collect(),
    }
}

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of a `w × h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for j in 0..h {
        for i in 0..ow {
            rows[j * ow + i] = (0..SSIM_WINDOW).map(|k| g[k] * x[j * w + i + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for j in 0..oh {
        for i in 0..ow {
            out[j * ow + i] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(j + k) * ow + i])
                .sum();
        }
    }
    out
}

/// Mean structural similarity on luminance: 11×11 Gaussian window with
/// σ = 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, valid positions only.
pub fn ssim<R: Real, S: Real>(a: &Grid<R>, b: &Grid<S>) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}"
        )));
    }
    let x = luminance(a);
    let y = luminance(b);
    let g = gaussian_1d();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, w, h, &g);
    let my = filter_valid(&y, w, h, &g);
    let sxx = filter_valid(&xx, w, h, &g);
    let syy = filter_valid(&yy, w, h, &g);
    let sxy = filter_valid(&xy, w, h, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_error_of_a_tenth_is_twenty_db() {
        let a = Grid::filled(8, 8, 3, 0.5f64);
        let b = Grid::filled(8, 8, 3, 0.6f64);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert_eq!(format_db(41.8512), "41.85");
    }

    #[test]
    fn shape_mismatch_and_small_images_are_errors() {
        let a = Grid::filled(8, 8, 3, 0.5f32);
        let b = Grid::filled(8, 9, 3, 0.5f32);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn constant_images_follow_the_closed_form() {
        let a = Grid::filled(16, 16, 1, 0.0f64);
        let b = Grid::filled(16, 16, 1, 1.0f64);
        let c1 = 1e-4;
        let want = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
