//! PSNR and SSIM on `[0, 1]` images.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10 log10(max² / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor4, b: &Tensor4, max_val: f64) -> Result<f64> {
    a.same_dims(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::arg("psnr", "empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn grayscale(t: &Tensor4, b: usize) -> Vec<f64> {
    let [_, c, h, w] = t.dims();
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &t.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
        for (d, &v) in g.iter_mut().zip(plane) {
            *d += v;
        }
    }
    for v in &mut g {
        *v /= c as f64;
    }
    g
}

/// Mean SSIM over every 8x8 window (stride 1, uniform weights, population
/// statistics) of the channel-mean grayscale, averaged over the batch.
/// The window shrinks to the image side for images smaller than 8 pixels.
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    a.same_dims(b, "ssim")?;
    let [bn, _, h, w] = a.dims();
    if a.is_empty() {
        return Err(Error::arg("ssim", "empty image"));
    }
    let win = SSIM_WINDOW.min(h).min(w);
    let n = (win * win) as f64;
    let mut total = 0.0;
    for bi in 0..bn {
        let x = grayscale(a, bi);
        let y = grayscale(b, bi);
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=h - win {
            for ox in 0..=w - win {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for yy in oy..oy + win {
                    for xx in ox..ox + win {
                        let (p, q) = (x[yy * w + xx], y[yy * w + xx]);
                        sx += p;
                        sy += q;
                        sxx += p * p;
                        syy += q * q;
                        sxy += p * q;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / bn as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// `image_id,psnr,ssim` CSV.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "image_id,psnr,ssim")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.image_id, r.psnr, r.ssim)?;
    }
    Ok(())
}

/// Mean of finite values; `None` when there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = Tensor4::zeros([1, 3, 4, 4]);
        let b = Tensor4::full([1, 3, 4, 4], 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(matches!(psnr(&a, &Tensor4::zeros([1, 3, 4, 2]), 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = Tensor4::from_fn([1, 3, 12, 10], |[_, c, y, x]| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 11.0);
        let b = Tensor4::from_fn([1, 3, 12, 10], |[_, c, y, x]| ((c + y * x) % 13) as f64 / 13.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn finite_mean_skips_infinity() {
        assert_eq!(finite_mean([1.0, f64::INFINITY, 3.0]), Some(2.0));
        assert_eq!(finite_mean([f64::INFINITY]), None);
    }
}
