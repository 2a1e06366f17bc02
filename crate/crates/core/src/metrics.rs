//! Image-quality metrics for held-out views.

use crate::error::{Error, Result};
use crate::raster::ColorImage;

pub const PSNR_CAP: f64 = 100.0;

fn check(a: &ColorImage, b: &ColorImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check(a, b)?;
    let n = (a.data.len() * 3) as f64;
    let mse = a.data.iter().zip(&b.data).flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).powi(2))).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

/// Mean structural similarity over channels with an 11×11 Gaussian window (σ = 1.5).
///
/// Windows are clipped at the border and their weights renormalized.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check(a, b)?;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let half = (WINDOW / 2) as isize;
    let kernel: Vec<f64> = (-half..=half).map(|d| (-(d * d) as f64 / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let (w, h) = (a.width as isize, a.height as isize);
    let mut total = 0.0;
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -half..=half {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let k = kernel[(dy + half) as usize] * kernel[(dx + half) as usize];
                        let (p, q) = (a.get(xx as usize, yy as usize)[ch], b.get(xx as usize, yy as usize)[ch]);
                        sw += k;
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (ma, mb) = (ma / sw, mb / sw);
                let va = saa / sw - ma * ma;
                let vb = sbb / sw - mb * mb;
                let cov = sab / sw - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (3 * a.data.len()) as f64)
}
