//! Image quality metrics on `[0, 1]` images.

use ndarray::Array2;

use crate::error::{HoloError, Result};

pub const PSNR_CAP: f64 = 100.0;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(HoloError::dim(format!("images are {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(HoloError::Empty("empty image".into()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5),
/// with `C1 = 0.01^2`, `C2 = 0.03^2`. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (m, n) = a.dim();
    let mut size = 11.min(m).min(n);
    if size % 2 == 0 {
        size -= 1;
    }
    let w = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=(m - size) {
        for j in 0..=(n - size) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, wu) in w.iter().enumerate() {
                for (v, wv) in w.iter().enumerate() {
                    let k = wu * wv;
                    let (x, y) = (a[(i + u, j + v)], b[(i + u, j + v)]);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
