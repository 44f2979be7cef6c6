//! Procedural targets: amplitude images, a two-plane focal stack and a
//! layered light field.

use std::f64::consts::TAU;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{HoloError, Result};
use crate::supervision::StftSpec;

pub const IMAGE_NAMES: [&str; 5] = ["rings", "blobs", "bars", "checker", "clouds"];

/// Separable Gaussian blur with zero padding outside the image.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / ks).collect();
    let (m, n) = img.dim();
    let pass = |src: &Array2<f64>, vertical: bool| {
        Array2::from_shape_fn((m, n), |(i, j)| {
            let mut acc = 0.0;
            for (o, w) in (-r..=r).zip(&k) {
                let (y, x) = if vertical { (i as i64 + o, j as i64) } else { (i as i64, j as i64 + o) };
                if y >= 0 && x >= 0 && (y as usize) < m && (x as usize) < n {
                    acc += w * src[(y as usize, x as usize)];
                }
            }
            acc
        })
    };
    pass(&pass(img, false), true)
}

fn normalize(mut a: Array2<f64>, lo: f64, hi: f64) -> Array2<f64> {
    let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    a.mapv_inplace(|v| lo + (hi - lo) * (v - min) / span);
    a
}

fn smooth_noise(shape: (usize, usize), sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let white = Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    gaussian_blur(&white, sigma)
}

/// One of [`IMAGE_NAMES`] as an amplitude image in `[0, 1]`.
pub fn image(name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
    let (m, n) = shape;
    let (cy, cx) = (m as f64 / 2.0, n as f64 / 2.0);
    let scale = m.min(n) as f64;
    let img = match name {
        "rings" => Array2::from_shape_fn(shape, |(i, j)| {
            let r = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt() / scale;
            0.5 + 0.5 * (TAU * 4.0 * r).cos() * (-(r * r) * 4.0).exp()
        }),
        "blobs" => {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..7)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85) * m as f64,
                        rng.random_range(0.15..0.85) * n as f64,
                        rng.random_range(0.05..0.14) * scale,
                        rng.random_range(0.4..1.0),
                    )
                })
                .collect();
            let raw = Array2::from_shape_fn(shape, |(i, j)| {
                blobs
                    .iter()
                    .map(|(y, x, s, a)| a * (-((i as f64 - y).powi(2) + (j as f64 - x).powi(2)) / (2.0 * s * s)).exp())
                    .sum::<f64>()
            });
            normalize(raw, 0.05, 1.0)
        }
        "bars" => Array2::from_shape_fn(shape, |(i, j)| {
            let period = (n as f64 / 6.0).max(2.0);
            let stripe = if ((j as f64 / period).floor() as i64) % 2 == 0 { 0.9 } else { 0.2 };
            let ramp = 0.6 + 0.4 * i as f64 / m as f64;
            stripe * ramp
        }),
        "checker" => {
            let raw = Array2::from_shape_fn(shape, |(i, j)| {
                let c = ((i * 4 / m) + (j * 4 / n)) % 2;
                if c == 0 { 1.0 } else { 0.15 }
            });
            gaussian_blur(&raw, scale / 64.0)
        }
        "clouds" => {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            normalize(smooth_noise(shape, scale / 16.0, &mut rng), 0.0, 1.0)
        }
        other => {
            return Err(HoloError::Target(format!(
                "unknown builtin image `{other}` (known: {})",
                IMAGE_NAMES.join(", ")
            )))
        }
    };
    Ok(img.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Two-plane scene: a foreground object over a background, each sharp at its
/// own plane and Gaussian-blurred at the other. Returns amplitude planes.
pub fn two_plane_focal_stack(shape: (usize, usize), defocus_sigma: f64) -> Result<Vec<Array2<f64>>> {
    let (m, n) = shape;
    let fg = image("rings", shape)?;
    let bg = image("bars", shape)?;
    // foreground occupies a central disc
    let mask = Array2::from_shape_fn(shape, |(i, j)| {
        let r = ((i as f64 - m as f64 / 2.0).powi(2) + (j as f64 - n as f64 / 2.0).powi(2)).sqrt();
        if r < 0.3 * m.min(n) as f64 { 1.0 } else { 0.0 }
    });
    let fg_i = (&fg * &fg) * &mask;
    let bg_i = (&bg * &bg) * &mask.mapv(|v| 1.0 - v);
    let near = &fg_i + &gaussian_blur(&bg_i, defocus_sigma);
    let far = &gaussian_blur(&fg_i, defocus_sigma) + &bg_i;
    Ok(vec![near.mapv(f64::sqrt), far.mapv(f64::sqrt)])
}

/// Layered light field in `[py, px, vy, vx]` layout matching an STFT of the
/// given spec on `shape`. Two layers with opposite disparity; views are
/// amplitudes in `[0, 1]`.
pub fn layered_light_field(shape: (usize, usize), stft: &StftSpec, disparity: f64) -> Result<Array4<f64>> {
    let layout = stft.layout(shape)?;
    let (py, px, w) = (layout.patches_y, layout.patches_x, layout.w);
    let sample = |img: &Array2<f64>, y: f64, x: f64| -> f64 {
        let (m, n) = img.dim();
        let yy = y.clamp(0.0, (m - 1) as f64);
        let xx = x.clamp(0.0, (n - 1) as f64);
        let (y0, x0) = (yy.floor() as usize, xx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(m - 1), (x0 + 1).min(n - 1));
        let (fy, fx) = (yy - y0 as f64, xx - x0 as f64);
        img[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
            + img[(y1, x0)] * fy * (1.0 - fx)
            + img[(y0, x1)] * (1.0 - fy) * fx
            + img[(y1, x1)] * fy * fx
    };
    let front = image("blobs", (py, px))?;
    let back = image("checker", (py, px))?;
    let c = (w as f64 - 1.0) / 2.0;
    // angular falloff keeps the outer views dimmer, like a finite aperture
    let aperture = |v: f64| (-(v - c).powi(2) / (2.0 * (w as f64 / 3.0).powi(2))).exp();
    let mut out = Array4::zeros((py, px, w, w));
    for vy in 0..w {
        for vx in 0..w {
            let (dy, dx) = (vy as f64 - c, vx as f64 - c);
            let ap = aperture(vy as f64) * aperture(vx as f64);
            for i in 0..py {
                for j in 0..px {
                    let f = sample(&front, i as f64 + disparity * dy, j as f64 + disparity * dx);
                    let b = sample(&back, i as f64 - disparity * dy, j as f64 - disparity * dx);
                    // front layer occludes where it is bright
                    let alpha = (f * 1.5).min(1.0);
                    out[(i, j, vy, vx)] = ap * (alpha * f + (1.0 - alpha) * b);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_distinct() {
        let imgs: Vec<_> = IMAGE_NAMES.iter().map(|n| image(n, (64, 64)).unwrap()).collect();
        for im in &imgs {
            assert!(im.iter().all(|v| (0.0..=1.0).contains(v)));
            let spread = im.iter().cloned().fold(f64::MIN, f64::max) - im.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread > 0.3);
        }
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
        assert!(image("nope", (8, 8)).is_err());
    }

    #[test]
    fn blur_preserves_mass_in_interior() {
        let mut a = Array2::zeros((31, 31));
        a[(15, 15)] = 1.0;
        let b = gaussian_blur(&a, 2.0);
        assert!((b.sum() - 1.0).abs() < 1e-9);
        assert!(b[(15, 15)] < 0.1);
    }

    #[test]
    fn focal_stack_and_light_field_shapes() {
        let fs = two_plane_focal_stack((32, 32), 2.0).unwrap();
        assert_eq!(fs.len(), 2);
        assert_ne!(fs[0], fs[1]);
        let lf = layered_light_field((64, 64), &StftSpec::default(), 0.5).unwrap();
        assert_eq!(lf.dim(), (8, 8, 8, 8));
        assert!(lf.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
