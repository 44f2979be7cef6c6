//! PNG input and output.
//!
//! Encoded pixel values `v` in `[0, 1]` are linearized as intensity
//! `v^2.2`; amplitudes are the square root of that.

use std::f64::consts::TAU;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{HoloError, Result};
use crate::propagation::wrap_phase;

pub const GAMMA: f64 = 2.2;

/// Which channel of a color image becomes the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Red,
    Green,
    Blue,
    Luma,
}

fn read_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => {
            HoloError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => HoloError::Target(format!("{}: {other}", path.display())),
    })
}

/// `(height, width)` of an image file.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| match e {
        image::ImageError::IoError(io) => {
            HoloError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => HoloError::Target(format!("{}: {other}", path.display())),
    })?;
    Ok((h as usize, w as usize))
}

/// Encoded values in `[0, 1]` of one channel, bilinearly resized to `shape`
/// when the file has a different size.
pub fn load_encoded(path: &Path, channel: Channel, shape: (usize, usize)) -> Result<Array2<f64>> {
    let img = read_image(path)?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let plane = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        let p = rgb.get_pixel(j as u32, i as u32).0;
        let v = match channel {
            Channel::Red => p[0],
            Channel::Green => p[1],
            Channel::Blue => p[2],
            Channel::Luma => 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2],
        };
        (v as f64).clamp(0.0, 1.0)
    });
    Ok(if plane.dim() == shape { plane } else { resize(&plane, shape) })
}

/// Amplitude target from an image file.
pub fn load_amplitude(path: &Path, channel: Channel, shape: (usize, usize)) -> Result<Array2<f64>> {
    Ok(load_encoded(path, channel, shape)?.mapv(encoded_to_amplitude))
}

pub fn encoded_to_amplitude(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(GAMMA / 2.0)
}

pub fn amplitude_to_encoded(a: f64) -> f64 {
    a.clamp(0.0, 1.0).powf(2.0 / GAMMA)
}

/// Bilinear resampling with pixel centers aligned.
pub fn resize(a: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (m, n) = a.dim();
    let sy = m as f64 / shape.0 as f64;
    let sx = n as f64 / shape.1 as f64;
    Array2::from_shape_fn(shape, |(i, j)| {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (m - 1) as f64);
        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (n - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(m - 1), (x0 + 1).min(n - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        a[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
            + a[(y1, x0)] * fy * (1.0 - fx)
            + a[(y0, x1)] * (1.0 - fy) * fx
            + a[(y1, x1)] * fy * fx
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => {
            HoloError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => HoloError::Image(other),
    })
}

/// 8-bit grayscale PNG of an amplitude image, gamma encoded.
pub fn save_amplitude_png(a: &Array2<f64>, path: &Path) -> Result<()> {
    let (m, n) = a.dim();
    let img = GrayImage::from_fn(n as u32, m as u32, |x, y| {
        Luma([to_u8(amplitude_to_encoded(a[(y as usize, x as usize)]))])
    });
    save(DynamicImage::ImageLuma8(img), path)
}

/// 16-bit grayscale PNG of wrapped phase, `[0, 2 pi)` onto `[0, 65535]`.
pub fn save_phase_png(phase: &Array2<f64>, path: &Path) -> Result<()> {
    let (m, n) = phase.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(n as u32, m as u32, |x, y| {
        let w = wrap_phase(phase[(y as usize, x as usize)]) / TAU;
        Luma([((w * 65536.0).round() as u32 % 65536) as u16])
    });
    save(DynamicImage::ImageLuma16(img), path)
}

/// Reads a phase PNG written by [`save_phase_png`].
pub fn load_phase_png(path: &Path) -> Result<Array2<f64>> {
    let img = read_image(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 65536.0 * TAU
    }))
}

/// A perceptually ordered dark-blue to yellow ramp.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.231, 0.322, 0.546],
        [0.129, 0.569, 0.549],
        [0.369, 0.788, 0.384],
        [0.993, 0.906, 0.144],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let c = |i: usize| to_u8(STOPS[k][i] * (1.0 - f) + STOPS[k + 1][i] * f);
    [c(0), c(1), c(2)]
}

/// Heatmap of `values[row][col]` with `cell` pixel squares, colored on the
/// fixed range `[lo, hi]`. Non-finite cells are drawn black.
pub fn heatmap(values: &Array2<f64>, lo: f64, hi: f64, cell: u32) -> Result<RgbImage> {
    if values.is_empty() || cell == 0 {
        return Err(HoloError::Empty("heatmap needs cells".into()));
    }
    let (m, n) = values.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(RgbImage::from_fn(n as u32 * cell, m as u32 * cell, |x, y| {
        let v = values[((y / cell) as usize, (x / cell) as usize)];
        if v.is_finite() {
            Rgb(colormap((v - lo) / span))
        } else {
            Rgb([0, 0, 0])
        }
    }))
}

pub fn save_heatmap(values: &Array2<f64>, lo: f64, hi: f64, path: &Path) -> Result<()> {
    save(DynamicImage::ImageRgb8(heatmap(values, lo, hi, 16)?), path)
}
