//! Sampled complex wavefields, grid geometry, and the centered FFT contract.
//!
//! Both transform directions carry a `1/sqrt(M N)` factor, so they are
//! unitary and Parseval holds with constant 1. "Centered" means the
//! zero-frequency bin sits at index `(M/2, N/2)` (integer division) of the
//! spectrum; the spatial origin stays at index `(0, 0)`.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HoloError, Result};
use crate::fft;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Meters per pixel.
    pub pitch: f64,
    /// Meters.
    pub wavelength: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, pitch: f64, wavelength: f64) -> Result<Self> {
        let g = GridSpec {
            height,
            width,
            pitch,
            wavelength,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(HoloError::InvalidGrid(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(HoloError::InvalidGrid(format!("pitch must be > 0, got {}", self.pitch)));
        }
        if !(self.wavelength.is_finite() && self.wavelength > 0.0) {
            return Err(HoloError::InvalidGrid(format!(
                "wavelength must be > 0, got {}",
                self.wavelength
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stable byte encoding used for cache keys.
    pub(crate) fn key_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32);
        b.extend_from_slice(&(self.height as u64).to_le_bytes());
        b.extend_from_slice(&(self.width as u64).to_le_bytes());
        b.extend_from_slice(&self.pitch.to_bits().to_le_bytes());
        b.extend_from_slice(&self.wavelength.to_bits().to_le_bytes());
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: GridSpec,
    values: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(grid: GridSpec, values: Array2<Complex64>) -> Result<Self> {
        grid.validate()?;
        if values.dim() != grid.shape() {
            return Err(HoloError::dim(format!(
                "values are {:?}, grid is {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(HoloError::InvalidField("non-finite sample".into()));
        }
        Ok(ComplexField { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        ComplexField {
            values: Array2::zeros(grid.shape()),
            grid,
        }
    }

    /// `e^{i phase}` per pixel.
    pub fn from_phase(grid: GridSpec, phase: &Array2<f64>) -> Result<Self> {
        Self::new(grid, phase.mapv(|p| Complex64::from_polar(1.0, p)))
    }

    pub(crate) fn from_parts_unchecked(grid: GridSpec, values: Array2<Complex64>) -> Self {
        debug_assert_eq!(values.dim(), grid.shape());
        ComplexField { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<Complex64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.values[(row, col)]
    }

    pub fn amplitude(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm())
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm_sqr())
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn scale(&self, c: Complex64) -> Self {
        ComplexField {
            grid: self.grid,
            values: self.values.mapv(|v| v * c),
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(HoloError::InvalidField("non-finite sample".into()));
        }
        Ok(())
    }
}

/// T frames sharing one grid, T >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack<F> {
    frames: Vec<F>,
}

pub type PhaseStack = FrameStack<Array2<f64>>;
pub type FieldStack = FrameStack<ComplexField>;

pub trait Framed {
    fn frame_shape(&self) -> (usize, usize);
}

impl Framed for Array2<f64> {
    fn frame_shape(&self) -> (usize, usize) {
        self.dim()
    }
}

impl Framed for Array2<u16> {
    fn frame_shape(&self) -> (usize, usize) {
        self.dim()
    }
}

impl Framed for ComplexField {
    fn frame_shape(&self) -> (usize, usize) {
        self.grid.shape()
    }
}

impl<F: Framed> FrameStack<F> {
    pub fn new(frames: Vec<F>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| HoloError::Empty("frame stack needs at least one frame".into()))?
            .frame_shape();
        if let Some(bad) = frames.iter().find(|f| f.frame_shape() != first) {
            return Err(HoloError::dim(format!(
                "frame of shape {:?} in a stack of {:?}",
                bad.frame_shape(),
                first
            )));
        }
        Ok(FrameStack { frames })
    }

    pub fn count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[F] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [F] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<F> {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].frame_shape()
    }
}

impl FieldStack {
    pub fn grid(&self) -> &GridSpec {
        self.frames[0].grid()
    }
}

/// Centered, orthonormal 2D DFT.
pub fn fft2_centered(field: &ComplexField) -> Result<ComplexField> {
    field.check_finite()?;
    let spec = fft::fftshift(&fft::fft2_raw(field.values.clone()));
    Ok(ComplexField::from_parts_unchecked(field.grid, spec))
}

/// Inverse of [`fft2_centered`].
pub fn ifft2_centered(field: &ComplexField) -> Result<ComplexField> {
    field.check_finite()?;
    let vals = fft::ifft2_raw(fft::ifftshift(&field.values));
    Ok(ComplexField::from_parts_unchecked(field.grid, vals))
}

/// Spatial frequencies (cycles/m) for every bin of the centered spectrum.
///
/// Bin `i` along an axis of length `n` has offset `k = i - n/2` and frequency
/// `k / (n * pitch)`.
pub fn frequency_grid(grid: &GridSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    grid.validate()?;
    let (m, n) = grid.shape();
    let fy_step = 1.0 / (m as f64 * grid.pitch);
    let fx_step = 1.0 / (n as f64 * grid.pitch);
    let fx = Array2::from_shape_fn((m, n), |(_, j)| (j as f64 - (n / 2) as f64) * fx_step);
    let fy = Array2::from_shape_fn((m, n), |(i, _)| (i as f64 - (m / 2) as f64) * fy_step);
    Ok((fx, fy))
}

/// `sqrt((1/T) sum_t |u_t|^2)` per pixel.
///
/// The per-pixel sum is taken in sorted order, so the result does not depend
/// on the order of the frames.
pub fn intensity_average(frames: &[ComplexField]) -> Result<Array2<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| HoloError::Empty("intensity_average needs at least one frame".into()))?;
    let shape = first.grid.shape();
    if frames.iter().any(|f| f.grid.shape() != shape) {
        return Err(HoloError::dim("frames with different shapes".to_string()));
    }
    let maps: Vec<Array2<f64>> = frames.iter().map(|f| f.intensity()).collect();
    Ok(frame_mean(&maps).mapv(f64::sqrt))
}

/// Per-pixel mean over equally shaped maps, summed in sorted order.
pub(crate) fn frame_mean(maps: &[Array2<f64>]) -> Array2<f64> {
    let shape = maps[0].dim();
    let inv_t = 1.0 / maps.len() as f64;
    if maps.len() == 1 {
        return maps[0].clone();
    }
    let mut buf = vec![0.0; maps.len()];
    Array2::from_shape_fn(shape, |ix| {
        for (b, m) in buf.iter_mut().zip(maps) {
            *b = m[ix];
        }
        buf.sort_unstable_by(f64::total_cmp);
        buf.iter().sum::<f64>() * inv_t
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(m: usize, n: usize) -> GridSpec {
        GridSpec::new(m, n, 10e-6, 520e-9).unwrap()
    }

    fn random_field(m: usize, n: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((m, n), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexField::new(grid(m, n), v).unwrap()
    }

    fn rel_err(a: &ComplexField, b: &ComplexField) -> f64 {
        let num: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum();
        (num / b.energy()).sqrt()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(1, 4, 1e-6, 1e-6).is_err());
        assert!(GridSpec::new(4, 4, 0.0, 1e-6).is_err());
        assert!(GridSpec::new(4, 4, 1e-6, -1.0).is_err());
        assert!(GridSpec::new(2, 2, 1e-6, 1e-6).is_ok());
    }

    #[test]
    fn non_finite_field_rejected() {
        let mut v = Array2::zeros((4, 4));
        v[(1, 1)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(
            ComplexField::new(grid(4, 4), v),
            Err(HoloError::InvalidField(_))
        ));
    }

    #[test]
    fn constant_field_goes_to_center_bin() {
        let f = ComplexField::new(grid(8, 8), Array2::from_elem((8, 8), Complex64::new(1.0, 0.0)))
            .unwrap();
        let s = fft2_centered(&f).unwrap();
        for ((i, j), v) in s.values().indexed_iter() {
            if (i, j) == (4, 4) {
                assert!((v - Complex64::new(8.0, 0.0)).norm() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn center_impulse_inverts_to_constant() {
        let mut v = Array2::zeros((8, 8));
        v[(4, 4)] = Complex64::new(8.0, 0.0);
        let u = ifft2_centered(&ComplexField::new(grid(8, 8), v).unwrap()).unwrap();
        for v in u.values() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for &(m, n) in &[(16, 16), (7, 12), (256, 256)] {
            let u = random_field(m, n, 3);
            let f = fft2_centered(&u).unwrap();
            assert!(rel_err(&ifft2_centered(&f).unwrap(), &u) < 1e-10);
            assert!(rel_err(&fft2_centered(&ifft2_centered(&u).unwrap()).unwrap(), &u) < 1e-10);
            // direct summation of both energies
            let e_in: f64 = u.values().iter().map(|v| v.re * v.re + v.im * v.im).sum();
            let e_out: f64 = f.values().iter().map(|v| v.re * v.re + v.im * v.im).sum();
            assert!((e_in - e_out).abs() / e_in < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let (m, n) = (6, 5);
        let u = random_field(m, n, 11);
        let f = fft2_centered(&u).unwrap();
        let norm = 1.0 / ((m * n) as f64).sqrt();
        for i in 0..m {
            for j in 0..n {
                let ky = i as f64 - (m / 2) as f64;
                let kx = j as f64 - (n / 2) as f64;
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..m {
                    for x in 0..n {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * (ky * y as f64 / m as f64 + kx * x as f64 / n as f64);
                        acc += u.get(y, x) * Complex64::from_polar(1.0, ph);
                    }
                }
                assert!((acc * norm - f.get(i, j)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_is_linear() {
        let a = Complex64::new(0.3, -1.2);
        let b = Complex64::new(-2.0, 0.5);
        let u = random_field(8, 8, 1);
        let v = random_field(8, 8, 2);
        let combo = ComplexField::new(
            grid(8, 8),
            u.values().mapv(|x| x * a) + &v.values().mapv(|x| x * b),
        )
        .unwrap();
        let lhs = ifft2_centered(&combo).unwrap();
        let iu = ifft2_centered(&u).unwrap();
        let iv = ifft2_centered(&v).unwrap();
        for ((l, x), y) in lhs.values().iter().zip(iu.values()).zip(iv.values()) {
            assert!((l - (a * x + b * y)).norm() < 1e-12);
        }
    }

    #[test]
    fn frequency_grid_layout() {
        let g = GridSpec::new(8, 8, 10e-6, 520e-9).unwrap();
        let (fx, fy) = frequency_grid(&g).unwrap();
        let expect = [-50000.0, -37500.0, -25000.0, -12500.0, 0.0, 12500.0, 25000.0, 37500.0];
        for (j, e) in expect.iter().enumerate() {
            assert!((fx[(0, j)] - e).abs() < 1e-6);
            assert!((fy[(j, 0)] - e).abs() < 1e-6);
        }
        assert_eq!((fx[(4, 4)], fy[(4, 4)]), (0.0, 0.0));

        let g2 = GridSpec::new(8, 8, 20e-6, 520e-9).unwrap();
        let (fx2, fy2) = frequency_grid(&g2).unwrap();
        for (a, b) in fx.iter().zip(fx2.iter()) {
            assert!((a / 2.0 - b).abs() < 1e-9);
        }
        for (a, b) in fy.iter().zip(fy2.iter()) {
            assert!((a / 2.0 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn intensity_average_cases() {
        assert!(intensity_average(&[]).is_err());

        let u = random_field(8, 8, 5);
        let single = intensity_average(std::slice::from_ref(&u)).unwrap();
        for (a, v) in single.iter().zip(u.values()) {
            assert!((a - v.norm()).abs() < 1e-15);
        }

        let one = ComplexField::new(grid(2, 2), Array2::from_elem((2, 2), Complex64::new(1.0, 0.0)))
            .unwrap();
        let eye = ComplexField::new(grid(2, 2), Array2::from_elem((2, 2), Complex64::new(0.0, 1.0)))
            .unwrap();
        let avg = intensity_average(&[one, eye]).unwrap();
        assert!(avg.iter().all(|&a| (a - 1.0).abs() < 1e-15));

        let frames: Vec<_> = (0..4).map(|s| random_field(8, 8, 100 + s)).collect();
        let avg = intensity_average(&frames).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for f in &frames {
                    let v = f.get(i, j);
                    s += v.re * v.re + v.im * v.im;
                }
                assert!((avg[(i, j)] - (s / 4.0).sqrt()).abs() < 1e-12);
            }
        }

        // permutation invariance is exact
        let mut rev = frames.clone();
        rev.reverse();
        assert_eq!(intensity_average(&rev).unwrap(), avg);

        let c = Complex64::new(-0.7, 2.1);
        let scaled: Vec<_> = frames.iter().map(|f| f.scale(c)).collect();
        let avg_c = intensity_average(&scaled).unwrap();
        for (x, y) in avg_c.iter().zip(avg.iter()) {
            assert!((x - c.norm() * y).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_stack_requires_frames_of_one_shape() {
        assert!(PhaseStack::new(vec![]).is_err());
        assert!(PhaseStack::new(vec![Array2::zeros((2, 2)), Array2::zeros((2, 3))]).is_err());
        let s = PhaseStack::new(vec![Array2::zeros((2, 2)); 3]).unwrap();
        assert_eq!(s.count(), 3);
    }
}
