//! Angular spectrum propagation and the parametric calibrated display model.
//!
//! The display model is
//!
//! ```text
//! u_z = ASM( a_src * exp(i (phi_src + phi_slm)), z )
//! H(fx, fy) = a_F * exp(i (2 pi / lambda * z * sqrt(1 - (lambda fx)^2 - (lambda fy)^2) + phi_F))
//! ```
//!
//! with evanescent bins of `H` set to zero. `a_F` and `phi_F` live on the
//! centered frequency grid.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use ndarray::Array2;
use num_complex::Complex64;
use once_cell::sync::Lazy;
use sha2::{Digest, Sha256};

use crate::error::{HoloError, Result};
use crate::fft;
use crate::field::{frequency_grid, ComplexField, GridSpec};

/// Optical constants used when a configuration leaves them out.
pub mod defaults {
    /// Red, green, blue wavelengths in meters.
    pub const WAVELENGTHS: [f64; 3] = [638e-9, 520e-9, 450e-9];
    pub const GREEN: f64 = 520e-9;
    pub const PITCH: f64 = 10.8e-6;
    /// SLM-to-plane distances in meters, ordered near to far in diopter space
    /// (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0 D).
    pub const PLANE_DISTANCES: [f64; 7] = [0.079, 0.081, 0.0825, 0.084, 0.086, 0.088, 0.091];
    pub const PLANE_DIOPTERS: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    /// Index of the 2.0 D plane, held out from calibration training.
    pub const HELD_OUT_PLANE: usize = 4;
    pub const DISTANCE_2D: f64 = 0.086;
}

/// Calibrated Fourier-plane amplitude and phase on the centered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierTerms {
    pub amplitude: Array2<f64>,
    pub phase: Array2<f64>,
}

impl FourierTerms {
    pub fn neutral(grid: &GridSpec) -> Self {
        FourierTerms {
            amplitude: Array2::ones(grid.shape()),
            phase: Array2::zeros(grid.shape()),
        }
    }

    fn key_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 * self.amplitude.len());
        for v in self.amplitude.iter().chain(self.phase.iter()) {
            b.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        b
    }
}

#[derive(Debug, Clone)]
pub struct TransferFunction {
    grid: GridSpec,
    distance: f64,
    /// Centered layout.
    h: Array2<Complex64>,
    /// Natural FFT layout, used on the hot path.
    h_natural: Array2<Complex64>,
}

impl TransferFunction {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Kernel values on the centered frequency grid.
    pub fn values(&self) -> &Array2<Complex64> {
        &self.h
    }

    pub(crate) fn natural(&self) -> &Array2<Complex64> {
        &self.h_natural
    }

    pub fn conj(&self) -> TransferFunction {
        TransferFunction {
            grid: self.grid,
            distance: -self.distance,
            h: self.h.mapv(|v| v.conj()),
            h_natural: self.h_natural.mapv(|v| v.conj()),
        }
    }
}

/// Builds `H` for propagation by `z` meters (negative `z` back-propagates).
pub fn build_transfer(
    grid: &GridSpec,
    z: f64,
    calib: Option<&FourierTerms>,
) -> Result<TransferFunction> {
    grid.validate()?;
    if !z.is_finite() {
        return Err(HoloError::config(format!("propagation distance must be finite, got {z}")));
    }
    if let Some(c) = calib {
        if c.amplitude.dim() != grid.shape() || c.phase.dim() != grid.shape() {
            return Err(HoloError::dim("Fourier terms do not match grid".to_string()));
        }
    }
    let (fx, fy) = frequency_grid(grid)?;
    let lambda = grid.wavelength;
    let k = TAU / lambda;
    let h = Array2::from_shape_fn(grid.shape(), |idx| {
        let (lx, ly) = (lambda * fx[idx], lambda * fy[idx]);
        let arg = 1.0 - lx * lx - ly * ly;
        if arg <= 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let (a, p) = match calib {
            Some(c) => (c.amplitude[idx], c.phase[idx]),
            None => (1.0, 0.0),
        };
        Complex64::from_polar(a, k * z * arg.sqrt() + p)
    });
    let h_natural = fft::ifftshift(&h);
    Ok(TransferFunction {
        grid: *grid,
        distance: z,
        h,
        h_natural,
    })
}

/// `ifft2_centered(fft2_centered(u) * H)`.
pub fn asm_propagate(u: &ComplexField, tf: &TransferFunction) -> Result<ComplexField> {
    if u.grid() != tf.grid() {
        return Err(HoloError::dim(format!(
            "field grid {:?} does not match transfer grid {:?}",
            u.grid(),
            tf.grid()
        )));
    }
    let out = propagate_values(u.values().clone(), tf);
    ComplexField::new(*u.grid(), out)
}

pub(crate) fn propagate_values(u: Array2<Complex64>, tf: &TransferFunction) -> Array2<Complex64> {
    let mut spec = fft::fft2_raw(u);
    spec.zip_mut_with(tf.natural(), |s, h| *s *= h);
    fft::ifft2_raw(spec)
}

static TRANSFER_CACHE: Lazy<RwLock<HashMap<[u8; 32], Arc<TransferFunction>>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

fn cache_key(grid: &GridSpec, z: f64, calib: Option<&FourierTerms>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(grid.key_bytes());
    h.update(z.to_bits().to_le_bytes());
    match calib {
        Some(c) => {
            h.update([1u8]);
            h.update(c.key_bytes());
        }
        None => h.update([0u8]),
    }
    h.finalize().into()
}

fn disk_cache_path(key: &[u8; 32]) -> Option<PathBuf> {
    let dir = std::env::var_os("CGH_CACHE_DIR")?;
    Some(PathBuf::from(dir).join(format!("tf_{}.bin", hex::encode(key))))
}

fn read_disk(path: &PathBuf, grid: &GridSpec) -> Option<Array2<Complex64>> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() != grid.len() * 16 {
        return None;
    }
    let vals: Vec<Complex64> = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    Array2::from_shape_vec(grid.shape(), vals).ok()
}

fn write_disk(path: &PathBuf, h: &Array2<Complex64>) {
    let mut bytes = Vec::with_capacity(h.len() * 16);
    for v in h.iter() {
        bytes.extend_from_slice(&v.re.to_le_bytes());
        bytes.extend_from_slice(&v.im.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    // best effort; a failed write only costs a rebuild next time
    let tmp = path.with_extension("tmp");
    if std::fs::write(&tmp, bytes).is_ok() {
        let _ = std::fs::rename(tmp, path);
    }
}

/// Cached [`build_transfer`], keyed by the exact parameter bytes.
///
/// When `CGH_CACHE_DIR` is set, kernels are also persisted there.
pub fn cached_transfer(
    grid: &GridSpec,
    z: f64,
    calib: Option<&FourierTerms>,
) -> Result<Arc<TransferFunction>> {
    let key = cache_key(grid, z, calib);
    if let Some(tf) = TRANSFER_CACHE.read().expect("transfer cache poisoned").get(&key) {
        return Ok(tf.clone());
    }
    let disk = disk_cache_path(&key);
    let tf = match disk.as_ref().and_then(|p| read_disk(p, grid)) {
        Some(h) => {
            let h_natural = fft::ifftshift(&h);
            TransferFunction {
                grid: *grid,
                distance: z,
                h,
                h_natural,
            }
        }
        None => {
            let tf = build_transfer(grid, z, calib)?;
            if let Some(p) = &disk {
                write_disk(p, tf.values());
            }
            tf
        }
    };
    let tf = Arc::new(tf);
    Ok(TRANSFER_CACHE
        .write()
        .expect("transfer cache poisoned")
        .entry(key)
        .or_insert(tf)
        .clone())
}

/// Parametric calibrated propagation model.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedModel {
    pub grid: GridSpec,
    pub a_src: Array2<f64>,
    pub phi_src: Array2<f64>,
    pub a_f: Array2<f64>,
    pub phi_f: Array2<f64>,
    /// Physical phase (radians) of each SLM level index.
    pub lut: Vec<f64>,
    /// Target-plane distances in meters.
    pub distances: Vec<f64>,
}

/// Phase pattern handed to the display model.
#[derive(Debug, Clone, Copy)]
pub enum SlmPhase<'a> {
    Radians(&'a Array2<f64>),
    Indices(&'a Array2<u16>),
}

pub fn uniform_lut(levels: usize) -> Vec<f64> {
    (0..levels).map(|l| TAU * l as f64 / levels as f64).collect()
}

impl CalibratedModel {
    /// Uncalibrated model: unit source, neutral Fourier terms, uniform lut.
    pub fn nominal(grid: GridSpec, distances: Vec<f64>, levels: usize) -> Result<Self> {
        let m = CalibratedModel {
            a_src: Array2::ones(grid.shape()),
            phi_src: Array2::zeros(grid.shape()),
            a_f: Array2::ones(grid.shape()),
            phi_f: Array2::zeros(grid.shape()),
            lut: uniform_lut(levels),
            distances,
            grid,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let shape = self.grid.shape();
        for (name, a) in [
            ("a_src", &self.a_src),
            ("phi_src", &self.phi_src),
            ("a_F", &self.a_f),
            ("phi_F", &self.phi_f),
        ] {
            if a.dim() != shape {
                return Err(HoloError::dim(format!("{name} is {:?}, grid is {:?}", a.dim(), shape)));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(HoloError::NonFinite { stage: "model parameters" });
            }
        }
        if self.a_src.iter().chain(self.a_f.iter()).any(|&v| v < 0.0) {
            return Err(HoloError::config("a_src and a_F must be non-negative"));
        }
        validate_lut(&self.lut)?;
        if self.distances.iter().any(|z| !z.is_finite()) {
            return Err(HoloError::config("distances must be finite"));
        }
        Ok(())
    }

    pub fn fourier_terms(&self) -> FourierTerms {
        FourierTerms {
            amplitude: self.a_f.clone(),
            phase: self.phi_f.clone(),
        }
    }

    fn has_neutral_fourier(&self) -> bool {
        self.a_f.iter().all(|&v| v == 1.0) && self.phi_f.iter().all(|&v| v == 0.0)
    }

    pub fn transfer(&self, z: f64) -> Result<Arc<TransferFunction>> {
        if self.has_neutral_fourier() {
            cached_transfer(&self.grid, z, None)
        } else {
            cached_transfer(&self.grid, z, Some(&self.fourier_terms()))
        }
    }

    pub fn apply_lut(&self, indices: &Array2<u16>) -> Result<Array2<f64>> {
        apply_lut(&self.lut, indices)
    }

    pub fn slm_radians(&self, phase: SlmPhase<'_>) -> Result<Array2<f64>> {
        let p = match phase {
            SlmPhase::Radians(p) => p.clone(),
            SlmPhase::Indices(i) => self.apply_lut(i)?,
        };
        if p.dim() != self.grid.shape() {
            return Err(HoloError::dim(format!(
                "phase is {:?}, model grid is {:?}",
                p.dim(),
                self.grid.shape()
            )));
        }
        Ok(p)
    }

    /// `a_src * exp(i (phi_src + phase))`.
    pub fn source_field(&self, phase: &Array2<f64>) -> Array2<Complex64> {
        let mut out = Array2::zeros(self.grid.shape());
        ndarray::Zip::from(&mut out)
            .and(&self.a_src)
            .and(&self.phi_src)
            .and(phase)
            .for_each(|o, &a, &ps, &p| *o = Complex64::from_polar(a, ps + p));
        out
    }

    pub fn forward(&self, phase: SlmPhase<'_>, z: f64) -> Result<ComplexField> {
        if !z.is_finite() {
            return Err(HoloError::config(format!("propagation distance must be finite, got {z}")));
        }
        let p = self.slm_radians(phase)?;
        let tf = self.transfer(z)?;
        let out = propagate_values(self.source_field(&p), &tf);
        ComplexField::new(self.grid, out)
    }
}

/// Alias for [`CalibratedModel::forward`].
pub fn model_forward(
    phase: SlmPhase<'_>,
    model: &CalibratedModel,
    z: f64,
) -> Result<ComplexField> {
    model.forward(phase, z)
}

pub(crate) fn validate_lut(lut: &[f64]) -> Result<()> {
    if lut.len() < 2 {
        return Err(HoloError::config("lut needs at least two entries"));
    }
    if lut.iter().any(|v| !v.is_finite()) {
        return Err(HoloError::NonFinite { stage: "lut" });
    }
    let base = lut[0];
    let mut prev = 0.0;
    for (l, &v) in lut.iter().enumerate().skip(1) {
        let off = (v - base).rem_euclid(TAU);
        if off <= prev {
            return Err(HoloError::config(format!(
                "lut is not strictly increasing on the circle at entry {l}"
            )));
        }
        prev = off;
    }
    Ok(())
}

/// Elementwise table lookup from level index to radians.
pub fn apply_lut(lut: &[f64], indices: &Array2<u16>) -> Result<Array2<f64>> {
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= lut.len()) {
        return Err(HoloError::IndexOutOfRange {
            index: bad as usize,
            len: lut.len(),
        });
    }
    Ok(indices.mapv(|i| lut[i as usize]))
}

/// Adjoint of [`apply_lut`]: sums the upstream gradient over pixels holding each index.
pub fn lut_gradient(levels: usize, indices: &Array2<u16>, upstream: &Array2<f64>) -> Vec<f64> {
    let mut g = vec![0.0; levels];
    for (&i, &u) in indices.iter().zip(upstream.iter()) {
        g[i as usize] += u;
    }
    g
}

/// Wraps radians into `[0, 2 pi)`.
pub fn wrap_phase(p: f64) -> f64 {
    let w = p.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Wraps radians into `(-pi, pi]`.
pub fn wrap_signed(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::fft2_centered;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(m: usize, n: usize) -> GridSpec {
        GridSpec::new(m, n, defaults::PITCH, defaults::GREEN).unwrap()
    }

    fn rand_phase(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random_range(-PI..PI))
    }

    fn max_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_distance_is_identity_kernel() {
        let tf = build_transfer(&grid(16, 16), 0.0, None).unwrap();
        assert!(tf.values().iter().all(|h| (h - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn center_bin_carries_plane_wave_phase() {
        let g = grid(16, 12);
        for &z in &[0.01, 0.086, -0.05] {
            let tf = build_transfer(&g, z, None).unwrap();
            let want = Complex64::from_polar(1.0, TAU * z / g.wavelength);
            assert!((tf.values()[(8, 6)] - want).norm() < 1e-9);
        }
    }

    #[test]
    fn kernel_matches_scalar_formula() {
        let g = grid(16, 16);
        let z = 0.086;
        let tf = build_transfer(&g, z, None).unwrap();
        let n = 16.0;
        for i in 0..16 {
            for j in 0..16 {
                let fy = (i as f64 - 8.0) / (n * 10.8e-6);
                let fx = (j as f64 - 8.0) / (n * 10.8e-6);
                let lam = 520e-9;
                let root = (1.0 - (lam * fx).powi(2) - (lam * fy).powi(2)).sqrt();
                let want = Complex64::new(0.0, 2.0 * PI / lam * z * root).exp();
                assert!((tf.values()[(i, j)] - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn evanescent_bins_are_zeroed() {
        // pitch below half a wavelength puts the band edge inside the grid
        let g = GridSpec::new(16, 16, 0.2e-6, 520e-9).unwrap();
        let tf = build_transfer(&g, 1e-6, None).unwrap();
        let (fx, fy) = frequency_grid(&g).unwrap();
        let mut zeroed = 0;
        for (idx, h) in tf.values().indexed_iter() {
            assert!(h.norm() <= 1.0 + 1e-15);
            let r = (g.wavelength * fx[idx]).powi(2) + (g.wavelength * fy[idx]).powi(2);
            if r >= 1.0 {
                assert_eq!(*h, Complex64::new(0.0, 0.0));
                zeroed += 1;
            }
        }
        assert!(zeroed > 0);
    }

    #[test]
    fn negative_distance_is_conjugate() {
        let g = grid(16, 16);
        let a = build_transfer(&g, 0.0825, None).unwrap();
        let b = build_transfer(&g, -0.0825, None).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(*y, x.conj());
        }
    }

    #[test]
    fn calibrated_kernel_applies_fourier_terms() {
        let g = grid(8, 8);
        let mut ft = FourierTerms::neutral(&g);
        ft.amplitude[(2, 3)] = 0.5;
        ft.phase[(2, 3)] = 0.7;
        let plain = build_transfer(&g, 0.08, None).unwrap();
        let cal = build_transfer(&g, 0.08, Some(&ft)).unwrap();
        let want = plain.values()[(2, 3)] * Complex64::from_polar(0.5, 0.7);
        assert!((cal.values()[(2, 3)] - want).norm() < 1e-9);
        assert_eq!(cal.values()[(1, 1)], plain.values()[(1, 1)]);
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let tf = build_transfer(&grid(8, 8), 0.01, None).unwrap();
        let u = ComplexField::zeros(grid(8, 6));
        assert!(matches!(asm_propagate(&u, &tf), Err(HoloError::Dimension(_))));
    }

    #[test]
    fn zero_distance_propagation_is_identity() {
        let g = grid(16, 16);
        let u = ComplexField::from_phase(g, &rand_phase((16, 16), 1)).unwrap();
        let out = asm_propagate(&u, &build_transfer(&g, 0.0, None).unwrap()).unwrap();
        assert!(max_diff(out.values(), u.values()) < 1e-10);
    }

    #[test]
    fn forward_then_backward_returns_input() {
        let g = grid(32, 32);
        let u = ComplexField::from_phase(g, &rand_phase((32, 32), 2)).unwrap();
        let fwd = build_transfer(&g, 0.086, None).unwrap();
        let bwd = build_transfer(&g, -0.086, None).unwrap();
        let back = asm_propagate(&asm_propagate(&u, &fwd).unwrap(), &bwd).unwrap();
        assert!(max_diff(back.values(), u.values()) < 1e-8);
    }

    #[test]
    fn propagation_conserves_energy() {
        let g = grid(32, 32);
        let u = ComplexField::from_phase(g, &rand_phase((32, 32), 3)).unwrap();
        // no bin is evanescent at this pitch
        let out = asm_propagate(&u, &build_transfer(&g, 0.09, None).unwrap()).unwrap();
        assert!((out.energy() - u.energy()).abs() / u.energy() < 1e-8);
    }

    #[test]
    fn propagation_is_linear() {
        let g = grid(16, 16);
        let tf = build_transfer(&g, 0.08, None).unwrap();
        let u = ComplexField::from_phase(g, &rand_phase((16, 16), 4)).unwrap();
        let v = ComplexField::from_phase(g, &rand_phase((16, 16), 5)).unwrap();
        let (a, b) = (Complex64::new(1.5, -0.5), Complex64::new(-0.3, 2.0));
        let mix = ComplexField::new(g, u.values().mapv(|x| a * x) + &v.values().mapv(|x| b * x))
            .unwrap();
        let lhs = asm_propagate(&mix, &tf).unwrap();
        let pu = asm_propagate(&u, &tf).unwrap();
        let pv = asm_propagate(&v, &tf).unwrap();
        let rhs = pu.values().mapv(|x| a * x) + &pv.values().mapv(|x| b * x);
        assert!(max_diff(lhs.values(), &rhs) < 1e-10);
    }

    #[test]
    fn one_pixel_shift_commutes_with_propagation() {
        let g = grid(64, 64);
        let gauss = |dy: f64| {
            Array2::from_shape_fn((64, 64), |(i, j)| {
                let (y, x) = (i as f64 - 32.0 - dy, j as f64 - 32.0);
                Complex64::new((-(x * x + y * y) / (2.0 * 3.0 * 3.0)).exp(), 0.0)
            })
        };
        let z = 0.002;
        let tf = build_transfer(&g, z, None).unwrap();
        let u0 = ComplexField::new(g, gauss(0.0)).unwrap();
        let u1 = ComplexField::new(g, gauss(1.0)).unwrap();
        let p0 = asm_propagate(&u0, &tf).unwrap();
        let p1 = asm_propagate(&u1, &tf).unwrap();
        let edge: f64 = p0
            .values()
            .indexed_iter()
            .filter(|((i, j), _)| *i < 2 || *j < 2 || *i > 61 || *j > 61)
            .map(|(_, v)| v.norm_sqr())
            .sum();
        assert!(edge / p0.energy() < 1e-6);
        let mut worst: f64 = 0.0;
        for i in 0..63 {
            for j in 0..64 {
                worst = worst.max((p1.get(i + 1, j) - p0.get(i, j)).norm());
            }
        }
        assert!(worst < 1e-10, "shift mismatch {worst}");
    }

    #[test]
    fn lut_lookup_and_errors() {
        let lut = uniform_lut(16);
        let idx = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as u16);
        let p = apply_lut(&lut, &idx).unwrap();
        for ((i, j), v) in p.indexed_iter() {
            assert_eq!(*v, TAU * (i * 4 + j) as f64 / 16.0);
        }
        let uneven = vec![0.0, 0.3, 0.35, 1.0, 1.1, 2.0, 2.2, 2.9, 3.0, 3.5, 4.0, 4.4, 5.0, 5.2, 5.9, 6.1];
        let p = apply_lut(&uneven, &idx).unwrap();
        for ((i, j), v) in p.indexed_iter() {
            assert_eq!(*v, uneven[i * 4 + j]);
        }
        let bad = Array2::from_elem((2, 2), 16u16);
        assert!(matches!(
            apply_lut(&lut, &bad),
            Err(HoloError::IndexOutOfRange { index: 16, len: 16 })
        ));
    }

    #[test]
    fn lut_validation() {
        assert!(validate_lut(&[0.0, 1.0, 2.0]).is_ok());
        assert!(validate_lut(&[6.0, 0.5, 1.0]).is_ok());
        assert!(validate_lut(&[0.0, 2.0, 1.0]).is_err());
        assert!(validate_lut(&[0.0]).is_err());
    }

    #[test]
    fn lut_gradient_matches_finite_differences() {
        let g = grid(8, 8);
        let mut model = CalibratedModel::nominal(g, vec![0.08], 4).unwrap();
        model.lut = vec![0.1, 1.7, 3.0, 4.9];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..4u16));
        let target = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..2.0));
        let loss = |m: &CalibratedModel| -> f64 {
            let u = m.forward(SlmPhase::Indices(&idx), 0.08).unwrap();
            u.amplitude()
                .iter()
                .zip(target.iter())
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<f64>()
        };
        // upstream dL/dphase via the adjoint of the propagation
        let p = model.apply_lut(&idx).unwrap();
        let src = model.source_field(&p);
        let tf = model.transfer(0.08).unwrap();
        let u = propagate_values(src.clone(), &tf);
        let g_u = Array2::from_shape_fn((8, 8), |ix| {
            let v = u[ix];
            2.0 * (v.norm() - target[ix]) * v / v.norm()
        });
        let g_src = propagate_values(g_u, &tf.conj());
        let dphase = Array2::from_shape_fn((8, 8), |ix| {
            (g_src[ix].conj() * Complex64::i() * src[ix]).re
        });
        let analytic = lut_gradient(4, &idx, &dphase);
        let h = 1e-6;
        for l in 0..4 {
            let mut mp = model.clone();
            mp.lut[l] += h;
            let mut mm = model.clone();
            mm.lut[l] -= h;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            assert!((fd - analytic[l]).abs() <= 1e-5 * fd.abs().max(1.0), "{l}: {fd} vs {}", analytic[l]);
        }
    }

    #[test]
    fn model_forward_trivial_cases() {
        let g = grid(8, 8);
        let model = CalibratedModel::nominal(g, vec![0.0], 16).unwrap();
        let zero = Array2::zeros((8, 8));
        let u = model.forward(SlmPhase::Radians(&zero), 0.0).unwrap();
        assert!(u.values().iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-12));
        assert!(model.forward(SlmPhase::Radians(&zero), f64::NAN).is_err());

        let phase = rand_phase((8, 8), 7);
        let u = model.forward(SlmPhase::Radians(&phase), 0.081).unwrap();
        let plain = asm_propagate(
            &ComplexField::from_phase(g, &phase).unwrap(),
            &build_transfer(&g, 0.081, None).unwrap(),
        )
        .unwrap();
        assert_eq!(u.values(), plain.values());
    }

    #[test]
    fn model_forward_matches_direct_evaluation() {
        // straight-line re-implementation with explicit DFT sums
        let g = GridSpec::new(6, 8, 10.8e-6, 520e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = CalibratedModel::nominal(g, vec![0.084], 16).unwrap();
        model.a_src = Array2::from_shape_fn((6, 8), |_| rng.random_range(0.5..1.5));
        model.phi_src = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        model.a_f = Array2::from_shape_fn((6, 8), |_| rng.random_range(0.2..1.0));
        model.phi_f = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        let phase = rand_phase((6, 8), 22);
        let z = 0.084;
        let got = model.forward(SlmPhase::Radians(&phase), z).unwrap();

        let (m, n) = (6usize, 8usize);
        let lam = 520e-9;
        let mut spec = vec![vec![Complex64::new(0.0, 0.0); n]; m];
        for (ky, row) in spec.iter_mut().enumerate() {
            for (kx, s) in row.iter_mut().enumerate() {
                for y in 0..m {
                    for x in 0..n {
                        let u = Complex64::from_polar(model.a_src[(y, x)], model.phi_src[(y, x)] + phase[(y, x)]);
                        let arg = -TAU * ((ky * y) as f64 / m as f64 + (kx * x) as f64 / n as f64);
                        *s += u * Complex64::from_polar(1.0, arg);
                    }
                }
            }
        }
        for y in 0..m {
            for x in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (ky, row) in spec.iter().enumerate() {
                    for (kx, s) in row.iter().enumerate() {
                        // signed frequency of natural bin (ky, kx) and its centered position
                        let sy = if ky < m - m / 2 { ky as i64 } else { ky as i64 - m as i64 };
                        let sx = if kx < n - n / 2 { kx as i64 } else { kx as i64 - n as i64 };
                        let fy = sy as f64 / (m as f64 * 10.8e-6);
                        let fx = sx as f64 / (n as f64 * 10.8e-6);
                        let ci = (sy + (m / 2) as i64) as usize;
                        let cj = (sx + (n / 2) as i64) as usize;
                        let root = (1.0 - (lam * fx).powi(2) - (lam * fy).powi(2)).sqrt();
                        let h = Complex64::from_polar(
                            model.a_f[(ci, cj)],
                            TAU / lam * z * root + model.phi_f[(ci, cj)],
                        );
                        let arg = TAU * ((ky * y) as f64 / m as f64 + (kx * x) as f64 / n as f64);
                        acc += s * h * Complex64::from_polar(1.0, arg);
                    }
                }
                let want = acc / (m * n) as f64;
                assert!((want - got.get(y, x)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn neutral_model_equals_plain_asm_via_spectrum() {
        let g = grid(16, 16);
        let model = CalibratedModel::nominal(g, vec![0.086], 16).unwrap();
        let phase = rand_phase((16, 16), 8);
        let u = model.forward(SlmPhase::Radians(&phase), 0.086).unwrap();
        let tf = build_transfer(&g, 0.086, None).unwrap();
        let spec = fft2_centered(&ComplexField::from_phase(g, &phase).unwrap()).unwrap();
        let prod = ComplexField::new(g, spec.values() * tf.values()).unwrap();
        let want = crate::field::ifft2_centered(&prod).unwrap();
        assert!(max_diff(u.values(), want.values()) < 1e-12);
    }

    #[test]
    fn cache_returns_identical_kernel() {
        let g = grid(8, 8);
        let a = cached_transfer(&g, 0.0791, None).unwrap();
        let b = cached_transfer(&g, 0.0791, None).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(a.values(), build_transfer(&g, 0.0791, None).unwrap().values());
    }

    #[test]
    fn wrapping_helpers() {
        assert!((wrap_phase(-0.1) - (TAU - 0.1)).abs() < 1e-15);
        assert_eq!(wrap_phase(TAU), 0.0);
        assert_eq!(wrap_signed(PI), PI);
        assert_eq!(wrap_signed(-PI), PI);
        assert!((wrap_signed(6.2) - (6.2 - TAU)).abs() < 1e-15);
    }
}
