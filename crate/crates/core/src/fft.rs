//! Planned, unnormalized 2D FFTs over row-major `Array2<Complex64>` buffers.
//!
//! Plans are cached per shape for the lifetime of the process. The public
//! transforms in [`crate::field`] add centering and the orthonormal scale.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ndarray::Array2;
use num_complex::Complex64;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftDirection, FftPlanner};

pub(crate) struct Plan2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

static PLANS: Lazy<RwLock<HashMap<(usize, usize), Arc<Plan2>>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

pub(crate) fn plan(rows: usize, cols: usize) -> Arc<Plan2> {
    if let Some(p) = PLANS.read().expect("fft plan cache poisoned").get(&(rows, cols)) {
        return p.clone();
    }
    let mut planner = FftPlanner::new();
    let p = Arc::new(Plan2 {
        rows,
        cols,
        row_fwd: planner.plan_fft(cols, FftDirection::Forward),
        row_inv: planner.plan_fft(cols, FftDirection::Inverse),
        col_fwd: planner.plan_fft(rows, FftDirection::Forward),
        col_inv: planner.plan_fft(rows, FftDirection::Inverse),
    });
    PLANS
        .write()
        .expect("fft plan cache poisoned")
        .entry((rows, cols))
        .or_insert(p)
        .clone()
}

impl Plan2 {
    /// In-place 2D transform without normalization.
    pub(crate) fn process(&self, data: &mut Array2<Complex64>, direction: FftDirection) {
        debug_assert_eq!(data.dim(), (self.rows, self.cols));
        let (row, col) = match direction {
            FftDirection::Forward => (&self.row_fwd, &self.col_fwd),
            FftDirection::Inverse => (&self.row_inv, &self.col_inv),
        };
        if !data.is_standard_layout() {
            *data = data.as_standard_layout().to_owned();
        }
        let buf = data.as_slice_mut().expect("standard layout");
        row.process(buf);

        let mut t = vec![Complex64::new(0.0, 0.0); buf.len()];
        transpose(buf, &mut t, self.rows, self.cols);
        col.process(&mut t);
        transpose(&t, buf, self.cols, self.rows);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        let line = &src[r * cols..(r + 1) * cols];
        for (c, v) in line.iter().enumerate() {
            dst[c * rows + r] = *v;
        }
    }
}

/// Moves the zero-frequency bin from index 0 to index `n / 2` along both axes.
pub(crate) fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    let (sm, sn) = (m / 2, n / 2);
    Array2::from_shape_fn((m, n), |(i, j)| a[((i + m - sm) % m, (j + n - sn) % n)])
}

/// Inverse of [`fftshift`], also for odd sizes.
pub(crate) fn ifftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    let (sm, sn) = (m / 2, n / 2);
    Array2::from_shape_fn((m, n), |(i, j)| a[((i + sm) % m, (j + sn) % n)])
}

pub(crate) fn fftshift_real(a: &Array2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    let (sm, sn) = (m / 2, n / 2);
    Array2::from_shape_fn((m, n), |(i, j)| a[((i + m - sm) % m, (j + n - sn) % n)])
}

/// Orthonormal forward transform in natural (uncentered) layout.
pub(crate) fn fft2_raw(mut a: Array2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    plan(m, n).process(&mut a, FftDirection::Forward);
    let s = 1.0 / ((m * n) as f64).sqrt();
    a.mapv_inplace(|v| v * s);
    a
}

/// Orthonormal inverse transform in natural (uncentered) layout.
pub(crate) fn ifft2_raw(mut a: Array2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    plan(m, n).process(&mut a, FftDirection::Inverse);
    let s = 1.0 / ((m * n) as f64).sqrt();
    a.mapv_inplace(|v| v * s);
    a
}
