//! Targets, depth masks, the patch-wise STFT and the objective description
//! consumed by the gradient engine.
//!
//! Every data term is a weighted least-squares fit of a scaled, time-averaged
//! amplitude `A` to a target `t`:
//!
//! ```text
//! L = sum_i c_i (s A_i - t_i)^2
//! ```
//!
//! with `c_i` folding in masks and the means over pixels, planes, patches and
//! views. The angular-variance regularizer adds
//! `lambda / (J P) sum_{j,p} w_p^2 s^2 Var_theta(A_{j p theta})`.

use ndarray::{s, Array2, Array4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HoloError, Result};
use crate::fft;
use crate::field::{ComplexField, GridSpec};
use crate::propagation::defaults;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Rectangular,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftSpec {
    pub window_size: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftSpec {
    fn default() -> Self {
        StftSpec {
            window_size: 8,
            hop: 8,
            window: Window::Rectangular,
        }
    }
}

/// Patch layout of an STFT on a given grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftLayout {
    pub patches_y: usize,
    pub patches_x: usize,
    pub w: usize,
    pub hop: usize,
    /// Padded canvas size.
    pub padded: (usize, usize),
    pub shape: (usize, usize),
}

impl StftLayout {
    pub fn patch_count(&self) -> usize {
        self.patches_y * self.patches_x
    }

    pub fn len(&self) -> usize {
        self.patch_count() * self.w * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.patches_y, self.patches_x, self.w, self.w)
    }

    /// Whether patch `(py, px)` lies entirely inside the unpadded grid.
    pub fn patch_inside(&self, py: usize, px: usize) -> bool {
        py * self.hop + self.w <= self.shape.0 && px * self.hop + self.w <= self.shape.1
    }
}

impl StftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.hop == 0 || self.hop > self.window_size {
            return Err(HoloError::config(format!(
                "stft: need 1 <= hop <= window_size, got hop {} and window {}",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    pub fn layout(&self, shape: (usize, usize)) -> Result<StftLayout> {
        self.validate()?;
        let (m, n) = shape;
        let w = self.window_size;
        if w > m || w > n {
            return Err(HoloError::config(format!(
                "stft window {w} is larger than the {m}x{n} grid"
            )));
        }
        let count = |len: usize| (len - w).div_ceil(self.hop) + 1;
        let (py, px) = (count(m), count(n));
        Ok(StftLayout {
            patches_y: py,
            patches_x: px,
            w,
            hop: self.hop,
            padded: ((py - 1) * self.hop + w, (px - 1) * self.hop + w),
            shape,
        })
    }

    pub fn window_values(&self) -> Vec<f64> {
        let w = self.window_size;
        match self.window {
            Window::Rectangular => vec![1.0; w],
            Window::Hann => (0..w)
                .map(|a| 0.5 - 0.5 * (std::f64::consts::TAU * a as f64 / w as f64).cos())
                .collect(),
        }
    }
}

/// Windowed patch-wise centered orthonormal FFTs, laid out `[py, px, ky, kx]`.
pub fn stft(field: &ComplexField, spec: &StftSpec) -> Result<Array4<Complex64>> {
    let layout = spec.layout(field.grid().shape())?;
    let flat = stft_values(field.values(), &layout, &spec.window_values());
    Ok(Array4::from_shape_vec(layout.dims(), flat).expect("layout size"))
}

pub(crate) fn stft_values(u: &Array2<Complex64>, layout: &StftLayout, win: &[f64]) -> Vec<Complex64> {
    let w = layout.w;
    let (m, n) = layout.shape;
    let mut out = Vec::with_capacity(layout.len());
    let mut patch = Array2::<Complex64>::zeros((w, w));
    for py in 0..layout.patches_y {
        for px in 0..layout.patches_x {
            let (y0, x0) = (py * layout.hop, px * layout.hop);
            for a in 0..w {
                for b in 0..w {
                    let (y, x) = (y0 + a, x0 + b);
                    patch[(a, b)] = if y < m && x < n {
                        u[(y, x)] * (win[a] * win[b])
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                }
            }
            let spec = fft::fftshift(&fft::fft2_raw(patch.clone()));
            out.extend(spec.iter());
        }
    }
    out
}

/// Adjoint of [`stft_values`] for gradients laid out like its output.
pub(crate) fn stft_adjoint(g: &[Complex64], layout: &StftLayout, win: &[f64]) -> Array2<Complex64> {
    let w = layout.w;
    let (m, n) = layout.shape;
    let mut out = Array2::<Complex64>::zeros((m, n));
    for (p, chunk) in g.chunks_exact(w * w).enumerate() {
        let (py, px) = (p / layout.patches_x, p % layout.patches_x);
        let spec = Array2::from_shape_vec((w, w), chunk.to_vec()).expect("patch size");
        let patch = fft::ifft2_raw(fft::ifftshift(&spec));
        let (y0, x0) = (py * layout.hop, px * layout.hop);
        for a in 0..w {
            for b in 0..w {
                let (y, x) = (y0 + a, x0 + b);
                if y < m && x < n {
                    out[(y, x)] += patch[(a, b)] * (win[a] * win[b]);
                }
            }
        }
    }
    out
}

/// Weighted overlap-add inverse of [`stft`]. Exact wherever the window
/// covers the pixel, in particular for a rectangular window at any hop.
pub fn istft(coeffs: &Array4<Complex64>, spec: &StftSpec, grid: GridSpec) -> Result<ComplexField> {
    let layout = spec.layout(grid.shape())?;
    if coeffs.dim() != layout.dims() {
        return Err(HoloError::dim(format!(
            "stft coefficients are {:?}, expected {:?}",
            coeffs.dim(),
            layout.dims()
        )));
    }
    let win = spec.window_values();
    let flat: Vec<Complex64> = coeffs.iter().cloned().collect();
    let num = stft_adjoint(&flat, &layout, &win);
    let mut den = Array2::<f64>::zeros(grid.shape());
    let (m, n) = grid.shape();
    for py in 0..layout.patches_y {
        for px in 0..layout.patches_x {
            for a in 0..layout.w {
                for b in 0..layout.w {
                    let (y, x) = (py * layout.hop + a, px * layout.hop + b);
                    if y < m && x < n {
                        den[(y, x)] += (win[a] * win[b]).powi(2);
                    }
                }
            }
        }
    }
    let vals = ndarray::Zip::from(&num)
        .and(&den)
        .map_collect(|&v, &d| if d > 0.0 { v / d } else { Complex64::new(0.0, 0.0) });
    ComplexField::new(grid, vals)
}

/// Binary per-plane masks that partition the image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Array2<f64>>,
    pub distances: Vec<f64>,
}

/// Assigns each pixel to the plane whose distance is nearest its depth, ties
/// to the smaller index. Depth and distances share units.
pub fn depth_to_masks(depth: &Array2<f64>, distances: &[f64]) -> Result<MaskSet> {
    if distances.is_empty() {
        return Err(HoloError::Empty("depth_to_masks needs at least one plane".into()));
    }
    if depth.iter().any(|d| !d.is_finite()) {
        return Err(HoloError::Target("depth map has non-finite values".into()));
    }
    let mut masks = vec![Array2::zeros(depth.dim()); distances.len()];
    for (ix, &d) in depth.indexed_iter() {
        let mut best = 0;
        for j in 1..distances.len() {
            if (d - distances[j]).abs() < (d - distances[best]).abs() {
                best = j;
            }
        }
        masks[best][ix] = 1.0;
    }
    Ok(MaskSet {
        masks,
        distances: distances.to_vec(),
    })
}

/// Piecewise-linear map from diopters to SLM distance, extrapolated linearly
/// beyond the table ends.
pub fn diopters_to_distance(d: f64) -> f64 {
    let dp = &defaults::PLANE_DIOPTERS;
    let zs = &defaults::PLANE_DISTANCES;
    let i = dp.partition_point(|&v| v <= d).clamp(1, dp.len() - 1);
    let t = (d - dp[i - 1]) / (dp[i] - dp[i - 1]);
    zs[i - 1] + t * (zs[i] - zs[i - 1])
}

/// Diopters of the six training planes (the 2.0 D plane is held out).
pub fn training_diopters() -> Vec<f64> {
    defaults::PLANE_DIOPTERS
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != defaults::HELD_OUT_PLANE)
        .map(|(_, &d)| d)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetContent {
    Amp2d {
        amplitude: Array2<f64>,
        distance: f64,
    },
    /// Depth in diopters; masks pick the nearest of `plane_diopters`.
    Rgbd {
        amplitude: Array2<f64>,
        depth: Array2<f64>,
        plane_diopters: Vec<f64>,
    },
    FocalStack {
        planes: Vec<Array2<f64>>,
        distances: Vec<f64>,
    },
    /// View amplitudes laid out `[py, px, vy, vx]`, matching [`stft`].
    LightField {
        data: Array4<f64>,
        distance: f64,
        stft: StftSpec,
    },
}

fn check_amplitude(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(HoloError::Target(format!("{what} has non-finite values")));
    }
    if a.iter().any(|&v| v < 0.0) {
        return Err(HoloError::Target(format!("{what} has negative values")));
    }
    Ok(())
}

impl TargetContent {
    pub fn kind(&self) -> &'static str {
        match self {
            TargetContent::Amp2d { .. } => "amp2d",
            TargetContent::Rgbd { .. } => "rgbd",
            TargetContent::FocalStack { .. } => "focal_stack",
            TargetContent::LightField { .. } => "light_field",
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let shape = grid.shape();
        let same = |a: &Array2<f64>, what: &str| -> Result<()> {
            if a.dim() != shape {
                return Err(HoloError::dim(format!("{what} is {:?}, grid is {:?}", a.dim(), shape)));
            }
            check_amplitude(a, what)
        };
        match self {
            TargetContent::Amp2d { amplitude, distance } => {
                same(amplitude, "target amplitude")?;
                if !distance.is_finite() {
                    return Err(HoloError::config("target distance must be finite"));
                }
            }
            TargetContent::Rgbd {
                amplitude,
                depth,
                plane_diopters,
            } => {
                same(amplitude, "target amplitude")?;
                if depth.dim() != shape {
                    return Err(HoloError::dim("depth map does not match grid"));
                }
                if plane_diopters.is_empty() {
                    return Err(HoloError::config("rgbd target needs at least one plane"));
                }
            }
            TargetContent::FocalStack { planes, distances } => {
                if planes.is_empty() || planes.len() != distances.len() {
                    return Err(HoloError::Target(format!(
                        "focal stack has {} planes and {} distances",
                        planes.len(),
                        distances.len()
                    )));
                }
                if distances.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(HoloError::Target(
                        "focal stack distances must be strictly increasing".into(),
                    ));
                }
                for p in planes {
                    same(p, "focal stack plane")?;
                }
            }
            TargetContent::LightField { data, distance, stft } => {
                let layout = stft.layout(shape)?;
                if data.dim() != layout.dims() {
                    return Err(HoloError::dim(format!(
                        "light field is {:?}, stft layout is {:?}",
                        data.dim(),
                        layout.dims()
                    )));
                }
                if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(HoloError::Target("light field must be finite and non-negative".into()));
                }
                if !distance.is_finite() {
                    return Err(HoloError::config("target distance must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Plane distances in meters in evaluation order.
    pub fn distances(&self) -> Vec<f64> {
        match self {
            TargetContent::Amp2d { distance, .. } | TargetContent::LightField { distance, .. } => {
                vec![*distance]
            }
            TargetContent::Rgbd { plane_diopters, .. } => {
                plane_diopters.iter().map(|&d| diopters_to_distance(d)).collect()
            }
            TargetContent::FocalStack { distances, .. } => distances.clone(),
        }
    }
}

/// What is measured from the propagated field at one plane.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Identity,
    Stft(StftLayout, Vec<f64>),
}

impl Measure {
    pub fn stft(spec: &StftSpec, shape: (usize, usize)) -> Result<Self> {
        Ok(Measure::Stft(spec.layout(shape)?, spec.window_values()))
    }

    pub(crate) fn apply(&self, u: &Array2<Complex64>) -> Vec<Complex64> {
        match self {
            Measure::Identity => u.iter().cloned().collect(),
            Measure::Stft(layout, win) => stft_values(u, layout, win),
        }
    }

    pub(crate) fn adjoint(&self, g: &[Complex64], shape: (usize, usize)) -> Array2<Complex64> {
        match self {
            Measure::Identity => Array2::from_shape_vec(shape, g.to_vec()).expect("measure size"),
            Measure::Stft(layout, win) => stft_adjoint(g, layout, win),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataTerm {
    pub measure: Measure,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegTerm {
    pub layout: StftLayout,
    pub window: Vec<f64>,
    /// Squared per-patch weights `w_p^2`, already scaled by `lambda / (J P)`.
    pub patch_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTerm {
    pub distance: f64,
    pub data: Option<DataTerm>,
    pub reg: Option<RegTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub grid: GridSpec,
    pub planes: Vec<PlaneTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub weight: f64,
    #[serde(default)]
    pub stft: StftSpec,
}

fn mean_weights(len: usize, c: f64) -> Vec<f64> {
    vec![c / len as f64; len]
}

impl Objective {
    pub fn amp2d(grid: GridSpec, target: &Array2<f64>, distance: f64) -> Result<Self> {
        TargetContent::Amp2d {
            amplitude: target.clone(),
            distance,
        }
        .validate(&grid)?;
        Ok(Objective {
            grid,
            planes: vec![PlaneTerm {
                distance,
                data: Some(DataTerm {
                    measure: Measure::Identity,
                    target: target.iter().cloned().collect(),
                    weight: mean_weights(grid.len(), 1.0),
                }),
                reg: None,
            }],
        })
    }

    /// Masked multiplane fit, optionally with the angular-variance regularizer.
    pub fn multiplane(
        grid: GridSpec,
        target: &Array2<f64>,
        masks: &MaskSet,
        reg: Option<&RegConfig>,
    ) -> Result<Self> {
        check_amplitude(target, "target amplitude")?;
        let j = masks.masks.len();
        if j == 0 || j != masks.distances.len() {
            return Err(HoloError::dim("mask and plane counts differ"));
        }
        let n = grid.len();
        let mut planes = Vec::with_capacity(j);
        for (m, &z) in masks.masks.iter().zip(&masks.distances) {
            if m.dim() != grid.shape() || target.dim() != grid.shape() {
                return Err(HoloError::dim("mask or target does not match grid"));
            }
            let reg = reg.map(|r| reg_term(grid, m, r, j)).transpose()?;
            planes.push(PlaneTerm {
                distance: z,
                data: Some(DataTerm {
                    measure: Measure::Identity,
                    target: target.iter().zip(m.iter()).map(|(t, w)| t * w).collect(),
                    weight: m.iter().map(|&w| w / (j * n) as f64).collect(),
                }),
                reg,
            });
        }
        Ok(Objective { grid, planes })
    }

    /// The angular-variance regularizer on its own, with weight 1.
    pub fn stft_variance(grid: GridSpec, masks: &MaskSet, stft: &StftSpec) -> Result<Self> {
        let j = masks.masks.len();
        if j == 0 || j != masks.distances.len() {
            return Err(HoloError::dim("mask and plane counts differ"));
        }
        let cfg = RegConfig {
            weight: 1.0,
            stft: *stft,
        };
        let planes = masks
            .masks
            .iter()
            .zip(&masks.distances)
            .map(|(m, &z)| {
                Ok(PlaneTerm {
                    distance: z,
                    data: None,
                    reg: Some(reg_term(grid, m, &cfg, j)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Objective { grid, planes })
    }

    pub fn focal_stack(grid: GridSpec, planes: &[Array2<f64>], distances: &[f64]) -> Result<Self> {
        TargetContent::FocalStack {
            planes: planes.to_vec(),
            distances: distances.to_vec(),
        }
        .validate(&grid)?;
        let j = planes.len();
        Ok(Objective {
            grid,
            planes: planes
                .iter()
                .zip(distances)
                .map(|(p, &z)| PlaneTerm {
                    distance: z,
                    data: Some(DataTerm {
                        measure: Measure::Identity,
                        target: p.iter().cloned().collect(),
                        weight: mean_weights(grid.len(), 1.0 / j as f64),
                    }),
                    reg: None,
                })
                .collect(),
        })
    }

    pub fn light_field(grid: GridSpec, data: &Array4<f64>, distance: f64, stft: &StftSpec) -> Result<Self> {
        TargetContent::LightField {
            data: data.clone(),
            distance,
            stft: *stft,
        }
        .validate(&grid)?;
        let layout = stft.layout(grid.shape())?;
        let w2 = layout.w * layout.w;
        let inside = (0..layout.patch_count())
            .filter(|p| layout.patch_inside(p / layout.patches_x, p % layout.patches_x))
            .count();
        let mut weight = Vec::with_capacity(layout.len());
        for p in 0..layout.patch_count() {
            let c = if layout.patch_inside(p / layout.patches_x, p % layout.patches_x) {
                1.0 / (inside * w2) as f64
            } else {
                0.0
            };
            weight.extend(std::iter::repeat_n(c, w2));
        }
        Ok(Objective {
            grid,
            planes: vec![PlaneTerm {
                distance,
                data: Some(DataTerm {
                    measure: Measure::stft(stft, grid.shape())?,
                    target: data.iter().cloned().collect(),
                    weight,
                }),
                reg: None,
            }],
        })
    }

    pub fn from_target(grid: GridSpec, target: &TargetContent, reg: Option<&RegConfig>) -> Result<Self> {
        target.validate(&grid)?;
        match target {
            TargetContent::Amp2d { amplitude, distance } => Objective::amp2d(grid, amplitude, *distance),
            TargetContent::Rgbd {
                amplitude,
                depth,
                plane_diopters,
            } => {
                let m = depth_to_masks(depth, plane_diopters)?;
                let masks = MaskSet {
                    masks: m.masks,
                    distances: target.distances(),
                };
                Objective::multiplane(grid, amplitude, &masks, reg)
            }
            TargetContent::FocalStack { planes, distances } => {
                Objective::focal_stack(grid, planes, distances)
            }
            TargetContent::LightField { data, distance, stft } => {
                Objective::light_field(grid, data, *distance, stft)
            }
        }
    }

    pub fn distances(&self) -> Vec<f64> {
        self.planes.iter().map(|p| p.distance).collect()
    }
}

fn reg_term(grid: GridSpec, mask: &Array2<f64>, cfg: &RegConfig, planes: usize) -> Result<RegTerm> {
    let layout = cfg.stft.layout(grid.shape())?;
    let (m, n) = grid.shape();
    let p = layout.patch_count();
    let mut patch_weight = Vec::with_capacity(p);
    for py in 0..layout.patches_y {
        for px in 0..layout.patches_x {
            let (y0, x0) = (py * layout.hop, px * layout.hop);
            let ys = y0..(y0 + layout.w).min(m);
            let xs = x0..(x0 + layout.w).min(n);
            let wmean = mask.slice(s![ys, xs]).sum() / (layout.w * layout.w) as f64;
            patch_weight.push(cfg.weight * wmean * wmean / (planes * p) as f64);
        }
    }
    Ok(RegTerm {
        layout,
        window: cfg.stft.window_values(),
        patch_weight,
    })
}
