//! Fitting the parametric display model to captured phase/intensity pairs.

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::citl::PhysicalDisplay;
use crate::engine::AMPLITUDE_EPS;
use crate::error::{HoloError, Result};
use crate::fft;
use crate::field::GridSpec;
use crate::metrics::psnr_from_mse;
use crate::optimizer::{optimize, Method, OptimConfig};
use crate::propagation::{cached_transfer, lut_gradient, uniform_lut, validate_lut, CalibratedModel};
use crate::quantization::QuantScheme;
use crate::supervision::Objective;
use crate::synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    HeldOut,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::HeldOut];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::HeldOut => "held_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Random,
    Optimized,
}

/// One captured intensity map of one pattern at one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureEntry {
    pub pattern: usize,
    pub plane: usize,
    pub split: Split,
    pub intensity: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureDataset {
    pub grid: GridSpec,
    pub levels: usize,
    pub plane_distances: Vec<f64>,
    pub held_out_plane: Option<usize>,
    pub patterns: Vec<Array2<u16>>,
    pub recipes: Vec<Recipe>,
    pub entries: Vec<CaptureEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    /// Share of patterns optimized for random targets; the rest are uniform random.
    pub optimized_fraction: f64,
    pub optimize_iterations: usize,
    pub held_out_plane: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 200,
            seed: 0,
            optimized_fraction: 0.5,
            optimize_iterations: 40,
            held_out_plane: Some(crate::propagation::defaults::HELD_OUT_PLANE),
        }
    }
}

impl CaptureDataset {
    pub fn split_entries(&self, split: Split) -> Vec<&CaptureEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.grid.shape();
        if self.patterns.len() != self.recipes.len() {
            return Err(HoloError::Format("one recipe per pattern expected".into()));
        }
        if let Some(h) = self.held_out_plane {
            if h >= self.plane_distances.len() {
                return Err(HoloError::Format(format!("held-out plane {h} out of range")));
            }
        }
        for p in &self.patterns {
            if p.dim() != shape {
                return Err(HoloError::dim(format!("pattern is {:?}, grid is {shape:?}", p.dim())));
            }
            if p.iter().any(|&i| i as usize >= self.levels) {
                return Err(HoloError::Format("pattern index beyond the level count".into()));
            }
        }
        for e in &self.entries {
            if e.pattern >= self.patterns.len() || e.plane >= self.plane_distances.len() {
                return Err(HoloError::Format("entry references a missing pattern or plane".into()));
            }
            if e.intensity.dim() != shape {
                return Err(HoloError::dim("capture shape differs from the grid".to_string()));
            }
            let held = Some(e.plane) == self.held_out_plane;
            if held != (e.split == Split::HeldOut) {
                return Err(HoloError::Format(format!(
                    "entry at plane {} has split {:?}",
                    e.plane, e.split
                )));
            }
        }
        Ok(())
    }
}

fn pattern_splits(count: usize, seed: u64) -> Vec<Split> {
    let n_train = ((count as f64) * 0.8).round() as usize;
    let n_val = ((count as f64) * 0.1).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d));
    let mut splits = vec![Split::Test; count];
    for (rank, &k) in order.iter().enumerate() {
        splits[k] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn random_target(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let name = synthetic::IMAGE_NAMES[rng.random_range(0..synthetic::IMAGE_NAMES.len())];
    let img = synthetic::image(name, shape)?;
    let (dy, dx) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
    let (fy, fx) = (rng.random_bool(0.5), rng.random_bool(0.5));
    Ok(Array2::from_shape_fn(shape, |(i, j)| {
        let i = if fy { shape.0 - 1 - i } else { i };
        let j = if fx { shape.1 - 1 - j } else { j };
        img[((i + dy) % shape.0, (j + dx) % shape.1)]
    }))
}

/// Captures patterns from `display` at every plane in `distances`.
///
/// Patterns mix uniform random level indices and phases optimized with the
/// nominal model for randomly transformed builtin targets at random
/// non-held-out planes. Captures are stored at `f32` precision.
pub fn generate_dataset(display: &PhysicalDisplay, grid: GridSpec, distances: &[f64], spec: &DatasetSpec) -> Result<CaptureDataset> {
    if spec.count == 0 {
        return Err(HoloError::config("dataset count must be >= 1"));
    }
    if distances.is_empty() {
        return Err(HoloError::config("dataset needs at least one plane"));
    }
    if !(0.0..=1.0).contains(&spec.optimized_fraction) {
        return Err(HoloError::config("optimized_fraction must be in [0, 1]"));
    }
    let scheme = display.scheme();
    if scheme.is_continuous() {
        return Err(HoloError::config("calibration needs a quantized display"));
    }
    if display.grid_shape() != grid.shape() {
        return Err(HoloError::dim("display and dataset grids differ".to_string()));
    }
    if let Some(h) = spec.held_out_plane {
        if h >= distances.len() {
            return Err(HoloError::config(format!("held_out_plane {h} out of range")));
        }
    }
    let levels = scheme.len();
    let shape = grid.shape();
    let train_planes: Vec<usize> = (0..distances.len()).filter(|&j| Some(j) != spec.held_out_plane).collect();
    if train_planes.is_empty() {
        return Err(HoloError::config("every plane is held out"));
    }
    let n_opt = ((spec.count as f64) * spec.optimized_fraction).round() as usize;
    let nominal = CalibratedModel::nominal(grid, distances.to_vec(), levels)?;
    let ideal = QuantScheme::from_levels(uniform_lut(levels), true)?;

    let made: Vec<(Array2<u16>, Recipe)> = (0..spec.count)
        .into_par_iter()
        .map(|k| -> Result<_> {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            if k < n_opt {
                let target = random_target(shape, &mut rng)?;
                let z = distances[train_planes[rng.random_range(0..train_planes.len())]];
                let obj = Objective::amp2d(grid, &target, z)?;
                let cfg = OptimConfig {
                    method: Method::Naive,
                    iterations: spec.optimize_iterations.max(1),
                    lr: 0.05,
                    frames: 1,
                    early_stop: None,
                    seed: rng.random(),
                    ..Default::default()
                };
                let run = optimize(&obj, &nominal, &ideal, &cfg)?;
                let idx = run.exported.indices.expect("quantized export").remove(0);
                Ok((idx, Recipe::Optimized))
            } else {
                let idx = Array2::from_shape_fn(shape, |_| rng.random_range(0..levels) as u16);
                Ok((idx, Recipe::Random))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (patterns, recipes): (Vec<_>, Vec<_>) = made.into_iter().unzip();
    let splits = pattern_splits(spec.count, spec.seed);

    let jobs: Vec<(usize, usize)> = (0..spec.count)
        .flat_map(|k| (0..distances.len()).map(move |j| (k, j)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(k, j)| -> Result<CaptureEntry> {
            let key = (k as u64) << 8 | j as u64;
            let cap = display.capture_indices(&patterns[k], distances[j], key)?;
            let split = if Some(j) == spec.held_out_plane { Split::HeldOut } else { splits[k] };
            Ok(CaptureEntry {
                pattern: k,
                plane: j,
                split,
                intensity: cap.mapv(|v| v as f32 as f64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = CaptureDataset {
        grid,
        levels,
        plane_distances: distances.to_vec(),
        held_out_plane: spec.held_out_plane,
        patterns,
        recipes,
        entries,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------- persistence

const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternRecord {
    file: String,
    recipe: Recipe,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    pattern: usize,
    plane: usize,
    split: Split,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    grid: GridSpec,
    levels: usize,
    plane_distances: Vec<f64>,
    held_out_plane: Option<usize>,
    patterns: Vec<PatternRecord>,
    entries: Vec<EntryRecord>,
}

fn write_f32(path: &Path, vals: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in vals {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, shape: (usize, usize)) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)
        .map_err(|e| HoloError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if bytes.len() != shape.0 * shape.1 * 4 {
        return Err(HoloError::Format(format!("{}: wrong size", path.display())));
    }
    let vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec(shape, vals).map_err(|e| HoloError::Format(e.to_string()))
}

/// Writes `manifest.json` plus one little-endian `f32` file per pattern and capture.
pub fn save_dataset(ds: &CaptureDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut patterns = Vec::with_capacity(ds.patterns.len());
    for (k, (p, r)) in ds.patterns.iter().zip(&ds.recipes).enumerate() {
        let file = format!("pattern_{k:05}.f32");
        write_f32(&dir.join(&file), p.iter().map(|&i| i as f64))?;
        patterns.push(PatternRecord { file, recipe: *r });
    }
    let mut entries = Vec::with_capacity(ds.entries.len());
    for e in &ds.entries {
        let file = format!("capture_{:05}_{}.f32", e.pattern, e.plane);
        write_f32(&dir.join(&file), e.intensity.iter().cloned())?;
        entries.push(EntryRecord {
            pattern: e.pattern,
            plane: e.plane,
            split: e.split,
            file,
        });
    }
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        grid: ds.grid,
        levels: ds.levels,
        plane_distances: ds.plane_distances.clone(),
        held_out_plane: ds.held_out_plane,
        patterns,
        entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<CaptureDataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| HoloError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != DATASET_VERSION {
        return Err(HoloError::Format(format!("unsupported dataset format_version {}", m.format_version)));
    }
    let shape = m.grid.shape();
    let mut patterns = Vec::with_capacity(m.patterns.len());
    let mut recipes = Vec::with_capacity(m.patterns.len());
    for p in &m.patterns {
        let vals = read_f32(&dir.join(&p.file), shape)?;
        if vals.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v >= m.levels as f64) {
            return Err(HoloError::Format(format!("{}: not a level index map", p.file)));
        }
        patterns.push(vals.mapv(|v| v as u16));
        recipes.push(p.recipe);
    }
    let entries = m
        .entries
        .iter()
        .map(|e| {
            Ok(CaptureEntry {
                pattern: e.pattern,
                plane: e.plane,
                split: e.split,
                intensity: read_f32(&dir.join(&e.file), shape)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = CaptureDataset {
        grid: m.grid,
        levels: m.levels,
        plane_distances: m.plane_distances,
        held_out_plane: m.held_out_plane,
        patterns,
        recipes,
        entries,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------- model fitting

/// Which model parameters a fit may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ParamGroups {
    pub a_src: bool,
    pub phi_src: bool,
    pub phi_f: bool,
    pub a_f: bool,
    pub lut: bool,
}

impl ParamGroups {
    pub fn all() -> Self {
        ParamGroups {
            a_src: true,
            phi_src: true,
            phi_f: true,
            a_f: true,
            lut: true,
        }
    }

    pub fn any(&self) -> bool {
        self.a_src || self.phi_src || self.phi_f || self.a_f || self.lut
    }

    /// Row label such as `+a_src+phi_src`, or `nominal` when nothing is enabled.
    pub fn label(&self) -> String {
        let mut s = String::new();
        for (on, name) in [
            (self.a_src, "a_src"),
            (self.phi_src, "phi_src"),
            (self.phi_f, "phi_f"),
            (self.a_f, "a_f"),
            (self.lut, "lut"),
        ] {
            if on {
                s.push('+');
                s.push_str(name);
            }
        }
        if s.is_empty() {
            "nominal".into()
        } else {
            s
        }
    }

    /// The cumulative ladder: nothing, then `a_src`, `phi_src`, `phi_F`, `a_F`, `lut` added in turn.
    pub fn ladder() -> Vec<ParamGroups> {
        let mut g = ParamGroups::default();
        let mut out = vec![g];
        for k in 0..5 {
            match k {
                0 => g.a_src = true,
                1 => g.phi_src = true,
                2 => g.phi_f = true,
                3 => g.a_f = true,
                _ => g.lut = true,
            }
            out.push(g);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub groups: ParamGroups,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            lr: 4e-4,
            batch_size: 2,
            seed: 0,
            groups: ParamGroups::all(),
        }
    }
}

/// Per-plane propagation kernels of a model, computed without the shared
/// transfer cache (fit iterates would otherwise flood it).
struct Kernels {
    /// Nominal kernel per plane in natural layout.
    base: Vec<Array2<Complex64>>,
    /// `a_F exp(i phi_F)` in natural layout.
    fourier: Array2<Complex64>,
}

impl Kernels {
    fn base(grid: &GridSpec, distances: &[f64]) -> Result<Vec<Array2<Complex64>>> {
        distances
            .iter()
            .map(|&z| Ok(fft::ifftshift(cached_transfer(grid, z, None)?.values())))
            .collect()
    }

    fn new(base: Vec<Array2<Complex64>>, model: &CalibratedModel) -> Self {
        let centered = ndarray::Zip::from(&model.a_f)
            .and(&model.phi_f)
            .map_collect(|&a, &p| Complex64::from_polar(a, p));
        Kernels {
            base,
            fourier: fft::ifftshift(&centered),
        }
    }
}

/// Parameter gradients in the model's own layouts.
#[derive(Debug, Clone)]
struct ModelGrad {
    a_src: Array2<f64>,
    phi_src: Array2<f64>,
    a_f: Array2<f64>,
    phi_f: Array2<f64>,
    lut: Vec<f64>,
}

impl ModelGrad {
    fn zeros(shape: (usize, usize), levels: usize) -> Self {
        ModelGrad {
            a_src: Array2::zeros(shape),
            phi_src: Array2::zeros(shape),
            a_f: Array2::zeros(shape),
            phi_f: Array2::zeros(shape),
            lut: vec![0.0; levels],
        }
    }
}

/// Predicted amplitude `|u_z|` of one pattern.
fn predict(model: &CalibratedModel, k: &Kernels, plane: usize, pattern: &Array2<u16>) -> Array2<f64> {
    let theta = pattern.mapv(|i| model.lut[i as usize]);
    let mut s = fft::fft2_raw(model.source_field(&theta));
    ndarray::Zip::from(&mut s)
        .and(&k.base[plane])
        .and(&k.fourier)
        .for_each(|s, h, f| *s *= h * f);
    fft::ifft2_raw(s).mapv(|u| u.norm())
}

/// Mean squared amplitude error of one entry; accumulates `scale * dL/dparams`
/// (natural-layout Fourier gradients) into `acc`.
fn entry_loss_grad(
    model: &CalibratedModel,
    k: &Kernels,
    plane: usize,
    pattern: &Array2<u16>,
    captured_amp: &Array2<f64>,
    scale: f64,
    acc: &mut ModelGrad,
) -> f64 {
    let n = pattern.len() as f64;
    let theta = pattern.mapv(|i| model.lut[i as usize]);
    let src = model.source_field(&theta);
    let spec = fft::fft2_raw(src.clone());
    let mut y = spec.clone();
    ndarray::Zip::from(&mut y)
        .and(&k.base[plane])
        .and(&k.fourier)
        .for_each(|y, h, f| *y *= h * f);
    let u = fft::ifft2_raw(y);
    let mut loss = 0.0;
    let g_u = ndarray::Zip::from(&u).and(captured_amp).map_collect(|u, &c| {
        let a = u.norm();
        let r = a - c;
        loss += r * r;
        u * (2.0 * r / n / (a + AMPLITUDE_EPS))
    });
    let g_y = fft::fft2_raw(g_u);
    // y = S * H0 * F
    ndarray::Zip::from(&mut acc.a_f)
        .and(&mut acc.phi_f)
        .and(&g_y)
        .and(&spec)
        .and(&k.base[plane])
        .and(&k.fourier)
        .for_each(|ga, gp, gy, s, h0, f| {
            let g_f = (s * h0).conj() * gy;
            let unit = if f.norm() > 0.0 { f / f.norm() } else { Complex64::new(1.0, 0.0) };
            *ga += scale * (g_f.conj() * unit).re;
            *gp += scale * (g_f.conj() * Complex64::i() * f).re;
        });
    let mut g_s = g_y;
    ndarray::Zip::from(&mut g_s)
        .and(&k.base[plane])
        .and(&k.fourier)
        .for_each(|g, h, f| *g *= (h * f).conj());
    let g_src = fft::ifft2_raw(g_s);
    let mut g_theta = Array2::zeros(pattern.dim());
    ndarray::Zip::from(&mut acc.a_src)
        .and(&mut acc.phi_src)
        .and(&mut g_theta)
        .and(&g_src)
        .and(&src)
        .and(&model.a_src)
        .for_each(|ga, gp, gt, g, s, &a| {
            let unit = if a > 0.0 { s / a } else { Complex64::from_polar(1.0, s.arg()) };
            *ga += scale * (g.conj() * unit).re;
            let d = (g.conj() * Complex64::i() * s).re;
            *gp += scale * d;
            *gt = d;
        });
    for (acc_l, g) in acc.lut.iter_mut().zip(lut_gradient(model.lut.len(), pattern, &g_theta)) {
        *acc_l += scale * g;
    }
    loss / n
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub count: usize,
    /// Mean squared amplitude error.
    pub loss: f64,
    /// Mean PSNR with each capture's peak amplitude as the reference.
    pub psnr: f64,
}

fn check_dataset_model(model: &CalibratedModel, ds: &CaptureDataset) -> Result<()> {
    model.validate()?;
    if model.grid.shape() != ds.grid.shape() {
        return Err(HoloError::dim("model and dataset grids differ".to_string()));
    }
    if model.lut.len() != ds.levels {
        return Err(HoloError::config(format!(
            "model lut has {} entries, dataset has {} levels",
            model.lut.len(),
            ds.levels
        )));
    }
    Ok(())
}

fn summarize(model: &CalibratedModel, k: &Kernels, ds: &CaptureDataset, split: Split) -> Result<SplitSummary> {
    let entries = ds.split_entries(split);
    if entries.is_empty() {
        return Err(HoloError::Empty(format!("split `{}` has no entries", split.name())));
    }
    let per: Vec<(f64, f64)> = entries
        .par_iter()
        .map(|e| {
            let pred = predict(model, k, e.plane, &ds.patterns[e.pattern]);
            let cap = e.intensity.mapv(f64::sqrt);
            let mse = pred.iter().zip(cap.iter()).map(|(p, c)| (p - c) * (p - c)).sum::<f64>() / pred.len() as f64;
            let peak = cap.iter().cloned().fold(0.0, f64::max).max(1e-300);
            (mse, psnr_from_mse(mse / (peak * peak)))
        })
        .collect();
    let n = per.len() as f64;
    Ok(SplitSummary {
        split,
        count: per.len(),
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        psnr: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Mean amplitude error and PSNR of `model` on one split.
pub fn eval_model(model: &CalibratedModel, ds: &CaptureDataset, split: Split) -> Result<SplitSummary> {
    check_dataset_model(model, ds)?;
    let k = Kernels::new(Kernels::base(&model.grid, &ds.plane_distances)?, model);
    summarize(model, &k, ds, split)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best model by train PSNR, the initial model included.
    pub model: CalibratedModel,
    /// Train PSNR of the initial model and after each epoch.
    pub train_psnr: Vec<f64>,
    /// Validation loss after each epoch; empty without a validation split.
    pub val_loss: Vec<f64>,
    /// 0 when no epoch beat the initial model.
    pub best_epoch: usize,
}

/// Adam on the mean squared amplitude error over the enabled parameter
/// groups, in seeded mini-batches of training entries.
pub fn fit_model(ds: &CaptureDataset, init: &CalibratedModel, cfg: &FitConfig) -> Result<FitResult> {
    if !cfg.groups.any() {
        return Err(HoloError::config("fit needs at least one enabled parameter group"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(HoloError::config(format!("fit lr must be > 0, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(HoloError::config("batch_size must be >= 1"));
    }
    check_dataset_model(init, ds)?;
    let train: Vec<usize> = (0..ds.entries.len()).filter(|&i| ds.entries[i].split == Split::Train).collect();
    if train.is_empty() {
        return Err(HoloError::Empty("dataset has no training entries".into()));
    }
    let has_val = ds.entries.iter().any(|e| e.split == Split::Val);
    let base = Kernels::base(&init.grid, &ds.plane_distances)?;
    let captured: Vec<Array2<f64>> = ds.entries.iter().map(|e| e.intensity.mapv(f64::sqrt)).collect();
    let shape = init.grid.shape();
    let npx = shape.0 * shape.1;

    let mut model = init.clone();
    let mut best = model.clone();
    let k0 = Kernels::new(base.clone(), &model);
    let mut best_psnr = summarize(&model, &k0, ds, Split::Train)?.psnr;
    let mut train_psnr = vec![best_psnr];
    let mut val_loss = Vec::new();
    let mut best_epoch = 0;
    let mut opt_a_src = Adam::new(npx);
    let mut opt_phi_src = Adam::new(npx);
    let mut opt_a_f = Adam::new(npx);
    let mut opt_phi_f = Adam::new(npx);
    let mut opt_lut = Adam::new(model.lut.len());
    let mut order = train.clone();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.clone_from(&train);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let k = Kernels::new(base.clone(), &model);
            let mut g = ModelGrad::zeros(shape, model.lut.len());
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let e = &ds.entries[i];
                entry_loss_grad(&model, &k, e.plane, &ds.patterns[e.pattern], &captured[i], w, &mut g);
            }
            if cfg.groups.a_src {
                opt_a_src.step(model.a_src.iter_mut(), g.a_src.iter().cloned(), cfg.lr);
                model.a_src.mapv_inplace(|v| v.max(0.0));
            }
            if cfg.groups.phi_src {
                opt_phi_src.step(model.phi_src.iter_mut(), g.phi_src.iter().cloned(), cfg.lr);
            }
            if cfg.groups.a_f {
                let gc = fft::fftshift_real(&g.a_f);
                opt_a_f.step(model.a_f.iter_mut(), gc.iter().cloned(), cfg.lr);
                model.a_f.mapv_inplace(|v| v.max(0.0));
            }
            if cfg.groups.phi_f {
                let gc = fft::fftshift_real(&g.phi_f);
                opt_phi_f.step(model.phi_f.iter_mut(), gc.iter().cloned(), cfg.lr);
            }
            if cfg.groups.lut {
                let before = model.lut.clone();
                opt_lut.step(model.lut.iter_mut(), g.lut.iter().cloned(), cfg.lr);
                if validate_lut(&model.lut).is_err() {
                    model.lut = before;
                }
            }
        }
        let k = Kernels::new(base.clone(), &model);
        let p = summarize(&model, &k, ds, Split::Train)?.psnr;
        train_psnr.push(p);
        if has_val {
            val_loss.push(summarize(&model, &k, ds, Split::Val)?.loss);
        }
        if p > best_psnr {
            best_psnr = p;
            best = model.clone();
            best_epoch = epoch + 1;
        }
    }
    Ok(FitResult {
        model: best,
        train_psnr,
        val_loss,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub groups: ParamGroups,
    pub train_psnr: f64,
    pub val_psnr: Option<f64>,
    pub test_psnr: Option<f64>,
    pub held_out_psnr: Option<f64>,
}

fn optional(model: &CalibratedModel, ds: &CaptureDataset, split: Split) -> Result<Option<f64>> {
    if ds.split_entries(split).is_empty() {
        Ok(None)
    } else {
        Ok(Some(eval_model(model, ds, split)?.psnr))
    }
}

/// Fits each rung of `ladder` in turn, warm-started from the previous
/// rung's model. A rung with no groups is evaluated without fitting.
pub fn ablation(
    ds: &CaptureDataset,
    init: &CalibratedModel,
    ladder: &[ParamGroups],
    cfg: &FitConfig,
) -> Result<(Vec<AblationRow>, CalibratedModel)> {
    let mut model = init.clone();
    let mut rows = Vec::with_capacity(ladder.len());
    for groups in ladder {
        if groups.any() {
            let fit = fit_model(ds, &model, &FitConfig { groups: *groups, ..cfg.clone() })?;
            model = fit.model;
        }
        rows.push(AblationRow {
            label: groups.label(),
            groups: *groups,
            train_psnr: eval_model(&model, ds, Split::Train)?.psnr,
            val_psnr: optional(&model, ds, Split::Val)?,
            test_psnr: optional(&model, ds, Split::Test)?,
            held_out_psnr: optional(&model, ds, Split::HeldOut)?,
        });
    }
    Ok((rows, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citl::Perturbation;
    use crate::propagation::SlmPhase;

    fn small(n: usize, levels: usize) -> (GridSpec, CalibratedModel) {
        let g = GridSpec::new(n, n, 10.8e-6, 520e-9).unwrap();
        (g, CalibratedModel::nominal(g, vec![0.03, 0.035, 0.04], levels).unwrap())
    }

    fn display(nominal: &CalibratedModel, p: Perturbation, noise: f64) -> PhysicalDisplay {
        let bits = (nominal.lut.len() as f64).log2() as u32;
        PhysicalDisplay::new(p.apply(nominal).unwrap(), QuantScheme::uniform(bits).unwrap(), noise, 1).unwrap()
    }

    fn spec(count: usize) -> DatasetSpec {
        DatasetSpec {
            count,
            seed: 3,
            optimize_iterations: 5,
            held_out_plane: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn dataset_cardinality_and_splits() {
        let (g, nominal) = small(16, 8);
        let d = display(&nominal, Perturbation::default(), 1e-3);
        let ds = generate_dataset(&d, g, &nominal.distances, &spec(10)).unwrap();
        assert_eq!(ds.entries.len(), 30);
        let count = |s| ds.split_entries(s).len();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (16, 2, 2));
        assert_eq!(count(Split::HeldOut), 10);
        let patterns_of = |s| -> std::collections::BTreeSet<usize> {
            ds.split_entries(s).iter().map(|e| e.pattern).collect()
        };
        assert!(patterns_of(Split::Train).is_disjoint(&patterns_of(Split::Test)));
        assert!(ds.split_entries(Split::HeldOut).iter().all(|e| e.plane == 1));
        assert!(ds.split_entries(Split::Train).iter().all(|e| e.plane != 1));
        assert_eq!(ds.recipes.iter().filter(|r| **r == Recipe::Optimized).count(), 5);
        // every level shows up in the patterns
        let mut hist = [0usize; 8];
        for p in &ds.patterns {
            for &i in p.iter() {
                hist[i as usize] += 1;
            }
        }
        assert!(hist.iter().all(|&h| h > 0), "{hist:?}");
        assert!(generate_dataset(&d, g, &nominal.distances, &spec(0)).is_err());
    }

    #[test]
    fn dataset_is_seeded_and_round_trips() {
        let (g, nominal) = small(8, 4);
        let d = display(&nominal, Perturbation::default(), 1e-3);
        let a = generate_dataset(&d, g, &nominal.distances, &spec(6)).unwrap();
        let b = generate_dataset(&d, g, &nominal.distances, &spec(6)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&a, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), a);
    }

    fn fd_model_grad(groups: &str) {
        let (g, nominal) = small(8, 4);
        let mut model = Perturbation::default().apply(&nominal).unwrap();
        model.a_f.mapv_inplace(|v| v * 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pattern = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..4u16));
        let cap = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.5));
        let base = Kernels::base(&g, &model.distances).unwrap();
        let loss = |m: &CalibratedModel| -> f64 {
            let k = Kernels::new(base.clone(), m);
            let mut scratch = ModelGrad::zeros((8, 8), 4);
            entry_loss_grad(m, &k, 2, &pattern, &cap, 1.0, &mut scratch)
        };
        let mut grad = ModelGrad::zeros((8, 8), 4);
        entry_loss_grad(&model, &Kernels::new(base.clone(), &model), 2, &pattern, &cap, 1.0, &mut grad);
        let h = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        let mut check = |analytic: f64, bump: &dyn Fn(&mut CalibratedModel, f64)| {
            let mut p = model.clone();
            bump(&mut p, h);
            let mut m = model.clone();
            bump(&mut m, -h);
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            num += (fd - analytic).powi(2);
            den += fd * fd;
        };
        match groups {
            "a_src" => {
                for ix in [(0, 0), (3, 5), (7, 2)] {
                    check(grad.a_src[ix], &|m, d| m.a_src[ix] += d);
                }
            }
            "phi_src" => {
                for ix in [(1, 1), (4, 6)] {
                    check(grad.phi_src[ix], &|m, d| m.phi_src[ix] += d);
                }
            }
            "a_f" => {
                let gc = fft::fftshift_real(&grad.a_f);
                for ix in [(4, 4), (2, 5), (6, 1)] {
                    check(gc[ix], &|m, d| m.a_f[ix] += d);
                }
            }
            "phi_f" => {
                let gc = fft::fftshift_real(&grad.phi_f);
                for ix in [(4, 4), (1, 3), (5, 7)] {
                    check(gc[ix], &|m, d| m.phi_f[ix] += d);
                }
            }
            _ => {
                for l in 0..4 {
                    check(grad.lut[l], &|m, d| m.lut[l] += d);
                }
            }
        }
        let rel = (num / den.max(1e-300)).sqrt();
        assert!(rel < 1e-5, "{groups}: relative error {rel}");
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for g in ["a_src", "phi_src", "a_f", "phi_f", "lut"] {
            fd_model_grad(g);
        }
    }

    #[test]
    fn prediction_matches_model_forward() {
        let (_, nominal) = small(8, 4);
        let model = Perturbation::default().apply(&nominal).unwrap();
        let k = Kernels::new(Kernels::base(&model.grid, &model.distances).unwrap(), &model);
        let pattern = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 3 + j) % 4) as u16);
        let a = predict(&model, &k, 1, &pattern);
        let b = model.forward(SlmPhase::Indices(&pattern), model.distances[1]).unwrap().amplitude();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_contracts() {
        let (g, nominal) = small(8, 4);
        let d = display(&nominal, Perturbation::default(), 0.0);
        let ds = generate_dataset(&d, g, &nominal.distances, &spec(10)).unwrap();
        let none = FitConfig {
            groups: ParamGroups::default(),
            ..Default::default()
        };
        assert!(fit_model(&ds, &nominal, &none).is_err());
        let zero = FitConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(fit_model(&ds, &nominal, &zero).unwrap().model, nominal);
        // disabled groups stay bit-identical
        let only_phase = FitConfig {
            epochs: 2,
            lr: 0.01,
            groups: ParamGroups {
                phi_src: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let fit = fit_model(&ds, &nominal, &only_phase).unwrap();
        assert_ne!(fit.model.phi_src, nominal.phi_src);
        assert_eq!(fit.model.a_src, nominal.a_src);
        assert_eq!(fit.model.a_f, nominal.a_f);
        assert_eq!(fit.model.phi_f, nominal.phi_f);
        assert_eq!(fit.model.lut, nominal.lut);
        assert_eq!(fit.val_loss.len(), 2);
    }

    #[test]
    fn truth_model_is_a_fixed_point() {
        let (g, nominal) = small(8, 4);
        let truth = Perturbation::default().apply(&nominal).unwrap();
        let d = PhysicalDisplay::new(truth.clone(), QuantScheme::uniform(2).unwrap(), 0.0, 0).unwrap();
        let ds = generate_dataset(&d, g, &nominal.distances, &spec(10)).unwrap();
        assert!(eval_model(&truth, &ds, Split::Test).unwrap().psnr > 60.0);
        // captures are rounded to f32, so the gradient is small rather than zero
        let base = Kernels::base(&g, &ds.plane_distances).unwrap();
        let k = Kernels::new(base, &truth);
        let mut grad = ModelGrad::zeros((8, 8), 4);
        for e in ds.split_entries(Split::Train) {
            let cap = e.intensity.mapv(f64::sqrt);
            entry_loss_grad(&truth, &k, e.plane, &ds.patterns[e.pattern], &cap, 1.0, &mut grad);
        }
        assert!(grad.lut.iter().all(|g| g.abs() < 1e-5), "{:?}", grad.lut);
        let fit = fit_model(
            &ds,
            &truth,
            &FitConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fit.best_epoch, 0);
        assert_eq!(fit.model, truth);
    }

    #[test]
    fn recovers_source_amplitude_ripple() {
        let g = GridSpec::new(24, 24, 10.8e-6, 520e-9).unwrap();
        let nominal = CalibratedModel::nominal(g, vec![0.02, 0.025], 16).unwrap();
        let p = Perturbation {
            seed: 5,
            source_phase_std: 0.0,
            fourier_edge_phase: 0.0,
            lut_ripple: 0.0,
            ..Default::default()
        };
        let truth = p.apply(&nominal).unwrap();
        let d = PhysicalDisplay::new(truth.clone(), QuantScheme::uniform(4).unwrap(), 0.0, 0).unwrap();
        let sp = DatasetSpec {
            count: 30,
            optimized_fraction: 0.0,
            held_out_plane: None,
            ..Default::default()
        };
        let ds = generate_dataset(&d, g, &nominal.distances, &sp).unwrap();
        let cfg = FitConfig {
            epochs: 30,
            lr: 3e-3,
            groups: ParamGroups {
                a_src: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let fit = fit_model(&ds, &nominal, &cfg).unwrap();
        let mut worst = 0.0f64;
        for i in 4..20 {
            for j in 4..20 {
                let t = truth.a_src[(i, j)];
                worst = worst.max((fit.model.a_src[(i, j)] - t).abs() / t);
            }
        }
        assert!(worst < 0.02, "worst relative error {worst}");
    }

    #[test]
    fn held_out_entries_ignore_training_labels() {
        let (g, nominal) = small(8, 4);
        let d = display(&nominal, Perturbation::default(), 1e-3);
        let ds = generate_dataset(&d, g, &nominal.distances, &spec(10)).unwrap();
        let mut poisoned = ds.clone();
        for e in poisoned.entries.iter_mut().filter(|e| e.split == Split::Train) {
            e.intensity.mapv_inplace(|v| v * 3.0 + 1.0);
        }
        let a = eval_model(&nominal, &ds, Split::HeldOut).unwrap();
        let b = eval_model(&nominal, &poisoned, Split::HeldOut).unwrap();
        assert_eq!(a, b);
        assert!(eval_model(&nominal, &ds, Split::Train).unwrap() != eval_model(&nominal, &poisoned, Split::Train).unwrap());
    }

    #[test]
    fn ladder_is_monotone_in_train_psnr() {
        let (g, nominal) = small(12, 4);
        let d = display(&nominal, Perturbation::default(), 1e-3);
        let ds = generate_dataset(&d, g, &nominal.distances, &spec(12)).unwrap();
        let cfg = FitConfig {
            epochs: 3,
            lr: 5e-3,
            ..Default::default()
        };
        let (rows, _) = ablation(&ds, &nominal, &ParamGroups::ladder(), &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].label, "nominal");
        assert_eq!(rows[5].label, "+a_src+phi_src+phi_f+a_f+lut");
        for w in rows.windows(2) {
            assert!(w[1].train_psnr >= w[0].train_psnr - 1e-6);
        }
        assert!(rows[5].train_psnr > rows[0].train_psnr + 1.0);
    }
}
