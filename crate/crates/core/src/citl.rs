//! Simulated camera-in-the-loop: a hidden "physical" display and the CITL
//! update rules.
//!
//! The optimizer only sees the display through [`PhysicalDisplay::capture`];
//! the truth model is never exposed.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::map_phases;
use crate::error::{HoloError, Result};
use crate::field::{frame_mean, frequency_grid};
use crate::metrics::psnr;
use crate::optimizer::{export_phases, run_loop, ExportedPhases, Method, OptimConfig, OptimState, Problem};
use crate::propagation::{CalibratedModel, SlmPhase};
use crate::quantization::{quantize, quantize_indices, QuantScheme};
use crate::supervision::{Measure, Objective};
use crate::synthetic::gaussian_blur;

/// Deviations of the truth display from the nominal model. Every term is
/// drawn from `seed`; zero magnitudes disable a term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub seed: u64,
    /// Peak relative deviation of the source amplitude ripple.
    pub source_ripple: f64,
    /// Standard deviation of the smooth source phase, radians.
    pub source_phase_std: f64,
    /// Blur width of the source phase as a fraction of the smaller grid side.
    pub source_phase_blur: f64,
    /// Quadratic Fourier phase at the band edge `1 / (2 pitch)`, radians.
    pub fourier_edge_phase: f64,
    /// Amplitude of a sinusoidal deviation of the lookup table, radians.
    pub lut_ripple: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            seed: 0,
            source_ripple: 0.15,
            source_phase_std: 0.5,
            source_phase_blur: 0.125,
            fourier_edge_phase: 1.0,
            lut_ripple: 0.15,
        }
    }
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            seed: 0,
            source_ripple: 0.0,
            source_phase_std: 0.0,
            source_phase_blur: 0.125,
            fourier_edge_phase: 0.0,
            lut_ripple: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.source_ripple,
            self.source_phase_std,
            self.source_phase_blur,
            self.fourier_edge_phase,
            self.lut_ripple,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(HoloError::config("perturbation magnitudes must be finite"));
        }
        if !(0.0..1.0).contains(&self.source_ripple) {
            return Err(HoloError::config("perturbation.source_ripple must be in [0, 1)"));
        }
        // the lut must stay increasing: d/dx (x + r sin x) = 1 + r cos x > 0
        if !(0.0..1.0).contains(&self.lut_ripple.abs()) {
            return Err(HoloError::config("perturbation.lut_ripple must be in (-1, 1)"));
        }
        Ok(())
    }

    /// Applies the perturbation to a copy of `nominal`.
    pub fn apply(&self, nominal: &CalibratedModel) -> Result<CalibratedModel> {
        self.validate()?;
        let mut m = nominal.clone();
        let (rows, cols) = m.grid.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        if self.source_ripple != 0.0 {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let cycles = rng.random_range(0.5..2.0);
                    let angle = rng.random_range(0.0..TAU);
                    let offset = rng.random_range(0.0..TAU);
                    (cycles * angle.sin(), cycles * angle.cos(), offset)
                })
                .collect();
            let ripple = Array2::from_shape_fn((rows, cols), |(i, j)| {
                waves
                    .iter()
                    .map(|(ky, kx, o)| (TAU * (ky * i as f64 / rows as f64 + kx * j as f64 / cols as f64) + o).cos())
                    .sum::<f64>()
            });
            let peak = ripple.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
            m.a_src.zip_mut_with(&ripple, |a, r| *a *= 1.0 + self.source_ripple * r / peak);
        }

        if self.source_phase_std != 0.0 {
            let white = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
            let sigma = self.source_phase_blur * rows.min(cols) as f64;
            let smooth = gaussian_blur(&white, sigma);
            let mean = smooth.mean().unwrap_or(0.0);
            let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64)
                .sqrt()
                .max(1e-300);
            m.phi_src
                .zip_mut_with(&smooth, |p, s| *p += self.source_phase_std * (s - mean) / std);
        }

        if self.fourier_edge_phase != 0.0 {
            let (fx, fy) = frequency_grid(&m.grid)?;
            let edge = 1.0 / (2.0 * m.grid.pitch);
            let c = self.fourier_edge_phase / (edge * edge);
            ndarray::Zip::from(&mut m.phi_f)
                .and(&fx)
                .and(&fy)
                .for_each(|p, &x, &y| *p += c * (x * x + y * y));
        }

        if self.lut_ripple != 0.0 {
            for v in m.lut.iter_mut() {
                *v += self.lut_ripple * v.sin();
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// The hidden display. Phases are always hard-quantized before display.
#[derive(Debug, Clone)]
pub struct PhysicalDisplay {
    truth: CalibratedModel,
    scheme: QuantScheme,
    /// Capture noise standard deviation relative to the peak noiseless intensity.
    noise: f64,
    seed: u64,
}

impl PhysicalDisplay {
    pub fn new(truth: CalibratedModel, scheme: QuantScheme, noise: f64, seed: u64) -> Result<Self> {
        truth.validate()?;
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(HoloError::config(format!("capture noise must be >= 0, got {noise}")));
        }
        if !scheme.is_continuous() && truth.lut.len() != scheme.len() {
            return Err(HoloError::config(format!(
                "display lut has {} entries, scheme has {} levels",
                truth.lut.len(),
                scheme.len()
            )));
        }
        Ok(PhysicalDisplay {
            truth,
            scheme,
            noise,
            seed,
        })
    }

    /// The canonical mismatched display built from `nominal`.
    pub fn canonical(nominal: &CalibratedModel, scheme: QuantScheme, seed: u64) -> Result<Self> {
        let p = Perturbation {
            seed,
            ..Default::default()
        };
        PhysicalDisplay::new(p.apply(nominal)?, scheme, 1e-3, seed)
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.truth.grid.shape()
    }

    /// Time-averaged intensity of `phases` at distance `z`, with Gaussian
    /// noise clipped at zero. `key` selects the noise stream.
    pub fn capture(&self, phases: &[Array2<f64>], z: f64, key: u64) -> Result<Array2<f64>> {
        if phases.is_empty() {
            return Err(HoloError::Empty("capture needs at least one frame".into()));
        }
        let shape = self.truth.grid.shape();
        if let Some(p) = phases.iter().find(|p| p.dim() != shape) {
            return Err(HoloError::dim(format!("phase is {:?}, display is {:?}", p.dim(), shape)));
        }
        let maps = phases
            .par_iter()
            .map(|p| -> Result<Array2<f64>> {
                let field = if self.scheme.is_continuous() {
                    self.truth.forward(SlmPhase::Radians(&quantize(p, &self.scheme)), z)?
                } else {
                    let idx = quantize_indices(p, &self.scheme)?;
                    self.truth.forward(SlmPhase::Indices(&idx), z)?
                };
                Ok(field.intensity())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.add_noise(frame_mean(&maps), key))
    }

    /// Capture of a single frame of level indices.
    pub fn capture_indices(&self, indices: &Array2<u16>, z: f64, key: u64) -> Result<Array2<f64>> {
        let intensity = self.truth.forward(SlmPhase::Indices(indices), z)?.intensity();
        Ok(self.add_noise(intensity, key))
    }

    fn add_noise(&self, mut intensity: Array2<f64>, key: u64) -> Array2<f64> {
        if self.noise > 0.0 {
            let peak = intensity.iter().cloned().fold(0.0, f64::max);
            let sigma = self.noise * peak;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(key);
            intensity.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
        }
        intensity.mapv_inplace(|v| v.max(0.0));
        intensity
    }
}

fn capture_key(iteration: u64, plane: usize) -> u64 {
    iteration.wrapping_mul(1 << 10).wrapping_add(plane as u64)
}

/// Captured amplitudes for every data plane of the objective.
fn measure(
    objective: &Objective,
    display: &PhysicalDisplay,
    phases: &[Array2<f64>],
    iteration: u64,
) -> Result<Vec<Option<Vec<f64>>>> {
    objective
        .planes
        .iter()
        .enumerate()
        .map(|(j, plane)| match &plane.data {
            None => Ok(None),
            Some(d) if d.measure == Measure::Identity => {
                let cap = display.capture(phases, plane.distance, capture_key(iteration, j))?;
                Ok(Some(cap.iter().map(|v| v.sqrt()).collect()))
            }
            Some(_) => Err(HoloError::config("camera-in-the-loop needs image-plane data terms")),
        })
        .collect()
}

/// Captured residuals, backward pass through the simulated model at the
/// continuous phases. Returns the loss at the captured amplitudes.
pub fn citl_step_naive(problem: &Problem<'_>, display: &PhysicalDisplay, state: &mut OptimState) -> Result<f64> {
    let it = state.iteration as u64;
    let measured = measure(problem.engine.objective(), display, &state.phases, it)?;
    let mut ev = problem
        .engine
        .evaluate_measured(&state.phases, &measured, problem.scale_choice(state), true)?;
    let grads = ev.grad.take().expect("gradient requested");
    problem.finish_step(state, &ev, &grads);
    Ok(ev.loss)
}

/// Captured residuals, backward pass through the simulated model at the
/// quantized phases and then through the configured surrogate.
pub fn citl_step_surrogate(
    problem: &Problem<'_>,
    display: &PhysicalDisplay,
    state: &mut OptimState,
) -> Result<f64> {
    let it = state.iteration as u64;
    let measured = measure(problem.engine.objective(), display, &state.phases, it)?;
    let spec = problem.config.surrogate_at(state.iteration, problem.scheme);
    let (_, derivs) = map_phases(&state.phases, problem.scheme, &spec, it, false)?;
    let q: Vec<Array2<f64>> = state.phases.iter().map(|p| quantize(p, problem.scheme)).collect();
    let mut ev = problem
        .engine
        .evaluate_measured(&q, &measured, problem.scale_choice(state), true)?;
    let mut grads = ev.grad.take().expect("gradient requested");
    for (g, d) in grads.iter_mut().zip(&derivs) {
        if let Some(d) = d {
            *g *= d;
        }
    }
    problem.finish_step(state, &ev, &grads);
    Ok(ev.loss)
}

#[derive(Debug, Clone)]
pub struct CitlRun {
    pub phases: Vec<Array2<f64>>,
    pub exported: ExportedPhases,
    pub loss_history: Vec<f64>,
    /// Mean PSNR of the final captures against the data targets.
    pub psnr: f64,
    /// Final captured amplitudes, scaled to the targets, one per data plane.
    pub captures: Vec<Array2<f64>>,
}

/// Scaled, clipped captured amplitudes of `phases` and their mean PSNR
/// against the objective's image-plane targets.
pub fn captured_quality(
    objective: &Objective,
    display: &PhysicalDisplay,
    phases: &[Array2<f64>],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let shape = objective.grid.shape();
    let measured = measure(objective, display, phases, u64::MAX >> 11)?;
    let (mut sat, mut saa) = (0.0, 0.0);
    for (plane, m) in objective.planes.iter().zip(&measured) {
        if let (Some(d), Some(a)) = (&plane.data, m) {
            for ((c, t), a) in d.weight.iter().zip(&d.target).zip(a) {
                sat += c * a * t;
                saa += c * a * a;
            }
        }
    }
    let s = if saa > 0.0 { sat / saa } else { 1.0 };
    let mut total = 0.0;
    let mut images = Vec::new();
    for (plane, m) in objective.planes.iter().zip(&measured) {
        if let (Some(d), Some(a)) = (&plane.data, m) {
            let img = Array2::from_shape_vec(shape, a.iter().map(|v| (s * v).clamp(0.0, 1.0)).collect())
                .expect("capture shape");
            let target = Array2::from_shape_vec(shape, d.target.clone()).expect("target shape");
            total += psnr(&img, &target)?;
            images.push(img);
        }
    }
    if images.is_empty() {
        return Err(HoloError::Empty("objective has no data terms".into()));
    }
    Ok((total / images.len() as f64, images))
}

/// Runs camera-in-the-loop optimization from the configured seeded start.
/// `Method::Naive` uses [`citl_step_naive`]; every other method uses
/// [`citl_step_surrogate`] with its surrogate.
pub fn citl_optimize(
    objective: &Objective,
    nominal: &CalibratedModel,
    display: &PhysicalDisplay,
    config: &OptimConfig,
) -> Result<CitlRun> {
    let scheme = display.scheme().clone();
    let problem = Problem::new(objective, nominal, &scheme, config)?;
    let state = problem.init()?;
    citl_optimize_from(&problem, display, state)
}

/// CITL iterations from an explicit starting state. The problem's scheme
/// must be the display's scheme.
pub fn citl_optimize_from(problem: &Problem<'_>, display: &PhysicalDisplay, mut state: OptimState) -> Result<CitlRun> {
    if problem.scheme != display.scheme() {
        return Err(HoloError::config("optimization scheme differs from the display scheme"));
    }
    let config = problem.config;
    let history = run_loop(config.iterations, config.early_stop, |_| match config.method {
        Method::Naive => citl_step_naive(problem, display, &mut state),
        _ => citl_step_surrogate(problem, display, &mut state),
    })?;
    let exported = export_phases(&state.phases, problem.scheme)?;
    let (psnr, captures) = captured_quality(problem.engine.objective(), display, &exported.radians)?;
    Ok(CitlRun {
        phases: state.phases,
        exported,
        loss_history: history,
        psnr,
        captures,
    })
}
