//! Time-multiplexed phase optimization with quantizer-aware update rules.

use std::f64::consts::{LN_2, PI};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{map_phases, Engine, Evaluation, ScaleChoice};
use crate::error::{HoloError, Result};
use crate::propagation::CalibratedModel;
use crate::quantization::{quantize, quantize_indices, QuantScheme, SurrogateKind, SurrogateSpec};
use crate::supervision::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Continuous optimization, quantized once at export.
    Naive,
    /// Gradient step followed by projection onto the levels every iteration.
    Projected,
    /// Hard quantizer forward, identity backward.
    UnitJacobian,
    Sigmoid,
    GumbelSoftmax,
    /// Relaxed quantizer forward during optimization, hard at export.
    GumbelSoftmaxForward,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::Projected,
        Method::UnitJacobian,
        Method::Sigmoid,
        Method::GumbelSoftmax,
        Method::GumbelSoftmaxForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Projected => "projected",
            Method::UnitJacobian => "unit_jacobian",
            Method::Sigmoid => "sigmoid",
            Method::GumbelSoftmax => "gumbel_softmax",
            Method::GumbelSoftmaxForward => "gumbel_softmax_forward",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    pub fn surrogate_kind(self) -> SurrogateKind {
        match self {
            Method::Naive => SurrogateKind::Naive,
            Method::Projected | Method::UnitJacobian => SurrogateKind::UnitJacobian,
            Method::Sigmoid => SurrogateKind::Sigmoid,
            Method::GumbelSoftmax => SurrogateKind::GumbelSoftmax,
            Method::GumbelSoftmaxForward => SurrogateKind::GumbelSoftmaxForward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub decay: f64,
    pub score_scale_start: f64,
    pub score_scale_end: f64,
    /// Above this many levels the score scale shrinks as `levels_ref / L`,
    /// so the relaxation keeps a fixed width in radians. 0 disables.
    pub score_scale_levels: usize,
    /// Sigmoid interpolant slope at the first and last iteration.
    pub sigmoid_slope_start: f64,
    pub sigmoid_slope_end: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            tau0: 4.0,
            decay: LN_2,
            score_scale_start: 300.0,
            score_scale_end: 1000.0,
            score_scale_levels: 16,
            sigmoid_slope_start: 4.0,
            sigmoid_slope_end: 16.0,
        }
    }
}

impl AnnealSchedule {
    pub fn tau(&self, frac: f64) -> f64 {
        self.tau0 * (-self.decay * frac).exp()
    }

    pub fn score_scale(&self, frac: f64) -> f64 {
        self.score_scale_start + (self.score_scale_end - self.score_scale_start) * frac
    }

    /// Level-count factor on the score scale.
    pub fn score_scale_factor(&self, scheme: &QuantScheme) -> f64 {
        let l = scheme.len();
        if self.score_scale_levels == 0 || scheme.is_continuous() || l <= self.score_scale_levels {
            1.0
        } else {
            self.score_scale_levels as f64 / l as f64
        }
    }

    pub fn sigmoid_slope(&self, frac: f64) -> f64 {
        self.sigmoid_slope_start + (self.sigmoid_slope_end - self.sigmoid_slope_start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    JointGradient,
    #[default]
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stepper {
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Stepper {
    fn default() -> Self {
        Stepper::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 100,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub iterations: usize,
    pub lr: f64,
    pub frames: usize,
    pub method: Method,
    /// Gumbel-Softmax slope `w` times the mean level gap.
    pub gs_slope: f64,
    pub gumbel_noise: bool,
    pub anneal: AnnealSchedule,
    pub scale_mode: ScaleMode,
    pub scale_lr: f64,
    pub stepper: Stepper,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 2000,
            lr: 0.01,
            frames: 1,
            method: Method::GumbelSoftmax,
            gs_slope: 0.65,
            gumbel_noise: true,
            anneal: AnnealSchedule::default(),
            scale_mode: ScaleMode::ClosedForm,
            scale_lr: 0.01,
            stepper: Stepper::default(),
            early_stop: Some(EarlyStop::default()),
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(HoloError::config("iterations must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HoloError::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.frames == 0 {
            return Err(HoloError::config("frames must be >= 1"));
        }
        if !(self.anneal.tau0 > 0.0) {
            return Err(HoloError::config("anneal.tau0 must be > 0"));
        }
        if !(self.gs_slope > 0.0) {
            return Err(HoloError::config("gs_slope must be > 0"));
        }
        if self.anneal.score_scale_start <= 0.0 || self.anneal.score_scale_end <= 0.0 {
            return Err(HoloError::config("anneal score scales must be > 0"));
        }
        if self.anneal.sigmoid_slope_start <= 0.0 || self.anneal.sigmoid_slope_end <= 0.0 {
            return Err(HoloError::config("anneal sigmoid slopes must be > 0"));
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(HoloError::config("early_stop.patience must be >= 1"));
            }
        }
        if self.scale_mode == ScaleMode::JointGradient && !(self.scale_lr > 0.0) {
            return Err(HoloError::config("scale_lr must be > 0"));
        }
        Ok(())
    }

    /// Annealing position of iteration `t`, in `[0, 1]`.
    pub fn progress(&self, t: usize) -> f64 {
        t as f64 / (self.iterations.max(2) - 1) as f64
    }

    /// Surrogate parameters in effect at iteration `t`.
    pub fn surrogate_at(&self, t: usize, scheme: &QuantScheme) -> SurrogateSpec {
        let frac = self.progress(t);
        let kind = self.method.surrogate_kind();
        let slope = match kind {
            SurrogateKind::Sigmoid => self.anneal.sigmoid_slope(frac),
            SurrogateKind::GumbelSoftmax | SurrogateKind::GumbelSoftmaxForward => {
                self.gs_slope / scheme.mean_gap().max(f64::MIN_POSITIVE)
            }
            _ => 1.0,
        };
        SurrogateSpec {
            kind,
            slope,
            temperature: self.anneal.tau(frac),
            score_scale: self.anneal.score_scale(frac) * self.anneal.score_scale_factor(scheme),
            noise_enabled: self.gumbel_noise,
            rng_seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }
}

/// Tracks the best loss and signals when it stalls.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    cfg: EarlyStop,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(cfg: EarlyStop) -> Self {
        EarlyStopper {
            cfg,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a loss; returns `true` once `patience` losses in a row failed
    /// to improve the best by the relative tolerance.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.best.is_infinite() || loss < self.best * (1.0 - self.cfg.tolerance) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.cfg.patience
    }
}

/// Runs `step` until `iterations` or early stopping, collecting the losses.
pub fn run_loop(
    iterations: usize,
    early_stop: Option<EarlyStop>,
    mut step: impl FnMut(usize) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut stopper = early_stop.map(EarlyStopper::new);
    let mut history = Vec::new();
    for t in 0..iterations {
        let loss = step(t)?;
        history.push(loss);
        if let Some(s) = stopper.as_mut() {
            if s.observe(loss) {
                break;
            }
        }
    }
    Ok(history)
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    ms: f64,
    vs: f64,
    steps: i32,
}

/// Mutable state of one optimization.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub phases: Vec<Array2<f64>>,
    pub scale: f64,
    pub iteration: usize,
    moments: Moments,
}

impl OptimState {
    pub fn new(phases: Vec<Array2<f64>>, scale: f64) -> Self {
        let zeros: Vec<Array2<f64>> = phases.iter().map(|p| Array2::zeros(p.dim())).collect();
        OptimState {
            moments: Moments {
                m: zeros.clone(),
                v: zeros,
                ms: 0.0,
                vs: 0.0,
                steps: 0,
            },
            phases,
            scale,
            iteration: 0,
        }
    }

    /// Uniform phases in `(-pi, pi)`, frame after frame from one seeded stream.
    pub fn random(shape: (usize, usize), frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..frames)
            .map(|_| Array2::from_shape_fn(shape, |_| rng.random_range(-PI..PI)))
            .collect();
        OptimState::new(phases, 1.0)
    }

    /// Applies one descent step along `grads` (and `g_s` for the scale).
    pub fn apply(&mut self, grads: &[Array2<f64>], g_s: Option<f64>, cfg: &OptimConfig) {
        match cfg.stepper {
            Stepper::Gd => {
                for (p, g) in self.phases.iter_mut().zip(grads) {
                    p.zip_mut_with(g, |p, g| *p -= cfg.lr * g);
                }
                if let Some(gs) = g_s {
                    self.scale -= cfg.scale_lr * gs;
                }
            }
            Stepper::Adam { beta1, beta2, eps } => {
                let mo = &mut self.moments;
                mo.steps += 1;
                let c1 = 1.0 - beta1.powi(mo.steps);
                let c2 = 1.0 - beta2.powi(mo.steps);
                for ((p, g), (m, v)) in self
                    .phases
                    .iter_mut()
                    .zip(grads)
                    .zip(mo.m.iter_mut().zip(mo.v.iter_mut()))
                {
                    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
                if let Some(g) = g_s {
                    mo.ms = beta1 * mo.ms + (1.0 - beta1) * g;
                    mo.vs = beta2 * mo.vs + (1.0 - beta2) * g * g;
                    self.scale -= cfg.scale_lr * (mo.ms / c1) / ((mo.vs / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One optimization problem: objective, model and quantizer.
pub struct Problem<'a> {
    pub engine: Engine<'a>,
    pub scheme: &'a QuantScheme,
    pub config: &'a OptimConfig,
}

impl<'a> Problem<'a> {
    pub fn new(
        objective: &'a Objective,
        model: &'a CalibratedModel,
        scheme: &'a QuantScheme,
        config: &'a OptimConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Problem {
            engine: Engine::new(objective, model)?,
            scheme,
            config,
        })
    }

    pub(crate) fn scale_choice(&self, state: &OptimState) -> ScaleChoice {
        match self.config.scale_mode {
            ScaleMode::ClosedForm => ScaleChoice::ClosedForm,
            ScaleMode::JointGradient => ScaleChoice::Fixed(state.scale),
        }
    }

    /// Loss and `dL/dphi` at the current iterate under the configured method.
    pub fn phase_gradient(&self, state: &OptimState) -> Result<(Evaluation, Vec<Array2<f64>>)> {
        self.gradient_for(self.config.method, state)
    }

    fn gradient_for(&self, method: Method, state: &OptimState) -> Result<(Evaluation, Vec<Array2<f64>>)> {
        let mut spec = self.config.surrogate_at(state.iteration, self.scheme);
        spec.kind = method.surrogate_kind();
        let (thetas, derivs) = match method {
            Method::Naive => (state.phases.clone(), vec![None; state.phases.len()]),
            _ => map_phases(&state.phases, self.scheme, &spec, state.iteration as u64, false)?,
        };
        let mut ev = self.engine.evaluate(&thetas, self.scale_choice(state), true)?;
        let mut grads = ev.grad.take().expect("gradient requested");
        for (g, d) in grads.iter_mut().zip(&derivs) {
            if let Some(d) = d {
                *g *= d;
            }
        }
        Ok((ev, grads))
    }

    pub(crate) fn finish_step(&self, state: &mut OptimState, ev: &Evaluation, grads: &[Array2<f64>]) {
        let g_s = match self.config.scale_mode {
            ScaleMode::ClosedForm => {
                state.scale = ev.scale;
                None
            }
            ScaleMode::JointGradient => Some(ev.dl_ds),
        };
        state.apply(grads, g_s, self.config);
        if self.config.scale_mode == ScaleMode::JointGradient {
            state.scale = state.scale.max(1e-12);
        }
        state.iteration += 1;
    }

    /// Continuous step; the quantizer is bypassed in both passes.
    pub fn step_naive(&self, state: &mut OptimState) -> Result<f64> {
        let (ev, grads) = self.gradient_for(Method::Naive, state)?;
        self.finish_step(state, &ev, &grads);
        Ok(ev.loss)
    }

    /// Gradient step, then projection of every phase onto the levels.
    pub fn step_projected(&self, state: &mut OptimState) -> Result<f64> {
        let (ev, grads) = self.gradient_for(Method::Projected, state)?;
        self.finish_step(state, &ev, &grads);
        for p in state.phases.iter_mut() {
            *p = quantize(p, self.scheme);
        }
        Ok(ev.loss)
    }

    /// Quantized (or relaxed) forward pass, surrogate backward pass.
    pub fn step_surrogate(&self, state: &mut OptimState) -> Result<f64> {
        let (ev, grads) = self.phase_gradient(state)?;
        self.finish_step(state, &ev, &grads);
        Ok(ev.loss)
    }

    pub fn step(&self, state: &mut OptimState) -> Result<f64> {
        match self.config.method {
            Method::Naive => self.step_naive(state),
            Method::Projected => self.step_projected(state),
            _ => self.step_surrogate(state),
        }
    }

    /// Initial state: seeded uniform phases and the closed-form scale.
    pub fn init(&self) -> Result<OptimState> {
        let mut st = OptimState::random(self.engine.objective().grid.shape(), self.config.frames, self.config.seed);
        if self.config.method == Method::Projected {
            for p in st.phases.iter_mut() {
                *p = quantize(p, self.scheme);
            }
        }
        st.scale = self.evaluate_export(&export_phases(&st.phases, self.scheme)?)?.scale;
        Ok(st)
    }

    /// Evaluation of exported phases with the closed-form scale.
    pub fn evaluate_export(&self, exported: &ExportedPhases) -> Result<Evaluation> {
        self.engine.evaluate(&exported.radians, ScaleChoice::ClosedForm, false)
    }
}

/// Hard-quantized phases as handed to the display.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedPhases {
    pub radians: Vec<Array2<f64>>,
    /// Level indices; `None` for a continuous scheme.
    pub indices: Option<Vec<Array2<u16>>>,
}

pub fn export_phases(phases: &[Array2<f64>], scheme: &QuantScheme) -> Result<ExportedPhases> {
    let radians: Vec<Array2<f64>> = phases.iter().map(|p| quantize(p, scheme)).collect();
    let indices = if scheme.is_continuous() {
        None
    } else {
        Some(phases.iter().map(|p| quantize_indices(p, scheme)).collect::<Result<Vec<_>>>()?)
    };
    Ok(ExportedPhases { radians, indices })
}

#[derive(Debug, Clone)]
pub struct OptimRun {
    /// Final unconstrained iterate.
    pub phases: Vec<Array2<f64>>,
    pub scale: f64,
    pub loss_history: Vec<f64>,
    pub exported: ExportedPhases,
    /// Closed-form evaluation of the exported phases.
    pub final_eval: Evaluation,
}

/// Runs the configured method on `objective` from a seeded start.
pub fn optimize(
    objective: &Objective,
    model: &CalibratedModel,
    scheme: &QuantScheme,
    config: &OptimConfig,
) -> Result<OptimRun> {
    let problem = Problem::new(objective, model, scheme, config)?;
    let state = problem.init()?;
    optimize_from(&problem, state)
}

pub fn optimize_from(problem: &Problem<'_>, mut state: OptimState) -> Result<OptimRun> {
    let history = run_loop(problem.config.iterations, problem.config.early_stop, |_| problem.step(&mut state))?;
    let exported = export_phases(&state.phases, problem.scheme)?;
    let final_eval = problem.evaluate_export(&exported)?;
    Ok(OptimRun {
        phases: state.phases,
        scale: state.scale,
        loss_history: history,
        exported,
        final_eval,
    })
}

/// The projected-GD variant with the projection inside the forward model:
/// `phi <- phi - lr * dL(q)/dq` at `q = Pi(phi)`. Computed without the
/// surrogate machinery, as an independent route to the unit-Jacobian step.
pub fn projected_forward_update(problem: &Problem<'_>, state: &mut OptimState) -> Result<f64> {
    let q: Vec<Array2<f64>> = state.phases.iter().map(|p| quantize(p, problem.scheme)).collect();
    let choice = problem.scale_choice(state);
    let ev = problem.engine.evaluate(&q, choice, true)?;
    let grads = ev.grad.clone().expect("gradient requested");
    problem.finish_step(state, &ev, &grads);
    Ok(ev.loss)
}
