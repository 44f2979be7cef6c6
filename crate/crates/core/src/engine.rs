//! Forward evaluation and reverse-mode gradients of an [`Objective`] with
//! respect to the displayed SLM phases.
//!
//! Complex gradients use the convention `g = dL/dRe + i dL/dIm`, so a linear
//! stage `y = A x` back-propagates as `g_x = A^H g_y`.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{HoloError, Result};
use crate::fft;
use crate::propagation::{CalibratedModel, TransferFunction};
use crate::quantization::{
    gumbel_softmax_with_derivative, quantize, sigmoid_relax, surrogate_derivative, NoiseKey,
    QuantScheme, SurrogateKind, SurrogateSpec,
};
use crate::supervision::{Measure, Objective};

/// Regularizes `d|u|/du = u / (|u| + EPS)` at field zeros.
pub const AMPLITUDE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleChoice {
    Fixed(f64),
    /// Least-squares optimal `s` for the current amplitudes.
    ClosedForm,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub scale: f64,
    pub dl_ds: f64,
    /// Time-averaged measured amplitude of each plane's data term (unscaled).
    pub amplitudes: Vec<Option<Vec<f64>>>,
    /// `dL/dtheta` per frame, when requested.
    pub grad: Option<Vec<Array2<f64>>>,
}

struct FrameForward {
    src: Array2<Complex64>,
    data: Vec<Option<Vec<Complex64>>>,
    reg: Vec<Option<Vec<Complex64>>>,
}

/// An objective bound to a model, with transfer functions resolved.
pub struct Engine<'a> {
    objective: &'a Objective,
    model: &'a CalibratedModel,
    transfers: Vec<Arc<TransferFunction>>,
}

fn check_finite<'b>(vals: impl IntoIterator<Item = &'b Complex64>, stage: &'static str) -> Result<()> {
    if vals.into_iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        Ok(())
    } else {
        Err(HoloError::NonFinite { stage })
    }
}

fn time_average(frames: &[&[Complex64]]) -> Vec<f64> {
    let t = frames.len();
    let inv_t = 1.0 / t as f64;
    let mut buf = vec![0.0; t];
    (0..frames[0].len())
        .map(|i| {
            for (b, f) in buf.iter_mut().zip(frames) {
                *b = f[i].norm_sqr();
            }
            buf.sort_unstable_by(f64::total_cmp);
            (buf.iter().sum::<f64>() * inv_t).sqrt()
        })
        .collect()
}

impl<'a> Engine<'a> {
    pub fn new(objective: &'a Objective, model: &'a CalibratedModel) -> Result<Self> {
        if objective.grid.shape() != model.grid.shape() {
            return Err(HoloError::dim(format!(
                "objective grid {:?} does not match model grid {:?}",
                objective.grid.shape(),
                model.grid.shape()
            )));
        }
        let transfers = objective
            .planes
            .iter()
            .map(|p| model.transfer(p.distance))
            .collect::<Result<Vec<_>>>()?;
        Ok(Engine {
            objective,
            model,
            transfers,
        })
    }

    pub fn objective(&self) -> &Objective {
        self.objective
    }

    pub fn model(&self) -> &CalibratedModel {
        self.model
    }

    fn forward_frame(&self, theta: &Array2<f64>) -> Result<FrameForward> {
        let src = self.model.source_field(theta);
        check_finite(src.iter(), "source field")?;
        let spec = fft::fft2_raw(src.clone());
        let mut data = Vec::with_capacity(self.objective.planes.len());
        let mut reg = Vec::with_capacity(self.objective.planes.len());
        for (plane, tf) in self.objective.planes.iter().zip(&self.transfers) {
            let mut s = spec.clone();
            s.zip_mut_with(tf.natural(), |a, h| *a *= h);
            let u = fft::ifft2_raw(s);
            check_finite(u.iter(), "propagated field")?;
            data.push(plane.data.as_ref().map(|d| d.measure.apply(&u)));
            reg.push(
                plane
                    .reg
                    .as_ref()
                    .map(|r| Measure::Stft(r.layout, r.window.clone()).apply(&u)),
            );
        }
        Ok(FrameForward { src, data, reg })
    }

    pub fn evaluate(&self, thetas: &[Array2<f64>], scale: ScaleChoice, want_grad: bool) -> Result<Evaluation> {
        self.evaluate_inner(thetas, scale, want_grad, None)
    }

    /// Like [`Engine::evaluate`], but the loss, scale and `dL/dA` use the
    /// given measured amplitudes in place of the simulated ones. The backward
    /// pass still runs through the simulated fields.
    ///
    /// `measured[j]` must be present exactly for planes with a data term.
    pub fn evaluate_measured(
        &self,
        thetas: &[Array2<f64>],
        measured: &[Option<Vec<f64>>],
        scale: ScaleChoice,
        want_grad: bool,
    ) -> Result<Evaluation> {
        let planes = &self.objective.planes;
        let ok = measured.len() == planes.len()
            && planes.iter().zip(measured).all(|(p, m)| match (&p.data, m) {
                (Some(d), Some(m)) => d.target.len() == m.len(),
                (None, None) => true,
                _ => false,
            });
        if !ok {
            return Err(HoloError::dim("measured amplitudes do not match the objective's data terms"));
        }
        self.evaluate_inner(thetas, scale, want_grad, Some(measured))
    }

    fn evaluate_inner(
        &self,
        thetas: &[Array2<f64>],
        scale: ScaleChoice,
        want_grad: bool,
        measured: Option<&[Option<Vec<f64>>]>,
    ) -> Result<Evaluation> {
        if thetas.is_empty() {
            return Err(HoloError::Empty("no frames to evaluate".into()));
        }
        let shape = self.objective.grid.shape();
        if let Some(t) = thetas.iter().find(|t| t.dim() != shape) {
            return Err(HoloError::dim(format!("phase is {:?}, grid is {:?}", t.dim(), shape)));
        }
        if thetas.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(HoloError::NonFinite { stage: "slm phase" });
        }
        let frames: Vec<FrameForward> = thetas
            .par_iter()
            .map(|t| self.forward_frame(t))
            .collect::<Result<Vec<_>>>()?;
        let nplanes = self.objective.planes.len();
        let tcount = frames.len() as f64;

        let mut amp_data: Vec<Option<Vec<f64>>> = Vec::with_capacity(nplanes);
        let mut amp_reg: Vec<Option<Vec<f64>>> = Vec::with_capacity(nplanes);
        for j in 0..nplanes {
            amp_data.push(self.objective.planes[j].data.as_ref().map(|_| {
                let fr: Vec<&[Complex64]> = frames.iter().map(|f| f.data[j].as_deref().unwrap()).collect();
                time_average(&fr)
            }));
            amp_reg.push(self.objective.planes[j].reg.as_ref().map(|_| {
                let fr: Vec<&[Complex64]> = frames.iter().map(|f| f.reg[j].as_deref().unwrap()).collect();
                time_average(&fr)
            }));
        }

        let amp_loss: &[Option<Vec<f64>>] = measured.unwrap_or(&amp_data);

        // sufficient statistics in a fixed order
        let (mut sat, mut saa, mut stt, mut var_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut variances: Vec<Option<Vec<(f64, f64)>>> = Vec::with_capacity(nplanes);
        for (j, plane) in self.objective.planes.iter().enumerate() {
            if let (Some(d), Some(a)) = (&plane.data, &amp_loss[j]) {
                for ((c, t), a) in d.weight.iter().zip(&d.target).zip(a) {
                    sat += c * a * t;
                    saa += c * a * a;
                    stt += c * t * t;
                }
            }
            variances.push(match (&plane.reg, &amp_reg[j]) {
                (Some(r), Some(a)) => {
                    let w2 = r.layout.w * r.layout.w;
                    let mut out = Vec::with_capacity(r.patch_weight.len());
                    for (p, chunk) in a.chunks_exact(w2).enumerate() {
                        let mean = chunk.iter().sum::<f64>() / w2 as f64;
                        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w2 as f64;
                        var_sum += r.patch_weight[p] * var;
                        out.push((mean, var));
                    }
                    Some(out)
                }
                _ => None,
            });
        }
        let s = match scale {
            ScaleChoice::Fixed(s) => s,
            ScaleChoice::ClosedForm => {
                let den = saa + var_sum;
                if den > 0.0 {
                    (sat / den).max(0.0)
                } else {
                    1.0
                }
            }
        };
        if !s.is_finite() {
            return Err(HoloError::NonFinite { stage: "scale" });
        }
        let mut loss = 0.0;
        for (j, plane) in self.objective.planes.iter().enumerate() {
            if let (Some(d), Some(a)) = (&plane.data, &amp_loss[j]) {
                for ((c, t), a) in d.weight.iter().zip(&d.target).zip(a) {
                    let r = s * a - t;
                    loss += c * r * r;
                }
            }
        }
        loss += s * s * var_sum;
        let dl_ds = 2.0 * (s * saa - sat) + 2.0 * s * var_sum;
        let _ = stt;
        if !loss.is_finite() {
            return Err(HoloError::NonFinite { stage: "loss" });
        }

        let grad = if want_grad {
            // dL/dA per plane
            let mut g_data: Vec<Option<Vec<f64>>> = Vec::with_capacity(nplanes);
            let mut g_reg: Vec<Option<Vec<f64>>> = Vec::with_capacity(nplanes);
            for (j, plane) in self.objective.planes.iter().enumerate() {
                g_data.push(match (&plane.data, &amp_loss[j]) {
                    (Some(d), Some(a)) => Some(
                        d.weight
                            .iter()
                            .zip(&d.target)
                            .zip(a)
                            .map(|((c, t), a)| 2.0 * c * s * (s * a - t))
                            .collect(),
                    ),
                    _ => None,
                });
                g_reg.push(match (&plane.reg, &amp_reg[j], &variances[j]) {
                    (Some(r), Some(a), Some(mv)) => {
                        let w2 = r.layout.w * r.layout.w;
                        let mut g = Vec::with_capacity(a.len());
                        for (p, chunk) in a.chunks_exact(w2).enumerate() {
                            let k = r.patch_weight[p] * s * s * 2.0 / w2 as f64;
                            g.extend(chunk.iter().map(|v| k * (v - mv[p].0)));
                        }
                        Some(g)
                    }
                    _ => None,
                });
            }
            let per_frame = |f: &FrameForward| -> Result<Array2<f64>> {
                let mut g_spec = Array2::<Complex64>::zeros(shape);
                for (j, plane) in self.objective.planes.iter().enumerate() {
                    let mut g_u: Option<Array2<Complex64>> = None;
                    let mut add = |g: Array2<Complex64>| match g_u.as_mut() {
                        Some(acc) => *acc += &g,
                        None => g_u = Some(g),
                    };
                    if let (Some(d), Some(ga), Some(a), Some(v)) =
                        (&plane.data, &g_data[j], &amp_data[j], &f.data[j])
                    {
                        let gm = amp_backward(ga, a, v, tcount);
                        add(d.measure.adjoint(&gm, shape));
                    }
                    if let (Some(r), Some(ga), Some(a), Some(v)) =
                        (&plane.reg, &g_reg[j], &amp_reg[j], &f.reg[j])
                    {
                        let gm = amp_backward(ga, a, v, tcount);
                        add(Measure::Stft(r.layout, r.window.clone()).adjoint(&gm, shape));
                    }
                    if let Some(g_u) = g_u {
                        let mut gs = fft::fft2_raw(g_u);
                        gs.zip_mut_with(self.transfers[j].natural(), |a, h| *a *= h.conj());
                        g_spec += &gs;
                    }
                }
                let g_src = fft::ifft2_raw(g_spec);
                check_finite(g_src.iter(), "backpropagated field")?;
                let g_theta = ndarray::Zip::from(&g_src)
                    .and(&f.src)
                    .map_collect(|g, u| (g.conj() * Complex64::i() * u).re);
                if g_theta.iter().any(|v| !v.is_finite()) {
                    return Err(HoloError::NonFinite { stage: "phase gradient" });
                }
                Ok(g_theta)
            };
            Some(frames.par_iter().map(per_frame).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };

        let amplitudes = match measured {
            Some(m) => m.to_vec(),
            None => amp_data,
        };
        Ok(Evaluation {
            loss,
            scale: s,
            dl_ds,
            amplitudes,
            grad,
        })
    }
}

/// `g_V = g_A V / (T (A + eps))` for `A = sqrt(mean_t |V_t|^2)`.
fn amp_backward(g_a: &[f64], a: &[f64], v: &[Complex64], t: f64) -> Vec<Complex64> {
    g_a.iter()
        .zip(a)
        .zip(v)
        .map(|((g, a), v)| v * (g / (t * (a + AMPLITUDE_EPS))))
        .collect()
}

/// SLM phases used in the forward pass and their derivative with respect to
/// the optimized phases, for one iteration.
///
/// With `relaxed` the smooth interpolant of the surrogate replaces the hard
/// quantizer in the forward pass, which makes the chain differentiable
/// end to end. The Gumbel-Softmax forward variant is always relaxed.
pub fn map_phases(
    phis: &[Array2<f64>],
    scheme: &QuantScheme,
    spec: &SurrogateSpec,
    iteration: u64,
    relaxed: bool,
) -> Result<(Vec<Array2<f64>>, Vec<Option<Array2<f64>>>)> {
    spec.validate()?;
    let mapped: Vec<(Array2<f64>, Option<Array2<f64>>)> = phis
        .par_iter()
        .enumerate()
        .map(|(t, phi)| -> Result<_> {
            let key = NoiseKey {
                iteration,
                frame: t as u64,
            };
            if scheme.is_continuous() {
                return Ok((phi.clone(), None));
            }
            Ok(match spec.kind {
                SurrogateKind::Naive => (phi.clone(), None),
                SurrogateKind::UnitJacobian => {
                    (if relaxed { phi.clone() } else { quantize(phi, scheme) }, None)
                }
                SurrogateKind::Sigmoid => {
                    let d = surrogate_derivative(phi, scheme, spec, key)?;
                    let fwd = if relaxed {
                        sigmoid_relax(phi, scheme, spec.slope)
                    } else {
                        quantize(phi, scheme)
                    };
                    (fwd, Some(d))
                }
                SurrogateKind::GumbelSoftmax | SurrogateKind::GumbelSoftmaxForward => {
                    let (q, d) = gumbel_softmax_with_derivative(phi, scheme, spec, key)?;
                    let fwd = if relaxed || spec.kind == SurrogateKind::GumbelSoftmaxForward {
                        q
                    } else {
                        quantize(phi, scheme)
                    };
                    (fwd, Some(d))
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mapped.into_iter().unzip())
}

#[derive(Debug, Clone)]
pub struct Gradient {
    pub loss: f64,
    pub scale: f64,
    pub dl_ds: f64,
    pub phases: Vec<Array2<f64>>,
}

/// `dL/dphi` for every frame and `dL/ds`, through the configured quantizer
/// surrogate.
#[allow(clippy::too_many_arguments)]
pub fn gradient(
    objective: &Objective,
    phis: &[Array2<f64>],
    model: &CalibratedModel,
    scheme: &QuantScheme,
    spec: &SurrogateSpec,
    scale: ScaleChoice,
    iteration: u64,
    relaxed: bool,
) -> Result<Gradient> {
    let engine = Engine::new(objective, model)?;
    let (thetas, derivs) = map_phases(phis, scheme, spec, iteration, relaxed)?;
    let ev = engine.evaluate(&thetas, scale, true)?;
    let mut g = ev.grad.expect("gradient requested");
    for (gt, d) in g.iter_mut().zip(&derivs) {
        if let Some(d) = d {
            *gt *= d;
        }
    }
    Ok(Gradient {
        loss: ev.loss,
        scale: ev.scale,
        dl_ds: ev.dl_ds,
        phases: g,
    })
}
