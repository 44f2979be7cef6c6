//! Discrete phase levels and the gradient strategies used to optimize through
//! the quantizer.
//!
//! Relaxations are computed on the circle: with `delta_l` the signed wrapped
//! difference from `phi` to level `l`, the relaxed phase is
//! `q_hat = wrap(phi - sum_l G_l delta_l)`. Away from the `0 / 2 pi` seam this is
//! the usual `sum_l Q_l G_l`; near the seam it keeps the blend between the
//! first and last level local instead of averaging across the circle.

use std::f64::consts::{PI, TAU};

use ndarray::{Array2, Array3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HoloError, Result};
use crate::propagation::{wrap_phase, wrap_signed};

/// Levels beyond this window around the nearest level are dropped from the
/// Gumbel-Softmax sum. With the slope tied to the level gap their scores are
/// near zero and their softmax weights are tiny next to the nearest levels.
pub const GS_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct QuantScheme {
    levels: Vec<f64>,
    bits: Option<u32>,
    wrap: bool,
    continuous: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(default = "yes")]
    wrap: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    continuous: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<SchemeRepr> for QuantScheme {
    type Error = HoloError;

    fn try_from(r: SchemeRepr) -> Result<Self> {
        match (r.continuous, r.bits, r.levels) {
            (true, None, None) => Ok(QuantScheme::continuous()),
            (false, Some(b), None) => {
                let mut s = QuantScheme::uniform(b)?;
                s.wrap = r.wrap;
                Ok(s)
            }
            (false, None, Some(l)) => QuantScheme::from_levels(l, r.wrap),
            _ => Err(HoloError::config(
                "scheme: give exactly one of `bits`, `levels` or `continuous: true`",
            )),
        }
    }
}

impl From<QuantScheme> for SchemeRepr {
    fn from(s: QuantScheme) -> Self {
        if s.continuous {
            return SchemeRepr {
                levels: None,
                bits: None,
                wrap: true,
                continuous: true,
            };
        }
        match s.bits {
            Some(b) => SchemeRepr {
                levels: None,
                bits: Some(b),
                wrap: s.wrap,
                continuous: false,
            },
            None => SchemeRepr {
                levels: Some(s.levels),
                bits: None,
                wrap: s.wrap,
                continuous: false,
            },
        }
    }
}

impl QuantScheme {
    /// `2^bits` evenly spaced levels starting at 0.
    pub fn uniform(bits: u32) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(HoloError::config(format!("bits must be in 1..=16, got {bits}")));
        }
        let l = 1usize << bits;
        Ok(QuantScheme {
            levels: (0..l).map(|i| TAU * i as f64 / l as f64).collect(),
            bits: Some(bits),
            wrap: true,
            continuous: false,
        })
    }

    pub fn from_levels(levels: Vec<f64>, wrap: bool) -> Result<Self> {
        if levels.len() < 2 {
            return Err(HoloError::config("scheme needs at least two levels"));
        }
        if levels.len() > u16::MAX as usize + 1 {
            return Err(HoloError::config("scheme has more than 65536 levels"));
        }
        if levels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v >= TAU) {
            return Err(HoloError::config("scheme levels must lie in [0, 2pi)"));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(HoloError::config("scheme levels must be strictly ascending"));
        }
        Ok(QuantScheme {
            levels,
            bits: None,
            wrap,
            continuous: false,
        })
    }

    /// Unquantized phase: `quantize` only wraps to `[0, 2 pi)`.
    pub fn continuous() -> Self {
        QuantScheme {
            levels: Vec::new(),
            bits: None,
            wrap: true,
            continuous: true,
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn bits(&self) -> Option<u32> {
        self.bits
    }

    pub fn wrap(&self) -> bool {
        self.wrap
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    /// Mean spacing between adjacent levels (on the circle when wrapping).
    pub fn mean_gap(&self) -> f64 {
        if self.continuous {
            return 0.0;
        }
        if self.wrap {
            TAU / self.levels.len() as f64
        } else {
            (self.levels[self.levels.len() - 1] - self.levels[0]) / (self.levels.len() - 1) as f64
        }
    }

    /// Wrapped signed difference for a `key` already reduced to `[0, 2 pi)`.
    #[inline]
    fn delta_key(&self, key: f64, level: f64) -> f64 {
        let d = key - level;
        if !self.wrap {
            d
        } else if d > PI {
            d - TAU
        } else if d <= -PI {
            d + TAU
        } else {
            d
        }
    }

    #[inline]
    fn key(&self, phi: f64) -> f64 {
        if self.wrap {
            wrap_phase(phi)
        } else {
            phi
        }
    }

    fn delta(&self, phi: f64, level: f64) -> f64 {
        self.delta_key(self.key(phi), level)
    }

    /// Index of the nearest level; ties go to the lower index.
    pub fn nearest_index(&self, phi: f64) -> usize {
        let l = self.levels.len();
        let key = self.key(phi);
        let pos = self.levels.partition_point(|&q| q <= key);
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        let mut consider = |i: usize| {
            let d = self.delta_key(key, self.levels[i]).abs();
            if d < best_d || (d == best_d && i < best) {
                best = i;
                best_d = d;
            }
        };
        if self.wrap {
            consider((pos + l - 1) % l);
            consider(pos % l);
            consider(0);
            consider(l - 1);
        } else {
            for i in pos.saturating_sub(1)..(pos + 1).min(l) {
                consider(i);
            }
        }
        best
    }

    pub fn quantize_value(&self, phi: f64) -> f64 {
        if self.continuous {
            return wrap_phase(phi);
        }
        self.levels[self.nearest_index(phi)]
    }

    /// The two levels bracketing `phi` and the offset from the lower one.
    /// Returns `(lower, upper, offset, gap)`.
    fn bracket(&self, phi: f64) -> (usize, usize, f64, f64) {
        let l = self.levels.len();
        if self.wrap {
            let key = wrap_phase(phi);
            let pos = self.levels.partition_point(|&q| q <= key);
            let lo = (pos + l - 1) % l;
            let hi = pos % l;
            let gap = (self.levels[hi] - self.levels[lo]).rem_euclid(TAU);
            let gap = if gap == 0.0 { TAU } else { gap };
            let d = (key - self.levels[lo]).rem_euclid(TAU);
            (lo, hi, d, gap)
        } else {
            let pos = self.levels.partition_point(|&q| q <= phi).clamp(1, l - 1);
            let (lo, hi) = (pos - 1, pos);
            let gap = self.levels[hi] - self.levels[lo];
            (lo, hi, phi - self.levels[lo], gap)
        }
    }
}

/// Signed difference `phi - level` wrapped to `(-pi, pi]`.
pub fn angular_delta(phi: f64, level: f64) -> f64 {
    wrap_signed(phi - level)
}

/// Elementwise nearest level.
pub fn quantize(phase: &Array2<f64>, scheme: &QuantScheme) -> Array2<f64> {
    phase.mapv(|p| scheme.quantize_value(p))
}

/// Elementwise nearest level index. Fails for a continuous scheme.
pub fn quantize_indices(phase: &Array2<f64>, scheme: &QuantScheme) -> Result<Array2<u16>> {
    if scheme.continuous {
        return Err(HoloError::config("a continuous scheme has no level indices"));
    }
    Ok(phase.mapv(|p| scheme.nearest_index(p) as u16))
}

pub fn indices_to_phase(indices: &Array2<u16>, scheme: &QuantScheme) -> Result<Array2<f64>> {
    crate::propagation::apply_lut(&scheme.levels, indices)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `scale * sigma(w delta)(1 - sigma(w delta))` for every level.
pub fn score(phi: f64, scheme: &QuantScheme, w: f64, scale: f64) -> Vec<f64> {
    scheme
        .levels
        .iter()
        .map(|&q| {
            let s = sigmoid(w * scheme.delta(phi, q));
            scale * s * (1.0 - s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Naive,
    UnitJacobian,
    Sigmoid,
    GumbelSoftmax,
    GumbelSoftmaxForward,
}

impl SurrogateKind {
    pub fn uses_gumbel(self) -> bool {
        matches!(self, SurrogateKind::GumbelSoftmax | SurrogateKind::GumbelSoftmaxForward)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// `w` of the score function, or the sigmoid interpolant slope.
    pub slope: f64,
    pub temperature: f64,
    pub score_scale: f64,
    pub noise_enabled: bool,
    pub rng_seed: u64,
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind) -> Self {
        SurrogateSpec {
            kind,
            slope: 1.0,
            temperature: 1.0,
            score_scale: 1.0,
            noise_enabled: false,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(HoloError::config(format!(
                "surrogate.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.slope > 0.0 && self.slope.is_finite()) {
            return Err(HoloError::config(format!("surrogate.slope must be > 0, got {}", self.slope)));
        }
        if !(self.score_scale > 0.0 && self.score_scale.is_finite()) {
            return Err(HoloError::config(format!(
                "surrogate.score_scale must be > 0, got {}",
                self.score_scale
            )));
        }
        Ok(())
    }
}

/// Position in the Gumbel noise stream: one iteration of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NoiseKey {
    pub iteration: u64,
    pub frame: u64,
}

/// Deterministic Gumbel(0, 1) samples addressed by `(seed, iteration, pixel, level)`.
///
/// Each iteration is a ChaCha stream; a sample's word position is derived from
/// its pixel and level, so any subset can be drawn in any order.
struct GumbelStream {
    rng: ChaCha8Rng,
    levels: u64,
    base: u128,
    cursor: u128,
}

impl GumbelStream {
    fn new(seed: u64, key: NoiseKey, pixels: usize, levels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(key.iteration);
        GumbelStream {
            rng,
            levels: levels as u64,
            base: key.frame as u128 * pixels as u128 * levels as u128,
            cursor: u128::MAX,
        }
    }

    fn seek(&mut self, pixel: usize, level: usize) {
        let idx = self.base + pixel as u128 * self.levels as u128 + level as u128;
        if idx != self.cursor {
            self.rng.set_word_pos(2 * idx);
            self.cursor = idx;
        }
    }

    fn next(&mut self) -> f64 {
        self.cursor = self.cursor.wrapping_add(1);
        let u = ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        -(-u.ln()).ln()
    }
}

/// Per-pixel Gumbel-Softmax evaluation over a window of levels.
struct GsPixel {
    /// Level indices in the window.
    idx: Vec<usize>,
    delta: Vec<f64>,
    weight: Vec<f64>,
    /// d(logit)/d(phi)
    dlogit: Vec<f64>,
}

impl GsPixel {
    fn new() -> Self {
        GsPixel {
            idx: Vec::new(),
            delta: Vec::new(),
            weight: Vec::new(),
            dlogit: Vec::new(),
        }
    }

    fn eval(
        &mut self,
        phi: f64,
        scheme: &QuantScheme,
        spec: &SurrogateSpec,
        noise: Option<(&mut GumbelStream, usize)>,
    ) {
        let l = scheme.levels.len();
        self.idx.clear();
        if l <= GS_WINDOW {
            self.idx.extend(0..l);
        } else {
            let c = scheme.nearest_index(phi);
            let half = GS_WINDOW / 2;
            if scheme.wrap {
                self.idx.extend((0..GS_WINDOW).map(|k| (c + l - half + k) % l));
            } else {
                let start = c.saturating_sub(half).min(l - GS_WINDOW);
                self.idx.extend(start..start + GS_WINDOW);
            }
        }
        let k = self.idx.len();
        self.delta.resize(k, 0.0);
        self.weight.resize(k, 0.0);
        self.dlogit.resize(k, 0.0);
        let (w, tau, sc) = (spec.slope, spec.temperature, spec.score_scale);
        let mut noise = noise;
        let mut max = f64::NEG_INFINITY;
        let key = scheme.key(phi);
        for j in 0..k {
            let d = scheme.delta_key(key, scheme.levels[self.idx[j]]);
            let s = sigmoid(w * d);
            let b = s * (1.0 - s);
            let g = match noise.as_mut() {
                Some((stream, pixel)) => {
                    stream.seek(*pixel, self.idx[j]);
                    stream.next()
                }
                None => 0.0,
            };
            let logit = (sc * b + g) / tau;
            self.delta[j] = d;
            self.weight[j] = logit;
            self.dlogit[j] = sc * w * b * (1.0 - 2.0 * s) / tau;
            max = max.max(logit);
        }
        let mut sum = 0.0;
        for v in self.weight.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in self.weight.iter_mut() {
            *v /= sum;
        }
    }

    fn relaxed(&self, phi: f64, wrap: bool) -> f64 {
        let shift: f64 = self.weight.iter().zip(&self.delta).map(|(g, d)| g * d).sum();
        if wrap {
            wrap_phase(phi - shift)
        } else {
            phi - shift
        }
    }

    fn derivative(&self) -> f64 {
        let mean: f64 = self.weight.iter().zip(&self.dlogit).map(|(g, z)| g * z).sum();
        -self
            .weight
            .iter()
            .zip(&self.dlogit)
            .zip(&self.delta)
            .map(|((g, z), d)| d * g * (z - mean))
            .sum::<f64>()
    }
}

fn check_gs(scheme: &QuantScheme, spec: &SurrogateSpec) -> Result<()> {
    spec.validate()?;
    if scheme.continuous {
        return Err(HoloError::config("Gumbel-Softmax needs a discrete scheme"));
    }
    Ok(())
}

/// Relaxed phase and the full `M x N x L` weight tensor.
///
/// Levels outside the evaluation window (only when `L > GS_WINDOW`) get weight 0.
pub fn gumbel_softmax_relax(
    phi: &Array2<f64>,
    scheme: &QuantScheme,
    spec: &SurrogateSpec,
    key: NoiseKey,
) -> Result<(Array2<f64>, Array3<f64>)> {
    check_gs(scheme, spec)?;
    let (m, n) = phi.dim();
    let l = scheme.len();
    let mut stream = GumbelStream::new(spec.rng_seed, key, m * n, l);
    let mut px = GsPixel::new();
    let mut q = Array2::zeros((m, n));
    let mut weights = Array3::zeros((m, n, l));
    for (p, (ix, &v)) in phi.indexed_iter().enumerate() {
        let noise = spec.noise_enabled.then_some((&mut stream, p));
        px.eval(v, scheme, spec, noise);
        q[ix] = px.relaxed(v, scheme.wrap);
        for (j, &li) in px.idx.iter().enumerate() {
            weights[(ix.0, ix.1, li)] = px.weight[j];
        }
    }
    Ok((q, weights))
}

/// Relaxed phase and its derivative with respect to `phi`, pixelwise.
pub fn gumbel_softmax_with_derivative(
    phi: &Array2<f64>,
    scheme: &QuantScheme,
    spec: &SurrogateSpec,
    key: NoiseKey,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_gs(scheme, spec)?;
    let (m, n) = phi.dim();
    let mut stream = GumbelStream::new(spec.rng_seed, key, m * n, scheme.len());
    let mut px = GsPixel::new();
    let mut q = Array2::zeros((m, n));
    let mut dq = Array2::zeros((m, n));
    for (p, (ix, &v)) in phi.indexed_iter().enumerate() {
        let noise = spec.noise_enabled.then_some((&mut stream, p));
        px.eval(v, scheme, spec, noise);
        q[ix] = px.relaxed(v, scheme.wrap);
        dq[ix] = px.derivative();
    }
    Ok((q, dq))
}

/// Sigmoid interpolant between the two bracketing levels.
pub fn sigmoid_relax(phi: &Array2<f64>, scheme: &QuantScheme, slope: f64) -> Array2<f64> {
    if scheme.continuous {
        return phi.mapv(wrap_phase);
    }
    phi.mapv(|p| {
        let (lo, _, d, gap) = scheme.bracket(p);
        let x = slope * (d - 0.5 * gap) / gap;
        let v = scheme.levels[lo] + gap * sigmoid(x);
        if scheme.wrap {
            wrap_phase(v)
        } else {
            v
        }
    })
}

fn sigmoid_derivative(phi: f64, scheme: &QuantScheme, slope: f64) -> f64 {
    let (_, _, d, gap) = scheme.bracket(phi);
    let s = sigmoid(slope * (d - 0.5 * gap) / gap);
    slope * s * (1.0 - s)
}

/// `dq_hat/dphi` of the configured surrogate, pixelwise.
pub fn surrogate_derivative(
    phi: &Array2<f64>,
    scheme: &QuantScheme,
    spec: &SurrogateSpec,
    key: NoiseKey,
) -> Result<Array2<f64>> {
    spec.validate()?;
    if scheme.continuous {
        return Ok(Array2::ones(phi.dim()));
    }
    match spec.kind {
        SurrogateKind::Naive => Err(HoloError::config("naive quantization has no surrogate gradient")),
        SurrogateKind::UnitJacobian => Ok(Array2::ones(phi.dim())),
        SurrogateKind::Sigmoid => Ok(phi.mapv(|p| sigmoid_derivative(p, scheme, spec.slope))),
        SurrogateKind::GumbelSoftmax | SurrogateKind::GumbelSoftmaxForward => {
            Ok(gumbel_softmax_with_derivative(phi, scheme, spec, key)?.1)
        }
    }
}

/// `upstream * dq_hat/dphi`.
pub fn surrogate_gradient(
    upstream: &Array2<f64>,
    phi: &Array2<f64>,
    scheme: &QuantScheme,
    spec: &SurrogateSpec,
    key: NoiseKey,
) -> Result<Array2<f64>> {
    if upstream.dim() != phi.dim() {
        return Err(HoloError::dim("upstream gradient and phase differ in shape"));
    }
    if spec.kind == SurrogateKind::UnitJacobian {
        spec.validate()?;
        return Ok(upstream.clone());
    }
    Ok(surrogate_derivative(phi, scheme, spec, key)? * upstream)
}
