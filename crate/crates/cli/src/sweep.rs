//! Bits x frames x method sweeps over a target set.

use std::collections::HashMap;
use std::path::Path;

use holo_core::imageio::save_heatmap;
use holo_core::optimizer::{export_phases, optimize, Method, OptimConfig, Problem, ScaleMode};
use holo_core::report::{mean_quality, reconstructions};
use holo_core::supervision::Objective;
use holo_core::{CalibratedModel, HoloError, QuantScheme, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::run_metrics;
use crate::config::{canonical, SweepConfig};
use crate::output::{csv_error, ensure_dir, write_csv, write_json, write_text};
use crate::targets::{load_image, target_name};

/// The bit depth and frame count of the reference cell for the iso-quality
/// contour, always optimized with the naive method.
pub const REFERENCE: (u32, usize) = (8, 1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub bits: u32,
    pub frames: usize,
    /// Mean over completed runs.
    pub psnr: f64,
    pub ssim: f64,
    pub completed: usize,
    pub failed: usize,
}

/// Cells are ordered method-major, then bits, then frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub methods: Vec<Method>,
    pub bits: Vec<u32>,
    pub frames: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

fn push_unique<T: PartialEq + Copy>(v: &mut Vec<T>, x: T) {
    if !v.contains(&x) {
        v.push(x);
    }
}

impl SweepResult {
    pub fn cell(&self, method: Method, bits: u32, frames: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.bits == bits && c.frames == frames)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| HoloError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HoloError::Format(e.to_string()))
    }

    /// Inverse of [`SweepResult::to_csv`]; axes follow first appearance.
    pub fn from_csv(text: &str) -> Result<SweepResult> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let cells: Vec<SweepCell> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
        let mut out = SweepResult {
            methods: vec![],
            bits: vec![],
            frames: vec![],
            cells: vec![],
        };
        for c in &cells {
            push_unique(&mut out.methods, c.method);
            push_unique(&mut out.bits, c.bits);
            push_unique(&mut out.frames, c.frames);
        }
        let expected = grid_order(&out.methods, &out.bits, &out.frames);
        let found: Vec<(Method, u32, usize)> = cells.iter().map(|c| (c.method, c.bits, c.frames)).collect();
        if expected != found {
            return Err(HoloError::Format("sweep CSV is not a complete grid in method, bits, frames order".into()));
        }
        out.cells = cells;
        Ok(out)
    }

    /// PSNR per cell for one method: rows are bits from the largest down,
    /// columns are frames in axis order.
    pub fn heatmap_values(&self, method: Method) -> Array2<f64> {
        let nb = self.bits.len();
        Array2::from_shape_fn((nb, self.frames.len()), |(i, j)| {
            self.cell(method, self.bits[nb - 1 - i], self.frames[j])
                .map_or(f64::NAN, |c| c.psnr)
        })
    }

    /// Color range shared by all heatmaps.
    pub fn psnr_range(&self) -> (f64, f64) {
        let vals = self.cells.iter().map(|c| c.psnr).filter(|v| v.is_finite());
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    }

    /// For each bit depth, the fewest frames whose PSNR reaches `reference`.
    pub fn frontier(&self, method: Method, reference: f64) -> Vec<FrontierPoint> {
        let mut frames = self.frames.clone();
        frames.sort_unstable();
        self.bits
            .iter()
            .map(|&b| FrontierPoint {
                method,
                bits: b,
                min_frames: frames
                    .iter()
                    .copied()
                    .find(|&f| self.cell(method, b, f).is_some_and(|c| c.psnr >= reference)),
            })
            .collect()
    }
}

fn grid_order(methods: &[Method], bits: &[u32], frames: &[usize]) -> Vec<(Method, u32, usize)> {
    let mut v = Vec::new();
    for &m in methods {
        for &b in bits {
            for &f in frames {
                v.push((m, b, f));
            }
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub method: Method,
    pub bits: u32,
    /// `None` when no frame count reaches the reference.
    pub min_frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub bits: u32,
    pub frames: usize,
    pub target: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub iterations: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub result: SweepResult,
    pub runs: Vec<RunRecord>,
    /// Mean PSNR of naive optimization at [`REFERENCE`].
    pub reference_psnr: f64,
}

enum Job {
    /// One continuous run per frame count and target, exported at every bit depth.
    Naive { frames: usize, target: usize, bits: Vec<u32> },
    Single { method: Method, bits: u32, frames: usize, target: usize },
}

struct Ctx<'a> {
    objectives: &'a [Objective],
    names: &'a [String],
    base: &'a OptimConfig,
    multi_frame_lr: Option<f64>,
}

type Outcome = std::result::Result<(f64, f64, usize), String>;

impl Ctx<'_> {
    fn config(&self, method: Method, frames: usize) -> OptimConfig {
        let lr = match self.multi_frame_lr {
            Some(lr) if frames > 1 => lr,
            _ => self.base.lr,
        };
        OptimConfig {
            method,
            frames,
            lr,
            ..self.base.clone()
        }
    }

    fn setup(&self, t: usize, bits: u32) -> Result<(CalibratedModel, QuantScheme)> {
        let obj = &self.objectives[t];
        let scheme = QuantScheme::uniform(bits)?;
        let model = CalibratedModel::nominal(obj.grid, obj.distances(), scheme.len())?;
        Ok((model, scheme))
    }

    fn single(&self, method: Method, bits: u32, frames: usize, t: usize) -> Outcome {
        let go = || -> Result<(f64, f64, usize)> {
            let (model, scheme) = self.setup(t, bits)?;
            let cfg = self.config(method, frames);
            let run = optimize(&self.objectives[t], &model, &scheme, &cfg)?;
            let m = run_metrics(&self.objectives[t], &run)?;
            Ok((m.psnr, m.ssim, m.iterations))
        };
        go().map_err(|e| e.to_string())
    }

    /// The naive trajectory ignores the scheme under the closed-form scale,
    /// so one run serves every bit depth.
    fn naive(&self, frames: usize, t: usize, bits: &[u32]) -> Vec<(u32, Outcome)> {
        if self.base.scale_mode != ScaleMode::ClosedForm {
            return bits.iter().map(|&b| (b, self.single(Method::Naive, b, frames, t))).collect();
        }
        let obj = &self.objectives[t];
        let cfg = self.config(Method::Naive, frames);
        let run = self.setup(t, bits[0]).and_then(|(model, scheme)| optimize(obj, &model, &scheme, &cfg));
        let run = match run {
            Ok(r) => r,
            Err(e) => return bits.iter().map(|&b| (b, Err(e.to_string()))).collect(),
        };
        bits.iter()
            .map(|&b| {
                let go = || -> Result<(f64, f64, usize)> {
                    let (model, scheme) = self.setup(t, b)?;
                    let problem = Problem::new(obj, &model, &scheme, &cfg)?;
                    let ev = problem.evaluate_export(&export_phases(&run.phases, &scheme)?)?;
                    let (p, s) = mean_quality(&reconstructions(obj, &ev)?);
                    Ok((p, s, run.loss_history.len()))
                };
                (b, go().map_err(|e| e.to_string()))
            })
            .collect()
    }

    fn run(&self, job: &Job) -> Vec<((Method, u32, usize, usize), Outcome)> {
        match job {
            Job::Naive { frames, target, bits } => self
                .naive(*frames, *target, bits)
                .into_iter()
                .map(|(b, o)| ((Method::Naive, b, *frames, *target), o))
                .collect(),
            Job::Single {
                method,
                bits,
                frames,
                target,
            } => vec![((*method, *bits, *frames, *target), self.single(*method, *bits, *frames, *target))],
        }
    }

    fn record(&self, key: (Method, u32, usize, usize), o: &Outcome) -> RunRecord {
        let (method, bits, frames, t) = key;
        let (psnr, ssim, iterations, error) = match o {
            Ok((p, s, i)) => (Some(*p), Some(*s), *i, String::new()),
            Err(e) => (None, None, 0, e.clone()),
        };
        RunRecord {
            method,
            bits,
            frames,
            target: self.names[t].clone(),
            psnr,
            ssim,
            iterations,
            error,
        }
    }
}

fn validate(cfg: &SweepConfig) -> Result<()> {
    let dup = |n: usize, m: usize| n != m;
    if cfg.bits.is_empty() || cfg.frames.is_empty() || cfg.methods.is_empty() || cfg.targets.is_empty() {
        return Err(HoloError::config("fields `bits`, `frames`, `methods`, `targets` must be non-empty"));
    }
    if let Some(b) = cfg.bits.iter().find(|b| !(1..=16).contains(*b)) {
        return Err(HoloError::config(format!("field `bits`: {b} is outside 1..=16")));
    }
    if cfg.frames.contains(&0) {
        return Err(HoloError::config("field `frames`: frame counts must be >= 1"));
    }
    let mut b = cfg.bits.clone();
    b.sort_unstable();
    b.dedup();
    let mut f = cfg.frames.clone();
    f.sort_unstable();
    f.dedup();
    let mut m = cfg.methods.clone();
    m.sort_by_key(|x| x.name());
    m.dedup();
    if dup(b.len(), cfg.bits.len()) || dup(f.len(), cfg.frames.len()) || dup(m.len(), cfg.methods.len()) {
        return Err(HoloError::config("fields `bits`, `frames`, `methods` must not repeat entries"));
    }
    if let Some(lr) = cfg.multi_frame_lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(HoloError::config(format!("field `multi_frame_lr`: must be > 0, got {lr}")));
        }
    }
    cfg.optim.validate()
}

/// Runs every cell on every target. Runs execute on the current rayon
/// pool; results are reduced in fixed cell and target order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    validate(cfg)?;
    let grid = cfg.optics.grid()?;
    let names: Vec<String> = cfg.targets.iter().map(|s| target_name(s)).collect();
    let objectives = cfg
        .targets
        .iter()
        .map(|s| Objective::amp2d(grid, &load_image(s, cfg.optics.color.channel(), grid.shape())?, cfg.distance))
        .collect::<Result<Vec<_>>>()?;
    let ctx = Ctx {
        objectives: &objectives,
        names: &names,
        base: &cfg.optim,
        multi_frame_lr: cfg.multi_frame_lr,
    };

    let (rb, rf) = REFERENCE;
    let mut jobs = Vec::new();
    let mut naive_frames = if cfg.methods.contains(&Method::Naive) { cfg.frames.clone() } else { vec![] };
    push_unique(&mut naive_frames, rf);
    for &f in &naive_frames {
        let mut bits = if cfg.methods.contains(&Method::Naive) && cfg.frames.contains(&f) {
            cfg.bits.clone()
        } else {
            vec![]
        };
        if f == rf {
            push_unique(&mut bits, rb);
        }
        for t in 0..objectives.len() {
            jobs.push(Job::Naive {
                frames: f,
                target: t,
                bits: bits.clone(),
            });
        }
    }
    for &method in cfg.methods.iter().filter(|&&m| m != Method::Naive) {
        for &bits in &cfg.bits {
            for &frames in &cfg.frames {
                for target in 0..objectives.len() {
                    jobs.push(Job::Single {
                        method,
                        bits,
                        frames,
                        target,
                    });
                }
            }
        }
    }

    let done: Vec<_> = jobs.par_iter().map(|j| ctx.run(j)).collect();
    let table: HashMap<(Method, u32, usize, usize), Outcome> = done.into_iter().flatten().collect();

    let mut runs = Vec::new();
    let mut cells = Vec::new();
    for (method, bits, frames) in grid_order(&cfg.methods, &cfg.bits, &cfg.frames) {
        let (mut ps, mut ss, mut ok, mut failed) = (0.0, 0.0, 0, 0);
        for t in 0..objectives.len() {
            let key = (method, bits, frames, t);
            let o = &table[&key];
            if let Ok((p, s, _)) = o {
                ps += p;
                ss += s;
                ok += 1;
            } else {
                failed += 1;
            }
            runs.push(ctx.record(key, o));
        }
        let n = ok as f64;
        cells.push(SweepCell {
            method,
            bits,
            frames,
            psnr: if ok > 0 { ps / n } else { f64::NAN },
            ssim: if ok > 0 { ss / n } else { f64::NAN },
            completed: ok,
            failed,
        });
    }
    let refs: Vec<f64> = (0..objectives.len())
        .filter_map(|t| table[&(Method::Naive, rb, rf, t)].as_ref().ok().map(|r| r.0))
        .collect();
    let reference_psnr = if refs.is_empty() {
        f64::NAN
    } else {
        refs.iter().sum::<f64>() / refs.len() as f64
    };
    Ok(SweepOutcome {
        result: SweepResult {
            methods: cfg.methods.clone(),
            bits: cfg.bits.clone(),
            frames: cfg.frames.clone(),
            cells,
        },
        runs,
        reference_psnr,
    })
}

/// `heatmap_<method>.png` per method, drawn only from `result`.
pub fn write_heatmaps(result: &SweepResult, dir: &Path) -> Result<()> {
    let (lo, hi) = result.psnr_range();
    for &m in &result.methods {
        save_heatmap(&result.heatmap_values(m), lo, hi, &dir.join(format!("heatmap_{}.png", m.name())))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepMetrics<'a> {
    reference: Reference,
    cells: &'a [SweepCell],
    frontier: Vec<FrontierPoint>,
    failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Reference {
    method: Method,
    bits: u32,
    frames: usize,
    psnr: f64,
}

pub fn cmd_sweep(cfg: &SweepConfig, out: &Path) -> Result<SweepOutcome> {
    ensure_dir(out)?;
    write_text(&out.join("config.json"), &canonical(cfg)?)?;
    let outcome = run_sweep(cfg)?;
    let r = &outcome.result;
    write_text(&out.join("sweep.csv"), &r.to_csv()?)?;
    write_csv(&out.join("runs.csv"), &outcome.runs)?;
    write_heatmaps(r, out)?;
    let frontier: Vec<FrontierPoint> = r
        .methods
        .iter()
        .flat_map(|&m| r.frontier(m, outcome.reference_psnr))
        .collect();
    write_csv(&out.join("iso_quality.csv"), &frontier)?;
    let metrics = SweepMetrics {
        reference: Reference {
            method: Method::Naive,
            bits: REFERENCE.0,
            frames: REFERENCE.1,
            psnr: outcome.reference_psnr,
        },
        cells: &r.cells,
        frontier,
        failed_runs: outcome.runs.iter().filter(|x| !x.error.is_empty()).count(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    if let Some(c) = r.cells.iter().find(|c| c.completed == 0) {
        return Err(HoloError::NonFinite {
            stage: if c.failed > 0 { "sweep cell with no completed run" } else { "sweep" },
        });
    }
    Ok(outcome)
}
