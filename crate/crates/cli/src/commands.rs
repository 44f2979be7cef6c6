//! The `optimize`, `citl`, `calibrate` and `metrics` commands. Each writes
//! its canonical config first, then its artifacts.

use std::path::Path;

use holo_core::calibration::{ablation, eval_model, generate_dataset, load_dataset, save_dataset, Split};
use holo_core::citl::{citl_optimize, PhysicalDisplay};
use holo_core::imageio::{load_amplitude, save_amplitude_png, Channel};
use holo_core::metrics::{psnr, ssim};
use holo_core::model_io::{load_model, save_model};
use holo_core::optimizer::{optimize, Method, OptimConfig, OptimRun};
use holo_core::report::{mean_quality, reconstructions};
use holo_core::supervision::Objective;
use holo_core::{CalibratedModel, HoloError, QuantScheme, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{canonical, CalibrateConfig, CitlConfig, MetricsConfig, OptimizeConfig};
use crate::output::{ensure_dir, plane_metrics, write_csv, write_json, write_loss, write_phases, write_reconstructions, write_text, PlaneMetrics};
use crate::targets::{load_image, objective, target_name};

fn start<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    ensure_dir(out)?;
    write_text(&out.join("config.json"), &canonical(cfg)?)
}

/// Nominal model for the objective's planes, or a saved model. A saved
/// model's lookup table becomes the quantization levels.
pub fn model_and_scheme(
    objective: &Objective,
    scheme: &QuantScheme,
    model_path: Option<&str>,
) -> Result<(CalibratedModel, QuantScheme)> {
    let levels = if scheme.is_continuous() { 256 } else { scheme.len() };
    let Some(path) = model_path else {
        return Ok((CalibratedModel::nominal(objective.grid, objective.distances(), levels)?, scheme.clone()));
    };
    let (model, _) = load_model(Path::new(path))?;
    if model.grid.shape() != objective.grid.shape() {
        return Err(HoloError::config(format!(
            "field `model`: {path} is {:?}, optics grid is {:?}",
            model.grid.shape(),
            objective.grid.shape()
        )));
    }
    if scheme.is_continuous() {
        return Ok((model, scheme.clone()));
    }
    if model.lut.len() != scheme.len() {
        return Err(HoloError::config(format!(
            "field `model`: {path} has {} lut entries, scheme has {} levels",
            model.lut.len(),
            scheme.len()
        )));
    }
    let s = QuantScheme::from_levels(model.lut.clone(), scheme.wrap())
        .map_err(|e| HoloError::config(format!("field `model`: lut of {path} is not a level set: {e}")))?;
    Ok((model, s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub scale: f64,
    pub reconstructions: Vec<PlaneMetrics>,
}

pub fn run_metrics(objective: &Objective, run: &OptimRun) -> Result<OptimizeMetrics> {
    let recs = reconstructions(objective, &run.final_eval)?;
    let (p, s) = mean_quality(&recs);
    Ok(OptimizeMetrics {
        psnr: p,
        ssim: s,
        iterations: run.loss_history.len(),
        final_loss: run.final_eval.loss,
        scale: run.final_eval.scale,
        reconstructions: plane_metrics(&recs),
    })
}

pub fn cmd_optimize(cfg: &OptimizeConfig, out: &Path) -> Result<OptimizeMetrics> {
    start(out, cfg)?;
    let grid = cfg.optics.grid()?;
    let obj = objective(&cfg.target, grid, cfg.optics.color.channel())?;
    let (model, scheme) = model_and_scheme(&obj, &cfg.scheme, cfg.model.as_deref())?;
    let run = optimize(&obj, &model, &scheme, &cfg.optim)?;
    let metrics = run_metrics(&obj, &run)?;
    write_loss(&out.join("loss.csv"), &run.loss_history)?;
    write_phases(out, &run.exported.radians)?;
    write_reconstructions(out, &reconstructions(&obj, &run.final_eval)?)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CitlPair {
    pub target: String,
    pub naive_psnr: f64,
    pub surrogate_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CitlMetrics {
    pub surrogate: Method,
    pub naive_psnr: f64,
    pub surrogate_psnr: f64,
    /// Surrogate minus naive, dB.
    pub gain: f64,
    pub targets: Vec<CitlPair>,
}

pub fn cmd_citl(cfg: &CitlConfig, out: &Path) -> Result<CitlMetrics> {
    start(out, cfg)?;
    if cfg.targets.is_empty() {
        return Err(HoloError::config("field `targets`: at least one target is needed"));
    }
    if cfg.surrogate == Method::Naive {
        return Err(HoloError::config("field `surrogate`: must differ from naive"));
    }
    let grid = cfg.optics.grid()?;
    let scheme = QuantScheme::uniform(cfg.bits).map_err(|e| HoloError::config(format!("field `bits`: {e}")))?;
    let nominal = CalibratedModel::nominal(grid, vec![cfg.distance], scheme.len())?;
    let truth = cfg.display.perturbation.apply(&nominal)?;
    let display = PhysicalDisplay::new(truth, scheme, cfg.display.noise, cfg.seed)?;
    let mut pairs = Vec::new();
    for spec in &cfg.targets {
        let name = target_name(spec);
        let target = load_image(spec, cfg.optics.color.channel(), grid.shape())?;
        let obj = Objective::amp2d(grid, &target, cfg.distance)?;
        let mut psnrs = [0.0; 2];
        for (k, method) in [Method::Naive, cfg.surrogate].into_iter().enumerate() {
            let oc = OptimConfig { method, ..cfg.optim.clone() };
            let run = citl_optimize(&obj, &nominal, &display, &oc)?;
            let dir = out.join(method.name()).join(&name);
            ensure_dir(&dir)?;
            write_loss(&dir.join("loss.csv"), &run.loss_history)?;
            write_phases(&dir, &run.exported.radians)?;
            save_amplitude_png(&run.captures[0], &dir.join("capture.png"))?;
            psnrs[k] = run.psnr;
        }
        pairs.push(CitlPair {
            target: name,
            naive_psnr: psnrs[0],
            surrogate_psnr: psnrs[1],
        });
    }
    let n = pairs.len() as f64;
    let naive = pairs.iter().map(|p| p.naive_psnr).sum::<f64>() / n;
    let sur = pairs.iter().map(|p| p.surrogate_psnr).sum::<f64>() / n;
    let metrics = CitlMetrics {
        surrogate: cfg.surrogate,
        naive_psnr: naive,
        surrogate_psnr: sur,
        gain: sur - naive,
        targets: pairs,
    };
    write_csv(&out.join("citl.csv"), &metrics.targets)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCsvRow {
    pub label: String,
    pub a_src: bool,
    pub phi_src: bool,
    pub phi_f: bool,
    pub a_f: bool,
    pub lut: bool,
    pub train_psnr: f64,
    pub val_psnr: Option<f64>,
    pub test_psnr: Option<f64>,
    pub held_out_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrateMetrics {
    pub nominal_test_psnr: f64,
    pub fitted_test_psnr: f64,
    pub rows: Vec<AblationCsvRow>,
}

pub fn cmd_calibrate(cfg: &CalibrateConfig, out: &Path) -> Result<CalibrateMetrics> {
    start(out, cfg)?;
    if cfg.ladder.is_empty() {
        return Err(HoloError::config("field `ladder`: at least one row is needed"));
    }
    let grid = cfg.optics.grid()?;
    let scheme = QuantScheme::uniform(cfg.bits).map_err(|e| HoloError::config(format!("field `bits`: {e}")))?;
    let nominal = CalibratedModel::nominal(grid, cfg.distances.clone(), scheme.len())?;
    let ds = match &cfg.dataset_dir {
        Some(dir) => load_dataset(Path::new(dir))?,
        None => {
            let truth = cfg.display.perturbation.apply(&nominal)?;
            save_model(&out.join("truth_model.json"), &truth, Some(serde_json::to_value(&cfg.display.perturbation)?))?;
            let display = PhysicalDisplay::new(truth, scheme, cfg.display.noise, cfg.seed)?;
            generate_dataset(&display, grid, &cfg.distances, &cfg.dataset)?
        }
    };
    if ds.grid.shape() != grid.shape() || ds.plane_distances != cfg.distances || ds.levels != nominal.lut.len() {
        return Err(HoloError::config("field `dataset_dir`: dataset grid, planes or levels differ from the config"));
    }
    if cfg.save_dataset && cfg.dataset_dir.is_none() {
        save_dataset(&ds, &out.join("dataset"))?;
    }
    let (rows, model) = ablation(&ds, &nominal, &cfg.ladder, &cfg.fit)?;
    let rows: Vec<AblationCsvRow> = rows
        .into_iter()
        .map(|r| AblationCsvRow {
            label: r.label,
            a_src: r.groups.a_src,
            phi_src: r.groups.phi_src,
            phi_f: r.groups.phi_f,
            a_f: r.groups.a_f,
            lut: r.groups.lut,
            train_psnr: r.train_psnr,
            val_psnr: r.val_psnr,
            test_psnr: r.test_psnr,
            held_out_psnr: r.held_out_psnr,
        })
        .collect();
    let metrics = CalibrateMetrics {
        nominal_test_psnr: eval_model(&nominal, &ds, Split::Test)?.psnr,
        fitted_test_psnr: eval_model(&model, &ds, Split::Test)?.psnr,
        rows,
    };
    save_model(&out.join("model.json"), &model, None)?;
    write_csv(&out.join("ablation.csv"), &metrics.rows)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

fn metrics_channel(name: &str) -> Result<Channel> {
    Ok(match name {
        "luma" => Channel::Luma,
        "red" => Channel::Red,
        "green" => Channel::Green,
        "blue" => Channel::Blue,
        other => {
            return Err(HoloError::config(format!(
                "field `channel`: unknown channel `{other}` (luma, red, green, blue)"
            )))
        }
    })
}

/// PSNR and SSIM between two images, compared as linear amplitudes.
pub fn cmd_metrics(cfg: &MetricsConfig, out: Option<&Path>) -> Result<serde_json::Value> {
    let (Some(a), Some(b)) = (&cfg.a, &cfg.b) else {
        return Err(HoloError::config("field `a`/`b`: two images are needed"));
    };
    let ch = metrics_channel(&cfg.channel)?;
    let first = load_shape(a)?;
    let x = load_amplitude(Path::new(a), ch, first)?;
    let second = load_shape(b)?;
    if second != first {
        return Err(HoloError::dim(format!("{a} is {first:?}, {b} is {second:?}")));
    }
    let y = load_amplitude(Path::new(b), ch, first)?;
    let v = json!({ "a": a, "b": b, "psnr": psnr(&x, &y)?, "ssim": ssim(&x, &y)? });
    if let Some(out) = out {
        start(out, cfg)?;
        write_json(&out.join("metrics.json"), &v)?;
    }
    Ok(v)
}

fn load_shape(path: &str) -> Result<(usize, usize)> {
    holo_core::imageio::dimensions(Path::new(path))
}
