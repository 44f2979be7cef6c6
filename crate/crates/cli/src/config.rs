//! Run configurations: one JSON document per command, with dotted-path
//! overrides applied before typed parsing.

use std::path::Path;

use holo_core::calibration::{DatasetSpec, FitConfig, ParamGroups};
use holo_core::citl::Perturbation;
use holo_core::imageio::Channel;
use holo_core::optimizer::{Method, OptimConfig};
use holo_core::propagation::defaults;
use holo_core::supervision::{training_diopters, RegConfig, StftSpec};
use holo_core::{GridSpec, HoloError, QuantScheme, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Reads a config file, or an empty document when no path is given.
pub fn load_document(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| HoloError::config(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| HoloError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(HoloError::config(format!("config {} must be a JSON object", path.display())));
    }
    Ok(v)
}

/// Applies `KEY=VALUE`, where `KEY` is a dotted path and `VALUE` is parsed
/// as JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HoloError::config(format!("override `{spec}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(HoloError::config(format!("override key `{key}` is not a dotted path")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(HoloError::config(format!(
                    "override `{key}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last part")
}

/// Lays `user` over `base`. Objects merge key by key unless `user` has a
/// key `base` lacks or names a different `kind`; then, like every other
/// value, `user` replaces `base` whole.
pub fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) if mergeable(b, &u) => {
            for (k, v) in u {
                merge(b.get_mut(&k).expect("key checked"), v);
            }
        }
        (b, u) => *b = u,
    }
}

fn mergeable(base: &Map<String, Value>, user: &Map<String, Value>) -> bool {
    user.keys().all(|k| base.contains_key(k)) && user.get("kind").is_none_or(|k| base.get("kind") == Some(k))
}

/// Typed parse whose errors name the offending field path.
pub fn parse<T: DeserializeOwned>(doc: Value) -> Result<T> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            HoloError::config(inner.to_string())
        } else {
            HoloError::config(format!("field `{path}`: {inner}"))
        }
    })
}

/// The canonical serialization written as `config.json`.
pub fn canonical<T: Serialize>(cfg: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(cfg)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    #[default]
    Green,
    Blue,
}

impl Color {
    pub fn wavelength(self) -> f64 {
        defaults::WAVELENGTHS[self as usize]
    }

    pub fn channel(self) -> Channel {
        match self {
            Color::Red => Channel::Red,
            Color::Green => Channel::Green,
            Color::Blue => Channel::Blue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optics {
    pub height: usize,
    pub width: usize,
    pub pitch: f64,
    pub color: Color,
    /// Overrides the color's wavelength, meters.
    pub wavelength: Option<f64>,
}

impl Default for Optics {
    fn default() -> Self {
        Optics {
            height: 64,
            width: 64,
            pitch: defaults::PITCH,
            color: Color::Green,
            wavelength: None,
        }
    }
}

impl Optics {
    pub fn grid(&self) -> Result<GridSpec> {
        let wl = self.wavelength.unwrap_or(self.color.wavelength());
        GridSpec::new(self.height, self.width, self.pitch, wl).map_err(|e| HoloError::config(format!("optics: {e}")))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

fn distance_2d() -> f64 {
    defaults::DISTANCE_2D
}

fn focal_distances() -> Vec<f64> {
    let d = &defaults::PLANE_DISTANCES;
    vec![d[0], d[d.len() - 1]]
}

fn defocus_sigma() -> f64 {
    3.0
}

fn disparity() -> f64 {
    0.5
}

/// Images are `builtin:<name>` or a file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    Amp2d {
        image: String,
        #[serde(default = "distance_2d")]
        distance: f64,
    },
    /// Depth maps encode diopters linearly, 0 to the farthest plane.
    Rgbd {
        image: String,
        depth: String,
        #[serde(default = "training_diopters")]
        plane_diopters: Vec<f64>,
        #[serde(default)]
        regularizer: Option<RegConfig>,
    },
    /// With no images, the builtin two-plane scene.
    FocalStack {
        #[serde(default)]
        images: Vec<String>,
        #[serde(default = "focal_distances")]
        distances: Vec<f64>,
        #[serde(default = "defocus_sigma")]
        defocus_sigma: f64,
    },
    /// The builtin layered light field.
    LightField {
        #[serde(default = "disparity")]
        disparity: f64,
        #[serde(default = "distance_2d")]
        distance: f64,
        #[serde(default)]
        stft: StftSpec,
    },
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig::Amp2d {
            image: "builtin:rings".into(),
            distance: defaults::DISTANCE_2D,
        }
    }
}

fn default_scheme() -> QuantScheme {
    QuantScheme::uniform(4).expect("4 bits is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub seed: u64,
    pub optics: Optics,
    pub scheme: QuantScheme,
    pub target: TargetConfig,
    pub optim: OptimConfig,
    /// Calibrated model JSON; the nominal model when absent.
    pub model: Option<String>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            seed: 0,
            optics: Optics::default(),
            scheme: default_scheme(),
            target: TargetConfig::default(),
            optim: OptimConfig::default(),
            model: None,
        }
    }
}

fn builtin_targets() -> Vec<String> {
    holo_core::synthetic::IMAGE_NAMES.iter().map(|n| format!("builtin:{n}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: u64,
    pub optics: Optics,
    pub bits: Vec<u32>,
    pub frames: Vec<usize>,
    pub methods: Vec<Method>,
    pub targets: Vec<String>,
    pub distance: f64,
    /// Shared by every cell; `frames` and `method` are set per cell.
    pub optim: OptimConfig,
    /// Learning rate of multi-frame cells; single-frame cells use `optim.lr`.
    pub multi_frame_lr: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            optics: Optics::default(),
            bits: (1..=8).collect(),
            frames: vec![1, 2, 4, 8],
            methods: vec![
                Method::Naive,
                Method::UnitJacobian,
                Method::Sigmoid,
                Method::GumbelSoftmax,
                Method::GumbelSoftmaxForward,
            ],
            targets: builtin_targets(),
            distance: defaults::DISTANCE_2D,
            optim: OptimConfig {
                iterations: 500,
                ..Default::default()
            },
            multi_frame_lr: Some(0.02),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisplayConfig {
    pub perturbation: Perturbation,
    /// Capture noise relative to the peak noiseless intensity.
    pub noise: f64,
}

impl Default for DisplayConfig {
    fn default() -> Self {
        DisplayConfig {
            perturbation: Perturbation::default(),
            noise: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CitlConfig {
    pub seed: u64,
    pub optics: Optics,
    pub bits: u32,
    pub targets: Vec<String>,
    pub distance: f64,
    pub display: DisplayConfig,
    /// Method of the surrogate variant; the other variant is always naive.
    pub surrogate: Method,
    pub optim: OptimConfig,
}

impl Default for CitlConfig {
    fn default() -> Self {
        CitlConfig {
            seed: 0,
            optics: Optics::default(),
            bits: 4,
            targets: builtin_targets(),
            distance: defaults::DISTANCE_2D,
            display: DisplayConfig::default(),
            surrogate: Method::GumbelSoftmax,
            optim: OptimConfig {
                iterations: 300,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub seed: u64,
    pub optics: Optics,
    pub bits: u32,
    pub distances: Vec<f64>,
    pub display: DisplayConfig,
    pub dataset: DatasetSpec,
    /// Load captures from this directory instead of generating them.
    pub dataset_dir: Option<String>,
    /// Write the generated captures under the output directory.
    pub save_dataset: bool,
    /// `groups` is ignored; the ladder decides what is fitted.
    pub fit: FitConfig,
    pub ladder: Vec<ParamGroups>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            seed: 0,
            optics: Optics::default(),
            bits: 4,
            distances: defaults::PLANE_DISTANCES.to_vec(),
            display: DisplayConfig::default(),
            dataset: DatasetSpec::default(),
            dataset_dir: None,
            save_dataset: false,
            fit: FitConfig::default(),
            ladder: ParamGroups::ladder(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub a: Option<String>,
    pub b: Option<String>,
    /// `luma` or a color name.
    pub channel: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            a: None,
            b: None,
            channel: "luma".into(),
        }
    }
}

/// The top-level `seed` drives every nested seed.
pub trait Seeded {
    fn propagate_seed(&mut self);
}

impl Seeded for OptimizeConfig {
    fn propagate_seed(&mut self) {
        self.optim.seed = self.seed;
    }
}

impl Seeded for SweepConfig {
    fn propagate_seed(&mut self) {
        self.optim.seed = self.seed;
    }
}

impl Seeded for CitlConfig {
    fn propagate_seed(&mut self) {
        self.optim.seed = self.seed;
        self.display.perturbation.seed = self.seed;
    }
}

impl Seeded for CalibrateConfig {
    fn propagate_seed(&mut self) {
        self.display.perturbation.seed = self.seed;
        self.dataset.seed = self.seed;
        self.fit.seed = self.seed;
    }
}

impl Seeded for MetricsConfig {
    fn propagate_seed(&mut self) {}
}

/// Loads, overrides, parses, and normalizes a command's config. Partial
/// sections inherit the command's defaults, not their type's.
pub fn resolve<T: DeserializeOwned + Serialize + Default + Seeded>(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<T> {
    let mut doc = load_document(path)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut doc, &format!("seed={s}"))?;
    }
    let mut full = serde_json::to_value(T::default())?;
    merge(&mut full, doc);
    let mut cfg: T = parse(full)?;
    cfg.propagate_seed();
    Ok(cfg)
}
