//! Turning target descriptions into objectives.

use std::path::Path;

use holo_core::imageio::{load_amplitude, load_encoded, Channel};
use holo_core::propagation::defaults;
use holo_core::supervision::{Objective, TargetContent};
use holo_core::{synthetic, GridSpec, HoloError, Result};
use ndarray::Array2;

use crate::config::TargetConfig;

/// Amplitude image from `builtin:<name>` or a file.
pub fn load_image(spec: &str, channel: Channel, shape: (usize, usize)) -> Result<Array2<f64>> {
    match spec.strip_prefix("builtin:") {
        Some(name) => synthetic::image(name, shape),
        None => load_amplitude(Path::new(spec), channel, shape),
    }
}

/// Depth in diopters. `builtin:ramp` runs from 0 D on the left to the
/// farthest plane on the right; files map encoded `[0, 1]` linearly.
pub fn load_depth(spec: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
    let far = defaults::PLANE_DIOPTERS[defaults::PLANE_DIOPTERS.len() - 1];
    match spec.strip_prefix("builtin:") {
        Some("ramp") => {
            let n = shape.1.max(2) - 1;
            Ok(Array2::from_shape_fn(shape, |(_, j)| far * j as f64 / n as f64))
        }
        Some(other) => Err(HoloError::Target(format!("unknown builtin depth map `{other}` (known: ramp)"))),
        None => Ok(load_encoded(Path::new(spec), Channel::Luma, shape)?.mapv(|v| v * far)),
    }
}

/// Short name for file and row labels: the builtin name or the file stem.
pub fn target_name(spec: &str) -> String {
    match spec.strip_prefix("builtin:") {
        Some(name) => name.to_string(),
        None => Path::new(spec)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| spec.to_string()),
    }
}

pub fn content(target: &TargetConfig, grid: &GridSpec, channel: Channel) -> Result<TargetContent> {
    let shape = grid.shape();
    Ok(match target {
        TargetConfig::Amp2d { image, distance } => TargetContent::Amp2d {
            amplitude: load_image(image, channel, shape)?,
            distance: *distance,
        },
        TargetConfig::Rgbd {
            image,
            depth,
            plane_diopters,
            ..
        } => TargetContent::Rgbd {
            amplitude: load_image(image, channel, shape)?,
            depth: load_depth(depth, shape)?,
            plane_diopters: plane_diopters.clone(),
        },
        TargetConfig::FocalStack {
            images,
            distances,
            defocus_sigma,
        } => {
            let planes = if images.is_empty() {
                if distances.len() != 2 {
                    return Err(HoloError::config(
                        "field `target.distances`: the builtin focal stack has two planes",
                    ));
                }
                synthetic::two_plane_focal_stack(shape, *defocus_sigma)?
            } else {
                images
                    .iter()
                    .map(|s| load_image(s, channel, shape))
                    .collect::<Result<Vec<_>>>()?
            };
            TargetContent::FocalStack {
                planes,
                distances: distances.clone(),
            }
        }
        TargetConfig::LightField {
            disparity,
            distance,
            stft,
        } => TargetContent::LightField {
            data: synthetic::layered_light_field(shape, stft, *disparity)?,
            distance: *distance,
            stft: *stft,
        },
    })
}

pub fn objective(target: &TargetConfig, grid: GridSpec, channel: Channel) -> Result<Objective> {
    let c = content(target, &grid, channel)?;
    let reg = match target {
        TargetConfig::Rgbd { regularizer, .. } => regularizer.as_ref(),
        _ => None,
    };
    Objective::from_target(grid, &c, reg)
}
