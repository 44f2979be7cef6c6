//! Artifact writers shared by the commands.

use std::path::Path;

use holo_core::imageio::{save_amplitude_png, save_phase_png};
use holo_core::report::Reconstruction;
use holo_core::{HoloError, Result};
use ndarray::Array2;
use serde::Serialize;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| HoloError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| HoloError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn csv_error(e: csv::Error) -> HoloError {
    HoloError::Format(e.to_string())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss(path: &Path, history: &[f64]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        iteration: usize,
        loss: f64,
    }
    let rows: Vec<Row> = history.iter().enumerate().map(|(iteration, &loss)| Row { iteration, loss }).collect();
    write_csv(path, &rows)
}

/// `phases_frame<t>.png` per frame.
pub fn write_phases(dir: &Path, radians: &[Array2<f64>]) -> Result<()> {
    for (t, p) in radians.iter().enumerate() {
        save_phase_png(p, &dir.join(format!("phases_frame{t}.png")))?;
    }
    Ok(())
}

/// `recon_<label>.png` per reconstruction.
pub fn write_reconstructions(dir: &Path, recs: &[Reconstruction]) -> Result<()> {
    for r in recs {
        save_amplitude_png(&r.image, &dir.join(format!("recon_{}.png", r.label)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneMetrics {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn plane_metrics(recs: &[Reconstruction]) -> Vec<PlaneMetrics> {
    recs.iter()
        .map(|r| PlaneMetrics {
            label: r.label.clone(),
            psnr: r.psnr,
            ssim: r.ssim,
        })
        .collect()
}
