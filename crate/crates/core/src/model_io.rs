//! JSON persistence of [`CalibratedModel`].
//!
//! Arrays are stored as `{ "shape": [rows, cols], "data": <base64 of
//! little-endian f64> }`, so a save/load round trip is bit exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HoloError, Result};
use crate::field::GridSpec;
use crate::propagation::CalibratedModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedArray {
    pub shape: [usize; 2],
    pub data: String,
}

impl EncodedArray {
    pub fn encode(a: &Array2<f64>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 8);
        for v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        EncodedArray {
            shape: [a.nrows(), a.ncols()],
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self, name: &str) -> Result<Array2<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| HoloError::Format(format!("{name}: bad base64: {e}")))?;
        let [m, n] = self.shape;
        if bytes.len() != m * n * 8 {
            return Err(HoloError::Format(format!(
                "{name}: {} bytes for shape {m}x{n}",
                bytes.len()
            )));
        }
        let vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((m, n), vals).map_err(|e| HoloError::Format(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    grid: GridSpec,
    distances: Vec<f64>,
    lut: Vec<f64>,
    a_src: EncodedArray,
    phi_src: EncodedArray,
    a_f: EncodedArray,
    phi_f: EncodedArray,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbation: Option<Value>,
}

/// Serializes `model`, optionally with a free-form `perturbation` block.
pub fn model_to_json(model: &CalibratedModel, perturbation: Option<Value>) -> Result<String> {
    let doc = ModelDoc {
        format_version: FORMAT_VERSION,
        grid: model.grid,
        distances: model.distances.clone(),
        lut: model.lut.clone(),
        a_src: EncodedArray::encode(&model.a_src),
        phi_src: EncodedArray::encode(&model.phi_src),
        a_f: EncodedArray::encode(&model.a_f),
        phi_f: EncodedArray::encode(&model.phi_f),
        perturbation,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses a model document, returning the model and its perturbation block.
pub fn model_from_json(text: &str) -> Result<(CalibratedModel, Option<Value>)> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(HoloError::Format(format!(
            "unsupported model format_version {} (expected {FORMAT_VERSION})",
            doc.format_version
        )));
    }
    let model = CalibratedModel {
        grid: doc.grid,
        a_src: doc.a_src.decode("a_src")?,
        phi_src: doc.phi_src.decode("phi_src")?,
        a_f: doc.a_f.decode("a_f")?,
        phi_f: doc.phi_f.decode("phi_f")?,
        lut: doc.lut,
        distances: doc.distances,
    };
    model.validate()?;
    Ok((model, doc.perturbation))
}

pub fn save_model(path: &Path, model: &CalibratedModel, perturbation: Option<Value>) -> Result<()> {
    std::fs::write(path, model_to_json(model, perturbation)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(CalibratedModel, Option<Value>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HoloError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    model_from_json(&text)
}
