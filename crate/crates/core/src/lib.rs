//! Quantized, time-multiplexed phase hologram optimization.

mod error;
mod fft;
pub mod field;
pub mod propagation;
pub mod quantization;
pub mod supervision;
pub mod engine;
pub mod optimizer;
pub mod metrics;
pub mod synthetic;
pub mod model_io;
pub mod citl;
pub mod calibration;
pub mod imageio;
pub mod report;

pub use error::{HoloError, Result};
pub use field::{ComplexField, FieldStack, FrameStack, GridSpec, PhaseStack};
pub use propagation::{CalibratedModel, SlmPhase, TransferFunction};
pub use quantization::{NoiseKey, QuantScheme, SurrogateKind, SurrogateSpec};
