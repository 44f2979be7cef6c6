//! Configuration, experiment drivers and artifact writers behind the `cgh`
//! binary.

pub mod commands;
pub mod config;
pub mod output;
pub mod sweep;
pub mod targets;

use holo_core::HoloError;

/// 2 for numeric failures during a run, 1 for everything else.
pub fn exit_code(e: &HoloError) -> i32 {
    match e {
        HoloError::NonFinite { .. } => 2,
        _ => 1,
    }
}
