//! File formats: binary checkpoints, JSONL calibration sets, key=value configs and JSON reports.

pub mod calibset;
pub mod checkpoint;
pub mod config;
pub mod report;

pub use calibset::{decode_items, encode_items, read_items, write_items};
pub use checkpoint::{
    cost_model, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
};
pub use config::{parse_kv, read_kv};

/// Tags an I/O error with the path it concerns.
pub(crate) fn at_path(
    path: &std::path::Path,
) -> impl FnOnce(std::io::Error) -> crate::TaqError + '_ {
    move |e| {
        crate::TaqError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    }
}
