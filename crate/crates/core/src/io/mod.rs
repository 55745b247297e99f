//! Run configuration, checkpoint and tensor file formats, CSV and PNG output.

mod checkpoint;
mod config;
mod files;
pub mod plot;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{apply_override, load_json, load_run_config, parse_json, parse_run_config, with_overrides, RunConfig};
pub use files::{
    ensure_dir, points_csv, read_tensor_file, tensor_from_bytes, tensor_to_bytes, write_tensor_file, write_text,
    TENSOR_MAGIC,
};
