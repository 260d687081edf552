//! File formats: tensors, PGM images, CSV, TOML configs and manifests.

pub mod config;
pub mod csv_export;
pub mod manifest;
pub mod pgm;
pub mod tensor;

pub use config::{parse_config, parse_experiment, RunConfig};
pub use manifest::write_manifest;
pub use pgm::{read_pgm, write_pgm, GrayImage};
pub use tensor::{read_tensor, write_tensor, Tensor};
