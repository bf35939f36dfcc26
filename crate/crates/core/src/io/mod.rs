//! On-disk formats: binary tensor files and the run configuration.

mod config;
mod tensor;

pub use config::{EpsMode, RunConfig, SEED_ENV};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, DTYPE_F64, MAGIC, VERSION};
