//! File formats: architecture configs, tensor containers, PNG images,
//! shipped presets and evaluation tables.

mod arch_config;
mod container;
mod image;
mod presets;

pub use arch_config::{
    arch_to_config, parse_arch_config, parse_arch_config_str, write_arch_config, ArchConfigFile,
    InputDims, LayerEntry,
};
pub use container::{
    capture_from_entries, capture_to_entries, decode_tensor_container, encode_tensor_container,
    params_from_entries, params_to_entries, read_tensor_container, write_tensor_container,
    TensorEntry, CONTAINER_MAGIC,
};
pub use image::{decode_png, encode_png, load_image, save_image};
pub use presets::{load_architecture, preset, preset_architectures, presets, Preset};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::network::NetworkError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed document: {0}")]
    Format(String),
    #[error("architecture config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("container: {0}")]
    Container(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}
