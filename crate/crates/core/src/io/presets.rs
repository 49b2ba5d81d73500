//! Architectures shipped with the crate.

use std::path::Path;

use super::arch_config::{parse_arch_config, ArchConfigFile};
use super::IoError;
use crate::network::Architecture;

/// A shipped architecture config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub json: &'static str,
}

impl Preset {
    pub fn config(&self) -> Result<ArchConfigFile, IoError> {
        Ok(serde_json::from_str(self.json)?)
    }

    pub fn architecture(&self) -> Result<Architecture, IoError> {
        self.config()?.to_architecture()
    }
}

const PRESETS: [Preset; 5] = [
    Preset {
        name: "lenet",
        json: include_str!("../../presets/lenet.json"),
    },
    Preset {
        name: "lenet-x",
        json: include_str!("../../presets/lenet-x.json"),
    },
    Preset {
        name: "lenet-ex",
        json: include_str!("../../presets/lenet-ex.json"),
    },
    Preset {
        name: "cnn6",
        json: include_str!("../../presets/cnn6.json"),
    },
    Preset {
        name: "cnn6-x",
        json: include_str!("../../presets/cnn6-x.json"),
    },
];

pub fn presets() -> &'static [Preset] {
    &PRESETS
}

/// Parsed contents of every shipped preset.
pub fn preset_architectures() -> Result<Vec<ArchConfigFile>, IoError> {
    PRESETS.iter().map(Preset::config).collect()
}

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS
        .iter()
        .copied()
        .find(|p| p.name.eq_ignore_ascii_case(name))
}

/// Resolves `--arch`: an existing file is parsed as a config, anything else
/// is looked up as a preset name.
pub fn load_architecture(arg: &str) -> Result<Architecture, IoError> {
    let path = Path::new(arg);
    if path.is_file() {
        return parse_arch_config(path);
    }
    match preset(arg) {
        Some(p) => p.architecture(),
        None => {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            Err(IoError::Format(format!(
                "{arg:?} is neither a config file nor a preset ({})",
                names.join(", ")
            )))
        }
    }
}
