use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, IoError};
use crate::network::{ActivationKind, Architecture, ConvSpec, FcSpec, LossKind};
use crate::tensor::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerEntry {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        activation: ActivationKind,
    },
    Fc {
        classes: usize,
    },
}

fn one() -> usize {
    1
}

/// On-disk form of an [`Architecture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfigFile {
    pub name: String,
    /// Free-form note on where the layer settings come from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub input: InputDims,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub loss: LossKind,
}

impl ArchConfigFile {
    pub fn to_architecture(&self) -> Result<Architecture, IoError> {
        let Some((last, convs)) = self.layers.split_last() else {
            return Err(IoError::Format("\"layers\" is empty".into()));
        };
        let LayerEntry::Fc { classes } = *last else {
            return Err(IoError::Format(
                "the last layer must be {\"type\": \"fc\"}".into(),
            ));
        };
        let conv_layers = convs
            .iter()
            .enumerate()
            .map(|(i, l)| match *l {
                LayerEntry::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => Ok(ConvSpec {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                }),
                LayerEntry::Fc { .. } => Err(IoError::Format(format!(
                    "layer {i}: only the last layer may be fully connected"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let input = Shape3::new(self.input.height, self.input.width, self.input.channels);
        Ok(Architecture::new(
            self.name.clone(),
            input,
            conv_layers,
            FcSpec { classes },
        )?)
    }
}

pub fn parse_arch_config_str(text: &str) -> Result<Architecture, IoError> {
    let file: ArchConfigFile = serde_json::from_str(text)?;
    file.to_architecture()
}

pub fn parse_arch_config(path: &Path) -> Result<Architecture, IoError> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?;
    parse_arch_config_str(text)
}

pub fn arch_to_config(arch: &Architecture, provenance: Option<String>) -> ArchConfigFile {
    let mut layers: Vec<LayerEntry> = arch
        .conv_layers
        .iter()
        .map(|s| LayerEntry::Conv {
            filters: s.filters,
            kernel: s.kernel,
            stride: s.stride,
            padding: s.padding,
            activation: s.activation,
        })
        .collect();
    layers.push(LayerEntry::Fc {
        classes: arch.fc.classes,
    });
    ArchConfigFile {
        name: arch.name.clone(),
        provenance,
        input: InputDims {
            height: arch.input.height,
            width: arch.input.width,
            channels: arch.input.channels,
        },
        layers,
        loss: arch.loss,
    }
}

pub fn write_arch_config(arch: &Architecture, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(&arch_to_config(arch, None))?;
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "name": "toy",
        "input": {"height": 8, "width": 8, "channels": 1},
        "layers": [
            {"type": "conv", "filters": 4, "kernel": 3, "stride": 1, "padding": 1, "activation": "relu"},
            {"type": "fc", "classes": 3}
        ],
        "loss": "cross_entropy"
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let arch = parse_arch_config_str(TOY).unwrap();
        assert_eq!(arch.conv_layers.len(), 1);
        assert_eq!(arch.fc.classes, 3);
        let text = serde_json::to_string(&arch_to_config(&arch, None)).unwrap();
        assert_eq!(parse_arch_config_str(&text).unwrap(), arch);
    }

    #[test]
    fn rejects_bad_documents() {
        let empty = r#"{"name":"e","input":{"height":2,"width":2,"channels":1},"layers":[]}"#;
        assert!(matches!(
            parse_arch_config_str(empty),
            Err(IoError::Format(_))
        ));
        let gelu = TOY.replace("relu", "gelu");
        let err = parse_arch_config_str(&gelu).unwrap_err().to_string();
        assert!(err.contains("gelu"), "{err}");
        let extra = TOY.replace("\"loss\"", "\"dropout\": 0.5, \"loss\"");
        assert!(parse_arch_config_str(&extra).is_err());
        let extra_layer_key = TOY.replace("\"stride\": 1,", "\"stride\": 1, \"groups\": 2,");
        assert!(parse_arch_config_str(&extra_layer_key).is_err());
        let zero = TOY.replace("\"filters\": 4", "\"filters\": 0");
        assert!(parse_arch_config_str(&zero).is_err());
        let fc_first = r#"{"name":"e","input":{"height":2,"width":2,"channels":1},
            "layers":[{"type":"fc","classes":2},{"type":"fc","classes":2}]}"#;
        assert!(parse_arch_config_str(fc_first).is_err());
    }
}
