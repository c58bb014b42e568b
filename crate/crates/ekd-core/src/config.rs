//! Experiment configuration: one strict TOML (or JSON) document describing a
//! run. A run directory's config snapshot alone reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{EkdError, Result};
use crate::nn::{BackboneSpec, BlockSpec, LayerSpec};
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory that receives the config snapshot, metrics, checkpoints
    /// and exports.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/ekd"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    /// Gradient checks, loss oracles, determinism micro-checks.
    Fast,
    /// Fast checks plus a desk-scale training smoke test.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub level: VerifyLevel,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            level: VerifyLevel::Fast,
        }
    }
}

/// Backbone description: either a named preset (sized against the dataset)
/// or an explicit block list with its feature width.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Preset grammar: `small3x<base>` / `tiny2x<base>`, optionally with a
    /// trailing `f<width>` overriding the final block's channel count, e.g.
    /// `small3x16f32`.
    pub preset: Option<String>,
    pub blocks: Option<Vec<BlockSpec>>,
    /// Required with explicit blocks; ignored for presets.
    pub final_feature_dim: Option<usize>,
}

impl BackboneConfig {
    pub fn preset(name: &str) -> Self {
        BackboneConfig {
            preset: Some(name.to_string()),
            blocks: None,
            final_feature_dim: None,
        }
    }

    /// Resolves against the dataset's geometry (channels, resolution,
    /// classes all come from the data).
    pub fn resolve(
        &self,
        input_channels: usize,
        input_resolution: usize,
        num_classes: usize,
    ) -> Result<BackboneSpec> {
        let spec = match (&self.preset, &self.blocks) {
            (Some(_), Some(_)) => {
                return Err(EkdError::Config(
                    "backbone: preset and explicit blocks are mutually exclusive".into(),
                ));
            }
            (None, None) => {
                return Err(EkdError::Config(
                    "backbone: either a preset or explicit blocks is required".into(),
                ));
            }
            (Some(name), None) => {
                preset_spec(name, input_channels, input_resolution, num_classes)?
            }
            (None, Some(blocks)) => {
                let final_feature_dim = self.final_feature_dim.ok_or_else(|| {
                    EkdError::Config(
                        "backbone: explicit blocks require final_feature_dim".into(),
                    )
                })?;
                BackboneSpec {
                    input_channels,
                    input_resolution,
                    num_classes,
                    final_feature_dim,
                    blocks: blocks.clone(),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Builds `small3x<base>[f<final>]` / `tiny2x<base>[f<final>]`: stride-2
/// conv(3x3)+bn+relu stages with doubling channel counts.
fn preset_spec(
    name: &str,
    input_channels: usize,
    input_resolution: usize,
    num_classes: usize,
) -> Result<BackboneSpec> {
    let (depth, rest) = if let Some(rest) = name.strip_prefix("small3x") {
        (3usize, rest)
    } else if let Some(rest) = name.strip_prefix("tiny2x") {
        (2usize, rest)
    } else {
        return Err(EkdError::Config(format!("unknown backbone preset {name}")));
    };
    let (base, final_override) = match rest.split_once('f') {
        Some((b, f)) => (
            b.parse::<usize>()
                .map_err(|_| EkdError::Config(format!("bad preset base width in {name}")))?,
            Some(f.parse::<usize>().map_err(|_| {
                EkdError::Config(format!("bad preset feature width in {name}"))
            })?),
        ),
        None => (
            rest.parse::<usize>()
                .map_err(|_| EkdError::Config(format!("bad preset base width in {name}")))?,
            None,
        ),
    };
    if base == 0 {
        return Err(EkdError::Config(format!("preset {name} has zero width")));
    }
    let mut channels: Vec<usize> = (0..depth).map(|i| base << i).collect();
    if let Some(f) = final_override {
        *channels.last_mut().unwrap() = f;
    }
    let blocks = channels
        .iter()
        .map(|&ch| BlockSpec {
            layers: vec![
                LayerSpec::Conv {
                    out_channels: ch,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
            ],
        })
        .collect();
    Ok(BackboneSpec {
        input_channels,
        input_resolution,
        num_classes,
        final_feature_dim: *channels.last().unwrap(),
        blocks,
    })
}

/// The full experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub teacher: BackboneConfig,
    pub student: BackboneConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(EkdError::Config(format!(
                "schema_version {} unsupported (this build reads {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()
    }

    pub fn from_str_format(text: &str, json: bool) -> Result<Self> {
        let config: ExperimentConfig = if json {
            serde_json::from_str(text).map_err(|e| EkdError::Config(format!("json: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| EkdError::Config(format!("toml: {e}")))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(EkdError::io(path))?;
        let json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        Self::from_str_format(&text, json)
    }

    /// Writes the effective configuration as the run's TOML snapshot.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| EkdError::Config(format!("snapshot encode: {e}")))?;
        std::fs::write(path, text).map_err(EkdError::io(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SourceSpec, SyntheticSpec};

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            run: RunConfig::default(),
            train: TrainConfig::default(),
            teacher: BackboneConfig::preset("small3x16f32"),
            student: BackboneConfig::preset("small3x8"),
            dataset: DatasetSpec {
                source: SourceSpec::Synthetic(SyntheticSpec::default()),
                retain_fraction: 1.0,
                downsample_to: None,
                augmentation: Default::default(),
                normalization: None,
            },
            verify: VerifyConfig::default(),
        }
    }

    #[test]
    fn preset_shapes() {
        let spec = preset_spec("small3x8", 3, 32, 10).unwrap();
        let chain = spec.validate().unwrap();
        assert_eq!(chain.block_out, vec![(8, 16), (16, 8), (32, 4)]);
        let spec = preset_spec("small3x16f32", 3, 32, 10).unwrap();
        assert_eq!(spec.final_feature_dim, 32);
        let chain = spec.validate().unwrap();
        assert_eq!(chain.block_out, vec![(16, 16), (32, 8), (32, 4)]);
        let spec = preset_spec("tiny2x4", 3, 8, 4).unwrap();
        assert_eq!(spec.blocks.len(), 2);
        assert!(preset_spec("resnet50", 3, 32, 10).is_err());
    }

    #[test]
    fn toml_round_trip_and_snapshot() {
        let config = base_config();
        let text = toml::to_string_pretty(&config).unwrap();
        let back = ExperimentConfig::from_str_format(&text, false).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = toml::to_string_pretty(&base_config()).unwrap();
        text.push_str("\nunknown_key = 1\n");
        assert!(ExperimentConfig::from_str_format(&text, false).is_err());
        let mut nested = toml::to_string_pretty(&base_config()).unwrap();
        nested.push_str("\n[train.extra]\nfoo = 1\n");
        assert!(ExperimentConfig::from_str_format(&nested, false).is_err());
    }

    #[test]
    fn schema_version_checked() {
        let mut config = base_config();
        config.schema_version = 2;
        let text = toml::to_string_pretty(&config).unwrap();
        assert!(ExperimentConfig::from_str_format(&text, false).is_err());
    }

    #[test]
    fn json_accepted() {
        let config = base_config();
        let text = serde_json::to_string(&config).unwrap();
        let back = ExperimentConfig::from_str_format(&text, true).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn explicit_blocks_need_feature_dim() {
        let mut config = base_config();
        config.student = BackboneConfig {
            preset: None,
            blocks: Some(vec![
                BlockSpec {
                    layers: vec![LayerSpec::Conv {
                        out_channels: 8,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    }],
                },
                BlockSpec {
                    layers: vec![LayerSpec::Conv {
                        out_channels: 16,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    }],
                },
            ]),
            final_feature_dim: None,
        };
        assert!(config.student.resolve(3, 32, 10).is_err());
        config.student.final_feature_dim = Some(16);
        let spec = config.student.resolve(3, 32, 10).unwrap();
        assert_eq!(spec.num_blocks(), 2);
    }
}
