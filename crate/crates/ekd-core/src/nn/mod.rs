//! Block-structured backbones and guided classifier heads.
//!
//! A backbone is an ordered list of C blocks (conv/bn/relu/pool layers)
//! followed by a global average pool and a fully connected classifier. The
//! pooled vector is the backbone feature `F`; each of the first C-1 block
//! outputs is an attachment point for a guided module: a bottleneck adapter
//! plus classifier head whose pooled feature matches the dimension of `F`.

mod init;
mod stream;

pub use stream::{
    apply_weight_decay_to, backbone_load_named_tensors, backbone_named_tensors, Backbone,
    BackboneOutputs, Binding, BlockOutputs, Buffer, GuidedHeadOutput, GuidedModule, Mode, Param,
    Stream, StreamBinding,
};

use serde::{Deserialize, Serialize};

use crate::error::{EkdError, Result};

/// Batch-norm running statistics keep this fraction of the old value.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub layers: Vec<LayerSpec>,
}

/// Architecture of one stream's main network, divided into C blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
    /// Width of the pooled pre-FC feature; must equal the channel count
    /// after the last block.
    pub final_feature_dim: usize,
    pub blocks: Vec<BlockSpec>,
}

/// Channel/spatial sizes after each block for a validated backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialChain {
    /// (channels, spatial side) after block b (0-based).
    pub block_out: Vec<(usize, usize)>,
}

impl SpatialChain {
    pub fn final_channels(&self) -> usize {
        self.block_out.last().expect("validated chain").0
    }

    pub fn final_spatial(&self) -> usize {
        self.block_out.last().expect("validated chain").1
    }
}

impl BackboneSpec {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Walks the layer chain, checking that every convolution and pool
    /// produces a consistent positive spatial size, and that the declared
    /// feature dimension matches the last block's channels.
    pub fn validate(&self) -> Result<SpatialChain> {
        if self.blocks.len() < 2 {
            return Err(EkdError::Spec(format!(
                "backbone needs at least 2 blocks (one guided attachment point), got {}",
                self.blocks.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(EkdError::Spec("num_classes must be at least 2".into()));
        }
        if self.input_channels == 0 || self.input_resolution == 0 {
            return Err(EkdError::Spec("input dimensions must be positive".into()));
        }
        let mut channels = self.input_channels;
        let mut spatial = self.input_resolution;
        let mut block_out = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            if block.layers.is_empty() {
                return Err(EkdError::Spec(format!("block {} has no layers", bi + 1)));
            }
            for layer in &block.layers {
                match layer {
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    } => {
                        spatial = layer_out_dim(spatial, *kernel, *stride, *padding, bi)?;
                        if *out_channels == 0 {
                            return Err(EkdError::Spec(format!(
                                "block {}: conv with zero output channels",
                                bi + 1
                            )));
                        }
                        channels = *out_channels;
                    }
                    LayerSpec::MaxPool { kernel, stride } => {
                        spatial = layer_out_dim(spatial, *kernel, *stride, 0, bi)?;
                    }
                    LayerSpec::BatchNorm | LayerSpec::Relu => {}
                }
            }
            block_out.push((channels, spatial));
        }
        if self.final_feature_dim != channels {
            return Err(EkdError::Spec(format!(
                "final_feature_dim {} does not match last block channels {}",
                self.final_feature_dim, channels
            )));
        }
        Ok(SpatialChain { block_out })
    }
}

fn layer_out_dim(
    spatial: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    block: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(EkdError::Spec(format!(
            "block {}: kernel/stride must be positive",
            block + 1
        )));
    }
    let padded = spatial + 2 * padding;
    if padded < kernel {
        return Err(EkdError::Spec(format!(
            "block {}: window {} exceeds padded input {}",
            block + 1,
            kernel,
            padded
        )));
    }
    let out = (padded - kernel) / stride + 1;
    if out == 0 {
        return Err(EkdError::Spec(format!(
            "block {}: spatial size collapsed to zero",
            block + 1
        )));
    }
    Ok(out)
}

/// Architecture of one guided module: a bottleneck that maps a block's
/// feature map to a feature of the backbone's final dimension plus a
/// classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidedModuleSpec {
    pub in_channels: usize,
    pub in_spatial: usize,
    pub reduce_channels: usize,
    pub out_feature_dim: usize,
    pub target_spatial: usize,
    pub num_classes: usize,
}

impl GuidedModuleSpec {
    /// Derives the guided spec for attachment point `block_index`
    /// (1-based, in `1..C`).
    pub fn derive(spec: &BackboneSpec, chain: &SpatialChain, block_index: usize) -> Result<Self> {
        if block_index == 0 || block_index >= spec.num_blocks() {
            return Err(EkdError::Spec(format!(
                "guided attachment block {} out of range 1..{}",
                block_index,
                spec.num_blocks()
            )));
        }
        let (in_channels, in_spatial) = chain.block_out[block_index - 1];
        let guided = GuidedModuleSpec {
            in_channels,
            in_spatial,
            reduce_channels: (in_channels / 2).max(4),
            out_feature_dim: spec.final_feature_dim,
            target_spatial: chain.final_spatial(),
            num_classes: spec.num_classes,
        };
        guided.downsample_stages()?;
        Ok(guided)
    }

    /// Number of stride-2 stages needed to reach the backbone's final
    /// spatial size (each stage maps s -> ceil(s/2) via 3x3/s2/p1).
    pub fn downsample_stages(&self) -> Result<usize> {
        let mut s = self.in_spatial;
        let mut stages = 0usize;
        while s > self.target_spatial {
            let next = (s - 1) / 2 + 1;
            if next == s {
                break;
            }
            s = next;
            stages += 1;
        }
        if s != self.target_spatial {
            return Err(EkdError::Spec(format!(
                "guided module cannot reach spatial {} from {} by halving",
                self.target_spatial, self.in_spatial
            )));
        }
        Ok(stages)
    }

    pub fn validate(&self, final_feature_dim: usize) -> Result<()> {
        if self.out_feature_dim != final_feature_dim {
            return Err(EkdError::Spec(format!(
                "guided out_feature_dim {} must equal backbone feature dim {}",
                self.out_feature_dim, final_feature_dim
            )));
        }
        if self.reduce_channels == 0 {
            return Err(EkdError::Spec("reduce_channels must be positive".into()));
        }
        self.downsample_stages()?;
        Ok(())
    }
}

/// Attachment points for `pairs` guided modules: the deepest blocks first,
/// returned in ascending order.
pub fn attachment_blocks(num_blocks: usize, pairs: usize) -> Result<Vec<usize>> {
    let max_pairs = num_blocks - 1;
    if pairs > max_pairs {
        return Err(EkdError::Spec(format!(
            "{pairs} guided pairs requested but only {max_pairs} attachment points exist"
        )));
    }
    Ok(((max_pairs - pairs + 1)..=max_pairs).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> BackboneSpec {
        // 3 blocks: 8 -> 16 -> 32 channels, each halving via maxpool.
        let block = |ch: usize| BlockSpec {
            layers: vec![
                LayerSpec::Conv {
                    out_channels: ch,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
            ],
        };
        BackboneSpec {
            input_channels: 3,
            input_resolution: 32,
            num_classes: 10,
            final_feature_dim: 32,
            blocks: vec![block(8), block(16), block(32)],
        }
    }

    #[test]
    fn toy_chain_shapes() {
        let chain = toy_spec().validate().unwrap();
        assert_eq!(chain.block_out, vec![(8, 16), (16, 8), (32, 4)]);
        assert_eq!(chain.final_channels(), 32);
    }

    #[test]
    fn single_block_rejected() {
        let mut spec = toy_spec();
        spec.blocks.truncate(1);
        spec.final_feature_dim = 8;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn feature_dim_mismatch_rejected() {
        let mut spec = toy_spec();
        spec.final_feature_dim = 64;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn guided_spec_derivation() {
        let spec = toy_spec();
        let chain = spec.validate().unwrap();
        let g = GuidedModuleSpec::derive(&spec, &chain, 1).unwrap();
        assert_eq!(g.in_channels, 8);
        assert_eq!(g.in_spatial, 16);
        assert_eq!(g.reduce_channels, 4);
        assert_eq!(g.out_feature_dim, 32);
        assert_eq!(g.downsample_stages().unwrap(), 2); // 16 -> 8 -> 4
        let g2 = GuidedModuleSpec::derive(&spec, &chain, 2).unwrap();
        assert_eq!(g2.downsample_stages().unwrap(), 1); // 8 -> 4
    }

    #[test]
    fn guided_dim_consistency_enforced() {
        let spec = toy_spec();
        let chain = spec.validate().unwrap();
        let mut g = GuidedModuleSpec::derive(&spec, &chain, 1).unwrap();
        g.out_feature_dim = 16;
        assert!(g.validate(32).is_err());
    }

    #[test]
    fn deepest_blocks_attach_first() {
        assert_eq!(attachment_blocks(3, 2).unwrap(), vec![1, 2]);
        assert_eq!(attachment_blocks(3, 1).unwrap(), vec![2]);
        assert_eq!(attachment_blocks(5, 2).unwrap(), vec![3, 4]);
        assert!(attachment_blocks(3, 0).unwrap().is_empty());
        assert!(attachment_blocks(3, 3).is_err());
    }
}
