//! Parameter storage and the forward interpreters for backbones, guided
//! modules, and full streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::he_normal;
use super::{
    attachment_blocks, BackboneSpec, BlockSpec, GuidedModuleSpec, LayerSpec, SpatialChain,
    BN_EPS, BN_MOMENTUM,
};
use crate::autodiff::{bn_batch_stats, Tape, Var};
use crate::error::{EkdError, Result};
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor. Batch-norm scale/shift are excluded from weight decay.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub decay: bool,
}

/// A non-trainable persistent tensor (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BufId(usize);

/// Forward-pass flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Optimized pass: gradients recorded, batch statistics used and folded
    /// into the running estimates.
    Train,
    /// Teacher pass that produces supervision targets: batch statistics used
    /// but running estimates untouched (the teacher already consumed this
    /// batch during its own update).
    Supervise,
    /// Inference: running statistics, no gradient bookkeeping.
    Eval,
}

impl Mode {
    fn requires_grad(self) -> bool {
        !matches!(self, Mode::Eval)
    }

    fn batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }

    fn update_running(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Tape handles for one component's parameters during a single pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    fn bind<E: Scalar>(tape: &mut Tape<E>, params: &[Param<E>], mode: Mode) -> Result<Binding> {
        let vars = params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), mode.requires_grad()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Binding { vars })
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order (zeros where backward never reached).
    pub fn grads<E: Scalar>(&self, tape: &Tape<E>) -> Vec<Tensor<E>> {
        self.vars.iter().map(|v| tape.grad_or_zeros(*v)).collect()
    }

    /// True when no bound parameter received a nonzero gradient.
    pub fn grads_all_zero<E: Scalar>(&self, tape: &Tape<E>) -> bool {
        self.vars.iter().all(|v| match tape.grad(*v) {
            None => true,
            Some(g) => g.data().iter().all(|x| *x == E::zero()),
        })
    }
}

#[derive(Debug, Clone)]
enum LayerInstance {
    Conv {
        weight: ParamId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        scale: ParamId,
        shift: ParamId,
        mean: BufId,
        var: BufId,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

/// Incrementally builds the parameter/buffer tables for one component.
struct ComponentBuilder<'r, E: Scalar> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<Param<E>>,
    buffers: Vec<Buffer<E>>,
}

impl<'r, E: Scalar> ComponentBuilder<'r, E> {
    fn new(rng: &'r mut ChaCha8Rng) -> Self {
        ComponentBuilder {
            rng,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn add_param(&mut self, name: String, value: Tensor<E>, decay: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param { name, value, decay });
        id
    }

    fn add_buffer(&mut self, name: String, value: Tensor<E>) -> BufId {
        let id = BufId(self.buffers.len());
        self.buffers.push(Buffer { name, value });
        id
    }

    fn conv(&mut self, prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> LayerInstance {
        let fan_in = in_ch * kernel * kernel;
        let weight = he_normal(self.rng, vec![out_ch, in_ch, kernel, kernel], fan_in);
        LayerInstance::Conv {
            weight: self.add_param(format!("{prefix}.conv.weight"), weight, true),
            stride,
            padding,
        }
    }

    fn batch_norm(&mut self, prefix: &str, channels: usize) -> LayerInstance {
        LayerInstance::BatchNorm {
            scale: self.add_param(
                format!("{prefix}.bn.scale"),
                Tensor::full(vec![channels], E::one()),
                false,
            ),
            shift: self.add_param(
                format!("{prefix}.bn.shift"),
                Tensor::zeros(vec![channels]),
                false,
            ),
            mean: self.add_buffer(
                format!("{prefix}.bn.running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            var: self.add_buffer(
                format!("{prefix}.bn.running_var"),
                Tensor::full(vec![channels], E::one()),
            ),
        }
    }

    fn fc(&mut self, prefix: &str, in_dim: usize, out_dim: usize) -> (ParamId, ParamId) {
        let weight = he_normal(self.rng, vec![in_dim, out_dim], in_dim);
        let w = self.add_param(format!("{prefix}.weight"), weight, true);
        let b = self.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![out_dim]), true);
        (w, b)
    }
}

fn build_block_layers<E: Scalar>(
    builder: &mut ComponentBuilder<E>,
    prefix: &str,
    spec: &BlockSpec,
    in_channels: usize,
) -> (Vec<LayerInstance>, usize) {
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut channels = in_channels;
    for (li, layer) in spec.layers.iter().enumerate() {
        let lp = format!("{prefix}.layer{li}");
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                layers.push(builder.conv(&lp, channels, *out_channels, *kernel, *stride, *padding));
                channels = *out_channels;
            }
            LayerSpec::BatchNorm => layers.push(builder.batch_norm(&lp, channels)),
            LayerSpec::Relu => layers.push(LayerInstance::Relu),
            LayerSpec::MaxPool { kernel, stride } => layers.push(LayerInstance::MaxPool {
                kernel: *kernel,
                stride: *stride,
            }),
        }
    }
    (layers, channels)
}

fn apply_layer<E: Scalar>(
    tape: &mut Tape<E>,
    layer: &LayerInstance,
    x: Var,
    mode: Mode,
    binding: &Binding,
    buffers: &mut [Buffer<E>],
) -> Result<Var> {
    match layer {
        LayerInstance::Conv {
            weight,
            stride,
            padding,
        } => tape.conv2d(x, binding.var(*weight), *stride, *padding),
        LayerInstance::BatchNorm {
            scale,
            shift,
            mean,
            var,
        } => {
            let eps = E::from_f64c(BN_EPS);
            if mode.batch_stats() {
                let (batch_mean, batch_var) = bn_batch_stats(tape.value(x))?;
                if mode.update_running() {
                    let keep = E::from_f64c(BN_MOMENTUM);
                    let take = E::one() - keep;
                    for (r, b) in buffers[mean.0].value.data_mut().iter_mut().zip(&batch_mean) {
                        *r = *r * keep + *b * take;
                    }
                    for (r, b) in buffers[var.0].value.data_mut().iter_mut().zip(&batch_var) {
                        *r = *r * keep + *b * take;
                    }
                }
                tape.batch_norm2d(
                    x,
                    binding.var(*scale),
                    binding.var(*shift),
                    &batch_mean,
                    &batch_var,
                    eps,
                    true,
                )
            } else {
                let running_mean = buffers[mean.0].value.data().to_vec();
                let running_var = buffers[var.0].value.data().to_vec();
                tape.batch_norm2d(
                    x,
                    binding.var(*scale),
                    binding.var(*shift),
                    &running_mean,
                    &running_var,
                    eps,
                    false,
                )
            }
        }
        LayerInstance::Relu => tape.relu(x),
        LayerInstance::MaxPool { kernel, stride } => tape.max_pool2d(x, *kernel, *stride),
    }
}

/// The main network of one stream.
#[derive(Debug, Clone)]
pub struct Backbone<E: Scalar> {
    pub spec: BackboneSpec,
    pub chain: SpatialChain,
    blocks: Vec<Vec<LayerInstance>>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    params: Vec<Param<E>>,
    buffers: Vec<Buffer<E>>,
}

#[derive(Debug, Clone)]
pub struct BackboneOutputs {
    /// f^(b) for b in 1..C (every attachment point, whether or not a guided
    /// module is present).
    pub block_features: Vec<Var>,
    /// Pooled pre-FC feature F.
    pub feature: Var,
    pub logits: Var,
}

impl<E: Scalar> Backbone<E> {
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(spec, &mut rng)
    }

    /// Builds with an externally owned RNG so that a stream draws its
    /// backbone parameters before any guided module (keeping backbone
    /// initialization independent of the guided-pair count).
    pub fn build_with_rng(spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let chain = spec.validate()?;
        let mut builder = ComponentBuilder::new(rng);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut channels = spec.input_channels;
        for (bi, block) in spec.blocks.iter().enumerate() {
            let (layers, out_ch) =
                build_block_layers(&mut builder, &format!("block{}", bi + 1), block, channels);
            channels = out_ch;
            blocks.push(layers);
        }
        let (fc_weight, fc_bias) = builder.fc("fc", chain.final_channels(), spec.num_classes);
        Ok(Backbone {
            spec: spec.clone(),
            chain,
            blocks,
            fc_weight,
            fc_bias,
            params: builder.params,
            buffers: builder.buffers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<E>,
        x: Var,
        mode: Mode,
    ) -> Result<(BackboneOutputs, Binding)> {
        let shape = tape.value(x).shape().to_vec();
        let want = [
            self.spec.input_channels,
            self.spec.input_resolution,
            self.spec.input_resolution,
        ];
        if shape.len() != 4 || shape[1..] != want {
            return Err(EkdError::shape(
                "backbone",
                format!("input {shape:?} does not match spec [N, {}, {}, {}]", want[0], want[1], want[2]),
            ));
        }
        let binding = Binding::bind(tape, &self.params, mode)?;
        let mut cur = x;
        let mut block_features = Vec::with_capacity(self.blocks.len() - 1);
        let last = self.blocks.len() - 1;
        for (bi, block) in self.blocks.iter().enumerate() {
            for layer in block {
                cur = apply_layer(tape, layer, cur, mode, &binding, &mut self.buffers)?;
            }
            if bi < last {
                block_features.push(cur);
            }
        }
        let feature = tape.global_avg_pool2d(cur)?;
        let hidden = tape.matmul(feature, binding.var(self.fc_weight))?;
        let logits = tape.add_bias(hidden, binding.var(self.fc_bias))?;
        Ok((
            BackboneOutputs {
                block_features,
                feature,
                logits,
            },
            binding,
        ))
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<E>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<E>] {
        &mut self.buffers
    }
}

/// Bottleneck adapter + classifier head attached after one backbone block.
#[derive(Debug, Clone)]
pub struct GuidedModule<E: Scalar> {
    pub spec: GuidedModuleSpec,
    /// 1-based index of the backbone block this module consumes.
    pub block_index: usize,
    layers: Vec<LayerInstance>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    params: Vec<Param<E>>,
    buffers: Vec<Buffer<E>>,
}

#[derive(Debug, Clone)]
pub struct GuidedHeadOutput {
    pub block_index: usize,
    /// Pooled pre-FC feature F_g^(b), same width as the backbone feature.
    pub feature: Var,
    pub logits: Var,
}

impl<E: Scalar> GuidedModule<E> {
    pub fn build(spec: &GuidedModuleSpec, block_index: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(spec, block_index, &mut rng)
    }

    pub fn build_with_rng(
        spec: &GuidedModuleSpec,
        block_index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stages = spec.downsample_stages()?;
        let mut builder = ComponentBuilder::new(rng);
        let mut layers = Vec::new();
        // 1x1 reduction into the bottleneck width.
        layers.push(builder.conv("reduce", spec.in_channels, spec.reduce_channels, 1, 1, 0));
        layers.push(builder.batch_norm("reduce", spec.reduce_channels));
        layers.push(LayerInstance::Relu);
        // 3x3 stride-2 stages until the backbone's final spatial size.
        for s in 0..stages {
            let prefix = format!("stage{s}");
            layers.push(builder.conv(&prefix, spec.reduce_channels, spec.reduce_channels, 3, 2, 1));
            layers.push(builder.batch_norm(&prefix, spec.reduce_channels));
            layers.push(LayerInstance::Relu);
        }
        // 1x1 expansion to the final channel count; the pooled result is F_g.
        layers.push(builder.conv("expand", spec.reduce_channels, spec.out_feature_dim, 1, 1, 0));
        let (fc_weight, fc_bias) = builder.fc("fc", spec.out_feature_dim, spec.num_classes);
        Ok(GuidedModule {
            spec: spec.clone(),
            block_index,
            layers,
            fc_weight,
            fc_bias,
            params: builder.params,
            buffers: builder.buffers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<E>,
        block_feature: Var,
        mode: Mode,
    ) -> Result<(GuidedHeadOutput, Binding)> {
        let shape = tape.value(block_feature).shape().to_vec();
        let want = [self.spec.in_channels, self.spec.in_spatial, self.spec.in_spatial];
        if shape.len() != 4 || shape[1..] != want {
            return Err(EkdError::shape(
                "guided_module",
                format!(
                    "attachment at block {}: feature {shape:?} does not match [N, {}, {}, {}]",
                    self.block_index, want[0], want[1], want[2]
                ),
            ));
        }
        let binding = Binding::bind(tape, &self.params, mode)?;
        let mut cur = block_feature;
        for layer in &self.layers {
            cur = apply_layer(tape, layer, cur, mode, &binding, &mut self.buffers)?;
        }
        let feature = tape.global_avg_pool2d(cur)?;
        let hidden = tape.matmul(feature, binding.var(self.fc_weight))?;
        let logits = tape.add_bias(hidden, binding.var(self.fc_bias))?;
        Ok((
            GuidedHeadOutput {
                block_index: self.block_index,
                feature,
                logits,
            },
            binding,
        ))
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<E>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<E>] {
        &mut self.buffers
    }
}

/// One full pipeline: backbone plus attached guided modules.
#[derive(Debug, Clone)]
pub struct Stream<E: Scalar> {
    pub backbone: Backbone<E>,
    pub guided: Vec<GuidedModule<E>>,
}

/// Everything a stream produces on one batch.
#[derive(Debug, Clone)]
pub struct BlockOutputs {
    pub block_features: Vec<Var>,
    pub backbone_feature: Var,
    pub backbone_logits: Var,
    /// Guided head outputs in ascending attachment order.
    pub guided: Vec<GuidedHeadOutput>,
}

impl BlockOutputs {
    /// Logits of all classifiers: guided heads (shallow to deep) then the
    /// backbone head.
    pub fn classifier_logits(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.guided.iter().map(|g| g.logits).collect();
        out.push(self.backbone_logits);
        out
    }

    pub fn num_classifiers(&self) -> usize {
        self.guided.len() + 1
    }
}

/// Tape handles for every parameter bound during one stream pass.
#[derive(Debug, Clone)]
pub struct StreamBinding {
    pub backbone: Binding,
    pub guided: Vec<Binding>,
}

impl StreamBinding {
    /// Gradients flattened in the stream's canonical parameter order
    /// (backbone first, then guided modules in attachment order).
    pub fn grads<E: Scalar>(&self, tape: &Tape<E>) -> Vec<Tensor<E>> {
        let mut out = self.backbone.grads(tape);
        for b in &self.guided {
            out.extend(b.grads(tape));
        }
        out
    }

    pub fn grads_all_zero<E: Scalar>(&self, tape: &Tape<E>) -> bool {
        self.backbone.grads_all_zero(tape) && self.guided.iter().all(|b| b.grads_all_zero(tape))
    }
}

impl<E: Scalar> Stream<E> {
    /// Builds a stream with `guided_pairs` guided modules attached to the
    /// deepest blocks. Backbone parameters are drawn first so they are
    /// identical across different pair counts for the same seed.
    pub fn build(spec: &BackboneSpec, guided_pairs: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::build_with_rng(spec, &mut rng)?;
        let mut guided = Vec::with_capacity(guided_pairs);
        for block_index in attachment_blocks(spec.num_blocks(), guided_pairs)? {
            let gspec = GuidedModuleSpec::derive(spec, &backbone.chain, block_index)?;
            gspec.validate(spec.final_feature_dim)?;
            guided.push(GuidedModule::build_with_rng(&gspec, block_index, &mut rng)?);
        }
        Ok(Stream { backbone, guided })
    }

    pub fn num_blocks(&self) -> usize {
        self.backbone.spec.num_blocks()
    }

    pub fn num_classifiers(&self) -> usize {
        self.guided.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.guided.iter().map(|g| g.param_count()).sum::<usize>()
    }

    /// Runs the backbone and every guided head, collecting all features and
    /// classifier outputs.
    pub fn forward_collect(
        &mut self,
        tape: &mut Tape<E>,
        x: Var,
        mode: Mode,
    ) -> Result<(BlockOutputs, StreamBinding)> {
        let (bb, bb_binding) = self.backbone.forward(tape, x, mode)?;
        let mut heads = Vec::with_capacity(self.guided.len());
        let mut bindings = Vec::with_capacity(self.guided.len());
        for module in &mut self.guided {
            let feature = bb.block_features[module.block_index - 1];
            let (head, binding) = module.forward(tape, feature, mode)?;
            heads.push(head);
            bindings.push(binding);
        }
        Ok((
            BlockOutputs {
                block_features: bb.block_features,
                backbone_feature: bb.feature,
                backbone_logits: bb.logits,
                guided: heads,
            },
            StreamBinding {
                backbone: bb_binding,
                guided: bindings,
            },
        ))
    }

    /// Standalone copy of the main network with every guided module dropped.
    /// Its outputs on any input are exactly the stream's backbone outputs.
    pub fn export_backbone(&self) -> Backbone<E> {
        self.backbone.clone()
    }

    /// Mutable views of all parameters in canonical order.
    pub fn params_flat_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut out: Vec<&mut Param<E>> = self.backbone.params.iter_mut().collect();
        for g in &mut self.guided {
            out.extend(g.params.iter_mut());
        }
        out
    }

    pub fn params_flat(&self) -> Vec<&Param<E>> {
        let mut out: Vec<&Param<E>> = self.backbone.params.iter().collect();
        for g in &self.guided {
            out.extend(g.params.iter());
        }
        out
    }

    /// All persistent tensors (parameters and buffers) with their
    /// checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for p in &self.backbone.params {
            out.push((format!("backbone.{}", p.name), &p.value));
        }
        for b in &self.backbone.buffers {
            out.push((format!("backbone.{}", b.name), &b.value));
        }
        for g in &self.guided {
            for p in &g.params {
                out.push((format!("guided{}.{}", g.block_index, p.name), &p.value));
            }
            for b in &g.buffers {
                out.push((format!("guided{}.{}", g.block_index, b.name), &b.value));
            }
        }
        out
    }

    /// Replaces parameters and buffers from checkpoint entries. Every entry
    /// must match an existing tensor by name and shape, and every tensor
    /// must be covered.
    pub fn load_named_tensors(&mut self, entries: &[(String, Tensor<E>)]) -> Result<()> {
        use std::collections::HashMap;
        let mut incoming: HashMap<&str, &Tensor<E>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if incoming.len() != entries.len() {
            return Err(EkdError::Checkpoint("duplicate tensor name".into()));
        }
        let mut targets: Vec<(String, &mut Tensor<E>)> = Vec::new();
        for p in &mut self.backbone.params {
            targets.push((format!("backbone.{}", p.name), &mut p.value));
        }
        for b in &mut self.backbone.buffers {
            targets.push((format!("backbone.{}", b.name), &mut b.value));
        }
        for g in &mut self.guided {
            for p in &mut g.params {
                targets.push((format!("guided{}.{}", g.block_index, p.name), &mut p.value));
            }
            for b in &mut g.buffers {
                targets.push((format!("guided{}.{}", g.block_index, b.name), &mut b.value));
            }
        }
        for (name, slot) in targets {
            let tensor = incoming.remove(name.as_str()).ok_or_else(|| {
                EkdError::Checkpoint(format!("missing tensor {name}"))
            })?;
            if tensor.shape() != slot.shape() {
                return Err(EkdError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model wants {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        if let Some(extra) = incoming.keys().next() {
            return Err(EkdError::Checkpoint(format!(
                "checkpoint contains unknown tensor {extra}"
            )));
        }
        Ok(())
    }
}

/// Named tensors of a standalone backbone (used for exported checkpoints).
pub fn backbone_named_tensors<E: Scalar>(backbone: &Backbone<E>) -> Vec<(String, &Tensor<E>)> {
    let mut out = Vec::new();
    for p in &backbone.params {
        out.push((format!("backbone.{}", p.name), &p.value));
    }
    for b in &backbone.buffers {
        out.push((format!("backbone.{}", b.name), &b.value));
    }
    out
}

/// Loads checkpoint entries into a standalone backbone.
pub fn backbone_load_named_tensors<E: Scalar>(
    backbone: &mut Backbone<E>,
    entries: &[(String, Tensor<E>)],
) -> Result<()> {
    let mut stream = Stream {
        backbone: backbone.clone(),
        guided: Vec::new(),
    };
    stream.load_named_tensors(entries)?;
    *backbone = stream.backbone;
    Ok(())
}

/// True for parameters that participate in weight decay.
pub fn apply_weight_decay_to<E: Scalar>(param: &Param<E>) -> bool {
    param.decay
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockSpec, LayerSpec};

    pub(crate) fn toy_backbone_spec() -> BackboneSpec {
        let block = |ch: usize| BlockSpec {
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
        };
        BackboneSpec {
            input_channels: 3,
            input_resolution: 16,
            num_classes: 5,
            final_feature_dim: 16,
            blocks: vec![block(4), block(8), block(16)],
        }
    }

    fn random_input(n: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 3 * 16 * 16).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(vec![n, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = toy_backbone_spec();
        let a = Stream::<f32>::build(&spec, 2, 7).unwrap();
        let b = Stream::<f32>::build(&spec, 2, 7).unwrap();
        for (pa, pb) in a.params_flat().iter().zip(b.params_flat().iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.value.bit_eq(&pb.value), "param {} differs", pa.name);
        }
        let c = Stream::<f32>::build(&spec, 2, 8).unwrap();
        assert!(a
            .params_flat()
            .iter()
            .zip(c.params_flat().iter())
            .any(|(x, y)| !x.value.bit_eq(&y.value)));
    }

    #[test]
    fn backbone_init_independent_of_pair_count() {
        let spec = toy_backbone_spec();
        let with_pairs = Stream::<f32>::build(&spec, 2, 3).unwrap();
        let without = Stream::<f32>::build(&spec, 0, 3).unwrap();
        for (pa, pb) in with_pairs
            .backbone
            .params()
            .iter()
            .zip(without.backbone.params())
        {
            assert!(pa.value.bit_eq(&pb.value), "param {} differs", pa.name);
        }
    }

    #[test]
    fn forward_collect_shapes() {
        let spec = toy_backbone_spec();
        let mut stream = Stream::<f32>::build(&spec, 2, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(random_input(2, 0), false).unwrap();
        let (outs, _) = stream.forward_collect(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(outs.block_features.len(), 2);
        assert_eq!(outs.guided.len(), 2);
        assert_eq!(tape.value(outs.backbone_logits).shape(), &[2, 5]);
        assert_eq!(tape.value(outs.backbone_feature).shape(), &[2, 16]);
        for head in &outs.guided {
            assert_eq!(tape.value(head.logits).shape(), &[2, 5]);
            assert_eq!(
                tape.value(head.feature).shape(),
                tape.value(outs.backbone_feature).shape()
            );
        }
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let spec = toy_backbone_spec();
        let mut stream = Stream::<f32>::build(&spec, 1, 2).unwrap();
        let input = random_input(2, 5);
        let run = |s: &mut Stream<f32>| {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), false).unwrap();
            let (outs, _) = s.forward_collect(&mut tape, x, Mode::Eval).unwrap();
            tape.value(outs.backbone_logits).clone()
        };
        let a = run(&mut stream);
        let b = run(&mut stream);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn export_matches_in_stream_backbone_bitwise() {
        let spec = toy_backbone_spec();
        let mut stream = Stream::<f32>::build(&spec, 2, 9).unwrap();
        let mut exported = stream.export_backbone();
        assert!(exported.param_count() < stream.param_count());
        for i in 0..10 {
            let input = random_input(3, 100 + i);
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), false).unwrap();
            let (outs, _) = stream.forward_collect(&mut tape, x, Mode::Eval).unwrap();
            let full = tape.value(outs.backbone_logits).clone();

            let mut tape2 = Tape::new();
            let x2 = tape2.leaf(input, false).unwrap();
            let (solo, _) = exported.forward(&mut tape2, x2, Mode::Eval).unwrap();
            assert!(full.bit_eq(tape2.value(solo.logits)));
        }
    }

    #[test]
    fn guided_input_shape_error_names_block() {
        let spec = toy_backbone_spec();
        let mut stream = Stream::<f32>::build(&spec, 1, 2).unwrap();
        let mut tape = Tape::new();
        let bad = tape
            .leaf(Tensor::zeros(vec![2, 3, 4, 4]), false)
            .unwrap();
        let err = stream.guided[0].forward(&mut tape, bad, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("block 2"), "{err}");
    }

    #[test]
    fn checkpoint_name_round_trip() {
        let spec = toy_backbone_spec();
        let stream = Stream::<f32>::build(&spec, 2, 4).unwrap();
        let named: Vec<(String, Tensor<f32>)> = stream
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut other = Stream::<f32>::build(&spec, 2, 99).unwrap();
        other.load_named_tensors(&named).unwrap();
        for ((_, a), (_, b)) in stream.named_tensors().iter().zip(other.named_tensors().iter()) {
            assert!(a.bit_eq(b));
        }
        // Missing tensor is rejected.
        let mut partial = named.clone();
        partial.pop();
        assert!(other.load_named_tensors(&partial).is_err());
    }
}
