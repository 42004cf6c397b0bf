//! Dense-block CNN classifiers with a sigmoid multi-label head.
//!
//! Each dense layer consumes the channel concatenation of its block's input
//! and every earlier layer output, passes a bottleneck 1x1 convolution, then
//! a 3x3 convolution adding `growth_rate` channels. Transitions compress
//! channels by `compression` and halve the spatial extent with 2x2 average
//! pooling.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::norm::{BnAccum, BnRunning};
use crate::rng::rng_from;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Bottleneck width multiplier: the 1x1 convolution inside each dense layer
/// produces `BOTTLENECK_FACTOR * growth_rate` channels.
pub const BOTTLENECK_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub block_layer_counts: Vec<usize>,
    pub growth_rate: usize,
    pub compression: f64,
    pub stem_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

/// The standard 121-layer configuration.
pub fn preset_densenet121() -> ModelConfig {
    ModelConfig {
        input_size: 224,
        in_channels: 1,
        block_layer_counts: vec![6, 12, 24, 16],
        growth_rate: 32,
        compression: 0.5,
        stem_channels: 64,
        num_classes: 5,
        dropout_rate: 0.0,
    }
}

/// Desk-scale configuration trainable on a CPU in minutes.
pub fn preset_micro() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        in_channels: 1,
        block_layer_counts: vec![2, 4, 4],
        growth_rate: 8,
        compression: 0.5,
        stem_channels: 16,
        num_classes: 5,
        dropout_rate: 0.0,
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "micro" => Ok(preset_micro()),
        "densenet121" => Ok(preset_densenet121()),
        other => Err(Error::Config(format!("unknown model preset {other:?}"))),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_layer_counts.is_empty() || self.block_layer_counts.iter().any(|&l| l == 0) {
            return Err(Error::Config("every dense block needs at least one layer".into()));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!("compression {} outside (0, 1]", self.compression)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.spatial_plan()?;
        Ok(())
    }

    /// Spatial extents after the stem and after each transition. Errors when
    /// pooling underflows the extent.
    pub fn spatial_plan(&self) -> Result<Vec<usize>> {
        let s = self.input_size;
        if s + 6 < 7 || (s + 6 - 7) / 2 + 1 == 0 {
            return Err(Error::Config("input size too small for the stem".into()));
        }
        let after_conv = (s + 6 - 7) / 2 + 1;
        if after_conv + 2 < 3 {
            return Err(Error::Config("input size too small for the stem pool".into()));
        }
        let mut extent = (after_conv + 2 - 3) / 2 + 1;
        let mut plan = vec![extent];
        for i in 0..self.block_layer_counts.len() - 1 {
            if extent < 2 {
                return Err(Error::Config(format!(
                    "spatial extent underflow at transition {i}: {extent} < 2 \
                     (input {s} supports fewer transitions)"
                )));
            }
            extent /= 2;
            plan.push(extent);
        }
        if extent == 0 {
            return Err(Error::Config("spatial extent underflow before the head".into()));
        }
        Ok(plan)
    }

    /// Channels entering each block and after the final block, per the
    /// concatenation and compression arithmetic.
    pub fn channel_plan(&self) -> Vec<usize> {
        let mut plan = Vec::new();
        let mut c = self.stem_channels;
        for (i, &layers) in self.block_layer_counts.iter().enumerate() {
            plan.push(c);
            c += layers * self.growth_rate;
            if i + 1 != self.block_layer_counts.len() {
                c = (self.compression * c as f64).floor() as usize;
            }
        }
        plan.push(c);
        plan
    }

    /// Countable layers: stem conv, two convolutions per dense layer, one per
    /// transition, and the classifier.
    pub fn layer_count(&self) -> usize {
        let dense: usize = self.block_layer_counts.iter().map(|l| 2 * l).sum();
        1 + dense + (self.block_layer_counts.len() - 1) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

impl ParamKind {
    /// Weight-decay applies to convolution and linear weights only.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub name: String,
    pub running: BnRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Handles produced by one forward pass.
pub struct ForwardTrace {
    /// Sigmoid probabilities, [N, num_classes].
    pub probs: NodeId,
    /// Pre-sigmoid logits, [N, num_classes].
    pub logits: NodeId,
    /// Concatenated output of the final dense block, [N, C, h, w].
    pub last_block: NodeId,
    /// Leaf holding the input batch.
    pub input: NodeId,
    /// Leaf node per parameter, aligned with `Model::params` order.
    pub param_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    bn: Vec<BnLayer>,
}

/// Borrow-friendly view of the batch-norm state during a forward pass.
enum BnCtx<'a> {
    Train(&'a mut [BnLayer]),
    Eval(&'a [BnLayer]),
    Collect(&'a [BnLayer], &'a mut [BnAccum]),
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();

        let add_conv = |params: &mut Vec<Param>,
                            rng: &mut ChaCha8Rng,
                            name: String,
                            c_out: usize,
                            c_in: usize,
                            k: usize| {
            let fan_in = (c_in * k * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0, std).expect("std positive");
            let data: Vec<f64> = (0..c_out * c_in * k * k)
                .map(|_| normal.sample(rng))
                .collect();
            params.push(Param {
                name,
                kind: ParamKind::ConvWeight,
                value: Tensor::new(vec![c_out, c_in, k, k], data).expect("conv shape"),
            });
        };
        let add_bn = |params: &mut Vec<Param>, bn: &mut Vec<BnLayer>, name: String, c: usize| {
            params.push(Param {
                name: format!("{name}.gamma"),
                kind: ParamKind::BnGamma,
                value: Tensor::full(vec![c], 1.0),
            });
            params.push(Param {
                name: format!("{name}.beta"),
                kind: ParamKind::BnBeta,
                value: Tensor::full(vec![c], 0.0),
            });
            bn.push(BnLayer { name, running: BnRunning::new(c) });
        };

        add_conv(&mut params, &mut rng, "stem.conv.weight".into(), config.stem_channels, config.in_channels, 7);
        add_bn(&mut params, &mut bn, "stem.bn".into(), config.stem_channels);

        let inter = BOTTLENECK_FACTOR * config.growth_rate;
        let mut c = config.stem_channels;
        for (bi, &layers) in config.block_layer_counts.iter().enumerate() {
            for li in 0..layers {
                let c_in = c + li * config.growth_rate;
                let prefix = format!("block{bi}.layer{li}");
                add_bn(&mut params, &mut bn, format!("{prefix}.bn1"), c_in);
                add_conv(&mut params, &mut rng, format!("{prefix}.conv1.weight"), inter, c_in, 1);
                add_bn(&mut params, &mut bn, format!("{prefix}.bn2"), inter);
                add_conv(&mut params, &mut rng, format!("{prefix}.conv2.weight"), config.growth_rate, inter, 3);
            }
            c += layers * config.growth_rate;
            if bi + 1 != config.block_layer_counts.len() {
                let c_out = (config.compression * c as f64).floor() as usize;
                let prefix = format!("transition{bi}");
                add_bn(&mut params, &mut bn, format!("{prefix}.bn"), c);
                add_conv(&mut params, &mut rng, format!("{prefix}.conv.weight"), c_out, c, 1);
                c = c_out;
            }
        }
        add_bn(&mut params, &mut bn, "final.bn".into(), c);

        let fan_in = c as f64;
        let std = (1.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("std positive");
        let wdata: Vec<f64> = (0..config.num_classes * c).map(|_| normal.sample(&mut rng)).collect();
        params.push(Param {
            name: "head.linear.weight".into(),
            kind: ParamKind::LinearWeight,
            value: Tensor::new(vec![config.num_classes, c], wdata)?,
        });
        params.push(Param {
            name: "head.linear.bias".into(),
            kind: ParamKind::LinearBias,
            value: Tensor::full(vec![config.num_classes], 0.0),
        });

        let by_name = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model { config: config.clone(), params, by_name, bn })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn bn_layers(&self) -> &[BnLayer] {
        &self.bn
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BnLayer] {
        &mut self.bn
    }

    /// Trainable parameter element count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
            && self
                .bn
                .iter()
                .all(|b| b.running.mean.iter().chain(&b.running.var).all(|v| v.is_finite()))
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        batch: Tensor,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        let ctx = BnCtx::Train(&mut self.bn);
        forward_impl(&self.config, &self.params, &self.by_name, ctx, tape, batch, Some(dropout_rng))
    }

    pub fn forward_eval(&self, tape: &mut Tape, batch: Tensor) -> Result<ForwardTrace> {
        let ctx = BnCtx::Eval(&self.bn);
        forward_impl(&self.config, &self.params, &self.by_name, ctx, tape, batch, None)
    }

    /// Forward in stat-collection mode: normalizes by batch statistics while
    /// filling the accumulators (one per batch-norm layer, in layer order).
    pub fn forward_collect(
        &self,
        tape: &mut Tape,
        batch: Tensor,
        accums: &mut [BnAccum],
    ) -> Result<ForwardTrace> {
        if accums.len() != self.bn.len() {
            return Err(Error::Shape(format!(
                "expected {} accumulators, got {}",
                self.bn.len(),
                accums.len()
            )));
        }
        let ctx = BnCtx::Collect(&self.bn, accums);
        forward_impl(&self.config, &self.params, &self.by_name, ctx, tape, batch, None)
    }

    /// Fresh accumulators matching this model's batch-norm layers.
    pub fn bn_accums(&self) -> Vec<BnAccum> {
        self.bn
            .iter()
            .map(|b| BnAccum::new(b.running.mean.len()))
            .collect()
    }

    /// Overwrite running stats from finalized accumulators.
    pub fn set_bn_from_accums(&mut self, accums: &[BnAccum]) -> Result<()> {
        if accums.len() != self.bn.len() {
            return Err(Error::Shape("accumulator count mismatch".into()));
        }
        for (layer, accum) in self.bn.iter_mut().zip(accums) {
            if accum.count == 0 {
                return Err(Error::Config("empty accumulator".into()));
            }
            layer.running = accum.finalize();
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl(
    config: &ModelConfig,
    params: &[Param],
    by_name: &HashMap<String, usize>,
    mut bn_ctx: BnCtx<'_>,
    tape: &mut Tape,
    batch: Tensor,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 || shape[1] != config.in_channels || shape[2] != config.input_size || shape[3] != config.input_size {
        return Err(Error::Shape(format!(
            "expected [N, {}, {s}, {s}] input, got {shape:?}",
            config.in_channels,
            s = config.input_size
        )));
    }

    let param_nodes: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let node = |name: &str| -> NodeId {
        param_nodes[*by_name.get(name).unwrap_or_else(|| panic!("missing param {name}"))]
    };

    // batch-norm layers are visited in exactly their construction order
    let mut bn_index = 0usize;
    let mut apply_bn = |tape: &mut Tape, bn_ctx: &mut BnCtx<'_>, x: NodeId, name: &str| -> Result<NodeId> {
        let gamma = node(&format!("{name}.gamma"));
        let beta = node(&format!("{name}.beta"));
        let idx = bn_index;
        bn_index += 1;
        match bn_ctx {
            BnCtx::Train(layers) => {
                debug_assert_eq!(layers[idx].name, name);
                tape.batchnorm2d_train(x, gamma, beta, &mut layers[idx].running)
            }
            BnCtx::Eval(layers) => {
                debug_assert_eq!(layers[idx].name, name);
                tape.batchnorm2d_eval(x, gamma, beta, &layers[idx].running)
            }
            BnCtx::Collect(layers, accums) => {
                debug_assert_eq!(layers[idx].name, name);
                tape.batchnorm2d_collect(x, gamma, beta, &mut accums[idx])
            }
        }
    };

    let input = tape.leaf(batch);
    let mut x = tape.conv2d(input, node("stem.conv.weight"), 2, 3)?;
    x = apply_bn(tape, &mut bn_ctx, x, "stem.bn")?;
    x = tape.relu(x);
    x = tape.maxpool2d(x, 3, 2, 1)?;

    let mut last_block = x;
    let n_blocks = config.block_layer_counts.len();
    for (bi, &layers) in config.block_layer_counts.iter().enumerate() {
        let mut features = vec![x];
        for li in 0..layers {
            let prefix = format!("block{bi}.layer{li}");
            let concat = if features.len() == 1 {
                features[0]
            } else {
                tape.concat_channels(&features)?
            };
            let mut y = apply_bn(tape, &mut bn_ctx, concat, &format!("{prefix}.bn1"))?;
            y = tape.relu(y);
            y = tape.conv2d(y, node(&format!("{prefix}.conv1.weight")), 1, 0)?;
            y = apply_bn(tape, &mut bn_ctx, y, &format!("{prefix}.bn2"))?;
            y = tape.relu(y);
            y = tape.conv2d(y, node(&format!("{prefix}.conv2.weight")), 1, 1)?;
            features.push(y);
        }
        x = tape.concat_channels(&features)?;
        last_block = x;

        if config.dropout_rate > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                x = tape.dropout(x, config.dropout_rate, rng)?;
                if bi + 1 == n_blocks {
                    last_block = x;
                }
            }
        }

        if bi + 1 != n_blocks {
            let prefix = format!("transition{bi}");
            x = apply_bn(tape, &mut bn_ctx, x, &format!("{prefix}.bn"))?;
            x = tape.relu(x);
            x = tape.conv2d(x, node(&format!("{prefix}.conv.weight")), 1, 0)?;
            x = tape.avgpool2d(x)?;
        }
    }

    x = apply_bn(tape, &mut bn_ctx, x, "final.bn")?;
    x = tape.relu(x);
    let pooled = tape.global_avg_pool(x)?;
    let logits = tape.linear(pooled, node("head.linear.weight"), node("head.linear.bias"))?;
    let probs = tape.sigmoid(logits);

    Ok(ForwardTrace { probs, logits, last_block, input, param_nodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_block_channel_arithmetic() {
        // one block of 4 layers, growth 12, on 24 input channels: 24 + 4*12 = 72
        let cfg = ModelConfig {
            input_size: 64,
            in_channels: 1,
            block_layer_counts: vec![4],
            growth_rate: 12,
            compression: 0.5,
            stem_channels: 24,
            num_classes: 5,
            dropout_rate: 0.0,
        };
        assert_eq!(cfg.channel_plan(), vec![24, 72]);
    }

    #[test]
    fn dense_connectivity_count_follows_the_closed_form() {
        // replay the block wiring: layer li consumes the block input plus all
        // li earlier layer outputs, so it adds li+1 direct connections
        let direct_connections = |layers: usize| -> usize {
            let mut feature_maps = 1; // block input
            let mut edges = 0;
            for _ in 0..layers {
                edges += feature_maps;
                feature_maps += 1;
            }
            edges
        };
        for l in 1..=8 {
            assert_eq!(direct_connections(l), l * (l + 1) / 2);
        }
        assert_eq!(direct_connections(4), 10);
    }

    #[test]
    fn densenet121_preset_counts_121_layers() {
        let cfg = preset_densenet121();
        assert_eq!(cfg.layer_count(), 121);
        assert_eq!(cfg.channel_plan(), vec![64, 128, 256, 512, 1024]);
        cfg.validate().unwrap();
    }

    #[test]
    fn densenet121_validates_at_all_three_input_sizes() {
        for s in [224, 197, 139] {
            let mut cfg = preset_densenet121();
            cfg.input_size = s;
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn micro_preset_forward_shapes_and_range() {
        let cfg = preset_micro();
        let model = Model::build(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let batch = Tensor::full(vec![4, 1, 64, 64], 0.3);
        let trace = model.forward_eval(&mut tape, batch).unwrap();
        assert_eq!(tape.value(trace.probs).shape(), &[4, 5]);
        assert!(tape.value(trace.probs).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn micro_param_count_matches_analytic_sum() {
        let cfg = preset_micro();
        let model = Model::build(&cfg, 0).unwrap();

        // independent closed-form count
        let k = cfg.growth_rate;
        let inter = BOTTLENECK_FACTOR * k;
        let mut expect = cfg.stem_channels * cfg.in_channels * 49; // stem conv
        expect += 2 * cfg.stem_channels; // stem bn
        let mut c = cfg.stem_channels;
        for (bi, &layers) in cfg.block_layer_counts.iter().enumerate() {
            for li in 0..layers {
                let c_in = c + li * k;
                expect += 2 * c_in; // bn1
                expect += inter * c_in; // conv1 1x1
                expect += 2 * inter; // bn2
                expect += k * inter * 9; // conv2 3x3
            }
            c += layers * k;
            if bi + 1 != cfg.block_layer_counts.len() {
                let c_out = (cfg.compression * c as f64).floor() as usize;
                expect += 2 * c; // transition bn
                expect += c_out * c; // transition conv
                c = c_out;
            }
        }
        expect += 2 * c; // final bn
        expect += cfg.num_classes * c + cfg.num_classes; // head

        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn eval_forward_is_pure_and_row_deterministic() {
        let cfg = preset_micro();
        let model = Model::build(&cfg, 3).unwrap();
        let one = Tensor::full(vec![1, 1, 64, 64], 0.1);
        let mut two_rows = one.data().to_vec();
        two_rows.extend_from_slice(one.data());
        let batch = Tensor::new(vec![2, 1, 64, 64], two_rows).unwrap();

        let mut tape = Tape::new();
        let trace = model.forward_eval(&mut tape, batch).unwrap();
        let probs = tape.value(trace.probs).data();
        assert_eq!(probs[..5], probs[5..]);
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let model = Model::build(&preset_micro(), 0).unwrap();
        let mut tape = Tape::new();
        let bad = Tensor::full(vec![1, 1, 32, 32], 0.0);
        assert!(model.forward_eval(&mut tape, bad).is_err());
    }

    #[test]
    fn too_small_input_underflows_at_validate() {
        let mut cfg = preset_densenet121();
        cfg.input_size = 16; // extent hits 1 before the last transition
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut cfg = preset_micro();
        cfg.dropout_rate = 0.5;
        let model = Model::build(&cfg, 2).unwrap();
        let batch = Tensor::full(vec![1, 1, 64, 64], 0.2);
        let mut t1 = Tape::new();
        let a = model.forward_eval(&mut t1, batch.clone()).unwrap();
        let mut t2 = Tape::new();
        let b = model.forward_eval(&mut t2, batch).unwrap();
        assert!(t1.value(a.probs).bit_eq(t2.value(b.probs)));
    }
}
