//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! Every operation appends one node holding its output value and a record of
//! its inputs. Node ids grow monotonically, so walking the tape backwards
//! visits each op exactly once in reverse topological order.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, conv_geom, ConvGeom};
use crate::ops::dense::{
    concat_channels_backward, concat_channels_forward, dropout_mask, linear_backward,
    linear_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
};
use crate::ops::loss::{
    l2_penalty_backward, l2_penalty_forward, weighted_bce_backward, weighted_bce_forward,
};
use crate::ops::norm::{
    batchnorm_backward, batchnorm_collect_forward, batchnorm_eval_forward,
    batchnorm_train_forward, BnAccum, BnRunning, BnSaved,
};
use crate::ops::pool::{
    avgpool2d_backward, avgpool2d_forward, global_avg_pool_backward, global_avg_pool_forward,
    maxpool2d_backward, maxpool2d_forward,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Record {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    MaxPool2d { input: NodeId, argmax: Vec<u32> },
    AvgPool2d { input: NodeId },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, saved: BnSaved },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    ConcatChannels { inputs: Vec<NodeId> },
    GlobalAvgPool { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Dropout { input: NodeId, mask: Vec<f64> },
    WeightedBce { probs: NodeId, targets: Tensor, weights: Vec<f64>, mask: Tensor, count: usize },
    L2Penalty { params: Vec<NodeId>, lambda: f64 },
    AddScalars { a: NodeId, b: NodeId },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    record: Record,
}

/// Op tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, record: Record) -> NodeId {
        self.nodes.push(Node { value, grad: None, record });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Record::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent backward target with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geom = conv_geom(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let out = conv2d_forward(self.value(input), self.value(kernel), &geom);
        Ok(self.push(out, Record::Conv2d { input, kernel, geom }))
    }

    pub fn maxpool2d(
        &mut self,
        input: NodeId,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let r = maxpool2d_forward(self.value(input), window, stride, padding)?;
        Ok(self.push(r.output, Record::MaxPool2d { input, argmax: r.argmax }))
    }

    pub fn avgpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let out = avgpool2d_forward(self.value(input))?;
        Ok(self.push(out, Record::AvgPool2d { input }))
    }

    pub fn batchnorm2d_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut BnRunning,
    ) -> Result<NodeId> {
        let (out, saved) = batchnorm_train_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
        )?;
        Ok(self.push(out, Record::BatchNorm { input, gamma, beta, saved }))
    }

    pub fn batchnorm2d_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &BnRunning,
    ) -> Result<NodeId> {
        let (out, saved) = batchnorm_eval_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
        )?;
        Ok(self.push(out, Record::BatchNorm { input, gamma, beta, saved }))
    }

    pub fn batchnorm2d_collect(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        accum: &mut BnAccum,
    ) -> Result<NodeId> {
        let (out, saved) = batchnorm_collect_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            accum,
        )?;
        Ok(self.push(out, Record::BatchNorm { input, gamma, beta, saved }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = relu_forward(self.value(input));
        self.push(out, Record::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = sigmoid_forward(self.value(input));
        self.push(out, Record::Sigmoid { input })
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
        let out = concat_channels_forward(&tensors)?;
        Ok(self.push(out, Record::ConcatChannels { inputs: inputs.to_vec() }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).shape().len() != 4 {
            return Err(Error::Shape("global_avg_pool expects NCHW".into()));
        }
        let out = global_avg_pool_forward(self.value(input));
        Ok(self.push(out, Record::GlobalAvgPool { input }))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Record::Linear { input, weight, bias }))
    }

    /// Train-time dropout. Callers skip this op entirely in eval mode.
    pub fn dropout(&mut self, input: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let mask = dropout_mask(self.value(input).numel(), rate, rng);
        let data: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data)?;
        Ok(self.push(out, Record::Dropout { input, mask }))
    }

    pub fn weighted_bce_loss(
        &mut self,
        probs: NodeId,
        targets: &Tensor,
        class_weights: &[f64],
        mask: &Tensor,
    ) -> Result<NodeId> {
        let (loss, count) =
            weighted_bce_forward(self.value(probs), targets, class_weights, mask)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Record::WeightedBce {
                probs,
                targets: targets.clone(),
                weights: class_weights.to_vec(),
                mask: mask.clone(),
                count,
            },
        ))
    }

    pub fn l2_penalty(&mut self, params: &[NodeId], lambda: f64) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = params.iter().map(|&id| self.value(id)).collect();
        let value = l2_penalty_forward(&tensors, lambda)?;
        Ok(self.push(Tensor::scalar(value), Record::L2Penalty { params: params.to_vec(), lambda }))
    }

    pub fn add_scalars(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::Shape("add_scalars expects scalar nodes".into()));
        }
        let v = self.value(a).item() + self.value(b).item();
        Ok(self.push(Tensor::scalar(v), Record::AddScalars { a, b }))
    }

    /// Backward from a scalar node, seeding with 1.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.value(target).numel() != 1 {
            return Err(Error::Shape("backward without seed expects a scalar target".into()));
        }
        let seed = Tensor::new(self.value(target).shape().to_vec(), vec![1.0])?;
        self.backward_seeded(target, seed)
    }

    /// Backward from any node with an explicit output gradient.
    pub fn backward_seeded(&mut self, target: NodeId, seed: Tensor) -> Result<()> {
        if seed.shape() != self.value(target).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match target shape {:?}",
                seed.shape(),
                self.value(target).shape()
            )));
        }
        if !self.value(target).is_finite() {
            return Err(Error::Numeric("backward target value is not finite".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[target.0].grad = Some(seed);

        for idx in (0..=target.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            self.step_backward(idx)?;
        }
        Ok(())
    }

    /// Add `contrib` into the grad buffer of `id`, creating it if absent.
    fn accumulate(nodes: &mut [Node], id: NodeId, contrib: &[f64]) {
        let node = &mut nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        for (g, &c) in grad.data_mut().iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn step_backward(&mut self, idx: usize) -> Result<()> {
        let (head, tail) = self.nodes.split_at_mut(idx);
        let node = &tail[0];
        let grad_out = node.grad.as_ref().expect("checked by caller");
        if !grad_out.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at node {idx}")));
        }

        match &node.record {
            Record::Leaf => {}
            Record::Conv2d { input, kernel, geom } => {
                let (gin, gk) = conv2d_backward(
                    &head[input.0].value,
                    &head[kernel.0].value,
                    geom,
                    grad_out.data(),
                );
                Self::accumulate(head, *input, &gin);
                Self::accumulate(head, *kernel, &gk);
            }
            Record::MaxPool2d { input, argmax } => {
                let gin = maxpool2d_backward(head[input.0].value.numel(), argmax, grad_out.data());
                Self::accumulate(head, *input, &gin);
            }
            Record::AvgPool2d { input } => {
                let gin = avgpool2d_backward(head[input.0].value.shape(), grad_out.data());
                Self::accumulate(head, *input, &gin);
            }
            Record::BatchNorm { input, gamma, beta, saved } => {
                let (gin, ggamma, gbeta) = batchnorm_backward(
                    &head[input.0].value,
                    &head[gamma.0].value,
                    saved,
                    grad_out.data(),
                );
                Self::accumulate(head, *input, &gin);
                Self::accumulate(head, *gamma, &ggamma);
                Self::accumulate(head, *beta, &gbeta);
            }
            Record::Relu { input } => {
                let gin = relu_backward(&head[input.0].value, grad_out.data());
                Self::accumulate(head, *input, &gin);
            }
            Record::Sigmoid { input } => {
                let gin = sigmoid_backward(&node.value, grad_out.data());
                Self::accumulate(head, *input, &gin);
            }
            Record::ConcatChannels { inputs } => {
                let shapes: Vec<&[usize]> =
                    inputs.iter().map(|&id| head[id.0].value.shape()).collect();
                let grads = concat_channels_backward(&shapes, node.value.shape(), grad_out.data());
                for (&id, g) in inputs.iter().zip(&grads) {
                    Self::accumulate(head, id, g);
                }
            }
            Record::GlobalAvgPool { input } => {
                let gin = global_avg_pool_backward(head[input.0].value.shape(), grad_out.data());
                Self::accumulate(head, *input, &gin);
            }
            Record::Linear { input, weight, bias } => {
                let (gin, gw, gb) = linear_backward(
                    &head[input.0].value,
                    &head[weight.0].value,
                    grad_out.data(),
                );
                Self::accumulate(head, *input, &gin);
                Self::accumulate(head, *weight, &gw);
                Self::accumulate(head, *bias, &gb);
            }
            Record::Dropout { input, mask } => {
                let gin: Vec<f64> = grad_out
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                Self::accumulate(head, *input, &gin);
            }
            Record::WeightedBce { probs, targets, weights, mask, count } => {
                let gin = weighted_bce_backward(
                    &head[probs.0].value,
                    targets,
                    weights,
                    mask,
                    *count,
                    grad_out.item(),
                );
                Self::accumulate(head, *probs, &gin);
            }
            Record::L2Penalty { params, lambda } => {
                let g = grad_out.item();
                for &p in params {
                    let contrib = l2_penalty_backward(&head[p.0].value, *lambda, g);
                    Self::accumulate(head, p, &contrib);
                }
            }
            Record::AddScalars { a, b } => {
                let g = [grad_out.item()];
                Self::accumulate(head, *a, &g);
                Self::accumulate(head, *b, &g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_identity_conv() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let seed = Tensor::full(vec![1, 1, 2, 2], 1.0);
        tape.backward_seeded(y, seed).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(k).unwrap().data(), &[10.0]);
    }

    #[test]
    fn grads_accumulate_when_a_node_is_reused() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 2, 2, 2], 1.0));
        let cat = tape.concat_channels(&[x, x]).unwrap();
        let seed = Tensor::full(vec![1, 4, 2, 2], 1.0);
        tape.backward_seeded(cat, seed).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn scalar_loss_chain_backpropagates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.2, -0.4]).unwrap());
        let p = tape.sigmoid(x);
        let targets = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mask = Tensor::full(vec![1, 2], 1.0);
        let loss = tape.weighted_bce_loss(p, &targets, &[1.0, 1.0], &mask).unwrap();
        tape.backward(loss).unwrap();
        // d(bce)/dx for sigmoid+bce collapses to (p - y) / cells
        let pv = tape.value(p).data().to_vec();
        let gx = tape.grad(x).unwrap().data().to_vec();
        assert!((gx[0] - (pv[0] - 1.0) / 2.0).abs() < 1e-12);
        assert!((gx[1] - pv[1] / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_passthrough() {
        let mut tape = Tape::new();
        let mut rng = crate::rng::rng_from(0);
        let x = tape.leaf(Tensor::full(vec![1, 4], 2.0));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let build = || {
            let mut tape = Tape::new();
            let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = tape.leaf(Tensor::new(vec![1, 2, 4, 4], data).unwrap());
            let kdata: Vec<f64> = (0..36).map(|i| (i as f64 * 0.11).cos()).collect();
            let k = tape.leaf(Tensor::new(vec![2, 2, 3, 3], kdata).unwrap());
            let c = tape.conv2d(x, k, 1, 1).unwrap();
            let r = tape.relu(c);
            let g = tape.global_avg_pool(r).unwrap();
            tape.value(g).clone()
        };
        let a = build();
        let b = build();
        assert!(a.bit_eq(&b));
    }
}
