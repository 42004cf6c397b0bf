//! Central finite-difference verification of analytic gradients, plus the
//! full per-op numeric audit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::ClassWeights;
use crate::model::{Model, ModelConfig};
use crate::ops::norm::BnRunning;
use crate::rng::{derive_seed, rng_from};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const PER_OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Builds a scalar loss on a fresh tape from the given input tensors and
/// reports (loss node, leaf node per input). Must be deterministic: it is
/// re-invoked many times on perturbed copies of the inputs.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<(NodeId, Vec<NodeId>)>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<(NodeId, Vec<NodeId>)>,
{
    fn build(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<(NodeId, Vec<NodeId>)> {
        self(tape, inputs)
    }
}

fn eval(builder: &impl LossBuilder, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = builder.build(&mut tape, inputs)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric("loss is not finite during gradcheck".into()));
    }
    Ok(v)
}

/// Compare analytic gradients against central differences with step
/// [`FD_STEP`]. Returns the worst relative error over every element of every
/// input tensor.
pub fn gradcheck(builder: &impl LossBuilder, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, leaves) = builder.build(&mut tape, inputs)?;
    if leaves.len() != inputs.len() {
        return Err(Error::Config("builder must report one leaf per input".into()));
    }
    if !tape.value(loss).is_finite() {
        return Err(Error::Numeric("loss is not finite during gradcheck".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            perturbed[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(builder, &perturbed)?;
            perturbed[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(builder, &perturbed)?;
            perturbed[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// One line of the numeric audit.
#[derive(Debug, Clone)]
pub struct AuditItem {
    pub name: &'static str,
    pub seeds: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl AuditItem {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Distinct, well-separated values in random order; safe for maxpool
/// gradients because no finite-difference step can cross a tie.
fn distinct_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    values.shuffle(rng);
    Tensor::new(shape, values).expect("positive extents")
}


fn check_conv(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let o = rng.gen_range(1..=3);
    let k = *[1usize, 3].get(rng.gen_range(0..2)).unwrap();
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let hw = rng.gen_range(4..=6);
    let input = rand_tensor(vec![n, c, hw, hw], &mut rng, 1.0);
    let kernel = rand_tensor(vec![o, c, k, k], &mut rng, 0.8);
    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        let w = tape.leaf(inputs[1].clone());
        let y = tape.conv2d(x, w, stride, pad)?;
        let g = tape.global_avg_pool(y)?;
        let lin_w = tape.leaf(Tensor::full(vec![1, tape.value(g).shape()[1]], 0.3));
        let lin_b = tape.leaf(Tensor::full(vec![1], 0.0));
        let s = tape.linear(g, lin_w, lin_b)?;
        // collapse batch rows into one scalar via bce against a constant
        let probs = tape.sigmoid(s);
        let targets = Tensor::full(vec![n, 1], 1.0);
        let mask = Tensor::full(vec![n, 1], 1.0);
        let loss = tape.weighted_bce_loss(probs, &targets, &[1.0], &mask)?;
        Ok((loss, vec![x, w]))
    };
    gradcheck(&builder, &[input, kernel])
}

fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let input = distinct_tensor(vec![1, 1, 6, 6], &mut rng);
    let builder = |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        let y = tape.maxpool2d(x, 2, 2, 0)?;
        let g = tape.global_avg_pool(y)?;
        let w = tape.leaf(Tensor::full(vec![1, 1], 1.0));
        let b = tape.leaf(Tensor::full(vec![1], 0.1));
        let s = tape.linear(g, w, b)?;
        let probs = tape.sigmoid(s);
        let targets = Tensor::full(vec![1, 1], 0.0);
        let mask = Tensor::full(vec![1, 1], 1.0);
        let loss = tape.weighted_bce_loss(probs, &targets, &[1.0], &mask)?;
        Ok((loss, vec![x]))
    };
    gradcheck(&builder, &[input])
}

fn check_avgpool(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let input = rand_tensor(vec![2, 2, 4, 4], &mut rng, 1.0);
    let builder = |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        let y = tape.avgpool2d(x)?;
        let g = tape.global_avg_pool(y)?;
        scalar_head(tape, g, 2, 2)
            .map(|(loss, mut leaves)| (loss, { leaves.clear(); leaves.push(x); leaves }))
    };
    gradcheck(&builder, &[input])
}

fn check_batchnorm(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let c = rng.gen_range(1..=3);
    let input = rand_tensor(vec![2, c, 3, 3], &mut rng, 2.0);
    let gamma = rand_tensor(vec![c], &mut rng, 1.0);
    let beta = rand_tensor(vec![c], &mut rng, 0.5);
    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        let g = tape.leaf(inputs[1].clone());
        let b = tape.leaf(inputs[2].clone());
        let mut running = BnRunning::new(c);
        let y = tape.batchnorm2d_train(x, g, b, &mut running)?;
        let pooled = tape.global_avg_pool(y)?;
        let (loss, _) = scalar_head(tape, pooled, 2, c)?;
        Ok((loss, vec![x, g, b]))
    };
    gradcheck(&builder, &[input, gamma, beta])
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let (n, f, k) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=3));
    let x = rand_tensor(vec![n, f], &mut rng, 1.0);
    let w = rand_tensor(vec![k, f], &mut rng, 1.0);
    let b = rand_tensor(vec![k], &mut rng, 0.5);
    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let xi = tape.leaf(inputs[0].clone());
        let wi = tape.leaf(inputs[1].clone());
        let bi = tape.leaf(inputs[2].clone());
        let y = tape.linear(xi, wi, bi)?;
        let probs = tape.sigmoid(y);
        let targets = Tensor::full(vec![n, k], 1.0);
        let mask = Tensor::full(vec![n, k], 1.0);
        let weights = vec![1.0; k];
        let loss = tape.weighted_bce_loss(probs, &targets, &weights, &mask)?;
        Ok((loss, vec![xi, wi, bi]))
    };
    gradcheck(&builder, &[x, w, b])
}

fn check_relu_sigmoid(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    // keep every input off the relu kink
    let n = 8;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.gen::<f64>() * 1.5 + 0.1;
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let input = Tensor::new(vec![1, n], data).unwrap();
    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        let r = tape.relu(x);
        let probs = tape.sigmoid(r);
        let targets = Tensor::full(vec![1, n], 0.0);
        let mask = Tensor::full(vec![1, n], 1.0);
        let weights = vec![1.0; n];
        let loss = tape.weighted_bce_loss(probs, &targets, &weights, &mask)?;
        Ok((loss, vec![x]))
    };
    gradcheck(&builder, &[input])
}

fn check_concat(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let a = rand_tensor(vec![1, 2, 3, 3], &mut rng, 1.0);
    let b = rand_tensor(vec![1, 3, 3, 3], &mut rng, 1.0);
    let builder = |tape: &mut Tape, inputs: &[Tensor]| {
        let ai = tape.leaf(inputs[0].clone());
        let bi = tape.leaf(inputs[1].clone());
        let cat = tape.concat_channels(&[ai, bi])?;
        let g = tape.global_avg_pool(cat)?;
        let (loss, _) = scalar_head(tape, g, 1, 5)?;
        Ok((loss, vec![ai, bi]))
    };
    gradcheck(&builder, &[a, b])
}

fn check_dropout(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let input = rand_tensor(vec![1, 4, 3, 3], &mut rng, 1.0);
    let mask_seed = derive_seed(seed, 77);
    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        // fixed rng per build keeps the mask identical across evaluations
        let mut drop_rng = rng_from(mask_seed);
        let d = tape.dropout(x, 0.3, &mut drop_rng)?;
        let g = tape.global_avg_pool(d)?;
        let (loss, _) = scalar_head(tape, g, 1, 4)?;
        Ok((loss, vec![x]))
    };
    gradcheck(&builder, &[input])
}

fn check_bce_and_l2(seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed);
    let logits = rand_tensor(vec![3, 5], &mut rng, 2.0);
    let params = rand_tensor(vec![7], &mut rng, 1.0);
    let targets = Tensor::new(
        vec![3, 5],
        (0..15).map(|_| f64::from(rng.gen::<bool>())).collect(),
    )
    .unwrap();
    let mut mask_data: Vec<f64> = (0..15).map(|_| f64::from(rng.gen::<f64>() < 0.8)).collect();
    if mask_data.iter().all(|&m| m == 0.0) {
        mask_data[0] = 1.0;
    }
    let mask = Tensor::new(vec![3, 5], mask_data).unwrap();
    let weights = [0.5, 2.0, 1.0, 0.8, 4.0];
    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let x = tape.leaf(inputs[0].clone());
        let w = tape.leaf(inputs[1].clone());
        let probs = tape.sigmoid(x);
        let bce = tape.weighted_bce_loss(probs, &targets, &weights, &mask)?;
        let pen = tape.l2_penalty(&[w], 0.01)?;
        let loss = tape.add_scalars(bce, pen)?;
        Ok((loss, vec![x, w]))
    };
    gradcheck(&builder, &[logits, params])
}

/// Tiny but complete model configuration used for the end-to-end check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        in_channels: 1,
        block_layer_counts: vec![1, 1],
        growth_rate: 3,
        compression: 0.5,
        stem_channels: 4,
        num_classes: 5,
        dropout_rate: 0.0,
    }
}

fn check_model_loss(seed: u64) -> Result<f64> {
    let cfg = gradcheck_model_config();
    let template = Model::build(&cfg, seed)?;
    let mut rng = rng_from(derive_seed(seed, 5));
    let batch = rand_tensor(vec![2, 1, 16, 16], &mut rng, 1.0);
    let targets = Tensor::new(
        vec![2, 5],
        (0..10).map(|_| f64::from(rng.gen::<bool>())).collect(),
    )
    .unwrap();
    let mask = Tensor::full(vec![2, 5], 1.0);
    let weights = ClassWeights::uniform();

    let inputs: Vec<Tensor> = std::iter::once(batch.clone())
        .chain(template.params().iter().map(|p| p.value.clone()))
        .collect();

    let builder = move |tape: &mut Tape, inputs: &[Tensor]| {
        let mut model = template.clone();
        for (i, t) in inputs[1..].iter().enumerate() {
            model.param_mut(i).value = t.clone();
        }
        let mut drop_rng = rng_from(0);
        let trace = model.forward_train(tape, inputs[0].clone(), &mut drop_rng)?;
        let data_loss = tape.weighted_bce_loss(trace.probs, &targets, &weights.w, &mask)?;
        let weight_nodes: Vec<NodeId> = model
            .params()
            .iter()
            .zip(&trace.param_nodes)
            .filter(|(p, _)| p.kind.is_weight())
            .map(|(_, &n)| n)
            .collect();
        let pen = tape.l2_penalty(&weight_nodes, 1e-4)?;
        let loss = tape.add_scalars(data_loss, pen)?;
        // the input image leaf is created inside forward; find it as the
        // first leaf before any param node
        let mut leaves = vec![trace.input];
        leaves.extend(trace.param_nodes.iter().copied());
        Ok((loss, leaves))
    };
    gradcheck(&builder, &inputs)
}

fn scalar_head(tape: &mut Tape, pooled: NodeId, n: usize, c: usize) -> Result<(NodeId, Vec<NodeId>)> {
    let w = tape.leaf(Tensor::full(vec![1, c], 0.4));
    let b = tape.leaf(Tensor::full(vec![1], -0.1));
    let y = tape.linear(pooled, w, b)?;
    let probs = tape.sigmoid(y);
    let targets = Tensor::full(vec![n, 1], 1.0);
    let mask = Tensor::full(vec![n, 1], 1.0);
    let loss = tape.weighted_bce_loss(probs, &targets, &[1.0], &mask)?;
    Ok((loss, vec![]))
}

/// Run the whole audit: every differentiable op over `seeds` random
/// instances, plus the end-to-end model loss.
pub fn run_audit(seeds: usize) -> Result<Vec<AuditItem>> {
    let per_op: Vec<(&'static str, fn(u64) -> Result<f64>, f64)> = vec![
        ("conv2d", check_conv, PER_OP_TOLERANCE),
        ("maxpool2d", check_maxpool, PER_OP_TOLERANCE),
        ("avgpool2d", check_avgpool, PER_OP_TOLERANCE),
        ("batchnorm2d", check_batchnorm, PER_OP_TOLERANCE),
        ("linear", check_linear, PER_OP_TOLERANCE),
        ("relu_sigmoid", check_relu_sigmoid, PER_OP_TOLERANCE),
        ("concat_channels", check_concat, PER_OP_TOLERANCE),
        ("dropout", check_dropout, PER_OP_TOLERANCE),
        ("weighted_bce_l2", check_bce_and_l2, PER_OP_TOLERANCE),
        ("model_loss", check_model_loss, MODEL_TOLERANCE),
    ];
    let mut items = Vec::new();
    for (name, check, tolerance) in per_op {
        let mut worst = 0.0f64;
        for seed in 0..seeds as u64 {
            let err = check(derive_seed(seed, 0xA0D17))?;
            if err > worst {
                worst = err;
            }
        }
        items.push(AuditItem { name, seeds, worst_rel_err: worst, tolerance });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_reports_tiny_error() {
        // loss = lambda * sum(w^2) has an exact analytic gradient
        let builder = |tape: &mut Tape, inputs: &[Tensor]| {
            let w = tape.leaf(inputs[0].clone());
            let loss = tape.l2_penalty(&[w], 0.5)?;
            Ok((loss, vec![w]))
        };
        let w = Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap();
        let err = gradcheck(&builder, &[w]).unwrap();
        assert!(err < 1e-6, "l2 gradcheck error {err}");
    }

    #[test]
    fn broken_gradient_is_detected() {
        // relu at a kink: central differences straddle zero and disagree
        let builder = |tape: &mut Tape, inputs: &[Tensor]| {
            let x = tape.leaf(inputs[0].clone());
            let r = tape.relu(x);
            let w = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
            let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
            let loss = tape.linear(r, w, b)?;
            Ok((loss, vec![x]))
        };
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let err = gradcheck(&builder, &[x]).unwrap();
        assert!(err > 0.1, "kink should produce a large mismatch, got {err}");
    }

    #[test]
    fn each_audit_check_passes_on_a_few_seeds() {
        for item in run_audit(3).unwrap() {
            assert!(
                item.passed(),
                "{}: worst {} over tolerance {}",
                item.name,
                item.worst_rel_err,
                item.tolerance
            );
        }
    }
}
