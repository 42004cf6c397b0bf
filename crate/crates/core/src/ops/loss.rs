//! Class-weighted binary cross entropy and the L2 weight penalty.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;

fn check_bce_shapes(
    probs: &Tensor,
    targets: &Tensor,
    class_weights: &[f64],
    mask: &Tensor,
) -> Result<(usize, usize)> {
    let (n, k) = probs.dims2();
    if targets.shape() != probs.shape() || mask.shape() != probs.shape() {
        return Err(Error::Shape(format!(
            "bce shapes disagree: probs {:?}, targets {:?}, mask {:?}",
            probs.shape(),
            targets.shape(),
            mask.shape()
        )));
    }
    if class_weights.len() != k {
        return Err(Error::Shape(format!(
            "bce expects {k} class weights, got {}",
            class_weights.len()
        )));
    }
    for &t in targets.data() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Config(format!("bce target {t} is not binary")));
        }
    }
    for &m in mask.data() {
        if m != 0.0 && m != 1.0 {
            return Err(Error::Config(format!("bce mask entry {m} is not binary")));
        }
    }
    Ok((n, k))
}

/// Mean over unmasked cells of -w_k [y ln p + (1-y) ln(1-p)], with p clamped
/// to [BCE_CLAMP, 1-BCE_CLAMP]. Returns (loss, unmasked count).
pub fn weighted_bce_forward(
    probs: &Tensor,
    targets: &Tensor,
    class_weights: &[f64],
    mask: &Tensor,
) -> Result<(f64, usize)> {
    let (_, k) = check_bce_shapes(probs, targets, class_weights, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ((&p, &y), &m)) in probs
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .enumerate()
    {
        if m == 0.0 {
            continue;
        }
        let w = class_weights[i % k];
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total += -w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("bce mask excludes every cell".into()));
    }
    Ok((total / count as f64, count))
}

/// Gradient with respect to the probabilities. Cells where the clamp is
/// active receive zero gradient, as do masked cells.
pub fn weighted_bce_backward(
    probs: &Tensor,
    targets: &Tensor,
    class_weights: &[f64],
    mask: &Tensor,
    count: usize,
    grad_out: f64,
) -> Vec<f64> {
    let k = probs.shape()[1];
    let scale = grad_out / count as f64;
    probs
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .enumerate()
        .map(|(i, ((&p, &y), &m))| {
            if m == 0.0 || p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                return 0.0;
            }
            let w = class_weights[i % k];
            scale * w * (p - y) / (p * (1.0 - p))
        })
        .collect()
}

/// lambda * sum of squared entries over all listed tensors.
pub fn l2_penalty_forward(params: &[&Tensor], lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("l2 lambda must be non-negative, got {lambda}")));
    }
    let mut total = 0.0;
    for t in params {
        total += t.data().iter().map(|w| w * w).sum::<f64>();
    }
    Ok(lambda * total)
}

pub fn l2_penalty_backward(param: &Tensor, lambda: f64, grad_out: f64) -> Vec<f64> {
    param.data().iter().map(|&w| 2.0 * lambda * w * grad_out).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_mask(n: usize, k: usize) -> Tensor {
        Tensor::full(vec![n, k], 1.0)
    }

    #[test]
    fn single_cell_matches_closed_form() {
        let probs = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let targets = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (loss, _) = weighted_bce_forward(&probs, &targets, &[1.0], &ones_mask(1, 1)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_equal_plain_bce() {
        let probs = Tensor::new(vec![2, 2], vec![0.3, 0.9, 0.6, 0.2]).unwrap();
        let targets = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (loss, _) =
            weighted_bce_forward(&probs, &targets, &[1.0, 1.0], &ones_mask(2, 2)).unwrap();
        let plain: f64 = probs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert_eq!(loss.to_bits(), plain.to_bits());
    }

    #[test]
    fn weight_scales_single_cell_loss_linearly() {
        let probs = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let targets = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mask = ones_mask(1, 1);
        let (l1, _) = weighted_bce_forward(&probs, &targets, &[1.0], &mask).unwrap();
        let (l2, _) = weighted_bce_forward(&probs, &targets, &[2.0], &mask).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-15);
    }

    #[test]
    fn saturated_probabilities_stay_finite() {
        let probs = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let targets = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (loss, _) =
            weighted_bce_forward(&probs, &targets, &[1.0, 1.0], &ones_mask(1, 2)).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn all_masked_is_an_error() {
        let probs = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let targets = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mask = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(weighted_bce_forward(&probs, &targets, &[1.0], &mask).is_err());
    }

    #[test]
    fn l2_of_single_weight() {
        let t = Tensor::scalar(3.0);
        assert_eq!(l2_penalty_forward(&[&t], 0.5).unwrap(), 4.5);
        assert_eq!(l2_penalty_forward(&[&t], 0.0).unwrap(), 0.0);
    }
}
