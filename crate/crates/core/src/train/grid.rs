//! Coarse hyperparameter search: short training runs over a grid, ranked by
//! validation loss, with a refinement box around the top quartile.

use crate::data::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::labels::ClassWeights;
use crate::model::{Model, ModelConfig};

use super::{train, Split, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lr: f64,
    pub l2_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    /// Every grid point with its best validation loss, ascending. Diverged
    /// runs rank last with infinite loss.
    pub ranked: Vec<(GridPoint, f64)>,
    /// Bounds of the top quartile, for a finer follow-up scan.
    pub refine_lr: (f64, f64),
    pub refine_lambda: (f64, f64),
}

/// Train each grid point briefly on the given (sub)split and rank the
/// outcomes. The same model initialization seed is used for every point so
/// the comparison isolates the hyperparameters.
pub fn grid_search(
    points: &[GridPoint],
    model_cfg: &ModelConfig,
    train_split: &Split,
    val_split: &Split,
    weights: &ClassWeights,
    aug: &AugmentConfig,
    base_cfg: &TrainConfig,
    epochs: usize,
) -> Result<GridOutcome> {
    if points.is_empty() {
        return Err(Error::Config("grid search needs at least one point".into()));
    }
    if epochs == 0 {
        return Err(Error::Config("grid search epoch budget must be positive".into()));
    }

    let mut scored: Vec<(usize, GridPoint, f64)> = Vec::with_capacity(points.len());
    for (i, &point) in points.iter().enumerate() {
        let mut model = Model::build(model_cfg, base_cfg.seed)?;
        let cfg = TrainConfig {
            initial_lr: point.lr,
            l2_lambda: point.l2_lambda,
            max_epochs: epochs,
            ..base_cfg.clone()
        };
        let loss = match train(&mut model, train_split, val_split, weights, aug, &cfg) {
            Ok(outcome) => outcome
                .log
                .epochs
                .iter()
                .map(|e| e.val_loss)
                .fold(f64::INFINITY, f64::min),
            Err(crate::Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        scored.push((i, point, loss));
    }

    scored.sort_by(|a, b| a.2.partial_cmp(&b.2).expect("no NaN losses").then(a.0.cmp(&b.0)));
    let top = scored.len().div_ceil(4);
    let top_points: Vec<GridPoint> = scored.iter().take(top).map(|(_, p, _)| *p).collect();
    let fold_bounds = |get: fn(&GridPoint) -> f64| -> (f64, f64) {
        let lo = top_points.iter().map(get).fold(f64::INFINITY, f64::min);
        let hi = top_points.iter().map(get).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let refine_lr = fold_bounds(|p| p.lr);
    let refine_lambda = fold_bounds(|p| p.l2_lambda);

    Ok(GridOutcome {
        ranked: scored.into_iter().map(|(_, p, l)| (p, l)).collect(),
        refine_lr,
        refine_lambda,
    })
}
