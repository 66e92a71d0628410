//! Completion and preservation losses.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::{chamfer, fps, partial_matching, Metric, PointCloud};
use crate::model::Prediction;
use crate::tensor::Var;

/// Ground truth downsampled by fps to the sizes of `P_c, P_1, P_2, P_3`.
pub fn loss_targets(gt: &PointCloud, model: &ModelConfig) -> Result<Vec<PointCloud>> {
    let mut sizes = vec![model.n_coarse];
    sizes.extend(model.level_counts());
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if gt.len() < largest {
        return Err(Error::contract(format!(
            "ground truth has {} points; predictions need {largest}",
            gt.len()
        )));
    }
    sizes.iter().map(|&n| gt.select(&fps(gt, n, 0)?)).collect()
}

/// Every term of the training loss for one sample.
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub completion: Var<'g>,
    /// Chamfer terms for `P_c, P_1, P_2, P_3`.
    pub chamfer: Vec<Var<'g>>,
    pub preservation: Var<'g>,
}

/// `Σ_i CD(pred_i, target_i)`; returns the sum and the individual terms.
pub fn completion_loss<'g>(
    metric: Metric,
    preds: &[Var<'g>],
    targets: &[PointCloud],
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let g = preds[0].graph();
    let mut terms = Vec::with_capacity(preds.len());
    for (pred, target) in preds.iter().zip(targets) {
        terms.push(chamfer(metric, pred, &g.constant(target.to_tensor()))?);
    }
    let mut sum = terms[0];
    for t in &terms[1..] {
        sum = sum.add(t)?;
    }
    Ok((sum, terms))
}

/// `completion + λ · partial_matching(partial, P_3)`.
pub fn total_loss<'g>(
    metric: Metric,
    pred: &Prediction<'g>,
    targets: &[PointCloud],
    partial: &Var<'g>,
    lambda: f64,
) -> Result<LossTerms<'g>> {
    let mut preds = vec![pred.coarse];
    preds.extend(pred.levels.iter().copied());
    let (completion, chamfer) = completion_loss(metric, &preds, targets)?;
    let preservation = partial_matching(partial, &pred.output())?;
    let total = if lambda == 0.0 {
        completion
    } else {
        completion.add(&preservation.scale(lambda))?
    };
    Ok(LossTerms {
        total,
        completion,
        chamfer,
        preservation,
    })
}
