//! Composite objective: cross-entropy classification loss plus
//! lambda-weighted localization loss (MSE between the unit-sum attention
//! map and the blurred, unit-sum mask target).

use log::warn;

use crate::error::{Error, Result};
use crate::numcore::{
    add, gaussian_blur3d, logsumexp_rows, mean_all, mul, scale, select, sub, Tensor,
};

/// Scalar loss components of one batch, accumulated in f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
}

/// Cross-entropy of a probability pair at the true class; probabilities of
/// exactly zero are clamped at 1e-12 with a warning. Prefer the logits path
/// during training.
pub fn cross_entropy_probs(probs: &[f64; 2], label: u8) -> f64 {
    let p = probs[label as usize];
    if p <= 0.0 {
        warn!("true-class probability is exactly 0; clamping at 1e-12");
    }
    -p.max(1e-12).ln()
}

/// Stable per-sample cross-entropy from logits `[1, 2]` via log-sum-exp.
pub fn cross_entropy_logits(logits: &Tensor, label: u8) -> Tensor {
    assert_eq!(logits.shape(), &[1, 2], "expected a [1,2] logit row");
    let lse = logsumexp_rows(logits);
    let picked = select(logits, label as usize);
    sub(&lse, &picked)
}

/// Gaussian-blur a binary mask and normalize to unit sum. The target is
/// fixed (non-trainable).
pub fn make_target(mask: &Tensor, sigma: f64) -> Result<Tensor> {
    let total_in: f64 = mask.data().iter().sum();
    if total_in == 0.0 {
        return Err(Error::Data("cannot build a target from an empty mask".into()));
    }
    let blurred = gaussian_blur3d(&mask.detach(), (sigma, sigma, sigma));
    let total: f64 = blurred.data().iter().sum();
    let data: Vec<f64> = blurred.data().iter().map(|v| v / total).collect();
    Ok(Tensor::constant(
        mask.shape().to_vec(),
        data,
        mask.precision(),
    ))
}

/// Mean squared error over voxels between the attention map and the target
/// distribution. Gradient flows into the map only (targets are constants).
pub fn loss_loc(map: &Tensor, target: &Tensor) -> Result<Tensor> {
    if map.shape() != target.shape() {
        return Err(Error::Usage(format!(
            "attention map shape {:?} does not match target {:?}",
            map.shape(),
            target.shape()
        )));
    }
    let diff = sub(map, &target.detach());
    Ok(mean_all(&mul(&diff, &diff)))
}

/// Differentiable batch loss plus its scalar report.
pub struct CompositeLoss {
    pub loss: Tensor,
    pub report: LossReport,
}

/// `L = L_cls + lambda * L_loc`, both terms batch-averaged before
/// combination. Maps and targets must be present exactly when lambda > 0;
/// the lambda = 0 path never touches the attention graph.
pub fn composite_loss(
    logits: &[Tensor],
    labels: &[u8],
    maps: Option<&[Tensor]>,
    targets: Option<&[Tensor]>,
    lambda: f64,
) -> Result<CompositeLoss> {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let inv_b = 1.0 / logits.len() as f64;
    let mut cls_sum = cross_entropy_logits(&logits[0], labels[0]);
    for (lg, &lb) in logits.iter().zip(labels).skip(1) {
        cls_sum = add(&cls_sum, &cross_entropy_logits(lg, lb));
    }
    let cls = scale(&cls_sum, inv_b);
    if lambda == 0.0 {
        if maps.is_some() || targets.is_some() {
            return Err(Error::Usage(
                "attention maps supplied but lambda = 0".into(),
            ));
        }
        let cls_v = cls.item();
        return Ok(CompositeLoss {
            loss: cls,
            report: LossReport {
                total: cls_v,
                cls: cls_v,
                loc: 0.0,
            },
        });
    }
    let (maps, targets) = match (maps, targets) {
        (Some(m), Some(t)) if m.len() == logits.len() && t.len() == logits.len() => (m, t),
        _ => {
            return Err(Error::Usage(
                "lambda > 0 requires one attention map and target per sample".into(),
            ))
        }
    };
    let mut loc_sum = loss_loc(&maps[0], &targets[0])?;
    for (m, t) in maps.iter().zip(targets).skip(1) {
        loc_sum = add(&loc_sum, &loss_loc(m, t)?);
    }
    let loc = scale(&loc_sum, inv_b);
    let loss = add(&cls, &scale(&loc, lambda));
    let (cls_v, loc_v) = (cls.item(), loc.item());
    Ok(CompositeLoss {
        loss,
        report: LossReport {
            total: cls_v + lambda * loc_v,
            cls: cls_v,
            loc: loc_v,
        },
    })
}

/// Attention mass inside the binary mask: `sum(map * mask)`.
pub fn mass_in_mask(map: &[f64], mask: &[f64]) -> f64 {
    map.iter().zip(mask).map(|(a, m)| a * m).sum()
}
