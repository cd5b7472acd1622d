//! Training objectives: boundary loss, binned camera cross-entropy, and the
//! generator/discriminator totals with an R1 penalty and an optional
//! feature-matching distillation term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpa::LpaPose;
use crate::nets::{PoseBins, PoseLogits};
use crate::tensor::{softplus_scalar, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub boundary: f64,
    pub camera: f64,
    pub r1: f64,
    pub distill: f64,
    /// Whether the distillation term is computed at all.
    pub distill_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            boundary: 1.0,
            camera: 1.0,
            r1: 1.0,
            distill: 1.0,
            distill_enabled: false,
        }
    }
}

/// Hinge on foreground pixels, absolute error on background pixels,
/// averaged over all pixels. `foreground[i]` marks object pixels.
pub fn boundary_loss(depth: &[f64], foreground: &[bool], boundary_depth: &[f64]) -> Result<f64> {
    if depth.len() != foreground.len() || depth.len() != boundary_depth.len() {
        return Err(Error::invalid(format!(
            "boundary loss maps differ in size: {}, {}, {}",
            depth.len(),
            foreground.len(),
            boundary_depth.len()
        )));
    }
    if depth.is_empty() {
        return Err(Error::invalid("boundary loss on an empty image"));
    }
    let total: f64 = depth
        .iter()
        .zip(foreground)
        .zip(boundary_depth)
        .map(|((&dp, &fg), &db)| {
            if fg {
                (dp - db).max(0.0)
            } else {
                (dp - db).abs()
            }
        })
        .sum();
    Ok(total / depth.len() as f64)
}

/// Differentiable boundary loss on a rendered depth batch; averages over
/// every pixel of the batch.
pub fn boundary_loss_graph(
    g: &mut Graph,
    depth: Var,
    foreground: &[bool],
    boundary_depth: &[f64],
) -> Result<Var> {
    let dv = g.value(depth);
    let value = boundary_loss(&dv.data, foreground, boundary_depth)?;
    let n = dv.numel() as f64;
    let slope: Vec<f64> = dv
        .data
        .iter()
        .zip(foreground)
        .zip(boundary_depth)
        .map(|((&dp, &fg), &db)| {
            let e = dp - db;
            let s = if e > 0.0 {
                1.0
            } else if e < 0.0 && !fg {
                -1.0
            } else {
                0.0
            };
            s / n
        })
        .collect();
    Ok(g.custom(
        &[depth],
        Tensor::scalar(value),
        Box::new(move |ctx| vec![Some(slope.iter().map(|s| s * ctx.grad[0]).collect())]),
    ))
}

/// Per-group cross-entropy values `[anchor, x, y, z, yaw, pitch, roll, fov]`.
pub fn camera_ce_components(
    pred: &PoseLogits,
    target: &LpaPose,
    bins: &PoseBins,
) -> Result<[f64; 8]> {
    if pred.values.len() != bins.logit_count() {
        return Err(Error::invalid(format!(
            "expected {} pose logits, got {}",
            bins.logit_count(),
            pred.values.len()
        )));
    }
    target.validate()?;
    let mut out = [0.0; 8];
    for (slot, ((off, len), t)) in out
        .iter_mut()
        .zip(bins.groups().into_iter().zip(bins.encode(target)))
    {
        let seg = &pred.values[off..off + len];
        let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + seg.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        *slot = lse - seg[t];
    }
    Ok(out)
}

/// Sum of the 8 cross-entropy terms.
pub fn camera_ce_loss(pred: &PoseLogits, target: &LpaPose, bins: &PoseBins) -> Result<f64> {
    Ok(camera_ce_components(pred, target, bins)?.iter().sum())
}

/// Batched camera loss: returns the batch mean of the per-sample sums and
/// the per-sample, per-group values `[B, 8]`.
pub fn camera_ce_graph(
    g: &mut Graph,
    logits: Var,
    targets: &[LpaPose],
    bins: &PoseBins,
) -> Result<(Var, Var)> {
    camera_ce_graph_with(g, logits, targets, bins, true)
}

/// Like [`camera_ce_graph`]; without `anchor` the anchor group is left out
/// and the per-sample values are `[B, 7]`.
pub fn camera_ce_graph_with(
    g: &mut Graph,
    logits: Var,
    targets: &[LpaPose],
    bins: &PoseBins,
    anchor: bool,
) -> Result<(Var, Var)> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || shape[1] != bins.logit_count() {
        return Err(Error::invalid(format!(
            "pose logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let skip = usize::from(!anchor);
    let mut t = Vec::with_capacity(targets.len() * 8);
    for p in targets {
        p.validate()?;
        t.extend(&bins.encode(p)[skip..]);
    }
    let (logits, groups) = if anchor {
        (logits, bins.groups())
    } else {
        let groups: Vec<(usize, usize)> = bins.groups()[1..]
            .iter()
            .map(|&(o, l)| (o - 4, l))
            .collect();
        (g.slice_channels(logits, 4, bins.logit_count() - 4), groups)
    };
    let per = g.grouped_cross_entropy(logits, &groups, &t);
    let total = g.sum(per);
    let mean = g.scale(total, 1.0 / targets.len() as f64);
    Ok((mean, per))
}

/// Non-saturating generator loss with boundary and camera terms.
pub fn generator_loss(adv_score_fake: &[f64], boundary: f64, camera: f64, w: &LossWeights) -> f64 {
    let adv = adv_score_fake
        .iter()
        .map(|&s| softplus_scalar(-s))
        .sum::<f64>()
        / adv_score_fake.len().max(1) as f64;
    adv + w.boundary * boundary + w.camera * camera
}

/// Discriminator loss: logistic adversarial terms, R1 penalty
/// `0.5 * mean |grad_x D(x_real)|^2`, camera and distillation terms.
pub fn discriminator_loss(
    scores_real: &[f64],
    scores_fake: &[f64],
    r1_grad_sq_norms: &[f64],
    camera: f64,
    distill: f64,
    w: &LossWeights,
) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let real = mean(
        &scores_real
            .iter()
            .map(|&s| softplus_scalar(-s))
            .collect::<Vec<_>>(),
    );
    let fake = mean(
        &scores_fake
            .iter()
            .map(|&s| softplus_scalar(s))
            .collect::<Vec<_>>(),
    );
    let r1 = 0.5 * mean(r1_grad_sq_norms);
    let k = if w.distill_enabled {
        w.distill * distill
    } else {
        0.0
    };
    real + fake + w.r1 * r1 + w.camera * camera + k
}

/// `mean(softplus(-scores))` in the graph.
pub fn adv_real_graph(g: &mut Graph, scores: Var) -> Var {
    let neg = g.scale(scores, -1.0);
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// `mean(softplus(scores))` in the graph.
pub fn adv_fake_graph(g: &mut Graph, scores: Var) -> Var {
    let sp = g.softplus(scores);
    g.mean(sp)
}

/// Mean squared difference between two equally shaped feature maps.
pub fn feature_matching_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean(sq)
}
