//! Training objectives: per-pixel cross-entropy, the stage-1 composite
//! that weighs the dominant and phantom streams by the blend ratio, and
//! the stage-2 phantom-suppression term.

use crate::blend::BlendedSample;
use crate::error::{Error, Result};
use crate::grid::LabelMap;

use super::layers::FeatMap;
use super::net::PredictionMaps;

/// Guard inside the phantom-suppression log; the raw objective diverges
/// to −∞ once the phantom activations are fully silenced.
pub const PPA_EPSILON: f64 = 1e-8;

/// Loss terms of one step. `l_ppa` may be negative (it is a log of a
/// small sum); everything else is non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_fb: f64,
    pub l_t: f64,
    pub l_p: f64,
    pub l_ppa: f64,
    pub total: f64,
    pub delta: f64,
}

/// Mean over non-ignored pixels of −log softmax(logits)[target].
///
/// Ignored pixels contribute nothing; if every pixel is ignored the loss
/// is 0 by convention.
pub fn pixel_cross_entropy(logits: &FeatMap, target: &LabelMap, ignore_index: u8) -> Result<f64> {
    cross_entropy_with_grad(logits, target, ignore_index).map(|(l, _)| l)
}

/// Cross-entropy plus its gradient with respect to the logits.
///
/// At a supervised pixel the gradient is `(softmax − one_hot) / n_valid`;
/// ignored pixels get zero gradient.
pub fn cross_entropy_with_grad(
    logits: &FeatMap,
    target: &LabelMap,
    ignore_index: u8,
) -> Result<(f64, FeatMap)> {
    if logits.height() != target.height() || logits.width() != target.width() {
        return Err(Error::DimensionMismatch {
            context: "cross-entropy logits vs target".into(),
            left_h: logits.height(),
            left_w: logits.width(),
            right_h: target.height(),
            right_w: target.width(),
        });
    }
    let n = logits.channels();
    let (h, w) = (logits.height(), logits.width());

    let n_valid = target
        .data()
        .iter()
        .filter(|&&t| t != ignore_index)
        .count();
    let mut grad = FeatMap::zeros(h, w, n);
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n_valid as f64;

    let mut loss = 0.0;
    let mut softmax = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let t = target.get(y, x);
            if t == ignore_index {
                continue;
            }
            let t = usize::from(t);
            if t >= n {
                return Err(Error::ClassOutOfRange { index: t, n });
            }
            let row = logits.pixel(y, x);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0;
            for (s, &v) in softmax.iter_mut().zip(row) {
                *s = (v - max).exp();
                denom += *s;
            }
            // −log softmax[t] = log Σ exp(l − m) − (l_t − m)
            loss += denom.ln() - (row[t] - max);
            let g = grad.pixel_mut(y, x);
            for (gv, &s) in g.iter_mut().zip(&softmax) {
                *gv = s / denom * inv;
            }
            g[t] -= inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Stage-1 composite: binding loss plus the δ-weighted dominant and
/// (1−δ)-weighted phantom losses, each against its own source's labels.
pub fn loss_stage1(
    preds: &PredictionMaps,
    sample: &BlendedSample,
    ignore_index: u8,
) -> Result<LossBreakdown> {
    let l_fb = pixel_cross_entropy(&preds.s_fb, &sample.gt_dominant, ignore_index)?;
    let l_t = pixel_cross_entropy(&preds.s_t, &sample.gt_dominant, ignore_index)?;
    let l_p = pixel_cross_entropy(&preds.s_p, &sample.gt_phantom, ignore_index)?;
    let delta = sample.delta;
    Ok(LossBreakdown {
        l_fb,
        l_t,
        l_p,
        l_ppa: 0.0,
        total: l_fb + delta * l_t + (1.0 - delta) * l_p,
        delta,
    })
}

/// Phantom-suppression term: `log(Σ ReLU(s_p) + ε)` over every logit.
/// Driving phantom activations to zero drives this toward `log ε`.
pub fn ppa_loss(s_p: &FeatMap) -> f64 {
    ppa_with_grad(s_p).0
}

/// The suppression term and its logit gradient
/// (`1/(Σ ReLU + ε)` where the logit is positive, 0 elsewhere).
pub fn ppa_with_grad(s_p: &FeatMap) -> (f64, FeatMap) {
    let sum: f64 = s_p.data().iter().map(|&v| v.max(0.0)).sum();
    let loss = (sum + PPA_EPSILON).ln();
    let mut grad = FeatMap::zeros(s_p.height(), s_p.width(), s_p.channels());
    let scale = 1.0 / (sum + PPA_EPSILON);
    for (g, &v) in grad.data_mut().iter_mut().zip(s_p.data()) {
        if v > 0.0 {
            *g = scale;
        }
    }
    (loss, grad)
}

/// Stage-2 objective on clean samples: dominant-stream cross-entropy plus
/// phantom suppression. The binding head's output is not read here.
pub fn loss_stage2(
    preds: &PredictionMaps,
    target: &LabelMap,
    ignore_index: u8,
) -> Result<LossBreakdown> {
    let l_t = pixel_cross_entropy(&preds.s_t, target, ignore_index)?;
    let l_ppa = ppa_loss(&preds.s_p);
    Ok(LossBreakdown {
        l_fb: 0.0,
        l_t,
        l_p: 0.0,
        l_ppa,
        total: l_t + l_ppa,
        delta: 1.0,
    })
}

/// Total positive phantom activation for one prediction; the quantity
/// stage 2 is meant to shrink.
pub fn phantom_mass(s_p: &FeatMap) -> f64 {
    s_p.data().iter().map(|&v| v.max(0.0)).sum()
}
