//! Segmentation losses and the signed distance field they rely on.
//!
//! Every loss takes the tumor-channel probabilities `s` and returns its value
//! together with `∂L/∂s`, so the trainer can seed the network's backward pass.

use serde::{Deserialize, Serialize};

use crate::distance;
use crate::error::{Error, Result};
use crate::network::Real;
use crate::volgrid::{BinaryMask, Geometry};

/// Signed Euclidean distance (mm) to the boundary of a mask: negative inside,
/// positive outside, zero on boundary voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceField {
    geom: Geometry,
    values: Vec<f64>,
}

impl SignedDistanceField {
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.geom.index(i, j, k)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Boundary voxels are foreground voxels with a background face neighbor;
/// foreground on the volume border counts as boundary.
pub fn signed_distance_map(mask: &BinaryMask) -> Result<SignedDistanceField> {
    let count = mask.count();
    if count == 0 || count == mask.voxels().len() {
        return Err(Error::Degenerate(format!(
            "signed distance needs a mask that is neither empty nor full ({count} of {} voxels set)",
            mask.voxels().len()
        )));
    }
    let geom = *mask.geometry();
    let edge = distance::boundary(mask.voxels(), geom.dims);
    let mut values = distance::edt(&edge, geom.dims, geom.spacing);
    for (v, &inside) in values.iter_mut().zip(mask.voxels()) {
        if inside {
            *v = -*v;
        }
    }
    Ok(SignedDistanceField { geom, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_dice: f64,
    pub w_boundary: f64,
    pub w_distmap: f64,
    pub w_focal: f64,
    pub boundary_alpha: f64,
    pub focal_beta: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_dice: 1.0,
            w_boundary: 1.0,
            w_distmap: 0.0,
            w_focal: 0.0,
            boundary_alpha: 0.01,
            focal_beta: 2.0,
            dice_smooth: 1e-5,
        }
    }
}

impl LossConfig {
    /// Plain Dice loss.
    pub fn dice_only() -> Self {
        LossConfig {
            w_boundary: 0.0,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_dice, self.w_boundary, self.w_distmap, self.w_focal];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {weights:?}"
            )));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.boundary_alpha.is_finite() && self.boundary_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "boundary_alpha must be >= 0, got {}",
                self.boundary_alpha
            )));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth > 0.0) {
            return Err(Error::Config(format!(
                "dice_smooth must be > 0, got {}",
                self.dice_smooth
            )));
        }
        if !(self.focal_beta >= 1.0 && self.focal_beta.is_finite()) {
            return Err(Error::Config(format!(
                "focal_beta must be >= 1, got {}",
                self.focal_beta
            )));
        }
        Ok(())
    }
}

/// A loss value with its gradient w.r.t. the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} probabilities vs {b} entries")));
    }
    Ok(())
}

/// `(2Σsg + ε) / (Σs² + Σg² + ε)`.
pub fn soft_dice<T: Real>(probs: &[T], gt: &[bool], eps: f64) -> Result<f64> {
    Ok(soft_dice_grad(probs, gt, eps)?.value)
}

/// Soft Dice coefficient and its gradient.
pub fn soft_dice_grad<T: Real>(probs: &[T], gt: &[bool], eps: f64) -> Result<LossGrad> {
    check_len(probs.len(), gt.len(), "soft dice")?;
    let mut inter = 0.0;
    let mut ss = 0.0;
    let mut gg = 0.0;
    for (s, &g) in probs.iter().zip(gt) {
        let s = s.as_f64();
        ss += s * s;
        if g {
            inter += s;
            gg += 1.0;
        }
    }
    let num = 2.0 * inter + eps;
    let den = ss + gg + eps;
    let grad = probs
        .iter()
        .zip(gt)
        .map(|(s, &g)| {
            let g = if g { 1.0 } else { 0.0 };
            (2.0 * g * den - num * 2.0 * s.as_f64()) / (den * den)
        })
        .collect();
    Ok(LossGrad { value: num / den, grad })
}

/// `Σ φ(q)·s(q) · voxel_volume`: quadrature of the boundary-loss integral.
pub fn boundary_loss<T: Real>(probs: &[T], sdf: &[f64], voxel_volume: f64) -> Result<LossGrad> {
    check_len(probs.len(), sdf.len(), "boundary loss")?;
    let value = probs.iter().zip(sdf).map(|(s, p)| s.as_f64() * p).sum::<f64>() * voxel_volume;
    let grad = sdf.iter().map(|p| p * voxel_volume).collect();
    Ok(LossGrad { value, grad })
}

const BCE_CLIP: f64 = 1e-7;

/// Mean binary cross-entropy weighted by `1 + |φ|/max|φ|`.
pub fn distance_map_loss<T: Real>(probs: &[T], gt: &[bool], sdf: &[f64]) -> Result<LossGrad> {
    check_len(probs.len(), gt.len(), "distance map loss")?;
    check_len(probs.len(), sdf.len(), "distance map loss")?;
    let max = sdf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = probs.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for ((s, &g), phi) in probs.iter().zip(gt).zip(sdf) {
        let w = if max > 0.0 { 1.0 + phi.abs() / max } else { 1.0 };
        let raw = s.as_f64();
        let p = raw.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        let clipped = raw != p;
        if g {
            value -= w * p.ln();
            grad.push(if clipped { 0.0 } else { -w / (p * n) });
        } else {
            value -= w * (1.0 - p).ln();
            grad.push(if clipped { 0.0 } else { w / ((1.0 - p) * n) });
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// `1 − DSC^(1/β)`.
pub fn focal_dice_loss<T: Real>(probs: &[T], gt: &[bool], beta: f64, eps: f64) -> Result<LossGrad> {
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("focal Dice needs beta >= 1, got {beta}")));
    }
    let dsc = soft_dice_grad(probs, gt, eps)?;
    let e = 1.0 / beta;
    let d = dsc.value.max(f64::MIN_POSITIVE);
    let scale = -e * d.powf(e - 1.0);
    Ok(LossGrad {
        value: 1.0 - dsc.value.powf(e),
        grad: dsc.grad.iter().map(|g| scale * g).collect(),
    })
}

/// Individual terms of a [`combined_loss`] evaluation (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub dice: f64,
    pub boundary: f64,
    pub distmap: f64,
    pub focal: f64,
}

/// Weighted sum of the configured losses over a batch.
///
/// `probs`, `gt` and `sdf` hold the tumor channel of every patch in the
/// batch, concatenated. Dice terms pool all voxels of the batch. The
/// boundary term is divided by the batch's physical volume, so it is
/// `α·mean(φ·s)` and its scale does not depend on the patch size.
pub fn combined_loss<T: Real>(
    cfg: &LossConfig,
    probs: &[T],
    gt: &[bool],
    sdf: &[f64],
    voxel_volume: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    cfg.validate()?;
    check_len(probs.len(), gt.len(), "combined loss")?;
    check_len(probs.len(), sdf.len(), "combined loss")?;
    let mut grad = vec![0.0; probs.len()];
    let mut terms = LossTerms::default();
    let mut add = |w: f64, lg: &LossGrad, sign: f64| {
        for (g, v) in grad.iter_mut().zip(&lg.grad) {
            *g += sign * w * v;
        }
    };
    if cfg.w_dice > 0.0 {
        let d = soft_dice_grad(probs, gt, cfg.dice_smooth)?;
        terms.dice = 1.0 - d.value;
        add(cfg.w_dice, &d, -1.0);
    }
    if cfg.w_boundary > 0.0 {
        let patch_volume = probs.len() as f64 * voxel_volume;
        let b = boundary_loss(probs, sdf, voxel_volume)?;
        terms.boundary = b.value / patch_volume;
        add(cfg.w_boundary * cfg.boundary_alpha / patch_volume, &b, 1.0);
    }
    if cfg.w_distmap > 0.0 {
        let d = distance_map_loss(probs, gt, sdf)?;
        terms.distmap = d.value;
        add(cfg.w_distmap, &d, 1.0);
    }
    if cfg.w_focal > 0.0 {
        let f = focal_dice_loss(probs, gt, cfg.focal_beta, cfg.dice_smooth)?;
        terms.focal = f.value;
        add(cfg.w_focal, &f, 1.0);
    }
    terms.total = cfg.w_dice * terms.dice
        + cfg.w_boundary * cfg.boundary_alpha * terms.boundary
        + cfg.w_distmap * terms.distmap
        + cfg.w_focal * terms.focal;
    Ok((terms, grad))
}
