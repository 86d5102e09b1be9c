//! Co-learning objective: reconstruction against the second sub-sample of the noisy
//! image, a regularizer against the frozen full-resolution residual, and a masked
//! auxiliary term pulling the output toward sharp regions of the blurry input.

use ndarray::{s, Array4, ArrayView4, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UNet;
use crate::sampler::{self, Slot, SubsamplePlan};
use crate::sharpmask::{training_mask, MaskConfig, SharpMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::srgb()
    }
}

impl LossWeights {
    pub fn srgb() -> Self {
        Self {
            lambda_reg: 2.0,
            lambda_aux: 2.0,
        }
    }

    pub fn raw() -> Self {
        Self {
            lambda_reg: 4.0,
            lambda_aux: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_reg) || !ok(self.lambda_aux) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({}, {})",
                self.lambda_reg, self.lambda_aux
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub mask: MaskConfig,
    /// Aux term as a raw sum of squared errors over selected patches instead of
    /// the mean per selected patch.
    pub sum_reduction: bool,
    /// Restrict sub-sampler picks to 4-adjacent pairs.
    pub neighbor_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mask: MaskConfig::default(),
            sum_reduction: false,
            neighbor_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub reg: f64,
    pub aux: f64,
    pub total: f64,
    pub mask_fill_ratio: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.reg, self.aux, self.total].iter().all(|v| v.is_finite())
    }
}

/// One line of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogLine {
    pub step: u64,
    pub epoch: u64,
    pub rec: f64,
    pub reg: f64,
    pub aux: f64,
    pub total: f64,
    pub mask_fill_ratio: f64,
    pub lr: f64,
}

fn to64<T: NdFloat>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn cast<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("representable")
}

fn same_shape<T>(a: &ArrayView4<'_, T>, b: &ArrayView4<'_, T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error and its gradient w.r.t. `pred`.
fn mse_with_grad<T: NdFloat>(pred: ArrayView4<'_, T>, target: ArrayView4<'_, T>) -> (f64, Array4<T>) {
    let diff = &pred - &target;
    let n = diff.len() as f64;
    let value = diff.iter().map(|d| to64(*d).powi(2)).sum::<f64>() / n;
    let scale: T = cast(2.0 / n);
    (value, diff.mapv(|d| d * scale))
}

/// Mean squared error over all elements.
pub fn loss_rec<T: NdFloat>(pred: ArrayView4<'_, T>, target: ArrayView4<'_, T>) -> Result<f64> {
    same_shape(&pred, &target, "reconstruction")?;
    Ok(mse_with_grad(pred, target).0)
}

/// Plain supervised MSE used by the baselines.
pub fn loss_supervised<T: NdFloat>(pred: ArrayView4<'_, T>, target: ArrayView4<'_, T>) -> Result<f64> {
    loss_rec(pred, target)
}

fn reg_residual<T: NdFloat>(
    target: ArrayView4<'_, T>,
    g1_full: ArrayView4<'_, T>,
    g2_full: ArrayView4<'_, T>,
) -> Array4<T> {
    // pred - target - (g1 - g2) == pred - (target + g1 - g2)
    &target + &g1_full - &g2_full
}

/// MSE between the online residual `pred - target` and the frozen residual
/// `g1_full - g2_full`. Only `pred` carries gradient.
pub fn loss_reg<T: NdFloat>(
    pred: ArrayView4<'_, T>,
    target: ArrayView4<'_, T>,
    g1_full: ArrayView4<'_, T>,
    g2_full: ArrayView4<'_, T>,
) -> Result<f64> {
    same_shape(&pred, &target, "regularizer target")?;
    same_shape(&pred, &g1_full, "regularizer g1")?;
    same_shape(&pred, &g2_full, "regularizer g2")?;
    let shifted = reg_residual(target, g1_full, g2_full);
    Ok(mse_with_grad(pred, shifted.view()).0)
}

fn aux_with_grad<T: NdFloat>(
    pred: ArrayView4<'_, T>,
    g1_blur: ArrayView4<'_, T>,
    masks: &[SharpMask],
    sum_reduction: bool,
) -> Result<(f64, Array4<T>)> {
    same_shape(&pred, &g1_blur, "auxiliary")?;
    let (n, c, h, w) = pred.dim();
    if masks.len() != n {
        return Err(Error::Shape(format!("{} masks for a batch of {n}", masks.len())));
    }
    let mut grad = Array4::zeros(pred.dim());
    let selected: usize = masks.iter().map(SharpMask::selected).sum();
    if selected == 0 {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    for (i, mask) in masks.iter().enumerate() {
        let grid = mask.grid();
        if grid.covered_height() > h || grid.covered_width() > w {
            return Err(Error::Shape(format!(
                "mask grid {}x{} of {} px does not tile {h}x{w}",
                grid.n_rows, grid.n_cols, grid.patch_size
            )));
        }
        let (oy, ox) = grid.center_offset(h, w);
        let p = grid.patch_size;
        for k in 0..grid.len() {
            if mask.get(k) == 0 {
                continue;
            }
            let (y, x) = grid.origin(k);
            let win = s![.., oy + y..oy + y + p, ox + x..ox + x + p];
            let diff = &pred.index_axis(Axis(0), i).slice(win) - &g1_blur.index_axis(Axis(0), i).slice(win);
            let sq: f64 = diff.iter().map(|d| to64(*d).powi(2)).sum();
            let elems = (c * p * p) as f64;
            let (term, scale) = if sum_reduction {
                (sq / n as f64, 2.0 / n as f64)
            } else {
                (sq / elems / selected as f64, 2.0 / elems / selected as f64)
            };
            sum += term;
            let scale: T = cast(scale);
            grad.index_axis_mut(Axis(0), i)
                .slice_mut(win)
                .zip_mut_with(&diff, |g, d| *g = *d * scale);
        }
    }
    Ok((sum, grad))
}

/// Masked auxiliary loss: patch MSE summed over selected patches, divided by
/// `max(1, selected)` across the batch (or, with `sum_reduction`, the raw sum of
/// squared errors averaged over the batch). Zero for an empty mask.
pub fn loss_aux<T: NdFloat>(
    pred: ArrayView4<'_, T>,
    g1_blur: ArrayView4<'_, T>,
    masks: &[SharpMask],
    sum_reduction: bool,
) -> Result<f64> {
    Ok(aux_with_grad(pred, g1_blur, masks, sum_reduction)?.0)
}

/// Everything the objective needs besides `pred`. The frozen tensors are plain
/// values: no gradient flows into them.
pub struct FrozenTerms<'a, T> {
    /// `g2` of the supervising (noisy) image.
    pub target: ArrayView4<'a, T>,
    pub g1_full: ArrayView4<'a, T>,
    pub g2_full: ArrayView4<'a, T>,
    /// `g1` of the blurry image and its masks; absent for single-input modes.
    pub aux: Option<(ArrayView4<'a, T>, &'a [SharpMask])>,
}

/// Objective value and its gradient w.r.t. `pred`, with frozen terms held constant.
pub fn objective_given_frozen<T: NdFloat>(
    pred: ArrayView4<'_, T>,
    frozen: &FrozenTerms<'_, T>,
    cfg: &LossConfig,
) -> Result<(LossReport, Array4<T>)> {
    same_shape(&pred, &frozen.target, "reconstruction")?;
    same_shape(&pred, &frozen.g1_full, "regularizer g1")?;
    same_shape(&pred, &frozen.g2_full, "regularizer g2")?;
    let LossWeights { lambda_reg, lambda_aux } = cfg.weights;
    let (rec, mut grad) = mse_with_grad(pred, frozen.target);
    let shifted = reg_residual(frozen.target, frozen.g1_full, frozen.g2_full);
    let (reg, g_reg) = mse_with_grad(pred, shifted.view());
    grad.scaled_add(cast(lambda_reg), &g_reg);
    let (aux, fill) = match frozen.aux {
        Some((g1_blur, masks)) => {
            let (aux, g_aux) = aux_with_grad(pred, g1_blur, masks, cfg.sum_reduction)?;
            grad.scaled_add(cast(lambda_aux), &g_aux);
            let total: usize = masks.iter().map(|m| m.grid().len()).sum();
            let chosen: usize = masks.iter().map(SharpMask::selected).sum();
            (aux, if total == 0 { 0.0 } else { chosen as f64 / total as f64 })
        }
        None => (0.0, 0.0),
    };
    let report = LossReport {
        rec,
        reg,
        aux,
        total: rec + lambda_reg * reg + lambda_aux * aux,
        mask_fill_ratio: fill,
    };
    Ok((report, grad))
}

/// Sub-sample every sample of a batch with its own plan.
pub fn subsample_batch<T: NdFloat>(x: ArrayView4<'_, T>, plans: &[SubsamplePlan], slot: Slot) -> Result<Array4<T>> {
    let (n, c, h, w) = x.dim();
    if plans.len() != n {
        return Err(Error::Shape(format!("{} plans for a batch of {n}", plans.len())));
    }
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for (i, plan) in plans.iter().enumerate() {
        let sub = sampler::apply_chw(x.index_axis(Axis(0), i), plan, slot)?;
        out.index_axis_mut(Axis(0), i).assign(&sub);
    }
    Ok(out)
}

/// Result of one objective evaluation.
pub struct LossOutput<T> {
    pub report: LossReport,
    /// Gradient of the total w.r.t. the network parameters.
    pub grads: Vec<T>,
}

/// Self-supervised objective for one batch.
///
/// `inputs` are the full-resolution network inputs (`[blurry, noisy]`, or
/// `[noisy]` for a single-input denoiser), `noisy` supplies the reconstruction
/// target, and `blurry`, when given, enables the masked auxiliary term. One plan
/// per sample is shared by every sub-sampled tensor.
pub fn total_loss<T: NdFloat>(
    net: &UNet<T>,
    inputs: &[ArrayView4<'_, T>],
    noisy: ArrayView4<'_, T>,
    blurry: Option<ArrayView4<'_, T>>,
    plans: &[SubsamplePlan],
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    cfg.weights.validate()?;
    let g1_inputs = inputs
        .iter()
        .map(|x| subsample_batch(*x, plans, Slot::First))
        .collect::<Result<Vec<_>>>()?;
    let g1_views: Vec<_> = g1_inputs.iter().map(|x| x.view()).collect();
    let target = subsample_batch(noisy, plans, Slot::Second)?;
    let (pred, trace) = net.forward(&g1_views)?;

    let full = net.forward_nograd(inputs)?;
    let g1_full = subsample_batch(full.view(), plans, Slot::First)?;
    let g2_full = subsample_batch(full.view(), plans, Slot::Second)?;

    let aux = match blurry {
        Some(b) => {
            let g1_blur = subsample_batch(b, plans, Slot::First)?;
            // A frozen pass on the sub-sampled inputs has exactly `pred`'s values;
            // the mask only reads values, so reusing them blocks no gradient it needs.
            let masks = training_mask(g1_blur.view(), pred.view(), &cfg.mask)?;
            Some((g1_blur, masks))
        }
        None => None,
    };
    let frozen = FrozenTerms {
        target: target.view(),
        g1_full: g1_full.view(),
        g2_full: g2_full.view(),
        aux: aux.as_ref().map(|(b, m)| (b.view(), m.as_slice())),
    };
    let (report, d_pred) = objective_given_frozen(pred.view(), &frozen, cfg)?;
    let grads = net.backward(&trace, d_pred.view(), false)?.params;
    Ok(LossOutput { report, grads })
}

/// Supervised MSE objective for the baselines.
pub fn supervised_loss<T: NdFloat>(
    net: &UNet<T>,
    inputs: &[ArrayView4<'_, T>],
    target: ArrayView4<'_, T>,
) -> Result<LossOutput<T>> {
    let (pred, trace) = net.forward(inputs)?;
    same_shape(&pred.view(), &target, "supervised")?;
    let (rec, d_pred) = mse_with_grad(pred.view(), target);
    let grads = net.backward(&trace, d_pred.view(), false)?.params;
    Ok(LossOutput {
        report: LossReport {
            rec,
            total: rec,
            ..LossReport::default()
        },
        grads,
    })
}
