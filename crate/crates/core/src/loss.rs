//! Training objectives: multi-scale L1 in the pixel and frequency domains, and
//! the single-scale L1 used for upscaling.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default weight of the frequency term.
pub const FREQ_WEIGHT: f64 = 0.1;

/// Average each 2x2 cell of `[N, C, H, W]`; odd trailing rows/columns
/// average over the pixels that exist, giving `ceil(H/2) x ceil(W/2)`.
pub fn area_downsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("area_downsample2")?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let (mut sum, mut count) = (0.0, 0.0);
                for yy in 2 * y..(2 * y + 2).min(h) {
                    for xx in 2 * xo..(2 * xo + 2).min(w) {
                        sum += src[yy * w + xx];
                        count += 1.0;
                    }
                }
                out[(plane * ho + y) * wo + xo] = sum / count;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// `[I, I/2, I/4, ...]` with `scales` entries.
pub fn target_pyramid(clean: &Tensor, scales: usize) -> Result<Vec<Tensor>> {
    let mut out = vec![clean.clone()];
    for _ in 1..scales {
        let next = area_downsample2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Sum over scales of `(|P - I|_1 + weight * (|Re F(P - I)|_1 + |Im F(P - I)|_1)) / numel(P)`,
/// where `F` is the unnormalized 2-D DFT over the spatial axes.
pub fn total_loss<'t>(preds: &[Var<'t>], targets: &[Tensor], freq_weight: f64) -> Result<Var<'t>> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} predictions for {} targets", preds.len(), targets.len()),
        ));
    }
    if !(freq_weight >= 0.0) {
        return Err(Error::invalid(
            "total_loss",
            format!("frequency weight {freq_weight} must be >= 0"),
        ));
    }
    let mut total: Option<Var<'t>> = None;
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "total_loss",
                format!(
                    "scale {i}: prediction {:?} vs target {:?}",
                    p.shape(),
                    t.shape()
                ),
            ));
        }
        let diff = p.sub(&p.tape().constant(t.clone()))?;
        let mut term = diff.abs_sum()?;
        if freq_weight > 0.0 {
            let (re, im) = diff.dft2()?;
            term = term.add(&re.abs_sum()?.add(&im.abs_sum()?)?.scale(freq_weight)?)?;
        }
        let term = term.scale(1.0 / p.value().numel() as f64)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Mean absolute error.
pub fn sr_loss<'t>(pred: &Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "sr_loss",
            format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    pred.sub(&pred.tape().constant(target.clone()))?
        .abs_sum()?
        .scale(1.0 / target.numel() as f64)
}
