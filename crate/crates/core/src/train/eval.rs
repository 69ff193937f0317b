use std::fmt;

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{quality, MetricSpace};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the degraded input itself, when it has the clean image's size.
    pub input_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub space: MetricSpace,
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: Option<f64>,
}

/// Restore every pair of `data` in eval mode and score it against the clean
/// reference.
pub fn evaluate(model: &Model, data: &Dataset, space: MetricSpace) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(data.len());
    for (name, pair) in &data.items {
        let (h, w) = (pair.degraded.shape()[1], pair.degraded.shape()[2]);
        let x = pair.degraded.clone().reshape(&[1, 3, h, w])?;
        let restored = model.restore(&x)?;
        let gt =
            pair.clean
                .clone()
                .reshape(&[1, 3, pair.clean.shape()[1], pair.clean.shape()[2]])?;
        let (psnr, ssim) = quality(&restored, &gt, space)?;
        let input_psnr = if x.shape() == gt.shape() {
            Some(quality(&x, &gt, space)?.0)
        } else {
            None
        };
        per_image.push(ImageScore {
            name: name.clone(),
            psnr,
            ssim,
            input_psnr,
        });
    }
    let n = per_image.len().max(1) as f64;
    let mean_input_psnr = per_image
        .iter()
        .map(|s| s.input_psnr)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    Ok(EvalReport {
        space,
        mean_psnr: per_image.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
        mean_input_psnr,
        per_image,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>10} {:>8} {:>10}",
            "image", "PSNR(dB)", "SSIM", "input PSNR"
        )?;
        for s in &self.per_image {
            let input = s.input_psnr.map_or("-".to_string(), |p| format!("{p:.3}"));
            writeln!(
                f,
                "{:<32} {:>10.3} {:>8.4} {:>10}",
                s.name, s.psnr, s.ssim, input
            )?;
        }
        let input = self
            .mean_input_psnr
            .map_or("-".to_string(), |p| format!("{p:.3}"));
        write!(
            f,
            "{:<32} {:>10.3} {:>8.4} {:>10}   ({} metrics)",
            "mean", self.mean_psnr, self.mean_ssim, input, self.space
        )
    }
}
