//! PSNR, SSIM and the luminance conversion used for deraining evaluation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.numel() == 0 {
        return Err(Error::invalid(op, "empty images"));
    }
    Ok(())
}

/// `10 log10(max^2 / MSE)`; identical images give `+inf`.
pub fn psnr(pred: &Tensor, gt: &Tensor, max_val: f64) -> Result<f64> {
    same_shape("psnr", pred, gt)?;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable valid-region filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * x[y * w + xo + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(yo + i) * wo + xo])
                .sum();
        }
    }
    (out, ho, wo)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, max_val: f64) -> f64 {
    // Images smaller than the window use the largest odd window that fits.
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let prod =
        |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, ho, wo) = filter_valid(a, h, w, &taps);
    let (mu_b, _, _) = filter_valid(b, h, w, &taps);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (ho * wo) as f64
}

/// Mean SSIM over `[C, H, W]` or `[N, C, H, W]` images: Gaussian 11x11
/// window, sigma 1.5, valid region, computed per channel and averaged.
pub fn ssim(pred: &Tensor, gt: &Tensor, max_val: f64) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let (planes, h, w) = match *pred.shape() {
        [c, h, w] => (c, h, w),
        [n, c, h, w] => (n * c, h, w),
        _ => {
            return Err(Error::shape(
                "ssim",
                format!("{:?} is not an image", pred.shape()),
            ))
        }
    };
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * h * w..(p + 1) * h * w;
            ssim_plane(&pred.data()[r.clone()], &gt.data()[r], h, w, max_val)
        })
        .sum();
    Ok(total / planes as f64)
}

/// Full-range BT.601 RGB to YCbCr on `[3, H, W]` or `[N, 3, H, W]`.
pub fn rgb_to_ycbcr(img: &Tensor) -> Result<Tensor> {
    let (n, h, w) = match *img.shape() {
        [3, h, w] => (1, h, w),
        [n, 3, h, w] => (n, h, w),
        _ => {
            return Err(Error::shape(
                "rgb_to_ycbcr",
                format!("{:?} has no 3-channel axis", img.shape()),
            ))
        }
    };
    let hw = h * w;
    let mut out = vec![0.0; img.numel()];
    for b in 0..n {
        let base = b * 3 * hw;
        for i in 0..hw {
            let (r, g, bl) = (
                img.data()[base + i],
                img.data()[base + hw + i],
                img.data()[base + 2 * hw + i],
            );
            out[base + i] = 0.299 * r + 0.587 * g + 0.114 * bl;
            out[base + hw + i] = 0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * bl;
            out[base + 2 * hw + i] = 0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * bl;
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Color space in which metrics are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MetricSpace {
    #[default]
    Rgb,
    /// Luminance channel only.
    Y,
    /// All three YCbCr channels.
    YCbCr,
}

impl fmt::Display for MetricSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricSpace::Rgb => "rgb",
            MetricSpace::Y => "y",
            MetricSpace::YCbCr => "ycbcr",
        })
    }
}

impl FromStr for MetricSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb" => Ok(MetricSpace::Rgb),
            "y" => Ok(MetricSpace::Y),
            "ycbcr" => Ok(MetricSpace::YCbCr),
            _ => Err("expected rgb, y or ycbcr".into()),
        }
    }
}

fn to_space(img: &Tensor, space: MetricSpace) -> Result<Tensor> {
    match space {
        MetricSpace::Rgb => Ok(img.clone()),
        MetricSpace::YCbCr => rgb_to_ycbcr(img),
        MetricSpace::Y => {
            let ycc = rgb_to_ycbcr(img)?;
            let (n, h, w) = match *ycc.shape() {
                [_, h, w] => (1, h, w),
                [n, _, h, w] => (n, h, w),
                _ => unreachable!("checked by rgb_to_ycbcr"),
            };
            let hw = h * w;
            let data = (0..n)
                .flat_map(|b| ycc.data()[b * 3 * hw..][..hw].to_vec())
                .collect();
            Tensor::new(vec![n, 1, h, w], data)
        }
    }
}

/// `(PSNR, SSIM)` of a pair in the requested space, with peak value 1.
pub fn quality(pred: &Tensor, gt: &Tensor, space: MetricSpace) -> Result<(f64, f64)> {
    same_shape("quality", pred, gt)?;
    let (p, g) = (to_space(pred, space)?, to_space(gt, space)?);
    Ok((psnr(&p, &g, 1.0)?, ssim(&p, &g, 1.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_tenth_offset_is_twenty_db() {
        let gt = Tensor::full(&[3, 8, 8], 0.5);
        let pred = gt.map(|v| v + 0.1);
        assert!((psnr(&pred, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_self_similarity() {
        let a = Tensor::from_fn(&[3, 16, 16], |i| ((i * 7919) % 101) as f64 / 100.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn white_has_unit_luma() {
        let y = rgb_to_ycbcr(&Tensor::ones(&[3, 1, 1])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);
        assert!((y.data()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_is_normalized() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }
}
