//! WebAssembly bindings for the static demo page in `www/`.

use restormixer::data::{synth_degrade_with, synthetic_clean, DegradationTag, DegradeParams};
use restormixer::metrics::{quality, MetricSpace};
use restormixer::ssm::{discretize_zoh, lti_kernel, scan_order, ScanDirection};
use restormixer::{Error, Result, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Impulse response of a one-state scan with `A = -exp(a_log)`, step `delta`,
/// input weight `b` and readout `c`, over `len` steps.
pub fn kernel_curve(a_log: f64, delta: f64, b: f64, c: f64, len: usize) -> Result<Vec<f64>> {
    let len = len.max(1);
    let a = Tensor::full(&[1, 1], -a_log.exp());
    let (abar, bbar) = discretize_zoh(
        &Tensor::full(&[len, 1], delta),
        &a,
        &Tensor::full(&[len, 1, 1], b),
    )?;
    Ok(lti_kernel(&abar, &bbar, &Tensor::full(&[len, 1, 1], c))?
        .data()
        .to_vec())
}

#[wasm_bindgen]
pub fn scan_kernel(
    a_log: f64,
    delta: f64,
    b: f64,
    c: f64,
    len: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    kernel_curve(a_log, delta, b, c, len).map_err(js_err)
}

/// Visit order of an `h x w` grid: entry `t` is the row-major index of the
/// pixel scanned at step `t`. `dir` is one of `hf`, `hb`, `vf`, `vb`.
pub fn visit_order(h: usize, w: usize, dir: &str) -> Result<Vec<u32>> {
    let dir: ScanDirection = dir.parse()?;
    Ok(scan_order(h, w, dir)
        .into_iter()
        .map(|i| i as u32)
        .collect())
}

#[wasm_bindgen]
pub fn scan_visit_order(h: usize, w: usize, dir: &str) -> std::result::Result<Vec<u32>, JsError> {
    visit_order(h, w, dir).map_err(js_err)
}

/// A clean procedural image, its degraded version, and their scores.
#[wasm_bindgen]
pub struct Degraded {
    size: usize,
    clean: Vec<u8>,
    degraded: Vec<u8>,
    psnr: f64,
    ssim: f64,
    psnr_y: f64,
    ssim_y: f64,
}

#[wasm_bindgen]
impl Degraded {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }
    /// RGBA bytes, row-major.
    #[wasm_bindgen(getter)]
    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn degraded(&self) -> Vec<u8> {
        self.degraded.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
    #[wasm_bindgen(getter)]
    pub fn psnr_y(&self) -> f64 {
        self.psnr_y
    }
    #[wasm_bindgen(getter)]
    pub fn ssim_y(&self) -> f64 {
        self.ssim_y
    }
}

/// Nearest-neighbour upscale of `[3, h, w]` to `size x size` RGBA.
fn rgba(img: &Tensor, size: usize) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            let p = (y * h / size) * w + x * w / size;
            for c in 0..3 {
                out.push((img.data()[c * h * w + p] * 255.0 + 0.5).clamp(0.0, 255.0) as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Synthesize a `size x size` image, degrade it with `tag` (e.g. `rain`,
/// `noise`, `lowlight+rain`) at `strength` in `[0, 1]`, and score the result.
pub fn degrade_preview(tag: &str, size: usize, seed: u64, strength: f64) -> Result<Degraded> {
    let tag: DegradationTag = tag.parse()?;
    if matches!(
        tag,
        DegradationTag::Downsample(_) | DegradationTag::Recorded
    ) {
        return Err(Error::InvalidArgument {
            op: "degrade",
            detail: format!("{tag} does not keep the image size"),
        });
    }
    let size = size.clamp(16, 256);
    let s = strength.clamp(0.0, 1.0);
    let d = DegradeParams::default();
    let scale = |(lo, hi): (f64, f64)| (lo * s, hi * s);
    let params = DegradeParams {
        rain_intensity: scale(d.rain_intensity),
        noise_sigma: scale(d.noise_sigma),
        snow_density: scale(d.snow_density),
        ..d
    };
    let clean = synthetic_clean(size, size, seed);
    let pair = synth_degrade_with(&clean, &tag, seed, &params)?;
    let (psnr, ssim) = quality(&pair.degraded, &clean, MetricSpace::Rgb)?;
    let (psnr_y, ssim_y) = quality(&pair.degraded, &clean, MetricSpace::Y)?;
    Ok(Degraded {
        size,
        clean: rgba(&clean, size),
        degraded: rgba(&pair.degraded, size),
        psnr,
        ssim,
        psnr_y,
        ssim_y,
    })
}

#[wasm_bindgen]
pub fn degrade(
    tag: &str,
    size: usize,
    seed: u64,
    strength: f64,
) -> std::result::Result<Degraded, JsError> {
    degrade_preview(tag, size, seed, strength).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_decays_geometrically() {
        let k = kernel_curve(0.0, 0.5, 1.0, 1.0, 8).unwrap();
        assert_eq!(k.len(), 8);
        let ratio = (-0.5f64).exp();
        for pair in k.windows(2) {
            assert!((pair[1] / pair[0] - ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn visit_orders() {
        assert_eq!(visit_order(2, 2, "vf").unwrap(), vec![0, 2, 1, 3]);
    }
}
