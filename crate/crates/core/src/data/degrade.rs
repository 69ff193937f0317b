use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{clamp_unit, DegradedPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DegradationTag {
    Rain,
    Noise,
    LowLight,
    Snow,
    /// Area-average downscaling by the factor.
    Downsample(usize),
    /// Applied left to right.
    Composite(Vec<DegradationTag>),
    /// A pair loaded from disk; cannot be synthesized.
    Recorded,
}

impl fmt::Display for DegradationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradationTag::Rain => f.write_str("rain"),
            DegradationTag::Noise => f.write_str("noise"),
            DegradationTag::LowLight => f.write_str("lowlight"),
            DegradationTag::Snow => f.write_str("snow"),
            DegradationTag::Downsample(r) => write!(f, "down{r}"),
            DegradationTag::Composite(parts) => {
                let names: Vec<String> = parts.iter().map(ToString::to_string).collect();
                f.write_str(&names.join("+"))
            }
            DegradationTag::Recorded => f.write_str("recorded"),
        }
    }
}

impl FromStr for DegradationTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains('+') {
            let parts = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
            return Ok(DegradationTag::Composite(parts));
        }
        match s {
            "rain" => Ok(DegradationTag::Rain),
            "noise" => Ok(DegradationTag::Noise),
            "lowlight" => Ok(DegradationTag::LowLight),
            "snow" => Ok(DegradationTag::Snow),
            _ => s
                .strip_prefix("down")
                .and_then(|r| r.parse().ok())
                .filter(|&r: &usize| r >= 1)
                .map(DegradationTag::Downsample)
                .ok_or_else(|| Error::invalid("degradation", format!("unknown tag {s:?}"))),
        }
    }
}

/// Sampling ranges, each `(low, high)` inclusive of `low`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradeParams {
    /// Streak angle from the horizontal, degrees.
    pub rain_angle: (f64, f64),
    pub rain_intensity: (f64, f64),
    /// Probability that a pixel seeds a streak.
    pub rain_drop_prob: (f64, f64),
    /// Streak length in pixels.
    pub rain_length: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub lowlight_gamma: (f64, f64),
    pub lowlight_gain: (f64, f64),
    /// Flakes per pixel.
    pub snow_density: (f64, f64),
    pub snow_radius: (f64, f64),
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            rain_angle: (70.0, 110.0),
            rain_intensity: (0.2, 0.6),
            rain_drop_prob: (0.006, 0.015),
            rain_length: (5.0, 12.0),
            noise_sigma: (0.02, 0.1),
            lowlight_gamma: (2.0, 3.0),
            lowlight_gain: (0.3, 0.6),
            snow_density: (0.002, 0.006),
            snow_radius: (0.6, 2.0),
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// The streak parameters drawn for one rain field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainSample {
    pub angle_deg: f64,
    pub intensity: f64,
    pub drop_prob: f64,
    pub length: usize,
}

impl RainSample {
    /// Expected streak coverage per pixel, `drop_prob * length`; the field
    /// mean before clamping is `intensity * density`.
    pub fn density(&self) -> f64 {
        self.drop_prob * self.length as f64
    }
}

/// Additive streak field `[H, W]`: Bernoulli drop seeds, each smeared along a
/// line of `length` unit taps at the sampled angle, scaled by the intensity.
/// Seeds are drawn on a canvas padded by the streak length so coverage is
/// uniform up to the borders.
pub fn rain_field(
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
    params: &DegradeParams,
) -> (Vec<f64>, RainSample) {
    let s = RainSample {
        angle_deg: sample(rng, params.rain_angle),
        intensity: sample(rng, params.rain_intensity),
        drop_prob: sample(rng, params.rain_drop_prob),
        length: sample(rng, params.rain_length).round().max(1.0) as usize,
    };
    let pad = s.length as isize;
    let (dx, dy) = {
        let t = s.angle_deg.to_radians();
        (t.cos(), t.sin())
    };
    let mut field = vec![0.0; h * w];
    let mut splat = |x: f64, y: f64| {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ox, oy, wgt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (xi, yi) = (x0 as isize + ox, y0 as isize + oy);
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                field[yi as usize * w + xi as usize] += wgt;
            }
        }
    };
    let half = (s.length as f64 - 1.0) / 2.0;
    for cy in -pad..h as isize + pad {
        for cx in -pad..w as isize + pad {
            if rng.random::<f64>() >= s.drop_prob {
                continue;
            }
            for t in 0..s.length {
                let off = t as f64 - half;
                splat(cx as f64 + off * dx, cy as f64 + off * dy);
            }
        }
    }
    for v in &mut field {
        *v *= s.intensity;
    }
    (field, s)
}

/// Procedural clean image `[3, H, W]`: a smooth color gradient with a few
/// flat shapes and a faint periodic texture.
pub fn synthetic_clean(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ]
        })
        .collect();
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w.max(2) as f64, y as f64 / h.max(2) as f64);
            for c in 0..3 {
                img[(c * h + y) * w + x] = (1.0 - u) * (1.0 - v) * corners[0][c]
                    + u * (1.0 - v) * corners[1][c]
                    + (1.0 - u) * v * corners[2][c]
                    + u * v * corners[3][c];
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.08..0.3) * w as f64;
        let ry = rng.random_range(0.08..0.3) * h as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (ux, uy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if disc {
                    ux * ux + uy * uy <= 1.0
                } else {
                    ux.abs() <= 1.0 && uy.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = color[c];
                    }
                }
            }
        }
    }
    let (fx, fy) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    let amp = rng.random_range(0.0..0.08);
    for y in 0..h {
        for x in 0..w {
            let t = amp * (fx * x as f64).sin() * (fy * y as f64).cos();
            for c in 0..3 {
                let v = &mut img[(c * h + y) * w + x];
                *v = (*v + t).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], img)
}

fn check_image(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [3, H, W], got {:?}", t.shape()),
        )),
    }
}

fn apply(
    img: &Tensor,
    tag: &DegradationTag,
    rng: &mut ChaCha8Rng,
    params: &DegradeParams,
) -> Result<Tensor> {
    let (h, w) = check_image("synth_degrade", img)?;
    let mut out = img.clone();
    match tag {
        DegradationTag::Rain => {
            let (field, _) = rain_field(h, w, rng, params);
            for c in 0..3 {
                for (v, f) in out.data_mut()[c * h * w..][..h * w].iter_mut().zip(&field) {
                    *v += f;
                }
            }
        }
        DegradationTag::Noise => {
            let sigma = sample(rng, params.noise_sigma);
            if sigma > 0.0 {
                let normal =
                    Normal::new(0.0, sigma).map_err(|e| Error::invalid("noise", e.to_string()))?;
                for v in out.data_mut() {
                    *v += normal.sample(rng);
                }
            }
        }
        DegradationTag::LowLight => {
            let gamma = sample(rng, params.lowlight_gamma);
            let gain = sample(rng, params.lowlight_gain);
            for v in out.data_mut() {
                *v = gain * v.max(0.0).powf(gamma);
            }
        }
        DegradationTag::Snow => {
            let flakes = (sample(rng, params.snow_density) * (h * w) as f64).round() as usize;
            for _ in 0..flakes {
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                let r = sample(rng, params.snow_radius);
                let alpha = rng.random_range(0.6..1.0);
                let (y0, y1) = (
                    (cy - r).floor().max(0.0) as usize,
                    ((cy + r).ceil() as usize).min(h),
                );
                let (x0, x1) = (
                    (cx - r).floor().max(0.0) as usize,
                    ((cx + r).ceil() as usize).min(w),
                );
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        if d2 <= r * r {
                            for c in 0..3 {
                                let v = &mut out.data_mut()[(c * h + y) * w + x];
                                *v = (1.0 - alpha) * *v + alpha;
                            }
                        }
                    }
                }
            }
        }
        DegradationTag::Downsample(r) => {
            let r = *r;
            if h % r != 0 || w % r != 0 {
                return Err(Error::Divisibility {
                    op: "downsample degradation",
                    what: if h % r != 0 { "height" } else { "width" },
                    extent: if h % r != 0 { h } else { w },
                    divisor: r,
                });
            }
            let (ho, wo) = (h / r, w / r);
            let norm = 1.0 / (r * r) as f64;
            out = Tensor::from_fn(&[3, ho, wo], |i| {
                let (c, y, x) = (i / (ho * wo), i / wo % ho, i % wo);
                let mut s = 0.0;
                for yy in 0..r {
                    for xx in 0..r {
                        s += img.data()[(c * h + y * r + yy) * w + x * r + xx];
                    }
                }
                s * norm
            });
        }
        DegradationTag::Composite(parts) => {
            for part in parts {
                out = apply(&out, part, rng, params)?;
            }
        }
        DegradationTag::Recorded => {
            return Err(Error::invalid(
                "synth_degrade",
                "recorded pairs cannot be synthesized",
            ));
        }
    }
    Ok(out)
}

/// Degrade `clean` with default parameter ranges.
pub fn synth_degrade(clean: &Tensor, tag: &DegradationTag, seed: u64) -> Result<DegradedPair> {
    synth_degrade_with(clean, tag, seed, &DegradeParams::default())
}

/// Deterministic in `(clean, tag, seed, params)`.
pub fn synth_degrade_with(
    clean: &Tensor,
    tag: &DegradationTag,
    seed: u64,
    params: &DegradeParams,
) -> Result<DegradedPair> {
    check_image("synth_degrade", clean)?;
    if let Some(i) = clean.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(
            "synth_degrade",
            format!("clean value at {i} is outside [0, 1]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degraded = apply(clean, tag, &mut rng, params)?;
    let clamped = clamp_unit(&mut degraded);
    Ok(DegradedPair {
        degraded,
        clean: clean.clone(),
        tag: tag.clone(),
        seed,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip_through_text() {
        for s in [
            "rain",
            "noise",
            "lowlight",
            "snow",
            "down2",
            "lowlight+rain+noise",
        ] {
            assert_eq!(s.parse::<DegradationTag>().unwrap().to_string(), s);
        }
        assert!("fog".parse::<DegradationTag>().is_err());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let clean = synthetic_clean(16, 16, 3);
        let params = DegradeParams {
            noise_sigma: (0.0, 0.0),
            ..Default::default()
        };
        let pair = synth_degrade_with(&clean, &DegradationTag::Noise, 9, &params).unwrap();
        assert_eq!(pair.degraded, clean);
    }

    #[test]
    fn downsample_shapes() {
        let clean = synthetic_clean(16, 8, 1);
        let pair = synth_degrade(&clean, &DegradationTag::Downsample(4), 0).unwrap();
        assert_eq!(pair.degraded.shape(), &[3, 4, 2]);
        assert!(synth_degrade(
            &synthetic_clean(10, 8, 1),
            &DegradationTag::Downsample(4),
            0
        )
        .is_err());
    }
}
