//! Parameter-free 2x resampling: average pooling down, bilinear up.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps of half-pixel-centred bilinear 2x upsampling along one axis:
/// output `o` reads `(i0, w0), (i1, w1)` of the input.
fn up_taps(out_len: usize, in_len: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, 1.0 - frac, i1, frac)
        })
        .collect()
}

impl<'t> Var<'t> {
    /// 2x2 average pooling; `H` and `W` must be even.
    pub fn downsample2(&self) -> Result<Var<'t>> {
        let (n, c, h, w) = self.value.dims4("downsample2")?;
        for (extent, what) in [(h, "height"), (w, "width")] {
            if extent % 2 != 0 || extent == 0 {
                return Err(Error::Divisibility {
                    op: "downsample2",
                    what,
                    extent,
                    divisor: 2,
                });
            }
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        self.tape.record("downsample2", out, &[self], move |g, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let gs = &g[plane * ho * wo..][..ho * wo];
                let dst = &mut dx[plane * h * w..][..h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = 0.25 * gs[y * wo + xx];
                        let i = 2 * y * w + 2 * xx;
                        dst[i] = v;
                        dst[i + 1] = v;
                        dst[i + w] = v;
                        dst[i + w + 1] = v;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Bilinear 2x upsampling with half-pixel centres (corners not aligned).
    pub fn upsample2(&self) -> Result<Var<'t>> {
        let (n, c, h, w) = self.value.dims4("upsample2")?;
        if h == 0 || w == 0 {
            return Err(Error::invalid("upsample2", "empty spatial extent"));
        }
        let (ho, wo) = (2 * h, 2 * w);
        let ty = up_taps(ho, h);
        let tx = up_taps(wo, w);
        let x = self.value.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for (oy, &(y0, wy0, y1, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, wx0, x1, wx1)) in tx.iter().enumerate() {
                    dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        self.tape.record("upsample2", out, &[self], move |g, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let gs = &g[plane * ho * wo..][..ho * wo];
                let dst = &mut dx[plane * h * w..][..h * w];
                for (oy, &(y0, wy0, y1, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, wx0, x1, wx1)) in tx.iter().enumerate() {
                        let gv = gs[oy * wo + ox];
                        dst[y0 * w + x0] += gv * wy0 * wx0;
                        dst[y0 * w + x1] += gv * wy0 * wx1;
                        dst[y1 * w + x0] += gv * wy1 * wx0;
                        dst[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn constants_are_fixed_points() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 6], 0.3));
        let d = x.downsample2().unwrap();
        let u = x.upsample2().unwrap();
        let du = d.upsample2().unwrap();
        for t in [&d, &u, &du] {
            assert!(t.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
        assert_eq!(du.shape(), x.shape());
    }

    #[test]
    fn average_of_block() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        assert_eq!(x.downsample2().unwrap().value().data(), &[4.0]);
    }

    #[test]
    fn odd_extent_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        let err = x.downsample2().unwrap_err().to_string();
        assert!(err.contains("divisible by 2"), "{err}");
    }

    #[test]
    fn upsample_interpolates_half_pixel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = x.upsample2().unwrap();
        assert_eq!(
            y.value().data(),
            &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]
        );
    }
}
