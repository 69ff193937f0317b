//! Convolutions (cross-correlation convention) and channel-wise linear maps.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

/// Output extent of a convolution, or `None` when it is not integral.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Var<'_>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation with zero padding.
    /// `self`: `[N, Cin, H, W]`, `weight`: `[Cout, Cin, k, k]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.conv2d_padded(weight, bias, stride, pad, pad)
    }

    /// [`Var::conv2d`] with `before` zeros above/left and `after` zeros
    /// below/right, e.g. a stride-2 3x3 conv on an even extent uses (1, 0).
    pub fn conv2d_padded(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        before: usize,
        after: usize,
    ) -> Result<Var<'t>> {
        let pad = before;
        let (n, cin, h, w) = self.value.dims4("conv2d")?;
        let (cout, wcin, k, k2) = weight.value.dims4("conv2d")?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {cin} channels but weight is {:?} (expects [Cout, {cin}, k, k])",
                    weight.shape()
                ),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        check_bias("conv2d", bias, cout)?;
        let extent = |len: usize| {
            let padded = len + before + after;
            (stride > 0 && padded >= k && (padded - k) % stride == 0)
                .then(|| (padded - k) / stride + 1)
        };
        let (Some(ho), Some(wo)) = (extent(h), extent(w)) else {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "non-integral output extent for input {h}x{w}, k={k}, stride={stride}, pad=({before}, {after})"
                ),
            ));
        };
        let geo = Geometry {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let plane = ho * wo;
        let krows = cin * k * k;
        let x = self.value.clone();
        let wt = weight.value.clone();
        let mut out = vec![0.0; n * cout * plane];
        let mut cols = vec![0.0; krows * plane];
        for b in 0..n {
            geo.im2col(&x.data()[b * cin * h * w..][..cin * h * w], &mut cols);
            gemm(
                Mat::row_major(wt.data(), cout, krows),
                Mat::row_major(&cols, krows, plane),
                &mut out[b * cout * plane..][..cout * plane],
                0.0,
            );
        }
        if let Some(bv) = bias {
            for b in 0..n {
                for (c, &bc) in bv.value.data().iter().enumerate() {
                    out[(b * cout + c) * plane..][..plane]
                        .iter_mut()
                        .for_each(|v| *v += bc);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, cout, ho, wo], out);
        let parents: Vec<&Var<'t>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        self.tape.record("conv2d", out, &parents, move |g, needs| {
            let mut dx = needs[0].then(|| vec![0.0; n * cin * h * w]);
            let mut dw = needs[1].then(|| vec![0.0; cout * krows]);
            let mut cols = vec![0.0; krows * plane];
            let mut dcols = vec![0.0; krows * plane];
            for b in 0..n {
                let gb = &g[b * cout * plane..][..cout * plane];
                if let Some(dw) = dw.as_mut() {
                    geo.im2col(&x.data()[b * cin * h * w..][..cin * h * w], &mut cols);
                    gemm(
                        Mat::row_major(gb, cout, plane),
                        Mat::transposed(&cols, krows, plane),
                        dw,
                        1.0,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        Mat::transposed(wt.data(), cout, krows),
                        Mat::row_major(gb, cout, plane),
                        &mut dcols,
                        0.0,
                    );
                    geo.col2im(&dcols, &mut dx[b * cin * h * w..][..cin * h * w]);
                }
            }
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| super::elementwise::reduce_axis(g, n, cout, plane)));
            }
            grads
        })
    }

    /// Depthwise 3x3-style convolution: one `k x k` filter per channel,
    /// stride 1, zero padding `k / 2`. `weight`: `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let (n, c, h, w) = self.value.dims4("depthwise_conv2d")?;
        let (wc, one, k, k2) = weight.value.dims4("depthwise_conv2d")?;
        if wc != c || one != 1 || k != k2 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!(
                    "input has {c} channels but weight is {:?} (expects [{c}, 1, k, k])",
                    weight.shape()
                ),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(
                "depthwise_conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        check_bias("depthwise_conv2d", bias, c)?;
        let pad = (k / 2) as isize;
        let x = self.value.clone();
        let wt = weight.value.clone();
        let mut out = vec![0.0; n * c * h * w];
        let taps = move |ch: usize, f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
            for oy in 0..h {
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let tap = (ch * k + ky) * k + kx;
                        let lo = (pad - kx as isize).max(0) as usize;
                        let hi = (w as isize + pad - kx as isize).min(w as isize) as usize;
                        for ox in lo..hi {
                            let ix = (ox as isize + kx as isize - pad) as usize;
                            f(tap, oy, ox, iy as usize, ix);
                        }
                    }
                }
            }
        };
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let src = &x.data()[base..base + h * w];
                let dst = &mut out[base..base + h * w];
                taps(ch, &mut |tap, oy, ox, iy, ix| {
                    dst[oy * w + ox] += wt.data()[tap] * src[iy * w + ix];
                });
                if let Some(bv) = bias {
                    let bc = bv.value.data()[ch];
                    dst.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        let parents: Vec<&Var<'t>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        self.tape
            .record("depthwise_conv2d", out, &parents, move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; n * c * h * w]);
                let mut dw = needs[1].then(|| vec![0.0; c * k * k]);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let gb = &g[base..base + h * w];
                        let src = &x.data()[base..base + h * w];
                        if let Some(dx) = dx.as_mut() {
                            let dst = &mut dx[base..base + h * w];
                            taps(ch, &mut |tap, oy, ox, iy, ix| {
                                dst[iy * w + ix] += wt.data()[tap] * gb[oy * w + ox];
                            });
                        }
                        if let Some(dw) = dw.as_mut() {
                            taps(ch, &mut |tap, oy, ox, iy, ix| {
                                dw[tap] += gb[oy * w + ox] * src[iy * w + ix];
                            });
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| super::elementwise::reduce_axis(g, n, c, h * w)));
                }
                grads
            })
    }

    /// Per-position linear map over axis 1: `[N, Cin, ...] -> [N, Cout, ...]`
    /// with `weight` `[Cout, Cin]` or `[Cout, Cin, 1, 1]`. This is the
    /// pointwise (1x1) convolution.
    pub fn linear_channels(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "linear_channels",
                format!("input {shape:?} has no channel axis"),
            ));
        }
        let (n, cin) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let ws = weight.shape();
        let cout = ws[0];
        let ok = match ws {
            [_, c] => *c == cin,
            [_, c, 1, 1] => *c == cin,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "linear_channels",
                format!("input has {cin} channels but weight is {ws:?}"),
            ));
        }
        check_bias("linear_channels", bias, cout)?;
        let x = self.value.clone();
        let wt = weight.value.clone();
        let mut out = vec![0.0; n * cout * spatial];
        for b in 0..n {
            gemm(
                Mat::row_major(wt.data(), cout, cin),
                Mat::row_major(
                    &x.data()[b * cin * spatial..][..cin * spatial],
                    cin,
                    spatial,
                ),
                &mut out[b * cout * spatial..][..cout * spatial],
                0.0,
            );
            if let Some(bv) = bias {
                for (c, &bc) in bv.value.data().iter().enumerate() {
                    out[(b * cout + c) * spatial..][..spatial]
                        .iter_mut()
                        .for_each(|v| *v += bc);
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[1] = cout;
        let out = Tensor::from_parts(oshape, out);
        let parents: Vec<&Var<'t>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        self.tape
            .record("linear_channels", out, &parents, move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; n * cin * spatial]);
                let mut dw = needs[1].then(|| vec![0.0; cout * cin]);
                for b in 0..n {
                    let gb = &g[b * cout * spatial..][..cout * spatial];
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            Mat::transposed(wt.data(), cout, cin),
                            Mat::row_major(gb, cout, spatial),
                            &mut dx[b * cin * spatial..][..cin * spatial],
                            0.0,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(
                            Mat::row_major(gb, cout, spatial),
                            Mat::transposed(
                                &x.data()[b * cin * spatial..][..cin * spatial],
                                cin,
                                spatial,
                            ),
                            dw,
                            1.0,
                        );
                    }
                }
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(
                        needs[2].then(|| super::elementwise::reduce_axis(g, n, cout, spatial)),
                    );
                }
                grads
            })
    }

    /// Linear map over the last axis: `[..., Cin] -> [..., Cout]`,
    /// `weight` `[Cout, Cin]`.
    pub fn linear_last(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        let cin = *shape
            .last()
            .ok_or_else(|| Error::shape("linear_last", "scalar input"))?;
        let [cout, wcin] = weight.shape() else {
            return Err(Error::shape(
                "linear_last",
                format!("weight {:?} is not a matrix", weight.shape()),
            ));
        };
        let (cout, wcin) = (*cout, *wcin);
        if wcin != cin {
            return Err(Error::shape(
                "linear_last",
                format!("input last extent {cin} but weight is {:?}", weight.shape()),
            ));
        }
        check_bias("linear_last", bias, cout)?;
        let rows = self.value.numel() / cin.max(1);
        let x = self.value.clone();
        let wt = weight.value.clone();
        let mut out = vec![0.0; rows * cout];
        gemm(
            Mat::row_major(x.data(), rows, cin),
            Mat::transposed(wt.data(), cout, cin),
            &mut out,
            0.0,
        );
        if let Some(bv) = bias {
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut()
                    .zip(bv.value.data())
                    .for_each(|(v, b)| *v += b);
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = cout;
        let out = Tensor::from_parts(oshape, out);
        let parents: Vec<&Var<'t>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        self.tape
            .record("linear_last", out, &parents, move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; rows * cin];
                    gemm(
                        Mat::row_major(g, rows, cout),
                        Mat::row_major(wt.data(), cout, cin),
                        &mut dx,
                        0.0,
                    );
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(
                        Mat::transposed(g, rows, cout),
                        Mat::row_major(x.data(), rows, cin),
                        &mut dw,
                        0.0,
                    );
                    dw
                });
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| super::elementwise::reduce_axis(g, rows, cout, 1)));
                }
                grads
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn ones_kernel_center_is_nine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.value().data()[4], 9.0);
        assert_eq!(y.value().data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_is_exact() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.37 - 2.0));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn strided_output_extent() {
        assert_eq!(conv_out_extent(8, 3, 2, 1), None);
        assert_eq!(conv_out_extent(9, 3, 2, 1), Some(5));
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        // (8 + 2 - 3) / 2 is not integral.
        assert!(x.conv2d(&w, None, 2, 1).is_err());
        let w4 = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let y = x.conv2d(&w4.clone(), None, 2, 1);
        assert!(y.is_err(), "even kernels are rejected");
    }

    #[test]
    fn channel_mismatch_names_dimensions() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = x.conv2d(&w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("3 channels"), "{err}");
        let dw = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        assert!(x.depthwise_conv2d(&dw, None).is_err());
    }

    #[test]
    fn depthwise_channel_separation() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| 1.0 + i as f64));
        let mut w = Tensor::zeros(&[2, 1, 3, 3]);
        w.data_mut()[9 + 4] = 1.0; // identity on channel 1 only
        let y = x.depthwise_conv2d(&tape.constant(w), None).unwrap();
        assert!(y.value().data()[..16].iter().all(|&v| v == 0.0));
        assert_eq!(&y.value().data()[16..], &x.value().data()[16..]);
    }

    #[test]
    fn pointwise_equals_per_pixel_matmul() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.7).sin());
        let w = Tensor::from_fn(&[4, 3, 1, 1], |i| (i as f64 * 1.3).cos());
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(w.clone()), None, 1, 0)
            .unwrap();
        for b in 0..2 {
            for co in 0..4 {
                for p in 0..4 {
                    let expect: f64 = (0..3)
                        .map(|ci| w.data()[co * 3 + ci] * x.data()[(b * 3 + ci) * 4 + p])
                        .sum();
                    let got = y.value().data()[(b * 4 + co) * 4 + p];
                    assert!((got - expect).abs() < 1e-9);
                }
            }
        }
    }
}
