//! Unnormalized forward 2-D DFT of real input, as separate real and
//! imaginary planes.
//!
//! With `C[j][k] = cos(2 pi jk / n)` and `S[j][k] = sin(2 pi jk / n)`:
//! `Re = C_h X C_w - S_h X S_w` and `Im = -(S_h X C_w + C_h X S_w)`.
//! Both maps are self-adjoint (the matrices are symmetric), so the backward
//! pass applies the same map to the incoming gradient.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Real,
    Imag,
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let mut cos = vec![0.0; n * n];
        let mut sin = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                let phase = 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                cos[j * n + k] = phase.cos();
                sin[j * n + k] = phase.sin();
            }
        }
        Twiddles { cos, sin }
    }
}

struct Plan {
    h: usize,
    w: usize,
    th: Twiddles,
    tw: Twiddles,
}

impl Plan {
    fn apply(&self, part: Part, x: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let planes = x.len() / (h * w);
        let mut out = vec![0.0; x.len()];
        let mut xc = vec![0.0; h * w];
        let mut xs = vec![0.0; h * w];
        for p in 0..planes {
            let src = &x[p * h * w..][..h * w];
            gemm(
                Mat::row_major(src, h, w),
                Mat::row_major(&self.tw.cos, w, w),
                &mut xc,
                0.0,
            );
            gemm(
                Mat::row_major(src, h, w),
                Mat::row_major(&self.tw.sin, w, w),
                &mut xs,
                0.0,
            );
            let dst = &mut out[p * h * w..][..h * w];
            let (first, second) = match part {
                Part::Real => ((&self.th.cos, &xc), (&self.th.sin, &xs)),
                Part::Imag => ((&self.th.sin, &xc), (&self.th.cos, &xs)),
            };
            gemm(
                Mat::row_major(first.0, h, h),
                Mat::row_major(first.1, h, w),
                dst,
                0.0,
            );
            let mut tmp = vec![0.0; h * w];
            gemm(
                Mat::row_major(second.0, h, h),
                Mat::row_major(second.1, h, w),
                &mut tmp,
                0.0,
            );
            match part {
                Part::Real => dst.iter_mut().zip(&tmp).for_each(|(d, t)| *d -= t),
                Part::Imag => dst.iter_mut().zip(&tmp).for_each(|(d, t)| *d = -(*d + t)),
            }
        }
        out
    }
}

impl<'t> Var<'t> {
    /// Forward DFT over the two trailing axes. Returns `(real, imag)`.
    pub fn dft2(&self) -> Result<(Var<'t>, Var<'t>)> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "dft2",
                format!("{shape:?} has fewer than two axes"),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let plan = Rc::new(Plan {
            h,
            w,
            th: Twiddles::new(h),
            tw: Twiddles::new(w),
        });
        let mut parts = [Part::Real, Part::Imag].into_iter().map(|part| {
            let out = Tensor::from_parts(shape.clone(), plan.apply(part, self.value.data()));
            let plan = plan.clone();
            self.tape.record("dft2", out, &[self], move |g, _| {
                vec![Some(plan.apply(part, g))]
            })
        });
        let re = parts.next().unwrap()?;
        let im = parts.next().unwrap()?;
        Ok((re, im))
    }
}
