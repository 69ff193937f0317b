//! Index-driven data movement: gather (with scatter-add backward) and
//! channel concatenation. Reorderings, window tiling, head splits, padding
//! and cropping are all gathers with a precomputed index table.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// `out[i] = self[indices[i]]`, viewed with `shape`.
    pub fn gather(&self, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let numel: usize = shape.iter().product();
        if numel != indices.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", indices.len()),
            ));
        }
        let src = self.value.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        let len = src.len();
        self.tape.record("gather", out, &[self], move |g, _| {
            let mut dx = vec![0.0; len];
            for (&i, gv) in indices.iter().zip(g) {
                dx[i] += gv;
            }
            vec![Some(dx)]
        })
    }

    /// Concatenate `[N, C_i, ...]` tensors along axis 1.
    pub fn concat_channels(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
        let shape = first.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "concat_channels",
                format!("{shape:?} has no channel axis"),
            ));
        }
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != shape.len() || s[0] != n || s[2..] != shape[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s:?} is incompatible with {shape:?}"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value.data()[b * c * inner..][..c * inner]);
            }
        }
        let mut oshape = shape;
        oshape[1] = total;
        let out = Tensor::from_parts(oshape, data);
        let tape = first.tape;
        tape.record("concat_channels", out, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = widths
                .iter()
                .zip(needs)
                .map(|(&c, &need)| need.then(|| Vec::with_capacity(n * c * inner)))
                .collect();
            for b in 0..n {
                let mut offset = b * total * inner;
                for (grad, &c) in grads.iter_mut().zip(&widths) {
                    if let Some(grad) = grad {
                        grad.extend_from_slice(&g[offset..offset + c * inner]);
                    }
                    offset += c * inner;
                }
            }
            grads
        })
    }

    /// Channels `[start, start + len)` of `[N, C, ...]`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(Error::shape(
                "narrow_channels",
                format!(
                    "channels {start}..{} out of range for {shape:?}",
                    start + len
                ),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let idx: Vec<usize> = (0..n)
            .flat_map(|b| ((b * c + start) * inner)..((b * c + start + len) * inner))
            .collect();
        let mut oshape = shape;
        oshape[1] = len;
        self.gather(idx.into(), &oshape)
    }
}

/// Reflect padding (edge not repeated) of the two trailing axes of
/// `[N, C, H, W]` up to `[N, C, H + ph, W + pw]`, padding bottom/right.
/// Padding wider than the map keeps folding back and forth.
pub fn reflect_pad_indices(shape: [usize; 4], ph: usize, pw: usize) -> Result<Rc<[usize]>> {
    let [n, c, h, w] = shape;
    if (h == 0 && ph > 0) || (w == 0 && pw > 0) {
        return Err(Error::invalid("reflect_pad", "cannot pad an empty map"));
    }
    let reflect = |i: usize, len: usize| {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let i = i % period;
        if i < len {
            i
        } else {
            period - i
        }
    };
    let (hp, wp) = (h + ph, w + pw);
    let mut idx = Vec::with_capacity(n * c * hp * wp);
    for plane in 0..n * c {
        for y in 0..hp {
            for x in 0..wp {
                idx.push(plane * h * w + reflect(y, h) * w + reflect(x, w));
            }
        }
    }
    Ok(idx.into())
}

/// Top-left `h x w` crop of `[N, C, H, W]`.
pub fn crop_indices(shape: [usize; 4], h: usize, w: usize) -> Rc<[usize]> {
    let [n, c, hi, wi] = shape;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                idx.push(plane * hi * wi + y * wi + x);
            }
        }
    }
    idx.into()
}

/// Horizontal flip of the last axis of any tensor whose last extent is `w`.
pub fn hflip_indices(numel: usize, w: usize) -> Rc<[usize]> {
    (0..numel).map(|i| i - i % w + (w - 1 - i % w)).collect()
}
