//! Window self-attention: non-overlapping window tiling, multi-head scaled
//! dot-product attention inside each window, and the growing window schedule.

use std::collections::BTreeSet;
use std::rc::Rc;
use std::sync::Mutex;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, LayerNorm, Linear, Mlp};
use crate::ops::{crop_indices, reflect_pad_indices};

/// Window edge of the `index`-th attention block in a stage.
pub fn window_schedule(index: usize, base: usize, step: usize) -> usize {
    base + step * index
}

/// Window extents actually used on an `h x w` map: the requested edge,
/// clamped to each extent.
pub fn effective_window(requested: usize, h: usize, w: usize) -> (usize, usize) {
    if requested > h || requested > w {
        static SEEN: Mutex<BTreeSet<(usize, usize, usize)>> = Mutex::new(BTreeSet::new());
        if SEEN
            .lock()
            .map(|mut s| s.insert((requested, h, w)))
            .unwrap_or(true)
        {
            log::warn!("window {requested} exceeds the {h}x{w} feature map; clamping");
        }
    }
    (requested.min(h).max(1), requested.min(w).max(1))
}

fn check_tiling(h: usize, w: usize, wh: usize, ww: usize) -> Result<()> {
    if wh == 0 || ww == 0 {
        return Err(Error::invalid(
            "window_partition",
            "window extent must be at least 1",
        ));
    }
    for (what, extent, divisor) in [("height", h, wh), ("width", w, ww)] {
        if extent % divisor != 0 {
            return Err(Error::invalid(
                "window_partition",
                format!(
                    "{what} {extent} is not divisible by window {divisor}; pad by {}",
                    divisor - extent % divisor
                ),
            ));
        }
    }
    Ok(())
}

/// `out[window][token][channel]` source offsets into `[N, C, H, W]`.
fn partition_indices(n: usize, c: usize, h: usize, w: usize, wh: usize, ww: usize) -> Vec<usize> {
    let (nh, nw) = (h / wh, w / ww);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..wh {
                    for tx in 0..ww {
                        let (y, x) = (wy * wh + ty, wx * ww + tx);
                        for ch in 0..c {
                            idx.push(((b * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `[N, C, H, W]` to `[N * (H/wh) * (W/ww), wh * ww, C]`, windows and tokens
/// both in row-major order.
pub fn window_partition<'t>(x: &Var<'t>, wh: usize, ww: usize) -> Result<Var<'t>> {
    let (n, c, h, w) = x.value().dims4("window_partition")?;
    check_tiling(h, w, wh, ww)?;
    let idx = partition_indices(n, c, h, w, wh, ww);
    x.gather(idx.into(), &[n * (h / wh) * (w / ww), wh * ww, c])
}

/// Inverse of [`window_partition`] for an `h x w` map.
pub fn window_merge<'t>(
    windows: &Var<'t>,
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
) -> Result<Var<'t>> {
    check_tiling(h, w, wh, ww)?;
    let &[bw, t, c] = windows.shape() else {
        return Err(Error::shape(
            "window_merge",
            format!("{:?} is not [B, T, C]", windows.shape()),
        ));
    };
    let per_image = (h / wh) * (w / ww);
    if t != wh * ww || bw % per_image != 0 {
        return Err(Error::shape(
            "window_merge",
            format!(
                "{:?} does not tile {h}x{w} with {wh}x{ww} windows",
                windows.shape()
            ),
        ));
    }
    let n = bw / per_image;
    let forward = partition_indices(n, c, h, w, wh, ww);
    let mut inverse = vec![0; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    windows.gather(inverse.into(), &[n, c, h, w])
}

#[derive(Clone, Debug)]
pub struct Mwsa {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub norm1: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// One head per 32 channels.
pub fn default_heads(channels: usize) -> usize {
    (channels / 32).max(1)
}

fn head_split_indices(b: usize, t: usize, heads: usize, dk: usize) -> Rc<[usize]> {
    let c = heads * dk;
    let mut idx = Vec::with_capacity(b * t * c);
    for ib in 0..b {
        for hd in 0..heads {
            for it in 0..t {
                for k in 0..dk {
                    idx.push((ib * t + it) * c + hd * dk + k);
                }
            }
        }
    }
    idx.into()
}

fn head_merge_indices(b: usize, t: usize, heads: usize, dk: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(b * t * heads * dk);
    for ib in 0..b {
        for it in 0..t {
            for hd in 0..heads {
                for k in 0..dk {
                    idx.push(((ib * heads + hd) * t + it) * dk + k);
                }
            }
        }
    }
    idx.into()
}

impl Mwsa {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: f64,
    ) -> Self {
        let mut s = b.scope(name);
        Mwsa {
            channels,
            heads,
            window,
            norm1: LayerNorm::new(&mut s, "norm1", channels),
            w_q: Linear::new(&mut s, "w_q", channels, channels, true),
            w_k: Linear::new(&mut s, "w_k", channels, channels, true),
            w_v: Linear::new(&mut s, "w_v", channels, channels, true),
            w_o: Linear::new(&mut s, "w_o", channels, channels, true),
            norm2: LayerNorm::new(&mut s, "norm2", channels),
            mlp: Mlp::new(&mut s, "mlp", channels, mlp_ratio),
        }
    }

    fn split_heads<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let &[b, t, c] = x.shape() else {
            return Err(Error::shape(
                "window_attention",
                format!("{:?} is not [B, T, C]", x.shape()),
            ));
        };
        if c != self.channels || c % self.heads != 0 {
            return Err(Error::shape(
                "window_attention",
                format!(
                    "{c} channels with {} heads (block width {})",
                    self.heads, self.channels
                ),
            ));
        }
        let dk = c / self.heads;
        x.gather(
            head_split_indices(b, t, self.heads, dk),
            &[b * self.heads, t, dk],
        )
    }

    /// Attention weights `[B * heads, T, T]`; every row sums to one.
    pub fn attention_probabilities<'t>(
        &self,
        p: &Bound<'t, '_>,
        windows: &Var<'t>,
    ) -> Result<Var<'t>> {
        let q = self.split_heads(&self.w_q.forward_last(p, windows)?)?;
        let k = self.split_heads(&self.w_k.forward_last(p, windows)?)?;
        let dk = self.channels / self.heads;
        q.bmm(&k, true)?
            .scale(1.0 / (dk as f64).sqrt())?
            .softmax_last()
    }

    /// Multi-head attention within each window: `[B, T, C] -> [B, T, C]`.
    pub fn window_attention<'t>(&self, p: &Bound<'t, '_>, windows: &Var<'t>) -> Result<Var<'t>> {
        let probs = self.attention_probabilities(p, windows)?;
        let v = self.split_heads(&self.w_v.forward_last(p, windows)?)?;
        let (b, t) = (windows.shape()[0], windows.shape()[1]);
        let dk = self.channels / self.heads;
        let heads = probs.bmm(&v, false)?.gather(
            head_merge_indices(b, t, self.heads, dk),
            &[b, t, self.channels],
        )?;
        self.w_o.forward_last(p, &heads)
    }

    /// Strict form: `H` and `W` must be divisible by the window extents.
    pub fn forward_with_window<'t>(
        &self,
        p: &Bound<'t, '_>,
        x: &Var<'t>,
        wh: usize,
        ww: usize,
    ) -> Result<Var<'t>> {
        let (_, _, h, w) = x.value().dims4("mwsa")?;
        let windows = window_partition(&self.norm1.forward(p, x)?, wh, ww)?;
        let attended = window_merge(&self.window_attention(p, &windows)?, h, w, wh, ww)?;
        let x1 = x.add(&attended)?;
        x1.add(&self.mlp.forward(p, &self.norm2.forward(p, &x1)?)?)
    }

    /// Uses the block's window edge; `H` and `W` must be divisible by it.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        self.forward_with_window(p, x, self.window, self.window)
    }

    /// Model-level entry: clamps the window to the map and reflect-pads the
    /// map up to a multiple of the window when needed.
    pub fn forward_fitted<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (n, c, h, w) = x.value().dims4("mwsa")?;
        let (wh, ww) = effective_window(self.window, h, w);
        let (ph, pw) = ((wh - h % wh) % wh, (ww - w % ww) % ww);
        if ph == 0 && pw == 0 {
            return self.forward_with_window(p, x, wh, ww);
        }
        let padded = x.gather(
            reflect_pad_indices([n, c, h, w], ph, pw)?,
            &[n, c, h + ph, w + pw],
        )?;
        let y = self.forward_with_window(p, &padded, wh, ww)?;
        y.gather(crop_indices([n, c, h + ph, w + pw], h, w), &[n, c, h, w])
    }

    /// Extents of the map the block actually attends over for an `h x w` input.
    pub fn fitted_extent(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let wh = self.window.min(h).max(1);
        let ww = self.window.min(w).max(1);
        (h.div_ceil(wh) * wh, w.div_ceil(ww) * ww, wh, ww)
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels
            + self.w_q.param_count()
            + self.w_k.param_count()
            + self.w_v.param_count()
            + self.w_o.param_count()
            + self.mlp.param_count()
    }

    /// Multiply-accumulates for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (hp, wp, wh, ww) = self.fitted_extent(h, w);
        let c = self.channels as u64;
        let tokens = (hp * wp) as u64;
        let t = (wh * ww) as u64;
        4 * tokens * c * c + 2 * tokens * t * c + self.mlp.macs_per_position() * tokens
    }
}
