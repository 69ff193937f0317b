//! Selective state-space machinery: zero-order-hold discretization, the
//! input-dependent scan, the LTI convolution kernel used as its oracle, and
//! the four 2-D scan orders.
//!
//! The continuous state matrix is diagonal per channel and stored as
//! `A = -exp(a_log)`, so every realized entry is strictly negative and
//! `exp(delta * A)` lies in `(0, 1)` for `delta > 0`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Linear, ParamId};
use crate::ops::{softplus_inverse, softplus_scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Row-major.
    HorizontalForward,
    /// Reverse row-major.
    HorizontalBackward,
    /// Column-major.
    VerticalForward,
    /// Reverse column-major.
    VerticalBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::HorizontalForward,
        ScanDirection::HorizontalBackward,
        ScanDirection::VerticalForward,
        ScanDirection::VerticalBackward,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ScanDirection::HorizontalForward => "hf",
            ScanDirection::HorizontalBackward => "hb",
            ScanDirection::VerticalForward => "vf",
            ScanDirection::VerticalBackward => "vb",
        }
    }

    /// The direction that visits the transposed grid in the same order.
    pub fn transposed(self) -> Self {
        match self {
            ScanDirection::HorizontalForward => ScanDirection::VerticalForward,
            ScanDirection::HorizontalBackward => ScanDirection::VerticalBackward,
            ScanDirection::VerticalForward => ScanDirection::HorizontalForward,
            ScanDirection::VerticalBackward => ScanDirection::HorizontalBackward,
        }
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ScanDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanDirection::ALL
            .into_iter()
            .find(|d| d.short_name() == s)
            .ok_or_else(|| Error::invalid("scan direction", format!("unknown direction {s:?}")))
    }
}

/// `order[t]` is the row-major pixel index visited at step `t`.
pub fn scan_order(h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let row_major = (0..h * w).collect::<Vec<_>>();
    let col_major = (0..h * w).map(|t| (t % h) * w + t / h).collect::<Vec<_>>();
    match dir {
        ScanDirection::HorizontalForward => row_major,
        ScanDirection::HorizontalBackward => row_major.into_iter().rev().collect(),
        ScanDirection::VerticalForward => col_major,
        ScanDirection::VerticalBackward => col_major.into_iter().rev().collect(),
    }
}

/// `[C, H, W]` feature map to the `[L = H*W, C]` token sequence in `dir` order.
pub fn reorder(x: &Tensor, dir: ScanDirection) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(
            "reorder",
            format!("expected [C, H, W], got {:?}", x.shape()),
        ));
    };
    let order = scan_order(h, w, dir);
    let mut out = vec![0.0; c * h * w];
    for (t, &p) in order.iter().enumerate() {
        for ch in 0..c {
            out[t * c + ch] = x.data()[ch * h * w + p];
        }
    }
    Ok(Tensor::from_parts(vec![h * w, c], out))
}

/// Inverse of [`reorder`].
pub fn inverse_reorder(seq: &Tensor, h: usize, w: usize, dir: ScanDirection) -> Result<Tensor> {
    let &[l, c] = seq.shape() else {
        return Err(Error::shape(
            "inverse_reorder",
            format!("expected [L, C], got {:?}", seq.shape()),
        ));
    };
    if l != h * w {
        return Err(Error::shape(
            "inverse_reorder",
            format!("{l} tokens cannot fill {h}x{w}"),
        ));
    }
    let order = scan_order(h, w, dir);
    let mut out = vec![0.0; c * l];
    for (t, &p) in order.iter().enumerate() {
        for ch in 0..c {
            out[ch * l + p] = seq.data()[t * c + ch];
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

impl<'t> Var<'t> {
    /// `[N, C, H, W]` to `[N, C, L]` with the spatial axis in `dir` order.
    pub fn reorder_spatial(&self, dir: ScanDirection) -> Result<Var<'t>> {
        let (n, c, h, w) = self.value.dims4("reorder")?;
        let order = scan_order(h, w, dir);
        let idx: Rc<[usize]> = (0..n * c)
            .flat_map(|plane| order.iter().map(move |&p| plane * h * w + p))
            .collect();
        self.gather(idx, &[n, c, h * w])
    }

    /// `[N, C, L]` in `dir` order back to `[N, C, H, W]`.
    pub fn inverse_reorder_spatial(
        &self,
        h: usize,
        w: usize,
        dir: ScanDirection,
    ) -> Result<Var<'t>> {
        let &[n, c, l] = self.shape() else {
            return Err(Error::shape(
                "inverse_reorder",
                format!("expected [N, C, L], got {:?}", self.shape()),
            ));
        };
        if l != h * w {
            return Err(Error::shape(
                "inverse_reorder",
                format!("{l} tokens cannot fill {h}x{w}"),
            ));
        }
        let order = scan_order(h, w, dir);
        let mut position = vec![0; l];
        for (t, &p) in order.iter().enumerate() {
            position[p] = t;
        }
        let idx: Rc<[usize]> = (0..n * c)
            .flat_map(|plane| position.iter().map(move |&t| plane * l + t))
            .collect();
        self.gather(idx, &[n, c, h, w])
    }

    /// Fused selective scan.
    ///
    /// Shapes: `self` (input `u`) and `delta` `[B, D, L]`; `a` `[D, S]`
    /// (negative); `b`, `c` `[B, S, L]`; `d` `[D]`. Per lane,
    /// `h_t = exp(delta_t a) * h_{t-1} + delta_t b_t u_t`, `h_0 = 0`, and
    /// `y_t = <c_t, h_t> + d u_t`.
    pub fn selective_scan(
        &self,
        delta: &Var<'t>,
        a: &Var<'t>,
        b: &Var<'t>,
        c: &Var<'t>,
        d: &Var<'t>,
    ) -> Result<Var<'t>> {
        let &[bt, dim, len] = self.shape() else {
            return Err(Error::shape(
                "selective_scan",
                format!("input {:?} is not [B, D, L]", self.shape()),
            ));
        };
        let &[ad, states] = a.shape() else {
            return Err(Error::shape(
                "selective_scan",
                format!("A {:?} is not [D, S]", a.shape()),
            ));
        };
        let checks = [
            (delta.shape() == [bt, dim, len], "delta"),
            (ad == dim, "A"),
            (b.shape() == [bt, states, len], "B"),
            (c.shape() == [bt, states, len], "C"),
            (d.shape() == [dim], "D"),
        ];
        if let Some((_, what)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "{what} does not match input [B={bt}, D={dim}, L={len}] with {states} states \
                     (delta {:?}, A {:?}, B {:?}, C {:?}, D {:?})",
                    delta.shape(),
                    a.shape(),
                    b.shape(),
                    c.shape(),
                    d.shape()
                ),
            ));
        }
        if let Some(i) = delta.value.data().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(
                "selective_scan",
                format!("delta must be nonnegative (index {i})"),
            ));
        }

        let u = self.value.clone();
        let dl = delta.value.clone();
        let av = a.value.clone();
        let dv = d.value.clone();
        // [B, L, S] layouts so the inner state loop is contiguous.
        let bl = Rc::new(to_time_major(b.value.data(), bt, states, len));
        let cl = Rc::new(to_time_major(c.value.data(), bt, states, len));
        let keep_states =
            self.tape.is_recording() && [self, delta, a, b, c, d].iter().any(|v| v.requires_grad());
        let mut hs = if keep_states {
            vec![0.0; bt * dim * len * states]
        } else {
            Vec::new()
        };
        let mut out = vec![0.0; bt * dim * len];
        let mut h = vec![0.0; states];
        for ib in 0..bt {
            for ch in 0..dim {
                h.fill(0.0);
                let arow = &av.data()[ch * states..][..states];
                let lane = (ib * dim + ch) * len;
                for t in 0..len {
                    let dt = dl.data()[lane + t];
                    let ut = u.data()[lane + t];
                    let bt_ = &bl[(ib * len + t) * states..][..states];
                    let ct = &cl[(ib * len + t) * states..][..states];
                    let mut y = 0.0;
                    for s in 0..states {
                        h[s] = (dt * arow[s]).exp() * h[s] + dt * bt_[s] * ut;
                        y += ct[s] * h[s];
                    }
                    out[lane + t] = y + dv.data()[ch] * ut;
                    if keep_states {
                        hs[(lane + t) * states..][..states].copy_from_slice(&h);
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![bt, dim, len], out);
        self.tape.record(
            "selective_scan",
            out,
            &[self, delta, a, b, c, d],
            move |g, needs| {
                let mut du = vec![0.0; bt * dim * len];
                let mut ddelta = vec![0.0; bt * dim * len];
                let mut da = vec![0.0; dim * states];
                let mut db = vec![0.0; bt * len * states];
                let mut dc = vec![0.0; bt * len * states];
                let mut dd = vec![0.0; dim];
                let mut dh = vec![0.0; states];
                for ib in 0..bt {
                    for ch in 0..dim {
                        dh.fill(0.0);
                        let arow = &av.data()[ch * states..][..states];
                        let lane = (ib * dim + ch) * len;
                        for t in (0..len).rev() {
                            let gy = g[lane + t];
                            let dt = dl.data()[lane + t];
                            let ut = u.data()[lane + t];
                            let tb = (ib * len + t) * states;
                            let h_t = &hs[(lane + t) * states..][..states];
                            let mut du_t = dv.data()[ch] * gy;
                            let mut ddt = 0.0;
                            dd[ch] += gy * ut;
                            for s in 0..states {
                                dc[tb + s] += gy * h_t[s];
                                dh[s] += cl[tb + s] * gy;
                                let h_prev = if t > 0 {
                                    hs[(lane + t - 1) * states + s]
                                } else {
                                    0.0
                                };
                                let abar = (dt * arow[s]).exp();
                                let bs = bl[tb + s];
                                ddt += dh[s] * (arow[s] * abar * h_prev + bs * ut);
                                da[ch * states + s] += dh[s] * dt * abar * h_prev;
                                db[tb + s] += dh[s] * dt * ut;
                                du_t += dh[s] * dt * bs;
                                dh[s] *= abar;
                            }
                            du[lane + t] = du_t;
                            ddelta[lane + t] = ddt;
                        }
                    }
                }
                vec![
                    needs[0].then_some(du),
                    needs[1].then_some(ddelta),
                    needs[2].then_some(da),
                    needs[3].then(|| to_state_major(&db, bt, states, len)),
                    needs[4].then(|| to_state_major(&dc, bt, states, len)),
                    needs[5].then_some(dd),
                ]
            },
        )
    }
}

fn to_time_major(x: &[f64], bt: usize, states: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ib in 0..bt {
        for s in 0..states {
            for t in 0..len {
                out[(ib * len + t) * states + s] = x[(ib * states + s) * len + t];
            }
        }
    }
    out
}

fn to_state_major(x: &[f64], bt: usize, states: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ib in 0..bt {
        for s in 0..states {
            for t in 0..len {
                out[(ib * states + s) * len + t] = x[(ib * len + t) * states + s];
            }
        }
    }
    out
}

/// Zero-order-hold discretization with the first-order input approximation.
///
/// `delta` `[L, C]`, `a` `[C, N]` (strictly negative), `b` `[L, C, N]`.
/// Returns `(exp(delta * a), delta * b)`, both `[L, C, N]`.
pub fn discretize_zoh(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[l, c] = delta.shape() else {
        return Err(Error::shape(
            "discretize_zoh",
            format!("delta {:?} is not [L, C]", delta.shape()),
        ));
    };
    let &[ac, n] = a.shape() else {
        return Err(Error::shape(
            "discretize_zoh",
            format!("A {:?} is not [C, N]", a.shape()),
        ));
    };
    if ac != c || b.shape() != [l, c, n] {
        return Err(Error::shape(
            "discretize_zoh",
            format!(
                "delta {:?}, A {:?}, B {:?}",
                delta.shape(),
                a.shape(),
                b.shape()
            ),
        ));
    }
    if let Some(i) = delta.data().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(
            "discretize_zoh",
            format!("delta[{i}] must be positive"),
        ));
    }
    if let Some(i) = a.data().iter().position(|&v| !(v < 0.0)) {
        return Err(Error::invalid(
            "discretize_zoh",
            format!("A[{i}] must be strictly negative"),
        ));
    }
    let mut abar = vec![0.0; l * c * n];
    let mut bbar = vec![0.0; l * c * n];
    for t in 0..l {
        for ch in 0..c {
            let dt = delta.data()[t * c + ch];
            for s in 0..n {
                let i = (t * c + ch) * n + s;
                abar[i] = (dt * a.data()[ch * n + s]).exp();
                bbar[i] = dt * b.data()[i];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![l, c, n], abar),
        Tensor::from_parts(vec![l, c, n], bbar),
    ))
}

/// Plain recurrence over already-discretized parameters, all `[L, C, N]`
/// except `x` `[L, C]`: `h_t = abar_t h_{t-1} + bbar_t x_t`, `y_t = <c_t, h_t>`.
pub fn recurrence(abar: &Tensor, bbar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let &[l, ch, n] = abar.shape() else {
        return Err(Error::shape(
            "recurrence",
            format!("abar {:?} is not [L, C, N]", abar.shape()),
        ));
    };
    if bbar.shape() != abar.shape() || c.shape() != abar.shape() || x.shape() != [l, ch] {
        return Err(Error::shape("recurrence", "parameter shapes disagree"));
    }
    let mut y = vec![0.0; l * ch];
    for k in 0..ch {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let base = (t * ch + k) * n;
            let xt = x.data()[t * ch + k];
            let mut acc = 0.0;
            for s in 0..n {
                h[s] = abar.data()[base + s] * h[s] + bbar.data()[base + s] * xt;
                acc += c.data()[base + s] * h[s];
            }
            y[t * ch + k] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![l, ch], y))
}

/// Global convolution kernel `K[k] = sum_s c_s abar_s^k bbar_s` of a
/// time-invariant system. Inputs are `[L, C, N]` and must be constant along
/// `L`; returns `[L, C]`.
pub fn lti_kernel(abar: &Tensor, bbar: &Tensor, c: &Tensor) -> Result<Tensor> {
    let &[l, ch, n] = abar.shape() else {
        return Err(Error::shape(
            "lti_kernel",
            format!("abar {:?} is not [L, C, N]", abar.shape()),
        ));
    };
    if bbar.shape() != abar.shape() || c.shape() != abar.shape() {
        return Err(Error::shape("lti_kernel", "parameter shapes disagree"));
    }
    for (t, name) in [(abar, "abar"), (bbar, "bbar"), (c, "C")] {
        let first = &t.data()[..ch * n];
        if t.data().chunks_exact(ch * n).any(|step| step != first) {
            return Err(Error::invalid(
                "lti_kernel",
                format!("{name} varies over time; the convolution form needs constant parameters"),
            ));
        }
    }
    let mut kernel = vec![0.0; l * ch];
    for k in 0..ch {
        for s in 0..n {
            let i = k * n + s;
            let (a, b, cc) = (abar.data()[i], bbar.data()[i], c.data()[i]);
            let mut power = 1.0;
            for t in 0..l {
                kernel[t * ch + k] += cc * power * b;
                power *= a;
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, ch], kernel))
}

/// Causal convolution `y_t = sum_{j<=t} K[j] x_{t-j}` per channel; both `[L, C]`.
pub fn causal_convolve(kernel: &Tensor, x: &Tensor) -> Result<Tensor> {
    if kernel.shape() != x.shape() || kernel.rank() != 2 {
        return Err(Error::shape(
            "causal_convolve",
            format!("kernel {:?} vs input {:?}", kernel.shape(), x.shape()),
        ));
    }
    let (l, ch) = (x.shape()[0], x.shape()[1]);
    let mut y = vec![0.0; l * ch];
    for t in 0..l {
        for j in 0..=t {
            for k in 0..ch {
                y[t * ch + k] += kernel.data()[j * ch + k] * x.data()[(t - j) * ch + k];
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, ch], y))
}

/// Per-channel state matrix (log-parameterized, diagonal) and skip term.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[C, N]`; realized `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[C]`.
    pub d: Tensor,
}

impl SsmParams {
    /// `A = -(1..=N)` for every channel, `D = 1`.
    pub fn standard(channels: usize, states: usize) -> Self {
        SsmParams {
            a_log: Tensor::from_fn(&[channels, states], |i| ((i % states) as f64 + 1.0).ln()),
            d: Tensor::ones(&[channels]),
        }
    }

    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn states(&self) -> usize {
        self.a_log.shape()[1]
    }
}

/// Input-dependent projections producing `delta`, `B`, `C` from the token.
#[derive(Clone, Debug)]
pub struct SelectiveProjections {
    /// `[C, C]`.
    pub w_delta: Tensor,
    /// `[C]`.
    pub delta_bias: Tensor,
    /// `[N, C]`.
    pub w_b: Tensor,
    /// `[N, C]`.
    pub w_c: Tensor,
}

/// How the scan obtains `delta`, `B` and `C`.
#[derive(Clone, Debug)]
pub enum Projections {
    Selective(SelectiveProjections),
    /// Time-invariant parameters: `delta` per channel, `B` and `C` per state.
    Frozen {
        delta: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
}

/// Run the scan over a `[L, C]` sequence.
pub fn selective_scan(x: &Tensor, params: &SsmParams, proj: &Projections) -> Result<Tensor> {
    let &[l, ch] = x.shape() else {
        return Err(Error::shape(
            "selective_scan",
            format!("input {:?} is not [L, C]", x.shape()),
        ));
    };
    let n = params.states();
    if params.a_log.shape() != [ch, n] || params.d.shape() != [ch] {
        return Err(Error::shape(
            "selective_scan",
            "SSM parameters do not match the channel count",
        ));
    }
    let (delta, b, c) = match proj {
        Projections::Frozen { delta, b, c } => {
            if delta.len() != ch || b.len() != n || c.len() != n {
                return Err(Error::shape(
                    "selective_scan",
                    "frozen projections have wrong lengths",
                ));
            }
            let delta = Tensor::from_fn(&[l, ch], |i| delta[i % ch]);
            let b = Tensor::from_fn(&[l, n], |i| b[i % n]);
            let c = Tensor::from_fn(&[l, n], |i| c[i % n]);
            (delta, b, c)
        }
        Projections::Selective(p) => {
            if p.w_delta.shape() != [ch, ch]
                || p.delta_bias.shape() != [ch]
                || p.w_b.shape() != [n, ch]
                || p.w_c.shape() != [n, ch]
            {
                return Err(Error::shape(
                    "selective_scan",
                    "projection shapes do not match",
                ));
            }
            let project = |w: &Tensor, rows: usize, bias: Option<&Tensor>, f: fn(f64) -> f64| {
                Tensor::from_fn(&[l, rows], |i| {
                    let (t, r) = (i / rows, i % rows);
                    let dot: f64 = (0..ch)
                        .map(|k| w.data()[r * ch + k] * x.data()[t * ch + k])
                        .sum();
                    f(dot + bias.map_or(0.0, |b| b.data()[r]))
                })
            };
            (
                project(&p.w_delta, ch, Some(&p.delta_bias), softplus_scalar),
                project(&p.w_b, n, None, |v| v),
                project(&p.w_c, n, None, |v| v),
            )
        }
    };
    // Channel-major views for the fused kernel.
    let transpose = |t: &Tensor, rows: usize| {
        Tensor::from_fn(&[1, rows, l], |i| t.data()[(i % l) * rows + i / l])
    };
    let tape = crate::autodiff::Tape::inference();
    let u = tape.constant(transpose(x, ch));
    let y = u.selective_scan(
        &tape.constant(transpose(&delta, ch)),
        &tape.constant(params.a()),
        &tape.constant(transpose(&b, n)),
        &tape.constant(transpose(&c, n)),
        &tape.constant(params.d.clone()),
    )?;
    Ok(Tensor::from_fn(&[l, ch], |i| {
        y.value().data()[(i % ch) * l + i / ch]
    }))
}

/// Learned selective-scan layer on `[N, C, L]` sequences: input projection
/// into a scanned branch and a SiLU gate, input-dependent `delta`/`B`/`C`,
/// the scan, gating, and an output projection. The step-size projection is
/// factored through `dt_rank` channels.
#[derive(Clone, Debug)]
pub struct S3m {
    pub in_proj: Linear,
    /// `[dt_rank, inner]`.
    pub w_delta_down: ParamId,
    /// `[inner, dt_rank]`.
    pub w_delta_up: ParamId,
    pub delta_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: Linear,
    pub channels: usize,
    pub inner: usize,
    pub states: usize,
    pub dt_rank: usize,
}

/// Range of the initial step size after softplus.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl S3m {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        inner: usize,
        states: usize,
    ) -> Self {
        use rand::Rng;
        let mut s = b.scope(name);
        let in_proj = Linear::new(&mut s, "in_proj", channels, 2 * inner, false);
        let dt_rank = channels.div_ceil(16);
        let w_delta_down = s.fan_in_uniform("w_delta_down", &[dt_rank, inner], inner);
        let w_delta_up = s.fan_in_uniform("w_delta_up", &[inner, dt_rank], dt_rank);
        let (lo, hi) = (DELTA_INIT_RANGE.0.ln(), DELTA_INIT_RANGE.1.ln());
        let bias: Vec<f64> = (0..inner)
            .map(|_| softplus_inverse(s.rng().random_range(lo..hi).exp()))
            .collect();
        let delta_bias = s.tensor("delta_bias", Tensor::from_parts(vec![inner], bias));
        let w_b = s.fan_in_uniform("w_b", &[states, inner], inner);
        let w_c = s.fan_in_uniform("w_c", &[states, inner], inner);
        let init = SsmParams::standard(inner, states);
        let a_log = s.tensor("a_log", init.a_log);
        let d = s.tensor("d", init.d);
        let out_proj = Linear::new(&mut s, "out_proj", inner, channels, false);
        S3m {
            in_proj,
            w_delta_down,
            w_delta_up,
            delta_bias,
            w_b,
            w_c,
            a_log,
            d,
            out_proj,
            channels,
            inner,
            states,
            dt_rank,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let xz = self.in_proj.forward_channels(p, x)?;
        let u = xz.narrow_channels(0, self.inner)?.silu()?;
        let gate = xz.narrow_channels(self.inner, self.inner)?.silu()?;
        let delta = u
            .linear_channels(p.p(self.w_delta_down), None)?
            .linear_channels(p.p(self.w_delta_up), Some(p.p(self.delta_bias)))?
            .softplus()?;
        let b = u.linear_channels(p.p(self.w_b), None)?;
        let c = u.linear_channels(p.p(self.w_c), None)?;
        let a = p.p(self.a_log).exp()?.neg()?;
        let y = u.selective_scan(&delta, &a, &b, &c, p.p(self.d))?;
        self.out_proj.forward_channels(p, &y.mul(&gate)?)
    }

    pub fn param_count(&self) -> usize {
        let (c, di, n, r) = (self.channels, self.inner, self.states, self.dt_rank);
        2 * c * di + 2 * r * di + di + 2 * n * di + di * n + di + di * c
    }

    /// Multiply-accumulates per sequence position (projections plus the
    /// recurrence: state update and readout per state).
    pub fn macs_per_token(&self) -> u64 {
        let (c, di, n, r) = (
            self.channels as u64,
            self.inner as u64,
            self.states as u64,
            self.dt_rank as u64,
        );
        2 * c * di + 2 * r * di + 2 * n * di + di * c + 3 * di * n + 2 * di
    }
}
