//! Pointwise arithmetic, activations, broadcasts and reductions.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("add", self, other)?;
        let data = self
            .value
            .data()
            .iter()
            .zip(other.value.data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape.record("add", out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("sub", self, other)?;
        let data = self
            .value
            .data()
            .iter()
            .zip(other.value.data())
            .map(|(a, b)| a - b)
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape.record("sub", out, &[self, other], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_shape("mul", self, other)?;
        let a = self.value.clone();
        let b = other.value.clone();
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape
            .record("mul", out, &[self, other], move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect()),
                ]
            })
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let out = self.value.map(|v| v * factor);
        self.tape.record("scale", out, &[self], move |g, _| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&self, shift: f64) -> Result<Var<'t>> {
        let out = self.value.map(|v| v + shift);
        self.tape
            .record("add_scalar", out, &[self], |g, _| vec![Some(g.to_vec())])
    }

    fn unary(
        &self,
        op: &'static str,
        f: fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let input = self.value.clone();
        let out = input.map(f);
        let saved_out = out.data().to_vec();
        self.tape.record(op, out, &[self], move |g, _| {
            let grad = g
                .iter()
                .zip(input.data())
                .zip(&saved_out)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", softplus_scalar, |x, _| sigmoid(x))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Broadcast-multiply by a vector along `axis`.
    pub fn mul_axis(&self, v: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (outer, len, inner) = axis_split("mul_axis", self.shape(), v.shape(), axis)?;
        let x = self.value.clone();
        let s = v.value.clone();
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for (c, &sc) in s.data().iter().enumerate() {
                let base = (o * len + c) * inner;
                data[base..base + inner].iter_mut().for_each(|d| *d *= sc);
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape
            .record("mul_axis", out, &[self, v], move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = g.to_vec();
                    for o in 0..outer {
                        for (c, &sc) in s.data().iter().enumerate() {
                            let base = (o * len + c) * inner;
                            dx[base..base + inner].iter_mut().for_each(|d| *d *= sc);
                        }
                    }
                    dx
                });
                let dv = needs[1].then(|| {
                    let mut dv = vec![0.0; len];
                    for o in 0..outer {
                        for (c, acc) in dv.iter_mut().enumerate() {
                            let base = (o * len + c) * inner;
                            *acc += g[base..base + inner]
                                .iter()
                                .zip(&x.data()[base..base + inner])
                                .map(|(g, x)| g * x)
                                .sum::<f64>();
                        }
                    }
                    dv
                });
                vec![dx, dv]
            })
    }

    /// Broadcast-add a vector along `axis`.
    pub fn add_axis(&self, v: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (outer, len, inner) = axis_split("add_axis", self.shape(), v.shape(), axis)?;
        let mut data = self.value.data().to_vec();
        for o in 0..outer {
            for (c, &b) in v.value.data().iter().enumerate() {
                let base = (o * len + c) * inner;
                data[base..base + inner].iter_mut().for_each(|d| *d += b);
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape
            .record("add_axis", out, &[self, v], move |g, needs| {
                let dv = needs[1].then(|| reduce_axis(g, outer, len, inner));
                vec![needs[0].then(|| g.to_vec()), dv]
            })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let n = self.value.numel();
        let out = Tensor::scalar(self.value.sum());
        self.tape
            .record("sum", out, &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value.numel().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum of absolute values. The subgradient at zero is taken as zero.
    pub fn abs_sum(&self) -> Result<Var<'t>> {
        let x = self.value.clone();
        let out = Tensor::scalar(x.data().iter().map(|v| v.abs()).sum());
        self.tape.record("abs_sum", out, &[self], move |g, _| {
            vec![Some(x.data().iter().map(|&v| g[0] * sign(v)).collect())]
        })
    }

    /// Reinterpret the extents; the data order is unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value).clone().reshape(shape)?;
        self.tape
            .record("reshape", out, &[self], |g, _| vec![Some(g.to_vec())])
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn axis_split(
    op: &'static str,
    shape: &[usize],
    vshape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() || vshape != [shape[axis]] {
        return Err(Error::shape(
            op,
            format!("vector {vshape:?} does not match axis {axis} of {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn reduce_axis(g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for o in 0..outer {
        for (c, a) in acc.iter_mut().enumerate() {
            let base = (o * len + c) * inner;
            *a += g[base..base + inner].iter().sum::<f64>();
        }
    }
    acc
}
