//! Layer/batch normalization and softmax.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Batch-norm running statistics (per channel).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update with `momentum` weight on the new batch.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (m, b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        for (v, b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
    }
}

/// Statistics observed on one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

fn check_affine(op: &'static str, gamma: &Var<'_>, beta: &Var<'_>, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "affine parameters {:?}/{:?} do not match normalized extent {c}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Normalize over axis 1 at every other position: `[N, C, ...]`.
    pub fn layer_norm_channels(&self, gamma: &Var<'t>, beta: &Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} has no channel axis"),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        check_affine("layer_norm", gamma, beta, c)?;
        let x = self.value.data();
        let gm = gamma.value.clone();
        let bt = beta.value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * s];
        let mut out = vec![0.0; x.len()];
        let mut mean = vec![0.0; s];
        let mut var = vec![0.0; s];
        for b in 0..n {
            mean.fill(0.0);
            var.fill(0.0);
            let xb = &x[b * c * s..][..c * s];
            for ch in 0..c {
                mean.iter_mut()
                    .zip(&xb[ch * s..][..s])
                    .for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            for ch in 0..c {
                var.iter_mut()
                    .zip(&xb[ch * s..][..s])
                    .zip(&mean)
                    .for_each(|((acc, v), m)| *acc += (v - m) * (v - m));
            }
            let istd = &mut inv_std[b * s..][..s];
            for (i, v) in istd.iter_mut().zip(&var) {
                *i = 1.0 / (v / c as f64 + NORM_EPS).sqrt();
            }
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for p in 0..s {
                    let xh = (xb[ch * s + p] - mean[p]) * istd[p];
                    xhat[base + p] = xh;
                    out[base + p] = gm.data()[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        self.tape
            .record("layer_norm", out, &[self, gamma, beta], move |g, needs| {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for p in 0..s {
                            dgamma[ch] += g[base + p] * xhat[base + p];
                            dbeta[ch] += g[base + p];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * c * s];
                    let mut m1 = vec![0.0; s];
                    let mut m2 = vec![0.0; s];
                    for b in 0..n {
                        m1.fill(0.0);
                        m2.fill(0.0);
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let gc = gm.data()[ch];
                            for p in 0..s {
                                let dxh = g[base + p] * gc;
                                m1[p] += dxh;
                                m2[p] += dxh * xhat[base + p];
                            }
                        }
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let gc = gm.data()[ch];
                            for p in 0..s {
                                let dxh = g[base + p] * gc;
                                dx[base + p] = inv_std[b * s + p]
                                    * (dxh - m1[p] / c as f64 - xhat[base + p] * m2[p] / c as f64);
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            })
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`. In training mode the
    /// batch statistics are used and returned; in evaluation mode the running
    /// statistics are required.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running: Option<&RunningStats>,
        mode: NormMode,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("{shape:?} has no channel axis"),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        check_affine("batch_norm", gamma, beta, c)?;
        let count = (n * s) as f64;
        let x = self.value.data();

        let (mean, var, batch) = match mode {
            NormMode::Eval => {
                let stats = running.ok_or_else(|| {
                    Error::invalid(
                        "batch_norm",
                        "evaluation mode needs populated running statistics",
                    )
                })?;
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!(
                            "running statistics have {} channels, input {c}",
                            stats.mean.len()
                        ),
                    ));
                }
                (stats.mean.clone(), stats.var.clone(), None)
            }
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        mean[ch] += x[(b * c + ch) * s..][..s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        var[ch] += x[(b * c + ch) * s..][..s]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                let unbiased_var = var
                    .iter()
                    .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    unbiased_var,
                };
                (mean, var, Some(stats))
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let gm = gamma.value.clone();
        let bt = beta.value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for p in 0..s {
                    let xh = (x[base + p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    out[base + p] = gm.data()[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        let train = mode == NormMode::Train;
        let var = self
            .tape
            .record("batch_norm", out, &[self, gamma, beta], move |g, needs| {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for p in 0..s {
                            dgamma[ch] += g[base + p] * xhat[base + p];
                            dbeta[ch] += g[base + p];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * c * s];
                    for ch in 0..c {
                        let gc = gm.data()[ch];
                        let (m1, m2) = if train {
                            (gc * dbeta[ch] / count, gc * dgamma[ch] / count)
                        } else {
                            (0.0, 0.0)
                        };
                        for b in 0..n {
                            let base = (b * c + ch) * s;
                            for p in 0..s {
                                let dxh = g[base + p] * gc;
                                dx[base + p] = inv_std[ch] * (dxh - m1 - xhat[base + p] * m2);
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            })?;
        Ok((var, batch))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value.data().to_vec();
        for row in out.chunks_exact_mut(len.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let y = out.clone();
        let out = Tensor::from_parts(shape, out);
        self.tape.record("softmax", out, &[self], move |g, _| {
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx
                .chunks_exact_mut(len)
                .zip(y.chunks_exact(len))
                .zip(g.chunks_exact(len))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
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
    fn layer_norm_of_constant_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4, 1, 1], 3.5));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm_channels(&g, &b).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = x.softmax_last().unwrap();
        assert_eq!(y.value().data(), &[0.25; 4]);
        let big =
            tape.constant(Tensor::new(vec![2, 3], vec![1e3, -1e3, 0.0, 5.0, 5.0, 5.0]).unwrap());
        let y = big.softmax_last().unwrap();
        for row in y.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn eval_batch_norm_requires_stats() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(x.batch_norm(&g, &b, None, NormMode::Eval).is_err());
        let stats = RunningStats::identity(2);
        let (y, batch) = x.batch_norm(&g, &b, Some(&stats), NormMode::Eval).unwrap();
        assert!(batch.is_none());
        let expect = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!(y.value().data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn train_batch_norm_reports_statistics() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, batch) = x.batch_norm(&g, &b, None, NormMode::Train).unwrap();
        let batch = batch.unwrap();
        assert_eq!(batch.mean, vec![2.5]);
        assert!((batch.unbiased_var[0] - 5.0 / 3.0).abs() < 1e-12);
        assert!(y.value().mean().abs() < 1e-12);
        let mut rs = RunningStats::identity(1);
        rs.update(&batch, 0.1);
        assert!((rs.mean[0] - 0.25).abs() < 1e-12);
    }
}
