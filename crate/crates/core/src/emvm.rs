//! Multi-directional selective-scan block: one full-resolution scan plus three
//! half-resolution scans, summed, followed by scaled residuals and an MLP.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, LayerNorm, Mlp, ParamId};
use crate::ssm::{S3m, ScanDirection};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmvmConfig {
    pub channels: usize,
    /// Width of the scanned branch inside each scan unit.
    pub inner: usize,
    pub states: usize,
    pub mlp_ratio: f64,
    /// Run the hb/vf/vb scans at half resolution.
    pub downsample: bool,
    /// One parameter set for all four directions.
    pub share_scan_params: bool,
}

#[derive(Clone, Debug)]
pub struct Emvm {
    pub config: EmvmConfig,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    /// Indexed like [`ScanDirection::ALL`]; a single entry when shared.
    pub scans: Vec<S3m>,
    pub gamma1: ParamId,
    pub gamma2: ParamId,
    pub mlp: Mlp,
}

impl Emvm {
    pub fn new(b: &mut Builder<'_>, name: &str, config: EmvmConfig) -> Self {
        let mut s = b.scope(name);
        let c = config.channels;
        let norm1 = LayerNorm::new(&mut s, "norm1", c);
        let scans = if config.share_scan_params {
            vec![S3m::new(&mut s, "scan", c, config.inner, config.states)]
        } else {
            ScanDirection::ALL
                .iter()
                .map(|d| S3m::new(&mut s, &format!("scan_{d}"), c, config.inner, config.states))
                .collect()
        };
        let gamma1 = s.ones("gamma1", &[c]);
        let norm2 = LayerNorm::new(&mut s, "norm2", c);
        let gamma2 = s.ones("gamma2", &[c]);
        let mlp = Mlp::new(&mut s, "mlp", c, config.mlp_ratio);
        Emvm {
            config,
            norm1,
            norm2,
            scans,
            gamma1,
            gamma2,
            mlp,
        }
    }

    pub fn scan(&self, dir: ScanDirection) -> &S3m {
        let i = ScanDirection::ALL
            .iter()
            .position(|&d| d == dir)
            .unwrap_or(0);
        &self.scans[i.min(self.scans.len() - 1)]
    }

    fn directional<'t>(
        &self,
        p: &Bound<'t, '_>,
        x: &Var<'t>,
        dir: ScanDirection,
    ) -> Result<Var<'t>> {
        let half = self.config.downsample && dir != ScanDirection::HorizontalForward;
        let input = if half { x.downsample2()? } else { x.clone() };
        let (n, c, h, w) = input.value().dims4("emvm")?;
        let seq = input.reorder_spatial(dir)?;
        debug_assert_eq!(seq.shape(), [n, c, h * w]);
        let y = self
            .scan(dir)
            .forward(p, &seq)?
            .inverse_reorder_spatial(h, w, dir)?;
        if half {
            y.upsample2()
        } else {
            Ok(y)
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, c, h, w) = x.value().dims4("emvm")?;
        if c != self.config.channels {
            return Err(Error::shape(
                "emvm",
                format!(
                    "input has {c} channels, block expects {}",
                    self.config.channels
                ),
            ));
        }
        if self.config.downsample {
            for (what, extent) in [("height", h), ("width", w)] {
                if extent % 2 != 0 {
                    return Err(Error::Divisibility {
                        op: "emvm",
                        what,
                        extent,
                        divisor: 2,
                    });
                }
            }
        }
        let xn = self.norm1.forward(p, x)?;
        let mut y = self.directional(p, &xn, ScanDirection::HorizontalForward)?;
        for dir in &ScanDirection::ALL[1..] {
            y = y.add(&self.directional(p, &xn, *dir)?)?;
        }
        let z = x.mul_axis(p.p(self.gamma1), 1)?.add(&y)?;
        let refined = self.mlp.forward(p, &self.norm2.forward(p, &z)?)?;
        z.mul_axis(p.p(self.gamma2), 1)?.add(&refined)
    }

    pub fn param_count(&self) -> usize {
        let c = self.config.channels;
        4 * c
            + 2 * c
            + self.scans.iter().map(S3m::param_count).sum::<usize>()
            + self.mlp.param_count()
    }

    /// Multiply-accumulates for one `h x w` map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let full = (h * w) as u64;
        let other = if self.config.downsample {
            (h / 2 * (w / 2)) as u64
        } else {
            full
        };
        let scan = self.scans[0].macs_per_token();
        scan * (full + 3 * other) + self.mlp.macs_per_position() * full
    }
}
