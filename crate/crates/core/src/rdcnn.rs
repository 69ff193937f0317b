//! Residual convolution unit: full 3x3 conv, then a depthwise/pointwise
//! pair, with batch normalization and a GELU-wrapped residual.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Bound, Builder, Conv, Linear, ParamId};

#[derive(Clone, Debug)]
pub struct Rdcnn {
    pub channels: usize,
    pub conv3: Conv,
    pub bn1: BatchNorm,
    /// `[C, 1, 3, 3]`, no bias.
    pub dw: ParamId,
    pub pw: Linear,
    pub bn2: BatchNorm,
}

impl Rdcnn {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        Rdcnn {
            channels,
            conv3: Conv::new(&mut s, "conv3", channels, channels, 3, 1, true),
            bn1: BatchNorm::new(&mut s, "bn1", channels),
            dw: s.fan_in_uniform("dw.weight", &[channels, 1, 3, 3], 9),
            pw: Linear::new(&mut s, "pw", channels, channels, true),
            bn2: BatchNorm::new(&mut s, "bn2", channels),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = x.value().dims4("rdcnn")?;
        if c != self.channels {
            return Err(Error::shape(
                "rdcnn",
                format!("input has {c} channels, block expects {}", self.channels),
            ));
        }
        let y1 = self.bn1.forward(p, &self.conv3.forward(p, x)?)?.gelu()?;
        let y = self
            .pw
            .forward_channels(p, &y1.depthwise_conv2d(p.p(self.dw), None)?)?;
        self.bn2.forward(p, &y)?.add(x)?.gelu()
    }

    /// `9C^2 + C + 9C + C^2 + C + 4C`.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        9 * c * c + c + 9 * c + c * c + c + 4 * c
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.channels as u64;
        (9 * c * c + 9 * c + c * c) * (h * w) as u64
    }
}
