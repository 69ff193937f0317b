//! Closed-form parameter and multiply-accumulate accounting.
//!
//! MACs cover convolutions, channel projections, the scan recurrences and the
//! two attention products. Normalization, activations, resampling and
//! residual additions are not counted.

use std::fmt;

use super::{Model, Stage, Task};

#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountReport {
    pub height: usize,
    pub width: usize,
    pub flops_per_mac: u64,
    pub rows: Vec<CountRow>,
}

impl CountReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.total_macs() * self.flops_per_mac
    }

    /// Rows whose name starts with `prefix`, summed.
    pub fn subtotal(&self, prefix: &str) -> (usize, u64) {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fpm = self.flops_per_mac;
        writeln!(
            f,
            "{:<22} {:>12} {:>16}   (input {}x{}, {} FLOP per MAC)",
            "layer", "params", "FLOPs", self.height, self.width, fpm
        )?;
        for r in &self.rows {
            writeln!(f, "{:<22} {:>12} {:>16}", r.name, r.params, r.macs * fpm)?;
        }
        writeln!(
            f,
            "{:<22} {:>12} {:>16}",
            "total",
            self.total_params(),
            self.total_flops()
        )?;
        write!(
            f,
            "total: {:.3} M params, {:.3} G FLOPs",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        )
    }
}

fn stage_rows(rows: &mut Vec<CountRow>, stage: &Stage, h: usize, w: usize) {
    for (i, b) in stage.blocks.iter().enumerate() {
        rows.push(CountRow {
            name: format!("{}.{i}.{}", stage.name, b.kind()),
            params: b.param_count(),
            macs: b.macs(h, w),
        });
    }
}

pub(super) fn report(model: &Model, h: usize, w: usize, flops_per_mac: u64) -> CountReport {
    let (hp, wp) = Model::padded_extent(h, w);
    let at = |s: usize| (hp >> s, wp >> s);
    let mut rows = Vec::new();
    let conv_params = |c: &crate::nn::Conv| {
        c.cout * c.cin * c.kernel * c.kernel + if c.bias.is_some() { c.cout } else { 0 }
    };
    let (h0, w0) = at(0);
    rows.push(CountRow {
        name: "stem".into(),
        params: conv_params(&model.stem),
        macs: model.stem.macs(h0, w0),
    });
    for s in 0..3 {
        let (hs, ws) = at(s);
        if s > 0 {
            let d = &model.down[s - 1];
            rows.push(CountRow {
                name: format!("down{s}"),
                params: conv_params(d),
                macs: d.macs(hs, ws),
            });
            let l = &model.inject[s - 1];
            rows.push(CountRow {
                name: format!("inject{s}"),
                params: l.param_count(),
                macs: (l.cin * l.cout * hs * ws) as u64,
            });
        }
        stage_rows(&mut rows, &model.encoder[s], hs, ws);
    }
    for (i, stage) in model.decoder.iter().enumerate() {
        let s = 2 - i;
        let (hs, ws) = at(s);
        if i > 0 {
            let l = &model.up[i - 1];
            let (hl, wl) = at(s + 1);
            rows.push(CountRow {
                name: format!("up{s}"),
                params: l.param_count(),
                macs: (l.cin * l.cout * hl * wl) as u64,
            });
        }
        stage_rows(&mut rows, stage, hs, ws);
    }
    match model.config.task {
        Task::Restoration => {
            for (s, head) in model.heads.iter().enumerate() {
                let (hs, ws) = at(s);
                rows.push(CountRow {
                    name: format!("head{s}"),
                    params: conv_params(head),
                    macs: head.macs(hs, ws),
                });
            }
        }
        Task::SuperResolution(_) => {
            let head = &model.heads[0];
            rows.push(CountRow {
                name: "head_sr".into(),
                params: conv_params(head),
                macs: head.macs(h0, w0),
            });
        }
    }
    CountReport {
        height: h,
        width: w,
        flops_per_mac,
        rows,
    }
}
