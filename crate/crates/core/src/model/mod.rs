//! The three-level encoder-decoder: convolutional stem, a residual-conv stage
//! at full resolution, mixed scan/attention stages below it, a mirrored
//! decoder, and one prediction head per decoder scale.

pub mod checkpoint;
pub mod count;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::KeyValues;
use crate::emvm::{Emvm, EmvmConfig};
use crate::error::{Error, Result};
use crate::mwsa::{window_schedule, Mwsa};
use crate::nn::{hidden_width, Bound, Builder, Conv, Linear, ParamStore};
use crate::ops::{crop_indices, reflect_pad_indices, NormMode};
use crate::rdcnn::Rdcnn;
use crate::tensor::Tensor;

pub use count::{CountReport, CountRow};

/// Spatial extents are padded to a multiple of this before the forward pass.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Restoration,
    /// Runs at the low resolution and upscales by the factor (2 or 4) at the end.
    SuperResolution(usize),
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Restoration => f.write_str("restoration"),
            Task::SuperResolution(r) => write!(f, "sr{r}"),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "restoration" => Ok(Task::Restoration),
            "sr2" => Ok(Task::SuperResolution(2)),
            "sr4" => Ok(Task::SuperResolution(4)),
            _ => Err("expected restoration, sr2 or sr4".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub window_base: usize,
    pub window_step: usize,
    pub ssm_states: usize,
    /// Scanned-branch width relative to the block width.
    pub ssm_expand: f64,
    pub mlp_ratio: f64,
    /// Channels per attention head.
    pub head_width: usize,
    /// Run every scan at full resolution.
    pub no_dsm: bool,
    /// Use mixed scan/attention blocks at full resolution too.
    pub no_rdcnn: bool,
    /// Replace attention blocks with residual conv units.
    pub no_mwsa: bool,
    pub share_scan_params: bool,
    pub task: Task,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            blocks_per_stage: 4,
            window_base: 8,
            window_step: 8,
            ssm_states: 8,
            ssm_expand: 1.0,
            mlp_ratio: 4.0,
            head_width: 32,
            no_dsm: false,
            no_rdcnn: false,
            no_mwsa: false,
            share_scan_params: false,
            task: Task::Restoration,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "base_channels",
        "blocks_per_stage",
        "window_base",
        "window_step",
        "ssm_states",
        "ssm_expand",
        "mlp_ratio",
        "head_width",
        "no_dsm",
        "no_rdcnn",
        "no_mwsa",
        "share_scan_params",
        "task",
        "init_seed",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            base_channels: kv.get_or("base_channels", d.base_channels)?,
            blocks_per_stage: kv.get_or("blocks_per_stage", d.blocks_per_stage)?,
            window_base: kv.get_or("window_base", d.window_base)?,
            window_step: kv.get_or("window_step", d.window_step)?,
            ssm_states: kv.get_or("ssm_states", d.ssm_states)?,
            ssm_expand: kv.get_or("ssm_expand", d.ssm_expand)?,
            mlp_ratio: kv.get_or("mlp_ratio", d.mlp_ratio)?,
            head_width: kv.get_or("head_width", d.head_width)?,
            no_dsm: kv.get_or("no_dsm", d.no_dsm)?,
            no_rdcnn: kv.get_or("no_rdcnn", d.no_rdcnn)?,
            no_mwsa: kv.get_or("no_mwsa", d.no_mwsa)?,
            share_scan_params: kv.get_or("share_scan_params", d.share_scan_params)?,
            task: kv.get_or("task", d.task)?,
            init_seed: kv.get_or("init_seed", d.init_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("base_channels", self.base_channels);
        kv.set("blocks_per_stage", self.blocks_per_stage);
        kv.set("window_base", self.window_base);
        kv.set("window_step", self.window_step);
        kv.set("ssm_states", self.ssm_states);
        kv.set("ssm_expand", self.ssm_expand);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("head_width", self.head_width);
        kv.set("no_dsm", self.no_dsm);
        kv.set("no_rdcnn", self.no_rdcnn);
        kv.set("no_mwsa", self.no_mwsa);
        kv.set("share_scan_params", self.share_scan_params);
        kv.set("task", self.task);
        kv.set("init_seed", self.init_seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.blocks_per_stage == 0 || self.ssm_states == 0 {
            return fail("base_channels, blocks_per_stage and ssm_states must be positive".into());
        }
        if self.window_base == 0 || self.head_width == 0 {
            return fail("window_base and head_width must be positive".into());
        }
        if !(self.ssm_expand > 0.0) || !(self.mlp_ratio > 0.0) {
            return fail("ssm_expand and mlp_ratio must be positive".into());
        }
        if !self.no_mwsa && self.blocks_per_stage % 2 != 0 {
            return fail(format!(
                "blocks_per_stage = {} must be even so scan and attention blocks pair up",
                self.blocks_per_stage
            ));
        }
        for s in 0..3 {
            let c = self.stage_channels(s);
            let heads = self.heads(c);
            if c % heads != 0 {
                return fail(format!("{c} channels cannot be split into {heads} heads"));
            }
        }
        Ok(())
    }

    /// `C * 2^stage`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn heads(&self, channels: usize) -> usize {
        (channels / self.head_width).max(1)
    }

    fn emvm(&self, channels: usize) -> EmvmConfig {
        EmvmConfig {
            channels,
            inner: hidden_width(channels, self.ssm_expand),
            states: self.ssm_states,
            mlp_ratio: self.mlp_ratio,
            downsample: !self.no_dsm,
            share_scan_params: self.share_scan_params,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Rdcnn(Rdcnn),
    Emvm(Emvm),
    Mwsa(Mwsa),
}

impl Block {
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            Block::Rdcnn(b) => b.forward(p, x),
            Block::Emvm(b) => b.forward(p, x),
            Block::Mwsa(b) => b.forward_fitted(p, x),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Block::Rdcnn(_) => "rdcnn",
            Block::Emvm(_) => "emvm",
            Block::Mwsa(_) => "mwsa",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Rdcnn(b) => b.param_count(),
            Block::Emvm(b) => b.param_count(),
            Block::Mwsa(b) => b.param_count(),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Block::Rdcnn(b) => b.macs(h, w),
            Block::Emvm(b) => b.macs(h, w),
            Block::Mwsa(b) => b.macs(h, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub channels: usize,
    pub blocks: Vec<Block>,
}

impl Stage {
    fn build(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        mixed: bool,
        cfg: &ModelConfig,
    ) -> Self {
        let mut s = b.scope(name);
        let blocks = (0..cfg.blocks_per_stage)
            .map(|i| {
                let bname = format!("{i}");
                if !mixed {
                    Block::Rdcnn(Rdcnn::new(&mut s, &bname, channels))
                } else if i % 2 == 0 {
                    Block::Emvm(Emvm::new(&mut s, &bname, cfg.emvm(channels)))
                } else if cfg.no_mwsa {
                    Block::Rdcnn(Rdcnn::new(&mut s, &bname, channels))
                } else {
                    let window = window_schedule(i / 2, cfg.window_base, cfg.window_step);
                    Block::Mwsa(Mwsa::new(
                        &mut s,
                        &bname,
                        channels,
                        cfg.heads(channels),
                        window,
                        cfg.mlp_ratio,
                    ))
                }
            })
            .collect();
        Stage {
            name: name.to_string(),
            channels,
            blocks,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block
                .forward(p, &h)
                .map_err(|e| e.within(&format!("{}.{i}.{}", self.name, block.kind())))?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: Conv,
    /// Full, half and quarter resolution.
    pub encoder: Vec<Stage>,
    /// Strided 3x3 convs into the half and quarter stages.
    pub down: Vec<Conv>,
    /// 1x1 reductions after concatenating pooled stem features.
    pub inject: Vec<Linear>,
    /// Quarter, half and full resolution.
    pub decoder: Vec<Stage>,
    /// 1x1 channel halving applied before bilinear upsampling (the two commute).
    pub up: Vec<Linear>,
    /// Full, half, quarter (restoration) or a single upscaling head.
    pub heads: Vec<Conv>,
}

fn within<T>(r: Result<T>, layer: &str) -> Result<T> {
    r.map_err(|e| e.within(layer))
}

fn pixel_shuffle_indices(n: usize, c: usize, r: usize, h: usize, w: usize) -> Rc<[usize]> {
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let sub = ch * r * r + (y % r) * r + x % r;
                    idx.push(((b * c * r * r + sub) * h + y / r) * w + x / r);
                }
            }
        }
    }
    idx.into()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if let Task::SuperResolution(r) = config.task {
            if r != 2 && r != 4 {
                return Err(Error::Config(format!(
                    "upscaling factor {r} must be 2 or 4"
                )));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let c = [0, 1, 2].map(|s| config.stage_channels(s));
        let stem = Conv::new(&mut b, "stem", 3, c[0], 3, 1, true);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut inject = Vec::new();
        for s in 0..3 {
            if s > 0 {
                down.push(Conv::new(
                    &mut b,
                    &format!("down{s}"),
                    c[s - 1],
                    c[s],
                    3,
                    2,
                    true,
                ));
                inject.push(Linear::new(
                    &mut b,
                    &format!("inject{s}"),
                    c[s] + c[0],
                    c[s],
                    true,
                ));
            }
            let mixed = s > 0 || config.no_rdcnn;
            encoder.push(Stage::build(
                &mut b,
                &format!("enc{s}"),
                c[s],
                mixed,
                &config,
            ));
        }
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        for s in (0..3).rev() {
            if s < 2 {
                up.push(Linear::new(&mut b, &format!("up{s}"), c[s + 1], c[s], true));
            }
            let mixed = s > 0 || config.no_rdcnn;
            decoder.push(Stage::build(
                &mut b,
                &format!("dec{s}"),
                c[s],
                mixed,
                &config,
            ));
        }
        let heads = match config.task {
            Task::Restoration => (0..3)
                .map(|s| Conv::new(&mut b, &format!("head{s}"), c[s], 3, 3, 1, true))
                .collect(),
            Task::SuperResolution(r) => {
                vec![Conv::new(&mut b, "head_sr", c[0], 3 * r * r, 3, 1, true)]
            }
        };
        Ok(Model {
            config,
            store,
            stem,
            encoder,
            down,
            inject,
            decoder,
            up,
            heads,
        })
    }

    /// Zero every prediction head, making the model an identity restorer.
    pub fn zero_heads(&mut self) {
        for head in &self.heads {
            let ids = [Some(head.weight), head.bias];
            for id in ids.into_iter().flatten() {
                self.store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    /// Padded extents used internally for an `h x w` input.
    pub fn padded_extent(h: usize, w: usize) -> (usize, usize) {
        (
            h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE,
            w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE,
        )
    }

    /// Predictions, finest first: full/half/quarter scale for restoration,
    /// the single upscaled image for super-resolution.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let (n, c, h, w) = x.value().dims4("model")?;
        if c != 3 {
            return Err(Error::shape(
                "model",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        let (hp, wp) = Self::padded_extent(h, w);
        let xp = if (hp, wp) == (h, w) {
            x.clone()
        } else {
            x.gather(
                reflect_pad_indices([n, 3, h, w], hp - h, wp - w)?,
                &[n, 3, hp, wp],
            )?
        };

        let stem = within(self.stem.forward(p, &xp), "stem")?;
        let stem2 = stem.downsample2()?;
        let stem4 = stem2.downsample2()?;
        let pooled = [&stem2, &stem4];

        let mut skips = Vec::with_capacity(3);
        let mut h_ = self.encoder[0].forward(p, &stem)?;
        for s in 1..3 {
            skips.push(h_.clone());
            let d = within(self.down[s - 1].forward(p, &h_), &format!("down{s}"))?;
            let cat = Var::concat_channels(&[&d, pooled[s - 1]])?;
            let injected = within(
                self.inject[s - 1].forward_channels(p, &cat),
                &format!("inject{s}"),
            )?;
            h_ = self.encoder[s].forward(p, &injected)?;
        }

        let mut features = Vec::with_capacity(3);
        h_ = self.decoder[0].forward(p, &h_)?;
        features.push(h_.clone());
        for i in 0..2 {
            let s = 1 - i;
            let upped =
                within(self.up[i].forward_channels(p, &h_), &format!("up{s}"))?.upsample2()?;
            h_ = self.decoder[i + 1].forward(p, &upped.add(&skips[s])?)?;
            features.push(h_.clone());
        }
        // features: quarter, half, full

        match self.config.task {
            Task::Restoration => {
                let mut base = xp.clone();
                let mut out = Vec::with_capacity(3);
                for s in 0..3 {
                    if s > 0 {
                        base = base.downsample2()?;
                    }
                    let feat = &features[2 - s];
                    let pred =
                        within(self.heads[s].forward(p, feat), &format!("head{s}"))?.add(&base)?;
                    let (ph, pw) = (hp >> s, wp >> s);
                    let (th, tw) = (h.div_ceil(1 << s), w.div_ceil(1 << s));
                    out.push(if (th, tw) == (ph, pw) {
                        pred
                    } else {
                        pred.gather(crop_indices([n, 3, ph, pw], th, tw), &[n, 3, th, tw])?
                    });
                }
                Ok(out)
            }
            Task::SuperResolution(r) => {
                let body = within(self.heads[0].forward(p, &features[2]), "head_sr")?;
                let hr = body.gather(
                    pixel_shuffle_indices(n, 3, r, hp, wp),
                    &[n, 3, hp * r, wp * r],
                )?;
                let mut base = xp.clone();
                let mut f = 1;
                while f < r {
                    base = base.upsample2()?;
                    f *= 2;
                }
                let pred = hr.add(&base)?;
                if (hp, wp) == (h, w) {
                    Ok(vec![pred])
                } else {
                    let idx = crop_indices([n, 3, hp * r, wp * r], h * r, w * r);
                    Ok(vec![pred.gather(idx, &[n, 3, h * r, w * r])?])
                }
            }
        }
    }

    /// Eval-mode forward without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::inference();
        let p = self.store.bind(&tape, NormMode::Eval);
        let out = self.forward(&p, &tape.constant(x.clone()))?;
        Ok(out.iter().map(Var::to_tensor).collect())
    }

    /// The final restored (or upscaled) image.
    pub fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict(x)?.swap_remove(0))
    }

    pub fn param_count(&self) -> CountReport {
        count::report(self, 256, 256, 1)
    }

    pub fn flop_count(&self, h: usize, w: usize, flops_per_mac: u64) -> CountReport {
        count::report(self, h, w, flops_per_mac)
    }
}
