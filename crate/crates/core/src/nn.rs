//! Named parameter storage and the small layer vocabulary shared by blocks.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::ops::{BatchStats, NormMode, RunningStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// Every trainable tensor of a model, in registration order, plus batch-norm
/// running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    stats_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats_names.push(name.into());
        self.stats.push(RunningStats::identity(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut().map(Rc::make_mut)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_entries(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn stats_entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats)> {
        self.stats_names
            .iter()
            .map(String::as_str)
            .zip(self.stats.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(StatsId, BatchStats)>, momentum: f64) {
        for (id, batch) in updates {
            self.stats[id.0].update(&batch, momentum);
        }
    }

    /// Bind every parameter as a leaf of `tape`.
    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, mode: NormMode) -> Bound<'t, 's> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
            store: self,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }
}

/// Parameters bound to one tape for one forward pass.
pub struct Bound<'t, 's> {
    vars: Vec<Var<'t>>,
    store: &'s ParamStore,
    mode: NormMode,
    updates: RefCell<Vec<(StatsId, BatchStats)>>,
}

impl<'t> Bound<'t, '_> {
    pub fn p(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn tape(&self) -> &'t Tape {
        self.vars
            .first()
            .map(|v| v.tape())
            .expect("bound parameter set is empty")
    }

    pub fn running(&self, id: StatsId) -> &RunningStats {
        self.store.stats(id)
    }

    fn push_stats(&self, id: StatsId, stats: BatchStats) {
        self.updates.borrow_mut().push((id, stats));
    }

    pub fn take_stat_updates(&self) -> Vec<(StatsId, BatchStats)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients for every parameter, in store order. Parameters that did not
    /// influence the output get `None`.
    pub fn collect_grads(&self, mut grads: Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.node().and_then(|id| grads.take_raw(id)))
            .collect()
    }
}

/// Registers parameters under a dotted name prefix with deterministic init.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape))
    }

    pub fn stats(&mut self, name: &str, channels: usize) -> StatsId {
        let full = self.full_name(name);
        self.store.add_stats(full, channels)
    }
}

/// Linear map over channels (`[Cout, Cin]`), usable on axis 1 or the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let weight = s.fan_in_uniform("weight", &[cout, cin], cin);
        let bias = bias.then(|| s.zeros("bias", &[cout]));
        Linear {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward_channels<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear_channels(p.p(self.weight), self.bias.map(|b| p.p(b)))
    }

    pub fn forward_last<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear_last(p.p(self.weight), self.bias.map(|b| p.p(b)))
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let weight = s.fan_in_uniform(
            "weight",
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
        );
        let bias = bias.then(|| s.zeros("bias", &[cout]));
        Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        // Strided convs pad one less on the far side so even extents halve exactly.
        let before = self.kernel / 2;
        let after = if self.stride > 1 {
            before.saturating_sub(1)
        } else {
            before
        };
        x.conv2d_padded(
            p.p(self.weight),
            self.bias.map(|b| p.p(b)),
            self.stride,
            before,
            after,
        )
    }

    /// Multiply-accumulates at output extent `ho x wo`.
    pub fn macs(&self, ho: usize, wo: usize) -> u64 {
        (self.cout * self.cin * self.kernel * self.kernel * ho * wo) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm {
            gamma: s.ones("gamma", &[c]),
            beta: s.zeros("beta", &[c]),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm_channels(p.p(self.gamma), p.p(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Self {
        let mut s = b.scope(name);
        BatchNorm {
            gamma: s.ones("gamma", &[c]),
            beta: s.zeros("beta", &[c]),
            stats: s.stats("running", c),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (y, batch) = x.batch_norm(
            p.p(self.gamma),
            p.p(self.beta),
            Some(p.running(self.stats)),
            p.mode(),
        )?;
        if let Some(batch) = batch {
            p.push_stats(self.stats, batch);
        }
        Ok(y)
    }
}

/// Two channel-wise linear maps with GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize, ratio: f64) -> Self {
        let hidden = hidden_width(c, ratio);
        let mut s = b.scope(name);
        Mlp {
            fc1: Linear::new(&mut s, "fc1", c, hidden, true),
            fc2: Linear::new(&mut s, "fc2", hidden, c, true),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward_channels(p, x)?.gelu()?;
        self.fc2.forward_channels(p, &h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs_per_position(&self) -> u64 {
        (self.fc1.cin * self.fc1.cout + self.fc2.cin * self.fc2.cout) as u64
    }
}

pub fn hidden_width(c: usize, ratio: f64) -> usize {
    ((c as f64 * ratio).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scoped_names_and_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut store, &mut rng);
        let mlp = Mlp::new(&mut b.scope("blk"), "mlp", 8, 2.0);
        assert_eq!(mlp.param_count(), 8 * 16 + 16 + 16 * 8 + 8);
        assert_eq!(store.name(mlp.fc1.weight), "blk.mlp.fc1.weight");
        assert_eq!(store.num_scalars(), mlp.param_count());
    }

    #[test]
    fn train_mode_collects_batch_statistics() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng), "bn", 2);
        let tape = Tape::new();
        let p = store.bind(&tape, NormMode::Train);
        let x = tape.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        bn.forward(&p, &x).unwrap();
        let updates = p.take_stat_updates();
        drop(p);
        assert_eq!(updates.len(), 1);
        store.apply_stat_updates(updates, 0.1);
        assert!(store.stats(bn.stats).mean[0] > 0.0);
    }
}
