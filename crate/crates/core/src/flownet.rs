//! The time-conditioned vector field `v(t, z)`: a U-Net built from residual
//! MLP blocks.
//!
//! ```text
//! z ─ down.0 ─ down.1 ─ … ─ down.{D-1} ─ mid ─┐
//!       │        │             │             │
//!       │        │             └── concat ─ up.{D-1}
//!       │        └──────────────── concat ─ up.1
//!       └───────────────────────── concat ─ up.0 ─ out ─ v
//! ```
//!
//! Down block `i` maps width `w_i` to `w_{i+1} = max(⌊α·w_i⌋, 16)`; up block
//! `i` consumes its upstream feature concatenated with the output of down
//! block `i` and maps `2·w_{i+1}` back to `w_i`. Every block receives its own
//! linear projection of the sinusoidal time embedding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Mode, RunningStats};
use crate::tensor::Tensor;

/// Hidden widths never drop below this many features.
pub const MIN_FEATURES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNetConfig {
    pub input_dim: usize,
    pub depth: usize,
    pub feature_scale: f64,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl FlowNetConfig {
    /// Defaults: depth 4, feature scale 0.5, 128-dim time embedding.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            depth: 4,
            feature_scale: 0.5,
            time_embed_dim: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale <= 1.0) {
            return Err(Error::Config(format!(
                "feature_scale {} outside (0, 1]",
                self.feature_scale
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Feature widths `[w_0 = input_dim, w_1, …, w_depth]` along the down path.
    pub fn widths(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let mut widths = vec![self.input_dim];
        for _ in 0..self.depth {
            let prev = *widths.last().unwrap();
            let scaled = (self.feature_scale * prev as f64).floor() as usize;
            widths.push(scaled.max(MIN_FEATURES));
        }
        Ok(widths)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let weight = Tensor::new(vec![input, output], draw(input * output)).unwrap();
        let bias = Tensor::vector(draw(output));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl BatchNorm {
    fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            stats: RunningStats::new(features),
        }
    }
}

/// `linear → batchnorm → (+ time projection) → ReLU → linear → batchnorm`,
/// added to the input (projected when the widths differ).
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub lin1: Linear,
    pub bn1: BatchNorm,
    pub time: Linear,
    pub lin2: Linear,
    pub bn2: BatchNorm,
    pub shortcut: Option<Linear>,
}

impl ResBlock {
    fn init(input: usize, output: usize, time_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let lin1 = Linear::init(input, output, rng);
        let time = Linear::init(time_dim, output, rng);
        let lin2 = Linear::init(output, output, rng);
        let shortcut = (input != output).then(|| Linear::init(input, output, rng));
        Self {
            lin1,
            bn1: BatchNorm::new(output),
            time,
            lin2,
            bn2: BatchNorm::new(output),
            shortcut,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lin1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.lin1.output_dim()
    }

    fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("lin1.weight", &self.lin1.weight),
            ("lin1.bias", &self.lin1.bias),
            ("bn1.gamma", &self.bn1.gamma),
            ("bn1.beta", &self.bn1.beta),
            ("time.weight", &self.time.weight),
            ("time.bias", &self.time.bias),
            ("lin2.weight", &self.lin2.weight),
            ("lin2.bias", &self.lin2.bias),
            ("bn2.gamma", &self.bn2.gamma),
            ("bn2.beta", &self.bn2.beta),
        ];
        if let Some(s) = &self.shortcut {
            v.push(("shortcut.weight", &s.weight));
            v.push(("shortcut.bias", &s.bias));
        }
        v
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.lin1.weight,
            &mut self.lin1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.time.weight,
            &mut self.time.bias,
            &mut self.lin2.weight,
            &mut self.lin2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ];
        if let Some(s) = &mut self.shortcut {
            v.push(&mut s.weight);
            v.push(&mut s.bias);
        }
        v
    }

    fn norms(&self) -> [(&'static str, &BatchNorm); 2] {
        [("bn1", &self.bn1), ("bn2", &self.bn2)]
    }

    fn norms_mut(&mut self) -> [&mut BatchNorm; 2] {
        [&mut self.bn1, &mut self.bn2]
    }

    fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        temb: Var,
        mode: Mode,
        params: &mut Vec<Var>,
        stats: &mut Vec<Option<BatchStats>>,
    ) -> Result<Var> {
        let vars: Vec<Var> = self
            .trainable()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        params.extend_from_slice(&vars);

        let h = tape.linear(x, vars[0], vars[1])?;
        let (h, s1) = tape.batchnorm(h, vars[2], vars[3], &self.bn1.stats, mode)?;
        let tp = tape.linear(temb, vars[4], vars[5])?;
        let h = tape.add(h, tp)?;
        let h = tape.relu(h);
        let h = tape.linear(h, vars[6], vars[7])?;
        let (h, s2) = tape.batchnorm(h, vars[8], vars[9], &self.bn2.stats, mode)?;
        stats.push(s1);
        stats.push(s2);
        let skip = match self.shortcut {
            Some(_) => tape.linear(x, vars[10], vars[11])?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// All weights and statistics of the vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    config: FlowNetConfig,
    pub down: Vec<ResBlock>,
    pub mid: ResBlock,
    /// `up[i]` maps back to width `w_i`; executed from `depth-1` down to 0.
    pub up: Vec<ResBlock>,
    pub out: Linear,
}

/// A forward pass recorded on a tape.
pub struct Recorded {
    pub output: Var,
    /// Parameter leaves, in [`FlowNet::trainable`] order.
    pub params: Vec<Var>,
    /// Train-mode batch statistics, one slot per batch-norm layer.
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl FlowNet {
    /// Deterministically initializes a network from `config.seed`.
    ///
    /// Linear layers use fan-in uniform init `U(-1/√in, 1/√in)` for weights
    /// and biases; batch norms start at `γ = 1, β = 0`.
    pub fn build(config: FlowNetConfig) -> Result<Self> {
        let widths = config.widths()?;
        let te = config.time_embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let down = (0..config.depth)
            .map(|i| ResBlock::init(widths[i], widths[i + 1], te, &mut rng))
            .collect();
        let bottom = widths[config.depth];
        let mid = ResBlock::init(bottom, bottom, te, &mut rng);
        let up = (0..config.depth)
            .map(|i| ResBlock::init(2 * widths[i + 1], widths[i], te, &mut rng))
            .collect();
        let out = Linear::init(config.input_dim, config.input_dim, &mut rng);
        Ok(Self {
            config,
            down,
            mid,
            up,
            out,
        })
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &ResBlock)> {
        let down = self.down.iter().enumerate().map(|(i, b)| (format!("down.{i}"), b));
        let mid = std::iter::once(("mid".to_string(), &self.mid));
        let up = self.up.iter().enumerate().map(|(i, b)| (format!("up.{i}"), b));
        down.chain(mid).chain(up)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ResBlock> {
        self.down
            .iter_mut()
            .chain(std::iter::once(&mut self.mid))
            .chain(self.up.iter_mut())
    }

    /// Trainable tensors with their names, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (prefix, block) in self.blocks() {
            for (name, t) in block.trainable() {
                v.push((format!("{prefix}.{name}"), t));
            }
        }
        v.push(("out.weight".into(), &self.out.weight));
        v.push(("out.bias".into(), &self.out.bias));
        v
    }

    /// Mutable trainable tensors, same order as [`FlowNet::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        let FlowNet {
            down, mid, up, out, ..
        } = self;
        for block in down.iter_mut().chain(std::iter::once(mid)).chain(up.iter_mut()) {
            v.extend(block.trainable_mut());
        }
        v.push(&mut out.weight);
        v.push(&mut out.bias);
        v
    }

    /// Total trainable scalar count; running statistics are not counted.
    pub fn count_params(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    fn norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut v = Vec::new();
        for (prefix, block) in self.blocks() {
            for (name, bn) in block.norms() {
                v.push((format!("{prefix}.{name}"), bn));
            }
        }
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.blocks_mut().flat_map(|b| b.norms_mut()).collect()
    }

    /// True once every batch norm has seen at least one train-mode batch.
    pub fn stats_populated(&self) -> bool {
        self.norms().iter().all(|(_, bn)| bn.stats.is_populated())
    }

    /// Every tensor, including running statistics, keyed by name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut map: BTreeMap<String, Tensor> = self
            .trainable()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (prefix, bn) in self.norms() {
            map.insert(format!("{prefix}.running_mean"), bn.stats.mean.clone());
            map.insert(format!("{prefix}.running_var"), bn.stats.var.clone());
            map.insert(
                format!("{prefix}.num_batches_tracked"),
                Tensor::scalar(bn.stats.updates as f32),
            );
        }
        map
    }

    /// Rebuilds a network from [`FlowNet::named_tensors`] output. The name
    /// set and every shape must match what `config` implies.
    pub fn from_named(config: FlowNetConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut net = FlowNet::build(config)?;
        let expected = net.named_tensors();
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Validation(format!("unexpected tensor {extra:?}")));
        }
        for (name, want) in &expected {
            let got = tensors
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing tensor {name:?}")))?;
            if got.shape() != want.shape() {
                return Err(Error::Validation(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            if !got.is_finite() {
                return Err(Error::Validation(format!("tensor {name:?} is not finite")));
            }
        }
        let names: Vec<String> = net.trainable().into_iter().map(|(n, _)| n).collect();
        for (slot, name) in net.trainable_mut().into_iter().zip(&names) {
            *slot = tensors[name].clone();
        }
        let bn_names: Vec<String> = net.norms().into_iter().map(|(n, _)| n).collect();
        for (bn, prefix) in net.norms_mut().into_iter().zip(&bn_names) {
            bn.stats.mean = tensors[&format!("{prefix}.running_mean")].clone();
            bn.stats.var = tensors[&format!("{prefix}.running_var")].clone();
            let count = tensors[&format!("{prefix}.num_batches_tracked")].data()[0];
            if count < 0.0 || count.fract() != 0.0 {
                return Err(Error::Validation(format!(
                    "{prefix}.num_batches_tracked = {count} is not a count"
                )));
            }
            bn.stats.updates = count as u64;
        }
        Ok(net)
    }

    /// Records a forward pass on `tape`. `ts` holds one time per row, or a
    /// single time shared by all rows.
    pub fn record(&self, tape: &mut Tape, ts: &[f32], z: &Tensor, mode: Mode) -> Result<Recorded> {
        let (rows, cols) = z.dims2()?;
        if cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input width {cols} does not match network width {}",
                self.config.input_dim
            )));
        }
        let times: Vec<f32> = match ts.len() {
            1 => vec![ts[0]; rows],
            n if n == rows => ts.to_vec(),
            n => {
                return Err(Error::Shape(format!(
                    "{n} time values for a batch of {rows}"
                )))
            }
        };
        let temb = nn::time_embeddings(&times, self.config.time_embed_dim)?;
        let temb = tape.constant(temb);
        let x = tape.constant(z.clone());

        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = x;
        let mut skips = Vec::with_capacity(self.down.len());
        for block in &self.down {
            h = block.record(tape, h, temb, mode, &mut params, &mut batch_stats)?;
            skips.push(h);
        }
        h = self.mid.record(tape, h, temb, mode, &mut params, &mut batch_stats)?;
        // Up blocks record in execution order but their parameters are
        // reported in storage order (up.0 first), so collect per block.
        let mut up_params: Vec<Vec<Var>> = vec![Vec::new(); self.up.len()];
        let mut up_stats: Vec<Vec<Option<BatchStats>>> = vec![Vec::new(); self.up.len()];
        for i in (0..self.up.len()).rev() {
            let joined = tape.concat_cols(h, skips[i])?;
            h = self.up[i].record(tape, joined, temb, mode, &mut up_params[i], &mut up_stats[i])?;
        }
        params.extend(up_params.into_iter().flatten());
        batch_stats.extend(up_stats.into_iter().flatten());

        let w = tape.param(self.out.weight.clone());
        let b = tape.param(self.out.bias.clone());
        params.push(w);
        params.push(b);
        let output = tape.linear(h, w, b)?;
        Ok(Recorded {
            output,
            params,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics from [`FlowNet::record`] into the
    /// running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (bn, s) in self.norms_mut().into_iter().zip(stats) {
            if let Some(s) = s {
                bn.stats.update(&s.mean, &s.var, s.batch);
            }
        }
    }

    /// Eval-mode forward pass: `v(t, z)` for every row of `z`.
    pub fn forward(&self, t: f32, z: &Tensor) -> Result<Tensor> {
        if !self.stats_populated() {
            return Err(Error::Config(
                "eval mode needs populated batch-norm running statistics".into(),
            ));
        }
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &[t], z, Mode::Eval)?;
        Ok(tape.value(rec.output).clone())
    }

    /// Forward pass in either mode. Train mode normalizes with batch
    /// statistics and updates the running statistics.
    pub fn forward_mode(&mut self, ts: &[f32], z: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval && !self.stats_populated() {
            return Err(Error::Config(
                "eval mode needs populated batch-norm running statistics".into(),
            ));
        }
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, ts, z, mode)?;
        self.apply_batch_stats(&rec.batch_stats);
        Ok(tape.value(rec.output).clone())
    }
}
