//! Training pairs and the rectified-flow training loop.
//!
//! Each pair couples a query representation `h` with its correction vector
//! `d`. The network learns the constant velocity `d − h` of the straight path
//! `z_t = t·d + (1 − t)·h`, with `t ~ U[0, 1]` drawn independently per sample.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flownet::{FlowNet, FlowNetConfig};
use crate::nn::Mode;
use crate::optim::{adamw_step, cosine_warmup_lr, AdamWConfig, OptimState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPair {
    pub query_id: u64,
    /// Last-token hidden state of the query.
    pub h_q: Tensor,
    /// Truthful correction vector.
    pub d_q: Tensor,
}

impl DirectionPair {
    pub fn new(query_id: u64, h_q: Tensor, d_q: Tensor) -> Result<Self> {
        if h_q.rank() != 1 || h_q.shape() != d_q.shape() {
            return Err(Error::Shape(format!(
                "pair {query_id}: h {:?} and d {:?} must be equal-width vectors",
                h_q.shape(),
                d_q.shape()
            )));
        }
        if !h_q.is_finite() || !d_q.is_finite() {
            return Err(Error::Validation(format!("pair {query_id} is not finite")));
        }
        Ok(Self { query_id, h_q, d_q })
    }

    pub fn dim(&self) -> usize {
        self.h_q.len()
    }
}

/// `h̄_c − h̄_i`.
pub fn make_direction(h_bar_c: &Tensor, h_bar_i: &Tensor) -> Result<Tensor> {
    if h_bar_c.rank() != 1 {
        return Err(Error::Shape(format!(
            "expected vectors, got {:?}",
            h_bar_c.shape()
        )));
    }
    h_bar_c.sub(h_bar_i)
}

/// Mean over the token axis of a `[T × d]` block of hidden states.
pub fn average_hidden(states: &Tensor) -> Result<Tensor> {
    let (t, d) = states.dims2()?;
    if t == 0 {
        return Err(Error::EmptyDataset("no tokens to average".into()));
    }
    let mut acc = vec![0.0f64; d];
    for i in 0..t {
        for (a, &v) in acc.iter_mut().zip(states.row(i)) {
            *a += v as f64;
        }
    }
    Ok(Tensor::vector(
        acc.iter().map(|&a| (a / t as f64) as f32).collect(),
    ))
}

/// `z_t = t·d + (1 − t)·h`.
pub fn interpolate(h: &Tensor, d: &Tensor, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    if h.shape() != d.shape() {
        return Err(Error::Shape(format!(
            "interpolate: {:?} vs {:?}",
            h.shape(),
            d.shape()
        )));
    }
    let (t64, s64) = (t as f64, 1.0 - t as f64);
    Ok(Tensor::vector(
        h.data()
            .iter()
            .zip(d.data())
            .map(|(&a, &b)| (t64 * b as f64 + s64 * a as f64) as f32)
            .collect(),
    ))
}

/// Interpolated inputs `[B × d]` and velocity targets `d − h` for a batch.
fn batch_tensors(batch: &[&DirectionPair], ts: &[f32]) -> Result<(Tensor, Tensor)> {
    if batch.len() != ts.len() {
        return Err(Error::Shape(format!(
            "{} pairs but {} time values",
            batch.len(),
            ts.len()
        )));
    }
    let mut z = Vec::with_capacity(batch.len());
    let mut u = Vec::with_capacity(batch.len());
    for (p, &t) in batch.iter().zip(ts) {
        z.push(interpolate(&p.h_q, &p.d_q, t)?.into_data());
        u.push(p.d_q.sub(&p.h_q)?.into_data());
    }
    Ok((Tensor::from_rows(&z)?, Tensor::from_rows(&u)?))
}

/// Mean over the batch of `‖(d − h) − v(t, z_t)‖²` for an arbitrary field
/// `v(ts, z)` evaluated on the whole batch.
pub fn flow_matching_loss_with<F>(field: F, batch: &[DirectionPair], ts: &[f32]) -> Result<f64>
where
    F: FnOnce(&[f32], &Tensor) -> Result<Tensor>,
{
    let refs: Vec<&DirectionPair> = batch.iter().collect();
    let (z, u) = batch_tensors(&refs, ts)?;
    let v = field(ts, &z)?;
    if v.shape() != u.shape() {
        return Err(Error::Shape(format!(
            "field returned {:?}, expected {:?}",
            v.shape(),
            u.shape()
        )));
    }
    let total: f64 = v
        .data()
        .iter()
        .zip(u.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Flow-matching loss of `net` in train mode. Running statistics are left
/// untouched.
pub fn flow_matching_loss(net: &FlowNet, batch: &[DirectionPair], ts: &[f32]) -> Result<f64> {
    let refs: Vec<&DirectionPair> = batch.iter().collect();
    let (z, u) = batch_tensors(&refs, ts)?;
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, ts, &z, Mode::Train)?;
    let target = tape.constant(u);
    let loss = tape.mean_row_sq_error(rec.output, target)?;
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 136,
            base_lr: 1e-4,
            warmup_steps: 100,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Shuffled index batches covering one epoch. A trailing batch of one
/// sample is dropped because train-mode batch norm cannot use it.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if batch_size < 2 {
        return 0;
    }
    n / batch_size + usize::from(n % batch_size >= 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Builds a network from `net_config` and trains it on `dataset`.
pub fn train(
    dataset: &[DirectionPair],
    net_config: FlowNetConfig,
    config: &TrainConfig,
) -> Result<(FlowNet, TrainReport)> {
    let mut net = FlowNet::build(net_config)?;
    let report = train_net(&mut net, dataset, config)?;
    Ok((net, report))
}

/// Trains an existing network in place.
///
/// Runs `epochs` full shuffled passes; every step draws one `t` per sample
/// and takes an AdamW step at the cosine-warmup learning rate.
pub fn train_net(
    net: &mut FlowNet,
    dataset: &[DirectionPair],
    config: &TrainConfig,
) -> Result<TrainReport> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let dim = net.input_dim();
    if let Some(p) = dataset.iter().find(|p| p.dim() != dim) {
        return Err(Error::Shape(format!(
            "pair {} has width {}, network expects {dim}",
            p.query_id,
            p.dim()
        )));
    }
    if config.batch_size == 0 || config.batch_size > n {
        return Err(Error::Config(format!(
            "batch size {} must be in 1..={n}",
            config.batch_size
        )));
    }
    let per_epoch = batches_per_epoch(n, config.batch_size);
    if per_epoch == 0 {
        return Err(Error::DegenerateBatch(format!(
            "batch size {} over {n} pairs leaves no batch of at least 2",
            config.batch_size
        )));
    }
    let total = (config.epochs * per_epoch) as u64;
    let warmup = config.warmup_steps.min(total);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = {
        let params: Vec<&Tensor> = net.trainable().into_iter().map(|(_, t)| t).collect();
        OptimState::new(&params, config.adamw)
    };
    let mut report = TrainReport::default();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let mut epoch_total = 0.0;
        let batches = epoch_batches(n, config.batch_size, &mut rng);
        for idx in &batches {
            let pairs: Vec<&DirectionPair> = idx.iter().map(|&i| &dataset[i]).collect();
            let ts: Vec<f32> = (0..pairs.len()).map(|_| rng.random::<f32>()).collect();
            let (z, u) = batch_tensors(&pairs, &ts)?;

            let mut tape = Tape::new();
            let rec = net.record(&mut tape, &ts, &z, Mode::Train)?;
            let target = tape.constant(u);
            let loss_var = tape.mean_row_sq_error(rec.output, target)?;
            let loss = tape.scalar(loss_var);
            if !loss.is_finite() {
                return Err(Error::numeric(step as usize, format!("loss is {loss}")));
            }
            let grads = tape.backward(loss_var).map_err(|e| match e {
                Error::Numeric { message, .. } => Error::numeric(step as usize, message),
                other => other,
            })?;
            let grads: Vec<Tensor> = rec
                .params
                .iter()
                .map(|&v| grads.get_or_zeros(v, tape.value(v)))
                .collect();

            let lr = cosine_warmup_lr(step, warmup, total, config.base_lr)?;
            net.apply_batch_stats(&rec.batch_stats);
            adamw_step(&mut net.trainable_mut(), &grads, &mut state, lr)?;
            if let Some((name, _)) = net.trainable().into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::numeric(
                    step as usize,
                    format!("parameter {name} became non-finite"),
                ));
            }

            report.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
            });
            epoch_total += loss;
            step += 1;
        }
        report.epoch_losses.push(epoch_total / batches.len() as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn v(x: &[f32]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn direction_cases() {
        let a = v(&[1.0, 2.0]);
        assert_eq!(make_direction(&a, &a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(make_direction(&a, &v(&[0.0, 1.0])).unwrap().data(), &[1.0, 1.0]);
        let b = v(&[0.5, -3.0]);
        assert_eq!(
            make_direction(&a, &b).unwrap(),
            make_direction(&b, &a).unwrap().scale(-1.0)
        );
        assert!(matches!(make_direction(&a, &v(&[1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn average_cases() {
        let one = Tensor::from_rows(&[[3.0, -1.0]]).unwrap();
        assert_eq!(average_hidden(&one).unwrap().data(), &[3.0, -1.0]);
        let two = Tensor::from_rows(&[[0.0, 0.0], [2.0, 4.0]]).unwrap();
        assert_eq!(average_hidden(&two).unwrap().data(), &[1.0, 2.0]);
        let swapped = Tensor::from_rows(&[[2.0, 4.0], [0.0, 0.0]]).unwrap();
        assert_eq!(average_hidden(&swapped).unwrap(), average_hidden(&two).unwrap());
        let empty = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(matches!(average_hidden(&empty), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn interpolate_cases() {
        let h = v(&[0.0, 0.0]);
        let d = v(&[2.0, 4.0]);
        assert_eq!(interpolate(&h, &d, 0.0).unwrap(), h);
        assert_eq!(interpolate(&h, &d, 1.0).unwrap(), d);
        assert_eq!(interpolate(&h, &d, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(matches!(interpolate(&h, &d, 1.01), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_of_zero_field_by_hand() {
        let pair = DirectionPair::new(0, v(&[0.0]), v(&[1.0])).unwrap();
        let loss = flow_matching_loss_with(|_, z| Ok(Tensor::zeros(z.shape())), &[pair], &[0.3]).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn loss_of_exact_field_is_zero() {
        let pairs = vec![
            DirectionPair::new(0, v(&[0.0, 1.0]), v(&[1.0, 3.0])).unwrap(),
            DirectionPair::new(1, v(&[2.0, 1.0]), v(&[-1.0, 0.0])).unwrap(),
        ];
        let exact = Tensor::from_rows(&[[1.0, 2.0], [-3.0, -1.0]]).unwrap();
        let loss = flow_matching_loss_with(|_, _| Ok(exact), &pairs, &[0.2, 0.9]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn net_loss_matches_generic_loss() {
        let mut cfg = FlowNetConfig::new(4);
        cfg.depth = 1;
        cfg.time_embed_dim = 8;
        let net = FlowNet::build(cfg).unwrap();
        let pairs: Vec<DirectionPair> = (0..5)
            .map(|i| {
                let f = i as f32;
                DirectionPair::new(i, v(&[f, -f, 0.5, 1.0]), v(&[1.0, f * 0.3, 2.0, -f])).unwrap()
            })
            .collect();
        let ts = [0.1, 0.4, 0.5, 0.7, 0.95];
        let direct = flow_matching_loss(&net, &pairs, &ts).unwrap();
        let mut copy = net.clone();
        let generic =
            flow_matching_loss_with(|ts, z| copy.forward_mode(ts, z, Mode::Train), &pairs, &ts).unwrap();
        assert!(direct >= 0.0);
        assert!((direct - generic).abs() < 1e-4 * direct.max(1.0));
    }

    #[test]
    fn epochs_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let batches = epoch_batches(10, 4, &mut rng);
            let seen: Vec<usize> = batches.iter().flatten().copied().collect();
            assert_eq!(seen.len(), 10);
            assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>().len(), 10);
        }
        // 9 = 4 + 4 + 1: the single leftover is dropped
        let batches = epoch_batches(9, 4, &mut rng);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches_per_epoch(9, 4), 2);
        assert_eq!(batches_per_epoch(10, 4), 3);
    }

    fn offset_pairs(n: usize, dim: usize) -> Vec<DirectionPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n as u64)
            .map(|i| {
                let h: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d: Vec<f32> = h.iter().map(|x| x + 0.5).collect();
                DirectionPair::new(i, Tensor::vector(h), Tensor::vector(d)).unwrap()
            })
            .collect()
    }

    fn tiny_config(dim: usize) -> FlowNetConfig {
        FlowNetConfig {
            input_dim: dim,
            depth: 1,
            feature_scale: 0.5,
            time_embed_dim: 8,
            seed: 3,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = offset_pairs(8, 4);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            ..Default::default()
        };
        let (net, report) = train(&data, tiny_config(4), &cfg).unwrap();
        assert_eq!(net, FlowNet::build(tiny_config(4)).unwrap());
        assert!(report.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = offset_pairs(12, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            warmup_steps: 2,
            base_lr: 1e-3,
            ..Default::default()
        };
        let (a, ra) = train(&data, tiny_config(4), &cfg).unwrap();
        let (b, rb) = train(&data, tiny_config(4), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.steps, rb.steps);
        // 12 = 5 + 5 + 2, three steps per epoch
        assert_eq!(ra.steps.len(), 9);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let data = offset_pairs(6, 4);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&[], tiny_config(4), &cfg), Err(Error::EmptyDataset(_))));
        assert!(matches!(train(&data, tiny_config(5), &cfg), Err(Error::Shape(_))));
        let big = TrainConfig {
            batch_size: 7,
            ..cfg.clone()
        };
        assert!(matches!(train(&data, tiny_config(4), &big), Err(Error::Config(_))));
        assert!(matches!(
            train(&data[..1], tiny_config(4), &TrainConfig { batch_size: 1, ..cfg }),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut data = offset_pairs(6, 4);
        data[2].d_q.data_mut()[0] = 1e30;
        data[3].h_q.data_mut()[0] = -1e30;
        let cfg = TrainConfig {
            batch_size: 6,
            epochs: 1,
            ..Default::default()
        };
        match train(&data, tiny_config(4), &cfg) {
            Err(Error::Numeric { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
