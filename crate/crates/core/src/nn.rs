//! Layer primitives used by the flow network: linear, batch norm, ReLU and
//! the sinusoidal time embedding.
//!
//! These are the eager (no-gradient) forms. The [`crate::autodiff::Tape`]
//! records the same kernels and adds their backward rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Multiplier applied to `t ∈ [0, 1]` before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;
const FREQ_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batch-norm statistics.
///
/// `updates` counts train-mode batches folded in; zero means the stats are
/// still at their initial values (mean 0, variance 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub updates: u64,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[features]),
            var: Tensor::full(&[features], 1.0),
            updates: 0,
        }
    }

    pub fn is_populated(&self) -> bool {
        self.updates > 0
    }

    /// Folds one batch's biased mean/variance into the running estimates,
    /// using the unbiased variance as the running target.
    pub(crate) fn update(&mut self, batch_mean: &[f32], batch_var: &[f32], batch: usize) {
        let m = BN_MOMENTUM;
        let unbias = batch as f32 / (batch as f32 - 1.0);
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        self.updates += 1;
    }
}

/// `y = x·W + b` applied row-wise.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, out) = w.dims2()?;
    if b.shape() != [out] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match output width {out}",
            b.shape()
        )));
    }
    let mut y = x.matmul(w)?;
    let bias = b.data();
    for row in y.data_mut().chunks_mut(out) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Intermediate values a batch-norm backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    /// Biased batch statistics in train mode.
    pub batch: Option<(Vec<f32>, Vec<f32>)>,
}

pub(crate) fn batchnorm_kernel(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    mode: Mode,
) -> Result<(Tensor, BnSaved)> {
    let (n, f) = x.dims2()?;
    for (name, p) in [("gamma", gamma), ("beta", beta), ("running mean", &stats.mean)] {
        if p.shape() != [f] {
            return Err(Error::Shape(format!(
                "batch norm {name} shape {:?} does not match {f} features",
                p.shape()
            )));
        }
    }
    let xs = x.data();
    let (mean, var, batch) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "train-mode batch norm needs at least 2 rows, got {n}"
                )));
            }
            let mut mean = vec![0.0f64; f];
            for row in xs.chunks(f) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0f64; f];
            for row in xs.chunks(f) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v as f64 - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
            let var32: Vec<f32> = var.iter().map(|&v| v as f32).collect();
            (mean, var, Some((mean32, var32)))
        }
        Mode::Eval => (
            stats.mean.data().iter().map(|&v| v as f64).collect(),
            stats.var.data().iter().map(|&v| v as f64).collect(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v + BN_EPS as f64).sqrt())
        .collect();
    let mut xhat = vec![0.0f32; n * f];
    let mut y = vec![0.0f32; n * f];
    let (g, b) = (gamma.data(), beta.data());
    for (i, row) in xs.chunks(f).enumerate() {
        for j in 0..f {
            let h = ((row[j] as f64 - mean[j]) * inv_std[j]) as f32;
            xhat[i * f + j] = h;
            y[i * f + j] = g[j] * h + b[j];
        }
    }
    Ok((
        Tensor::new(vec![n, f], y)?,
        BnSaved {
            xhat: Tensor::new(vec![n, f], xhat)?,
            inv_std: inv_std.iter().map(|&v| v as f32).collect(),
            batch,
        },
    ))
}

/// Batch normalization over the rows of `x`.
///
/// Train mode normalizes with the batch statistics and folds them into
/// `stats`; eval mode normalizes with `stats` and leaves them untouched.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Tensor> {
    let (y, saved) = batchnorm_kernel(x, gamma, beta, stats, mode)?;
    if let Some((mean, var)) = &saved.batch {
        stats.update(mean, var, x.dims2()?.0);
    }
    Ok(y)
}

/// Sinusoidal embedding of `t ∈ [0, 1]`.
///
/// With `s = 1000·t` and `ω_i = 10000^(-2i/dim)`, component `2i` is
/// `sin(s·ω_i)` and component `2i+1` is `cos(s·ω_i)`.
pub fn time_embedding(t: f32, dim: usize) -> Result<Tensor> {
    let mut out = vec![0.0f32; dim];
    write_time_embedding(t, dim, &mut out)?;
    Ok(Tensor::vector(out))
}

/// One embedding row per time value: `[ts.len() × dim]`.
pub fn time_embeddings(ts: &[f32], dim: usize) -> Result<Tensor> {
    let mut out = vec![0.0f32; ts.len() * dim];
    for (&t, row) in ts.iter().zip(out.chunks_mut(dim.max(1))) {
        write_time_embedding(t, dim, row)?;
    }
    if ts.is_empty() {
        check_embed_dim(dim)?;
    }
    Tensor::new(vec![ts.len(), dim], out)
}

fn check_embed_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    Ok(())
}

fn write_time_embedding(t: f32, dim: usize, out: &mut [f32]) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    check_embed_dim(dim)?;
    let s = TIME_SCALE * t as f64;
    for i in 0..dim / 2 {
        let omega = FREQ_BASE.powf(-2.0 * i as f64 / dim as f64);
        out[2 * i] = (s * omega).sin() as f32;
        out[2 * i + 1] = (s * omega).cos() as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_weights() {
        let y = linear_forward(
            &m(&[&[1.0, 2.0]]),
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias() {
        let y = linear_forward(
            &m(&[&[0.0, 0.0]]),
            &m(&[&[0.3, -7.0], &[2.5, 1.0]]),
            &Tensor::vector(vec![3.0, 4.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_product() {
        let y = linear_forward(
            &m(&[&[1.0, 1.0]]),
            &m(&[&[2.0, 0.0], &[0.0, 3.0]]),
            &Tensor::vector(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let err = linear_forward(
            &m(&[&[1.0, 1.0, 1.0]]),
            &m(&[&[2.0, 0.0], &[0.0, 3.0]]),
            &Tensor::vector(vec![1.0, 1.0]),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&Tensor::vector(vec![-1.0, -5.0])).data(), &[0.0, 0.0]);
        assert_eq!(relu(&Tensor::vector(vec![3.5])).data(), &[3.5]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let rows: Vec<Vec<f32>> = (0..32)
            .map(|i| vec![i as f32 * 0.7 - 3.0, ((i * 7) % 11) as f32 + 100.0])
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let mut stats = RunningStats::new(2);
        let y = batchnorm_forward(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..32).map(|i| y.row(i)[j] as f64).collect();
            let mean = col.iter().sum::<f64>() / 32.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert_eq!(stats.updates, 1);
    }

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let x = m(&[&[5.0], &[5.0], &[5.0]]);
        let mut stats = RunningStats::new(1);
        let y = batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_eval_by_hand() {
        // 2 · (1 - 0) / sqrt(1 + 1e-5) + 1
        let expected = 2.0 / (1.0f64 + 1e-5).sqrt() + 1.0;
        let mut stats = RunningStats::new(1);
        let y = batchnorm_forward(
            &m(&[&[1.0]]),
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 1.0),
            &mut stats,
            Mode::Eval,
        )
        .unwrap();
        assert!((y.data()[0] as f64 - expected).abs() < 1e-6);
        assert_eq!(stats.updates, 0);
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut stats = RunningStats::new(1);
        let err = batchnorm_forward(
            &m(&[&[1.0]]),
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut stats,
            Mode::Train,
        );
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn running_stats_momentum() {
        let mut stats = RunningStats::new(1);
        let x = m(&[&[0.0], &[2.0]]);
        batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        // batch mean 1, unbiased var 2
        assert!((stats.mean.data()[0] - 0.1).abs() < 1e-7);
        assert!((stats.var.data()[0] - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0.0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e.data()[2 * i], 0.0);
            assert_eq!(e.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn time_embedding_length_and_value() {
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(time_embedding(t, 128).unwrap().len(), 128);
        }
        let e = time_embedding(0.001, 2).unwrap();
        assert!((e.data()[0] - 0.84147).abs() < 1e-5);
        assert!((e.data()[1] - 0.54030).abs() < 1e-5);
    }

    #[test]
    fn time_embedding_errors() {
        assert!(matches!(time_embedding(1.5, 4), Err(Error::Domain(_))));
        assert!(matches!(time_embedding(-0.1, 4), Err(Error::Domain(_))));
        assert!(matches!(time_embedding(0.5, 3), Err(Error::Shape(_))));
    }
}
