//! Seeded synthetic direction-pair datasets with known transport targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::DirectionPair;

/// Offset-mode values are multiples of `QUANTUM` no larger than `MAX_ABS`,
/// so `h + c` stays below 2^11 and is exact in f32.
pub const QUANTUM: f32 = 1.0 / 4096.0;
pub const MAX_ABS: f32 = 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SynthSpec {
    /// `h ~ N(0, σ²I)`, `d = h + offset`.
    Offset {
        count: usize,
        offset: Vec<f32>,
        source_std: f32,
    },
    /// Independent coupling of `h ~ N(μ_s, σ_s²I)` and `d ~ N(μ_t, σ_t²I)`.
    Gaussian {
        count: usize,
        source_mean: Vec<f32>,
        source_std: f32,
        target_mean: Vec<f32>,
        target_std: f32,
    },
}

impl SynthSpec {
    pub fn dim(&self) -> usize {
        match self {
            SynthSpec::Offset { offset, .. } => offset.len(),
            SynthSpec::Gaussian { source_mean, .. } => source_mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, s: f32| {
            if s.is_finite() && s > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {s}")))
            }
        };
        let finite = |name: &str, v: &[f32]| {
            if v.is_empty() {
                Err(Error::Config(format!("{name} must be non-empty")))
            } else if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite")))
            }
        };
        match self {
            SynthSpec::Offset {
                count,
                offset,
                source_std,
            } => {
                nonzero(*count)?;
                finite("offset", offset)?;
                positive("source_std", *source_std)?;
                if offset.iter().any(|x| x.abs() > MAX_ABS) {
                    return Err(Error::Config(format!("offset entries must be at most {MAX_ABS} in magnitude")));
                }
            }
            SynthSpec::Gaussian {
                count,
                source_mean,
                source_std,
                target_mean,
                target_std,
            } => {
                nonzero(*count)?;
                finite("source_mean", source_mean)?;
                finite("target_mean", target_mean)?;
                positive("source_std", *source_std)?;
                positive("target_std", *target_std)?;
                if source_mean.len() != target_mean.len() {
                    return Err(Error::Config(format!(
                        "source mean has {} entries, target mean {}",
                        source_mean.len(),
                        target_mean.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn nonzero(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    Ok(())
}

pub fn quantize(x: f32) -> f32 {
    (x / QUANTUM).round() * QUANTUM
}

fn gaussian(rng: &mut ChaCha8Rng, mean: &[f32], std: f32) -> Vec<f32> {
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    mean.iter().map(|&m| m + std * unit.sample(rng)).collect()
}

/// Pairs with ids `0..count`. Same spec and seed give identical output.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<DirectionPair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        SynthSpec::Offset {
            count,
            offset,
            source_std,
        } => {
            let c: Vec<f32> = offset.iter().map(|&x| quantize(x)).collect();
            let zero = vec![0.0; c.len()];
            (0..*count as u64)
                .map(|id| {
                    let h: Vec<f32> = gaussian(&mut rng, &zero, *source_std)
                        .into_iter()
                        .map(|x| quantize(x.clamp(-MAX_ABS, MAX_ABS)))
                        .collect();
                    let d: Vec<f32> = h.iter().zip(&c).map(|(a, b)| a + b).collect();
                    DirectionPair::new(id, Tensor::vector(h), Tensor::vector(d))
                })
                .collect()
        }
        SynthSpec::Gaussian {
            count,
            source_mean,
            source_std,
            target_mean,
            target_std,
        } => (0..*count as u64)
            .map(|id| {
                let h = gaussian(&mut rng, source_mean, *source_std);
                let d = gaussian(&mut rng, target_mean, *target_std);
                DirectionPair::new(id, Tensor::vector(h), Tensor::vector(d))
            })
            .collect(),
    }
}

/// Held-out query states drawn from the source distribution of `spec`,
/// as the rows of `[count × d]`.
pub fn source_queries(spec: &SynthSpec, count: usize, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    nonzero(count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mean, std) = match spec {
        SynthSpec::Offset { offset, source_std, .. } => (vec![0.0; offset.len()], *source_std),
        SynthSpec::Gaussian {
            source_mean,
            source_std,
            ..
        } => (source_mean.clone(), *source_std),
    };
    let rows: Vec<Vec<f32>> = (0..count).map(|_| gaussian(&mut rng, &mean, std)).collect();
    Tensor::from_rows(&rows)
}
