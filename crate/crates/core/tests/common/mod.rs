//! Independent f64 re-implementation of the flow network's train-mode loss,
//! written directly from the layer definitions. Used as the finite-difference
//! oracle for the tape gradients.

#![allow(dead_code)]

use std::collections::BTreeMap;

use repflow::flownet::FlowNet;

const EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct RefNet {
    pub params: BTreeMap<String, Vec<f64>>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub depth: usize,
    pub time_dim: usize,
}

/// What one loss evaluation saw: the loss and the sign of every ReLU input.
pub struct Eval {
    pub loss: f64,
    pub relu_signs: Vec<bool>,
}

impl RefNet {
    pub fn from_flownet(net: &FlowNet) -> Self {
        let mut params = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for (name, t) in net.trainable() {
            params.insert(name.clone(), t.data().iter().map(|&x| x as f64).collect());
            shapes.insert(name, t.shape().to_vec());
        }
        Self {
            params,
            shapes,
            depth: net.config().depth,
            time_dim: net.config().time_embed_dim,
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params[name]
    }

    fn linear(&self, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
        let shape = &self.shapes[&format!("{prefix}.weight")];
        let (rows, cols) = (shape[0], shape[1]);
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        x.iter()
            .map(|xi| {
                assert_eq!(xi.len(), rows);
                (0..cols)
                    .map(|j| b[j] + (0..rows).map(|i| xi[i] * w[i * cols + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn batchnorm(&self, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
        let n = x.len() as f64;
        let f = x[0].len();
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        let mut out = vec![vec![0.0; f]; x.len()];
        for j in 0..f {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            for (o, r) in out.iter_mut().zip(x) {
                o[j] = g[j] * (r[j] - mean) / (var + EPS).sqrt() + b[j];
            }
        }
        out
    }

    fn block(&self, x: &[Vec<f64>], temb: &[Vec<f64>], prefix: &str, signs: &mut Vec<bool>) -> Vec<Vec<f64>> {
        let h = self.linear(x, &format!("{prefix}.lin1"));
        let h = self.batchnorm(&h, &format!("{prefix}.bn1"));
        let tp = self.linear(temb, &format!("{prefix}.time"));
        let h: Vec<Vec<f64>> = h
            .iter()
            .zip(&tp)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| {
                        let pre = p + q;
                        signs.push(pre > 0.0);
                        pre.max(0.0)
                    })
                    .collect()
            })
            .collect();
        let h = self.linear(&h, &format!("{prefix}.lin2"));
        let h = self.batchnorm(&h, &format!("{prefix}.bn2"));
        let skip = if self.params.contains_key(&format!("{prefix}.shortcut.weight")) {
            self.linear(x, &format!("{prefix}.shortcut"))
        } else {
            x.to_vec()
        };
        h.iter()
            .zip(&skip)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn forward(&self, ts: &[f32], z: &[Vec<f64>], signs: &mut Vec<bool>) -> Vec<Vec<f64>> {
        let temb: Vec<Vec<f64>> = ts.iter().map(|&t| embedding(t, self.time_dim)).collect();
        let mut h = z.to_vec();
        let mut skips = Vec::new();
        for i in 0..self.depth {
            h = self.block(&h, &temb, &format!("down.{i}"), signs);
            skips.push(h.clone());
        }
        h = self.block(&h, &temb, "mid", signs);
        for i in (0..self.depth).rev() {
            let joined: Vec<Vec<f64>> = h
                .iter()
                .zip(&skips[i])
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect();
            h = self.block(&joined, &temb, &format!("up.{i}"), signs);
        }
        self.linear(&h, "out")
    }

    /// Mean over rows of `‖u − v(t, z)‖²`.
    pub fn loss(&self, ts: &[f32], z: &[Vec<f64>], u: &[Vec<f64>]) -> Eval {
        let mut relu_signs = Vec::new();
        let v = self.forward(ts, z, &mut relu_signs);
        let total: f64 = v
            .iter()
            .zip(u)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
            .sum();
        Eval {
            loss: total / z.len() as f64,
            relu_signs,
        }
    }
}

/// Sinusoidal embedding of `1000·t`, rounded to f32 as the network sees it.
pub fn embedding(t: f32, dim: usize) -> Vec<f64> {
    let s = 1000.0 * t as f64;
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out[2 * i] = (s * w).sin() as f32 as f64;
        out[2 * i + 1] = (s * w).cos() as f32 as f64;
    }
    out
}
