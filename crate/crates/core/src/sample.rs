//! Midpoint (RK2) integration of the learned flow from `t = 0` to `t = 1`.
//!
//! The solver state is kept in f64; the network is evaluated in f32.

use crate::error::{Error, Result};
use crate::flownet::FlowNet;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 16;

/// One midpoint step of size `h` from `(t, z)`.
pub fn midpoint_step<F>(field: &mut F, t: f64, z: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain(format!("step size {h} must be positive")));
    }
    let k1 = eval(field, t, z)?;
    let mid: Vec<f64> = z.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
    let k2 = eval(field, t + 0.5 * h, &mid)?;
    Ok(z.iter().zip(&k2).map(|(a, k)| a + h * k).collect())
}

fn eval<F>(field: &mut F, t: f64, z: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let v = field(t, z)?;
    if v.len() != z.len() {
        return Err(Error::Shape(format!(
            "field returned width {}, state has {}",
            v.len(),
            z.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(0, format!("field output not finite at t = {t}")));
    }
    Ok(v)
}

/// Integrates `dz/dt = field(t, z)` over `[0, 1]` with `steps` uniform
/// midpoint steps.
pub fn integrate<F>(mut field: F, z0: &[f64], steps: usize) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    let h = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    for n in 0..steps {
        z = midpoint_step(&mut field, n as f64 * h, &z, h).map_err(|e| match e {
            Error::Numeric { message, .. } => Error::numeric(n, message),
            other => other,
        })?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(n, "state not finite"));
        }
    }
    Ok(z)
}

/// Transports every row of `h` (`[n × d]`) through the network field.
///
/// The network runs in eval mode, so rows are independent and batching
/// them only saves work.
pub fn solve_flow_batch(net: &FlowNet, h: &Tensor, steps: usize) -> Result<Tensor> {
    let (rows, cols) = h.dims2()?;
    if cols != net.input_dim() {
        return Err(Error::Shape(format!(
            "query width {cols}, network width {}",
            net.input_dim()
        )));
    }
    if !net.stats_populated() {
        return Err(Error::Config(
            "eval mode needs populated batch-norm running statistics".into(),
        ));
    }
    let z0: Vec<f64> = h.data().iter().map(|&x| x as f64).collect();
    let field = |t: f64, z: &[f64]| -> Result<Vec<f64>> {
        let zt = Tensor::new(vec![rows, cols], z.iter().map(|&x| x as f32).collect())?;
        let v = net.forward(t as f32, &zt)?;
        Ok(v.data().iter().map(|&x| x as f64).collect())
    };
    let z = integrate(field, &z0, steps)?;
    Tensor::new(vec![rows, cols], z.into_iter().map(|x| x as f32).collect())
}

/// `d̂ = z(1)` for a single query state `h_q`.
pub fn solve_flow(net: &FlowNet, h_q: &Tensor, steps: usize) -> Result<Tensor> {
    if h_q.rank() != 1 {
        return Err(Error::Shape(format!("expected a vector, got {:?}", h_q.shape())));
    }
    let out = solve_flow_batch(net, &h_q.clone().reshape(vec![1, h_q.len()])?, steps)?;
    out.reshape(vec![h_q.len()])
}
