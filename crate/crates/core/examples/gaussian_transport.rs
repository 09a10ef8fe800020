//! Transports N(0, I) onto N(μ, I) under an independent coupling and
//! reports the endpoint mean.
//!
//! `cargo run --release --example gaussian_transport [epochs]`

use repflow::flownet::FlowNetConfig;
use repflow::sample::solve_flow_batch;
use repflow::synth::{self, SynthSpec};
use repflow::train::{train, TrainConfig};

fn main() -> repflow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(200, |a| a.parse().expect("epochs"));
    let spec = SynthSpec::Gaussian {
        count: 2048,
        source_mean: vec![0.0, 0.0],
        source_std: 1.0,
        target_mean: vec![3.0, 4.0],
        target_std: 1.0,
    };
    let pairs = synth::generate(&spec, 0)?;
    let config = TrainConfig {
        epochs,
        ..Default::default()
    };
    let (net, report) = train(&pairs, FlowNetConfig::new(2), &config)?;
    println!("final epoch loss {:.4}", report.epoch_losses.last().unwrap());

    let n = 4096;
    let out = solve_flow_batch(&net, &synth::source_queries(&spec, n, 1)?, 16)?;
    let out = &out;
    let column = |j: usize| (0..n).map(move |i| out.row(i)[j] as f64);
    let mean = [0, 1].map(|j| column(j).sum::<f64>() / n as f64);
    let var = [0, 1].map(|j| column(j).map(|x| (x - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64);
    println!("endpoint mean [{:.3}, {:.3}], variance [{:.3}, {:.3}]", mean[0], mean[1], var[0], var[1]);
    Ok(())
}
