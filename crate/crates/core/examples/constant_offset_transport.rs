//! Learns the flow for `d = h + c` and checks that transported held-out
//! queries move by `c`.
//!
//! `cargo run --release --example constant_offset_transport [epochs]`

use repflow::flownet::FlowNetConfig;
use repflow::sample::solve_flow_batch;
use repflow::synth::{self, SynthSpec};
use repflow::train::{train, TrainConfig};

fn main() -> repflow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(200, |a| a.parse().expect("epochs"));
    let c = vec![1.5, -0.75, 0.5, 2.0, -1.0, 0.25, 1.0, -2.0];
    let spec = SynthSpec::Offset {
        count: 256,
        offset: c.clone(),
        source_std: 1.0,
    };
    let pairs = synth::generate(&spec, 0)?;
    let config = TrainConfig {
        epochs,
        batch_size: 2,
        ..Default::default()
    };
    let (net, report) = train(&pairs, FlowNetConfig::new(c.len()), &config)?;
    println!(
        "{} steps, epoch loss {:.4} -> {:.4}",
        report.steps.len(),
        report.epoch_losses[0],
        report.epoch_losses.last().unwrap()
    );

    let queries = synth::source_queries(&spec, 100, 1)?;
    let out = solve_flow_batch(&net, &queries, 16)?;
    let c_norm = c.iter().map(|x: &f32| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let within = (0..100)
        .filter(|&i| {
            let gap: f64 = out
                .row(i)
                .iter()
                .zip(queries.row(i))
                .zip(&c)
                .map(|((&o, &h), &ci)| (o as f64 - h as f64 - ci as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            gap <= 0.05 * c_norm
        })
        .count();
    println!("{within}/100 held-out queries moved within 5% of c");
    Ok(())
}
