//! The file-level workflow: synthesize pairs, train, emit correction
//! vectors with their intervention sidecar, and summarize the geometry.

use repflow::flownet::FlowNetConfig;
use repflow::geometry::GridSpec;
use repflow::pipeline::{self, DirectionsArgs};
use repflow::synth::SynthSpec;
use repflow::train::TrainConfig;

fn main() -> repflow::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let spec = SynthSpec::Offset {
        count: 128,
        offset: vec![1.0, -1.0, 0.5, 2.0],
        source_std: 1.0,
    };
    let pairs = root.join("pairs.thfl");
    let queries = root.join("queries.thfl");
    pipeline::cmd_synth(&spec, 0, 14, &pairs, Some((16, &queries)))?;

    let model = root.join("model");
    let train = TrainConfig {
        epochs: 20,
        batch_size: 16,
        ..Default::default()
    };
    let outcome = pipeline::cmd_train(&pairs, &model, FlowNetConfig::new(4), train)?;
    println!(
        "trained {} steps, final epoch loss {:.4}",
        outcome.manifest.steps,
        outcome.manifest.final_epoch_loss.unwrap_or(f64::NAN)
    );

    let vectors = root.join("vectors.thfl");
    let args = DirectionsArgs {
        states: queries.clone(),
        params: model.join(pipeline::FLOWNET_PREFIX),
        basis: Some(model.join(pipeline::BASIS_PREFIX)),
        k: 2,
        alpha: 1.0,
        layer: None,
        steps: 16,
        out: vectors.clone(),
        sidecar: root.join("vectors.spec.json"),
    };
    let bundle = pipeline::cmd_directions(&args)?;
    println!("{} correction vectors for layer {}", bundle.records.len(), bundle.layer);
    println!("{}", std::fs::read_to_string(&args.sidecar).expect("sidecar").lines().take(6).collect::<Vec<_>>().join("\n"));

    let summary = pipeline::cmd_geometry(&queries, &vectors, &GridSpec::default(), &root.join("geometry"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("{}", serde_json::to_string_pretty(&pipeline::cmd_validate(&vectors)?)?);
    Ok(())
}
