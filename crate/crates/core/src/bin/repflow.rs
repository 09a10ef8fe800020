use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use repflow::flownet::FlowNetConfig;
use repflow::geometry::GridSpec;
use repflow::pipeline::{self, DirectionsArgs};
use repflow::sample::DEFAULT_STEPS;
use repflow::synth::SynthSpec;
use repflow::train::TrainConfig;
use repflow::{Error, Result};

#[derive(Parser)]
#[command(name = "repflow", version, about = "Train flow-based correction vectors and score interventions")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for data generation, initialization and batch order.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Transformer layer index recorded in emitted bundles.
    #[arg(long, global = true)]
    layer: Option<u32>,
    /// Intervention strength recorded in the directions sidecar.
    #[arg(long, global = true, default_value_t = 1.0)]
    alpha: f64,
    /// Basis vectors used for projection; 0 disables projection.
    #[arg(long, global = true, default_value_t = 10)]
    topk: usize,
    /// Midpoint steps for the ODE solve.
    #[arg(long, global = true, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, global = true, default_value_t = 25)]
    epochs: usize,
    #[arg(long = "batch-size", global = true, default_value_t = 136)]
    batch_size: usize,
    #[arg(long, global = true, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, global = true, default_value_t = 100)]
    warmup: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Offset,
    Gaussian,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic direction-pair bundle.
    Synth {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        count: usize,
        /// Offset mode: comma-separated offset vector.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        offset: Vec<f32>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        source_mean: Vec<f32>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        target_mean: Vec<f32>,
        #[arg(long, default_value_t = 1.0)]
        source_std: f32,
        #[arg(long, default_value_t = 1.0)]
        target_std: f32,
        /// Also write this many held-out query states.
        #[arg(long, requires = "queries_out")]
        queries: Option<usize>,
        #[arg(long)]
        queries_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the flow network and subspace basis on a direction-pair bundle.
    Train {
        /// Direction-pair bundle; omit when repeating a run with --manifest.
        #[arg(long, required_unless_present = "manifest")]
        pairs: Option<PathBuf>,
        /// Repeat the run recorded in this run.json.
        #[arg(long, conflicts_with = "pairs")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 0.5)]
        feature_scale: f64,
        #[arg(long, default_value_t = 128)]
        time_embed_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the flow for each query state and project onto the basis.
    Directions {
        #[arg(long)]
        states: PathBuf,
        /// Artifact directory from `train`; supplies default params and basis.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "model")]
        params: Option<PathBuf>,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Intervention sidecar; defaults to the output path with `.spec.json` appended.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// MC1 and mean MC2 of a scores file.
    ScoreMc { scores: PathBuf },
    /// PCA, KDE and arrow tables for paired truthful and hallucinated states.
    Geometry {
        #[arg(long)]
        truthful: PathBuf,
        #[arg(long)]
        hallucinated: PathBuf,
        #[arg(long, default_value_t = 128)]
        grid: usize,
        #[arg(long, default_value_t = 4.0)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a bundle and print its header.
    Validate { bundle: PathBuf },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Synth {
            mode,
            count,
            offset,
            source_mean,
            target_mean,
            source_std,
            target_std,
            queries,
            queries_out,
            out,
        } => {
            let spec = match mode {
                Mode::Offset => SynthSpec::Offset {
                    count,
                    offset,
                    source_std,
                },
                Mode::Gaussian => SynthSpec::Gaussian {
                    count,
                    source_mean,
                    source_std,
                    target_mean,
                    target_std,
                },
            };
            let q = queries.zip(queries_out.as_deref());
            let b = pipeline::cmd_synth(&spec, g.seed, g.layer.unwrap_or(0), &out, q)?;
            print_json(&serde_json::json!({ "pairs": b.records.len(), "dim": b.dim, "out": out }))
        }
        Command::Train {
            pairs,
            manifest,
            depth,
            feature_scale,
            time_embed_dim,
            out,
        } => {
            let outcome = match (manifest, pairs) {
                (Some(m), _) => pipeline::cmd_train_from_manifest(&m, &out)?,
                (None, Some(pairs)) => {
                    let dim = repflow::io::read_bundle(&pairs)?.dim;
                    let net = FlowNetConfig {
                        input_dim: dim,
                        depth,
                        feature_scale,
                        time_embed_dim,
                        seed: g.seed,
                    };
                    let train = TrainConfig {
                        epochs: g.epochs,
                        batch_size: g.batch_size,
                        base_lr: g.lr,
                        warmup_steps: g.warmup,
                        seed: g.seed,
                        ..Default::default()
                    };
                    pipeline::cmd_train(&pairs, &out, net, train)?
                }
                (None, None) => unreachable!("clap requires --pairs or --manifest"),
            };
            print_json(&outcome.manifest)
        }
        Command::Directions {
            states,
            model,
            params,
            basis,
            out,
            sidecar,
        } => {
            let params = params
                .or_else(|| model.as_ref().map(|m| m.join(pipeline::FLOWNET_PREFIX)))
                .expect("clap requires --params or --model");
            let basis = basis.or_else(|| model.as_ref().map(|m| m.join(pipeline::BASIS_PREFIX)));
            let args = DirectionsArgs {
                states,
                params,
                basis,
                k: g.topk,
                alpha: g.alpha,
                layer: g.layer,
                steps: g.steps,
                sidecar: sidecar.unwrap_or_else(|| with_suffix(&out, ".spec.json")),
                out,
            };
            let b = pipeline::cmd_directions(&args)?;
            print_json(&serde_json::json!({
                "vectors": b.records.len(),
                "dim": b.dim,
                "layer": b.layer,
                "k": args.k,
                "alpha": args.alpha,
            }))
        }
        Command::ScoreMc { scores } => print_json(&pipeline::cmd_score_mc(&scores)?),
        Command::Geometry {
            truthful,
            hallucinated,
            grid,
            margin,
            out,
        } => {
            let spec = GridSpec {
                nx: grid,
                ny: grid,
                margin_bandwidths: margin,
            };
            print_json(&pipeline::cmd_geometry(&truthful, &hallucinated, &spec, &out)?)
        }
        Command::Validate { bundle } => print_json(&pipeline::cmd_validate(&bundle)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
