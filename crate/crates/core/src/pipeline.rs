//! File-level commands behind the `repflow` binary.
//!
//! A training run writes one artifact directory:
//!
//! ```text
//! flownet.json  flownet.bin  flownet.config.json   network parameters
//! basis.json    basis.bin                          full SVD basis of the training directions
//! run.json                                         every setting needed to repeat the run
//! loss.csv                                         per-step loss curve
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::{FlowNet, FlowNetConfig};
use crate::geometry::{self, GridSpec, KdeGrid};
use crate::io::{atomic_write, params, read_bundle, write_bundle, Bundle, BundleKind};
use crate::metrics::{self, MCSummary};
use crate::sample::solve_flow_batch;
use crate::subspace::{project, stack_directions, svd_topk, SubspaceBasis};
use crate::synth::{self, SynthSpec};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainReport};

pub const FLOWNET_PREFIX: &str = "flownet";
pub const BASIS_PREFIX: &str = "basis";
pub const RUN_MANIFEST: &str = "run.json";
pub const LOSS_CSV: &str = "loss.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {}", e.error())))
}

fn config_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn save_flownet(prefix: &Path, net: &FlowNet) -> Result<()> {
    let named = net.named_tensors();
    params::write_params(prefix, named.iter().map(|(k, v)| (k.as_str(), v)))?;
    write_json(&config_path(prefix), net.config())
}

pub fn load_flownet(prefix: &Path) -> Result<FlowNet> {
    let config: FlowNetConfig = read_json(&config_path(prefix))?;
    let named = params::read_params(prefix)?;
    FlowNet::from_named(config, &named)
}

pub fn save_basis(prefix: &Path, basis: &SubspaceBasis) -> Result<()> {
    let vectors = basis.matrix()?;
    let sigma = Tensor::vector(basis.singular_values.iter().map(|&s| s as f32).collect());
    let count = Tensor::scalar(basis.source_count as f32);
    params::write_params(
        prefix,
        [("source_count", &count), ("singular_values", &sigma), ("vectors", &vectors)],
    )
}

pub fn load_basis(prefix: &Path) -> Result<SubspaceBasis> {
    let named = params::read_params(prefix)?;
    let get = |name: &str| {
        named
            .get(name)
            .ok_or_else(|| Error::Format(format!("basis file lacks tensor {name:?}")))
    };
    if named.len() != 3 {
        return Err(Error::Format(format!("basis file has {} tensors, expected 3", named.len())));
    }
    let sigma = get("singular_values")?.data().iter().map(|&s| s as f64).collect();
    let count = get("source_count")?.data().first().copied().unwrap_or(0.0);
    SubspaceBasis::from_parts(get("vectors")?, sigma, count as usize)
}

/// Settings of one training run, stored as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pairs: PathBuf,
    pub net: FlowNetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub layer: u32,
    #[serde(default)]
    pub pair_count: usize,
    #[serde(default)]
    pub steps: u64,
    #[serde(default)]
    pub final_epoch_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LossRow {
    step: u64,
    epoch: usize,
    lr: f64,
    loss: f64,
}

pub struct TrainOutcome {
    pub net: FlowNet,
    pub basis: SubspaceBasis,
    pub report: TrainReport,
    pub manifest: RunManifest,
}

/// Trains on a direction-pair bundle and writes the artifact directory.
pub fn cmd_train(pairs_path: &Path, out_dir: &Path, net: FlowNetConfig, config: TrainConfig) -> Result<TrainOutcome> {
    let bundle = read_bundle(pairs_path)?;
    bundle.expect_kind(BundleKind::DirectionPairs)?;
    let pairs = bundle.to_pairs()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no records", pairs_path.display())));
    }
    if net.input_dim != bundle.dim {
        return Err(Error::Shape(format!(
            "network width {} does not match bundle dim {}",
            net.input_dim, bundle.dim
        )));
    }
    let (model, report) = train(&pairs, net.clone(), &config)?;
    let d = stack_directions(&pairs)?;
    let basis = svd_topk(&d, d.shape()[0].min(d.shape()[1]))?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_flownet(&out_dir.join(FLOWNET_PREFIX), &model)?;
    save_basis(&out_dir.join(BASIS_PREFIX), &basis)?;
    let rows = report.steps.iter().map(|s| LossRow {
        step: s.step,
        epoch: s.epoch,
        lr: s.lr,
        loss: s.loss,
    });
    atomic_write(&out_dir.join(LOSS_CSV), &csv_bytes(rows)?)?;
    let manifest = RunManifest {
        pairs: pairs_path.to_path_buf(),
        net,
        train: config,
        layer: bundle.layer,
        pair_count: pairs.len(),
        steps: report.steps.len() as u64,
        final_epoch_loss: report.epoch_losses.last().copied(),
    };
    write_json(&out_dir.join(RUN_MANIFEST), &manifest)?;
    Ok(TrainOutcome {
        net: model,
        basis,
        report,
        manifest,
    })
}

/// Repeats the run described by a `run.json`, writing to `out_dir`.
pub fn cmd_train_from_manifest(manifest: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let m: RunManifest = read_json(manifest)?;
    cmd_train(&m.pairs, out_dir, m.net, m.train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub query_id: u64,
    pub layer: u32,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct DirectionsArgs {
    pub states: PathBuf,
    pub params: PathBuf,
    /// Needed when `k > 0`.
    pub basis: Option<PathBuf>,
    /// 0 skips projection.
    pub k: usize,
    pub alpha: f64,
    /// Defaults to the layer recorded in the states bundle.
    pub layer: Option<u32>,
    pub steps: usize,
    pub out: PathBuf,
    pub sidecar: PathBuf,
}

/// Transports every query state and projects the result onto the top-`k`
/// basis. Writes a correction-vector bundle and its intervention sidecar.
pub fn cmd_directions(args: &DirectionsArgs) -> Result<Bundle> {
    if !args.alpha.is_finite() {
        return Err(Error::Validation(format!("alpha {} is not finite", args.alpha)));
    }
    let basis = match (args.k, &args.basis) {
        (0, _) => None,
        (k, Some(path)) => {
            let full = load_basis(path)?;
            if full.dim() != 0 && k > full.k() {
                return Err(Error::Domain(format!("k = {k} but the basis holds {} vectors", full.k())));
            }
            Some(full.truncate(k)?)
        }
        (k, None) => {
            return Err(Error::Config(format!("k = {k} needs a basis file")));
        }
    };
    let states = read_bundle(&args.states)?;
    states.expect_kind(BundleKind::QueryStates)?;
    let net = load_flownet(&args.params)?;
    if states.dim != net.input_dim() {
        return Err(Error::Shape(format!(
            "states have dim {}, network expects {}",
            states.dim,
            net.input_dim()
        )));
    }
    if let Some(b) = &basis {
        if b.dim() != states.dim {
            return Err(Error::Shape(format!("basis width {} vs states dim {}", b.dim(), states.dim)));
        }
    }
    let layer = args.layer.unwrap_or(states.layer);
    let mut rows = Vec::with_capacity(states.records.len());
    if !states.records.is_empty() {
        let out = solve_flow_batch(&net, &states.matrix()?, args.steps)?;
        for (i, r) in states.records.iter().enumerate() {
            let d_hat = Tensor::vector(out.row(i).to_vec());
            let v = match &basis {
                Some(b) => project(b, &d_hat)?,
                None => d_hat,
            };
            rows.push((r.query_id, v));
        }
    }
    let bundle = Bundle::from_vectors(BundleKind::CorrectionVectors, layer, states.dim, rows)?;
    let specs: Vec<InterventionSpec> = bundle
        .ids()
        .into_iter()
        .map(|query_id| InterventionSpec {
            query_id,
            layer,
            alpha: args.alpha,
        })
        .collect();
    write_bundle(&args.out, &bundle)?;
    write_json(&args.sidecar, &specs)?;
    Ok(bundle)
}

pub fn cmd_score_mc(path: &Path) -> Result<MCSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let items = metrics::parse_scores(&text)?;
    metrics::summarize(&items)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub points_per_class: usize,
    pub explained_variance: [f64; 2],
    pub mean_arrow: [f64; 2],
    pub bandwidth_truthful: [f64; 2],
    pub bandwidth_hallucinated: [f64; 2],
    pub kde_mass_truthful: f64,
    pub kde_mass_hallucinated: f64,
}

#[derive(Serialize)]
struct PointRow<'a> {
    class: &'a str,
    query_id: u64,
    pc1: f64,
    pc2: f64,
}

#[derive(Serialize)]
struct ArrowRow {
    query_id: u64,
    dx: f64,
    dy: f64,
}

#[derive(Serialize)]
struct GridRow {
    x: f64,
    y: f64,
    density: f64,
}

fn grid_rows(g: &KdeGrid) -> impl Iterator<Item = GridRow> + '_ {
    g.ys.iter()
        .enumerate()
        .flat_map(move |(j, &y)| g.xs.iter().enumerate().map(move |(i, &x)| GridRow { x, y, density: g.density[j * g.xs.len() + i] }))
}

/// Rows of a kind 0 or 2 bundle sorted by query id.
fn sorted_rows(b: &Bundle) -> Result<(Vec<u64>, Tensor)> {
    let mut idx: Vec<usize> = (0..b.records.len()).collect();
    idx.sort_by_key(|&i| b.records[i].query_id);
    let ids: Vec<u64> = idx.iter().map(|&i| b.records[i].query_id).collect();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("bundle repeats a query id".into()));
    }
    let data: Vec<f32> = idx.iter().flat_map(|&i| b.records[i].payload.iter().copied()).collect();
    Ok((ids, Tensor::new(vec![idx.len(), b.dim], data)?))
}

/// Joins two state bundles by query id and writes the 2-D geometry tables:
/// `points.csv`, `arrows.csv`, `kde_truthful.csv`, `kde_hallucinated.csv` and
/// `summary.json`.
pub fn cmd_geometry(truthful: &Path, hallucinated: &Path, grid: &GridSpec, out_dir: &Path) -> Result<GeometrySummary> {
    let t = read_bundle(truthful)?;
    let h = read_bundle(hallucinated)?;
    for b in [&t, &h] {
        if b.kind == BundleKind::DirectionPairs {
            return Err(Error::Format("geometry takes state or vector bundles, not pairs".into()));
        }
    }
    if t.dim != h.dim {
        return Err(Error::Shape(format!("bundle dims differ: {} vs {}", t.dim, h.dim)));
    }
    let (tids, tm) = sorted_rows(&t)?;
    let (hids, hm) = sorted_rows(&h)?;
    if tids.len() < geometry::MIN_POINTS || hids.len() < geometry::MIN_POINTS {
        return Err(Error::Domain(format!(
            "geometry needs at least {} points per class, got {} and {}",
            geometry::MIN_POINTS,
            tids.len(),
            hids.len()
        )));
    }
    if tids != hids {
        let a: BTreeSet<_> = tids.iter().collect();
        let b: BTreeSet<_> = hids.iter().collect();
        let missing = a.symmetric_difference(&b).count();
        return Err(Error::Validation(format!("{missing} query ids appear in only one bundle")));
    }
    let report = geometry::analyze(&tm, &hm, grid)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let points = tids
        .iter()
        .zip(&report.truthful)
        .map(|(&id, p)| PointRow { class: "truthful", query_id: id, pc1: p[0], pc2: p[1] })
        .chain(tids.iter().zip(&report.hallucinated).map(|(&id, p)| PointRow {
            class: "hallucinated",
            query_id: id,
            pc1: p[0],
            pc2: p[1],
        }));
    atomic_write(&out_dir.join("points.csv"), &csv_bytes(points)?)?;
    let arrows = tids.iter().zip(&report.arrows).map(|(&id, a)| ArrowRow { query_id: id, dx: a[0], dy: a[1] });
    atomic_write(&out_dir.join("arrows.csv"), &csv_bytes(arrows)?)?;
    atomic_write(&out_dir.join("kde_truthful.csv"), &csv_bytes(grid_rows(&report.kde_truthful))?)?;
    atomic_write(&out_dir.join("kde_hallucinated.csv"), &csv_bytes(grid_rows(&report.kde_hallucinated))?)?;
    let summary = GeometrySummary {
        points_per_class: tids.len(),
        explained_variance: report.pca.explained,
        mean_arrow: report.mean_arrow,
        bandwidth_truthful: report.kde_truthful.bandwidth,
        bandwidth_hallucinated: report.kde_hallucinated.bandwidth,
        kde_mass_truthful: report.kde_truthful.mass(),
        kde_mass_hallucinated: report.kde_hallucinated.mass(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes a synthetic direction-pair bundle, and optionally a bundle of
/// held-out query states drawn from the same source distribution.
pub fn cmd_synth(
    spec: &SynthSpec,
    seed: u64,
    layer: u32,
    out: &Path,
    queries: Option<(usize, &Path)>,
) -> Result<Bundle> {
    let pairs = synth::generate(spec, seed)?;
    let bundle = Bundle::from_pairs(layer, &pairs)?;
    write_bundle(out, &bundle)?;
    if let Some((count, path)) = queries {
        // Held-out draws use a different stream from the training pairs.
        let m = synth::source_queries(spec, count, seed ^ 0x9E37_79B9_7F4A_7C15)?;
        let ids = (pairs.len() as u64..).take(count);
        let rows = ids.zip((0..count).map(|i| Tensor::vector(m.row(i).to_vec()))).collect();
        write_bundle(path, &Bundle::from_vectors(BundleKind::QueryStates, layer, spec.dim(), rows)?)?;
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub kind: BundleKind,
    pub dim: usize,
    pub layer: u32,
    pub count: usize,
    pub bytes: u64,
}

/// Reads and fully checks a bundle; query ids must be unique.
pub fn cmd_validate(path: &Path) -> Result<BundleSummary> {
    let b = read_bundle(path)?;
    let mut seen = BTreeMap::new();
    for (i, r) in b.records.iter().enumerate() {
        if let Some(first) = seen.insert(r.query_id, i) {
            return Err(Error::Validation(format!(
                "query id {} appears in records {first} and {i}",
                r.query_id
            )));
        }
    }
    let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    Ok(BundleSummary {
        kind: b.kind,
        dim: b.dim,
        layer: b.layer,
        count: b.records.len(),
        bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_file_round_trip() {
        let d = Tensor::from_rows(&[[1.0, 2.0, 0.0], [0.0, 1.0, 3.0], [2.0, 0.0, 1.0]]).unwrap();
        let basis = svd_topk(&d, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("basis");
        save_basis(&prefix, &basis).unwrap();
        let back = load_basis(&prefix).unwrap();
        assert_eq!(back.vectors, basis.vectors);
        assert_eq!(back.source_count, 3);
        for (a, b) in back.singular_values.iter().zip(&basis.singular_values) {
            assert!((a - b).abs() < 1e-5 * b);
        }
    }

    #[test]
    fn flownet_file_round_trip() {
        let mut cfg = FlowNetConfig::new(4);
        cfg.depth = 1;
        cfg.time_embed_dim = 8;
        let net = FlowNet::build(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("net");
        save_flownet(&prefix, &net).unwrap();
        assert_eq!(load_flownet(&prefix).unwrap(), net);
    }

    #[test]
    fn validate_rejects_repeated_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.thfl");
        let rows = vec![(1, Tensor::vector(vec![0.0])), (1, Tensor::vector(vec![1.0]))];
        write_bundle(&path, &Bundle::from_vectors(BundleKind::QueryStates, 0, 1, rows).unwrap()).unwrap();
        assert!(matches!(cmd_validate(&path), Err(Error::Validation(_))));
    }
}
