//! Writes each bundle kind and a parameter file, reads them back and checks
//! the bytes are unchanged.

use repflow::flownet::{FlowNet, FlowNetConfig};
use repflow::io::{read_bundle, read_params, write_bundle, write_params, Bundle, BundleKind};
use repflow::synth::{self, SynthSpec};
use repflow::Tensor;

fn main() -> repflow::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec::Offset {
        count: 5,
        offset: vec![0.5, -1.0, 2.0],
        source_std: 1.0,
    };
    let pairs = synth::generate(&spec, 0)?;
    let states = pairs.iter().map(|p| (p.query_id, p.h_q.clone())).collect();
    let bundles = [
        Bundle::from_vectors(BundleKind::QueryStates, 12, 3, states)?,
        Bundle::from_pairs(12, &pairs)?,
        Bundle::from_vectors(BundleKind::CorrectionVectors, 12, 3, vec![(7, Tensor::vector(vec![1.0, 0.0, -1.0]))])?,
    ];
    for b in &bundles {
        let path = dir.path().join(format!("{:?}.thfl", b.kind));
        write_bundle(&path, b)?;
        let bytes = std::fs::read(&path).expect("bundle written");
        let back = read_bundle(&path)?;
        println!(
            "{:?}: {} records, {} bytes, identical {}",
            b.kind,
            back.records.len(),
            bytes.len(),
            back.encode() == bytes && &back == b
        );
    }

    let net = FlowNet::build(FlowNetConfig::new(3))?;
    let named = net.named_tensors();
    let prefix = dir.path().join("flownet");
    write_params(&prefix, named.iter().map(|(k, v)| (k.as_str(), v)))?;
    let back = read_params(&prefix)?;
    println!("params: {} tensors, identical {}", back.len(), back == named);
    Ok(())
}
