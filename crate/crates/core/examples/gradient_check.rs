//! Compares tape gradients of the flow-matching loss against central
//! differences of the same loss, perturbing one parameter at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repflow::autodiff::Tape;
use repflow::flownet::{FlowNet, FlowNetConfig};
use repflow::nn::Mode;
use repflow::synth::{self, SynthSpec};
use repflow::train::flow_matching_loss;

fn main() -> repflow::Result<()> {
    let config = FlowNetConfig {
        depth: 1,
        ..FlowNetConfig::new(4)
    };
    let net = FlowNet::build(config)?;
    let spec = SynthSpec::Offset {
        count: 8,
        offset: vec![1.0, -0.5, 2.0, 0.25],
        source_std: 1.0,
    };
    let pairs = synth::generate(&spec, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ts: Vec<f32> = (0..pairs.len()).map(|_| rng.random()).collect();

    let z: Vec<Vec<f32>> = pairs
        .iter()
        .zip(&ts)
        .map(|(p, &t)| repflow::train::interpolate(&p.h_q, &p.d_q, t).map(|z| z.into_data()))
        .collect::<repflow::Result<_>>()?;
    let u: Vec<Vec<f32>> = pairs
        .iter()
        .map(|p| p.d_q.sub(&p.h_q).map(|u| u.into_data()))
        .collect::<repflow::Result<_>>()?;
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, &ts, &repflow::Tensor::from_rows(&z)?, Mode::Train)?;
    let target = tape.constant(repflow::Tensor::from_rows(&u)?);
    let loss = tape.mean_row_sq_error(rec.output, target)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.scalar(loss));

    // f32 forward passes limit central differences to a few digits.
    let step = 1e-2f32;
    for (i, (name, tensor)) in net.trainable().into_iter().enumerate().step_by(3) {
        let analytic = grads.get_or_zeros(rec.params[i], tensor).data()[0] as f64;
        let mut plus = net.clone();
        plus.trainable_mut()[i].data_mut()[0] += step;
        let mut minus = net.clone();
        minus.trainable_mut()[i].data_mut()[0] -= step;
        let numeric = (flow_matching_loss(&plus, &pairs, &ts)? - flow_matching_loss(&minus, &pairs, &ts)?)
            / (2.0 * step as f64);
        println!("{name:>20}[0]  tape {analytic:+.5e}  finite difference {numeric:+.5e}");
    }
    Ok(())
}
