//! Builds a truncated SVD basis from noisy directions that mostly lie in a
//! plane and shows how projection removes the off-plane part.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use repflow::subspace::{project, svd_topk};
use repflow::Tensor;

fn main() -> repflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let (n, d) = (64, 6);
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let (a, b) = (unit.sample(&mut rng), unit.sample(&mut rng));
            (0..d)
                .map(|j| match j {
                    0 => 3.0 * a,
                    1 => 2.0 * b,
                    _ => 0.0,
                } + noise.sample(&mut rng))
                .collect()
        })
        .collect();
    let basis = svd_topk(&Tensor::from_rows(&rows)?, d)?;
    println!("singular values {:.3?}", basis.singular_values);

    let x = Tensor::vector(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    for k in 1..=d {
        let px = project(&basis.truncate(k)?, &x)?;
        println!("k = {k}: ‖P x‖ = {:.4}  P x = {:.3?}", px.norm(), px.data());
    }
    Ok(())
}
