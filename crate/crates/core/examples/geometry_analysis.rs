//! Projects paired truthful and hallucinated states onto their top two
//! principal axes and fits a KDE per class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use repflow::geometry::{analyze, GridSpec};
use repflow::Tensor;

fn main() -> repflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let (n, d) = (200, 10);
    let shift: Vec<f32> = (0..d).map(|j| if j < 2 { 2.0 } else { 0.0 }).collect();
    let hallucinated: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| unit.sample(&mut rng)).collect()).collect();
    let truthful: Vec<Vec<f32>> = hallucinated
        .iter()
        .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s + 0.3 * unit.sample(&mut rng)).collect())
        .collect();

    let report = analyze(&Tensor::from_rows(&truthful)?, &Tensor::from_rows(&hallucinated)?, &GridSpec::default())?;
    println!("explained variance {:.3?}", report.pca.explained);
    println!("mean arrow (hallucinated -> truthful) {:.3?}", report.mean_arrow);
    for (name, grid) in [("truthful", &report.kde_truthful), ("hallucinated", &report.kde_hallucinated)] {
        println!("{name:>12}: bandwidth {:.3?}, grid mass {:.4}", grid.bandwidth, grid.mass());
    }
    Ok(())
}
