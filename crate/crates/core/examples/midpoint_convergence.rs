//! Second-order convergence of the midpoint solver on `dz/dt = z`.

use repflow::sample::integrate;

fn main() -> repflow::Result<()> {
    let e = std::f64::consts::E;
    let mut previous: Option<f64> = None;
    println!("{:>6} {:>12} {:>8}", "steps", "|z(1) - e|", "ratio");
    for steps in [4, 8, 16, 32, 64, 128] {
        let z = integrate(|_, z| Ok(z.to_vec()), &[1.0], steps)?;
        let err = (z[0] - e).abs();
        let ratio = previous.map_or(String::from("-"), |p| format!("{:.3}", p / err));
        println!("{steps:>6} {err:>12.4e} {ratio:>8}");
        previous = Some(err);
    }
    Ok(())
}
