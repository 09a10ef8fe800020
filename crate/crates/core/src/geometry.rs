//! Two-dimensional view of paired truthful and hallucinated representations:
//! PCA on the pooled points, a Gaussian KDE per class and one arrow per pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::svd_topk;
use crate::tensor::Tensor;

pub const MIN_POINTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Grid extends this many bandwidths past the data on each axis.
    pub margin_bandwidths: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 128,
            ny: 128,
            margin_bandwidths: 4.0,
        }
    }
}

/// Top two principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
}

impl Pca2 {
    pub fn fit(points: &Tensor) -> Result<Self> {
        let (n, d) = points.dims2()?;
        if n < 2 {
            return Err(Error::Domain(format!("PCA needs at least 2 points, got {n}")));
        }
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, &x) in mean.iter_mut().zip(points.row(i)) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f32> = (0..n)
            .flat_map(|i| points.row(i).iter().zip(&mean).map(|(&x, m)| (x as f64 - m) as f32).collect::<Vec<_>>())
            .collect();
        let total: f64 = centered.iter().map(|&x| (x as f64).powi(2)).sum();
        let centered = Tensor::new(vec![n, d], centered)?;

        let k = n.min(d).min(2);
        let mut components = [vec![0.0; d], vec![0.0; d]];
        let mut explained = [0.0; 2];
        if total > 0.0 {
            let basis = svd_topk(&centered, k)?;
            for i in 0..k {
                components[i] = basis.vectors[i].data().iter().map(|&x| x as f64).collect();
                explained[i] = basis.singular_values[i].powi(2) / total;
            }
        } else {
            components[0][0] = 1.0;
            if d > 1 {
                components[1][1] = 1.0;
            }
        }
        Ok(Self {
            mean,
            components,
            explained,
        })
    }

    pub fn project(&self, points: &Tensor) -> Result<Vec<[f64; 2]>> {
        let (n, d) = points.dims2()?;
        if d != self.mean.len() {
            return Err(Error::Shape(format!("points have width {d}, PCA fitted on {}", self.mean.len())));
        }
        Ok((0..n)
            .map(|i| {
                let row = points.row(i);
                let mut out = [0.0; 2];
                for (o, c) in out.iter_mut().zip(&self.components) {
                    *o = row.iter().zip(&self.mean).zip(c).map(|((&x, m), v)| (x as f64 - m) * v).sum();
                }
                out
            })
            .collect())
    }
}

/// Gaussian KDE with a diagonal Scott bandwidth `n^(-1/6)·σ_axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    pub points: Vec<[f64; 2]>,
    pub bandwidth: [f64; 2],
}

impl Kde {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let n = points.len();
        if n < MIN_POINTS {
            return Err(Error::Domain(format!("KDE needs at least {MIN_POINTS} points, got {n}")));
        }
        let factor = (n as f64).powf(-1.0 / 6.0);
        let mut std = [0.0; 2];
        for (axis, s) in std.iter_mut().enumerate() {
            let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            let var = points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            *s = var.sqrt();
        }
        // A flat axis borrows the other axis' spread, or unit spread if both are flat.
        let fallback = if std[0] > 0.0 { std[0] } else if std[1] > 0.0 { std[1] } else { 1.0 };
        let bandwidth = std.map(|s| factor * if s > 0.0 { s } else { fallback });
        Ok(Self { points, bandwidth })
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let [bx, by] = self.bandwidth;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * bx * by * self.points.len() as f64);
        norm * self
            .points
            .iter()
            .map(|p| (-0.5 * (((x - p[0]) / bx).powi(2) + ((y - p[1]) / by).powi(2))).exp())
            .sum::<f64>()
    }

    /// Density on a regular grid spanning the data plus the margin.
    pub fn grid(&self, spec: &GridSpec) -> Result<KdeGrid> {
        if spec.nx < 2 || spec.ny < 2 {
            return Err(Error::Config("KDE grid needs at least 2 points per axis".into()));
        }
        if spec.margin_bandwidths.is_nan() || spec.margin_bandwidths < 0.0 {
            return Err(Error::Config("grid margin must be non-negative".into()));
        }
        let axis = |a: usize, count: usize| -> Vec<f64> {
            let lo = self.points.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min) - spec.margin_bandwidths * self.bandwidth[a];
            let hi = self.points.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max) + spec.margin_bandwidths * self.bandwidth[a];
            (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
        };
        let xs = axis(0, spec.nx);
        let ys = axis(1, spec.ny);
        let density = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).map(|(x, y)| self.density(x, y)).collect();
        Ok(KdeGrid {
            xs,
            ys,
            density,
            bandwidth: self.bandwidth,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major, `ys.len()` rows of `xs.len()` values.
    pub density: Vec<f64>,
    pub bandwidth: [f64; 2],
}

impl KdeGrid {
    /// Riemann sum of the density over the grid cells.
    pub fn mass(&self) -> f64 {
        let dx = self.xs[1] - self.xs[0];
        let dy = self.ys[1] - self.ys[0];
        self.density.iter().sum::<f64>() * dx * dy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub pca: Pca2,
    pub truthful: Vec<[f64; 2]>,
    pub hallucinated: Vec<[f64; 2]>,
    /// `truthful_i − hallucinated_i` in PCA coordinates.
    pub arrows: Vec<[f64; 2]>,
    pub mean_arrow: [f64; 2],
    pub kde_truthful: KdeGrid,
    pub kde_hallucinated: KdeGrid,
}

/// Rows of `truthful` and `hallucinated` are paired by index.
pub fn analyze(truthful: &Tensor, hallucinated: &Tensor, grid: &GridSpec) -> Result<GeometryReport> {
    let (nt, dt) = truthful.dims2()?;
    let (nh, dh) = hallucinated.dims2()?;
    if nt < MIN_POINTS || nh < MIN_POINTS {
        return Err(Error::Domain(format!(
            "geometry needs at least {MIN_POINTS} points per class, got {nt} and {nh}"
        )));
    }
    if dt != dh {
        return Err(Error::Shape(format!("class widths differ: {dt} vs {dh}")));
    }
    if nt != nh {
        return Err(Error::Shape(format!("arrows pair rows by index, got {nt} and {nh} rows")));
    }
    let mut pooled = truthful.data().to_vec();
    pooled.extend_from_slice(hallucinated.data());
    let pca = Pca2::fit(&Tensor::new(vec![nt + nh, dt], pooled)?)?;
    let t2 = pca.project(truthful)?;
    let h2 = pca.project(hallucinated)?;
    // Arrows come from the raw difference so identical rows give exact zeros.
    let diff = truthful.sub(hallucinated)?;
    let arrows: Vec<[f64; 2]> = (0..nt)
        .map(|i| {
            let row = diff.row(i);
            let mut a = [0.0; 2];
            for (o, c) in a.iter_mut().zip(&pca.components) {
                *o = row.iter().zip(c).map(|(&x, v)| x as f64 * v).sum();
            }
            a
        })
        .collect();
    let mut mean_arrow = [0.0; 2];
    for a in &arrows {
        mean_arrow[0] += a[0] / nt as f64;
        mean_arrow[1] += a[1] / nt as f64;
    }
    let kde_truthful = Kde::new(t2.clone())?.grid(grid)?;
    let kde_hallucinated = Kde::new(h2.clone())?.grid(grid)?;
    Ok(GeometryReport {
        pca,
        truthful: t2,
        hallucinated: h2,
        arrows,
        mean_arrow,
        kde_truthful,
        kde_hallucinated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(rows: &[[f32; 3]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn collinear_points_load_pc1() {
        let rows: Vec<[f32; 3]> = (0..10).map(|i| { let t = i as f32 - 4.5; [t, 2.0 * t, -t] }).collect();
        let pca = Pca2::fit(&cloud(&rows)).unwrap();
        assert!(pca.explained[0] > 0.999);
        assert!(pca.explained[1] < 1e-6);
    }

    #[test]
    fn projection_of_mean_is_origin() {
        let t = cloud(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [1.0, 1.0, 1.0]]);
        let pca = Pca2::fit(&t).unwrap();
        let mean = Tensor::from_rows(&[pca.mean.iter().map(|&m| m as f32).collect::<Vec<_>>()]).unwrap();
        let p = pca.project(&mean).unwrap()[0];
        assert!(p[0].abs() < 1e-6 && p[1].abs() < 1e-6);
        let total: f64 = pca.explained.iter().sum();
        assert!(total <= 1.0 + 1e-9);
    }

    #[test]
    fn identical_classes_give_zero_arrows() {
        let t = cloud(&[[1.0, 0.0, 2.0], [0.5, 2.0, 0.0], [0.0, -1.0, 3.0], [1.0, 1.0, 1.0]]);
        let r = analyze(&t, &t, &GridSpec::default()).unwrap();
        assert!(r.arrows.iter().all(|a| *a == [0.0, 0.0]));
        assert_eq!(r.mean_arrow, [0.0, 0.0]);
    }

    #[test]
    fn shifted_class_gives_constant_arrow() {
        let h = cloud(&[[1.0, 0.0, 2.0], [0.5, 2.0, 0.0], [0.0, -1.0, 3.0], [1.0, 1.0, 1.0]]);
        let t = h.add(&Tensor::from_rows(&[[3.0f32, 0.0, 0.0]; 4]).unwrap()).unwrap();
        let r = analyze(&t, &h, &GridSpec::default()).unwrap();
        for a in &r.arrows {
            assert!((a[0] - r.mean_arrow[0]).abs() < 1e-5 && (a[1] - r.mean_arrow[1]).abs() < 1e-5);
        }
        let len = (r.mean_arrow[0].powi(2) + r.mean_arrow[1].powi(2)).sqrt();
        assert!(len <= 3.0 + 1e-5);
    }

    #[test]
    fn kde_grid_mass_near_one() {
        let pts: Vec<[f64; 2]> = (0..40).map(|i| { let t = i as f64; [t.sin() * 3.0, (t * 0.7).cos()] }).collect();
        let g = Kde::new(pts).unwrap().grid(&GridSpec::default()).unwrap();
        assert!((g.mass() - 1.0).abs() < 0.02, "mass {}", g.mass());
    }

    #[test]
    fn scott_bandwidth_by_hand() {
        let kde = Kde::new(vec![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0]]).unwrap();
        let f = 3f64.powf(-1.0 / 6.0);
        assert!((kde.bandwidth[0] - f).abs() < 1e-12);
        assert!((kde.bandwidth[1] - 2.0 * f).abs() < 1e-12);
        let flat = Kde::new(vec![[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(flat.bandwidth[1], flat.bandwidth[0]);
    }

    #[test]
    fn too_few_points() {
        let t = cloud(&[[1.0, 0.0, 2.0], [0.5, 2.0, 0.0]]);
        assert!(matches!(analyze(&t, &t, &GridSpec::default()), Err(Error::Domain(_))));
        let three = cloud(&[[1.0, 0.0, 2.0], [0.5, 2.0, 0.0], [0.0, 0.0, 0.0]]);
        let four = cloud(&[[1.0, 0.0, 2.0], [0.5, 2.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        assert!(matches!(analyze(&three, &four, &GridSpec::default()), Err(Error::Shape(_))));
    }
}
