//! Top-k right singular subspace of the stacked training directions and
//! orthogonal projection onto it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::DirectionPair;

/// Singular values at or below this fraction of `σ_1` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    /// Orthonormal basis vectors, strongest first.
    pub vectors: Vec<Tensor>,
    /// Non-increasing, one per vector.
    pub singular_values: Vec<f64>,
    /// Number of rows of the matrix the basis was computed from.
    pub source_count: usize,
    /// Set when `k` exceeds the numerical rank; the trailing vectors then
    /// complete an orthonormal set but carry no signal.
    pub rank_warning: bool,
}

impl SubspaceBasis {
    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Tensor::len)
    }

    /// The leading `k` vectors of this basis.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::Domain(format!("k = {k} outside 1..={}", self.k())));
        }
        let s1 = self.singular_values[0];
        Ok(Self {
            vectors: self.vectors[..k].to_vec(),
            singular_values: self.singular_values[..k].to_vec(),
            source_count: self.source_count,
            rank_warning: self.singular_values[k - 1] <= RANK_TOLERANCE * s1,
        })
    }

    /// Vectors as the rows of a `[k × d]` matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        let rows: Vec<&[f32]> = self.vectors.iter().map(Tensor::data).collect();
        Tensor::from_rows(&rows)
    }

    /// Rebuilds a basis from a `[k × d]` row matrix and its singular values.
    pub fn from_parts(vectors: &Tensor, singular_values: Vec<f64>, source_count: usize) -> Result<Self> {
        let (k, d) = vectors.dims2()?;
        if k == 0 || d == 0 || singular_values.len() != k {
            return Err(Error::Shape(format!(
                "basis {k}×{d} with {} singular values",
                singular_values.len()
            )));
        }
        if singular_values.windows(2).any(|w| w[1] > w[0]) || singular_values.iter().any(|&s| s.is_nan() || s < 0.0) {
            return Err(Error::Validation("singular values must be non-negative and non-increasing".into()));
        }
        let vecs: Vec<Tensor> = (0..k).map(|i| Tensor::vector(vectors.row(i).to_vec())).collect();
        for i in 0..k {
            for j in i..k {
                let g = vecs[i].dot(&vecs[j])?;
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - target).abs() >= 1e-5 {
                    return Err(Error::Validation(format!(
                        "basis vectors {i} and {j} are not orthonormal (inner product {g})"
                    )));
                }
            }
        }
        let rank_warning = singular_values[k - 1] <= RANK_TOLERANCE * singular_values[0];
        Ok(Self {
            vectors: vecs,
            singular_values,
            source_count,
            rank_warning,
        })
    }
}

/// Rows are the `d_q` of each pair, in input order.
pub fn stack_directions(pairs: &[DirectionPair]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no directions to stack".into()));
    }
    let rows: Vec<&[f32]> = pairs.iter().map(|p| p.d_q.data()).collect();
    Tensor::from_rows(&rows)
}

/// Top-`k` right singular vectors of `d` (`[N × d]`), computed by one-sided
/// Jacobi rotations in f64. Each vector's largest-magnitude component is
/// positive, ties going to the lowest index.
pub fn svd_topk(d: &Tensor, k: usize) -> Result<SubspaceBasis> {
    let (n, dim) = d.dims2()?;
    if n == 0 || dim == 0 {
        return Err(Error::EmptyDataset("matrix has no entries".into()));
    }
    if k == 0 || k > n.min(dim) {
        return Err(Error::Domain(format!("k = {k} outside 1..={}", n.min(dim))));
    }
    if !d.is_finite() {
        return Err(Error::Validation("matrix has non-finite entries".into()));
    }
    let (sigma, vectors) = right_singular(d, n, dim);

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let s1 = sigma[order[0]];
    let rank = order.iter().take_while(|&&i| sigma[i] > RANK_TOLERANCE * s1).count();

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in order.iter().take(k.min(rank)) {
        basis.push(vectors[i].clone());
    }
    complete_orthonormal(&mut basis, k, dim);
    for v in &mut basis {
        fix_sign(v);
    }

    Ok(SubspaceBasis {
        vectors: basis
            .into_iter()
            .map(|v| Tensor::vector(v.into_iter().map(|x| x as f32).collect()))
            .collect(),
        singular_values: order.iter().take(k).map(|&i| sigma[i]).collect(),
        source_count: n,
        rank_warning: k > rank,
    })
}

/// Singular values and unit right singular vectors (unsorted).
///
/// With `N ≥ d` the columns of `D` are orthogonalized and the accumulated
/// rotation gives `V`. Otherwise the columns of `Dᵀ` are orthogonalized and
/// their normalized images are the right singular vectors of `D`; vectors for
/// zero singular values come back empty.
fn right_singular(d: &Tensor, n: usize, dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let wide = n < dim;
    // Column-major working matrix with `cols` columns of length `len`.
    let (cols, len) = if wide { (n, dim) } else { (dim, n) };
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            (0..len)
                .map(|r| {
                    let (i, j) = if wide { (c, r) } else { (r, c) };
                    d.data()[i * dim + j] as f64
                })
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<f64>> = if wide {
        Vec::new()
    } else {
        (0..cols).map(|c| (0..cols).map(|r| f64::from(r == c)).collect()).collect()
    };

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                if !wide {
                    rotate(&mut v, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let vectors = if wide {
        let s1 = sigma.iter().cloned().fold(0.0, f64::max);
        a.into_iter()
            .zip(&sigma)
            .map(|(col, &s)| {
                if s > RANK_TOLERANCE * s1 && s > 0.0 {
                    col.into_iter().map(|x| x / s).collect()
                } else {
                    Vec::new()
                }
            })
            .collect()
    } else {
        v
    };
    (sigma, vectors)
}

fn rotate(m: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = m.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Extends `basis` to `k` orthonormal vectors with Gram-Schmidt over the
/// standard basis.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, k: usize, dim: usize) {
    let mut e = 0;
    while basis.len() < k && e < dim {
        let mut cand: Vec<f64> = (0..dim).map(|i| f64::from(i == e)).collect();
        for _ in 0..2 {
            for b in basis.iter() {
                let proj: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= proj * x;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(cand.into_iter().map(|x| x / norm).collect());
        }
        e += 1;
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// `Σ_i ⟨v_i, x⟩ v_i`.
pub fn project(basis: &SubspaceBasis, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || x.len() != basis.dim() {
        return Err(Error::Shape(format!(
            "vector {:?} against basis width {}",
            x.shape(),
            basis.dim()
        )));
    }
    let mut out = vec![0.0f64; x.len()];
    for v in &basis.vectors {
        let coef = v.dot(x)?;
        for (o, &vi) in out.iter_mut().zip(v.data()) {
            *o += coef * vi as f64;
        }
    }
    Ok(Tensor::vector(out.into_iter().map(|o| o as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(x: &Tensor) -> f64 {
        x.norm()
    }

    #[test]
    fn stack_preserves_order() {
        let pairs: Vec<DirectionPair> = (0..3)
            .map(|i| {
                let v = Tensor::vector(vec![i as f32, 1.0]);
                DirectionPair::new(i, Tensor::zeros(&[2]), v).unwrap()
            })
            .collect();
        let m = stack_directions(&pairs).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(m.row(i), p.d_q.data());
        }
        assert_eq!(stack_directions(&pairs[..1]).unwrap().row(0), pairs[0].d_q.data());
        assert!(matches!(stack_directions(&[]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn rank_one_rows() {
        let u = [3.0f32, -4.0, 0.0];
        let d = Tensor::from_rows(&[u, u, u, u]).unwrap();
        let b = svd_topk(&d, 2).unwrap();
        // largest-magnitude entry made positive
        let expect = [-0.6, 0.8, 0.0];
        for (a, e) in b.vectors[0].data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6);
        }
        assert!((b.singular_values[0] - 10.0).abs() < 1e-9);
        assert!(b.singular_values[1] < 1e-9);
        assert!(b.rank_warning);
        assert!(b.vectors[0].dot(&b.vectors[1]).unwrap().abs() < 1e-6);
    }

    #[test]
    fn identity_spans_everything() {
        let rows: Vec<Vec<f32>> = (0..4).map(|i| (0..4).map(|j| f32::from(i == j)).collect()).collect();
        let b = svd_topk(&Tensor::from_rows(&rows).unwrap(), 4).unwrap();
        assert!(b.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(!b.rank_warning);
        let x = Tensor::vector(vec![0.3, -1.0, 2.0, 5.0]);
        let p = project(&b, &x).unwrap();
        assert!(p.sub(&x).unwrap().norm() < 1e-6);
    }

    #[test]
    fn wide_matrix_uses_transpose_path() {
        let d = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0, 2.0], [0.0, 0.0, 3.0, 0.0, 0.0]]).unwrap();
        let b = svd_topk(&d, 2).unwrap();
        assert!((b.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((b.singular_values[1] - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.vectors[0].data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_k_and_width() {
        let d = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert!(matches!(svd_topk(&d, 0), Err(Error::Domain(_))));
        assert!(matches!(svd_topk(&d, 3), Err(Error::Domain(_))));
        let b = svd_topk(&d, 1).unwrap();
        assert!(matches!(project(&b, &Tensor::zeros(&[3])), Err(Error::Shape(_))));
    }

    #[test]
    fn in_span_and_orthogonal_inputs() {
        let d = Tensor::from_rows(&[[1.0, 1.0, 0.0], [1.0, -1.0, 0.0]]).unwrap();
        let b = svd_topk(&d, 2).unwrap();
        let v1 = b.vectors[0].clone();
        assert!(project(&b, &v1).unwrap().sub(&v1).unwrap().norm() < 1e-6);
        assert!(norm(&project(&b, &Tensor::vector(vec![0.0, 0.0, 7.0])).unwrap()) < 1e-6);
    }

    #[test]
    fn round_trip_through_parts() {
        let d = Tensor::from_rows(&[[1.0, 2.0, 0.5], [3.0, -1.0, 0.0]]).unwrap();
        let b = svd_topk(&d, 2).unwrap();
        let back = SubspaceBasis::from_parts(&b.matrix().unwrap(), b.singular_values.clone(), 2).unwrap();
        assert_eq!(back, b);
        let bad = Tensor::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            SubspaceBasis::from_parts(&bad, vec![1.0, 0.5], 2),
            Err(Error::Validation(_))
        ));
    }

    fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f32..3.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn basis_is_orthonormal_and_sorted(d in (1usize..7, 1usize..7).prop_flat_map(|(n, d)| matrix(n, d))) {
            let k = d.shape()[0].min(d.shape()[1]);
            let b = svd_topk(&d, k).unwrap();
            for i in 0..k {
                for j in 0..k {
                    let g = b.vectors[i].dot(&b.vectors[j]).unwrap();
                    prop_assert!((g - f64::from(u8::from(i == j))).abs() < 1e-5);
                }
            }
            prop_assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn projection_invariants(
            d in matrix(8, 6),
            x in prop::collection::vec(-5.0f32..5.0, 6),
            k in 1usize..=6,
        ) {
            let b = svd_topk(&d, 6).unwrap();
            let bk = b.truncate(k).unwrap();
            let x = Tensor::vector(x);
            let p = project(&bk, &x).unwrap();
            let pp = project(&bk, &p).unwrap();
            prop_assert!(pp.sub(&p).unwrap().norm() < 1e-5);
            prop_assert!(p.norm() <= x.norm() + 1e-6);
            if k > 1 {
                let smaller = project(&b.truncate(k - 1).unwrap(), &x).unwrap();
                prop_assert!(smaller.norm() <= p.norm() + 1e-6);
            }
        }

        #[test]
        fn rows_reproduced_at_full_rank(d in matrix(4, 7)) {
            let b = svd_topk(&d, 4).unwrap();
            prop_assume!(!b.rank_warning);
            for i in 0..4 {
                let row = Tensor::vector(d.row(i).to_vec());
                let p = project(&b, &row).unwrap();
                prop_assert!(p.sub(&row).unwrap().norm() < 1e-4 * row.norm().max(1.0));
            }
        }
    }
}
