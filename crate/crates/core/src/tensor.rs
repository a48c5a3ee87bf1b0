//! Dense row-major 64-bit float tensors and the small-matrix linear algebra
//! (matmul, Cholesky, triangular solves, log-determinant) everything else
//! builds on.

use crate::error::{Error, Result};

/// Dense tensor with row-major storage. Rank is at most 2 in practice
/// (vectors `[n]`, matrices `[r, c]`, scalars `[1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_shape_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let c = self.shape[1];
        &mut self.data[i * c + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self [r,k] x other [k,c] -> [r,c]`; 1-D operands are treated as
    /// column/row vectors where unambiguous.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (r, k1) = match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("matmul rank"),
        };
        let (k2, c) = match other.shape.len() {
            1 => (other.shape[0], 1),
            2 => (other.shape[0], other.shape[1]),
            _ => panic!("matmul rank"),
        };
        assert_eq!(k1, k2, "matmul inner dims {k1} vs {k2}");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k1 {
                let a = self.data[i * k1 + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * c..(p + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += a * row[j];
                }
            }
        }
        Tensor {
            shape: vec![r, c],
            data: out,
        }
    }

    /// Matrix-vector product returning a vector.
    pub fn matvec(&self, v: &Tensor) -> Tensor {
        let out = self.matmul(v);
        Tensor::vector(out.data)
    }

    pub fn diag(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let n = self.shape[0].min(self.shape[1]);
        Tensor::vector((0..n).map(|i| self.at(i, i)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Strict lower-triangular Cholesky of a symmetric positive definite matrix.
///
/// Fails with `NotPositiveDefinite` when a pivot drops to (or below) the
/// scale-relative floor.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.shape[0];
    if a.shape.len() != 2 || a.shape[1] != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            expected: "square matrix".into(),
            got: format!("{:?}", a.shape),
        });
    }
    let scale = a
        .data
        .iter()
        .step_by(n + 1)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let floor = scale * 1e-14;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= floor || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite {
                        op: "cholesky",
                        pivot: s,
                        index: i,
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, n],
        data: l,
    })
}

/// Jitter policy for kernel-derived (possibly near-singular PSD) matrices:
/// add `1e-8 x mean(diag)` before factorizing, retry once with `1e-6` before
/// raising. Near-zero matrices fall back to a tiny absolute jitter so that
/// degenerate-but-valid covariances (e.g. at inducing points) still factor.
pub fn cholesky_jittered(a: &Tensor) -> Result<(Tensor, f64)> {
    let n = a.shape[0];
    let mean_diag = (0..n).map(|i| a.at(i, i)).sum::<f64>() / n.max(1) as f64;
    let base = if mean_diag.abs() > 1e-100 {
        mean_diag.abs()
    } else {
        1.0e-4
    };
    let mut last = Error::NotPositiveDefinite {
        op: "cholesky_jittered",
        pivot: f64::NAN,
        index: 0,
    };
    for &rel in &[1e-8, 1e-6] {
        let jitter = base * rel;
        let mut aj = a.clone();
        for i in 0..n {
            *aj.at_mut(i, i) += jitter;
        }
        match cholesky(&aj) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Solve `L x = b` with `L` lower triangular; `b` may be a vector or matrix.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.shape[0];
    let c = if b.shape.len() == 1 { 1 } else { b.shape[1] };
    assert_eq!(b.shape[0], n, "solve_lower dims");
    let mut x = b.data.clone();
    for i in 0..n {
        for j in 0..c {
            let mut s = x[i * c + j];
            for p in 0..i {
                s -= l.data[i * n + p] * x[p * c + j];
            }
            x[i * c + j] = s / l.data[i * n + i];
        }
    }
    Tensor {
        shape: b.shape.clone(),
        data: x,
    }
}

/// Solve `L^T x = b` with `L` lower triangular.
pub fn solve_lower_t(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.shape[0];
    let c = if b.shape.len() == 1 { 1 } else { b.shape[1] };
    assert_eq!(b.shape[0], n, "solve_lower_t dims");
    let mut x = b.data.clone();
    for i in (0..n).rev() {
        for j in 0..c {
            let mut s = x[i * c + j];
            for p in (i + 1)..n {
                s -= l.data[p * n + i] * x[p * c + j];
            }
            x[i * c + j] = s / l.data[i * n + i];
        }
    }
    Tensor {
        shape: b.shape.clone(),
        data: x,
    }
}

/// Solve `A x = b` for symmetric positive definite `A` via its Cholesky factor.
pub fn solve_psd(l: &Tensor, b: &Tensor) -> Tensor {
    solve_lower_t(l, &solve_lower(l, b))
}

/// `A^{-1}` for symmetric positive definite `A` given its Cholesky factor,
/// computed via triangular solves against the identity.
pub fn inverse_from_cholesky(l: &Tensor) -> Tensor {
    let n = l.shape[0];
    solve_psd(l, &Tensor::eye(n))
}

/// `log |A|` from the Cholesky factor of `A`.
pub fn logdet_from_cholesky(l: &Tensor) -> f64 {
    let n = l.shape[0];
    2.0 * (0..n).map(|i| l.at(i, i).ln()).sum::<f64>()
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform_tensor};

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Tensor::eye(3)).unwrap();
        assert_eq!(l, Tensor::eye(3));
    }

    #[test]
    fn cholesky_hand_example() {
        // [[4,2],[2,3]] -> [[2,0],[1,sqrt(2)]]; verify L L^T reproduces A.
        let a = Tensor::matrix(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        assert!((l.at(0, 0) - 2.0).abs() < 1e-12);
        assert!((l.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((l.at(1, 1) - 2f64.sqrt()).abs() < 1e-12);
        assert!((l.at(0, 1)).abs() == 0.0);
        let recon = l.matmul(&l.transpose());
        assert!(recon.max_abs_diff(&a) < 1e-10 * a.frobenius_norm());
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        // Eigenvalues {1, -1}.
        let a = Tensor::matrix(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    fn random_pd(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Tensor {
        let b = uniform_tensor(rng, &[n, n], -1.0, 1.0);
        let mut a = b.matmul(&b.transpose());
        for i in 0..n {
            *a.at_mut(i, i) += n as f64 * 0.5;
        }
        a
    }

    #[test]
    fn solves_match_direct_solution() {
        let mut rng = seeded(7);
        for trial in 0..20 {
            let n = 2 + trial % 49;
            let a = random_pd(&mut rng, n);
            let b = uniform_tensor(&mut rng, &[n], -2.0, 2.0);
            let l = cholesky(&a).unwrap();
            let x = solve_psd(&l, &b);
            let resid = a.matvec(&x).sub(&b);
            assert!(
                resid.frobenius_norm() / b.frobenius_norm().max(1e-12) < 1e-8,
                "residual too large at n={n}"
            );
        }
    }

    #[test]
    fn logdet_matches_eigenvalue_oracle() {
        // Small-matrix eigenvalue oracle: power iteration with deflation is
        // overkill; instead use the characteristic-polynomial closed form on
        // 2x2 blocks assembled into block-diagonal matrices.
        let mut rng = seeded(11);
        for _ in 0..20 {
            let blocks = 3;
            let n = 2 * blocks;
            let mut a = Tensor::zeros(&[n, n]);
            let mut log_eig_prod = 0.0;
            for b in 0..blocks {
                let pd = random_pd(&mut rng, 2);
                let (p, q, r) = (pd.at(0, 0), pd.at(0, 1), pd.at(1, 1));
                let tr = p + r;
                let det = p * r - q * q;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let (e1, e2) = (tr / 2.0 + disc, tr / 2.0 - disc);
                log_eig_prod += e1.ln() + e2.ln();
                let o = 2 * b;
                *a.at_mut(o, o) = p;
                *a.at_mut(o, o + 1) = q;
                *a.at_mut(o + 1, o) = q;
                *a.at_mut(o + 1, o + 1) = r;
            }
            let l = cholesky(&a).unwrap();
            assert!((logdet_from_cholesky(&l) - log_eig_prod).abs() < 1e-8);
        }
    }

    #[test]
    fn inverse_from_cholesky_roundtrip() {
        let mut rng = seeded(3);
        let a = random_pd(&mut rng, 6);
        let l = cholesky(&a).unwrap();
        let inv = inverse_from_cholesky(&l);
        let prod = a.matmul(&inv);
        assert!(prod.max_abs_diff(&Tensor::eye(6)) < 1e-9);
    }

    #[test]
    fn jittered_cholesky_handles_near_singular() {
        // Rank-deficient PSD matrix: outer product.
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut a = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                *a.at_mut(i, j) = v.data[i] * v.data[j];
            }
        }
        let (l, _) = cholesky_jittered(&a).unwrap();
        let recon = l.matmul(&l.transpose());
        assert!(recon.max_abs_diff(&a) < 1e-4);
    }
}
