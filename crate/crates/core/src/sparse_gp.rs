//! Sparse-GP kernel algebra: exponentiated-quadratic kernels, inducing-point
//! projectors, the structured full-covariance posterior over all inducing
//! values, the per-latent factored baseline posterior, and Gaussian posterior
//! marginals over the affine embeddings.

use crate::error::{Error, Result};
use crate::tensor::{
    cholesky, cholesky_jittered, inverse_from_cholesky, logdet_from_cholesky, solve_lower,
    solve_psd, Tensor,
};

/// Exponentiated-quadratic kernel parameters for one latent process, stored
/// as log-parameters for unconstrained optimization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    pub log_marginal_variance: f64,
    pub log_lengthscale: f64,
}

impl KernelParams {
    pub fn new(marginal_variance: f64, lengthscale: f64) -> Self {
        assert!(marginal_variance > 0.0 && lengthscale > 0.0);
        KernelParams {
            log_marginal_variance: marginal_variance.ln(),
            log_lengthscale: lengthscale.ln(),
        }
    }

    pub fn marginal_variance(&self) -> f64 {
        self.log_marginal_variance.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }
}

/// `kappa(x, x') = lambda * exp(-||x - x'||^2 / tau^2)`.
pub fn eq_kernel(x: &[f64], x_other: &[f64], params: &KernelParams) -> f64 {
    let sq: f64 = x
        .iter()
        .zip(x_other.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tau = params.lengthscale();
    params.marginal_variance() * (-sq / (tau * tau)).exp()
}

/// Inducing-point model: per-latent kernel parameters and inducing
/// locations, plus the affine map from latent process values to embeddings.
#[derive(Debug, Clone)]
pub struct InducingModel {
    pub input_dim: usize,
    /// Inducing locations per latent, each `[M, input_dim]`.
    pub locations: Vec<Tensor>,
    pub kernels: Vec<KernelParams>,
    /// Mixing matrix `C`, `[N, K]`.
    pub mixing: Tensor,
    /// Offset `d`, `[N]`.
    pub offset: Tensor,
}

impl InducingModel {
    pub fn new(
        input_dim: usize,
        locations: Vec<Tensor>,
        kernels: Vec<KernelParams>,
        mixing: Tensor,
        offset: Tensor,
    ) -> Result<Self> {
        let k = locations.len();
        if k == 0 || kernels.len() != k {
            return Err(Error::InvalidConfig(
                "need one kernel per latent process".into(),
            ));
        }
        if mixing.shape.len() != 2 || mixing.shape[1] != k {
            return Err(Error::ShapeMismatch {
                op: "InducingModel",
                expected: format!("mixing [N, {k}]"),
                got: format!("{:?}", mixing.shape),
            });
        }
        let n = mixing.shape[0];
        if n == 0 || offset.len() != n || !mixing.all_finite() {
            return Err(Error::InvalidConfig(
                "mixing must be finite with matching offset".into(),
            ));
        }
        for (ki, z) in locations.iter().enumerate() {
            if z.shape.len() != 2 || z.shape[1] != input_dim {
                return Err(Error::ShapeMismatch {
                    op: "InducingModel",
                    expected: format!("locations [M, {input_dim}]"),
                    got: format!("{:?}", z.shape),
                });
            }
            let m = z.shape[0];
            for i in 0..m {
                for j in (i + 1)..m {
                    let d: f64 = (0..input_dim)
                        .map(|p| (z.at(i, p) - z.at(j, p)).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if d <= 1e-9 {
                        return Err(Error::InvalidConfig(format!(
                            "inducing locations {i} and {j} of latent {ki} coincide"
                        )));
                    }
                }
            }
        }
        Ok(InducingModel {
            input_dim,
            locations,
            kernels,
            mixing,
            offset,
        })
    }

    /// Evenly spaced scalar inducing grid over `[lo, hi]` for every latent.
    pub fn uniform_grid(lo: f64, hi: f64, m: usize) -> Tensor {
        let step = if m > 1 { (hi - lo) / (m - 1) as f64 } else { 0.0 };
        Tensor::new(
            vec![m, 1],
            (0..m).map(|i| lo + step * i as f64).collect(),
        )
    }

    pub fn latent_count(&self) -> usize {
        self.locations.len()
    }

    pub fn inducing_count(&self, k: usize) -> usize {
        self.locations[k].shape[0]
    }

    pub fn total_inducing(&self) -> usize {
        self.locations.iter().map(|z| z.shape[0]).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.mixing.shape[0]
    }

    /// `K_{z_k z_k}` with the standing `1e-8 * mean(diag)` diagonal jitter
    /// applied; all downstream algebra uses this jittered matrix so the
    /// prior, posterior and oracles stay mutually consistent.
    pub fn kernel_matrix(&self, k: usize) -> Tensor {
        let z = &self.locations[k];
        let m = z.shape[0];
        let params = &self.kernels[k];
        let mut out = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                out.data[i * m + j] = eq_kernel(
                    &z.data[i * self.input_dim..(i + 1) * self.input_dim],
                    &z.data[j * self.input_dim..(j + 1) * self.input_dim],
                    params,
                );
            }
        }
        let jitter = 1e-8 * (0..m).map(|i| out.at(i, i)).sum::<f64>() / m as f64;
        for i in 0..m {
            out.data[i * m + i] += jitter;
        }
        out
    }

    /// Kernel cross-vector `kappa_k(x, z_k)` as `[M]`.
    pub fn kernel_cross(&self, x: &[f64], k: usize) -> Tensor {
        let z = &self.locations[k];
        let m = z.shape[0];
        Tensor::vector(
            (0..m)
                .map(|j| {
                    eq_kernel(
                        x,
                        &z.data[j * self.input_dim..(j + 1) * self.input_dim],
                        &self.kernels[k],
                    )
                })
                .collect(),
        )
    }

    /// Block-diagonal prior covariance `K_U` over all inducing values.
    pub fn prior_covariance(&self) -> Tensor {
        let total = self.total_inducing();
        let mut out = Tensor::zeros(&[total, total]);
        let mut off = 0;
        for k in 0..self.latent_count() {
            let km = self.kernel_matrix(k);
            let m = km.shape[0];
            for i in 0..m {
                for j in 0..m {
                    out.data[(off + i) * total + off + j] = km.data[i * m + j];
                }
            }
            off += m;
        }
        out
    }

    /// Zero-mean prior `p(U)` as a dense Gaussian.
    pub fn prior_qu(&self) -> Result<GaussianDense> {
        let total = self.total_inducing();
        GaussianDense::new(Tensor::zeros(&[total]), self.prior_covariance())
    }
}

/// Full-covariance Gaussian carrying its (jitter-policy) Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDense {
    pub mean: Tensor,
    pub covariance: Tensor,
    pub chol: Tensor,
}

impl GaussianDense {
    /// Builds the Gaussian and factors its covariance, applying the jitter
    /// policy; the stored covariance is the jittered matrix so that
    /// `chol * chol^T` reconstructs it to round-off.
    pub fn new(mean: Tensor, covariance: Tensor) -> Result<Self> {
        let n = mean.len();
        if covariance.shape != vec![n, n] {
            return Err(Error::ShapeMismatch {
                op: "GaussianDense",
                expected: format!("[{n}, {n}]"),
                got: format!("{:?}", covariance.shape),
            });
        }
        // Symmetrize before factoring; assembly round-off is asymmetric.
        let mut cov = covariance;
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (cov.at(i, j) + cov.at(j, i));
                *cov.at_mut(i, j) = s;
                *cov.at_mut(j, i) = s;
            }
        }
        let (chol, jitter) = match cholesky(&cov) {
            Ok(l) => (l, 0.0),
            Err(_) => cholesky_jittered(&cov).map_err(|_| Error::NotPositiveDefinite {
                op: "GaussianDense",
                pivot: f64::NAN,
                index: 0,
            })?,
        };
        if jitter != 0.0 {
            for i in 0..n {
                *cov.at_mut(i, i) += jitter;
            }
        }
        Ok(GaussianDense {
            mean,
            covariance: cov,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Diagonal-Gaussian recognition potential: per-dimension means and strictly
/// positive variances.
#[derive(Debug, Clone)]
pub struct DiagonalGaussianPotential {
    pub mean: Tensor,
    pub variances: Tensor,
}

impl DiagonalGaussianPotential {
    pub fn new(mean: Tensor, variances: Tensor) -> Self {
        assert_eq!(mean.len(), variances.len());
        assert!(
            variances.data.iter().all(|&v| v > 0.0),
            "potential variances must be positive"
        );
        DiagonalGaussianPotential { mean, variances }
    }
}

/// Gaussian marginal over the embedding vector at one input, with the
/// Cholesky factor used for reparametrised sampling.
#[derive(Debug, Clone)]
pub struct PosteriorMarginal {
    pub mean: Tensor,
    pub covariance: Tensor,
    pub chol: Tensor,
}

/// `F_k(x) = kappa_k(x, z_k) K_{z_k z_k}^{-1}` as an `[M]` row.
pub fn projector(x: &[f64], k: usize, model: &InducingModel) -> Result<Tensor> {
    let kzz = model.kernel_matrix(k);
    let l = cholesky(&kzz).map_err(|e| promote_pd_error(e, "projector"))?;
    let cross = model.kernel_cross(x, k);
    Ok(solve_psd(&l, &cross))
}

/// Block-diagonal projector `F(x)` over all latents, `[K, total_M]`.
pub fn projector_block(x: &[f64], model: &InducingModel) -> Result<Tensor> {
    let k = model.latent_count();
    let total = model.total_inducing();
    let mut out = Tensor::zeros(&[k, total]);
    let mut off = 0;
    for ki in 0..k {
        let row = projector(x, ki, model)?;
        for (j, &v) in row.data.iter().enumerate() {
            out.data[ki * total + off + j] = v;
        }
        off += row.len();
    }
    Ok(out)
}

/// Conditional Gaussian over embeddings `h(x)` given all inducing values:
/// mean `C F(x) U + d`, covariance `C (K_x - F K_U F^T) C^T`.
pub fn conditional_h(x: &[f64], u: &Tensor, model: &InducingModel) -> Result<(Tensor, Tensor)> {
    let total = model.total_inducing();
    if u.len() != total {
        return Err(Error::ShapeMismatch {
            op: "conditional_h",
            expected: format!("[{total}]"),
            got: format!("{:?}", u.shape),
        });
    }
    let f = projector_block(x, model)?;
    let c = &model.mixing;
    let fu = f.matvec(u);
    let mut mean = c.matvec(&fu);
    for (m, d) in mean.data.iter_mut().zip(model.offset.data.iter()) {
        *m += d;
    }
    let kx = kx_diag(x, model);
    let ku = model.prior_covariance();
    let fk = f.matmul(&ku).matmul(&f.transpose());
    let mid = kx.sub(&fk);
    let cov = c.matmul(&mid).matmul(&c.transpose());
    Ok((mean, cov))
}

/// `K_x = diag[kappa_k(x, x)]`.
fn kx_diag(x: &[f64], model: &InducingModel) -> Tensor {
    let k = model.latent_count();
    let mut out = Tensor::zeros(&[k, k]);
    for ki in 0..k {
        out.data[ki * k + ki] = eq_kernel(x, x, &model.kernels[ki]);
    }
    out
}

/// Structured full-covariance posterior over all inducing values:
/// `S_U^{-1} = K_U^{-1} + sum_t F_t^T C^T Psi_t^{-1} C F_t`,
/// `m_U = S_U sum_t F_t^T C^T Psi_t^{-1} (mu_t - d)`.
///
/// The returned covariance is the full (non-block-diagonal) matrix over all
/// latents, which is where the explaining-away coupling lives.
pub fn structured_qu(
    potentials: &[(Vec<f64>, DiagonalGaussianPotential)],
    model: &InducingModel,
) -> Result<GaussianDense> {
    if potentials.is_empty() {
        return model.prior_qu();
    }
    let total = model.total_inducing();
    let n = model.output_dim();
    // K_U^{-1} assembled blockwise through Cholesky solves, never by a
    // direct inverse of the full matrix.
    let mut prec = Tensor::zeros(&[total, total]);
    let mut off = 0;
    for k in 0..model.latent_count() {
        let kzz = model.kernel_matrix(k);
        let l = cholesky(&kzz).map_err(|e| promote_pd_error(e, "structured_qu"))?;
        let inv = inverse_from_cholesky(&l);
        let m = inv.shape[0];
        for i in 0..m {
            for j in 0..m {
                prec.data[(off + i) * total + off + j] = inv.data[i * m + j];
            }
        }
        off += m;
    }
    let mut rhs = Tensor::zeros(&[total]);
    for (x, pot) in potentials {
        if pot.mean.len() != n {
            return Err(Error::ShapeMismatch {
                op: "structured_qu",
                expected: format!("potential dim {n}"),
                got: format!("{}", pot.mean.len()),
            });
        }
        let f = projector_block(x, model)?;
        let g = model.mixing.matmul(&f); // [N, total]
        for a in 0..n {
            let w = 1.0 / pot.variances.data[a];
            let resid = (pot.mean.data[a] - model.offset.data[a]) * w;
            let grow = &g.data[a * total..(a + 1) * total];
            for i in 0..total {
                let gi = grow[i];
                if gi == 0.0 {
                    continue;
                }
                rhs.data[i] += gi * resid;
                let wg = w * gi;
                for j in 0..total {
                    prec.data[i * total + j] += wg * grow[j];
                }
            }
        }
    }
    let lp = match cholesky(&prec) {
        Ok(l) => l,
        Err(_) => {
            cholesky_jittered(&prec)
                .map_err(|e| promote_pd_error(e, "structured_qu precision"))?
                .0
        }
    };
    let mean = solve_psd(&lp, &rhs);
    let cov = inverse_from_cholesky(&lp);
    GaussianDense::new(mean, cov)
}

/// Factored (per-latent) posterior, SGP-VAE style: the recognition potential
/// constrains each latent process value `f_k(x_t)` independently, so
/// `q(u_k) ∝ p(u_k) prod_t N(F_k(x_t) u_k; mu_tk, psi_tk)` and the implied
/// joint covariance is block-diagonal. Potentials here have dimension `K`.
pub fn factored_qu(
    potentials: &[(Vec<f64>, DiagonalGaussianPotential)],
    model: &InducingModel,
) -> Result<Vec<GaussianDense>> {
    let kcount = model.latent_count();
    let mut out = Vec::with_capacity(kcount);
    for k in 0..kcount {
        let kzz = model.kernel_matrix(k);
        let l = cholesky(&kzz).map_err(|e| promote_pd_error(e, "factored_qu"))?;
        let mut prec = inverse_from_cholesky(&l);
        let m = prec.shape[0];
        let mut rhs = Tensor::zeros(&[m]);
        for (x, pot) in potentials {
            if pot.mean.len() != kcount {
                return Err(Error::ShapeMismatch {
                    op: "factored_qu",
                    expected: format!("potential dim {kcount}"),
                    got: format!("{}", pot.mean.len()),
                });
            }
            let fk = projector(x, k, model)?;
            let w = 1.0 / pot.variances.data[k];
            let mu = pot.mean.data[k];
            for i in 0..m {
                rhs.data[i] += fk.data[i] * w * mu;
                for j in 0..m {
                    prec.data[i * m + j] += fk.data[i] * w * fk.data[j];
                }
            }
        }
        let lp = match cholesky(&prec) {
            Ok(l) => l,
            Err(_) => {
                cholesky_jittered(&prec)
                    .map_err(|e| promote_pd_error(e, "factored_qu precision"))?
                    .0
            }
        };
        let mean = solve_psd(&lp, &rhs);
        let cov = inverse_from_cholesky(&lp);
        out.push(GaussianDense::new(mean, cov)?);
    }
    Ok(out)
}

/// Gaussian marginal of the embeddings at `x` under a structured `q(U)`:
/// mean `C F m_U + d`, covariance `C (K_x + F (S_U - K_U) F^T) C^T`.
pub fn posterior_h_marginal(
    x: &[f64],
    qu: &GaussianDense,
    model: &InducingModel,
) -> Result<PosteriorMarginal> {
    let total = model.total_inducing();
    if qu.dim() != total {
        return Err(Error::ShapeMismatch {
            op: "posterior_h_marginal",
            expected: format!("[{total}]"),
            got: format!("{}", qu.dim()),
        });
    }
    let f = projector_block(x, model)?;
    let c = &model.mixing;
    let fm = f.matvec(&qu.mean);
    let mut mean = c.matvec(&fm);
    for (m, d) in mean.data.iter_mut().zip(model.offset.data.iter()) {
        *m += d;
    }
    let kx = kx_diag(x, model);
    let delta = qu.covariance.sub(&model.prior_covariance());
    let fdf = f.matmul(&delta).matmul(&f.transpose());
    let mid = kx.add(&fdf);
    let cov = c.matmul(&mid).matmul(&c.transpose());
    let g = GaussianDense::new(mean, cov)
        .map_err(|e| promote_pd_error(e, "posterior_h_marginal"))?;
    Ok(PosteriorMarginal {
        mean: g.mean,
        covariance: g.covariance,
        chol: g.chol,
    })
}

/// Per-output posterior mean and variance under a factored posterior, using
/// the per-latent marginal form
/// `m_n = sum_k c_nk F_k m_k + d_n`,
/// `var_n = sum_k c_nk^2 (kappa_k(x,x) + F_k (S_k - K_zz) F_k^T)`.
pub fn factored_posterior_h(
    x: &[f64],
    qus: &[GaussianDense],
    model: &InducingModel,
) -> Result<(Tensor, Tensor)> {
    let kcount = model.latent_count();
    if qus.len() != kcount {
        return Err(Error::ShapeMismatch {
            op: "factored_posterior_h",
            expected: format!("{kcount} per-latent posteriors"),
            got: format!("{}", qus.len()),
        });
    }
    let n = model.output_dim();
    let mut mean = model.offset.clone();
    let mut var = Tensor::zeros(&[n]);
    for k in 0..kcount {
        let fk = projector(x, k, model)?;
        let fm = fk.dot(&qus[k].mean);
        let delta = qus[k].covariance.sub(&model.kernel_matrix(k));
        let fdel = delta.matvec(&fk);
        let fdf = fk.dot(&fdel);
        let kxx = eq_kernel(x, x, &model.kernels[k]);
        for ni in 0..n {
            let c = model.mixing.at(ni, k);
            mean.data[ni] += c * fm;
            var.data[ni] += c * c * (kxx + fdf);
        }
    }
    Ok((mean, var))
}

/// Closed-form KL divergence between full-covariance Gaussians.
pub fn gaussian_kl(q: &GaussianDense, p: &GaussianDense) -> Result<f64> {
    let d = q.dim();
    if p.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "gaussian_kl",
            expected: format!("{d}"),
            got: format!("{}", p.dim()),
        });
    }
    // tr(Sp^{-1} Sq) = ||Lp^{-1} Lq||_F^2
    let a = solve_lower(&p.chol, &q.chol);
    let trace: f64 = a.data.iter().map(|v| v * v).sum();
    let diff = p.mean.sub(&q.mean);
    let y = solve_lower(&p.chol, &diff);
    let quad: f64 = y.data.iter().map(|v| v * v).sum();
    let logdet_p = logdet_from_cholesky(&p.chol);
    let logdet_q = logdet_from_cholesky(&q.chol);
    Ok(0.5 * (trace + quad - d as f64 + logdet_p - logdet_q))
}

fn promote_pd_error(e: Error, op: &'static str) -> Error {
    match e {
        Error::NotPositiveDefinite { pivot, index, .. } => {
            Error::NotPositiveDefinite { op, pivot, index }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform_tensor, Prng};

    fn toy_model(k: usize, m: usize, n: usize, rng: &mut Prng) -> InducingModel {
        let locations: Vec<Tensor> = (0..k)
            .map(|_| {
                let mut z = InducingModel::uniform_grid(0.0, 1.0, m);
                for v in z.data.iter_mut() {
                    *v += crate::rng::uniform(rng, -0.01, 0.01);
                }
                z
            })
            .collect();
        let kernels = (0..k)
            .map(|_| KernelParams::new(crate::rng::uniform(rng, 0.5, 2.0), 0.7))
            .collect();
        let mixing = uniform_tensor(rng, &[n, k], -1.0, 1.0);
        let offset = uniform_tensor(rng, &[n], -0.5, 0.5);
        InducingModel::new(1, locations, kernels, mixing, offset).unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_is_marginal_variance() {
        let p = KernelParams::new(2.5, 0.8);
        assert!((eq_kernel(&[0.3], &[0.3], &p) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn kernel_unit_distance() {
        let p = KernelParams::new(1.0, 1.0);
        let v = eq_kernel(&[0.0], &[1.0], &p);
        assert!((v - (-1.0f64).exp()).abs() < 1e-10);
        assert!((v - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn kernel_decays_monotonically() {
        let p = KernelParams::new(1.3, 0.9);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let v = eq_kernel(&[0.0], &[0.2 * i as f64], &p);
            assert!(v <= prev);
            prev = v;
        }
        assert!(eq_kernel(&[0.0], &[100.0], &p) < 1e-12);
    }

    #[test]
    fn projector_interpolates_at_inducing_locations() {
        // Kernel-regression interpolation: exact basis rows at the inducing
        // locations (grid spaced wide enough that the standing jitter does
        // not get amplified by conditioning).
        let z = InducingModel::uniform_grid(0.0, 4.0, 5);
        let model = InducingModel::new(
            1,
            vec![z.clone()],
            vec![KernelParams::new(1.3, 0.7)],
            Tensor::matrix(&[vec![1.0]]),
            Tensor::vector(vec![0.0]),
        )
        .unwrap();
        for j in 0..5 {
            let x = vec![z.at(j, 0)];
            let row = projector(&x, 0, &model).unwrap();
            for (i, &v) in row.data.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                // The standing 1e-8 relative jitter perturbs the diagonal by
                // exactly its own magnitude, so the achievable accuracy here
                // is the jitter floor, not solver round-off.
                assert!((v - expect).abs() < 1e-7, "row {:?}", row.data);
            }
        }
    }

    #[test]
    fn projector_single_inducing_point_closed_form() {
        let z = Tensor::new(vec![1, 1], vec![0.4]);
        let kp = KernelParams::new(1.7, 0.6);
        let model = InducingModel::new(
            1,
            vec![z],
            vec![kp.clone()],
            Tensor::matrix(&[vec![1.0]]),
            Tensor::vector(vec![0.0]),
        )
        .unwrap();
        let x = [1.1];
        let row = projector(&x, 0, &model).unwrap();
        // F(x) = kappa(x, z) / kappa(z, z) = exp(-(x-z)^2 / tau^2), up to the
        // diagonal jitter on kappa(z, z).
        let expect = eq_kernel(&x, &[0.4], &kp) / (kp.marginal_variance() * (1.0 + 1e-8));
        assert!((row.data[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn projector_vanishes_far_from_inducing_points() {
        let mut rng = seeded(3);
        let model = toy_model(1, 4, 2, &mut rng);
        let row = projector(&[50.0], 0, &model).unwrap();
        assert!(row.data.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn conditional_h_zero_residual_at_inducing_points() {
        // One shared grid for every latent: conditioning on U leaves no
        // residual uncertainty at the grid points.
        let mut rng = seeded(5);
        let model = toy_model(2, 4, 3, &mut rng);
        let u = uniform_tensor(&mut rng, &[8], -1.0, 1.0);
        let x = vec![model.locations[0].at(1, 0)];
        // Use latent 0's grid point; latent 1's grid is perturbed, so make
        // both grids share this location for the test.
        let mut model2 = model.clone();
        model2.locations[1] = model.locations[0].clone();
        let (_, cov) = conditional_h(&x, &u, &model2).unwrap();
        assert!(cov.frobenius_norm() < 1e-6, "residual {}", cov.frobenius_norm());
    }

    #[test]
    fn conditional_h_zero_mixing() {
        let mut rng = seeded(6);
        let mut model = toy_model(2, 3, 4, &mut rng);
        model.mixing = Tensor::zeros(&[4, 2]);
        model.offset = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        let u = uniform_tensor(&mut rng, &[6], -1.0, 1.0);
        let (mean, cov) = conditional_h(&[0.5], &u, &model).unwrap();
        assert!(mean.max_abs_diff(&model.offset) < 1e-12);
        assert!(cov.frobenius_norm() == 0.0);
    }

    #[test]
    fn conditional_h_matches_scalar_gp_conditioning() {
        // K = 1, M = 2, C = [[1]], d = 0: h(x) | U is the textbook GP
        // conditional with mean k_x K^{-1} u and variance k_xx - k_x K^{-1} k_x^T.
        let z = Tensor::new(vec![2, 1], vec![0.0, 1.0]);
        let kp = KernelParams::new(1.2, 0.8);
        let model = InducingModel::new(
            1,
            vec![z],
            vec![kp.clone()],
            Tensor::matrix(&[vec![1.0]]),
            Tensor::vector(vec![0.0]),
        )
        .unwrap();
        let u = Tensor::vector(vec![0.7, -0.3]);
        let x = [0.4];
        let (mean, cov) = conditional_h(&x, &u, &model).unwrap();

        let kzz = model.kernel_matrix(0);
        let det = kzz.at(0, 0) * kzz.at(1, 1) - kzz.at(0, 1) * kzz.at(1, 0);
        let inv = Tensor::matrix(&[
            vec![kzz.at(1, 1) / det, -kzz.at(0, 1) / det],
            vec![-kzz.at(1, 0) / det, kzz.at(0, 0) / det],
        ]);
        let kx = model.kernel_cross(&x, 0);
        let w = inv.matvec(&kx);
        let mean_expect = w.dot(&u);
        let var_expect = eq_kernel(&x, &x, &kp) - w.dot(&kx);
        assert!((mean.data[0] - mean_expect).abs() < 1e-10);
        assert!((cov.data[0] - var_expect).abs() < 1e-10);
    }

    #[test]
    fn structured_qu_empty_potentials_recovers_prior() {
        let mut rng = seeded(7);
        let model = toy_model(2, 3, 4, &mut rng);
        let q = structured_qu(&[], &model).unwrap();
        assert!(q.mean.frobenius_norm() == 0.0);
        assert!(q.covariance.max_abs_diff(&model.prior_covariance()) < 1e-12);
    }

    #[test]
    fn structured_qu_uninformative_potentials_approach_prior() {
        let mut rng = seeded(8);
        let model = toy_model(2, 3, 4, &mut rng);
        let pots: Vec<(Vec<f64>, DiagonalGaussianPotential)> = (0..5)
            .map(|t| {
                (
                    vec![t as f64 * 0.2],
                    DiagonalGaussianPotential::new(
                        uniform_tensor(&mut rng, &[4], -1.0, 1.0),
                        Tensor::vector(vec![1e8; 4]),
                    ),
                )
            })
            .collect();
        let q = structured_qu(&pots, &model).unwrap();
        let prior = model.prior_covariance();
        assert!(q.covariance.max_abs_diff(&prior) < 1e-6);
        assert!(q.mean.frobenius_norm() < 1e-3);
    }

    #[test]
    fn factored_qu_empty_potentials_recovers_priors() {
        let mut rng = seeded(9);
        let model = toy_model(3, 4, 3, &mut rng);
        let qs = factored_qu(&[], &model).unwrap();
        for (k, q) in qs.iter().enumerate() {
            assert!(q.mean.frobenius_norm() < 1e-12);
            assert!(q.covariance.max_abs_diff(&model.kernel_matrix(k)) < 1e-9);
        }
    }

    #[test]
    fn factored_matches_structured_for_single_latent_identity_mixing() {
        let mut rng = seeded(10);
        let z = InducingModel::uniform_grid(0.0, 1.0, 3);
        let model = InducingModel::new(
            1,
            vec![z],
            vec![KernelParams::new(1.0, 0.5)],
            Tensor::matrix(&[vec![1.0]]),
            Tensor::vector(vec![0.0]),
        )
        .unwrap();
        let pots: Vec<(Vec<f64>, DiagonalGaussianPotential)> = (0..4)
            .map(|t| {
                (
                    vec![0.3 * t as f64],
                    DiagonalGaussianPotential::new(
                        uniform_tensor(&mut rng, &[1], -1.0, 1.0),
                        uniform_tensor(&mut rng, &[1], 0.2, 1.0),
                    ),
                )
            })
            .collect();
        let qs = factored_qu(&pots, &model).unwrap();
        let q = structured_qu(&pots, &model).unwrap();
        assert!(qs[0].mean.max_abs_diff(&q.mean) < 1e-8);
        assert!(qs[0].covariance.max_abs_diff(&q.covariance) < 1e-8);
    }

    #[test]
    fn posterior_h_at_prior_reduces_to_prior_marginal() {
        let mut rng = seeded(11);
        let model = toy_model(2, 3, 4, &mut rng);
        let prior = model.prior_qu().unwrap();
        let x = [0.45];
        let post = posterior_h_marginal(&x, &prior, &model).unwrap();
        // Mean d, covariance C K_x C^T.
        assert!(post.mean.max_abs_diff(&model.offset) < 1e-8);
        let kx = kx_diag(&x, &model);
        let expect = model.mixing.matmul(&kx).matmul(&model.mixing.transpose());
        assert!(post.covariance.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn posterior_h_interpolates_mean_with_identity_mixing() {
        let mut rng = seeded(12);
        let z = InducingModel::uniform_grid(0.0, 2.0, 4);
        let model = InducingModel::new(
            1,
            vec![z.clone(), z.clone()],
            vec![KernelParams::new(1.0, 0.8), KernelParams::new(1.0, 0.8)],
            Tensor::eye(2),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let pots: Vec<(Vec<f64>, DiagonalGaussianPotential)> = (0..6)
            .map(|t| {
                (
                    vec![0.4 * t as f64],
                    DiagonalGaussianPotential::new(
                        uniform_tensor(&mut rng, &[2], -1.0, 1.0),
                        uniform_tensor(&mut rng, &[2], 0.05, 0.2),
                    ),
                )
            })
            .collect();
        let q = structured_qu(&pots, &model).unwrap();
        let x = vec![z.at(2, 0)];
        let post = posterior_h_marginal(&x, &q, &model).unwrap();
        // With C = I and x on the grid, h-mean equals the matching m_U rows.
        assert!((post.mean.data[0] - q.mean.data[2]).abs() < 1e-7);
        assert!((post.mean.data[1] - q.mean.data[4 + 2]).abs() < 1e-7);
    }

    #[test]
    fn gaussian_kl_of_identical_distributions_is_zero() {
        let mut rng = seeded(13);
        let model = toy_model(2, 3, 4, &mut rng);
        let p = model.prior_qu().unwrap();
        let kl = gaussian_kl(&p, &p).unwrap();
        assert!(kl.abs() < 1e-10);
    }

    #[test]
    fn gaussian_kl_one_dimensional_closed_form() {
        let q = GaussianDense::new(Tensor::vector(vec![1.0]), Tensor::matrix(&[vec![1.0]])).unwrap();
        let p = GaussianDense::new(Tensor::vector(vec![0.0]), Tensor::matrix(&[vec![1.0]])).unwrap();
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn gaussian_kl_nonnegative_and_shape_checked() {
        let mut rng = seeded(14);
        for _ in 0..20 {
            let b = uniform_tensor(&mut rng, &[3, 3], -1.0, 1.0);
            let mut cov_q = b.matmul(&b.transpose());
            for i in 0..3 {
                *cov_q.at_mut(i, i) += 1.0;
            }
            let b2 = uniform_tensor(&mut rng, &[3, 3], -1.0, 1.0);
            let mut cov_p = b2.matmul(&b2.transpose());
            for i in 0..3 {
                *cov_p.at_mut(i, i) += 1.0;
            }
            let q = GaussianDense::new(uniform_tensor(&mut rng, &[3], -1.0, 1.0), cov_q).unwrap();
            let p = GaussianDense::new(uniform_tensor(&mut rng, &[3], -1.0, 1.0), cov_p).unwrap();
            assert!(gaussian_kl(&q, &p).unwrap() >= -1e-10);
        }
        let q = GaussianDense::new(Tensor::vector(vec![0.0]), Tensor::matrix(&[vec![1.0]])).unwrap();
        let p = GaussianDense::new(Tensor::zeros(&[2]), Tensor::eye(2)).unwrap();
        assert!(matches!(
            gaussian_kl(&q, &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn factored_posterior_h_prior_variance_closed_form() {
        let mut rng = seeded(15);
        let model = toy_model(2, 3, 4, &mut rng);
        let priors: Vec<GaussianDense> = (0..2)
            .map(|k| {
                GaussianDense::new(Tensor::zeros(&[3]), model.kernel_matrix(k)).unwrap()
            })
            .collect();
        let x = [0.37];
        let (mean, var) = factored_posterior_h(&x, &priors, &model).unwrap();
        assert!(mean.max_abs_diff(&model.offset) < 1e-7);
        for n in 0..4 {
            let expect: f64 = (0..2)
                .map(|k| model.mixing.at(n, k).powi(2) * eq_kernel(&x, &x, &model.kernels[k]))
                .sum();
            assert!((var.data[n] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn factored_posterior_h_zero_mixing() {
        let mut rng = seeded(16);
        let mut model = toy_model(2, 3, 4, &mut rng);
        model.mixing = Tensor::zeros(&[4, 2]);
        let priors: Vec<GaussianDense> = (0..2)
            .map(|k| GaussianDense::new(Tensor::zeros(&[3]), model.kernel_matrix(k)).unwrap())
            .collect();
        let (mean, var) = factored_posterior_h(&[0.2], &priors, &model).unwrap();
        assert!(mean.max_abs_diff(&model.offset) < 1e-12);
        assert!(var.frobenius_norm() == 0.0);
    }

    #[test]
    fn factored_posterior_h_consistent_with_block_diagonal_structured() {
        let mut rng = seeded(17);
        let model = toy_model(2, 3, 4, &mut rng);
        let pots: Vec<(Vec<f64>, DiagonalGaussianPotential)> = (0..5)
            .map(|t| {
                (
                    vec![0.25 * t as f64],
                    DiagonalGaussianPotential::new(
                        uniform_tensor(&mut rng, &[2], -1.0, 1.0),
                        uniform_tensor(&mut rng, &[2], 0.1, 0.5),
                    ),
                )
            })
            .collect();
        let qs = factored_qu(&pots, &model).unwrap();
        // Assemble the block-diagonal joint and push it through the
        // structured marginal formula.
        let total = model.total_inducing();
        let mut mean = Tensor::zeros(&[total]);
        let mut cov = Tensor::zeros(&[total, total]);
        let mut off = 0;
        for q in &qs {
            let m = q.dim();
            for i in 0..m {
                mean.data[off + i] = q.mean.data[i];
                for j in 0..m {
                    cov.data[(off + i) * total + off + j] = q.covariance.data[i * m + j];
                }
            }
            off += m;
        }
        let joint = GaussianDense::new(mean, cov).unwrap();
        let x = [0.61];
        let post = posterior_h_marginal(&x, &joint, &model).unwrap();
        let (fmean, fvar) = factored_posterior_h(&x, &qs, &model).unwrap();
        assert!(post.mean.max_abs_diff(&fmean) < 1e-10);
        for n in 0..4 {
            assert!((post.covariance.at(n, n) - fvar.data[n]).abs() < 1e-8);
        }
    }

    #[test]
    fn information_monotonicity_of_structured_qu() {
        let mut rng = seeded(18);
        for trial in 0..20 {
            let model = toy_model(2, 3, 3, &mut rng);
            let mut pots: Vec<(Vec<f64>, DiagonalGaussianPotential)> = Vec::new();
            let mut prev = structured_qu(&pots, &model).unwrap();
            for t in 0..4 {
                pots.push((
                    vec![crate::rng::uniform(&mut rng, 0.0, 1.0)],
                    DiagonalGaussianPotential::new(
                        uniform_tensor(&mut rng, &[3], -1.0, 1.0),
                        uniform_tensor(&mut rng, &[3], 0.1, 2.0),
                    ),
                ));
                let q = structured_qu(&pots, &model).unwrap();
                for i in 0..q.dim() {
                    assert!(
                        q.covariance.at(i, i) <= prev.covariance.at(i, i) + 1e-9,
                        "trial {trial} t {t} diag {i} grew"
                    );
                }
                prev = q;
            }
        }
    }
}
