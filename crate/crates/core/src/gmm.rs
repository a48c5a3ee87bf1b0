//! SRVAE-GMM: Gaussian-mixture latent prior with a full-covariance Gaussian
//! recognition potential per point. The mixture posterior given one Gaussian
//! evidence potential is available in closed form (responsibilities from the
//! Gaussian convolution evidence, components from Gaussian products), so the
//! combination step is exact and non-iterative.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{checkpoint_to_json, MetricTrace, TrainConfig};
use crate::likelihood::gaussian_loglik_tape;
use crate::rng::{self, Prng};
use crate::sparse_gp::GaussianDense;
use crate::tape::{mlp_forward, mlp_forward_pure, Activation, ParamId, ParamSet, Tape, Var};
use crate::tensor::{
    cholesky, inverse_from_cholesky, log_sum_exp, logdet_from_cholesky, solve_lower, solve_psd,
    Tensor,
};

const LN_2PI: f64 = 1.8378770664093453;
const DIAG_FLOOR: f64 = 1e-3;

/// Mixture prior in moment form.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Tensor>,
    pub covariances: Vec<Tensor>,
}

impl GmmPrior {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means[0].len()
    }
}

/// Exact posterior over (component, latent) given one Gaussian potential.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    pub responsibilities: Vec<f64>,
    pub components: Vec<GaussianDense>,
}

/// Exact combination of a mixture prior with a full-covariance Gaussian
/// potential: responsibilities `q(z=j) ∝ pi_j N(m_r; mu_j, Sigma_j + Sigma_r)`,
/// components `q(h|z=j)` the Gaussian product of prior component and
/// potential.
pub fn combine_gmm(
    prior: &GmmPrior,
    potential_mean: &Tensor,
    potential_cov: &Tensor,
) -> Result<MixturePosterior> {
    let d = prior.latent_dim();
    if potential_mean.len() != d || potential_cov.shape != vec![d, d] {
        return Err(Error::ShapeMismatch {
            op: "combine_gmm",
            expected: format!("potential of dim {d}"),
            got: format!("{:?} / {:?}", potential_mean.shape, potential_cov.shape),
        });
    }
    let lr = cholesky(potential_cov).map_err(|e| pd("combine_gmm potential", e))?;
    let lambda_r = inverse_from_cholesky(&lr);
    let eta_r = solve_psd(&lr, potential_mean);

    let mut log_weights = Vec::with_capacity(prior.components());
    let mut components = Vec::with_capacity(prior.components());
    for j in 0..prior.components() {
        let sum_cov = prior.covariances[j].add(potential_cov);
        let ls = cholesky(&sum_cov).map_err(|e| pd("combine_gmm evidence", e))?;
        let resid = potential_mean.sub(&prior.means[j]);
        let y = solve_lower(&ls, &resid);
        let quad: f64 = y.data.iter().map(|v| v * v).sum();
        let log_ev = -0.5 * (d as f64 * LN_2PI + logdet_from_cholesky(&ls) + quad);
        log_weights.push(prior.weights[j].max(1e-300).ln() + log_ev);

        let lj = cholesky(&prior.covariances[j]).map_err(|e| pd("combine_gmm prior", e))?;
        let lambda_j = inverse_from_cholesky(&lj);
        let eta_j = solve_psd(&lj, &prior.means[j]);
        let prec = lambda_j.add(&lambda_r);
        let lp = cholesky(&prec).map_err(|e| pd("combine_gmm posterior", e))?;
        let cov = inverse_from_cholesky(&lp);
        let mean = solve_psd(&lp, &eta_j.add(&eta_r));
        components.push(GaussianDense::new(mean, cov)?);
    }
    let lse = log_sum_exp(&log_weights);
    let responsibilities: Vec<f64> = log_weights.iter().map(|&w| (w - lse).exp()).collect();
    Ok(MixturePosterior {
        responsibilities,
        components,
    })
}

fn pd(op: &'static str, e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite { pivot, index, .. } => {
            Error::NotPositiveDefinite { op, pivot, index }
        }
        other => other,
    }
}

// ── Model ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GmmSrvaeConfig {
    pub components: usize,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for GmmSrvaeConfig {
    fn default() -> Self {
        GmmSrvaeConfig {
            components: 10,
            latent_dim: 2,
            data_dim: 2,
            hidden: 50,
            seed: 0,
        }
    }
}

struct GmmIds {
    pi_logits: ParamId,
    comp_means: ParamId,
    comp_log_diag: ParamId,
    comp_off: ParamId,
    rec: Vec<(ParamId, ParamId)>,
    gen: Vec<(ParamId, ParamId)>,
    log_noise_var: ParamId,
}

/// SRVAE with a Gaussian-mixture latent prior. The recognition network emits
/// a full-covariance Gaussian potential per point through a Cholesky
/// parameterization with softplus diagonal; prior parameters are trained by
/// direct gradient.
pub struct GmmSrvae {
    pub config: GmmSrvaeConfig,
    pub params: ParamSet,
    ids: GmmIds,
}

fn off_count(d: usize) -> usize {
    d * (d - 1) / 2
}

fn init_linear(rng: &mut Prng, params: &mut ParamSet, name: &str, out: usize, inp: usize) -> (ParamId, ParamId) {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = params.add(
        &format!("{name}.w"),
        rng::uniform_tensor(rng, &[out, inp], -bound, bound),
    );
    let b = params.add(&format!("{name}.b"), Tensor::zeros(&[out]));
    (w, b)
}

impl GmmSrvae {
    pub fn new(config: GmmSrvaeConfig) -> Self {
        let mut rng = rng::seeded(config.seed);
        let mut params = ParamSet::new();
        let j = config.components;
        let d = config.latent_dim;
        let pi_logits = params.add("prior.pi_logits", Tensor::zeros(&[j]));
        let comp_means = params.add(
            "prior.means",
            rng::uniform_tensor(&mut rng, &[j, d], -1.5, 1.5),
        );
        // softplus(0.4) + floor ~ 0.91 std per dimension at init.
        let comp_log_diag = params.add(
            "prior.chol_diag_raw",
            Tensor::new(vec![j, d], vec![0.4; j * d]),
        );
        let comp_off = params.add("prior.chol_off", Tensor::zeros(&[j, off_count(d).max(1)]));
        let rec_out = 2 * d + off_count(d);
        let rec = vec![
            init_linear(&mut rng, &mut params, "rec.l1", config.hidden, config.data_dim),
            init_linear(&mut rng, &mut params, "rec.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "rec.head", rec_out, config.hidden),
        ];
        let gen = vec![
            init_linear(&mut rng, &mut params, "gen.l1", config.hidden, d),
            init_linear(&mut rng, &mut params, "gen.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "gen.head", config.data_dim, config.hidden),
        ];
        let log_noise_var = params.add("gen.log_noise_var", Tensor::scalar((0.5f64).powi(2).ln()));
        GmmSrvae {
            config,
            params,
            ids: GmmIds {
                pi_logits,
                comp_means,
                comp_log_diag,
                comp_off,
                rec,
                gen,
                log_noise_var,
            },
        }
    }

    /// Current prior parameters in moment form.
    pub fn prior(&self) -> GmmPrior {
        let j = self.config.components;
        let d = self.config.latent_dim;
        let logits = &self.params.value(self.ids.pi_logits).data;
        let lse = log_sum_exp(logits);
        let weights = logits.iter().map(|&l| (l - lse).exp()).collect();
        let means_flat = self.params.value(self.ids.comp_means);
        let diag_raw = self.params.value(self.ids.comp_log_diag);
        let off_raw = self.params.value(self.ids.comp_off);
        let mut means = Vec::new();
        let mut covariances = Vec::new();
        for ji in 0..j {
            means.push(Tensor::vector(
                means_flat.data[ji * d..(ji + 1) * d].to_vec(),
            ));
            let mut l = Tensor::zeros(&[d, d]);
            let mut k = 0;
            for r in 0..d {
                for c in 0..r {
                    l.data[r * d + c] = off_raw.data[ji * off_count(d).max(1) + k];
                    k += 1;
                }
                let raw = diag_raw.data[ji * d + r];
                l.data[r * d + r] = softplus(raw) + DIAG_FLOOR;
            }
            covariances.push(l.matmul(&l.transpose()));
        }
        GmmPrior {
            weights,
            means,
            covariances,
        }
    }

    /// Pure recognition pass: per-point potential (mean, covariance).
    pub fn recognize(&self, y: &Tensor) -> Vec<(Tensor, Tensor)> {
        let d = self.config.latent_dim;
        let layers: Vec<(Tensor, Tensor)> = self
            .ids
            .rec
            .iter()
            .map(|&(w, b)| {
                (
                    self.params.value(w).clone(),
                    self.params.value(b).clone(),
                )
            })
            .collect();
        let out = mlp_forward_pure(&layers, Activation::Identity, y);
        let b = y.shape[0];
        let noff = off_count(d);
        (0..b)
            .map(|bi| {
                let row = &out.data[bi * (2 * d + noff)..(bi + 1) * (2 * d + noff)];
                let mean = Tensor::vector(row[0..d].to_vec());
                let mut l = Tensor::zeros(&[d, d]);
                let mut k = 0;
                for r in 0..d {
                    for c in 0..r {
                        l.data[r * d + c] = row[2 * d + k];
                        k += 1;
                    }
                    l.data[r * d + r] = softplus(row[d + r]) + DIAG_FLOOR;
                }
                (mean, l.matmul(&l.transpose()))
            })
            .collect()
    }

    /// Builds the free energy on a fresh tape with noise drawn from `rng`.
    /// Returns the tape, the scalar objective, and (recon, kl) nodes for
    /// metric traces. The value is the per-point mean.
    pub fn free_energy(
        &self,
        y: &Tensor,
        mc_samples: usize,
        rng: &mut Prng,
    ) -> Result<(Tape, Var, Var, Var)> {
        let b = y.shape[0];
        let noise = rng::normal_tensor(
            rng,
            &[b * self.config.components * mc_samples, self.config.latent_dim],
        );
        self.free_energy_with_noise(y, mc_samples, &noise)
    }

    /// Same objective with the reparametrisation noise fixed by the caller
    /// (finite-difference tests and the relabeling-invariance check).
    /// `noise` is `[(B * J * S), latent_dim]`, laid out point-major then
    /// component then sample.
    pub fn free_energy_with_noise(
        &self,
        y: &Tensor,
        mc_samples: usize,
        noise: &Tensor,
    ) -> Result<(Tape, Var, Var, Var)> {
        if y.shape.len() != 2 || y.shape[1] != self.config.data_dim {
            return Err(Error::ShapeMismatch {
                op: "gmm_free_energy",
                expected: format!("[B, {}]", self.config.data_dim),
                got: format!("{:?}", y.shape),
            });
        }
        let b = y.shape[0];
        if b == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let d = self.config.latent_dim;
        let jn = self.config.components;
        let noff = off_count(d);
        let s = mc_samples.max(1);
        let mut tape = Tape::new();

        // Prior pieces shared across the batch.
        let pi_logits = tape.param(&self.params, self.ids.pi_logits);
        let pi_lse = tape.logsumexp_rows(pi_logits);
        let pi_lse_vec = tape.repeat_scalar(pi_lse, jn);
        let log_pi = tape.sub(pi_logits, pi_lse_vec);
        let comp_means = tape.param(&self.params, self.ids.comp_means);
        let comp_diag_raw = tape.param(&self.params, self.ids.comp_log_diag);
        let comp_off = tape.param(&self.params, self.ids.comp_off);
        let eye = tape.constant(Tensor::eye(d));

        struct PriorComp {
            mean: Var,
            cov: Var,
            chol: Var,
            lambda: Var,
            eta: Var,
            logdet: Var,
        }
        let mut prior_comps = Vec::with_capacity(jn);
        for ji in 0..jn {
            let mean = tape.row(comp_means, ji);
            let diag_row = tape.row(comp_diag_raw, ji);
            let off_row = tape.row(comp_off, ji);
            let sp = tape.softplus(diag_row);
            let diag = tape.shift(sp, DIAG_FLOOR);
            let off = if noff == 0 {
                tape.slice_cols(comp_off, 0, 0)
            } else {
                let m = tape.reshape(off_row, &[1, noff.max(1)]);
                let sl = tape.slice_cols(m, 0, noff);
                tape.reshape(sl, &[noff])
            };
            let l = if noff == 0 {
                tape.diag_embed(diag)
            } else {
                tape.lower_tri_from_parts(diag, off, d)
            };
            let lt = tape.transpose(l);
            let cov = tape.matmul(l, lt);
            let chol = tape.cholesky(cov).map_err(|e| pd("gmm prior chol", e))?;
            let half = tape.solve_lower(chol, eye);
            let lambda = tape.solve_lower_t(chol, half);
            let eta = {
                let mcol = tape.reshape(mean, &[d, 1]);
                let y1 = tape.solve_lower(chol, mcol);
                let y2 = tape.solve_lower_t(chol, y1);
                tape.reshape(y2, &[d])
            };
            let dg = tape.diag_part(chol);
            let ldg = tape.ln(dg);
            let sl = tape.sum(ldg);
            let logdet = tape.scale(sl, 2.0);
            prior_comps.push(PriorComp {
                mean,
                cov,
                chol,
                lambda,
                eta,
                logdet,
            });
        }

        // Recognition heads, batched.
        let rec_layers: Vec<(Var, Var)> = self
            .ids
            .rec
            .iter()
            .map(|&(w, bb)| (tape.param(&self.params, w), tape.param(&self.params, bb)))
            .collect();
        let y_node = tape.constant(y.clone());
        let rec_out = mlp_forward(&mut tape, &rec_layers, Activation::Identity, y_node)?;

        let gen_layers: Vec<(Var, Var)> = self
            .ids
            .gen
            .iter()
            .map(|&(w, bb)| (tape.param(&self.params, w), tape.param(&self.params, bb)))
            .collect();
        let log_noise = tape.param(&self.params, self.ids.log_noise_var);

        let mut per_point_terms: Vec<Var> = Vec::with_capacity(b);
        for bi in 0..b {
            let row = tape.row(rec_out, bi);
            let rowm = tape.reshape(row, &[1, 2 * d + noff]);
            let mr = {
                let sl = tape.slice_cols(rowm, 0, d);
                tape.reshape(sl, &[d])
            };
            let diag_raw = {
                let sl = tape.slice_cols(rowm, d, 2 * d);
                tape.reshape(sl, &[d])
            };
            let sp = tape.softplus(diag_raw);
            let rdiag = tape.shift(sp, DIAG_FLOOR);
            let lr = if noff == 0 {
                tape.diag_embed(rdiag)
            } else {
                let sl = tape.slice_cols(rowm, 2 * d, 2 * d + noff);
                let off = tape.reshape(sl, &[noff]);
                tape.lower_tri_from_parts(rdiag, off, d)
            };
            let lrt = tape.transpose(lr);
            let sigma_r = tape.matmul(lr, lrt);
            let half = tape.solve_lower(lr, eye);
            let lambda_r = tape.solve_lower_t(lr, half);
            let eta_r = {
                let mcol = tape.reshape(mr, &[d, 1]);
                let y1 = tape.solve_lower(lr, mcol);
                let y2 = tape.solve_lower_t(lr, y1);
                tape.reshape(y2, &[d])
            };

            // Per-component evidence, posterior component, KL and recon.
            let mut logit_vars = Vec::with_capacity(jn);
            let mut kl_vars = Vec::with_capacity(jn);
            let mut recon_vars = Vec::with_capacity(jn);
            for (ji, pc) in prior_comps.iter().enumerate() {
                let sum_cov = tape.add(pc.cov, sigma_r);
                let ls = tape.cholesky(sum_cov).map_err(|e| pd("gmm evidence chol", e))?;
                let resid = tape.sub(mr, pc.mean);
                let rc = tape.reshape(resid, &[d, 1]);
                let yv = tape.solve_lower(ls, rc);
                let ys = tape.mul(yv, yv);
                let quad = tape.sum(ys);
                let dg = tape.diag_part(ls);
                let ldg = tape.ln(dg);
                let slg = tape.sum(ldg);
                let logdet_s = tape.scale(slg, 2.0);
                let t1 = tape.add(quad, logdet_s);
                let t2 = tape.shift(t1, d as f64 * LN_2PI);
                let log_ev = tape.scale(t2, -0.5);
                let lpj = {
                    let lp = tape.reshape(log_pi, &[1, jn]);
                    let sl = tape.slice_cols(lp, ji, ji + 1);
                    tape.reshape(sl, &[1])
                };
                logit_vars.push(tape.add(lpj, log_ev));

                // Posterior component (Gaussian product).
                let prec = tape.add(pc.lambda, lambda_r);
                let lp = tape.cholesky(prec).map_err(|e| pd("gmm posterior chol", e))?;
                let eta_sum = tape.add(pc.eta, eta_r);
                let ec = tape.reshape(eta_sum, &[d, 1]);
                let y1 = tape.solve_lower(lp, ec);
                let y2 = tape.solve_lower_t(lp, y1);
                let mq = tape.reshape(y2, &[d]);
                let half_q = tape.solve_lower(lp, eye);
                let cov_q = tape.solve_lower_t(lp, half_q);

                // KL(q(h|j) || p(h|j)).
                let prod = tape.mul(pc.lambda, cov_q);
                let trace = tape.sum(prod);
                let dm = tape.sub(pc.mean, mq);
                let dmc = tape.reshape(dm, &[d, 1]);
                let w1 = tape.solve_lower(pc.chol, dmc);
                let w2 = tape.mul(w1, w1);
                let quad_kl = tape.sum(w2);
                let dgp = tape.diag_part(lp);
                let ldp = tape.ln(dgp);
                let slp = tape.sum(ldp);
                let logdet_q = tape.scale(slp, -2.0); // logdet cov_q = -logdet prec
                let a1 = tape.add(trace, quad_kl);
                let a2 = tape.sub(a1, logdet_q);
                let a3 = tape.add(a2, pc.logdet);
                let a4 = tape.shift(a3, -(d as f64));
                kl_vars.push(tape.scale(a4, 0.5));

                // Reconstruction: S reparametrised samples through the decoder.
                let lq = tape.cholesky(cov_q).map_err(|e| pd("gmm sample chol", e))?;
                let base = bi * jn * s + ji * s;
                let eps = Tensor::new(
                    vec![s, d],
                    (0..s * d)
                        .map(|i| noise.data[base * d + i])
                        .collect(),
                );
                let eps_node = tape.constant(eps);
                let eps_t = tape.transpose(eps_node);
                let le = tape.matmul(lq, eps_t);
                let let_ = tape.transpose(le);
                let h = tape.add_row_vector(let_, mq);
                let dec = mlp_forward(&mut tape, &gen_layers, Activation::Identity, h)?;
                let y_rep = Tensor::new(
                    vec![s, self.config.data_dim],
                    (0..s)
                        .flat_map(|_| {
                            y.data[bi * self.config.data_dim..(bi + 1) * self.config.data_dim]
                                .to_vec()
                        })
                        .collect(),
                );
                let ll = gaussian_loglik_tape(&mut tape, &y_rep, dec, log_noise);
                recon_vars.push(tape.scale(ll, 1.0 / s as f64));
            }

            // Responsibilities.
            let parts: Vec<Var> = logit_vars
                .iter()
                .map(|&v| tape.reshape(v, &[1, 1]))
                .collect();
            let logits = tape.concat_cols(&parts);
            let lse = tape.logsumexp_rows(logits);
            let lse_b = tape.repeat_scalar(lse, jn);
            let lse_m = tape.reshape(lse_b, &[1, jn]);
            let log_q = tape.sub(logits, lse_m);
            let q = tape.exp(log_q);

            // Categorical KL: sum_j q_j (log q_j - log pi_j).
            let log_pi_m = tape.reshape(log_pi, &[1, jn]);
            let diff = tape.sub(log_q, log_pi_m);
            let wq = tape.mul(q, diff);
            let kl_cat = tape.sum(wq);

            // Responsibility-weighted Gaussian KLs and reconstructions.
            let kl_parts: Vec<Var> = kl_vars.iter().map(|&v| tape.reshape(v, &[1, 1])).collect();
            let kl_row = tape.concat_cols(&kl_parts);
            let wkl = tape.mul(q, kl_row);
            let kl_gauss = tape.sum(wkl);
            let rec_parts: Vec<Var> = recon_vars
                .iter()
                .map(|&v| tape.reshape(v, &[1, 1]))
                .collect();
            let rec_row = tape.concat_cols(&rec_parts);
            let wrec = tape.mul(q, rec_row);
            let recon = tape.sum(wrec);

            let kl_total = tape.add(kl_cat, kl_gauss);
            let point = tape.sub(recon, kl_total);
            per_point_terms.push(point);
            // Stash recon/kl by re-deriving at the end; accumulate below.
            per_point_terms.push(recon);
            per_point_terms.push(kl_total);
        }

        // per_point_terms = [F_0, recon_0, kl_0, F_1, ...]
        let f_parts: Vec<Var> = per_point_terms.iter().copied().step_by(3).collect();
        let r_parts: Vec<Var> = per_point_terms.iter().copied().skip(1).step_by(3).collect();
        let k_parts: Vec<Var> = per_point_terms.iter().copied().skip(2).step_by(3).collect();
        let sum_of = |tape: &mut Tape, parts: &[Var]| {
            let cols: Vec<Var> = parts.iter().map(|&v| tape.reshape(v, &[1, 1])).collect();
            let row = tape.concat_cols(&cols);
            let s = tape.sum(row);
            tape.scale(s, 1.0 / parts.len() as f64)
        };
        let fe = sum_of(&mut tape, &f_parts);
        let recon = sum_of(&mut tape, &r_parts);
        let kl = sum_of(&mut tape, &k_parts);
        Ok((tape, fe, recon, kl))
    }

    /// Adaptive-moment ascent on the free energy over shuffled minibatches.
    pub fn train(&mut self, data: &Tensor, config: &TrainConfig) -> Result<MetricTrace> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let n = data.shape[0];
        let dd = self.config.data_dim;
        let bsz = config.batch_len.min(n);
        let mut trace = MetricTrace::default();
        let started = std::time::Instant::now();
        for epoch in 0..config.epochs {
            let order = rng::shuffled_indices(&mut rng, n);
            let mut fe_acc = 0.0;
            let mut rec_acc = 0.0;
            let mut kl_acc = 0.0;
            let mut batches = 0.0;
            for chunk in order.chunks(bsz) {
                let mut y = Tensor::zeros(&[chunk.len(), dd]);
                for (r, &i) in chunk.iter().enumerate() {
                    y.data[r * dd..(r + 1) * dd].copy_from_slice(&data.data[i * dd..(i + 1) * dd]);
                }
                let (mut tape, fe, recon, kl) = self.free_energy(&y, config.mc_samples, &mut rng)?;
                let neg = tape.neg(fe);
                tape.backward(neg, &mut self.params)?;
                self.params
                    .adam_step(config.learning_rate, 0.9, 0.999, 1e-8);
                self.params.zero_grad();
                fe_acc += tape.scalar_value(fe);
                rec_acc += tape.scalar_value(recon);
                kl_acc += tape.scalar_value(kl);
                batches += 1.0;
            }
            trace.push(
                epoch,
                fe_acc / batches,
                rec_acc / batches,
                kl_acc / batches,
                started.elapsed().as_secs_f64(),
            );
        }
        Ok(trace)
    }

    /// Ancestral generation: `z ~ pi`, `h ~ N(mu_z, Sigma_z)`, `y ~ decoder`.
    pub fn generate(&self, n: usize, rng: &mut Prng) -> Result<Tensor> {
        let prior = self.prior();
        let d = self.config.latent_dim;
        let dd = self.config.data_dim;
        let gen_layers: Vec<(Tensor, Tensor)> = self
            .ids
            .gen
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect();
        let noise_std = (0.5 * self.params.value(self.ids.log_noise_var).data[0]).exp();
        let mut out = Tensor::zeros(&[n, dd]);
        for i in 0..n {
            let z = rng::categorical(rng, &prior.weights);
            let l = cholesky(&prior.covariances[z]).map_err(|e| pd("generate", e))?;
            let eps = rng::normal_tensor(rng, &[d]);
            let mut h = prior.means[z].clone();
            let le = l.matvec(&eps);
            for (hv, lv) in h.data.iter_mut().zip(le.data.iter()) {
                *hv += lv;
            }
            let hm = Tensor::new(vec![1, d], h.data);
            let mean = mlp_forward_pure(&gen_layers, Activation::Identity, &hm);
            for k in 0..dd {
                out.data[i * dd + k] = mean.data[k] + noise_std * rng::standard_normal(rng);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, rng_state: (u64, u128)) -> serde_json::Value {
        checkpoint_to_json(
            "gmm_srvae",
            &self.params,
            rng_state,
            json!(self.config),
        )
    }

    pub fn from_checkpoint(data: &crate::io::CheckpointData) -> Result<Self> {
        let config: GmmSrvaeConfig = serde_json::from_value(data.config.clone())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut model = GmmSrvae::new(config);
        if data.params.len() != model.params.len() {
            return Err(Error::InvalidConfig(
                "checkpoint parameter count mismatch".into(),
            ));
        }
        model.params = data.params.clone();
        Ok(model)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

// ── Vanilla VAE baseline (per-point diagonal posterior, N(0, I) prior) ──

pub struct PointVae {
    pub config: GmmSrvaeConfig,
    pub params: ParamSet,
    rec: Vec<(ParamId, ParamId)>,
    gen: Vec<(ParamId, ParamId)>,
    log_noise_var: ParamId,
}

impl PointVae {
    pub fn new(config: GmmSrvaeConfig) -> Self {
        let mut rng = rng::seeded(config.seed.wrapping_add(17));
        let mut params = ParamSet::new();
        let d = config.latent_dim;
        let rec = vec![
            init_linear(&mut rng, &mut params, "rec.l1", config.hidden, config.data_dim),
            init_linear(&mut rng, &mut params, "rec.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "rec.head", 2 * d, config.hidden),
        ];
        let gen = vec![
            init_linear(&mut rng, &mut params, "gen.l1", config.hidden, d),
            init_linear(&mut rng, &mut params, "gen.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "gen.head", config.data_dim, config.hidden),
        ];
        let log_noise_var = params.add("gen.log_noise_var", Tensor::scalar((0.5f64).powi(2).ln()));
        PointVae {
            config,
            params,
            rec,
            gen,
            log_noise_var,
        }
    }

    /// Standard per-point ELBO with a single reparametrised sample per point
    /// and the diagonal-Gaussian KL in closed form.
    pub fn free_energy(&self, y: &Tensor, rng: &mut Prng) -> Result<(Tape, Var, Var, Var)> {
        let b = y.shape[0];
        let d = self.config.latent_dim;
        let noise = rng::normal_tensor(rng, &[b, d]);
        let mut tape = Tape::new();
        let rec_layers: Vec<(Var, Var)> = self
            .rec
            .iter()
            .map(|&(w, bb)| (tape.param(&self.params, w), tape.param(&self.params, bb)))
            .collect();
        let gen_layers: Vec<(Var, Var)> = self
            .gen
            .iter()
            .map(|&(w, bb)| (tape.param(&self.params, w), tape.param(&self.params, bb)))
            .collect();
        let log_noise = tape.param(&self.params, self.log_noise_var);
        let y_node = tape.constant(y.clone());
        let out = mlp_forward(&mut tape, &rec_layers, Activation::Identity, y_node)?;
        let mean = tape.slice_cols(out, 0, d);
        let raw = tape.slice_cols(out, d, 2 * d);
        let sp = tape.softplus(raw);
        let var = tape.shift(sp, 1e-6);
        let std = tape.sqrt(var);
        let eps = tape.constant(noise);
        let scaled = tape.mul(std, eps);
        let h = tape.add(mean, scaled);
        let dec = mlp_forward(&mut tape, &gen_layers, Activation::Identity, h)?;
        let ll = gaussian_loglik_tape(&mut tape, y, dec, log_noise);
        let recon = tape.scale(ll, 1.0 / b as f64);
        // KL(N(m, v) || N(0, I)) = 0.5 sum (v + m^2 - 1 - ln v).
        let m2 = tape.mul(mean, mean);
        let lnv = tape.ln(var);
        let t1 = tape.add(var, m2);
        let t2 = tape.sub(t1, lnv);
        let t3 = tape.shift(t2, -1.0);
        let klsum = tape.sum(t3);
        let half = tape.scale(klsum, 0.5);
        let kl = tape.scale(half, 1.0 / b as f64);
        let fe = tape.sub(recon, kl);
        Ok((tape, fe, recon, kl))
    }

    pub fn train(&mut self, data: &Tensor, config: &TrainConfig) -> Result<MetricTrace> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let n = data.shape[0];
        let dd = self.config.data_dim;
        let bsz = config.batch_len.min(n);
        let mut trace = MetricTrace::default();
        let started = std::time::Instant::now();
        for epoch in 0..config.epochs {
            let order = rng::shuffled_indices(&mut rng, n);
            let (mut fe_acc, mut rec_acc, mut kl_acc, mut batches) = (0.0, 0.0, 0.0, 0.0);
            for chunk in order.chunks(bsz) {
                let mut y = Tensor::zeros(&[chunk.len(), dd]);
                for (r, &i) in chunk.iter().enumerate() {
                    y.data[r * dd..(r + 1) * dd].copy_from_slice(&data.data[i * dd..(i + 1) * dd]);
                }
                let (mut tape, fe, recon, kl) = self.free_energy(&y, &mut rng)?;
                let neg = tape.neg(fe);
                tape.backward(neg, &mut self.params)?;
                self.params
                    .adam_step(config.learning_rate, 0.9, 0.999, 1e-8);
                self.params.zero_grad();
                fe_acc += tape.scalar_value(fe);
                rec_acc += tape.scalar_value(recon);
                kl_acc += tape.scalar_value(kl);
                batches += 1.0;
            }
            trace.push(
                epoch,
                fe_acc / batches,
                rec_acc / batches,
                kl_acc / batches,
                started.elapsed().as_secs_f64(),
            );
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_prior(j: usize, d: usize, rng: &mut Prng) -> GmmPrior {
        let mut weights: Vec<f64> = (0..j).map(|_| rng::uniform(rng, 0.2, 1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let means = (0..j)
            .map(|_| rng::uniform_tensor(rng, &[d], -2.0, 2.0))
            .collect();
        let covariances = (0..j)
            .map(|_| {
                let b = rng::uniform_tensor(rng, &[d, d], -0.5, 0.5);
                let mut c = b.matmul(&b.transpose());
                for i in 0..d {
                    *c.at_mut(i, i) += 0.5;
                }
                c
            })
            .collect();
        GmmPrior {
            weights,
            means,
            covariances,
        }
    }

    #[test]
    fn uninformative_potential_recovers_prior() {
        let mut rng = seeded(1);
        let prior = toy_prior(3, 2, &mut rng);
        let post = combine_gmm(
            &prior,
            &Tensor::vector(vec![0.3, -0.4]),
            &Tensor::eye(2).scale(1e8),
        )
        .unwrap();
        for (q, p) in post.responsibilities.iter().zip(prior.weights.iter()) {
            assert!((q - p).abs() < 1e-5);
        }
        for (c, (m, s)) in post
            .components
            .iter()
            .zip(prior.means.iter().zip(prior.covariances.iter()))
        {
            assert!(c.mean.max_abs_diff(m) < 1e-5);
            assert!(c.covariance.max_abs_diff(s) < 1e-5);
        }
    }

    #[test]
    fn single_component_is_gaussian_product() {
        // Lambda_post = Lambda_1 + Lambda_2, eta_post = eta_1 + eta_2.
        let prior = GmmPrior {
            weights: vec![1.0],
            means: vec![Tensor::vector(vec![1.0, 0.0])],
            covariances: vec![Tensor::matrix(&[vec![2.0, 0.3], vec![0.3, 1.0]])],
        };
        let pm = Tensor::vector(vec![-0.5, 0.8]);
        let pc = Tensor::matrix(&[vec![0.7, -0.1], vec![-0.1, 0.9]]);
        let post = combine_gmm(&prior, &pm, &pc).unwrap();
        let l1 = cholesky(&prior.covariances[0]).unwrap();
        let l2 = cholesky(&pc).unwrap();
        let lam = inverse_from_cholesky(&l1).add(&inverse_from_cholesky(&l2));
        let eta = solve_psd(&l1, &prior.means[0]).add(&solve_psd(&l2, &pm));
        let lp = cholesky(&lam).unwrap();
        let expect_cov = inverse_from_cholesky(&lp);
        let expect_mean = solve_psd(&lp, &eta);
        assert!(post.components[0].covariance.max_abs_diff(&expect_cov) < 1e-10);
        assert!(post.components[0].mean.max_abs_diff(&expect_mean) < 1e-10);
        assert!((post.responsibilities[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distant_evidence_dominates_responsibilities() {
        let prior = GmmPrior {
            weights: vec![0.5, 0.5],
            means: vec![Tensor::vector(vec![0.0, 0.0]), Tensor::vector(vec![100.0, 0.0])],
            covariances: vec![Tensor::eye(2), Tensor::eye(2)],
        };
        let post = combine_gmm(
            &prior,
            &Tensor::vector(vec![100.0, 0.0]),
            &Tensor::eye(2).scale(0.5),
        )
        .unwrap();
        assert!(post.responsibilities[1] > 1.0 - 1e-12);
    }

    #[test]
    fn responsibilities_match_grid_quadrature() {
        let mut rng = seeded(5);
        let prior = toy_prior(2, 2, &mut rng);
        let pm = Tensor::vector(vec![0.4, -0.3]);
        let pc = Tensor::matrix(&[vec![0.8, 0.2], vec![0.2, 0.6]]);
        let post = combine_gmm(&prior, &pm, &pc).unwrap();

        // 2-D quadrature of pi_j int N(h; mu_j, S_j) N(h; m_r, S_r) dh.
        let steps = 400;
        let (lo, hi) = (-8.0, 8.0);
        let dx = (hi - lo) / steps as f64;
        let dens = |m: &Tensor, c: &Tensor, x: f64, y: f64| {
            let l = cholesky(c).unwrap();
            let r = Tensor::vector(vec![x - m.data[0], y - m.data[1]]);
            let z = solve_lower(&l, &r);
            let q: f64 = z.data.iter().map(|v| v * v).sum();
            (-0.5 * (q + logdet_from_cholesky(&l) + 2.0 * LN_2PI)).exp()
        };
        let mut ev = vec![0.0; 2];
        for j in 0..2 {
            for ix in 0..steps {
                let x = lo + (ix as f64 + 0.5) * dx;
                for iy in 0..steps {
                    let y = lo + (iy as f64 + 0.5) * dx;
                    ev[j] += dens(&prior.means[j], &prior.covariances[j], x, y)
                        * dens(&pm, &pc, x, y);
                }
            }
            ev[j] *= prior.weights[j] * dx * dx;
        }
        let total: f64 = ev.iter().sum();
        for j in 0..2 {
            assert!(
                (post.responsibilities[j] - ev[j] / total).abs() < 1e-4,
                "{} vs {}",
                post.responsibilities[j],
                ev[j] / total
            );
        }
    }

    #[test]
    fn posterior_marginal_density_integrates_to_one() {
        let mut rng = seeded(7);
        let prior = toy_prior(3, 2, &mut rng);
        let pm = Tensor::vector(vec![0.2, 0.5]);
        let pc = Tensor::matrix(&[vec![0.5, 0.1], vec![0.1, 0.4]]);
        let post = combine_gmm(&prior, &pm, &pc).unwrap();
        let steps = 300;
        let (lo, hi) = (-9.0, 9.0);
        let dx = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for ix in 0..steps {
            let x = lo + (ix as f64 + 0.5) * dx;
            for iy in 0..steps {
                let y = lo + (iy as f64 + 0.5) * dx;
                for (j, comp) in post.components.iter().enumerate() {
                    let r = Tensor::vector(vec![x - comp.mean.data[0], y - comp.mean.data[1]]);
                    let z = solve_lower(&comp.chol, &r);
                    let q: f64 = z.data.iter().map(|v| v * v).sum();
                    let dens =
                        (-0.5 * (q + logdet_from_cholesky(&comp.chol) + 2.0 * LN_2PI)).exp();
                    total += post.responsibilities[j] * dens;
                }
            }
        }
        total *= dx * dx;
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn kl_decomposition_is_zero_when_q_equals_p() {
        // Directly verify the KL evaluator at q = p: responsibilities equal
        // to pi and components equal to the prior components.
        let mut rng = seeded(9);
        let prior = toy_prior(3, 2, &mut rng);
        let mut kl = 0.0;
        for j in 0..3 {
            let q = prior.weights[j];
            kl += q * (q.ln() - prior.weights[j].ln());
            let comp = GaussianDense::new(prior.means[j].clone(), prior.covariances[j].clone())
                .unwrap();
            kl += q * crate::sparse_gp::gaussian_kl(&comp, &comp).unwrap();
        }
        assert!(kl.abs() < 1e-8);
    }

    #[test]
    fn free_energy_kl_terms_are_nonnegative_and_near_zero_for_flat_potential() {
        // A near-flat recognition potential leaves q(z, h) ~ p(z, h), so the
        // total KL must collapse towards zero.
        let mut rng = seeded(11);
        let prior = toy_prior(4, 2, &mut rng);
        let post = combine_gmm(
            &prior,
            &Tensor::vector(vec![0.0, 0.0]),
            &Tensor::eye(2).scale(1e8),
        )
        .unwrap();
        let mut kl_cat = 0.0;
        let mut kl_gauss = 0.0;
        for j in 0..4 {
            let q = post.responsibilities[j];
            kl_cat += q * (q.max(1e-300).ln() - prior.weights[j].ln());
            let p = GaussianDense::new(prior.means[j].clone(), prior.covariances[j].clone())
                .unwrap();
            kl_gauss += q * crate::sparse_gp::gaussian_kl(&post.components[j], &p).unwrap();
        }
        assert!(kl_cat >= -1e-10 && kl_gauss >= -1e-10);
        assert!(kl_cat + kl_gauss < 1e-5, "kl {}", kl_cat + kl_gauss);
    }

    #[test]
    fn total_kl_matches_monte_carlo_oracle() {
        let mut rng = seeded(13);
        let prior = toy_prior(2, 2, &mut rng);
        let pm = Tensor::vector(vec![0.5, -0.2]);
        let pc = Tensor::matrix(&[vec![0.6, -0.1], vec![-0.1, 0.8]]);
        let post = combine_gmm(&prior, &pm, &pc).unwrap();
        // Closed form.
        let mut kl = 0.0;
        for j in 0..2 {
            let q = post.responsibilities[j];
            kl += q * (q.max(1e-300).ln() - prior.weights[j].ln());
            let p = GaussianDense::new(prior.means[j].clone(), prior.covariances[j].clone())
                .unwrap();
            kl += q * crate::sparse_gp::gaussian_kl(&post.components[j], &p).unwrap();
        }
        // Monte Carlo E_q[log q(z, h) - log p(z, h)] with 10^6 samples.
        let samples = 1_000_000usize;
        let log_dens = |g: &GaussianDense, h: &[f64]| {
            let r = Tensor::vector(vec![h[0] - g.mean.data[0], h[1] - g.mean.data[1]]);
            let z = solve_lower(&g.chol, &r);
            let q: f64 = z.data.iter().map(|v| v * v).sum();
            -0.5 * (q + logdet_from_cholesky(&g.chol) + 2.0 * LN_2PI)
        };
        let prior_comps: Vec<GaussianDense> = (0..2)
            .map(|j| {
                GaussianDense::new(prior.means[j].clone(), prior.covariances[j].clone()).unwrap()
            })
            .collect();
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..samples {
            let j = rng::categorical(&mut rng, &post.responsibilities);
            let comp = &post.components[j];
            let eps = rng::normal_tensor(&mut rng, &[2]);
            let le = comp.chol.matvec(&eps);
            let h = [comp.mean.data[0] + le.data[0], comp.mean.data[1] + le.data[1]];
            let lq = post.responsibilities[j].ln() + log_dens(comp, &h);
            let lp = prior.weights[j].ln() + log_dens(&prior_comps[j], &h);
            let v = lq - lp;
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / samples as f64;
        let se = ((acc2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!(
            (kl - mean).abs() < 3.0 * se,
            "closed form {kl} vs MC {mean} (se {se})"
        );
    }

    #[test]
    fn tape_responsibilities_match_pure_combination() {
        // The tape objective and the pure combine route must agree on the
        // evidence weighting for the same potentials.
        let config = GmmSrvaeConfig {
            components: 3,
            latent_dim: 2,
            data_dim: 2,
            hidden: 16,
            seed: 3,
        };
        let model = GmmSrvae::new(config);
        let y = Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.0, 0.3]);
        let pots = model.recognize(&y);
        let prior = model.prior();
        let mut rng = seeded(1);
        let (tape, fe, recon, kl) = model.free_energy(&y, 1, &mut rng).unwrap();
        assert!(tape.scalar_value(fe).is_finite());
        assert!(tape.scalar_value(kl) >= -1e-9);
        assert!((tape.scalar_value(fe)
            - (tape.scalar_value(recon) - tape.scalar_value(kl)))
        .abs()
            < 1e-10);
        // Cross-check: pure combination responsibilities are a probability
        // vector for each point.
        for (pm, pc) in &pots {
            let post = combine_gmm(&prior, pm, pc).unwrap();
            let total: f64 = post.responsibilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn free_energy_invariant_to_component_relabeling() {
        let config = GmmSrvaeConfig {
            components: 3,
            latent_dim: 2,
            data_dim: 2,
            hidden: 12,
            seed: 7,
        };
        let model = GmmSrvae::new(config.clone());
        let y = Tensor::new(vec![2, 2], vec![0.3, 0.8, -0.4, 0.1]);
        let s = 2usize;
        let noise = rng::normal_tensor(&mut seeded(99), &[2 * 3 * s, 2]);
        let (tape, fe, _, _) = model.free_energy_with_noise(&y, s, &noise).unwrap();
        let base = tape.scalar_value(fe);

        // Apply the cyclic permutation (1, 2, 0) to the prior components and
        // the matching reordering of the per-component noise blocks.
        let perm = [1usize, 2, 0];
        let mut permuted = GmmSrvae::new(config);
        permuted.params = model.params.clone();
        let reorder_rows = |t: &Tensor, rows: usize| -> Tensor {
            let c = t.len() / rows;
            let mut out = t.clone();
            for (new_row, &old_row) in perm.iter().enumerate() {
                out.data[new_row * c..(new_row + 1) * c]
                    .copy_from_slice(&t.data[old_row * c..(old_row + 1) * c]);
            }
            out
        };
        for (i, p) in permuted.params.iter_mut().enumerate() {
            let name = p.name.clone();
            if name.starts_with("prior.") {
                let _ = i;
                p.value = reorder_rows(&p.value, 3);
            }
        }
        let mut noise_perm = noise.clone();
        for bi in 0..2 {
            for (new_j, &old_j) in perm.iter().enumerate() {
                for si in 0..s {
                    let src = ((bi * 3 + old_j) * s + si) * 2;
                    let dst = ((bi * 3 + new_j) * s + si) * 2;
                    noise_perm.data[dst] = noise.data[src];
                    noise_perm.data[dst + 1] = noise.data[src + 1];
                }
            }
        }
        let (tape2, fe2, _, _) = permuted.free_energy_with_noise(&y, s, &noise_perm).unwrap();
        assert!((tape2.scalar_value(fe2) - base).abs() < 1e-9);
    }

    #[test]
    fn generation_mean_concentrates_for_identity_decoder() {
        // Single component at the origin and an identity-like decoder: the
        // sample mean tends to zero by the law of large numbers.
        let config = GmmSrvaeConfig {
            components: 1,
            latent_dim: 2,
            data_dim: 2,
            hidden: 8,
            seed: 5,
        };
        let mut model = GmmSrvae::new(config);
        // Zero decoder weights: output is the bias (zero), plus noise.
        for p in model.params.iter_mut() {
            if p.name.starts_with("gen.") || p.name == "prior.means" {
                p.value = Tensor::zeros(&p.value.shape);
            }
        }
        let mut rng = seeded(31);
        let n = 4000;
        let samples = model.generate(n, &mut rng).unwrap();
        let mx: f64 = (0..n).map(|i| samples.data[i * 2]).sum::<f64>() / n as f64;
        let my: f64 = (0..n).map(|i| samples.data[i * 2 + 1]).sum::<f64>() / n as f64;
        let band = 3.0 * 0.6 / (n as f64).sqrt();
        assert!(mx.abs() < band && my.abs() < band, "({mx}, {my})");
    }

    #[test]
    fn generation_is_deterministic_given_seed() {
        let model = GmmSrvae::new(GmmSrvaeConfig::default());
        let a = model.generate(20, &mut seeded(8)).unwrap();
        let b = model.generate(20, &mut seeded(8)).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
