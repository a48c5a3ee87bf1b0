//! Nonlinear GPFA with structured amortised recognition (SR-nlGPFA).
//!
//! The recognition network emits a diagonal Gaussian potential on the
//! embeddings h at each input; combined with the sparse-GP prior through the
//! affine mixing map this induces a full-covariance Gaussian posterior over
//! all inducing values, whose inter-latent coupling is the explaining-away
//! structure the factored baseline cannot represent. The Monte-Carlo free
//! energy reparametrises the per-input posterior marginals of h and
//! subtracts the exact Gaussian KL on the inducing values.
//!
//! The factored posterior variant (SGP-VAE style) shares the generative
//! model but amortises per-latent potentials on the process values, keeping
//! the posterior block-diagonal over latents. A per-point mean-field VAE
//! baseline with a standard-normal prior shares the network architectures.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::LikelihoodKind;
use crate::error::{Error, Result};
use crate::io::{checkpoint_to_json, CheckpointData, MetricTrace, TrainConfig};
use crate::likelihood::{gaussian_loglik, gaussian_loglik_tape, poisson_loglik, poisson_loglik_tape};
use crate::rng::{self, Prng};
use crate::sparse_gp::{
    factored_posterior_h, factored_qu, gaussian_kl, posterior_h_marginal, structured_qu,
    DiagonalGaussianPotential, GaussianDense, InducingModel, KernelParams,
};
use crate::tape::{mlp_forward, mlp_forward_pure, Activation, ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

const VAR_FLOOR: f64 = 1e-6;
const RATE_FLOOR: f64 = 1e-6;

/// Which posterior family the recognition network feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorStructure {
    /// Full-covariance q(U) over all latents (potentials on h).
    Structured,
    /// Per-latent q(u_k) (potentials on f), block-diagonal joint.
    Factored,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GpfaConfig {
    pub latents: usize,
    pub embed_dim: usize,
    pub data_dim: usize,
    pub hidden: usize,
    pub likelihood: LikelihoodKind,
    pub posterior: PosteriorStructure,
    /// Raw inputs are multiplied by this scale so the unit-lengthscale
    /// initialization is sensible on integer time stamps.
    pub input_scale: f64,
    pub seed: u64,
}

impl GpfaConfig {
    pub fn synthetic_default(seed: u64) -> Self {
        GpfaConfig {
            latents: 2,
            embed_dim: 10,
            data_dim: 10,
            hidden: 50,
            likelihood: LikelihoodKind::Gaussian,
            posterior: PosteriorStructure::Structured,
            input_scale: 0.1,
            seed,
        }
    }
}

struct GpfaIds {
    log_lambda: ParamId,
    log_tau: ParamId,
    mixing: ParamId,
    offset: ParamId,
    rec: Vec<(ParamId, ParamId)>,
    gen: Vec<(ParamId, ParamId)>,
    log_noise_var: ParamId,
}

pub struct GpfaModel {
    pub config: GpfaConfig,
    pub params: ParamSet,
    ids: GpfaIds,
}

fn init_linear(
    rng: &mut Prng,
    params: &mut ParamSet,
    name: &str,
    out: usize,
    inp: usize,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = params.add(
        &format!("{name}.w"),
        rng::uniform_tensor(rng, &[out, inp], -bound, bound),
    );
    let b = params.add(&format!("{name}.b"), Tensor::zeros(&[out]));
    (w, b)
}

impl GpfaModel {
    pub fn new(config: GpfaConfig) -> Self {
        let mut rng = rng::seeded(config.seed);
        let mut params = ParamSet::new();
        let k = config.latents;
        let n = config.embed_dim;
        let log_lambda = params.add("kernel.log_lambda", Tensor::zeros(&[k]));
        let log_tau = params.add("kernel.log_tau", Tensor::zeros(&[k]));
        let bound = 1.0 / (k as f64).sqrt();
        let mixing = params.add(
            "mixing.c",
            rng::uniform_tensor(&mut rng, &[n, k], -bound, bound),
        );
        let offset = params.add("mixing.d", Tensor::zeros(&[n]));
        let rec_out = match config.posterior {
            PosteriorStructure::Structured => 2 * n,
            PosteriorStructure::Factored => 2 * k,
        };
        let rec = vec![
            init_linear(&mut rng, &mut params, "rec.l1", config.hidden, config.data_dim),
            init_linear(&mut rng, &mut params, "rec.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "rec.head", rec_out, config.hidden),
        ];
        let gen = vec![
            init_linear(&mut rng, &mut params, "gen.l1", config.hidden, n),
            init_linear(&mut rng, &mut params, "gen.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "gen.head", config.data_dim, config.hidden),
        ];
        let log_noise_var = params.add("gen.log_noise_var", Tensor::scalar((0.5f64).powi(2).ln()));
        GpfaModel {
            config,
            params,
            ids: GpfaIds {
                log_lambda,
                log_tau,
                mixing,
                offset,
                rec,
                gen,
                log_noise_var,
            },
        }
    }

    fn potential_dim(&self) -> usize {
        match self.config.posterior {
            PosteriorStructure::Structured => self.config.embed_dim,
            PosteriorStructure::Factored => self.config.latents,
        }
    }

    /// Decoder output in the likelihood's canonical parameter: the Gaussian
    /// mean (sigmoid link) or the Poisson rate (softplus link plus floor).
    pub fn decode(&self, h: &Tensor) -> Tensor {
        let layers: Vec<(Tensor, Tensor)> = self
            .ids
            .gen
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect();
        match self.config.likelihood {
            LikelihoodKind::Gaussian => mlp_forward_pure(&layers, Activation::Sigmoid, h),
            LikelihoodKind::Poisson => {
                mlp_forward_pure(&layers, Activation::Softplus, h).map(|v| v + RATE_FLOOR)
            }
        }
    }

    pub fn noise_variance(&self) -> f64 {
        self.params.value(self.ids.log_noise_var).data[0].exp()
    }

    /// Amortised recognition: one diagonal Gaussian potential per row of
    /// `y_batch`, with softplus-plus-floor variances.
    pub fn recognize(&self, y_batch: &Tensor) -> Result<Vec<DiagonalGaussianPotential>> {
        if y_batch.shape.len() != 2 || y_batch.shape[1] != self.config.data_dim {
            return Err(Error::ShapeMismatch {
                op: "recognize",
                expected: format!("[B, {}]", self.config.data_dim),
                got: format!("{:?}", y_batch.shape),
            });
        }
        let layers: Vec<(Tensor, Tensor)> = self
            .ids
            .rec
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect();
        let out = mlp_forward_pure(&layers, Activation::Identity, y_batch);
        let d = self.potential_dim();
        Ok((0..y_batch.shape[0])
            .map(|b| {
                let row = &out.data[b * 2 * d..(b + 1) * 2 * d];
                let mean = Tensor::vector(row[0..d].to_vec());
                let variances = Tensor::vector(
                    row[d..2 * d]
                        .iter()
                        .map(|&v| stable_softplus(v) + VAR_FLOOR)
                        .collect(),
                );
                DiagonalGaussianPotential::new(mean, variances)
            })
            .collect())
    }

    /// Pure inducing-point view of the current parameters at the given
    /// (already scaled) inducing locations.
    pub fn inducing_model(&self, zs: &[Tensor]) -> Result<InducingModel> {
        let kern: Vec<KernelParams> = (0..self.config.latents)
            .map(|k| KernelParams {
                log_marginal_variance: self.params.value(self.ids.log_lambda).data[k],
                log_lengthscale: self.params.value(self.ids.log_tau).data[k],
            })
            .collect();
        InducingModel::new(
            1,
            zs.to_vec(),
            kern,
            self.params.value(self.ids.mixing).clone(),
            self.params.value(self.ids.offset).clone(),
        )
    }

    /// Evenly spaced per-latent inducing grid over the scaled input range.
    pub fn grid_for(&self, xs_raw: &[f64], m: usize) -> Vec<Tensor> {
        let lo = xs_raw.iter().cloned().fold(f64::INFINITY, f64::min) * self.config.input_scale;
        let hi = xs_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * self.config.input_scale;
        let pad = 1e-3 * (hi - lo).abs().max(1e-3);
        let grid = InducingModel::uniform_grid(lo - pad, hi + pad, m);
        vec![grid; self.config.latents]
    }

    pub fn scale_inputs(&self, xs_raw: &[f64]) -> Vec<f64> {
        xs_raw.iter().map(|&x| x * self.config.input_scale).collect()
    }

    /// Pure-route posterior over inducing values for a data window; the
    /// shared path behind evaluation and re-inference, so re-inference with
    /// unchanged locations reproduces it bitwise.
    pub fn infer_qu(&self, xs_raw: &[f64], ys: &Tensor, zs: &[Tensor]) -> Result<GaussianDense> {
        let model = self.inducing_model(zs)?;
        let xs = self.scale_inputs(xs_raw);
        let pots = self.recognize(ys)?;
        match self.config.posterior {
            PosteriorStructure::Structured => {
                let pairs: Vec<(Vec<f64>, DiagonalGaussianPotential)> = xs
                    .iter()
                    .zip(pots)
                    .map(|(&x, p)| (vec![x], p))
                    .collect();
                structured_qu(&pairs, &model)
            }
            PosteriorStructure::Factored => {
                let pairs: Vec<(Vec<f64>, DiagonalGaussianPotential)> = xs
                    .iter()
                    .zip(pots)
                    .map(|(&x, p)| (vec![x], p))
                    .collect();
                let per_latent = factored_qu(&pairs, &model)?;
                Ok(join_block_diagonal(&per_latent))
            }
        }
    }
}

/// Assembles per-latent Gaussians into one block-diagonal joint.
pub fn join_block_diagonal(parts: &[GaussianDense]) -> GaussianDense {
    let total: usize = parts.iter().map(|g| g.dim()).sum();
    let mut mean = Tensor::zeros(&[total]);
    let mut cov = Tensor::zeros(&[total, total]);
    let mut off = 0;
    for g in parts {
        let m = g.dim();
        for i in 0..m {
            mean.data[off + i] = g.mean.data[i];
            for j in 0..m {
                cov.data[(off + i) * total + off + j] = g.covariance.data[i * m + j];
            }
        }
        off += m;
    }
    GaussianDense::new(mean, cov).expect("block-diagonal assembly of PD blocks")
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

// ── Tape objective ──────────────────────────────────────────────────

/// Everything the training loop reads back from one objective evaluation.
pub struct Objective {
    pub tape: Tape,
    pub free_energy: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Selector matrix embedding an `[m, m]` block at `offset` of a
/// `[total, total]` matrix via `E B E^T`.
fn selector(total: usize, m: usize, offset: usize) -> Tensor {
    let mut e = Tensor::zeros(&[total, m]);
    for i in 0..m {
        e.data[(offset + i) * m + i] = 1.0;
    }
    e
}

impl GpfaModel {
    /// Monte-Carlo free energy of one window on a fresh tape, with the
    /// reparametrisation noise drawn from `rng` (see
    /// [`GpfaModel::free_energy_with_noise`]).
    pub fn free_energy_mc(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        zs: &[Tensor],
        mc_samples: usize,
        train_z: bool,
        rng: &mut Prng,
    ) -> Result<Objective> {
        let b = xs_raw.len();
        let noise = rng::normal_tensor(rng, &[b * mc_samples, self.config.embed_dim]);
        self.free_energy_with_noise(xs_raw, ys, zs, mc_samples, train_z, &noise)
    }

    /// Same objective with caller-fixed noise `[(B * S), N]`; sample `s` of
    /// window point `b` uses row `b * S + s`.
    pub fn free_energy_with_noise(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        zs: &[Tensor],
        mc_samples: usize,
        train_z: bool,
        noise: &Tensor,
    ) -> Result<Objective> {
        if xs_raw.is_empty() {
            return Err(Error::InvalidConfig("empty window".into()));
        }
        if ys.shape != vec![xs_raw.len(), self.config.data_dim] {
            return Err(Error::ShapeMismatch {
                op: "free_energy_mc",
                expected: format!("[{}, {}]", xs_raw.len(), self.config.data_dim),
                got: format!("{:?}", ys.shape),
            });
        }
        match self.config.posterior {
            PosteriorStructure::Structured => {
                self.structured_objective(xs_raw, ys, zs, mc_samples, train_z, noise)
            }
            PosteriorStructure::Factored => {
                self.factored_objective(xs_raw, ys, zs, mc_samples, noise)
            }
        }
    }

    /// Kernel Gram matrix of one latent on the tape, with the standing
    /// relative jitter tied to the (trainable) marginal variance.
    fn kernel_block(
        &self,
        tape: &mut Tape,
        z: Var,
        lam: Var,
        log_tau_k: Var,
        m: usize,
    ) -> Var {
        let d = tape.pairwise_sqdist(z);
        let nt = tape.scale(log_tau_k, -2.0);
        let inv_t2 = tape.exp(nt);
        let neg = tape.neg(inv_t2);
        let scaled = tape.mul_scalar(d, neg);
        let e = tape.exp(scaled);
        let kzz = tape.mul_scalar(e, lam);
        let jit = tape.scale(lam, 1e-8);
        let jv = tape.repeat_scalar(jit, m);
        let jm = tape.diag_embed(jv);
        tape.add(kzz, jm)
    }

    /// Cross kernel `kappa_k(x_t, z)` for all window inputs, `[B, M]`.
    fn kernel_cross_block(
        &self,
        tape: &mut Tape,
        z: Var,
        lam: Var,
        log_tau_k: Var,
        xs: &[f64],
    ) -> Var {
        let d = tape.cross_sqdist(z, xs);
        let nt = tape.scale(log_tau_k, -2.0);
        let inv_t2 = tape.exp(nt);
        let neg = tape.neg(inv_t2);
        let scaled = tape.mul_scalar(d, neg);
        let e = tape.exp(scaled);
        tape.mul_scalar(e, lam)
    }

    fn rec_layers(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.ids
            .rec
            .iter()
            .map(|&(w, b)| (tape.param(&self.params, w), tape.param(&self.params, b)))
            .collect()
    }

    fn gen_layers(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.ids
            .gen
            .iter()
            .map(|&(w, b)| (tape.param(&self.params, w), tape.param(&self.params, b)))
            .collect()
    }

    /// Decoder + likelihood of stacked embedding samples `[(B*S), N]`
    /// against the window observations, summed over the window with the
    /// 1/S Monte-Carlo average folded in.
    fn recon_term(
        &self,
        tape: &mut Tape,
        h_stack: Var,
        ys: &Tensor,
        mc_samples: usize,
    ) -> Result<Var> {
        let b = ys.shape[0];
        let n = ys.shape[1];
        let s = mc_samples;
        let gen = self.gen_layers(tape);
        let y_rep = Tensor::new(
            vec![b * s, n],
            (0..b * s)
                .flat_map(|r| ys.data[(r / s) * n..(r / s + 1) * n].to_vec())
                .collect(),
        );
        let ll = match self.config.likelihood {
            LikelihoodKind::Gaussian => {
                let mean = mlp_forward(tape, &gen, Activation::Sigmoid, h_stack)?;
                let log_noise = tape.param(&self.params, self.ids.log_noise_var);
                gaussian_loglik_tape(tape, &y_rep, mean, log_noise)
            }
            LikelihoodKind::Poisson => {
                let raw = mlp_forward(tape, &gen, Activation::Softplus, h_stack)?;
                let rate = tape.shift(raw, RATE_FLOOR);
                poisson_loglik_tape(tape, &y_rep, rate)?
            }
        };
        Ok(tape.scale(ll, 1.0 / s as f64))
    }

    fn structured_objective(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        zs: &[Tensor],
        mc_samples: usize,
        train_z: bool,
        noise: &Tensor,
    ) -> Result<Objective> {
        let k = self.config.latents;
        let n = self.config.embed_dim;
        let b = xs_raw.len();
        let s = mc_samples.max(1);
        let xs = self.scale_inputs(xs_raw);
        let ms: Vec<usize> = zs.iter().map(|z| z.shape[0]).collect();
        let total: usize = ms.iter().sum();
        let mut tape = Tape::new();

        let log_lambda = tape.param(&self.params, self.ids.log_lambda);
        let log_tau = tape.param(&self.params, self.ids.log_tau);
        let c = tape.param(&self.params, self.ids.mixing);
        let d_off = tape.param(&self.params, self.ids.offset);

        // Per-latent kernel pieces.
        let mut lams = Vec::with_capacity(k);
        let mut chols = Vec::with_capacity(k);
        let mut f_rows = Vec::with_capacity(k); // [B, M_k] projector rows
        let mut kinv_total: Option<Var> = None;
        let mut ku_total: Option<Var> = None;
        let mut logdet_ku: Option<Var> = None;
        let mut offset = 0;
        for ki in 0..k {
            let z = if train_z {
                // Trainable locations enter as parameter-linked leaves added
                // by the caller through `zs` values; they are exposed via a
                // dedicated parameter on demand in reinfer.
                tape.constant(Tensor::vector(zs[ki].data.clone()))
            } else {
                tape.constant(Tensor::vector(zs[ki].data.clone()))
            };
            let lam = {
                let r = tape.reshape(log_lambda, &[1, k]);
                let sl = tape.slice_cols(r, ki, ki + 1);
                let v = tape.reshape(sl, &[1]);
                tape.exp(v)
            };
            let ltau = {
                let r = tape.reshape(log_tau, &[1, k]);
                let sl = tape.slice_cols(r, ki, ki + 1);
                tape.reshape(sl, &[1])
            };
            let kzz = self.kernel_block(&mut tape, z, lam, ltau, ms[ki]);
            let l = tape
                .cholesky(kzz)
                .map_err(|e| promote(e, "free_energy_mc kernel"))?;
            let eye = tape.constant(Tensor::eye(ms[ki]));
            let half = tape.solve_lower(l, eye);
            let kinv = tape.solve_lower_t(l, half);
            let sel = tape.constant(selector(total, ms[ki], offset));
            let selt = tape.transpose(sel);
            let kinv_emb = {
                let t = tape.matmul(sel, kinv);
                tape.matmul(t, selt)
            };
            kinv_total = Some(match kinv_total {
                Some(acc) => tape.add(acc, kinv_emb),
                None => kinv_emb,
            });
            let ku_emb = {
                let t = tape.matmul(sel, kzz);
                tape.matmul(t, selt)
            };
            ku_total = Some(match ku_total {
                Some(acc) => tape.add(acc, ku_emb),
                None => ku_emb,
            });
            let dg = tape.diag_part(l);
            let ldg = tape.ln(dg);
            let sld = tape.sum(ldg);
            let ld = tape.scale(sld, 2.0);
            logdet_ku = Some(match logdet_ku {
                Some(acc) => tape.add(acc, ld),
                None => ld,
            });

            // Projector rows for the whole window: solve K Z^. X = cross^T.
            let cross = self.kernel_cross_block(&mut tape, z, lam, ltau, &xs); // [B, M]
            let cross_t = tape.transpose(cross);
            let y1 = tape.solve_lower(l, cross_t);
            let y2 = tape.solve_lower_t(l, y1); // [M, B]
            f_rows.push(tape.transpose(y2)); // [B, M]

            lams.push(lam);
            chols.push(l);
            offset += ms[ki];
        }
        let kinv_total = kinv_total.unwrap();
        let ku_total = ku_total.unwrap();
        let logdet_ku = logdet_ku.unwrap();

        // Recognition potentials for the window.
        let rec = self.rec_layers(&mut tape);
        let y_node = tape.constant(ys.clone());
        let rec_out = mlp_forward(&mut tape, &rec, Activation::Identity, y_node)?;
        let mu_all = tape.slice_cols(rec_out, 0, n); // [B, N]
        let raw_all = tape.slice_cols(rec_out, n, 2 * n);
        let sp = tape.softplus(raw_all);
        let psi_all = tape.shift(sp, VAR_FLOOR); // [B, N]

        // Precision and right-hand side assembly.
        let mut prec = kinv_total;
        let mut rhs: Option<Var> = None;
        let mut g_mats = Vec::with_capacity(b);
        for bi in 0..b {
            let rows: Vec<Var> = (0..k)
                .map(|ki| {
                    let r = tape.row(f_rows[ki], bi);
                    tape.reshape(r, &[1, ms[ki]])
                })
                .collect();
            let f_b = tape.block_diag_rows(&rows); // [K, total]
            let g_b = tape.matmul(c, f_b); // [N, total]
            let psi_b = tape.row(psi_all, bi);
            let w_b = tape.recip(psi_b);
            let wdiag = tape.diag_embed(w_b);
            let gt = tape.transpose(g_b);
            let gtw = tape.matmul(gt, wdiag); // [total, N]
            let gtwg = tape.matmul(gtw, g_b);
            prec = tape.add(prec, gtwg);
            let mu_b = tape.row(mu_all, bi);
            let resid = tape.sub(mu_b, d_off);
            let rc = tape.reshape(resid, &[n, 1]);
            let r1 = tape.matmul(gtw, rc); // [total, 1]
            let rv = tape.reshape(r1, &[total]);
            rhs = Some(match rhs {
                Some(acc) => tape.add(acc, rv),
                None => rv,
            });
            g_mats.push((f_b, g_b));
        }
        let rhs = rhs.unwrap();

        let lp = tape
            .cholesky(prec)
            .map_err(|e| promote(e, "free_energy_mc precision"))?;
        let eye_t = tape.constant(Tensor::eye(total));
        let half = tape.solve_lower(lp, eye_t);
        let s_u = tape.solve_lower_t(lp, half);
        let m_u = {
            let rc = tape.reshape(rhs, &[total, 1]);
            let y1 = tape.solve_lower(lp, rc);
            let y2 = tape.solve_lower_t(lp, y1);
            tape.reshape(y2, &[total])
        };

        // KL(q(U) || p(U)).
        let kl = {
            let prod = tape.mul(kinv_total, s_u);
            let trace = tape.sum(prod);
            let km = tape.matvec(kinv_total, m_u);
            let quad = tape.dot(m_u, km);
            let dgp = tape.diag_part(lp);
            let ldp = tape.ln(dgp);
            let slp = tape.sum(ldp);
            let logdet_su = tape.scale(slp, -2.0);
            let t1 = tape.add(trace, quad);
            let t2 = tape.add(t1, logdet_ku);
            let t3 = tape.sub(t2, logdet_su);
            let t4 = tape.shift(t3, -(total as f64));
            tape.scale(t4, 0.5)
        };

        // Posterior marginal of h per window point, sampled S times.
        let delta = tape.sub(s_u, ku_total);
        let kx = {
            let parts: Vec<Var> = lams.iter().map(|&l| tape.reshape(l, &[1, 1])).collect();
            let row = tape.concat_cols(&parts);
            let v = tape.reshape(row, &[k]);
            tape.diag_embed(v)
        };
        let ct = tape.transpose(c);
        let mut h_parts = Vec::with_capacity(b);
        for (bi, (f_b, _)) in g_mats.iter().enumerate() {
            let fd = tape.matmul(*f_b, delta);
            let ft = tape.transpose(*f_b);
            let fdf = tape.matmul(fd, ft); // [K, K]
            let mid = tape.add(kx, fdf);
            let cm = tape.matmul(c, mid);
            let s_h = tape.matmul(cm, ct); // [N, N]
            let l_h = tape
                .cholesky_jittered(s_h)
                .map_err(|e| promote(e, "free_energy_mc marginal"))?;
            let fm = tape.matvec(*f_b, m_u);
            let cf = tape.matvec(c, fm);
            let mean_h = tape.add(cf, d_off); // [N]
            let eps = Tensor::new(
                vec![s, n],
                (0..s * n)
                    .map(|i| noise.data[(bi * s) * n + i])
                    .collect(),
            );
            let eps_node = tape.constant(eps);
            let eps_t = tape.transpose(eps_node);
            let le = tape.matmul(l_h, eps_t); // [N, S]
            let let_ = tape.transpose(le);
            h_parts.push(tape.add_row_vector(let_, mean_h)); // [S, N]
        }
        let h_stack = tape.concat_rows(&h_parts); // [(B*S), N]
        let recon = self.recon_term(&mut tape, h_stack, ys, s)?;
        let fe = tape.sub(recon, kl);
        Ok(Objective {
            tape,
            free_energy: fe,
            recon,
            kl,
        })
    }

    fn factored_objective(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        zs: &[Tensor],
        mc_samples: usize,
        noise: &Tensor,
    ) -> Result<Objective> {
        let k = self.config.latents;
        let n = self.config.embed_dim;
        let b = xs_raw.len();
        let s = mc_samples.max(1);
        let xs = self.scale_inputs(xs_raw);
        let ms: Vec<usize> = zs.iter().map(|z| z.shape[0]).collect();
        let mut tape = Tape::new();

        let log_lambda = tape.param(&self.params, self.ids.log_lambda);
        let log_tau = tape.param(&self.params, self.ids.log_tau);
        let c = tape.param(&self.params, self.ids.mixing);
        let d_off = tape.param(&self.params, self.ids.offset);

        // Recognition potentials on the latent process values, [B, 2K].
        let rec = self.rec_layers(&mut tape);
        let y_node = tape.constant(ys.clone());
        let rec_out = mlp_forward(&mut tape, &rec, Activation::Identity, y_node)?;
        let mu_all = tape.slice_cols(rec_out, 0, k);
        let raw_all = tape.slice_cols(rec_out, k, 2 * k);
        let sp = tape.softplus(raw_all);
        let psi_all = tape.shift(sp, VAR_FLOOR);

        // Per-latent posterior q(u_k) and h-marginal pieces.
        let mut kl_total: Option<Var> = None;
        let mut f_mean_cols = Vec::with_capacity(k); // [B] mean of f_k
        let mut f_var_cols = Vec::with_capacity(k); // [B] var of f_k
        for ki in 0..k {
            let z = tape.constant(Tensor::vector(zs[ki].data.clone()));
            let lam = {
                let r = tape.reshape(log_lambda, &[1, k]);
                let sl = tape.slice_cols(r, ki, ki + 1);
                let v = tape.reshape(sl, &[1]);
                tape.exp(v)
            };
            let ltau = {
                let r = tape.reshape(log_tau, &[1, k]);
                let sl = tape.slice_cols(r, ki, ki + 1);
                tape.reshape(sl, &[1])
            };
            let kzz = self.kernel_block(&mut tape, z, lam, ltau, ms[ki]);
            let l = tape
                .cholesky(kzz)
                .map_err(|e| promote(e, "free_energy_mc kernel"))?;
            let eye = tape.constant(Tensor::eye(ms[ki]));
            let half = tape.solve_lower(l, eye);
            let kinv = tape.solve_lower_t(l, half);
            let cross = self.kernel_cross_block(&mut tape, z, lam, ltau, &xs);
            let cross_t = tape.transpose(cross);
            let y1 = tape.solve_lower(l, cross_t);
            let y2 = tape.solve_lower_t(l, y1);
            let f_all = tape.transpose(y2); // [B, M]

            // Precision = K^{-1} + sum_b F_b^T psi_bk^{-1} F_b; assembled as
            // F^T diag(w) F with w the per-point precisions of latent k.
            let psi_k = tape.slice_cols(psi_all, ki, ki + 1); // [B, 1]
            let w_col = tape.recip(psi_k);
            let w_vec = tape.reshape(w_col, &[b]);
            let wdiag = tape.diag_embed(w_vec);
            let ft = tape.transpose(f_all);
            let ftw = tape.matmul(ft, wdiag); // [M, B]
            let ftwf = tape.matmul(ftw, f_all);
            let prec = tape.add(kinv, ftwf);
            let mu_k = tape.slice_cols(mu_all, ki, ki + 1); // [B, 1]
            let rhs = tape.matmul(ftw, mu_k); // [M, 1]
            let lp = tape
                .cholesky(prec)
                .map_err(|e| promote(e, "free_energy_mc precision"))?;
            let y1m = tape.solve_lower(lp, rhs);
            let y2m = tape.solve_lower_t(lp, y1m); // [M, 1] mean of u_k
            let halfp = tape.solve_lower(lp, eye);
            let s_k = tape.solve_lower_t(lp, halfp);

            // KL(q(u_k) || p(u_k)).
            let prod = tape.mul(kinv, s_k);
            let trace = tape.sum(prod);
            let mv = tape.reshape(y2m, &[ms[ki]]);
            let km = tape.matvec(kinv, mv);
            let quad = tape.dot(mv, km);
            let dgp = tape.diag_part(lp);
            let ldp = tape.ln(dgp);
            let slp = tape.sum(ldp);
            let logdet_sk = tape.scale(slp, -2.0);
            let dgk = tape.diag_part(l);
            let ldk = tape.ln(dgk);
            let slk = tape.sum(ldk);
            let logdet_k = tape.scale(slk, 2.0);
            let t1 = tape.add(trace, quad);
            let t2 = tape.add(t1, logdet_k);
            let t3 = tape.sub(t2, logdet_sk);
            let t4 = tape.shift(t3, -(ms[ki] as f64));
            let klk = tape.scale(t4, 0.5);
            kl_total = Some(match kl_total {
                Some(acc) => tape.add(acc, klk),
                None => klk,
            });

            // Marginal mean/variance of f_k at each window point:
            // mean = F m, var = kappa(x, x) + F (S - K) F^T (diagonal only).
            let fm = tape.matmul(f_all, y2m); // [B, 1]
            f_mean_cols.push(tape.reshape(fm, &[b]));
            let delta = tape.sub(s_k, kzz);
            let fd = tape.matmul(f_all, delta); // [B, M]
            let fdf = tape.mul(fd, f_all); // row-wise product
            let var_part = tape.sum_rows(fdf); // [B]
            let lam_rep = tape.repeat_scalar(lam, b);
            let var_f = tape.add(lam_rep, var_part);
            // Numerical floor keeps sqrt well-defined at near-interpolation
            // points.
            let var_fl = tape.shift(var_f, 1e-10);
            f_var_cols.push(var_fl);
        }
        let kl = kl_total.unwrap();

        // Sample f per point (diagonal over latents), map to h = C f + d.
        let f_mean = {
            let cols: Vec<Var> = f_mean_cols.iter().map(|&v| tape.reshape(v, &[b, 1])).collect();
            tape.concat_cols(&cols) // [B, K]
        };
        let f_std = {
            let cols: Vec<Var> = f_var_cols.iter().map(|&v| tape.reshape(v, &[b, 1])).collect();
            let var = tape.concat_cols(&cols);
            tape.sqrt(var)
        };
        // noise rows: [(B*S), N]; only the first K columns are used here.
        let mut h_parts = Vec::with_capacity(b);
        let ct = tape.transpose(c);
        for bi in 0..b {
            let eps = Tensor::new(
                vec![s, k],
                (0..s)
                    .flat_map(|si| {
                        (0..k)
                            .map(|kj| noise.data[(bi * s + si) * n + kj])
                            .collect::<Vec<f64>>()
                    })
                    .collect(),
            );
            let eps_node = tape.constant(eps);
            let std_b = tape.row(f_std, bi);
            let mean_b = tape.row(f_mean, bi);
            let scaled = {
                let st = tape.reshape(std_b, &[1, k]);
                let stt = tape.concat_rows(&vec![st; s]);
                tape.mul(eps_node, stt)
            };
            let f_s = tape.add_row_vector(scaled, mean_b); // [S, K]
            let hc = tape.matmul(f_s, ct); // [S, N]
            h_parts.push(tape.add_row_vector(hc, d_off));
        }
        let h_stack = tape.concat_rows(&h_parts);
        let recon = self.recon_term(&mut tape, h_stack, ys, s)?;
        let fe = tape.sub(recon, kl);
        Ok(Objective {
            tape,
            free_energy: fe,
            recon,
            kl,
        })
    }
}

fn promote(e: Error, op: &'static str) -> Error {
    match e {
        Error::NotPositiveDefinite { pivot, index, .. } => {
            Error::NotPositiveDefinite { op, pivot, index }
        }
        other => other,
    }
}

// ── Training ────────────────────────────────────────────────────────

/// Contiguous windows of at most `len` points; the tail keeps its remainder
/// when at least two points long.
pub fn windows(t: usize, len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < t {
        let end = (start + len).min(t);
        if end - start >= 2 || out.is_empty() {
            out.push((start, end));
        }
        start = end;
    }
    out
}

pub struct TrainOutput {
    pub trace: MetricTrace,
    pub checkpoint: serde_json::Value,
}

impl GpfaModel {
    /// Adaptive-moment ascent on the windowed MC free energy. Windows are
    /// contiguous time blocks visited in shuffled order with a fresh uniform
    /// inducing grid per window; deterministic given the config seed.
    pub fn train(
        &mut self,
        xs: &[f64],
        ys: &Tensor,
        config: &TrainConfig,
        out_dir: Option<&std::path::Path>,
    ) -> Result<TrainOutput> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let t = xs.len();
        let wins = windows(t, config.batch_len);
        let mut trace = MetricTrace::default();
        let started = std::time::Instant::now();
        let mut checkpoint = self.to_checkpoint((config.seed, 0), json!(config));
        for epoch in 0..config.epochs {
            let order = rng::shuffled_indices(&mut rng, wins.len());
            let (mut fe, mut rc, mut kl, mut cnt) = (0.0, 0.0, 0.0, 0.0);
            for &wi in &order {
                let (lo, hi) = wins[wi];
                let wxs = &xs[lo..hi];
                let wys = Tensor::new(
                    vec![hi - lo, self.config.data_dim],
                    ys.data[lo * self.config.data_dim..hi * self.config.data_dim].to_vec(),
                );
                let zs = self.grid_for(wxs, config.inducing);
                let obj = self.free_energy_mc(wxs, &wys, &zs, config.mc_samples, false, &mut rng)?;
                let mut tape = obj.tape;
                let neg = tape.neg(obj.free_energy);
                tape.backward(neg, &mut self.params)?;
                self.params
                    .adam_step(config.learning_rate, 0.9, 0.999, 1e-8);
                self.params.zero_grad();
                fe += tape.scalar_value(obj.free_energy);
                rc += tape.scalar_value(obj.recon);
                kl += tape.scalar_value(obj.kl);
                cnt += 1.0;
            }
            trace.push(
                epoch,
                fe / cnt,
                rc / cnt,
                kl / cnt,
                started.elapsed().as_secs_f64(),
            );
            checkpoint = self.to_checkpoint((config.seed, epoch as u128 + 1), json!(config));
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(
                    dir.join("checkpoint.json"),
                    serde_json::to_string_pretty(&checkpoint).unwrap(),
                )?;
                std::fs::write(dir.join("trace.csv"), trace.to_csv())?;
            }
        }
        Ok(TrainOutput { trace, checkpoint })
    }

    pub fn to_checkpoint(&self, rng_state: (u64, u128), train_config: serde_json::Value) -> serde_json::Value {
        checkpoint_to_json(
            match self.config.posterior {
                PosteriorStructure::Structured => "sr_nlgpfa",
                PosteriorStructure::Factored => "sgp_vae_factored",
            },
            &self.params,
            rng_state,
            json!({ "model": self.config, "train": train_config }),
        )
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        let config: GpfaConfig = serde_json::from_value(
            data.config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::InvalidConfig("checkpoint missing model config".into()))?,
        )
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut model = GpfaModel::new(config);
        if data.params.len() != model.params.len() {
            return Err(Error::InvalidConfig(
                "checkpoint parameter count mismatch".into(),
            ));
        }
        model.params = data.params.clone();
        Ok(model)
    }
}

// ── Re-inference with changed inducing locations ────────────────────

pub struct ReinferResult {
    pub qu: GaussianDense,
    /// Posterior mean of each latent process at every input, `[T, K]`.
    pub latent_means: Tensor,
    /// MC estimate of the full-sequence free energy under the new posterior.
    pub free_energy: f64,
}

impl GpfaModel {
    /// Free-form sparse-GP inference over a full sequence with new inducing
    /// locations `zs_new` (already in scaled input units). With `optimize_z`
    /// the locations are refined by gradient ascent on the free energy while
    /// every other parameter stays frozen.
    pub fn reinfer(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        zs_new: &[Tensor],
        optimize_z: bool,
        mc_samples: usize,
        seed: u64,
    ) -> Result<ReinferResult> {
        if zs_new.len() != self.config.latents {
            return Err(Error::InvalidConfig(
                "need one inducing set per latent".into(),
            ));
        }
        let mut zs = zs_new.to_vec();
        if optimize_z && !xs_raw.is_empty() {
            zs = self.optimize_locations(xs_raw, ys, zs, mc_samples, seed)?;
        }
        if xs_raw.is_empty() {
            let model = self.inducing_model(&zs)?;
            let prior = model.prior_qu()?;
            return Ok(ReinferResult {
                qu: prior,
                latent_means: Tensor::zeros(&[0, self.config.latents]),
                free_energy: 0.0,
            });
        }
        let qu = self.infer_qu(xs_raw, ys, &zs)?;
        let model = self.inducing_model(&zs)?;
        let xs = self.scale_inputs(xs_raw);
        let k = self.config.latents;
        let mut latent_means = Tensor::zeros(&[xs.len(), k]);
        let mut off_acc = Vec::with_capacity(k);
        let mut off = 0;
        for ki in 0..k {
            off_acc.push(off);
            off += model.inducing_count(ki);
        }
        for (ti, &x) in xs.iter().enumerate() {
            for ki in 0..k {
                let f = crate::sparse_gp::projector(&[x], ki, &model)?;
                let m = model.inducing_count(ki);
                let mk = Tensor::vector(
                    qu.mean.data[off_acc[ki]..off_acc[ki] + m].to_vec(),
                );
                latent_means.data[ti * k + ki] = f.dot(&mk);
            }
        }
        let free_energy = self.sequence_free_energy(xs_raw, ys, &qu, &zs, mc_samples, seed)?;
        Ok(ReinferResult {
            qu,
            latent_means,
            free_energy,
        })
    }

    /// Pure MC estimate of the full-sequence free energy under a given
    /// posterior; the same noise seed gives paired comparisons across
    /// different inducing configurations.
    pub fn sequence_free_energy(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        qu: &GaussianDense,
        zs: &[Tensor],
        mc_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        let model = self.inducing_model(zs)?;
        let xs = self.scale_inputs(xs_raw);
        let prior = model.prior_qu()?;
        let kl = gaussian_kl(qu, &prior)?;
        let mut rng = rng::seeded(seed);
        let n = self.config.embed_dim;
        let s = mc_samples.max(1);
        let mut recon = 0.0;
        for (ti, &x) in xs.iter().enumerate() {
            let marg = posterior_h_marginal(&[x], qu, &model)?;
            let y_t = Tensor::vector(
                ys.data[ti * self.config.data_dim..(ti + 1) * self.config.data_dim].to_vec(),
            );
            let mut acc = 0.0;
            for _ in 0..s {
                let eps = rng::normal_tensor(&mut rng, &[n]);
                let le = marg.chol.matvec(&eps);
                let h = marg.mean.add(&le);
                let hm = Tensor::new(vec![1, n], h.data);
                let out = self.decode(&hm);
                acc += match self.config.likelihood {
                    LikelihoodKind::Gaussian => {
                        gaussian_loglik(&y_t, &Tensor::vector(out.data), self.noise_variance())
                    }
                    LikelihoodKind::Poisson => {
                        poisson_loglik(&y_t, &Tensor::vector(out.data))?
                    }
                };
            }
            recon += acc / s as f64;
        }
        Ok(recon - kl)
    }

    /// Gradient ascent on the free energy in the inducing locations only.
    fn optimize_locations(
        &self,
        xs_raw: &[f64],
        ys: &Tensor,
        zs: Vec<Tensor>,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        // Frozen copy of the model parameters plus trainable location leaves.
        let mut params = self.params.clone();
        let z_ids: Vec<ParamId> = zs
            .iter()
            .enumerate()
            .map(|(k, z)| params.add(&format!("reinfer.z{k}"), Tensor::vector(z.data.clone())))
            .collect();
        let mut rng = rng::seeded(seed);
        let steps = 60;
        for _ in 0..steps {
            let zs_now: Vec<Tensor> = z_ids
                .iter()
                .map(|&id| {
                    let v = params.value(id).clone();
                    Tensor::new(vec![v.len(), 1], v.data)
                })
                .collect();
            let obj = self.objective_with_param_locations(
                &params, &z_ids, xs_raw, ys, &zs_now, mc_samples, &mut rng,
            )?;
            let mut tape = obj.tape;
            let neg = tape.neg(obj.free_energy);
            tape.backward(neg, &mut params)?;
            params.adam_step_subset(1e-2, 0.9, 0.999, 1e-8, Some(&z_ids));
            params.zero_grad();
        }
        Ok(z_ids
            .iter()
            .map(|&id| {
                let v = params.value(id).clone();
                Tensor::new(vec![v.len(), 1], v.data)
            })
            .collect())
    }

    /// Structured objective with inducing locations taken from parameter
    /// leaves (everything else frozen constants).
    fn objective_with_param_locations(
        &self,
        params: &ParamSet,
        z_ids: &[ParamId],
        xs_raw: &[f64],
        ys: &Tensor,
        _zs: &[Tensor],
        mc_samples: usize,
        rng: &mut Prng,
    ) -> Result<Objective> {
        // Build a clone of the structured objective where z enters via
        // params; reuse the main path by temporarily treating z as
        // constants is not differentiable, so the locations get their own
        // leaf nodes here.
        let k = self.config.latents;
        let n = self.config.embed_dim;
        let b = xs_raw.len();
        let s = mc_samples.max(1);
        let xs = self.scale_inputs(xs_raw);
        let mut tape = Tape::new();
        let noise = rng::normal_tensor(rng, &[b * s, n]);

        let log_lambda = tape.constant(params.value(self.ids.log_lambda).clone());
        let log_tau = tape.constant(params.value(self.ids.log_tau).clone());
        let c = tape.constant(params.value(self.ids.mixing).clone());
        let d_off = tape.constant(params.value(self.ids.offset).clone());

        let ms: Vec<usize> = z_ids.iter().map(|&id| params.value(id).len()).collect();
        let total: usize = ms.iter().sum();

        let mut lams = Vec::new();
        let mut f_rows = Vec::new();
        let mut kinv_total: Option<Var> = None;
        let mut ku_total: Option<Var> = None;
        let mut logdet_ku: Option<Var> = None;
        let mut offset = 0;
        for ki in 0..k {
            let z = tape.param(params, z_ids[ki]);
            let lam = {
                let r = tape.reshape(log_lambda, &[1, k]);
                let sl = tape.slice_cols(r, ki, ki + 1);
                let v = tape.reshape(sl, &[1]);
                tape.exp(v)
            };
            let ltau = {
                let r = tape.reshape(log_tau, &[1, k]);
                let sl = tape.slice_cols(r, ki, ki + 1);
                tape.reshape(sl, &[1])
            };
            let kzz = self.kernel_block(&mut tape, z, lam, ltau, ms[ki]);
            let l = tape.cholesky(kzz).map_err(|e| promote(e, "reinfer kernel"))?;
            let eye = tape.constant(Tensor::eye(ms[ki]));
            let half = tape.solve_lower(l, eye);
            let kinv = tape.solve_lower_t(l, half);
            let sel = tape.constant(selector(total, ms[ki], offset));
            let selt = tape.transpose(sel);
            let t1 = tape.matmul(sel, kinv);
            let kinv_emb = tape.matmul(t1, selt);
            kinv_total = Some(match kinv_total {
                Some(a) => tape.add(a, kinv_emb),
                None => kinv_emb,
            });
            let t2 = tape.matmul(sel, kzz);
            let ku_emb = tape.matmul(t2, selt);
            ku_total = Some(match ku_total {
                Some(a) => tape.add(a, ku_emb),
                None => ku_emb,
            });
            let dg = tape.diag_part(l);
            let ldg = tape.ln(dg);
            let sld = tape.sum(ldg);
            let ld = tape.scale(sld, 2.0);
            logdet_ku = Some(match logdet_ku {
                Some(a) => tape.add(a, ld),
                None => ld,
            });
            let cross = self.kernel_cross_block(&mut tape, z, lam, ltau, &xs);
            let cross_t = tape.transpose(cross);
            let y1 = tape.solve_lower(l, cross_t);
            let y2 = tape.solve_lower_t(l, y1);
            f_rows.push(tape.transpose(y2));
            lams.push(lam);
            offset += ms[ki];
        }
        let kinv_total = kinv_total.unwrap();
        let ku_total = ku_total.unwrap();
        let logdet_ku = logdet_ku.unwrap();

        // Recognition potentials with frozen weights.
        let rec_layers: Vec<(Var, Var)> = self
            .ids
            .rec
            .iter()
            .map(|&(w, bb)| {
                let wv = tape.constant(params.value(w).clone());
                let bv = tape.constant(params.value(bb).clone());
                (wv, bv)
            })
            .collect();
        let y_node = tape.constant(ys.clone());
        let rec_out = mlp_forward(&mut tape, &rec_layers, Activation::Identity, y_node)?;
        let mu_all = tape.slice_cols(rec_out, 0, n);
        let raw_all = tape.slice_cols(rec_out, n, 2 * n);
        let sp = tape.softplus(raw_all);
        let psi_all = tape.shift(sp, VAR_FLOOR);

        let mut prec = kinv_total;
        let mut rhs: Option<Var> = None;
        let mut f_mats = Vec::with_capacity(b);
        for bi in 0..b {
            let rows: Vec<Var> = (0..k)
                .map(|ki| {
                    let r = tape.row(f_rows[ki], bi);
                    tape.reshape(r, &[1, ms[ki]])
                })
                .collect();
            let f_b = tape.block_diag_rows(&rows);
            let g_b = tape.matmul(c, f_b);
            let psi_b = tape.row(psi_all, bi);
            let w_b = tape.recip(psi_b);
            let wdiag = tape.diag_embed(w_b);
            let gt = tape.transpose(g_b);
            let gtw = tape.matmul(gt, wdiag);
            let gtwg = tape.matmul(gtw, g_b);
            prec = tape.add(prec, gtwg);
            let mu_b = tape.row(mu_all, bi);
            let resid = tape.sub(mu_b, d_off);
            let rc = tape.reshape(resid, &[n, 1]);
            let r1 = tape.matmul(gtw, rc);
            let rv = tape.reshape(r1, &[total]);
            rhs = Some(match rhs {
                Some(a) => tape.add(a, rv),
                None => rv,
            });
            f_mats.push(f_b);
        }
        let rhs = rhs.unwrap();
        let lp = tape
            .cholesky(prec)
            .map_err(|e| promote(e, "reinfer precision"))?;
        let eye_t = tape.constant(Tensor::eye(total));
        let half = tape.solve_lower(lp, eye_t);
        let s_u = tape.solve_lower_t(lp, half);
        let m_u = {
            let rc = tape.reshape(rhs, &[total, 1]);
            let y1 = tape.solve_lower(lp, rc);
            let y2 = tape.solve_lower_t(lp, y1);
            tape.reshape(y2, &[total])
        };
        let kl = {
            let prod = tape.mul(kinv_total, s_u);
            let trace = tape.sum(prod);
            let km = tape.matvec(kinv_total, m_u);
            let quad = tape.dot(m_u, km);
            let dgp = tape.diag_part(lp);
            let ldp = tape.ln(dgp);
            let slp = tape.sum(ldp);
            let logdet_su = tape.scale(slp, -2.0);
            let t1 = tape.add(trace, quad);
            let t2 = tape.add(t1, logdet_ku);
            let t3 = tape.sub(t2, logdet_su);
            let t4 = tape.shift(t3, -(total as f64));
            tape.scale(t4, 0.5)
        };
        let delta = tape.sub(s_u, ku_total);
        let kx = {
            let parts: Vec<Var> = lams.iter().map(|&l| tape.reshape(l, &[1, 1])).collect();
            let row = tape.concat_cols(&parts);
            let v = tape.reshape(row, &[k]);
            tape.diag_embed(v)
        };
        let ct = tape.transpose(c);
        let mut h_parts = Vec::with_capacity(b);
        for (bi, f_b) in f_mats.iter().enumerate() {
            let fd = tape.matmul(*f_b, delta);
            let ft = tape.transpose(*f_b);
            let fdf = tape.matmul(fd, ft);
            let mid = tape.add(kx, fdf);
            let cm = tape.matmul(c, mid);
            let s_h = tape.matmul(cm, ct);
            let l_h = tape
                .cholesky_jittered(s_h)
                .map_err(|e| promote(e, "reinfer marginal"))?;
            let fm = tape.matvec(*f_b, m_u);
            let cf = tape.matvec(c, fm);
            let mean_h = tape.add(cf, d_off);
            let eps = Tensor::new(
                vec![s, n],
                (0..s * n).map(|i| noise.data[(bi * s) * n + i]).collect(),
            );
            let eps_node = tape.constant(eps);
            let eps_t = tape.transpose(eps_node);
            let le = tape.matmul(l_h, eps_t);
            let let_ = tape.transpose(le);
            h_parts.push(tape.add_row_vector(let_, mean_h));
        }
        let h_stack = tape.concat_rows(&h_parts);
        // Decoder with frozen weights.
        let gen_layers: Vec<(Var, Var)> = self
            .ids
            .gen
            .iter()
            .map(|&(w, bb)| {
                let wv = tape.constant(params.value(w).clone());
                let bv = tape.constant(params.value(bb).clone());
                (wv, bv)
            })
            .collect();
        let y_rep = Tensor::new(
            vec![b * s, self.config.data_dim],
            (0..b * s)
                .flat_map(|r| {
                    ys.data[(r / s) * self.config.data_dim..(r / s + 1) * self.config.data_dim]
                        .to_vec()
                })
                .collect(),
        );
        let ll = match self.config.likelihood {
            LikelihoodKind::Gaussian => {
                let mean = mlp_forward(&mut tape, &gen_layers, Activation::Sigmoid, h_stack)?;
                let log_noise = tape.constant(params.value(self.ids.log_noise_var).clone());
                gaussian_loglik_tape(&mut tape, &y_rep, mean, log_noise)
            }
            LikelihoodKind::Poisson => {
                let raw = mlp_forward(&mut tape, &gen_layers, Activation::Softplus, h_stack)?;
                let rate = tape.shift(raw, RATE_FLOOR);
                poisson_loglik_tape(&mut tape, &y_rep, rate)?
            }
        };
        let recon = tape.scale(ll, 1.0 / s as f64);
        let fe = tape.sub(recon, kl);
        Ok(Objective {
            tape,
            free_energy: fe,
            recon,
            kl,
        })
    }
}

// ── Relevance scores ────────────────────────────────────────────────

impl GpfaModel {
    /// Average squared gradient of output `n`'s canonical rate with respect
    /// to latent process `k`, evaluated at the given latent vectors
    /// (typically posterior means).
    pub fn relevance_score(&self, latent_k: usize, output_n: usize, f_samples: &Tensor) -> Result<f64> {
        let k = self.config.latents;
        if f_samples.shape.len() != 2 || f_samples.shape[1] != k {
            return Err(Error::ShapeMismatch {
                op: "relevance_score",
                expected: format!("[S, {k}]"),
                got: format!("{:?}", f_samples.shape),
            });
        }
        let samples = f_samples.shape[0];
        let mut acc = 0.0;
        for si in 0..samples {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::new(
                vec![1, k],
                f_samples.data[si * k..(si + 1) * k].to_vec(),
            ));
            let c = tape.constant(self.params.value(self.ids.mixing).clone());
            let d = tape.constant(self.params.value(self.ids.offset).clone());
            let ct = tape.transpose(c);
            let hc = tape.matmul(f, ct);
            let h = tape.add_row_vector(hc, d);
            let gen: Vec<(Var, Var)> = self
                .ids
                .gen
                .iter()
                .map(|&(w, b)| {
                    let wv = tape.constant(self.params.value(w).clone());
                    let bv = tape.constant(self.params.value(b).clone());
                    (wv, bv)
                })
                .collect();
            let act = match self.config.likelihood {
                LikelihoodKind::Gaussian => Activation::Sigmoid,
                LikelihoodKind::Poisson => Activation::Softplus,
            };
            let out = mlp_forward(&mut tape, &gen, act, h)?;
            let rate_n = tape.slice_cols(out, output_n, output_n + 1);
            let scalar = tape.reshape(rate_n, &[1]);
            let grads = tape.backward_collect(scalar)?;
            let g = grads[f.0].data[latent_k];
            acc += g * g;
        }
        Ok(acc / samples as f64)
    }
}

// ── Per-point mean-field VAE baseline ───────────────────────────────

/// Vanilla VAE over time points: diagonal Gaussian q(h_t) straight from the
/// recognition network, standard-normal prior on each h_t, shared decoder
/// and likelihood.
pub struct GpfaPointVae {
    pub config: GpfaConfig,
    pub params: ParamSet,
    rec: Vec<(ParamId, ParamId)>,
    gen: Vec<(ParamId, ParamId)>,
    log_noise_var: ParamId,
}

impl GpfaPointVae {
    pub fn new(config: GpfaConfig) -> Self {
        let mut rng = rng::seeded(config.seed.wrapping_add(101));
        let mut params = ParamSet::new();
        let n = config.embed_dim;
        let rec = vec![
            init_linear(&mut rng, &mut params, "rec.l1", config.hidden, config.data_dim),
            init_linear(&mut rng, &mut params, "rec.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "rec.head", 2 * n, config.hidden),
        ];
        let gen = vec![
            init_linear(&mut rng, &mut params, "gen.l1", config.hidden, n),
            init_linear(&mut rng, &mut params, "gen.l2", config.hidden, config.hidden),
            init_linear(&mut rng, &mut params, "gen.head", config.data_dim, config.hidden),
        ];
        let log_noise_var = params.add("gen.log_noise_var", Tensor::scalar((0.5f64).powi(2).ln()));
        GpfaPointVae {
            config,
            params,
            rec,
            gen,
            log_noise_var,
        }
    }

    pub fn free_energy(&self, ys: &Tensor, rng: &mut Prng) -> Result<Objective> {
        let b = ys.shape[0];
        let n = self.config.embed_dim;
        let noise = rng::normal_tensor(rng, &[b, n]);
        self.free_energy_with_noise(ys, &noise)
    }

    pub fn free_energy_with_noise(&self, ys: &Tensor, noise: &Tensor) -> Result<Objective> {
        let n = self.config.embed_dim;
        let mut tape = Tape::new();
        let rec: Vec<(Var, Var)> = self
            .rec
            .iter()
            .map(|&(w, b)| (tape.param(&self.params, w), tape.param(&self.params, b)))
            .collect();
        let gen: Vec<(Var, Var)> = self
            .gen
            .iter()
            .map(|&(w, b)| (tape.param(&self.params, w), tape.param(&self.params, b)))
            .collect();
        let y_node = tape.constant(ys.clone());
        let out = mlp_forward(&mut tape, &rec, Activation::Identity, y_node)?;
        let mean = tape.slice_cols(out, 0, n);
        let raw = tape.slice_cols(out, n, 2 * n);
        let sp = tape.softplus(raw);
        let var = tape.shift(sp, VAR_FLOOR);
        let std = tape.sqrt(var);
        let eps = tape.constant(noise.clone());
        let scaled = tape.mul(std, eps);
        let h = tape.add(mean, scaled);
        let ll = match self.config.likelihood {
            LikelihoodKind::Gaussian => {
                let dec = mlp_forward(&mut tape, &gen, Activation::Sigmoid, h)?;
                let log_noise = tape.param(&self.params, self.log_noise_var);
                gaussian_loglik_tape(&mut tape, ys, dec, log_noise)
            }
            LikelihoodKind::Poisson => {
                let raw_rate = mlp_forward(&mut tape, &gen, Activation::Softplus, h)?;
                let rate = tape.shift(raw_rate, RATE_FLOOR);
                poisson_loglik_tape(&mut tape, ys, rate)?
            }
        };
        // Sum of per-point diagonal Gaussian KLs to the standard normal.
        let m2 = tape.mul(mean, mean);
        let lnv = tape.ln(var);
        let t1 = tape.add(var, m2);
        let t2 = tape.sub(t1, lnv);
        let t3 = tape.shift(t2, -1.0);
        let ksum = tape.sum(t3);
        let kl = tape.scale(ksum, 0.5);
        let fe = tape.sub(ll, kl);
        Ok(Objective {
            tape,
            free_energy: fe,
            recon: ll,
            kl,
        })
    }

    pub fn train(&mut self, ys: &Tensor, config: &TrainConfig) -> Result<MetricTrace> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let t = ys.shape[0];
        let wins = windows(t, config.batch_len);
        let mut trace = MetricTrace::default();
        let started = std::time::Instant::now();
        for epoch in 0..config.epochs {
            let order = rng::shuffled_indices(&mut rng, wins.len());
            let (mut fe, mut rc, mut kl, mut cnt) = (0.0, 0.0, 0.0, 0.0);
            for &wi in &order {
                let (lo, hi) = wins[wi];
                let wys = Tensor::new(
                    vec![hi - lo, self.config.data_dim],
                    ys.data[lo * self.config.data_dim..hi * self.config.data_dim].to_vec(),
                );
                let obj = self.free_energy(&wys, &mut rng)?;
                let mut tape = obj.tape;
                let neg = tape.neg(obj.free_energy);
                tape.backward(neg, &mut self.params)?;
                self.params
                    .adam_step(config.learning_rate, 0.9, 0.999, 1e-8);
                self.params.zero_grad();
                fe += tape.scalar_value(obj.free_energy);
                rc += tape.scalar_value(obj.recon);
                kl += tape.scalar_value(obj.kl);
                cnt += 1.0;
            }
            trace.push(
                epoch,
                fe / cnt,
                rc / cnt,
                kl / cnt,
                started.elapsed().as_secs_f64(),
            );
        }
        Ok(trace)
    }

    /// Mean reconstruction through the recognition mean (no sampling).
    pub fn reconstruct(&self, ys: &Tensor) -> Result<Tensor> {
        let n = self.config.embed_dim;
        let rec_layers: Vec<(Tensor, Tensor)> = self
            .rec
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect();
        let out = mlp_forward_pure(&rec_layers, Activation::Identity, ys);
        let b = ys.shape[0];
        let mut h = Tensor::zeros(&[b, n]);
        for bi in 0..b {
            for j in 0..n {
                h.data[bi * n + j] = out.data[bi * 2 * n + j];
            }
        }
        let gen_layers: Vec<(Tensor, Tensor)> = self
            .gen
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect();
        Ok(match self.config.likelihood {
            LikelihoodKind::Gaussian => mlp_forward_pure(&gen_layers, Activation::Sigmoid, &h),
            LikelihoodKind::Poisson => {
                mlp_forward_pure(&gen_layers, Activation::Softplus, &h).map(|v| v + RATE_FLOOR)
            }
        })
    }

    pub fn noise_variance(&self) -> f64 {
        self.params.value(self.log_noise_var).data[0].exp()
    }
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Posterior-mean reconstruction of a sequence under the model's own
/// posterior family, for SMSE/NLL evaluation. Inference runs on contiguous
/// windows with a fresh grid per window, mirroring training.
pub fn reconstruct_sequence(
    model: &GpfaModel,
    xs: &[f64],
    ys: &Tensor,
    window: usize,
    inducing: usize,
) -> Result<Tensor> {
    let t = xs.len();
    let n = model.config.data_dim;
    let mut out = Tensor::zeros(&[t, n]);
    for (lo, hi) in windows(t, window) {
        let wxs = &xs[lo..hi];
        let wys = Tensor::new(vec![hi - lo, n], ys.data[lo * n..hi * n].to_vec());
        let zs = model.grid_for(wxs, inducing);
        let qu = model.infer_qu(wxs, &wys, &zs)?;
        let imodel = model.inducing_model(&zs)?;
        let sxs = model.scale_inputs(wxs);
        for (ti, &x) in sxs.iter().enumerate() {
            let mean_h = match model.config.posterior {
                PosteriorStructure::Structured => {
                    posterior_h_marginal(&[x], &qu, &imodel)?.mean
                }
                PosteriorStructure::Factored => {
                    // Recover per-latent blocks from the block-diagonal joint.
                    let mut parts = Vec::new();
                    let mut off = 0;
                    for ki in 0..model.config.latents {
                        let m = imodel.inducing_count(ki);
                        let mut cov = Tensor::zeros(&[m, m]);
                        for i in 0..m {
                            for j in 0..m {
                                cov.data[i * m + j] =
                                    qu.covariance.data[(off + i) * qu.dim() + off + j];
                            }
                        }
                        parts.push(GaussianDense::new(
                            Tensor::vector(qu.mean.data[off..off + m].to_vec()),
                            cov,
                        )?);
                        off += m;
                    }
                    let (mean, _) = factored_posterior_h(&[x], &parts, &imodel)?;
                    mean
                }
            };
            let hm = Tensor::new(vec![1, model.config.embed_dim], mean_h.data);
            let dec = model.decode(&hm);
            for j in 0..n {
                out.data[(lo + ti) * n + j] = dec.data[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_model(posterior: PosteriorStructure, likelihood: LikelihoodKind) -> GpfaModel {
        GpfaModel::new(GpfaConfig {
            latents: 2,
            embed_dim: 3,
            data_dim: 3,
            hidden: 8,
            likelihood,
            posterior,
            input_scale: 0.25,
            seed: 11,
        })
    }

    fn tiny_window(
        model: &GpfaModel,
        t: usize,
        rng: &mut Prng,
    ) -> (Vec<f64>, Tensor, Vec<Tensor>) {
        let xs: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let ys = rng::uniform_tensor(rng, &[t, model.config.data_dim], 0.1, 0.9);
        let zs = model.grid_for(&xs, 3);
        (xs, ys, zs)
    }

    #[test]
    fn recognize_constant_network_gives_identical_potentials() {
        let mut model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        for p in model.params.iter_mut() {
            if p.name.starts_with("rec.") && p.name.ends_with(".w") {
                p.value = Tensor::zeros(&p.value.shape);
            }
        }
        let y = rng::uniform_tensor(&mut seeded(2), &[4, 3], -1.0, 1.0);
        let pots = model.recognize(&y).unwrap();
        for p in &pots[1..] {
            assert!(p.mean.max_abs_diff(&pots[0].mean) < 1e-15);
            assert!(p.variances.max_abs_diff(&pots[0].variances) < 1e-15);
        }
        // Zero head bias: mu = 0, psi = softplus(0) + floor.
        assert!(pots[0].mean.frobenius_norm() < 1e-15);
        let expect = 2.0f64.ln() + VAR_FLOOR;
        for &v in &pots[0].variances.data {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn recognize_is_pointwise_and_batch_consistent() {
        let model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        let mut rng = seeded(3);
        let mut y = rng::uniform_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        // Duplicate a row.
        for j in 0..3 {
            y.data[2 * 3 + j] = y.data[0 * 3 + j];
        }
        let pots = model.recognize(&y).unwrap();
        assert!(pots[2].mean.max_abs_diff(&pots[0].mean) < 1e-15);
        // Batch of three equals three single-point calls.
        for bi in 0..3 {
            let single = Tensor::new(vec![1, 3], y.data[bi * 3..(bi + 1) * 3].to_vec());
            let p = model.recognize(&single).unwrap();
            assert!(p[0].mean.max_abs_diff(&pots[bi].mean) < 1e-15);
            assert!(p[0].variances.max_abs_diff(&pots[bi].variances) < 1e-15);
        }
    }

    #[test]
    fn tape_posterior_matches_pure_structured_route() {
        let model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        let mut rng = seeded(5);
        let (xs, ys, zs) = tiny_window(&model, 6, &mut rng);
        let obj = model
            .free_energy_mc(&xs, &ys, &zs, 1, false, &mut rng)
            .unwrap();
        // Pure route.
        let qu = model.infer_qu(&xs, &ys, &zs).unwrap();
        let imodel = model.inducing_model(&zs).unwrap();
        let prior = imodel.prior_qu().unwrap();
        let kl_pure = gaussian_kl(&qu, &prior).unwrap();
        let kl_tape = obj.tape.scalar_value(obj.kl);
        assert!(
            (kl_pure - kl_tape).abs() < 1e-9,
            "pure {kl_pure} vs tape {kl_tape}"
        );
    }

    #[test]
    fn free_energy_is_deterministic_given_seed() {
        let model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        let (xs, ys, zs) = tiny_window(&model, 5, &mut seeded(7));
        let a = model
            .free_energy_mc(&xs, &ys, &zs, 2, false, &mut seeded(9))
            .unwrap();
        let b = model
            .free_energy_mc(&xs, &ys, &zs, 2, false, &mut seeded(9))
            .unwrap();
        assert_eq!(
            a.tape.scalar_value(a.free_energy).to_bits(),
            b.tape.scalar_value(b.free_energy).to_bits()
        );
    }

    #[test]
    fn uninformative_recognition_collapses_kl() {
        // Force the recognition head to emit huge variances: KL -> 0.
        let mut model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        for p in model.params.iter_mut() {
            if p.name == "rec.head.w" {
                p.value = Tensor::zeros(&p.value.shape);
            }
            if p.name == "rec.head.b" {
                for (i, v) in p.value.data.iter_mut().enumerate() {
                    *v = if i < 3 { 0.0 } else { 40.0 }; // softplus(40) ~ 1e17? no: 40
                }
            }
        }
        // softplus(40) = 40, variance 40 is large but finite; scale to 1e8
        // via repeated doubling is unnecessary: use the head bias directly.
        for p in model.params.iter_mut() {
            if p.name == "rec.head.b" {
                for (i, v) in p.value.data.iter_mut().enumerate() {
                    if i >= 3 {
                        *v = 1e8;
                    }
                }
            }
        }
        let (xs, ys, zs) = tiny_window(&model, 6, &mut seeded(13));
        let obj = model
            .free_energy_mc(&xs, &ys, &zs, 1, false, &mut seeded(1))
            .unwrap();
        let kl = obj.tape.scalar_value(obj.kl);
        assert!((-1e-10..1e-4).contains(&kl), "kl {kl}");
    }

    #[test]
    fn factored_joint_has_zero_cross_latent_blocks() {
        let model = tiny_model(PosteriorStructure::Factored, LikelihoodKind::Gaussian);
        let mut rng = seeded(17);
        let (xs, ys, zs) = tiny_window(&model, 6, &mut rng);
        let qu = model.infer_qu(&xs, &ys, &zs).unwrap();
        let m = 3;
        for i in 0..m {
            for j in 0..m {
                assert_eq!(qu.covariance.at(i, m + j), 0.0);
                assert_eq!(qu.covariance.at(m + j, i), 0.0);
            }
        }
    }

    #[test]
    fn structured_couples_latents_when_mixing_is_dense() {
        let model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        let mut rng = seeded(19);
        let (xs, ys, zs) = tiny_window(&model, 6, &mut rng);
        let qu = model.infer_qu(&xs, &ys, &zs).unwrap();
        let m = 3;
        let mut off_block = 0.0;
        for i in 0..m {
            for j in 0..m {
                off_block += qu.covariance.at(i, m + j).abs();
            }
        }
        assert!(off_block > 1e-8, "no explaining-away coupling: {off_block}");
    }

    #[test]
    fn training_improves_free_energy_on_synthetic_data() {
        // Monotone-improvement smoke test, median over 5 seeds.
        use crate::datasets::{gen_gpfa, GpfaSynthConfig};
        let mut improvements = Vec::new();
        for seed in 0..5 {
            let data_cfg = GpfaSynthConfig {
                latents: 2,
                outputs: 10,
                length: 256,
                marginal_variance: 1.0,
                lengthscale: 12.0,
                decoder_seed: 77,
                noise_std: 0.1,
                likelihood: LikelihoodKind::Gaussian,
                rate_scale: 5.0,
            };
            let data = gen_gpfa(&data_cfg, &mut seeded(500 + seed)).unwrap();
            let mut model = GpfaModel::new(GpfaConfig {
                latents: 2,
                embed_dim: 10,
                data_dim: 10,
                hidden: 32,
                likelihood: LikelihoodKind::Gaussian,
                posterior: PosteriorStructure::Structured,
                input_scale: 0.1,
                seed,
            });
            let cfg = TrainConfig {
                learning_rate: 3e-3,
                batch_len: 64,
                mc_samples: 1,
                epochs: 200,
                seed,
                inducing: 8,
            };
            let out = model.train(&data.inputs, &data.observations, &cfg, None).unwrap();
            improvements
                .push(out.trace.free_energy.last().unwrap() - out.trace.free_energy.first().unwrap());
            // KL stays non-negative throughout training.
            assert!(out.trace.kl.iter().all(|&k| k >= -1e-9));
        }
        improvements.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            improvements[2] > 0.0,
            "median improvement {improvements:?}"
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        use crate::datasets::{gen_gpfa, GpfaSynthConfig};
        let data = gen_gpfa(
            &GpfaSynthConfig {
                latents: 2,
                outputs: 4,
                length: 32,
                marginal_variance: 1.0,
                lengthscale: 6.0,
                decoder_seed: 3,
                noise_std: 0.1,
                likelihood: LikelihoodKind::Gaussian,
                rate_scale: 5.0,
            },
            &mut seeded(1),
        )
        .unwrap();
        let mut model = GpfaModel::new(GpfaConfig {
            latents: 2,
            embed_dim: 4,
            data_dim: 4,
            hidden: 8,
            likelihood: LikelihoodKind::Gaussian,
            posterior: PosteriorStructure::Structured,
            input_scale: 0.2,
            seed: 5,
        });
        let before: Vec<Vec<f64>> = model.params.iter().map(|p| p.value.data.clone()).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_len: 16,
            mc_samples: 1,
            epochs: 3,
            seed: 2,
            inducing: 4,
        };
        model.train(&data.inputs, &data.observations, &cfg, None).unwrap();
        for (p, b) in model.params.iter().zip(before.iter()) {
            assert_eq!(&p.value.data, b);
        }
    }

    #[test]
    fn training_trace_is_deterministic() {
        use crate::datasets::{gen_gpfa, GpfaSynthConfig};
        let data = gen_gpfa(
            &GpfaSynthConfig {
                latents: 1,
                outputs: 3,
                length: 48,
                marginal_variance: 1.0,
                lengthscale: 8.0,
                decoder_seed: 9,
                noise_std: 0.15,
                likelihood: LikelihoodKind::Gaussian,
                rate_scale: 5.0,
            },
            &mut seeded(21),
        )
        .unwrap();
        let run = || {
            let mut model = GpfaModel::new(GpfaConfig {
                latents: 1,
                embed_dim: 3,
                data_dim: 3,
                hidden: 8,
                likelihood: LikelihoodKind::Gaussian,
                posterior: PosteriorStructure::Structured,
                input_scale: 0.15,
                seed: 4,
            });
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                batch_len: 16,
                mc_samples: 1,
                epochs: 4,
                seed: 8,
                inducing: 4,
            };
            model
                .train(&data.inputs, &data.observations, &cfg, None)
                .unwrap()
                .trace
        };
        let a = run();
        let b = run();
        for (x, y) in a.free_energy.iter().zip(b.free_energy.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn reinfer_with_training_locations_reproduces_qu_exactly() {
        let model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        let mut rng = seeded(23);
        let (xs, ys, zs) = tiny_window(&model, 8, &mut rng);
        let direct = model.infer_qu(&xs, &ys, &zs).unwrap();
        let re = model.reinfer(&xs, &ys, &zs, false, 1, 0).unwrap();
        for (a, b) in direct.mean.data.iter().zip(re.qu.mean.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in direct
            .covariance
            .data
            .iter()
            .zip(re.qu.covariance.data.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn reinfer_empty_sequence_returns_prior() {
        let model = tiny_model(PosteriorStructure::Structured, LikelihoodKind::Gaussian);
        let zs = model.grid_for(&[0.0, 10.0], 4);
        let re = model
            .reinfer(&[], &Tensor::zeros(&[0, 3]), &zs, false, 1, 0)
            .unwrap();
        assert!(re.qu.mean.frobenius_norm() == 0.0);
        let imodel = model.inducing_model(&zs).unwrap();
        assert!(re.qu.covariance.max_abs_diff(&imodel.prior_covariance()) < 1e-12);
    }

    #[test]
    fn relevance_score_zero_for_ignored_latent() {
        // C = I and generative first layer ignoring h_1: gradient w.r.t. f_1
        // vanishes.
        let mut model = GpfaModel::new(GpfaConfig {
            latents: 3,
            embed_dim: 3,
            data_dim: 3,
            hidden: 8,
            likelihood: LikelihoodKind::Gaussian,
            posterior: PosteriorStructure::Structured,
            input_scale: 0.2,
            seed: 31,
        });
        for p in model.params.iter_mut() {
            if p.name == "mixing.c" {
                p.value = Tensor::eye(3);
            }
            if p.name == "mixing.d" {
                p.value = Tensor::zeros(&[3]);
            }
            if p.name == "gen.l1.w" {
                for r in 0..p.value.shape[0] {
                    let c = p.value.shape[1];
                    p.value.data[r * c + 1] = 0.0;
                }
            }
        }
        let f = rng::uniform_tensor(&mut seeded(33), &[7, 3], -1.0, 1.0);
        let d = model.relevance_score(1, 0, &f).unwrap();
        assert_eq!(d, 0.0);
        let d_other = model.relevance_score(0, 0, &f).unwrap();
        assert!(d_other > 0.0);
    }

    #[test]
    fn relevance_score_linear_map_is_squared_coefficient() {
        // Replace the generative path by an identity-ish linear map: output
        // activation must be linear, so use a Gaussian model with the
        // sigmoid replaced by hand-built weights in the linear regime is
        // brittle; instead check against the analytic chain rule through
        // the sigmoid at a fixed point.
        let mut model = GpfaModel::new(GpfaConfig {
            latents: 1,
            embed_dim: 1,
            data_dim: 1,
            hidden: 1,
            likelihood: LikelihoodKind::Gaussian,
            posterior: PosteriorStructure::Structured,
            input_scale: 0.2,
            seed: 37,
        });
        let coef = 0.75;
        for p in model.params.iter_mut() {
            match p.name.as_str() {
                "mixing.c" => p.value = Tensor::matrix(&[vec![1.0]]),
                "mixing.d" => p.value = Tensor::zeros(&[1]),
                "gen.l1.w" => p.value = Tensor::matrix(&[vec![coef]]),
                "gen.l1.b" => p.value = Tensor::vector(vec![1.0]), // keep ReLU active
                "gen.l2.w" => p.value = Tensor::matrix(&[vec![1.0]]),
                "gen.l2.b" => p.value = Tensor::vector(vec![0.0]),
                "gen.head.w" => p.value = Tensor::matrix(&[vec![1.0]]),
                "gen.head.b" => p.value = Tensor::vector(vec![0.0]),
                _ => {}
            }
        }
        let f0 = 0.4;
        let f = Tensor::new(vec![1, 1], vec![f0]);
        let d = model.relevance_score(0, 0, &f).unwrap();
        // rate = sigmoid(coef * f + 1); d(rate)/df = coef * s(1 - s).
        let a = coef * f0 + 1.0;
        let sv = 1.0 / (1.0 + (-a as f64).exp());
        let expect = (coef * sv * (1.0 - sv)).powi(2);
        assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
    }

    #[test]
    fn point_vae_kl_at_zeroed_recognition_matches_closed_form() {
        let mut vae = GpfaPointVae::new(GpfaConfig {
            latents: 2,
            embed_dim: 3,
            data_dim: 3,
            hidden: 8,
            likelihood: LikelihoodKind::Gaussian,
            posterior: PosteriorStructure::Structured,
            input_scale: 0.2,
            seed: 41,
        });
        for p in vae.params.iter_mut() {
            if p.name.starts_with("rec.") {
                p.value = Tensor::zeros(&p.value.shape);
            }
        }
        let ys = rng::uniform_tensor(&mut seeded(43), &[5, 3], 0.2, 0.8);
        let obj = vae.free_energy(&ys, &mut seeded(45)).unwrap();
        // Zeroed recognition: mu = 0, v = softplus(0) + floor; per-dimension
        // KL = 0.5 (v - 1 - ln v).
        let v = 2.0f64.ln() + VAR_FLOOR;
        let expect = 5.0 * 3.0 * 0.5 * (v - 1.0 - v.ln());
        let kl = obj.tape.scalar_value(obj.kl);
        assert!((kl - expect).abs() < 1e-10, "{kl} vs {expect}");
        assert!(kl >= 0.0);
    }

    #[test]
    fn point_vae_training_is_deterministic() {
        let ys = rng::uniform_tensor(&mut seeded(47), &[32, 3], 0.2, 0.8);
        let run = || {
            let mut vae = GpfaPointVae::new(GpfaConfig {
                latents: 2,
                embed_dim: 3,
                data_dim: 3,
                hidden: 8,
                likelihood: LikelihoodKind::Gaussian,
                posterior: PosteriorStructure::Structured,
                input_scale: 0.2,
                seed: 49,
            });
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                batch_len: 8,
                mc_samples: 1,
                epochs: 3,
                seed: 51,
                inducing: 4,
            };
            vae.train(&ys, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        // Wall-clock column is excluded from the determinism contract.
        assert_eq!(a.free_energy, b.free_energy);
        assert_eq!(a.recon, b.recon);
        assert_eq!(a.kl, b.kl);
    }

    #[test]
    fn poisson_window_objective_is_finite_and_trains() {
        use crate::datasets::{gen_gpfa, GpfaSynthConfig};
        let data = gen_gpfa(
            &GpfaSynthConfig {
                latents: 2,
                outputs: 5,
                length: 64,
                marginal_variance: 1.0,
                lengthscale: 8.0,
                decoder_seed: 13,
                noise_std: 0.0,
                likelihood: LikelihoodKind::Poisson,
                rate_scale: 4.0,
            },
            &mut seeded(53),
        )
        .unwrap();
        let mut model = GpfaModel::new(GpfaConfig {
            latents: 2,
            embed_dim: 5,
            data_dim: 5,
            hidden: 16,
            likelihood: LikelihoodKind::Poisson,
            posterior: PosteriorStructure::Structured,
            input_scale: 0.1,
            seed: 55,
        });
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            batch_len: 32,
            mc_samples: 1,
            epochs: 20,
            seed: 57,
            inducing: 6,
        };
        let out = model
            .train(&data.inputs, &data.observations, &cfg, None)
            .unwrap();
        assert!(out.trace.free_energy.iter().all(|v| v.is_finite()));
        assert!(out.trace.free_energy.last().unwrap() > out.trace.free_energy.first().unwrap());
    }
}
