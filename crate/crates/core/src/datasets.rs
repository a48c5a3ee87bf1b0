//! Seeded synthetic data generators: pinwheel clusters, the "bar" image
//! model (independent and side-dependent priors), and nonlinear GPFA time
//! series with Gaussian or Poisson observations. All generators are pure
//! functions of (config, seed).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::sparse_gp::KernelParams;
use crate::tape::{mlp_forward_pure, Activation};
use crate::tensor::{cholesky_jittered, Tensor};

// ── Bar dataset ─────────────────────────────────────────────────────

/// Bar-image generator configuration. A `D x D` binary grid carries `2D`
/// latent bars (D horizontal then D vertical); the temperature `omega` sets
/// how deterministic the pixels are given the bars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarConfig {
    pub grid_side: usize,
    pub omega: f64,
    pub side_dependent: bool,
    pub samples: usize,
    pub seed: u64,
}

impl BarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return Err(Error::InvalidConfig("grid side must be >= 2".into()));
        }
        if self.omega <= 0.0 {
            return Err(Error::InvalidConfig("omega must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_count(&self) -> usize {
        2 * self.grid_side
    }

    pub fn pixel_count(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Generated bar data: binary images (rows) plus the ground-truth bar
/// activations that produced them.
#[derive(Debug, Clone)]
pub struct BarData {
    pub images: Tensor,
    pub latents: Tensor,
}

/// Decoder weights of the bar generative model: `W[pixel, bar] = 2 omega` on
/// the bar, else 0; bias `-omega` per pixel.
pub fn bar_decoder_weights(grid_side: usize, omega: f64) -> (Tensor, Tensor) {
    let d2 = grid_side * grid_side;
    let nz = 2 * grid_side;
    let mut w = Tensor::zeros(&[d2, nz]);
    for row in 0..grid_side {
        for col in 0..grid_side {
            let pixel = row * grid_side + col;
            w.data[pixel * nz + row] = 2.0 * omega; // horizontal bar `row`
            w.data[pixel * nz + grid_side + col] = 2.0 * omega; // vertical bar `col`
        }
    }
    let b = Tensor::vector(vec![-omega; d2]);
    (w, b)
}

pub fn gen_bar(config: &BarConfig, rng: &mut Prng) -> Result<BarData> {
    config.validate()?;
    let d = config.grid_side;
    let nz = config.latent_count();
    let d2 = config.pixel_count();
    let (w, b) = bar_decoder_weights(d, config.omega);
    let mut images = Tensor::zeros(&[config.samples, d2]);
    let mut latents = Tensor::zeros(&[config.samples, nz]);
    for s in 0..config.samples {
        let z: Vec<f64> = if config.side_dependent {
            // One and only one bar on each side.
            let h = rng::categorical(rng, &vec![1.0; d]);
            let v = rng::categorical(rng, &vec![1.0; d]);
            (0..nz)
                .map(|i| {
                    if i == h || i == d + v {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            (0..nz).map(|_| rng::bernoulli(rng, 0.5)).collect()
        };
        for (i, &zi) in z.iter().enumerate() {
            latents.data[s * nz + i] = zi;
        }
        for pix in 0..d2 {
            let mut a = b.data[pix];
            for (j, &zj) in z.iter().enumerate() {
                a += w.data[pix * nz + j] * zj;
            }
            let rate = 1.0 / (1.0 + (-a).exp());
            images.data[s * d2 + pix] = rng::bernoulli(rng, rate);
        }
    }
    Ok(BarData { images, latents })
}

// ── Pinwheel ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PinwheelConfig {
    pub arms: usize,
    pub points_per_arm: usize,
    pub radial_std: f64,
    pub tangential_std: f64,
    pub rate: f64,
}

impl Default for PinwheelConfig {
    fn default() -> Self {
        PinwheelConfig {
            arms: 5,
            points_per_arm: 500,
            radial_std: 0.3,
            tangential_std: 0.05,
            rate: 0.25,
        }
    }
}

/// 2-D pinwheel: per-arm Gaussian blobs at unit radius, rotated to evenly
/// spaced angles and warped by an angle proportional to the (exponentiated)
/// radius. Returns points `[n, 2]` and arm labels.
pub fn gen_pinwheel(config: &PinwheelConfig, rng: &mut Prng) -> Result<(Tensor, Vec<usize>)> {
    if config.arms < 2 {
        return Err(Error::InvalidConfig("pinwheel needs >= 2 arms".into()));
    }
    let n = config.arms * config.points_per_arm;
    let mut points = Tensor::zeros(&[n, 2]);
    let mut labels = Vec::with_capacity(n);
    let mut idx = 0;
    for arm in 0..config.arms {
        let base = 2.0 * std::f64::consts::PI * arm as f64 / config.arms as f64;
        for _ in 0..config.points_per_arm {
            let fr = 1.0 + config.radial_std * rng::standard_normal(rng);
            let ft = config.tangential_std * rng::standard_normal(rng);
            let angle = base + config.rate * fr.exp();
            let (c, s) = (angle.cos(), angle.sin());
            points.data[idx * 2] = fr * c - ft * s;
            points.data[idx * 2 + 1] = fr * s + ft * c;
            labels.push(arm);
            idx += 1;
        }
    }
    Ok((points, labels))
}

// ── Synthetic GPFA ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpfaSynthConfig {
    pub latents: usize,
    pub outputs: usize,
    pub length: usize,
    pub marginal_variance: f64,
    pub lengthscale: f64,
    pub decoder_seed: u64,
    pub noise_std: f64,
    pub likelihood: LikelihoodKind,
    /// Poisson rate scale applied to the softplus output.
    #[serde(default = "default_rate_scale")]
    pub rate_scale: f64,
}

fn default_rate_scale() -> f64 {
    5.0
}

impl GpfaSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latents > self.outputs {
            return Err(Error::InvalidConfig(
                "latent count must not exceed output count".into(),
            ));
        }
        if self.length < 2 {
            return Err(Error::InvalidConfig("series length must be >= 2".into()));
        }
        Ok(())
    }
}

/// Generated GPFA series: inputs (timestamps scaled to unit spacing),
/// observations `[T, N]`, ground-truth latent paths `[T, K]`, noise-free
/// observation means `[T, N]`, and the fixed decoder.
#[derive(Debug, Clone)]
pub struct GpfaSynthData {
    pub inputs: Vec<f64>,
    pub observations: Tensor,
    pub latents: Tensor,
    pub clean_means: Tensor,
    pub decoder: Vec<(Tensor, Tensor)>,
    pub mixing: Tensor,
    pub offset: Tensor,
}

/// Draws latent paths exactly from their GP priors via a Cholesky of the
/// full `T x T` kernel matrix, mixes them affinely into embeddings, and
/// pushes the embeddings through a fixed random 2-layer ReLU MLP with a
/// sigmoid (Gaussian case) or softplus-rate (Poisson case) output.
pub fn gen_gpfa(config: &GpfaSynthConfig, rng: &mut Prng) -> Result<GpfaSynthData> {
    config.validate()?;
    let (k, n, t) = (config.latents, config.outputs, config.length);
    let xs: Vec<f64> = (0..t).map(|i| i as f64).collect();
    let params = KernelParams::new(config.marginal_variance, config.lengthscale);

    // T x T kernel Gram matrix shared by every latent.
    let mut gram = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            gram.data[i * t + j] = crate::sparse_gp::eq_kernel(&[xs[i]], &[xs[j]], &params);
        }
    }
    let (l, _) = cholesky_jittered(&gram).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, index, .. } => Error::NotPositiveDefinite {
            op: "gen_gpfa kernel",
            pivot,
            index,
        },
        other => other,
    })?;

    let mut latents = Tensor::zeros(&[t, k]);
    for ki in 0..k {
        let eps = rng::normal_tensor(rng, &[t]);
        let path = l.matvec(&eps);
        for ti in 0..t {
            latents.data[ti * k + ki] = path.data[ti];
        }
    }

    // Fixed random decoder drawn from its own seed so the same decoder can
    // be regenerated independently of the sampling rng.
    let mut drng = rng::seeded(config.decoder_seed);
    let mixing = rng::uniform_tensor(
        &mut drng,
        &[n, k],
        -1.0 / (k as f64).sqrt(),
        1.0 / (k as f64).sqrt(),
    );
    let offset = Tensor::zeros(&[n]);
    let hidden = 2 * n;
    let decoder = vec![
        (
            rng::uniform_tensor(&mut drng, &[hidden, n], -1.0, 1.0),
            rng::uniform_tensor(&mut drng, &[hidden], -0.3, 0.3),
        ),
        (
            rng::uniform_tensor(&mut drng, &[n, hidden], -1.0, 1.0),
            rng::uniform_tensor(&mut drng, &[n], -0.3, 0.3),
        ),
    ];

    let embeddings = {
        let mut h = latents.matmul(&mixing.transpose());
        for ti in 0..t {
            for ni in 0..n {
                h.data[ti * n + ni] += offset.data[ni];
            }
        }
        h
    };
    let activation = match config.likelihood {
        LikelihoodKind::Gaussian => Activation::Sigmoid,
        LikelihoodKind::Poisson => Activation::Softplus,
    };
    let mut clean = mlp_forward_pure(&decoder, activation, &embeddings);
    if config.likelihood == LikelihoodKind::Poisson {
        clean = clean.scale(config.rate_scale);
    }

    let mut observations = clean.clone();
    match config.likelihood {
        LikelihoodKind::Gaussian => {
            for v in observations.data.iter_mut() {
                *v += config.noise_std * rng::standard_normal(rng);
            }
        }
        LikelihoodKind::Poisson => {
            for v in observations.data.iter_mut() {
                *v = rng::poisson(rng, *v);
            }
        }
    }
    Ok(GpfaSynthData {
        inputs: xs,
        observations,
        latents,
        clean_means: clean,
        decoder,
        mixing,
        offset,
    })
}
