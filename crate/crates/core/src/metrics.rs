//! Evaluation metrics and the complexity-scaling benchmark: standardised
//! mean squared error, per-datapoint negative log-likelihood (shared with
//! the model likelihoods), the exhaustive cross-distance statistic for bar
//! decoders, the off-diagonal covariance mass ratio, nearest-arm coverage
//! for pinwheel generations, and wall-clock scaling of the structured
//! versus factored posterior assemblies.

use std::collections::BTreeMap;
use std::time::Instant;

use serde_json::{json, Value};

use crate::datasets::LikelihoodKind;
use crate::error::{Error, Result};
use crate::likelihood::{gaussian_loglik, poisson_loglik};
use crate::rng::{self, Prng};
use crate::sparse_gp::{
    factored_qu, structured_qu, DiagonalGaussianPotential, InducingModel, KernelParams,
};
use crate::tensor::{cholesky, solve_lower, Tensor};

/// Mean squared error standardised by the per-dimension target variance,
/// averaged over dimensions.
pub fn smse(predictions: &Tensor, targets: &Tensor) -> Result<f64> {
    if predictions.shape != targets.shape {
        return Err(Error::ShapeMismatch {
            op: "smse",
            expected: format!("{:?}", targets.shape),
            got: format!("{:?}", predictions.shape),
        });
    }
    let (t, n) = (targets.shape[0], targets.shape[1]);
    let mut total = 0.0;
    for j in 0..n {
        let mean: f64 = (0..t).map(|i| targets.at(i, j)).sum::<f64>() / t as f64;
        let var: f64 = (0..t)
            .map(|i| (targets.at(i, j) - mean).powi(2))
            .sum::<f64>()
            / t as f64;
        if var <= 0.0 {
            return Err(Error::ZeroVariance(j));
        }
        let mse: f64 = (0..t)
            .map(|i| (predictions.at(i, j) - targets.at(i, j)).powi(2))
            .sum::<f64>()
            / t as f64;
        total += mse / var;
    }
    Ok(total / n as f64)
}

/// Per-datapoint negative log-likelihood under the canonical parameter
/// (Gaussian mean with shared noise variance, or Poisson rate). Shares the
/// likelihood implementation with the model objectives.
pub fn nll_per_datapoint(
    kind: LikelihoodKind,
    targets: &Tensor,
    canonical: &Tensor,
    noise_variance: f64,
) -> Result<f64> {
    let count = targets.len() as f64;
    let ll = match kind {
        LikelihoodKind::Gaussian => gaussian_loglik(targets, canonical, noise_variance),
        LikelihoodKind::Poisson => poisson_loglik(targets, canonical)?,
    };
    Ok(-ll / count)
}

/// All one-horizontal-plus-one-vertical bar images on a `D x D` grid.
pub fn cross_patterns(grid_side: usize) -> Vec<Tensor> {
    let d = grid_side;
    let mut out = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            let mut img = Tensor::zeros(&[d * d]);
            for j in 0..d {
                img.data[r * d + j] = 1.0;
                img.data[j * d + c] = 1.0;
            }
            out.push(img);
        }
    }
    out
}

/// Average squared distance from the decoded output of every latent
/// configuration to the nearest cross pattern; exact enumeration over all
/// `2^(2D)` configurations.
pub fn cross_distance(
    decode: &dyn Fn(&Tensor) -> Tensor,
    grid_side: usize,
) -> Result<f64> {
    let nz = 2 * grid_side;
    if nz > 20 {
        return Err(Error::TooLarge {
            states: 1u64 << nz,
            limit: 1 << 20,
        });
    }
    let states = 1usize << nz;
    let crosses = cross_patterns(grid_side);
    let d2 = grid_side * grid_side;
    let chunk = 2048usize;
    let mut total = 0.0;
    let mut s = 0;
    while s < states {
        let hi = (s + chunk).min(states);
        let rows = hi - s;
        let mut z = Tensor::zeros(&[rows, nz]);
        for (r, state) in (s..hi).enumerate() {
            for i in 0..nz {
                z.data[r * nz + i] = ((state >> i) & 1) as f64;
            }
        }
        let decoded = decode(&z);
        assert_eq!(decoded.shape, vec![rows, d2], "decoder output shape");
        for r in 0..rows {
            let row = &decoded.data[r * d2..(r + 1) * d2];
            let mut best = f64::INFINITY;
            for cross in &crosses {
                let mut dist = 0.0;
                for (a, b) in row.iter().zip(cross.data.iter()) {
                    dist += (a - b) * (a - b);
                    if dist >= best {
                        break;
                    }
                }
                best = best.min(dist);
            }
            total += best;
        }
        s = hi;
    }
    Ok(total / states as f64)
}

/// `sum_{i != j} |S_ij| / sum_{i, j} |S_ij|`.
pub fn off_diagonal_ratio(s: &Tensor) -> f64 {
    assert_eq!(s.shape.len(), 2);
    assert_eq!(s.shape[0], s.shape[1]);
    let n = s.shape[0];
    let mut off = 0.0;
    let mut all = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = s.at(i, j).abs();
            all += v;
            if i != j {
                off += v;
            }
        }
    }
    if all == 0.0 {
        0.0
    } else {
        off / all
    }
}

/// Fraction of generated points within a Mahalanobis radius of 3 of some
/// training arm (per-arm Gaussians fitted from the labelled training data).
pub fn nearest_arm_coverage(
    generated: &Tensor,
    train: &Tensor,
    labels: &[usize],
    arms: usize,
) -> Result<f64> {
    let d = train.shape[1];
    let mut chols = Vec::with_capacity(arms);
    let mut means = Vec::with_capacity(arms);
    for arm in 0..arms {
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == arm)
            .map(|(i, _)| i)
            .collect();
        if rows.len() < d + 1 {
            return Err(Error::InvalidConfig(format!("arm {arm} has too few points")));
        }
        let mut mean = vec![0.0; d];
        for &r in &rows {
            for j in 0..d {
                mean[j] += train.at(r, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        let mut cov = Tensor::zeros(&[d, d]);
        for &r in &rows {
            for a in 0..d {
                for b in 0..d {
                    cov.data[a * d + b] +=
                        (train.at(r, a) - mean[a]) * (train.at(r, b) - mean[b]);
                }
            }
        }
        cov = cov.scale(1.0 / rows.len() as f64);
        for i in 0..d {
            cov.data[i * d + i] += 1e-9;
        }
        chols.push(cholesky(&cov).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, index, .. } => Error::NotPositiveDefinite {
                op: "nearest_arm_coverage",
                pivot,
                index,
            },
            other => other,
        })?);
        means.push(mean);
    }
    let n = generated.shape[0];
    let mut covered = 0usize;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for arm in 0..arms {
            let r = Tensor::vector(
                (0..d)
                    .map(|j| generated.at(i, j) - means[arm][j])
                    .collect(),
            );
            let y = solve_lower(&chols[arm], &r);
            let m2: f64 = y.data.iter().map(|v| v * v).sum();
            best = best.min(m2.sqrt());
        }
        if best <= 3.0 {
            covered += 1;
        }
    }
    Ok(covered as f64 / n as f64)
}

// ── Complexity benchmark ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub latents: usize,
    pub inducing: usize,
    pub structured_seconds: f64,
    pub factored_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("latents,inducing,structured_seconds,factored_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e}\n",
                r.latents, r.inducing, r.structured_seconds, r.factored_seconds
            ));
        }
        out
    }

    pub fn seconds(&self, latents: usize, inducing: usize) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .find(|r| r.latents == latents && r.inducing == inducing)
            .map(|r| (r.structured_seconds, r.factored_seconds))
    }
}

fn bench_instance(
    k: usize,
    m: usize,
    t: usize,
    n: usize,
    rng: &mut Prng,
) -> (
    InducingModel,
    Vec<(Vec<f64>, DiagonalGaussianPotential)>,
    Vec<(Vec<f64>, DiagonalGaussianPotential)>,
) {
    // Lengthscale tied to the grid spacing keeps conditioning stable as M
    // grows.
    let tau = 3.0 / (m.max(2) as f64 - 1.0);
    let grid = InducingModel::uniform_grid(0.0, 1.0, m);
    let model = InducingModel::new(
        1,
        vec![grid; k],
        (0..k).map(|_| KernelParams::new(1.0, tau)).collect(),
        rng::uniform_tensor(rng, &[n, k], -1.0, 1.0),
        Tensor::zeros(&[n]),
    )
    .unwrap();
    let mut structured_pots = Vec::with_capacity(t);
    let mut factored_pots = Vec::with_capacity(t);
    for _ in 0..t {
        let x = vec![rng::uniform(rng, 0.0, 1.0)];
        structured_pots.push((
            x.clone(),
            DiagonalGaussianPotential::new(
                rng::uniform_tensor(rng, &[n], -1.0, 1.0),
                rng::uniform_tensor(rng, &[n], 0.5, 1.5),
            ),
        ));
        factored_pots.push((
            x,
            DiagonalGaussianPotential::new(
                rng::uniform_tensor(rng, &[k], -1.0, 1.0),
                rng::uniform_tensor(rng, &[k], 0.5, 1.5),
            ),
        ));
    }
    (model, structured_pots, factored_pots)
}

fn time_until(min_seconds: f64, mut call: impl FnMut()) -> f64 {
    // Warm up once, then repeat until the budget is hit for a stable mean.
    call();
    let mut reps = 0u32;
    let start = Instant::now();
    loop {
        call();
        reps += 1;
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= min_seconds && reps >= 3 {
            return elapsed / reps as f64;
        }
        if reps >= 10_000 {
            return elapsed / reps as f64;
        }
    }
}

/// Times the pure structured and factored posterior assemblies on synthetic
/// inputs over a grid of latent counts and inducing counts. Small fixed
/// window (T = 4, N = 4) keeps the cubic factorization dominant.
pub fn complexity_benchmark(k_list: &[usize], m_list: &[usize], seed: u64) -> BenchTable {
    let mut table = BenchTable::default();
    let mut rng = rng::seeded(seed);
    for &k in k_list {
        for &m in m_list {
            let (model, spots, fpots) = bench_instance(k, m, 4, 4, &mut rng);
            let structured_seconds = time_until(0.05, || {
                let _ = structured_qu(&spots, &model).unwrap();
            });
            let factored_seconds = time_until(0.05, || {
                let _ = factored_qu(&fpots, &model).unwrap();
            });
            table.rows.push(BenchRow {
                latents: k,
                inducing: m,
                structured_seconds,
                factored_seconds,
            });
        }
    }
    table
}

// ── Evaluation report ───────────────────────────────────────────────

/// Per-metric mean and spread over seeds, with the per-seed values retained.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, Vec<f64>>,
    pub seeds: Vec<u64>,
    pub config_echo: Value,
}

impl EvalReport {
    pub fn push(&mut self, name: &str, value: f64) {
        self.metrics.entry(name.to_string()).or_default().push(value);
    }

    pub fn mean_std(&self, name: &str) -> Option<(f64, f64)> {
        let vs = self.metrics.get(name)?;
        if vs.is_empty() {
            return None;
        }
        let mean = vs.iter().sum::<f64>() / vs.len() as f64;
        let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vs.len() as f64;
        Some((mean, var.sqrt()))
    }

    pub fn to_json(&self) -> Value {
        let mut metrics = serde_json::Map::new();
        for (name, values) in &self.metrics {
            let (mean, std) = self.mean_std(name).unwrap();
            metrics.insert(
                name.clone(),
                json!({ "mean": mean, "std": std, "per_seed": values }),
            );
        }
        json!({
            "metrics": metrics,
            "seeds": self.seeds,
            "config": self.config_echo,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        for name in self.metrics.keys() {
            let (mean, std) = self.mean_std(name).unwrap();
            out.push_str(&format!("{name},{mean:.17e},{std:.17e}\n"));
        }
        out
    }
}
