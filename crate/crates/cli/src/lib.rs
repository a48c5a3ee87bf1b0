//! Experiment runner: data generation, training, evaluation, re-inference,
//! the scaling benchmark, and the bound-ordering comparison, all driven by
//! JSON configs with reproducible seeds.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure (the
//! message names the failing operation).

pub mod config;
pub mod data;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use srvae::error::Error;
use srvae::gmm::{GmmSrvae, PointVae};
use srvae::gpfa::{reconstruct_sequence, GpfaModel, GpfaPointVae, PosteriorStructure};
use srvae::io::{checkpoint_from_json, MetricTrace, TrainConfig};
use srvae::metrics::{
    complexity_benchmark, cross_distance, nearest_arm_coverage, nll_per_datapoint, smse,
    EvalReport,
};
use srvae::tensor::Tensor;
use srvae::tree_vae::{TreeSrvae, TreeSrvaeConfig, TreeVariant};

use config::{
    BenchCommandConfig, DataSource, EvalCommandConfig, GenDataConfig, ModelSpec,
    ReinferCommandConfig, TrainCommandConfig,
};

#[derive(Parser)]
#[command(name = "srvae", version, about = "Structured-recognition variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV + ground-truth sidecar).
    GenData(Common),
    /// Train a model; writes checkpoint.json and trace.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the inducing points per window.
        #[arg(long)]
        inducing: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset; writes report.json/report.csv.
    Eval(Common),
    /// Re-run sparse-GP inference with changed inducing locations.
    Reinfer {
        #[command(flatten)]
        common: Common,
        /// Override the inducing count per latent.
        #[arg(long)]
        inducing: Option<usize>,
    },
    /// Wall-clock scaling of structured vs factored posterior assembly.
    Bench(Common),
    /// Train the tree-model variants on bar data and report the
    /// free-energy ordering.
    CompareBounds {
        /// Dataset family (only `bar` is supported).
        #[arg(long, default_value = "bar")]
        dataset: String,
        /// Bar temperature.
        #[arg(long, default_value_t = 4.0)]
        omega: f64,
        /// Side-dependent prior instead of independent bars.
        #[arg(long, default_value_t = false)]
        side_dependent: bool,
        /// Number of seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Training epochs per run.
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        /// Images in the training set.
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        /// Latent grid side (latents = 2 * side).
        #[arg(long, default_value_t = 8)]
        latents: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return 2;
        }
    };
    let started = Instant::now();
    let result = match &cli.command {
        Command::GenData(common) => cmd_gen_data(common, started),
        Command::Train {
            common,
            epochs,
            inducing,
        } => cmd_train(common, *epochs, *inducing, started),
        Command::Eval(common) => cmd_eval(common, started),
        Command::Reinfer { common, inducing } => cmd_reinfer(common, *inducing, started),
        Command::Bench(common) => cmd_bench(common, started),
        Command::CompareBounds {
            dataset,
            omega,
            side_dependent,
            seeds,
            epochs,
            samples,
            latents,
            out,
        } => cmd_compare_bounds(
            dataset,
            *omega,
            *side_dependent,
            *seeds,
            *epochs,
            *samples,
            *latents,
            out,
            started,
        ),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).unwrap());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotPositiveDefinite { .. }
        | Error::NonFinite(_)
        | Error::NonScalarRoot { .. }
        | Error::ShapeMismatch { .. }
        | Error::InfiniteKL(_)
        | Error::NegativeCount(_)
        | Error::ZeroVariance(_) => 3,
        _ => 2,
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::InvalidConfig(format!("cannot read config {}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn version_string() -> String {
    format!("srvae-v{}", env!("CARGO_PKG_VERSION"))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config_echo: &Value,
    seed: Option<u64>,
    started: Instant,
) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let manifest = json!({
        "command": command,
        "config": config_echo,
        "seed": seed,
        "version": version_string(),
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

fn resolve_data(source: &DataSource) -> Result<data::Dataset, Error> {
    match source {
        DataSource::Path(p) => data::read(Path::new(p)),
        DataSource::Generate(spec) => data::generate(spec),
    }
}

fn cmd_gen_data(common: &Common, started: Instant) -> Result<Value, Error> {
    let mut cfg: GenDataConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        match &mut cfg.dataset {
            config::DatasetSpec::Pinwheel { seed: s, .. } => *s = seed,
            config::DatasetSpec::Bar { config } => config.seed = seed,
            config::DatasetSpec::Gpfa { seed: s, .. } => *s = seed,
        }
    }
    let dataset = data::generate(&cfg.dataset)?;
    data::write(&common.out, &dataset)?;
    let echo = serde_json::to_value(&cfg).unwrap();
    write_manifest(&common.out, "gen-data", &echo, common.seed, started)?;
    Ok(json!({
        "command": "gen-data",
        "rows": dataset.observations.shape[0],
        "columns": dataset.observations.shape[1],
        "out": common.out.display().to_string(),
    }))
}

fn write_training_artifacts(
    out: &Path,
    checkpoint: &Value,
    trace: &MetricTrace,
) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("checkpoint.json"),
        serde_json::to_string_pretty(checkpoint).unwrap(),
    )?;
    std::fs::write(out.join("trace.csv"), trace.to_csv())?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    epochs: Option<usize>,
    inducing: Option<usize>,
    started: Instant,
) -> Result<Value, Error> {
    let mut cfg: TrainCommandConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = inducing {
        cfg.train.inducing = m;
    }
    cfg.train.validate()?;
    let dataset = resolve_data(&cfg.data)?;
    let train_echo = serde_json::to_value(&cfg.train).unwrap();
    let (trace, checkpoint, kind) = match &cfg.model {
        ModelSpec::SrNlgpfa { config } | ModelSpec::SgpVae { config } => {
            let mut config = config.clone();
            if matches!(cfg.model, ModelSpec::SgpVae { .. }) {
                config.posterior = PosteriorStructure::Factored;
            }
            let kind = match config.posterior {
                PosteriorStructure::Structured => "sr_nlgpfa",
                PosteriorStructure::Factored => "sgp_vae_factored",
            };
            let mut model = GpfaModel::new(config);
            let out = model.train(
                &dataset.inputs,
                &dataset.observations,
                &cfg.train,
                Some(&common.out),
            )?;
            (out.trace, out.checkpoint, kind)
        }
        ModelSpec::GpfaVanillaVae { config } => {
            let mut model = GpfaPointVae::new(config.clone());
            let trace = model.train(&dataset.observations, &cfg.train)?;
            let checkpoint = srvae::io::checkpoint_to_json(
                "gpfa_vanilla_vae",
                &model.params,
                (cfg.train.seed, cfg.train.epochs as u128),
                json!({ "model": config, "train": cfg.train }),
            );
            (trace, checkpoint, "gpfa_vanilla_vae")
        }
        ModelSpec::TreeSrvae { config } => {
            let mut model = TreeSrvae::new(config.clone())?;
            let trace = model.train(&dataset.observations, &cfg.train)?;
            let checkpoint =
                model.to_checkpoint((cfg.train.seed, cfg.train.epochs as u128), train_echo.clone());
            let kind = match config.variant {
                TreeVariant::Tree => "tree_srvae",
                TreeVariant::Svae => "tree_svae",
                TreeVariant::Vae => "tree_vae_baseline",
            };
            (trace, checkpoint, kind)
        }
        ModelSpec::GmmSrvae { config } => {
            let mut model = GmmSrvae::new(config.clone());
            let trace = model.train(&dataset.observations, &cfg.train)?;
            let checkpoint =
                model.to_checkpoint((cfg.train.seed, cfg.train.epochs as u128));
            (trace, checkpoint, "gmm_srvae")
        }
        ModelSpec::PinwheelVae { config } => {
            let mut model = PointVae::new(config.clone());
            let trace = model.train(&dataset.observations, &cfg.train)?;
            let checkpoint = srvae::io::checkpoint_to_json(
                "pinwheel_vae",
                &model.params,
                (cfg.train.seed, cfg.train.epochs as u128),
                json!({ "model": config, "train": cfg.train }),
            );
            (trace, checkpoint, "pinwheel_vae")
        }
    };
    write_training_artifacts(&common.out, &checkpoint, &trace)?;
    let echo = serde_json::to_value(&cfg).unwrap();
    write_manifest(&common.out, "train", &echo, common.seed, started)?;
    Ok(json!({
        "command": "train",
        "model_kind": kind,
        "epochs": trace.len(),
        "final_free_energy": trace.final_free_energy(),
        "out": common.out.display().to_string(),
    }))
}

fn load_checkpoint(path: &str) -> Result<srvae::io::CheckpointData, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::InvalidConfig(format!("cannot read checkpoint {path}")))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    checkpoint_from_json(&doc)
}

fn holdout_slice(
    dataset: &data::Dataset,
    from_fraction: f64,
) -> Result<(Vec<f64>, Tensor), Error> {
    let t = dataset.inputs.len();
    let n = dataset.observations.shape[1];
    let start = ((t as f64) * from_fraction).floor() as usize;
    if start >= t {
        return Err(Error::InvalidConfig("holdout_from leaves no data".into()));
    }
    let xs = dataset.inputs[start..].to_vec();
    let ys = Tensor::new(
        vec![t - start, n],
        dataset.observations.data[start * n..].to_vec(),
    );
    Ok((xs, ys))
}

fn cmd_eval(common: &Common, started: Instant) -> Result<Value, Error> {
    let cfg: EvalCommandConfig = load_config(&common.config)?;
    let dataset = resolve_data(&cfg.data)?;
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let mut report = EvalReport {
        config_echo: serde_json::to_value(&cfg).unwrap(),
        ..Default::default()
    };
    match ckpt.model_kind.as_str() {
        "sr_nlgpfa" | "sgp_vae_factored" => {
            let model = GpfaModel::from_checkpoint(&ckpt)?;
            let (xs, ys) = holdout_slice(&dataset, cfg.holdout_from)?;
            let pred = reconstruct_sequence(&model, &xs, &ys, cfg.window, cfg.inducing)?;
            report.push("smse", smse(&pred, &ys)?);
            report.push(
                "nll",
                nll_per_datapoint(
                    model.config.likelihood,
                    &ys,
                    &pred,
                    model.noise_variance(),
                )?,
            );
        }
        "gpfa_vanilla_vae" => {
            let config: srvae::gpfa::GpfaConfig = serde_json::from_value(
                ckpt.config
                    .get("model")
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig("missing model config".into()))?,
            )
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut model = GpfaPointVae::new(config.clone());
            model.params = ckpt.params.clone();
            let (_, ys) = holdout_slice(&dataset, cfg.holdout_from)?;
            let pred = model.reconstruct(&ys)?;
            report.push("smse", smse(&pred, &ys)?);
            report.push(
                "nll",
                nll_per_datapoint(config.likelihood, &ys, &pred, model.noise_variance())?,
            );
        }
        "tree_srvae" | "tree_svae" | "tree_vae_baseline" => {
            let model = TreeSrvae::from_checkpoint(&ckpt)?;
            let grid_side = (model.config.data_dim as f64).sqrt().round() as usize;
            let decode = |z: &Tensor| model.decode_pure(z);
            report.push("cross_distance", cross_distance(&decode, grid_side)?);
        }
        "gmm_srvae" => {
            let model = GmmSrvae::from_checkpoint(&ckpt)?;
            let mut rng = srvae::rng::seeded(ckpt.rng_seed ^ 0x5eed);
            let generated = model.generate(2000, &mut rng)?;
            let labels: Vec<usize> = dataset
                .sidecar
                .get("labels")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_u64).map(|v| v as usize).collect())
                .ok_or_else(|| Error::InvalidConfig("dataset sidecar lacks arm labels".into()))?;
            let arms = dataset
                .sidecar
                .get("arms")
                .and_then(Value::as_u64)
                .unwrap_or(5) as usize;
            report.push(
                "coverage",
                nearest_arm_coverage(&generated, &dataset.observations, &labels, arms)?,
            );
            let (tape, fe, _, _) =
                model.free_energy(&dataset.observations, 8, &mut rng)?;
            report.push("free_energy", tape.scalar_value(fe));
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "cannot evaluate checkpoint kind {other}"
            )))
        }
    }
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(
        common.out.join("report.json"),
        serde_json::to_string_pretty(&report.to_json()).unwrap(),
    )?;
    std::fs::write(common.out.join("report.csv"), report.to_csv())?;
    let echo = serde_json::to_value(&cfg).unwrap();
    write_manifest(&common.out, "eval", &echo, common.seed, started)?;
    let mut summary = json!({
        "command": "eval",
        "model_kind": ckpt.model_kind,
        "out": common.out.display().to_string(),
    });
    for (name, _) in report.metrics.iter() {
        let (mean, _) = report.mean_std(name).unwrap();
        summary[name] = json!(mean);
    }
    Ok(summary)
}

fn cmd_reinfer(
    common: &Common,
    inducing: Option<usize>,
    started: Instant,
) -> Result<Value, Error> {
    let mut cfg: ReinferCommandConfig = load_config(&common.config)?;
    if let Some(m) = inducing {
        cfg.inducing = m;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let dataset = resolve_data(&cfg.data)?;
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let model = GpfaModel::from_checkpoint(&ckpt)?;
    let zs = model.grid_for(&dataset.inputs, cfg.inducing);
    let result = model.reinfer(
        &dataset.inputs,
        &dataset.observations,
        &zs,
        cfg.optimize_z,
        cfg.mc_samples,
        cfg.seed,
    )?;
    std::fs::create_dir_all(&common.out)?;
    let k = model.config.latents;
    let mut csv = String::from("t");
    for ki in 1..=k {
        csv.push_str(&format!(",f_{ki}"));
    }
    csv.push('\n');
    for (i, &t) in dataset.inputs.iter().enumerate() {
        csv.push_str(&format!("{t}"));
        for ki in 0..k {
            csv.push_str(&format!(",{:.17e}", result.latent_means.at(i, ki)));
        }
        csv.push('\n');
    }
    std::fs::write(common.out.join("latents.csv"), csv)?;
    let echo = serde_json::to_value(&cfg).unwrap();
    write_manifest(&common.out, "reinfer", &echo, common.seed, started)?;
    Ok(json!({
        "command": "reinfer",
        "inducing": cfg.inducing,
        "optimize_z": cfg.optimize_z,
        "free_energy": result.free_energy,
        "out": common.out.display().to_string(),
    }))
}

fn cmd_bench(common: &Common, started: Instant) -> Result<Value, Error> {
    let mut cfg: BenchCommandConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let table = complexity_benchmark(&cfg.latents, &cfg.inducing, cfg.seed);
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("bench.csv"), table.to_csv())?;
    let echo = serde_json::to_value(&cfg).unwrap();
    write_manifest(&common.out, "bench", &echo, common.seed, started)?;
    Ok(json!({
        "command": "bench",
        "rows": table.rows.len(),
        "out": common.out.display().to_string(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_compare_bounds(
    dataset: &str,
    omega: f64,
    side_dependent: bool,
    seeds: u64,
    epochs: usize,
    samples: usize,
    grid_side: usize,
    out: &Path,
    started: Instant,
) -> Result<Value, Error> {
    if dataset != "bar" {
        return Err(Error::InvalidConfig(format!(
            "compare-bounds supports only the bar dataset, got {dataset}"
        )));
    }
    let variants = [TreeVariant::Tree, TreeVariant::Svae, TreeVariant::Vae];
    let names = ["tree_srvae", "svae", "vae"];
    let mut finals: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for seed in 0..seeds {
        let bar = srvae::datasets::BarConfig {
            grid_side,
            omega,
            side_dependent,
            samples,
            seed: 1000 + seed,
        };
        let images = srvae::datasets::gen_bar(&bar, &mut srvae::rng::seeded(bar.seed))?.images;
        for (vi, &variant) in variants.iter().enumerate() {
            let mut model = TreeSrvae::new(TreeSrvaeConfig {
                nodes: 2 * grid_side,
                data_dim: grid_side * grid_side,
                hidden: 50,
                variant,
                edges: Vec::new(),
                temperature: 0.5,
                hard_sample: true,
                decoder_mlp: false,
                seed,
            })?;
            let cfg = TrainConfig {
                learning_rate: 5e-3,
                batch_len: 256,
                mc_samples: 1,
                epochs,
                seed,
                inducing: 1,
            };
            let trace = model.train(&images, &cfg)?;
            finals[vi].push(trace.final_free_energy().unwrap());
        }
    }
    let median = |vs: &[f64]| -> f64 {
        let mut s = vs.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[s.len() / 2]
    };
    let medians: Vec<f64> = finals.iter().map(|v| median(v)).collect();
    let verdict = if medians[0] >= medians[1] {
        "tree_srvae >= svae"
    } else {
        "ordering violated"
    };
    let doc = json!({
        "omega": omega,
        "side_dependent": side_dependent,
        "seeds": seeds,
        "per_variant_final_free_energy": {
            names[0]: finals[0],
            names[1]: finals[1],
            names[2]: finals[2],
        },
        "median_final_free_energy": {
            names[0]: medians[0],
            names[1]: medians[1],
            names[2]: medians[2],
        },
        "verdict": verdict,
    });
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("compare_bounds.json"),
        serde_json::to_string_pretty(&doc).unwrap(),
    )?;
    write_manifest(out, "compare-bounds", &doc, None, started)?;
    Ok(json!({
        "command": "compare-bounds",
        "median_tree": medians[0],
        "median_svae": medians[1],
        "median_vae": medians[2],
        "verdict": verdict,
        "out": out.display().to_string(),
    }))
}
