//! Dataset directory format: `data.csv` with a `t,y_1..y_N` header plus a
//! `data.json` sidecar carrying the generator config and ground truth.

use std::path::Path;

use serde_json::{json, Value};

use srvae::error::{Error, Result};
use srvae::rng;
use srvae::tensor::Tensor;

use crate::config::DatasetSpec;

pub struct Dataset {
    pub inputs: Vec<f64>,
    pub observations: Tensor,
    pub sidecar: Value,
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape[1];
    (0..t.shape[0])
        .map(|i| t.data[i * c..(i + 1) * c].to_vec())
        .collect()
}

/// Runs the generator for a spec and packages the result.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Pinwheel { config, seed } => {
            let mut rng = rng::seeded(*seed);
            let (points, labels) = srvae::datasets::gen_pinwheel(config, &mut rng)?;
            let inputs = (0..points.shape[0]).map(|i| i as f64).collect();
            let sidecar = json!({
                "spec": { "kind": "pinwheel", "config": config, "seed": seed },
                "labels": labels,
                "arms": config.arms,
            });
            Ok(Dataset {
                inputs,
                observations: points,
                sidecar,
            })
        }
        DatasetSpec::Bar { config } => {
            let mut rng = rng::seeded(config.seed);
            let data = srvae::datasets::gen_bar(config, &mut rng)?;
            let inputs = (0..data.images.shape[0]).map(|i| i as f64).collect();
            let sidecar = json!({
                "spec": { "kind": "bar", "config": config },
                "latents": tensor_rows(&data.latents),
                "grid_side": config.grid_side,
            });
            Ok(Dataset {
                inputs,
                observations: data.images,
                sidecar,
            })
        }
        DatasetSpec::Gpfa { config, seed } => {
            let mut rng = rng::seeded(*seed);
            let data = srvae::datasets::gen_gpfa(config, &mut rng)?;
            let sidecar = json!({
                "spec": { "kind": "gpfa", "config": config, "seed": seed },
                "latents": tensor_rows(&data.latents),
                "clean_means": tensor_rows(&data.clean_means),
                "likelihood": config.likelihood,
            });
            Ok(Dataset {
                inputs: data.inputs,
                observations: data.observations,
                sidecar,
            })
        }
    }
}

pub fn write(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = data.observations.shape[1];
    let mut csv = String::from("t");
    for j in 1..=n {
        csv.push_str(&format!(",y_{j}"));
    }
    csv.push('\n');
    for (i, &t) in data.inputs.iter().enumerate() {
        csv.push_str(&format!("{t}"));
        for j in 0..n {
            csv.push_str(&format!(",{:.17e}", data.observations.at(i, j)));
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("data.csv"), csv)?;
    std::fs::write(
        dir.join("data.json"),
        serde_json::to_string_pretty(&data.sidecar).unwrap(),
    )?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<Dataset> {
    let csv_path = dir.join("data.csv");
    let text = std::fs::read_to_string(&csv_path)
        .map_err(|_| Error::InvalidConfig(format!("cannot read {}", csv_path.display())))?;
    let mut inputs = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("t,") {
                return Err(Error::InvalidConfig(format!(
                    "unexpected data header: {line}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("bad data row {i}")))?;
        inputs.push(t);
        let row: std::result::Result<Vec<f64>, _> = parts.map(|s| s.parse::<f64>()).collect();
        rows.push(row.map_err(|_| Error::InvalidConfig(format!("bad data row {i}")))?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let n = rows[0].len();
    let mut observations = Tensor::zeros(&[rows.len(), n]);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidConfig(format!("ragged data row {i}")));
        }
        observations.data[i * n..(i + 1) * n].copy_from_slice(row);
    }
    let sidecar_path = dir.join("data.json");
    let sidecar = if sidecar_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
    } else {
        Value::Null
    };
    Ok(Dataset {
        inputs,
        observations,
        sidecar,
    })
}
