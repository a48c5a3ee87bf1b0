//! Serialized artifacts: training configuration, per-epoch metric traces
//! (CSV), and model checkpoints (a single JSON document holding parameter
//! arrays as nested number lists plus optimizer and rng state).

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tape::{ParamSet, Parameter};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Training configuration shared by all model families. `batch_len` is the
/// contiguous window length for time-series models and the minibatch size
/// otherwise; `inducing` only applies to the sparse-GP models.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_len: usize,
    pub mc_samples: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_inducing")]
    pub inducing: usize,
}

fn default_inducing() -> usize {
    16
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 1 {
            return Err(Error::InvalidConfig("mc_samples must be >= 1".into()));
        }
        if self.batch_len < 1 {
            return Err(Error::InvalidConfig("batch_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch metric rows; the KL term is a KL divergence and must stay
/// non-negative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTrace {
    pub epoch: Vec<usize>,
    pub free_energy: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl MetricTrace {
    pub fn push(&mut self, epoch: usize, free_energy: f64, recon: f64, kl: f64, seconds: f64) {
        debug_assert!(kl >= -1e-9, "KL term must be non-negative, got {kl}");
        self.epoch.push(epoch);
        self.free_energy.push(free_energy);
        self.recon.push(recon);
        self.kl.push(kl);
        self.seconds.push(seconds);
    }

    pub fn len(&self) -> usize {
        self.epoch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epoch.is_empty()
    }

    pub fn final_free_energy(&self) -> Option<f64> {
        self.free_energy.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,free_energy,recon,kl,seconds\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.6}\n",
                self.epoch[i], self.free_energy[i], self.recon[i], self.kl[i], self.seconds[i]
            ));
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut trace = MetricTrace::default();
        for (ln, line) in s.lines().enumerate() {
            if ln == 0 {
                if line.trim() != "epoch,free_energy,recon,kl,seconds" {
                    return Err(Error::InvalidConfig(format!(
                        "unexpected trace header: {line}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::InvalidConfig(format!("bad trace row: {line}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad number {s}")))
            };
            trace.epoch.push(
                parts[0]
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad epoch {}", parts[0])))?,
            );
            trace.free_energy.push(parse(parts[1])?);
            trace.recon.push(parse(parts[2])?);
            trace.kl.push(parse(parts[3])?);
            trace.seconds.push(parse(parts[4])?);
        }
        Ok(trace)
    }
}

fn tensor_to_nested(t: &Tensor) -> Value {
    match t.shape.len() {
        1 => json!(t.data),
        2 => {
            let c = t.shape[1];
            let rows: Vec<Vec<f64>> = (0..t.shape[0])
                .map(|i| t.data[i * c..(i + 1) * c].to_vec())
                .collect();
            json!(rows)
        }
        _ => json!({ "shape": t.shape, "data": t.data }),
    }
}

fn tensor_from_nested(v: &Value, shape: &[usize]) -> Result<Tensor> {
    fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<()> {
        match v {
            Value::Array(items) => {
                for item in items {
                    flatten(item, out)?;
                }
                Ok(())
            }
            Value::Number(n) => {
                out.push(n.as_f64().ok_or_else(|| {
                    Error::InvalidConfig("non-finite number in checkpoint".into())
                })?);
                Ok(())
            }
            _ => Err(Error::InvalidConfig("malformed parameter array".into())),
        }
    }
    let mut data = Vec::new();
    if let Some(obj) = v.as_object() {
        flatten(
            obj.get("data")
                .ok_or_else(|| Error::InvalidConfig("missing data".into()))?,
            &mut data,
        )?;
    } else {
        flatten(v, &mut data)?;
    }
    if data.len() != shape.iter().product::<usize>() {
        return Err(Error::InvalidConfig(format!(
            "parameter data length {} does not match shape {shape:?}",
            data.len()
        )));
    }
    Ok(Tensor::new(shape.to_vec(), data))
}

/// Serializes a parameter set (values plus optimizer state) with the model
/// kind, a config echo, and the rng state needed to resume deterministic
/// training.
pub fn checkpoint_to_json(
    model_kind: &str,
    params: &ParamSet,
    rng_state: (u64, u128),
    config_echo: Value,
) -> Value {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut values = Vec::new();
    let mut moments_m = Vec::new();
    let mut moments_v = Vec::new();
    let mut steps = Vec::new();
    for p in params.iter() {
        names.push(p.name.clone());
        shapes.push(p.value.shape.clone());
        values.push(tensor_to_nested(&p.value));
        moments_m.push(tensor_to_nested(&p.m));
        moments_v.push(tensor_to_nested(&p.v));
        steps.push(p.step);
    }
    json!({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": model_kind,
        "shapes": shapes,
        "parameter_names": names,
        "parameters": values,
        "optimizer_state": { "m": moments_m, "v": moments_v, "step": steps },
        "rng_state": { "seed": rng_state.0, "word_pos": rng_state.1.to_string() },
        "config": config_echo,
    })
}

/// Parsed checkpoint ready to be loaded into a model.
pub struct CheckpointData {
    pub model_kind: String,
    pub params: ParamSet,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub config: Value,
}

pub fn checkpoint_from_json(doc: &Value) -> Result<CheckpointData> {
    let version = doc
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::InvalidConfig("missing format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let model_kind = doc
        .get("model_kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidConfig("missing model_kind".into()))?
        .to_string();
    let shapes: Vec<Vec<usize>> = serde_json::from_value(
        doc.get("shapes")
            .cloned()
            .ok_or_else(|| Error::InvalidConfig("missing shapes".into()))?,
    )
    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let names: Vec<String> = serde_json::from_value(
        doc.get("parameter_names")
            .cloned()
            .ok_or_else(|| Error::InvalidConfig("missing parameter_names".into()))?,
    )
    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let values = doc
        .get("parameters")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidConfig("missing parameters".into()))?;
    let opt = doc
        .get("optimizer_state")
        .ok_or_else(|| Error::InvalidConfig("missing optimizer_state".into()))?;
    let ms = opt.get("m").and_then(Value::as_array);
    let vs = opt.get("v").and_then(Value::as_array);
    let steps: Vec<u64> = serde_json::from_value(
        opt.get("step")
            .cloned()
            .ok_or_else(|| Error::InvalidConfig("missing optimizer step".into()))?,
    )
    .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut params = ParamSet::new();
    for (i, shape) in shapes.iter().enumerate() {
        let value = tensor_from_nested(&values[i], shape)?;
        let id = params.add(&names[i], value);
        if let (Some(ms), Some(vs)) = (ms, vs) {
            let p: &mut Parameter = params.iter_mut().nth(id.0).unwrap();
            p.m = tensor_from_nested(&ms[i], shape)?;
            p.v = tensor_from_nested(&vs[i], shape)?;
            p.step = steps[i];
        }
    }
    let rng = doc
        .get("rng_state")
        .ok_or_else(|| Error::InvalidConfig("missing rng_state".into()))?;
    let rng_seed = rng
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::InvalidConfig("missing rng seed".into()))?;
    let rng_word_pos: u128 = rng
        .get("word_pos")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidConfig("missing rng word_pos".into()))?
        .parse()
        .map_err(|_| Error::InvalidConfig("bad rng word_pos".into()))?;
    Ok(CheckpointData {
        model_kind,
        params,
        rng_seed,
        rng_word_pos,
        config: doc.get("config").cloned().unwrap_or(Value::Null),
    })
}
