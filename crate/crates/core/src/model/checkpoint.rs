use std::collections::BTreeMap;
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use super::{EqMotion, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};
use crate::train::{AdamState, TrainState};

pub const FORMAT_VERSION: u32 = 1;

/// A model's config and parameters, plus optimizer state when saved
/// mid-training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub training: Option<TrainState>,
    /// Free-form provenance, e.g. the effective run configuration.
    pub run_config: Option<serde_json::Value>,
}

struct ParamsOut<'a>(&'a ParameterSet);

impl Serialize for ParamsOut<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (name, t) in self.0.iter() {
            map.serialize_entry(name, &TensorOut { shape: t.shape(), data: t.data() })?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct TensorOut<'a> {
    shape: &'a [usize],
    data: &'a [f64],
}

#[derive(Serialize)]
struct OptimizerOut<'a> {
    epochs_completed: usize,
    step: u64,
    m: ParamsOut<'a>,
    v: ParamsOut<'a>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    config: &'a ModelConfig,
    params: ParamsOut<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerOut<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_config: Option<&'a serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorIn {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerIn {
    epochs_completed: usize,
    step: u64,
    m: BTreeMap<String, TensorIn>,
    v: BTreeMap<String, TensorIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format_version: u32,
    config: ModelConfig,
    params: BTreeMap<String, TensorIn>,
    #[serde(default)]
    optimizer: Option<OptimizerIn>,
    #[serde(default)]
    run_config: Option<serde_json::Value>,
}

/// Arrange `entries` in the order and shapes of `layout`.
fn collect(layout: &ParameterSet, mut entries: BTreeMap<String, TensorIn>, what: &str) -> Result<ParameterSet> {
    let mut out = ParameterSet::new();
    for (name, expected) in layout.iter() {
        let entry = entries
            .remove(name)
            .ok_or_else(|| Error::Contract(format!("{what}: parameter {name} missing")))?;
        if entry.shape != expected.shape() {
            return Err(Error::dim(format!(
                "{what}: parameter {name} has shape {:?}, expected {:?}",
                entry.shape,
                expected.shape()
            )));
        }
        out.push(name, Tensor::new(entry.shape, entry.data)?);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Contract(format!("{what}: unexpected parameter {extra}")));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_model(model: &EqMotion, training: Option<TrainState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            training,
            run_config: None,
        }
    }

    pub fn into_model(self) -> Result<EqMotion> {
        EqMotion::from_params(self.config, self.params)
    }

    /// Single-line JSON, floats to 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        if let Some(bad) = self.params.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numerical(format!("parameter {} is not finite", bad.0)));
        }
        let out = CheckpointOut {
            format_version: FORMAT_VERSION,
            config: &self.config,
            params: ParamsOut(&self.params),
            optimizer: self.training.as_ref().map(|t| OptimizerOut {
                epochs_completed: t.epochs_completed,
                step: t.adam.step,
                m: ParamsOut(&t.adam.m),
                v: ParamsOut(&t.adam.v),
            }),
            run_config: self.run_config.as_ref(),
        };
        crate::json::to_line(&out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CheckpointIn = serde_json::from_str(text)?;
        if raw.format_version != FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint format_version {}",
                raw.format_version
            )));
        }
        raw.config.validate()?;
        let layout = EqMotion::new(raw.config.clone(), 0)?;
        let params = collect(layout.params(), raw.params, "params")?;
        let training = match raw.optimizer {
            Some(o) => Some(TrainState {
                epochs_completed: o.epochs_completed,
                adam: AdamState {
                    step: o.step,
                    m: collect(layout.params(), o.m, "optimizer.m")?,
                    v: collect(layout.params(), o.v, "optimizer.v")?,
                },
            }),
            None => None,
        };
        Ok(Checkpoint {
            config: raw.config,
            params,
            training,
            run_config: raw.run_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
