//! JSON checkpoints for the frame regressor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::frame::{FeatureConfig, FrameSpec};
use super::mlp::{Dense, Mlp};
use super::regressor::FrameRegressor;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub invariant: Vec<usize>,
    pub equivariant: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub frame_spec: FrameSpec,
    /// Layer tensors named `{head}.{layer}.weight` / `{head}.{layer}.bias`.
    pub weights: BTreeMap<String, Vec<f64>>,
    pub horizon: usize,
    pub feature_config: FeatureConfig,
    pub architecture: Architecture,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn export_head(name: &str, head: &Mlp, out: &mut BTreeMap<String, Vec<f64>>) {
    for (i, layer) in head.layers().iter().enumerate() {
        out.insert(format!("{name}.{i}.weight"), layer.weight.clone());
        out.insert(format!("{name}.{i}.bias"), layer.bias.clone());
    }
}

fn import_head(name: &str, sizes: &[usize], weights: &BTreeMap<String, Vec<f64>>) -> Result<Mlp> {
    let mut layers = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        let fetch = |suffix: &str| {
            weights
                .get(&format!("{name}.{i}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::BadParameter(format!("checkpoint lacks {name}.{i}.{suffix}")))
        };
        layers.push(Dense {
            inputs: w[0],
            outputs: w[1],
            weight: fetch("weight")?,
            bias: fetch("bias")?,
        });
    }
    Mlp::from_layers(layers)
}

impl Checkpoint {
    pub fn from_model(model: &FrameRegressor, schedule: &NoiseSchedule, meta: serde_json::Value) -> Self {
        let mut weights = BTreeMap::new();
        export_head("invariant", model.invariant_head(), &mut weights);
        export_head("equivariant", model.equivariant_head(), &mut weights);
        Self {
            schedule: schedule.clone(),
            frame_spec: model.frame_spec().clone(),
            weights,
            horizon: crate::denoiser::Denoiser::horizon(model),
            feature_config: model.feature_config().clone(),
            architecture: Architecture {
                invariant: model.invariant_head().sizes(),
                equivariant: model.equivariant_head().sizes(),
            },
            meta,
        }
    }

    pub fn model(&self) -> Result<FrameRegressor> {
        FrameRegressor::from_parts(
            self.horizon,
            self.feature_config.clone(),
            self.frame_spec.clone(),
            import_head("invariant", &self.architecture.invariant, &self.weights)?,
            import_head("equivariant", &self.architecture.equivariant, &self.weights)?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::schedule::ScheduleKind;

    #[test]
    fn reload_is_bit_exact() {
        let model = FrameRegressor::new(&ModelConfig {
            horizon: 3,
            hidden: vec![8, 5],
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap();
        let schedule = NoiseSchedule::build(12, ScheduleKind::Cosine, 0.8).unwrap();
        let ckpt = Checkpoint::from_model(&model, &schedule, serde_json::json!({"seed": 9}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model().unwrap(), model);
        assert_eq!(back.schedule, schedule);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let model = FrameRegressor::new(&ModelConfig::default()).unwrap();
        let schedule = NoiseSchedule::build(5, ScheduleKind::Linear, 1.0).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, &schedule, serde_json::Value::Null);
        ckpt.weights.remove("equivariant.1.bias");
        assert!(ckpt.model().is_err());
    }
}
