use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::EncoderConfig;
use crate::error::{config_err, Result};
use crate::metrics::{EvalOptions, DEFAULT_PROPENSITY_A, DEFAULT_PROPENSITY_B};
use crate::model::{AblationMode, LossReduction};
use crate::reinforce::ReinforceMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Everything that determines a training run. Serialized as the JSON config
/// file the CLI reads; every key may be overridden with `--set key=value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub mode: AblationMode,
    pub reinforce_mode: ReinforceMode,
    pub epochs: usize,
    pub train_batch: usize,
    pub test_batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    pub dropout_rate: f64,
    /// Defaults to the encoder width.
    pub d_feat: Option<usize>,
    /// Defaults to the encoder width.
    pub d_hidden: Option<usize>,
    pub softmax_in_classifier: bool,
    /// Start the label-output biases at the training label log-odds.
    pub prior_bias_init: bool,
    pub loss_reduction: LossReduction,
    /// `None` enables sampling automatically above 5000 labels.
    pub negative_sampling: Option<bool>,
    #[serde(rename = "C_target")]
    pub c_target: Option<usize>,
    pub k_clusters: Option<usize>,
    /// Share of training samples held out for best-checkpoint selection.
    pub heldout_fraction: f64,
    pub propensity_a: f64,
    pub propensity_b: f64,
    pub psp_normalized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mode: AblationMode::Full,
            reinforce_mode: ReinforceMode::None,
            epochs: 40,
            train_batch: 8,
            test_batch: 16,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            seed: 0,
            dropout_rate: 0.5,
            d_feat: None,
            d_hidden: None,
            softmax_in_classifier: true,
            prior_bias_init: true,
            loss_reduction: LossReduction::Sum,
            negative_sampling: None,
            c_target: None,
            k_clusters: None,
            heldout_fraction: 0.1,
            propensity_a: DEFAULT_PROPENSITY_A,
            propensity_b: DEFAULT_PROPENSITY_B,
            psp_normalized: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_batch == 0 || self.test_batch == 0 {
            return Err(config_err("batch sizes must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err("dropout_rate must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(config_err("heldout_fraction must lie in [0, 1)"));
        }
        if self.encoder.max_input_len < 2 {
            return Err(config_err("max_input_len must be >= 2"));
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            propensity_a: self.propensity_a,
            propensity_b: self.propensity_b,
            psp_normalized: self.psp_normalized,
        }
    }

    /// Applies one `key=value` override. `key` may be dotted
    /// (`encoder.num_layers`); an undotted key that is not a top-level field
    /// is looked up inside `encoder`. `value` is parsed as JSON, falling back
    /// to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut path: Vec<&str> = key.split('.').collect();
        if path.len() == 1 && doc.get(key).is_none() && doc["encoder"].get(key).is_some() {
            path.insert(0, "encoder");
        }
        let mut slot = &mut doc;
        for part in &path {
            slot = slot
                .get_mut(*part)
                .ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| config_err(format!("bad value for {key:?}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.train_batch, 8);
        assert_eq!(c.test_batch, 16);
        assert_eq!(c.encoder.max_input_len, 512);
        assert_eq!(c.epochs, 40);
        assert_eq!(c.dropout_rate, 0.5);
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut c = TrainConfig::default();
        c.lr = 0.1 + 0.2;
        c.c_target = Some(16);
        c.mode = AblationMode::GudL;
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_json().contains("\"C_target\": 16"));
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::default();
        c.set("mode=GUD_F").unwrap();
        c.set("reinforce_mode=disordered").unwrap();
        c.set("max_input_len=64").unwrap();
        c.set("encoder.num_layers=2").unwrap();
        c.set("softmax_in_classifier=false").unwrap();
        c.set("C_target=8").unwrap();
        assert_eq!(c.mode, AblationMode::GudF);
        assert_eq!(c.reinforce_mode, ReinforceMode::Disordered);
        assert_eq!(c.encoder.max_input_len, 64);
        assert_eq!(c.encoder.num_layers, 2);
        assert!(!c.softmax_in_classifier);
        assert_eq!(c.c_target, Some(8));
        assert!(c.set("no_such_key=1").is_err());
        assert!(c.set("epochs=many").is_err());
        assert!(c.set("mode").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_json(r#"{"epochz": 3}"#).is_err());
        let c = TrainConfig::from_json(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.train_batch, 8);
    }
}
