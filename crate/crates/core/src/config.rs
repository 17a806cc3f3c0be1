//! Flat JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::distill::{DistillConfig, DistillTarget};
use crate::error::{Error, Result};
use crate::nn::{hex, Activation, ImageEncoderSpec, TextEncoderSpec};
use crate::seed;
use crate::synth::{AugmentParams, TeacherParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream is derived from it.
    pub seed: u64,

    pub concepts: usize,
    pub image_dim: usize,
    pub positions: usize,
    pub train_pairs: usize,
    pub train_sigma: f64,
    pub eval_images: usize,
    pub eval_sigma: f64,

    pub teacher_width: usize,
    pub student_channels: usize,
    pub student_image_hidden: usize,
    pub student_image_depth: usize,
    pub student_text_embed: usize,
    pub student_text_hidden: usize,
    pub student_text_depth: usize,
    pub student_text_width: usize,

    pub beta: f64,
    pub distill_batch_size: usize,
    pub heldout_fraction: f64,
    pub aug_dropout: f64,
    pub aug_jitter: f64,
    pub image_lr: f64,
    pub image_weight_decay: f64,
    pub image_epochs: usize,
    pub text_lr: f64,
    pub text_weight_decay: f64,
    pub text_epochs: usize,

    pub tau: f64,
    pub align_lr: f64,
    pub align_batch_size: usize,
    pub align_passes: usize,

    pub eval_shards: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concepts: 10,
            image_dim: 32,
            positions: 4,
            train_pairs: 2000,
            train_sigma: 0.1,
            eval_images: 500,
            eval_sigma: 0.1,
            teacher_width: 32,
            student_channels: 16,
            student_image_hidden: 32,
            student_image_depth: 1,
            student_text_embed: 16,
            student_text_hidden: 16,
            student_text_depth: 1,
            student_text_width: 16,
            beta: 1.0,
            distill_batch_size: 32,
            heldout_fraction: 0.1,
            aug_dropout: 0.1,
            aug_jitter: 0.05,
            image_lr: 3e-3,
            image_weight_decay: 0.05,
            image_epochs: 20,
            text_lr: 3e-3,
            text_weight_decay: 0.0,
            text_epochs: 20,
            tau: 1.0,
            align_lr: 3e-4,
            align_batch_size: 10,
            align_passes: 3,
            eval_shards: 1,
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            key,
            format!("must be a positive finite number, got {v}"),
        ))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            key,
            format!("must be a non-negative finite number, got {v}"),
        ))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(key, format!("must be at least {min}, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| invalid("<root>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| invalid("<root>", "config must be a JSON object"))?;
        if let Some((key, _)) = obj.iter().find(|(_, v)| v.is_object() || v.is_array()) {
            return Err(invalid(
                key,
                "nested values are not allowed in the flat config",
            ));
        }
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            // unknown-field errors carry the key in the message, not the path
            let key = inner
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
                .map(str::to_string)
                .unwrap_or(path);
            invalid(&key, inner)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        at_least("concepts", self.concepts, 2)?;
        at_least("image_dim", self.image_dim, self.concepts).map_err(|_| {
            invalid(
                "image_dim",
                format!("must be at least concepts ({})", self.concepts),
            )
        })?;
        at_least("positions", self.positions, 1)?;
        at_least("train_pairs", self.train_pairs, 2)?;
        non_negative("train_sigma", self.train_sigma)?;
        at_least("eval_images", self.eval_images, self.concepts)?;
        non_negative("eval_sigma", self.eval_sigma)?;
        at_least("teacher_width", self.teacher_width, self.concepts)?;
        at_least("student_channels", self.student_channels, 1)?;
        at_least("student_image_hidden", self.student_image_hidden, 1)?;
        at_least("student_image_depth", self.student_image_depth, 1)?;
        at_least("student_text_embed", self.student_text_embed, 1)?;
        at_least("student_text_hidden", self.student_text_hidden, 1)?;
        at_least("student_text_width", self.student_text_width, 1)?;
        positive("beta", self.beta)?;
        at_least("distill_batch_size", self.distill_batch_size, 1)?;
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(invalid(
                "heldout_fraction",
                format!("must lie in [0, 1), got {}", self.heldout_fraction),
            ));
        }
        let held = (self.train_pairs as f64 * self.heldout_fraction).round() as usize;
        if held >= self.train_pairs {
            return Err(invalid("heldout_fraction", "leaves no training pairs"));
        }
        if !(0.0..1.0).contains(&self.aug_dropout) {
            return Err(invalid(
                "aug_dropout",
                format!("must lie in [0, 1), got {}", self.aug_dropout),
            ));
        }
        non_negative("aug_jitter", self.aug_jitter)?;
        positive("image_lr", self.image_lr)?;
        non_negative("image_weight_decay", self.image_weight_decay)?;
        at_least("image_epochs", self.image_epochs, 1)?;
        positive("text_lr", self.text_lr)?;
        non_negative("text_weight_decay", self.text_weight_decay)?;
        at_least("text_epochs", self.text_epochs, 1)?;
        positive("tau", self.tau)?;
        positive("align_lr", self.align_lr)?;
        at_least("align_batch_size", self.align_batch_size, 2)?;
        at_least("align_passes", self.align_passes, 1)?;
        at_least("eval_shards", self.eval_shards, 1)?;
        Ok(())
    }

    /// Canonical form: keys sorted, defaults filled, compact.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 hex of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn stream_seed(&self, tag: &str) -> u64 {
        seed::derive_seed(self.seed, tag, 0)
    }

    pub fn teacher_params(&self) -> TeacherParams {
        TeacherParams {
            width: self.teacher_width,
            positions: self.positions,
            ..TeacherParams::default()
        }
    }

    pub fn image_student_spec(&self) -> ImageEncoderSpec {
        ImageEncoderSpec {
            input_dim: self.image_dim,
            positions: self.positions,
            channels: self.student_channels,
            hidden: vec![self.student_image_hidden; self.student_image_depth],
            activation: Activation::Tanh,
        }
    }

    pub fn text_student_spec(&self, vocab: usize) -> TextEncoderSpec {
        TextEncoderSpec {
            vocab,
            embed_dim: self.student_text_embed,
            hidden: vec![self.student_text_hidden; self.student_text_depth],
            output_dim: self.student_text_width,
            activation: Activation::Tanh,
        }
    }

    pub fn distill_config(&self, target: DistillTarget) -> DistillConfig {
        let (lr, weight_decay, epochs) = match target {
            DistillTarget::Image => (self.image_lr, self.image_weight_decay, self.image_epochs),
            DistillTarget::Text => (self.text_lr, self.text_weight_decay, self.text_epochs),
        };
        DistillConfig {
            target,
            beta: self.beta,
            lr,
            weight_decay,
            epochs,
            batch_size: self.distill_batch_size,
            seed: self.stream_seed(target.stage_tag()),
            heldout_fraction: self.heldout_fraction,
            augment: AugmentParams {
                dropout: self.aug_dropout,
                jitter: self.aug_jitter,
            },
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            tau: self.tau,
            lr: self.align_lr,
            batch_size: self.align_batch_size,
            passes: self.align_passes,
            seed: self.stream_seed("align"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.hash(), RunConfig::from_json_str("{ }").unwrap().hash());
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |text: &str| match RunConfig::from_json_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of(r#"{"beta": -1}"#), "beta");
        assert_eq!(key_of(r#"{"tau": 0}"#), "tau");
        assert_eq!(key_of(r#"{"betta": 1.0}"#), "betta");
        assert_eq!(key_of(r#"{"image_epochs": "ten"}"#), "image_epochs");
        assert_eq!(
            key_of(r#"{"student_image_hidden": [8, 8]}"#),
            "student_image_hidden"
        );
        assert_eq!(key_of("[1]"), "<root>");
    }

    #[test]
    fn hash_ignores_key_order_and_tracks_values() {
        let a = RunConfig::from_json_str(r#"{"beta": 0.5, "tau": 2.0}"#).unwrap();
        let b = RunConfig::from_json_str(r#"{"tau": 2.0, "beta": 0.5}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), a.with_seed(7).hash());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert!(err.is_validation());
    }
}
