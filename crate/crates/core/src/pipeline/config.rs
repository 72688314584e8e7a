//! Flat `key = value` pipeline configuration.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::PipelineError;
use crate::align::BlankPolicy;
use crate::corpus::WorldParams;
use crate::nn::{AdamWConfig, EncoderConfig, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookMethod {
    RawKmeans,
    CtcKmeans,
    LatentKmeans,
    PhonemeAlign,
    GroundTruth,
    None,
}

impl CodebookMethod {
    pub const ALL: [CodebookMethod; 6] = [
        CodebookMethod::RawKmeans,
        CodebookMethod::CtcKmeans,
        CodebookMethod::LatentKmeans,
        CodebookMethod::PhonemeAlign,
        CodebookMethod::GroundTruth,
        CodebookMethod::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CodebookMethod::RawKmeans => "raw-kmeans",
            CodebookMethod::CtcKmeans => "ctc-kmeans",
            CodebookMethod::LatentKmeans => "latent-kmeans",
            CodebookMethod::PhonemeAlign => "phoneme-align",
            CodebookMethod::GroundTruth => "ground-truth",
            CodebookMethod::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for CodebookMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every knob of the pipeline. Keys in the config file are the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stochastic stage derives its seed from it.
    pub seed: u64,

    // Corpora. Paths, when set, replace generation of that corpus.
    pub phoneme_inventory_size: usize,
    pub feature_dim: usize,
    pub num_utterances: usize,
    pub labeled_fraction: f64,
    pub noise_scale: f64,
    pub eval_utterances: usize,
    pub eval_clean_noise: f64,
    pub eval_noisy_noise: f64,
    pub labeled_path: Option<PathBuf>,
    pub unlabeled_path: Option<PathBuf>,
    pub eval_clean_path: Option<PathBuf>,
    pub eval_noisy_path: Option<PathBuf>,

    // Encoder.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub downsample_factor: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub dropout: f64,

    // Optimizer, shared by all stages.
    pub weight_decay: f64,
    pub grad_clip: f64,

    // Supervised seed model.
    pub seed_steps: usize,
    pub seed_batch: usize,
    pub seed_lr: f64,
    pub seed_warmup: f64,
    /// Dropout used only while training the seed model.
    pub seed_dropout: f64,

    // Targets.
    pub codebook_method: CodebookMethod,
    pub kmeans_k: usize,
    pub kmeans_layer: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_rel_tol: f64,
    /// Fit on every n-th frame.
    pub kmeans_subsample: usize,
    pub blank_policy: BlankPolicy,

    // Masked-prediction pre-training.
    pub pretrain_iterations: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup: f64,
    pub mask_prob: f64,
    pub mask_length: usize,
    pub unmasked_weight: f64,
    /// Longest training example, in encoder frames.
    pub crop_frames: usize,
    /// Fraction of pre-training utterances held out for masked accuracy.
    pub pretrain_holdout: f64,

    // CTC fine-tuning.
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub finetune_warmup: f64,
    pub finetune_hold: f64,
    pub freeze_frontend: bool,

    // Self-training.
    pub self_training_rounds: usize,
    pub selftrain_steps: usize,
    /// Dropout applied to the student while it trains on the mixed data.
    pub selftrain_dropout: f64,
    /// Train the student from a fresh initialization instead of the
    /// pre-trained checkpoint.
    pub selftrain_fresh_student: bool,

    /// Worker threads; 0 uses all cores.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let world = WorldParams::default();
        PipelineConfig {
            seed: 0,
            phoneme_inventory_size: world.phoneme_inventory_size,
            feature_dim: world.feature_dim,
            num_utterances: 2000,
            labeled_fraction: 0.1,
            noise_scale: 0.5,
            eval_utterances: 200,
            eval_clean_noise: 0.5,
            eval_noisy_noise: 1.0,
            labeled_path: None,
            unlabeled_path: None,
            eval_clean_path: None,
            eval_noisy_path: None,

            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            downsample_factor: 2,
            num_buckets: 32,
            max_distance: 128,
            dropout: 0.0,

            weight_decay: 0.01,
            grad_clip: 5.0,

            seed_steps: 1200,
            seed_batch: 8,
            seed_lr: 3e-3,
            seed_warmup: 0.1,
            seed_dropout: 0.2,

            codebook_method: CodebookMethod::PhonemeAlign,
            kmeans_k: 32,
            kmeans_layer: 2,
            kmeans_max_iters: 50,
            kmeans_rel_tol: 1e-4,
            kmeans_subsample: 2,
            blank_policy: BlankPolicy::InheritPrevious,

            pretrain_iterations: 1,
            pretrain_steps: 800,
            pretrain_batch: 8,
            pretrain_lr: 2e-3,
            pretrain_warmup: 0.1,
            mask_prob: 0.08,
            mask_length: 10,
            unmasked_weight: 0.0,
            crop_frames: 512,
            pretrain_holdout: 0.05,

            finetune_steps: 300,
            finetune_batch: 8,
            finetune_lr: 2e-3,
            finetune_warmup: 0.1,
            finetune_hold: 0.4,
            freeze_frontend: true,

            self_training_rounds: 0,
            selftrain_steps: 2000,
            selftrain_dropout: 0.2,
            selftrain_fresh_student: false,

            workers: 0,
        }
    }
}

fn parse_value(key: &str, raw: &str, current: &Value) -> Result<Value, PipelineError> {
    let bad = || PipelineError::Config(format!("invalid value {raw:?} for key {key}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            if !x.is_finite() {
                return Err(bad());
            }
            Value::from(x)
        }
        Value::Null | Value::String(_) if raw.is_empty() || raw == "-" => Value::Null,
        _ => Value::String(raw.to_string()),
    })
}

impl PipelineConfig {
    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// Applies `key=value` overrides in order. Unknown keys are rejected.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(), PipelineError> {
        let defaults = PipelineConfig::default().to_map();
        let mut map = self.to_map();
        for (key, raw) in overrides {
            let current = defaults
                .get(key)
                .ok_or_else(|| PipelineError::UnknownKey(key.to_string()))?;
            let value = parse_value(key, raw, current)?;
            map.insert(key.to_string(), value);
        }
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Parses the config file format: one `key = value` per line, `#`
    /// comments, blank lines ignored. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = crate::io::split_kv(line)
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k, v));
        }
        let mut config = PipelineConfig::default();
        config.apply_overrides(pairs)?;
        config.validate()?;
        Ok(config)
    }

    /// The config file text for this configuration; keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let v = match v {
                Value::Null => "-".to_string(),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// `(key, value)` pairs as they appear in [`to_text`](Self::to_text).
    pub fn entries(&self) -> Vec<(String, String)> {
        self.to_text()
            .lines()
            .filter_map(|l| crate::io::split_kv(l).map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.codebook_method == CodebookMethod::None && self.pretrain_iterations > 0 {
            return bad("codebook_method = none requires pretrain_iterations = 0");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return bad("labeled_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_length == 0 {
            return bad("mask_prob must lie in [0, 1] and mask_length >= 1");
        }
        if self.seed_batch == 0 || self.pretrain_batch == 0 || self.finetune_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if self.kmeans_subsample == 0 || self.crop_frames == 0 {
            return bad("kmeans_subsample and crop_frames must be >= 1");
        }
        if self.kmeans_layer > self.num_layers {
            return bad("kmeans_layer exceeds num_layers");
        }
        if !(0.0..0.5).contains(&self.pretrain_holdout) {
            return bad("pretrain_holdout must lie in [0, 0.5)");
        }
        if self.phoneme_inventory_size < 2 || self.phoneme_inventory_size >= u16::MAX as usize {
            return bad("phoneme_inventory_size must be >= 2");
        }
        for (name, noise) in [
            ("noise_scale", self.noise_scale),
            ("eval_clean_noise", self.eval_clean_noise),
            ("eval_noisy_noise", self.eval_noisy_noise),
        ] {
            if noise < 0.0 {
                return Err(PipelineError::Config(format!("{name} must be >= 0")));
            }
        }
        for s in [self.seed_schedule(), self.pretrain_schedule(), self.finetune_schedule()] {
            s.validate().map_err(PipelineError::Config)?;
        }
        self.encoder_config(1).validate()?;
        if !(0.0..1.0).contains(&self.seed_dropout) {
            return bad("seed_dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.selftrain_dropout) {
            return bad("selftrain_dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn world(&self) -> WorldParams {
        WorldParams {
            phoneme_inventory_size: self.phoneme_inventory_size,
            feature_dim: self.feature_dim,
            ..WorldParams::default()
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.feature_dim,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            downsample_factor: self.downsample_factor,
            num_buckets: self.num_buckets,
            max_distance: self.max_distance,
            vocab_size,
            dropout: self.dropout,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: self.grad_clip,
            ..AdamWConfig::default()
        }
    }

    pub fn seed_schedule(&self) -> Schedule {
        Schedule::linear(self.seed_steps, self.seed_warmup, self.seed_lr)
    }

    pub fn pretrain_schedule(&self) -> Schedule {
        Schedule::linear(self.pretrain_steps, self.pretrain_warmup, self.pretrain_lr)
    }

    pub fn finetune_schedule(&self) -> Schedule {
        Schedule::tri_stage(self.finetune_steps, self.finetune_warmup, self.finetune_hold, self.finetune_lr)
    }

    pub fn selftrain_schedule(&self) -> Schedule {
        Schedule::tri_stage(self.selftrain_steps, self.finetune_warmup, self.finetune_hold, self.finetune_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.apply_overrides([("seed", "9"), ("codebook_method", "ctc-kmeans"), ("labeled_path", "/x/y")])
            .unwrap();
        let text = c.to_text();
        assert!(text.contains("codebook_method = ctc-kmeans\n"));
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_and_bad_keys() {
        let mut c = PipelineConfig::default();
        assert!(matches!(
            c.apply_overrides([("no_such_key", "1")]),
            Err(PipelineError::UnknownKey(k)) if k == "no_such_key"
        ));
        assert!(c.apply_overrides([("seed_steps", "-3")]).is_err());
        assert!(c.apply_overrides([("codebook_method", "magic")]).is_err());
        assert!(PipelineConfig::parse("codebook_method = none\npretrain_iterations = 1\n").is_err());
        assert!(PipelineConfig::parse("# comment\n\nseed = 4 # trailing\n").is_ok());
    }
}
