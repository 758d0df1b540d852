//! Flat key=value run configuration shared by the CLI commands.
//!
//! A config file holds `key=value` lines with `#` comments; unknown keys are
//! rejected. Command-line overrides are applied on top, and every command
//! echoes its full effective configuration so a run can be reproduced from
//! the echo alone.

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::SynthConfig;
use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::train::TrainConfig;

/// Every known key with its default value.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    // Corpus generation
    ("n_chars", "60"),
    ("n_syllables", "24"),
    ("frame_dim", "16"),
    ("frames_min", "2"),
    ("frames_max", "3"),
    ("noise_stddev", "0.3"),
    ("n_train", "2000"),
    ("n_dev", "300"),
    ("n_test", "300"),
    ("n_train_entities", "40"),
    ("n_test_entities", "30"),
    ("entity_min_len", "2"),
    ("entity_max_len", "4"),
    ("entity_fraction", "0.6"),
    ("trap_rate", "1.0"),
    ("filler_min", "4"),
    ("filler_max", "9"),
    ("zipf_exponent", "1.0"),
    ("embed_min_dist", "1.25"),
    // Model architecture
    ("d_model", "64"),
    ("n_heads", "2"),
    ("n_enc_layers", "2"),
    ("n_dec_layers", "2"),
    ("d_attn", "64"),
    ("ne_hidden", "64"),
    ("ne_lstm_layers", "1"),
    ("max_frames", "512"),
    ("max_tokens", "64"),
    ("positional", "true"),
    // Training
    ("mode", "copyne"),
    ("epochs", "15"),
    ("batch_size", "8"),
    ("lr", "0.001"),
    ("grad_clip", "5.0"),
    ("lambda", "0.7"),
    ("beta", "2.0"),
    ("no_copy_loss", "false"),
    // Decoding
    ("gamma", "0.9"),
    ("beam_width", "8"),
    ("max_actions", "64"),
    // Shared
    ("seed", "0"),
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    explicit: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig::default()
    }

    fn check_known(key: &str) -> Result<()> {
        if KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config key `{key}`")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        Self::check_known(key)?;
        self.explicit.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = RunConfig::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(path.display().to_string(), i + 1, format!("expected key=value, got `{raw}`"))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(path.display().to_string(), i + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.explicit.get(key).map(|s| s.as_str()).unwrap_or_else(|| {
            KNOWN_KEYS
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, d)| *d)
                .unwrap_or_else(|| panic!("unregistered config key `{key}`"))
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected a number, got `{}`", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!("key `{key}`: expected true/false, got `{other}`"))),
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let c = SynthConfig {
            n_chars: self.get_usize("n_chars")?,
            n_syllables: self.get_usize("n_syllables")?,
            frame_dim: self.get_usize("frame_dim")?,
            frames_min: self.get_usize("frames_min")?,
            frames_max: self.get_usize("frames_max")?,
            noise_stddev: self.get_f64("noise_stddev")?,
            n_train: self.get_usize("n_train")?,
            n_dev: self.get_usize("n_dev")?,
            n_test: self.get_usize("n_test")?,
            n_train_entities: self.get_usize("n_train_entities")?,
            n_test_entities: self.get_usize("n_test_entities")?,
            entity_min_len: self.get_usize("entity_min_len")?,
            entity_max_len: self.get_usize("entity_max_len")?,
            entity_fraction: self.get_f64("entity_fraction")?,
            trap_rate: self.get_f64("trap_rate")?,
            filler_min: self.get_usize("filler_min")?,
            filler_max: self.get_usize("filler_max")?,
            zipf_exponent: self.get_f64("zipf_exponent")?,
            embed_min_dist: self.get_f64("embed_min_dist")?,
            seed: self.get_u64("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            d_model: self.get_usize("d_model")?,
            n_heads: self.get_usize("n_heads")?,
            n_enc_layers: self.get_usize("n_enc_layers")?,
            n_dec_layers: self.get_usize("n_dec_layers")?,
            d_attn: self.get_usize("d_attn")?,
            ne_hidden: self.get_usize("ne_hidden")?,
            ne_lstm_layers: self.get_usize("ne_lstm_layers")?,
            frame_dim: self.get_usize("frame_dim")?,
            max_frames: self.get_usize("max_frames")?,
            max_tokens: self.get_usize("max_tokens")?,
            positional: self.get_bool("positional")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            model: self.model_config()?,
            mode: Mode::parse(self.get("mode"))?,
            epochs: self.get_usize("epochs")?,
            batch_size: self.get_usize("batch_size")?,
            lr: self.get_f64("lr")?,
            grad_clip: self.get_f64("grad_clip")?,
            lambda: self.get_f64("lambda")?,
            beta: self.get_f64("beta")?,
            no_copy_loss: self.get_bool("no_copy_loss")?,
            gamma: self.get_f64("gamma")?,
            seed: self.get_u64("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn beam_config(&self) -> Result<BeamConfig> {
        let c = BeamConfig {
            beam_width: self.get_usize("beam_width")?,
            gamma: self.get_f64("gamma")?,
            max_actions: self.get_usize("max_actions")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Full effective configuration, one sorted `key=value` per line; valid
    /// as a config file for an identical rerun.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (key, _) in KNOWN_KEYS {
            s.push_str(key);
            s.push('=');
            s.push_str(self.get(key));
            s.push('\n');
        }
        s
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.echo()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
