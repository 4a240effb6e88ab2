//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! profile = desk          # desk | paper; applied before the other keys
//! epochs = 30
//! learning_rate = 1e-4
//! mode = debiased
//! hidden_dim = 64
//! conv_channels = 8,16
//! ```

use std::fmt::Write as _;
use std::path::Path;

use vqa_debias_core::model::ModelConfig;
use vqa_debias_core::trainer::{TrainConfig, TrainMode};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            model: ModelConfig::default(),
        }
    }
}

pub const KEYS: [&str; 19] = [
    "profile",
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "lambda",
    "beta",
    "alpha",
    "kl_stop_grad_s1",
    "seed",
    "mode",
    "image_size",
    "embed_dim",
    "hidden_dim",
    "conv_channels",
    "crop_fraction_range",
    "vocab_size",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn pair<T: std::str::FromStr + Copy>(v: &str) -> std::result::Result<[T; 2], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([num(a)?, num(b)?]),
        _ => Err(format!("`{v}`: expected two comma-separated values")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| (i + 1, format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err((i + 1, format!("unknown key `{k}`")));
            }
            if entries.iter().any(|(_, key, _)| *key == k) {
                return Err((i + 1, format!("duplicate key `{k}`")));
            }
            entries.push((i + 1, k, v));
        }
        let mut cfg = RunConfig::default();
        if let Some((line, _, v)) = entries.iter().find(|(_, k, _)| *k == "profile") {
            cfg.train = TrainConfig::profile(v).ok_or((*line, format!("unknown profile `{v}`")))?;
        }
        for (line, k, v) in entries {
            cfg.set(k, v).map_err(|m| (line, m))?;
        }
        cfg.train.validate().map_err(|e| (0, e.to_string()))?;
        cfg.model.validate().map_err(|e| (0, e.to_string()))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (t, m) = (&mut self.train, &mut self.model);
        match key {
            "profile" => {}
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "learning_rate" => t.learning_rate = num(v)?,
            "adam_beta1" => t.adam_beta1 = num(v)?,
            "adam_beta2" => t.adam_beta2 = num(v)?,
            "adam_eps" => t.adam_eps = num(v)?,
            "lambda" => t.lambda = num(v)?,
            "beta" => t.beta = num(v)?,
            "alpha" => t.alpha = num(v)?,
            "kl_stop_grad_s1" => t.kl_stop_grad_s1 = num(v)?,
            "seed" => t.seed = num(v)?,
            "mode" => t.mode = TrainMode::from_name(v).ok_or_else(|| format!("unknown mode `{v}`"))?,
            "image_size" => m.image_size = num(v)?,
            "embed_dim" => m.embed_dim = num(v)?,
            "hidden_dim" => m.hidden_dim = num(v)?,
            "conv_channels" => m.conv_channels = pair(v)?,
            "crop_fraction_range" => m.crop_fraction_range = pair(v)?,
            "vocab_size" => m.vocab_size = num(v)?,
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    /// Renders every key; `parse(render())` gives back `self`.
    pub fn render(&self) -> String {
        let (t, m) = (&self.train, &self.model);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", format!("{:e}", t.learning_rate));
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", format!("{:e}", t.adam_eps));
        kv("lambda", t.lambda.to_string());
        kv("beta", t.beta.to_string());
        kv("alpha", t.alpha.to_string());
        kv("kl_stop_grad_s1", t.kl_stop_grad_s1.to_string());
        kv("seed", t.seed.to_string());
        kv("mode", t.mode.name().to_string());
        kv("image_size", m.image_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("hidden_dim", m.hidden_dim.to_string());
        kv(
            "conv_channels",
            format!("{},{}", m.conv_channels[0], m.conv_channels[1]),
        );
        kv(
            "crop_fraction_range",
            format!("{},{}", m.crop_fraction_range[0], m.crop_fraction_range[1]),
        );
        kv("vocab_size", m.vocab_size.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_then_overrides() {
        let c = RunConfig::parse("learning_rate = 3e-4\nprofile = paper # base\n\nseed=9\n").unwrap();
        assert_eq!(c.train.epochs, 150);
        assert_eq!(c.train.batch_size, 280);
        assert_eq!(c.train.learning_rate, 3e-4);
        assert_eq!(c.train.seed, 9);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(RunConfig::parse("epochs 3").unwrap_err().0, 1);
        assert_eq!(RunConfig::parse("\nfoo = 1").unwrap_err().0, 2);
        assert!(RunConfig::parse("epochs = 1\nepochs = 2").is_err());
        assert!(RunConfig::parse("mode = sideways").is_err());
        assert!(RunConfig::parse("learning_rate = -1").is_err());
        assert!(RunConfig::parse("conv_channels = 8").is_err());
        assert!(RunConfig::parse("image_size = 30").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.train.learning_rate = 3e-4;
        c.train.mode = TrainMode::Baseline;
        c.train.kl_stop_grad_s1 = true;
        c.model.conv_channels = [4, 6];
        c.model.crop_fraction_range = [0.25, 0.75];
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }
}
