//! Strict `key=value` run configuration. Every key maps onto exactly one
//! field of [`TrainConfig`] or [`EvalConfig`]; unknown keys are errors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::AlphaDMode;
use crate::pipeline::{EvalConfig, Metric, TrainConfig};

/// Every accepted key, in the order they are documented.
pub const KEYS: &[&str] = &[
    "seed",
    "batch_size",
    "momentum",
    "weight_decay",
    "stage1.epochs",
    "stage1.lr",
    "stage1.margin",
    "stage2.epochs",
    "stage2.lr",
    "stage2.beta",
    "stage2.gamma",
    "hash.bits",
    "hash.delta",
    "hash.omega",
    "hash.eps",
    "hash.mode",
    "model.hidden",
    "eval.holdout",
    "eval.metric",
    "eval.k",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Map,
    TopK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub holdout: f64,
    pub metric: MetricKind,
    /// Cutoff for top-k accuracy; ignored for MAP.
    pub k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            train: TrainConfig::default(),
            holdout: eval.holdout,
            metric: MetricKind::Map,
            k: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for key '{key}'"))
}

fn parse_f64(key: &str, value: &str) -> std::result::Result<f64, String> {
    match parse::<f64>(key, value)? {
        v if v.is_finite() => Ok(v),
        _ => Err(format!("invalid value '{value}' for key '{key}'")),
    }
}

impl RunConfig {
    /// Sets one key. The error message names the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "momentum" => t.momentum = parse_f64(key, v)?,
            "weight_decay" => t.weight_decay = parse_f64(key, v)?,
            "stage1.epochs" => t.stage1.epochs = parse(key, v)?,
            "stage1.lr" => t.stage1.lr = parse_f64(key, v)?,
            "stage1.margin" => t.stage1.margin = parse_f64(key, v)?,
            "stage2.epochs" => t.stage2.epochs = parse(key, v)?,
            "stage2.lr" => t.stage2.lr = parse_f64(key, v)?,
            "stage2.beta" => t.stage2.beta = parse_f64(key, v)?,
            "stage2.gamma" => t.stage2.gamma = parse_f64(key, v)?,
            "hash.bits" => t.hash.bits = parse(key, v)?,
            "hash.delta" => t.hash.delta_margin = parse_f64(key, v)?,
            "hash.omega" => t.hash.omega = parse_f64(key, v)?,
            "hash.eps" => t.hash.epsilon = parse_f64(key, v)?,
            "hash.mode" => {
                t.hash.mode = v
                    .parse::<AlphaDMode>()
                    .map_err(|_| format!("invalid value '{v}' for key '{key}'"))?
            }
            "model.hidden" => {
                t.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|w| parse::<usize>(key, w.trim()))
                        .collect::<std::result::Result<_, _>>()?
                }
            }
            "eval.holdout" => self.holdout = parse_f64(key, v)?,
            "eval.metric" => {
                self.metric = match v.to_ascii_lowercase().as_str() {
                    "map" => MetricKind::Map,
                    "topk" => MetricKind::TopK,
                    _ => return Err(format!("invalid value '{v}' for key '{key}'")),
                }
            }
            "eval.k" => {
                self.k = parse(key, v)?;
                if self.k == 0 {
                    return Err(format!("invalid value '{v}' for key '{key}'"));
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            holdout: self.holdout,
            metric: match self.metric {
                MetricKind::Map => Metric::Map,
                MetricKind::TopK => Metric::TopK(self.k),
            },
        }
    }

    /// Parses a config file body on top of the current values.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{source} line {}", i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(&location, format!("expected key=value, got '{line}'"))
            })?;
            self.set(key.trim(), value)
                .map_err(|msg| Error::format(&location, msg))?;
        }
        Ok(())
    }

    /// Renders every key, suitable for `apply_text`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let hidden: Vec<String> = t.hidden.iter().map(|h| h.to_string()).collect();
        let metric = match self.metric {
            MetricKind::Map => "map",
            MetricKind::TopK => "topk",
        };
        let values: [(&str, String); 20] = [
            ("seed", t.seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("stage1.epochs", t.stage1.epochs.to_string()),
            ("stage1.lr", t.stage1.lr.to_string()),
            ("stage1.margin", t.stage1.margin.to_string()),
            ("stage2.epochs", t.stage2.epochs.to_string()),
            ("stage2.lr", t.stage2.lr.to_string()),
            ("stage2.beta", t.stage2.beta.to_string()),
            ("stage2.gamma", t.stage2.gamma.to_string()),
            ("hash.bits", t.hash.bits.to_string()),
            ("hash.delta", t.hash.delta_margin.to_string()),
            ("hash.omega", t.hash.omega.to_string()),
            ("hash.eps", t.hash.epsilon.to_string()),
            ("hash.mode", t.hash.mode.to_string()),
            ("model.hidden", hidden.join(",")),
            ("eval.holdout", self.holdout.to_string()),
            ("eval.metric", metric.to_string()),
            ("eval.k", self.k.to_string()),
        ];
        values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# short schedule\nstage1.lr = 0.002\n\nhash.bits=24 # wider\nmodel.hidden=64,32\neval.metric=topk\neval.k=5\nhash.mode=cifar-table\n",
            "cfg",
        )
        .unwrap();
        assert_eq!(cfg.train.stage1.lr, 0.002);
        assert_eq!(cfg.train.hash.bits, 24);
        assert_eq!(cfg.train.hidden, vec![64, 32]);
        assert_eq!(cfg.train.hash.mode, AlphaDMode::CifarTable);
        assert_eq!(cfg.eval_config().metric, Metric::TopK(5));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default()
            .apply_text("seed=3\nstage1.learning_rate=0.1\n", "run.cfg")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.cfg line 2"), "{msg}");
        assert!(msg.contains("stage1.learning_rate"), "{msg}");
    }

    #[test]
    fn bad_values_and_lines_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("seed=abc", "c").is_err());
        assert!(cfg.apply_text("seed", "c").is_err());
        assert!(cfg.apply_text("eval.k=0", "c").is_err());
        assert!(cfg.apply_text("hash.mode=table", "c").is_err());
        assert!(cfg.apply_text("model.hidden=4,x", "c").is_err());
    }

    #[test]
    fn text_roundtrip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "seed=9\nmodel.hidden=\neval.metric=topk\nhash.omega=2.5",
            "c",
        )
        .unwrap();
        let text = cfg.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(keys, KEYS);
        let mut back = RunConfig::default();
        back.apply_text(&text, "c").unwrap();
        assert_eq!(back, cfg);
    }
}
