//! `key = value` training configuration files.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use srlvc::train::TrainConfig;

/// Everything `train` can be configured with. `None` means "use the
/// default" (or "not given" for paths).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub updated_stride: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub shuffle: Option<bool>,
    pub clip_norm: Option<f64>,
    pub zero_hidden: Option<bool>,
    pub scale_l: Option<f64>,
    pub m: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

pub const KEYS: [&str; 16] = [
    "learning_rate",
    "epochs",
    "updated_stride",
    "beta1",
    "beta2",
    "epsilon",
    "seed",
    "shuffle",
    "clip_norm",
    "zero_hidden",
    "scale_l",
    "m",
    "data_dir",
    "out",
    "loss_csv",
    "checkpoint_every",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>, String> {
    raw.parse()
        .map(Some)
        .map_err(|_| format!("invalid value `{raw}` for key `{key}`"))
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut pairs = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(format!("unknown config key `{k}` on line {}", n + 1));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("duplicate config key `{k}` on line {}", n + 1));
            }
        }
        let mut cfg = Self::default();
        for (k, v) in &pairs {
            let k = k.as_str();
            match k {
                "learning_rate" => cfg.learning_rate = value(k, v)?,
                "epochs" => cfg.epochs = value(k, v)?,
                "updated_stride" => cfg.updated_stride = value(k, v)?,
                "beta1" => cfg.beta1 = value(k, v)?,
                "beta2" => cfg.beta2 = value(k, v)?,
                "epsilon" => cfg.epsilon = value(k, v)?,
                "seed" => cfg.seed = value(k, v)?,
                "shuffle" => cfg.shuffle = value(k, v)?,
                "clip_norm" => cfg.clip_norm = value(k, v)?,
                "zero_hidden" => cfg.zero_hidden = value(k, v)?,
                "scale_l" => cfg.scale_l = value(k, v)?,
                "m" => cfg.m = value(k, v)?,
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "out" => cfg.out = Some(PathBuf::from(v)),
                "loss_csv" => cfg.loss_csv = Some(PathBuf::from(v)),
                "checkpoint_every" => cfg.checkpoint_every = value(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        Ok(cfg)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overridden_by(self, over: CliConfig) -> Self {
        macro_rules! pick {
            ($($f:ident),*) => { Self { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            learning_rate,
            epochs,
            updated_stride,
            beta1,
            beta2,
            epsilon,
            seed,
            shuffle,
            clip_norm,
            zero_hidden,
            scale_l,
            m,
            data_dir,
            out,
            loss_csv,
            checkpoint_every
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            epochs: self.epochs.unwrap_or(d.epochs),
            updated_stride: self.updated_stride.unwrap_or(d.updated_stride),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            seed: self.seed.unwrap_or(d.seed),
            shuffle: self.shuffle.unwrap_or(d.shuffle),
            clip_norm: self.clip_norm.or(d.clip_norm),
            zero_hidden: self.zero_hidden.unwrap_or(d.zero_hidden),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let cfg = CliConfig::parse(
            "# training\nepochs = 3\nlearning_rate=0.001 # faster\n\nshuffle = true\nout = w.srlw\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, Some(3));
        assert_eq!(cfg.learning_rate, Some(0.001));
        assert_eq!(cfg.shuffle, Some(true));
        assert_eq!(cfg.out, Some(PathBuf::from("w.srlw")));
        let tc = cfg.train_config();
        assert_eq!(tc.updated_stride, 5);
        assert_eq!(tc.epochs, 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let err = CliConfig::parse("epochs = 2\nbatch_size = 4\n").unwrap_err();
        assert!(err.contains("batch_size"), "{err}");
        assert!(CliConfig::parse("epochs 2").is_err());
        assert!(CliConfig::parse("epochs = two")
            .unwrap_err()
            .contains("epochs"));
        assert!(CliConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = CliConfig::parse("epochs = 3\nseed = 7").unwrap();
        let flags = CliConfig {
            epochs: Some(9),
            ..Default::default()
        };
        let merged = file.overridden_by(flags);
        assert_eq!(merged.epochs, Some(9));
        assert_eq!(merged.seed, Some(7));
    }
}
