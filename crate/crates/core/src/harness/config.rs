//! `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::arch::{ClassWeighting, LossConfig};
use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    SegCaps2d,
    UCaps3d,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::SegCaps2d => "segcaps2d",
            Arch::UCaps3d => "ucaps3d",
        })
    }
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Arch, String> {
        match s {
            "segcaps2d" => Ok(Arch::SegCaps2d),
            "ucaps3d" => Ok(Arch::UCaps3d),
            _ => Err("expected segcaps2d or ucaps3d".into()),
        }
    }
}

/// Network sizes: desk-scale or the published widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Toy,
    Paper,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Toy => "toy",
            Scale::Paper => "paper",
        })
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Scale, String> {
        match s {
            "toy" => Ok(Scale::Toy),
            "paper" => Ok(Scale::Paper),
            _ => Err("expected toy or paper".into()),
        }
    }
}

/// Which views the pretext task draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformSet {
    All,
    IdentityOnly,
}

impl fmt::Display for TransformSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformSet::All => "all",
            TransformSet::IdentityOnly => "identity",
        })
    }
}

impl FromStr for TransformSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<TransformSet, String> {
        match s {
            "all" => Ok(TransformSet::All),
            "identity" => Ok(TransformSet::IdentityOnly),
            _ => Err("expected all or identity".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub scale: Scale,
    pub dataset: Option<PathBuf>,
    pub classes: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub patience: u64,
    pub early_stop: u64,
    pub eval_interval: u64,
    /// Stop as soon as validation mean Dice reaches this value.
    pub target_dice: Option<f64>,
    pub val_fraction: f64,
    pub routing_iters: usize,
    pub gamma: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    pub margin_lambda: f64,
    pub class_weighting: ClassWeighting,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub deterministic: bool,
    /// Extractor checkpoint to initialise fine-tuning from.
    pub init_from: Option<PathBuf>,
    pub transforms: TransformSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::SegCaps2d,
            scale: Scale::Toy,
            dataset: None,
            classes: 2,
            seed: 0,
            batch_size: 1,
            max_iterations: 5000,
            learning_rate: 1e-4,
            lr_decay: 0.05,
            patience: 500,
            early_stop: 5000,
            eval_interval: 100,
            target_dice: None,
            val_fraction: 0.2,
            routing_iters: 3,
            gamma: 0.001,
            margin_pos: 0.9,
            margin_neg: 0.1,
            margin_lambda: 0.5,
            class_weighting: ClassWeighting::InverseFrequency,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            deterministic: true,
            init_from: None,
            transforms: TransformSet::All,
        }
    }
}

/// Every accepted key, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "arch",
    "scale",
    "dataset",
    "classes",
    "seed",
    "batch_size",
    "max_iterations",
    "learning_rate",
    "lr_decay",
    "patience",
    "early_stop",
    "eval_interval",
    "target_dice",
    "val_fraction",
    "routing_iters",
    "gamma",
    "margin_pos",
    "margin_neg",
    "margin_lambda",
    "class_weighting",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "deterministic",
    "init_from",
    "transforms",
];

fn parse<T: FromStr>(key: &str, value: &str, line: Option<usize>) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| {
        let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
        Error::Config(format!("{key}{at}: cannot parse {value:?}: {e}"))
    })
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
            };
            self.set(key.trim(), value.trim(), Some(i + 1))?;
        }
        self.validate()
    }

    /// Sets one key; `line` is reported in errors when the value came from a file.
    pub fn set(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        match key {
            "arch" => self.arch = parse(key, value, line)?,
            "scale" => self.scale = parse(key, value, line)?,
            "dataset" => self.dataset = optional_path(value),
            "classes" => self.classes = parse(key, value, line)?,
            "seed" => self.seed = parse(key, value, line)?,
            "batch_size" => self.batch_size = parse(key, value, line)?,
            "max_iterations" => self.max_iterations = parse(key, value, line)?,
            "learning_rate" => self.learning_rate = parse(key, value, line)?,
            "lr_decay" => self.lr_decay = parse(key, value, line)?,
            "patience" => self.patience = parse(key, value, line)?,
            "early_stop" => self.early_stop = parse(key, value, line)?,
            "eval_interval" => self.eval_interval = parse(key, value, line)?,
            "target_dice" => {
                self.target_dice = if value == "none" { None } else { Some(parse(key, value, line)?) }
            }
            "val_fraction" => self.val_fraction = parse(key, value, line)?,
            "routing_iters" => self.routing_iters = parse(key, value, line)?,
            "gamma" => self.gamma = parse(key, value, line)?,
            "margin_pos" => self.margin_pos = parse(key, value, line)?,
            "margin_neg" => self.margin_neg = parse(key, value, line)?,
            "margin_lambda" => self.margin_lambda = parse(key, value, line)?,
            "class_weighting" => {
                self.class_weighting = match value {
                    "uniform" => ClassWeighting::Uniform,
                    "inverse_frequency" => ClassWeighting::InverseFrequency,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected uniform or inverse_frequency, got {value:?}"
                        )))
                    }
                }
            }
            "adam_beta1" => self.adam_beta1 = parse(key, value, line)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value, line)?,
            "adam_eps" => self.adam_eps = parse(key, value, line)?,
            "deterministic" => self.deterministic = parse(key, value, line)?,
            "init_from" => self.init_from = optional_path(value),
            "transforms" => self.transforms = parse(key, value, line)?,
            _ => {
                let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
                return Err(Error::Config(format!("unknown key {key:?}{at}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("gamma_nonnegative", self.gamma + 1.0),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.routing_iters == 0 || self.classes < 2 {
            return Err(Error::Config(
                "batch_size, eval_interval and routing_iters must be positive; classes at least 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} must lie in [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
        match key {
            "arch" => self.arch.to_string(),
            "scale" => self.scale.to_string(),
            "dataset" => path(&self.dataset),
            "classes" => self.classes.to_string(),
            "seed" => self.seed.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_iterations" => self.max_iterations.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "lr_decay" => format!("{:?}", self.lr_decay),
            "patience" => self.patience.to_string(),
            "early_stop" => self.early_stop.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "target_dice" => self.target_dice.map(|v| format!("{v:?}")).unwrap_or_else(|| "none".into()),
            "val_fraction" => format!("{:?}", self.val_fraction),
            "routing_iters" => self.routing_iters.to_string(),
            "gamma" => format!("{:?}", self.gamma),
            "margin_pos" => format!("{:?}", self.margin_pos),
            "margin_neg" => format!("{:?}", self.margin_neg),
            "margin_lambda" => format!("{:?}", self.margin_lambda),
            "class_weighting" => match self.class_weighting {
                ClassWeighting::Uniform => "uniform".into(),
                ClassWeighting::InverseFrequency => "inverse_frequency".into(),
            },
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "deterministic" => self.deterministic.to_string(),
            "init_from" => path(&self.init_from),
            "transforms" => self.transforms.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Fully resolved configuration in file syntax.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    /// Hash of the settings that determine the network's shape, so a
    /// checkpoint only loads into a matching model.
    pub fn model_hash(&self, in_channels: usize, input_size: usize) -> [u8; 8] {
        let text = format!(
            "arch={}\nscale={}\nclasses={}\nrouting_iters={}\nin_channels={in_channels}\ninput_size={input_size}\n",
            self.arch, self.scale, self.classes, self.routing_iters
        );
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].try_into().unwrap()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: MarginConfig {
                m_pos: self.margin_pos,
                m_neg: self.margin_neg,
                lambda: self.margin_lambda,
            },
            gamma: self.gamma,
            weighting: self.class_weighting,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let mut c = TrainConfig::default();
        c.apply_text("# nothing here\n\n").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.lr_decay, 0.05);
    }

    #[test]
    fn flags_override_file_values() {
        let mut c = TrainConfig::default();
        c.apply_text("learning_rate = 0.01\nseed = 4\n").unwrap();
        c.set("learning_rate", "0.002", None).unwrap();
        assert_eq!((c.learning_rate, c.seed), (0.002, 4));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::default().apply_text("foo = 1").unwrap_err().to_string();
        assert!(err.contains("\"foo\""), "{err}");
    }

    #[test]
    fn type_error_names_key_and_line() {
        let err = TrainConfig::default()
            .apply_text("seed = 1\nbatch_size = many\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch_size") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn render_round_trips() {
        let mut c = TrainConfig::default();
        c.apply_text("arch = ucaps3d\ntarget_dice = 0.8\ndataset = data/x\n").unwrap();
        let mut d = TrainConfig::default();
        d.apply_text(&c.render()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn decay_outside_unit_interval_rejected() {
        assert!(TrainConfig::default().apply_text("lr_decay = 1.5").is_err());
        assert!(TrainConfig::default().apply_text("lr_decay = 0").is_err());
    }
}
