//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::losses::{LossKind, DEFAULT_ENET_C, DEFAULT_GAMMA};
use crate::models::{ModelConfig, Variant};

use super::schedule::DEFAULT_PATIENCE;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// `n` generated scenes.
    Synthetic { n: usize },
    /// A `<root>/{rgb,mask}` directory tree.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub loss: LossKind,
    pub gamma: f64,
    pub enet_c: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split: SplitRatios,
    /// Weight init, shuffling and augmentation.
    pub seed: u64,
    /// Scene generation and the train/val/test partition.
    pub data_seed: u64,
    pub data: DataSource,
    /// Square side images are generated at or resized to.
    pub size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub modulated: bool,
    pub patience: usize,
    pub augment: bool,
    /// Also score the training split (eval mode) after every epoch.
    pub eval_train: bool,
    /// Stop early once training macro-mIoU reaches this (needs `eval_train`).
    pub stop_at_train_miou: Option<f64>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::VUNet,
            loss: LossKind::CrossEntropy,
            gamma: DEFAULT_GAMMA,
            enet_c: DEFAULT_ENET_C,
            lr: 1e-4,
            epochs: 50,
            batch_size: 1,
            split: SplitRatios::default(),
            seed: 0,
            data_seed: 0,
            data: DataSource::Synthetic { n: 100 },
            size: 256,
            base_channels: 16,
            depth: 4,
            modulated: false,
            patience: DEFAULT_PATIENCE,
            augment: true,
            eval_train: false,
            stop_at_train_miou: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { modulated: self.modulated, ..ModelConfig::new(self.variant, self.base_channels, self.depth) }
    }

    /// `<variant>_<loss>`, the results-table column label.
    pub fn label(&self) -> String {
        format!("{}_{}", self.variant, self.loss)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model_config().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.size == 0 || self.size % (1 << self.depth) != 0 {
            return Err(Error::Geometry(format!(
                "size {} is not divisible by 2^depth = {}",
                self.size,
                1 << self.depth
            )));
        }
        if let DataSource::Synthetic { n: 0 } = self.data {
            return Err(Error::config("synthetic_n must be positive"));
        }
        if self.stop_at_train_miou.is_some() && !self.eval_train {
            return Err(Error::config("stop_at_train_miou needs eval_train = true"));
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment. Unset keys keep their
    /// defaults; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut synthetic_n = None;
        let mut data_dir = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            match key {
                "variant" => cfg.variant = value.parse()?,
                "loss" => cfg.loss = value.parse()?,
                "gamma" => cfg.gamma = parse(key, value)?,
                "enet_c" => cfg.enet_c = parse(key, value)?,
                "lr" | "lr_init" => cfg.lr = parse(key, value)?,
                "epochs" => cfg.epochs = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "split" => {
                    let parts: Vec<f64> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                    let [train, val, test] = parts[..] else {
                        return Err(Error::config(format!("split: expected three ratios, got {value:?}")));
                    };
                    cfg.split = SplitRatios { train, val, test };
                }
                "seed" => cfg.seed = parse(key, value)?,
                "data_seed" => cfg.data_seed = parse(key, value)?,
                "data" => {
                    if value.eq_ignore_ascii_case("synthetic") {
                        data_dir = None;
                    } else {
                        data_dir = Some(PathBuf::from(value));
                    }
                }
                "synthetic_n" => synthetic_n = Some(parse(key, value)?),
                "size" => cfg.size = parse(key, value)?,
                "base_channels" => cfg.base_channels = parse(key, value)?,
                "depth" => cfg.depth = parse(key, value)?,
                "modulated" => cfg.modulated = parse_bool(key, value)?,
                "patience" => cfg.patience = parse(key, value)?,
                "augment" => cfg.augment = parse_bool(key, value)?,
                "eval_train" => cfg.eval_train = parse_bool(key, value)?,
                "stop_at_train_miou" => {
                    cfg.stop_at_train_miou = if value.eq_ignore_ascii_case("none") { None } else { Some(parse(key, value)?) }
                }
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => return Err(Error::config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        cfg.data = match data_dir {
            Some(dir) => DataSource::Directory(dir),
            None => DataSource::Synthetic { n: synthetic_n.unwrap_or(100) },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", self.variant.to_string());
        kv("loss", self.loss.to_string());
        kv("gamma", self.gamma.to_string());
        kv("enet_c", self.enet_c.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("split", format!("{},{},{}", self.split.train, self.split.val, self.split.test));
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        match &self.data {
            DataSource::Synthetic { n } => {
                kv("data", "synthetic".into());
                kv("synthetic_n", n.to_string());
            }
            DataSource::Directory(p) => kv("data", p.display().to_string()),
        }
        kv("size", self.size.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("depth", self.depth.to_string());
        kv("modulated", self.modulated.to_string());
        kv("patience", self.patience.to_string());
        kv("augment", self.augment.to_string());
        kv("eval_train", self.eval_train.to_string());
        kv("stop_at_train_miou", self.stop_at_train_miou.map_or("none".into(), |v| v.to_string()));
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.epochs), (1e-4, 1, 50));
        assert_eq!(c.split, SplitRatios { train: 0.8, val: 0.1, test: 0.1 });
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut c = TrainConfig {
            variant: Variant::RDeUNet,
            loss: LossKind::WeightedFocal,
            data: DataSource::Directory("/data/woodscape".into()),
            stop_at_train_miou: Some(0.95),
            eval_train: true,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        c.data = DataSource::Synthetic { n: 8 };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_with_comments_and_errors() {
        let c = TrainConfig::parse("# run\nvariant = V_DeU-Net  # deformable\nloss=nwf\nsize=64\ndepth=3\n").unwrap();
        assert_eq!((c.variant, c.loss, c.size), (Variant::VDeUNet, LossKind::Focal, 64));
        assert!(TrainConfig::parse("colour = red").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("split = 0.5,0.5,0.5").is_err());
        assert!(TrainConfig::parse("size = 100").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
    }
}
