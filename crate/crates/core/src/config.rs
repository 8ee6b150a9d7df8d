//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; [`KEYS`] lists them with descriptions. The canonical form
//! ([`Config::to_text`]) lists every key in sorted order, and its SHA-256 is
//! the config hash recorded in run logs and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// Keys/values are the image class token only.
    ClsOnly,
    /// Keys/values are the class token and every patch token.
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletOn {
    Fused,
    ImageCls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

macro_rules! keyword_enum {
    ($t:ty, $( $v:path => $s:literal ),+ ) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $( $v => $s ),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $( $s => Ok($v), )+
                    _ => Err(format!("expected one of: {}", [$( $s ),+].join(", "))),
                }
            }
        }
    };
}

keyword_enum!(FuseMode, FuseMode::ClsOnly => "cls_only", FuseMode::AllTokens => "all_tokens");
keyword_enum!(TripletOn, TripletOn::Fused => "h_global", TripletOn::ImageCls => "v_cls");
keyword_enum!(Precision, Precision::F32 => "f32", Precision::F64 => "f64");

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub image_blocks: usize,
    pub text_blocks: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgiConfig {
    pub enabled: bool,
    pub depth: usize,
    pub num_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CffConfig {
    pub enabled: bool,
    pub mode: FuseMode,
    pub blocks: usize,
    pub heads: usize,
    pub replace_q_with_image: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub triplet_on: TripletOn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub new_module_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub decay_factor: f64,
    pub p_ids: usize,
    pub k_per: usize,
    pub seed: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub flip: bool,
    pub erasing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub cgi: CgiConfig,
    pub cff: CffConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Every key with its description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.dim", "joint embedding width d"),
    ("model.word_dim", "word embedding / text encoder width"),
    ("model.heads", "attention heads in both encoders"),
    ("model.image_blocks", "transformer blocks in the image encoder"),
    ("model.text_blocks", "transformer blocks in the text encoder"),
    ("model.patch_h", "patch height in pixels"),
    ("model.patch_w", "patch width in pixels"),
    ("model.max_len", "token sequence length including [SOS]/[EOS]"),
    ("cgi.enabled", "train with the caption-guided inversion branch"),
    ("cgi.depth", "stacked query cross-attention blocks"),
    ("cgi.num_queries", "learnable prompt queries"),
    ("cff.enabled", "fuse text and image features (otherwise use the image class token)"),
    ("cff.mode", "fusion keys/values: cls_only | all_tokens"),
    ("cff.blocks", "self-attention blocks after the fusion cross-attention"),
    ("cff.heads", "attention heads in the fusion module"),
    ("cff.replace_q_with_image", "use image tokens as queries and text as keys/values"),
    ("loss.margin", "triplet margin"),
    ("loss.label_smoothing", "identity cross-entropy label smoothing"),
    ("loss.temperature", "similarity divisor in the contrastive losses"),
    ("loss.triplet_on", "triplet feature: h_global | v_cls"),
    ("train.epochs", "training epochs"),
    ("train.steps_per_epoch", "optimizer steps per epoch"),
    ("train.base_lr", "learning rate of the encoders"),
    ("train.new_module_lr", "learning rate of inversion, fusion and classifier"),
    ("train.warmup_epochs", "linear warmup epochs (from lr/10)"),
    ("train.decay_epochs", "step decay period in epochs"),
    ("train.decay_factor", "step decay factor"),
    ("train.p_ids", "identities per batch"),
    ("train.k_per", "images per identity in a batch"),
    ("train.seed", "seed for initialization, sampling and augmentation"),
    ("train.precision", "training precision: f32 | f64"),
    ("data.flip", "random horizontal flip"),
    ("data.erasing", "random erasing"),
];

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig {
                dim: 64,
                word_dim: 64,
                heads: 4,
                image_blocks: 2,
                text_blocks: 2,
                patch_h: 8,
                patch_w: 8,
                max_len: 32,
            },
            cgi: CgiConfig {
                enabled: true,
                depth: 1,
                num_queries: 2,
            },
            cff: CffConfig {
                enabled: true,
                mode: FuseMode::ClsOnly,
                blocks: 2,
                heads: 4,
                replace_q_with_image: false,
            },
            loss: LossConfig {
                margin: 0.3,
                label_smoothing: 0.1,
                temperature: 1.0,
                triplet_on: TripletOn::Fused,
            },
            train: TrainConfig {
                epochs: 30,
                steps_per_epoch: 20,
                base_lr: 2e-4,
                new_module_lr: 2e-3,
                warmup_epochs: 5,
                decay_epochs: 20,
                decay_factor: 0.1,
                p_ids: 16,
                k_per: 4,
                seed: 0,
                precision: Precision::F32,
            },
            data: DataConfig {
                flip: true,
                erasing: false,
            },
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> std::result::Result<V, String>
where
    V::Err: fmt::Display,
{
    raw.parse::<V>()
        .map_err(|e| format!("invalid value {raw:?} for {key}: {e}"))
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_inner(key, raw.trim()).map_err(Error::Config)
    }

    fn set_inner(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.dim" => m.dim = parse_value(key, raw)?,
            "model.word_dim" => m.word_dim = parse_value(key, raw)?,
            "model.heads" => m.heads = parse_value(key, raw)?,
            "model.image_blocks" => m.image_blocks = parse_value(key, raw)?,
            "model.text_blocks" => m.text_blocks = parse_value(key, raw)?,
            "model.patch_h" => m.patch_h = parse_value(key, raw)?,
            "model.patch_w" => m.patch_w = parse_value(key, raw)?,
            "model.max_len" => m.max_len = parse_value(key, raw)?,
            "cgi.enabled" => self.cgi.enabled = parse_value(key, raw)?,
            "cgi.depth" => self.cgi.depth = parse_value(key, raw)?,
            "cgi.num_queries" => self.cgi.num_queries = parse_value(key, raw)?,
            "cff.enabled" => self.cff.enabled = parse_value(key, raw)?,
            "cff.mode" => self.cff.mode = parse_value(key, raw)?,
            "cff.blocks" => self.cff.blocks = parse_value(key, raw)?,
            "cff.heads" => self.cff.heads = parse_value(key, raw)?,
            "cff.replace_q_with_image" => self.cff.replace_q_with_image = parse_value(key, raw)?,
            "loss.margin" => self.loss.margin = parse_value(key, raw)?,
            "loss.label_smoothing" => self.loss.label_smoothing = parse_value(key, raw)?,
            "loss.temperature" => self.loss.temperature = parse_value(key, raw)?,
            "loss.triplet_on" => self.loss.triplet_on = parse_value(key, raw)?,
            "train.epochs" => t.epochs = parse_value(key, raw)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse_value(key, raw)?,
            "train.base_lr" => t.base_lr = parse_value(key, raw)?,
            "train.new_module_lr" => t.new_module_lr = parse_value(key, raw)?,
            "train.warmup_epochs" => t.warmup_epochs = parse_value(key, raw)?,
            "train.decay_epochs" => t.decay_epochs = parse_value(key, raw)?,
            "train.decay_factor" => t.decay_factor = parse_value(key, raw)?,
            "train.p_ids" => t.p_ids = parse_value(key, raw)?,
            "train.k_per" => t.k_per = parse_value(key, raw)?,
            "train.seed" => t.seed = parse_value(key, raw)?,
            "train.precision" => t.precision = parse_value(key, raw)?,
            "data.flip" => self.data.flip = parse_value(key, raw)?,
            "data.erasing" => self.data.erasing = parse_value(key, raw)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in key order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let (m, t) = (&self.model, &self.train);
        let v: Vec<String> = vec![
            m.dim.to_string(),
            m.word_dim.to_string(),
            m.heads.to_string(),
            m.image_blocks.to_string(),
            m.text_blocks.to_string(),
            m.patch_h.to_string(),
            m.patch_w.to_string(),
            m.max_len.to_string(),
            self.cgi.enabled.to_string(),
            self.cgi.depth.to_string(),
            self.cgi.num_queries.to_string(),
            self.cff.enabled.to_string(),
            self.cff.mode.to_string(),
            self.cff.blocks.to_string(),
            self.cff.heads.to_string(),
            self.cff.replace_q_with_image.to_string(),
            format!("{:?}", self.loss.margin),
            format!("{:?}", self.loss.label_smoothing),
            format!("{:?}", self.loss.temperature),
            self.loss.triplet_on.to_string(),
            t.epochs.to_string(),
            t.steps_per_epoch.to_string(),
            format!("{:?}", t.base_lr),
            format!("{:?}", t.new_module_lr),
            t.warmup_epochs.to_string(),
            t.decay_epochs.to_string(),
            format!("{:?}", t.decay_factor),
            t.p_ids.to_string(),
            t.k_per.to_string(),
            t.seed.to_string(),
            t.precision.to_string(),
            self.data.flip.to_string(),
            self.data.erasing.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(v).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set_inner(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let (m, t) = (&self.model, &self.train);
        if m.dim == 0 || m.word_dim == 0 || m.heads == 0 || m.dim % m.heads != 0 || m.word_dim % m.heads != 0 {
            return fail("model.heads must divide model.dim and model.word_dim");
        }
        if self.cff.heads == 0 || m.dim % self.cff.heads != 0 {
            return fail("cff.heads must divide model.dim");
        }
        if m.patch_h == 0 || m.patch_w == 0 {
            return fail("patch dimensions must be positive");
        }
        if m.max_len < 8 {
            return fail("model.max_len must fit the prompt (at least 8)");
        }
        if self.cgi.depth < 1 || self.cgi.num_queries < 1 {
            return fail("cgi.depth and cgi.num_queries must be at least 1");
        }
        if t.warmup_epochs > t.epochs {
            return fail("train.warmup_epochs must not exceed train.epochs");
        }
        if !(t.base_lr > 0.0 && t.new_module_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if t.decay_epochs == 0 || t.p_ids == 0 || t.k_per < 2 {
            return fail("train.decay_epochs, train.p_ids must be positive and train.k_per at least 2");
        }
        if t.p_ids < 2 {
            return fail("train.p_ids must be at least 2 (triplet negatives)");
        }
        if !(self.loss.temperature > 0.0) || !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return fail("loss.temperature must be positive and loss.label_smoothing in [0, 1)");
        }
        Ok(())
    }

    /// Checkpoint meta entries (`config.<key>`).
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (format!("config.{k}"), v))
            .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Config> {
        let mut cfg = Config::default();
        for (k, v) in meta {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::parse(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(Config::from_meta(&c.to_meta()).unwrap(), c);
        assert_eq!(c.entries().len(), KEYS.len());
    }

    #[test]
    fn parse_overrides_and_errors() {
        let c = Config::parse("# comment\n\ncgi.depth = 3\ncff.mode=all_tokens\n", Path::new("c")).unwrap();
        assert_eq!(c.cgi.depth, 3);
        assert_eq!(c.cff.mode, FuseMode::AllTokens);
        assert_ne!(c.hash(), Config::default().hash());

        let e = Config::parse("cgi.depth = 1\nbogus.key = 2\n", Path::new("c")).unwrap_err();
        assert_eq!(e.to_string(), "c:2: unknown key \"bogus.key\"");
        assert!(Config::parse("cgi.depth 3\n", Path::new("c")).is_err());
        assert!(Config::parse("cgi.depth = x\n", Path::new("c")).is_err());
        assert!(Config::parse("cgi.depth = 0\n", Path::new("c")).is_err());
        assert!(Config::parse("train.warmup_epochs = 99\n", Path::new("c")).is_err());
    }
}
