//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key is optional and
//! defaults to [`RunConfig::default`]; unknown or repeated keys are errors.
//! [`RunConfig::to_text`] writes every key and parses back to the same
//! value, and its SHA-256 is the configuration hash stored in checkpoints.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::ShapeKind;
use crate::encoder::LevelConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, PartialTarget};
use crate::trainer::TrainConfig;

/// Where training and evaluation samples come from. Without an archive
/// path, synthetic shapes are generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    pub synthetic_count: usize,
    pub synthetic_resolution: usize,
    pub synthetic_kinds: Vec<ShapeKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            train_split: "train".into(),
            eval_split: "test".into(),
            synthetic_count: 10,
            synthetic_resolution: 2048,
            synthetic_kinds: ShapeKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_levels(key: &str, v: &str) -> Result<Vec<LevelConfig>> {
    v.split(',')
        .map(|l| {
            let parts: Vec<usize> = l
                .trim()
                .split(':')
                .map(|s| parse_num(key, s.trim()))
                .collect::<Result<_>>()?;
            match parts[..] {
                [n, s, d] => Ok(LevelConfig::new(n, s, d)),
                _ => Err(Error::config(key, "levels are `points:group:dim`")),
            }
        })
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Small network on synthetic shapes, sized for CPU experiments.
    pub fn toy() -> Self {
        let mut c = Self {
            model: ModelConfig::toy(),
            ..Self::default()
        };
        c.data.synthetic_resolution = 1024;
        c.train.batch_size = 2;
        c
    }

    /// Validates every component; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.synthetic_count == 0 {
            return Err(Error::config("data.synthetic_count", "must be at least 1"));
        }
        if d.synthetic_kinds.is_empty() {
            return Err(Error::config("data.synthetic_kinds", "must list at least one shape"));
        }
        if d.synthetic_resolution < 2 {
            return Err(Error::config("data.synthetic_resolution", "must be at least 2"));
        }
        Ok(())
    }

    /// Sets the output resolution of both generators.
    pub fn set_resolution(&mut self, n: usize) {
        self.model.decoder.fine_size = n;
        self.model.gan.fine_size = n;
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.partial_size" => m.partial_size = parse_num(key, v)?,
            "model.z_dim" => m.z_dim = parse_num(key, v)?,
            "encoder.levels" => m.encoder.levels = parse_levels(key, v)?,
            "encoder.attention_heads" => m.encoder.attention_heads = parse_num(key, v)?,
            "encoder.attention_neighbors" => m.encoder.attention_neighbors = parse_num(key, v)?,
            "encoder.latent_dim" => m.encoder.latent_dim = parse_num(key, v)?,
            "refine.up_ratio" => m.refine.up_ratio = parse_num(key, v)?,
            "refine.level" => m.refine.level = parse_num(key, v)?,
            "refine.coarse_size" => m.refine.coarse_size = parse_num(key, v)?,
            "decoder.coarse_size" => m.decoder.coarse_size = parse_num(key, v)?,
            "decoder.fine_size" => self.set_resolution(parse_num(key, v)?),
            "decoder.scales" => m.decoder.scales = parse_list(key, v)?,
            "decoder.branches" => m.decoder.branches = parse_num(key, v)?,
            "gan.stages" => m.gan.stages = parse_num(key, v)?,
            "gan.channels" => m.gan.channels = parse_num(key, v)?,
            "gan.style_dim" => m.gan.style_dim = parse_num(key, v)?,
            "gan.noise_dim" => m.gan.noise_dim = parse_num(key, v)?,
            "gan.disc_widths" => m.gan.disc_widths = parse_list(key, v)?,
            "gan.blend_weight" => m.gan.blend_weight = parse_num(key, v)?,
            "gan.recon_weight" => m.gan.recon_weight = parse_num(key, v)?,
            "fusion.threshold0" => m.fusion.threshold0 = parse_num(key, v)?,
            "fusion.decay" => m.fusion.decay = parse_num(key, v)?,
            "fusion.decay_every" => m.fusion.decay_every = parse_num(key, v)?,
            "fusion.w_s" => m.fusion.w_s = parse_num(key, v)?,
            "loss.kl" => self.loss.kl = parse_num(key, v)?,
            "loss.coarse" => self.loss.coarse = parse_num(key, v)?,
            "loss.fine" => self.loss.fine = parse_num(key, v)?,
            "loss.partial" => self.loss.partial = parse_num(key, v)?,
            "loss.out_start" => self.loss.out_start = parse_num(key, v)?,
            "loss.out_end" => self.loss.out_end = parse_num(key, v)?,
            "loss.out_ramp_epochs" => self.loss.out_ramp_epochs = parse_num(key, v)?,
            "loss.partial_target" => {
                self.loss.partial_target = match v {
                    "output" => PartialTarget::Output,
                    "refined" => PartialTarget::Refined,
                    _ => return Err(Error::config(key, "expected `output` or `refined`")),
                }
            }
            "train.lr0" => self.train.lr0 = parse_num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse_num(key, v)?,
            "train.lr_decay_every" => self.train.lr_decay_every = parse_num(key, v)?,
            "train.beta1" => self.train.beta1 = parse_num(key, v)?,
            "train.beta2" => self.train.beta2 = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.clip" => self.train.clip = parse_num(key, v)?,
            "train.gan_lr_scale" => self.train.gan_lr_scale = parse_num(key, v)?,
            "data.train" => self.data.train = opt_path(v),
            "data.eval" => self.data.eval = opt_path(v),
            "data.train_split" => self.data.train_split = v.to_string(),
            "data.eval_split" => self.data.eval_split = v.to_string(),
            "data.synthetic_count" => self.data.synthetic_count = parse_num(key, v)?,
            "data.synthetic_resolution" => self.data.synthetic_resolution = parse_num(key, v)?,
            "data.synthetic_kinds" => {
                self.data.synthetic_kinds = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::config(key, format!("unknown shape `{s}`"))))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", i + 1), "expected `key = value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "repeated key"));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text with every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let levels = m
            .encoder
            .levels
            .iter()
            .map(|l| format!("{}:{}:{}", l.n_points, l.group_size, l.feature_dim))
            .collect::<Vec<_>>()
            .join(",");
        let kinds = d.synthetic_kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",");
        let target = match l.partial_target {
            PartialTarget::Output => "output",
            PartialTarget::Refined => "refined",
        };
        let rows: Vec<(&str, String)> = vec![
            ("model.partial_size", m.partial_size.to_string()),
            ("model.z_dim", m.z_dim.to_string()),
            ("encoder.levels", levels),
            ("encoder.attention_heads", m.encoder.attention_heads.to_string()),
            ("encoder.attention_neighbors", m.encoder.attention_neighbors.to_string()),
            ("encoder.latent_dim", m.encoder.latent_dim.to_string()),
            ("refine.up_ratio", m.refine.up_ratio.to_string()),
            ("refine.level", m.refine.level.to_string()),
            ("refine.coarse_size", m.refine.coarse_size.to_string()),
            ("decoder.coarse_size", m.decoder.coarse_size.to_string()),
            ("decoder.fine_size", m.decoder.fine_size.to_string()),
            ("decoder.scales", join(&m.decoder.scales)),
            ("decoder.branches", m.decoder.branches.to_string()),
            ("gan.stages", m.gan.stages.to_string()),
            ("gan.channels", m.gan.channels.to_string()),
            ("gan.style_dim", m.gan.style_dim.to_string()),
            ("gan.noise_dim", m.gan.noise_dim.to_string()),
            ("gan.disc_widths", join(&m.gan.disc_widths)),
            ("gan.blend_weight", m.gan.blend_weight.to_string()),
            ("gan.recon_weight", m.gan.recon_weight.to_string()),
            ("fusion.threshold0", m.fusion.threshold0.to_string()),
            ("fusion.decay", m.fusion.decay.to_string()),
            ("fusion.decay_every", m.fusion.decay_every.to_string()),
            ("fusion.w_s", m.fusion.w_s.to_string()),
            ("loss.kl", l.kl.to_string()),
            ("loss.coarse", l.coarse.to_string()),
            ("loss.fine", l.fine.to_string()),
            ("loss.partial", l.partial.to_string()),
            ("loss.out_start", l.out_start.to_string()),
            ("loss.out_end", l.out_end.to_string()),
            ("loss.out_ramp_epochs", l.out_ramp_epochs.to_string()),
            ("loss.partial_target", target.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.lr_decay_every", t.lr_decay_every.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.gan_lr_scale", t.gan_lr_scale.to_string()),
            ("data.train", path(&d.train)),
            ("data.eval", path(&d.eval)),
            ("data.train_split", d.train_split.clone()),
            ("data.eval_split", d.eval_split.clone()),
            ("data.synthetic_count", d.synthetic_count.to_string()),
            ("data.synthetic_resolution", d.synthetic_resolution.to_string()),
            ("data.synthetic_kinds", kinds),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        let mut c = RunConfig::toy();
        c.data.train = Some(PathBuf::from("/data/mvp"));
        c.loss.partial_target = PartialTarget::Refined;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_repeated_and_invalid() {
        let key = |r: Result<RunConfig>| match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key(RunConfig::parse("model.colour = red")), "model.colour");
        assert_eq!(key(RunConfig::parse("loss.kl = 1\nloss.kl = 2")), "loss.kl");
        assert_eq!(key(RunConfig::parse("loss.kl = -1")), "loss.kl");
        assert_eq!(key(RunConfig::parse("fusion.w_s = 1.5")), "fusion.w_s");
        assert_eq!(key(RunConfig::parse("train.lr_decay = 0")), "train.lr_decay");
        assert_eq!(key(RunConfig::parse("train.lr0 = abc")), "train.lr0");
        assert_eq!(key(RunConfig::parse("just words")), "line 1");
    }

    #[test]
    fn comments_and_partial_files() {
        let c = RunConfig::parse("# toy\n\ntrain.seed = 7  # trailing\n").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.model, ModelConfig::default());
        let c = RunConfig::parse("decoder.fine_size = 4096").unwrap();
        assert_eq!(c.model.gan.fine_size, 4096);
    }

    #[test]
    fn hash_tracks_content() {
        let mut c = RunConfig::default();
        let h = c.hash();
        c.train.seed += 1;
        assert_ne!(c.hash(), h);
        assert_eq!(h.len(), 64);
    }
}
