//! Flat `section.key=value` run configuration with dataset presets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AugmentConfig, CropMode, DatasetPreset};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::net::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.999, eps: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    /// Cosine annealing from `lr_start` to `lr_end`; constant `lr_start`
    /// otherwise.
    pub cosine: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr_start: 1e-4, lr_end: 1e-5, cosine: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps when nonzero.
    pub max_steps: usize,
    pub seed: u64,
    pub data_root: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub crop: CropMode,
    pub cap: (f64, f64),
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = RunConfig {
            preset: name.to_string(),
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            augment: AugmentConfig::preset(DatasetPreset::Synth),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            epochs: 50,
            batch_size: 4,
            max_steps: 0,
            seed: 0,
            data_root: PathBuf::from("data"),
            train_split: "train".into(),
            eval_split: "test".into(),
            crop: CropMode::None,
            cap: (0.0, 10.0),
            out_dir: PathBuf::from("runs"),
        };
        match name {
            "nyu" => Ok(RunConfig {
                model: ModelConfig::nyu(),
                augment: AugmentConfig::preset(DatasetPreset::Nyu),
                crop: CropMode::EigenCenter,
                cap: (0.0, 10.0),
                ..base
            }),
            "kitti" => Ok(RunConfig {
                model: ModelConfig::kitti(),
                augment: AugmentConfig::preset(DatasetPreset::Kitti),
                crop: CropMode::KittiBottomCenter,
                cap: (0.0, 80.0),
                ..base
            }),
            // Eight 64×64 scenes, overfit quickly: a larger step size and
            // no jitter so the training loss tracks fitting alone.
            "desk" => Ok(RunConfig {
                augment: AugmentConfig::identity(DatasetPreset::Synth),
                schedule: ScheduleConfig { lr_start: 2e-3, lr_end: 1e-4, cosine: true },
                epochs: 500,
                batch_size: 4,
                ..base
            }),
            other => Err(Error::config(format!("preset: unknown preset {other:?} (nyu, kitti, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let bad = |k: &str, why: String| Err(Error::config(format!("{k}: {why}")));
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) {
            return bad("optim.beta1", format!("{} is outside [0, 1)", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return bad("optim.beta2", format!("{} is outside [0, 1)", o.beta2));
        }
        if !(o.eps > 0.0) {
            return bad("optim.eps", format!("{} must be > 0", o.eps));
        }
        let s = &self.schedule;
        if !(s.lr_start > 0.0 && s.lr_start.is_finite()) {
            return bad("schedule.lr_start", format!("{} must be > 0", s.lr_start));
        }
        if !(s.lr_end > 0.0 && s.lr_end.is_finite()) {
            return bad("schedule.lr_end", format!("{} must be > 0", s.lr_end));
        }
        if self.epochs == 0 {
            return bad("train.epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be >= 1".into());
        }
        if !(self.cap.0 >= 0.0 && self.cap.1 > self.cap.0) {
            return bad("eval.cap", format!("({}, {}) needs 0 <= min < max", self.cap.0, self.cap.1));
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped. A `preset=` line must come first.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Reads a config file. Its `preset=` line, if any, picks the base.
    pub fn from_file(path: &Path, default_preset: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with_preset(&text, default_preset)
    }

    pub fn from_str_with_preset(text: &str, default_preset: &str) -> Result<Self> {
        let preset = text
            .lines()
            .filter_map(|l| l.trim().split_once('='))
            .find(|(k, _)| k.trim() == "preset")
            .map(|(_, v)| v.trim().to_string());
        let mut cfg = RunConfig::preset(preset.as_deref().unwrap_or(default_preset))?;
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => {
                if value != self.preset {
                    return Err(Error::config(format!("preset: {value:?} must be the first setting")));
                }
            }
            "model.input_h" => m.input_h = parse(key, value)?,
            "model.input_w" => m.input_w = parse(key, value)?,
            "model.stem_channels" => m.stem_channels = parse(key, value)?,
            "model.encoder_channels" => m.encoder_channels = parse_array(key, value)?,
            "model.pem_reduce" => m.pem_reduce = parse_array(key, value)?,
            "model.pem_embed" => m.pem_embed = parse_array(key, value)?,
            "model.pem_out" => m.pem_out = parse_array(key, value)?,
            "model.k" => m.k = parse(key, value)?,
            "model.max_depth" => m.max_depth = parse(key, value)?,
            "model.aspp_rates" => m.aspp_rates = parse_list(key, value)?,
            "model.decoder_channels" => m.decoder_channels = parse(key, value)?,
            "model.use_pem" => m.use_pem = parse(key, value)?,
            "model.use_eam" => m.use_eam = parse(key, value)?,
            "model.edge_norm" => m.edge_norm = parse(key, value)?,
            "loss.lambda" => self.loss.lambda = parse(key, value)?,
            "augment.preset" => self.augment.preset = parse(key, value)?,
            "augment.hflip_prob" => self.augment.hflip_prob = parse(key, value)?,
            "augment.rotation_deg" => self.augment.rotation_deg = parse(key, value)?,
            "augment.contrast" => self.augment.contrast = parse_pair(key, value)?,
            "augment.brightness" => self.augment.brightness = parse_pair(key, value)?,
            "augment.color" => self.augment.color = parse_pair(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "schedule.lr_start" => self.schedule.lr_start = parse(key, value)?,
            "schedule.lr_end" => self.schedule.lr_end = parse(key, value)?,
            "schedule.cosine" => self.schedule.cosine = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.max_steps" => self.max_steps = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "data.root" => self.data_root = PathBuf::from(value),
            "data.train_split" => self.train_split = value.to_string(),
            "data.eval_split" => self.eval_split = value.to_string(),
            "data.crop" => self.crop = parse(key, value)?,
            "eval.cap" => self.cap = parse_pair(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::config(format!("{other}: unknown key"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a form that
    /// [`RunConfig::from_str_with_preset`] reads back.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        let rows: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("model.input_h", m.input_h.to_string()),
            ("model.input_w", m.input_w.to_string()),
            ("model.stem_channels", m.stem_channels.to_string()),
            ("model.encoder_channels", list(&m.encoder_channels)),
            ("model.pem_reduce", list(&m.pem_reduce)),
            ("model.pem_embed", list(&m.pem_embed)),
            ("model.pem_out", list(&m.pem_out)),
            ("model.k", m.k.to_string()),
            ("model.max_depth", m.max_depth.to_string()),
            ("model.aspp_rates", list(&m.aspp_rates)),
            ("model.decoder_channels", m.decoder_channels.to_string()),
            ("model.use_pem", m.use_pem.to_string()),
            ("model.use_eam", m.use_eam.to_string()),
            ("model.edge_norm", m.edge_norm.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("augment.preset", self.augment.preset.to_string()),
            ("augment.hflip_prob", self.augment.hflip_prob.to_string()),
            ("augment.rotation_deg", self.augment.rotation_deg.to_string()),
            ("augment.contrast", pair(self.augment.contrast)),
            ("augment.brightness", pair(self.augment.brightness)),
            ("augment.color", pair(self.augment.color)),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("schedule.lr_start", self.schedule.lr_start.to_string()),
            ("schedule.lr_end", self.schedule.lr_end.to_string()),
            ("schedule.cosine", self.schedule.cosine.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.max_steps", self.max_steps.to_string()),
            ("train.seed", self.seed.to_string()),
            ("data.root", self.data_root.display().to_string()),
            ("data.train_split", self.train_split.clone()),
            ("data.eval_split", self.eval_split.clone()),
            ("data.crop", self.crop.to_string()),
            ("eval.cap", pair(self.cap)),
            ("out.dir", self.out_dir.display().to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v = parse_list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| Error::config(format!("{key}: expected {N} values, got {}", v.len())))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = value.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
    match v[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::config(format!("{key}: expected two values, got {}", v.len()))),
    }
}
