//! Flat key=value run configuration. Lines are applied in order ('#' starts a
//! comment); `preset=<S|B|M|L|H>` expands to model.l/model.d, so put it before
//! any explicit overrides of those two. Unknown keys are an error, and the
//! fully-resolved config can be echoed back out in canonical order.

use drwkv_core::backbone::ModelConfig;
use drwkv_core::block::CondMode;
use drwkv_core::data::{cifar10_load, synth_two_blobs, Dataset};
use drwkv_core::train::TrainConfig;
use drwkv_core::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    TwoBlobs,
    Cifar10,
}

impl DataSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two_blobs" => Some(Self::TwoBlobs),
            "cifar10" => Some(Self::Cifar10),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TwoBlobs => "two_blobs",
            Self::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 batch file or directory; unused for the synthetic source
    pub path: Option<PathBuf>,
    /// synthetic corpus size
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f32,
    pub count: usize,
    /// fixed_small | fixed_large | learned | auto (follow model.learn_sigma)
    pub sigma: String,
    pub class: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sample: SampleConfig,
    /// write a sample grid every k steps during training; 0 = off
    pub sample_interval: u64,
    pub sample_count: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    /// S-config on the 8×8 two-blob corpus — the desk-scale smoke setup.
    fn default() -> Self {
        let (l, d) = ModelConfig::preset("S").expect("S preset");
        RunConfig {
            model: ModelConfig {
                l,
                d,
                e: 4,
                p: 2,
                h: 8,
                w: 8,
                c: 1,
                cond_mode: CondMode::AdalnZero,
                num_classes: 2,
                learn_sigma: true,
                t_steps: 1000,
                normalize_decay: true,
                skip: true,
            },
            train: TrainConfig { steps: 3000, batch: 32, ..Default::default() },
            data: DataConfig { source: DataSource::TwoBlobs, path: None, n: 512 },
            sample: SampleConfig { steps: 250, guidance: 1.0, count: 4, sigma: "auto".into(), class: None },
            sample_interval: 0,
            sample_count: 8,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("key '{key}': bad value '{value}'")))
}

impl RunConfig {
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let (l, d) = ModelConfig::preset(value)
                    .ok_or_else(|| Error::Config(format!("unknown preset '{value}' (use S|B|M|L|H)")))?;
                self.model.l = l;
                self.model.d = d;
            }
            "model.l" => self.model.l = parse_as(key, value)?,
            "model.d" => self.model.d = parse_as(key, value)?,
            "model.e" => self.model.e = parse_as(key, value)?,
            "model.p" => self.model.p = parse_as(key, value)?,
            "model.h" => self.model.h = parse_as(key, value)?,
            "model.w" => self.model.w = parse_as(key, value)?,
            "model.c" => self.model.c = parse_as(key, value)?,
            "model.cond_mode" => {
                self.model.cond_mode = CondMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("key '{key}': '{value}' (want in_context|adaln|adaln_zero)")))?;
            }
            "model.num_classes" => self.model.num_classes = parse_as(key, value)?,
            "model.learn_sigma" => self.model.learn_sigma = parse_as(key, value)?,
            "model.t_steps" => self.model.t_steps = parse_as(key, value)?,
            "model.normalize_decay" => self.model.normalize_decay = parse_as(key, value)?,
            "model.skip" => self.model.skip = parse_as(key, value)?,
            "train.steps" => self.train.steps = parse_as(key, value)?,
            "train.batch" => self.train.batch = parse_as(key, value)?,
            "train.lr_hi" => self.train.lr_hi = parse_as(key, value)?,
            "train.lr_lo" => self.train.lr_lo = parse_as(key, value)?,
            "train.lr_switch_frac" => self.train.lr_switch_frac = parse_as(key, value)?,
            "train.ema_decay" => self.train.ema_decay = parse_as(key, value)?,
            "train.p_drop" => self.train.p_drop = parse_as(key, value)?,
            "train.beta_start" => self.train.beta_start = parse_as(key, value)?,
            "train.beta_end" => self.train.beta_end = parse_as(key, value)?,
            "train.hflip" => self.train.hflip = parse_as(key, value)?,
            "train.log_interval" => self.train.log_interval = parse_as(key, value)?,
            "train.save_interval" => self.train.save_interval = parse_as(key, value)?,
            "train.sample_interval" => self.sample_interval = parse_as(key, value)?,
            "train.sample_count" => self.sample_count = parse_as(key, value)?,
            "data.source" => {
                self.data.source = DataSource::parse(value)
                    .ok_or_else(|| Error::Config(format!("key '{key}': '{value}' (want two_blobs|cifar10)")))?;
            }
            "data.path" => self.data.path = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "data.n" => self.data.n = parse_as(key, value)?,
            "sample.steps" => self.sample.steps = parse_as(key, value)?,
            "sample.guidance" => self.sample.guidance = parse_as(key, value)?,
            "sample.count" => self.sample.count = parse_as(key, value)?,
            "sample.sigma" => {
                if !["fixed_small", "fixed_large", "learned", "auto"].contains(&value) {
                    return Err(Error::Config(format!("key '{key}': '{value}'")));
                }
                self.sample.sigma = value.to_string();
            }
            "sample.class" => self.sample.class = if value.is_empty() { None } else { Some(parse_as(key, value)?) },
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_as(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.apply_kv(key, value)?;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Effective σ mode for sampling: `auto` follows the trained model.
    pub fn sigma_mode(&self) -> drwkv_core::diffusion::SigmaMode {
        use drwkv_core::diffusion::SigmaMode;
        match self.sample.sigma.as_str() {
            "fixed_small" => SigmaMode::FixedSmall,
            "fixed_large" => SigmaMode::FixedLarge,
            "learned" => SigmaMode::Learned,
            _ => {
                if self.model.learn_sigma {
                    SigmaMode::Learned
                } else {
                    SigmaMode::FixedSmall
                }
            }
        }
    }

    /// Canonical echo of every key; parsing this text reproduces the config.
    pub fn resolved_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("model.l", m.l.to_string());
        kv("model.d", m.d.to_string());
        kv("model.e", m.e.to_string());
        kv("model.p", m.p.to_string());
        kv("model.h", m.h.to_string());
        kv("model.w", m.w.to_string());
        kv("model.c", m.c.to_string());
        kv("model.cond_mode", m.cond_mode.as_str().to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.learn_sigma", m.learn_sigma.to_string());
        kv("model.t_steps", m.t_steps.to_string());
        kv("model.normalize_decay", m.normalize_decay.to_string());
        kv("model.skip", m.skip.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.batch", t.batch.to_string());
        kv("train.lr_hi", t.lr_hi.to_string());
        kv("train.lr_lo", t.lr_lo.to_string());
        kv("train.lr_switch_frac", t.lr_switch_frac.to_string());
        kv("train.ema_decay", t.ema_decay.to_string());
        kv("train.p_drop", t.p_drop.to_string());
        kv("train.beta_start", t.beta_start.to_string());
        kv("train.beta_end", t.beta_end.to_string());
        kv("train.hflip", t.hflip.to_string());
        kv("train.log_interval", t.log_interval.to_string());
        kv("train.save_interval", t.save_interval.to_string());
        kv("train.sample_interval", self.sample_interval.to_string());
        kv("train.sample_count", self.sample_count.to_string());
        kv("data.source", self.data.source.as_str().to_string());
        kv("data.path", self.data.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("data.n", self.data.n.to_string());
        kv("sample.steps", self.sample.steps.to_string());
        kv("sample.guidance", self.sample.guidance.to_string());
        kv("sample.count", self.sample.count.to_string());
        kv("sample.sigma", self.sample.sigma.clone());
        kv("sample.class", self.sample.class.map(|c| c.to_string()).unwrap_or_default());
        kv("out_dir", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::TwoBlobs => synth_two_blobs(self.data.n, self.model.h, self.model.w, self.seed ^ 0x2b10b5),
            DataSource::Cifar10 => {
                let path = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.source=cifar10 requires data.path".into()))?;
                cifar10_load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            }
        }
    }
}
