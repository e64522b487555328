//! Flat key=value run configuration shared by every command. Each key's
//! provenance is annotated in the dump: values stated by the training
//! recipe are tagged `[paper]`, desk-scale and plumbing choices `[artifact]`.

use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: CascadeConfig,
    pub loss: LossWeights,
    /// Pretrained-backbone learning rate.
    pub lr_backbone: f64,
    /// Newly initialized heads and injection parameters.
    pub lr_heads: f64,
    pub weight_decay: f64,
    /// Cosine annealing floor.
    pub lr_min: f64,
    /// Fixed rate used for the whole distillation run.
    pub distill_lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub checkpoint_every: usize,
    /// Steps between stitch events.
    pub distill_period: usize,
    pub distill_steps: usize,
    pub seed: u64,
    pub identities: usize,
    pub views: usize,
    /// Trailing views per identity reserved for evaluation.
    pub holdout: usize,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: CascadeConfig {
                m: 12,
                n: 24,
                d: 256,
                p: 8,
                height: 64,
                width: 64,
                heads: 8,
                group: 6,
                ..CascadeConfig::default()
            },
            loss: LossWeights::default(),
            lr_backbone: 1e-5,
            lr_heads: 2e-4,
            weight_decay: 1e-5,
            lr_min: 1e-6,
            distill_lr: 1e-6,
            steps: 2000,
            batch: 4,
            checkpoint_every: 500,
            distill_period: 200,
            distill_steps: 1400,
            seed: 42,
            identities: 8,
            views: 16,
            holdout: 2,
            data_dir: "data".into(),
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Smallest end-to-end profile: one identity, four views, a thin token
    /// dimension, single-sample batches. Keeps the full 36-layer depth so
    /// the stitch schedule is exercised unchanged.
    pub fn micro() -> RunConfig {
        RunConfig {
            model: CascadeConfig {
                d: 32,
                heads: 2,
                ..RunConfig::default().model
            },
            batch: 1,
            identities: 1,
            views: 4,
            holdout: 1,
            ..RunConfig::default()
        }
    }

    /// The full published regimen, documented but far beyond desk scale.
    pub fn paper_regimen() -> RunConfig {
        RunConfig {
            steps: 20_000,
            batch: 32,
            distill_period: 5000,
            distill_steps: 35_000,
            views: 105,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("lr_min", self.lr_min),
            ("distill_lr", self.distill_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch == 0 || self.identities == 0 || self.views == 0 {
            return Err(Error::Config("batch, identities and views must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.distill_period == 0 {
            return Err(Error::Config("checkpoint_every and distill_period must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value, got {raw:?}", ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one override; the same path handles file lines and CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "m" => self.model.m = num(key, value)?,
            "n" => self.model.n = num(key, value)?,
            "d" => self.model.d = num(key, value)?,
            "patch" => self.model.p = num(key, value)?,
            "height" => self.model.height = num(key, value)?,
            "width" => self.model.width = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "group" => self.model.group = num(key, value)?,
            "lambda_nvs" => self.loss.nvs = num(key, value)?,
            "lambda_gs" => self.loss.gs = num(key, value)?,
            "lambda_pts" => self.loss.pts = num(key, value)?,
            "lambda_smplx" => self.loss.smplx = num(key, value)?,
            "lambda_lpips" => self.loss.lpips = num(key, value)?,
            "lambda_distill" => self.loss.distill = num(key, value)?,
            "alpha_conf" => self.loss.alpha_conf = num(key, value)?,
            "lambda_abs" => self.loss.lambda_abs = num(key, value)?,
            "lr_backbone" => self.lr_backbone = num(key, value)?,
            "lr_heads" => self.lr_heads = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "distill_lr" => self.distill_lr = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "distill_period" => self.distill_period = num(key, value)?,
            "distill_steps" => self.distill_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "identities" => self.identities = num(key, value)?,
            "views" => self.views = num(key, value)?,
            "holdout" => self.holdout = num(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Full config as parseable text, one annotated line per key.
    pub fn dump(&self) -> String {
        let rows: &[(&str, String, &str, &str)] = &[
            ("m", self.model.m.to_string(), "paper", "stage I+II encoder layers"),
            ("n", self.model.n.to_string(), "paper", "stage III decoder layers"),
            ("d", self.model.d.to_string(), "artifact", "token dimension"),
            ("patch", self.model.p.to_string(), "artifact", "patch side in pixels"),
            ("height", self.model.height.to_string(), "artifact", "render height"),
            ("width", self.model.width.to_string(), "artifact", "render width"),
            ("heads", self.model.heads.to_string(), "artifact", "attention heads"),
            ("group", self.model.group.to_string(), "paper", "stitch group size"),
            ("lambda_nvs", fmt_f(self.loss.nvs), "paper", "image loss weight"),
            ("lambda_gs", fmt_f(self.loss.gs), "paper", "splat render loss weight"),
            ("lambda_pts", fmt_f(self.loss.pts), "paper", "point map loss weight"),
            ("lambda_smplx", fmt_f(self.loss.smplx), "paper", "body parameter loss weight"),
            ("lambda_lpips", fmt_f(self.loss.lpips), "paper", "perceptual term weight"),
            ("lambda_distill", fmt_f(self.loss.distill), "artifact", "hidden-state match weight"),
            ("alpha_conf", fmt_f(self.loss.alpha_conf), "artifact", "confidence regularizer"),
            ("lambda_abs", fmt_f(self.loss.lambda_abs), "artifact", "absolute point term"),
            ("lr_backbone", fmt_f(self.lr_backbone), "paper", "backbone learning rate"),
            ("lr_heads", fmt_f(self.lr_heads), "paper", "new-head learning rate"),
            ("weight_decay", fmt_f(self.weight_decay), "paper", "AdamW decoupled decay"),
            ("lr_min", fmt_f(self.lr_min), "paper", "cosine annealing floor"),
            ("distill_lr", fmt_f(self.distill_lr), "paper", "fixed distillation rate"),
            ("steps", self.steps.to_string(), "artifact", "teacher steps, desk scale"),
            ("batch", self.batch.to_string(), "artifact", "pairs per step"),
            ("checkpoint_every", self.checkpoint_every.to_string(), "artifact", "teacher snapshot cadence"),
            ("distill_period", self.distill_period.to_string(), "artifact", "steps between stitch events"),
            ("distill_steps", self.distill_steps.to_string(), "artifact", "total distillation steps"),
            ("seed", self.seed.to_string(), "artifact", "master RNG seed"),
            ("identities", self.identities.to_string(), "artifact", "dataset subjects"),
            ("views", self.views.to_string(), "artifact", "views per subject"),
            ("holdout", self.holdout.to_string(), "artifact", "trailing eval views"),
            ("data_dir", self.data_dir.clone(), "artifact", "dataset root"),
            ("out_dir", self.out_dir.clone(), "artifact", "run output root"),
        ];
        let mut s = String::new();
        for (key, value, tag, what) in rows {
            let head = format!("{key} = {value}");
            let _ = writeln!(s, "{head:<28}# [{tag}] {what}");
        }
        s
    }
}

fn fmt_f(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
