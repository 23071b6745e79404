//! Run configuration: every knob of the pipeline, parsed from a flat
//! `key = value` file with dot-namespaced keys. Unknown keys are hard
//! errors; every run echoes the resolved config.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossTerms;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    None,
    Fm,
    Im,
    FmIm,
}

impl MixMode {
    pub fn feature_level(self) -> bool {
        matches!(self, MixMode::Fm | MixMode::FmIm)
    }

    pub fn input_level(self) -> bool {
        matches!(self, MixMode::Im | MixMode::FmIm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MixMode::None => "none",
            MixMode::Fm => "fm",
            MixMode::Im => "im",
            MixMode::FmIm => "fm_im",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MixMode::None),
            "fm" => Ok(MixMode::Fm),
            "im" => Ok(MixMode::Im),
            "fm_im" => Ok(MixMode::FmIm),
            other => Err(Error::Config(format!(
                "mix.mode must be none|fm|im|fm_im, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    One,
    Two,
}

impl StageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StageMode::One => "one",
            StageMode::Two => "two",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(StageMode::One),
            "two" => Ok(StageMode::Two),
            other => Err(Error::Config(format!(
                "train.stage_mode must be one|two, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub num_classes: u16,
    pub points_per_cloud: usize,
    pub fps_points: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr0: f64,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub sigma_image: f64,
    pub jitter: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub mix_mode: MixMode,
    pub stage_mode: StageMode,
    pub loss_terms: LossTerms,
    pub renormalize_mixed: bool,
    pub literal_eq4: bool,
    /// Worker threads for batch fan-out; set by the CLI, not the file.
    /// Results are thread-count invariant.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            num_classes: 8,
            points_per_cloud: 256,
            fps_points: 256,
            train_size: 800,
            eval_size: 200,
            dim: 32,
            hidden: 64,
            batch_size: 200,
            epochs_stage1: 30,
            epochs_stage2: 30,
            lr0: 1e-3,
            lr_gamma: 0.955,
            weight_decay: 1e-4,
            beta: 1.0,
            sigma_image: 0.1,
            jitter: 0.01,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 100.0,
            mix_mode: MixMode::FmIm,
            stage_mode: StageMode::Two,
            loss_terms: LossTerms::ALL,
            renormalize_mixed: true,
            literal_eq4: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be >= 2".into()));
        }
        if self.points_per_cloud < 8 {
            return Err(Error::Config("data.points_per_cloud must be >= 8".into()));
        }
        if self.fps_points == 0 || self.fps_points > self.points_per_cloud {
            return Err(Error::Config(format!(
                "mix.fps_points must be in [1, points_per_cloud={}], got {}",
                self.points_per_cloud, self.fps_points
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if self.dim < 8 {
            return Err(Error::Config("model.dim must be >= 8".into()));
        }
        if self.hidden < 4 {
            return Err(Error::Config("model.hidden must be >= 4".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config("train.lr0 must be > 0".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config("train.lr_gamma must be in (0, 1]".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config("mix.beta must be > 0".into()));
        }
        if !(self.sigma_image.is_finite() && self.sigma_image >= 0.0) {
            return Err(Error::Config("frozen.sigma_image must be >= 0".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config("data.jitter must be >= 0".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_max >= self.tau_min) {
            return Err(Error::Config(
                "loss temperature bounds must satisfy 0 < tau_min <= tau_max".into(),
            ));
        }
        if !(self.tau_init >= self.tau_min && self.tau_init <= self.tau_max) {
            return Err(Error::Config(format!(
                "loss.tau_init {} outside [{}, {}]",
                self.tau_init, self.tau_min, self.tau_max
            )));
        }
        if !self.loss_terms.any() {
            return Err(Error::Config("loss.terms must not be empty".into()));
        }
        if !self.loss_terms.any_stage1() {
            return Err(Error::Config(
                "loss.terms must include text and/or image (stage 1 has no point term)".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            cfg.set_key(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::Config(format!("invalid value '{value}' for {key}: {e}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "data.num_classes" => self.num_classes = num(key, value)?,
            "data.points_per_cloud" => self.points_per_cloud = num(key, value)?,
            "data.train_size" => self.train_size = num(key, value)?,
            "data.eval_size" => self.eval_size = num(key, value)?,
            "data.jitter" => self.jitter = num(key, value)?,
            "model.dim" => self.dim = num(key, value)?,
            "model.hidden" => self.hidden = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.epochs_stage1" => self.epochs_stage1 = num(key, value)?,
            "train.epochs_stage2" => self.epochs_stage2 = num(key, value)?,
            "train.lr0" => self.lr0 = num(key, value)?,
            "train.lr_gamma" => self.lr_gamma = num(key, value)?,
            "train.weight_decay" => self.weight_decay = num(key, value)?,
            "train.stage_mode" => self.stage_mode = StageMode::parse(value)?,
            "mix.mode" => self.mix_mode = MixMode::parse(value)?,
            "mix.beta" => self.beta = num(key, value)?,
            "mix.fps_points" => self.fps_points = num(key, value)?,
            "mix.renormalize_mixed" => self.renormalize_mixed = parse_bool(key, value)?,
            "frozen.sigma_image" => self.sigma_image = num(key, value)?,
            "loss.terms" => self.loss_terms = parse_terms(value)?,
            "loss.tau_init" => self.tau_init = num(key, value)?,
            "loss.tau_min" => self.tau_min = num(key, value)?,
            "loss.tau_max" => self.tau_max = num(key, value)?,
            "loss.literal_eq4" => self.literal_eq4 = parse_bool(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of the resolved config.
    pub fn resolved_text(&self) -> String {
        let terms = {
            let mut t = Vec::new();
            if self.loss_terms.text {
                t.push("text");
            }
            if self.loss_terms.image {
                t.push("image");
            }
            if self.loss_terms.point {
                t.push("point");
            }
            t.join(",")
        };
        format!(
            "seed = {}\n\
             data.num_classes = {}\n\
             data.points_per_cloud = {}\n\
             data.train_size = {}\n\
             data.eval_size = {}\n\
             data.jitter = {}\n\
             model.dim = {}\n\
             model.hidden = {}\n\
             train.batch_size = {}\n\
             train.epochs_stage1 = {}\n\
             train.epochs_stage2 = {}\n\
             train.lr0 = {}\n\
             train.lr_gamma = {}\n\
             train.weight_decay = {}\n\
             train.stage_mode = {}\n\
             mix.mode = {}\n\
             mix.beta = {}\n\
             mix.fps_points = {}\n\
             mix.renormalize_mixed = {}\n\
             frozen.sigma_image = {}\n\
             loss.terms = {}\n\
             loss.tau_init = {}\n\
             loss.tau_min = {}\n\
             loss.tau_max = {}\n\
             loss.literal_eq4 = {}\n",
            self.seed,
            self.num_classes,
            self.points_per_cloud,
            self.train_size,
            self.eval_size,
            self.jitter,
            self.dim,
            self.hidden,
            self.batch_size,
            self.epochs_stage1,
            self.epochs_stage2,
            self.lr0,
            self.lr_gamma,
            self.weight_decay,
            self.stage_mode.as_str(),
            self.mix_mode.as_str(),
            self.beta,
            self.fps_points,
            self.renormalize_mixed,
            self.sigma_image,
            terms,
            self.tau_init,
            self.tau_min,
            self.tau_max,
            self.literal_eq4,
        )
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "invalid value '{other}' for {key}: expected true|false"
        ))),
    }
}

fn parse_terms(value: &str) -> Result<LossTerms> {
    let mut terms = LossTerms {
        text: false,
        image: false,
        point: false,
    };
    for part in value.split(',') {
        match part.trim() {
            "text" => terms.text = true,
            "image" => terms.image = true,
            "point" => terms.point = true,
            "" => {}
            other => {
                return Err(Error::Config(format!(
                    "loss.terms entries must be text|image|point, got '{other}'"
                )))
            }
        }
    }
    if !terms.any() {
        return Err(Error::Config("loss.terms must not be empty".into()));
    }
    Ok(terms)
}
