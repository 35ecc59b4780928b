//! Model, training and data configuration with a line-oriented
//! `key = value` text format.
//!
//! ```text
//! # start from the full-size preset, then override
//! preset = paper
//! model.d = 128
//! train.steps = 1000
//! ```
//!
//! Keys are `section.field`; `#` starts a comment; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::temporal::TemporalMode;
use crate::window::BlockOptions;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub patch: usize,
    pub window: usize,
    pub heads: usize,
    /// Neighbors on each side of the reference frame; clips hold `2N+1` frames.
    pub neighbors: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub recon_blocks: usize,
    pub temporal_mode: TemporalMode,
    pub temporal_depth: usize,
    pub ffn_ratio: usize,
    pub layer_norm: bool,
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d: 32,
            patch: 4,
            window: 4,
            heads: 4,
            neighbors: 2,
            stages: 2,
            blocks_per_stage: 2,
            recon_blocks: 4,
            temporal_mode: TemporalMode::G3,
            temporal_depth: 1,
            ffn_ratio: 4,
            layer_norm: true,
        }
    }

    pub fn paper() -> ModelConfig {
        ModelConfig {
            d: 256,
            heads: 8,
            stages: 3,
            recon_blocks: 20,
            ..ModelConfig::desk()
        }
    }

    pub fn frames(&self) -> usize {
        2 * self.neighbors + 1
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            ffn_ratio: self.ffn_ratio,
            layer_norm: self.layer_norm,
        }
    }

    /// Input extents that need no internal padding are multiples of this.
    pub fn alignment(&self) -> usize {
        self.patch << (self.stages.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0
            || self.window == 0
            || self.heads == 0
            || self.stages == 0
            || self.ffn_ratio == 0
        {
            return bad("model dimensions must be positive".into());
        }
        if !crate::spatial::PATCH_SIZES.contains(&self.patch) {
            return bad(format!(
                "model.patch must be one of {:?}",
                crate::spatial::PATCH_SIZES
            ));
        }
        if !self.d.is_multiple_of(2) {
            return bad(format!(
                "model.d = {} must be even for the 2D positional encoding",
                self.d
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "model.d = {} is not divisible by model.heads = {}",
                self.d, self.heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub crop: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub steps: u64,
    pub seed: u64,
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            crop: 32,
            flip_h: true,
            flip_v: true,
            steps: 300,
            seed: 0,
            lambda: crate::loss::PERCEPTUAL_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub clips: usize,
    /// Sharp sub-frames averaged into each blurry frame.
    pub blur_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 32,
            width: 32,
            clips: 4,
            blur_frames: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn desk() -> Config {
        Config {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn paper() -> Config {
        Config {
            model: ModelConfig::paper(),
            train: TrainConfig {
                crop: 256,
                ..TrainConfig::default()
            },
            data: DataConfig {
                height: 256,
                width: 256,
                ..DataConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let unit = self.model.alignment() * self.model.window;
        let t = &self.train;
        if t.crop == 0 || !t.crop.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "train.crop = {} must be a positive multiple of patch·2^(stages−1)·window = {unit}",
                t.crop
            )));
        }
        if !(t.lr > 0.0)
            || !(0.0..1.0).contains(&t.beta1)
            || !(0.0..1.0).contains(&t.beta2)
            || !(t.adam_eps > 0.0)
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(t.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "train.lambda = {} must be non-negative",
                t.lambda
            )));
        }
        let d = &self.data;
        if d.blur_frames == 0 || d.blur_frames.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "data.blur_frames = {} must be odd",
                d.blur_frames
            )));
        }
        if d.height == 0 || d.width == 0 {
            return Err(Error::Config("data extents must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`Config::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("model.d", m.d.to_string());
        kv("model.patch", m.patch.to_string());
        kv("model.window", m.window.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.neighbors", m.neighbors.to_string());
        kv("model.stages", m.stages.to_string());
        kv("model.blocks_per_stage", m.blocks_per_stage.to_string());
        kv("model.recon_blocks", m.recon_blocks.to_string());
        kv("model.temporal_mode", m.temporal_mode.to_string());
        kv("model.temporal_depth", m.temporal_depth.to_string());
        kv("model.ffn_ratio", m.ffn_ratio.to_string());
        kv("model.layer_norm", m.layer_norm.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.beta1", format!("{:?}", t.beta1));
        kv("train.beta2", format!("{:?}", t.beta2));
        kv("train.adam_eps", format!("{:?}", t.adam_eps));
        kv("train.crop", t.crop.to_string());
        kv("train.flip_h", t.flip_h.to_string());
        kv("train.flip_v", t.flip_v.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.lambda", format!("{:?}", t.lambda));
        kv("data.height", d.height.to_string());
        kv("data.width", d.width.to_string());
        kv("data.clips", d.clips.to_string());
        kv("data.blur_frames", d.blur_frames.to_string());
        s
    }

    /// Parses config text on top of the desk preset (or the preset named by a
    /// `preset` line, which must come first).
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::desk();
        let mut seen_key = false;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = no + 1;
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "line {lineno}: expected `key = value`, got {line:?}"
                    ))
                })?;
            if key == "preset" {
                if seen_key {
                    return Err(Error::Config(format!(
                        "line {lineno}: `preset` must precede other keys"
                    )));
                }
                cfg = match value {
                    "desk" => Config::desk(),
                    "paper" => Config::paper(),
                    _ => {
                        return Err(Error::Config(format!(
                            "line {lineno}: unknown preset {value:?}"
                        )))
                    }
                };
            } else {
                cfg.set(key, value).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {lineno}: {msg}")),
                    other => other,
                })?;
            }
            seen_key = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.d" => m.d = parse_value(key, value)?,
            "model.patch" => m.patch = parse_value(key, value)?,
            "model.window" => m.window = parse_value(key, value)?,
            "model.heads" => m.heads = parse_value(key, value)?,
            "model.neighbors" => m.neighbors = parse_value(key, value)?,
            "model.stages" => m.stages = parse_value(key, value)?,
            "model.blocks_per_stage" => m.blocks_per_stage = parse_value(key, value)?,
            "model.recon_blocks" => m.recon_blocks = parse_value(key, value)?,
            "model.temporal_mode" => m.temporal_mode = value.parse()?,
            "model.temporal_depth" => m.temporal_depth = parse_value(key, value)?,
            "model.ffn_ratio" => m.ffn_ratio = parse_value(key, value)?,
            "model.layer_norm" => m.layer_norm = parse_value(key, value)?,
            "train.lr" => t.lr = parse_value(key, value)?,
            "train.beta1" => t.beta1 = parse_value(key, value)?,
            "train.beta2" => t.beta2 = parse_value(key, value)?,
            "train.adam_eps" => t.adam_eps = parse_value(key, value)?,
            "train.crop" => t.crop = parse_value(key, value)?,
            "train.flip_h" => t.flip_h = parse_value(key, value)?,
            "train.flip_v" => t.flip_v = parse_value(key, value)?,
            "train.steps" => t.steps = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "train.lambda" => t.lambda = parse_value(key, value)?,
            "data.height" => d.height = parse_value(key, value)?,
            "data.width" => d.width = parse_value(key, value)?,
            "data.clips" => d.clips = parse_value(key, value)?,
            "data.blur_frames" => d.blur_frames = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}
