//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, and
//! [`RunConfig::to_text`] writes every key so a run can be reproduced from
//! its resolved configuration alone.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::aggregation::{ReferenceMode, WeightMode};
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::evaluation::Metric;
use crate::optflow::FlowParams;
use crate::training::{ModelConfig, TrainConfig};

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub flow: FlowParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Frames per clip at extraction (evenly spaced).
    pub eval_seq_len: usize,
    pub metric: Metric,
    pub ranks: Vec<usize>,
    /// Worker threads; `0` means all available CPUs.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            flow: FlowParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_seq_len: 4,
            metric: Metric::Euclidean,
            ranks: vec![1, 5, 10, 20],
            workers: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "data_seed", "ids", "clips", "frames", "height", "width", "group_size", "occlusion", "noise",
        "alpha", "iters", "flow_cap",
        "mode", "agg", "streams", "inject_stage", "stage_channels", "dim", "se", "reference", "weights",
        "seed", "seq_len", "p", "k", "lr", "beta1", "beta2", "eps", "margin", "lambda_id", "lambda_tri",
        "epochs", "augment",
        "eval_seq_len", "metric", "ranks", "workers",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let g = &mut self.generator;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data_seed" => g.seed = parse(key, v)?,
            "ids" => g.num_identities = parse(key, v)?,
            "clips" => g.clips_per_identity = parse(key, v)?,
            "frames" => g.frames_per_clip = parse(key, v)?,
            "height" => g.height = parse(key, v)?,
            "width" => g.width = parse(key, v)?,
            "group_size" => g.group_size = parse(key, v)?,
            "occlusion" => g.occlusion_prob = parse(key, v)?,
            "noise" => g.noise = parse(key, v)?,
            "alpha" => self.flow.alpha = parse(key, v)?,
            "iters" => self.flow.iterations = parse(key, v)?,
            "flow_cap" => {
                self.flow.cap = parse(key, v)?;
                m.flow_cap = self.flow.cap;
            }
            "mode" => m.mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "agg" => m.aggregation = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "streams" => m.streams = parse(key, v)?,
            "inject_stage" => m.backbone.inject_stage = parse(key, v)?,
            "stage_channels" => m.backbone.stage_channels = parse_list(key, v)?,
            "dim" => m.backbone.descriptor_dim = parse(key, v)?,
            "se" => m.backbone.squeeze_excitation = parse_bool(key, v)?,
            "reference" => {
                m.reference = match v {
                    "max" => ReferenceMode::TemporalMax,
                    "argmax" => ReferenceMode::ArgmaxFrame,
                    _ => return Err(Error::Config(format!("`reference`: expected max or argmax, got `{v}`"))),
                }
            }
            "weights" => {
                m.weights = match v {
                    "normalized" => WeightMode::Normalized,
                    "raw" => WeightMode::Raw,
                    _ => return Err(Error::Config(format!("`weights`: expected normalized or raw, got `{v}`"))),
                }
            }
            "seed" => t.seed = parse(key, v)?,
            "seq_len" => t.seq_len = parse(key, v)?,
            "p" => t.p = parse(key, v)?,
            "k" => t.k = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "margin" => t.margin = parse(key, v)?,
            "lambda_id" => t.lambda_id = parse(key, v)?,
            "lambda_tri" => t.lambda_tri = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "augment" => t.augment = parse_bool(key, v)?,
            "eval_seq_len" => self.eval_seq_len = parse(key, v)?,
            "metric" => {
                self.metric = match v {
                    "euclidean" => Metric::Euclidean,
                    "cosine" => Metric::Cosine,
                    _ => return Err(Error::Config(format!("`metric`: expected euclidean or cosine, got `{v}`"))),
                }
            }
            "ranks" => {
                let mut r = parse_list(key, v)?;
                r.sort_unstable();
                r.dedup();
                self.ranks = r;
            }
            "workers" => self.workers = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (g, m, t) = (&self.generator, &self.model, &self.train);
        Some(match key {
            "data_seed" => g.seed.to_string(),
            "ids" => g.num_identities.to_string(),
            "clips" => g.clips_per_identity.to_string(),
            "frames" => g.frames_per_clip.to_string(),
            "height" => g.height.to_string(),
            "width" => g.width.to_string(),
            "group_size" => g.group_size.to_string(),
            "occlusion" => g.occlusion_prob.to_string(),
            "noise" => g.noise.to_string(),
            "alpha" => self.flow.alpha.to_string(),
            "iters" => self.flow.iterations.to_string(),
            "flow_cap" => self.flow.cap.to_string(),
            "mode" => m.mode.to_string(),
            "agg" => m.aggregation.to_string(),
            "streams" => m.streams.to_string(),
            "inject_stage" => m.backbone.inject_stage.to_string(),
            "stage_channels" => join(&m.backbone.stage_channels),
            "dim" => m.backbone.descriptor_dim.to_string(),
            "se" => m.backbone.squeeze_excitation.to_string(),
            "reference" => match m.reference {
                ReferenceMode::TemporalMax => "max",
                ReferenceMode::ArgmaxFrame => "argmax",
            }
            .to_string(),
            "weights" => match m.weights {
                WeightMode::Normalized => "normalized",
                WeightMode::Raw => "raw",
            }
            .to_string(),
            "seed" => t.seed.to_string(),
            "seq_len" => t.seq_len.to_string(),
            "p" => t.p.to_string(),
            "k" => t.k.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "margin" => t.margin.to_string(),
            "lambda_id" => t.lambda_id.to_string(),
            "lambda_tri" => t.lambda_tri.to_string(),
            "epochs" => t.epochs.to_string(),
            "augment" => t.augment.to_string(),
            "eval_seq_len" => self.eval_seq_len.to_string(),
            "metric" => match self.metric {
                Metric::Euclidean => "euclidean",
                Metric::Cosine => "cosine",
            }
            .to_string(),
            "ranks" => join(&self.ranks),
            "workers" => self.workers.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.generator.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if !(self.flow.alpha > 0.0) || self.flow.iterations == 0 || !(self.flow.cap > 0.0) {
            return Err(Error::Config("flow alpha, iterations and cap must be positive".into()));
        }
        if self.eval_seq_len == 0 {
            return Err(Error::Config("eval_seq_len must be positive".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::Config("ranks must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }
}
