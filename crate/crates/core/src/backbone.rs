//! Small five-stage convolutional feature extractor used for both streams.
//!
//! Every stage is a 3x3 stride-2 convolution, an optional squeeze-excitation
//! block and a ReLU. The network is split at a configurable stage so an
//! attention block can act on intermediate features before the remaining
//! stages, global average pooling and a projection to `D` dimensions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::{conv_output_extent, ParamId, ParamStore, ReduceOp, Tape, Tensor, Var};

pub const DEFAULT_STAGE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 128];
pub const SE_REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// 1-based index of the last stage run before attention.
    pub inject_stage: usize,
    pub descriptor_dim: usize,
    pub squeeze_excitation: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: DEFAULT_STAGE_CHANNELS.to_vec(),
            inject_stage: 4,
            descriptor_dim: 128,
            squeeze_excitation: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if self.in_channels == 0 || self.descriptor_dim == 0 || self.stage_channels.contains(&0) {
            return Err(Error::invalid("channel counts and descriptor size must be positive"));
        }
        if self.inject_stage == 0 || self.inject_stage >= n {
            return Err(Error::invalid(format!(
                "inject stage {} must lie in 1..{} so at least one stage follows it",
                self.inject_stage, n
            )));
        }
        if self.squeeze_excitation {
            if let Some(c) = self.stage_channels.iter().find(|&&c| c % SE_REDUCTION != 0) {
                return Err(Error::invalid(format!(
                    "squeeze-excitation needs channels divisible by {SE_REDUCTION}, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// `(C, I, J)` of the features after `stage` (1-based) for an `h x w` input.
    pub fn stage_extent(&self, stage: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in 0..stage {
            h = conv_output_extent(h, 3, 2, 1).ok_or_else(|| Error::shape("input too small"))?;
            w = conv_output_extent(w, 3, 2, 1).ok_or_else(|| Error::shape("input too small"))?;
        }
        Ok((self.stage_channels[stage - 1], h, w))
    }
}

#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SqueezeExcitation {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "{channels} channels are not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(SqueezeExcitation {
            w1: store.add_uniform(format!("{prefix}.w1"), &[hidden, channels], (6.0 / channels as f64).sqrt(), rng)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add_uniform(format!("{prefix}.w2"), &[channels, hidden], (3.0 / hidden as f64).sqrt(), rng)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[channels]))?,
        })
    }
}

/// Global pool, `C -> C/r -> C` gating, sigmoid and channel scaling.
pub fn squeeze_excitation<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, se: &SqueezeExcitation, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("squeeze-excitation needs [T, C, H, W], got {s:?}")));
    }
    if store.get(se.w1).value.shape()[1] != s[1] {
        return Err(Error::shape(format!(
            "squeeze-excitation built for {} channels, got {}",
            store.get(se.w1).value.shape()[1],
            s[1]
        )));
    }
    let pooled = tape.reduce(ReduceOp::Mean, x, &[2, 3])?;
    let pooled = tape.reshape(pooled, &[s[0], s[1]])?;
    let (w1, b1, w2, b2) = (
        tape.param(store, se.w1),
        tape.param(store, se.b1),
        tape.param(store, se.w2),
        tape.param(store, se.b2),
    );
    let h = tape.linear(pooled, w1, Some(b1))?;
    let h = tape.relu(h);
    let g = tape.linear(h, w2, Some(b2))?;
    let g = tape.sigmoid(g);
    tape.scale_channels(x, g)
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub weight: ParamId,
    pub bias: ParamId,
    pub se: Option<SqueezeExcitation>,
}

/// One stream's parameters (`H_app` or `H_flow`).
#[derive(Clone, Debug)]
pub struct Backbone {
    pub name: String,
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl Backbone {
    /// Registers parameters under `name.*` with He-uniform weights and zero biases.
    pub fn new(store: &mut ParamStore, name: &str, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut cin = config.in_channels;
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            let prefix = format!("{name}.stage{}", i + 1);
            let fan_in = (cin * 9) as f64;
            let weight = store.add_uniform(format!("{prefix}.weight"), &[cout, cin, 3, 3], (6.0 / fan_in).sqrt(), rng)?;
            let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?;
            let se = if config.squeeze_excitation {
                Some(SqueezeExcitation::new(store, &format!("{prefix}.se"), cout, SE_REDUCTION, rng)?)
            } else {
                None
            };
            stages.push(Stage { weight, bias, se });
            cin = cout;
        }
        let d = config.descriptor_dim;
        let fc_weight = store.add_uniform(format!("{name}.fc.weight"), &[d, cin], (3.0 / cin as f64).sqrt(), rng)?;
        let fc_bias = store.add(format!("{name}.fc.bias"), Tensor::zeros(&[d]))?;
        Ok(Backbone {
            name: name.to_string(),
            config,
            stages,
            fc_weight,
            fc_bias,
        })
    }

    fn run_stages<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, mut x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        for stage in &self.stages[range] {
            let (w, b) = (tape.param(store, stage.weight), tape.param(store, stage.bias));
            x = tape.conv2d(x, w, Some(b), 2, 1)?;
            if let Some(se) = &stage.se {
                x = squeeze_excitation(tape, store, se, x)?;
            }
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// Stages `1..=inject_stage` on a `[T, Cin, H, W]` clip.
    pub fn forward_to_stage<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, input: Var) -> Result<Var> {
        let s = tape.shape(input);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "{} expects [T, {}, H, W] input, got {:?}",
                self.name, self.config.in_channels, s
            )));
        }
        self.run_stages(tape, store, input, 0..self.config.inject_stage)
    }

    /// Remaining stages, global average pooling and the projection to `[T, D]`.
    pub fn forward_from_stage<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, features: Var) -> Result<Var> {
        let s = tape.shape(features).to_vec();
        let c = self.config.stage_channels[self.config.inject_stage - 1];
        if s.len() != 4 || s[1] != c {
            return Err(Error::shape(format!(
                "{} expects [T, {c}, I, J] stage features, got {s:?}",
                self.name
            )));
        }
        let x = self.run_stages(tape, store, features, self.config.inject_stage..self.stages.len())?;
        let xs = tape.shape(x).to_vec();
        let pooled = tape.reduce(ReduceOp::Mean, x, &[2, 3])?;
        let pooled = tape.reshape(pooled, &[xs[0], xs[1]])?;
        let (w, b) = (tape.param(store, self.fc_weight), tape.param(store, self.fc_bias));
        tape.linear(pooled, w, Some(b))
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, input: Var) -> Result<Var> {
        let mid = self.forward_to_stage(tape, store, input)?;
        self.forward_from_stage(tape, store, mid)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.extend([s.weight, s.bias]);
            if let Some(se) = &s.se {
                ids.extend([se.w1, se.b1, se.w2, se.b2]);
            }
        }
        ids.extend([self.fc_weight, self.fc_bias]);
        ids
    }
}

/// `[T, 3, H, W]` network input: each channel scaled to `[0, 1]` and made
/// zero-mean per frame.
pub fn frames_to_input(frames: &[RgbImage]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::invalid("empty clip"))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut data = vec![0.0; frames.len() * 3 * plane];
    for (t, f) in frames.iter().enumerate() {
        if f.height != h || f.width != w {
            return Err(Error::shape(format!(
                "frame {t} is {}x{}, expected {h}x{w}",
                f.height, f.width
            )));
        }
        for c in 0..3 {
            let dst = &mut data[(t * 3 + c) * plane..(t * 3 + c + 1) * plane];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = f.data[i * 3 + c] as f64 / 255.0;
            }
            let mean = dst.iter().sum::<f64>() / plane as f64;
            dst.iter_mut().for_each(|v| *v -= mean);
        }
    }
    Tensor::new(&[frames.len(), 3, h, w], data)
}
