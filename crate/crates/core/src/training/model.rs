use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{
    aggregation_weights, average_pool, fuse_and_project, raw_weighted_sum, reference_feature,
    temporal_attention_pool, weighted_addition, FuseHead, ReferenceMode, TemporalAttention,
    TinyEmbedding, WeightMode,
};
use crate::attention::{apply_mutual_attention, gated_attention, MutualAttention, ShallowFlowCnn};
use crate::backbone::{frames_to_input, Backbone, BackboneConfig};
use crate::data::SampledClip;
use crate::error::{Error, Result};
use crate::optflow::{flow_to_input, DEFAULT_FLOW_CAP};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Mutual,
    Gated,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    Weighted,
    Average,
    TemporalAttention,
}

impl FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mutual" => Ok(AttentionMode::Mutual),
            "gated" => Ok(AttentionMode::Gated),
            "none" => Ok(AttentionMode::None),
            other => Err(Error::invalid(format!("unknown mode `{other}` (mutual|gated|none)"))),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Mutual => "mutual",
            AttentionMode::Gated => "gated",
            AttentionMode::None => "none",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(AggregationMode::Weighted),
            "avg" => Ok(AggregationMode::Average),
            "tattn" => Ok(AggregationMode::TemporalAttention),
            other => Err(Error::invalid(format!("unknown aggregation `{other}` (weighted|avg|tattn)"))),
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Weighted => "weighted",
            AggregationMode::Average => "avg",
            AggregationMode::TemporalAttention => "tattn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: AttentionMode,
    pub aggregation: AggregationMode,
    /// Streams used without attention (1: appearance only, 2: plus flow).
    pub streams: usize,
    /// Appearance stream; the flow stream mirrors it with two input channels.
    pub backbone: BackboneConfig,
    pub reference: ReferenceMode,
    pub weights: WeightMode,
    pub num_identities: usize,
    pub flow_cap: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: AttentionMode::Mutual,
            aggregation: AggregationMode::Weighted,
            streams: 1,
            backbone: BackboneConfig::default(),
            reference: ReferenceMode::TemporalMax,
            weights: WeightMode::Normalized,
            num_identities: 16,
            flow_cap: DEFAULT_FLOW_CAP,
        }
    }
}

impl ModelConfig {
    pub fn two_stream(&self) -> bool {
        match self.mode {
            AttentionMode::Mutual => true,
            AttentionMode::Gated => false,
            AttentionMode::None => self.streams == 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.in_channels != 3 {
            return Err(Error::invalid("the appearance stream takes 3 input channels"));
        }
        if !(1..=2).contains(&self.streams) {
            return Err(Error::invalid(format!("streams must be 1 or 2, got {}", self.streams)));
        }
        if self.num_identities < 2 {
            return Err(Error::invalid("need at least two training identities"));
        }
        if self.aggregation == AggregationMode::Weighted && self.backbone.descriptor_dim < 4 {
            return Err(Error::invalid("weighted addition needs D >= 4"));
        }
        if !(self.flow_cap > 0.0) {
            return Err(Error::invalid("flow cap must be positive"));
        }
        Ok(())
    }
}

/// Network inputs for one clip.
#[derive(Clone, Debug)]
pub struct ClipInput {
    /// `[T, 3, H, W]`
    pub frames: Tensor,
    /// `[T, 2, H, W]`
    pub flows: Tensor,
}

impl ClipInput {
    pub fn from_sampled(clip: &SampledClip, flow_cap: f64) -> Result<Self> {
        let frames = frames_to_input(&clip.frames.frames)?;
        let fields: Vec<Tensor> = clip.flows.fields.iter().map(|f| flow_to_input(f, flow_cap)).collect();
        let [_, h, w] = fields
            .first()
            .ok_or_else(|| Error::invalid("clip without flow"))?
            .shape()
            .try_into()
            .expect("rank 3");
        let mut data = Vec::with_capacity(fields.len() * 2 * h * w);
        for f in fields {
            data.extend(f.into_data());
        }
        let flows = Tensor::new(&[clip.flows.len(), 2, h, w], data)?;
        if flows.shape()[0] != frames.shape()[0] || flows.shape()[2..] != frames.shape()[2..] {
            return Err(Error::shape(format!(
                "flow {:?} does not match frames {:?}",
                flows.shape(),
                frames.shape()
            )));
        }
        Ok(ClipInput { frames, flows })
    }

    pub fn seq_len(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Tape handles produced by one clip's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClipForward {
    /// `[D]`
    pub descriptor: Var,
    /// `[T, 1, I, J]` spatial attention (mutual or gated modes).
    pub attention: Option<Var>,
    /// `[T]` appearance-stream aggregation weights.
    pub weights: Option<Var>,
}

/// Everything the network needs: configuration, parameters and the handles
/// naming them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub app: Backbone,
    pub flow: Option<Backbone>,
    pub mutual: Option<MutualAttention>,
    pub flow_cnn: Option<ShallowFlowCnn>,
    pub embed_app: Option<TinyEmbedding>,
    pub embed_flow: Option<TinyEmbedding>,
    pub tattn_app: Option<TemporalAttention>,
    pub tattn_flow: Option<TemporalAttention>,
    pub fuse: Option<FuseHead>,
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

impl Model {
    /// Builds and initializes every parameter from `seed`; values are rounded
    /// to `f32` so checkpoints reproduce them exactly.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let two = config.two_stream();
        let d = config.backbone.descriptor_dim;
        let inject_channels = config.backbone.stage_channels[config.backbone.inject_stage - 1];

        let app = Backbone::new(&mut store, "app", config.backbone.clone(), &mut rng)?;
        let flow = if two {
            let cfg = BackboneConfig {
                in_channels: 2,
                ..config.backbone.clone()
            };
            Some(Backbone::new(&mut store, "flow", cfg, &mut rng)?)
        } else {
            None
        };
        let mutual = match config.mode {
            AttentionMode::Mutual => Some(MutualAttention::new(&mut store, inject_channels, &mut rng)?),
            _ => None,
        };
        let flow_cnn = match config.mode {
            AttentionMode::Gated => Some(ShallowFlowCnn::new(&mut store, &mut rng)?),
            _ => None,
        };
        let (mut embed_app, mut embed_flow, mut tattn_app, mut tattn_flow) = (None, None, None, None);
        match config.aggregation {
            AggregationMode::Weighted => {
                embed_app = Some(TinyEmbedding::new(&mut store, "eps_app", d, &mut rng)?);
                if two {
                    embed_flow = Some(TinyEmbedding::new(&mut store, "eps_flow", d, &mut rng)?);
                }
            }
            AggregationMode::TemporalAttention => {
                tattn_app = Some(TemporalAttention::new(&mut store, "tattn_app", d, &mut rng)?);
                if two {
                    tattn_flow = Some(TemporalAttention::new(&mut store, "tattn_flow", d, &mut rng)?);
                }
            }
            AggregationMode::Average => {}
        }
        let fuse = if two { Some(FuseHead::new(&mut store, d, &mut rng)?) } else { None };
        let classifier_weight =
            store.add_uniform("classifier.weight", &[config.num_identities, d], (3.0 / d as f64).sqrt(), &mut rng)?;
        let classifier_bias = store.add("classifier.bias", Tensor::zeros(&[config.num_identities]))?;
        store.round_to_f32();
        Ok(Model {
            config,
            store,
            app,
            flow,
            mutual,
            flow_cnn,
            embed_app,
            embed_flow,
            tattn_app,
            tattn_flow,
            fuse,
            classifier_weight,
            classifier_bias,
        })
    }

    fn aggregate<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        features: Var,
        embed: Option<&TinyEmbedding>,
        scorer: Option<&TemporalAttention>,
    ) -> Result<(Var, Option<Var>)> {
        match self.config.aggregation {
            AggregationMode::Average => Ok((average_pool(tape, features)?, None)),
            AggregationMode::TemporalAttention => {
                let scorer = scorer.expect("temporal attention parameters");
                Ok((temporal_attention_pool(tape, store, features, scorer)?, None))
            }
            AggregationMode::Weighted => {
                let embed = embed.expect("embedding parameters");
                let reference = reference_feature(tape, features, self.config.reference)?;
                let w = aggregation_weights(tape, store, features, reference, embed, self.config.weights)?;
                let agg = match self.config.weights {
                    WeightMode::Normalized => weighted_addition(tape, features, w)?,
                    WeightMode::Raw => raw_weighted_sum(tape, features, w)?,
                };
                Ok((agg, Some(w)))
            }
        }
    }

    /// Records one clip's forward pass on `tape`.
    pub fn forward_clip<'a>(&'a self, tape: &mut Tape<'a>, input: &ClipInput) -> Result<ClipForward> {
        self.forward_clip_with(&self.store, tape, input)
    }

    /// As [`Model::forward_clip`], reading parameter values from `store`
    /// (which must share this model's layout).
    pub fn forward_clip_with<'a>(&self, store: &'a ParamStore, tape: &mut Tape<'a>, input: &ClipInput) -> Result<ClipForward> {
        let frames = tape.constant(input.frames.clone());
        let mut attention = None;
        let (app_feats, flow_feats) = match self.config.mode {
            AttentionMode::Mutual => {
                let flow_net = self.flow.as_ref().expect("flow stream");
                let flows = tape.constant(input.flows.clone());
                let phi = self.app.forward_to_stage(tape, store, frames)?;
                let f = flow_net.forward_to_stage(tape, store, flows)?;
                let m = self.mutual.as_ref().expect("mutual attention").map(tape, store, phi, f)?;
                attention = Some(m);
                let (pa, pf) = apply_mutual_attention(tape, phi, f, m)?;
                (
                    self.app.forward_from_stage(tape, store, pa)?,
                    Some(flow_net.forward_from_stage(tape, store, pf)?),
                )
            }
            AttentionMode::Gated => {
                let flows = tape.constant(input.flows.clone());
                let psi = self.app.forward_to_stage(tape, store, frames)?;
                let s = tape.shape(psi).to_vec();
                let ff = self
                    .flow_cnn
                    .as_ref()
                    .expect("flow CNN")
                    .forward(tape, store, flows, s[2], s[3])?;
                let (gated, a) = gated_attention(tape, psi, ff)?;
                attention = Some(a);
                (self.app.forward_from_stage(tape, store, gated)?, None)
            }
            AttentionMode::None => {
                let a = self.app.forward(tape, store, frames)?;
                let f = match &self.flow {
                    Some(net) => {
                        let flows = tape.constant(input.flows.clone());
                        Some(net.forward(tape, store, flows)?)
                    }
                    None => None,
                };
                (a, f)
            }
        };
        let (phi_c, weights) = self.aggregate(tape, store, app_feats, self.embed_app.as_ref(), self.tattn_app.as_ref())?;
        let descriptor = match flow_feats {
            Some(ff) => {
                let (f_c, _) = self.aggregate(tape, store, ff, self.embed_flow.as_ref(), self.tattn_flow.as_ref())?;
                fuse_and_project(tape, store, phi_c, f_c, self.fuse.as_ref().expect("fusion head"))?
            }
            None => phi_c,
        };
        Ok(ClipForward {
            descriptor,
            attention,
            weights,
        })
    }

    /// Identity logits `[B, num_ids]` for stacked descriptors `[B, D]`.
    pub fn logits<'a>(&'a self, tape: &mut Tape<'a>, descriptors: Var) -> Result<Var> {
        self.logits_with(&self.store, tape, descriptors)
    }

    pub fn logits_with<'a>(&self, store: &'a ParamStore, tape: &mut Tape<'a>, descriptors: Var) -> Result<Var> {
        let (w, b) = (
            tape.param(store, self.classifier_weight),
            tape.param(store, self.classifier_bias),
        );
        tape.linear(descriptors, w, Some(b))
    }

    /// Inference-only descriptor of one clip.
    pub fn describe(&self, input: &ClipInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_clip(&mut tape, input)?;
        let v = tape.value(out.descriptor);
        if !v.all_finite() {
            return Err(Error::NonFinite("descriptor has non-finite entries".into()));
        }
        Ok(v.data().to_vec())
    }

    /// Descriptor and (when the mode has one) the spatial attention map
    /// `[T, 1, I, J]` for one clip.
    pub fn describe_with_attention(&self, input: &ClipInput) -> Result<(Vec<f64>, Option<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward_clip(&mut tape, input)?;
        let desc = tape.value(out.descriptor).data().to_vec();
        Ok((desc, out.attention.map(|a| tape.value(a).clone())))
    }

    pub fn describe_all(&self, inputs: &[ClipInput]) -> Result<Vec<Vec<f64>>> {
        inputs.par_iter().map(|i| self.describe(i)).collect()
    }
}
