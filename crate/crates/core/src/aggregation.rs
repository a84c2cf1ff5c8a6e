//! Temporal aggregation of per-frame features into one clip descriptor.
//!
//! Weighted feature addition scores every frame against a reference built
//! from the whole clip: a tiny embedding maps both to a small space, and the
//! frame weight is `exp(cos(eps(frame), eps(reference)))`, normalized to sum
//! to one. Frames that look unlike the rest of the clip (occlusions,
//! misalignment) therefore contribute less.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, ReduceOp, Tape, Tensor, Var};

/// How the per-stream reference feature is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Element-wise maximum over time.
    TemporalMax,
    /// The frame with the largest mean activation.
    ArgmaxFrame,
}

/// Whether exp-cosine weights are normalized to sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Normalized,
    Raw,
}

/// Reference feature of a `[T, D]` sequence, shaped `[D]`.
pub fn reference_feature(tape: &mut Tape<'_>, features: Var, mode: ReferenceMode) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape(format!("reference needs [T, D] with T >= 1, got {s:?}")));
    }
    match mode {
        ReferenceMode::TemporalMax => {
            let m = tape.reduce(ReduceOp::Max, features, &[0])?;
            tape.reshape(m, &[s[1]])
        }
        ReferenceMode::ArgmaxFrame => {
            let v = tape.value(features);
            let mut best = (0, f64::NEG_INFINITY);
            for t in 0..s[0] {
                let mean = v.row(t).iter().sum::<f64>() / s[1] as f64;
                if mean > best.1 {
                    best = (t, mean);
                }
            }
            tape.select_row(features, best.0)
        }
    }
}

/// `eps`: a fully connected `D -> D/4` layer with ReLU.
#[derive(Clone, Debug)]
pub struct TinyEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TinyEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let out = dim / 4;
        if out == 0 {
            return Err(Error::invalid(format!("embedding needs D >= 4, got {dim}")));
        }
        Ok(TinyEmbedding {
            weight: store.add_uniform(format!("{name}.weight"), &[out, dim], (6.0 / dim as f64).sqrt(), rng)?,
            bias: store.add(format!("{name}.bias"), Tensor::full(&[out], 0.1))?,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.weight), tape.param(store, self.bias));
        let y = tape.linear(x, w, Some(b))?;
        Ok(tape.relu(y))
    }
}

/// Per-frame weights `exp(cos(eps(x_t), eps(reference)))`, normalized unless
/// `mode` is [`WeightMode::Raw`]. A near-zero embedding gets cosine 0 and a
/// tape diagnostic.
pub fn aggregation_weights<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    features: Var,
    reference: Var,
    embed: &TinyEmbedding,
    mode: WeightMode,
) -> Result<Var> {
    let ef = embed.forward(tape, store, features)?;
    let er = embed.forward(tape, store, reference)?;
    let cos = tape.cosine_rows(ef, er)?;
    let raw = tape.exp(cos);
    match mode {
        WeightMode::Raw => Ok(raw),
        WeightMode::Normalized => tape.normalize_sum(raw),
    }
}

/// `sum_t w[t] * x[t]` for weights summing to one (within `1e-9`).
pub fn weighted_addition(tape: &mut Tape<'_>, features: Var, weights: Var) -> Result<Var> {
    let total: f64 = tape.value(weights).data().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("aggregation weights sum to {total}, not 1")));
    }
    tape.affine_rows(features, weights)
}

/// Sum with unnormalized weights (the raw-weight switch).
pub fn raw_weighted_sum(tape: &mut Tape<'_>, features: Var, weights: Var) -> Result<Var> {
    tape.weighted_rows(features, weights)
}

/// Uniform weights `1/T`.
pub fn uniform_weights(t: usize) -> Tensor {
    Tensor::full(&[t], 1.0 / t as f64)
}

/// Temporal mean, computed exactly as [`weighted_addition`] with uniform weights.
pub fn average_pool(tape: &mut Tape<'_>, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape(format!("average pool needs [T, D] with T >= 1, got {s:?}")));
    }
    let w = tape.constant(uniform_weights(s[0]));
    tape.affine_rows(features, w)
}

/// Softmax-over-time attention with a linear `D -> 1` scorer.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(TemporalAttention {
            weight: store.add_uniform(format!("{name}.weight"), &[1, dim], (3.0 / dim as f64).sqrt(), rng)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1]))?,
        })
    }
}

pub fn temporal_attention_pool<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    features: Var,
    scorer: &TemporalAttention,
) -> Result<Var> {
    let t = tape.shape(features)[0];
    let (w, b) = (tape.param(store, scorer.weight), tape.param(store, scorer.bias));
    let scores = tape.linear(features, w, Some(b))?;
    let scores = tape.reshape(scores, &[t])?;
    let weights = tape.softmax(scores)?;
    tape.affine_rows(features, weights)
}

/// Fully connected `2D -> D` head over the concatenated stream descriptors.
#[derive(Clone, Debug)]
pub struct FuseHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl FuseHead {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FuseHead {
            weight: store.add_uniform("fuse.weight", &[dim, 2 * dim], (3.0 / (2 * dim) as f64).sqrt(), rng)?,
            bias: store.add("fuse.bias", Tensor::zeros(&[dim]))?,
        })
    }
}

pub fn fuse_and_project<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, phi: Var, f: Var, head: &FuseHead) -> Result<Var> {
    if tape.shape(phi) != tape.shape(f) || tape.shape(phi).len() != 1 {
        return Err(Error::shape(format!(
            "fusion needs two D-vectors, got {:?} and {:?}",
            tape.shape(phi),
            tape.shape(f)
        )));
    }
    let cat = tape.concat(phi, f)?;
    let (w, b) = (tape.param(store, head.weight), tape.param(store, head.bias));
    tape.linear(cat, w, Some(b))
}

/// The matched representation of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDescriptor {
    pub clip_id: String,
    pub identity: u32,
    pub camera: u32,
    pub vector: Vec<f64>,
}

pub const FVEC_MAGIC: &[u8; 4] = b"FVEC";
pub const FVEC_VERSION: u8 = 1;

/// Writes descriptors as little-endian f32 records; all must share one `D`.
pub fn write_fvec<W: Write>(mut out: W, descriptors: &[ClipDescriptor]) -> Result<()> {
    let d = descriptors.first().map_or(0, |c| c.vector.len());
    if let Some(bad) = descriptors.iter().find(|c| c.vector.len() != d) {
        return Err(Error::shape(format!(
            "descriptor `{}` has dimension {}, expected {d}",
            bad.clip_id,
            bad.vector.len()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(FVEC_MAGIC);
    buf.push(FVEC_VERSION);
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for c in descriptors {
        buf.extend_from_slice(&(c.clip_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(c.clip_id.as_bytes());
        buf.extend_from_slice(&c.identity.to_le_bytes());
        buf.extend_from_slice(&c.camera.to_le_bytes());
        for &v in &c.vector {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<fvec stream>", e))
}

pub fn read_fvec<R: Read>(mut input: R) -> Result<Vec<ClipDescriptor>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<fvec stream>", e))?;
    let bad = |d: &str| Error::format("FVEC", d.to_string());
    if bytes.len() < 9 || &bytes[..4] != FVEC_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != FVEC_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |pos: usize| -> Result<u32> {
        bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated record"))
    };
    let d = u32_at(5)? as usize;
    let mut pos = 9;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let n = u32_at(pos)? as usize;
        pos += 4;
        let id_bytes = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated clip id"))?;
        let clip_id = String::from_utf8(id_bytes.to_vec()).map_err(|_| bad("clip id is not UTF-8"))?;
        pos += n;
        let identity = u32_at(pos)?;
        let camera = u32_at(pos + 4)?;
        pos += 8;
        let mut vector = Vec::with_capacity(d);
        for _ in 0..d {
            vector.push(f32::from_bits(u32_at(pos)?) as f64);
            pos += 4;
        }
        out.push(ClipDescriptor {
            clip_id,
            identity,
            camera,
            vector,
        });
    }
    Ok(out)
}
