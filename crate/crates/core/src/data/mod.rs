//! Video clips, the synthetic benchmark, manifests and clip sampling.

mod manifest;
mod sampling;
pub mod synth;

pub use manifest::{
    ingest_frame_dirs, load_dataset, read_manifest, write_dataset, write_manifest, DatasetManifest,
    ManifestRecord, MANIFEST_FILE,
};
pub use sampling::{frame_indices, Sampling};
pub use synth::{generate, translated_texture_pair, GeneratorConfig, SpriteIdentity};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Gray8, RgbImage};
use crate::optflow::{clip_flow, FlowClip, FlowParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One tracklet with everything known about it.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub clip_id: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
    pub frames: Vec<RgbImage>,
    /// Estimated flow (one field per frame), once computed.
    pub flows: Option<FlowClip>,
    /// Exact flow from the generator.
    pub gt_flows: Option<FlowClip>,
    pub masks: Option<Vec<Gray8>>,
}

/// Ordered frames of one identity seen by one camera.
#[derive(Clone, Debug)]
pub struct FrameClip {
    pub frames: Vec<RgbImage>,
    pub identity: u32,
    pub camera: u32,
}

/// A window of a tracklet ready for the network.
#[derive(Clone, Debug)]
pub struct SampledClip {
    pub clip_id: String,
    pub frames: FrameClip,
    pub flows: FlowClip,
    pub masks: Option<Vec<Gray8>>,
    pub indices: Vec<usize>,
}

/// An in-memory collection of clips sharing one frame extent.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ClipRecord>,
}

impl Dataset {
    pub fn clip(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    /// Estimates flow for every clip lacking it.
    pub fn compute_flows(&mut self, params: &FlowParams) -> Result<()> {
        for clip in self.clips.iter_mut().filter(|c| c.flows.is_none()) {
            clip.flows = Some(clip_flow(&clip.frames, params)?);
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Samples `seq_len` frames (with their flow and masks) from a clip.
    pub fn load_clip(
        &self,
        clip_id: &str,
        seq_len: usize,
        sampling: Sampling,
        rng: &mut impl Rng,
    ) -> Result<SampledClip> {
        let clip = self
            .clip(clip_id)
            .ok_or_else(|| Error::invalid(format!("unknown clip `{clip_id}`")))?;
        clip.sample(seq_len, sampling, rng)
    }
}

impl ClipRecord {
    pub fn sample(&self, seq_len: usize, sampling: Sampling, rng: &mut impl Rng) -> Result<SampledClip> {
        let flows = self.flows.as_ref().ok_or_else(|| {
            Error::invalid(format!("clip `{}` has no estimated flow", self.clip_id))
        })?;
        let indices = frame_indices(self.frames.len(), seq_len, sampling, rng)
            .map_err(|e| Error::invalid(format!("clip `{}`: {e}", self.clip_id)))?;
        Ok(SampledClip {
            clip_id: self.clip_id.clone(),
            frames: FrameClip {
                frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
                identity: self.identity,
                camera: self.camera,
            },
            flows: FlowClip {
                fields: indices.iter().map(|&i| flows.fields[i].clone()).collect(),
            },
            masks: self
                .masks
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
            indices,
        })
    }
}
