//! End-to-end runs: generate or load data, estimate flow, train, extract
//! descriptors and evaluate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::ClipDescriptor;
use crate::data::{generate, Dataset, GeneratorConfig, Sampling, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, Metric};
use crate::optflow::FlowParams;
use crate::tensor::Tensor;
use crate::training::{train, ClipInput, EpochMetrics, Model, ModelConfig, TrainConfig};

/// Synthetic benchmark with estimated flow for every clip.
pub fn prepare_dataset(generator: &GeneratorConfig, flow: &FlowParams) -> Result<Dataset> {
    let mut ds = generate(generator)?;
    ds.compute_flows(flow)?;
    Ok(ds)
}

/// Network inputs for every clip of `split`, sampled evenly with `seq_len`
/// frames. Clips shorter than `seq_len` are skipped and reported.
pub fn eval_inputs(ds: &Dataset, split: Split, seq_len: usize, flow_cap: f64) -> Result<(Vec<ClipInput>, Vec<ClipDescriptor>, Vec<String>)> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    // evenly spaced sampling draws nothing from the RNG
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for clip in ds.split(split) {
        if clip.frames.len() < seq_len {
            skipped.push(format!(
                "skipping `{}`: {} frames < {seq_len}",
                clip.clip_id,
                clip.frames.len()
            ));
            continue;
        }
        let s = clip.sample(seq_len, Sampling::EvenlySpaced, &mut rng)?;
        inputs.push(ClipInput::from_sampled(&s, flow_cap)?);
        labels.push(ClipDescriptor {
            clip_id: clip.clip_id.clone(),
            identity: clip.identity,
            camera: clip.camera,
            vector: Vec::new(),
        });
    }
    Ok((inputs, labels, skipped))
}

/// Descriptors for every clip of `split`.
pub fn extract(model: &Model, ds: &Dataset, split: Split, seq_len: usize) -> Result<Vec<ClipDescriptor>> {
    let (inputs, mut out, _) = eval_inputs(ds, split, seq_len, model.config.flow_cap)?;
    let vectors = model.describe_all(&inputs)?;
    for (d, v) in out.iter_mut().zip(vectors) {
        d.vector = v;
    }
    Ok(out)
}

/// Every test clip queries a gallery of all test clips; the evaluation
/// protocol drops same-identity same-camera entries, so only cross-camera
/// matches count.
pub fn query_gallery(descriptors: &[ClipDescriptor]) -> (Vec<ClipDescriptor>, Vec<ClipDescriptor>) {
    (descriptors.to_vec(), descriptors.to_vec())
}

pub fn evaluate_split(model: &Model, ds: &Dataset, seq_len: usize, metric: Metric) -> Result<EvalReport> {
    let descs = extract(model, ds, Split::Test, seq_len)?;
    if descs.is_empty() {
        return Err(Error::invalid("no test clips to evaluate"));
    }
    let (q, g) = query_gallery(&descs);
    evaluate(&q, &g, metric)
}

/// Number of training identities in `ds`.
pub fn train_identities(ds: &Dataset) -> usize {
    let mut ids: Vec<u32> = ds.split(Split::Train).map(|c| c.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

pub struct TrainedRun {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
}

/// Builds a model for `ds` and trains it.
pub fn train_model(
    ds: &Dataset,
    mut model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainedRun> {
    model_cfg.num_identities = train_identities(ds);
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    let log = train(&mut model, ds, train_cfg, on_epoch)?;
    Ok(TrainedRun { model, log })
}

/// Attention statistics over masked clips: `(mean inside, mean outside)`.
///
/// Maps are brought to frame resolution by nearest-neighbour upsampling.
pub fn attention_mask_means(model: &Model, ds: &Dataset, split: Split, seq_len: usize, max_clips: usize) -> Result<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clips: Vec<_> = ds
        .split(split)
        .filter(|c| c.masks.is_some() && c.frames.len() >= seq_len)
        .take(max_clips)
        .collect();
    let sampled = clips
        .iter()
        .map(|c| c.sample(seq_len, Sampling::EvenlySpaced, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let sums = sampled
        .par_iter()
        .map(|s| {
            let input = ClipInput::from_sampled(s, model.config.flow_cap)?;
            let (_, att) = model.describe_with_attention(&input)?;
            let att = att.ok_or_else(|| Error::invalid("model has no spatial attention"))?;
            let masks = s.masks.as_ref().expect("filtered on masks");
            Ok(mask_sums(&att, masks))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
    for (a, b, c, d) in sums {
        si += a;
        ni += b;
        so += c;
        no += d;
    }
    Ok((si / ni.max(1.0), so / no.max(1.0), clips.len()))
}

fn mask_sums(att: &Tensor, masks: &[crate::image::Gray8]) -> (f64, f64, f64, f64) {
    let [t, _, ai, aj] = att.shape().try_into().expect("[T, 1, I, J]");
    let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
    for (ti, m) in masks.iter().enumerate().take(t) {
        for y in 0..m.height {
            for x in 0..m.width {
                let v = att.data()[ti * ai * aj + (y * ai / m.height) * aj + x * aj / m.width];
                if m.data[y * m.width + x] > 0 {
                    si += v;
                    ni += 1.0;
                } else {
                    so += v;
                    no += 1.0;
                }
            }
        }
    }
    (si, ni, so, no)
}

/// Upsamples one frame of a `[T, 1, I, J]` map to `height x width`.
pub fn attention_frame(att: &Tensor, t: usize, height: usize, width: usize) -> Vec<f64> {
    let [_, _, ai, aj] = att.shape().try_into().expect("[T, 1, I, J]");
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(att.data()[t * ai * aj + (y * ai / height) * aj + x * aj / width]);
        }
    }
    out
}
