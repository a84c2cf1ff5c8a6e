//! Model composition and optimization with identity and triplet losses.
//!
//! A training step runs every clip of a `P x K` batch on its own tape (in
//! parallel), stacks the descriptors into a small head tape that computes
//! the losses, then pushes the descriptor gradients back through each clip
//! tape. Parameter gradients are summed in clip order, so results do not
//! depend on thread scheduling.

mod augment;
mod model;
mod optim;

pub use augment::{augment_clip, Augmentation};
pub use model::{AggregationMode, AttentionMode, ClipForward, ClipInput, Model, ModelConfig};
pub use optim::Adam;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClipRecord, Dataset, Sampling, Split};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seq_len: usize,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity.
    pub k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub margin: f64,
    pub lambda_id: f64,
    pub lambda_tri: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 4,
            p: 8,
            k: 4,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            margin: 0.3,
            lambda_id: 1.0,
            lambda_tri: 1.0,
            epochs: 200,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(format!(
                "batches need P >= 2 identities and K >= 2 clips each (got {}x{})",
                self.p, self.k
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer settings out of range"));
        }
        if !(self.margin >= 0.0) || !(self.lambda_id >= 0.0) || !(self.lambda_tri >= 0.0) {
            return Err(Error::invalid("loss settings must be non-negative"));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of `[B, N]` logits.
pub fn id_loss(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Batch-hard triplet loss over `[B, D]` descriptors with Euclidean distance.
pub fn triplet_loss(tape: &mut Tape<'_>, descriptors: Var, labels: &[usize], margin: f64) -> Result<Var> {
    tape.triplet_batch_hard(descriptors, labels, margin)
}

/// One `P x K` batch: clips with their class index.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<ClipInput>,
    pub labels: Vec<usize>,
}

/// Groups training clips by identity and draws `P x K` batches.
#[derive(Clone, Debug)]
pub struct PkSampler<'d> {
    by_label: Vec<Vec<&'d ClipRecord>>,
    identities: Vec<u32>,
}

impl<'d> PkSampler<'d> {
    pub fn new(dataset: &'d Dataset, split: Split, cfg: &TrainConfig) -> Result<Self> {
        let mut groups: BTreeMap<u32, Vec<&ClipRecord>> = BTreeMap::new();
        for clip in dataset.split(split) {
            groups.entry(clip.identity).or_default().push(clip);
        }
        if groups.len() < cfg.p {
            return Err(Error::invalid(format!(
                "a batch needs {} distinct identities, the {} split has {}",
                cfg.p,
                split.as_str(),
                groups.len()
            )));
        }
        if let Some(c) = groups.values().flatten().find(|c| c.flows.is_none()) {
            return Err(Error::invalid(format!("clip `{}` has no estimated flow", c.clip_id)));
        }
        Ok(PkSampler {
            identities: groups.keys().copied().collect(),
            by_label: groups.into_values().collect(),
        })
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Dataset identity of class index `label`.
    pub fn identity(&self, label: usize) -> u32 {
        self.identities[label]
    }

    pub fn batches_per_epoch(&self, cfg: &TrainConfig) -> usize {
        self.identities.len().div_ceil(cfg.p)
    }

    /// Identity class indices and clips for every batch of one epoch.
    pub fn epoch_plan(&self, cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<Vec<(usize, &'d ClipRecord)>> {
        let n = self.identities.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        (0..self.batches_per_epoch(cfg))
            .map(|b| {
                let mut batch = Vec::with_capacity(cfg.p * cfg.k);
                for j in 0..cfg.p {
                    let label = order[(b * cfg.p + j) % n];
                    let clips = &self.by_label[label];
                    let mut picks: Vec<usize> = (0..clips.len()).collect();
                    picks.shuffle(rng);
                    for i in 0..cfg.k {
                        batch.push((label, clips[picks[i % picks.len()]]));
                    }
                }
                batch
            })
            .collect()
    }

    /// Samples windows and augments them; each clip gets its own RNG stream
    /// so assembly can run in parallel.
    pub fn assemble(
        &self,
        plan: &[(usize, &ClipRecord)],
        cfg: &TrainConfig,
        flow_cap: f64,
        rng: &mut impl Rng,
    ) -> Result<Batch> {
        let seeds: Vec<u64> = plan.iter().map(|_| rng.gen()).collect();
        let inputs = plan
            .par_iter()
            .zip(&seeds)
            .map(|(&(_, clip), &seed)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let mut s = clip.sample(cfg.seq_len, Sampling::RandomContiguous, &mut r)?;
                if cfg.augment {
                    augment_clip(&mut s, Augmentation::random(&mut r));
                }
                ClipInput::from_sampled(&s, flow_cap)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            inputs,
            labels: plan.iter().map(|&(l, _)| l).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub id_loss: f64,
    pub triplet_loss: f64,
}

/// Computes losses and accumulates parameter gradients for one batch.
pub fn compute_gradients(model: &mut Model, batch: &Batch, cfg: &TrainConfig) -> Result<StepLosses> {
    let grads;
    let losses;
    {
        let m: &Model = model;
        let clip_tapes = batch
            .inputs
            .par_iter()
            .map(|input| {
                let mut tape = Tape::new();
                let out = m.forward_clip(&mut tape, input)?;
                Ok((tape, out.descriptor))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = m.config.backbone.descriptor_dim;
        let mut stacked = Vec::with_capacity(batch.inputs.len() * d);
        for (tape, v) in &clip_tapes {
            stacked.extend_from_slice(tape.value(*v).data());
        }
        let stacked = Tensor::new(&[batch.inputs.len(), d], stacked)?;

        let mut head = Tape::new();
        let desc = head.input(stacked);
        let logits = m.logits(&mut head, desc)?;
        let lid = id_loss(&mut head, logits, &batch.labels)?;
        let ltri = triplet_loss(&mut head, desc, &batch.labels, cfg.margin)?;
        let a = head.scale(lid, cfg.lambda_id);
        let b = head.scale(ltri, cfg.lambda_tri);
        let total = head.add(a, b)?;
        let (id_v, tri_v) = (head.value(lid).item()?, head.value(ltri).item()?);
        if !id_v.is_finite() || !tri_v.is_finite() {
            let mut notes: Vec<String> = head.diagnostics().to_vec();
            for (tape, _) in &clip_tapes {
                notes.extend(tape.diagnostics().iter().cloned());
            }
            return Err(Error::NonFinite(format!(
                "loss became non-finite (id {id_v}, triplet {tri_v}); diagnostics: [{}]",
                notes.join("; ")
            )));
        }
        losses = StepLosses {
            id_loss: id_v,
            triplet_loss: tri_v,
        };
        let hg = head.backward(total)?;
        let dgrad = hg.get(desc).cloned().unwrap_or_else(|| Tensor::zeros(&[batch.inputs.len(), d]));
        let mut all = hg.param_grads(&head);
        let per_clip = clip_tapes
            .par_iter()
            .enumerate()
            .map(|(i, (tape, v))| {
                let seed = Tensor::new(&[d], dgrad.row(i).to_vec())?;
                let g = tape.backward_from(*v, seed)?;
                Ok(g.param_grads(tape))
            })
            .collect::<Result<Vec<_>>>()?;
        for g in per_clip {
            all.extend(g);
        }
        grads = all;
    }
    model.store.zero_grads();
    for (id, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` is non-finite",
                model.store.get(*id).name
            )));
        }
        model.store.accumulate_grad(*id, g)?;
    }
    Ok(losses)
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,id_loss,triplet_loss,lr,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:e},{:.3}",
            self.epoch, self.id_loss, self.triplet_loss, self.lr, self.seconds
        )
    }
}

/// Optimizer and sampling state carried across epochs.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub sampler: PkSampler<'d>,
    pub adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(model: &Model, dataset: &'d Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sampler = PkSampler::new(dataset, Split::Train, &config)?;
        if sampler.num_identities() != model.config.num_identities {
            return Err(Error::invalid(format!(
                "model classifies {} identities, training split has {}",
                model.config.num_identities,
                sampler.num_identities()
            )));
        }
        let adam = Adam::new(&model.store, config.lr, config.beta1, config.beta2, config.eps);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7EA1),
            config,
            sampler,
            adam,
            epoch: 0,
        })
    }

    /// One pass over the training identities.
    pub fn train_epoch(&mut self, model: &mut Model) -> Result<EpochMetrics> {
        let start = Instant::now();
        let plan = self.sampler.epoch_plan(&self.config, &mut self.rng);
        let (mut id_sum, mut tri_sum) = (0.0, 0.0);
        for batch_plan in &plan {
            let batch = self
                .sampler
                .assemble(batch_plan, &self.config, model.config.flow_cap, &mut self.rng)?;
            let l = compute_gradients(model, &batch, &self.config)?;
            self.adam.step(&mut model.store);
            model.store.round_to_f32();
            id_sum += l.id_loss;
            tri_sum += l.triplet_loss;
        }
        self.epoch += 1;
        let n = plan.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            id_loss: id_sum / n,
            triplet_loss: tri_sum / n,
            lr: self.config.lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Runs `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut trainer = Trainer::new(model, dataset, config.clone())?;
    let mut out = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let m = trainer.train_epoch(model)?;
        on_epoch(&m)?;
        out.push(m);
    }
    Ok(out)
}
