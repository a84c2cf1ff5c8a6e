mod common;

use common::*;
use flowreid::aggregation::{ReferenceMode, WeightMode};
use flowreid::backbone::BackboneConfig;
use flowreid::data::{ClipRecord, Dataset, Split};
use flowreid::image::RgbImage;
use flowreid::optflow::{FlowClip, FlowField};
use flowreid::tensor::gradcheck::{check_params, DEFAULT_STEP};
use flowreid::tensor::{Tape, Tensor};
use flowreid::training::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(mode: AttentionMode, aggregation: AggregationMode) -> ModelConfig {
    ModelConfig {
        mode,
        aggregation,
        backbone: BackboneConfig {
            in_channels: 3,
            stage_channels: vec![4, 4, 4],
            inject_stage: 2,
            descriptor_dim: 8,
            squeeze_excitation: false,
        },
        num_identities: 3,
        ..ModelConfig::default()
    }
}

fn random_input(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> ClipInput {
    ClipInput { frames: random(rng, &[t, 3, h, w]), flows: random(rng, &[t, 2, h, w]) }
}

fn repeated(input: &ClipInput, t: usize) -> ClipInput {
    let take = |x: &Tensor| {
        let per = x.len() / x.shape()[0];
        let mut shape = x.shape().to_vec();
        shape[0] = t;
        Tensor::new(&shape, x.data()[..per].repeat(t)).unwrap()
    };
    ClipInput { frames: take(&input.frames), flows: take(&input.flows) }
}

const ALL_MODES: [(AttentionMode, AggregationMode); 6] = [
    (AttentionMode::Mutual, AggregationMode::Weighted),
    (AttentionMode::Mutual, AggregationMode::Average),
    (AttentionMode::Gated, AggregationMode::Average),
    (AttentionMode::Gated, AggregationMode::TemporalAttention),
    (AttentionMode::None, AggregationMode::Average),
    (AttentionMode::None, AggregationMode::Weighted),
];

#[test]
fn mutual_mode_shapes_on_a_full_batch() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs: Vec<ClipInput> = (0..32).map(|_| random_input(&mut rng, 4, 64, 32)).collect();
    let descs = model.describe_all(&inputs).unwrap();
    assert_eq!(descs.len(), 32);
    assert!(descs.iter().all(|d| d.len() == 128));
    let mut tape = Tape::new();
    let stacked = tape.constant(Tensor::new(&[32, 128], descs.concat()).unwrap());
    let logits = model.logits(&mut tape, stacked).unwrap();
    assert_eq!(tape.shape(logits), &[32, 16]);
}

#[test]
fn repeated_frames_give_the_single_frame_descriptor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random_input(&mut rng, 1, 8, 8);
    for (mode, agg) in ALL_MODES {
        for streams in [1, 2] {
            let cfg = ModelConfig { streams, ..micro(mode, agg) };
            let model = Model::new(cfg, 1).unwrap();
            let single = model.describe(&input).unwrap();
            for t in [2, 4, 7] {
                assert_eq!(model.describe(&repeated(&input, t)).unwrap(), single, "{mode}+{agg} T={t}");
            }
        }
    }
}

#[test]
fn gated_with_compensated_half_gate_equals_no_attention() {
    let none = Model::new(micro(AttentionMode::None, AggregationMode::Average), 2).unwrap();
    let mut gated = Model::new(micro(AttentionMode::Gated, AggregationMode::Average), 3).unwrap();
    for (_, p) in none.store.iter() {
        let id = gated.store.id(&p.name).expect("shared appearance parameter");
        gated.store.get_mut(id).value = p.value.clone();
    }
    // zero flow -> zero flow-CNN features -> a = 1/2; doubling the next
    // stage's weights undoes the halving exactly
    let next = gated.app.stages[2].weight;
    let w = gated.store.get(next).value.clone();
    gated.store.get_mut(next).value = Tensor::new(w.shape(), w.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut input = random_input(&mut rng, 3, 8, 8);
    input.flows = Tensor::zeros(&[3, 2, 8, 8]);
    assert_eq!(gated.describe(&input).unwrap(), none.describe(&input).unwrap());
    let (_, att) = gated.describe_with_attention(&input).unwrap();
    assert!(att.unwrap().data().iter().all(|&a| a == 0.5));
}

#[test]
fn stream_parameters_are_disjoint_and_train_independently() {
    let mut model = Model::new(micro(AttentionMode::Mutual, AggregationMode::Weighted), 4).unwrap();
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let app: Vec<&String> = names.iter().filter(|n| n.starts_with("app.")).collect();
    let flow: Vec<&String> = names.iter().filter(|n| n.starts_with("flow.")).collect();
    assert_eq!(app.len(), flow.len());
    assert!(!app.is_empty());
    let w1 = |m: &Model, s: &str| m.store.get(m.store.id(s).unwrap()).value.clone();
    assert_ne!(w1(&model, "app.stage2.weight"), w1(&model, "flow.stage2.weight"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Batch { inputs: (0..4).map(|_| random_input(&mut rng, 2, 8, 8)).collect(), labels: vec![0, 0, 1, 1] };
    let cfg = TrainConfig { p: 2, k: 2, ..TrainConfig::default() };
    compute_gradients(&mut model, &batch, &cfg).unwrap();
    let before_app = w1(&model, "app.stage3.weight");
    let before_flow = w1(&model, "flow.stage3.weight");
    let mut adam = Adam::new(&model.store, 1e-2, 0.9, 0.999, 1e-8);
    adam.step(&mut model.store);
    let (da, df) = (w1(&model, "app.stage3.weight"), w1(&model, "flow.stage3.weight"));
    assert_ne!(da, before_app);
    assert_ne!(df, before_flow);
    assert_ne!(da, df);
}

/// Cross-entropy on one clip's logits plus a contraction of its descriptor.
fn clip_objective<'a>(model: &Model, tape: &mut Tape<'a>, store: &'a flowreid::ParamStore, input: &ClipInput) -> flowreid::Result<flowreid::Var> {
    let out = model.forward_clip_with(store, tape, input)?;
    let d = model.config.backbone.descriptor_dim;
    let row = tape.reshape(out.descriptor, &[1, d])?;
    let logits = model.logits_with(store, tape, row)?;
    let ce = tape.softmax_cross_entropy(logits, &[1])?;
    let extra = weighted_sum(tape, out.descriptor)?;
    tape.add(ce, extra)
}

#[test]
fn full_pipeline_gradient_check_on_micro_configs() {
    for (mode, agg) in [
        (AttentionMode::Mutual, AggregationMode::Weighted),
        (AttentionMode::Gated, AggregationMode::Average),
        (AttentionMode::None, AggregationMode::TemporalAttention),
    ] {
        let mut checked = false;
        for seed in 0..20u64 {
            let mut model = Model::new(micro(mode, agg), seed).unwrap();
            // keep every ReLU clear of its kink for the perturbation
            for (id, p) in model.store.iter().map(|(i, p)| (i, p.clone())).collect::<Vec<_>>() {
                if p.name.ends_with("bias") && p.name.contains("stage") {
                    model.store.get_mut(id).value = Tensor::full(p.value.shape(), 0.05);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let input = random_input(&mut rng, 2, 8, 8);
            let report = check_params(&model.store, DEFAULT_STEP, 1, |tape, store| clip_objective(&model, tape, store, &input)).unwrap();
            if !report.is_smooth(DEFAULT_STEP, 10.0) {
                continue;
            }
            assert!(report.max_rel_error < 1e-4, "{mode}+{agg}: {report:?}");
            assert!(report.checked > 200);
            checked = true;
            break;
        }
        assert!(checked, "{mode}+{agg}: no smooth draw");
    }
}

#[test]
fn uniform_logits_cost_ln_ten() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 10]));
    let l = id_loss(&mut tape, z, &[0, 4, 9]).unwrap();
    assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-15);
    let confident = tape.constant(Tensor::from_fn(&[1, 3], |i| if i == 2 { 60.0 } else { 0.0 }));
    let l = id_loss(&mut tape, confident, &[2]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-20);
}

fn triplet(x: Tensor, labels: &[usize], margin: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let l = triplet_loss(&mut tape, v, labels, margin).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn triplet_closed_forms() {
    // a = p at 0, n at m + 1 on the line
    let x = Tensor::new(&[4, 1], vec![0.0, 0.0, 1.3, 1.3]).unwrap();
    assert_eq!(triplet(x, &[0, 0, 1, 1], 0.3), 0.0);
    // every distance equal: each anchor costs exactly the margin
    let x = Tensor::new(&[4, 3], vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0]).unwrap();
    assert!((triplet(x, &[0, 0, 1, 1], 0.3) - 0.3).abs() < 1e-12);
}

#[test]
fn triplet_matches_exhaustive_triplet_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        // every label appears at least twice and there are at least two labels
        let classes = rng.gen_range(2..5);
        let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
        labels.extend((0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..classes)));
        labels.shuffle(&mut rng);
        let n = labels.len();
        let d = rng.gen_range(1..4);
        let x = random(&mut rng, &[n, d]);
        let got = triplet(x.clone(), &labels, 0.3);
        let expect = triplet_scan(&x, &labels, 0.3);
        assert!((got - expect).abs() <= 1e-10, "{got} vs {expect}");
        assert!(got >= 0.0);
    }
}

fn solid(rgb: [u8; 3], h: usize, w: usize) -> RgbImage {
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

/// Identities differ only by colour; each clip has a small moving bar.
fn toy_dataset(identities: u32) -> Dataset {
    let (h, w) = (16, 8);
    let colours = [[220, 30, 30], [30, 30, 220], [30, 200, 30], [200, 200, 30]];
    let mut clips = Vec::new();
    for id in 0..identities {
        for k in 0..4u32 {
            let frames: Vec<RgbImage> = (0..6)
                .map(|t| {
                    let mut img = solid([90, 90, 90], h, w);
                    for y in 3..13 {
                        for x in 2..6 {
                            img.set_pixel((x + (t + k as usize) % 2) % w, y, colours[id as usize % 4]);
                        }
                    }
                    img
                })
                .collect();
            let flows = FlowClip { fields: (0..6).map(|_| FlowField::constant(w, h, 0.5, 0.0)).collect() };
            clips.push(ClipRecord {
                clip_id: format!("id{id:03}_c{}_{k:02}", k % 2),
                identity: id,
                camera: k % 2,
                split: Split::Train,
                frames,
                flows: Some(flows),
                gt_flows: None,
                masks: None,
            });
        }
    }
    Dataset { seed: 0, height: h, width: w, clips }
}

fn toy_configs(lr: f64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        num_identities: 2,
        backbone: BackboneConfig { stage_channels: vec![4, 8, 8], descriptor_dim: 8, inject_stage: 2, ..BackboneConfig::default() },
        ..ModelConfig::default()
    };
    let train = TrainConfig { p: 2, k: 2, lr, epochs: 5, seed: 11, augment: false, ..TrainConfig::default() };
    (model, train)
}

#[test]
fn toy_id_loss_decreases_monotonically() {
    let ds = toy_dataset(2);
    let (mc, tc) = toy_configs(1e-2);
    let mut model = Model::new(mc, tc.seed).unwrap();
    let log = train(&mut model, &ds, &tc, |_| Ok(())).unwrap();
    let ids: Vec<f64> = log.iter().map(|m| m.id_loss).collect();
    assert!(ids.windows(2).all(|w| w[1] < w[0]), "{ids:?}");
    assert!(log.iter().all(|m| m.id_loss >= 0.0 && m.triplet_loss >= 0.0));
}

#[test]
fn training_is_deterministic_and_zero_lr_is_a_no_op() {
    let ds = toy_dataset(2);
    let (mc, tc) = toy_configs(1e-2);
    let run = || {
        let mut model = Model::new(mc.clone(), tc.seed).unwrap();
        let log = train(&mut model, &ds, &tc, |_| Ok(())).unwrap();
        let rows: Vec<String> = log.iter().map(|m| format!("{},{:e},{:e}", m.epoch, m.id_loss, m.triplet_loss)).collect();
        (rows, model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    for ((_, p), (_, q)) in sa.iter().zip(sb.iter()) {
        assert_eq!(p.value, q.value);
    }

    let (mc, tc) = toy_configs(0.0);
    let mut model = Model::new(mc, tc.seed).unwrap();
    let before = model.store.clone();
    train(&mut model, &ds, &tc, |_| Ok(())).unwrap();
    for ((_, p), (_, q)) in before.iter().zip(model.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn a_single_identity_cannot_form_a_batch() {
    let ds = toy_dataset(1);
    let cfg = TrainConfig { p: 2, k: 2, ..TrainConfig::default() };
    assert!(PkSampler::new(&ds, Split::Train, &cfg).is_err());
    assert!(TrainConfig { p: 1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { k: 1, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn pk_batches_hold_p_identities_with_k_clips_each() {
    let ds = toy_dataset(4);
    let cfg = TrainConfig { p: 2, k: 3, ..TrainConfig::default() };
    let sampler = PkSampler::new(&ds, Split::Train, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = sampler.epoch_plan(&cfg, &mut rng);
    assert_eq!(plan.len(), sampler.batches_per_epoch(&cfg));
    for batch in &plan {
        assert_eq!(batch.len(), 6);
        let mut labels: Vec<usize> = batch.iter().map(|(l, _)| *l).collect();
        labels.dedup();
        assert_eq!(labels.len(), 2);
        for (l, clip) in batch {
            assert_eq!(sampler.identity(*l), clip.identity);
        }
    }
}

#[test]
fn horizontal_flip_mirrors_frames_and_negates_u() {
    
    let ds = toy_dataset(1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut clip = ds.clips[0].clone();
    let mut f = FlowField::zeros(8, 16);
    f.u[3] = 1.5;
    f.v[3] = -0.5;
    clip.flows = Some(FlowClip { fields: vec![f; 6] });
    let s = clip.sample(2, flowreid::data::Sampling::EvenlySpaced, &mut rng).unwrap();
    let mut flipped = s.clone();
    augment_clip(&mut flipped, Augmentation { flip: true, dx: 0, dy: 0 });
    let (a, b) = (&s.frames.frames[0], &flipped.frames.frames[0]);
    for y in 0..16 {
        for x in 0..8 {
            assert_eq!(a.pixel(x, y), b.pixel(7 - x, y));
        }
    }
    let g = &flipped.flows.fields[0];
    assert_eq!((g.u[4], g.v[4]), (-1.5, -0.5));
    // flipping twice restores the clip
    augment_clip(&mut flipped, Augmentation { flip: true, dx: 0, dy: 0 });
    assert_eq!(flipped.frames.frames, s.frames.frames);
    assert_eq!(flipped.flows, s.flows);
}

#[test]
fn config_modes_parse_and_validate() {
    assert_eq!("mutual".parse::<AttentionMode>().unwrap(), AttentionMode::Mutual);
    assert_eq!("tattn".parse::<AggregationMode>().unwrap(), AggregationMode::TemporalAttention);
    assert!("bogus".parse::<AttentionMode>().is_err());
    let cfg = ModelConfig { streams: 3, ..ModelConfig::default() };
    assert!(cfg.validate().is_err());
    let cfg = ModelConfig { reference: ReferenceMode::ArgmaxFrame, weights: WeightMode::Raw, ..micro(AttentionMode::Mutual, AggregationMode::Weighted) };
    let model = Model::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert_eq!(model.describe(&random_input(&mut rng, 3, 8, 8)).unwrap().len(), 8);
}
