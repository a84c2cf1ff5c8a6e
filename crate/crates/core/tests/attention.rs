mod common;

use common::*;
use flowreid::attention::*;
use flowreid::tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn heads(channels: usize, seed: u64) -> (ParamStore, MutualAttention) {
    let mut store = ParamStore::new();
    let ma = MutualAttention::new(&mut store, channels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, ma)
}

fn zero(store: &mut ParamStore, id: flowreid::tensor::ParamId) {
    let shape = store.get(id).value.shape().to_vec();
    store.get_mut(id).value = Tensor::zeros(&shape);
}

/// Scalar-loop `M` for `[T, C, I, J]` inputs.
fn map_oracle(store: &ParamStore, ma: &MutualAttention, phi: &Tensor, f: &Tensor) -> Vec<f64> {
    let [t, c, i, j]: [usize; 4] = phi.shape().try_into().unwrap();
    let proj = |head: &ProjectionHead, x: &Tensor, ti: usize, p: usize| {
        let w = store.get(head.weight).value.data();
        let b = store.get(head.bias).value.data()[0];
        let v: f64 = b + (0..c).map(|ci| w[ci] * x.data()[(ti * c + ci) * i * j + p]).sum::<f64>();
        v.max(0.0)
    };
    let mut out = Vec::new();
    for ti in 0..t {
        for p in 0..i * j {
            out.push(sigmoid(proj(&ma.app, phi, ti, p) * proj(&ma.flow, f, ti, p)));
        }
    }
    out
}

fn run_map(store: &ParamStore, ma: &MutualAttention, phi: &Tensor, f: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (p, q) = (tape.constant(phi.clone()), tape.constant(f.clone()));
    let m = ma.map(&mut tape, store, p, q).unwrap();
    tape.value(m).clone()
}

#[test]
fn zero_projection_gives_exactly_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let phi = random(&mut rng, &[2, 5, 3, 2]);
    let f = random(&mut rng, &[2, 5, 3, 2]);
    for which in 0..2 {
        let (mut store, ma) = heads(5, which);
        let head = if which == 0 { &ma.app } else { &ma.flow };
        zero(&mut store, head.weight);
        zero(&mut store, head.bias);
        let m = run_map(&store, &ma, &phi, &f);
        assert_eq!(m.shape(), &[2, 1, 3, 2]);
        assert!(m.data().iter().all(|&v| v == 0.5));

        let mut tape = Tape::new();
        let (p, q, mv) = (tape.constant(phi.clone()), tape.constant(f.clone()), tape.constant(m));
        let (a, b) = apply_mutual_attention(&mut tape, p, q, mv).unwrap();
        for (out, src) in [(a, &phi), (b, &f)] {
            let half: Vec<f64> = src.data().iter().map(|v| v * 0.5).collect();
            assert_eq!(tape.value(out).data(), &half[..]);
        }
    }
}

#[test]
fn projections_two_and_three_give_sigmoid_six() {
    let (mut store, ma) = heads(1, 1);
    zero(&mut store, ma.app.bias);
    zero(&mut store, ma.flow.bias);
    store.get_mut(ma.app.weight).value = Tensor::full(&[1, 1, 1, 1], 2.0);
    store.get_mut(ma.flow.weight).value = Tensor::full(&[1, 1, 1, 1], 3.0);
    let one = Tensor::full(&[1, 1, 1, 1], 1.0);
    let m = run_map(&store, &ma, &one, &one);
    assert!((m.data()[0] - 0.997_527_376_843_365_2).abs() < 1e-15);
}

#[test]
fn map_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..10 {
        let (store, ma) = heads(4, seed);
        let phi = random(&mut rng, &[3, 4, 2, 3]);
        let f = random(&mut rng, &[3, 4, 2, 3]);
        assert_close(run_map(&store, &ma, &phi, &f).data(), &map_oracle(&store, &ma, &phi, &f), 1e-10);
    }
}

#[test]
fn apply_matches_loop_oracle_and_unit_map_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi = random(&mut rng, &[2, 3, 2, 2]);
    let m = Tensor::from_fn(&[2, 1, 2, 2], |i| 0.1 + 0.1 * i as f64);
    let mut tape = Tape::new();
    let (p, mv) = (tape.constant(phi.clone()), tape.constant(m.clone()));
    let (a, b) = apply_mutual_attention(&mut tape, p, p, mv).unwrap();
    let mut oracle = phi.data().to_vec();
    for t in 0..2 {
        for c in 0..3 {
            for k in 0..4 {
                oracle[(t * 3 + c) * 4 + k] *= m.data()[t * 4 + k];
            }
        }
    }
    assert_close(tape.value(a).data(), &oracle, 1e-15);
    assert_eq!(tape.value(a).data(), tape.value(b).data());

    let ones = tape.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
    let (a, _) = apply_mutual_attention(&mut tape, p, p, ones).unwrap();
    assert_eq!(tape.value(a).data(), phi.data());
}

#[test]
fn shape_mismatches_are_rejected() {
    let (store, ma) = heads(3, 4);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1, 3, 2, 1]));
    assert!(ma.map(&mut tape, &store, a, b).is_err());
    let bad = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(apply_mutual_attention(&mut tape, a, a, bad).is_err());
    let g = tape.constant(Tensor::zeros(&[1, 4, 3, 3]));
    assert!(gated_attention(&mut tape, a, g).is_err());
}

#[test]
fn gated_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let psi = random(&mut rng, &[2, 3, 2, 2]);
    let mut tape = Tape::new();
    let p = tape.constant(psi.clone());
    let z = tape.constant(Tensor::zeros(&[2, 6, 2, 2]));
    let (g, a) = gated_attention(&mut tape, p, z).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
    let half: Vec<f64> = psi.data().iter().map(|v| v * 0.5).collect();
    assert_eq!(tape.value(g).data(), &half[..]);

    let k = tape.constant(Tensor::full(&[2, 6, 2, 2], 1.3));
    let (_, a) = gated_attention(&mut tape, p, k).unwrap();
    for v in tape.value(a).data() {
        assert!((v - sigmoid(1.3)).abs() < 1e-15);
    }

    let ff = random(&mut rng, &[2, 4, 2, 2]);
    let fv = tape.constant(ff.clone());
    let (g, _) = gated_attention(&mut tape, p, fv).unwrap();
    let mut oracle = psi.data().to_vec();
    for t in 0..2 {
        for px in 0..4 {
            let mean = (0..4).map(|c| ff.data()[(t * 4 + c) * 4 + px]).sum::<f64>() / 4.0;
            for c in 0..3 {
                oracle[(t * 3 + c) * 4 + px] *= sigmoid(mean);
            }
        }
    }
    assert_close(tape.value(g).data(), &oracle, 1e-12);
}

#[test]
fn flow_cnn_zero_and_static_inputs() {
    let mut store = ParamStore::new();
    let cnn = ShallowFlowCnn::new(&mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 2, 64, 32]));
    let out = cnn.forward(&mut tape, &store, z, 4, 2).unwrap();
    assert_eq!(tape.shape(out), &[3, 32, 4, 2]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

    // the same field every frame gives time-constant features
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let field = random(&mut rng, &[1, 2, 16, 8]);
    let clip = Tensor::new(&[3, 2, 16, 8], field.data().repeat(3)).unwrap();
    let x = tape.constant(clip);
    let out = cnn.forward(&mut tape, &store, x, 4, 2).unwrap();
    let v = tape.value(out).data();
    let per = v.len() / 3;
    assert_eq!(&v[..per], &v[per..2 * per]);
    assert_eq!(&v[..per], &v[2 * per..]);

    let bad = tape.constant(Tensor::zeros(&[3, 3, 16, 8]));
    assert!(cnn.forward(&mut tape, &store, bad, 4, 2).is_err());
}

#[test]
fn flow_cnn_responds_where_the_sprite_moves() {
    use flowreid::data::{generate, GeneratorConfig};
    use flowreid::training::ClipInput;
    let cfg = GeneratorConfig { num_identities: 2, clips_per_identity: 1, occlusion_prob: 0.0, ..GeneratorConfig::default() };
    let ds = generate(&cfg).unwrap();
    let mut store = ParamStore::new();
    let cnn = ShallowFlowCnn::new(&mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let (mut hits, mut frames) = (0, 0);
    for clip in &ds.clips {
        // ground-truth flow: zero on the background by construction
        let mut s = clip.clone();
        s.flows = clip.gt_flows.clone();
        let sampled = s.sample(4, flowreid::data::Sampling::EvenlySpaced, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let input = ClipInput::from_sampled(&sampled, 16.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input.flows.clone());
        let out = cnn.forward(&mut tape, &store, x, 8, 4).unwrap();
        let v = tape.value(out);
        for (t, m) in sampled.masks.unwrap().iter().enumerate() {
            let energy = |cell: usize| (0..32).map(|c| v.data()[(t * 32 + c) * 32 + cell]).sum::<f64>();
            let best = (0..32).max_by(|&a, &b| energy(a).total_cmp(&energy(b))).unwrap();
            let (ci, cj) = (best / 4, best % 4);
            let covered = (ci * 8..ci * 8 + 8).any(|y| (cj * 8..cj * 8 + 8).any(|x| m.data[y * m.width + x] > 0));
            hits += covered as usize;
            frames += 1;
        }
    }
    assert_eq!(hits, frames, "argmax cell off the sprite in {} of {frames} frames", frames - hits);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn map_is_in_open_unit_interval_and_symmetric(seed in 0u64..1000, scale in 0.1f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Tensor::from_fn(&[2, 3, 2, 2], |_| scale * rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let f = Tensor::from_fn(&[2, 3, 2, 2], |_| scale * rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let (store, ma) = heads(3, seed);
        let m = run_map(&store, &ma, &phi, &f);
        prop_assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
        prop_assert!(m.data().iter().all(|&v| v >= 0.5));

        // swapping the streams together with their heads leaves M unchanged
        let swapped = MutualAttention { app: ma.flow.clone(), flow: ma.app.clone() };
        let m2 = run_map(&store, &swapped, &f, &phi);
        prop_assert_eq!(m.data(), m2.data());
    }

    #[test]
    fn map_is_monotone_in_positive_projections(seed in 0u64..1000, bump in 0.0f64..2.0) {
        let (mut store, ma) = heads(2, seed);
        store.get_mut(ma.app.weight).value = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Tensor::from_fn(&[1, 2, 2, 2], |_| rand::Rng::gen_range(&mut rng, 0.0..1.0));
        let f = Tensor::from_fn(&[1, 2, 2, 2], |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let base = run_map(&store, &ma, &phi, &f);
        let mut more = phi.clone();
        for v in &mut more.data_mut()[..4] {
            *v += bump;
        }
        let up = run_map(&store, &ma, &more, &f);
        for (a, b) in base.data().iter().zip(up.data()) {
            prop_assert!(b >= a);
        }
    }
}
