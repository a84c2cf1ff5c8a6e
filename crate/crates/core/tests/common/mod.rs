#![allow(dead_code)]

use flowreid::tensor::Tensor;
use flowreid::aggregation::ClipDescriptor;
use flowreid::evaluation::Metric;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Plain nested-loop cross-correlation with zero padding.
pub fn conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [t, c, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [o, _, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[t, o, oh, ow]);
    for ti in 0..t {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ti * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((ti * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect()).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `[T, C, H, W] -> [T, C]` spatial means.
pub fn spatial_mean(x: &Tensor) -> Vec<Vec<f64>> {
    let [t, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    (0..t)
        .map(|ti| {
            (0..c)
                .map(|ci| {
                    let base = (ti * c + ci) * h * w;
                    x.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64
                })
                .collect()
        })
        .collect()
}

/// `W x + b` for `W: [out, in]`.
pub fn fc(w: &Tensor, b: &[f64], x: &[f64]) -> Vec<f64> {
    let [o, i]: [usize; 2] = w.shape().try_into().unwrap();
    (0..o)
        .map(|r| b[r] + (0..i).map(|k| w.data()[r * i + k] * x[k]).sum::<f64>())
        .collect()
}

/// Runs `f` on `instances` random draws and asserts every smooth draw passes.
/// Returns the worst relative error seen.
pub fn gradcheck_many(
    seed: u64,
    shapes: &[&[usize]],
    instances: usize,
    f: impl for<'t> Fn(&mut flowreid::Tape<'t>, &[flowreid::Var]) -> flowreid::Result<flowreid::Var>,
) -> f64 {
    use flowreid::tensor::gradcheck::{check_inputs, DEFAULT_STEP};
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut passed, mut draws, mut worst) = (0, 0, 0.0f64);
    while passed < instances {
        draws += 1;
        assert!(draws < instances * 5, "too many draws land on kinks");
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let r = check_inputs(&inputs, DEFAULT_STEP, &f).unwrap();
        if !r.is_smooth(DEFAULT_STEP, 10.0) {
            continue;
        }
        assert!(r.max_rel_error < 1e-4, "rel error {} at {}", r.max_rel_error, r.worst);
        worst = worst.max(r.max_rel_error);
        passed += 1;
    }
    worst
}

/// Contracts any output with fixed pseudo-random weights into a scalar.
pub fn weighted_sum<'t>(tape: &mut flowreid::Tape<'t>, y: flowreid::Var) -> flowreid::Result<flowreid::Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 97) as f64) / 97.0 - 0.3);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum_all(p)
}

pub fn desc(id: u32, cam: u32, v: Vec<f64>) -> ClipDescriptor {
    ClipDescriptor { clip_id: format!("id{id:03}_c{cam}"), identity: id, camera: cam, vector: v }
}

/// Counts instead of sorts: the rank of gallery item `g` is the number of
/// eligible items strictly ahead of it.
pub fn eval_oracle(q: &[ClipDescriptor], g: &[ClipDescriptor], metric: Metric) -> (Vec<f64>, f64, usize) {
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    let mut excluded = 0;
    for qi in q {
        let eligible: Vec<usize> = (0..g.len())
            .filter(|&j| !(g[j].identity == qi.identity && g[j].camera == qi.camera))
            .collect();
        let d: Vec<f64> = g.iter().map(|gj| {
            let mut s = 0.0;
            match metric {
                Metric::Euclidean => {
                    for k in 0..gj.vector.len() {
                        s += (qi.vector[k] - gj.vector[k]).powi(2);
                    }
                    s.sqrt()
                }
                Metric::Cosine => {
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for k in 0..gj.vector.len() {
                        dot += qi.vector[k] * gj.vector[k];
                        na += qi.vector[k] * qi.vector[k];
                        nb += gj.vector[k] * gj.vector[k];
                    }
                    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 { 1.0 } else { 1.0 - dot / (na.sqrt() * nb.sqrt()) }
                }
            }
        }).collect();
        let rank = |j: usize| eligible.iter().filter(|&&o| d[o] < d[j] || (d[o] == d[j] && o < j)).count();
        let mut pos: Vec<usize> = eligible.iter().filter(|&&j| g[j].identity == qi.identity).map(|&j| rank(j)).collect();
        if pos.is_empty() {
            excluded += 1;
            continue;
        }
        pos.sort_unstable();
        first_hits.push(pos[0]);
        aps.push(pos.iter().enumerate().map(|(n, &r)| (n + 1) as f64 / (r + 1) as f64).sum::<f64>() / pos.len() as f64);
    }
    let cmc = (0..g.len())
        .map(|k| if first_hits.is_empty() { 0.0 } else { first_hits.iter().filter(|&&f| f <= k).count() as f64 / first_hits.len() as f64 })
        .collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (cmc, map, excluded)
}

pub fn random_config(rng: &mut ChaCha8Rng) -> (Vec<ClipDescriptor>, Vec<ClipDescriptor>) {
    let ids = rng.gen_range(1..5);
    let dim = rng.gen_range(1..4);
    // coarse integer coordinates produce plenty of exact ties
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|_| desc(rng.gen_range(0..ids), rng.gen_range(0..2), (0..dim).map(|_| rng.gen_range(-2..3) as f64).collect()))
            .collect::<Vec<_>>()
    };
    let nq = rng.gen_range(1..6);
    let ng = rng.gen_range(1..11);
    let q = make(nq, rng);
    let g = make(ng, rng);
    (q, g)
}

/// Batch-hard triplet loss by scanning every (anchor, positive, negative).
pub fn triplet_scan(x: &Tensor, labels: &[usize], margin: f64) -> f64 {
    let [n, d]: [usize; 2] = x.shape().try_into().unwrap();
    let dist = |a: usize, b: usize| (0..d).map(|k| (x.data()[a * d + k] - x.data()[b * d + k]).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let v = dist(a, p) - dist(a, q);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            total += (w + margin).max(0.0);
            anchors += 1;
        }
    }
    total / anchors as f64
}

/// Nested-loop sum, mean or max over `axes`, keeping reduced axes as 1.
pub fn reduce(x: &Tensor, op: flowreid::tensor::ReduceOp, axes: &[usize]) -> Tensor {
    use flowreid::tensor::ReduceOp;
    let shape = x.shape();
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let n_out: usize = out_shape.iter().product();
    let init = if op == ReduceOp::Max { f64::NEG_INFINITY } else { 0.0 };
    let mut acc = vec![init; n_out];
    let mut count = vec![0usize; n_out];
    for idx in 0..x.len() {
        let mut rem = idx;
        let mut coords = vec![0; shape.len()];
        for a in (0..shape.len()).rev() {
            coords[a] = rem % shape[a];
            rem /= shape[a];
        }
        let o = (0..shape.len()).fold(0, |o, a| o * out_shape[a] + if axes.contains(&a) { 0 } else { coords[a] });
        let v = x.data()[idx];
        if op == ReduceOp::Max {
            acc[o] = acc[o].max(v);
        } else {
            acc[o] += v;
        }
        count[o] += 1;
    }
    if op == ReduceOp::Mean {
        for (a, c) in acc.iter_mut().zip(&count) {
            *a /= *c as f64;
        }
    }
    Tensor::new(&out_shape, acc).unwrap()
}
