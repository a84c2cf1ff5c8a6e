//! Spatial attention between the appearance and motion streams.
//!
//! [`MutualAttention`] projects each stream's stage features to one channel,
//! multiplies the rectified projections and squashes the product into a
//! map `M` in `(0, 1)` that scales *both* streams. The gated baseline instead
//! derives a map from a shallow flow CNN and scales only the image stream.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, ReduceOp, Tape, Tensor, Var};

/// Initial projection bias; keeps the rectified projections alive at the
/// start of training.
pub const PROJECTION_BIAS_INIT: f64 = 0.1;

/// A 1x1 convolution `C -> 1` followed by ReLU.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ProjectionHead {
            weight: store.add_uniform(format!("{name}.weight"), &[1, channels, 1, 1], (3.0 / channels as f64).sqrt(), rng)?,
            bias: store.add(format!("{name}.bias"), Tensor::full(&[1], PROJECTION_BIAS_INIT))?,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.weight), tape.param(store, self.bias));
        let y = tape.conv2d(x, w, Some(b), 1, 0)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct MutualAttention {
    pub app: ProjectionHead,
    pub flow: ProjectionHead,
}

impl MutualAttention {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MutualAttention {
            app: ProjectionHead::new(store, "zeta_app", channels, rng)?,
            flow: ProjectionHead::new(store, "zeta_flow", channels, rng)?,
        })
    }

    /// `M = sigmoid(ReLU(zeta_app(phi)) * ReLU(zeta_flow(f)))`, shaped `[T, 1, I, J]`.
    pub fn map<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, phi: Var, f: Var) -> Result<Var> {
        if tape.shape(phi) != tape.shape(f) {
            return Err(Error::shape(format!(
                "stream features differ in shape: {:?} vs {:?}",
                tape.shape(phi),
                tape.shape(f)
            )));
        }
        let pa = self.app.forward(tape, store, phi)?;
        let pf = self.flow.forward(tape, store, f)?;
        let rho = tape.mul(pa, pf)?;
        Ok(tape.sigmoid(rho))
    }
}

/// Scales both streams by the same map (broadcast over channels).
pub fn apply_mutual_attention(tape: &mut Tape<'_>, phi: Var, f: Var, m: Var) -> Result<(Var, Var)> {
    check_map(tape, phi, m)?;
    check_map(tape, f, m)?;
    Ok((tape.mul(phi, m)?, tape.mul(f, m)?))
}

fn check_map(tape: &Tape<'_>, x: Var, m: Var) -> Result<()> {
    let (xs, ms) = (tape.shape(x), tape.shape(m));
    if xs.len() != 4 || ms != [xs[0], 1, xs[2], xs[3]] {
        return Err(Error::shape(format!(
            "attention map {ms:?} does not broadcast over features {xs:?}"
        )));
    }
    Ok(())
}

pub const FLOW_CNN_CHANNELS: [usize; 3] = [8, 16, 32];

/// Three 3x3 stride-2 convolutions with ReLU over the two-channel flow input.
#[derive(Clone, Debug)]
pub struct ShallowFlowCnn {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl ShallowFlowCnn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let mut cin = 2;
        let mut layers = Vec::new();
        for (i, &cout) in FLOW_CNN_CHANNELS.iter().enumerate() {
            let w = store.add_uniform(
                format!("flow_cnn.conv{}.weight", i + 1),
                &[cout, cin, 3, 3],
                (6.0 / (cin * 9) as f64).sqrt(),
                rng,
            )?;
            let b = store.add(format!("flow_cnn.conv{}.bias", i + 1), Tensor::zeros(&[cout]))?;
            layers.push((w, b));
            cin = cout;
        }
        Ok(ShallowFlowCnn { layers })
    }

    /// Features of a `[T, 2, H, W]` flow clip, resized (nearest) to `height x width`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, flow: Var, height: usize, width: usize) -> Result<Var> {
        let s = tape.shape(flow);
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape(format!("flow CNN expects [T, 2, H, W], got {s:?}")));
        }
        let mut x = flow;
        for &(w, b) in &self.layers {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            x = tape.conv2d(x, w, Some(b), 2, 1)?;
            x = tape.relu(x);
        }
        tape.resize_nearest(x, height, width)
    }
}

/// `a = sigmoid(mean_c flow_features)`; returns `(psi * a, a)`.
pub fn gated_attention(tape: &mut Tape<'_>, psi: Var, flow_features: Var) -> Result<(Var, Var)> {
    let (ps, fs) = (tape.shape(psi), tape.shape(flow_features));
    if ps.len() != 4 || fs.len() != 4 || ps[0] != fs[0] || ps[2..] != fs[2..] {
        return Err(Error::shape(format!(
            "gated attention needs matching [T, _, I, J] extents, got {ps:?} and {fs:?}"
        )));
    }
    let mean = tape.reduce(ReduceOp::Mean, flow_features, &[1])?;
    let a = tape.sigmoid(mean);
    Ok((tape.mul(psi, a)?, a))
}
