use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward, gemm, ConvGeometry};
use super::kernels::{self, reduction_map, rows_of, sigmoid};
use super::param::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
}

/// Which operand (if any) is the `[T, 1, H, W]` map spread across channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        map: Vec<usize>,
        count: usize,
        // argmax input index per output element (max only)
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ScaleChannels {
        x: Var,
        gates: Var,
    },
    ResizeNearest {
        x: Var,
        source: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        degenerate: Vec<bool>,
    },
    NormalizeSum {
        x: Var,
    },
    WeightedRows {
        x: Var,
        w: Var,
    },
    AffineRows {
        x: Var,
        w: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    TripletBatchHard {
        x: Var,
        // (anchor, hardest positive, hardest negative) for anchors with a positive hinge
        active: Vec<(usize, usize, usize)>,
        anchors: usize,
    },
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
    // distance of this node's input from a non-differentiable point (relu
    // kink, max tie, hinge corner); finite-difference checks are unreliable
    // closer than their step size
    kink: f64,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological ordering of the graph.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    diagnostics: Vec<String>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_with_kink(value, op, needs_grad, f64::INFINITY)
    }

    fn push_with_kink(&mut self, value: Tensor, op: Op, needs_grad: bool, kink: f64) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            kink,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is propagated to it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Enters a stored parameter as a differentiable leaf without copying it.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(&store.get(id).value),
            op: Op::Param(id),
            needs_grad: true,
            kink: f64::INFINITY,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Notes recorded during the forward pass (e.g. degenerate cosines).
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Smallest distance of any recorded op from a point where it is not
    /// differentiable.
    pub fn kink_margin(&self) -> f64 {
        self.nodes.iter().map(|n| n.kink).fold(f64::INFINITY, f64::min)
    }

    // ---- operations ------------------------------------------------------

    /// Cross-correlation of `[T, C, H, W]` input with `[O, C, KH, KW]` weight.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.out_ch] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geo.out_ch,
                    self.shape(b)
                )));
            }
        }
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geo,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.grad_flag(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            needs,
        ))
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::None);
        }
        let channel_map = |full: &[usize], map: &[usize]| {
            full.len() == 4
                && map.len() == 4
                && map[1] == 1
                && full[0] == map[0]
                && full[2] == map[2]
                && full[3] == map[3]
        };
        if channel_map(sa, sb) {
            Ok(Broadcast::Rhs)
        } else if channel_map(sb, sa) {
            Ok(Broadcast::Lhs)
        } else {
            Err(Error::shape(format!(
                "operands {sa:?} and {sb:?} are neither equal nor channel-broadcastable"
            )))
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind(a, b)?;
        let (full, map) = match broadcast {
            Broadcast::Lhs => (b, a),
            _ => (a, b),
        };
        let fv = self.value(full);
        let mv = self.value(map);
        let mut out = fv.clone();
        let apply = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Mul => x * y,
        };
        if broadcast == Broadcast::None {
            for (o, y) in out.data_mut().iter_mut().zip(mv.data()) {
                *o = apply(*o, *y);
            }
        } else {
            let s = fv.shape();
            let (channels, plane) = (s[1], s[2] * s[3]);
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let t = i / (channels * plane);
                let p = i % plane;
                *o = apply(*o, mv.data()[t * plane + p]);
            }
        }
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b, broadcast }, needs))
    }

    /// Element-wise sum; a `[T, 1, H, W]` operand is spread over channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    /// Element-wise product; a `[T, 1, H, W]` operand is spread over channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.value(x);
        let mut kink = f64::INFINITY;
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => {
                    kink = kink.min(v.abs());
                    v.max(0.0)
                }
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Exp => v.exp(),
            })
            .collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let needs = self.grad_flag(&[x]);
        self.push_with_kink(out, Op::Unary { kind, x }, needs, kink)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let needs = self.grad_flag(&[x]);
        self.push(out, Op::Scale { x, factor }, needs)
    }

    /// Reduces over `axes`, keeping them as extent-1 axes. Max ties go to the
    /// lowest linear index.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if axes.is_empty() {
            return Err(Error::invalid("reduction over an empty axis list"));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::invalid(format!(
                    "invalid reduction axes {axes:?} for rank-{rank} tensor"
                )));
            }
            seen[a] = true;
        }
        let (out_shape, map) = reduction_map(xv.shape(), axes);
        let count = xv.len() / out_shape.iter().product::<usize>();
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = Vec::new();
        let mut kink = f64::INFINITY;
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out.data_mut()[o] += xv.data()[i];
                }
                if op == ReduceOp::Mean {
                    out.data_mut().iter_mut().for_each(|v| *v /= count as f64);
                }
            }
            ReduceOp::Max => {
                let n_out = out.len();
                argmax = vec![usize::MAX; n_out];
                let mut second = vec![f64::NEG_INFINITY; n_out];
                for (i, &o) in map.iter().enumerate() {
                    let v = xv.data()[i];
                    if argmax[o] == usize::MAX {
                        argmax[o] = i;
                        out.data_mut()[o] = v;
                    } else if v > out.data()[o] {
                        second[o] = out.data()[o];
                        out.data_mut()[o] = v;
                        argmax[o] = i;
                    } else if v > second[o] {
                        second[o] = v;
                    }
                }
                if count > 1 {
                    for (m, s) in out.data().iter().zip(&second) {
                        kink = kink.min(m - s);
                    }
                }
            }
        }
        let needs = self.grad_flag(&[x]);
        Ok(self.push_with_kink(
            out,
            Op::Reduce {
                op,
                x,
                map,
                count,
                argmax,
            },
            needs,
            kink,
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        let s = self.reduce(ReduceOp::Sum, x, &axes)?;
        self.reshape(s, &[])
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        let s = self.reduce(ReduceOp::Mean, x, &axes)?;
        self.reshape(s, &[])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Affine map over the last axis: `x[.., Din] -> x W^T + b`, `W: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 {
            return Err(Error::shape(format!(
                "linear weight must be [Dout, Din], got {:?}",
                wv.shape()
            )));
        }
        let (dout, din) = (wv.shape()[0], wv.shape()[1]);
        let (rows, width) = rows_of(xv);
        if xv.rank() == 0 || width != din {
            return Err(Error::shape(format!(
                "linear expects input width {din}, got shape {:?}",
                xv.shape()
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "linear bias must be [{dout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&out_shape);
        let beta = if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
            1.0
        } else {
            0.0
        };
        gemm(
            rows,
            din,
            dout,
            xv.data(),
            (din as isize, 1),
            wv.data(),
            (1, din as isize),
            beta,
            out.data_mut(),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.grad_flag(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// Multiplies every `[H, W]` plane of `x: [T, C, H, W]` by `gates[t, c]`.
    pub fn scale_channels(&mut self, x: Var, gates: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gates);
        if xs.len() != 4 || gs != [xs[0], xs[1]] {
            return Err(Error::shape(format!(
                "scale_channels needs x [T, C, H, W] and gates [T, C], got {xs:?} and {gs:?}"
            )));
        }
        let plane = xs[2] * xs[3];
        let g = self.value(gates).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= g[i]);
        }
        let needs = self.grad_flag(&[x, gates]);
        Ok(self.push(out, Op::ScaleChannels { x, gates }, needs))
    }

    /// Nearest-neighbour resampling of `[T, C, H, W]` to `[T, C, h, w]`.
    pub fn resize_nearest(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "resize_nearest needs [T, C, H, W] and positive target, got {s:?} -> {height}x{width}"
            )));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut source = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            for y in 0..height {
                let sy = (y * h) / height;
                for xx in 0..width {
                    let sx = (xx * w) / width;
                    source.push(p * h * w + sy * w + sx);
                }
            }
        }
        let xv = self.value(x);
        let data = source.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(&[s[0], s[1], height, width], data)?;
        let needs = self.grad_flag(&[x]);
        Ok(self.push(out, Op::ResizeNearest { x, source }, needs))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(wa).zip(bv.data().chunks(wb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = wa + wb;
        let out = Tensor::new(&shape, data)?;
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// Row `row` of a `[N, D]` tensor as a `[D]` vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || row >= xv.shape()[0] {
            return Err(Error::shape(format!(
                "select_row {row} out of range for {:?}",
                xv.shape()
            )));
        }
        let out = Tensor::new(&[xv.shape()[1]], xv.row(row).to_vec())?;
        let needs = self.grad_flag(&[x]);
        Ok(self.push(out, Op::SelectRow { x, row }, needs))
    }

    /// Cosine similarity of each row of `a: [T, K]` with `b: [K]`.
    ///
    /// A row (or `b`) with norm below `1e-12` has cosine 0 by definition, no
    /// gradient, and leaves a diagnostic on the tape.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.shape() != [av.shape()[1]] {
            return Err(Error::shape(format!(
                "cosine_rows needs [T, K] and [K], got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let nb = kernels::norm(bv.data());
        let mut degenerate = Vec::new();
        let mut data = Vec::new();
        let mut notes = Vec::new();
        for t in 0..av.shape()[0] {
            let row = av.row(t);
            let na = kernels::norm(row);
            if na < 1e-12 || nb < 1e-12 {
                notes.push(format!(
                    "cosine_rows: row {t} has a near-zero embedding (|row| = {na:e}, |ref| = {nb:e}); cosine set to 0"
                ));
                degenerate.push(true);
                data.push(0.0);
            } else {
                degenerate.push(false);
                data.push(kernels::dot(row, bv.data()) / (na * nb));
            }
        }
        let out = Tensor::new(&[av.shape()[0]], data)?;
        self.diagnostics.extend(notes);
        let needs = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::CosineRows { a, b, degenerate }, needs))
    }

    /// `x / sum(x)` for a 1-D tensor.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::shape(format!(
                "normalize_sum needs a vector, got {:?}",
                xv.shape()
            )));
        }
        let total: f64 = xv.data().iter().sum();
        if total.abs() < 1e-300 || !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "normalize_sum over values summing to {total}"
            )));
        }
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|v| v / total).collect())?;
        let needs = self.grad_flag(&[x]);
        Ok(self.push(out, Op::NormalizeSum { x }, needs))
    }

    /// `sum_t w[t] * x[t, :]`, accumulated in increasing `t`.
    pub fn weighted_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.shape() != [xv.shape()[0]] {
            return Err(Error::shape(format!(
                "weighted_rows needs [T, D] and [T], got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let d = xv.shape()[1];
        let mut out = vec![0.0; d];
        for (t, &wt) in wv.data().iter().enumerate() {
            for (o, v) in out.iter_mut().zip(xv.row(t)) {
                *o += wt * v;
            }
        }
        let out = Tensor::new(&[d], out)?;
        let needs = self.grad_flag(&[x, w]);
        Ok(self.push(out, Op::WeightedRows { x, w }, needs))
    }

    /// `x[0] + sum_t w[t] * (x[t] - x[0])`, accumulated in increasing `t`.
    ///
    /// Equal to [`Tape::weighted_rows`] whenever the weights sum to one, but
    /// returns `x[0]` exactly when all rows are identical.
    pub fn affine_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.shape() != [xv.shape()[0]] || xv.shape()[0] == 0 {
            return Err(Error::shape(format!(
                "affine_rows needs [T, D] (T >= 1) and [T], got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let d = xv.shape()[1];
        let base = xv.row(0);
        let mut acc = vec![0.0; d];
        for (t, &wt) in wv.data().iter().enumerate().skip(1) {
            for ((a, v), b) in acc.iter_mut().zip(xv.row(t)).zip(base) {
                *a += wt * (v - b);
            }
        }
        let out: Vec<f64> = base.iter().zip(&acc).map(|(b, a)| b + a).collect();
        let out = Tensor::new(&[d], out)?;
        let needs = self.grad_flag(&[x, w]);
        Ok(self.push(out, Op::AffineRows { x, w }, needs))
    }

    /// Softmax of a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::shape(format!(
                "softmax needs a vector, got {:?}",
                xv.shape()
            )));
        }
        let out = Tensor::new(xv.shape(), kernels::softmax_row(xv.data()))?;
        let needs = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Softmax { x }, needs))
    }

    /// Mean over rows of `-log softmax(logits[b])[labels[b]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy needs [B, N] logits for {} labels, got {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = lv.row(b);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let needs = self.grad_flag(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Batch-hard triplet loss over the rows of `x: [B, D]`.
    ///
    /// Per anchor: the farthest same-label row (excluding itself) and the
    /// nearest different-label row, Euclidean distance, hinge
    /// `max(0, d_pos - d_neg + margin)`, averaged over anchors. Selection ties
    /// go to the lowest row index.
    pub fn triplet_batch_hard(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "triplet loss needs [B, D] for {} labels, got {:?}",
                labels.len(),
                xv.shape()
            )));
        }
        let n = labels.len();
        let mut active = Vec::new();
        let mut total = 0.0;
        let mut kink = f64::INFINITY;
        for a in 0..n {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            let mut pos_runner = f64::NEG_INFINITY;
            let mut neg_runner = f64::INFINITY;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = kernels::euclidean(xv.row(a), xv.row(j));
                if labels[j] == labels[a] {
                    match pos {
                        Some((_, best)) if d <= best => pos_runner = pos_runner.max(d),
                        Some((_, best)) => {
                            pos_runner = pos_runner.max(best);
                            pos = Some((j, d));
                        }
                        None => pos = Some((j, d)),
                    }
                } else {
                    match neg {
                        Some((_, best)) if d >= best => neg_runner = neg_runner.min(d),
                        Some((_, best)) => {
                            neg_runner = neg_runner.min(best);
                            neg = Some((j, d));
                        }
                        None => neg = Some((j, d)),
                    }
                }
            }
            let (Some((p, dp)), Some((q, dn))) = (pos, neg) else {
                return Err(Error::invalid(format!(
                    "triplet anchor {a} (label {}) lacks a positive or a negative in the batch",
                    labels[a]
                )));
            };
            let hinge = dp - dn + margin;
            kink = kink.min(hinge.abs()).min(dp - pos_runner).min(neg_runner - dn);
            if hinge > 0.0 {
                total += hinge;
                active.push((a, p, q));
            }
        }
        let out = Tensor::scalar(total / n as f64);
        let needs = self.grad_flag(&[x]);
        Ok(self.push_with_kink(
            out,
            Op::TripletBatchHard {
                x,
                active,
                anchors: n,
            },
            needs,
            kink,
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Gradients of a one-element `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_from(loss, Tensor::ones(lv.shape()))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_from(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            } => {
                let want = (
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                let cg = conv2d_backward(self.value(*input), self.value(*weight), g, geo, want);
                if let Some(t) = cg.input {
                    self.accumulate(grads, *input, t);
                }
                if let Some(t) = cg.weight {
                    self.accumulate(grads, *weight, t);
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (full, map) = match broadcast {
                    Broadcast::Lhs => (*b, *a),
                    _ => (*a, *b),
                };
                let fv = self.value(full);
                let mv = self.value(map);
                match broadcast {
                    Broadcast::None => {
                        let (ga, gb) = match kind {
                            BinaryKind::Add => (g.clone(), g.clone()),
                            BinaryKind::Mul => {
                                let mut ga = g.clone();
                                let mut gb = g.clone();
                                for i in 0..g.len() {
                                    ga.data_mut()[i] *= mv.data()[i];
                                    gb.data_mut()[i] *= fv.data()[i];
                                }
                                (ga, gb)
                            }
                        };
                        self.accumulate(grads, *a, ga);
                        self.accumulate(grads, *b, gb);
                    }
                    _ => {
                        let s = fv.shape();
                        let (channels, plane) = (s[1], s[2] * s[3]);
                        let mut g_full = g.clone();
                        let mut g_map = Tensor::zeros(mv.shape());
                        for i in 0..g.len() {
                            let t = i / (channels * plane);
                            let m = t * plane + i % plane;
                            match kind {
                                BinaryKind::Add => g_map.data_mut()[m] += g.data()[i],
                                BinaryKind::Mul => {
                                    g_full.data_mut()[i] *= mv.data()[m];
                                    g_map.data_mut()[m] += g.data()[i] * fv.data()[i];
                                }
                            }
                        }
                        self.accumulate(grads, full, g_full);
                        self.accumulate(grads, map, g_map);
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for i in 0..gx.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xv.data()[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => {
                            let s = out.data()[i];
                            s * (1.0 - s)
                        }
                        UnaryKind::Exp => out.data()[i],
                    };
                    gx.data_mut()[i] *= d;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scale { x, factor } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= factor);
                self.accumulate(grads, *x, gx);
            }
            Op::Reduce {
                op,
                x,
                map,
                count,
                argmax,
            } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                match op {
                    ReduceOp::Sum => {
                        for (i, &o) in map.iter().enumerate() {
                            gx.data_mut()[i] = g.data()[o];
                        }
                    }
                    ReduceOp::Mean => {
                        for (i, &o) in map.iter().enumerate() {
                            gx.data_mut()[i] = g.data()[o] / *count as f64;
                        }
                    }
                    ReduceOp::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gx.data_mut()[i] += g.data()[o];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshape(self.shape(*x)).expect("reshape back");
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(
                        rows,
                        dout,
                        din,
                        g.data(),
                        (dout as isize, 1),
                        wv.data(),
                        (din as isize, 1),
                        0.0,
                        gx.data_mut(),
                    );
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(
                        dout,
                        rows,
                        din,
                        g.data(),
                        (1, dout as isize),
                        xv.data(),
                        (din as isize, 1),
                        0.0,
                        gw.data_mut(),
                    );
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = Tensor::zeros(&[dout]);
                        for row in g.data().chunks(dout) {
                            for (o, v) in gb.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::ScaleChannels { x, gates } => {
                let xv = self.value(*x);
                let gv = self.value(*gates);
                let s = xv.shape();
                let plane = s[2] * s[3];
                let mut gx = g.clone();
                let mut gg = Tensor::zeros(gv.shape());
                for (i, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                    let xs = &xv.data()[i * plane..(i + 1) * plane];
                    gg.data_mut()[i] = kernels::dot(chunk, xs);
                    chunk.iter_mut().for_each(|v| *v *= gv.data()[i]);
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gates, gg);
            }
            Op::ResizeNearest { x, source } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (o, &i) in source.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks(wa + wb) {
                    ga.extend_from_slice(&row[..wa]);
                    gb.extend_from_slice(&row[wa..]);
                }
                let ga = Tensor::new(sa, ga).expect("concat lhs");
                let gb = Tensor::new(sb, gb).expect("concat rhs");
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SelectRow { x, row } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = g.len();
                gx.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::CosineRows { a, b, degenerate } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let nb = kernels::norm(bv.data());
                let k = bv.len();
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for (t, &skip) in degenerate.iter().enumerate() {
                    if skip {
                        continue;
                    }
                    let row = av.row(t);
                    let na = kernels::norm(row);
                    let cos = out.data()[t];
                    let gt = g.data()[t];
                    for i in 0..k {
                        ga.data_mut()[t * k + i] +=
                            gt * (bv.data()[i] / (na * nb) - cos * row[i] / (na * na));
                        gb.data_mut()[i] +=
                            gt * (row[i] / (na * nb) - cos * bv.data()[i] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::NormalizeSum { x } => {
                let xv = self.value(*x);
                let total: f64 = xv.data().iter().sum();
                let inner: f64 = kernels::dot(g.data(), xv.data());
                let gx = Tensor::new(
                    xv.shape(),
                    g.data()
                        .iter()
                        .map(|gi| gi / total - inner / (total * total))
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedRows { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let d = xv.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for t in 0..wv.len() {
                    gw.data_mut()[t] = kernels::dot(g.data(), xv.row(t));
                    for i in 0..d {
                        gx.data_mut()[t * d + i] = wv.data()[t] * g.data()[i];
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::AffineRows { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let d = xv.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                let rest: f64 = wv.data()[1..].iter().sum();
                for i in 0..d {
                    gx.data_mut()[i] = (1.0 - rest) * g.data()[i];
                }
                for t in 1..wv.len() {
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += g.data()[i] * (xv.row(t)[i] - xv.row(0)[i]);
                        gx.data_mut()[t * d + i] = wv.data()[t] * g.data()[i];
                    }
                    gw.data_mut()[t] = dot;
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::Softmax { x } => {
                let inner = kernels::dot(g.data(), out.data());
                let gx = Tensor::new(
                    out.shape(),
                    out.data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, gi)| y * (gi - inner))
                        .collect(),
                )
                .expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let scale = g.data()[0] / labels.len() as f64;
                let mut gl = Tensor::zeros(lv.shape());
                let classes = lv.shape()[1];
                for (b, &label) in labels.iter().enumerate() {
                    let p = kernels::softmax_row(lv.row(b));
                    for (c, pc) in p.into_iter().enumerate() {
                        let target = if c == label { 1.0 } else { 0.0 };
                        gl.data_mut()[b * classes + c] = scale * (pc - target);
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::TripletBatchHard { x, active, anchors } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let scale = g.data()[0] / *anchors as f64;
                let mut gx = Tensor::zeros(xv.shape());
                let push = |i: usize, j: usize, sign: f64, gx: &mut Tensor| {
                    let dist = kernels::euclidean(xv.row(i), xv.row(j));
                    if dist == 0.0 {
                        return;
                    }
                    for k in 0..d {
                        let diff = (xv.data()[i * d + k] - xv.data()[j * d + k]) / dist;
                        gx.data_mut()[i * d + k] += sign * scale * diff;
                        gx.data_mut()[j * d + k] -= sign * scale * diff;
                    }
                };
                for &(a, p, n) in active {
                    push(a, p, 1.0, &mut gx);
                    push(a, n, -1.0, &mut gx);
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Result of a reverse pass: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf, summed per parameter, in order of
    /// first appearance on the tape.
    pub fn param_grads(&self, tape: &Tape<'_>) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) else {
                continue;
            };
            match out.iter_mut().find(|(pid, _)| pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((*id, g.clone())),
            }
        }
        out
    }
}
