//! Dense optical flow by the Horn–Schunck method, plus Middlebury `.flo` I/O.
//!
//! Brightness derivatives use the classical 2x2x2 cube stencil; the flow is
//! refined by Jacobi iterations of
//!
//! ```text
//! u <- u_avg - Ix (Ix u_avg + Iy v_avg + It) / (alpha^2 + Ix^2 + Iy^2)
//! v <- v_avg - Iy (Ix u_avg + Iy v_avg + It) / (alpha^2 + Ix^2 + Iy^2)
//! ```
//!
//! where `u_avg`, `v_avg` are the weighted neighbourhood means (1/6 for edge
//! neighbours, 1/12 for diagonal ones). Borders replicate edge pixels.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::tensor::Tensor;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
pub const DEFAULT_FLOW_CAP: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    /// Smoothness weight.
    pub alpha: f64,
    pub iterations: usize,
    /// Components are clamped to `[-cap, cap]` after estimation.
    pub cap: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            alpha: 0.1,
            iterations: 100,
            cap: DEFAULT_FLOW_CAP,
        }
    }
}

/// Per-pixel displacement `(u, v)` in pixels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    /// Uniform translation field.
    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        (self.u[i] as f64).hypot(self.v[i] as f64)
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&x| x == 0.0)
    }

    /// Mirrors the field left-right; horizontal components change sign.
    pub fn flip_horizontal(&self) -> FlowField {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + (self.width - 1 - x);
                out.u[y * self.width + x] = -self.u[src];
                out.v[y * self.width + x] = self.v[src];
            }
        }
        out
    }
}

/// Flow fields aligned one-to-one with the frames of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowClip {
    pub fields: Vec<FlowField>,
}

impl FlowClip {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

struct Derivatives {
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
}

fn derivatives(a: &GrayImage, b: &GrayImage) -> Derivatives {
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let mut d = Derivatives {
        ix: vec![0.0; n],
        iy: vec![0.0; n],
        it: vec![0.0; n],
    };
    for y in 0..h {
        let y1 = (y + 1).min(h - 1);
        for x in 0..w {
            let x1 = (x + 1).min(w - 1);
            let (a00, a01, a10, a11) = (a.at(x, y), a.at(x1, y), a.at(x, y1), a.at(x1, y1));
            let (b00, b01, b10, b11) = (b.at(x, y), b.at(x1, y), b.at(x, y1), b.at(x1, y1));
            let i = y * w + x;
            d.ix[i] = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10));
            d.iy[i] = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01));
            d.it[i] = 0.25 * ((b00 - a00) + (b10 - a10) + (b01 - a01) + (b11 - a11));
        }
    }
    d
}

fn neighbourhood_mean(f: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let edge = f[ym * w + x] + f[yp * w + x] + f[y * w + xm] + f[y * w + xp];
            let diag = f[ym * w + xm] + f[ym * w + xp] + f[yp * w + xm] + f[yp * w + xp];
            out[y * w + x] = edge / 6.0 + diag / 12.0;
        }
    }
}

/// Estimates the flow carrying `prev` onto `next`.
pub fn estimate_flow(prev: &GrayImage, next: &GrayImage, params: &FlowParams) -> Result<FlowField> {
    if prev.width != next.width || prev.height != next.height {
        return Err(Error::shape(format!(
            "frame extents differ: {}x{} vs {}x{}",
            prev.width, prev.height, next.width, next.height
        )));
    }
    if prev.data.iter().chain(&next.data).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input frame contains non-finite pixels".into()));
    }
    if !(params.alpha > 0.0) || !(params.cap > 0.0) {
        return Err(Error::invalid(format!(
            "alpha and cap must be positive (alpha = {}, cap = {})",
            params.alpha, params.cap
        )));
    }
    let (w, h) = (prev.width, prev.height);
    let d = derivatives(prev, next);
    let alpha2 = params.alpha * params.alpha;
    let denom: Vec<f64> = d
        .ix
        .iter()
        .zip(&d.iy)
        .map(|(ix, iy)| alpha2 + ix * ix + iy * iy)
        .collect();
    let n = w * h;
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut ubar, mut vbar) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..params.iterations {
        neighbourhood_mean(&u, w, h, &mut ubar);
        neighbourhood_mean(&v, w, h, &mut vbar);
        for i in 0..n {
            let r = (d.ix[i] * ubar[i] + d.iy[i] * vbar[i] + d.it[i]) / denom[i];
            u[i] = ubar[i] - d.ix[i] * r;
            v[i] = vbar[i] - d.iy[i] * r;
        }
    }
    let clamp = |x: f64| x.clamp(-params.cap, params.cap) as f32;
    Ok(FlowField {
        width: w,
        height: h,
        u: u.into_iter().map(clamp).collect(),
        v: v.into_iter().map(clamp).collect(),
    })
}

/// Flow for every frame of a clip: field `t` maps frame `t` to `t + 1`, and
/// the final field repeats the previous one so counts match the frames.
pub fn clip_flow(frames: &[RgbImage], params: &FlowParams) -> Result<FlowClip> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "flow needs at least two frames, clip has {}",
            frames.len()
        )));
    }
    let luma: Vec<GrayImage> = frames.iter().map(RgbImage::to_luma).collect();
    let mut fields = luma
        .par_windows(2)
        .map(|pair| estimate_flow(&pair[0], &pair[1], params))
        .collect::<Result<Vec<_>>>()?;
    fields.push(fields.last().expect("at least one pair").clone());
    Ok(FlowClip { fields })
}

/// Two-channel `[2, H, W]` network input: `(u, v) / cap`.
pub fn flow_to_input(flow: &FlowField, cap: f64) -> Tensor {
    let mut data = Vec::with_capacity(2 * flow.u.len());
    data.extend(flow.u.iter().map(|&x| x as f64 / cap));
    data.extend(flow.v.iter().map(|&x| x as f64 / cap));
    Tensor::new(&[2, flow.height, flow.width], data).expect("flow extents")
}

/// Mean endpoint error over pixels at least `border` away from every edge.
pub fn endpoint_error(est: &FlowField, truth: &FlowField, border: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for y in border..est.height.saturating_sub(border) {
        for x in border..est.width.saturating_sub(border) {
            let i = y * est.width + x;
            let du = est.u[i] as f64 - truth.u[i] as f64;
            let dv = est.v[i] as f64 - truth.v[i] as f64;
            total += du.hypot(dv);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.u.len() * 8);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(".flo", "missing PIEH magic"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::format(".flo", format!("bad extent {width}x{height}")));
    }
    let n = width as usize * height as usize;
    let payload = &bytes[12..];
    if payload.len() != n * 8 {
        return Err(Error::format(
            ".flo",
            format!("expected {} payload bytes, found {}", n * 8, payload.len()),
        ));
    }
    let mut flow = FlowField::zeros(width as usize, height as usize);
    for (i, pair) in payload.chunks_exact(8).enumerate() {
        flow.u[i] = f32::from_le_bytes(pair[..4].try_into().unwrap());
        flow.v[i] = f32::from_le_bytes(pair[4..].try_into().unwrap());
    }
    Ok(flow)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| match e {
        Error::Format { kind, detail } => Error::Format {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}
