use rand::Rng;

use crate::data::SampledClip;
use crate::image::RgbImage;
use crate::optflow::FlowField;

pub const MAX_CROP_SHIFT: i32 = 2;

/// A clip-wide geometric jitter: optional mirror, then a shift of up to
/// two pixels with replicated borders (equivalent to a padded random crop).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
}

impl Augmentation {
    pub fn random(rng: &mut impl Rng) -> Self {
        Augmentation {
            flip: rng.gen_bool(0.5),
            dx: rng.gen_range(-MAX_CROP_SHIFT..=MAX_CROP_SHIFT),
            dy: rng.gen_range(-MAX_CROP_SHIFT..=MAX_CROP_SHIFT),
        }
    }
}

fn source(x: usize, y: usize, w: usize, h: usize, a: Augmentation) -> (usize, usize) {
    let sx = (x as i64 - a.dx as i64).clamp(0, w as i64 - 1) as usize;
    let sy = (y as i64 - a.dy as i64).clamp(0, h as i64 - 1) as usize;
    let sx = if a.flip { w - 1 - sx } else { sx };
    (sx, sy)
}

fn warp_frame(img: &RgbImage, a: Augmentation) -> RgbImage {
    let mut out = RgbImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = source(x, y, img.width, img.height, a);
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

fn warp_flow(f: &FlowField, a: Augmentation) -> FlowField {
    let mut out = FlowField::zeros(f.width, f.height);
    for y in 0..f.height {
        for x in 0..f.width {
            let (sx, sy) = source(x, y, f.width, f.height, a);
            let (i, j) = (y * f.width + x, sy * f.width + sx);
            out.u[i] = if a.flip { -f.u[j] } else { f.u[j] };
            out.v[i] = f.v[j];
        }
    }
    out
}

/// Applies the same jitter to every frame, flow field and mask of a clip;
/// mirrored flow has its horizontal component negated.
pub fn augment_clip(clip: &mut SampledClip, a: Augmentation) {
    if a == Augmentation::default() {
        return;
    }
    for f in &mut clip.frames.frames {
        *f = warp_frame(f, a);
    }
    for f in &mut clip.flows.fields {
        *f = warp_flow(f, a);
    }
    if let Some(masks) = &mut clip.masks {
        for m in masks.iter_mut() {
            let mut out = m.clone();
            for y in 0..m.height {
                for x in 0..m.width {
                    let (sx, sy) = source(x, y, m.width, m.height, a);
                    out.data[y * m.width + x] = m.data[sy * m.width + sx];
                }
            }
            *m = out;
        }
    }
}
