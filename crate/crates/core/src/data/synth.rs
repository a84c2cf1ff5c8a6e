//! Synthetic moving-sprite video benchmark.
//!
//! Each identity is an articulated sprite (head, striped torso, two swinging
//! legs) with a seeded palette, body scale and gait. Identities come in
//! appearance groups whose members wear nearly the same clothes and differ
//! mainly in how they move. Every clip renders the sprite swaying across a
//! camera-specific smooth background; camera 1 adds an illumination shift and
//! pixel noise. Ground-truth masks and forward flow fields are produced by
//! construction, and a fraction of frames carry a static occluder to mimic
//! imperfect tracklets.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Gray8, GrayImage, RgbImage};
use crate::optflow::{FlowClip, FlowField};

use super::{ClipRecord, Dataset, Split};

/// Parameters of a generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_identities: usize,
    /// Clips per identity per camera.
    pub clips_per_identity: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    /// Identities sharing one clothing palette.
    pub group_size: usize,
    /// Probability that a frame carries a static occluder.
    pub occlusion_prob: f64,
    /// Standard deviation of camera-1 pixel noise (in `[0, 1]` units).
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            num_identities: 32,
            clips_per_identity: 4,
            frames_per_clip: 16,
            height: 64,
            width: 32,
            group_size: 2,
            occlusion_prob: 0.15,
            noise: 0.02,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 16 {
            return Err(Error::invalid(format!(
                "frame extent {}x{} is below the 32x16 minimum",
                self.height, self.width
            )));
        }
        if self.num_identities < 2 {
            return Err(Error::invalid("need at least two identities"));
        }
        if self.clips_per_identity == 0 || self.frames_per_clip < 2 {
            return Err(Error::invalid(
                "need at least one clip per identity and two frames per clip",
            ));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || self.noise < 0.0 {
            return Err(Error::invalid("occlusion probability or noise out of range"));
        }
        Ok(())
    }

    /// Identities `< num_identities / 2` train, the rest test.
    pub fn split_of(&self, identity: usize) -> Split {
        if identity < self.num_identities / 2 {
            Split::Train
        } else {
            Split::Test
        }
    }
}

/// Derives an independent stream seed from the dataset seed and a tag path.
pub(crate) fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the tag sequence
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Sum of oriented sinusoids per colour channel; smooth enough for
/// brightness-constancy flow estimation.
#[derive(Clone, Debug)]
pub struct SmoothTexture {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl SmoothTexture {
    /// `waves` sinusoids with wavelengths in `[min_wavelength, max_wavelength)`
    /// and a random per-channel amplitude in `[-amplitude, amplitude)`.
    pub fn random(
        rng: &mut impl Rng,
        base: [f64; 3],
        waves: usize,
        amplitude: f64,
        min_wavelength: f64,
        max_wavelength: f64,
    ) -> Self {
        let waves = (0..waves)
            .map(|_| {
                let (kx, ky, phase) = random_wave(rng, min_wavelength, max_wavelength);
                let amp = [0; 3].map(|_| rng.gen_range(-amplitude..amplitude));
                (kx, ky, phase, amp)
            })
            .collect();
        SmoothTexture { base, waves }
    }

    /// Achromatic variant: every wave has the same amplitude in all channels.
    pub fn gray(rng: &mut impl Rng, base: f64, waves: usize, amplitude: f64, min_wavelength: f64, max_wavelength: f64) -> Self {
        let waves = (0..waves)
            .map(|_| {
                let (kx, ky, phase) = random_wave(rng, min_wavelength, max_wavelength);
                (kx, ky, phase, [amplitude; 3])
            })
            .collect();
        SmoothTexture { base: [base; 3], waves }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = self.base;
        for (kx, ky, phase, amp) in &self.waves {
            let s = (kx * x + ky * y + phase).sin();
            for c in 0..3 {
                out[c] += amp[c] * s;
            }
        }
        out
    }

    pub fn luma(&self, x: f64, y: f64) -> f64 {
        let [r, g, b] = self.sample(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

fn random_wave(rng: &mut impl Rng, min_wavelength: f64, max_wavelength: f64) -> (f64, f64, f64) {
    let theta = rng.gen_range(0.0..TAU);
    let k = TAU / rng.gen_range(min_wavelength..max_wavelength);
    (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..TAU))
}

/// Appearance and gait of one synthetic person.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteIdentity {
    pub index: usize,
    pub shirt: [f64; 3],
    pub stripe: [f64; 3],
    pub stripe_period: f64,
    pub pants: [f64; 3],
    pub skin: [f64; 3],
    /// Body height as a fraction of frame height.
    pub scale: f64,
    /// Gait (leg swing) frequency in cycles per frame.
    pub gait_frequency: f64,
    pub gait_phase: f64,
    /// Leg swing amplitude as a fraction of body height.
    pub stride: f64,
    /// Peak horizontal sway speed in pixels per frame.
    pub velocity: f64,
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn jitter(c: [f64; 3], rng: &mut impl Rng, amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

impl SpriteIdentity {
    /// Deterministic function of `(seed, index)` and the appearance group.
    pub fn new(seed: u64, index: usize, group_size: usize) -> Self {
        let group = index / group_size;
        let mut palette = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, group as u64]));
        let shirt = random_color(&mut palette);
        let stripe = random_color(&mut palette);
        let stripe_period = palette.gen_range(4.0..10.0);
        let pants = random_color(&mut palette);
        let skin = jitter([0.8, 0.62, 0.5], &mut palette, 0.1);
        let scale = palette.gen_range(0.62..0.74);

        let mut own = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, index as u64]));
        SpriteIdentity {
            index,
            shirt: jitter(shirt, &mut own, 0.04),
            stripe: jitter(stripe, &mut own, 0.04),
            stripe_period,
            pants: jitter(pants, &mut own, 0.04),
            skin,
            scale,
            gait_frequency: own.gen_range(0.06..0.2),
            gait_phase: own.gen_range(0.0..TAU),
            stride: own.gen_range(0.03..0.1),
            velocity: own.gen_range(0.8..2.0),
        }
    }
}

/// Per-clip randomness: where the sprite starts and how its motion is phased.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipVariation {
    pub center_x: f64,
    pub center_y: f64,
    pub sway_phase: f64,
    pub gait_offset: f64,
    pub background_offset: (f64, f64),
    pub noise_seed: u64,
    pub occluder_seed: u64,
}

impl ClipVariation {
    pub fn random(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        ClipVariation {
            center_x: width as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            center_y: height as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            sway_phase: rng.gen_range(0.0..TAU),
            gait_offset: rng.gen_range(0.0..TAU),
            background_offset: (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)),
            noise_seed: rng.gen(),
            occluder_seed: rng.gen(),
        }
    }
}

/// Camera-specific rendering style.
#[derive(Clone, Debug)]
pub struct CameraStyle {
    pub camera: u32,
    pub background: SmoothTexture,
    pub gain: f64,
    pub offset: [f64; 3],
    pub noise: f64,
}

impl CameraStyle {
    pub fn new(seed: u64, camera: u32, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, camera as u64]));
        let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let background = SmoothTexture::random(&mut rng, base, 6, 0.2, 12.0, 24.0);
        if camera == 0 {
            CameraStyle {
                camera,
                background,
                gain: 1.0,
                offset: [0.0; 3],
                noise: 0.0,
            }
        } else {
            CameraStyle {
                camera,
                background,
                gain: 0.85,
                offset: [0.08, 0.05, -0.02],
                noise,
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Head,
    Torso,
    Leg(f64),
}

/// Sprite pose at (possibly fractional) time `t`.
struct Pose {
    cx: f64,
    top: f64,
    height: f64,
    swing: f64,
}

fn pose(id: &SpriteIdentity, var: &ClipVariation, frame_h: usize, t: f64) -> Pose {
    let height = id.scale * frame_h as f64;
    // sway: x(t) = cx + A sin(w t + phase) with peak speed A w = velocity
    let w = TAU / 24.0;
    let amplitude = id.velocity / w;
    let cx = var.center_x + amplitude.min(6.0) * (w * t + var.sway_phase).sin();
    let gait = TAU * id.gait_frequency * t + id.gait_phase + var.gait_offset;
    let bob = 0.6 * (2.0 * gait).sin();
    Pose {
        cx,
        top: var.center_y - height / 2.0 + bob,
        height,
        swing: id.stride * height * gait.sin(),
    }
}

/// Which sprite part covers pixel centre `(x, y)`, with the part-local
/// coordinates used for texturing.
fn hit(p: &Pose, x: f64, y: f64) -> Option<(Part, f64, f64)> {
    let h = p.height;
    let head_r = 0.1 * h;
    let (hx, hy) = (p.cx, p.top + head_r);
    if (x - hx).powi(2) + (y - hy).powi(2) <= head_r * head_r {
        return Some((Part::Head, x - p.cx, y - p.top));
    }
    let torso_top = p.top + 2.0 * head_r;
    let torso_bottom = p.top + 0.58 * h;
    let torso_half = 0.19 * h;
    if y >= torso_top && y < torso_bottom && (x - p.cx).abs() <= torso_half {
        return Some((Part::Torso, x - p.cx, y - p.top));
    }
    if y >= torso_bottom && y < p.top + h {
        for side in [-1.0, 1.0] {
            let leg_cx = p.cx + side * (0.09 * h + p.swing);
            if (x - leg_cx).abs() <= 0.075 * h {
                return Some((Part::Leg(side), x - leg_cx, y - p.top));
            }
        }
    }
    None
}

fn part_color(id: &SpriteIdentity, part: Part, lx: f64, ly: f64, body_height: f64) -> [f64; 3] {
    match part {
        Part::Head => {
            // hair on top, shaded face below
            let hair = (ly / (0.1 * body_height)).clamp(0.0, 1.0);
            let shade = 0.75 + 0.25 * (lx * 0.8).cos();
            [0, 1, 2].map(|c| (0.15 * (1.0 - hair) + id.skin[c] * hair) * shade)
        }
        Part::Torso => {
            let s = 0.5 + 0.5 * (TAU * ly / id.stripe_period).sin();
            let mix = s * s;
            [0, 1, 2].map(|c| id.shirt[c] * (1.0 - mix) + id.stripe[c] * mix)
        }
        Part::Leg(_) => {
            let shade = 1.0 + 0.2 * (lx * 1.1).sin() + 0.2 * (ly * 0.6).cos();
            id.pants.map(|c| c * shade)
        }
    }
}

/// Horizontal velocity of a part between `t` and `t + 1`.
fn part_displacement(a: &Pose, b: &Pose, part: Part) -> (f64, f64) {
    let body = (b.cx - a.cx, b.top - a.top);
    match part {
        Part::Leg(side) => (body.0 + side * (b.swing - a.swing), body.1),
        _ => body,
    }
}

struct Occluder {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    color: [f64; 3],
}

/// One rendered clip with its ground truth.
pub struct RenderedClip {
    pub frames: Vec<RgbImage>,
    pub masks: Vec<Gray8>,
    pub flows: FlowClip,
}

/// Renders `frames` frames of `identity` seen by `camera`.
pub fn render_clip(
    identity: &SpriteIdentity,
    camera: &CameraStyle,
    var: &ClipVariation,
    frames: usize,
    width: usize,
    height: usize,
    occlusion_prob: f64,
) -> RenderedClip {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(var.noise_seed);
    let mut occ_rng = ChaCha8Rng::seed_from_u64(var.occluder_seed);
    let mut out = RenderedClip {
        frames: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        flows: FlowClip { fields: Vec::with_capacity(frames) },
    };
    for t in 0..frames {
        let now = pose(identity, var, height, t as f64);
        let next = pose(identity, var, height, t as f64 + 1.0);
        let occluder = occ_rng.gen_bool(occlusion_prob).then(|| {
            let w = occ_rng.gen_range(0.35..0.6) * width as f64;
            let h = occ_rng.gen_range(0.25..0.45) * height as f64;
            let x0 = occ_rng.gen_range(0.0..width as f64 - w);
            let y0 = occ_rng.gen_range(0.2 * height as f64..height as f64 - h);
            Occluder {
                x0,
                x1: x0 + w,
                y0,
                y1: y0 + h,
                color: random_color(&mut occ_rng),
            }
        });
        let mut img = RgbImage::new(width, height);
        let mut mask = Gray8::new(width, height);
        let mut flow = FlowField::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut color = camera
                    .background
                    .sample(px + var.background_offset.0, py + var.background_offset.1);
                let i = y * width + x;
                if let Some((part, lx, ly)) = hit(&now, px, py) {
                    color = part_color(identity, part, lx, ly, now.height);
                    let (du, dv) = part_displacement(&now, &next, part);
                    flow.u[i] = du as f32;
                    flow.v[i] = dv as f32;
                    mask.data[i] = 255;
                }
                if let Some(o) = &occluder {
                    if px >= o.x0 && px < o.x1 && py >= o.y0 && py < o.y1 {
                        color = o.color;
                        flow.u[i] = 0.0;
                        flow.v[i] = 0.0;
                        mask.data[i] = 0;
                    }
                }
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let mut v = color[c] * camera.gain + camera.offset[c];
                    if camera.noise > 0.0 {
                        // approximately normal: sum of four uniforms, variance 1/3
                        let n: f64 = (0..4).map(|_| noise_rng.gen_range(-1.0..1.0)).sum::<f64>();
                        v += camera.noise * n * (3.0f64 / 4.0).sqrt();
                    }
                    rgb[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.set_pixel(x, y, rgb);
            }
        }
        out.frames.push(img);
        out.masks.push(mask);
        out.flows.fields.push(flow);
    }
    out
}

/// Generates the full benchmark in memory: both cameras, every identity.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let styles = [CameraStyle::new(cfg.seed, 0, cfg.noise), CameraStyle::new(cfg.seed, 1, cfg.noise)];
    let mut jobs = Vec::new();
    for id in 0..cfg.num_identities {
        for cam in 0..2u32 {
            for k in 0..cfg.clips_per_identity {
                jobs.push((id, cam, k));
            }
        }
    }
    let clips = jobs
        .par_iter()
        .map(|&(id, cam, k)| {
            let identity = SpriteIdentity::new(cfg.seed, id, cfg.group_size);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[4, id as u64, cam as u64, k as u64]));
            let var = ClipVariation::random(&mut rng, cfg.width, cfg.height);
            let r = render_clip(
                &identity,
                &styles[cam as usize],
                &var,
                cfg.frames_per_clip,
                cfg.width,
                cfg.height,
                cfg.occlusion_prob,
            );
            ClipRecord {
                clip_id: format!("id{id:03}_c{cam}_{k:02}"),
                identity: id as u32,
                camera: cam,
                split: cfg.split_of(id),
                frames: r.frames,
                flows: None,
                gt_flows: Some(r.flows),
                masks: Some(r.masks),
            }
        })
        .collect();
    Ok(Dataset {
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        clips,
    })
}

/// A smooth random texture and its copy translated by `(dx, dy)` pixels,
/// with the exact (constant) flow between them.
pub fn translated_texture_pair(seed: u64, width: usize, height: usize, dx: f64, dy: f64) -> (GrayImage, GrayImage, FlowField) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5]));
    let tex = SmoothTexture::gray(&mut rng, 0.5, 6, 0.15, 12.0, 24.0);
    let render = |sx: f64, sy: f64| {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(tex.luma(x as f64 + 0.5 - sx, y as f64 + 0.5 - sy));
            }
        }
        GrayImage::new(width, height, data).expect("extent")
    };
    (render(0.0, 0.0), render(dx, dy), FlowField::constant(width, height, dx as f32, dy as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_parameters_are_deterministic() {
        assert_eq!(SpriteIdentity::new(7, 3, 2), SpriteIdentity::new(7, 3, 2));
        assert_ne!(SpriteIdentity::new(7, 3, 2), SpriteIdentity::new(8, 3, 2));
    }

    #[test]
    fn group_members_share_stripe_period_and_scale() {
        let a = SpriteIdentity::new(1, 4, 2);
        let b = SpriteIdentity::new(1, 5, 2);
        assert_eq!(a.stripe_period, b.stripe_period);
        assert_eq!(a.scale, b.scale);
        assert_ne!(a.gait_frequency, b.gait_frequency);
    }

    #[test]
    fn rejects_small_extent() {
        let cfg = GeneratorConfig {
            height: 16,
            ..GeneratorConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
