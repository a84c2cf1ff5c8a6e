use std::fs;
use std::path::Path;

use flowreid::data::synth::{render_clip, CameraStyle, ClipVariation, SpriteIdentity};
use flowreid::data::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        num_identities: 4,
        clips_per_identity: 2,
        frames_per_clip: 6,
        ..GeneratorConfig::default()
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_byte_identical_dataset() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&generate(&small(3)).unwrap(), a.path()).unwrap();
    write_dataset(&generate(&small(3)).unwrap(), b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    let c = generate(&small(4)).unwrap();
    assert_ne!(c.clips[0].frames, generate(&small(3)).unwrap().clips[0].frames);
}

#[test]
fn layout_and_splits() {
    let ds = generate(&small(1)).unwrap();
    assert_eq!(ds.clips.len(), 4 * 2 * 2);
    assert!(ds.clips.iter().all(|c| c.frames.len() == 6 && c.frames[0].height == 64 && c.frames[0].width == 32));
    assert_eq!(ds.split(Split::Train).count(), 8);
    assert!(ds.split(Split::Train).all(|c| c.identity < 2));
    assert!(ds.split(Split::Test).all(|c| c.identity >= 2));
    assert!(ds.clip("id003_c1_01").is_some());
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn cameras_share_sprite_texture_but_not_background() {
    for seed in 0..4u64 {
        let id = SpriteIdentity::new(seed, 1, 2);
        let var = ClipVariation::random(&mut ChaCha8Rng::seed_from_u64(seed), 32, 64);
        let c0 = render_clip(&id, &CameraStyle::new(seed, 0, 0.02), &var, 2, 32, 64, 0.0);
        let c1 = render_clip(&id, &CameraStyle::new(seed, 1, 0.02), &var, 2, 32, 64, 0.0);
        let (mut fg, mut bg) = ((vec![], vec![]), (vec![], vec![]));
        for (i, &m) in c0.masks[0].data.iter().enumerate() {
            for ch in 0..3 {
                let a = c0.frames[0].data[i * 3 + ch] as f64;
                let b = c1.frames[0].data[i * 3 + ch] as f64;
                let dst = if m > 0 { &mut fg } else { &mut bg };
                dst.0.push(a);
                dst.1.push(b);
            }
        }
        let (rf, rb) = (correlation(&fg.0, &fg.1), correlation(&bg.0, &bg.1));
        assert!(rf > rb, "seed {seed}: mask correlation {rf} vs background {rb}");
        assert!(rf > 0.9, "seed {seed}: mask correlation {rf}");
    }
}

#[test]
fn ground_truth_flow_is_zero_off_mask() {
    let ds = generate(&small(2)).unwrap();
    for clip in &ds.clips {
        let (gt, masks) = (clip.gt_flows.as_ref().unwrap(), clip.masks.as_ref().unwrap());
        assert_eq!(gt.len(), clip.frames.len());
        for (f, m) in gt.fields.iter().zip(masks) {
            for (i, &mv) in m.data.iter().enumerate() {
                if mv == 0 {
                    assert_eq!((f.u[i], f.v[i]), (0.0, 0.0));
                }
            }
        }
    }
}

#[test]
fn ground_truth_flow_matches_rigid_torso_displacement() {
    // With no legs or occluders involved, every torso/head pixel moves alike:
    // the most common in-mask vector is the body displacement and it warps
    // the torso stripes of frame t onto frame t+1.
    let id = SpriteIdentity::new(9, 0, 2);
    let var = ClipVariation::random(&mut ChaCha8Rng::seed_from_u64(9), 32, 64);
    let r = render_clip(&id, &CameraStyle::new(9, 0, 0.0), &var, 3, 32, 64, 0.0);
    let f = &r.flows.fields[0];
    let top = (0..64 * 32).find(|&i| r.masks[0].data[i] > 0).unwrap();
    let body = (f.u[top], f.v[top]);
    let same = (0..64 * 32)
        .filter(|&i| r.masks[0].data[i] > 0 && (f.u[i], f.v[i]) == body)
        .count();
    let total = r.masks[0].data.iter().filter(|&&m| m > 0).count();
    assert!(same * 2 > total, "{same} of {total} pixels share the body displacement");
}

#[test]
fn manifest_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = generate(&small(5)).unwrap();
    ds.compute_flows(&flowreid::optflow::FlowParams::default()).unwrap();
    let path = write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(path.file_name().unwrap(), MANIFEST_FILE);
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.seed, 5);
    assert_eq!(back.clips.len(), ds.clips.len());
    for (a, b) in ds.clips.iter().zip(&back.clips) {
        assert_eq!(a.clip_id, b.clip_id);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.flows, b.flows);
        assert_eq!(a.gt_flows, b.gt_flows);
        assert_eq!(a.masks, b.masks);
    }
}

#[test]
fn load_clip_sampling_modes() {
    let mut ds = generate(&small(6)).unwrap();
    ds.compute_flows(&flowreid::optflow::FlowParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = ds.load_clip("id000_c0_00", 4, Sampling::EvenlySpaced, &mut rng).unwrap();
    assert_eq!(s.indices, vec![0, 1, 3, 5]);
    assert_eq!(s.frames.frames.len(), 4);
    assert_eq!(s.flows.len(), 4);
    assert_eq!(s.frames.frames[2], ds.clips[0].frames[3]);
    assert!(ds.load_clip("id000_c0_00", 7, Sampling::EvenlySpaced, &mut rng).is_err());
    assert!(ds.load_clip("nope", 2, Sampling::EvenlySpaced, &mut rng).is_err());

    let fresh = generate(&small(6)).unwrap();
    assert!(fresh.load_clip("id000_c0_00", 2, Sampling::EvenlySpaced, &mut rng).is_err());
}

#[test]
fn ingest_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(7)).unwrap();
    for clip in ds.clips.iter().take(3) {
        let d = dir
            .path()
            .join(clip.split.as_str())
            .join(clip.identity.to_string())
            .join(format!("c{}", clip.camera))
            .join(&clip.clip_id);
        fs::create_dir_all(&d).unwrap();
        for (t, f) in clip.frames.iter().enumerate() {
            flowreid::image::write_ppm(&d.join(format!("{t:03}.ppm")), f).unwrap();
        }
    }
    let got = ingest_frame_dirs(dir.path(), 64, 32).unwrap();
    assert_eq!(got.clips.len(), 3);
    assert_eq!(got.clips[0].frames, ds.clips[0].frames);
    let resized = ingest_frame_dirs(dir.path(), 32, 16).unwrap();
    assert_eq!(resized.clips[0].frames[0].height, 32);
    assert!(ingest_frame_dirs(&dir.path().join("missing"), 64, 32).is_err());
}
