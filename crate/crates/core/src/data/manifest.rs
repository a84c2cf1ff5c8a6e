//! Dataset manifests: a one-line header followed by tab-separated records.
//!
//! ```text
//! FRID-MANIFEST v1 seed=<n> frames=<H>x<W>
//! clip_id  identity  camera  split  frames  flows  gt_flows  masks
//! ```
//!
//! Path columns hold comma-separated paths relative to the manifest's
//! directory, or `-` when absent.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::optflow::{read_flo, write_flo, FlowClip};

use super::{ClipRecord, Dataset, Split};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER_PREFIX: &str = "FRID-MANIFEST v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
    pub frames: Vec<PathBuf>,
    pub flows: Option<Vec<PathBuf>>,
    pub gt_flows: Option<Vec<PathBuf>>,
    pub masks: Option<Vec<PathBuf>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub records: Vec<ManifestRecord>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("manifest", detail)
}

fn join_paths(paths: &Option<Vec<PathBuf>>) -> String {
    match paths {
        None => "-".to_string(),
        Some(p) => p
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn split_paths(field: &str) -> Option<Vec<PathBuf>> {
    (field != "-").then(|| field.split(',').map(PathBuf::from).collect())
}

pub fn write_manifest(manifest: &DatasetManifest) -> String {
    let mut out = format!(
        "{HEADER_PREFIX} seed={} frames={}x{}\n",
        manifest.seed, manifest.height, manifest.width
    );
    for r in &manifest.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.clip_id,
            r.identity,
            r.camera,
            r.split.as_str(),
            join_paths(&Some(r.frames.clone())),
            join_paths(&r.flows),
            join_paths(&r.gt_flows),
            join_paths(&r.masks),
        ));
    }
    out
}

pub fn read_manifest(text: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty manifest"))?;
    let rest = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| bad(format!("bad header `{header}`")))?;
    let (mut seed, mut extent) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("seed", v)) => seed = v.parse::<u64>().ok(),
            Some(("frames", v)) => {
                extent = v
                    .split_once('x')
                    .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
            }
            _ => return Err(bad(format!("unknown header field `{field}`"))),
        }
    }
    let seed = seed.ok_or_else(|| bad("header lacks seed"))?;
    let (height, width) = extent.ok_or_else(|| bad("header lacks frames=<H>x<W>"))?;

    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(bad(format!("line {}: expected 8 columns, got {}", n + 2, cols.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u32>()
                .map_err(|_| bad(format!("line {}: bad {what} `{s}`", n + 2)))
        };
        records.push(ManifestRecord {
            clip_id: cols[0].to_string(),
            identity: num(cols[1], "identity")?,
            camera: num(cols[2], "camera")?,
            split: Split::parse(cols[3]).map_err(|e| bad(format!("line {}: {e}", n + 2)))?,
            frames: split_paths(cols[4]).ok_or_else(|| bad(format!("line {}: no frames", n + 2)))?,
            flows: split_paths(cols[5]),
            gt_flows: split_paths(cols[6]),
            masks: split_paths(cols[7]),
        });
    }
    Ok(DatasetManifest {
        seed,
        height,
        width,
        records,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every clip (frames, masks and flows that are present) under `dir`
/// and a manifest describing them. Returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(ds.clips.len());
    for clip in &ds.clips {
        let frame_paths = write_series(dir, "frames", &clip.clip_id, "ppm", &clip.frames, write_ppm)?;
        let flows = clip
            .flows
            .as_ref()
            .map(|f| write_series(dir, "flow", &clip.clip_id, "flo", &f.fields, write_flo))
            .transpose()?;
        let gt_flows = clip
            .gt_flows
            .as_ref()
            .map(|f| write_series(dir, "gtflow", &clip.clip_id, "flo", &f.fields, write_flo))
            .transpose()?;
        let masks = clip
            .masks
            .as_ref()
            .map(|m| write_series(dir, "masks", &clip.clip_id, "pgm", m, write_pgm))
            .transpose()?;
        records.push(ManifestRecord {
            clip_id: clip.clip_id.clone(),
            identity: clip.identity,
            camera: clip.camera,
            split: clip.split,
            frames: frame_paths,
            flows,
            gt_flows,
            masks,
        });
    }
    let manifest = DatasetManifest {
        seed: ds.seed,
        height: ds.height,
        width: ds.width,
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, write_manifest(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_series<T>(
    root: &Path,
    kind: &str,
    clip_id: &str,
    ext: &str,
    items: &[T],
    write: fn(&Path, &T) -> Result<()>,
) -> Result<Vec<PathBuf>> {
    let rel_dir = Path::new(kind).join(clip_id);
    create_dir(&root.join(&rel_dir))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let rel = rel_dir.join(format!("{i:03}.{ext}"));
            write(&root.join(&rel), item)?;
            Ok(rel)
        })
        .collect()
}

/// Reads a manifest and every file it references into memory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = read_manifest(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let load_flows = |paths: &Option<Vec<PathBuf>>| -> Result<Option<FlowClip>> {
        paths
            .as_ref()
            .map(|p| {
                Ok(FlowClip {
                    fields: p.iter().map(|p| read_flo(&root.join(p))).collect::<Result<_>>()?,
                })
            })
            .transpose()
    };
    let mut clips = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let frames = r
            .frames
            .iter()
            .map(|p| read_ppm(&root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = frames
            .iter()
            .find(|f| f.height != manifest.height || f.width != manifest.width)
        {
            return Err(bad(format!(
                "clip `{}` has a {}x{} frame, manifest says {}x{}",
                r.clip_id, f.height, f.width, manifest.height, manifest.width
            )));
        }
        let masks = r
            .masks
            .as_ref()
            .map(|p| p.iter().map(|p| read_pgm(&root.join(p))).collect::<Result<Vec<_>>>())
            .transpose()?;
        clips.push(ClipRecord {
            clip_id: r.clip_id.clone(),
            identity: r.identity,
            camera: r.camera,
            split: r.split,
            frames,
            flows: load_flows(&r.flows)?,
            gt_flows: load_flows(&r.gt_flows)?,
            masks,
        });
    }
    Ok(Dataset {
        seed: manifest.seed,
        height: manifest.height,
        width: manifest.width,
        clips,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Ingests real tracklets laid out as
/// `<root>/<split>/<identity>/c<camera>/<clip>/*.ppm`, resizing frames to
/// `height x width`. Identity directories must be numeric.
pub fn ingest_frame_dirs(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    let mut clips = Vec::new();
    for split in [Split::Train, Split::Test] {
        let split_dir = root.join(split.as_str());
        if !split_dir.is_dir() {
            continue;
        }
        for id_dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
            let id_name = id_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let identity: u32 = id_name
                .parse()
                .map_err(|_| Error::invalid(format!("identity directory `{id_name}` is not numeric")))?;
            for cam_dir in sorted_entries(&id_dir)?.into_iter().filter(|p| p.is_dir()) {
                let cam_name = cam_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let camera: u32 = cam_name
                    .strip_prefix('c')
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("camera directory `{cam_name}` is not c<n>")))?;
                for clip_dir in sorted_entries(&cam_dir)?.into_iter().filter(|p| p.is_dir()) {
                    let frames = sorted_entries(&clip_dir)?
                        .into_iter()
                        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
                        .map(|p| {
                            read_ppm(&p).map(|f| {
                                if f.height == height && f.width == width {
                                    f
                                } else {
                                    f.resize(width, height)
                                }
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if frames.is_empty() {
                        continue;
                    }
                    let clip_name = clip_dir.file_name().unwrap_or_default().to_string_lossy();
                    clips.push(ClipRecord {
                        clip_id: format!("{id_name}_{cam_name}_{clip_name}"),
                        identity,
                        camera,
                        split,
                        frames,
                        flows: None,
                        gt_flows: None,
                        masks: None,
                    });
                }
            }
        }
    }
    if clips.is_empty() {
        return Err(Error::invalid(format!("no clips found under {}", root.display())));
    }
    Ok(Dataset {
        seed: 0,
        height,
        width,
        clips,
    })
}
