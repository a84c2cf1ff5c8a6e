//! `flowreid`: generate data, estimate flow, train, extract and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flowreid::aggregation::{read_fvec, write_fvec, ClipDescriptor};
use flowreid::config::{RunConfig, CONFIG_FILE};
use flowreid::data::{generate, load_dataset, write_dataset, Dataset, Split};
use flowreid::evaluation::evaluate;
use flowreid::experiment::{attention_frame, eval_inputs, extract, query_gallery, train_identities};
use flowreid::image::{write_pgm, Gray8};
use flowreid::tensor::{read_checkpoint, write_checkpoint};
use flowreid::training::{train, Model, LOG_HEADER};
use flowreid::{Error, Result};

const CHECKPOINT_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "flowreid", version, about = "Flow-guided mutual attention for video person re-identification")]
struct Cli {
    /// Base configuration (`key = value` lines); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0: all available CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to disk.
    GenData(GenData),
    /// Estimate optical flow for every clip of a dataset.
    Flow(FlowCmd),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainCmd),
    /// Compute clip descriptors for one split.
    Extract(ExtractCmd),
    /// Rank a gallery for every query and report CMC and mAP.
    Eval(EvalCmd),
    /// Run one of the layer, sequence-length or module studies.
    Ablate(AblateCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlowCmd {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    agg: Option<String>,
    #[arg(long)]
    inject_stage: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ExtractCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Frames per clip (evenly spaced).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Write the spatial attention maps as PGM images into this directory.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    /// CSV report path (default: `eval.csv` next to the query file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Layer,
    Seqlen,
    Module,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Dataset with flow; generated from the configuration when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    // extraction defaults to the configuration saved beside its checkpoint
    let base = match (&cli.config, &cli.command) {
        (Some(path), _) => Some(path.clone()),
        (None, Command::Extract(c)) => Some(output_dir(&c.checkpoint).join(CONFIG_FILE)).filter(|p| p.exists()),
        _ => None,
    };
    let mut cfg = RunConfig::default();
    if let Some(path) = &base {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {o}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cfg.workers > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    match cli.command {
        Command::GenData(c) => gen_data(cfg, c),
        Command::Flow(c) => flow(cfg, c),
        Command::Train(c) => train_cmd(cfg, c),
        Command::Extract(c) => extract_cmd(cfg, c),
        Command::Eval(c) => eval_cmd(cfg, c),
        Command::Ablate(c) => ablate(cfg, c),
    }
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    set_opt(cfg, "mode", &f.mode)?;
    set_opt(cfg, "agg", &f.agg)?;
    set_opt(cfg, "inject_stage", &f.inject_stage)?;
    set_opt(cfg, "seq_len", &f.seq_len)?;
    set_opt(cfg, "epochs", &f.epochs)?;
    set_opt(cfg, "seed", &f.seed)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_FILE), cfg.to_text())
}

/// A missing input is a usage error rather than an I/O failure.
fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn output_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn gen_data(mut cfg: RunConfig, c: GenData) -> Result<()> {
    set_opt(&mut cfg, "data_seed", &c.seed)?;
    set_opt(&mut cfg, "ids", &c.ids)?;
    set_opt(&mut cfg, "clips", &c.clips)?;
    set_opt(&mut cfg, "frames", &c.frames)?;
    cfg.generator.validate().map_err(as_config)?;
    let ds = generate(&cfg.generator)?;
    create_dir(&c.out)?;
    let manifest = write_dataset(&ds, &c.out)?;
    write_config(&cfg, &c.out)?;
    println!("wrote {} clips of {} identities to {}", ds.clips.len(), cfg.generator.num_identities, manifest.display());
    Ok(())
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

fn flow(mut cfg: RunConfig, c: FlowCmd) -> Result<()> {
    set_opt(&mut cfg, "alpha", &c.alpha)?;
    set_opt(&mut cfg, "iters", &c.iters)?;
    cfg.validate()?;
    require(&c.manifest, "manifest")?;
    let mut ds = load_dataset(&c.manifest)?;
    ds.compute_flows(&cfg.flow)?;
    let dir = output_dir(&c.manifest);
    let written = write_dataset(&ds, &dir)?;
    write_config(&cfg, &dir)?;
    println!("estimated flow for {} clips; manifest {}", ds.clips.len(), written.display());
    Ok(())
}

fn load_with_flow(manifest: &Path) -> Result<Dataset> {
    require(manifest, "manifest")?;
    let ds = load_dataset(manifest)?;
    if let Some(c) = ds.clips.iter().find(|c| c.flows.is_none()) {
        return Err(Error::Config(format!(
            "clip `{}` has no flow; run `flowreid flow --manifest {}` first",
            c.clip_id,
            manifest.display()
        )));
    }
    Ok(ds)
}

fn train_cmd(mut cfg: RunConfig, c: TrainCmd) -> Result<()> {
    apply_model_flags(&mut cfg, &c.model)?;
    cfg.validate()?;
    let ds = load_with_flow(&c.manifest)?;
    create_dir(&c.out)?;
    write_config(&cfg, &c.out)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_identities = train_identities(&ds);
    let mut model = Model::new(model_cfg, cfg.train.seed).map_err(as_config)?;
    let log_path = c.out.join(LOG_FILE);
    let mut log = format!("{LOG_HEADER}\n");
    write_file(&log_path, &log)?;
    let result = train(&mut model, &ds, &cfg.train, |m| {
        log.push_str(&m.csv_row());
        log.push('\n');
        eprintln!("epoch {:>4}  id {:.4}  triplet {:.4}", m.epoch, m.id_loss, m.triplet_loss);
        write_file(&log_path, &log)
    });
    result?;
    let ckpt = c.out.join(CHECKPOINT_FILE);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model.store)?;
    write_file(&ckpt, buf)?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Rebuilds a model from a checkpoint; the class count comes from the
/// stored classifier.
fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    require(checkpoint, "checkpoint")?;
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let store = read_checkpoint(&bytes[..])?;
    let classes = store
        .id("classifier.weight")
        .map(|id| store.get(id).value.shape()[0])
        .ok_or_else(|| Error::format("checkpoint", "no classifier.weight"))?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_identities = classes;
    let mut model = Model::new(model_cfg, cfg.train.seed).map_err(as_config)?;
    model.store.load_values(&store)?;
    Ok(model)
}

fn extract_cmd(mut cfg: RunConfig, c: ExtractCmd) -> Result<()> {
    set_opt(&mut cfg, "eval_seq_len", &c.seq_len)?;
    cfg.validate()?;
    let model = load_model(&cfg, &c.checkpoint)?;
    let ds = load_with_flow(&c.manifest)?;
    let split: Split = c.split.into();
    let (_, _, skipped) = eval_inputs(&ds, split, cfg.eval_seq_len, model.config.flow_cap)?;
    for s in &skipped {
        eprintln!("{s}");
    }
    let descs = extract(&model, &ds, split, cfg.eval_seq_len)?;
    let dir = output_dir(&c.out);
    create_dir(&dir)?;
    let mut buf = Vec::new();
    write_fvec(&mut buf, &descs)?;
    write_file(&c.out, buf)?;
    write_config(&cfg, &dir)?;
    if let Some(att_dir) = &c.dump_attention {
        dump_attention(&model, &ds, split, cfg.eval_seq_len, att_dir)?;
    }
    println!("{} descriptors of dimension {} -> {}", descs.len(), model.config.backbone.descriptor_dim, c.out.display());
    Ok(())
}

fn dump_attention(model: &Model, ds: &Dataset, split: Split, seq_len: usize, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let (inputs, labels, _) = eval_inputs(ds, split, seq_len, model.config.flow_cap)?;
    for (input, label) in inputs.iter().zip(&labels) {
        let (_, att) = model.describe_with_attention(input)?;
        let Some(att) = att else {
            return Err(Error::Config(format!("mode `{}` has no spatial attention to dump", model.config.mode)));
        };
        for t in 0..input.seq_len() {
            let values = attention_frame(&att, t, ds.height, ds.width);
            let img = Gray8 {
                width: ds.width,
                height: ds.height,
                data: values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
            };
            write_pgm(&dir.join(format!("{}_{t:02}.pgm", label.clip_id)), &img)?;
        }
    }
    Ok(())
}

fn read_descriptors(path: &Path, what: &str) -> Result<Vec<ClipDescriptor>> {
    require(path, what)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let descs = if bytes.is_empty() { Vec::new() } else { read_fvec(&bytes[..])? };
    if descs.is_empty() {
        return Err(Error::Config(format!("{what} `{}` holds no descriptors", path.display())));
    }
    Ok(descs)
}

fn eval_cmd(mut cfg: RunConfig, c: EvalCmd) -> Result<()> {
    set_opt(&mut cfg, "ranks", &c.ranks)?;
    set_opt(&mut cfg, "metric", &c.metric)?;
    cfg.validate()?;
    let q = read_descriptors(&c.query, "query file")?;
    let g = read_descriptors(&c.gallery, "gallery file")?;
    let report = evaluate(&q, &g, cfg.metric)?;
    print!("{}", report.to_table(&cfg.ranks));
    let out = c.out.unwrap_or_else(|| output_dir(&c.query).join("eval.csv"));
    let dir = output_dir(&out);
    create_dir(&dir)?;
    write_file(&out, report.to_csv(&cfg.ranks))?;
    write_config(&cfg, &dir)?;
    Ok(())
}

const ABLATE_HEADER: &str = "axis,setting,mode,agg,inject_stage,train_seq_len,eval_seq_len,rank1,rank5,rank10,rank20,mAP";

fn ablate(mut cfg: RunConfig, c: AblateCmd) -> Result<()> {
    apply_model_flags(&mut cfg, &c.model)?;
    cfg.validate()?;
    let ds = match &c.manifest {
        Some(m) => load_with_flow(m)?,
        None => flowreid::experiment::prepare_dataset(&cfg.generator, &cfg.flow)?,
    };
    create_dir(&c.out)?;
    write_config(&cfg, &c.out)?;
    let mut rows = vec![ABLATE_HEADER.to_string()];
    let mut run = |axis: &str, setting: String, run_cfg: &RunConfig, eval_lens: &[usize]| -> Result<()> {
        eprintln!("{axis} {setting}: training {}+{}", run_cfg.model.mode, run_cfg.model.aggregation);
        let trained = flowreid::experiment::train_model(&ds, run_cfg.model.clone(), &run_cfg.train, |_| Ok(()))?;
        for &len in eval_lens {
            let descs = extract(&trained.model, &ds, Split::Test, len)?;
            let (q, g) = query_gallery(&descs);
            let r = evaluate(&q, &g, run_cfg.metric)?;
            let label = if eval_lens.len() > 1 { len.to_string() } else { setting.clone() };
            rows.push(format!(
                "{axis},{label},{},{},{},{},{len},{:.6},{:.6},{:.6},{:.6},{:.6}",
                run_cfg.model.mode,
                run_cfg.model.aggregation,
                run_cfg.model.backbone.inject_stage,
                run_cfg.train.seq_len,
                r.rank(1),
                r.rank(5),
                r.rank(10),
                r.rank(20),
                r.map
            ));
        }
        Ok(())
    };
    match c.axis {
        Axis::Layer => {
            // attention needs at least one later stage, so the study covers
            // every stage but the last
            for l in 1..cfg.model.backbone.stage_channels.len() {
                let mut rc = cfg.clone();
                rc.model.backbone.inject_stage = l;
                run("layer", l.to_string(), &rc, &[cfg.eval_seq_len])?;
            }
        }
        Axis::Seqlen => run("seqlen", String::new(), &cfg, &[2, 4, 6, 8, 16])?,
        Axis::Module => {
            for mode in ["none", "gated", "mutual"] {
                for agg in ["avg", "weighted"] {
                    let mut rc = cfg.clone();
                    rc.set("mode", mode)?;
                    rc.set("agg", agg)?;
                    run("module", format!("{mode}+{agg}"), &rc, &[cfg.eval_seq_len])?;
                }
            }
        }
    }
    let csv = rows.join("\n") + "\n";
    write_file(&c.out.join("ablate.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
