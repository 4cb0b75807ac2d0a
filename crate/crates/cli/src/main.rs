//! `anr`: generate data, train, render, swap textures and evaluate.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 numerical abort.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use anr_core::avatar::Avatar;
use anr_core::imageio;
use anr_core::metrics::{evaluate, EvalReport};
use anr_core::plot::{self, PlotOptions, Series};
use anr_core::scene::dataset::{load_poses, load_sequence, save_sequence};
use anr_core::scene::{generate_sequence, silhouette_iou, Pose, SceneConfig, WeakPerspectiveCamera};
use anr_core::texture::{swap_region, TextureRegion};
use anr_core::training::keyframes::coverage_sets;
use anr_core::training::{greedy_max_coverage, Checkpoint, IdentityData, LossRecord, TrainConfig, Trainer, Variant};
use anr_core::{Error, Tensor};

const CHECKPOINT_FILE: &str = "checkpoint.anr";
const LOSS_LOG: &str = "loss.jsonl";
const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser)]
#[command(name = "anr", version, about = "Articulated neural rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated sequence.
    GenData(GenData),
    /// Select keyframes for a dataset.
    Keyframes(KeyframesCmd),
    /// Train a renderer and one texture per dataset.
    Train(Train),
    /// Render poses with a trained identity.
    #[command(alias = "animate")]
    Render(Render),
    /// Register a new identity mixing two textures over a uv rectangle.
    Swap(Swap),
    /// Score a checkpoint on held-out frames.
    Eval(Eval),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 240)]
    frames: usize,
    /// Leading frames available for training; defaults to 5/6 of `--frames`.
    #[arg(long)]
    train_frames: Option<usize>,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 3)]
    segments: usize,
    #[arg(long, default_value_t = 0.03)]
    misalignment: f64,
    #[arg(long, default_value_t = 0.35)]
    overhang: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct KeyframesCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured budget.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct Train {
    /// Dataset directory; repeat once per identity.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Identity names, one per `--data`; defaults to the directory names.
    #[arg(long)]
    id: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train the single-stage full-image baseline instead.
    #[arg(long, conflicts_with = "variant")]
    dnr_baseline: bool,
    /// Ablation preset applied after the config file.
    #[arg(long)]
    variant: Option<String>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop (with a checkpoint) after this many steps.
    #[arg(long)]
    interrupt_at: Option<u64>,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    identity: String,
    /// JSON-lines pose stream with `quaternions`, `root_translation`, `camera`.
    #[arg(long, conflicts_with = "pose_seq")]
    pose_file: Option<PathBuf>,
    /// Take poses and cameras from a dataset directory.
    #[arg(long)]
    pose_seq: Option<PathBuf>,
    /// Frame range `start:end` within the pose stream.
    #[arg(long)]
    frames: Option<String>,
    /// Extra camera rotation `rx,ry,rz` in degrees.
    #[arg(long, allow_hyphen_values = true)]
    camera: Option<String>,
    /// Background PNG; defaults to the pose dataset's, else mid gray.
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Swap {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    id_a: String,
    #[arg(long)]
    id_b: String,
    /// `u0,v0,u1,v1`.
    #[arg(long)]
    region: String,
    #[arg(long)]
    new_id: String,
    /// Output checkpoint; defaults to rewriting `--ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    identity: Option<String>,
    /// Output path stem; `.json` and `.csv` are written.
    #[arg(long)]
    report: PathBuf,
    /// Directory for loss and metric plots.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Directory for side-by-side strips (ground truth | compare | ckpt).
    #[arg(long)]
    strips: Option<PathBuf>,
    /// Second checkpoint shown in the strips.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Evaluate every frame instead of the held-out ones.
    #[arg(long)]
    all_frames: bool,
}

/// Exclusive hold on an output directory for the life of a command.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(".anr.lock");
        match File::create_new(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} is in use by another command (remove {} if stale)",
                dir.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn io_err(path: &Path, e: std::io::Error) -> anyhow::Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NumericalAbort { .. } => 4,
                Error::Io { .. } | Error::Image { .. } => 3,
                Error::Format { what, .. } if *what != "config" => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("{what}: expected {N} comma-separated numbers, got `{s}`")))?;
    v.try_into()
        .map_err(|_| usage(format!("{what}: expected {N} comma-separated numbers, got `{s}`")))
}

fn parse_range(s: &str, len: usize) -> Result<std::ops::Range<usize>> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("frame range must look like start:end, got `{s}`")))?;
    let start = if a.is_empty() { 0 } else { a.parse().map_err(|_| usage("bad frame range start"))? };
    let end = if b.is_empty() { len } else { b.parse().map_err(|_| usage("bad frame range end"))? };
    if start > end || end > len {
        return Err(usage(format!("frame range {start}:{end} outside 0:{len}")));
    }
    Ok(start..end)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Ok(TrainConfig::from_text(&text)?)
        }
    }
}

fn gen_data(args: GenData) -> Result<()> {
    if args.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    let config = SceneConfig {
        frames: args.frames,
        train_frames: args.train_frames.unwrap_or((args.frames * 5).div_ceil(6)),
        resolution: args.resolution,
        segments: args.segments,
        misalignment: args.misalignment,
        overhang: args.overhang,
        ..SceneConfig::default()
    };
    config.validate()?;
    let _lock = DirLock::acquire(&args.out)?;
    let seq = generate_sequence(&config, args.seed)?;
    save_sequence(&seq, &args.out)?;
    let summary = serde_json::json!({
        "frames": seq.frames.len(),
        "train_frames": seq.train_indices().len(),
        "test_frames": seq.test_indices().len(),
        "resolution": config.resolution,
        "silhouette_iou": silhouette_iou(&seq)?,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn keyframes(args: KeyframesCmd) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(b) = args.budget {
        config.keyframe_budget = b;
    }
    config.validate()?;
    let data = IdentityData::new("data", load_sequence(&args.data)?)?;
    let train = data.train_frames();
    let rasters: Vec<_> = train.iter().map(|&i| &data.rasters[i]).collect();
    let sets = coverage_sets(&rasters, config.keyframe_space, (config.texture_width, config.texture_height));
    let k = greedy_max_coverage(&sets, config.budget_for(train.len()), config.keyframe_saturation)?;
    let frames: Vec<usize> = k.frame_indices.iter().map(|&i| train[i]).collect();
    let summary = serde_json::json!({
        "budget": k.budget,
        "frames": frames,
        "covered": k.covered_count(),
        "coverable": union_count(&sets),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn union_count(sets: &[fixedbitset::FixedBitSet]) -> usize {
    let mut all = fixedbitset::FixedBitSet::with_capacity(sets.iter().map(|s| s.len()).max().unwrap_or(0));
    for s in sets {
        all.union_with(s);
    }
    all.count_ones(..)
}

fn identity_data(paths: &[PathBuf], ids: &[String]) -> Result<Vec<IdentityData>> {
    if !ids.is_empty() && ids.len() != paths.len() {
        return Err(usage(format!("{} --id values for {} --data directories", ids.len(), paths.len())));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let id = match ids.get(i) {
                Some(id) => id.clone(),
                None => p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| usage(format!("cannot derive an identity name from {}", p.display())))?,
            };
            let seq = load_sequence(p).with_context(|| format!("loading dataset {}", p.display()))?;
            Ok(IdentityData::new(id, seq)?)
        })
        .collect()
}

/// Keep only log lines from steps before `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(f) = File::open(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        match serde_json::from_str::<LossRecord>(&line) {
            Ok(r) if r.step < step => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    fs::write(path, kept).map_err(|e| io_err(path, e))
}

fn train(args: Train) -> Result<()> {
    let data = identity_data(&args.data, &args.id)?;
    let _lock = DirLock::acquire(&args.out)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let log_path = args.out.join(LOSS_LOG);
    let mut trainer = if args.resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if args.config.is_some() || args.variant.is_some() || args.dnr_baseline || args.seed.is_some() {
            eprintln!("note: --resume uses the configuration stored in the checkpoint");
        }
        let mut t = Trainer::from_checkpoint(&ckpt, data)?;
        if let Some(s) = args.steps {
            t.config.steps = s;
        }
        truncate_log(&log_path, t.step)?;
        t
    } else {
        let mut config = load_config(args.config.as_deref())?;
        if args.dnr_baseline {
            config = config.with_variant(Variant::Dnr);
        } else if let Some(v) = &args.variant {
            config = config.with_variant(Variant::parse(v)?);
        }
        if let Some(s) = args.steps {
            config.steps = s;
        }
        if let Some(s) = args.seed {
            config.seed = s;
        }
        config.validate()?;
        let _ = fs::remove_file(&log_path);
        Trainer::new(config, data)?
    };
    let echo = args.out.join(CONFIG_ECHO);
    fs::write(&echo, trainer.config.to_text()).map_err(|e| io_err(&echo, e))?;

    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let every = trainer.config.checkpoint_every.max(1);
    eprintln!(
        "training {} identities; parameters: renderer {}, discriminator {}, textures {}; steps {}..{}",
        trainer.textures.len(),
        trainer.renderer.param_count(),
        trainer.disc.params.count(),
        trainer.textures.iter().map(|t| t.data.len()).sum::<usize>(),
        trainer.step,
        trainer.config.steps
    );
    let result = trainer.run(args.interrupt_at, |t, rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if t.step % every == 0 {
            log.flush().map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            t.to_checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    });
    log.flush().map_err(|e| io_err(&log_path, e))?;
    if let Err(e) = result {
        if matches!(e, Error::NumericalAbort { .. }) {
            eprintln!("aborting; last good checkpoint kept at {}", ckpt_path.display());
        }
        return Err(e.into());
    }
    trainer.to_checkpoint().save(&ckpt_path)?;
    eprintln!("step {} written to {}", trainer.step, ckpt_path.display());
    Ok(())
}

fn rotate_camera(camera: &WeakPerspectiveCamera, angles: [f64; 3]) -> Result<WeakPerspectiveCamera> {
    let extra = WeakPerspectiveCamera::from_euler_degrees(1.0, angles, [0.0; 2], camera.image_size)?;
    Ok(WeakPerspectiveCamera::new(
        camera.scale,
        camera.rotation * extra.rotation,
        camera.translation,
        camera.image_size,
    )?)
}

fn render(args: Render) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let avatar = Avatar::from_checkpoint(&ckpt)?;
    let texture = avatar.texture(&args.identity)?.clone();
    let (poses, seq_background): (Vec<(Pose, WeakPerspectiveCamera)>, Option<Tensor>) =
        match (&args.pose_file, &args.pose_seq) {
            (Some(p), _) => (load_poses(p)?, None),
            (None, Some(dir)) => {
                let seq = load_sequence(dir)?;
                let bg = seq.frames.first().map(|f| (*f.background).clone());
                (seq.frames.into_iter().map(|f| (f.pose, f.camera)).collect(), bg)
            }
            (None, None) => return Err(usage("one of --pose-file or --pose-seq is required")),
        };
    let range = match &args.frames {
        Some(r) => parse_range(r, poses.len())?,
        None => 0..poses.len(),
    };
    let extra = args.camera.as_deref().map(|c| parse_floats::<3>(c, "--camera")).transpose()?;
    let _lock = DirLock::acquire(&args.out)?;
    let background = match (&args.background, seq_background) {
        (Some(p), _) => Some(imageio::load_rgb(p)?),
        (None, bg) => bg,
    };
    for i in range.clone() {
        let (pose, camera) = &poses[i];
        let camera = match extra {
            Some(a) => rotate_camera(camera, a)?,
            None => camera.clone(),
        };
        let (w, h) = camera.image_size;
        let bg = match &background {
            Some(b) if b.shape() == [3, h, w] => b.clone(),
            Some(b) => {
                return Err(Error::DimensionMismatch(format!(
                    "background is {:?}, camera wants 3x{h}x{w}",
                    b.shape()
                ))
                .into())
            }
            None => Tensor::zeros(&[3, h, w]),
        };
        let out = avatar.render(&args.identity, pose, &camera, &bg)?;
        imageio::save_rgb(&out.image.reshape(&[3, h, w])?, &args.out.join(format!("frame_{i:06}.png")))?;
        imageio::save_gray(&out.mask.reshape(&[1, h, w])?, &args.out.join(format!("mask_{i:06}.png")))?;
    }
    let manifest = serde_json::json!({
        "checkpoint": args.ckpt,
        "model_type": avatar.model_type,
        "identity": args.identity,
        "texture_fingerprint": texture.fingerprint(),
        "frames": range.collect::<Vec<_>>(),
        "camera_rotation_deg": extra,
    });
    let path = args.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn swap(args: Swap) -> Result<()> {
    let [u0, v0, u1, v1] = parse_floats::<4>(&args.region, "--region")?;
    let region = TextureRegion::rect(u0, v0, u1, v1)?;
    let mut ckpt = Checkpoint::load(&args.ckpt)?;
    let a = ckpt.texture(&args.id_a)?;
    let b = ckpt.texture(&args.id_b)?;
    let mut t = swap_region(&a, &b, &region)?;
    t.identity_id = args.new_id.clone();
    ckpt.add_identity(t)?;
    let out = args.out.unwrap_or(args.ckpt);
    ckpt.save(&out)?;
    println!("{}", serde_json::to_string(&ckpt.identity_ids())?);
    Ok(())
}

fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| io_err(path, e))?;
            serde_json::from_str(&l).map_err(|e| anyhow!(Error::Format {
                what: "loss log",
                detail: e.to_string(),
            }))
        })
        .collect()
}

fn write_plots(dir: &Path, report: &EvalReport, log: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let per = |f: fn(&anr_core::metrics::FrameMetrics) -> f64, name: &str| Series {
        name: name.to_string(),
        points: report.per_frame.iter().map(|m| (m.frame as f64, f(m))).collect(),
    };
    plot::save(
        &[per(|m| m.ssim, "ssim"), per(|m| m.mask_iou, "mask_iou")],
        &PlotOptions::default(),
        &dir.join("metrics_similarity.png"),
    )?;
    plot::save(
        &[per(|m| m.feature_distance, "feature_distance"), per(|m| m.masked_l1, "masked_l1")],
        &PlotOptions::default(),
        &dir.join("metrics_error.png"),
    )?;
    if let Some(log) = log.filter(|p| p.exists()) {
        let recs = read_loss_log(log)?;
        let series = |name: &str, f: fn(&LossRecord) -> f64| Series {
            name: name.to_string(),
            points: recs.iter().map(|r| (r.step as f64, f(r))).collect(),
        };
        let opts = PlotOptions {
            log_y: true,
            smooth: 50,
            ..PlotOptions::default()
        };
        plot::save(
            &[
                series("total", |r| r.total),
                series("pixel", |r| r.weighted.pixel),
                series("feature", |r| r.weighted.feature),
                series("mask", |r| r.weighted.mask),
                series("adversarial", |r| r.weighted.adversarial),
                series("tv", |r| r.weighted.tv),
            ],
            &opts,
            &dir.join("losses.png"),
        )?;
    }
    Ok(())
}

fn eval(args: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let avatar = Avatar::from_checkpoint(&ckpt)?;
    let identity = match args.identity {
        Some(id) => id,
        None => ckpt
            .identity_ids()
            .into_iter()
            .next()
            .ok_or_else(|| usage("checkpoint has no identities"))?,
    };
    let seq = load_sequence(&args.data)?;
    let frames: Vec<usize> = if args.all_frames {
        (0..seq.frames.len()).collect()
    } else {
        seq.test_indices().collect()
    };
    if frames.is_empty() {
        bail!(usage("dataset has no held-out frames; pass --all-frames"));
    }
    let report = evaluate(&avatar, &identity, &seq, &frames)?;
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    report.save(&args.report)?;
    if let Some(dir) = &args.plot {
        let log = args.ckpt.parent().map(|p| p.join(LOSS_LOG));
        write_plots(dir, &report, log.as_deref())?;
    }
    if let Some(dir) = &args.strips {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let other = match &args.compare {
            Some(p) => Some(Avatar::from_checkpoint(&Checkpoint::load(p)?)?),
            None => None,
        };
        for &f in &frames {
            let frame = &seq.frames[f];
            let raster = seq.proxy_raster(f)?;
            let mine = avatar.render_raster(&identity, &raster, &frame.background)?.image;
            let (_, h, w) = frame.image.dims3();
            let mine = mine.reshape(&[3, h, w])?;
            let mut parts = vec![frame.image.clone()];
            if let Some(o) = &other {
                let id = o.identity_ids().into_iter().next().unwrap_or_default();
                let theirs = o.render_raster(&id, &raster, &frame.background)?.image;
                parts.push(theirs.reshape(&[3, h, w])?);
            }
            parts.push(mine);
            let refs: Vec<&Tensor> = parts.iter().collect();
            imageio::save_rgb(&imageio::hstack(&refs)?, &dir.join(format!("strip_{f:06}.png")))?;
        }
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "identity": identity,
            "frames": frames.len(),
            "aggregate": report.aggregate,
            "band_iou": report.band_iou,
        }))?
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    anr_core::parallel::init_from_env();
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Keyframes(a) => keyframes(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Swap(a) => swap(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
