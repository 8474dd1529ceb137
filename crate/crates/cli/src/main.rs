//! `revision`: command-line front end for the motion pipeline.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies
//! flag overrides, calls into `revision_core` and prints the paths it wrote
//! to stdout. Logs go to stderr. Exit codes: 0 ok, 1 domain error, 2 usage
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use revision_core::geometry::{write_channels, GeometryError};
use revision_core::io::{read_json, read_motion_set, write_json, write_motion_set, IoError};
use revision_core::longvideo::{
    extend_motion, generate_long, plan_windows, stitch, LongVideoError, WindowPlan, DEFAULT_STRIDE, DEFAULT_WINDOW,
};
use revision_core::motion::{motion_strength, MotionError};
use revision_core::perturb::PerturbError;
use revision_core::pipeline::{
    clip_masks, extract_motion, generate_corpus, mask_miou, motion_channels, pmp_items, psnr, refine_with_tags,
    run_revision_with, ssim, traj_mse, walker_scene, PipelineError, RevisionConfig, UserCondition,
};
use revision_core::pmp::{
    draw_example, evaluate_denoising, grad_check, load_checkpoint, pmp_train, save_checkpoint,
    write_training_log, Conditioning, PmpConfig, PmpError, PmpModel, TrainConfig,
};
use revision_core::rng;
use revision_core::simgen::{SceneSpec, SimError, SyntheticGenerator, VideoClip};

#[derive(Parser)]
#[command(name = "revision", version, about = "Extract, refine and regenerate motion in synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes and their ground-truth motions.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of scenes (default: corpus.scenes from the config).
        #[arg(long)]
        count: Option<usize>,
        /// Objects per scene (default: corpus.objects).
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Train the motion prior and write a checkpoint plus its loss log.
    TrainPmp {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path; the loss log (.csv) and held-out summary
        /// (.summary.json) go next to it.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Corpus written by gen-corpus (default: generate one in memory).
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of a fresh prior.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Refine one motion file with a trained prior.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Motion set JSON.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Scene whose objects supply the conditioning tags.
        #[arg(long, value_name = "PATH")]
        scene: Option<PathBuf>,
        /// Comma-separated tags used when no scene is given.
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Read per-object motion off a rendered clip.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        clip: PathBuf,
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
        /// The clip was rendered with the fine generator config.
        #[arg(long)]
        fine: bool,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Rasterize motions into full-motion condition channels.
    Rasterize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
        #[arg(long, value_name = "PATH")]
        motion: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full three-stage pipeline on one scene.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Scene JSON (default: the config's scene, else the walker fixture).
        #[arg(long, value_name = "PATH")]
        scene: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Extend motions to a long sequence; optionally generate the long clip.
    Extend {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
        #[arg(long, value_name = "PATH")]
        motion: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        /// Also generate per-window clips and the stitched clip.
        #[arg(long)]
        generate: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Stitch per-window clips into one clip.
    Stitch {
        /// Window plan JSON written by `extend`.
        #[arg(long, value_name = "PATH")]
        plan: PathBuf,
        /// Clip directories in window order.
        #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
        clips: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare two clip directories or two motion set files.
    Eval {
        prediction: PathBuf,
        reference: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorpusSettings {
    scenes: usize,
    objects: usize,
    duration: usize,
    /// Held-out items scored after training.
    held_out: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self { scenes: 512, objects: 1, duration: 32, held_out: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LongSettings {
    target_len: usize,
    window: usize,
    stride: usize,
}

impl Default for LongSettings {
    fn default() -> Self {
        Self { target_len: 128, window: DEFAULT_WINDOW, stride: DEFAULT_STRIDE }
    }
}

/// Everything a run needs, from one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    seed: u64,
    revision: RevisionConfig,
    pmp: PmpConfig,
    train: TrainConfig,
    corpus: CorpusSettings,
    long: LongSettings,
    scene: Option<SceneSpec>,
    user_condition: Option<UserCondition>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            revision: RevisionConfig::default(),
            pmp: PmpConfig::desk(),
            train: TrainConfig::desk(),
            corpus: CorpusSettings::default(),
            long: LongSettings::default(),
            scene: None,
            user_condition: None,
        }
    }
}

fn load_config(common: &Common) -> Result<CliConfig> {
    let mut config: CliConfig = match &common.config {
        Some(path) => read_json(path)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.revision.seed = config.seed;
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn emit(path: &Path) {
    println!("{}", path.display());
}

fn checkpoint_path(flag: &Option<PathBuf>, config: &CliConfig) -> Result<PathBuf> {
    let path = flag.clone().unwrap_or_else(|| config.revision.pmp_checkpoint.clone());
    if path.as_os_str().is_empty() {
        bail!("no prior checkpoint: pass --checkpoint or set revision.pmp_checkpoint (see train-pmp)");
    }
    Ok(path)
}

fn read_scene(path: &Path) -> Result<SceneSpec> {
    let scene: SceneSpec = read_json(path)?;
    scene.validate()?;
    Ok(scene)
}

#[derive(Serialize, Deserialize)]
struct CorpusIndexEntry {
    scene: String,
    motions: String,
    mode: revision_core::geometry::ConditionMode,
}

fn gen_corpus(common: &Common, out: &Path, count: Option<usize>, objects: Option<usize>) -> Result<()> {
    let config = load_config(common)?;
    let count = count.unwrap_or(config.corpus.scenes);
    let objects = objects.unwrap_or(config.corpus.objects);
    eprintln!("generating {count} scenes of {objects} object(s), seed {}", config.seed);
    let entries = generate_corpus(count, objects, config.corpus.duration, config.revision.training_mix, config.seed)?;
    ensure_dir(out)?;
    let mut index = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let scene = format!("scene_{i:04}.json");
        let motions = format!("motions_{i:04}.json");
        write_json(&out.join(&scene), &e.scene)?;
        write_motion_set(&out.join(&motions), &e.motions)?;
        index.push(CorpusIndexEntry { scene, motions, mode: e.mode });
    }
    let index_path = out.join("corpus.json");
    write_json(&index_path, &index)?;
    emit(&index_path);
    Ok(())
}

fn read_corpus(dir: &Path) -> Result<Vec<revision_core::pipeline::CorpusEntry>> {
    let index: Vec<CorpusIndexEntry> = read_json(&dir.join("corpus.json"))?;
    index
        .into_iter()
        .map(|e| {
            Ok(revision_core::pipeline::CorpusEntry {
                scene: read_scene(&dir.join(&e.scene))?,
                mode: e.mode,
                motions: read_motion_set(&dir.join(&e.motions))?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    steps: usize,
    seconds: f64,
    held_out: Vec<revision_core::pmp::DenoiseScore>,
    mean_improvement: f64,
}

fn train_pmp(common: &Common, out: &Path, corpus: &Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(steps) = steps {
        config.train.steps = steps;
    }
    let seed = config.seed;
    let entries = match corpus {
        Some(dir) => read_corpus(dir)?,
        None => generate_corpus(
            config.corpus.scenes,
            config.corpus.objects,
            config.corpus.duration,
            config.revision.training_mix,
            rng::derive(seed, 1),
        )?,
    };
    let items = pmp_items(&entries);
    let held = pmp_items(&generate_corpus(
        config.corpus.held_out,
        config.corpus.objects,
        config.corpus.duration,
        config.revision.training_mix,
        rng::derive(seed, 2),
    )?);
    eprintln!("training on {} motions for {} steps", items.len(), config.train.steps);
    let model = PmpModel::init(config.pmp.clone(), seed)?;
    let start = Instant::now();
    let (model, log) = pmp_train(model, &items, &config.train, seed)?;
    let seconds = start.elapsed().as_secs_f64();
    eprintln!("trained in {seconds:.1} s");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_checkpoint(&model, out)?;
    emit(out);
    let log_path = out.with_extension("csv");
    write_training_log(&log, &log_path).with_context(|| format!("writing {}", log_path.display()))?;
    emit(&log_path);
    let scores = evaluate_denoising(&model, &held, rng::derive(seed, 3))?;
    for s in &scores {
        eprintln!(
            "{:?}: perturbed {:.3e} refined {:.3e} ({:+.1}%)",
            s.kind,
            s.perturbed_mse,
            s.refined_mse,
            100.0 * s.improvement()
        );
    }
    let mean_improvement = scores.iter().map(|s| s.improvement()).sum::<f64>() / scores.len() as f64;
    let summary_path = out.with_extension("summary.json");
    write_json(
        &summary_path,
        &TrainSummary { seed, steps: config.train.steps, seconds, held_out: scores, mean_improvement },
    )?;
    emit(&summary_path);
    Ok(())
}

fn grad_check_cmd(common: &Common, layers: Option<usize>, epsilon: f64) -> Result<()> {
    let config = load_config(common)?;
    let mut pmp = config.pmp.clone();
    if let Some(layers) = layers {
        pmp.layers = layers;
    }
    let model = PmpModel::init(pmp, config.seed)?;
    let items = pmp_items(&generate_corpus(4, 1, config.corpus.duration, config.revision.training_mix, config.seed)?);
    let example = draw_example(&model, &items, &config.train.perturb, rng::derive(config.seed, 1))?;
    let err = grad_check(&model, &example, epsilon)?;
    eprintln!("layers {}, epsilon {epsilon:e}", model.config.layers);
    println!("{err:e}");
    Ok(())
}

fn tags_for(scene: Option<&SceneSpec>, tags: &[String], count: usize) -> Result<Vec<Vec<String>>> {
    match scene {
        Some(s) => {
            if s.objects.len() != count {
                bail!("scene has {} objects, motion file has {count}", s.objects.len());
            }
            Ok(s.objects.iter().map(|o| o.conditioning_tags()).collect())
        }
        None => Ok(vec![tags.to_vec(); count]),
    }
}

fn denoise(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    input: &Path,
    scene: &Option<PathBuf>,
    tags: &[String],
    out: &Path,
) -> Result<()> {
    let config = load_config(common)?;
    let pmp = load_checkpoint(&checkpoint_path(checkpoint, &config)?)?;
    let motions = read_motion_set(input)?;
    let scene = scene.as_deref().map(read_scene).transpose()?;
    let tags = tags_for(scene.as_ref(), tags, motions.len())?;
    let refined = motions
        .iter()
        .zip(&tags)
        .map(|(m, t)| refine_with_tags(&pmp, m, t))
        .collect::<Result<Vec<_>, _>>()?;
    write_motion_set(out, &refined)?;
    emit(out);
    Ok(())
}

fn extract(common: &Common, clip: &Path, scene: &Path, fine: bool, out: &Path) -> Result<()> {
    let config = load_config(common)?;
    let scene = read_scene(scene)?;
    let clip = VideoClip::read_dir(clip)?;
    let gen = if fine { &config.revision.fine } else { &config.revision.coarse };
    let motions = extract_motion(&clip, &scene, gen)?;
    write_motion_set(out, &motions)?;
    emit(out);
    Ok(())
}

fn rasterize(common: &Common, scene: &Path, motion: &Path, out: &Path) -> Result<()> {
    let config = load_config(common)?;
    let mut scene = read_scene(scene)?;
    let motions = read_motion_set(motion)?;
    if let Some(m) = motions.first() {
        // Channels follow the motion's own length.
        scene.duration = m.len();
    }
    let channels = motion_channels(&scene, &motions, &config.revision)?;
    ensure_dir(out)?;
    write_channels(out, &channels)?;
    emit(out);
    Ok(())
}

fn run(common: &Common, out: &Path, scene: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> Result<()> {
    let config = load_config(common)?;
    let scene = match scene {
        Some(p) => read_scene(p)?,
        None => config.scene.clone().unwrap_or_else(walker_scene),
    };
    let user = config.user_condition.clone().unwrap_or(UserCondition::Empty);
    let ckpt = checkpoint_path(checkpoint, &config)?;
    let pmp = load_checkpoint(&ckpt)?;
    let mut revision = config.revision.clone();
    revision.pmp_checkpoint = ckpt;
    eprintln!("running {} with seed {}", scene.name, revision.seed);
    ensure_dir(out)?;
    let result = run_revision_with(&SyntheticGenerator, &pmp, &scene, &user, &revision, Some(out))?;
    eprintln!(
        "coarse traj_mse {:.4e}, final traj_mse {:.4e}",
        result.coarse_report.traj_mse, result.report.traj_mse
    );
    for p in ["run.json", "coarse", "stage2", "channels", "final", "report.json"] {
        emit(&out.join(p));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn extend(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    scene: &Path,
    motion: &Path,
    target: Option<usize>,
    generate: bool,
    out: &Path,
) -> Result<()> {
    let config = load_config(common)?;
    let pmp = load_checkpoint(&checkpoint_path(checkpoint, &config)?)?;
    let scene = read_scene(scene)?;
    let motions = read_motion_set(motion)?;
    if motions.len() != scene.objects.len() {
        bail!("scene has {} objects, motion file has {}", scene.objects.len(), motions.len());
    }
    let target = target.unwrap_or(config.long.target_len);
    let plan = plan_windows(target, config.long.window, config.long.stride)?;
    let extended = motions
        .iter()
        .zip(&scene.objects)
        .map(|(m, o)| {
            let cond = Conditioning {
                tokens: pmp.config.encode_tokens(&o.conditioning_tags())?,
                strength: motion_strength(m)?.mean,
                category: o.category,
            };
            extend_motion(m, plan.padded_total(), &pmp, &cond)
        })
        .collect::<Result<Vec<_>, LongVideoError>>()?;
    ensure_dir(out)?;
    let motion_path = out.join("extended.json");
    write_motion_set(&motion_path, &extended)?;
    emit(&motion_path);
    let plan_path = out.join("plan.json");
    write_json(&plan_path, &plan)?;
    emit(&plan_path);
    if generate {
        let long = generate_long(&SyntheticGenerator, &scene, &extended, &plan, &config.revision, config.seed)?;
        for (k, clip) in long.clips.iter().enumerate() {
            let dir = out.join(format!("window_{k:02}"));
            ensure_dir(&dir)?;
            clip.write_dir(&dir)?;
            emit(&dir);
        }
        let dir = out.join("stitched");
        ensure_dir(&dir)?;
        long.clip.write_dir(&dir)?;
        emit(&dir);
        let stitched = out.join("stitched_motion.json");
        write_motion_set(&stitched, &long.stitched)?;
        emit(&stitched);
    }
    Ok(())
}

fn stitch_cmd(plan: &Path, clips: &[PathBuf], out: &Path) -> Result<()> {
    let plan: WindowPlan = read_json(plan)?;
    let clips = clips.iter().map(|d| VideoClip::read_dir(d)).collect::<Result<Vec<_>, _>>()?;
    let clip = stitch(&clips, &plan)?;
    ensure_dir(out)?;
    clip.write_dir(out)?;
    emit(out);
    Ok(())
}

#[derive(Serialize)]
#[serde(untagged)]
enum EvalOutput {
    Clips { psnr: f64, ssim: f64, mask_miou: f64 },
    Motions { traj_mse: f64 },
}

fn eval(prediction: &Path, reference: &Path, out: &Option<PathBuf>) -> Result<()> {
    let report = match (prediction.is_dir(), reference.is_dir()) {
        (true, true) => {
            let (a, b) = (VideoClip::read_dir(prediction)?, VideoClip::read_dir(reference)?);
            EvalOutput::Clips {
                psnr: psnr(&a, &b)?,
                ssim: ssim(&a, &b)?,
                mask_miou: mask_miou(&clip_masks(&a), &clip_masks(&b))?,
            }
        }
        (false, false) => {
            EvalOutput::Motions { traj_mse: traj_mse(&read_motion_set(prediction)?, &read_motion_set(reference)?)? }
        }
        _ => bail!("compare two clip directories or two motion files, not one of each"),
    };
    println!("{}", serde_json::to_string(&report)?);
    if let Some(path) = out {
        write_json(path, &report)?;
        emit(path);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus { common, out, count, objects } => gen_corpus(common, out, *count, *objects),
        Command::TrainPmp { common, out, corpus, steps } => train_pmp(common, out, corpus, *steps),
        Command::GradCheck { common, layers, epsilon } => grad_check_cmd(common, *layers, *epsilon),
        Command::Denoise { common, checkpoint, input, scene, tags, out } => {
            denoise(common, checkpoint, input, scene, tags, out)
        }
        Command::Extract { common, clip, scene, fine, out } => extract(common, clip, scene, *fine, out),
        Command::Rasterize { common, scene, motion, out } => rasterize(common, scene, motion, out),
        Command::Run { common, out, scene, checkpoint } => run(common, out, scene, checkpoint),
        Command::Extend { common, checkpoint, scene, motion, target, generate, out } => {
            extend(common, checkpoint, scene, motion, *target, *generate, out)
        }
        Command::Stitch { plan, clips, out } => stitch_cmd(plan, clips, out),
        Command::Eval { prediction, reference, out } => eval(prediction, reference, out),
    }
}

/// Name of the library error type behind a failure, for the error line.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        let name = if cause.is::<PipelineError>() {
            "PipelineError"
        } else if cause.is::<LongVideoError>() {
            "LongVideoError"
        } else if cause.is::<PmpError>() {
            "PmpError"
        } else if cause.is::<SimError>() {
            "SimError"
        } else if cause.is::<GeometryError>() {
            "GeometryError"
        } else if cause.is::<PerturbError>() {
            "PerturbError"
        } else if cause.is::<MotionError>() {
            "MotionError"
        } else if cause.is::<IoError>() {
            "IoError"
        } else {
            continue;
        };
        return name;
    }
    "Error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e:#}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
