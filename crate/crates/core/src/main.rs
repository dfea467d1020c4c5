use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multipose::bench::{ablate, comparison_table, evaluate, evaluate_ground_truth, EvalConfig};
use multipose::control::FusionMode;
use multipose::data::{gen_synthetic_dataset, load_dataset, save_dataset, SceneConfig};
use multipose::diffusion::{train, NoiseSchedule, TrainConfig};
use multipose::image::{heatmap, write_ppm};
use multipose::masks::MaskPyramid;
use multipose::model::{ModelConfig, Net, ParamSet};
use multipose::pipeline::{generate, prepare, training_item, FirstBranch, GenOptions, SampleConfig};
use multipose::pose::{load_pose_json, PoseTrackSet};
use multipose::tensor_io::{read_tensor, read_weights, write_tensor, write_weights};
use multipose::Tensor;

#[derive(Parser)]
#[command(name = "multipose", version, about = "Multi-character pose- and text-guided toy video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate frames for a prompt and a pose track file.
    Generate(GenerateArgs),
    /// Export normalized region masks and their pyramids, or check an export.
    Masks(MasksArgs),
    /// Compare the full method against its ablations on a scene set.
    Ablate(AblateArgs),
    /// Compute metrics on generated or ground-truth frames.
    Eval(EvalArgs),
    /// Train a denoiser on a synthetic dataset.
    Train(TrainArgs),
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Write per-branch attention heatmaps.
    Inspect(InspectArgs),
}

#[derive(Args, Clone)]
struct Switches {
    /// Use the whole prompt with no region masks in cross-attention.
    #[arg(long)]
    no_spatial_attn: bool,
    /// Merge all control branches into one (composite pose, whole prompt).
    #[arg(long)]
    single_branch: bool,
    #[arg(long, default_value = "first-unmasked", value_parser = parse_fusion)]
    fusion_mode: FusionMode,
    /// Softmax sharpness of the region-mask normalization (>= 1).
    #[arg(long, default_value_t = 1.0)]
    mask_sharpness: f32,
    /// Input of the first control branch: composite or character.
    #[arg(long, default_value = "composite", value_parser = parse_first_branch)]
    first_branch: FirstBranch,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: multipose::Error| e.to_string())
}

fn parse_first_branch(s: &str) -> Result<FirstBranch, String> {
    s.parse().map_err(|e: multipose::Error| e.to_string())
}

impl Switches {
    fn options(&self) -> Result<GenOptions> {
        if !(self.mask_sharpness.is_finite() && self.mask_sharpness >= 1.0) {
            return Err(multipose::Error::Validation(format!("--mask-sharpness must be >= 1, got {}", self.mask_sharpness)).into());
        }
        Ok(GenOptions {
            spatial_attn: !self.no_spatial_attn,
            single_branch: self.single_branch,
            fusion: self.fusion_mode,
            sharpness: self.mask_sharpness,
            first_branch: self.first_branch,
            ..GenOptions::default()
        })
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Use only the first N frames of the pose file.
    #[arg(long)]
    frames: Option<usize>,
    #[command(flatten)]
    switches: Switches,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct MasksArgs {
    #[arg(long, required_unless_present = "check")]
    poses: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    mask_sharpness: f32,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(short, long, required_unless_present = "check")]
    output: Option<PathBuf>,
    /// Verify that the exported full-resolution masks of DIR sum to 1 per pixel.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["poses", "output"])]
    check: Option<PathBuf>,
}

#[derive(Args)]
struct SceneSource {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Without --data, synthesize this many scenes from --data-seed.
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    data_seed: u64,
}

impl SceneSource {
    fn load(&self) -> Result<Vec<multipose::data::Scene>> {
        Ok(match &self.data {
            Some(d) => load_dataset(d)?,
            None => gen_synthetic_dataset(&SceneConfig::default(), self.data_seed, self.count)?,
        })
    }
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    scenes: SceneSource,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    mask_sharpness: f32,
    /// Frame consistency on downsampled pixels only.
    #[arg(long)]
    raw: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Required unless --ground-truth is given.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    scenes: SceneSource,
    /// Score the dataset's own frames instead of generating.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    switches: Switches,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 800)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Random window of frames per training example.
    #[arg(long, default_value_t = 2)]
    clip_frames: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 6e-4)]
    lr: f32,
    /// Steps of linear warmup.
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    /// Learning rate reached by cosine decay at the last step.
    #[arg(long, default_value_t = 3e-5)]
    final_lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the small test architecture.
    #[arg(long)]
    tiny: bool,
    /// Write the per-step loss curve here.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    characters: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Diffusion step at which features are taken.
    #[arg(long, default_value_t = 500)]
    timestep: usize,
    #[command(flatten)]
    switches: Switches,
    #[arg(short, long)]
    output: PathBuf,
}

/// Builds a directory next to its destination and moves it into place
/// only when everything has been written.
struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
}

impl Staging {
    fn new(dest: &Path) -> Result<Self> {
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = dest.file_name().context("output path has no file name")?.to_string_lossy();
        let tmp = parent.join(format!(".{name}.partial{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self { tmp, dest: dest.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn commit(mut self) -> Result<()> {
        if self.dest.exists() {
            let old = self.tmp.with_extension("old");
            std::fs::rename(&self.dest, &old)?;
            std::fs::rename(&self.tmp, &self.dest)?;
            std::fs::remove_dir_all(&old)?;
        } else {
            std::fs::rename(&self.tmp, &self.dest)?;
        }
        self.tmp = PathBuf::new();
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.tmp.as_os_str().is_empty() && self.tmp.exists() {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest(entries: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={}", v.replace('\n', " "));
    }
    s
}

fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    Ok(ParamSet::from_weights(read_weights(path)?)?)
}

fn load_poses(path: &Path, frames: Option<usize>) -> Result<PoseTrackSet> {
    let mut poses = load_pose_json(path)?;
    if let Some(n) = frames {
        let have = poses.num_frames();
        if n == 0 || n > have {
            return Err(multipose::Error::Validation(format!("--frames {n} outside 1..={have}")).into());
        }
        for c in &mut poses.characters {
            c.frames.truncate(n);
        }
    }
    Ok(poses)
}

fn switch_entries(opts: &GenOptions) -> Vec<(&'static str, String)> {
    vec![
        ("spatial_attn", opts.spatial_attn.to_string()),
        ("single_branch", opts.single_branch.to_string()),
        ("fusion_mode", opts.fusion.to_string()),
        ("mask_sharpness", opts.sharpness.to_string()),
        ("first_branch", format!("{:?}", opts.first_branch).to_lowercase()),
    ]
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let opts = a.switches.options()?;
    let poses = load_poses(&a.poses, a.frames)?;
    let params = load_params(&a.weights)?;
    let cfg = SampleConfig { steps: a.steps, seed: a.seed, clip: true };
    let (frames, _) = generate(&params, &a.prompt, &poses, &opts, &cfg)?;
    let stage = Staging::new(&a.output)?;
    let n = frames.dims()[0];
    for f in 0..n {
        write_ppm(&frames.slice_outer(f), stage.path(&format!("frame_{f:03}.ppm")))?;
    }
    let mut m = vec![
        ("command", "generate".to_owned()),
        ("poses", a.poses.display().to_string()),
        ("prompt", a.prompt.clone()),
        ("weights", a.weights.display().to_string()),
        ("seed", a.seed.to_string()),
        ("steps", a.steps.to_string()),
        ("frames", n.to_string()),
        ("width", poses.width.to_string()),
        ("height", poses.height.to_string()),
    ];
    m.extend(switch_entries(&opts));
    write_text(&stage.path("manifest.txt"), &manifest(&m))?;
    stage.commit()
}

const GROUPS: [(&str, std::ops::Range<usize>); 3] = [("a", 0..3), ("b", 0..4), ("c", 3..4)];

fn cmd_masks(a: &MasksArgs) -> Result<()> {
    if let Some(dir) = &a.check {
        return check_masks(dir);
    }
    let (poses_path, output) = (a.poses.as_ref().expect("clap"), a.output.as_ref().expect("clap"));
    if !(a.mask_sharpness.is_finite() && a.mask_sharpness >= 1.0) {
        return Err(multipose::Error::Validation(format!("--mask-sharpness must be >= 1, got {}", a.mask_sharpness)).into());
    }
    let poses = load_poses(poses_path, a.frames)?;
    let opts = GenOptions { sharpness: a.mask_sharpness, ..GenOptions::default() };
    let maps = multipose::pose::rasterize_all(&poses, &opts.style);
    let (_, pyr) = multipose::masks::mask_flow(&maps, opts.sharpness)?;
    let stage = Staging::new(output)?;
    for f in 0..pyr.frames() {
        for k in 0..pyr.characters() {
            for (g, levels) in GROUPS {
                for l in levels {
                    let m = pyr.mask(l, k).slice_outer(f);
                    write_tensor(&m, stage.path(&format!("f{f:03}_c{}_{g}{l}.fymt", k + 1)))?;
                }
            }
            write_ppm(&heatmap(&pyr.mask(0, k).slice_outer(f))?, stage.path(&format!("f{f:03}_c{}.ppm", k + 1)))?;
        }
    }
    let m = [
        ("command", "masks".to_owned()),
        ("poses", poses_path.display().to_string()),
        ("mask_sharpness", a.mask_sharpness.to_string()),
        ("frames", pyr.frames().to_string()),
        ("characters", pyr.characters().to_string()),
        ("partition_error", format!("{:e}", max_partition_error(&pyr))),
    ];
    write_text(&stage.path("manifest.txt"), &manifest(&m))?;
    stage.commit()
}

fn max_partition_error(pyr: &MaskPyramid) -> f64 {
    pyr.partition_error() as f64
}

/// Recompute per-pixel sums of the exported full-resolution masks.
fn check_masks(dir: &Path) -> Result<()> {
    let mut by_frame: std::collections::BTreeMap<String, Vec<Tensor>> = Default::default();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_b0.fymt") {
            let frame = stem.split('_').next().unwrap_or_default().to_owned();
            by_frame.entry(frame).or_default().push(read_tensor(dir.join(&name))?);
        }
    }
    if by_frame.is_empty() {
        return Err(multipose::Error::Validation(format!("{} holds no full-resolution masks", dir.display())).into());
    }
    let mut worst = 0.0f64;
    for masks in by_frame.values() {
        let mut sum = vec![0.0f64; masks[0].len()];
        for m in masks {
            if m.dims() != masks[0].dims() {
                return Err(multipose::Error::shape("masks of one frame differ in size").into());
            }
            for (s, &v) in sum.iter_mut().zip(m.data()) {
                *s += v as f64;
            }
        }
        worst = sum.iter().map(|s| (s - 1.0).abs()).fold(worst, f64::max);
    }
    println!("frames={} max_partition_error={worst:e}", by_frame.len());
    if worst > 1e-5 {
        return Err(multipose::Error::Validation(format!("masks do not sum to 1: max error {worst:e}")).into());
    }
    println!("ok");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let params = load_params(&a.weights)?;
    let scenes = a.scenes.load()?;
    let base = Switches {
        no_spatial_attn: false,
        single_branch: false,
        fusion_mode: FusionMode::FirstUnmasked,
        mask_sharpness: a.mask_sharpness,
        first_branch: FirstBranch::Composite,
    }
    .options()?;
    let cfg = EvalConfig { steps: a.steps, seed: a.seed, model_features: !a.raw };
    let reports = ablate(&params, &scenes, &base, &cfg)?;
    let stage = Staging::new(&a.output)?;
    let mut text = comparison_table(&reports);
    let mut kv = String::new();
    for r in &reports {
        text.push('\n');
        text.push_str(&r.to_text());
        kv.push_str(&r.to_key_values());
    }
    print!("{}", comparison_table(&reports));
    write_text(&stage.path("report.txt"), &text)?;
    write_text(&stage.path("report.kv"), &kv)?;
    let m = [
        ("command", "ablate".to_owned()),
        ("weights", a.weights.display().to_string()),
        ("scenes", scenes.len().to_string()),
        ("steps", a.steps.to_string()),
        ("seed", a.seed.to_string()),
        ("regimes", reports.iter().map(|r| r.label.clone()).collect::<Vec<_>>().join(",")),
    ];
    write_text(&stage.path("manifest.txt"), &manifest(&m))?;
    stage.commit()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let opts = a.switches.options()?;
    let scenes = a.scenes.load()?;
    let params = match (&a.weights, a.ground_truth) {
        (Some(w), _) => load_params(w)?,
        (None, true) => ParamSet::init(ModelConfig::default(), a.seed),
        (None, false) => bail!(multipose::Error::Validation("--weights is required unless --ground-truth is given".into())),
    };
    let cfg = EvalConfig { steps: a.steps, seed: a.seed, model_features: !a.raw && a.weights.is_some() };
    let report = if a.ground_truth {
        evaluate_ground_truth(&params, &scenes, &opts, &cfg)?
    } else {
        evaluate(&params, &scenes, &opts, "generated", &cfg)?.0
    };
    let stage = Staging::new(&a.output)?;
    print!("{}", report.to_text());
    write_text(&stage.path("report.txt"), &report.to_text())?;
    write_text(&stage.path("report.kv"), &report.to_key_values())?;
    let mut m = vec![
        ("command", "eval".to_owned()),
        ("scenes", scenes.len().to_string()),
        ("ground_truth", a.ground_truth.to_string()),
        ("steps", a.steps.to_string()),
        ("seed", a.seed.to_string()),
    ];
    m.extend(switch_entries(&opts));
    write_text(&stage.path("manifest.txt"), &manifest(&m))?;
    stage.commit()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.batch == 0 || a.clip_frames == 0 {
        bail!(multipose::Error::Validation("--batch and --clip-frames must be positive".into()));
    }
    let scenes = load_dataset(&a.data)?;
    let config = if a.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
    let mut params = ParamSet::<f32>::init(config, a.seed);
    let opts = GenOptions::default();
    let items = scenes.iter().map(|s| training_item(s, &params, &opts)).collect::<multipose::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        seed: a.seed,
        lr: a.lr,
        batch: a.batch,
        steps: a.steps,
        clip_frames: Some(a.clip_frames),
        grad_clip: Some(1.0),
        warmup: a.warmup,
        final_lr: Some(a.final_lr),
    };
    let started = std::time::Instant::now();
    let curve = train(&mut params, &items, &NoiseSchedule::default(), &cfg, |step, loss| {
        if (step + 1) % 50 == 0 {
            log::info!("step {} loss {loss:.4} ({:.0}s)", step + 1, started.elapsed().as_secs_f64());
        }
    })?;
    write_weights(&params.to_weights(), &a.output)?;
    if let Some(log_path) = &a.loss_log {
        let text: String = curve.iter().enumerate().map(|(i, l)| format!("{i} {l}\n")).collect();
        multipose::tensor_io::write_atomic(log_path, text.as_bytes())?;
    }
    println!(
        "trained {} steps on {} scenes in {:.0}s; final loss {:.4}",
        a.steps,
        scenes.len(),
        started.elapsed().as_secs_f64(),
        curve.last().copied().unwrap_or(f32::NAN)
    );
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SceneConfig { width: a.width, height: a.height, frames: a.frames, characters: a.characters, ..SceneConfig::default() };
    if a.width % 8 != 0 || a.height % 8 != 0 || a.width == 0 || a.height == 0 || a.frames == 0 {
        bail!(multipose::Error::Validation("canvas sides must be positive multiples of 8 and --frames positive".into()));
    }
    let scenes = gen_synthetic_dataset(&cfg, a.seed, a.count)?;
    let stage = Staging::new(&a.output)?;
    save_dataset(&scenes, &stage.tmp)?;
    let m = [
        ("command", "gen-data".to_owned()),
        ("count", a.count.to_string()),
        ("characters", a.characters.to_string()),
        ("frames", a.frames.to_string()),
        ("width", a.width.to_string()),
        ("height", a.height.to_string()),
        ("seed", a.seed.to_string()),
    ];
    write_text(&stage.path("manifest.txt"), &manifest(&m))?;
    stage.commit()
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let opts = a.switches.options()?;
    let poses = load_poses(&a.poses, None)?;
    let params = load_params(&a.weights)?;
    let sched = NoiseSchedule::default();
    sched.check(a.timestep)?;
    let prepared = prepare(&a.prompt, &poses, &params.vocab, params.config.text_dim, &opts)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
    let dims = vec![poses.num_frames(), params.config.image_channels, poses.height, poses.width];
    let x_t = multipose::diffusion::gaussian(dims, &mut rng);
    let mut net = Net::new(&params);
    let x = net.tape.leaf(x_t);
    let out = net.denoiser(x, a.timestep, &prepared.cond, None)?;
    let stage = Staging::new(&a.output)?;
    for (k, &v) in out.attn_branches.iter().enumerate() {
        let feat = net.tape.value(v);
        let d = feat.dims();
        let (c, hw) = (d[1], d[2] * d[3]);
        for f in 0..d[0] {
            let x = &feat.data()[f * c * hw..(f + 1) * c * hw];
            let energy = Tensor::from_fn(vec![d[2], d[3]], |i| (0..c).map(|ch| x[ch * hw + i].powi(2)).sum::<f32>().sqrt());
            write_ppm(&heatmap(&energy)?, stage.path(&format!("attn_branch{}_f{f:03}.ppm", k + 1)))?;
        }
    }
    let mut m = vec![
        ("command", "inspect".to_owned()),
        ("poses", a.poses.display().to_string()),
        ("prompt", a.prompt.clone()),
        ("seed", a.seed.to_string()),
        ("timestep", a.timestep.to_string()),
        ("branches", out.attn_branches.len().to_string()),
    ];
    m.extend(switch_entries(&opts));
    write_text(&stage.path("manifest.txt"), &manifest(&m))?;
    stage.commit()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FYM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| multipose::Error::Validation(format!("FYM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Masks(a) => cmd_masks(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Train(a) => cmd_train(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<multipose::Error>() {
            return e.exit_code() as u8;
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
