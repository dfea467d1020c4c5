//! From prompt and pose tracks to conditioning, and from noise to frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::TextRows;
use crate::control::{level_masks, FusionMode};
use crate::diffusion::{ddim_sample, gaussian, ModelPredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::masks::{mask_flow, MaskPyramid, RegionMasks};
use crate::model::{Conditioning, ControlInput, ParamSet};
use crate::pose::{composite, rasterize_all, PoseTrackSet, RasterStyle};
use crate::prompt::{parse_prompt, split_prompt, token_rows, SplitPrompt, Vocabulary};
use crate::tensor::{Scalar, Tensor};

/// What the first control branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstBranch {
    /// Union of all pose maps and the whole prompt.
    #[default]
    Composite,
    /// Character 1's pose map and split prompt.
    Character,
}

impl std::str::FromStr for FirstBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(Self::Composite),
            "character" => Ok(Self::Character),
            o => Err(Error::Validation(format!("unknown first-branch input {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub spatial_attn: bool,
    pub single_branch: bool,
    pub fusion: FusionMode,
    pub sharpness: f32,
    pub first_branch: FirstBranch,
    pub style: RasterStyle,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            spatial_attn: true,
            single_branch: false,
            fusion: FusionMode::FirstUnmasked,
            sharpness: 1.0,
            first_branch: FirstBranch::Composite,
            style: RasterStyle::default(),
        }
    }
}

impl GenOptions {
    /// These options with every ablation switch reset.
    pub fn full(self) -> Self {
        GenOptions { spatial_attn: true, single_branch: false, fusion: FusionMode::FirstUnmasked, ..self }
    }
}

/// Inference-time variants compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Full,
    NoSpatialAttn,
    SingleBranch,
    AllMasked,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Full, Regime::NoSpatialAttn, Regime::SingleBranch, Regime::AllMasked];

    pub fn label(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::NoSpatialAttn => "no-spatial-attn",
            Regime::SingleBranch => "single-branch",
            Regime::AllMasked => "eq3-all-masked",
        }
    }

    /// `base` with this regime's switches applied.
    pub fn apply(self, base: &GenOptions) -> GenOptions {
        let mut o = base.clone();
        match self {
            Regime::Full => {}
            Regime::NoSpatialAttn => o.spatial_attn = false,
            Regime::SingleBranch => o.single_branch = true,
            Regime::AllMasked => o.fusion = FusionMode::AllMasked,
        }
        o
    }
}

/// Conditioning plus the intermediate artifacts it was built from.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cond: Conditioning<f32>,
    pub split: SplitPrompt,
    pub full_prompt: String,
    pub pose_maps: Vec<Tensor>,
    pub regions: RegionMasks,
    pub pyramid: MaskPyramid,
}

fn rows<T: Scalar>(prompt: &str, vocab: &Vocabulary, dim: usize) -> Result<TextRows<T>> {
    let (rows, tokens) = token_rows(prompt, vocab, dim)?;
    Ok(TextRows { rows, tokens })
}

/// Parse, split, rasterize and build masks, then arrange branch inputs
/// according to `opts`.
pub fn prepare(prompt: &str, poses: &PoseTrackSet, vocab: &Vocabulary, text_dim: usize, opts: &GenOptions) -> Result<Prepared> {
    let tagged = parse_prompt(prompt)?;
    let n = poses.num_characters();
    let split = split_prompt(&tagged, n)?;
    let full_prompt = tagged.plain();
    let pose_maps = rasterize_all(poses, &opts.style);
    let (regions, pyramid) = mask_flow(&pose_maps, opts.sharpness)?;
    let frames = poses.num_frames().max(1);
    let (h, w) = (poses.height, poses.width);
    let ones = MaskPyramid::ones(frames, h, w)?;

    let (attn_text, attn_masks) = if opts.spatial_attn {
        let t = split.prompts.iter().map(|p| rows(p, vocab, text_dim)).collect::<Result<_>>()?;
        (t, level_masks(&pyramid))
    } else {
        (vec![rows(&full_prompt, vocab, text_dim)?], level_masks(&ones))
    };

    let whole = composite(&pose_maps);
    let (control, control_masks) = if opts.single_branch {
        let c = ControlInput { pose: whole, text: rows(&full_prompt, vocab, text_dim)? };
        (vec![c], level_masks(&ones))
    } else {
        let branches = (0..n)
            .map(|i| {
                let (pose, text) = if i == 0 && opts.first_branch == FirstBranch::Composite {
                    (whole.clone(), full_prompt.as_str())
                } else {
                    (pose_maps[i].clone(), split.prompts[i].as_str())
                };
                Ok(ControlInput { pose, text: rows(text, vocab, text_dim)? })
            })
            .collect::<Result<_>>()?;
        (branches, level_masks(&pyramid))
    };
    let cond = Conditioning { attn_text, attn_masks, control, control_masks, fusion: opts.fusion };
    Ok(Prepared { cond, split, full_prompt, pose_maps, regions, pyramid })
}

/// Map `[0, 1]` pixels to the model's `[-1, 1]` range and back.
pub fn to_model_space(frames: &Tensor) -> Tensor {
    frames.map(|v| 2.0 * v - 1.0)
}

pub fn to_pixels(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
    pub clip: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, seed: 0, clip: true }
    }
}

/// Sample `[frames, channels, h, w]` pixels for prepared conditioning.
pub fn sample_frames(params: &ParamSet<f32>, prepared: &Prepared, sched: &NoiseSchedule, cfg: &SampleConfig) -> Result<Tensor> {
    let frames = prepared.cond.frames();
    let (h, w) = prepared.pyramid.size(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = gaussian(vec![frames, params.config.image_channels, h, w], &mut rng);
    let predictor = ModelPredictor { params, cond: &prepared.cond };
    let x = ddim_sample(&predictor, sched, start, cfg.steps, cfg.clip)?;
    Ok(to_pixels(&x))
}

/// Full text-and-pose to frames pipeline.
pub fn generate(
    params: &ParamSet<f32>,
    prompt: &str,
    poses: &PoseTrackSet,
    opts: &GenOptions,
    cfg: &SampleConfig,
) -> Result<(Tensor, Prepared)> {
    if poses.width % 8 != 0 || poses.height % 8 != 0 {
        return Err(Error::Geometry(format!(
            "canvas {}x{} must be divisible by 8",
            poses.width, poses.height
        )));
    }
    let prepared = prepare(prompt, poses, &params.vocab, params.config.text_dim, opts)?;
    let frames = sample_frames(params, &prepared, &NoiseSchedule::default(), cfg)?;
    Ok((frames, prepared))
}

/// Clean frames in model space plus full-method conditioning for a scene.
pub fn training_item(scene: &crate::data::Scene, params: &ParamSet<f32>, opts: &GenOptions) -> Result<crate::diffusion::TrainItem> {
    let prepared = prepare(&scene.caption, &scene.poses, &params.vocab, params.config.text_dim, opts)?;
    Ok(crate::diffusion::TrainItem { x0: to_model_space(&scene.frames), cond: prepared.cond })
}
