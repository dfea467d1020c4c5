//! Dataset-level evaluation and the ablation comparison.

use rayon::prelude::*;

use crate::data::Scene;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::metrics::{MetricReport, Truth};
use crate::model::{Conditioning, Net, ParamSet};
use crate::pipeline::{prepare, sample_frames, to_model_space, GenOptions, Regime, SampleConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub steps: usize,
    /// Scene `i` is sampled from seed `seed + i` in every regime.
    pub seed: u64,
    /// Also measure consistency on the denoiser's bottleneck features.
    pub model_features: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { steps: 10, seed: 0, model_features: true }
    }
}

/// Bottleneck activations of clean `[F, 3, h, w]` pixels at step 0.
pub fn model_features(params: &ParamSet<f32>, cond: &Conditioning<f32>, frames: &Tensor) -> Result<Tensor> {
    let mut net = Net::new(params);
    let x = net.tape.leaf(to_model_space(frames));
    let out = net.denoiser(x, 0, cond, None)?;
    Ok(net.tape.value(out.bottleneck).clone())
}

/// Generated frames and metrics of one scene.
pub struct SceneResult {
    pub frames: Tensor,
    pub features: Option<Tensor>,
    pub truth: Truth,
}

fn run_scene(params: &ParamSet<f32>, scene: &Scene, index: usize, opts: &GenOptions, cfg: &EvalConfig) -> Result<SceneResult> {
    let sched = NoiseSchedule::default();
    let prepared = prepare(&scene.caption, &scene.poses, &params.vocab, params.config.text_dim, opts)?;
    let sample = SampleConfig { steps: cfg.steps, seed: cfg.seed.wrapping_add(index as u64), clip: true };
    let frames = sample_frames(params, &prepared, &sched, &sample)?;
    let features = if cfg.model_features {
        // One fixed feature extractor for every regime: the full method's
        // conditioning.
        let full = prepare(&scene.caption, &scene.poses, &params.vocab, params.config.text_dim, &opts.clone().full())?;
        Some(model_features(params, &full.cond, &frames)?)
    } else {
        None
    };
    Ok(SceneResult { frames, features, truth: Truth::of_scene(scene) })
}

/// Generate every scene under `opts` and aggregate the metrics.
pub fn evaluate(
    params: &ParamSet<f32>,
    scenes: &[Scene],
    opts: &GenOptions,
    label: &str,
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<SceneResult>)> {
    let results: Vec<SceneResult> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_scene(params, s, i, opts, cfg))
        .collect::<Result<_>>()?;
    let table = params.get("text.table")?;
    let mut report = MetricReport::new(label);
    for r in &results {
        report.add_scene(&r.frames, &r.truth, table, &params.vocab, r.features.as_ref())?;
    }
    Ok((report, results))
}

/// Metrics of ground-truth renders, the reference point of every metric.
pub fn evaluate_ground_truth(params: &ParamSet<f32>, scenes: &[Scene], opts: &GenOptions, cfg: &EvalConfig) -> Result<MetricReport> {
    let table = params.get("text.table")?;
    let mut report = MetricReport::new("ground-truth");
    for s in scenes {
        let features = if cfg.model_features {
            let p = prepare(&s.caption, &s.poses, &params.vocab, params.config.text_dim, &opts.clone().full())?;
            Some(model_features(params, &p.cond, &s.frames)?)
        } else {
            None
        };
        report.add_scene(&s.frames, &Truth::of_scene(s), table, &params.vocab, features.as_ref())?;
    }
    Ok(report)
}

/// One report per ablation regime, in [`Regime::ALL`] order.
pub fn ablate(params: &ParamSet<f32>, scenes: &[Scene], base: &GenOptions, cfg: &EvalConfig) -> Result<Vec<MetricReport>> {
    Regime::ALL
        .iter()
        .map(|r| {
            log::info!("evaluating regime {}", r.label());
            evaluate(params, scenes, &r.apply(base), r.label(), cfg).map(|(rep, _)| rep)
        })
        .collect()
}

/// Side-by-side table of the headline numbers.
pub fn comparison_table(reports: &[MetricReport]) -> String {
    let mut s = format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "regime", "region", "iou_med", "iou_mean", "text", "fc_c1", "fc_c2", "fc_bg"
    );
    for r in reports {
        let fc = r.consistency_model.as_ref().unwrap_or(&r.consistency_raw);
        let pc = |k: usize| fc.per_character.get(k).map_or(f64::NAN, |v| crate::metrics::mean(v));
        s.push_str(&format!(
            "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.label,
            r.region_class_accuracy(),
            r.pose_iou_median(),
            r.pose_iou_mean(),
            r.text_alignment(),
            pc(0),
            pc(1),
            crate::metrics::mean(&fc.background)
        ));
    }
    s
}
