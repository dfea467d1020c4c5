//! Noise schedule, training loop and deterministic sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::control::ControlResiduals;
use crate::error::{Error, Result};
use crate::model::{Conditioning, Net, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const TRAIN_STEPS: usize = 1000;
const DIVERGENCE_LOSS: f64 = 1e3;

/// Linear beta schedule with its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_STEPS, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1).max(1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Validation(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_diffuse<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    let a = T::from_f64_lossy(sched.alpha_bar(t).sqrt());
    let s = T::from_f64_lossy((1.0 - sched.alpha_bar(t)).sqrt());
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Clean-sample estimate implied by a noise prediction.
pub fn predict_x0<T: Scalar>(x_t: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    let a = T::from_f64_lossy(sched.alpha_bar(t).sqrt());
    let s = T::from_f64_lossy((1.0 - sched.alpha_bar(t)).sqrt());
    x_t.zip_map(eps, |x, e| (x - s * e) / a)
}

pub fn gaussian<T: Scalar>(dims: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z)
    })
}

/// Noise-prediction loss and its gradient for every parameter the graph used.
pub fn loss_and_grads<T: Scalar>(
    params: &ParamSet<T>,
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    cond: &Conditioning<T>,
    sched: &NoiseSchedule,
    extra: Option<&ControlResiduals<T>>,
) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let x_t = forward_diffuse(x0, t, eps, sched)?;
    let mut net = Net::new(params);
    let x = net.tape.leaf(x_t);
    let out = net.denoiser(x, t, cond, extra)?;
    let loss = net.tape.mse(out.eps, eps)?;
    let value = net.tape.value(loss).data()[0];
    let grads = net.tape.backward(loss);
    let named = net
        .bound()
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
        .collect();
    Ok((value, named))
}

/// One item of training data: clean frames in model space and their
/// conditioning.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Tensor,
    pub cond: Conditioning<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    /// Train on random windows of this many frames; `None` uses all frames.
    pub clip_frames: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f32>,
    /// Linear ramp from zero to `lr` over this many steps.
    pub warmup: usize,
    /// Cosine decay from `lr` after warmup down to this rate at the last step.
    pub final_lr: Option<f32>,
}

impl TrainConfig {
    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        match self.final_lr {
            None => self.lr,
            Some(end) => {
                let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
                let progress = ((step - self.warmup) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                (end as f64 + (self.lr - end) as f64 * cos) as f32
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-3,
            batch: 4,
            steps: 1000,
            clip_frames: None,
            grad_clip: Some(1.0),
            warmup: 0,
            final_lr: None,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let delta = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                if delta != 0.0 {
                    *x -= delta;
                }
            }
        }
    }
}

struct Job {
    item: usize,
    start: usize,
    len: usize,
    t: usize,
    eps: Tensor,
}

/// Train in place; returns the mean loss of every step. The run is a pure
/// function of the seed, the data and the initial parameters.
pub fn train(
    params: &mut ParamSet<f32>,
    data: &[TrainItem],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let jobs: Vec<Job> = (0..cfg.batch)
            .map(|_| {
                let item = rng.gen_range(0..data.len());
                let frames = data[item].x0.dims()[0];
                let len = cfg.clip_frames.map_or(frames, |c| c.min(frames));
                let start = rng.gen_range(0..=frames - len);
                let t = rng.gen_range(0..sched.len());
                let mut dims = data[item].x0.dims().to_vec();
                dims[0] = len;
                let eps = gaussian(dims, &mut rng);
                Job { item, start, len, t, eps }
            })
            .collect();
        let results: Vec<(f32, BTreeMap<String, Tensor>)> = jobs
            .par_iter()
            .map(|j| {
                let it = &data[j.item];
                let x0 = it.x0.narrow_outer(j.start, j.len);
                let cond = it.cond.narrow_frames(j.start, j.len);
                loss_and_grads(params, &x0, j.t, &j.eps, &cond, sched, None)
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / cfg.batch as f32;
        let mut total = BTreeMap::<String, Tensor>::new();
        let mut loss = 0.0f32;
        for (l, g) in results {
            loss += l * inv;
            for (name, t) in g {
                match total.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b * inv;
                        }
                    }
                    None => {
                        total.insert(name, t.map(|v| v * inv));
                    }
                }
            }
        }
        if !loss.is_finite() || loss as f64 > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss: loss as f64 });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = total.values().flat_map(|t| t.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > clip as f64 {
                let s = (clip as f64 / norm) as f32;
                for t in total.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        if cfg.lr != 0.0 {
            adam.lr = cfg.lr_at(step);
            adam.update(params, &total);
        }
        curve.push(loss);
        progress(step, loss);
    }
    Ok(curve)
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// The denoiser with fixed conditioning.
pub struct ModelPredictor<'a> {
    pub params: &'a ParamSet<f32>,
    pub cond: &'a Conditioning<f32>,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut net = Net::new(self.params);
        let x = net.tape.leaf(x_t.clone());
        let out = net.denoiser(x, t, self.cond, None)?;
        let eps = net.tape.value(out.eps).clone();
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at step {t}")));
        }
        Ok(eps)
    }
}

/// Evenly spaced descending timesteps ending at `T/steps − 1` and starting
/// at `T − 1`.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, train_steps);
    (0..steps)
        .rev()
        .map(|i| ((i + 1) * train_steps) / steps - 1)
        .collect()
}

/// Deterministic DDIM from `x_start`; the last step lands on `ᾱ = 1`.
/// With `clip`, clean-sample estimates are clamped to `[-1, 1]`.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x_start: Tensor,
    steps: usize,
    clip: bool,
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.len(), steps);
    let mut x = x_start;
    for (i, &t) in ts.iter().enumerate() {
        let mut eps = model.predict(&x, t)?;
        let mut x0 = predict_x0(&x, t, &eps, sched)?;
        if clip {
            x0 = x0.map(|v| v.clamp(-1.0, 1.0));
            // keep eps consistent with the clipped estimate
            let ab = sched.alpha_bar(t);
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            eps = x.zip_map(&x0, |xt, x0| (xt - sa * x0) / sb)?;
        }
        let prev = ts.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
        let (a, s) = (prev.sqrt() as f32, (1.0 - prev).sqrt() as f32);
        x = x0.zip_map(&eps, |x0, e| a * x0 + s * e)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!((s.betas[0] - 1e-4).abs() < 1e-15 && (s.betas[999] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(999) < 0.01);
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::from_fn(vec![5], |i| i as f32 - 2.0);
        let out = forward_diffuse(&x0, 300, &Tensor::zeros(vec![5]), &s).unwrap();
        let a = s.alpha_bar(300).sqrt() as f32;
        assert!(out.bits_eq(&x0.map(|v| a * v + 0.0)));
        assert!(forward_diffuse(&x0, 1000, &x0, &s).is_err());
    }

    #[test]
    fn terminal_step_is_nearly_standard_normal() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::from_fn(vec![10_000], |i| if i % 2 == 0 { 1.0f64 } else { -0.7 });
        let eps = gaussian(vec![10_000], &mut rng);
        let x = forward_diffuse(&x0, 999, &eps, &s).unwrap();
        let mean = x.sum() / 1e4;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn inversion_with_known_noise() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0: Tensor<f64> = gaussian(vec![32], &mut rng);
        let eps = gaussian(vec![32], &mut rng);
        for t in [0, 17, 500, 999] {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            assert!(predict_x0(&xt, t, &eps, &s).unwrap().max_abs_diff(&x0) < 1e-9);
        }
    }

    #[test]
    fn timestep_spacing() {
        assert_eq!(ddim_timesteps(1000, 4), vec![999, 749, 499, 249]);
        assert_eq!(ddim_timesteps(1000, 1), vec![999]);
        assert_eq!(ddim_timesteps(10, 50).len(), 10);
    }

    struct Oracle {
        target: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
            let a = self.sched.alpha_bar(t);
            x.zip_map(&self.target, |x, x0| ((x as f64 - a.sqrt() * x0 as f64) / (1.0 - a).sqrt()) as f32)
        }
    }

    #[test]
    fn single_step_with_perfect_oracle_recovers_target() {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = Tensor::from_fn(vec![2, 3, 4, 4], |i| ((i as f32) * 0.13).sin() * 0.9);
        let oracle = Oracle { target: target.clone(), sched: sched.clone() };
        let start = gaussian(vec![2, 3, 4, 4], &mut rng);
        let out = ddim_sample(&oracle, &sched, start, 1, false).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-4);
    }

    #[test]
    fn clipped_sampling_keeps_an_in_range_target_and_bounds_the_rest() {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = Tensor::from_fn(vec![1, 3, 4, 4], |i| ((i as f32) * 0.29).cos() * 0.8);
        let oracle = Oracle { target: target.clone(), sched: sched.clone() };
        let out = ddim_sample(&oracle, &sched, gaussian(vec![1, 3, 4, 4], &mut rng), 10, true).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-3);

        let far = Oracle { target: Tensor::full(vec![1, 3, 4, 4], 3.0), sched: sched.clone() };
        let out = ddim_sample(&far, &sched, gaussian(vec![1, 3, 4, 4], &mut rng), 10, true).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::<f32>::init(crate::model::ModelConfig::tiny(), 0);
        let before = p.get("time.l1.b").unwrap().clone();
        let mut g = BTreeMap::new();
        g.insert("time.l1.b".to_string(), Tensor::full(before.dims().to_vec(), 3.0));
        let mut adam = Adam::new(0.01);
        adam.update(&mut p, &g);
        let after = p.get("time.l1.b").unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((b - a - 0.01).abs() < 1e-6);
        }
    }
}

#[cfg(test)]
mod train_tests {
    use super::*;
    use crate::model::fixtures::{conditioning, latent};
    use crate::model::{perturb_all, ModelConfig};

    fn tiny_items(n: usize) -> (ParamSet<f32>, Vec<TrainItem>) {
        let p = ParamSet::init(ModelConfig::tiny(), 0);
        let items = (0..n)
            .map(|i| TrainItem {
                x0: latent(&p, 2, 8, 8, i as u64).map(|v: f32| v.clamp(-1.0, 1.0)),
                cond: conditioning(&p, 2, 8, 8, 2, 50 + i as u64),
            })
            .collect();
        (p, items)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_alone() {
        let (mut p, items) = tiny_items(3);
        perturb_all(&mut p, 0.05, 1);
        let before = p.clone();
        let cfg = TrainConfig { lr: 0.0, steps: 3, batch: 2, ..Default::default() };
        train(&mut p, &items, &NoiseSchedule::default(), &cfg, |_, _| {}).unwrap();
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn warmup_then_cosine_decay() {
        let cfg = TrainConfig { lr: 1e-3, steps: 110, warmup: 10, final_lr: Some(1e-4), ..Default::default() };
        assert!((cfg.lr_at(0) - 1e-4).abs() < 1e-9);
        assert!((cfg.lr_at(9) - 1e-3).abs() < 1e-9);
        assert!((cfg.lr_at(10) - 1e-3).abs() < 1e-9);
        assert!((cfg.lr_at(60) - 5.5e-4).abs() < 1e-7);
        assert!((cfg.lr_at(110) - 1e-4).abs() < 1e-9);
        let rates: Vec<f32> = (10..110).map(|s| cfg.lr_at(s)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        let flat = TrainConfig { lr: 2e-3, ..Default::default() };
        assert_eq!(flat.lr_at(0), 2e-3);
        assert_eq!(flat.lr_at(999), 2e-3);
    }

    #[test]
    fn same_seed_same_curve() {
        let (p0, items) = tiny_items(4);
        let cfg = TrainConfig { steps: 4, batch: 3, clip_frames: Some(1), ..Default::default() };
        let run = || {
            let mut p = p0.clone();
            let c = train(&mut p, &items, &NoiseSchedule::default(), &cfg, |_, _| {}).unwrap();
            (c, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(pa.bits_eq(&pb));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (mut p, _) = tiny_items(0);
        assert!(train(&mut p, &[], &NoiseSchedule::default(), &TrainConfig::default(), |_, _| {}).is_err());
    }

    #[test]
    fn overfits_eight_fixed_samples() {
        let (mut p, items) = tiny_items(8);
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fixed: Vec<(usize, Tensor)> = items
            .iter()
            .map(|it| (rng.gen_range(0..sched.len()), gaussian(it.x0.dims().to_vec(), &mut rng)))
            .collect();
        let mut adam = Adam::new(1e-3);
        let mut curve = Vec::new();
        for _ in 0..500 {
            let mut total = BTreeMap::<String, Tensor>::new();
            let mut loss = 0.0;
            for (it, (t, eps)) in items.iter().zip(&fixed) {
                let (l, g) = loss_and_grads(&p, &it.x0, *t, eps, &it.cond, &sched, None).unwrap();
                loss += l / 8.0;
                for (k, v) in g {
                    let v = v.map(|x| x / 8.0);
                    match total.get_mut(&k) {
                        Some(a) => *a = a.zip_map(&v, |a, b| a + b).unwrap(),
                        None => {
                            total.insert(k, v);
                        }
                    }
                }
            }
            adam.update(&mut p, &total);
            curve.push(loss);
        }
        let (first, last) = (curve[0], *curve.last().unwrap());
        assert!(last < 0.1 * first, "loss {first} -> {last}");
    }
}
