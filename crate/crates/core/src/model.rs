//! The denoiser and the control encoder, recorded on a [`Tape`].
//!
//! Both networks are four-level convolutional stacks over
//! `[frames, channels, h, w]` feature maps. Time conditioning enters every
//! residual block through a per-channel scale and shift. Text enters through
//! cross-attention at the three finest levels; in the denoiser that
//! attention is the region-masked per-character form.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{masked_cross_attention, TextRows};
use crate::autograd::{Tape, Var};
use crate::control::{fuse_tap_on_tape, ControlResiduals, FusionMode, LevelMasks, DOWN_TAPS};
use crate::error::{Error, FormatError, Result};
use crate::masks::LEVELS;
use crate::prompt::{Vocabulary, TEXT_DIM};
use crate::tensor::{Scalar, Tensor};
use crate::tensor_io::WeightMap;

const TIME_FREQS: usize = 16;
const CONFIG_KEY: &str = "meta.config";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub widths: [usize; LEVELS],
    pub image_channels: usize,
    pub pose_channels: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub temporal_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            image_channels: 3,
            pose_channels: 3,
            text_dim: TEXT_DIM,
            time_dim: 64,
            temporal_dim: 32,
        }
    }
}

impl ModelConfig {
    /// A very small network for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            widths: [4, 6, 6, 8],
            image_channels: 3,
            pose_channels: 3,
            text_dim: 8,
            time_dim: 8,
            temporal_dim: 4,
        }
    }

    fn to_tensor(&self) -> Tensor {
        let mut v: Vec<f32> = self.widths.iter().map(|&w| w as f32).collect();
        v.extend([self.image_channels, self.pose_channels, self.text_dim, self.time_dim, self.temporal_dim].map(|x| x as f32));
        Tensor::new(vec![v.len()], v).expect("1-d")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != LEVELS + 5 || d.iter().any(|&x| x < 1.0 || x.fract() != 0.0) {
            return Err(Error::Validation(format!("bad model config record {d:?}")));
        }
        let u = |i: usize| d[i] as usize;
        Ok(Self {
            widths: [u(0), u(1), u(2), u(3)],
            image_channels: u(4),
            pose_channels: u(5),
            text_dim: u(6),
            time_dim: u(7),
            temporal_dim: u(8),
        })
    }
}

/// Named parameter tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    tensors: BTreeMap<String, Tensor<T>>,
}

fn conv_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c_out: usize, c_in: usize, k: usize, init: Init) {
    out.push((format!("{name}.w"), vec![c_out, c_in, k, k], init));
    out.push((format!("{name}.b"), vec![c_out], Init::Zero));
}

fn linear_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d_in: usize, d_out: usize, init: Init) {
    out.push((format!("{name}.w"), vec![d_in, d_out], init));
    out.push((format!("{name}.b"), vec![d_out], Init::Zero));
}

fn resblock_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize, time_dim: usize) {
    conv_shapes(out, &format!("{name}.conv"), c, c, 3, Init::Fan(0.5));
    linear_shapes(out, &format!("{name}.film.scale"), time_dim, c, Init::Zero);
    linear_shapes(out, &format!("{name}.film.shift"), time_dim, c, Init::Zero);
}

fn attn_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize, d_kv: usize, d: usize) {
    out.push((format!("{name}.q"), vec![c, d], Init::Fan(1.0)));
    out.push((format!("{name}.k"), vec![d_kv, d], Init::Fan(1.0)));
    out.push((format!("{name}.v"), vec![d_kv, d], Init::Fan(1.0)));
    out.push((format!("{name}.o"), vec![d, c], Init::Fan(0.5)));
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan(f64),
    Normal(f64),
}

/// Every parameter name, shape and initializer of a configuration.
fn layout(cfg: &ModelConfig, vocab: usize) -> Vec<(String, Vec<usize>, Init)> {
    let w = cfg.widths;
    let td = cfg.time_dim;
    let mut v = Vec::new();
    linear_shapes(&mut v, "time.l1", 2 * TIME_FREQS, td, Init::Fan(1.0));
    linear_shapes(&mut v, "time.l2", td, td, Init::Fan(1.0));
    v.push(("text.table".into(), vec![vocab, cfg.text_dim], Init::Normal(1.0 / (cfg.text_dim as f64).sqrt())));

    conv_shapes(&mut v, "unet.in", w[0], cfg.image_channels, 3, Init::Fan(1.0));
    for l in 0..LEVELS {
        if l > 0 {
            conv_shapes(&mut v, &format!("unet.d{l}.down"), w[l], w[l - 1], 3, Init::Fan(1.0));
        }
        resblock_shapes(&mut v, &format!("unet.d{l}.r1"), w[l], td);
        resblock_shapes(&mut v, &format!("unet.d{l}.r2"), w[l], td);
        if l < LEVELS - 1 {
            attn_shapes(&mut v, &format!("unet.d{l}.attn"), w[l], cfg.text_dim, w[l]);
        }
    }
    resblock_shapes(&mut v, "unet.mid.r1", w[3], td);
    attn_shapes(&mut v, "unet.mid.temporal", w[3], w[3], cfg.temporal_dim);
    resblock_shapes(&mut v, "unet.mid.r2", w[3], td);
    for l in (0..LEVELS).rev() {
        for j in 0..3 {
            resblock_shapes(&mut v, &format!("unet.u{l}.r{j}"), w[l], td);
        }
        if l < LEVELS - 1 {
            attn_shapes(&mut v, &format!("unet.u{l}.attn"), w[l], cfg.text_dim, w[l]);
        }
        if l > 0 {
            conv_shapes(&mut v, &format!("unet.u{l}.up"), w[l - 1], w[l], 3, Init::Fan(1.0));
        }
    }
    conv_shapes(&mut v, "unet.out", cfg.image_channels, w[0], 3, Init::Zero);

    conv_shapes(&mut v, "ctrl.hint1", w[0], cfg.pose_channels, 3, Init::Fan(1.0));
    conv_shapes(&mut v, "ctrl.hint2", w[0], w[0], 3, Init::Fan(1.0));
    conv_shapes(&mut v, "ctrl.in", w[0], cfg.image_channels, 3, Init::Fan(1.0));
    for l in 0..LEVELS {
        if l > 0 {
            conv_shapes(&mut v, &format!("ctrl.d{l}.down"), w[l], w[l - 1], 3, Init::Fan(1.0));
        }
        resblock_shapes(&mut v, &format!("ctrl.d{l}.r1"), w[l], td);
        resblock_shapes(&mut v, &format!("ctrl.d{l}.r2"), w[l], td);
        if l < LEVELS - 1 {
            attn_shapes(&mut v, &format!("ctrl.d{l}.attn"), w[l], cfg.text_dim, w[l]);
        }
    }
    resblock_shapes(&mut v, "ctrl.mid.r1", w[3], td);
    for i in 0..DOWN_TAPS {
        let c = w[i / 3];
        conv_shapes(&mut v, &format!("ctrl.tap{i}"), c, c, 1, Init::Zero);
    }
    conv_shapes(&mut v, "ctrl.mid.tap", w[3], w[3], 1, Init::Zero);
    v
}

impl<T: Scalar> ParamSet<T> {
    /// Seeded initialization. Residual taps and the output convolution start
    /// at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let vocab = Vocabulary::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(&config, vocab.len())
            .into_iter()
            .map(|(name, dims, init)| {
                let fan_in: usize = match dims.len() {
                    4 => dims[1] * dims[2] * dims[3],
                    _ => dims[0],
                };
                let std = match init {
                    Init::Zero => 0.0,
                    Init::Fan(g) => g / (fan_in as f64).sqrt(),
                    Init::Normal(s) => s,
                };
                let t = Tensor::from_fn(dims, |_| {
                    if std == 0.0 {
                        T::zero()
                    } else {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64_lossy(z * std)
                    }
                });
                (name, t)
            })
            .collect();
        Self { config, vocab, tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(FormatError::MissingTensor(name.to_owned())))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool
    where
        T: crate::tensor::ToBits,
    {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bits_eq(b))
    }
}

impl ParamSet<f32> {
    pub fn to_weights(&self) -> WeightMap {
        let mut m: WeightMap = self.tensors.clone();
        m.insert(CONFIG_KEY.into(), self.config.to_tensor());
        m
    }

    /// Rebuild from a weights file, checking every expected tensor.
    pub fn from_weights(mut weights: WeightMap) -> Result<Self> {
        let config = ModelConfig::from_tensor(
            &weights
                .remove(CONFIG_KEY)
                .ok_or_else(|| FormatError::MissingTensor(CONFIG_KEY.into()))?,
        )?;
        let vocab = Vocabulary::toy();
        for (name, dims, _) in layout(&config, vocab.len()) {
            let t = weights.get(&name).ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            t.expect_dims(&dims, &name)?;
        }
        Ok(Self { config, vocab, tensors: weights })
    }
}

/// Text input of one attention or control branch.
pub type TextInput<T> = TextRows<T>;

/// One control branch: its pose map `[frames, pose_channels, h, w]` and text.
#[derive(Debug, Clone)]
pub struct ControlInput<T: Scalar> {
    pub pose: Tensor<T>,
    pub text: TextInput<T>,
}

/// Everything the denoiser is conditioned on besides `x_t` and `t`.
#[derive(Debug, Clone)]
pub struct Conditioning<T: Scalar> {
    /// Per-branch text of the region-masked cross-attention.
    pub attn_text: Vec<TextInput<T>>,
    /// `[level][branch]` masks for the attention branches.
    pub attn_masks: LevelMasks<T>,
    /// Control branches; empty disables control.
    pub control: Vec<ControlInput<T>>,
    /// `[level][branch]` masks for control fusion.
    pub control_masks: LevelMasks<T>,
    pub fusion: FusionMode,
}

impl<T: Scalar> Conditioning<T> {
    pub fn cast<U: Scalar>(&self) -> Conditioning<U> {
        let rows = |t: &TextInput<T>| TextRows {
            rows: t
                .rows
                .iter()
                .map(|r| match r {
                    crate::autograd::EmbedRow::Table(i) => crate::autograd::EmbedRow::Table(*i),
                    crate::autograd::EmbedRow::Fixed(v) => crate::autograd::EmbedRow::Fixed(
                        v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect(),
                    ),
                    crate::autograd::EmbedRow::Pad => crate::autograd::EmbedRow::Pad,
                })
                .collect(),
            tokens: t.tokens,
        };
        let masks = |m: &LevelMasks<T>| -> LevelMasks<U> {
            m.iter().map(|lvl| lvl.iter().map(Tensor::cast).collect()).collect()
        };
        Conditioning {
            attn_text: self.attn_text.iter().map(rows).collect(),
            attn_masks: masks(&self.attn_masks),
            control: self
                .control
                .iter()
                .map(|c| ControlInput { pose: c.pose.cast(), text: rows(&c.text) })
                .collect(),
            control_masks: masks(&self.control_masks),
            fusion: self.fusion,
        }
    }

    pub fn frames(&self) -> usize {
        self.attn_masks[0][0].dims()[0]
    }

    /// Restrict to frames `start..start + len`.
    pub fn narrow_frames(&self, start: usize, len: usize) -> Self {
        let masks = |m: &LevelMasks<T>| -> LevelMasks<T> {
            m.iter().map(|lvl| lvl.iter().map(|t| t.narrow_outer(start, len)).collect()).collect()
        };
        Conditioning {
            attn_text: self.attn_text.clone(),
            attn_masks: masks(&self.attn_masks),
            control: self
                .control
                .iter()
                .map(|c| ControlInput { pose: c.pose.narrow_outer(start, len), text: c.text.clone() })
                .collect(),
            control_masks: masks(&self.control_masks),
            fusion: self.fusion,
        }
    }
}

/// Vars of interest produced by one denoiser pass.
pub struct DenoiserOutput {
    pub eps: Var,
    /// Bottleneck activations before the mid control residual.
    pub bottleneck: Var,
    /// Unmasked per-branch cross-attention outputs of the finest down level.
    pub attn_branches: Vec<Var>,
    /// Control residuals of every branch (12 down taps then mid).
    pub control_taps: Vec<Vec<Var>>,
}

/// Sinusoidal features of a timestep, `[1, 2 * TIME_FREQS]`.
pub fn timestep_features<T: Scalar>(t: usize) -> Tensor<T> {
    let mut v = Vec::with_capacity(2 * TIME_FREQS);
    let freqs: Vec<f64> = (0..TIME_FREQS)
        .map(|i| (-(10000f64.ln()) * i as f64 / TIME_FREQS as f64).exp())
        .collect();
    v.extend(freqs.iter().map(|f| T::from_f64_lossy((t as f64 * f).sin())));
    v.extend(freqs.iter().map(|f| T::from_f64_lossy((t as f64 * f).cos())));
    Tensor::new(vec![1, 2 * TIME_FREQS], v).expect("fixed size")
}

/// Binds parameters to tape leaves on first use.
pub struct Net<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn new(params: &'a ParamSet<T>) -> Self {
        Self { tape: Tape::new(), params, bound: HashMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.get(name)?.clone());
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Parameter leaves created so far, by name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.tape.conv2d(x, w, b, stride)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.tape.linear(x, w, b)
    }

    fn attn_weights(&mut self, name: &str) -> Result<[Var; 4]> {
        Ok([
            self.param(&format!("{name}.q"))?,
            self.param(&format!("{name}.k"))?,
            self.param(&format!("{name}.v"))?,
            self.param(&format!("{name}.o"))?,
        ])
    }

    /// `x + conv(silu(film(x + skip)))`.
    fn resblock(&mut self, x: Var, name: &str, temb: Var, skip: Option<Var>) -> Result<Var> {
        let inp = match skip {
            Some(s) => self.tape.add(x, s)?,
            None => x,
        };
        let scale = self.linear(temb, &format!("{name}.film.scale"))?;
        let shift = self.linear(temb, &format!("{name}.film.shift"))?;
        let a = self.tape.channel_affine(inp, scale, shift)?;
        let a = self.tape.silu(a);
        let c = self.conv(a, &format!("{name}.conv"), 1)?;
        self.tape.add(x, c)
    }

    fn time_embedding(&mut self, t: usize) -> Result<Var> {
        let feats = self.tape.leaf(timestep_features(t));
        let h = self.linear(feats, "time.l1")?;
        let h = self.tape.silu(h);
        let h = self.linear(h, "time.l2")?;
        Ok(self.tape.silu(h))
    }

    fn text(&mut self, t: &TextInput<T>) -> Result<(Var, usize)> {
        let table = self.param("text.table")?;
        Ok((self.tape.embed(table, t.rows.clone())?, t.tokens))
    }

    /// Control encoder for one branch; returns 12 down taps then the mid tap.
    /// `x_in` is the shared `ctrl.in` projection of the noisy input.
    fn control_branch(&mut self, x_in: Var, input: &ControlInput<T>, temb: Var) -> Result<Vec<Var>> {
        let pose = self.tape.leaf(input.pose.clone());
        let hint = self.conv(pose, "ctrl.hint1", 1)?;
        let hint = self.tape.silu(hint);
        let hint = self.conv(hint, "ctrl.hint2", 1)?;
        let mut h = self.tape.add(x_in, hint)?;
        let text = self.text(&input.text)?;
        let mut taps = Vec::with_capacity(DOWN_TAPS + 1);
        for l in 0..LEVELS {
            if l > 0 {
                h = self.conv(h, &format!("ctrl.d{l}.down"), 2)?;
            }
            taps.push(self.conv(h, &format!("ctrl.tap{}", 3 * l), 1)?);
            h = self.resblock(h, &format!("ctrl.d{l}.r1"), temb, None)?;
            if l < LEVELS - 1 {
                let w = self.attn_weights(&format!("ctrl.d{l}.attn"))?;
                let a = self.tape.cross_attention(h, text.0, text.1, w)?;
                h = self.tape.add(h, a)?;
            }
            taps.push(self.conv(h, &format!("ctrl.tap{}", 3 * l + 1), 1)?);
            h = self.resblock(h, &format!("ctrl.d{l}.r2"), temb, None)?;
            taps.push(self.conv(h, &format!("ctrl.tap{}", 3 * l + 2), 1)?);
        }
        let m = self.resblock(h, "ctrl.mid.r1", temb, None)?;
        taps.push(self.conv(m, "ctrl.mid.tap", 1)?);
        Ok(taps)
    }

    /// Residuals of every control branch, unfused.
    pub fn control_residuals(&mut self, x: Var, t: usize, cond: &Conditioning<T>) -> Result<(Var, Vec<Vec<Var>>)> {
        let temb = self.time_embedding(t)?;
        let x_in = self.conv(x, "ctrl.in", 1)?;
        let taps = cond
            .control
            .iter()
            .map(|c| self.control_branch(x_in, c, temb))
            .collect::<Result<Vec<_>>>()?;
        Ok((temb, taps))
    }

    /// Predicted noise for `x: [frames, image_channels, h, w]` at step `t`.
    /// `extra` is added to the fused control residuals, so callers can
    /// inject fixed residual tensors.
    pub fn denoiser(&mut self, x: Var, t: usize, cond: &Conditioning<T>, extra: Option<&ControlResiduals<T>>) -> Result<DenoiserOutput> {
        let (temb, control_taps) = self.control_residuals(x, t, cond)?;
        let mut fused: Option<Vec<Var>> = None;
        if !control_taps.is_empty() {
            fused = Some(
                (0..=DOWN_TAPS)
                    .map(|j| {
                        let taps: Vec<Var> = control_taps.iter().map(|b| b[j]).collect();
                        fuse_tap_on_tape(&mut self.tape, &taps, &cond.control_masks, cond.fusion)
                    })
                    .collect::<Result<_>>()?,
            );
        }
        if let Some(extra) = extra {
            let consts: Vec<&Tensor<T>> = extra.iter().collect();
            fused = Some(match fused {
                None => consts.iter().map(|c| self.tape.leaf((*c).clone())).collect(),
                Some(f) => f
                    .into_iter()
                    .zip(consts)
                    .map(|(v, c)| self.tape.add_const(v, c))
                    .collect::<Result<_>>()?,
            });
        }
        let texts = cond
            .attn_text
            .iter()
            .map(|t| self.text(t))
            .collect::<Result<Vec<_>>>()?;
        let mut attn_branches = Vec::new();

        let mut h = self.conv(x, "unet.in", 1)?;
        let mut skips = Vec::with_capacity(DOWN_TAPS);
        for l in 0..LEVELS {
            if l > 0 {
                h = self.conv(h, &format!("unet.d{l}.down"), 2)?;
            }
            skips.push(h);
            h = self.resblock(h, &format!("unet.d{l}.r1"), temb, None)?;
            if l < LEVELS - 1 {
                let w = self.attn_weights(&format!("unet.d{l}.attn"))?;
                let trace = (l == 0).then_some(&mut attn_branches);
                let a = masked_cross_attention(&mut self.tape, h, &texts, &cond.attn_masks[l], w, trace)?;
                h = self.tape.add(h, a)?;
            }
            skips.push(h);
            h = self.resblock(h, &format!("unet.d{l}.r2"), temb, None)?;
            skips.push(h);
        }
        if let Some(f) = &fused {
            for (s, &r) in skips.iter_mut().zip(f) {
                *s = self.tape.add(*s, r)?;
            }
        }
        let m = self.resblock(h, "unet.mid.r1", temb, None)?;
        let w = self.attn_weights("unet.mid.temporal")?;
        let m = self.tape.temporal_attention(m, w)?;
        let bottleneck = self.resblock(m, "unet.mid.r2", temb, None)?;
        let mut u = match &fused {
            Some(f) => self.tape.add(bottleneck, f[DOWN_TAPS])?,
            None => bottleneck,
        };
        for l in (0..LEVELS).rev() {
            for j in 0..3 {
                let skip = skips.pop().expect("one skip per up block");
                u = self.resblock(u, &format!("unet.u{l}.r{j}"), temb, Some(skip))?;
                if j == 0 && l < LEVELS - 1 {
                    let w = self.attn_weights(&format!("unet.u{l}.attn"))?;
                    let a = masked_cross_attention(&mut self.tape, u, &texts, &cond.attn_masks[l], w, None)?;
                    u = self.tape.add(u, a)?;
                }
            }
            if l > 0 {
                let up = self.tape.upsample2x(u)?;
                u = self.conv(up, &format!("unet.u{l}.up"), 1)?;
            }
        }
        let out = self.tape.silu(u);
        let eps = self.conv(out, "unet.out", 1)?;
        Ok(DenoiserOutput { eps, bottleneck, attn_branches, control_taps })
    }
}

/// Control residuals of one branch as plain tensors.
pub fn control_branch_forward<T: Scalar>(
    params: &ParamSet<T>,
    pose: &Tensor<T>,
    text: &TextInput<T>,
    x_t: &Tensor<T>,
    t: usize,
) -> Result<ControlResiduals<T>> {
    let (pd, xd) = (pose.dims(), x_t.dims());
    if pd.len() != 4 || xd.len() != 4 || pd[0] != xd[0] || pd[2..] != xd[2..] {
        return Err(Error::shape(format!("pose map {pd:?} does not match latent {xd:?}")));
    }
    if params.config.pose_channels != pd[1] {
        return Err(Error::shape(format!(
            "pose map has {} channels, model expects {}",
            pd[1], params.config.pose_channels
        )));
    }
    if let Some(v) = text.rows.iter().find_map(|r| match r {
        crate::autograd::EmbedRow::Fixed(v) if v.len() != params.config.text_dim => Some(v.len()),
        _ => None,
    }) {
        return Err(Error::shape(format!("text rows of width {v}, model expects {}", params.config.text_dim)));
    }
    let mut net = Net::new(params);
    let x = net.tape.leaf(x_t.clone());
    let cond = Conditioning {
        attn_text: Vec::new(),
        attn_masks: Vec::new(),
        control: vec![ControlInput { pose: pose.clone(), text: text.clone() }],
        control_masks: Vec::new(),
        fusion: FusionMode::FirstUnmasked,
    };
    let (_, taps) = net.control_residuals(x, t, &cond)?;
    let vals: Vec<Tensor<T>> = taps[0].iter().map(|&v| net.tape.value(v).clone()).collect();
    let mut down = vals;
    let mid = down.pop().expect("13 taps");
    Ok(ControlResiduals { down, mid })
}

/// Randomize every parameter (including zero-initialized taps), for tests
/// that need non-trivial gradients everywhere.
pub fn perturb_all<T: Scalar>(params: &mut ParamSet<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = *v + T::from_f64_lossy(rng.gen_range(-scale..scale));
        }
    }
}
