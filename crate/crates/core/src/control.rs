//! Control residuals and their mask-weighted fusion across branches.

use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::masks::MaskPyramid;
use crate::tensor::{Scalar, Tensor};

/// Number of down-path taps and how many share each resolution.
pub const DOWN_TAPS: usize = 12;
pub const TAPS_PER_LEVEL: usize = 3;

/// How branch residuals are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Every branch weighted by its mask.
    AllMasked,
    /// Branch 0 added as is, the rest weighted by their masks.
    #[default]
    FirstUnmasked,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq3" | "all-masked" => Ok(FusionMode::AllMasked),
            "first-unmasked" => Ok(FusionMode::FirstUnmasked),
            other => Err(Error::Validation(format!(
                "unknown fusion mode {other:?} (expected eq3 or first-unmasked)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::AllMasked => "eq3",
            FusionMode::FirstUnmasked => "first-unmasked",
        })
    }
}

/// Residuals of one control branch: 12 down taps (3 per resolution level,
/// halving from full size) and one bottleneck tap, each `[frames, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResiduals<T: Scalar = f32> {
    pub down: Vec<Tensor<T>>,
    pub mid: Tensor<T>,
}

impl<T: Scalar> ControlResiduals<T> {
    /// Check the 12 + 1 layout with halving spatial sizes.
    pub fn validate_layout(&self) -> Result<()> {
        if self.down.len() != DOWN_TAPS {
            return Err(Error::shape(format!("{} down taps, expected {DOWN_TAPS}", self.down.len())));
        }
        let base = spatial(&self.down[0])?;
        for (i, t) in self.down.iter().enumerate() {
            let l = i / TAPS_PER_LEVEL;
            let want = (base.0 >> l, base.1 >> l);
            if spatial(t)? != want {
                return Err(Error::shape(format!("down tap {i} is {:?}, expected {want:?}", t.dims())));
            }
        }
        let want = (base.0 >> 3, base.1 >> 3);
        if spatial(&self.mid)? != want {
            return Err(Error::shape(format!("mid tap is {:?}, expected {want:?}", self.mid.dims())));
        }
        Ok(())
    }

    /// Spatial size of every group of three down taps.
    pub fn group_sizes(&self) -> Vec<(usize, usize)> {
        self.down
            .chunks(TAPS_PER_LEVEL)
            .map(|g| spatial(&g[0]).expect("validated"))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            down: self.down.iter().map(|t| Tensor::zeros(t.dims().to_vec())).collect(),
            mid: Tensor::zeros(self.mid.dims().to_vec()),
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            down: self.down.iter().map(|t| t.map(|v| v * alpha)).collect(),
            mid: self.mid.map(|v| v * alpha),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.down.iter().chain(std::iter::once(&self.mid))
    }
}

fn spatial<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.dims() {
        [_, _, h, w] => Ok((*h, *w)),
        d => Err(Error::shape(format!("residual tap must be [f, c, h, w], got {d:?}"))),
    }
}

/// Masks for fusion as `[level][branch] -> [frames, h, w]`, levels halving
/// from full resolution.
pub type LevelMasks<T> = Vec<Vec<Tensor<T>>>;

/// Per-level masks of every branch, cast to `T`.
pub fn level_masks<T: Scalar>(pyr: &MaskPyramid) -> LevelMasks<T> {
    (0..pyr.levels().len())
        .map(|l| (0..pyr.characters()).map(|k| pyr.mask(l, k).cast()).collect())
        .collect()
}

fn mask_for<'a, T: Scalar>(masks: &'a LevelMasks<T>, t: &Tensor<T>, branch: usize) -> Result<&'a Tensor<T>> {
    let (h, w) = spatial(t)?;
    masks
        .iter()
        .find(|lvl| lvl.first().is_some_and(|m| m.dims()[1..] == [h, w]))
        .map(|lvl| &lvl[branch])
        .ok_or_else(|| Error::Geometry(format!("no mask level of size {h}x{w}")))
}

fn weighted<T: Scalar>(t: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (f, c, h, w) = match t.dims() {
        [f, c, h, w] => (*f, *c, *h, *w),
        _ => unreachable!("checked by spatial"),
    };
    if m.dims() != [f, h, w] {
        return Err(Error::shape(format!("mask {:?} for residual {:?}", m.dims(), t.dims())));
    }
    Ok(Tensor::from_fn(vec![f, c, h, w], |i| {
        let fi = i / (c * h * w);
        t.data()[i] * m.data()[fi * h * w + i % (h * w)]
    }))
}

fn fuse_tap<T: Scalar>(taps: &[&Tensor<T>], masks: &LevelMasks<T>, mode: FusionMode) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for (i, t) in taps.iter().enumerate() {
        let term = if i == 0 && mode == FusionMode::FirstUnmasked {
            (*t).clone()
        } else {
            weighted(t, mask_for(masks, t, i)?)?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => a.zip_map(&term, |x, y| x + y)?,
        });
    }
    acc.ok_or_else(|| Error::shape("no branches to fuse"))
}

/// Combine branch residuals with per-branch masks.
pub fn fuse_control_residuals<T: Scalar>(
    branches: &[ControlResiduals<T>],
    masks: &LevelMasks<T>,
    mode: FusionMode,
) -> Result<ControlResiduals<T>> {
    let first = branches.first().ok_or_else(|| Error::shape("no branches to fuse"))?;
    first.validate_layout()?;
    for (i, b) in branches.iter().enumerate() {
        b.validate_layout()?;
        let same = b.iter().zip(first.iter()).all(|(x, y)| x.dims() == y.dims());
        if !same {
            return Err(Error::shape(format!("branch {i} layout differs from branch 0")));
        }
    }
    if masks.iter().any(|lvl| lvl.len() < branches.len()) {
        return Err(Error::shape(format!("masks for fewer than {} branches", branches.len())));
    }
    let down = (0..DOWN_TAPS)
        .map(|j| {
            let taps: Vec<&Tensor<T>> = branches.iter().map(|b| &b.down[j]).collect();
            fuse_tap(&taps, masks, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let mids: Vec<&Tensor<T>> = branches.iter().map(|b| &b.mid).collect();
    let mid = fuse_tap(&mids, masks, mode)?;
    Ok(ControlResiduals { down, mid })
}

/// Tape form of [`fuse_control_residuals`] for a single tap.
pub fn fuse_tap_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    taps: &[Var],
    masks: &LevelMasks<T>,
    mode: FusionMode,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &t) in taps.iter().enumerate() {
        let term = if i == 0 && mode == FusionMode::FirstUnmasked {
            t
        } else {
            let m = mask_for(masks, tape.value(t), i)?.clone();
            tape.mask_mul(t, &m)?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::shape("no branches to fuse"))
}
