//! Region masks: bounding boxes from pose maps, per-pixel softmax across
//! characters, and the multi-resolution pyramid used by attention and
//! control fusion.

use crate::error::{Error, Result};
use crate::tensor::{resize, softmax_lastdim, ResizeMode, Tensor};

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let r0 = self.row_min.max(other.row_min);
        let r1 = self.row_max.min(other.row_max);
        let c0 = self.col_min.max(other.col_min);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            0
        } else {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }
}

/// Tight box around the pixels for which `on(row, col)` holds.
pub fn bbox_of(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Option<BBox> {
    let mut bb: Option<BBox> = None;
    for r in 0..h {
        for c in 0..w {
            if on(r, c) {
                bb = Some(match bb {
                    None => BBox { row_min: r, row_max: r, col_min: c, col_max: c },
                    Some(b) => BBox {
                        row_min: b.row_min,
                        row_max: r,
                        col_min: b.col_min.min(c),
                        col_max: b.col_max.max(c),
                    },
                });
            }
        }
    }
    bb
}

/// A binary `[h, w]` mask and the box it was drawn from. `bbox` is `None`
/// for an empty pose frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub mask: Tensor,
    pub bbox: Option<BBox>,
}

/// Box mask of a `[channels, h, w]` or `[h, w]` pose frame.
pub fn extract_bbox_mask(frame: &Tensor) -> Result<RegionMask> {
    let (c, h, w) = match frame.dims() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        d => return Err(Error::shape(format!("pose frame must be [c, h, w], got {d:?}"))),
    };
    let d = frame.data();
    let bbox = bbox_of(h, w, |r, col| (0..c).any(|ch| d[(ch * h + r) * w + col] != 0.0));
    let mask = Tensor::from_fn(vec![h, w], |i| match bbox {
        Some(b) if b.contains(i / w, i % w) => 1.0,
        _ => 0.0,
    });
    Ok(RegionMask { mask, bbox })
}

/// Per-pixel softmax of `sharpness · mask` across the given masks.
pub fn normalize_masks(masks: &[Tensor], sharpness: f32) -> Result<Vec<Tensor>> {
    let first = masks.first().ok_or_else(|| Error::shape("no masks to normalize"))?;
    if !(sharpness.is_finite() && sharpness >= 1.0) {
        return Err(Error::Validation(format!("mask sharpness must be >= 1, got {sharpness}")));
    }
    let dims = first.dims().to_vec();
    for m in masks {
        m.expect_dims(&dims, "mask")?;
    }
    let n = masks.len();
    let pixels = first.len();
    let interleaved = Tensor::from_fn(vec![pixels, n], |i| masks[i % n].data()[i / n]);
    let soft = softmax_lastdim(&interleaved, sharpness)?;
    Ok((0..n)
        .map(|k| {
            Tensor::new(dims.clone(), (0..pixels).map(|p| soft.data()[p * n + k]).collect())
                .expect("same dims")
        })
        .collect())
}

/// Number of pyramid levels; level `l` has size `(h >> l, w >> l)`.
pub const LEVELS: usize = 4;

/// Normalized masks at every resolution the networks consume.
///
/// Each level is stored as `[characters, frames, h_l, w_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    levels: Vec<Tensor>,
}

impl MaskPyramid {
    pub fn characters(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.levels[0].dims()[1]
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn size(&self, l: usize) -> (usize, usize) {
        let d = self.levels[l].dims();
        (d[2], d[3])
    }

    /// Levels seen by cross-attention: full, half and quarter resolution.
    pub fn group_a(&self) -> &[Tensor] {
        &self.levels[..3]
    }

    /// Levels matched to the down-block residual taps.
    pub fn group_b(&self) -> &[Tensor] {
        &self.levels[..4]
    }

    /// The bottleneck level matched to the mid residual.
    pub fn group_c(&self) -> &[Tensor] {
        &self.levels[3..]
    }

    /// `[frames, h_l, w_l]` mask of one character at level `l`.
    pub fn mask(&self, l: usize, character: usize) -> Tensor {
        self.levels[l].slice_outer(character)
    }

    /// Level whose spatial size is `(h, w)`.
    pub fn find_level(&self, h: usize, w: usize) -> Option<usize> {
        (0..self.levels.len()).find(|&l| self.size(l) == (h, w))
    }

    /// Uniform single-character pyramid (all ones).
    pub fn ones(frames: usize, h: usize, w: usize) -> Result<Self> {
        build_pyramids(&Tensor::ones(vec![1, frames, h, w]))
    }

    /// Keep only the listed characters, renormalizing nothing.
    pub fn select(&self, characters: &[usize]) -> Self {
        let levels = self
            .levels
            .iter()
            .map(|lvl| {
                let parts: Vec<Tensor> = characters.iter().map(|&c| lvl.slice_outer(c)).collect();
                Tensor::stack(&parts).expect("same dims")
            })
            .collect();
        Self { levels }
    }

    /// Largest deviation of the per-pixel character sum from 1 over all levels.
    pub fn partition_error(&self) -> f32 {
        self.levels.iter().map(partition_error).fold(0.0, f32::max)
    }
}

/// Largest `|Σ_characters m − 1|` of a `[characters, ...]` tensor.
pub fn partition_error(masks: &Tensor) -> f32 {
    let n = masks.dims()[0];
    let per = masks.len() / n;
    (0..per)
        .map(|p| {
            let s: f32 = (0..n).map(|k| masks.data()[k * per + p]).sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f32::max)
}

fn renormalize(level: &mut Tensor) {
    let n = level.dims()[0];
    let per = level.len() / n;
    let d = level.data_mut();
    for p in 0..per {
        let s: f32 = (0..n).map(|k| d[k * per + p]).sum();
        if s > 0.0 {
            for k in 0..n {
                d[k * per + p] /= s;
            }
        }
    }
}

/// Build all levels from full-resolution normalized masks
/// `[characters, frames, h, w]`.
pub fn build_pyramids(normalized: &Tensor) -> Result<MaskPyramid> {
    let (h, w) = match normalized.dims() {
        [_, _, h, w] => (*h, *w),
        d => return Err(Error::shape(format!("expected [characters, frames, h, w], got {d:?}"))),
    };
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "mask size {h}x{w} must be a non-zero multiple of 8"
        )));
    }
    let levels = (0..LEVELS)
        .map(|l| {
            let mut t = resize(normalized, (h >> l, w >> l), ResizeMode::Bilinear)?;
            renormalize(&mut t);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskPyramid { levels })
}

/// Binary box masks of every character and frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    /// Indexed `[frame][character]`.
    pub entries: Vec<Vec<RegionMask>>,
}

impl RegionMasks {
    pub fn bbox(&self, frame: usize, character: usize) -> Option<BBox> {
        self.entries[frame][character].bbox
    }
}

/// Run the whole flow on per-character pose maps `[frames, channels, h, w]`.
pub fn mask_flow(pose_maps: &[Tensor], sharpness: f32) -> Result<(RegionMasks, MaskPyramid)> {
    let first = pose_maps.first().ok_or_else(|| Error::shape("no pose maps"))?;
    let dims = first.dims().to_vec();
    let (frames, h, w) = match dims[..] {
        [f, _, h, w] => (f, h, w),
        _ => return Err(Error::shape(format!("pose map dims {dims:?}"))),
    };
    for m in pose_maps {
        m.expect_dims(&dims, "pose map")?;
    }
    let n = pose_maps.len();
    let mut entries = Vec::with_capacity(frames);
    let mut full = vec![0.0f32; n * frames * h * w];
    for f in 0..frames {
        let row: Vec<RegionMask> = pose_maps
            .iter()
            .map(|m| extract_bbox_mask(&m.slice_outer(f)))
            .collect::<Result<_>>()?;
        let binary: Vec<Tensor> = row.iter().map(|r| r.mask.clone()).collect();
        for (k, soft) in normalize_masks(&binary, sharpness)?.iter().enumerate() {
            full[(k * frames + f) * h * w..(k * frames + f + 1) * h * w].copy_from_slice(soft.data());
        }
        entries.push(row);
    }
    let pyramid = build_pyramids(&Tensor::new(vec![n, frames, h, w], full)?)?;
    Ok((RegionMasks { entries }, pyramid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_with(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(vec![3, h, w]);
        for &(r, c) in on {
            t.data_mut()[(h + r) * w + c] = 0.5;
        }
        t
    }

    #[test]
    fn bbox_spans_nonzero_rows_and_cols() {
        let m = extract_bbox_mask(&map_with(4, 4, &[(1, 1), (2, 3)])).unwrap();
        assert_eq!(m.bbox, Some(BBox { row_min: 1, row_max: 2, col_min: 1, col_max: 3 }));
        let expect = [0., 0., 0., 0., 0., 1., 1., 1., 0., 1., 1., 1., 0., 0., 0., 0.];
        assert_eq!(m.mask.data(), &expect);
    }

    #[test]
    fn empty_and_full_maps() {
        let empty = extract_bbox_mask(&Tensor::zeros(vec![3, 4, 4])).unwrap();
        assert_eq!(empty.bbox, None);
        assert!(empty.mask.data().iter().all(|&v| v == 0.0));
        let full = extract_bbox_mask(&Tensor::ones(vec![1, 4, 4])).unwrap();
        assert!(full.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_weights() {
        let a = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let out = normalize_masks(&[a, b], 1.0).unwrap();
        let e = std::f32::consts::E;
        assert!((out[0].data()[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((out[0].data()[0] - 0.7311).abs() < 1e-4);
        assert!((out[1].data()[0] - 0.2689).abs() < 1e-4);
        assert_eq!((out[0].data()[1], out[1].data()[1]), (0.5, 0.5));
        assert_eq!((out[0].data()[2], out[1].data()[2]), (0.5, 0.5));
        let sharp = normalize_masks(&[out[0].map(|_| 1.0), Tensor::zeros(vec![1, 3])], 20.0).unwrap();
        assert!(sharp[0].data()[0] > 0.99);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            normalize_masks(&[Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2, 3])], 1.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(normalize_masks(&[Tensor::zeros(vec![2])], 0.5), Err(Error::Validation(_))));
        assert!(matches!(build_pyramids(&Tensor::ones(vec![1, 1, 12, 16])), Err(Error::Geometry(_))));
    }

    #[test]
    fn pyramid_layout() {
        let p = build_pyramids(&Tensor::ones(vec![1, 2, 64, 64])).unwrap();
        let sizes = |g: &[Tensor]| g.iter().map(|t| (t.dims()[2], t.dims()[3])).collect::<Vec<_>>();
        assert_eq!(sizes(p.group_a()), vec![(64, 64), (32, 32), (16, 16)]);
        assert_eq!(sizes(p.group_b()), vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        assert_eq!(sizes(p.group_c()), vec![(8, 8)]);
        assert!(p.levels().iter().all(|l| l.data().iter().all(|&v| v == 1.0)));
    }

    /// Scalar bilinear (align-corners false) then renormalize.
    fn oracle_level(src: &[Vec<Vec<f64>>], out: usize) -> Vec<Vec<Vec<f64>>> {
        let n_in = src[0].len();
        let scale = n_in as f64 / out as f64;
        let coord = |i: usize| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut res: Vec<Vec<Vec<f64>>> = src
            .iter()
            .map(|m| {
                (0..out)
                    .map(|y| {
                        let (y0, y1, fy) = coord(y);
                        (0..out)
                            .map(|x| {
                                let (x0, x1, fx) = coord(x);
                                let top = m[y0][x0] * (1.0 - fx) + m[y0][x1] * fx;
                                let bot = m[y1][x0] * (1.0 - fx) + m[y1][x1] * fx;
                                top * (1.0 - fy) + bot * fy
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        for y in 0..out {
            for x in 0..out {
                let s: f64 = res.iter().map(|m| m[y][x]).sum();
                for m in res.iter_mut() {
                    m[y][x] /= s;
                }
            }
        }
        res
    }

    #[test]
    fn disjoint_halves_match_oracle() {
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let left: Vec<Vec<f64>> = (0..8).map(|_| (0..8).map(|c| if c < 4 { hi } else { 1.0 - hi }).collect()).collect();
        let right: Vec<Vec<f64>> = left.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
        let flat: Vec<f32> = left.iter().chain(&right).flatten().map(|&v| v as f32).collect();
        let p = build_pyramids(&Tensor::new(vec![2, 1, 8, 8], flat).unwrap()).unwrap();
        let want = oracle_level(&[left, right], 4);
        for k in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let got = p.level(1).data()[(k * 4 + y) * 4 + x] as f64;
                    assert!((got - want[k][y][x]).abs() < 1e-6);
                }
            }
        }
    }

    fn boxes_strategy() -> impl Strategy<Value = Vec<(usize, usize, usize, usize)>> {
        proptest::collection::vec((0usize..16, 0usize..16, 0usize..16, 0usize..16), 1..4)
    }

    proptest! {
        #[test]
        fn partition_of_unity_everywhere(boxes in boxes_strategy(), s in 1.0f32..30.0) {
            let maps: Vec<Tensor> = boxes
                .iter()
                .map(|&(r0, r1, c0, c1)| {
                    let mut t = Tensor::zeros(vec![1, 1, 16, 16]);
                    t.data_mut()[r0 * 16 + c0] = 1.0;
                    t.data_mut()[r1 * 16 + c1] = 1.0;
                    t
                })
                .collect();
            let (_, p) = mask_flow(&maps, s).unwrap();
            prop_assert!(p.partition_error() < 1e-5);
        }

        #[test]
        fn extraction_is_idempotent(on in proptest::collection::vec((0usize..8, 0usize..8), 0..5)) {
            let m = extract_bbox_mask(&map_with(8, 8, &on)).unwrap();
            let again = extract_bbox_mask(&m.mask).unwrap();
            prop_assert_eq!(again, m);
        }
    }
}
