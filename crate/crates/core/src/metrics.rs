//! Toy-scale quality metrics over generated frames.
//!
//! Characters are found by nearest-colour segmentation against the class
//! palette, never through the model's own masks.

use crate::data::{BACKGROUND, CLASS_COLORS, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::masks::{bbox_of, BBox};
use crate::prompt::Vocabulary;
use crate::tensor::Tensor;

/// Nearest palette entry of a pixel; `None` is the background template.
pub fn classify(rgb: [f32; 3]) -> Option<usize> {
    let d = |t: &[f32; 3]| (0..3).map(|i| (rgb[i] - t[i]).powi(2)).sum::<f32>();
    let mut best = (d(&BACKGROUND), None);
    for (c, t) in CLASS_COLORS.iter().enumerate() {
        let dc = d(t);
        if dc < best.0 {
            best = (dc, Some(c));
        }
    }
    best.1
}

/// Per-pixel class labels of a `[3, h, w]` frame, row-major.
pub fn segment(frame: &Tensor) -> Result<Vec<Option<usize>>> {
    let d = frame.dims();
    if d.len() != 3 || d[0] != 3 {
        return Err(Error::shape(format!("expected a [3, h, w] frame, got {d:?}")));
    }
    let plane = d[1] * d[2];
    let x = frame.data();
    Ok((0..plane).map(|i| classify([x[i], x[plane + i], x[2 * plane + i]])).collect())
}

fn check_frames(frames: &Tensor) -> Result<(usize, usize, usize)> {
    match frames.dims() {
        &[f, 3, h, w] => Ok((f, h, w)),
        d => Err(Error::shape(format!("expected [frames, 3, h, w], got {d:?}"))),
    }
}

/// Ground truth for one scene: per frame, per character box, plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub boxes: Vec<Vec<Option<BBox>>>,
    pub labels: Vec<usize>,
}

impl Truth {
    pub fn of_scene(scene: &crate::data::Scene) -> Self {
        let frames = scene.poses.num_frames();
        let n = scene.poses.num_characters();
        Self {
            boxes: (0..frames).map(|f| (0..n).map(|k| scene.bbox(f, k)).collect()).collect(),
            labels: scene.classes.clone(),
        }
    }

    pub fn characters(&self) -> usize {
        self.labels.len()
    }
}

fn votes(labels: &[Option<usize>], w: usize, b: &BBox) -> [usize; CLASS_NAMES.len()] {
    let mut v = [0; CLASS_NAMES.len()];
    for r in b.row_min..=b.row_max {
        for c in b.col_min..=b.col_max {
            if let Some(k) = labels[r * w + c] {
                v[k] += 1;
            }
        }
    }
    v
}

/// Majority class of the foreground pixels inside a box.
fn dominant(v: &[usize]) -> Option<usize> {
    let (k, &n) = v.iter().enumerate().max_by_key(|&(k, n)| (*n, std::cmp::Reverse(k)))?;
    (n > 0).then_some(k)
}

/// Per-character `(correct, evaluated)` region classifications.
pub fn region_class_counts(frames: &Tensor, truth: &Truth) -> Result<Vec<(usize, usize)>> {
    let (f, _, w) = check_frames(frames)?;
    let mut out = vec![(0, 0); truth.characters()];
    for fi in 0..f.min(truth.boxes.len()) {
        let labels = segment(&frames.slice_outer(fi))?;
        for (k, b) in truth.boxes[fi].iter().enumerate() {
            let Some(b) = b else {
                log::warn!("character {} has an empty region in frame {fi}; excluded", k + 1);
                continue;
            };
            out[k].1 += 1;
            if dominant(&votes(&labels, w, b)) == Some(truth.labels[k]) {
                out[k].0 += 1;
            }
        }
    }
    Ok(out)
}

/// Fraction of (region, frame) pairs whose dominant colour matches the
/// caption's class.
pub fn region_class_accuracy(frames: &Tensor, truth: &Truth) -> Result<f64> {
    let counts = region_class_counts(frames, truth)?;
    let (c, n) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if n == 0 { f64::NAN } else { c as f64 / n as f64 })
}

/// Pixels of class `class` with at least one 8-neighbour of the same class.
fn class_bbox(labels: &[Option<usize>], h: usize, w: usize, class: usize) -> Option<BBox> {
    let at = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && labels[r as usize * w + c as usize] == Some(class)
    };
    bbox_of(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        at(r, c) && (-1..=1).any(|dr| (-1..=1).any(|dc| (dr, dc) != (0, 0) && at(r + dr, c + dc)))
    })
}

/// Per character, per frame IoU of the segmented box against the pose box;
/// an undetected character scores 0.
pub fn pose_iou_values(frames: &Tensor, truth: &Truth) -> Result<Vec<Vec<f64>>> {
    let (f, h, w) = check_frames(frames)?;
    let mut out = vec![Vec::new(); truth.characters()];
    for fi in 0..f.min(truth.boxes.len()) {
        let labels = segment(&frames.slice_outer(fi))?;
        for (k, b) in truth.boxes[fi].iter().enumerate() {
            let Some(b) = b else { continue };
            let iou = class_bbox(&labels, h, w, truth.labels[k]).map_or(0.0, |g| g.iou(b));
            out[k].push(iou);
        }
    }
    Ok(out)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Mean bbox IoU over every (character, frame) pair.
pub fn pose_accuracy_iou(frames: &Tensor, truth: &Truth) -> Result<f64> {
    let v: Vec<f64> = pose_iou_values(frames, truth)?.concat();
    Ok(mean(&v))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a == b && a.iter().any(|&v| v != 0.0) {
        return Some(1.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm feature vector excluded from frame consistency");
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Consecutive-frame cosine similarities, overall and per region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Consistency {
    pub overall: Vec<f64>,
    pub per_character: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

impl Consistency {
    pub fn extend(&mut self, other: Consistency) {
        self.overall.extend(other.overall);
        if self.per_character.len() < other.per_character.len() {
            self.per_character.resize(other.per_character.len(), Vec::new());
        }
        for (a, b) in self.per_character.iter_mut().zip(other.per_character) {
            a.extend(b);
        }
        self.background.extend(other.background);
    }
}

/// Cosine similarity of consecutive frames of `features: [F, C, h, w]`.
///
/// `regions` holds one `[F, h, w]` indicator per character. A pair of
/// frames is compared on the positions a character covers in either frame,
/// and the background on positions no character covers in either frame.
/// With `center`, each frame's mean over all positions and channels is
/// removed first.
pub fn frame_consistency(features: &Tensor, regions: &[Tensor], center: bool) -> Result<Consistency> {
    let d = features.dims();
    if d.len() != 4 {
        return Err(Error::shape(format!("features must be [F, C, h, w], got {d:?}")));
    }
    let (f, c, hw) = (d[0], d[1], d[2] * d[3]);
    if f < 2 {
        return Err(Error::Validation("frame consistency needs at least 2 frames".into()));
    }
    for r in regions {
        if r.dims() != [f, d[2], d[3]] {
            return Err(Error::shape(format!("region {:?} does not match features {d:?}", r.dims())));
        }
    }
    let x = features.data();
    let frame_mean: Vec<f64> = (0..f)
        .map(|fi| {
            if center {
                x[fi * c * hw..(fi + 1) * c * hw].iter().map(|&v| v as f64).sum::<f64>() / (c * hw) as f64
            } else {
                0.0
            }
        })
        .collect();
    let gather = |frame: usize, sel: &[bool]| -> Vec<f64> {
        let mut v = Vec::new();
        for ch in 0..c {
            let base = (frame * c + ch) * hw;
            v.extend((0..hw).filter(|&i| sel[i]).map(|i| x[base + i] as f64 - frame_mean[frame]));
        }
        v
    };
    let mut out = Consistency { per_character: vec![Vec::new(); regions.len()], ..Default::default() };
    for fi in 0..f - 1 {
        let covers = |r: &Tensor, i: usize| r.data()[fi * hw + i] > 0.5 || r.data()[(fi + 1) * hw + i] > 0.5;
        let all = vec![true; hw];
        if let Some(s) = cosine(&gather(fi, &all), &gather(fi + 1, &all)) {
            out.overall.push(s);
        }
        let mut any = vec![false; hw];
        for (k, r) in regions.iter().enumerate() {
            let sel: Vec<bool> = (0..hw).map(|i| covers(r, i)).collect();
            for (a, &s) in any.iter_mut().zip(&sel) {
                *a |= s;
            }
            if sel.iter().any(|&s| s) {
                if let Some(s) = cosine(&gather(fi, &sel), &gather(fi + 1, &sel)) {
                    out.per_character[k].push(s);
                }
            }
        }
        let bg: Vec<bool> = any.iter().map(|a| !a).collect();
        if !regions.is_empty() && bg.iter().any(|&s| s) {
            if let Some(s) = cosine(&gather(fi, &bg), &gather(fi + 1, &bg)) {
                out.background.push(s);
            }
        }
    }
    Ok(out)
}

/// `[F, h, w]` indicators of the cells of a `grid_h x grid_w` grid that
/// overlap each character's box.
pub fn region_grids(truth: &Truth, img_h: usize, img_w: usize, grid_h: usize, grid_w: usize) -> Vec<Tensor> {
    let f = truth.boxes.len();
    (0..truth.characters())
        .map(|k| {
            Tensor::from_fn(vec![f, grid_h, grid_w], |i| {
                let (fi, r, c) = (i / (grid_h * grid_w), i / grid_w % grid_h, i % grid_w);
                match truth.boxes[fi][k] {
                    None => 0.0,
                    Some(b) => {
                        let (r0, r1) = (r * img_h / grid_h, ((r + 1) * img_h / grid_h).max(r * img_h / grid_h + 1) - 1);
                        let (c0, c1) = (c * img_w / grid_w, ((c + 1) * img_w / grid_w).max(c * img_w / grid_w + 1) - 1);
                        let hit = r0 <= b.row_max && b.row_min <= r1 && c0 <= b.col_max && b.col_min <= c1;
                        if hit {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            })
        })
        .collect()
}

/// 2x2 average pooling of `[F, C, h, w]` pixels, the raw-mode features.
pub fn pooled_pixels(frames: &Tensor) -> Result<Tensor> {
    let d = frames.dims();
    if d.len() != 4 || d[2] % 2 != 0 || d[3] % 2 != 0 {
        return Err(Error::shape(format!("cannot pool {d:?}")));
    }
    let (h, w) = (d[2], d[3]);
    let x = frames.data();
    let (ho, wo) = (h / 2, w / 2);
    Ok(Tensor::from_fn(vec![d[0], d[1], ho, wo], |i| {
        let base = i / (ho * wo) * h * w;
        let (r, c) = (2 * (i / wo % ho), 2 * (i % wo));
        0.25 * (x[base + r * w + c] + x[base + r * w + c + 1] + x[base + (r + 1) * w + c] + x[base + (r + 1) * w + c + 1])
    }))
}

/// Per (region, frame): cosine between the vote-weighted mix of the class
/// words' embeddings and the prompted class word's embedding.
pub fn text_alignment_values(frames: &Tensor, truth: &Truth, table: &Tensor, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let (f, _, w) = check_frames(frames)?;
    let dim = table.dims()[1];
    let word = |c: usize| -> Result<Vec<f64>> {
        let row = vocab
            .get(CLASS_NAMES[c])
            .ok_or_else(|| Error::Validation(format!("class word {:?} missing from vocabulary", CLASS_NAMES[c])))?;
        Ok(table.data()[row * dim..(row + 1) * dim].iter().map(|&v| v as f64).collect())
    };
    let words: Vec<Vec<f64>> = (0..CLASS_NAMES.len()).map(word).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for fi in 0..f.min(truth.boxes.len()) {
        let labels = segment(&frames.slice_outer(fi))?;
        for (k, b) in truth.boxes[fi].iter().enumerate() {
            let Some(b) = b else { continue };
            let v = votes(&labels, w, b);
            let total: usize = v.iter().sum();
            if total == 0 {
                out.push(0.0);
                continue;
            }
            let mix: Vec<f64> = (0..dim)
                .map(|j| v.iter().enumerate().map(|(c, &n)| n as f64 / total as f64 * words[c][j]).sum())
                .collect();
            out.push(cosine(&mix, &words[truth.labels[k]]).unwrap_or(0.0));
        }
    }
    Ok(out)
}

/// Aggregated metrics of one regime over an evaluation set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub label: String,
    pub scenes: usize,
    /// Per character `(correct, evaluated)`.
    pub region_counts: Vec<(usize, usize)>,
    pub pose_iou: Vec<Vec<f64>>,
    pub text_alignment: Vec<f64>,
    pub consistency_raw: Consistency,
    pub consistency_model: Option<Consistency>,
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn new(label: &str) -> Self {
        Self { label: label.into(), ..Default::default() }
    }

    pub fn region_class_accuracy(&self) -> f64 {
        let (c, n) = self.region_counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if n == 0 {
            f64::NAN
        } else {
            c as f64 / n as f64
        }
    }

    pub fn region_accuracy_of(&self, k: usize) -> f64 {
        let (c, n) = self.region_counts[k];
        if n == 0 {
            f64::NAN
        } else {
            c as f64 / n as f64
        }
    }

    pub fn pose_iou_mean(&self) -> f64 {
        mean(&self.pose_iou.concat())
    }

    pub fn pose_iou_median(&self) -> f64 {
        median(&self.pose_iou.concat())
    }

    pub fn text_alignment(&self) -> f64 {
        mean(&self.text_alignment)
    }

    /// Fold in one scene's results.
    pub fn add_scene(&mut self, frames: &Tensor, truth: &Truth, table: &Tensor, vocab: &Vocabulary, model_features: Option<&Tensor>) -> Result<()> {
        let n = truth.characters();
        if self.region_counts.len() < n {
            self.region_counts.resize(n, (0, 0));
            self.pose_iou.resize(n, Vec::new());
        }
        for (k, (c, t)) in region_class_counts(frames, truth)?.into_iter().enumerate() {
            self.region_counts[k].0 += c;
            self.region_counts[k].1 += t;
        }
        for (k, v) in pose_iou_values(frames, truth)?.into_iter().enumerate() {
            self.pose_iou[k].extend(v);
        }
        self.text_alignment.extend(text_alignment_values(frames, truth, table, vocab)?);
        let (_, h, w) = check_frames(frames)?;
        if frames.dims()[0] >= 2 {
            let raw = pooled_pixels(frames)?;
            let grids = region_grids(truth, h, w, h / 2, w / 2);
            self.consistency_raw.extend(frame_consistency(&raw, &grids, true)?);
            if let Some(feat) = model_features {
                let fd = feat.dims();
                let grids = region_grids(truth, h, w, fd[2], fd[3]);
                self.consistency_model
                    .get_or_insert_with(Consistency::default)
                    .extend(frame_consistency(feat, &grids, false)?);
            }
        }
        self.scenes += 1;
        Ok(())
    }

    fn consistency_lines(&self, tag: &str, c: &Consistency, out: &mut Vec<(String, f64)>) {
        out.push((format!("frame_consistency.{tag}.overall"), mean(&c.overall)));
        for (k, v) in c.per_character.iter().enumerate() {
            out.push((format!("frame_consistency.{tag}.char{}", k + 1), mean(v)));
        }
        out.push((format!("frame_consistency.{tag}.background"), mean(&c.background)));
    }

    /// Every reported value under a stable key.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("scenes".to_owned(), self.scenes as f64),
            ("region_class_accuracy".into(), self.region_class_accuracy()),
        ];
        for k in 0..self.region_counts.len() {
            out.push((format!("region_class_accuracy.char{}", k + 1), self.region_accuracy_of(k)));
        }
        out.push(("pose_iou.mean".into(), self.pose_iou_mean()));
        out.push(("pose_iou.median".into(), self.pose_iou_median()));
        for (k, v) in self.pose_iou.iter().enumerate() {
            out.push((format!("pose_iou.char{}", k + 1), mean(v)));
        }
        out.push(("text_alignment".into(), self.text_alignment()));
        self.consistency_lines("raw", &self.consistency_raw, &mut out);
        if let Some(c) = &self.consistency_model {
            self.consistency_lines("model", c, &mut out);
        }
        out
    }

    /// `key=value` lines, prefixed with the regime label.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{}.{k}={}\n", self.label, fmt(v)));
        }
        s
    }

    /// Human-readable block.
    pub fn to_text(&self) -> String {
        let mut s = format!("[{}]\n", self.label);
        for (k, v) in self.entries() {
            s.push_str(&format!("  {k:<40} {}\n", fmt(v)));
        }
        s
    }
}
