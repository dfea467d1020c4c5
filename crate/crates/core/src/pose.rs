//! Pose track ingestion and skeleton rasterization.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, PoseError, Result};
use crate::tensor::Tensor;

/// Limb list of the 18-joint body topology (nose, neck, shoulders, elbows,
/// wrists, hips, knees, ankles, eyes, ears).
pub const BODY_18_LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl From<[f64; 3]> for Keypoint {
    fn from([x, y, confidence]: [f64; 3]) -> Self {
        Self { x, y, confidence }
    }
}

impl From<Keypoint> for [f64; 3] {
    fn from(k: Keypoint) -> Self {
        [k.x, k.y, k.confidence]
    }
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn visible(&self) -> bool {
        self.confidence > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterTrack {
    pub id: u32,
    pub frames: Vec<PoseFrame>,
}

fn default_skeleton() -> Vec<(usize, usize)> {
    BODY_18_LIMBS.to_vec()
}

/// Per-character keypoint sequences on a shared canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrackSet {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    #[serde(default = "default_skeleton")]
    pub skeleton: Vec<(usize, usize)>,
    pub characters: Vec<CharacterTrack>,
}

impl PoseTrackSet {
    pub fn num_characters(&self) -> usize {
        self.characters.len()
    }

    pub fn num_frames(&self) -> usize {
        self.characters.first().map_or(0, |c| c.frames.len())
    }

    /// Check every invariant and sort characters by id.
    pub fn validate(mut self) -> std::result::Result<Self, PoseError> {
        if self.width == 0 || self.height == 0 {
            return Err(PoseError::InvalidCanvas {
                width: self.width,
                height: self.height,
            });
        }
        if self.characters.is_empty() {
            return Err(PoseError::NoCharacters);
        }
        let mut seen = BTreeSet::new();
        for c in &self.characters {
            if !seen.insert(c.id) {
                return Err(PoseError::DuplicateId(c.id));
            }
        }
        let ids: Vec<u32> = seen.into_iter().collect();
        if ids.iter().enumerate().any(|(i, &id)| id as usize != i + 1) {
            return Err(PoseError::NonContiguousIds(ids));
        }
        self.characters.sort_by_key(|c| c.id);
        let expected = self.characters[0].frames.len();
        let joints = self.characters[0]
            .frames
            .first()
            .map_or(0, |f| f.keypoints.len());
        for c in &self.characters {
            if c.frames.len() != expected {
                return Err(PoseError::FrameCountMismatch {
                    id: c.id,
                    expected,
                    found: c.frames.len(),
                });
            }
            for (fi, frame) in c.frames.iter().enumerate() {
                if frame.keypoints.len() != joints {
                    return Err(PoseError::KeypointCountMismatch {
                        id: c.id,
                        frame: fi,
                        expected: joints,
                        found: frame.keypoints.len(),
                    });
                }
                for (ji, k) in frame.keypoints.iter().enumerate() {
                    if !(0.0..=1.0).contains(&k.confidence) {
                        return Err(PoseError::InvalidConfidence {
                            id: c.id,
                            frame: fi,
                            joint: ji,
                            confidence: k.confidence,
                        });
                    }
                    let inside = k.x >= 0.0
                        && k.y >= 0.0
                        && k.x < self.width as f64
                        && k.y < self.height as f64;
                    if k.visible() && !inside {
                        return Err(PoseError::KeypointOutOfRange {
                            id: c.id,
                            frame: fi,
                            joint: ji,
                            x: k.x,
                            y: k.y,
                        });
                    }
                }
            }
        }
        if let Some(&(a, b)) = self.skeleton.iter().find(|(a, b)| *a >= joints || *b >= joints) {
            return Err(PoseError::BadSkeleton(a, b));
        }
        Ok(self)
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, PoseError> {
        let raw: PoseTrackSet =
            serde_json::from_str(s).map_err(|e| PoseError::MalformedJson(e.to_string()))?;
        raw.validate()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("pose sets always serialize")
    }
}

/// Load and validate a pose JSON file.
pub fn load_pose_json(path: impl AsRef<Path>) -> Result<PoseTrackSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PoseTrackSet::from_json_str(&text).map_err(|kind| Error::Pose {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn save_pose_json(poses: &PoseTrackSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, poses.to_json_string()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoseChannels {
    #[default]
    Color,
    Mono,
}

impl PoseChannels {
    pub fn count(self) -> usize {
        match self {
            PoseChannels::Color => 3,
            PoseChannels::Mono => 1,
        }
    }
}

/// Rasterizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterStyle {
    pub limb_thickness: f64,
    pub channels: PoseChannels,
}

impl Default for RasterStyle {
    fn default() -> Self {
        Self {
            limb_thickness: 2.0,
            channels: PoseChannels::Color,
        }
    }
}

/// Fixed per-limb colours, cycled when a skeleton has more limbs.
const LIMB_PALETTE: [[f32; 3]; 12] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 0.0],
    [0.5, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.5],
    [0.0, 1.0, 1.0],
    [0.0, 0.5, 1.0],
    [0.0, 0.0, 1.0],
    [0.5, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.0, 0.5],
];

const JOINT_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

pub fn limb_color(limb: usize) -> [f32; 3] {
    LIMB_PALETTE[limb % LIMB_PALETTE.len()]
}

/// Squared distance from `(px, py)` to the segment `a`–`b`.
pub fn segment_distance_sq(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (px - (a.0 + t * dx), py - (a.1 + t * dy));
    cx * cx + cy * cy
}

/// Pixels `(row, col)` covered by a thick segment: every pixel whose integer
/// coordinate lies within `radius` of the segment.
pub fn segment_pixels(a: (f64, f64), b: (f64, f64), radius: f64, width: usize, height: usize) -> Vec<(usize, usize)> {
    let c0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let c1 = ((a.0.max(b.0) + radius).ceil().max(0.0) as usize).min(width.saturating_sub(1));
    let r0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let r1 = ((a.1.max(b.1) + radius).ceil().max(0.0) as usize).min(height.saturating_sub(1));
    // tolerance keeps pixels exactly on the boundary independent of rounding
    let r2 = radius * radius + 1e-9;
    let mut out = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            if segment_distance_sq(c as f64, r as f64, a, b) <= r2 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Draw one frame of one character into a `[channels, h, w]` buffer using
/// per-limb colours. Joints are discs of radius `limb_thickness`.
pub fn draw_skeleton(
    buf: &mut [f32],
    width: usize,
    height: usize,
    keypoints: &[Keypoint],
    skeleton: &[(usize, usize)],
    style: &RasterStyle,
    limb_colors: impl Fn(usize) -> [f32; 3],
    joint_color: [f32; 3],
) {
    let plane = width * height;
    debug_assert_eq!(buf.len(), style.channels.count() * plane);
    let mut paint = |pixels: Vec<(usize, usize)>, color: [f32; 3]| {
        for (r, c) in pixels {
            match style.channels {
                PoseChannels::Color => {
                    for (ch, &v) in color.iter().enumerate() {
                        buf[ch * plane + r * width + c] = v;
                    }
                }
                PoseChannels::Mono => buf[r * width + c] = 1.0,
            }
        }
    };
    let half = style.limb_thickness / 2.0;
    for (li, &(ja, jb)) in skeleton.iter().enumerate() {
        let (Some(ka), Some(kb)) = (keypoints.get(ja), keypoints.get(jb)) else {
            continue;
        };
        if ka.visible() && kb.visible() {
            paint(segment_pixels((ka.x, ka.y), (kb.x, kb.y), half, width, height), limb_colors(li));
        }
    }
    for k in keypoints.iter().filter(|k| k.visible()) {
        paint(
            segment_pixels((k.x, k.y), (k.x, k.y), style.limb_thickness, width, height),
            joint_color,
        );
    }
}

/// Render a single character's frames as a `[frames, channels, h, w]` pose map.
pub fn rasterize_pose(
    frames: &[PoseFrame],
    skeleton: &[(usize, usize)],
    width: usize,
    height: usize,
    style: &RasterStyle,
) -> Tensor {
    let nch = style.channels.count();
    let per_frame = nch * width * height;
    let mut data = vec![0.0f32; frames.len().max(1) * per_frame];
    for (fi, frame) in frames.iter().enumerate() {
        draw_skeleton(
            &mut data[fi * per_frame..(fi + 1) * per_frame],
            width,
            height,
            &frame.keypoints,
            skeleton,
            style,
            limb_color,
            JOINT_COLOR,
        );
    }
    Tensor::new(vec![frames.len().max(1), nch, height, width], data).expect("consistent dims")
}

/// Pose maps for every character of a track set, in id order.
pub fn rasterize_all(poses: &PoseTrackSet, style: &RasterStyle) -> Vec<Tensor> {
    poses
        .characters
        .iter()
        .map(|c| rasterize_pose(&c.frames, &poses.skeleton, poses.width, poses.height, style))
        .collect()
}

/// Union of several pose maps (per-pixel maximum).
pub fn composite(maps: &[Tensor]) -> Tensor {
    let mut out = maps[0].clone();
    for m in &maps[1..] {
        for (a, &b) in out.data_mut().iter_mut().zip(m.data()) {
            *a = a.max(b);
        }
    }
    out
}
