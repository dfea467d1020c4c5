//! Synthetic multi-character scenes: coloured stick figures walking on a
//! gray background, with their pose tracks and tagged captions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masks::{bbox_of, BBox};
use crate::pose::{draw_skeleton, load_pose_json, save_pose_json, CharacterTrack, Keypoint, PoseFrame, PoseTrackSet, RasterStyle};
use crate::prompt::{parse_prompt, split_prompt};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};

pub const CLASS_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const CLASS_COLORS: [[f32; 3]; 4] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.9], [0.95, 0.85, 0.1]];
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// Head, neck, hip, two hands, two feet.
pub const FIGURE_LIMBS: [(usize, usize); 6] = [(0, 1), (1, 2), (1, 3), (1, 4), (2, 5), (2, 6)];
pub const FIGURE_JOINTS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub characters: usize,
    pub style: RasterStyle,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, frames: 8, characters: 2, style: RasterStyle::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub poses: PoseTrackSet,
    /// Class index of each character, in id order.
    pub classes: Vec<usize>,
    pub caption: String,
    /// `[frames, 3, h, w]` pixels in `[0, 1]`.
    pub frames: Tensor,
}

impl Scene {
    /// Ground-truth box of a character in a frame.
    pub fn bbox(&self, frame: usize, character: usize) -> Option<BBox> {
        let kp = &self.poses.characters[character].frames[frame].keypoints;
        let mut buf = vec![0.0f32; self.poses.width * self.poses.height];
        let style = RasterStyle { channels: crate::pose::PoseChannels::Mono, ..RasterStyle::default() };
        draw_skeleton(&mut buf, self.poses.width, self.poses.height, kp, &self.poses.skeleton, &style, |_| [1.0; 3], [1.0; 3]);
        bbox_of(self.poses.height, self.poses.width, |r, c| buf[r * self.poses.width + c] != 0.0)
    }
}

/// Caption in the tagged grammar, e.g. `red<1>, blue<2>, on gray background`.
pub fn caption(classes: &[usize]) -> String {
    let mut parts: Vec<String> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| format!("{}<{}>", CLASS_NAMES[c], i + 1))
        .collect();
    parts.push("on gray background".into());
    parts.join(", ")
}

struct Motion {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    size: f64,
    phase: f64,
}

impl Motion {
    fn keypoints(&self, f: usize) -> Vec<Keypoint> {
        let (cx, cy) = (self.cx + self.vx * f as f64, self.cy + self.vy * f as f64);
        let s = self.size;
        let sw = 0.1 * s * (self.phase + 0.9 * f as f64).sin();
        let pts = [
            (cx, cy - 0.42 * s),
            (cx, cy - 0.28 * s),
            (cx, cy + 0.08 * s),
            (cx - 0.24 * s + sw, cy - 0.02 * s),
            (cx + 0.24 * s - sw, cy - 0.02 * s),
            (cx - 0.14 * s - sw, cy + 0.45 * s),
            (cx + 0.14 * s + sw, cy + 0.45 * s),
        ];
        pts.iter().map(|&(x, y)| Keypoint::new(x.round(), y.round(), 1.0)).collect()
    }

    fn extent(&self, f: usize, margin: f64) -> (f64, f64, f64, f64) {
        let kp = self.keypoints(f);
        let xs = kp.iter().map(|k| k.x);
        let ys = kp.iter().map(|k| k.y);
        (
            xs.clone().fold(f64::INFINITY, f64::min) - margin,
            xs.fold(f64::NEG_INFINITY, f64::max) + margin,
            ys.clone().fold(f64::INFINITY, f64::min) - margin,
            ys.fold(f64::NEG_INFINITY, f64::max) + margin,
        )
    }
}

/// Render figures in class colours over the gray background with the same
/// rasterizer as the pose maps, so box extents agree pixel for pixel.
pub fn render(poses: &PoseTrackSet, classes: &[usize], style: &RasterStyle) -> Tensor {
    let (w, h) = (poses.width, poses.height);
    let frames = poses.num_frames();
    let plane = w * h;
    let mut data = vec![0.0f32; frames * 3 * plane];
    for f in 0..frames {
        let buf = &mut data[f * 3 * plane..(f + 1) * 3 * plane];
        for (ch, &bg) in BACKGROUND.iter().enumerate() {
            buf[ch * plane..(ch + 1) * plane].fill(bg);
        }
        for (track, &class) in poses.characters.iter().zip(classes) {
            let color = CLASS_COLORS[class];
            let style = RasterStyle { channels: crate::pose::PoseChannels::Color, ..*style };
            draw_skeleton(buf, w, h, &track.frames[f].keypoints, &poses.skeleton, &style, |_| color, color);
        }
    }
    Tensor::new(vec![frames, 3, h, w], data).expect("consistent dims")
}

/// One random scene.
pub fn gen_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let n = cfg.characters;
    if !(1..=CLASS_NAMES.len()).contains(&n) {
        return Err(Error::Validation(format!("scenes hold 1..={} characters, got {n}", CLASS_NAMES.len())));
    }
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let margin = cfg.style.limb_thickness + 1.0;
    let mut classes: Vec<usize> = (0..CLASS_NAMES.len()).collect();
    classes.shuffle(rng);
    classes.truncate(n);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    for _attempt in 0..100 {
        let motions: Vec<Motion> = slots
            .iter()
            .map(|&slot| {
                let size = rng.gen_range(0.34..0.44) * h * (2.0 / n as f64).min(1.0);
                let slot_w = w / n as f64;
                Motion {
                    cx: slot_w * (slot as f64 + 0.5) + rng.gen_range(-0.15..0.15) * slot_w,
                    cy: rng.gen_range(0.4..0.6) * h,
                    vx: rng.gen_range(-0.6..0.6),
                    vy: rng.gen_range(-0.4..0.4),
                    size,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let inside = motions.iter().all(|m| {
            (0..cfg.frames).all(|f| {
                let (x0, x1, y0, y1) = m.extent(f, margin);
                x0 >= 0.0 && y0 >= 0.0 && x1 < w && y1 < h
            })
        });
        let apart = (0..cfg.frames).all(|f| {
            (0..n).all(|i| {
                (i + 1..n).all(|j| {
                    let a = motions[i].extent(f, margin);
                    let b = motions[j].extent(f, margin);
                    a.1 < b.0 || b.1 < a.0 || a.3 < b.2 || b.3 < a.2
                })
            })
        });
        if !(inside && apart) {
            continue;
        }
        let characters = motions
            .iter()
            .enumerate()
            .map(|(i, m)| CharacterTrack {
                id: i as u32 + 1,
                frames: (0..cfg.frames).map(|f| PoseFrame { keypoints: m.keypoints(f) }).collect(),
            })
            .collect();
        let poses = PoseTrackSet {
            width: cfg.width,
            height: cfg.height,
            fps: 8.0,
            skeleton: FIGURE_LIMBS.to_vec(),
            characters,
        }
        .validate()
        .map_err(|e| Error::Validation(e.to_string()))?;
        let frames = render(&poses, &classes, &cfg.style);
        return Ok(Scene { caption: caption(&classes), poses, classes, frames });
    }
    Err(Error::Validation("could not place non-overlapping figures in 100 tries".into()))
}

/// `count` scenes, a pure function of `seed` and `cfg`.
pub fn gen_synthetic_dataset(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Validation("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_scene(cfg, &mut rng)).collect()
}

/// Class index named by a character's split prompt.
fn class_of(prompt: &str) -> Option<usize> {
    crate::prompt::tokenize(prompt).iter().find_map(|t| CLASS_NAMES.iter().position(|c| c == t))
}

/// Write each scene to `dir/scene_NNNN/{frames.fymt, poses.json, caption.txt}`.
pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        let d = dir.join(format!("scene_{i:04}"));
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write_tensor(&s.frames, d.join("frames.fymt"))?;
        save_pose_json(&s.poses, d.join("poses.json"))?;
        let cap = d.join("caption.txt");
        std::fs::write(&cap, &s.caption).map_err(|e| Error::io(&cap, e))?;
    }
    Ok(())
}

/// Read one scene directory written by [`save_dataset`].
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let frames = read_tensor(dir.join("frames.fymt"))?;
    let poses = load_pose_json(dir.join("poses.json"))?;
    let cap = dir.join("caption.txt");
    let caption = std::fs::read_to_string(&cap).map_err(|e| Error::io(&cap, e))?.trim().to_owned();
    let split = split_prompt(&parse_prompt(&caption)?, poses.num_characters())?;
    let classes = split
        .prompts
        .iter()
        .map(|p| class_of(p).ok_or_else(|| Error::Validation(format!("{}: no class word in {p:?}", cap.display()))))
        .collect::<Result<Vec<_>>>()?;
    let expect = [poses.num_frames(), 3, poses.height, poses.width];
    if frames.dims() != expect {
        return Err(Error::shape(format!("{}: frames {:?}, poses imply {expect:?}", dir.display(), frames.dims())));
    }
    Ok(Scene { poses, classes, caption, frames })
}

/// Every `scene_*` directory under `dir`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("{} holds no scene_* directories", dir.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::extract_bbox_mask;
    use crate::pose::rasterize_all;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let a = gen_synthetic_dataset(&cfg, 7, 3).unwrap();
        let b = gen_synthetic_dataset(&cfg, 7, 3).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.poses, y.poses);
            assert!(x.frames.bits_eq(&y.frames));
            assert_eq!(x.caption, y.caption);
        }
    }

    #[test]
    fn single_character_captions() {
        let cfg = SceneConfig { characters: 1, ..Default::default() };
        for s in gen_synthetic_dataset(&cfg, 1, 5).unwrap() {
            let p = parse_prompt(&s.caption).unwrap();
            assert_eq!(p.segments.iter().filter(|s| s.id.is_some()).count(), 1);
        }
    }

    #[test]
    fn render_boxes_match_pose_boxes() {
        let cfg = SceneConfig { characters: 3, ..Default::default() };
        for s in gen_synthetic_dataset(&cfg, 2, 4).unwrap() {
            let maps = rasterize_all(&s.poses, &cfg.style);
            for f in 0..cfg.frames {
                for (k, m) in maps.iter().enumerate() {
                    let pose_box = extract_bbox_mask(&m.slice_outer(f)).unwrap().bbox;
                    assert_eq!(pose_box, s.bbox(f, k));
                    let color = CLASS_COLORS[s.classes[k]];
                    let img = s.frames.slice_outer(f);
                    let painted = bbox_of(64, 64, |r, c| (0..3).all(|ch| img.data()[(ch * 64 + r) * 64 + c] == color[ch]));
                    assert_eq!(painted, pose_box);
                }
            }
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let cfg = SceneConfig { characters: 1, frames: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hist = [0usize; 4];
        for _ in 0..1000 {
            hist[gen_scene(&cfg, &mut rng).unwrap().classes[0]] += 1;
        }
        for h in hist {
            assert!((h as f64 / 1000.0 - 0.25).abs() < 0.05, "{hist:?}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_synthetic_dataset(&SceneConfig::default(), 4, 3).unwrap();
        save_dataset(&scenes, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.classes, b.classes);
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.poses, b.poses);
            assert!(a.frames.bits_eq(&b.frames));
        }
    }
}
