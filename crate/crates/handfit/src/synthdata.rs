//! Procedural hand-occluded try-on scenes and their on-disk dataset format.
//! Every scene is a pure function of one seed: gradient background, textured
//! torso, articulated capsule hands, and all the derived pose maps and hand
//! records the conditioning pathways consume.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handpose::{PoseMaps, DENSEPOSE_CLASSES};
use crate::handprior::{
    pad_hands, union_mask, validate_hand_params, Box4, HandParams, Mask, SingleHand, HAND_LEFT,
    HAND_RIGHT, NUM_SLOTS, NUM_VERTICES,
};
use crate::raster;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

/// Masked pixels of the agnostic image are set to this gray (128 on the u8
/// grid, so PNG round-trips keep the invariant exact).
pub const NEUTRAL_GRAY: f64 = 128.0 / 255.0;

/// Fiducial color stamped at joint positions; pure magenta survives 8-bit
/// quantization unchanged and never occurs elsewhere in a scene.
pub const FIDUCIAL_RGB: [f64; 3] = [1.0, 0.0, 1.0];

/// How many hands a scene gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HandCountMode {
    /// Exactly this many hands (0, 1, or 2).
    Fixed(usize),
    /// Weighted draw: 20% zero, 40% one, 40% two, so most scenes are occluded.
    Random,
}

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub hands: HandCountMode,
    /// Placement retries until each hand covers at least this many torso
    /// pixels; keeps the occlusion premise true for almost every handed scene.
    pub min_hand_overlap_px: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { h: 64, w: 64, hands: HandCountMode::Random, min_hand_overlap_px: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    /// Garment texture id: 0 stripes, 1 checker.
    pub texture: u8,
    /// Set by `make_pair` when the garment is not the person's own; pixel
    /// metrics against `person` are meaningless then.
    pub unpaired: bool,
}

/// One try-on scene with every conditioning input derived from it.
#[derive(Clone, Debug)]
pub struct SceneSample {
    /// Ground-truth person image, `[h,w,3]`, on the u8 grid.
    pub person: Tensor,
    /// Flat garment image, `[h,w,3]`.
    pub garment: Tensor,
    /// Inpainting region: torso plus dilated arms, hands carved out.
    pub agnostic_mask: Mask,
    /// Person with the masked region neutralized to [`NEUTRAL_GRAY`].
    pub agnostic: Tensor,
    pub pose: PoseMaps,
    pub hands: HandParams,
    pub meta: SceneMeta,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io ({path}): {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error("json ({path}): {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest invalid: {0}")]
    Manifest(String),
    #[error("scene invalid: {0}")]
    Invalid(String),
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<DataError>,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Geometry.

/// Point-to-segment distance in pixel coordinates.
fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy));
    (ex * ex + ey * ey).sqrt()
}

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

/// Planar rotation about the camera axis embedded in 3D.
fn rot_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// One articulated hand in continuous pixel coordinates: palm disc plus five
/// three-segment capsule fingers.
struct HandGeom {
    side: i32,
    center: [f64; 2],
    palm_r: f64,
    finger_r: f64,
    /// Wrist, then MCP/PIP/DIP/TIP per finger: 21 points.
    joints: Vec<[f64; 2]>,
    /// Global orientation, then three bend angles per finger: 16 matrices.
    rotations: Vec<[[f64; 3]; 3]>,
    /// The 15 finger capsule segments.
    segs: Vec<([f64; 2], [f64; 2])>,
}

impl HandGeom {
    fn contains(&self, p: [f64; 2]) -> bool {
        let d = seg_dist(p, self.center, self.center);
        if d <= self.palm_r {
            return true;
        }
        self.segs.iter().any(|&(a, b)| seg_dist(p, a, b) <= self.finger_r)
    }

    /// Dome height in [0,1]; zero exactly on and outside the silhouette
    /// boundary, so depth support is a subset of the mask.
    fn height(&self, p: [f64; 2]) -> f64 {
        let dp = seg_dist(p, self.center, self.center) / self.palm_r;
        let mut h: f64 = (1.0 - dp * dp).max(0.0).sqrt();
        for &(a, b) in &self.segs {
            let df = seg_dist(p, a, b) / self.finger_r;
            h = h.max(0.65 * (1.0 - df * df).max(0.0).sqrt());
        }
        h
    }

    fn mask(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.contains([x as f64, y as f64]))
    }

    /// Hand joints plus rotations in a placement-independent frame; absolute
    /// positions come from adding `center` afterwards.
    fn build(rng: &mut ChaCha12Rng, size: f64) -> (f64, f64, Vec<[f64; 2]>, Vec<[[f64; 3]; 3]>) {
        let palm_r = size * rng.gen_range(0.055..0.08);
        let finger_r = (palm_r * 0.33).max(1.3);
        let orient = rng.gen_range(0.0..2.0 * PI);
        let wrist = [unit(orient + PI)[0] * (palm_r - 1.5), unit(orient + PI)[1] * (palm_r - 1.5)];
        let mut joints = vec![wrist];
        let mut rotations = vec![rot_z(orient)];
        for f in 0..5 {
            let base = orient + (f as f64 - 2.0) * 0.38 + rng.gen_range(-0.08..0.08);
            let l1 = palm_r * rng.gen_range(0.7..0.95);
            let bends = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            let mcp = [unit(base)[0] * (palm_r - 1.0), unit(base)[1] * (palm_r - 1.0)];
            let mut dir = base;
            let mut prev = mcp;
            joints.push(mcp);
            for (k, &bend) in bends.iter().enumerate() {
                dir += bend;
                let len = l1 * [1.0, 0.8, 0.65][k];
                let next = [prev[0] + unit(dir)[0] * len, prev[1] + unit(dir)[1] * len];
                joints.push(next);
                prev = next;
                rotations.push(rot_z(bend));
            }
        }
        (palm_r, finger_r, joints, rotations)
    }

    fn place(
        rel_joints: &[[f64; 2]],
        center: [f64; 2],
        side: i32,
        palm_r: f64,
        finger_r: f64,
        rotations: Vec<[[f64; 3]; 3]>,
    ) -> HandGeom {
        let joints: Vec<[f64; 2]> =
            rel_joints.iter().map(|j| [j[0] + center[0], j[1] + center[1]]).collect();
        let mut segs = Vec::with_capacity(15);
        for f in 0..5 {
            let base = 1 + 4 * f;
            for k in 0..3 {
                segs.push((joints[base + k], joints[base + k + 1]));
            }
        }
        HandGeom { side, center, palm_r, finger_r, joints, rotations, segs }
    }
}

/// Torso trapezoid plus the seeded garment texture painted onto it.
struct Torso {
    cx: f64,
    shoulder_y: f64,
    hip_y: f64,
    shoulder_hw: f64,
    hip_hw: f64,
    texture: u8,
    palette: [[f64; 3]; 2],
    period: f64,
    vertical: bool,
}

impl Torso {
    fn half_width(&self, y: f64) -> f64 {
        let t = ((y - self.shoulder_y) / (self.hip_y - self.shoulder_y)).clamp(0.0, 1.0);
        self.shoulder_hw + t * (self.hip_hw - self.shoulder_hw)
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        p[1] >= self.shoulder_y && p[1] <= self.hip_y && (p[0] - self.cx).abs() <= self.half_width(p[1])
    }

    fn texel(&self, p: [f64; 2]) -> [f64; 3] {
        let idx = if self.texture == 0 {
            let coord = if self.vertical { p[0] } else { p[1] };
            (coord / self.period).floor() as i64 & 1
        } else {
            ((p[0] / self.period).floor() as i64 + (p[1] / self.period).floor() as i64) & 1
        };
        self.palette[idx as usize]
    }

    fn mask(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.contains([x as f64, y as f64]))
    }
}

/// Everything the compositor needs; kept separate from `SceneSample` so tests
/// can inspect pre-occlusion regions (the torso under the hands).
struct SceneGeom {
    bg: [[f64; 3]; 2],
    torso: Torso,
    skin: [f64; 3],
    hands: Vec<HandGeom>,
    /// Shoulder anchor per hand, for the arm capsule and skeleton line.
    shoulders: Vec<[f64; 2]>,
    arm_r: f64,
    texture_id: u8,
}

fn rand_color(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn scene_geometry(seed: u64, cfg: &SceneConfig) -> SceneGeom {
    let (h, w) = (cfg.h, cfg.w);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let bg = [rand_color(&mut rng, 0.15, 0.55), rand_color(&mut rng, 0.45, 0.85)];

    let cx = wf * rng.gen_range(0.42..0.58);
    let shoulder_y = hf * rng.gen_range(0.12..0.2);
    let hip_y = hf * rng.gen_range(0.8..0.92);
    let shoulder_hw = wf * rng.gen_range(0.2..0.3);
    let hip_hw = wf * rng.gen_range(0.24..0.34);

    let texture_id = rng.gen_range(0..2u8);
    let mut p0 = rand_color(&mut rng, 0.05, 0.95);
    let mut p1 = rand_color(&mut rng, 0.05, 0.95);
    for _ in 0..8 {
        let dist: f64 = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 0.6 {
            break;
        }
        p1 = rand_color(&mut rng, 0.05, 0.95);
    }
    if p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum::<f64>() < 0.6 {
        p1 = [1.0 - p0[0], 1.0 - p0[1], 1.0 - p0[2]];
    }
    // Keep garment colors away from pure magenta so fiducials stay unique.
    for p in [&mut p0, &mut p1] {
        if p[0] > 0.85 && p[1] < 0.15 && p[2] > 0.85 {
            p[1] = 0.3;
        }
    }
    let period = rng.gen_range(3.0..8.0);
    let vertical = rng.gen();
    let torso = Torso {
        cx,
        shoulder_y,
        hip_y,
        shoulder_hw,
        hip_hw,
        texture: texture_id,
        palette: [p0, p1],
        period,
        vertical,
    };
    let torso_mask = torso.mask(h, w);

    let skin = [rng.gen_range(0.7..0.9), rng.gen_range(0.5..0.68), rng.gen_range(0.38..0.55)];

    let n_hands = match cfg.hands {
        HandCountMode::Fixed(n) => {
            assert!(n <= NUM_SLOTS, "at most {} hands, got {}", NUM_SLOTS, n);
            n
        }
        HandCountMode::Random => {
            let r: f64 = rng.gen();
            if r < 0.2 {
                0
            } else if r < 0.6 {
                1
            } else {
                2
            }
        }
    };
    let sides: Vec<i32> = match n_hands {
        0 => vec![],
        1 => vec![if rng.gen() { HAND_LEFT } else { HAND_RIGHT }],
        _ => vec![HAND_LEFT, HAND_RIGHT],
    };

    let mut hands = Vec::new();
    let mut shoulders = Vec::new();
    let mut arm_r: f64 = 1.6;
    for &side in &sides {
        let (palm_r, finger_r, rel_joints, rotations) = HandGeom::build(&mut rng, hf.min(wf));
        let reach = rel_joints
            .iter()
            .map(|j| (j[0] * j[0] + j[1] * j[1]).sqrt())
            .fold(palm_r, f64::max)
            + finger_r
            + 1.0;
        // Bias each hand toward its own side of the torso, then retry a few
        // centers until it actually occludes enough garment pixels.
        let (xlo, xhi) = match side {
            HAND_LEFT => (cx - torso.hip_hw, cx),
            _ => (cx, cx + torso.hip_hw),
        };
        let clamp_c = |p: [f64; 2]| {
            [
                p[0].clamp(reach + 1.0, wf - reach - 2.0),
                p[1].clamp(reach + 1.0, hf - reach - 2.0),
            ]
        };
        let mut best: Option<(usize, HandGeom)> = None;
        for _ in 0..12 {
            let c = clamp_c([
                rng.gen_range(xlo..xhi),
                rng.gen_range(shoulder_y + 0.25 * (hip_y - shoulder_y)..hip_y),
            ]);
            let cand = HandGeom::place(&rel_joints, c, side, palm_r, finger_r, rotations.clone());
            let overlap = cand.mask(h, w).intersection_count(&torso_mask);
            let better = best.as_ref().map_or(true, |(b, _)| overlap > *b);
            if better {
                let done = overlap >= cfg.min_hand_overlap_px;
                best = Some((overlap, cand));
                if done {
                    break;
                }
            }
        }
        let (_, geom) = best.expect("placement loop always yields a candidate");
        let sx = if side == HAND_LEFT { cx - shoulder_hw * 0.85 } else { cx + shoulder_hw * 0.85 };
        shoulders.push([sx, shoulder_y + 1.0]);
        arm_r = arm_r.max(palm_r * 0.45);
        hands.push(geom);
    }

    SceneGeom { bg, torso, skin, hands, shoulders, arm_r, texture_id }
}

fn arm_mask(geom: &SceneGeom, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| {
        let p = [x as f64, y as f64];
        geom.hands
            .iter()
            .zip(&geom.shoulders)
            .any(|(hand, &sh)| seg_dist(p, sh, hand.joints[0]) <= geom.arm_r)
    })
}

/// Stamp a 3x3 block of `color`, clipped to the image.
fn stamp(img: &mut Tensor, cy: i64, cx: i64, color: [f64; 3]) {
    let (h, w) = (img.shape()[0] as i64, img.shape()[1] as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (y, x) = (cy + dy, cx + dx);
            if y >= 0 && y < h && x >= 0 && x < w {
                let base = ((y * w + x) * 3) as usize;
                img.data_mut()[base..base + 3].copy_from_slice(&color);
            }
        }
    }
}

/// 1px Bresenham segment between rounded endpoints.
fn draw_line(img: &mut Tensor, a: [f64; 2], b: [f64; 2], color: [f64; 3]) {
    let (h, w) = (img.shape()[0] as i64, img.shape()[1] as i64);
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if y0 >= 0 && y0 < h && x0 >= 0 && x0 < w {
            let base = ((y0 * w + x0) * 3) as usize;
            img.data_mut()[base..base + 3].copy_from_slice(&color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

const DWPOSE_ARM: [f64; 3] = [1.0, 0.25, 0.25];
const DWPOSE_PALM: [f64; 3] = [0.25, 0.25, 1.0];
const DWPOSE_FINGER: [f64; 3] = [0.25, 1.0, 0.25];

/// Deterministic scene synthesis; the whole sample is a function of `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> SceneSample {
    let (h, w) = (cfg.h, cfg.w);
    assert!(
        h >= 32 && w >= 32 && h % 8 == 0 && w % 8 == 0,
        "scene size {}x{} must be at least 32 and divisible by 8",
        h,
        w
    );
    let geom = scene_geometry(seed, cfg);
    let torso_mask = geom.torso.mask(h, w);
    let arms = arm_mask(&geom, h, w);
    let hand_masks: Vec<Mask> = geom.hands.iter().map(|g| g.mask(h, w)).collect();
    let mut hands_union = Mask::new(h, w);
    for m in &hand_masks {
        hands_union = hands_union.union(m);
    }

    // Person: background, torso texture, arms, shaded hands; quantized before
    // fiducials so every stored pixel sits on the u8 grid.
    let mut person = Tensor::zeros(&[h, w, 3]);
    {
        let d = person.data_mut();
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                let t = (x + y) as f64 / (w + h - 2) as f64;
                let mut px = [
                    geom.bg[0][0] + t * (geom.bg[1][0] - geom.bg[0][0]),
                    geom.bg[0][1] + t * (geom.bg[1][1] - geom.bg[0][1]),
                    geom.bg[0][2] + t * (geom.bg[1][2] - geom.bg[0][2]),
                ];
                if torso_mask.get(y, x) {
                    px = geom.torso.texel(p);
                }
                if arms.get(y, x) {
                    px = [geom.skin[0] * 0.93, geom.skin[1] * 0.93, geom.skin[2] * 0.93];
                }
                for hand in &geom.hands {
                    if hand.contains(p) {
                        let shade = 0.72 + 0.45 * hand.height(p);
                        px = [
                            (geom.skin[0] * shade).min(1.0),
                            (geom.skin[1] * shade).min(1.0),
                            (geom.skin[2] * shade).min(1.0),
                        ];
                    }
                }
                let base = (y * w + x) * 3;
                d[base..base + 3].copy_from_slice(&px);
            }
        }
    }
    let mut person = raster::quantize_u8(&person);
    for hand in &geom.hands {
        for j in &hand.joints {
            stamp(&mut person, j[1].round() as i64, j[0].round() as i64, FIDUCIAL_RGB);
        }
    }

    // Flat garment: same trapezoid and texture on a plain backdrop.
    let mut garment = Tensor::filled(&[h, w, 3], 0.92);
    {
        let d = garment.data_mut();
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                if geom.torso.contains(p) {
                    let px = geom.torso.texel(p);
                    let base = (y * w + x) * 3;
                    d[base..base + 3].copy_from_slice(&px);
                }
            }
        }
    }
    let garment = raster::quantize_u8(&garment);

    let agnostic_mask = torso_mask.union(&arms.dilate(2)).subtract(&hands_union);
    let mut agnostic = person.clone();
    {
        let d = agnostic.data_mut();
        for y in 0..h {
            for x in 0..w {
                if agnostic_mask.get(y, x) {
                    let base = (y * w + x) * 3;
                    d[base..base + 3].copy_from_slice(&[NEUTRAL_GRAY; 3]);
                }
            }
        }
    }

    // Pose maps. Densepose priority: hands over arms over torso.
    let mut densepose = Tensor::zeros(&[h, w, DENSEPOSE_CLASSES]);
    {
        let d = densepose.data_mut();
        for y in 0..h {
            for x in 0..w {
                let class = if hands_union.get(y, x) {
                    3
                } else if arms.get(y, x) {
                    2
                } else if torso_mask.get(y, x) {
                    1
                } else {
                    0
                };
                d[(y * w + x) * DENSEPOSE_CLASSES + class] = 1.0;
            }
        }
    }

    let mut dwpose = Tensor::zeros(&[h, w, 3]);
    for (hand, &sh) in geom.hands.iter().zip(&geom.shoulders) {
        draw_line(&mut dwpose, sh, hand.joints[0], DWPOSE_ARM);
        for f in 0..5 {
            let base = 1 + 4 * f;
            draw_line(&mut dwpose, hand.joints[0], hand.joints[base], DWPOSE_PALM);
            for k in 0..3 {
                draw_line(&mut dwpose, hand.joints[base + k], hand.joints[base + k + 1], DWPOSE_FINGER);
            }
        }
    }
    let dwpose = raster::quantize_u8(&dwpose);

    let mut depth = Tensor::zeros(&[h, w, 1]);
    {
        let d = depth.data_mut();
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                let mut v: f64 = 0.0;
                for hand in &geom.hands {
                    if hand.contains(p) {
                        v = v.max(hand.height(p));
                    }
                }
                d[y * w + x] = v;
            }
        }
    }
    let hand_depth = raster::quantize_u8(&depth);

    let pose = PoseMaps { dwpose, densepose, hand_depth };

    // Hand records: vertices ride the silhouette lifted by the height field.
    let detected: Vec<SingleHand> = geom
        .hands
        .iter()
        .zip(&hand_masks)
        .map(|(hand, mask)| {
            let pixels: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| mask.get(y, x))
                .collect();
            assert!(!pixels.is_empty(), "rendered hand with empty silhouette");
            let vertices: Vec<[f64; 3]> = (0..NUM_VERTICES)
                .map(|k| {
                    let (y, x) = pixels[k * pixels.len() / NUM_VERTICES];
                    let p = [x as f64, y as f64];
                    [p[0], p[1], hand.height(p) * hand.palm_r * 0.8]
                })
                .collect();
            let b = mask.bbox().expect("non-empty silhouette has a bbox");
            let bbox: Box4 = [
                b[0].saturating_sub(2),
                b[1].saturating_sub(2),
                (b[2] + 2).min(w as u32),
                (b[3] + 2).min(h as u32),
            ];
            // Stored joints are the integer fiducial positions, so a perfect
            // reconstruction scores an exact zero joint error.
            let joints2d: Vec<[f64; 2]> =
                hand.joints.iter().map(|j| [j[0].round(), j[1].round()]).collect();
            SingleHand {
                side: hand.side,
                vertices,
                joints2d,
                rotations: hand.rotations.clone(),
                mask: mask.clone(),
                bbox,
            }
        })
        .collect();
    let hands = pad_hands(&detected, h, w);

    SceneSample {
        person,
        garment,
        agnostic_mask,
        agnostic,
        pose,
        hands,
        meta: SceneMeta { seed, texture: geom.texture_id, unpaired: false },
    }
}

/// Generate `count` scenes for seeds `base_seed..base_seed+count`, in
/// parallel; the result is identical to a sequential loop.
pub fn generate_many(base_seed: u64, count: usize, cfg: &SceneConfig) -> Vec<SceneSample> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(base_seed + i, cfg))
        .collect()
}

/// Swap in a different garment image for unpaired evaluation. With the
/// sample's own garment this is the identity.
pub fn make_pair(sample: &SceneSample, other_garment: &Tensor) -> Result<SceneSample, DataError> {
    if other_garment.shape() != sample.garment.shape() {
        return Err(DataError::Invalid(format!(
            "garment dims {:?} do not match sample {:?}",
            other_garment.shape(),
            sample.garment.shape()
        )));
    }
    let mut out = sample.clone();
    out.meta.unpaired = *other_garment != out.garment;
    out.garment = other_garment.clone();
    Ok(out)
}

/// Check every structural invariant of a sample; readers run this on each
/// sample so corruption surfaces as a per-sample error.
pub fn validate_scene(s: &SceneSample) -> Result<(), DataError> {
    let bad = |m: String| Err(DataError::Invalid(m));
    let (h, w) = (s.agnostic_mask.h, s.agnostic_mask.w);
    for (name, t) in [("person", &s.person), ("garment", &s.garment), ("agnostic", &s.agnostic)] {
        if t.shape() != [h, w, 3] {
            return bad(format!("{} shape {:?}, want [{},{},3]", name, t.shape(), h, w));
        }
    }
    validate_hand_params(&s.hands).map_err(|e| DataError::Invalid(e.to_string()))?;
    let union = union_mask(&s.hands);
    if (union.h, union.w) != (h, w) {
        return bad(format!("hand masks are {}x{}, image is {}x{}", union.h, union.w, h, w));
    }
    s.pose.validate(&union).map_err(|e| DataError::Invalid(e.to_string()))?;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            let (p, a) = (&s.person.data()[base..base + 3], &s.agnostic.data()[base..base + 3]);
            if s.agnostic_mask.get(y, x) {
                if a != &[NEUTRAL_GRAY; 3][..] {
                    return bad(format!("agnostic pixel ({},{}) not neutral: {:?}", y, x, a));
                }
            } else if p != a {
                return bad(format!(
                    "person/agnostic differ outside mask at ({},{}): {:?} vs {:?}",
                    y, x, p, a
                ));
            }
        }
    }
    for slot in 0..NUM_SLOTS {
        if s.hands.is_filler(slot) {
            continue;
        }
        for (i, j) in s.hands.joints2d[slot].iter().enumerate() {
            let (x, y) = (j[0].round(), j[1].round());
            let inside = x >= 0.0
                && y >= 0.0
                && (x as usize) < w
                && (y as usize) < h
                && s.hands.masks[slot].get(y as usize, x as usize);
            if !inside {
                return bad(format!("slot {} joint {} at {:?} off the silhouette", slot, i, j));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialization.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<String>,
    pub seed: u64,
}

/// On-disk hand record; mirrors `HandParams` minus the masks, which live in
/// their own 1-bit PNGs. The extra `meta` object carries scene provenance.
#[derive(Serialize, Deserialize)]
struct HandsRecord {
    types: [i32; NUM_SLOTS],
    vertices: Vec<Vec<[f64; 3]>>,
    joints2d: Vec<Vec<[f64; 2]>>,
    rotations: Vec<Vec<[[f64; 3]; 3]>>,
    boxes: [Box4; NUM_SLOTS],
    meta: SceneMeta,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })
}

pub fn sample_dir_name(index: usize) -> String {
    format!("{:05}", index)
}

/// Write one sample into `dir` (created if needed).
pub fn write_sample(dir: &Path, s: &SceneSample) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    raster::write_rgb_png(&dir.join("person.png"), &s.person)?;
    raster::write_rgb_png(&dir.join("garment.png"), &s.garment)?;
    raster::write_mask_png(&dir.join("agnostic_mask.png"), &s.agnostic_mask)?;
    raster::write_rgb_png(&dir.join("agnostic.png"), &s.agnostic)?;
    raster::write_rgb_png(&dir.join("dwpose.png"), &s.pose.dwpose)?;
    raster::write_rgba_png(&dir.join("densepose.png"), &s.pose.densepose)?;
    raster::write_gray_png(&dir.join("hand_depth.png"), &s.pose.hand_depth)?;
    for slot in 0..NUM_SLOTS {
        raster::write_mask_png(&dir.join(format!("hand_mask_{}.png", slot)), &s.hands.masks[slot])?;
    }
    let record = HandsRecord {
        types: s.hands.types,
        vertices: s.hands.vertices.clone(),
        joints2d: s.hands.joints2d.clone(),
        rotations: s.hands.rotations.clone(),
        boxes: s.hands.boxes,
        meta: s.meta.clone(),
    };
    write_json(&dir.join("hands.json"), &record)
}

/// Write all samples under `root` and finish with the manifest.
pub fn write_dataset(samples: &[SceneSample], root: &Path) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let (h, w) = samples
        .first()
        .map(|s| (s.agnostic_mask.h, s.agnostic_mask.w))
        .unwrap_or((0, 0));
    let names: Vec<String> = (0..samples.len()).map(sample_dir_name).collect();
    samples
        .par_iter()
        .zip(&names)
        .try_for_each(|(s, name)| write_sample(&root.join(name), s))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        count: samples.len(),
        h,
        w,
        samples: names,
        seed: samples.first().map(|s| s.meta.seed).unwrap_or(0),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read and validate one sample directory.
pub fn read_sample(dir: &Path) -> Result<SceneSample, DataError> {
    let person = raster::read_rgb_png(&dir.join("person.png"))?;
    let garment = raster::read_rgb_png(&dir.join("garment.png"))?;
    let agnostic_mask = raster::read_mask_png(&dir.join("agnostic_mask.png"))?;
    let agnostic = raster::read_rgb_png(&dir.join("agnostic.png"))?;
    let dwpose = raster::read_rgb_png(&dir.join("dwpose.png"))?;
    let densepose = raster::read_rgba_png(&dir.join("densepose.png"))?;
    let hand_depth = raster::read_gray_png(&dir.join("hand_depth.png"))?;
    let record: HandsRecord = read_json(&dir.join("hands.json"))?;
    let mut masks = Vec::with_capacity(NUM_SLOTS);
    for slot in 0..NUM_SLOTS {
        masks.push(raster::read_mask_png(&dir.join(format!("hand_mask_{}.png", slot)))?);
    }
    let hands = HandParams {
        types: record.types,
        vertices: record.vertices,
        joints2d: record.joints2d,
        rotations: record.rotations,
        masks,
        boxes: record.boxes,
    };
    let sample = SceneSample {
        person,
        garment,
        agnostic_mask,
        agnostic,
        pose: PoseMaps { dwpose, densepose, hand_depth },
        hands,
        meta: record.meta,
    };
    validate_scene(&sample)?;
    Ok(sample)
}

/// Lazy dataset reader: yields one `Result` per listed sample so a corrupt
/// directory surfaces as an error for that id while the rest still load.
pub struct DatasetReader {
    root: PathBuf,
    pub manifest: DatasetManifest,
    next: usize,
}

impl Iterator for DatasetReader {
    type Item = Result<SceneSample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let name = self.manifest.samples.get(self.next)?.clone();
        self.next += 1;
        Some(
            read_sample(&self.root.join(&name))
                .map_err(|e| DataError::Sample { id: name, source: Box::new(e) }),
        )
    }
}

pub fn read_dataset(root: &Path) -> Result<DatasetReader, DataError> {
    let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::Manifest(format!(
            "version {} unsupported (want {})",
            manifest.version, DATASET_VERSION
        )));
    }
    if manifest.count != manifest.samples.len() {
        return Err(DataError::Manifest(format!(
            "count {} but {} sample names listed",
            manifest.count,
            manifest.samples.len()
        )));
    }
    Ok(DatasetReader { root: root.to_path_buf(), manifest, next: 0 })
}
