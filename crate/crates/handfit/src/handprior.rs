//! Hand-parameter data model: fixed two-slot padding with filler semantics,
//! basis-point-set vertex encoding, 6D rotation encoding, and the mask/box
//! geometry helpers everything downstream leans on.

use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

pub const NUM_SLOTS: usize = 2;
pub const NUM_VERTICES: usize = 778;
pub const NUM_JOINTS: usize = 21;
pub const NUM_ROT_JOINTS: usize = 16;

/// Slot type codes: 0 left, 1 right, -1 filler.
pub const HAND_LEFT: i32 = 0;
pub const HAND_RIGHT: i32 = 1;
pub const HAND_FILLER: i32 = -1;

/// Half-open pixel box `[x0, y0, x1, y1]`.
pub type Box4 = [u32; 4];

pub fn box_area(b: &Box4) -> u64 {
    (b[2].saturating_sub(b[0]) as u64) * (b[3].saturating_sub(b[1]) as u64)
}

#[derive(Debug, Error)]
pub enum HandError {
    #[error("matrix is not a rotation: max |R^T R - I| = {dev:.3e}")]
    NotARotation { dev: f64 },
    #[error("degenerate 6D rotation input ({0})")]
    Degenerate6d(&'static str),
    #[error("downsample factor {factor} does not divide mask size {h}x{w}")]
    BadGateFactor { factor: usize, h: usize, w: usize },
    #[error("box {bbox:?} invalid for image {h}x{w}")]
    BadBox { bbox: Box4, h: usize, w: usize },
    #[error("hand params invalid: {0}")]
    InvalidParams(String),
}

/// Binary H×W map stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    m.data[y * w + x] = 1;
                }
            }
        }
        m
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// 0/1 float map of the same size.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w], self.data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Row-major boolean flattening, the attention-gate layout.
    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask size mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a | b).collect();
        Mask { h: self.h, w: self.w, data }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        assert_eq!((self.h, self.w), (other.h, other.w));
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a != 0 && b != 0).count()
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let y0 = y.saturating_sub(radius);
                let x0 = x.saturating_sub(radius);
                let y1 = (y + radius + 1).min(self.h);
                let x1 = (x + radius + 1).min(self.w);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        out.data[yy * self.w + xx] = 1;
                    }
                }
            }
        }
        out
    }

    pub fn subtract(&self, other: &Mask) -> Mask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let data =
            self.data.iter().zip(&other.data).map(|(&a, &b)| if b != 0 { 0 } else { a }).collect();
        Mask { h: self.h, w: self.w, data }
    }

    /// Tight half-open bounding box of the support, `None` when empty.
    pub fn bbox(&self) -> Option<Box4> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            None
        } else {
            Some([x0 as u32, y0 as u32, x1 as u32, y1 as u32])
        }
    }
}

/// One detected (non-filler) hand.
#[derive(Clone, Debug)]
pub struct SingleHand {
    /// 0 left, 1 right.
    pub side: i32,
    pub vertices: Vec<[f64; 3]>,
    pub joints2d: Vec<[f64; 2]>,
    pub rotations: Vec<[[f64; 3]; 3]>,
    pub mask: Mask,
    pub bbox: Box4,
}

/// Fixed-length hand conditioning record: always 2 slots, fillers marked -1
/// with all-zero payloads.
#[derive(Clone, Debug)]
pub struct HandParams {
    pub types: [i32; NUM_SLOTS],
    pub vertices: Vec<Vec<[f64; 3]>>,
    pub joints2d: Vec<Vec<[f64; 2]>>,
    pub rotations: Vec<Vec<[[f64; 3]; 3]>>,
    pub masks: Vec<Mask>,
    pub boxes: [Box4; NUM_SLOTS],
}

impl HandParams {
    pub fn empty(h: usize, w: usize) -> Self {
        HandParams {
            types: [HAND_FILLER; NUM_SLOTS],
            vertices: vec![vec![[0.0; 3]; NUM_VERTICES]; NUM_SLOTS],
            joints2d: vec![vec![[0.0; 2]; NUM_JOINTS]; NUM_SLOTS],
            rotations: vec![vec![[[0.0; 3]; 3]; NUM_ROT_JOINTS]; NUM_SLOTS],
            masks: vec![Mask::new(h, w), Mask::new(h, w)],
            boxes: [[0; 4]; NUM_SLOTS],
        }
    }

    pub fn is_filler(&self, slot: usize) -> bool {
        self.types[slot] == HAND_FILLER
    }

    pub fn non_filler_count(&self) -> usize {
        self.types.iter().filter(|&&t| t != HAND_FILLER).count()
    }
}

/// Check every structural invariant of a padded record. Used when reading
/// datasets back from disk.
pub fn validate_hand_params(p: &HandParams) -> Result<(), HandError> {
    let fail = |m: String| Err(HandError::InvalidParams(m));
    for slot in 0..NUM_SLOTS {
        let t = p.types[slot];
        if ![HAND_FILLER, HAND_LEFT, HAND_RIGHT].contains(&t) {
            return fail(format!("slot {}: type {} outside {{-1,0,1}}", slot, t));
        }
        if p.vertices[slot].len() != NUM_VERTICES
            || p.joints2d[slot].len() != NUM_JOINTS
            || p.rotations[slot].len() != NUM_ROT_JOINTS
        {
            return fail(format!("slot {}: wrong payload lengths", slot));
        }
        if t == HAND_FILLER {
            let all_zero = p.vertices[slot].iter().all(|v| v.iter().all(|&x| x == 0.0))
                && p.joints2d[slot].iter().all(|j| j.iter().all(|&x| x == 0.0))
                && p.rotations[slot].iter().all(|r| r.iter().flatten().all(|&x| x == 0.0))
                && p.masks[slot].is_empty()
                && p.boxes[slot] == [0; 4];
            if !all_zero {
                return fail(format!("slot {}: filler with non-zero payload", slot));
            }
            continue;
        }
        for (i, r) in p.rotations[slot].iter().enumerate() {
            if let Err(e) = check_rotation(r) {
                return fail(format!("slot {} rotation {}: {}", slot, i, e));
            }
        }
        let b = p.boxes[slot];
        if b[0] >= b[2] || b[1] >= b[3] {
            return fail(format!("slot {}: empty box {:?}", slot, b));
        }
        for (i, j) in p.joints2d[slot].iter().enumerate() {
            let inside = j[0] >= b[0] as f64
                && j[0] < b[2] as f64
                && j[1] >= b[1] as f64
                && j[1] < b[3] as f64;
            if !inside {
                return fail(format!("slot {}: joint {} at {:?} outside box {:?}", slot, i, j, b));
            }
        }
        let m = &p.masks[slot];
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(y, x)
                    && !(x >= b[0] as usize
                        && x < b[2] as usize
                        && y >= b[1] as usize
                        && y < b[3] as usize)
                {
                    return fail(format!(
                        "slot {}: mask pixel ({},{}) outside box {:?}",
                        slot, x, y, b
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Pad detections to exactly two slots. Over-detection keeps the two largest
/// boxes (ties broken by smaller x0); under-detection appends fillers.
pub fn pad_hands(detected: &[SingleHand], h: usize, w: usize) -> HandParams {
    let mut order: Vec<usize> = (0..detected.len()).collect();
    order.sort_by(|&a, &b| {
        box_area(&detected[b].bbox)
            .cmp(&box_area(&detected[a].bbox))
            .then(detected[a].bbox[0].cmp(&detected[b].bbox[0]))
    });
    let mut out = HandParams::empty(h, w);
    for (slot, &idx) in order.iter().take(NUM_SLOTS).enumerate() {
        let d = &detected[idx];
        out.types[slot] = d.side;
        out.vertices[slot] = d.vertices.clone();
        out.joints2d[slot] = d.joints2d.clone();
        out.rotations[slot] = d.rotations.clone();
        out.masks[slot] = d.mask.clone();
        out.boxes[slot] = d.bbox;
    }
    out
}

/// K fixed points in the unit ball, deterministic for a given seed.
#[derive(Clone, Debug)]
pub struct BasisPointSet {
    pub points: Vec<[f64; 3]>,
    pub seed: u64,
}

pub const BPS_DEFAULT_K: usize = 128;
pub const BPS_DEFAULT_SEED: u64 = 17;

impl BasisPointSet {
    /// Uniform rejection sampling in the unit ball.
    pub fn new(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(k);
        while points.len() < k {
            let p = [
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            ];
            if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                points.push(p);
            }
        }
        BasisPointSet { points, seed }
    }
}

impl Default for BasisPointSet {
    fn default() -> Self {
        BasisPointSet::new(BPS_DEFAULT_K, BPS_DEFAULT_SEED)
    }
}

/// Centroid-subtract then max-norm-divide. All-zero clouds stay all-zero
/// (filler slots).
pub fn normalize_vertices(vertices: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = vertices.len() as f64;
    let mut c = [0.0; 3];
    for v in vertices {
        for k in 0..3 {
            c[k] += v[k];
        }
    }
    for k in 0..3 {
        c[k] /= n;
    }
    let mut out: Vec<[f64; 3]> =
        vertices.iter().map(|v| [v[0] - c[0], v[1] - c[1], v[2] - c[2]]).collect();
    let max_norm = out
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm > 0.0 {
        for v in &mut out {
            for k in 0..3 {
                v[k] /= max_norm;
            }
        }
    }
    out
}

/// Per basis point, the minimum Euclidean distance to any vertex.
pub fn bps_encode(vertices: &[[f64; 3]], basis: &BasisPointSet) -> Vec<f64> {
    basis
        .points
        .iter()
        .map(|b| {
            vertices
                .iter()
                .map(|v| {
                    let d = [v[0] - b[0], v[1] - b[1], v[2] - b[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn check_rotation(r: &[[f64; 3]; 3]) -> Result<(), HandError> {
    let mut dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - target).abs());
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    dev = dev.max((det - 1.0).abs());
    if dev > 1e-5 {
        return Err(HandError::NotARotation { dev });
    }
    Ok(())
}

/// First two columns of R, column-major: `(R00,R10,R20, R01,R11,R21)`.
pub fn rot_to_6d(r: &[[f64; 3]; 3]) -> Result<[f64; 6], HandError> {
    check_rotation(r)?;
    Ok([r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]])
}

/// Gram-Schmidt reconstruction: normalize column 1, orthogonalize and
/// normalize column 2, cross product for column 3.
pub fn rot_from_6d(v: &[f64; 6]) -> Result<[[f64; 3]; 3], HandError> {
    let a = [v[0], v[1], v[2]];
    let b = [v[3], v[4], v[5]];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if na < 1e-12 {
        return Err(HandError::Degenerate6d("first column is zero"));
    }
    let c1 = [a[0] / na, a[1] / na, a[2] / na];
    let dot = c1[0] * b[0] + c1[1] * b[1] + c1[2] * b[2];
    let r = [b[0] - dot * c1[0], b[1] - dot * c1[1], b[2] - dot * c1[2]];
    let nr = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if nr < 1e-12 {
        return Err(HandError::Degenerate6d("columns are parallel"));
    }
    let c2 = [r[0] / nr, r[1] / nr, r[2] / nr];
    let c3 = [
        c1[1] * c2[2] - c1[2] * c2[1],
        c1[2] * c2[0] - c1[0] * c2[2],
        c1[0] * c2[1] - c1[1] * c2[0],
    ];
    Ok([
        [c1[0], c2[0], c3[0]],
        [c1[1], c2[1], c3[1]],
        [c1[2], c2[2], c3[2]],
    ])
}

/// OR of the per-slot masks.
pub fn union_mask(params: &HandParams) -> Mask {
    params.masks[0].union(&params.masks[1])
}

/// Any-pool a binary mask down by an integer factor.
pub fn downsample_gate(mask: &Mask, factor: usize) -> Result<Mask, HandError> {
    if factor == 0 || mask.h % factor != 0 || mask.w % factor != 0 {
        return Err(HandError::BadGateFactor { factor, h: mask.h, w: mask.w });
    }
    let (gh, gw) = (mask.h / factor, mask.w / factor);
    let mut out = Mask::new(gh, gw);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) {
                out.set(y / factor, x / factor, true);
            }
        }
    }
    Ok(out)
}

/// Half-open crop of an `[h,w,c]` image tensor.
pub fn crop_box(image: &Tensor, bbox: &Box4) -> Result<Tensor, HandError> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let [x0, y0, x1, y1] = *bbox;
    if x0 >= x1 || y0 >= y1 || x1 as usize > w || y1 as usize > h {
        return Err(HandError::BadBox { bbox: *bbox, h, w });
    }
    let (cw, ch) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let mut out = vec![0.0; ch * cw * c];
    for y in 0..ch {
        let src = ((y0 as usize + y) * w + x0 as usize) * c;
        out[y * cw * c..(y + 1) * cw * c].copy_from_slice(&image.data()[src..src + cw * c]);
    }
    Ok(Tensor::new(&[ch, cw, c], out))
}
