//! Hand embeddings, the appearance-feature stub, the lossless latent codec,
//! and the garment encoder.
//!
//! The codec is a space-to-depth rearrangement plus the affine map
//! `x -> 2x - 1`, so latents decode back to images bit-exactly and image-space
//! losses can be checked against exact oracles.

use crate::graph::{Graph, VarId};
use crate::handprior::{
    bps_encode, crop_box, normalize_vertices, rot_to_6d, BasisPointSet, HandParams, HAND_LEFT,
    HAND_RIGHT, NUM_JOINTS, NUM_ROT_JOINTS, NUM_SLOTS,
};
use crate::params::{
    linear_fwd, ln_stack_fwd, mlp_relu_fwd, Init, LinearP, LnStackP, MlpP, ParamBlock, VarMap,
};
use crate::raster;
use crate::tensor::{
    chw_to_hwc, depth_to_space, hwc_to_chw, resize_bilinear, space_to_depth, Tensor,
};
use thiserror::Error;

/// Width of the appearance feature vector per hand slot.
pub const APPEAR_DIM: usize = 1536;
/// Spatial downsample factor of the latent space.
pub const LATENT_FACTOR: usize = 8;
/// Latent channel count: 3 image channels times 8x8 block positions.
pub const LATENT_CHANNELS: usize = 3 * LATENT_FACTOR * LATENT_FACTOR;
/// Garment pooling grid; tokens = grid squared.
pub const GARMENT_GRID: usize = 4;
pub const GARMENT_TOKENS: usize = GARMENT_GRID * GARMENT_GRID;
/// Structural tokens: 4 feature groups per hand slot.
pub const STRUCT_TOKENS: usize = 4 * NUM_SLOTS;
pub const APPEAR_TOKENS: usize = NUM_SLOTS;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image {h}x{w} not divisible by the latent factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
}

/// Image `[h,w,3]` in [0,1] to latent `[192, h/8, w/8]`. Latent channel
/// `c*64 + dy*8 + dx` holds the `(dy,dx)` sample of each block of channel `c`,
/// remapped through `v*2 - 1`.
pub fn encode_latent(img: &Tensor) -> Result<Tensor, CodecError> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    assert_eq!(img.shape()[2], 3, "encode_latent wants [h,w,3]");
    if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
        return Err(CodecError::NotDivisible { h, w, factor: LATENT_FACTOR });
    }
    Ok(space_to_depth(&hwc_to_chw(img), LATENT_FACTOR).map(|v| v * 2.0 - 1.0))
}

/// Exact inverse of [`encode_latent`].
pub fn decode_latent(z: &Tensor) -> Tensor {
    assert_eq!(z.shape()[0], LATENT_CHANNELS, "decode_latent wants [192,h,w]");
    chw_to_hwc(&depth_to_space(z, LATENT_FACTOR)).map(|v| (v + 1.0) * 0.5)
}

/// Differentiable decode; produces values bit-identical to [`decode_latent`].
pub fn decode_latent_graph(g: &mut Graph, z: VarId) -> VarId {
    let sh = g.shape(z);
    assert_eq!(sh[0], LATENT_CHANNELS, "decode_latent_graph wants [192,h,w]");
    let (oh, ow) = (sh[1] * LATENT_FACTOR, sh[2] * LATENT_FACTOR);
    let chw = g.depth_to_space(z, LATENT_FACTOR);
    let tokens = g.chw_to_tokens(chw);
    let img = g.reshape(tokens, &[oh, ow, 3]);
    let ones = g.constant(Tensor::filled(&[oh, ow, 3], 1.0));
    let shifted = g.add(img, ones);
    g.scale(shifted, 0.5)
}

/// Weights of the four structural branches (one per feature group).
#[derive(Clone, Debug)]
pub struct StructEncP {
    /// Basis-point distances through three linear+ReLU layers.
    pub vert: MlpP,
    /// Flattened 2D joints through three linear+ReLU layers.
    pub joint: MlpP,
    /// Side code through two linear+LayerNorm layers.
    pub typ: LnStackP,
    /// Flattened 6D rotations through two linear+LayerNorm layers.
    pub rot: LnStackP,
}

impl StructEncP {
    pub fn init(init: &Init, path: &str, d_model: usize, bps_k: usize) -> Self {
        let d = d_model;
        StructEncP {
            vert: MlpP::init(init, &format!("{path}.vert"), &[bps_k, d, d, d]),
            joint: MlpP::init(init, &format!("{path}.joint"), &[NUM_JOINTS * 2, d, d, d]),
            typ: LnStackP::init(init, &format!("{path}.type"), &[2, d, d]),
            rot: LnStackP::init(init, &format!("{path}.rot"), &[NUM_ROT_JOINTS * 6, d, d]),
        }
    }
}

impl ParamBlock for StructEncP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.vert.visit(&format!("{prefix}.vert"), f);
        self.joint.visit(&format!("{prefix}.joint"), f);
        self.typ.visit(&format!("{prefix}.type"), f);
        self.rot.visit(&format!("{prefix}.rot"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.vert.visit_mut(&format!("{prefix}.vert"), f);
        self.joint.visit_mut(&format!("{prefix}.joint"), f);
        self.typ.visit_mut(&format!("{prefix}.type"), f);
        self.rot.visit_mut(&format!("{prefix}.rot"), f);
    }
}

/// Appearance-feature head: one linear+LayerNorm per hand slot row.
#[derive(Clone, Debug)]
pub struct AppearEncP {
    pub ha: LnStackP,
}

impl AppearEncP {
    pub fn init(init: &Init, path: &str, d_model: usize) -> Self {
        AppearEncP { ha: LnStackP::init(init, &format!("{path}.ha"), &[APPEAR_DIM, d_model]) }
    }
}

impl ParamBlock for AppearEncP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ha.visit(&format!("{prefix}.ha"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ha.visit_mut(&format!("{prefix}.ha"), f);
    }
}

/// Garment token projection over pooled cell statistics.
#[derive(Clone, Debug)]
pub struct GarmentEncP {
    pub proj: LinearP,
}

impl GarmentEncP {
    pub fn init(init: &Init, path: &str, d_model: usize) -> Self {
        GarmentEncP { proj: LinearP::init(init, &format!("{path}.proj"), 3, d_model) }
    }

    pub fn d_model(&self) -> usize {
        self.proj.b.len()
    }
}

impl ParamBlock for GarmentEncP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.proj.visit(&format!("{prefix}.proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// All encoder weights together; variant builds hold the sub-blocks
/// individually so a disabled pathway owns no parameters at all.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub struct_enc: StructEncP,
    pub appear: AppearEncP,
    pub garment: GarmentEncP,
}

impl EncoderParams {
    pub fn init(init: &Init, d_model: usize, bps_k: usize) -> Self {
        EncoderParams {
            struct_enc: StructEncP::init(init, "encoders.struct", d_model, bps_k),
            appear: AppearEncP::init(init, "encoders.appear", d_model),
            garment: GarmentEncP::init(init, "encoders.garment", d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.garment.d_model()
    }
}

impl ParamBlock for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.struct_enc.visit(&format!("{prefix}.struct"), f);
        self.appear.visit(&format!("{prefix}.appear"), f);
        self.garment.visit(&format!("{prefix}.garment"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.struct_enc.visit_mut(&format!("{prefix}.struct"), f);
        self.appear.visit_mut(&format!("{prefix}.appear"), f);
        self.garment.visit_mut(&format!("{prefix}.garment"), f);
    }
}

/// Raw per-branch input rows (one row per hand slot). Filler slots contribute
/// literal zeros (side code −1), keeping shapes static.
pub struct StructInputs {
    pub vert: Tensor,
    pub joint: Tensor,
    pub typ: Tensor,
    pub rot: Tensor,
}

pub fn hand_struct_inputs(params: &HandParams, basis: &BasisPointSet) -> StructInputs {
    let k = basis.points.len();
    let (ih, iw) = (params.masks[0].h, params.masks[0].w);
    let mut vert = vec![0.0; NUM_SLOTS * k];
    let mut joint = vec![0.0; NUM_SLOTS * NUM_JOINTS * 2];
    let mut typ = vec![0.0; NUM_SLOTS * 2];
    let mut rot = vec![0.0; NUM_SLOTS * NUM_ROT_JOINTS * 6];
    for slot in 0..NUM_SLOTS {
        match params.types[slot] {
            HAND_LEFT => typ[slot * 2..][..2].copy_from_slice(&[1.0, 0.0]),
            HAND_RIGHT => typ[slot * 2..][..2].copy_from_slice(&[0.0, 1.0]),
            _ => typ[slot * 2..][..2].copy_from_slice(&[-1.0, -1.0]),
        }
        if params.is_filler(slot) {
            continue;
        }
        let enc = bps_encode(&normalize_vertices(&params.vertices[slot]), basis);
        vert[slot * k..][..k].copy_from_slice(&enc);
        // joint coordinates enter normalized by image size so the branch
        // scales stay comparable across resolutions
        for (j, p) in params.joints2d[slot].iter().enumerate() {
            joint[(slot * NUM_JOINTS + j) * 2] = p[0] / iw as f64;
            joint[(slot * NUM_JOINTS + j) * 2 + 1] = p[1] / ih as f64;
        }
        for (j, r) in params.rotations[slot].iter().enumerate() {
            let six = rot_to_6d(r).expect("validated rotation");
            rot[(slot * NUM_ROT_JOINTS + j) * 6..][..6].copy_from_slice(&six);
        }
    }
    StructInputs {
        vert: Tensor::new(&[NUM_SLOTS, k], vert),
        joint: Tensor::new(&[NUM_SLOTS, NUM_JOINTS * 2], joint),
        typ: Tensor::new(&[NUM_SLOTS, 2], typ),
        rot: Tensor::new(&[NUM_SLOTS, NUM_ROT_JOINTS * 6], rot),
    }
}

/// Structural tokens `[8, d]`: per slot, the vertex, joint, side, and rotation
/// group tokens in that order, slot 0 first.
pub fn hand_struct_embed(
    g: &mut Graph,
    vm: &VarMap,
    prefix: &str,
    params: &HandParams,
    basis: &BasisPointSet,
) -> VarId {
    let ins = hand_struct_inputs(params, basis);
    let vert_in = g.constant(ins.vert);
    let joint_in = g.constant(ins.joint);
    let typ_in = g.constant(ins.typ);
    let rot_in = g.constant(ins.rot);
    let v = mlp_relu_fwd(g, vm, &format!("{prefix}.vert"), vert_in, 3);
    let j = mlp_relu_fwd(g, vm, &format!("{prefix}.joint"), joint_in, 3);
    let t = ln_stack_fwd(g, vm, &format!("{prefix}.type"), typ_in, 2);
    let r = ln_stack_fwd(g, vm, &format!("{prefix}.rot"), rot_in, 2);
    let mut rows = Vec::with_capacity(STRUCT_TOKENS);
    for slot in 0..NUM_SLOTS {
        for branch in [v, j, t, r] {
            rows.push(g.select_row(branch, slot));
        }
    }
    g.concat_rows(&rows)
}

/// Appearance tokens `[2, d]`: one linear+LayerNorm over each slot's feature
/// row.
pub fn hand_appear_embed(g: &mut Graph, vm: &VarMap, prefix: &str, feats: VarId) -> VarId {
    assert_eq!(g.shape(feats), &[NUM_SLOTS, APPEAR_DIM], "feats must be [2,1536]");
    ln_stack_fwd(g, vm, &format!("{prefix}.ha"), feats, 1)
}

/// Deterministic 1536-wide descriptor of an image patch: the patch resized to
/// 16x16x3 and flattened, the Sobel gradient magnitude of its 16x16 luma, a
/// 256-bin luma histogram summing to 1, then 256 zeros of headroom. Empty
/// patches (filler slots) yield all zeros.
pub fn appearance_features_stub(patch: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; APPEAR_DIM];
    if patch.shape()[0] == 0 || patch.shape()[1] == 0 {
        return out;
    }
    assert_eq!(patch.shape()[2], 3, "patch must be [h,w,3]");
    let small = resize_bilinear(patch, 16, 16);
    out[..768].copy_from_slice(small.data());
    let gray = raster::rgb_to_gray(&small);
    let (gx, gy) = raster::sobel_gradients(&gray);
    for i in 0..256 {
        out[768 + i] = gx.data()[i].hypot(gy.data()[i]);
    }
    for &v in gray.data() {
        out[1024 + raster::to_u8(v) as usize] += 1.0 / 256.0;
    }
    out
}

/// Per-slot appearance rows `[2,1536]` from the bounding-box crops.
pub fn hand_appear_features(image: &Tensor, params: &HandParams) -> Tensor {
    let mut data = vec![0.0; NUM_SLOTS * APPEAR_DIM];
    for slot in 0..NUM_SLOTS {
        if params.is_filler(slot) {
            continue;
        }
        let patch = crop_box(image, &params.boxes[slot]).expect("validated box");
        data[slot * APPEAR_DIM..][..APPEAR_DIM]
            .copy_from_slice(&appearance_features_stub(&patch));
    }
    Tensor::new(&[NUM_SLOTS, APPEAR_DIM], data)
}

/// The two hand conditioning token sets consumed by cross-attention.
pub struct EmbeddingBundle {
    pub c_struc: VarId,
    pub c_appear: VarId,
}

pub fn embed_hands(
    g: &mut Graph,
    vm: &VarMap,
    prefix: &str,
    image: &Tensor,
    params: &HandParams,
    basis: &BasisPointSet,
) -> EmbeddingBundle {
    let c_struc = hand_struct_embed(g, vm, &format!("{prefix}.struct"), params, basis);
    let feats = g.constant(hand_appear_features(image, params));
    let c_appear = hand_appear_embed(g, vm, &format!("{prefix}.appear"), feats);
    EmbeddingBundle { c_struc, c_appear }
}

/// 16 garment tokens `[16, d]`: 4x4 per-cell channel means through a learned
/// projection.
pub fn garment_tokens(g: &mut Graph, vm: &VarMap, prefix: &str, garment: VarId) -> VarId {
    let cells = g.cell_means(garment, GARMENT_GRID);
    linear_fwd(g, vm, &format!("{prefix}.proj"), cells)
}

/// Latent map plus conditioning tokens for a garment image.
pub fn garment_encode(
    g: &mut Graph,
    vm: &VarMap,
    prefix: &str,
    garment: &Tensor,
) -> Result<(Tensor, VarId), CodecError> {
    let latent = encode_latent(garment)?;
    let gid = g.constant(garment.clone());
    let tokens = garment_tokens(g, vm, prefix, gid);
    Ok((latent, tokens))
}
