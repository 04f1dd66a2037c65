//! Pose-map aggregation: three conv branches with zero-initialized endpoints,
//! pixel-weighted summation with an adjustable hand weight, struct-token
//! injection through masked cross-attention, and zero-initialized residual
//! emitters toward the denoiser's control sites.
//!
//! Every pathway out of this module ends in an exactly-zero convolution, so a
//! freshly initialized net is a provable no-op on the denoiser.

use crate::encoders::LATENT_CHANNELS;
use crate::graph::{Graph, VarId};
use crate::handprior::Mask;
use crate::params::{conv_fwd, ConvP, Init, ParamBlock, VarMap};
use crate::schedule::timestep_embedding;
use crate::tensor::{hwc_to_chw, Tensor};
use crate::tryon::{attention_fwd, AttnP, CONTROL_POOL, CONTROL_SITES, CONTROL_WIDTH_MULT, HEADS};
use thiserror::Error;

/// Part classes in the dense part map: background, torso, arms, hands.
pub const DENSEPOSE_CLASSES: usize = 4;
/// Conv+SiLU layers per branch before the zero endpoint.
pub const BRANCH_CONVS: usize = 7;
/// Per-layer strides; the product matches the latent downsample factor.
pub const BRANCH_STRIDES: [usize; BRANCH_CONVS] = [2, 2, 2, 1, 1, 1, 1];
/// Hidden widths between the input map and the final `d_model` projection.
const BRANCH_HIDDEN: [usize; BRANCH_CONVS - 1] = [12, 12, 16, 16, 16, 16];

/// Rendered pose inputs at image resolution.
#[derive(Clone, Debug)]
pub struct PoseMaps {
    /// Skeleton raster, `[h,w,3]`.
    pub dwpose: Tensor,
    /// One-hot part map, `[h,w,4]`.
    pub densepose: Tensor,
    /// Hand depth in [0,1], `[h,w,1]`, zero outside the hand masks.
    pub hand_depth: Tensor,
}

#[derive(Debug, Error)]
pub enum PoseMapError {
    #[error("pose map shapes disagree: dwpose {dw:?}, densepose {dp:?}, depth {rh:?}")]
    ShapeMismatch { dw: Vec<usize>, dp: Vec<usize>, rh: Vec<usize> },
    #[error("densepose at ({y},{x}) sums to {sum}, not a one-hot distribution")]
    NotOneHot { y: usize, x: usize, sum: f64 },
    #[error("hand depth {depth} at ({y},{x}) lies outside the union hand mask")]
    DepthOutsideMask { y: usize, x: usize, depth: f64 },
}

impl PoseMaps {
    pub fn h(&self) -> usize {
        self.dwpose.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.dwpose.shape()[1]
    }

    /// Checks the structural invariants: consistent shapes, one-hot part
    /// rows, and depth support confined to the union hand mask.
    pub fn validate(&self, union: &Mask) -> Result<(), PoseMapError> {
        let (h, w) = (self.h(), self.w());
        let ok = self.dwpose.shape() == [h, w, 3]
            && self.densepose.shape() == [h, w, DENSEPOSE_CLASSES]
            && self.hand_depth.shape() == [h, w, 1]
            && (union.h, union.w) == (h, w);
        if !ok {
            return Err(PoseMapError::ShapeMismatch {
                dw: self.dwpose.shape().to_vec(),
                dp: self.densepose.shape().to_vec(),
                rh: self.hand_depth.shape().to_vec(),
            });
        }
        for y in 0..h {
            for x in 0..w {
                let row = &self.densepose.data()
                    [(y * w + x) * DENSEPOSE_CLASSES..(y * w + x + 1) * DENSEPOSE_CLASSES];
                let sum: f64 = row.iter().sum();
                let one_hot = (sum - 1.0).abs() < 1e-9 && row.iter().all(|&v| v == 0.0 || v == 1.0);
                if !one_hot {
                    return Err(PoseMapError::NotOneHot { y, x, sum });
                }
                let depth = self.hand_depth.data()[y * w + x];
                if depth != 0.0 && !union.get(y, x) {
                    return Err(PoseMapError::DepthOutsideMask { y, x, depth });
                }
            }
        }
        Ok(())
    }
}

/// One branch: seven 3x3 conv+SiLU layers whose strides downsample by 8,
/// then a 1x1 conv that starts exactly zero.
#[derive(Clone, Debug)]
pub struct ZeroMultilayerParams {
    pub convs: Vec<ConvP>,
    pub zero: ConvP,
}

impl ZeroMultilayerParams {
    pub fn init(init: &Init, path: &str, c_in: usize, d_model: usize) -> Self {
        let mut dims = vec![c_in];
        dims.extend_from_slice(&BRANCH_HIDDEN);
        dims.push(d_model);
        let convs = (0..BRANCH_CONVS)
            .map(|i| ConvP::init(init, &format!("{path}.c{i}"), dims[i + 1], dims[i], 3))
            .collect();
        ZeroMultilayerParams { convs, zero: ConvP::zero(d_model, d_model, 1) }
    }
}

impl ParamBlock for ZeroMultilayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.c{i}"), f);
        }
        self.zero.visit(&format!("{prefix}.zero"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.c{i}"), f);
        }
        self.zero.visit_mut(&format!("{prefix}.zero"), f);
    }
}

/// Runs one branch over an `[h,w,c]` map; returns `d_model` channels at 1/8
/// resolution. At fresh initialization the output is exactly zero for any
/// input, because the endpoint conv is all-zero.
pub fn zero_multilayer_forward(g: &mut Graph, vm: &VarMap, path: &str, map: &Tensor) -> VarId {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let total: usize = BRANCH_STRIDES.iter().product();
    assert!(
        h % total == 0 && w % total == 0,
        "map {h}x{w} must divide by the branch stride {total}"
    );
    let mut x = g.constant(hwc_to_chw(map));
    for (i, &stride) in BRANCH_STRIDES.iter().enumerate() {
        x = conv_fwd(g, vm, &format!("{path}.c{i}"), x, stride, 1);
        x = g.silu(x);
    }
    conv_fwd(g, vm, &format!("{path}.zero"), x, 1, 0)
}

/// Pixel-weighted branch sum `f_dw + f_dp + w_hand * f_rh`.
pub fn aggregate(f_dw: &Tensor, f_dp: &Tensor, f_rh: &Tensor, w_hand: f64) -> Tensor {
    assert!(
        f_dw.shape() == f_dp.shape() && f_dw.shape() == f_rh.shape(),
        "aggregate needs identical shapes, got {:?} {:?} {:?}",
        f_dw.shape(),
        f_dp.shape(),
        f_rh.shape()
    );
    let data = f_dw
        .data()
        .iter()
        .zip(f_dp.data())
        .zip(f_rh.data())
        .map(|((&a, &b), &c)| a + b + w_hand * c)
        .collect();
    Tensor::new(f_dw.shape(), data)
}

/// Aggregation-net weights. Absent branches (and an absent struct-attention
/// block) own no tensors, so variant builds shrink the parameter set instead
/// of zeroing it.
#[derive(Clone, Debug)]
pub struct HandposeParams {
    pub d_model: usize,
    pub dw: Option<ZeroMultilayerParams>,
    pub dp: Option<ZeroMultilayerParams>,
    pub rh: Option<ZeroMultilayerParams>,
    /// 1x1 projection of the noisy latent into the aggregation stream.
    pub zin: ConvP,
    pub attn: Option<AttnP>,
    /// Per-site zero-initialized 1x1 emitters.
    pub emit: Vec<ConvP>,
}

impl HandposeParams {
    pub fn init(
        init: &Init,
        path: &str,
        d_model: usize,
        use_dwpose: bool,
        use_densepose: bool,
        use_depth: bool,
        use_struct: bool,
    ) -> Self {
        assert!(use_dwpose || use_densepose || use_depth, "at least one pose branch required");
        let d = d_model;
        HandposeParams {
            d_model,
            dw: use_dwpose.then(|| ZeroMultilayerParams::init(init, &format!("{path}.dw"), 3, d)),
            dp: use_densepose.then(|| {
                ZeroMultilayerParams::init(init, &format!("{path}.dp"), DENSEPOSE_CLASSES, d)
            }),
            rh: use_depth.then(|| ZeroMultilayerParams::init(init, &format!("{path}.rh"), 1, d)),
            zin: ConvP::init(init, &format!("{path}.zin"), d, LATENT_CHANNELS, 1),
            attn: use_struct.then(|| AttnP::init(init, &format!("{path}.attn"), d, d, d)),
            emit: (0..CONTROL_SITES)
                .map(|i| ConvP::zero(CONTROL_WIDTH_MULT[i] * d, d, 1))
                .collect(),
        }
    }

    /// True when every terminal conv (branch endpoints and emitters) is still
    /// exactly zero, i.e. the net cannot influence the denoiser yet.
    pub fn is_neutral(&self) -> bool {
        let branches = [&self.dw, &self.dp, &self.rh]
            .into_iter()
            .flatten()
            .all(|b| b.zero.is_all_zero());
        branches && self.emit.iter().all(|e| e.is_all_zero())
    }
}

impl ParamBlock for HandposeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(b) = &self.dw {
            b.visit(&format!("{prefix}.dw"), f);
        }
        if let Some(b) = &self.dp {
            b.visit(&format!("{prefix}.dp"), f);
        }
        if let Some(b) = &self.rh {
            b.visit(&format!("{prefix}.rh"), f);
        }
        self.zin.visit(&format!("{prefix}.zin"), f);
        if let Some(a) = &self.attn {
            a.visit(&format!("{prefix}.attn"), f);
        }
        for (i, e) in self.emit.iter().enumerate() {
            e.visit(&format!("{prefix}.emit{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(b) = &mut self.dw {
            b.visit_mut(&format!("{prefix}.dw"), f);
        }
        if let Some(b) = &mut self.dp {
            b.visit_mut(&format!("{prefix}.dp"), f);
        }
        if let Some(b) = &mut self.rh {
            b.visit_mut(&format!("{prefix}.rh"), f);
        }
        self.zin.visit_mut(&format!("{prefix}.zin"), f);
        if let Some(a) = &mut self.attn {
            a.visit_mut(&format!("{prefix}.attn"), f);
        }
        for (i, e) in self.emit.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.emit{i}"), f);
        }
    }
}

/// Full aggregation-net forward: run the present branches, sum them with the
/// hand weight, add the latent projection and timestep features, inject the
/// struct tokens through hand-gated attention, then emit one residual per
/// control site through the zero-initialized 1x1 projections.
///
/// Returns [`CONTROL_SITES`] residuals; at fresh initialization each is
/// exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn handpose_forward(
    g: &mut Graph,
    vm: &VarMap,
    prefix: &str,
    hp: &HandposeParams,
    maps: &PoseMaps,
    c_struc: Option<VarId>,
    gate: &Mask,
    t: usize,
    z_in: VarId,
    w_hand: f64,
) -> Vec<VarId> {
    let d = hp.d_model;
    let zsh = g.shape(z_in).to_vec();
    assert_eq!(zsh[0], LATENT_CHANNELS, "z_in must be a latent map");
    let (lh, lw) = (zsh[1], zsh[2]);
    assert_eq!((maps.h(), maps.w()), (lh * 8, lw * 8), "pose maps vs latent resolution");
    assert_eq!((gate.h, gate.w), (lh, lw), "gate must be at latent resolution");
    assert_eq!(c_struc.is_some(), hp.attn.is_some(), "struct tokens and weights come together");

    let mut f_hp: Option<VarId> = None;
    let join = |g: &mut Graph, acc: Option<VarId>, v: VarId| match acc {
        None => Some(v),
        Some(p) => Some(g.add(p, v)),
    };
    if hp.dw.is_some() {
        let f = zero_multilayer_forward(g, vm, &format!("{prefix}.dw"), &maps.dwpose);
        f_hp = join(g, f_hp, f);
    }
    if hp.dp.is_some() {
        let f = zero_multilayer_forward(g, vm, &format!("{prefix}.dp"), &maps.densepose);
        f_hp = join(g, f_hp, f);
    }
    if hp.rh.is_some() {
        let f = zero_multilayer_forward(g, vm, &format!("{prefix}.rh"), &maps.hand_depth);
        let f = g.scale(f, w_hand);
        f_hp = join(g, f_hp, f);
    }
    let f_hp = f_hp.expect("at least one pose branch");

    let zp = conv_fwd(g, vm, &format!("{prefix}.zin"), z_in, 1, 0);
    let mut h = g.add(f_hp, zp);
    let te = g.constant(Tensor::new(&[d], timestep_embedding(t, d)));
    h = g.add_channel_vec(h, te);

    if let Some(cs) = c_struc {
        let mut tok = g.chw_to_tokens(h);
        let a = attention_fwd(g, vm, &format!("{prefix}.attn"), tok, cs, HEADS, &gate.to_bools());
        tok = g.add(tok, a);
        h = g.tokens_to_chw(tok, lh, lw);
    }

    (0..CONTROL_SITES)
        .map(|i| {
            let pooled = g.avg_pool(h, CONTROL_POOL[i]);
            conv_fwd(g, vm, &format!("{prefix}.emit{i}"), pooled, 1, 0)
        })
        .collect()
}
