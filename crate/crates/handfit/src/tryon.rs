//! The denoiser: latent-concat input, garment injection at the first stage,
//! token cross-attention at the bottleneck, and control-residual attachment.
//!
//! Appearance tokens enter through *masked* cross-attention: standard scaled
//! dot-product attention whose output rows are multiplied by a binary
//! per-query gate. A gated-off row is exactly zero, so with an empty hand
//! gate the whole appearance pathway is provably inert, value and gradient.

use crate::encoders::LATENT_CHANNELS;
use crate::graph::{Graph, VarId};
use crate::handprior::{downsample_gate, Mask};
use crate::params::{conv_fwd, linear_fwd, mat_fwd, ConvP, Init, LinearP, MatP, ParamBlock, VarMap};
use crate::schedule::timestep_embedding;
use crate::tensor::{matmul, matmul_nt, Tensor};

/// Attention heads in every cross-attention block.
pub const HEADS: usize = 4;
/// Control residuals attach at three sites: encoder mid, bottleneck, decoder
/// mid.
pub const CONTROL_SITES: usize = 3;
/// Latent-to-site downsample factor per control site.
pub const CONTROL_POOL: [usize; CONTROL_SITES] = [2, 4, 2];
/// Site channel width as a multiple of `d_model`.
pub const CONTROL_WIDTH_MULT: [usize; CONTROL_SITES] = [2, 4, 2];

/// `softmax(q k^T / sqrt(d)) v` with output rows multiplied by a binary gate.
/// Rows where the gate is off come back exactly zero.
pub fn masked_cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, gate: &[bool]) -> Tensor {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    assert!(nk > 0, "attention needs at least one key");
    assert_eq!(k.shape()[1], d, "key width vs query width");
    assert_eq!(v.shape()[0], nk, "value rows vs key rows");
    assert_eq!(gate.len(), nq, "gate length vs query rows");
    let scores = matmul_nt(q, k).scale(1.0 / (d as f64).sqrt());
    let m = v.shape()[1];
    let mut probs = scores;
    for row in probs.data_mut().chunks_mut(nk) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for o in row.iter_mut() {
            *o = (*o - mx).exp();
            z += *o;
        }
        for o in row.iter_mut() {
            *o /= z;
        }
    }
    let mut out = matmul(&probs, v);
    for (i, row) in out.data_mut().chunks_mut(m).enumerate() {
        if !gate[i] {
            row.fill(0.0);
        }
    }
    out
}

/// Graph twin of [`masked_cross_attention`]; identical operation order, so the
/// forward values agree bitwise.
pub fn masked_cross_attention_g(
    g: &mut Graph,
    q: VarId,
    k: VarId,
    v: VarId,
    gate: &[bool],
) -> VarId {
    let d = g.shape(q)[1];
    assert!(g.shape(k)[0] > 0, "attention needs at least one key");
    assert_eq!(g.shape(k)[1], d, "key width vs query width");
    assert_eq!(g.shape(v)[0], g.shape(k)[0], "value rows vs key rows");
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax_rows(scaled);
    let mixed = g.matmul(probs, v);
    g.gate_rows(mixed, gate)
}

/// Bias-free q/k/v projections of one cross-attention block. No output
/// projection: head outputs are concatenated and added residually, which
/// keeps gated-off rows exactly zero.
#[derive(Clone, Debug)]
pub struct AttnP {
    pub q: MatP,
    pub k: MatP,
    pub v: MatP,
}

impl AttnP {
    /// Queries of width `d_q`, keys/values of width `d_kv`, output width
    /// `d_out` (split across [`HEADS`]).
    pub fn init(init: &Init, path: &str, d_q: usize, d_kv: usize, d_out: usize) -> Self {
        assert_eq!(d_out % HEADS, 0, "output width {d_out} must split into {HEADS} heads");
        AttnP {
            q: MatP::init(init, &format!("{path}.q"), d_q, d_out),
            k: MatP::init(init, &format!("{path}.k"), d_kv, d_out),
            v: MatP::init(init, &format!("{path}.v"), d_kv, d_out),
        }
    }
}

impl ParamBlock for AttnP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
    }
}

/// Multi-head masked cross-attention with weights rooted at `path`: project
/// queries and keys/values, run each head on its column slice, concatenate.
pub fn attention_fwd(
    g: &mut Graph,
    vm: &VarMap,
    path: &str,
    queries: VarId,
    kv: VarId,
    heads: usize,
    gate: &[bool],
) -> VarId {
    let q_all = mat_fwd(g, vm, &format!("{path}.q"), queries);
    let k_all = mat_fwd(g, vm, &format!("{path}.k"), kv);
    let v_all = mat_fwd(g, vm, &format!("{path}.v"), kv);
    let d_out = g.shape(q_all)[1];
    assert_eq!(d_out % heads, 0, "width {d_out} not divisible into {heads} heads");
    let dh = d_out / heads;
    let outs: Vec<VarId> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q_all, h * dh, dh);
            let kh = g.slice_cols(k_all, h * dh, dh);
            let vh = g.slice_cols(v_all, h * dh, dh);
            masked_cross_attention_g(g, qh, kh, vh, gate)
        })
        .collect();
    g.concat_cols(&outs)
}

/// U-shaped denoiser weights: three encoder stages at widths `d, 2d, 4d`, a
/// bottleneck with garment attention (always on) and appearance attention
/// (present only when that pathway is enabled), and a mirrored decoder with
/// additive skips.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub d_model: usize,
    pub in_proj: ConvP,
    pub garment_in: ConvP,
    pub t1: LinearP,
    pub t2: LinearP,
    pub t3: LinearP,
    pub enc1: ConvP,
    pub down1: ConvP,
    pub enc2: ConvP,
    pub down2: ConvP,
    pub enc3: ConvP,
    pub garment_attn: AttnP,
    pub appear_attn: Option<AttnP>,
    pub mid: ConvP,
    pub dec3: ConvP,
    pub up2: ConvP,
    pub dec2: ConvP,
    pub up1: ConvP,
    pub dec1: ConvP,
    pub out: ConvP,
}

impl DenoiserParams {
    pub fn init(init: &Init, path: &str, d_model: usize, use_appear: bool) -> Self {
        let (d, d2, d4) = (d_model, 2 * d_model, 4 * d_model);
        DenoiserParams {
            d_model,
            in_proj: ConvP::init(init, &format!("{path}.in_proj"), d, 2 * LATENT_CHANNELS, 1),
            garment_in: ConvP::init(init, &format!("{path}.garment_in"), d, LATENT_CHANNELS, 1),
            t1: LinearP::init(init, &format!("{path}.t1"), d, d),
            t2: LinearP::init(init, &format!("{path}.t2"), d, d2),
            t3: LinearP::init(init, &format!("{path}.t3"), d, d4),
            enc1: ConvP::init(init, &format!("{path}.enc1"), d, d, 3),
            down1: ConvP::init(init, &format!("{path}.down1"), d2, d, 3),
            enc2: ConvP::init(init, &format!("{path}.enc2"), d2, d2, 3),
            down2: ConvP::init(init, &format!("{path}.down2"), d4, d2, 3),
            enc3: ConvP::init(init, &format!("{path}.enc3"), d4, d4, 3),
            garment_attn: AttnP::init(init, &format!("{path}.gattn"), d4, d, d4),
            appear_attn: use_appear.then(|| AttnP::init(init, &format!("{path}.aattn"), d4, d, d4)),
            mid: ConvP::init(init, &format!("{path}.mid"), d4, d4, 3),
            dec3: ConvP::init(init, &format!("{path}.dec3"), d4, d4, 3),
            up2: ConvP::init(init, &format!("{path}.up2"), d2, d4, 3),
            dec2: ConvP::init(init, &format!("{path}.dec2"), d2, d2, 3),
            up1: ConvP::init(init, &format!("{path}.up1"), d, d2, 3),
            dec1: ConvP::init(init, &format!("{path}.dec1"), d, d, 3),
            out: ConvP::init(init, &format!("{path}.out"), LATENT_CHANNELS, d, 1),
        }
    }
}

impl ParamBlock for DenoiserParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        self.garment_in.visit(&format!("{prefix}.garment_in"), f);
        self.t1.visit(&format!("{prefix}.t1"), f);
        self.t2.visit(&format!("{prefix}.t2"), f);
        self.t3.visit(&format!("{prefix}.t3"), f);
        self.enc1.visit(&format!("{prefix}.enc1"), f);
        self.down1.visit(&format!("{prefix}.down1"), f);
        self.enc2.visit(&format!("{prefix}.enc2"), f);
        self.down2.visit(&format!("{prefix}.down2"), f);
        self.enc3.visit(&format!("{prefix}.enc3"), f);
        self.garment_attn.visit(&format!("{prefix}.gattn"), f);
        if let Some(a) = &self.appear_attn {
            a.visit(&format!("{prefix}.aattn"), f);
        }
        self.mid.visit(&format!("{prefix}.mid"), f);
        self.dec3.visit(&format!("{prefix}.dec3"), f);
        self.up2.visit(&format!("{prefix}.up2"), f);
        self.dec2.visit(&format!("{prefix}.dec2"), f);
        self.up1.visit(&format!("{prefix}.up1"), f);
        self.dec1.visit(&format!("{prefix}.dec1"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.in_proj.visit_mut(&format!("{prefix}.in_proj"), f);
        self.garment_in.visit_mut(&format!("{prefix}.garment_in"), f);
        self.t1.visit_mut(&format!("{prefix}.t1"), f);
        self.t2.visit_mut(&format!("{prefix}.t2"), f);
        self.t3.visit_mut(&format!("{prefix}.t3"), f);
        self.enc1.visit_mut(&format!("{prefix}.enc1"), f);
        self.down1.visit_mut(&format!("{prefix}.down1"), f);
        self.enc2.visit_mut(&format!("{prefix}.enc2"), f);
        self.down2.visit_mut(&format!("{prefix}.down2"), f);
        self.enc3.visit_mut(&format!("{prefix}.enc3"), f);
        self.garment_attn.visit_mut(&format!("{prefix}.gattn"), f);
        if let Some(a) = &mut self.appear_attn {
            a.visit_mut(&format!("{prefix}.aattn"), f);
        }
        self.mid.visit_mut(&format!("{prefix}.mid"), f);
        self.dec3.visit_mut(&format!("{prefix}.dec3"), f);
        self.up2.visit_mut(&format!("{prefix}.up2"), f);
        self.dec2.visit_mut(&format!("{prefix}.dec2"), f);
        self.up1.visit_mut(&format!("{prefix}.up1"), f);
        self.dec1.visit_mut(&format!("{prefix}.dec1"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

/// One denoiser forward pass predicting the noise in `z_t`.
///
/// `controls` is either empty or one residual per control site, added at the
/// encoder-mid, bottleneck, and decoder-mid feature maps. `gate` is a hand
/// mask at latent resolution; it is any-pooled to the bottleneck grid for the
/// appearance attention queries.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    g: &mut Graph,
    vm: &VarMap,
    prefix: &str,
    den: &DenoiserParams,
    z_t: VarId,
    agn: VarId,
    t: usize,
    garment_latent: VarId,
    garment_tokens: VarId,
    controls: &[VarId],
    c_appear: Option<VarId>,
    gate: &Mask,
) -> VarId {
    let d = den.d_model;
    let zsh = g.shape(z_t).to_vec();
    assert_eq!(zsh[0], LATENT_CHANNELS, "z_t must be a latent map");
    let (lh, lw) = (zsh[1], zsh[2]);
    assert!(lh % 4 == 0 && lw % 4 == 0, "latent {lh}x{lw} must be divisible by 4");
    assert_eq!((gate.h, gate.w), (lh, lw), "gate must be at latent resolution");
    assert!(
        controls.is_empty() || controls.len() == CONTROL_SITES,
        "controls must be empty or cover all {CONTROL_SITES} sites"
    );
    assert_eq!(
        den.appear_attn.is_some(),
        c_appear.is_some(),
        "appearance weights and tokens must be present together"
    );

    let te = g.constant(Tensor::new(&[1, d], timestep_embedding(t, d)));
    let temb = |g: &mut Graph, path: &str, width: usize| {
        let m = linear_fwd(g, vm, path, te);
        g.reshape(m, &[width])
    };

    let x = g.concat_channels(z_t, agn);
    let mut h1 = conv_fwd(g, vm, &format!("{prefix}.in_proj"), x, 1, 0);
    let gl = conv_fwd(g, vm, &format!("{prefix}.garment_in"), garment_latent, 1, 0);
    h1 = g.add(h1, gl);
    let t1v = temb(g, &format!("{prefix}.t1"), d);
    h1 = g.add_channel_vec(h1, t1v);
    h1 = conv_fwd(g, vm, &format!("{prefix}.enc1"), h1, 1, 1);
    h1 = g.silu(h1);

    let mut h2 = conv_fwd(g, vm, &format!("{prefix}.down1"), h1, 2, 1);
    h2 = g.silu(h2);
    let t2v = temb(g, &format!("{prefix}.t2"), 2 * d);
    h2 = g.add_channel_vec(h2, t2v);
    h2 = conv_fwd(g, vm, &format!("{prefix}.enc2"), h2, 1, 1);
    h2 = g.silu(h2);
    if !controls.is_empty() {
        h2 = g.add(h2, controls[0]);
    }

    let mut h3 = conv_fwd(g, vm, &format!("{prefix}.down2"), h2, 2, 1);
    h3 = g.silu(h3);
    let t3v = temb(g, &format!("{prefix}.t3"), 4 * d);
    h3 = g.add_channel_vec(h3, t3v);
    h3 = conv_fwd(g, vm, &format!("{prefix}.enc3"), h3, 1, 1);
    h3 = g.silu(h3);

    let (bh, bw) = (lh / 4, lw / 4);
    let mut tok = g.chw_to_tokens(h3);
    let all_on = vec![true; bh * bw];
    let ga = attention_fwd(g, vm, &format!("{prefix}.gattn"), tok, garment_tokens, HEADS, &all_on);
    tok = g.add(tok, ga);
    if let Some(ca) = c_appear {
        let bgate = downsample_gate(gate, 4).expect("latent gate divides by 4");
        let aa =
            attention_fwd(g, vm, &format!("{prefix}.aattn"), tok, ca, HEADS, &bgate.to_bools());
        tok = g.add(tok, aa);
    }
    let mut hb = g.tokens_to_chw(tok, bh, bw);
    hb = conv_fwd(g, vm, &format!("{prefix}.mid"), hb, 1, 1);
    hb = g.silu(hb);
    if !controls.is_empty() {
        hb = g.add(hb, controls[1]);
    }

    let s3 = g.add(hb, h3);
    let mut d3 = conv_fwd(g, vm, &format!("{prefix}.dec3"), s3, 1, 1);
    d3 = g.silu(d3);
    let u2 = g.upsample_nearest(d3, 2);
    let mut d2 = conv_fwd(g, vm, &format!("{prefix}.up2"), u2, 1, 1);
    d2 = g.silu(d2);
    let s2 = g.add(d2, h2);
    d2 = conv_fwd(g, vm, &format!("{prefix}.dec2"), s2, 1, 1);
    d2 = g.silu(d2);
    if !controls.is_empty() {
        d2 = g.add(d2, controls[2]);
    }
    let u1 = g.upsample_nearest(d2, 2);
    let mut d1 = conv_fwd(g, vm, &format!("{prefix}.up1"), u1, 1, 1);
    d1 = g.silu(d1);
    let s1 = g.add(d1, h1);
    d1 = conv_fwd(g, vm, &format!("{prefix}.dec1"), s1, 1, 1);
    d1 = g.silu(d1);
    conv_fwd(g, vm, &format!("{prefix}.out"), d1, 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::{central_diff, probe_indices, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn gate_extremes_and_singleton_key() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let q = randt(&[5, 8], &mut rng);
        let k = randt(&[3, 8], &mut rng);
        let v = randt(&[3, 8], &mut rng);

        let open = masked_cross_attention(&q, &k, &v, &vec![true; 5]);
        // ungated oracle: naive per-row softmax attention loops
        let mut reference = vec![0.0; 5 * 8];
        for i in 0..5 {
            let qrow = &q.data()[i * 8..(i + 1) * 8];
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    let krow = &k.data()[j * 8..(j + 1) * 8];
                    qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                let vrow = &v.data()[j * 8..(j + 1) * 8];
                for c in 0..8 {
                    reference[i * 8 + c] += exps[j] / z * vrow[c];
                }
            }
        }
        for (i, (&a, &b)) in open.data().iter().zip(&reference).enumerate() {
            assert!((a - b).abs() < 1e-12, "all-ones gate must be plain attention at {i}");
        }
        assert!(open.data().iter().any(|&x| x != 0.0));

        let shut = masked_cross_attention(&q, &k, &v, &vec![false; 5]);
        assert!(shut.data().iter().all(|&x| x == 0.0), "closed gate must annihilate");

        let k1 = randt(&[1, 8], &mut rng);
        let v1 = randt(&[1, 8], &mut rng);
        let gate = vec![true, false, true, true, false];
        let single = masked_cross_attention(&q, &k1, &v1, &gate);
        for (i, &on) in gate.iter().enumerate() {
            let row = &single.data()[i * 8..(i + 1) * 8];
            if on {
                assert_eq!(row, v1.data(), "singleton softmax must pass the value through");
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn graph_attention_matches_plain_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let q = randt(&[4, 6], &mut rng);
        let k = randt(&[5, 6], &mut rng);
        let v = randt(&[5, 6], &mut rng);
        let gate = vec![true, false, true, true];
        let plain = masked_cross_attention(&q, &k, &v, &gate);
        let mut g = Graph::new();
        let (qi, ki, vi) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let out = masked_cross_attention_g(&mut g, qi, ki, vi, &gate);
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let q = randt(&[4, 6], &mut rng);
        let k = randt(&[3, 6], &mut rng);
        let v = randt(&[3, 6], &mut rng);
        let gate = vec![true, true, false, true];
        let wt = randt(&[4, 6], &mut rng);
        let run = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (qi, ki, vi) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let out = masked_cross_attention_g(&mut g, qi, ki, vi, &gate);
            let wid = g.constant(wt.clone());
            let prod = g.mul(out, wid);
            let s = g.sum_all(prod);
            (g, qi, ki, vi, s)
        };
        let (g, qi, ki, vi, s) = run(&q, &k, &v);
        let grads = g.backward(s);
        for (name, t, id) in [("q", &q, qi), ("k", &k, ki), ("v", &v, vi)] {
            let ga = grads.get(id).unwrap();
            for idx in probe_indices(t.len(), 5) {
                let num = central_diff(t, idx, 1e-6, |tp| {
                    let (g, _, _, _, s) = match name {
                        "q" => run(tp, &k, &v),
                        "k" => run(&q, tp, &v),
                        _ => run(&q, &k, tp),
                    };
                    g.value(s).item()
                });
                assert!(
                    relative_error(num, ga.data()[idx]) < 1e-6,
                    "{name} idx {idx}: {num} vs {}",
                    ga.data()[idx]
                );
            }
        }
    }

    #[test]
    fn multihead_block_respects_gate_and_head_split() {
        let init = Init::new(50);
        let attn = AttnP::init(&init, "blk", 8, 6, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let queries = randt(&[5, 8], &mut rng);
        let kv_a = randt(&[3, 6], &mut rng);
        let kv_b = randt(&[3, 6], &mut rng);
        let gate = vec![true, false, true, false, true];
        let run = |kv: &Tensor| {
            let mut g = Graph::new();
            let vm = VarMap::frozen(&mut g, &attn, "blk");
            let qi = g.constant(queries.clone());
            let ki = g.constant(kv.clone());
            let out = attention_fwd(&mut g, &vm, "blk", qi, ki, HEADS, &gate);
            g.value(out).clone()
        };
        let (a, b) = (run(&kv_a), run(&kv_b));
        assert_eq!(a.shape(), &[5, 8]);
        for (i, &on) in gate.iter().enumerate() {
            let ra = &a.data()[i * 8..(i + 1) * 8];
            let rb = &b.data()[i * 8..(i + 1) * 8];
            if on {
                assert_ne!(ra, rb, "open row {i} must react to the keys");
            } else {
                assert!(ra.iter().all(|&x| x == 0.0), "closed row {i} must stay zero");
                assert_eq!(ra, rb);
            }
        }
    }

    fn small_denoiser(seed: u64, use_appear: bool) -> DenoiserParams {
        DenoiserParams::init(&Init::new(seed), "denoiser", 8, use_appear)
    }

    struct StepInputs {
        z_t: Tensor,
        agn: Tensor,
        garment_latent: Tensor,
        garment_tokens: Tensor,
        c_appear: Tensor,
    }

    fn step_inputs(seed: u64, lh: usize, lw: usize, d: usize) -> StepInputs {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        StepInputs {
            z_t: randt(&[LATENT_CHANNELS, lh, lw], &mut rng),
            agn: randt(&[LATENT_CHANNELS, lh, lw], &mut rng),
            garment_latent: randt(&[LATENT_CHANNELS, lh, lw], &mut rng),
            garment_tokens: randt(&[16, d], &mut rng),
            c_appear: randt(&[2, d], &mut rng),
        }
    }

    fn run_step(
        den: &DenoiserParams,
        ins: &StepInputs,
        controls: Option<&[Tensor]>,
        c_appear: &Tensor,
        gate: &Mask,
    ) -> Tensor {
        let mut g = Graph::new();
        let vm = VarMap::frozen(&mut g, den, "denoiser");
        let z = g.constant(ins.z_t.clone());
        let a = g.constant(ins.agn.clone());
        let glat = g.constant(ins.garment_latent.clone());
        let gtok = g.constant(ins.garment_tokens.clone());
        let ctl: Vec<VarId> = controls
            .map(|cs| cs.iter().map(|c| g.constant(c.clone())).collect())
            .unwrap_or_default();
        let ca = den.appear_attn.as_ref().map(|_| g.constant(c_appear.clone()));
        let out = denoise_step(&mut g, &vm, "denoiser", den, z, a, 3, glat, gtok, &ctl, ca, gate);
        g.value(out).clone()
    }

    #[test]
    fn zero_controls_match_no_controls_and_runs_are_deterministic() {
        let den = small_denoiser(60, true);
        let ins = step_inputs(61, 8, 8, 8);
        let gate = Mask::from_fn(8, 8, |y, x| y < 3 && x > 4);
        let zeros: Vec<Tensor> = (0..CONTROL_SITES)
            .map(|i| {
                Tensor::zeros(&[
                    CONTROL_WIDTH_MULT[i] * den.d_model,
                    8 / CONTROL_POOL[i],
                    8 / CONTROL_POOL[i],
                ])
            })
            .collect();
        let without = run_step(&den, &ins, None, &ins.c_appear, &gate);
        let with = run_step(&den, &ins, Some(&zeros), &ins.c_appear, &gate);
        assert_eq!(without, with, "all-zero controls must be a no-op");
        assert_eq!(without.shape(), &[LATENT_CHANNELS, 8, 8]);
        let again = run_step(&den, &ins, None, &ins.c_appear, &gate);
        assert_eq!(without, again, "same inputs must reproduce bitwise");
    }

    #[test]
    fn closed_gate_makes_appearance_tokens_inert() {
        let den = small_denoiser(62, true);
        let ins = step_inputs(63, 8, 8, 8);
        let empty = Mask::new(8, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(64);
        let base = run_step(&den, &ins, None, &ins.c_appear, &empty);
        for _ in 0..5 {
            let other = randt(&[2, 8], &mut rng);
            let out = run_step(&den, &ins, None, &other, &empty);
            assert_eq!(base, out, "appearance tokens must not leak through a closed gate");
        }
        // an open gate must leak by construction
        let open = Mask::from_fn(8, 8, |_, _| true);
        let a = run_step(&den, &ins, None, &ins.c_appear, &open);
        let b = run_step(&den, &ins, None, &randt(&[2, 8], &mut rng), &open);
        assert_ne!(a, b);
    }

    #[test]
    fn variant_without_appearance_has_no_attn_weights() {
        let den = small_denoiser(65, false);
        assert!(den.appear_attn.is_none());
        let mut names = Vec::new();
        den.visit("denoiser", &mut |n, _| names.push(n));
        assert!(names.iter().all(|n| !n.contains("aattn")));
        let ins = step_inputs(66, 4, 4, 8);
        let gate = Mask::from_fn(4, 4, |y, _| y == 0);
        let out = run_step(&den, &ins, None, &ins.c_appear, &gate);
        assert_eq!(out.shape(), &[LATENT_CHANNELS, 4, 4]);
    }

    #[test]
    fn denoise_step_gradient_matches_finite_differences() {
        let den = small_denoiser(70, true);
        let ins = step_inputs(71, 4, 4, 8);
        let gate = Mask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        let mut wrng = ChaCha12Rng::seed_from_u64(72);
        let wt = randt(&[LATENT_CHANNELS, 4, 4], &mut wrng);
        let run = |z: &Tensor| {
            let mut g = Graph::new();
            let vm = VarMap::frozen(&mut g, &den, "denoiser");
            let zi = g.leaf(z.clone());
            let a = g.constant(ins.agn.clone());
            let glat = g.constant(ins.garment_latent.clone());
            let gtok = g.constant(ins.garment_tokens.clone());
            let ca = g.constant(ins.c_appear.clone());
            let out = denoise_step(
                &mut g, &vm, "denoiser", &den, zi, a, 2, glat, gtok, &[], Some(ca), &gate,
            );
            let wid = g.constant(wt.clone());
            let prod = g.mul(out, wid);
            let s = g.sum_all(prod);
            (g, zi, s)
        };
        let (g, zi, s) = run(&ins.z_t);
        let grads = g.backward(s);
        let gz = grads.get(zi).unwrap();
        for idx in probe_indices(ins.z_t.len(), 6) {
            let num = central_diff(&ins.z_t, idx, 1e-5, |zt| {
                let (g, _, s) = run(zt);
                g.value(s).item()
            });
            assert!(
                relative_error(num, gz.data()[idx]) < 1e-4,
                "z_t idx {idx}: {num} vs {}",
                gz.data()[idx]
            );
        }
    }
}
