//! Training losses: noise prediction, the hard Canny operator, its
//! differentiable surrogate, and the timestep-gated hand edge constraint.

use crate::encoders::decode_latent_graph;
use crate::graph::{Graph, VarId};
use crate::handprior::{HandParams, Mask};
use crate::raster::{gaussian_blur, gaussian_kernel_1d, rgb_to_gray, sobel_gradients, SOBEL_X, SOBEL_Y};
use crate::schedule::{predict_z0_var, NoiseSchedule, ScheduleError};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothing inside the surrogate's square root.
pub const SURROGATE_EPS: f64 = 1e-12;
/// Guard on the max-normalization denominator.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("edge config invalid: {0}")]
    BadEdgeConfig(&'static str),
    #[error("hand box [{x0},{y0},{x1},{y1}] does not fit a {h}x{w} image")]
    BoxOutOfBounds { x0: u32, y0: u32, x1: u32, y1: u32, h: usize, w: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Which edge operator stands in for the constraint's edge detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    /// Hard Canny forward values with surrogate gradients (straight-through).
    CannyHard,
    /// Normalized Sobel magnitude; differentiable everywhere.
    SobelSoft,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub gaussian_sigma: f64,
    /// Weak-edge threshold as a fraction of the max gradient magnitude.
    pub canny_low: f64,
    /// Strong-edge threshold as a fraction of the max gradient magnitude.
    pub canny_high: f64,
    pub mode: EdgeMode,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig { gaussian_sigma: 1.0, canny_low: 0.1, canny_high: 0.2, mode: EdgeMode::SobelSoft }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(LossError::BadEdgeConfig("gaussian_sigma must be positive"));
        }
        if !(0.0 <= self.canny_low && self.canny_low <= self.canny_high && self.canny_high <= 1.0) {
            return Err(LossError::BadEdgeConfig("need 0 <= low <= high <= 1"));
        }
        Ok(())
    }
}

/// Mean squared error between true and predicted noise.
pub fn noise_loss(g: &mut Graph, eps: VarId, eps_hat: VarId) -> VarId {
    assert_eq!(g.shape(eps), g.shape(eps_hat), "noise shapes must match");
    let d = g.sub(eps_hat, eps);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Gradient-direction neighbor offset after quantizing to 4 orientation bins.
fn orient_offset(gx: f64, gy: f64) -> (isize, isize) {
    let mut a = gy.atan2(gx).to_degrees();
    if a < 0.0 {
        a += 180.0;
    }
    if !(22.5..157.5).contains(&a) {
        (0, 1)
    } else if a < 67.5 {
        (1, 1)
    } else if a < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Classical Canny on an `[h,w]` gray map: Gaussian blur, Sobel magnitude and
/// orientation, 4-bin non-maximum suppression, double threshold as fractions
/// of the max magnitude, 8-connected hysteresis. The NMS tie-break is
/// asymmetric (strictly greater than the "before" neighbor, at least the
/// "after" neighbor) so plateau ridges thin to one pixel. Exact plateau ties
/// sit on the floating-point tie-break, so a uniform brightness shift can
/// slide such a ridge by one pixel; edge geometry is otherwise
/// contrast-shift invariant.
pub fn canny(gray: &Tensor, cfg: &EdgeConfig) -> Mask {
    cfg.validate().expect("edge config precondition");
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let blurred = gaussian_blur(gray, cfg.gaussian_sigma);
    let (gx, gy) = sobel_gradients(&blurred);
    let mag: Vec<f64> =
        gx.data().iter().zip(gy.data()).map(|(&a, &b)| a.hypot(b)).collect();
    let max = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return Mask::new(h, w);
    }
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut nms = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = y as usize * w + x as usize;
            let m = mag[p];
            let (dy, dx) = orient_offset(gx.data()[p], gy.data()[p]);
            if m > at(y - dy, x - dx) && m >= at(y + dy, x + dx) {
                nms[p] = m;
            }
        }
    }
    let lo = cfg.canny_low * max;
    let hi = cfg.canny_high * max;
    let strong: Vec<bool> = nms.iter().map(|&m| m >= hi && m > 0.0).collect();
    let weak: Vec<bool> = nms.iter().map(|&m| m >= lo && m > 0.0).collect();
    let mut keep = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&p| strong[p]).collect();
    for &p in &stack {
        keep[p] = true;
    }
    while let Some(p) = stack.pop() {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if weak[q] && !keep[q] {
                    keep[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    Mask::from_fn(h, w, |y, x| keep[y * w + x])
}

/// Positive and negative parts of a 3x3 kernel. Applying both and subtracting
/// gives the same linear map while making constant inputs cancel bit-exactly:
/// both parts see the value sequence 1c, 2c, 1c in identical order.
fn split_kernel(k: &[f64; 9]) -> (Tensor, Tensor) {
    let pos: Vec<f64> = k.iter().map(|&v| v.max(0.0)).collect();
    let neg: Vec<f64> = k.iter().map(|&v| (-v).max(0.0)).collect();
    (Tensor::new(&[3, 3], pos), Tensor::new(&[3, 3], neg))
}

/// Differentiable edge stand-in on an `[h,w]` gray map: Gaussian blur, Sobel
/// magnitude smoothed as `sqrt(m^2 + eps) - sqrt(eps)`, then division by
/// (max + 1e-8). Constant inputs produce exact zeros.
pub fn edge_surrogate(g: &mut Graph, gray: VarId, cfg: &EdgeConfig) -> VarId {
    cfg.validate().expect("edge config precondition");
    let k = gaussian_kernel_1d(cfg.gaussian_sigma);
    let kh = Tensor::new(&[1, k.len()], k.clone());
    let kv = Tensor::new(&[k.len(), 1], k);
    let b1 = g.filter2d(gray, kh);
    let b = g.filter2d(b1, kv);
    let (kxp, kxn) = split_kernel(&SOBEL_X);
    let (kyp, kyn) = split_kernel(&SOBEL_Y);
    let gxp = g.filter2d(b, kxp);
    let gxn = g.filter2d(b, kxn);
    let gyp = g.filter2d(b, kyp);
    let gyn = g.filter2d(b, kyn);
    let gx = g.sub(gxp, gxn);
    let gy = g.sub(gyp, gyn);
    let gx2 = g.mul(gx, gx);
    let gy2 = g.mul(gy, gy);
    let m2 = g.add(gx2, gy2);
    let root = g.sqrt_eps(m2, SURROGATE_EPS);
    let shape = g.shape(root).to_vec();
    let shift = g.constant(Tensor::filled(&shape, SURROGATE_EPS.sqrt()));
    let mag = g.sub(root, shift);
    let mx = g.max_all(mag);
    g.div_scalar_eps(mag, mx, NORMALIZE_EPS)
}

/// The edge operator selected by `cfg.mode`, applied to a gray crop variable.
fn apply_edge_op(g: &mut Graph, crop: VarId, cfg: &EdgeConfig) -> VarId {
    match cfg.mode {
        EdgeMode::SobelSoft => edge_surrogate(g, crop, cfg),
        EdgeMode::CannyHard => {
            let hard = canny(g.value(crop), cfg).to_tensor();
            let soft = edge_surrogate(g, crop, cfg);
            g.straight_through(soft, hard)
        }
    }
}

/// Per-crop edge discrepancy terms for one sample: the summed per-crop MSE and
/// the crop count, or `None` when the gate is closed (`t > r_t`) or no hands
/// are present. Splitting sum and count lets a batch average over all crops.
#[allow(clippy::too_many_arguments)]
pub fn hand_canny_terms(
    g: &mut Graph,
    z_t: &Tensor,
    eps_hat: VarId,
    t: usize,
    r_t: usize,
    sched: &NoiseSchedule,
    hands: &HandParams,
    gt_image: &Tensor,
    cfg: &EdgeConfig,
) -> Result<Option<(VarId, usize)>, LossError> {
    if t > r_t {
        return Ok(None);
    }
    let (ih, iw) = (gt_image.shape()[0], gt_image.shape()[1]);
    let boxes: Vec<[u32; 4]> = (0..crate::handprior::NUM_SLOTS)
        .filter(|&s| !hands.is_filler(s))
        .map(|s| hands.boxes[s])
        .collect();
    if boxes.is_empty() {
        return Ok(None);
    }
    for b in &boxes {
        let [x0, y0, x1, y1] = *b;
        if x0 >= x1 || y0 >= y1 || x1 as usize > iw || y1 as usize > ih {
            return Err(LossError::BoxOutOfBounds { x0, y0, x1, y1, h: ih, w: iw });
        }
    }
    let zt_id = g.constant(z_t.clone());
    let z0_hat = predict_z0_var(g, zt_id, eps_hat, t, sched)?;
    let img = decode_latent_graph(g, z0_hat);
    let gen_gray = g.rgb_to_gray(img);
    let gt_gray = g.constant(rgb_to_gray(gt_image));
    let mut acc: Option<VarId> = None;
    let n = boxes.len();
    for b in boxes {
        let [x0, y0, x1, y1] = [b[0] as usize, b[1] as usize, b[2] as usize, b[3] as usize];
        let gen_crop = g.crop_hw(gen_gray, y0, x0, y1, x1);
        let gt_crop = g.crop_hw(gt_gray, y0, x0, y1, x1);
        let gen_edge = apply_edge_op(g, gen_crop, cfg);
        let gt_edge = apply_edge_op(g, gt_crop, cfg);
        let d = g.sub(gen_edge, gt_edge);
        let sq = g.mul(d, d);
        let m = g.mean_all(sq);
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m),
        });
    }
    Ok(Some((acc.expect("nonempty boxes"), n)))
}

/// Edge constraint for one sample: exactly 0 (and disconnected from the
/// graph) when `t > r_t` or no hands exist; otherwise the one-step recovered
/// image and the ground truth are compared through the edge operator on every
/// hand crop and the per-crop MSEs are averaged.
#[allow(clippy::too_many_arguments)]
pub fn hand_canny_loss(
    g: &mut Graph,
    z_t: &Tensor,
    eps_hat: VarId,
    t: usize,
    r_t: usize,
    sched: &NoiseSchedule,
    hands: &HandParams,
    gt_image: &Tensor,
    cfg: &EdgeConfig,
) -> Result<VarId, LossError> {
    match hand_canny_terms(g, z_t, eps_hat, t, r_t, sched, hands, gt_image, cfg)? {
        None => Ok(g.constant(Tensor::scalar(0.0))),
        Some((sum, n)) => Ok(g.scale(sum, 1.0 / n as f64)),
    }
}

/// Combined objective: `noise + lambda_hand * hand_term`.
pub fn total_loss(g: &mut Graph, noise: VarId, hand: VarId, lambda_hand: f64) -> VarId {
    assert!(lambda_hand >= 0.0, "lambda_hand must be non-negative");
    let scaled = g.scale(hand, lambda_hand);
    g.add(noise, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::encode_latent;
    use crate::graph::gradcheck::{central_diff, probe_indices, relative_error};
    use crate::handprior::test_support::fake_hand;
    use crate::handprior::pad_hands;
    use crate::schedule::{add_noise, make_schedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_gray(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn noise_loss_offset_and_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let e = Tensor::new(&[4, 3, 3], (0..36).map(|_| rng.gen::<f64>() - 0.5).collect());
        let mut g = Graph::new();
        let (ei, ef) = (g.constant(e.clone()), g.leaf(e.clone()));
        let l = noise_loss(&mut g, ei, ef);
        assert_eq!(g.value(l).item(), 0.0, "identical tensors give exactly zero");

        let shifted = e.map(|v| v + 0.25);
        let mut g = Graph::new();
        let (ei, si) = (g.constant(e.clone()), g.leaf(shifted.clone()));
        let l = noise_loss(&mut g, ei, si);
        assert!((g.value(l).item() - 0.0625).abs() < 1e-12, "constant offset c gives c^2");
        let grads = g.backward(l);
        let gs = grads.get(si).unwrap();
        let n = e.len() as f64;
        for i in 0..e.len() {
            let analytic = 2.0 * (shifted.data()[i] - e.data()[i]) / n;
            assert!((gs.data()[i] - analytic).abs() < 1e-15, "closed-form gradient");
        }
        for idx in probe_indices(e.len(), 4) {
            let num = central_diff(&shifted, idx, 1e-6, |s| {
                let mut g = Graph::new();
                let (a, b) = (g.constant(e.clone()), g.constant(s.clone()));
                let l = noise_loss(&mut g, a, b);
                g.value(l).item()
            });
            assert!(relative_error(num, gs.data()[idx]) < 1e-6);
        }
    }

    fn square_image(h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(
            &[h, w],
            (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    if (10..22).contains(&y) && (10..22).contains(&x) {
                        hi
                    } else {
                        lo
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn canny_constant_is_empty() {
        let m = canny(&Tensor::filled(&[20, 20], 0.37), &EdgeConfig::default());
        assert!(m.is_empty(), "no gradients, no edges");
    }

    #[test]
    fn canny_square_gives_thin_ring_near_perimeter() {
        let img = square_image(32, 32, 0.2, 0.9);
        let edges = canny(&img, &EdgeConfig::default());
        assert!(edges.count_ones() > 20, "the square outline must be detected");
        // the square occupies rows/cols 10..22; every edge pixel must hug the
        // perimeter band (distance <= 1 from the boundary lines at 10 and 21)
        for y in 0..32 {
            for x in 0..32 {
                if !edges.get(y, x) {
                    continue;
                }
                let near = |v: usize| (9..=11).contains(&v) || (20..=22).contains(&v);
                let inside = |v: usize| (9..=22).contains(&v);
                assert!(
                    (near(y) && inside(x)) || (near(x) && inside(y)),
                    "edge pixel ({y},{x}) is off the perimeter band"
                );
            }
        }
        // thinness: a mid-height scanline crosses exactly two 1px walls
        for y in [14usize, 15, 16, 17] {
            let hits: Vec<usize> = (0..32).filter(|&x| edges.get(y, x)).collect();
            assert_eq!(hits.len(), 2, "row {y} hits {hits:?}, want two single-pixel walls");
        }
    }

    #[test]
    fn canny_edges_clear_the_weak_threshold_and_shift_invariance() {
        let img = rand_gray(24, 24, 7);
        let smooth = gaussian_blur(&img, 1.2);
        let cfg = EdgeConfig::default();
        let edges = canny(&smooth, &cfg);
        let blurred = gaussian_blur(&smooth, cfg.gaussian_sigma);
        let (gx, gy) = sobel_gradients(&blurred);
        let mag: Vec<f64> =
            gx.data().iter().zip(gy.data()).map(|(&a, &b)| a.hypot(b)).collect();
        let max = mag.iter().fold(0.0f64, |m, &v| m.max(v));
        for y in 0..24 {
            for x in 0..24 {
                if edges.get(y, x) {
                    assert!(
                        mag[y * 24 + x] >= cfg.canny_low * max,
                        "edge below the weak threshold at ({y},{x})"
                    );
                }
            }
        }
        // contrast-shift invariance, up to 1px ridge slides at exact plateau
        // ties where rounding decides the NMS winner
        let base = square_image(32, 32, 0.2, 0.9);
        let ea = canny(&base, &cfg);
        let eb = canny(&base.map(|v| v + 0.05), &cfg);
        assert_eq!(ea.count_ones(), eb.count_ones(), "shift must not change the edge count");
        let near = |m: &Mask, y: usize, x: usize| {
            (y.saturating_sub(1)..=(y + 1).min(31))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(31)).any(|xx| m.get(yy, xx)))
        };
        for y in 0..32 {
            for x in 0..32 {
                if ea.get(y, x) {
                    assert!(near(&eb, y, x), "edge ({y},{x}) drifted more than 1px under shift");
                }
                if eb.get(y, x) {
                    assert!(near(&ea, y, x), "edge ({y},{x}) appeared more than 1px away");
                }
            }
        }
    }

    #[test]
    fn surrogate_constant_is_exact_zero_and_ramp_is_flat() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[12, 15], 0.61));
        let e = edge_surrogate(&mut g, c, &EdgeConfig::default());
        assert!(g.value(e).data().iter().all(|&v| v == 0.0), "constant input, exact zeros");

        let ramp = Tensor::new(&[16, 16], (0..256).map(|p| (p % 16) as f64 / 16.0).collect());
        let mut g = Graph::new();
        let r = g.constant(ramp);
        let e = edge_surrogate(&mut g, r, &EdgeConfig::default());
        let v = g.value(e);
        let interior: Vec<f64> = (4..12)
            .flat_map(|y| (4..12).map(move |x| (y, x)))
            .map(|(y, x)| v.data()[y * 16 + x])
            .collect();
        let first = interior[0];
        assert!(first > 0.9, "interior ramp response should sit near the max");
        for iv in &interior {
            assert!((iv - first).abs() < 1e-9, "ramp interior must be flat");
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let gray = rand_gray(10, 11, 3);
        let mut wrng = ChaCha12Rng::seed_from_u64(4);
        let wt = Tensor::new(&[10, 11], (0..110).map(|_| wrng.gen::<f64>() - 0.5).collect());
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xid = g.leaf(x.clone());
            let e = edge_surrogate(&mut g, xid, &EdgeConfig::default());
            (g, xid, e)
        };
        let (mut g, xid, e) = run(&gray);
        let wid = g.constant(wt.clone());
        let p = g.mul(e, wid);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        let gx = grads.get(xid).unwrap();
        for idx in probe_indices(gray.len(), 6) {
            let num = central_diff(&gray, idx, 1e-6, |x| {
                let (g, _, e) = run(x);
                g.value(e).mul(&wt).sum()
            });
            assert!(
                relative_error(num, gx.data()[idx]) < 1e-6,
                "surrogate grad {idx}: {num} vs {}",
                gx.data()[idx]
            );
        }
    }

    /// A 16x16 image on the dyadic grid (multiples of 1/64), which the latent
    /// codec round-trips bit-exactly.
    fn dyadic_image(seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::new(
            &[16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.gen_range(0..=64) as f64 / 64.0).collect(),
        )
    }

    fn one_hand(h: usize, w: usize) -> HandParams {
        pad_hands(&[fake_hand(1, 3, 4, 9, 8, h, w, 50)], h, w)
    }

    #[test]
    fn hand_loss_gate_and_exact_zero_on_identical_images() {
        // alpha_bar = 0.25 makes every step of the one-step recovery exact in
        // floating point, so generated == ground truth bitwise
        let sched = make_schedule(1, 0.75, 0.75).unwrap();
        let img = dyadic_image(11);
        let z0 = encode_latent(&img).unwrap();
        let zeros = Tensor::zeros(z0.shape());
        let z_t = add_noise(&z0, &zeros, 0, &sched).unwrap();
        let hands = one_hand(16, 16);
        let cfg = EdgeConfig::default();

        let mut g = Graph::new();
        let eps_hat = g.leaf(zeros.clone());
        let l = hand_canny_loss(&mut g, &z_t, eps_hat, 0, 0, &sched, &hands, &img, &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0, "identical generated and gt crops give exactly 0");

        // closed gate: exactly zero and disconnected from the prediction
        let sched5 = make_schedule(5, 0.01, 0.2).unwrap();
        let mut g = Graph::new();
        let eps_hat = g.leaf(Tensor::filled(z0.shape(), 0.3));
        let zt5 = Tensor::filled(z0.shape(), 0.7);
        let l =
            hand_canny_loss(&mut g, &zt5, eps_hat, 3, 2, &sched5, &hands, &img, &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0, "t > r_t must give exactly 0");
        let grads = g.backward(l);
        assert!(grads.get(eps_hat).is_none(), "closed gate must pass zero gradient");

        // no hands -> vacuous average is 0
        let mut g = Graph::new();
        let eps_hat = g.leaf(zeros);
        let none = HandParams::empty(16, 16);
        let l = hand_canny_loss(&mut g, &z_t, eps_hat, 0, 3, &sched, &none, &img, &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn hand_loss_rejects_out_of_bounds_boxes() {
        let sched = make_schedule(4, 0.01, 0.1).unwrap();
        let img = dyadic_image(12);
        let z_t = Tensor::zeros(&[192, 2, 2]);
        let mut hands = one_hand(16, 16);
        hands.boxes[0] = [8, 8, 40, 12];
        let mut g = Graph::new();
        let eps_hat = g.leaf(Tensor::zeros(&[192, 2, 2]));
        let err = hand_canny_loss(
            &mut g,
            &z_t,
            eps_hat,
            1,
            3,
            &sched,
            &hands,
            &img,
            &EdgeConfig::default(),
        );
        assert!(matches!(err, Err(LossError::BoxOutOfBounds { .. })));
    }

    #[test]
    fn hand_loss_gradient_matches_finite_differences() {
        let sched = make_schedule(20, 0.001, 0.05).unwrap();
        let img = dyadic_image(13);
        let z0 = encode_latent(&img).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let eps = Tensor::new(z0.shape(), (0..z0.len()).map(|_| rng.gen::<f64>() - 0.5).collect());
        let z_t = add_noise(&z0, &eps, 2, &sched).unwrap();
        let hands = one_hand(16, 16);
        let cfg = EdgeConfig::default();
        let eh0 =
            Tensor::new(z0.shape(), (0..z0.len()).map(|_| 0.3 * (rng.gen::<f64>() - 0.5)).collect());
        let run = |eh: &Tensor| {
            let mut g = Graph::new();
            let id = g.leaf(eh.clone());
            let l = hand_canny_loss(&mut g, &z_t, id, 2, 4, &sched, &hands, &img, &cfg).unwrap();
            (g, id, l)
        };
        let (g, id, l) = run(&eh0);
        assert!(g.value(l).item() > 0.0, "wrong prediction must be penalized");
        let grads = g.backward(l);
        let ge = grads.get(id).unwrap();
        // probe live elements (latent cells whose pixels fall in the crop)
        let live: Vec<usize> = (0..eh0.len()).filter(|&i| ge.data()[i].abs() > 1e-9).collect();
        assert!(live.len() >= 24, "crop support too small: {} live elements", live.len());
        for &idx in live.iter().step_by(live.len() / 6) {
            let num = central_diff(&eh0, idx, 1e-6, |e| {
                let (g, _, l) = run(e);
                g.value(l).item()
            });
            assert!(
                relative_error(num, ge.data()[idx]) < 1e-4,
                "hand loss grad {idx}: {num} vs {}",
                ge.data()[idx]
            );
        }
        // latent cells whose pixels miss every crop must be exactly inert
        let dead = (0..eh0.len()).find(|&i| ge.data()[i] == 0.0).expect("some dead element");
        let num = central_diff(&eh0, dead, 1e-4, |e| {
            let (g, _, l) = run(e);
            g.value(l).item()
        });
        assert_eq!(num, 0.0, "element {dead} outside the crops must not affect the loss");
    }

    #[test]
    fn hand_loss_straight_through_mode_uses_hard_values() {
        let sched = make_schedule(1, 0.75, 0.75).unwrap();
        let img = dyadic_image(15);
        let z0 = encode_latent(&img).unwrap();
        let zeros = Tensor::zeros(z0.shape());
        let z_t = add_noise(&z0, &zeros, 0, &sched).unwrap();
        let hands = one_hand(16, 16);
        let cfg = EdgeConfig { mode: EdgeMode::CannyHard, ..EdgeConfig::default() };
        // identical crops still cancel exactly in hard mode
        let mut g = Graph::new();
        let eps_hat = g.leaf(zeros);
        let l = hand_canny_loss(&mut g, &z_t, eps_hat, 0, 0, &sched, &hands, &img, &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // and gradients still flow through the soft branch
        let grads = g.backward(l);
        assert!(grads.get(eps_hat).is_some(), "straight-through must keep the graph connected");
    }

    #[test]
    fn total_loss_is_linear_in_lambda() {
        let mut g = Graph::new();
        let noise = g.constant(Tensor::scalar(0.8125));
        let hand = g.constant(Tensor::scalar(0.3125));
        let l0 = total_loss(&mut g, noise, hand, 0.0);
        assert_eq!(g.value(l0).item(), 0.8125, "lambda 0 returns the noise term untouched");
        let ta = total_loss(&mut g, noise, hand, 0.4);
        let tb = total_loss(&mut g, noise, hand, 1.2);
        let tm = total_loss(&mut g, noise, hand, 0.8);
        let (la, lb, lm) = (g.value(ta).item(), g.value(tb).item(), g.value(tm).item());
        assert!((la + lb - 2.0 * lm).abs() < 1e-12, "two-point linearity");
    }
}
