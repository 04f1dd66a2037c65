//! Evaluation metrics: Gaussian-windowed SSIM, fiducial joint recovery with
//! mean per-joint error, Frechet and kernel distances over pooled features,
//! and their hand-region variants computed on box crops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handprior::{crop_box, HandParams, NUM_SLOTS};
use crate::raster;
use crate::synthdata::SceneSample;
use crate::tensor::{self, Tensor};

/// Stabilizers for SSIM on a [0,1] intensity range.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Search radius (pixels, Chebyshev) around each ground-truth joint.
pub const DETECT_RADIUS: usize = 6;
/// A window whose best magenta score falls below this counts as a miss.
pub const DETECT_MIN_SCORE: f64 = 0.5;

/// Hand crops and whole images are resized to this square before feature
/// extraction.
pub const CROP_SIZE: usize = 32;
/// Pooled-statistics feature width: 48 cell channel means plus 16 bins.
pub const FEATURE_DIM: usize = 64;

/// Eigenvalues of a covariance may dip this far below zero before the matrix
/// counts as non-PSD; anything in (-tol, 0) is clipped to zero.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image dims differ: {0:?} vs {1:?}")]
    DimMismatch(Vec<usize>, Vec<usize>),
    #[error("window {0} must be odd, at least 3, and fit inside the image")]
    BadWindow(usize),
    #[error("joint counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("need at least {need} rows, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("covariance eigenvalue {0:.3e} below the PSD tolerance")]
    NonPsd(f64),
    #[error("no non-filler hand crops in the set")]
    ZeroCrops,
    #[error("hand crop failed: {0}")]
    Crop(String),
    #[error("SSIM needs paired ground truth; unpaired mode has none")]
    SsimUnavailable,
    #[error("evaluation sets differ in length: {0} generated vs {1} reference")]
    SetMismatch(usize, usize),
    #[error("paired evaluation but sample {0} is marked unpaired")]
    NotPaired(usize),
}

// ---------------------------------------------------------------------------
// SSIM.

/// Normalized 2D Gaussian window, the outer product of a 1D kernel.
fn gaussian_window_2d(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n / 2) as f64;
    let k1: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut w: Vec<f64> = (0..n * n).map(|i| k1[i / n] * k1[i % n]).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all valid window positions and channels. Identical
/// inputs give exactly 1.0: every per-window factor pair is computed by the
/// same accumulation, so numerator and denominator agree bitwise.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::DimMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    if a.shape().len() != 3 {
        return Err(MetricError::DimMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if window % 2 == 0 || window < 3 || window > h || window > w {
        return Err(MetricError::BadWindow(window));
    }
    let wg = gaussian_window_2d(window, SSIM_SIGMA);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=(h - window) {
            for ox in 0..=(w - window) {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
                for wy in 0..window {
                    for wx in 0..window {
                        let g = wg[wy * window + wx];
                        let i = ((oy + wy) * w + ox + wx) * c + ch;
                        let (x, y) = (ad[i], bd[i]);
                        mx += g * x;
                        my += g * y;
                        sxx += g * x * x;
                        syy += g * y * y;
                        sxy += g * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Joint detection and MPJPE.

/// Magenta-ness of one pixel: R + B - 2G, clipped at zero.
pub fn magenta_score(r: f64, g: f64, b: f64) -> f64 {
    (r + b - 2.0 * g).max(0.0)
}

/// Recover each joint as the best magenta pixel near its ground-truth spot.
/// Score ties resolve toward the ground-truth position (then scan order), so
/// a fiducial blob centered on the joint detects exactly there even when a
/// neighboring joint's blob shares the window. A window with no credible
/// magenta yields a point at exactly `radius` distance, the miss convention.
pub fn detect_joints(image: &Tensor, gt: &[[f64; 2]], radius: usize) -> Vec<[f64; 2]> {
    assert!(radius >= 1, "detection radius must be at least 1");
    assert_eq!(image.shape().len(), 3, "detect_joints wants [h,w,3]");
    assert_eq!(image.shape()[2], 3, "detect_joints wants [h,w,3]");
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let d = image.data();
    gt.iter()
        .map(|&[gx, gy]| {
            let cy = (gy.round() as i64).clamp(0, h as i64 - 1);
            let cx = (gx.round() as i64).clamp(0, w as i64 - 1);
            let y0 = (cy - radius as i64).max(0) as usize;
            let y1 = ((cy + radius as i64) as usize).min(h - 1);
            let x0 = (cx - radius as i64).max(0) as usize;
            let x1 = ((cx + radius as i64) as usize).min(w - 1);
            let mut best_score = f64::NEG_INFINITY;
            let mut best_d2 = f64::INFINITY;
            let mut best = [0.0, 0.0];
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let base = (y * w + x) * 3;
                    let s = magenta_score(d[base], d[base + 1], d[base + 2]);
                    let dx = x as f64 - gx;
                    let dy = y as f64 - gy;
                    let d2 = dx * dx + dy * dy;
                    if s > best_score || (s == best_score && d2 < best_d2) {
                        best_score = s;
                        best_d2 = d2;
                        best = [x as f64, y as f64];
                    }
                }
            }
            if best_score < DETECT_MIN_SCORE {
                [gx + radius as f64, gy]
            } else {
                best
            }
        })
        .collect()
}

/// Mean Euclidean joint distance in pixels.
pub fn mpjpe_2d(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricError::CountMismatch(pred.len(), gt.len()));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / pred.len() as f64)
}

// ---------------------------------------------------------------------------
// Gaussian statistics and the Frechet distance.

#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Symmetric `[d,d]` covariance (unbiased, 1/(M-1)).
    pub cov: Tensor,
}

pub fn fit_gaussian(features: &Tensor) -> GaussianStats {
    let (m, d) = (features.shape()[0], features.shape()[1]);
    assert!(m >= 1, "cannot fit a Gaussian to zero rows");
    if m <= d {
        eprintln!(
            "fit_gaussian: {} rows for {} dims; covariance is rank-deficient",
            m, d
        );
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in 0..m {
        for j in 0..d {
            mean[j] += x[row * d + j];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let centered = Tensor::new(
        &[m, d],
        (0..m * d).map(|i| x[i] - mean[i % d]).collect(),
    );
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let mut cov = tensor::matmul_tn(&centered, &centered);
    for v in cov.data_mut() {
        *v /= denom;
    }
    GaussianStats { mean, cov }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the matrix whose columns are the eigenvectors.
fn jacobi_eigh(a: &Tensor) -> (Vec<f64>, Tensor) {
    let d = a.shape()[0];
    assert_eq!(a.shape(), [d, d], "jacobi_eigh wants a square matrix");
    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        let mut scale = 1.0f64;
        for p in 0..d {
            scale = scale.max(m[p * d + p].abs());
            for q in p + 1..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= 1e-13 * scale {
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = m[k * d + p];
                    let akq = m[k * d + q];
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = m[p * d + k];
                    let aqk = m[q * d + k];
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, Tensor::new(&[d, d], v))
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// `-PSD_TOL` are an error, ones in `(-PSD_TOL, 0)` clip to zero.
fn sqrtm_psd(a: &Tensor) -> Result<Tensor, MetricError> {
    let (eig, v) = jacobi_eigh(a);
    let d = eig.len();
    let mut roots = Vec::with_capacity(d);
    for &l in &eig {
        if l < -PSD_TOL {
            return Err(MetricError::NonPsd(l));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let vd = v.data();
    let mut b = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vd[i * d + k] * roots[k] * vd[j * d + k];
            }
            b[i * d + j] = acc;
        }
    }
    Ok(Tensor::new(&[d, d], b))
}

/// Frechet distance between two Gaussian summaries:
/// |mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
/// The trace term runs through sqrt(S1) S2 sqrt(S1), which shares its
/// eigenvalues with S1 S2 but stays symmetric. Residue within 1e-9 of zero
/// (the eigen path's rounding either side of an exact zero) snaps to 0.
pub fn fid(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64, MetricError> {
    if s1.mean.len() != s2.mean.len() {
        return Err(MetricError::CountMismatch(s1.mean.len(), s2.mean.len()));
    }
    let d = s1.mean.len();
    let dmu2: f64 = s1.mean.iter().zip(&s2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr = |t: &Tensor| (0..d).map(|i| t.data()[i * d + i]).sum::<f64>();
    let sqrt1 = sqrtm_psd(&s1.cov)?;
    let inner = tensor::matmul(&tensor::matmul(&sqrt1, &s2.cov), &sqrt1);
    let sym = Tensor::new(
        &[d, d],
        (0..d * d)
            .map(|i| {
                let (r, c) = (i / d, i % d);
                0.5 * (inner.data()[r * d + c] + inner.data()[c * d + r])
            })
            .collect(),
    );
    let (eig, _) = jacobi_eigh(&sym);
    let mut tr_sqrt = 0.0;
    for l in eig {
        if l < -PSD_TOL {
            return Err(MetricError::NonPsd(l));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let raw = dmu2 + tr(&s1.cov) + tr(&s2.cov) - 2.0 * tr_sqrt;
    if raw.abs() < 1e-9 {
        Ok(0.0)
    } else {
        Ok(raw.max(0.0))
    }
}

// ---------------------------------------------------------------------------
// Kernel distance.

/// Unbiased squared MMD with the polynomial kernel (x.y/D + 1)^3, summed in
/// plain double-loop order so small sets are reproducible term for term.
pub fn kid(f1: &Tensor, f2: &Tensor) -> Result<f64, MetricError> {
    let (m, d) = (f1.shape()[0], f1.shape()[1]);
    let (n, d2) = (f2.shape()[0], f2.shape()[1]);
    if d != d2 {
        return Err(MetricError::CountMismatch(d, d2));
    }
    if m < 2 || n < 2 {
        return Err(MetricError::TooSmall { need: 2, got: m.min(n) });
    }
    let (x, y) = (f1.data(), f2.data());
    let kern = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let base = dot / d as f64 + 1.0;
        base * base * base
    };
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += kern(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += kern(&y[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            kxy += kern(&x[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}

// ---------------------------------------------------------------------------
// Feature extraction.

/// Pluggable crop featurizer for the distribution metrics.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    /// `crop` is `[CROP_SIZE, CROP_SIZE, 3]`.
    fn extract(&self, crop: &Tensor) -> Vec<f64>;
}

/// Default 64-dim pooled statistics: 4x4 grid of per-channel means (48) plus
/// a magnitude-weighted 16-bin gradient orientation histogram.
pub struct PooledStats;

impl FeatureExtractor for PooledStats {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, crop: &Tensor) -> Vec<f64> {
        assert_eq!(
            crop.shape(),
            [CROP_SIZE, CROP_SIZE, 3],
            "extractor wants a {0}x{0} RGB crop",
            CROP_SIZE
        );
        let cell = CROP_SIZE / 4;
        let d = crop.data();
        let mut out = Vec::with_capacity(FEATURE_DIM);
        for cy in 0..4 {
            for cx in 0..4 {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for y in cy * cell..(cy + 1) * cell {
                        for x in cx * cell..(cx + 1) * cell {
                            acc += d[(y * CROP_SIZE + x) * 3 + ch];
                        }
                    }
                    out.push(acc / (cell * cell) as f64);
                }
            }
        }
        let gray = raster::rgb_to_gray(crop);
        let (gx, gy) = raster::sobel_gradients(&gray);
        let mut hist = [0.0f64; 16];
        for (&dx, &dy) in gx.data().iter().zip(gy.data()) {
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = dy.atan2(dx);
            let bin = (((angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * 16.0)
                .floor() as usize;
            hist[bin.min(15)] += mag;
        }
        let total: f64 = hist.iter().sum::<f64>() + 1e-8;
        out.extend(hist.iter().map(|&v| v / total));
        out
    }
}

/// Extract one feature row per image, resized to the crop size first.
pub fn image_features(images: &[Tensor], extractor: &dyn FeatureExtractor) -> Tensor {
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| extractor.extract(&tensor::resize_bilinear(img, CROP_SIZE, CROP_SIZE)))
        .collect();
    let dim = extractor.dim();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        assert_eq!(r.len(), dim, "extractor emitted a row of the wrong width");
        data.extend(r);
    }
    Tensor::new(&[images.len(), dim], data)
}

/// Crop every non-filler hand box, resize to the crop size, and stack the
/// extracted features: one row per hand across the whole set.
pub fn region_stats(
    images: &[Tensor],
    hands: &[HandParams],
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor, MetricError> {
    if images.len() != hands.len() {
        return Err(MetricError::SetMismatch(images.len(), hands.len()));
    }
    let per_image: Vec<Result<Vec<Vec<f64>>, MetricError>> = images
        .par_iter()
        .zip(hands.par_iter())
        .map(|(img, hp)| {
            let mut rows = Vec::new();
            for slot in 0..NUM_SLOTS {
                if hp.is_filler(slot) {
                    continue;
                }
                let crop = crop_box(img, &hp.boxes[slot])
                    .map_err(|e| MetricError::Crop(e.to_string()))?;
                let resized = tensor::resize_bilinear(&crop, CROP_SIZE, CROP_SIZE);
                rows.push(extractor.extract(&resized));
            }
            Ok(rows)
        })
        .collect();
    let dim = extractor.dim();
    let mut data = Vec::new();
    let mut count = 0usize;
    for res in per_image {
        for row in res? {
            assert_eq!(row.len(), dim, "extractor emitted a row of the wrong width");
            data.extend(row);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::ZeroCrops);
    }
    Ok(Tensor::new(&[count, dim], data))
}

// ---------------------------------------------------------------------------
// End-to-end evaluation.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Paired,
    Unpaired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub count: usize,
    /// Absent in unpaired mode: no pixel ground truth to compare against.
    pub ssim: Option<f64>,
    /// Absent when no sample in the set has a hand.
    pub mpjpe: Option<f64>,
    pub fid: f64,
    pub kid: f64,
    /// Absent when no sample in the set has a hand.
    pub fid_h: Option<f64>,
    pub kid_h: Option<f64>,
}

impl EvalReport {
    /// Plain-text table, one metric per row.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{:.6}", x),
            None => "-".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!("mode    {:?}\n", self.mode));
        out.push_str(&format!("count   {}\n", self.count));
        out.push_str(&format!("ssim    {}\n", fmt(self.ssim)));
        out.push_str(&format!("mpjpe   {}\n", fmt(self.mpjpe)));
        out.push_str(&format!("fid     {:.6}\n", self.fid));
        out.push_str(&format!("kid     {:.6}\n", self.kid));
        out.push_str(&format!("fid_h   {}\n", fmt(self.fid_h)));
        out.push_str(&format!("kid_h   {}\n", fmt(self.kid_h)));
        out
    }
}

/// SSIM guarded by the evaluation mode: unpaired runs have no ground truth,
/// so asking for SSIM there is a contract error, not a zero.
pub fn ssim_in_mode(
    mode: EvalMode,
    a: &Tensor,
    b: &Tensor,
    window: usize,
) -> Result<f64, MetricError> {
    if mode == EvalMode::Unpaired {
        return Err(MetricError::SsimUnavailable);
    }
    ssim(a, b, window)
}

/// Score a generated set against its dataset. Paired mode adds pixel SSIM;
/// both modes compute MPJPE from fiducials plus whole-image and hand-region
/// distribution distances against the dataset's person images.
pub fn evaluate(
    generated: &[Tensor],
    samples: &[SceneSample],
    mode: EvalMode,
    extractor: &dyn FeatureExtractor,
) -> Result<EvalReport, MetricError> {
    if generated.len() != samples.len() {
        return Err(MetricError::SetMismatch(generated.len(), samples.len()));
    }
    if generated.len() < 2 {
        return Err(MetricError::TooSmall { need: 2, got: generated.len() });
    }
    for (i, (g, s)) in generated.iter().zip(samples).enumerate() {
        if g.shape() != s.person.shape() {
            return Err(MetricError::DimMismatch(g.shape().to_vec(), s.person.shape().to_vec()));
        }
        if mode == EvalMode::Paired && s.meta.unpaired {
            return Err(MetricError::NotPaired(i));
        }
    }

    let ssim_val = match mode {
        EvalMode::Paired => {
            let mut acc = 0.0;
            for (g, s) in generated.iter().zip(samples) {
                acc += ssim_in_mode(mode, g, &s.person, SSIM_WINDOW)?;
            }
            Some(acc / generated.len() as f64)
        }
        EvalMode::Unpaired => None,
    };

    let mut joint_errs = Vec::new();
    for (g, s) in generated.iter().zip(samples) {
        for slot in 0..NUM_SLOTS {
            if s.hands.is_filler(slot) {
                continue;
            }
            let gt = &s.hands.joints2d[slot];
            let det = detect_joints(g, gt, DETECT_RADIUS);
            joint_errs.push(mpjpe_2d(&det, gt)?);
        }
    }
    let mpjpe = if joint_errs.is_empty() {
        None
    } else {
        Some(joint_errs.iter().sum::<f64>() / joint_errs.len() as f64)
    };

    let persons: Vec<Tensor> = samples.iter().map(|s| s.person.clone()).collect();
    let hands: Vec<HandParams> = samples.iter().map(|s| s.hands.clone()).collect();
    let gen_feat = image_features(generated, extractor);
    let ref_feat = image_features(&persons, extractor);
    let fid_val = fid(&fit_gaussian(&gen_feat), &fit_gaussian(&ref_feat))?;
    let kid_val = kid(&gen_feat, &ref_feat)?;

    let (fid_h, kid_h) = match (
        region_stats(generated, &hands, extractor),
        region_stats(&persons, &hands, extractor),
    ) {
        (Ok(gf), Ok(rf)) => {
            let f = fid(&fit_gaussian(&gf), &fit_gaussian(&rf))?;
            let k = if gf.shape()[0] >= 2 && rf.shape()[0] >= 2 {
                Some(kid(&gf, &rf)?)
            } else {
                None
            };
            (Some(f), k)
        }
        (Err(MetricError::ZeroCrops), _) | (_, Err(MetricError::ZeroCrops)) => (None, None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };

    Ok(EvalReport {
        mode,
        count: generated.len(),
        ssim: ssim_val,
        mpjpe,
        fid: fid_val,
        kid: kid_val,
        fid_h,
        kid_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, HandCountMode, SceneConfig, FIDUCIAL_RGB};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        for (h, w, win, seed) in [(16, 16, 11, 1u64), (24, 18, 7, 2), (64, 64, 11, 3)] {
            let a = random_image(h, w, seed);
            let v = ssim(&a, &a, win).expect("valid window");
            assert_eq!(v, 1.0, "ssim(a,a) must be exactly 1, got {}", v);
        }
    }

    #[test]
    fn ssim_constant_images_match_the_closed_form() {
        let a = Tensor::zeros(&[20, 20, 3]);
        let b = Tensor::filled(&[20, 20, 3], 1.0);
        let got = ssim(&a, &b, 11).expect("valid window");
        // mu_x=0, mu_y=1, zero variances: (C1*C2)/((1+C1)*C2) = C1/(1+C1).
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!(
            (got - want).abs() < 1e-9,
            "constant-patch ssim {} vs closed form {}",
            got,
            want
        );
    }

    #[test]
    fn ssim_matches_an_independent_reference_loop() {
        // Reference path: per-window renormalized weights and centered
        // covariance sums, numerically distinct from the production path.
        fn ssim_ref(a: &Tensor, b: &Tensor, win: usize) -> f64 {
            let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let half = (win / 2) as f64;
            let mut vals = Vec::new();
            for ch in 0..c {
                for oy in 0..=(h - win) {
                    for ox in 0..=(w - win) {
                        let mut wsum = 0.0;
                        let mut weights = vec![0.0; win * win];
                        for wy in 0..win {
                            for wx in 0..win {
                                let dy = wy as f64 - half;
                                let dx = wx as f64 - half;
                                let g = (-(dy * dy + dx * dx)
                                    / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
                                    .exp();
                                weights[wy * win + wx] = g;
                                wsum += g;
                            }
                        }
                        let px = |t: &Tensor, wy: usize, wx: usize| {
                            t.data()[((oy + wy) * w + ox + wx) * c + ch]
                        };
                        let mut mx = 0.0;
                        let mut my = 0.0;
                        for wy in 0..win {
                            for wx in 0..win {
                                let g = weights[wy * win + wx] / wsum;
                                mx += g * px(a, wy, wx);
                                my += g * px(b, wy, wx);
                            }
                        }
                        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                        for wy in 0..win {
                            for wx in 0..win {
                                let g = weights[wy * win + wx] / wsum;
                                let dx = px(a, wy, wx) - mx;
                                let dy = px(b, wy, wx) - my;
                                vx += g * dx * dx;
                                vy += g * dy * dy;
                                cov += g * dx * dy;
                            }
                        }
                        vals.push(
                            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)),
                        );
                    }
                }
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        }

        for seed in 0..3u64 {
            let a = random_image(24, 24, 10 + seed);
            let b = random_image(24, 24, 20 + seed);
            let got = ssim(&a, &b, 11).expect("valid window");
            let want = ssim_ref(&a, &b, 11);
            assert!(
                (got - want).abs() < 1e-6,
                "seed {}: ssim {} vs reference {}",
                seed,
                got,
                want
            );
        }
    }

    #[test]
    fn ssim_rejects_bad_inputs() {
        let a = Tensor::zeros(&[16, 16, 3]);
        let b = Tensor::zeros(&[16, 17, 3]);
        assert!(matches!(ssim(&a, &b, 11), Err(MetricError::DimMismatch(_, _))));
        assert!(matches!(ssim(&a, &a, 8), Err(MetricError::BadWindow(8))));
        assert!(matches!(ssim(&a, &a, 17), Err(MetricError::BadWindow(17))));
    }

    fn stamp_pixel(img: &mut Tensor, x: usize, y: usize) {
        let w = img.shape()[1];
        img.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&FIDUCIAL_RGB);
    }

    #[test]
    fn detector_finds_exact_shifted_and_missing_fiducials() {
        let gt: Vec<[f64; 2]> = vec![[10.0, 12.0], [30.0, 8.0], [20.0, 25.0]];

        let mut clean = Tensor::filled(&[40, 40, 3], 0.4);
        for j in &gt {
            stamp_pixel(&mut clean, j[0] as usize, j[1] as usize);
        }
        assert_eq!(detect_joints(&clean, &gt, 6), gt, "clean fiducials must detect exactly");

        let mut shifted = Tensor::filled(&[40, 40, 3], 0.4);
        for j in &gt {
            stamp_pixel(&mut shifted, j[0] as usize + 2, j[1] as usize);
        }
        let det = detect_joints(&shifted, &gt, 6);
        for (d, g) in det.iter().zip(&gt) {
            assert_eq!(d[0], g[0] + 2.0, "x must shift by 2");
            assert_eq!(d[1], g[1], "y must not move");
        }

        let mut erased = clean.clone();
        let w = erased.shape()[1];
        let (jx, jy) = (gt[1][0] as usize, gt[1][1] as usize);
        erased.data_mut()[(jy * w + jx) * 3..(jy * w + jx) * 3 + 3].copy_from_slice(&[0.4; 3]);
        let det = detect_joints(&erased, &gt, 6);
        let dist = ((det[1][0] - gt[1][0]).powi(2) + (det[1][1] - gt[1][1]).powi(2)).sqrt();
        assert_eq!(dist, 6.0, "missed joint must land at exactly radius distance");
        assert_eq!(det[0], gt[0], "other joints unaffected");
    }

    #[test]
    fn detector_centers_on_dataset_fiducial_blocks() {
        let cfg = SceneConfig { hands: HandCountMode::Fixed(2), ..SceneConfig::default() };
        let s = generate_scene(91, &cfg);
        for slot in 0..NUM_SLOTS {
            let det = detect_joints(&s.person, &s.hands.joints2d[slot], DETECT_RADIUS);
            assert_eq!(
                mpjpe_2d(&det, &s.hands.joints2d[slot]).unwrap(),
                0.0,
                "slot {} fiducials must recover their own joints exactly",
                slot
            );
        }
    }

    #[test]
    fn mpjpe_shift_gives_the_three_four_five_distance() {
        let gt: Vec<[f64; 2]> = (0..21).map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert_eq!(mpjpe_2d(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<[f64; 2]> = gt.iter().map(|j| [j[0] + 3.0, j[1] + 4.0]).collect();
        assert_eq!(mpjpe_2d(&shifted, &gt).unwrap(), 5.0, "3-4-5 shift must score 5.0");
        let both: Vec<[f64; 2]> = gt.iter().map(|j| [j[0] + 7.0, j[1] - 2.0]).collect();
        let both2: Vec<[f64; 2]> = shifted.iter().map(|j| [j[0] + 7.0, j[1] - 2.0]).collect();
        assert!(
            (mpjpe_2d(&both2, &both).unwrap() - 5.0).abs() < 1e-12,
            "translation of both sets must not change the error"
        );
        assert!(mpjpe_2d(&gt[..5], &gt).is_err(), "count mismatch must fail");
    }

    fn random_features(m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::new(&[m, d], (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn fid_identity_mean_shift_and_scalar_closed_forms() {
        let stats = fit_gaussian(&random_features(40, 6, 5));
        assert_eq!(fid(&stats, &stats).unwrap(), 0.0, "identical stats must give exactly 0");

        let mut shifted = stats.clone();
        for (i, v) in shifted.mean.iter_mut().enumerate() {
            *v += (i + 1) as f64 * 0.1;
        }
        let d2: f64 = (1..=6).map(|i| (i as f64 * 0.1).powi(2)).sum();
        let got = fid(&stats, &shifted).unwrap();
        assert!(
            (got - d2).abs() < 1e-8,
            "equal covariances: fid {} must equal mean shift {}",
            got,
            d2
        );

        // Scalar case: fid = (mu1-mu2)^2 + (sigma1-sigma2)^2 on fitted stats.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut normal = |mu: f64, sd: f64, n: usize| {
            Tensor::new(
                &[n, 1],
                (0..n)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        mu + sd
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect(),
            )
        };
        let s1 = fit_gaussian(&normal(0.3, 1.1, 500));
        let s2 = fit_gaussian(&normal(-0.5, 0.6, 400));
        let (m1, m2) = (s1.mean[0], s2.mean[0]);
        let (sd1, sd2) = (s1.cov.data()[0].sqrt(), s2.cov.data()[0].sqrt());
        let want = (m1 - m2).powi(2) + (sd1 - sd2).powi(2);
        let got = fid(&s1, &s2).unwrap();
        assert!((got - want).abs() < 1e-10, "scalar fid {} vs closed form {}", got, want);
    }

    #[test]
    fn fid_is_symmetric_nonnegative_and_rejects_non_psd() {
        let s1 = fit_gaussian(&random_features(50, 5, 6));
        let s2 = fit_gaussian(&random_features(60, 5, 7));
        let (ab, ba) = (fid(&s1, &s2).unwrap(), fid(&s2, &s1).unwrap());
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-9, "fid must be symmetric: {} vs {}", ab, ba);

        let bad = GaussianStats {
            mean: vec![0.0, 0.0],
            cov: Tensor::new(&[2, 2], vec![-1.0, 0.0, 0.0, 1.0]),
        };
        let bad2 = GaussianStats { mean: vec![0.0, 0.0], cov: bad.cov.clone() };
        assert!(matches!(fid(&bad, &bad2), Err(MetricError::NonPsd(_))));
    }

    #[test]
    fn sqrtm_squares_back_to_the_input() {
        let l = random_features(5, 5, 8);
        let spd = tensor::matmul_nt(&l, &l);
        let root = sqrtm_psd(&spd).unwrap();
        let back = tensor::matmul(&root, &root);
        for (a, b) in back.data().iter().zip(spd.data()) {
            assert!((a - b).abs() < 1e-9, "sqrtm(A)^2 drifted: {} vs {}", a, b);
        }
    }

    #[test]
    fn kid_matches_a_brute_force_loop_bit_for_bit() {
        let f1 = random_features(7, 5, 11);
        let f2 = random_features(9, 5, 12);
        let got = kid(&f1, &f2).unwrap();

        let k = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            (dot / 5.0 + 1.0).powi(3)
        };
        fn row(t: &Tensor, i: usize) -> &[f64] {
            &t.data()[i * 5..(i + 1) * 5]
        }
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    xx += k(row(&f1, i), row(&f1, j));
                }
            }
        }
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    yy += k(row(&f2, i), row(&f2, j));
                }
            }
        }
        for i in 0..7 {
            for j in 0..9 {
                xy += k(row(&f1, i), row(&f2, j));
            }
        }
        let want = xx / 42.0 + yy / 72.0 - 2.0 * xy / 63.0;
        assert_eq!(got, want, "kid must match the plain double loop exactly");

        assert!(matches!(
            kid(&random_features(1, 5, 13), &f2),
            Err(MetricError::TooSmall { .. })
        ));
    }

    #[test]
    fn kid_near_zero_for_two_samples_of_one_distribution() {
        let f1 = random_features(200, 8, 21);
        let f2 = random_features(200, 8, 22);
        let v = kid(&f1, &f2).unwrap();
        assert!(v.abs() < 0.01, "same-distribution kid {} should be below 0.01", v);
    }

    #[test]
    fn region_stats_counts_crops_and_identical_sets_score_zero() {
        let mk = |seed, n| {
            generate_scene(
                seed,
                &SceneConfig { hands: HandCountMode::Fixed(n), ..SceneConfig::default() },
            )
        };
        let scenes = [mk(70, 2), mk(71, 1), mk(72, 0), mk(73, 2)];
        let images: Vec<Tensor> = scenes.iter().map(|s| s.person.clone()).collect();
        let hands: Vec<HandParams> = scenes.iter().map(|s| s.hands.clone()).collect();
        let feats = region_stats(&images, &hands, &PooledStats).unwrap();
        assert_eq!(feats.shape(), [5, FEATURE_DIM], "2+1+0+2 hands must give 5 rows");

        let f = fid(&fit_gaussian(&feats), &fit_gaussian(&feats)).unwrap();
        assert_eq!(f, 0.0, "identical crop sets must give fid exactly 0");

        let handless = [mk(74, 0), mk(75, 0)];
        let imgs: Vec<Tensor> = handless.iter().map(|s| s.person.clone()).collect();
        let hps: Vec<HandParams> = handless.iter().map(|s| s.hands.clone()).collect();
        assert!(matches!(
            region_stats(&imgs, &hps, &PooledStats),
            Err(MetricError::ZeroCrops)
        ));
    }

    #[test]
    fn extractor_always_emits_sixty_four_dims() {
        let crop = random_image(CROP_SIZE, CROP_SIZE, 31);
        assert_eq!(PooledStats.extract(&crop).len(), FEATURE_DIM);
        assert_eq!(PooledStats.dim(), FEATURE_DIM);
    }

    #[test]
    fn evaluate_perfect_generation_scores_its_fixed_points() {
        let cfg = SceneConfig::default();
        let samples: Vec<_> = (0..4).map(|i| generate_scene(300 + i, &cfg)).collect();
        let generated: Vec<Tensor> = samples.iter().map(|s| s.person.clone()).collect();
        let report = evaluate(&generated, &samples, EvalMode::Paired, &PooledStats).unwrap();
        assert_eq!(report.ssim, Some(1.0), "perfect generation must score ssim exactly 1");
        assert_eq!(report.fid, 0.0, "identical sets must score fid 0");
        if let Some(m) = report.mpjpe {
            assert_eq!(m, 0.0, "fiducials at ground truth must give mpjpe 0");
        }
        assert_eq!(report.count, 4);

        let text = report.render_table();
        assert!(text.contains("ssim"), "table must mention ssim: {}", text);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report, "report JSON must round-trip");
    }

    #[test]
    fn unpaired_mode_refuses_ssim_and_paired_rejects_unpaired_samples() {
        let cfg = SceneConfig::default();
        let mut samples: Vec<_> = (0..3).map(|i| generate_scene(320 + i, &cfg)).collect();
        let generated: Vec<Tensor> = samples.iter().map(|s| s.person.clone()).collect();

        let report = evaluate(&generated, &samples, EvalMode::Unpaired, &PooledStats).unwrap();
        assert_eq!(report.ssim, None, "unpaired report must omit ssim");

        let a = &samples[0].person.clone();
        assert!(matches!(
            ssim_in_mode(EvalMode::Unpaired, a, a, SSIM_WINDOW),
            Err(MetricError::SsimUnavailable)
        ));

        samples[1].meta.unpaired = true;
        assert!(matches!(
            evaluate(&generated, &samples, EvalMode::Paired, &PooledStats),
            Err(MetricError::NotPaired(1))
        ));
    }
}
