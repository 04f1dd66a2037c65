//! Diffusion noise schedule: forward noising and one-step clean-latent
//! recovery. Linear beta schedule, 0-indexed timesteps.

use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("timestep count must be at least 1")]
    EmptySchedule,
    #[error("beta bounds must satisfy 0 < start <= end < 1, got {start} .. {end}")]
    BadBetaBounds { start: f64, end: f64 },
    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("latent shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
}

/// Linear-beta DDPM schedule. `alpha_bars[t]` is the running product of
/// `1 - beta` up to and including `t`, strictly decreasing in `(0,1)`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_count: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    if t_count == 0 {
        return Err(ScheduleError::EmptySchedule);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::BadBetaBounds { start: beta_start, end: beta_end });
    }
    let mut betas = Vec::with_capacity(t_count);
    let mut alpha_bars = Vec::with_capacity(t_count);
    let mut prod = 1.0;
    for t in 0..t_count {
        let frac = if t_count == 1 { 0.0 } else { t as f64 / (t_count - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { t_count, betas, alpha_bars })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<(), ScheduleError> {
        if t >= self.t_count {
            return Err(ScheduleError::TimestepOutOfRange { t, len: self.t_count });
        }
        Ok(())
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn add_noise(
    z0: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(ScheduleError::ShapeMismatch {
            a: z0.shape().to_vec(),
            b: eps.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bars[t];
    let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |a, b| cs * a + cn * b))
}

/// `(z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`, the one-step
/// clean-latent estimate.
pub fn predict_z0(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    sched.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(ScheduleError::ShapeMismatch {
            a: z_t.shape().to_vec(),
            b: eps_hat.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bars[t];
    let (cs, cn) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| cs * z - cn * e))
}

/// Graph version of [`predict_z0`]; linear in both tensor inputs, so the edge
/// loss can differentiate through the clean-latent estimate.
pub fn predict_z0_var(
    g: &mut Graph,
    z_t: VarId,
    eps_hat: VarId,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<VarId, ScheduleError> {
    sched.check_t(t)?;
    let (za, ea) = (g.shape(z_t).to_vec(), g.shape(eps_hat).to_vec());
    if za != ea {
        return Err(ScheduleError::ShapeMismatch { a: za, b: ea });
    }
    let ab = sched.alpha_bars[t];
    let zs = g.scale(z_t, 1.0 / ab.sqrt());
    let es = g.scale(eps_hat, (1.0 - ab).sqrt() / ab.sqrt());
    Ok(g.sub(zs, es))
}

/// One ancestral posterior step from `t` down to `t_prev < t`, treating the
/// intervening betas as a single effective step. With `t_prev = t - 1` this is
/// the textbook DDPM posterior with variance `beta_t * (1-abar_{t-1})/(1-abar_t)`.
pub fn posterior_step(
    z_t: &Tensor,
    z0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor, ScheduleError> {
    sched.check_t(t)?;
    sched.check_t(t_prev)?;
    assert!(t_prev < t, "posterior step must move toward t=0");
    if z_t.shape() != z0_hat.shape() || z_t.shape() != noise.shape() {
        return Err(ScheduleError::ShapeMismatch {
            a: z_t.shape().to_vec(),
            b: z0_hat.shape().to_vec(),
        });
    }
    let ab_t = sched.alpha_bars[t];
    let ab_p = sched.alpha_bars[t_prev];
    let alpha_eff = ab_t / ab_p;
    let beta_eff = 1.0 - alpha_eff;
    let c0 = ab_p.sqrt() * beta_eff / (1.0 - ab_t);
    let ct = alpha_eff.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let var = (1.0 - ab_p) / (1.0 - ab_t) * beta_eff;
    let sd = var.max(0.0).sqrt();
    let mut out = z0_hat.scale(c0);
    out.add_assign(&z_t.scale(ct));
    out.add_assign(&noise.scale(sd));
    Ok(out)
}

/// Sinusoidal timestep features: `dim/2` sines then `dim/2` cosines over a
/// geometric frequency ladder from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding width must be even, got {dim}");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let angle = t as f64 * 10000f64.powf(-exponent);
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}
