//! Forward diffusion, ancestral sampling steps, and the deterministic
//! reverse/denoise steps used for round-trip reconstruction errors.
//!
//! All maps here are pure given their inputs; the only randomness is the
//! caller-supplied generator consumed by `ancestral_step`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// A noise predictor `eps(x_t, t, c)`. Implemented by the trained denoiser
/// and by closed-form stand-ins in tests.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: usize, cond: Option<u32>) -> Result<Tensor>;

    /// Batched prediction; the default just loops. Trained models override
    /// this to amortize parameter setup across a batch.
    fn predict_batch(&self, xs: &[Tensor], t: usize, conds: &[Option<u32>]) -> Result<Vec<Tensor>> {
        xs.iter()
            .zip(conds.iter())
            .map(|(x, &c)| self.predict(x, t, c))
            .collect()
    }
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Tensor,
{
    fn predict(&self, x: &Tensor, t: usize, _cond: Option<u32>) -> Result<Tensor> {
        Ok(self(x, t))
    }
}

/// Forward diffusion: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| (sa * x as f64 + sb * e as f64) as f32)
}

/// Mean of the one-step denoising posterior:
/// `(x_t - ((1 - alpha_t) / sqrt(1 - abar_t)) eps_pred) / sqrt(alpha_t)`.
pub fn posterior_mean(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    // Cannot occur under schedule invariants; guards the division below.
    if ab >= 1.0 {
        return Err(Error::InvalidSchedule(format!("alpha_bar_{t} = {ab} >= 1")));
    }
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    x_t.zip_map(eps_pred, |x, e| {
        (inv_sqrt_alpha * (x as f64 - coef * e as f64)) as f32
    })
}

/// Estimate of the clean sample implied by a noise prediction:
/// `(x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, |x, e| ((x as f64 - sb * e as f64) / sa) as f32)
}

/// One ancestral DDPM step given a precomputed noise prediction. Adds
/// `sqrt(beta_t) z` for t > 1 and no noise at the final step.
pub fn ancestral_from_eps(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut out = posterior_mean(x_t, t, eps_pred, sched)?;
    if t > 1 {
        let sigma = sched.beta(t).sqrt();
        for v in out.data_mut() {
            *v = (*v as f64 + sigma * standard_normal(rng)) as f32;
        }
    }
    Ok(out)
}

/// One ancestral DDPM step `x_t -> x_{t-1}` using the model's prediction.
pub fn ancestral_step(
    model: &impl NoisePredictor,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<u32>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let eps = model.predict(x_t, t, cond)?;
    ancestral_from_eps(x_t, t, &eps, sched, rng)
}

/// Deterministic jump between noise levels given a prediction made at
/// `from_level`: `sqrt(abar_to) f + sqrt(1 - abar_to) eps` where
/// `f = (x - sqrt(1 - abar_from) eps) / sqrt(abar_from)`.
///
/// `from_level` 0 means clean data (`abar = 1`, so `f = x` exactly).
pub fn ddim_jump_from_eps(
    x: &Tensor,
    from_level: usize,
    to_level: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let ab_from = sched.alpha_bar_level(from_level);
    let ab_to = sched.alpha_bar_level(to_level);
    let (sa_from, sb_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sb_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    x.zip_map(eps_pred, |x, e| {
        let f = (x as f64 - sb_from * e as f64) / sa_from;
        (sa_to * f + sb_to * e as f64) as f32
    })
}

/// Model timestep used when stepping away from a noise level: level 0 has no
/// valid timestep, so the boundary step queries the model at t = 1.
fn model_t_for_level(level: usize) -> usize {
    level.max(1)
}

/// Deterministic reverse step `x_t -> x_{t+1}` (adds one level of noise).
pub fn ddim_reverse_step(
    model: &impl NoisePredictor,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<u32>,
) -> Result<Tensor> {
    if t < 1 || t + 1 > sched.t_steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 1,
            max: sched.t_steps().saturating_sub(1),
        });
    }
    let eps = model.predict(x_t, t, cond)?;
    ddim_jump_from_eps(x_t, t, t + 1, &eps, sched)
}

/// Deterministic denoise step `x_t -> x_{t-1}`.
pub fn ddim_denoise_step(
    model: &impl NoisePredictor,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    cond: Option<u32>,
) -> Result<Tensor> {
    if t < 2 || t > sched.t_steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 2,
            max: sched.t_steps(),
        });
    }
    let eps = model.predict(x_t, t, cond)?;
    ddim_jump_from_eps(x_t, t, t - 1, &eps, sched)
}

/// Step plan for a strided deterministic traversal from `from` to `to`.
/// Levels move by `stride` with the final step clamped at the target, so a
/// traversal from 0 to `t` costs `ceil(t / stride)` model evaluations.
fn level_plan(from: usize, to: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut plan = Vec::new();
    let mut cur = from;
    while cur != to {
        let next = if to > cur {
            (cur + stride).min(to)
        } else {
            cur.saturating_sub(stride).max(to)
        };
        plan.push((cur, next));
        cur = next;
    }
    plan
}

/// Deterministic reverse process: carries a clean sample up to noise level
/// `t_target` by iterated reverse steps of size `stride`.
pub fn compose_reverse(
    model: &impl NoisePredictor,
    x0: &Tensor,
    t_target: usize,
    sched: &NoiseSchedule,
    stride: usize,
    cond: Option<u32>,
) -> Result<Tensor> {
    sched.check_t(t_target)?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut x = x0.clone();
    for (from, to) in level_plan(0, t_target, stride) {
        let eps = model.predict(&x, model_t_for_level(from), cond)?;
        x = ddim_jump_from_eps(&x, from, to, &eps, sched)?;
    }
    Ok(x)
}

/// Deterministic denoise process: carries a noisy sample at level `t_start`
/// all the way down to a clean sample at level 0.
pub fn compose_denoise(
    model: &impl NoisePredictor,
    x_t: &Tensor,
    t_start: usize,
    sched: &NoiseSchedule,
    stride: usize,
    cond: Option<u32>,
) -> Result<Tensor> {
    sched.check_t(t_start)?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut x = x_t.clone();
    for (from, to) in level_plan(t_start, 0, stride) {
        let eps = model.predict(&x, model_t_for_level(from), cond)?;
        x = ddim_jump_from_eps(&x, from, to, &eps, sched)?;
    }
    Ok(x)
}
