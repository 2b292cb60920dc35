//! Membership-inference scoring functions and the attack runner.
//!
//! Every scorer declares which direction means "member" instead of assuming
//! a sign convention; the metrics layer consumes that declaration.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::LabeledSample;
use crate::diffusion::{
    compose_reverse, ddim_denoise_step, ddim_reverse_step, diffuse, NoisePredictor,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, new_rng, normal_tensor};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Score sign convention declared by the producing attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    LowerMeansMember,
    HigherMeansMember,
}

impl Orientation {
    pub fn flipped(self) -> Self {
        match self {
            Orientation::LowerMeansMember => Orientation::HigherMeansMember,
            Orientation::HigherMeansMember => Orientation::LowerMeansMember,
        }
    }
}

/// Per-sample attack scores for both membership roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScores {
    pub attack: String,
    pub orientation: Orientation,
    pub params: Value,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
}

impl AttackScores {
    pub fn check(&self) -> Result<()> {
        if self.member_scores.is_empty() || self.nonmember_scores.is_empty() {
            return Err(Error::EmptyInput(format!(
                "attack {} produced an empty score list",
                self.attack
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|s| s.is_finite());
        if !finite(&self.member_scores) || !finite(&self.nonmember_scores) {
            return Err(Error::NonFinite(format!("attack {} scores", self.attack)));
        }
        Ok(())
    }

    /// Same scores viewed under the opposite sign convention.
    pub fn flipped(&self) -> Self {
        Self {
            orientation: self.orientation.flipped(),
            ..self.clone()
        }
    }
}

/// Default timestep grid for the loss attack: ten evenly spaced timesteps
/// `ceil(T/10)*j` clamped to T, deduplicated for very short schedules.
pub fn default_loss_t_list(t_steps: usize) -> Vec<usize> {
    let step = t_steps.div_ceil(10).max(1);
    let mut list: Vec<usize> = (1..=10).map(|j| (step * j).min(t_steps)).collect();
    list.dedup();
    list
}

/// White-box loss attack: mean squared noise-prediction error over a fixed
/// timestep grid and `n_mc` fresh noise draws per timestep. Lower means
/// member.
pub fn denoising_loss_score(
    model: &impl NoisePredictor,
    x0: &Tensor,
    cond: Option<u32>,
    sched: &NoiseSchedule,
    t_list: &[usize],
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if t_list.is_empty() {
        return Err(Error::Config("loss attack t_list must be nonempty".into()));
    }
    if n_mc == 0 {
        return Err(Error::Config("loss attack n_mc must be >= 1".into()));
    }
    let mut total = 0.0;
    for &t in t_list {
        sched.check_t(t)?;
        for _ in 0..n_mc {
            let eps = normal_tensor(x0.shape().to_vec(), rng);
            let x_t = diffuse(x0, t, &eps, sched)?;
            let pred = model.predict(&x_t, t, cond)?;
            total += pred.sq_dist(&eps)?;
        }
    }
    Ok(total / (t_list.len() * n_mc) as f64)
}

/// SecMI t-error: deterministically reverse `x0` to level `t_sec`, take one
/// reverse step up and one denoise step back, and return the squared
/// round-trip distance. Lower means member.
pub fn secmi_score(
    model: &impl NoisePredictor,
    x0: &Tensor,
    cond: Option<u32>,
    sched: &NoiseSchedule,
    t_sec: usize,
    stride: usize,
) -> Result<f64> {
    // t_sec + 1 must still be a valid timestep for the up-step.
    if t_sec < 1 || t_sec >= sched.t_steps() {
        return Err(Error::TimestepOutOfRange {
            t: t_sec,
            min: 1,
            max: sched.t_steps().saturating_sub(1),
        });
    }
    let x_tilde = compose_reverse(model, x0, t_sec, sched, stride, cond)?;
    let up = ddim_reverse_step(model, &x_tilde, t_sec, sched, cond)?;
    let back = ddim_denoise_step(model, &up, t_sec + 1, sched, cond)?;
    back.sq_dist(&x_tilde)
}

/// Black-box attack: mean Euclidean distance from the target to its `k`
/// nearest generated samples (k = 1 gives the plain minimum distance).
/// Lower means member.
pub fn blackbox_distance_score(generated: &[Tensor], target: &Tensor, k: usize) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyInput("black-box attack needs generated samples".into()));
    }
    if k == 0 {
        return Err(Error::Config("black-box attack k must be >= 1".into()));
    }
    let mut dists = Vec::with_capacity(generated.len());
    for g in generated {
        dists.push(target.sq_dist(g)?.sqrt());
    }
    dists.sort_by(f64::total_cmp);
    let k = k.min(dists.len());
    Ok(dists[..k].iter().sum::<f64>() / k as f64)
}

/// Applies a scorer to every sample of both sets under a fixed seed plan.
///
/// The per-sample seed depends only on the attack name and the sample's
/// index within its list, never on the membership role, so swapping the two
/// input sets swaps the two output lists exactly.
pub fn run_attack<F>(
    scorer: F,
    attack: &str,
    orientation: Orientation,
    params: Value,
    members: &[&LabeledSample],
    nonmembers: &[&LabeledSample],
    master_seed: u64,
) -> Result<AttackScores>
where
    F: Fn(&LabeledSample, u64) -> Result<f64>,
{
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyInput(format!("attack {attack} needs both sets nonempty")));
    }
    let stage = format!("attack:{attack}");
    let score_set = |set: &[&LabeledSample]| -> Result<Vec<f64>> {
        set.iter()
            .enumerate()
            .map(|(i, s)| {
                let score = scorer(s, derive_seed(master_seed, &stage, i as u64))?;
                if !score.is_finite() {
                    return Err(Error::NonFinite(format!("attack {attack}, sample {i}")));
                }
                Ok(score)
            })
            .collect()
    };
    let scores = AttackScores {
        attack: attack.to_string(),
        orientation,
        params,
        member_scores: score_set(members)?,
        nonmember_scores: score_set(nonmembers)?,
    };
    scores.check()?;
    Ok(scores)
}

/// Convenience seed-to-rng bridge for scorers that consume randomness.
pub fn scorer_rng(seed: u64) -> crate::rng::SeededRng {
    new_rng(seed)
}
