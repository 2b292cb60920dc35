//! Sample generation: the single-model sampler and the alternating
//! dual-model sampler in which two disjointly-trained models execute the
//! denoising steps of one trajectory in turns.
//!
//! Both samplers consume identical noise streams under equal seeds: each
//! trajectory draws from its own substream keyed by `seed ^ sample_index`,
//! so alternation changes only which model predicts, never the noise.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ancestral_from_eps, ddim_jump_from_eps, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{new_rng, normal_tensor};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Single,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Ancestral,
    Deterministic,
}

/// Which model takes the first (t = T) step of a dual trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartParity {
    AFirst,
    BFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub mode: SamplerMode,
    pub step_kind: StepKind,
    pub start_parity: StartParity,
    pub n_samples: usize,
    pub dim: usize,
    pub seed: u64,
    /// Per-sample condition tokens (length n_samples), or none.
    pub cond_tokens: Option<Vec<u32>>,
}

impl SamplerPlan {
    pub fn unconditional(mode: SamplerMode, step_kind: StepKind, n_samples: usize, dim: usize, seed: u64) -> SamplerPlan {
        SamplerPlan {
            mode,
            step_kind,
            start_parity: StartParity::AFirst,
            n_samples,
            dim,
            seed,
            cond_tokens: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.dim == 0 {
            return Err(Error::Config("sampler needs n_samples >= 1 and dim >= 1".into()));
        }
        if let Some(tokens) = &self.cond_tokens {
            if tokens.len() != self.n_samples {
                return Err(Error::Config(format!(
                    "cond_tokens length {} != n_samples {}",
                    tokens.len(),
                    self.n_samples
                )));
            }
        }
        Ok(())
    }

    fn cond(&self, i: usize) -> Option<u32> {
        self.cond_tokens.as_ref().map(|t| t[i])
    }
}

/// Runs the trajectories with a per-timestep model selector. `pick(t)`
/// returns which of the two models acts at timestep t (single mode always
/// routes to the first).
fn run_trajectories(
    models: (&dyn DynPredictor, &dyn DynPredictor),
    pick: &dyn Fn(usize) -> usize,
    sched: &NoiseSchedule,
    plan: &SamplerPlan,
) -> Result<Vec<Tensor>> {
    plan.validate()?;
    let t_steps = sched.t_steps();
    let mut rngs: Vec<ChaCha8Rng> = (0..plan.n_samples)
        .map(|i| new_rng(plan.seed ^ i as u64))
        .collect();
    let mut xs: Vec<Tensor> = rngs
        .iter_mut()
        .map(|rng| normal_tensor(vec![plan.dim], rng))
        .collect();
    let conds: Vec<Option<u32>> = (0..plan.n_samples).map(|i| plan.cond(i)).collect();

    for t in (1..=t_steps).rev() {
        let model = if pick(t) == 0 { models.0 } else { models.1 };
        let eps = model.predict_batch_dyn(&xs, t, &conds)?;
        for i in 0..xs.len() {
            xs[i] = match plan.step_kind {
                StepKind::Ancestral => {
                    ancestral_from_eps(&xs[i], t, &eps[i], sched, &mut rngs[i])?
                }
                StepKind::Deterministic => ddim_jump_from_eps(&xs[i], t, t - 1, &eps[i], sched)?,
            };
        }
    }
    Ok(xs)
}

/// Object-safe adapter over NoisePredictor so single and dual sampling share
/// one trajectory loop.
trait DynPredictor {
    fn predict_batch_dyn(&self, xs: &[Tensor], t: usize, conds: &[Option<u32>]) -> Result<Vec<Tensor>>;
}

impl<M: NoisePredictor> DynPredictor for M {
    fn predict_batch_dyn(&self, xs: &[Tensor], t: usize, conds: &[Option<u32>]) -> Result<Vec<Tensor>> {
        self.predict_batch(xs, t, conds)
    }
}

/// Generate a batch with one model: start from pure noise at t = T and step
/// down to t = 0 with the plan's step kind.
pub fn single_sample(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    plan: &SamplerPlan,
) -> Result<Vec<Tensor>> {
    if plan.mode != SamplerMode::Single {
        return Err(Error::Config("plan.mode must be single".into()));
    }
    run_trajectories((model, model), &|_| 0, sched, plan)
}

/// Generate a batch with two models alternating per timestep; the start
/// parity fixes which model acts at t = T.
pub fn dual_sample(
    model_a: &impl NoisePredictor,
    model_b: &impl NoisePredictor,
    sched: &NoiseSchedule,
    plan: &SamplerPlan,
) -> Result<Vec<Tensor>> {
    if plan.mode != SamplerMode::Dual {
        return Err(Error::Config("plan.mode must be dual".into()));
    }
    let t_steps = sched.t_steps();
    let first = match plan.start_parity {
        StartParity::AFirst => 0usize,
        StartParity::BFirst => 1,
    };
    let pick = move |t: usize| (first + (t_steps - t)) % 2;
    run_trajectories((model_a, model_b), &pick, sched, plan)
}
