//! Training loops: standard denoiser training on one member subset,
//! alternating teacher-student distillation over the disjoint halves, and
//! the Monte-Carlo generalization-gap estimate that quantifies member
//! advantage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, LabeledSample};
use crate::denoiser::Denoiser;
use crate::diffusion::diffuse;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{new_rng, normal_tensor};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate from `lr` down to this value over the
    /// run; `None` keeps it constant.
    pub lr_final: Option<f64>,
    pub seed: u64,
    /// Pass condition tokens during training (requires a conditional arch
    /// and a dataset with tokens).
    pub conditional: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(f) = self.lr_final {
            if !(f.is_finite() && f >= 0.0 && f <= self.lr) {
                return Err(Error::Config(format!(
                    "lr_final {f} must lie in [0, lr = {}]",
                    self.lr
                )));
            }
        }
        Ok(())
    }

    /// Learning rate for iteration `iter` of `self.iterations`.
    fn lr_at(&self, iter: usize) -> f64 {
        match self.lr_final {
            None => self.lr,
            Some(f) => {
                // Cosine half-period; the final iteration lands near f.
                let frac = if self.iterations <= 1 {
                    1.0
                } else {
                    iter as f64 / (self.iterations - 1) as f64
                };
                f + 0.5 * (self.lr - f) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Denoiser,
    /// Per-iteration batch loss.
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub model: Denoiser,
    pub loss_trace: Vec<f64>,
    /// Iteration counts routed to each member subset (parity audit).
    pub d1_batches: usize,
    pub d2_batches: usize,
}

/// Per-epoch condition-token assignment: each sample with more than one
/// synonymous token uniformly resamples among them once per epoch.
struct TokenPlan {
    iters_per_epoch: usize,
    current: Vec<Option<u32>>,
    epoch: usize,
}

impl TokenPlan {
    fn new(n_samples: usize, batch_size: usize, conditional: bool) -> TokenPlan {
        let iters_per_epoch = n_samples.div_ceil(batch_size).max(1);
        TokenPlan {
            iters_per_epoch,
            current: vec![None; if conditional { n_samples } else { 0 }],
            epoch: usize::MAX,
        }
    }

    fn refresh(&mut self, iter: usize, samples: &[&LabeledSample], rng: &mut impl Rng) {
        if self.current.is_empty() {
            return;
        }
        let epoch = iter / self.iters_per_epoch;
        if epoch == self.epoch {
            return;
        }
        self.epoch = epoch;
        for (slot, s) in self.current.iter_mut().zip(samples) {
            *slot = match s.tokens.len() {
                0 => None,
                1 => Some(s.tokens[0]),
                n => Some(s.tokens[rng.random_range(0..n)]),
            };
        }
    }

    fn token(&self, sample_idx: usize) -> Option<u32> {
        self.current.get(sample_idx).copied().flatten()
    }
}

fn draw_batch(
    samples: &[&LabeledSample],
    tokens: &TokenPlan,
    sched: &NoiseSchedule,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Tensor>, Vec<usize>, Vec<Option<u32>>, Vec<Tensor>)> {
    let mut xts = Vec::with_capacity(batch_size);
    let mut ts = Vec::with_capacity(batch_size);
    let mut conds = Vec::with_capacity(batch_size);
    let mut eps = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.random_range(0..samples.len());
        let s = samples[idx];
        let t = rng.random_range(1..=sched.t_steps());
        let e = normal_tensor(s.x0.shape().to_vec(), rng);
        let xt = diffuse(&s.x0, t, &e, sched)?;
        xts.push(xt);
        ts.push(t);
        conds.push(tokens.token(idx));
        eps.push(e);
    }
    Ok((xts, ts, conds, eps))
}

fn check_finite(loss: f64, iter: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { iteration: iter, loss });
    }
    Ok(())
}

/// Train a denoiser to predict the added noise (standard objective),
/// deterministic given `cfg.seed`.
pub fn train_ddpm(
    model: &Denoiser,
    data: &[&LabeledSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    let mut model = model.clone();
    let mut rng = new_rng(cfg.seed);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut tokens = TokenPlan::new(data.len(), cfg.batch_size, cfg.conditional);
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        opt.set_lr(cfg.lr_at(iter));
        tokens.refresh(iter, data, &mut rng);
        let (xts, ts, conds, eps) = draw_batch(data, &tokens, sched, cfg.batch_size, &mut rng)?;
        let (loss, grads) = model.loss_and_grads(&xts, &ts, &conds, &eps)?;
        check_finite(loss, iter)?;
        opt.update(&mut model, &grads)?;
        loss_trace.push(loss);
    }
    Ok(TrainOutcome { model, loss_trace })
}

/// Alternating distillation: even iterations draw from D1 and distill from
/// the teacher trained on D2; odd iterations mirror it. Teacher outputs are
/// constants (no gradient reaches the teachers).
pub fn train_distillmd(
    teacher1: &Denoiser,
    teacher2: &Denoiser,
    split: &DatasetSplit,
    student: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if teacher1.arch().input_dim != student.arch().input_dim
        || teacher2.arch().input_dim != student.arch().input_dim
    {
        return Err(Error::InvalidArch(
            "teacher/student input dimensions must match".into(),
        ));
    }
    let d1 = split.d1();
    let d2 = split.d2();
    if d1.is_empty() || d2.is_empty() {
        return Err(Error::EmptyInput("both member subsets must be nonempty".into()));
    }

    let mut student = student.clone();
    let mut rng = new_rng(cfg.seed);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let n_members = d1.len() + d2.len();
    let mut tokens1 = TokenPlan::new(d1.len(), cfg.batch_size, cfg.conditional);
    let mut tokens2 = TokenPlan::new(d2.len(), cfg.batch_size, cfg.conditional);
    // Epoch length counts the full member set, shared by both subsets.
    let shared_epoch = n_members.div_ceil(cfg.batch_size).max(1);
    tokens1.iters_per_epoch = shared_epoch;
    tokens2.iters_per_epoch = shared_epoch;

    let t1 = teacher1.to_f64();
    let t2 = teacher2.to_f64();
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let (mut d1_batches, mut d2_batches) = (0usize, 0usize);

    for iter in 0..cfg.iterations {
        opt.set_lr(cfg.lr_at(iter));
        tokens1.refresh(iter, &d1, &mut rng);
        tokens2.refresh(iter, &d2, &mut rng);
        let even = iter % 2 == 0;
        let (pool, tokens, teacher) = if even {
            d1_batches += 1;
            (&d1, &tokens1, &t2)
        } else {
            d2_batches += 1;
            (&d2, &tokens2, &t1)
        };
        let (xts, ts, conds, _) = draw_batch(pool, tokens, sched, cfg.batch_size, &mut rng)?;
        let xs64: Vec<Vec<f64>> = xts
            .iter()
            .map(|x| x.data().iter().map(|&v| v as f64).collect())
            .collect();
        let targets: Vec<Vec<f64>> = xs64
            .iter()
            .zip(&ts)
            .zip(&conds)
            .map(|((x, &t), &c)| teacher.forward(x, t, c))
            .collect::<Result<_>>()?;
        let (loss, grads) = student.loss_and_grads64(&xs64, &ts, &conds, &targets)?;
        check_finite(loss, iter)?;
        opt.update(&mut student, &grads)?;
        loss_trace.push(loss);
    }
    Ok(DistillOutcome { model: student, loss_trace, d1_batches, d2_batches })
}

/// Monte-Carlo estimate of the member/non-member denoising-loss gap with a
/// clustered standard error (per-sample means are the units).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub se: f64,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub n_mc: usize,
}

impl GapEstimate {
    /// Whether the gap is indistinguishable from zero at three standard
    /// errors.
    pub fn within_noise(&self) -> bool {
        self.gap.abs() <= 3.0 * self.se
    }
}

fn sample_mean_losses(
    model: &Denoiser,
    set: &[&LabeledSample],
    sched: &NoiseSchedule,
    n_mc: usize,
    conditional: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let net = model.to_f64();
    let mut means = Vec::with_capacity(set.len());
    for s in set {
        let cond = if conditional { s.tokens.first().copied() } else { None };
        let mut acc = 0.0;
        for _ in 0..n_mc {
            let t = rng.random_range(1..=sched.t_steps());
            let e = normal_tensor(s.x0.shape().to_vec(), rng);
            let xt = diffuse(&s.x0, t, &e, sched)?;
            let x64: Vec<f64> = xt.data().iter().map(|&v| v as f64).collect();
            let pred = net.forward(&x64, t, cond)?;
            // Unsquared norm: the gap objective measures expected distance.
            let dist: f64 = pred
                .iter()
                .zip(e.data())
                .map(|(p, &ev)| (p - ev as f64) * (p - ev as f64))
                .sum::<f64>()
                .sqrt();
            acc += dist;
        }
        means.push(acc / n_mc as f64);
    }
    Ok(means)
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Estimate E[loss(member)] - E[loss(nonmember)] with `n_mc` (t, noise)
/// draws per sample; negative gaps mean members fit better.
pub fn generalization_gap(
    model: &Denoiser,
    members: &[&LabeledSample],
    nonmembers: &[&LabeledSample],
    sched: &NoiseSchedule,
    n_mc: usize,
    conditional: bool,
    seed: u64,
) -> Result<GapEstimate> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyInput("gap estimate needs both sets nonempty".into()));
    }
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be >= 1".into()));
    }
    let mut rng = new_rng(seed);
    let member_losses = sample_mean_losses(model, members, sched, n_mc, conditional, &mut rng)?;
    let nonmember_losses = sample_mean_losses(model, nonmembers, sched, n_mc, conditional, &mut rng)?;
    let (m_mean, m_var) = mean_and_var(&member_losses);
    let (n_mean, n_var) = mean_and_var(&nonmember_losses);
    let se = (m_var / member_losses.len() as f64 + n_var / nonmember_losses.len() as f64).sqrt();
    Ok(GapEstimate {
        gap: m_mean - n_mean,
        se,
        member_mean: m_mean,
        nonmember_mean: n_mean,
        n_mc,
    })
}
