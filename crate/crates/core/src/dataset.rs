//! Toy dataset generators and the disjoint member split that the defenses
//! train on. Members and non-members are drawn i.i.d. from the same
//! distribution; an optional duplication spec plants a repeated sample for
//! memorization experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{new_rng, standard_normal};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianMixtureRing,
    SwissRoll2d,
    Checkerboard2d,
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::GaussianMixtureRing => "gaussian-mixture-ring",
            Generator::SwissRoll2d => "swiss-roll-2d",
            Generator::Checkerboard2d => "checkerboard-2d",
        }
    }

    pub fn parse(name: &str) -> Result<Generator> {
        match name {
            "gaussian-mixture-ring" => Ok(Generator::GaussianMixtureRing),
            "swiss-roll-2d" => Ok(Generator::SwissRoll2d),
            "checkerboard-2d" => Ok(Generator::Checkerboard2d),
            other => Err(Error::Config(format!("unknown generator {other:?}"))),
        }
    }
}

/// Plants `copies` total copies of the member sample at `index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationSpec {
    pub index: usize,
    pub copies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub n_member: usize,
    pub n_test: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Mode/cluster spread.
    pub sigma: f64,
    pub conditional: bool,
    /// Synonymous condition tokens per class (only used when conditional).
    pub diversification_k: usize,
    pub duplication: Option<DuplicationSpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_member < 2 {
            return Err(Error::Config("n_member must be >= 2".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be >= 1".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        match self.generator {
            Generator::GaussianMixtureRing => {
                if self.dim < 2 {
                    return Err(Error::Config("gaussian-mixture-ring needs dim >= 2".into()));
                }
            }
            Generator::SwissRoll2d | Generator::Checkerboard2d => {
                if self.dim != 2 {
                    return Err(Error::Config(format!(
                        "{} is strictly 2-dimensional",
                        self.generator.name()
                    )));
                }
            }
        }
        if self.conditional && self.diversification_k == 0 {
            return Err(Error::Config("diversification_k must be >= 1 when conditional".into()));
        }
        if let Some(dup) = &self.duplication {
            if dup.index >= self.n_member {
                return Err(Error::Config(format!(
                    "duplication index {} out of range for {} members",
                    dup.index, self.n_member
                )));
            }
            if dup.copies == 0 {
                return Err(Error::Config("duplication copies must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Condition vocabulary size implied by the spec (classes x synonyms).
    pub fn num_conditions(&self) -> Option<u32> {
        if self.conditional {
            Some((self.n_classes * self.diversification_k) as u32)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x0: Tensor,
    /// Class the generator assigned (present even for unconditional data;
    /// used for stratified splits).
    pub label: Option<u32>,
    /// Synonymous condition tokens this sample may train under; empty for
    /// unconditional datasets.
    pub tokens: Vec<u32>,
    pub member: bool,
}

/// Draw a standard normal truncated to the 4-sigma ball, so every generated
/// point is within 4 sigma of its center by construction.
fn truncated_normal_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm_sq: f64 = z.iter().map(|v| v * v).sum();
        if norm_sq <= 16.0 {
            return z;
        }
    }
}

fn class_tokens(spec: &DatasetSpec, class: u32) -> Vec<u32> {
    if spec.conditional {
        let k = spec.diversification_k as u32;
        (class * k..(class + 1) * k).collect()
    } else {
        Vec::new()
    }
}

fn ring_sample(spec: &DatasetSpec, rng: &mut impl Rng) -> (Vec<f64>, u32) {
    const RADIUS: f64 = 2.0;
    let class = rng.random_range(0..spec.n_classes) as u32;
    let angle = std::f64::consts::TAU * class as f64 / spec.n_classes as f64;
    let mut x = vec![0.0; spec.dim];
    x[0] = RADIUS * angle.cos();
    x[1] = RADIUS * angle.sin();
    let z = truncated_normal_vec(spec.dim, rng);
    for (xi, zi) in x.iter_mut().zip(z) {
        *xi += spec.sigma * zi;
    }
    (x, class)
}

fn swiss_roll_sample(spec: &DatasetSpec, rng: &mut impl Rng) -> (Vec<f64>, u32) {
    let (t_min, t_max) = (1.5 * std::f64::consts::PI, 4.5 * std::f64::consts::PI);
    let u: f64 = rng.random();
    let t = t_min + u * (t_max - t_min);
    let scale = 2.0 / t_max;
    let z = truncated_normal_vec(2, rng);
    let x = vec![
        scale * t * t.cos() + spec.sigma * z[0],
        scale * t * t.sin() + spec.sigma * z[1],
    ];
    let class = (((t - t_min) / (t_max - t_min) * spec.n_classes as f64) as usize)
        .min(spec.n_classes - 1) as u32;
    (x, class)
}

fn checkerboard_sample(spec: &DatasetSpec, rng: &mut impl Rng) -> (Vec<f64>, u32) {
    // The 8 even-parity unit cells of the 4x4 grid over [-2, 2)^2.
    let cells: Vec<(i32, i32)> = (-2..2)
        .flat_map(|i| (-2..2).map(move |j| (i, j)))
        .filter(|(i, j)| (i + j) % 2 == 0)
        .collect();
    let idx = rng.random_range(0..cells.len());
    let (ci, cj) = cells[idx];
    let x = vec![
        ci as f64 + rng.random::<f64>(),
        cj as f64 + rng.random::<f64>(),
    ];
    (x, (idx % spec.n_classes) as u32)
}

/// Generate the full sample list: `n_member` members followed by `n_test`
/// non-members, all i.i.d., then any configured duplicates of a member.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = new_rng(seed);
    let mut draw = |member: bool| {
        let (x, class) = match spec.generator {
            Generator::GaussianMixtureRing => ring_sample(spec, &mut rng),
            Generator::SwissRoll2d => swiss_roll_sample(spec, &mut rng),
            Generator::Checkerboard2d => checkerboard_sample(spec, &mut rng),
        };
        LabeledSample {
            x0: Tensor::from_vec(x.into_iter().map(|v| v as f32).collect()),
            label: Some(class),
            tokens: class_tokens(spec, class),
            member,
        }
    };
    let mut samples = Vec::with_capacity(spec.n_member + spec.n_test);
    for _ in 0..spec.n_member {
        samples.push(draw(true));
    }
    for _ in 0..spec.n_test {
        samples.push(draw(false));
    }
    if let Some(dup) = &spec.duplication {
        let original = samples[dup.index].clone();
        for _ in 1..dup.copies {
            samples.push(original.clone());
        }
    }
    Ok(samples)
}

/// Index sets of the disjoint member partition plus the untouched test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub all_samples: Vec<LabeledSample>,
    pub d1_indices: Vec<usize>,
    pub d2_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn d1(&self) -> Vec<&LabeledSample> {
        self.d1_indices.iter().map(|&i| &self.all_samples[i]).collect()
    }

    pub fn d2(&self) -> Vec<&LabeledSample> {
        self.d2_indices.iter().map(|&i| &self.all_samples[i]).collect()
    }

    pub fn members(&self) -> Vec<&LabeledSample> {
        self.d1_indices
            .iter()
            .chain(&self.d2_indices)
            .map(|&i| &self.all_samples[i])
            .collect()
    }

    pub fn nonmembers(&self) -> Vec<&LabeledSample> {
        self.test_indices.iter().map(|&i| &self.all_samples[i]).collect()
    }

    fn check(&self) -> Result<()> {
        let mut seen = vec![false; self.all_samples.len()];
        for &i in self.d1_indices.iter().chain(&self.d2_indices).chain(&self.test_indices) {
            if seen[i] {
                return Err(Error::Config(format!("index {i} assigned twice in split")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Uniformly random balanced partition of the members into D1/D2,
/// deterministic given the seed. With `stratified` set, per-class counts in
/// the two halves differ by at most one.
pub fn split_disjoint(samples: &[LabeledSample], seed: u64, stratified: bool) -> Result<DatasetSplit> {
    let member_idx: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.member)
        .map(|(i, _)| i)
        .collect();
    let test_indices: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.member)
        .map(|(i, _)| i)
        .collect();
    if member_idx.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "need at least 2 member samples to split, have {}",
            member_idx.len()
        )));
    }

    let mut rng = new_rng(seed);
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    if stratified {
        let mut classes: Vec<Option<u32>> = member_idx.iter().map(|&i| samples[i].label).collect();
        classes.sort_unstable();
        classes.dedup();
        // Odd-sized classes alternate which half receives the extra sample.
        let mut extra_to_d1 = true;
        for class in classes {
            let mut pool: Vec<usize> = member_idx
                .iter()
                .copied()
                .filter(|&i| samples[i].label == class)
                .collect();
            pool.shuffle(&mut rng);
            let mut half = pool.len() / 2;
            if pool.len() % 2 == 1 {
                if extra_to_d1 {
                    half += 1;
                }
                extra_to_d1 = !extra_to_d1;
            }
            d1.extend_from_slice(&pool[..half]);
            d2.extend_from_slice(&pool[half..]);
        }
        d1.sort_unstable();
        d2.sort_unstable();
    } else {
        let mut pool = member_idx.clone();
        pool.shuffle(&mut rng);
        let half = pool.len().div_ceil(2);
        d1 = pool[..half].to_vec();
        d2 = pool[half..].to_vec();
        d1.sort_unstable();
        d2.sort_unstable();
    }

    let mut warnings = Vec::new();
    if d1.len() <= 1 || d2.len() <= 1 {
        warnings.push(format!(
            "degenerate split: |D1| = {}, |D2| = {} (fine-tuning regime)",
            d1.len(),
            d2.len()
        ));
    }
    let split = DatasetSplit {
        all_samples: samples.to_vec(),
        d1_indices: d1,
        d2_indices: d2,
        test_indices,
        warnings,
    };
    split.check()?;
    Ok(split)
}
