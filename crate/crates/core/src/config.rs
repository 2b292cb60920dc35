//! Experiment configuration: the TOML schema, validation, and the
//! budget-parity rule that makes defense arms comparable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::denoiser::Arch;
use crate::error::{Error, Result};
use crate::sampler::StepKind;
use crate::schedule::NoiseSchedule;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defense {
    None,
    Dualmd,
    Distillmd,
}

impl Defense {
    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Dualmd => "dualmd",
            Defense::Distillmd => "distillmd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl ArchConfig {
    pub fn build(&self, dataset: &DatasetSpec, schedule: &ScheduleConfig) -> Arch {
        Arch {
            input_dim: dataset.dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            num_conditions: dataset.num_conditions(),
            t_steps: schedule.t_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate down to this value; absent keeps it
    /// constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_final: Option<f64>,
}

impl TrainParams {
    pub fn build(&self, seed: u64, conditional: bool) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_final: self.lr_final,
            seed,
            conditional,
        }
    }
}

fn default_n_samples() -> usize {
    1000
}

fn default_step_kind() -> StepKind {
    StepKind::Ancestral
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_step_kind")]
    pub step_kind: StepKind,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { n_samples: default_n_samples(), step_kind: default_step_kind() }
    }
}

fn default_n_mc() -> usize {
    5
}

fn default_stride() -> usize {
    1
}

fn default_k() -> usize {
    1
}

/// One attack to run against the arm's target model. Optional timestep
/// parameters fall back to the documented defaults; a missing `t_sec`
/// sweeps the grid and keeps the strongest attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackConfig {
    Loss {
        #[serde(default)]
        t_list: Option<Vec<usize>>,
        #[serde(default = "default_n_mc")]
        n_mc: usize,
    },
    Secmi {
        #[serde(default)]
        t_sec: Option<usize>,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    Blackbox {
        #[serde(default = "default_k")]
        k: usize,
    },
}

impl AttackConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Loss { .. } => "loss",
            AttackConfig::Secmi { .. } => "secmi",
            AttackConfig::Blackbox { .. } => "blackbox",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub defense: Defense,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleConfig,
    pub arch: ArchConfig,
    pub train: TrainParams,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    /// Memorization radius override; derived from the dataset when absent.
    #[serde(default)]
    pub memorization_eps: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "name {:?} must be nonempty and filesystem-safe ([a-zA-Z0-9_-])",
                self.name
            )));
        }
        self.dataset.validate()?;
        self.schedule.build()?;
        self.arch.build(&self.dataset, &self.schedule).validate()?;
        if self.train.iterations == 0 {
            return Err(Error::Config("train.iterations must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", self.train.lr)));
        }
        if let Some(f) = self.train.lr_final {
            if !(f.is_finite() && f >= 0.0 && f <= self.train.lr) {
                return Err(Error::Config(format!(
                    "train.lr_final {f} must lie in [0, train.lr = {}]",
                    self.train.lr
                )));
            }
        }
        if self.sampling.n_samples == 0 {
            return Err(Error::Config("sampling.n_samples must be >= 1".into()));
        }
        for attack in &self.attacks {
            match attack {
                AttackConfig::Loss { t_list, n_mc } => {
                    if *n_mc == 0 {
                        return Err(Error::Config("loss attack n_mc must be >= 1".into()));
                    }
                    if let Some(list) = t_list {
                        if list.is_empty() {
                            return Err(Error::Config("loss attack t_list must be nonempty".into()));
                        }
                        for &t in list {
                            if t < 1 || t > self.schedule.t_steps {
                                return Err(Error::Config(format!(
                                    "loss attack t {t} outside 1..={}",
                                    self.schedule.t_steps
                                )));
                            }
                        }
                    }
                }
                AttackConfig::Secmi { t_sec, stride } => {
                    if *stride == 0 {
                        return Err(Error::Config("secmi stride must be >= 1".into()));
                    }
                    if let Some(t) = t_sec {
                        if *t < 1 || *t >= self.schedule.t_steps {
                            return Err(Error::Config(format!(
                                "secmi t_sec {t} outside 1..{}",
                                self.schedule.t_steps
                            )));
                        }
                    }
                }
                AttackConfig::Blackbox { k } => {
                    if *k == 0 {
                        return Err(Error::Config("blackbox k must be >= 1".into()));
                    }
                }
            }
        }
        if let Some(eps) = self.memorization_eps {
            if !(eps > 0.0) {
                return Err(Error::Config(format!("memorization_eps {eps} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config render: {e}")))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Everything that must agree for two arms to be comparable: identical
    /// data, budget, and seeds; only the defense (and name/output) differ.
    pub fn comparability_key(&self) -> impl PartialEq + std::fmt::Debug {
        (
            self.master_seed,
            self.dataset.clone(),
            self.schedule.clone(),
            self.arch.clone(),
            self.train.clone(),
            self.sampling.clone(),
            self.attacks.clone(),
        )
    }

    /// Budget parity is enforced, not advisory: arms with mismatched data,
    /// training budget, or attack suites cannot be compared.
    pub fn check_comparable(&self, other: &ExperimentConfig) -> Result<()> {
        if self.comparability_key() != other.comparability_key() {
            return Err(Error::Config(format!(
                "arms {:?} and {:?} differ in dataset/schedule/arch/train/attacks; \
                 compared arms must share everything except the defense",
                self.name, other.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Generator;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            master_seed: 1,
            output_dir: PathBuf::from("runs/tiny"),
            defense: Defense::None,
            dataset: DatasetSpec {
                generator: Generator::GaussianMixtureRing,
                n_member: 8,
                n_test: 8,
                dim: 2,
                n_classes: 8,
                sigma: 0.5,
                conditional: false,
                diversification_k: 1,
                duplication: None,
            },
            schedule: ScheduleConfig { t_steps: 10, beta_start: 1e-3, beta_end: 0.2 },
            arch: ArchConfig { hidden: vec![16, 16], embed_dim: 8 },
            train: TrainParams { iterations: 50, batch_size: 8, lr: 1e-3, lr_final: None },
            sampling: SamplingConfig { n_samples: 16, step_kind: StepKind::Ancestral },
            attacks: vec![
                AttackConfig::Secmi { t_sec: Some(5), stride: 1 },
                AttackConfig::Loss { t_list: None, n_mc: 2 },
                AttackConfig::Blackbox { k: 1 },
            ],
            memorization_eps: None,
        }
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = tiny_config();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = tiny_config();
        let mut text = cfg.to_toml_string().unwrap();
        text.push_str("\nunknown_key = 3\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn defaults_fill_sampling_and_attacks() {
        let text = r#"
            name = "defaults"
            master_seed = 7
            output_dir = "runs/defaults"
            defense = "none"

            [dataset]
            generator = "gaussian-mixture-ring"
            n_member = 8
            n_test = 8
            dim = 2
            n_classes = 8
            sigma = 0.5
            conditional = false
            diversification_k = 1

            [schedule]
            t_steps = 10
            beta_start = 0.001
            beta_end = 0.2

            [arch]
            hidden = [16]
            embed_dim = 8

            [train]
            iterations = 10
            batch_size = 4
            lr = 0.001
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.sampling, SamplingConfig::default());
        assert_eq!(cfg.sampling.n_samples, 1000);
        assert!(cfg.attacks.is_empty());
        assert_eq!(cfg.memorization_eps, None);
    }

    #[test]
    fn attack_tables_parse_with_defaults() {
        let mut text = tiny_config().to_toml_string().unwrap();
        text.push_str("\n[[attacks]]\nkind = \"secmi\"\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(
            cfg.attacks.last().unwrap(),
            &AttackConfig::Secmi { t_sec: None, stride: 1 }
        );
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut bad_name = tiny_config();
        bad_name.name = "../escape".into();
        assert!(bad_name.validate().is_err());

        let mut zero_iters = tiny_config();
        zero_iters.train.iterations = 0;
        assert!(zero_iters.validate().is_err());

        let mut bad_t = tiny_config();
        bad_t.attacks = vec![AttackConfig::Secmi { t_sec: Some(10), stride: 1 }];
        assert!(bad_t.validate().is_err());

        let mut bad_eps = tiny_config();
        bad_eps.memorization_eps = Some(0.0);
        assert!(bad_eps.validate().is_err());
    }

    #[test]
    fn comparability_requires_shared_budget() {
        let base = tiny_config();
        let mut distill = base.clone();
        distill.name = "tiny-distill".into();
        distill.defense = Defense::Distillmd;
        base.check_comparable(&distill).unwrap();

        let mut cheater = distill.clone();
        cheater.train.iterations = 25;
        assert!(base.check_comparable(&cheater).is_err());

        let mut other_data = distill.clone();
        other_data.dataset.sigma = 0.3;
        assert!(base.check_comparable(&other_data).is_err());
    }
}
