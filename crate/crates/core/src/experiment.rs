//! End-to-end experiment orchestration: train the configured defense arm,
//! generate samples, run the attack suite, compute metrics, and write the
//! run manifest. Every random choice derives from the config's master seed,
//! so identical configs reproduce identical metric blocks byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use crate::attacks::{
    blackbox_distance_score, default_loss_t_list, denoising_loss_score, run_attack, secmi_score,
    AttackScores, Orientation,
};
use crate::checkpoint::save_checkpoint;
use crate::config::{AttackConfig, Defense, ExperimentConfig};
use crate::dataset::{gen_dataset, split_disjoint, DatasetSplit, LabeledSample};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::io::{atomic_write, loss_trace_csv, sha256_hex, write_sample_block};
use crate::manifest::{
    AttackReport, FileRef, MetricsBlock, RunManifest, RunStatus, MANIFEST_VERSION,
};
use crate::metrics::{
    auc, default_memorization_eps, energy_distance, memorization_detection,
    memorization_fraction, roc_report,
};
use crate::rng::{derive_seed, new_rng};
use crate::sampler::{dual_sample, single_sample, SamplerMode, SamplerPlan, StartParity};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::{generalization_gap, train_ddpm, train_distillmd, TrainOutcome};

/// Default SecMI sweep grid: the first four timesteps, where the t-error
/// signal concentrates on heavily overfit small models, plus roughly twenty
/// evenly spaced timesteps strictly below T (the reverse step needs
/// t_sec + 1 <= T).
pub fn default_secmi_sweep(t_steps: usize) -> Vec<usize> {
    let step = t_steps.div_ceil(20).max(1);
    let mut grid: Vec<usize> = (1..=4).filter(|&t| t < t_steps).collect();
    grid.extend((1..).map(|j| j * step).take_while(|&t| t < t_steps));
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Checkpoint role white-box attacks target for an arm. The none/distillmd
/// arms deploy a single model. DualMD deploys a pipeline, not one model; its
/// white-box exposure is a disjoint teacher (which saw half the members), so
/// teacher1 stands in as the target.
pub fn deployed_role(defense: Defense) -> &'static str {
    match defense {
        Defense::None => "baseline",
        Defense::Distillmd => "student",
        Defense::Dualmd => "teacher1",
    }
}

/// Sampling plan an arm uses for its generated batch: dual trajectories for
/// dualmd, single otherwise, with condition tokens cycling over classes.
pub fn sampling_plan(cfg: &ExperimentConfig) -> SamplerPlan {
    let cond_tokens = if cfg.dataset.conditional {
        let k = cfg.dataset.diversification_k;
        Some(
            (0..cfg.sampling.n_samples)
                .map(|i| ((i % cfg.dataset.n_classes) * k) as u32)
                .collect::<Vec<u32>>(),
        )
    } else {
        None
    };
    SamplerPlan {
        mode: if cfg.defense == Defense::Dualmd { SamplerMode::Dual } else { SamplerMode::Single },
        step_kind: cfg.sampling.step_kind,
        start_parity: StartParity::AFirst,
        n_samples: cfg.sampling.n_samples,
        dim: cfg.dataset.dim,
        seed: derive_seed(cfg.master_seed, "sample", 0),
        cond_tokens,
    }
}

struct StageClock<'a> {
    timings: &'a mut BTreeMap<String, f64>,
}

impl StageClock<'_> {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(out)
    }
}

/// Runs the full pipeline for one arm. On any stage failure the partially
/// filled manifest is still written, marked failed, before the error
/// propagates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    atomic_write(&cfg.output_dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;

    let mut manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        status: RunStatus::Failed,
        failure: None,
        config: cfg.clone(),
        checkpoints: BTreeMap::new(),
        samples: BTreeMap::new(),
        attacks: Vec::new(),
        metrics: MetricsBlock::default(),
        timings_s: BTreeMap::new(),
    };
    let manifest_path = cfg.output_dir.join("manifest.json");
    match execute(cfg, &mut manifest) {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            manifest.save(&manifest_path)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.failure = Some(e.to_string());
            // Best effort: the failure itself is what we report.
            let _ = manifest.save(&manifest_path);
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> Result<()> {
    let sched = cfg.schedule.build()?;
    let arch = cfg.arch.build(&cfg.dataset, &cfg.schedule);
    let conditional = cfg.dataset.conditional;
    let mut timings = BTreeMap::new();
    let mut clock = StageClock { timings: &mut timings };

    let data = clock.time("gen-data", || {
        gen_dataset(&cfg.dataset, derive_seed(cfg.master_seed, "data", 0))
    })?;
    let members: Vec<&LabeledSample> = data.iter().filter(|s| s.member).collect();
    let nonmembers: Vec<&LabeledSample> = data.iter().filter(|s| !s.member).collect();

    // Training roles. Teacher/student seeds are fixed per role so arms
    // sharing a master seed train bit-identical teachers.
    let init = Denoiser::init(arch.clone(), derive_seed(cfg.master_seed, "init", 0))?;
    let train_cfg = |role_ix: u64| {
        cfg.train.build(derive_seed(cfg.master_seed, "train", role_ix), conditional)
    };
    let mut save_model = |role: &str, trained: &TrainOutcome| -> Result<()> {
        let file = format!("{role}.ckpt");
        let hash = save_checkpoint(&trained.model, &cfg.output_dir.join(&file))?;
        manifest.checkpoints.insert(role.to_string(), FileRef { path: file, sha256: hash });
        if !trained.loss_trace.is_empty() {
            atomic_write(
                &cfg.output_dir.join(format!("loss_{role}.csv")),
                loss_trace_csv(&trained.loss_trace).as_bytes(),
            )?;
        }
        Ok(())
    };

    let mut split: Option<DatasetSplit> = None;
    let mut models: BTreeMap<&'static str, Denoiser> = BTreeMap::new();
    match cfg.defense {
        Defense::None => {
            let baseline = clock.time("train-baseline", || {
                train_ddpm(&init, &members, &sched, &train_cfg(0))
            })?;
            save_model("baseline", &baseline)?;
            models.insert("baseline", baseline.model);
        }
        Defense::Dualmd | Defense::Distillmd => {
            let s = split_disjoint(&data, derive_seed(cfg.master_seed, "split", 0), conditional)?;
            let teacher1 = clock.time("train-teacher1", || {
                train_ddpm(&init, &s.d1(), &sched, &train_cfg(1))
            })?;
            let teacher2 = clock.time("train-teacher2", || {
                train_ddpm(&init, &s.d2(), &sched, &train_cfg(2))
            })?;
            save_model("teacher1", &teacher1)?;
            save_model("teacher2", &teacher2)?;
            if cfg.defense == Defense::Distillmd {
                let student = clock.time("train-student", || {
                    train_distillmd(
                        &teacher1.model,
                        &teacher2.model,
                        &s,
                        &init,
                        &sched,
                        &train_cfg(3),
                    )
                })?;
                save_model("student", &TrainOutcome {
                    model: student.model.clone(),
                    loss_trace: student.loss_trace.clone(),
                })?;
                models.insert("student", student.model);
            }
            models.insert("teacher1", teacher1.model);
            models.insert("teacher2", teacher2.model);
            split = Some(s);
        }
    }

    let target: &Denoiser = &models[deployed_role(cfg.defense)];

    // Sample generation under the arm's inference rule.
    let plan = sampling_plan(cfg);
    let generated = clock.time("sample", || match cfg.defense {
        Defense::Dualmd => dual_sample(&models["teacher1"], &models["teacher2"], &sched, &plan),
        Defense::Distillmd => single_sample(&models["student"], &sched, &plan),
        Defense::None => single_sample(&models["baseline"], &sched, &plan),
    })?;
    let samples_hash = write_sample_block(&cfg.output_dir.join("samples.bin"), &generated)?;
    manifest
        .samples
        .insert("samples".into(), FileRef { path: "samples.bin".into(), sha256: samples_hash });
    let sidecar = serde_json::to_vec_pretty(&serde_json::json!({
        "plan": plan,
        "model_hashes": manifest.checkpoints,
    }))?;
    atomic_write(&cfg.output_dir.join("samples.json"), &sidecar)?;
    manifest.samples.insert(
        "samples-sidecar".into(),
        FileRef { path: "samples.json".into(), sha256: sha256_hex(&sidecar) },
    );

    // Attack suite against the target model / generated batch.
    for attack_cfg in &cfg.attacks {
        let scores = clock.time(&format!("attack-{}", attack_cfg.name()), || {
            run_configured_attack(attack_cfg, cfg, target, &generated, &members, &nonmembers, &sched)
        })?;
        let roc = roc_report(&scores)?;
        let csv_file = format!("attack_{}_roc.csv", scores.attack);
        atomic_write(&cfg.output_dir.join(&csv_file), roc.points_csv().as_bytes())?;
        atomic_write(
            &cfg.output_dir.join(format!("attack_{}_scores.json", scores.attack)),
            &serde_json::to_vec_pretty(&scores)?,
        )?;
        manifest.attacks.push(AttackReport {
            attack: scores.attack.clone(),
            params: scores.params.clone(),
            scores,
            roc,
            roc_csv: csv_file,
        });
    }

    // Quality and memorization metrics.
    let member_x0: Vec<Tensor> = members.iter().map(|s| s.x0.clone()).collect();
    let heldout_x0: Vec<Tensor> = nonmembers.iter().map(|s| s.x0.clone()).collect();
    manifest.metrics.energy_distance =
        Some(clock.time("energy-distance", || energy_distance(&generated, &heldout_x0))?);
    let eps = match cfg.memorization_eps {
        Some(e) => e,
        None => default_memorization_eps(&member_x0)?,
    };
    manifest.metrics.memorization_eps = Some(eps);
    manifest.metrics.memorization_fraction = Some(clock.time("memorization-fraction", || {
        memorization_fraction(&generated, &member_x0, eps)
    })?);

    if cfg.dataset.duplication.is_some() {
        manifest.metrics.memorization_detection =
            Some(clock.time("memorization-detection", || {
                let (memorized, clean) = duplication_sets(cfg, &members)?;
                memorization_detection(
                    target,
                    &memorized,
                    &clean,
                    &sched,
                    cfg.schedule.t_steps / 2,
                    conditional,
                )
            })?);
    }

    if let Some(s) = &split {
        manifest.metrics.teacher_cross_gaps = Some(clock.time("teacher-gaps", || {
            let gap1 = generalization_gap(
                &models["teacher1"],
                &s.d2(),
                &nonmembers,
                &sched,
                20,
                conditional,
                derive_seed(cfg.master_seed, "gap", 1),
            )?;
            let gap2 = generalization_gap(
                &models["teacher2"],
                &s.d1(),
                &nonmembers,
                &sched,
                20,
                conditional,
                derive_seed(cfg.master_seed, "gap", 2),
            )?;
            Ok(vec![gap1, gap2])
        })?);
    }

    manifest.timings_s = timings;
    Ok(())
}

/// Memorized set: copies of the duplicated sample. Clean set: members that
/// differ from it, one per distinct point. Both capped at 32 for the ROC.
fn duplication_sets<'a>(
    cfg: &ExperimentConfig,
    members: &[&'a LabeledSample],
) -> Result<(Vec<&'a LabeledSample>, Vec<&'a LabeledSample>)> {
    let dup = cfg
        .dataset
        .duplication
        .as_ref()
        .ok_or_else(|| Error::Config("duplication sets need a duplication spec".into()))?;
    let target = members
        .get(dup.index)
        .ok_or_else(|| Error::Config(format!("duplication index {} out of range", dup.index)))?;
    let is_copy = |s: &LabeledSample| s.x0.data() == target.x0.data();
    let memorized: Vec<&LabeledSample> =
        members.iter().filter(|s| is_copy(s)).take(32).copied().collect();
    let clean: Vec<&LabeledSample> =
        members.iter().filter(|s| !is_copy(s)).take(32).copied().collect();
    if memorized.is_empty() || clean.is_empty() {
        return Err(Error::Config("duplication experiment needs both sets nonempty".into()));
    }
    Ok((memorized, clean))
}

/// Runs one configured attack against `target` (white-box attacks) or the
/// `generated` batch (black-box), scoring the given member/non-member sets.
pub fn run_configured_attack(
    attack_cfg: &AttackConfig,
    cfg: &ExperimentConfig,
    target: &Denoiser,
    generated: &[Tensor],
    members: &[&LabeledSample],
    nonmembers: &[&LabeledSample],
    sched: &NoiseSchedule,
) -> Result<AttackScores> {
    let conditional = cfg.dataset.conditional;
    let cond_of = move |s: &LabeledSample| -> Option<u32> {
        if conditional {
            s.tokens.first().copied()
        } else {
            None
        }
    };
    match attack_cfg {
        AttackConfig::Loss { t_list, n_mc } => {
            let t_list =
                t_list.clone().unwrap_or_else(|| default_loss_t_list(sched.t_steps()));
            let n_mc = *n_mc;
            let params = serde_json::json!({ "t_list": t_list, "n_mc": n_mc });
            run_attack(
                |s: &LabeledSample, seed: u64| {
                    denoising_loss_score(
                        target,
                        &s.x0,
                        cond_of(s),
                        sched,
                        &t_list,
                        n_mc,
                        &mut new_rng(seed),
                    )
                },
                "loss",
                Orientation::LowerMeansMember,
                params,
                members,
                nonmembers,
                cfg.master_seed,
            )
        }
        AttackConfig::Secmi { t_sec, stride } => {
            let stride = *stride;
            let secmi_at = |t: usize, name: &str| -> Result<AttackScores> {
                run_attack(
                    |s: &LabeledSample, _seed: u64| {
                        secmi_score(target, &s.x0, cond_of(s), sched, t, stride)
                    },
                    name,
                    Orientation::LowerMeansMember,
                    serde_json::json!({ "t_sec": t, "stride": stride }),
                    members,
                    nonmembers,
                    cfg.master_seed,
                )
            };
            match t_sec {
                Some(t) => secmi_at(*t, "secmi"),
                None => {
                    // Sweep and keep the strongest attacker: the
                    // conservative choice when evaluating a defense.
                    let grid = default_secmi_sweep(sched.t_steps());
                    let mut best: Option<(f64, usize, AttackScores)> = None;
                    for &t in &grid {
                        let scores = secmi_at(t, "secmi")?;
                        let a = auc(&scores)?;
                        if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                            best = Some((a, t, scores));
                        }
                    }
                    let (_, t, mut scores) =
                        best.ok_or_else(|| Error::Config("empty secmi sweep grid".into()))?;
                    scores.params = serde_json::json!({
                        "t_sec": t, "stride": stride, "swept": true, "grid": grid,
                    });
                    Ok(scores)
                }
            }
        }
        AttackConfig::Blackbox { k } => {
            let k = *k;
            run_attack(
                |s: &LabeledSample, _seed: u64| blackbox_distance_score(generated, &s.x0, k),
                "blackbox",
                Orientation::LowerMeansMember,
                serde_json::json!({ "k": k, "n_generated": generated.len() }),
                members,
                nonmembers,
                cfg.master_seed,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        ArchConfig, AttackConfig, SamplingConfig, ScheduleConfig, TrainParams,
    };
    use crate::dataset::{DatasetSpec, DuplicationSpec, Generator};
    use crate::sampler::StepKind;
    use std::path::Path;
    use tempfile::tempdir;

    fn quick_config(dir: &Path, defense: Defense) -> ExperimentConfig {
        ExperimentConfig {
            name: format!("quick-{}", defense.name()),
            master_seed: 5,
            output_dir: dir.join(defense.name()),
            defense,
            dataset: DatasetSpec {
                generator: Generator::GaussianMixtureRing,
                n_member: 8,
                n_test: 8,
                dim: 2,
                n_classes: 4,
                sigma: 0.5,
                conditional: false,
                diversification_k: 1,
                duplication: None,
            },
            schedule: ScheduleConfig { t_steps: 10, beta_start: 1e-3, beta_end: 0.2 },
            arch: ArchConfig { hidden: vec![16, 16], embed_dim: 8 },
            train: TrainParams { iterations: 60, batch_size: 8, lr: 1e-3, lr_final: None },
            sampling: SamplingConfig { n_samples: 12, step_kind: StepKind::Ancestral },
            attacks: vec![
                AttackConfig::Secmi { t_sec: Some(5), stride: 1 },
                AttackConfig::Loss { t_list: Some(vec![2, 5, 8]), n_mc: 2 },
                AttackConfig::Blackbox { k: 1 },
            ],
            memorization_eps: None,
        }
    }

    #[test]
    fn baseline_arm_produces_complete_manifest() {
        let dir = tempdir().unwrap();
        let cfg = quick_config(dir.path(), Defense::None);
        let manifest = run_experiment(&cfg).unwrap();
        assert_eq!(manifest.status, RunStatus::Complete);
        assert_eq!(manifest.checkpoints.len(), 1);
        assert!(manifest.checkpoints.contains_key("baseline"));
        assert_eq!(manifest.attacks.len(), 3);
        assert!(manifest.metrics.energy_distance.is_some());
        assert!(manifest.metrics.memorization_fraction.is_some());
        assert!(manifest.metrics.teacher_cross_gaps.is_none());
        manifest.verify_files(&cfg.output_dir).unwrap();
        // Every attack row has its ROC CSV on disk.
        for report in &manifest.attacks {
            assert!(cfg.output_dir.join(&report.roc_csv).exists());
        }
    }

    #[test]
    fn distillmd_arm_records_three_checkpoints_with_distinct_hashes() {
        let dir = tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), Defense::Distillmd);
        cfg.attacks = vec![AttackConfig::Secmi { t_sec: Some(5), stride: 1 }];
        let manifest = run_experiment(&cfg).unwrap();
        assert_eq!(manifest.checkpoints.len(), 3);
        let hashes: std::collections::BTreeSet<&str> = manifest
            .checkpoints
            .values()
            .map(|f| f.sha256.as_str())
            .collect();
        assert_eq!(hashes.len(), 3, "checkpoint hashes must be distinct");
        assert_eq!(manifest.attacks.len(), 1);
        assert!(manifest.metrics.teacher_cross_gaps.is_some());
    }

    #[test]
    fn dualmd_arm_samples_with_both_models() {
        let dir = tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), Defense::Dualmd);
        cfg.attacks = vec![AttackConfig::Blackbox { k: 1 }];
        let manifest = run_experiment(&cfg).unwrap();
        assert_eq!(manifest.checkpoints.len(), 2);
        assert!(manifest.checkpoints.contains_key("teacher1"));
        assert!(manifest.checkpoints.contains_key("teacher2"));
        assert_eq!(manifest.attacks.len(), 1);
    }

    #[test]
    fn identical_configs_byte_reproduce_metric_blocks() {
        let dir = tempdir().unwrap();
        let mut cfg_a = quick_config(dir.path(), Defense::None);
        cfg_a.output_dir = dir.path().join("run-a");
        let mut cfg_b = cfg_a.clone();
        cfg_b.output_dir = dir.path().join("run-b");
        let a = run_experiment(&cfg_a).unwrap();
        let b = run_experiment(&cfg_b).unwrap();
        assert_eq!(a.metric_block_bytes().unwrap(), b.metric_block_bytes().unwrap());
    }

    #[test]
    fn secmi_sweep_records_chosen_timestep() {
        let dir = tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), Defense::None);
        cfg.attacks = vec![AttackConfig::Secmi { t_sec: None, stride: 1 }];
        let manifest = run_experiment(&cfg).unwrap();
        let params = &manifest.attacks[0].params;
        assert_eq!(params["swept"], serde_json::json!(true));
        let chosen = params["t_sec"].as_u64().unwrap() as usize;
        assert!(default_secmi_sweep(10).contains(&chosen));
    }

    #[test]
    fn duplication_run_reports_detection_roc() {
        let dir = tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), Defense::None);
        cfg.dataset.duplication = Some(DuplicationSpec { index: 0, copies: 6 });
        cfg.attacks = vec![];
        let manifest = run_experiment(&cfg).unwrap();
        let roc = manifest.metrics.memorization_detection.as_ref().unwrap();
        roc.check().unwrap();
        assert_eq!(roc.n_member, 6.min(32));
    }

    #[test]
    fn unwritable_output_dir_propagates_error() {
        let dir = tempdir().unwrap();
        let mut cfg = quick_config(dir.path(), Defense::None);
        let blocker = dir.path().join("blocked");
        fs::write(&blocker, b"file, not a directory").unwrap();
        cfg.output_dir = blocker;
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn failed_stage_writes_failed_manifest() {
        let dir = tempdir().unwrap();
        let cfg = quick_config(dir.path(), Defense::None);
        // Training and checkpointing succeed; the sample write then fails
        // because a directory squats on the samples path.
        fs::create_dir_all(cfg.output_dir.join("samples.bin")).unwrap();
        assert!(run_experiment(&cfg).is_err());
        let manifest = RunManifest::load(&cfg.output_dir.join("manifest.json")).unwrap();
        assert_eq!(manifest.status, RunStatus::Failed);
        assert!(manifest.failure.is_some());
        // The stages that completed are still recorded.
        assert!(manifest.checkpoints.contains_key("baseline"));
    }

    #[test]
    fn default_secmi_sweep_stays_in_range() {
        let grid = default_secmi_sweep(100);
        assert_eq!(grid[..6], [1, 2, 3, 4, 5, 10]);
        assert_eq!(*grid.last().unwrap(), 95);
        assert_eq!(grid.len(), 23);
        assert_eq!(default_secmi_sweep(10), vec![1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(default_secmi_sweep(2), vec![1]);
    }
}
