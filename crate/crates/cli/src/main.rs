//! `mdlab`: experiment harness for the diffusion privacy laboratory.
//!
//! Subcommands mirror the pipeline stages (`gen-data`, `train`, `distill`,
//! `sample`, `attack`), run it end to end (`run`, `memorize-exp`), and read
//! results back (`eval`, `report`). All randomness derives from the config's
//! master seed with fixed stage names, so a sub-stage run here reproduces
//! the same bytes as the corresponding stage inside `run`.
//!
//! Environment overrides (the only two honored): `MDLAB_OUTPUT_DIR` reroots
//! every run directory at `<dir>/<config name>`, and `MDLAB_THREADS` caps
//! how many arms `run` executes in parallel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use mdlab_core::io::{
    atomic_write, file_sha256_hex, loss_trace_csv, read_sample_block, write_sample_block,
};
use mdlab_core::rng::derive_seed;
use mdlab_core::{
    deployed_role, dual_sample, gen_dataset, load_checkpoint, report, roc_report,
    run_configured_attack, run_experiment, sampling_plan, save_checkpoint, single_sample,
    split_disjoint, train_ddpm, train_distillmd, AttackConfig, Defense, Denoiser,
    ExperimentConfig, LabeledSample, RunManifest, SamplerMode, Tensor, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "mdlab", version, about = "Toy diffusion privacy lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the dataset for a config and write it as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path (default: <output_dir>/dataset.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model role and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// baseline (full member set), teacher1 (D1), or teacher2 (D2).
        #[arg(long, default_value = "baseline")]
        role: String,
    },
    /// Distill the student from previously trained teacher checkpoints.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a sample block under the configured inference rule.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Output block path (default: <output_dir>/samples.bin).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured sample count.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the configured attack suite against the deployed checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Sample block for black-box attacks (default:
        /// <output_dir>/samples.bin).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Verify a manifest's file hashes and print its metrics.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run one or more arms end to end and write their manifests.
    Run {
        /// Config file; repeat to run several comparable arms.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        /// Override the experiment name (single config only).
        #[arg(long)]
        name: Option<String>,
        /// Override the master seed (single config only).
        #[arg(long)]
        master_seed: Option<u64>,
        /// Override the defense arm: none, dualmd, distillmd (single config
        /// only).
        #[arg(long)]
        defense: Option<String>,
        /// Override the output directory (single config only).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Assemble the cross-arm comparison table from run manifests.
    Report {
        /// Manifest paths (one per arm).
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Directory for report.md / report.csv (default: current dir).
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Duplicate one member and compare memorization across baseline and
    /// distillmd arms.
    MemorizeExp {
        #[arg(long)]
        config: PathBuf,
        /// Member index to duplicate.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Total copies of that member in the training set.
        #[arg(long, default_value_t = 100)]
        copies: usize,
    },
}

fn parse_defense(s: &str) -> anyhow::Result<Defense> {
    match s {
        "none" => Ok(Defense::None),
        "dualmd" => Ok(Defense::Dualmd),
        "distillmd" => Ok(Defense::Distillmd),
        other => bail!("unknown defense {other:?} (expected none, dualmd, or distillmd)"),
    }
}

/// Loads a config and applies the MDLAB_OUTPUT_DIR reroot.
fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(root) = std::env::var_os("MDLAB_OUTPUT_DIR") {
        cfg.output_dir = PathBuf::from(root).join(&cfg.name);
    }
    Ok(cfg)
}

fn thread_cap() -> anyhow::Result<usize> {
    match std::env::var("MDLAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("MDLAB_THREADS={v}"))?;
            if n == 0 {
                bail!("MDLAB_THREADS must be >= 1");
            }
            Ok(n)
        }
    }
}

fn split_sets(data: &[LabeledSample]) -> (Vec<&LabeledSample>, Vec<&LabeledSample>) {
    (data.iter().filter(|s| s.member).collect(), data.iter().filter(|s| !s.member).collect())
}

fn dataset_csv(data: &[LabeledSample], dim: usize) -> String {
    let mut out = String::from("index,member,label,tokens");
    for d in 0..dim {
        out.push_str(&format!(",x{d}"));
    }
    out.push('\n');
    for (i, s) in data.iter().enumerate() {
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        let tokens =
            s.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";");
        out.push_str(&format!("{i},{},{label},{tokens}", u8::from(s.member)));
        for v in s.x0.data() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn load_role_checkpoint(cfg: &ExperimentConfig, role: &str) -> anyhow::Result<Denoiser> {
    let path = cfg.output_dir.join(format!("{role}.ckpt"));
    load_checkpoint(&path).with_context(|| {
        format!(
            "loading {} (train it first: mdlab train --config ... --role {role})",
            path.display()
        )
    })
}

fn save_role(cfg: &ExperimentConfig, role: &str, out: &TrainOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("{role}.ckpt"));
    let hash = save_checkpoint(&out.model, &path)?;
    atomic_write(
        &cfg.output_dir.join(format!("loss_{role}.csv")),
        loss_trace_csv(&out.loss_trace).as_bytes(),
    )?;
    let tail: f64 = out.loss_trace.iter().rev().take(100).sum::<f64>()
        / out.loss_trace.len().min(100).max(1) as f64;
    println!("{role}: wrote {} (sha256 {hash}), final loss {tail:.4}", path.display());
    Ok(())
}

fn cmd_gen_data(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let data = gen_dataset(&cfg.dataset, derive_seed(cfg.master_seed, "data", 0))?;
    let (members, nonmembers) = split_sets(&data);
    let path = out.unwrap_or_else(|| cfg.output_dir.join("dataset.csv"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    atomic_write(&path, dataset_csv(&data, cfg.dataset.dim).as_bytes())?;
    println!(
        "wrote {} samples ({} members, {} non-members) to {}",
        data.len(),
        members.len(),
        nonmembers.len(),
        path.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, role: &str) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let arch = cfg.arch.build(&cfg.dataset, &cfg.schedule);
    let data = gen_dataset(&cfg.dataset, derive_seed(cfg.master_seed, "data", 0))?;
    let (members, _) = split_sets(&data);
    let init = Denoiser::init(arch, derive_seed(cfg.master_seed, "init", 0))?;
    let conditional = cfg.dataset.conditional;

    let outcome = match role {
        "baseline" => {
            let tc = cfg.train.build(derive_seed(cfg.master_seed, "train", 0), conditional);
            train_ddpm(&init, &members, &sched, &tc)?
        }
        "teacher1" | "teacher2" => {
            if cfg.defense == Defense::None {
                bail!("teacher roles only exist for the dualmd/distillmd arms");
            }
            let split =
                split_disjoint(&data, derive_seed(cfg.master_seed, "split", 0), conditional)?;
            let (pool, ix) =
                if role == "teacher1" { (split.d1(), 1) } else { (split.d2(), 2) };
            let tc = cfg.train.build(derive_seed(cfg.master_seed, "train", ix), conditional);
            train_ddpm(&init, &pool, &sched, &tc)?
        }
        other => bail!("unknown role {other:?} (expected baseline, teacher1, or teacher2)"),
    };
    save_role(&cfg, role, &outcome)
}

fn cmd_distill(config: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    if cfg.defense != Defense::Distillmd {
        bail!("distill requires defense = \"distillmd\" in the config");
    }
    let sched = cfg.schedule.build()?;
    let arch = cfg.arch.build(&cfg.dataset, &cfg.schedule);
    let conditional = cfg.dataset.conditional;
    let data = gen_dataset(&cfg.dataset, derive_seed(cfg.master_seed, "data", 0))?;
    let split = split_disjoint(&data, derive_seed(cfg.master_seed, "split", 0), conditional)?;
    let teacher1 = load_role_checkpoint(&cfg, "teacher1")?;
    let teacher2 = load_role_checkpoint(&cfg, "teacher2")?;
    let init = Denoiser::init(arch, derive_seed(cfg.master_seed, "init", 0))?;
    let tc = cfg.train.build(derive_seed(cfg.master_seed, "train", 3), conditional);
    let out = train_distillmd(&teacher1, &teacher2, &split, &init, &sched, &tc)?;
    println!("distilled student: {} D1 batches, {} D2 batches", out.d1_batches, out.d2_batches);
    save_role(
        &cfg,
        "student",
        &TrainOutcome { model: out.model, loss_trace: out.loss_trace },
    )
}

fn cmd_sample(config: &Path, out: Option<PathBuf>, n: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let mut plan = sampling_plan(&cfg);
    if let Some(n) = n {
        plan.n_samples = n;
        if let Some(tokens) = &mut plan.cond_tokens {
            let k = cfg.dataset.diversification_k;
            *tokens =
                (0..n).map(|i| ((i % cfg.dataset.n_classes) * k) as u32).collect();
        }
    }
    let mut hashes = BTreeMap::new();
    let generated = if plan.mode == SamplerMode::Dual {
        let a = load_role_checkpoint(&cfg, "teacher1")?;
        let b = load_role_checkpoint(&cfg, "teacher2")?;
        for role in ["teacher1", "teacher2"] {
            let p = cfg.output_dir.join(format!("{role}.ckpt"));
            hashes.insert(role.to_string(), file_sha256_hex(&p)?);
        }
        dual_sample(&a, &b, &sched, &plan)?
    } else {
        let role = deployed_role(cfg.defense);
        let model = load_role_checkpoint(&cfg, role)?;
        let p = cfg.output_dir.join(format!("{role}.ckpt"));
        hashes.insert(role.to_string(), file_sha256_hex(&p)?);
        single_sample(&model, &sched, &plan)?
    };
    let path = out.unwrap_or_else(|| cfg.output_dir.join("samples.bin"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let hash = write_sample_block(&path, &generated)?;
    let sidecar = serde_json::to_vec_pretty(&serde_json::json!({
        "plan": plan,
        "model_hashes": hashes,
    }))?;
    atomic_write(&path.with_extension("json"), &sidecar)?;
    println!("wrote {} samples to {} (sha256 {hash})", generated.len(), path.display());
    Ok(())
}

fn cmd_attack(config: &Path, samples: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let data = gen_dataset(&cfg.dataset, derive_seed(cfg.master_seed, "data", 0))?;
    let (members, nonmembers) = split_sets(&data);
    let target = load_role_checkpoint(&cfg, deployed_role(cfg.defense))?;

    let needs_samples = cfg.attacks.iter().any(|a| matches!(a, AttackConfig::Blackbox { .. }));
    let generated: Vec<Tensor> = if needs_samples {
        let path = samples.unwrap_or_else(|| cfg.output_dir.join("samples.bin"));
        read_sample_block(&path).with_context(|| {
            format!("reading {} (generate it first: mdlab sample)", path.display())
        })?
    } else {
        Vec::new()
    };

    fs::create_dir_all(&cfg.output_dir)?;
    println!("attack          auc     tpr@1%fpr");
    for attack_cfg in &cfg.attacks {
        let scores = run_configured_attack(
            attack_cfg,
            &cfg,
            &target,
            &generated,
            &members,
            &nonmembers,
            &sched,
        )?;
        let roc = roc_report(&scores)?;
        atomic_write(
            &cfg.output_dir.join(format!("attack_{}_roc.csv", scores.attack)),
            roc.points_csv().as_bytes(),
        )?;
        atomic_write(
            &cfg.output_dir.join(format!("attack_{}_scores.json", scores.attack)),
            &serde_json::to_vec_pretty(&scores)?,
        )?;
        println!("{:<15} {:.4}  {:.4}", scores.attack, roc.auc, roc.tpr_at_1pct_fpr);
    }
    Ok(())
}

fn cmd_eval(path: &Path) -> anyhow::Result<()> {
    let manifest = RunManifest::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest.verify_files(dir)?;
    println!(
        "{}: {:?}, {} checkpoints and {} sample blocks verified",
        manifest.config.name,
        manifest.status,
        manifest.checkpoints.len(),
        manifest.samples.len()
    );
    if let Some(failure) = &manifest.failure {
        println!("failure: {failure}");
    }
    if !manifest.attacks.is_empty() {
        println!("attack          auc     tpr@1%fpr");
        for a in &manifest.attacks {
            println!("{:<15} {:.4}  {:.4}", a.attack, a.roc.auc, a.roc.tpr_at_1pct_fpr);
        }
    }
    let m = &manifest.metrics;
    if let Some(v) = m.energy_distance {
        println!("energy distance        {v:.4}");
    }
    if let (Some(eps), Some(frac)) = (m.memorization_eps, m.memorization_fraction) {
        println!("memorization fraction  {frac:.4} (eps {eps:.4})");
    }
    if let Some(roc) = &m.memorization_detection {
        println!("memorization detection auc {:.4}", roc.auc);
    }
    if let Some(gaps) = &m.teacher_cross_gaps {
        for (i, g) in gaps.iter().enumerate() {
            println!(
                "teacher{} cross gap     {:+.4} (se {:.4}, n_mc {})",
                i + 1,
                g.gap,
                g.se,
                g.n_mc
            );
        }
    }
    let total: f64 = manifest.timings_s.values().sum();
    println!("total stage time       {total:.1}s");
    Ok(())
}

fn cmd_run(
    configs: &[PathBuf],
    name: Option<String>,
    master_seed: Option<u64>,
    defense: Option<String>,
    output_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let overrides_used =
        name.is_some() || master_seed.is_some() || defense.is_some() || output_dir.is_some();
    if overrides_used && configs.len() != 1 {
        bail!("--name/--master-seed/--defense/--output-dir require exactly one --config");
    }
    let mut arms = Vec::with_capacity(configs.len());
    for path in configs {
        let mut cfg = load_config(path)?;
        if let Some(name) = &name {
            cfg.name = name.clone();
        }
        if let Some(seed) = master_seed {
            cfg.master_seed = seed;
        }
        if let Some(d) = &defense {
            cfg.defense = parse_defense(d)?;
        }
        if let Some(dir) = &output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        arms.push(cfg);
    }
    // Compared arms must agree on everything but the defense; reject before
    // spending any training time.
    for other in &arms[1..] {
        arms[0].check_comparable(other)?;
    }
    for (i, a) in arms.iter().enumerate() {
        for b in &arms[i + 1..] {
            if a.output_dir == b.output_dir {
                bail!("arms {} and {} share output dir {}", a.name, b.name, a.output_dir.display());
            }
        }
    }

    let threads = thread_cap().map(|t| t.min(arms.len()).max(1))?;
    let results: Vec<Option<mdlab_core::Result<RunManifest>>> = {
        let slots = Mutex::new((0..arms.len()).map(|_| None).collect::<Vec<_>>());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let ix = next.fetch_add(1, Ordering::Relaxed);
                    if ix >= arms.len() {
                        break;
                    }
                    let out = run_experiment(&arms[ix]);
                    slots.lock().unwrap()[ix] = Some(out);
                });
            }
        });
        slots.into_inner().unwrap()
    };

    let mut manifest_paths = Vec::new();
    let mut failed = false;
    for (cfg, slot) in arms.iter().zip(results) {
        match slot.expect("every arm ran") {
            Ok(manifest) => {
                let path = cfg.output_dir.join("manifest.json");
                let aucs: Vec<String> = manifest
                    .attacks
                    .iter()
                    .map(|a| format!("{} {:.3}", a.attack, a.roc.auc))
                    .collect();
                println!(
                    "{} ({}): complete, {} | {}",
                    cfg.name,
                    cfg.defense.name(),
                    aucs.join(", "),
                    path.display()
                );
                manifest_paths.push(path);
            }
            Err(e) => {
                failed = true;
                println!("{} ({}): FAILED: {e}", cfg.name, cfg.defense.name());
            }
        }
    }
    if failed {
        bail!("at least one arm failed");
    }
    if manifest_paths.len() > 1 {
        println!("\n{}", report(&manifest_paths)?.to_markdown());
    }
    Ok(())
}

fn cmd_report(manifests: &[PathBuf], out_dir: &Path) -> anyhow::Result<()> {
    let table = report(manifests)?;
    fs::create_dir_all(out_dir)?;
    atomic_write(&out_dir.join("report.md"), table.to_markdown().as_bytes())?;
    atomic_write(&out_dir.join("report.csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_markdown());
    println!("wrote {} and report.csv", out_dir.join("report.md").display());
    Ok(())
}

fn cmd_memorize_exp(config: &Path, index: usize, copies: usize) -> anyhow::Result<()> {
    let base = load_config(config)?;
    let mut arms = Vec::new();
    for defense in [Defense::None, Defense::Distillmd] {
        let mut cfg = base.clone();
        cfg.defense = defense;
        cfg.name = format!("{}-{}", base.name, defense.name());
        cfg.output_dir = base.output_dir.join(defense.name());
        cfg.dataset.duplication =
            Some(mdlab_core::DuplicationSpec { index, copies });
        cfg.validate()?;
        arms.push(cfg);
    }
    let mut rows = Vec::new();
    for cfg in &arms {
        let manifest = run_experiment(cfg)?;
        println!(
            "{}: complete | {}",
            cfg.name,
            cfg.output_dir.join("manifest.json").display()
        );
        rows.push((cfg.defense.name(), manifest));
    }
    println!("\narm        detection-auc  fraction");
    for (defense, manifest) in &rows {
        let det = manifest
            .metrics
            .memorization_detection
            .as_ref()
            .map(|r| format!("{:.4}", r.auc))
            .unwrap_or_else(|| "-".into());
        let frac = manifest
            .metrics
            .memorization_fraction
            .map(|f| format!("{f:.4}"))
            .unwrap_or_else(|| "-".into());
        println!("{defense:<10} {det:<14} {frac}");
    }
    let frac = |i: usize| rows[i].1.metrics.memorization_fraction.unwrap_or(f64::NAN);
    if frac(1) < frac(0) {
        println!("distillmd reduced the memorized fraction ({:.4} -> {:.4})", frac(0), frac(1));
    } else {
        println!(
            "distillmd did not reduce the memorized fraction ({:.4} -> {:.4})",
            frac(0),
            frac(1)
        );
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { config, out } => cmd_gen_data(&config, out),
        Cmd::Train { config, role } => cmd_train(&config, &role),
        Cmd::Distill { config } => cmd_distill(&config),
        Cmd::Sample { config, out, n } => cmd_sample(&config, out, n),
        Cmd::Attack { config, samples } => cmd_attack(&config, samples),
        Cmd::Eval { manifest } => cmd_eval(&manifest),
        Cmd::Run { config, name, master_seed, defense, output_dir } => {
            cmd_run(&config, name, master_seed, defense, output_dir)
        }
        Cmd::Report { manifests, out_dir } => cmd_report(&manifests, &out_dir),
        Cmd::MemorizeExp { config, index, copies } => cmd_memorize_exp(&config, index, copies),
    }
    .map_err(|e| anyhow!("{e:#}"))
}
