//! Cross-arm comparison tables assembled from run manifests.
//!
//! One row per arm, one column group per attack, metrics at the tail. The
//! attack-AUC value closest to 0.5 in each column is highlighted when at
//! least two arms are compared (the arm leaking the least).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::{RunManifest, RunStatus};

#[derive(Clone, Debug)]
pub struct ReportTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// (row, column) cells to emphasize: per attack-AUC column, the arm
    /// whose AUC sits closest to chance.
    pub highlights: Vec<(usize, usize)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

fn csv_cell(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

impl ReportTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("| {} |\n", self.header.join(" | ")));
        out.push_str(&format!("|{}\n", " --- |".repeat(self.header.len())));
        for (r, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if self.highlights.contains(&(r, c)) {
                        format!("**{cell}**")
                    } else {
                        cell.clone()
                    }
                })
                .collect();
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| {
            cells.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",")
        };
        out.push_str(&line(&self.header));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Loads every manifest, enforces comparability, and assembles the table.
/// Each referenced ROC CSV must exist next to its manifest.
pub fn report(manifest_paths: &[PathBuf]) -> Result<ReportTable> {
    if manifest_paths.is_empty() {
        return Err(Error::EmptyInput("manifest list".into()));
    }
    let mut arms: Vec<(PathBuf, RunManifest)> = Vec::with_capacity(manifest_paths.len());
    for path in manifest_paths {
        let manifest = RunManifest::load(path)?;
        if manifest.status != RunStatus::Complete {
            return Err(Error::Manifest(format!(
                "{} is not a completed run (status {:?})",
                path.display(),
                manifest.status
            )));
        }
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        arms.push((dir, manifest));
    }
    let (first_dir, first) = &arms[0];
    for (_, other) in &arms[1..] {
        first.config.check_comparable(&other.config)?;
    }

    let attack_names: Vec<String> = first.attacks.iter().map(|a| a.attack.clone()).collect();
    for (dir, manifest) in &arms {
        let names: Vec<String> = manifest.attacks.iter().map(|a| a.attack.clone()).collect();
        if names != attack_names {
            return Err(Error::Manifest(format!(
                "attack rows differ between arms: {attack_names:?} vs {names:?}"
            )));
        }
        for attack in &manifest.attacks {
            let csv = dir.join(&attack.roc_csv);
            if !csv.is_file() {
                return Err(Error::Manifest(format!(
                    "{}: roc csv {} missing",
                    manifest.config.name,
                    csv.display()
                )));
            }
        }
    }
    let _ = first_dir;

    let mut header = vec!["arm".to_string(), "defense".to_string()];
    for name in &attack_names {
        header.push(format!("{name} auc"));
        header.push(format!("{name} tpr@1%fpr"));
        header.push(format!("{name} roc"));
    }
    header.push("energy distance".into());
    header.push("memorization fraction".into());

    let mut rows = Vec::with_capacity(arms.len());
    let mut auc_cols: Vec<(usize, Vec<f64>)> = Vec::new();
    for (dir, manifest) in &arms {
        let mut row = vec![manifest.config.name.clone(), manifest.config.defense.name().into()];
        for (k, attack) in manifest.attacks.iter().enumerate() {
            if rows.is_empty() {
                auc_cols.push((row.len(), Vec::new()));
            }
            auc_cols[k].1.push(attack.roc.auc);
            row.push(format!("{:.4}", attack.roc.auc));
            row.push(format!("{:.4}", attack.roc.tpr_at_1pct_fpr));
            row.push(dir.join(&attack.roc_csv).display().to_string());
        }
        row.push(fmt_opt(manifest.metrics.energy_distance));
        row.push(fmt_opt(manifest.metrics.memorization_fraction));
        rows.push(row);
    }

    let mut highlights = Vec::new();
    if rows.len() > 1 {
        for (col, aucs) in &auc_cols {
            let best = aucs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
                .map(|(i, _)| i)
                .unwrap();
            highlights.push((best, *col));
        }
    }
    Ok(ReportTable { header, rows, highlights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        ArchConfig, AttackConfig, Defense, ExperimentConfig, SamplingConfig, ScheduleConfig,
        TrainParams,
    };
    use crate::dataset::{DatasetSpec, Generator};
    use crate::experiment::run_experiment;
    use crate::sampler::StepKind;
    use std::fs;
    use tempfile::tempdir;

    fn arm_config(dir: &Path, defense: Defense) -> ExperimentConfig {
        ExperimentConfig {
            name: format!("arm-{}", defense.name()),
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
            ],
            memorization_eps: None,
        }
    }

    fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir.join("manifest.json")
    }

    #[test]
    fn single_manifest_yields_single_row() {
        let dir = tempdir().unwrap();
        let cfg = arm_config(dir.path(), Defense::None);
        run_experiment(&cfg).unwrap();
        let table = report(&[manifest_path(&cfg)]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0][0], "arm-none");
        assert_eq!(table.header.len(), table.rows[0].len());
        assert!(table.highlights.is_empty());
        assert!(table.header.contains(&"secmi auc".to_string()));
        // Round trips through both renderers without panicking.
        assert!(table.to_markdown().contains("arm-none"));
        assert_eq!(table.to_csv().lines().count(), 2);
    }

    #[test]
    fn two_arms_share_header_and_highlight_the_quieter_auc() {
        let dir = tempdir().unwrap();
        let base = arm_config(dir.path(), Defense::None);
        let distill = arm_config(dir.path(), Defense::Distillmd);
        run_experiment(&base).unwrap();
        run_experiment(&distill).unwrap();
        let single = report(&[manifest_path(&base)]).unwrap();
        let table = report(&[manifest_path(&base), manifest_path(&distill)]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.header, single.header);
        // One highlight per attack column, each inside an auc column.
        assert_eq!(table.highlights.len(), 2);
        for &(_, col) in &table.highlights {
            assert!(table.header[col].ends_with(" auc"));
        }
        assert!(table.to_markdown().contains("**"));
        assert_eq!(table.to_csv().lines().count(), 3);
        assert!(!table.to_csv().contains("**"));
    }

    #[test]
    fn incomparable_arms_are_rejected() {
        let dir = tempdir().unwrap();
        let base = arm_config(dir.path(), Defense::None);
        let mut other = arm_config(dir.path(), Defense::Distillmd);
        other.master_seed = 6;
        run_experiment(&base).unwrap();
        run_experiment(&other).unwrap();
        let err = report(&[manifest_path(&base), manifest_path(&other)]).unwrap_err();
        assert!(err.to_string().contains("compared arms"), "{err}");
    }

    #[test]
    fn missing_roc_csv_fails_link_check() {
        let dir = tempdir().unwrap();
        let cfg = arm_config(dir.path(), Defense::None);
        let manifest = run_experiment(&cfg).unwrap();
        fs::remove_file(cfg.output_dir.join(&manifest.attacks[0].roc_csv)).unwrap();
        let err = report(&[manifest_path(&cfg)]).unwrap_err();
        assert!(err.to_string().contains("roc csv"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let cfg = arm_config(dir.path(), Defense::None);
        run_experiment(&cfg).unwrap();
        let path = manifest_path(&cfg);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        let err = report(&[path]).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(report(&[]).is_err());
    }
}
