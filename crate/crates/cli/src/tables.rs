//! Plain-text and JSON tables gathered from run directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use certmark::attacks::{AttackConfig, AttackKind, AttackRecord};
use certmark::certify::CertificateReport;
use serde::Serialize;

use crate::commands::{read_report, AttackSummary};
use crate::config::{ExperimentConfig, CONFIG_FILE};
use crate::error::{CliError, CliResult};
use crate::run::*;

/// Columns of strings; the first is left-aligned, the rest right-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTable {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn render(&self) -> String {
        let cols = self.header.len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                self.rows
                    .iter()
                    .chain(std::iter::once(&self.header))
                    .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)) + "\n";
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.header));
        out.push_str(&rule);
        for row in &self.rows {
            out.push_str(&line(row));
        }
        out
    }
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn opt_percent(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), percent)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificateRow {
    pub dataset: String,
    pub model: String,
    pub sigma: f64,
    pub median_smoothed_accuracy: f64,
    /// `(radius, certified accuracy)`; `None` where no bound holds.
    pub certified: Vec<(f64, Option<f64>)>,
}

impl CertificateRow {
    pub fn new(dataset: &str, model: &str, report: &CertificateReport) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            sigma: report.smoothing.sigma,
            median_smoothed_accuracy: report.median_smoothed_accuracy,
            certified: report.entries.iter().map(|e| (e.radius, e.certified_accuracy)).collect(),
        }
    }
}

/// Certified trigger-set accuracy by radius, one row per report.
pub fn certificate_table(rows: &[CertificateRow]) -> TextTable {
    let mut radii: Vec<f64> = rows.iter().flat_map(|r| r.certified.iter().map(|c| c.0)).collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let mut header: Vec<String> = ["Dataset", "Model", "sigma"].map(String::from).to_vec();
    header.extend(radii.iter().map(|r| r.to_string()));
    TextTable {
        title: "Certified trigger set accuracy by l2 radius".into(),
        header,
        rows: rows
            .iter()
            .map(|row| {
                let mut cells = vec![row.dataset.clone(), row.model.clone(), row.sigma.to_string()];
                cells.extend(radii.iter().map(|r| match row.certified.iter().find(|c| c.0 == *r) {
                    Some((_, acc)) => opt_percent(*acc),
                    None => "n/a".into(),
                }));
                cells
            })
            .collect(),
    }
}

fn attack_title(cfg: &AttackConfig) -> String {
    let base = match cfg.kind {
        AttackKind::Finetune => "Finetuning".to_string(),
        AttackKind::DistillHard => "Hard distillation".into(),
        AttackKind::DistillSoft => "Soft distillation".into(),
        AttackKind::Pgd => format!("PGD r={}", cfg.radius.unwrap_or_default()),
        kind => format!("{kind} m={}", cfg.magnitude.unwrap_or_default()),
    };
    if cfg.reg_lambda > 0.0 {
        format!("{base} reg={}", cfg.reg_lambda)
    } else {
        base
    }
}

fn lr_cell(cfg: &AttackConfig) -> String {
    if cfg.kind.is_training() {
        cfg.lr.to_string()
    } else {
        "-".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftCell {
    pub dataset: String,
    pub attack: String,
    pub lr: f32,
    pub first_epoch_l2: f64,
}

/// l2 change in the first attack epoch, one row per dataset and one column
/// per training attack and rate.
pub fn drift_table(cells: &[DriftCell]) -> TextTable {
    let mut columns: Vec<(String, f32)> = Vec::new();
    for c in cells {
        if !columns.iter().any(|(a, lr)| *a == c.attack && *lr == c.lr) {
            columns.push((c.attack.clone(), c.lr));
        }
    }
    let datasets: BTreeSet<&str> = cells.iter().map(|c| c.dataset.as_str()).collect();
    let mut header = vec!["Dataset".to_string()];
    header.extend(columns.iter().map(|(a, lr)| format!("{a} lr={lr}")));
    TextTable {
        title: "l2 distance change in the first attack epoch".into(),
        header,
        rows: datasets
            .into_iter()
            .map(|d| {
                let mut row = vec![d.to_string()];
                row.extend(columns.iter().map(|(a, lr)| {
                    cells
                        .iter()
                        .find(|c| c.dataset == d && c.attack == *a && c.lr == *lr)
                        .map_or("-".into(), |c| format!("{:.4}", c.first_epoch_l2))
                }));
                row
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemovalRow {
    pub dataset: String,
    pub attack: String,
    pub lr: String,
    pub epochs: usize,
    pub baseline: Option<f64>,
    pub black_box: Option<f64>,
    pub white_box: Option<f64>,
}

/// Trigger-set accuracy after each attack: the zero-noise baseline and the
/// certified model read raw (black-box) and smoothed (white-box).
pub fn removal_table(rows: &[RemovalRow]) -> TextTable {
    TextTable {
        title: "Trigger set accuracy after removal attacks".into(),
        header: ["Dataset", "Attack", "lr", "Epochs", "Baseline", "Black-box", "White-box"]
            .map(String::from)
            .to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.dataset.clone(),
                    r.attack.clone(),
                    r.lr.clone(),
                    r.epochs.to_string(),
                    opt_percent(r.baseline),
                    opt_percent(r.black_box),
                    opt_percent(r.white_box),
                ]
            })
            .collect(),
    }
}

pub fn attack_record_line(r: &AttackRecord) -> String {
    let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.4}"));
    format!(
        "epoch {:>3}  l2 total {:.4}  l2 step {:.4}  trigger raw {}  trigger smoothed {}  test {}  loss {}",
        r.epoch,
        r.l2_from_init,
        r.l2_from_prev,
        f(r.trigger_acc_raw),
        f(r.trigger_acc_smoothed),
        f(r.test_acc),
        f(r.train_loss)
    )
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Tables {
    pub certificates: Vec<CertificateRow>,
    pub drift: Vec<DriftCell>,
    pub removal: Vec<RemovalRow>,
    pub missing: Vec<String>,
}

impl Tables {
    pub fn is_empty(&self) -> bool {
        self.certificates.is_empty() && self.drift.is_empty() && self.removal.is_empty()
    }
}

fn read_trajectory(path: &Path) -> Option<Vec<AttackRecord>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines().map(|l| serde_json::from_str(l).ok()).collect()
}

/// An attack run discovered on disk.
struct AttackRun {
    summary: AttackSummary,
    records: Vec<AttackRecord>,
}

fn attack_runs(dir: &RunDir, missing: &mut Vec<String>) -> Vec<AttackRun> {
    let Ok(entries) = fs::read_dir(dir.attacks()) else {
        missing.push(format!("{}/", dir.attacks().display()));
        return Vec::new();
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    paths.sort();
    let mut runs = Vec::new();
    for path in paths {
        let summary = fs::read_to_string(path.join(ATTACK_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<AttackSummary>(&t).ok());
        let records = read_trajectory(&path.join(TRAJECTORY_FILE));
        match (summary, records) {
            (Some(summary), Some(records)) => runs.push(AttackRun { summary, records }),
            (s, r) => {
                if s.is_none() {
                    missing.push(path.join(ATTACK_FILE).display().to_string());
                }
                if r.is_none() {
                    missing.push(path.join(TRAJECTORY_FILE).display().to_string());
                }
            }
        }
    }
    runs
}

fn same_attack(a: &AttackConfig, b: &AttackConfig) -> bool {
    AttackConfig { seed: 0, ..a.clone() } == AttackConfig { seed: 0, ..b.clone() }
}

fn collect_run(dir: &RunDir, tables: &mut Tables) {
    let dataset = fs::read_to_string(dir.config())
        .ok()
        .and_then(|t| ExperimentConfig::from_toml(&t).ok())
        .map(|c| c.dataset.label())
        .unwrap_or_else(|| dir.root.display().to_string());
    for file in [dir.model(), dir.triggers()] {
        if !file.is_file() {
            tables.missing.push(file.display().to_string());
        }
    }
    match read_report(&dir.report()) {
        Ok(report) => tables.certificates.push(CertificateRow::new(&dataset, "certified", &report)),
        Err(_) => tables.missing.push(dir.report().display().to_string()),
    }
    if let Ok(report) = read_report(&dir.baseline().report()) {
        tables.certificates.push(CertificateRow::new(&dataset, "baseline", &report));
    }
    let runs = attack_runs(dir, &mut tables.missing);
    for run in runs.iter().filter(|r| r.summary.source_role == "certified") {
        let cfg = &run.summary.config;
        if cfg.kind.is_training() {
            if let Some(first) = run.records.iter().find(|r| r.epoch == 1) {
                tables.drift.push(DriftCell {
                    dataset: dataset.clone(),
                    attack: attack_title(cfg),
                    lr: cfg.lr,
                    first_epoch_l2: first.l2_from_prev,
                });
            }
        }
        let last = run.records.last().unwrap_or(&run.summary.final_record);
        let baseline = runs
            .iter()
            .find(|b| b.summary.source_role == "baseline" && same_attack(&b.summary.config, cfg))
            .and_then(|b| b.records.last())
            .and_then(|r| r.trigger_acc_raw);
        tables.removal.push(RemovalRow {
            dataset: dataset.clone(),
            attack: attack_title(cfg),
            lr: lr_cell(cfg),
            epochs: last.epoch,
            baseline,
            black_box: last.trigger_acc_raw,
            white_box: last.trigger_acc_smoothed,
        });
    }
}

fn is_run(dir: &Path) -> bool {
    [CONFIG_FILE, MODEL_FILE, REPORT_FILE, ATTACKS_DIR].iter().any(|f| dir.join(f).exists())
}

/// Gathers every run in `root` and its immediate subdirectories.
pub fn collect(root: &Path) -> Tables {
    let mut tables = Tables::default();
    let mut dirs = Vec::new();
    if is_run(root) {
        dirs.push(root.to_path_buf());
    }
    if let Ok(entries) = fs::read_dir(root) {
        let mut subs: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join(CONFIG_FILE).is_file())
            .collect();
        subs.sort();
        dirs.extend(subs);
    }
    for dir in dirs {
        collect_run(&RunDir::new(dir), &mut tables);
    }
    tables
}

pub fn report(root: &Path) -> CliResult<()> {
    if !root.is_dir() {
        return Err(CliError::failure(format!("no artifacts: {} is not a directory", root.display())));
    }
    let tables = collect(root);
    if tables.is_empty() {
        for m in &tables.missing {
            println!("missing: {m}");
        }
        return Err(CliError::failure(format!("no artifacts in {}", root.display())));
    }
    let mut sections = Vec::new();
    if !tables.certificates.is_empty() {
        sections.push(certificate_table(&tables.certificates).render());
    }
    if !tables.drift.is_empty() {
        sections.push(drift_table(&tables.drift).render());
    }
    if !tables.removal.is_empty() {
        sections.push(removal_table(&tables.removal).render());
    }
    print!("{}", sections.join("\n"));
    for m in &tables.missing {
        println!("missing: {m}");
    }
    let path = root.join(TABLES_FILE);
    write_json(&path, &tables)?;
    println!("wrote {}", path.display());
    Ok(())
}
