//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use certmark::attacks::{run_attack, AttackConfig, AttackEval, AttackKind, AttackRecord};
use certmark::certify::{
    certify_grid, verify_certificate, CaseStatus, CertificateReport, TaggedParams, Verification,
};
use certmark::data::{Dataset, TriggerSet};
use certmark::embed::{embed_watermark, EmbedConfig, EmbedOutcome};
use certmark::nn::{l2_distance, model_digest, ModelSpec, ParamVector};
use serde::{Deserialize, Serialize};

use crate::config::{attack_name, validate_radii, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::run::*;
use crate::tables;

/// Distance slack when re-checking a PGD checkpoint against its radius.
const RADIUS_TOLERANCE: f64 = 1e-6;

fn digest(spec: &ModelSpec, params: &ParamVector) -> CliResult<String> {
    model_digest(spec, params).map_err(|e| CliError::failure(e.to_string()))
}

fn embed_once(
    spec: &ModelSpec,
    init: &ParamVector,
    splits: &Splits,
    triggers: &TriggerSet,
    embed: &EmbedConfig,
) -> CliResult<EmbedOutcome> {
    let mut opt = embed.optimizer().build(init.len());
    embed_watermark(spec, init, &splits.owner, Some(&splits.test), triggers, embed, &mut opt)
        .map_err(|e| CliError::failure(format!("embedding failed: {e}")))
}

fn save_embedding(dir: &RunDir, spec: &ModelSpec, out: &EmbedOutcome, label: &str) -> CliResult<()> {
    create_dir(&dir.root)?;
    write_checkpoint(&dir.model(), spec, &out.params)?;
    write_json_lines(&dir.train_log(), &out.log)?;
    let last = out.log.last().expect("at least one epoch");
    println!(
        "{label}: {} epochs, test accuracy {}, trigger accuracy {:.4}, l2 from init {:.4}",
        out.log.len(),
        last.test_acc.map_or("-".into(), |a| format!("{a:.4}")),
        last.trigger_acc,
        last.l2_from_init
    );
    println!("{label}: wrote {} (digest {})", dir.model().display(), digest(spec, &out.params)?);
    Ok(())
}

pub fn embed(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = RunDir::new(&cfg.out);
    let splits = load_splits(cfg)?;
    let triggers = build_triggers(cfg, &splits.owner)?;
    let spec = spec_for(cfg, &triggers)?;
    let init = init_params(cfg, &spec)?;
    create_dir(&dir.root)?;
    write_text(&dir.config(), &cfg.to_toml())?;
    write_triggers(&dir.triggers(), &triggers)?;
    println!(
        "data: {} owner, {} adversary, {} test examples of {}; {} {} triggers",
        splits.owner.len(),
        splits.adversary.len(),
        splits.test.len(),
        splits.owner.shape(),
        triggers.len(),
        triggers.scheme()
    );
    if cfg.baseline {
        let zero_noise = EmbedConfig { max_noise: 0.0, ..cfg.embed.clone() };
        let out = embed_once(&spec, &init, &splits, &triggers, &zero_noise)?;
        save_embedding(&dir.baseline(), &spec, &out, "baseline")?;
    }
    let out = embed_once(&spec, &init, &splits, &triggers, &cfg.embed)?;
    save_embedding(&dir, &spec, &out, "watermark")
}

#[derive(Clone, Debug, Default)]
pub struct CertifyArgs {
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub n: Option<u64>,
    pub confidence: Option<f64>,
    pub radii: Option<Vec<f64>>,
}

/// Model spec and trigger set of an embedded run.
fn load_run(cfg: &ExperimentConfig) -> CliResult<(RunDir, TriggerSet, ModelSpec)> {
    let dir = RunDir::new(&cfg.out);
    let triggers = read_triggers(&dir.triggers())?;
    let spec = spec_for(cfg, &triggers)?;
    Ok((dir, triggers, spec))
}

pub fn certify(cfg: &ExperimentConfig, args: &CertifyArgs) -> CliResult<()> {
    let (dir, triggers, spec) = load_run(cfg)?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| dir.model());
    let report_path = match (&args.report, &args.checkpoint) {
        (Some(r), _) => r.clone(),
        (None, Some(c)) => c.with_file_name(REPORT_FILE),
        (None, None) => dir.report(),
    };
    let params = read_checkpoint(&checkpoint, &spec)?;
    let mut smoothing = cfg.smoothing;
    smoothing.sigma = args.sigma.unwrap_or(smoothing.sigma);
    smoothing.n = args.n.unwrap_or(smoothing.n);
    smoothing.confidence = args.confidence.unwrap_or(smoothing.confidence);
    smoothing.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let radii = args.radii.clone().unwrap_or_else(|| cfg.radii.clone());
    validate_radii(&radii)?;
    let report = certify_grid(&spec, &params, &triggers, &smoothing, &radii)
        .map_err(|e| CliError::failure(format!("certification failed: {e}")))?;
    if let Some(parent) = report_path.parent() {
        create_dir(parent)?;
    }
    write_text(&report_path, &report.to_json())?;
    let row = tables::CertificateRow::new(&cfg.dataset.label(), &checkpoint_role(&dir, &checkpoint), &report);
    print!("{}", tables::certificate_table(&[row]).render());
    println!(
        "median smoothed trigger accuracy {:.4} (sigma {}, n {}, confidence {})",
        report.median_smoothed_accuracy, smoothing.sigma, smoothing.n, smoothing.confidence
    );
    println!("wrote {}", report_path.display());
    Ok(())
}

fn checkpoint_role(dir: &RunDir, checkpoint: &Path) -> String {
    let same = |a: &Path| match (fs::canonicalize(a), fs::canonicalize(checkpoint)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    };
    if same(&dir.model()) {
        "certified".into()
    } else if same(&dir.baseline().model()) {
        "baseline".into()
    } else {
        checkpoint.display().to_string()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttackArgs {
    pub kind: Option<String>,
    pub name: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub lr: Option<f32>,
    pub epochs: Option<usize>,
    pub reg_lambda: Option<f32>,
    pub radius: Option<f64>,
    pub magnitude: Option<f64>,
    pub pgd_steps: Option<usize>,
}

/// Provenance of an attacked checkpoint, stored beside it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub name: String,
    pub config: AttackConfig,
    /// `certified`, `baseline` or the source checkpoint path.
    pub source_role: String,
    pub source_digest: String,
    pub attacked_digest: String,
    pub distance: f64,
    pub final_record: AttackRecord,
}

fn apply_attack_flags(cfg: &mut AttackConfig, args: &AttackArgs) {
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(reg) = args.reg_lambda {
        cfg.reg_lambda = reg;
    }
    if let Some(steps) = args.pgd_steps {
        cfg.pgd_steps = steps;
    }
    if cfg.kind == AttackKind::Pgd {
        cfg.radius = args.radius.or(cfg.radius);
    }
    if cfg.kind.is_perturbation() {
        cfg.magnitude = args.magnitude.or(cfg.magnitude);
    }
}

fn planned_attacks(cfg: &ExperimentConfig, args: &AttackArgs) -> CliResult<Vec<(String, AttackConfig)>> {
    let mut attacks = match &args.kind {
        Some(kind) => {
            let kind: AttackKind = kind.parse().map_err(|e: certmark::attacks::UnknownAttackKind| {
                CliError::usage(e.to_string())
            })?;
            let base = match kind {
                AttackKind::Finetune => AttackConfig::finetune(1e-3, 10),
                AttackKind::DistillHard => AttackConfig::distill_hard(1e-3, 10),
                AttackKind::DistillSoft => AttackConfig::distill_soft(1e-3, 10),
                AttackKind::Pgd => AttackConfig::pgd(0.0),
                kind => AttackConfig::perturbation(kind, 0.0),
            };
            if kind == AttackKind::Pgd && args.radius.is_none() {
                return Err(CliError::usage("--kind pgd needs --radius"));
            }
            if kind.is_perturbation() && args.magnitude.is_none() {
                return Err(CliError::usage(format!("--kind {kind} needs --magnitude")));
            }
            vec![base.with_seed(cfg.attack_seed(cfg.attacks.len() as u64))]
        }
        None if args.name.is_some() => return Err(CliError::usage("--name needs --kind")),
        None => cfg.attacks.clone(),
    };
    if attacks.is_empty() {
        return Err(CliError::usage("no attacks configured; pass --kind or add [[attacks]] to the config"));
    }
    for a in &mut attacks {
        apply_attack_flags(a, args);
        a.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(attacks
        .into_iter()
        .map(|a| (args.name.clone().unwrap_or_else(|| attack_name(&a)), a))
        .collect())
}

pub fn attack(cfg: &ExperimentConfig, args: &AttackArgs) -> CliResult<()> {
    let plan = planned_attacks(cfg, args)?;
    let (dir, triggers, spec) = load_run(cfg)?;
    let source_path = args.checkpoint.clone().unwrap_or_else(|| dir.model());
    let source = read_checkpoint(&source_path, &spec)?;
    let source_digest = digest(&spec, &source)?;
    let role = checkpoint_role(&dir, &source_path);
    let splits = load_splits(cfg)?;
    let smoothing = (cfg.attack_eval_n > 0).then_some(certmark::smoothing::SmoothingConfig {
        n: cfg.attack_eval_n,
        ..cfg.smoothing
    });
    let eval = AttackEval { triggers: Some(&triggers), test: Some(&splits.test), smoothing };
    for (name, attack_cfg) in plan {
        let name = match role.as_str() {
            "baseline" if args.name.is_none() => format!("baseline-{name}"),
            _ => name,
        };
        let data: &Dataset = match attack_cfg.kind {
            AttackKind::Pgd => triggers.as_dataset(),
            _ => &splits.adversary,
        };
        let trajectory = run_attack(&spec, &source, data, &attack_cfg, eval)
            .map_err(|e| CliError::failure(format!("attack {name} failed: {e}")))?;
        let out_dir = dir.attack(&name);
        create_dir(&out_dir)?;
        let ckpt = out_dir.join(MODEL_FILE);
        write_checkpoint(&ckpt, &spec, &trajectory.final_params)?;
        write_json_lines(&out_dir.join(TRAJECTORY_FILE), &trajectory.records)?;
        let reloaded = read_checkpoint(&ckpt, &spec)?;
        let distance = l2_distance(&source, &reloaded).map_err(|e| CliError::failure(e.to_string()))?;
        if let Some(radius) = attack_cfg.radius.filter(|_| attack_cfg.kind == AttackKind::Pgd) {
            if distance > radius + RADIUS_TOLERANCE {
                return Err(CliError::failure(format!(
                    "{name}: reloaded checkpoint lies {distance} from its source, outside radius {radius}"
                )));
            }
            println!("{name}: reloaded checkpoint lies {distance:.6} from its source, within radius {radius}");
        }
        let summary = AttackSummary {
            name: name.clone(),
            config: attack_cfg,
            source_role: role.clone(),
            source_digest: source_digest.clone(),
            attacked_digest: digest(&spec, &reloaded)?,
            distance,
            final_record: trajectory.records.last().expect("starting record").clone(),
        };
        write_json(&out_dir.join(ATTACK_FILE), &summary)?;
        for r in &trajectory.records {
            println!("{name}: {}", tables::attack_record_line(r));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct VerifyArgs {
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub n: Option<u64>,
    pub attacked: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifySummary {
    pub model_digest: String,
    pub checked: usize,
    pub skipped: usize,
    pub ignored: Vec<String>,
    pub verification: Verification,
}

fn read_summary(ckpt: &Path) -> Option<AttackSummary> {
    let text = fs::read_to_string(ckpt.with_file_name(ATTACK_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn read_report(path: &Path) -> CliResult<CertificateReport> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::usage(format!("report not found: {}: {e} (run `certmark certify` first)", path.display()))
    })?;
    CertificateReport::from_json(&text).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))
}

fn discover_attacked(dir: &RunDir) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir.attacks()) else {
        return Vec::new();
    };
    let mut found: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path().join(MODEL_FILE))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    found
}

pub fn verify(cfg: &ExperimentConfig, args: &VerifyArgs) -> CliResult<bool> {
    let (dir, triggers, spec) = load_run(cfg)?;
    let report = read_report(&args.report.clone().unwrap_or_else(|| dir.report()))?;
    let certified_path = args.checkpoint.clone().unwrap_or_else(|| dir.model());
    let certified = read_checkpoint(&certified_path, &spec)?;
    let certified_digest = digest(&spec, &certified)?;
    if certified_digest != report.model_digest {
        return Err(CliError::failure(format!(
            "inconsistent digests: the report certifies {} but {} is {certified_digest}",
            report.model_digest,
            certified_path.display()
        )));
    }
    let explicit = !args.attacked.is_empty();
    let paths = if explicit { args.attacked.clone() } else { discover_attacked(&dir) };
    let mut cases = Vec::new();
    let mut ignored = Vec::new();
    for path in paths {
        let summary = read_summary(&path);
        if let Some(s) = summary.as_ref().filter(|s| s.source_digest != report.model_digest) {
            if explicit {
                return Err(CliError::failure(format!(
                    "inconsistent digests: {} was attacked from {}, not the certified model {}",
                    path.display(),
                    s.source_digest,
                    report.model_digest
                )));
            }
            println!("{}: ignored (attacked a different model)", s.name);
            ignored.push(s.name.clone());
            continue;
        }
        let params = read_checkpoint(&path, &spec)?;
        let distance = l2_distance(&certified, &params).map_err(|e| CliError::failure(e.to_string()))?;
        let label = summary.map(|s| s.name).unwrap_or_else(|| path.display().to_string());
        cases.push(TaggedParams { label, params, distance });
    }
    let smoothing = certmark::smoothing::SmoothingConfig {
        n: args.n.unwrap_or(report.smoothing.n),
        ..report.smoothing
    };
    let verification = verify_certificate(&spec, &report, &cases, &triggers, &smoothing)
        .map_err(|e| CliError::failure(format!("verification failed: {e}")))?;
    for case in &verification.cases {
        match &case.status {
            CaseStatus::Skipped => {
                println!("{}: distance {:.6}: skipped (outside all radii)", case.label, case.distance)
            }
            CaseStatus::Checked { median_estimate, allowance_estimate, radii_checked } => {
                let violated = verification.violations.iter().filter(|v| v.label == case.label).count();
                println!(
                    "{}: distance {:.6}: median {median_estimate:.4}, allowance {allowance_estimate:.4}, \
                     {radii_checked} radii checked, {}",
                    case.label,
                    case.distance,
                    if violated == 0 { "ok".to_string() } else { format!("{violated} VIOLATIONS") }
                );
            }
        }
    }
    for v in &verification.violations {
        println!(
            "violation: {} at radius {}: certified {:.4} > allowance estimate {:.4}",
            v.label, v.radius, v.certified_accuracy, v.allowance_estimate
        );
    }
    let skipped = verification.cases.iter().filter(|c| c.status == CaseStatus::Skipped).count();
    let summary = VerifySummary {
        model_digest: report.model_digest.clone(),
        checked: verification.cases.len() - skipped,
        skipped,
        ignored,
        verification,
    };
    println!(
        "{} checked, {} skipped, {} violations",
        summary.checked,
        summary.skipped,
        summary.verification.violations.len()
    );
    write_json(&dir.verify(), &summary)?;
    Ok(summary.verification.violations.is_empty())
}
