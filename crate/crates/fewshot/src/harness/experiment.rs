//! Composing modules into reproducible runs: training, episodic
//! evaluation, diagnostics, the component ablation grid and the
//! backbone sweep.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{folder::load_folder_dataset, make_synthetic_domain, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_accuracy, cluster_metrics, gaussian_kl, FeatureSample, MetricsReport,
};
use crate::model::{BackboneKind, BackboneSpec, ModelBundle};
use crate::paradigms::{
    evaluate_episodes, pretrain_nonepisodic, train_meta, train_metric, tune::feature_cache,
    ParadigmKind, TrainingHistory,
};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{
    projector_from_flags, resolve_out_dir, AblationGrid, DatasetRef, ExperimentConfig,
};

/// Every report and log line marks itself as a desk-scale run.
pub const SCALE_NOTE: &str = "desk-scale (protocol fidelity, not paper-scale results)";

pub fn resolve_dataset(r: &DatasetRef, shape: crate::model::ImageShape) -> Result<LabeledDataset> {
    match r {
        DatasetRef::Synth(spec) => make_synthetic_domain(spec),
        DatasetRef::Folder { path } => load_folder_dataset(path, shape),
    }
}

/// Evaluation-path features for a whole dataset, labeled by class index.
pub fn dataset_feature_sample(
    bundle: &ModelBundle,
    dataset: &LabeledDataset,
) -> Result<FeatureSample> {
    let cache = feature_cache(bundle, dataset, 64)?;
    let labels = dataset.all_indices().iter().map(|&(c, _)| c).collect();
    FeatureSample::new(cache.features, labels, dataset.name())
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
    pub history: TrainingHistory,
    pub reports: Vec<MetricsReport>,
    pub checkpoint_path: PathBuf,
}

fn write_train_log(path: &Path, hash: &str, history: &TrainingHistory) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# config_hash={hash} scale={SCALE_NOTE:?}")?;
    for r in &history.records {
        match r.accuracy {
            Some(acc) => writeln!(
                f,
                "epoch={} loss={:.9} acc={:.6} lr={:.9} wall_s={:.3}",
                r.epoch, r.loss, acc, r.lr, r.wall_s
            )?,
            None => writeln!(
                f,
                "epoch={} loss={:.9} lr={:.9} wall_s={:.3}",
                r.epoch, r.loss, r.lr, r.wall_s
            )?,
        }
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Train per the configured paradigm, evaluate every target, write
/// checkpoint + log + per-target reports into the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = resolve_out_dir(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    let hash = cfg.config_hash();
    std::fs::write(dir.join("config.txt"), cfg.canonical_kv())?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let source = resolve_dataset(&cfg.source, cfg.backbone.input_shape)?;
    let num_classes = match cfg.paradigm.kind {
        ParadigmKind::NonEpisodic => source.num_classes(),
        ParadigmKind::Meta | ParadigmKind::Metric => cfg.paradigm.train_way,
    };
    let mut bundle = ModelBundle::new(
        cfg.backbone,
        cfg.projector,
        cfg.paradigm.head,
        num_classes,
        cfg.seed,
    )?;
    let history = match cfg.paradigm.kind {
        ParadigmKind::NonEpisodic => pretrain_nonepisodic(&mut bundle, &source, &cfg.paradigm)?,
        ParadigmKind::Meta => train_meta(&mut bundle, &source, &cfg.paradigm)?,
        ParadigmKind::Metric => train_metric(&mut bundle, &source, &cfg.paradigm)?,
    };
    write_train_log(&dir.join("train_log.txt"), &hash, &history)?;
    let checkpoint_path = dir.join("checkpoint.json");
    save_checkpoint(&checkpoint_path, &bundle, cfg.paradigm.kind, &hash)?;

    let mut reports = Vec::new();
    if !cfg.targets.is_empty() {
        let reports_dir = dir.join("reports");
        std::fs::create_dir_all(&reports_dir)?;
        let source_sample = dataset_feature_sample(&bundle, &source)?
            .subsample(cfg.metrics_subsample, cfg.seed);
        for target_ref in &cfg.targets {
            let target = resolve_dataset(&target_ref.dataset, cfg.backbone.input_shape)?;
            let accs = evaluate_episodes(&bundle, &target, &cfg.eval, &cfg.tune, cfg.seed)?;
            let (mean, ci) = aggregate_accuracy(&accs)?;
            let target_sample =
                dataset_feature_sample(&bundle, &target)?.subsample(cfg.metrics_subsample, cfg.seed);
            let kl = gaussian_kl(&source_sample, &target_sample)?;
            let cm = cluster_metrics(&target_sample)?;
            let report = MetricsReport {
                dataset: target.name().to_string(),
                mean_accuracy: mean,
                ci95_half_width: ci,
                kl_divergence: kl,
                d1: cm.d1,
                v: cm.v,
                r: cm.r,
                episodes: accs.len(),
                way: cfg.eval.way,
                shot: cfg.eval.shot,
                config_hash: hash.clone(),
                scale: SCALE_NOTE.to_string(),
            };
            report.save(&reports_dir.join(format!("{}.json", sanitize(target.name()))))?;
            reports.push(report);
        }
    }
    Ok(RunOutput {
        dir,
        config_hash: hash,
        history,
        reports,
        checkpoint_path,
    })
}

/// Reload a run's report from disk, rejecting it when its hash does not
/// match the run's checkpoint.
pub fn load_report_checked(run_dir: &Path, dataset_name: &str) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(&run_dir.join("checkpoint.json"))?;
    let report = MetricsReport::load(
        &run_dir
            .join("reports")
            .join(format!("{}.json", sanitize(dataset_name))),
    )?;
    if report.config_hash != ckpt.config_hash {
        return Err(Error::ProvenanceMismatch {
            report: report.config_hash,
            checkpoint: ckpt.config_hash,
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub components: String,
    pub mean_accuracy: f64,
    pub delta_vs_baseline: f64,
    pub config_hash: String,
}

fn mean_report_accuracy(reports: &[MetricsReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("reports (ablation needs >= 1 target)"));
    }
    Ok(reports.iter().map(|r| r.mean_accuracy).sum::<f64>() / reports.len() as f64)
}

/// One run per grid row with shared seed (hence shared extractor init,
/// data order and evaluation episodes); emits mean accuracies with
/// deltas against the first row.
pub fn run_ablation(base: &ExperimentConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let d = base.backbone.feature_dim()?;
    let base_dir = resolve_out_dir(&base.out_dir);
    let mut rows = Vec::with_capacity(grid.rows.len());
    for (label, flags) in &grid.rows {
        let mut cfg = base.clone();
        cfg.projector = projector_from_flags(*flags, d);
        cfg.out_dir = base_dir.join(format!("row-{label}"));
        let out = run_experiment(&cfg)?;
        // reports are re-read through the provenance check on purpose
        let reports: Vec<MetricsReport> = out
            .reports
            .iter()
            .map(|r| load_report_checked(&out.dir, &r.dataset))
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            label: label.clone(),
            components: cfg.projector.to_string(),
            mean_accuracy: mean_report_accuracy(&reports)?,
            delta_vs_baseline: 0.0,
            config_hash: out.config_hash,
        });
    }
    let baseline = rows[0].mean_accuracy;
    for row in &mut rows {
        row.delta_vs_baseline = row.mean_accuracy - baseline;
    }
    write_ablation_table(&base_dir, &rows)?;
    Ok(rows)
}

fn write_ablation_table(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(rows)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("ablation.txt"))?);
    writeln!(f, "# projector component ablation  scale={SCALE_NOTE:?}")?;
    writeln!(f, "{:<6} {:<32} {:>10} {:>10}  config_hash", "row", "components", "accuracy", "delta")?;
    for r in rows {
        writeln!(
            f,
            "{:<6} {:<32} {:>10.6} {:>+10.6}  {}",
            r.label, r.components, r.mean_accuracy, r.delta_vs_baseline, r.config_hash
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub backbone: String,
    pub accuracy_full: f64,
    pub accuracy_none: f64,
    pub delta: f64,
    pub hash_full: String,
    pub hash_none: String,
}

/// For each backbone, a paired run with the full projector and with no
/// projector; the pair shares the seed so the delta isolates the
/// projector.
pub fn run_backbone_sweep(
    base: &ExperimentConfig,
    backbones: &[BackboneKind],
) -> Result<Vec<SweepRow>> {
    let base_dir = resolve_out_dir(&base.out_dir);
    let mut rows = Vec::with_capacity(backbones.len());
    for &kind in backbones {
        let spec = BackboneSpec::new(kind, base.backbone.input_shape);
        let d = spec.feature_dim()?;
        let run_one = |flags: [bool; 4], tag: &str| -> Result<(f64, String)> {
            let mut cfg = base.clone();
            cfg.backbone = spec;
            cfg.projector = projector_from_flags(flags, d);
            cfg.out_dir = base_dir.join(format!("{kind}-{tag}"));
            let out = run_experiment(&cfg)?;
            Ok((mean_report_accuracy(&out.reports)?, out.config_hash))
        };
        let (acc_full, hash_full) = run_one([true; 4], "full")?;
        let (acc_none, hash_none) = run_one([false; 4], "none")?;
        rows.push(SweepRow {
            backbone: kind.to_string(),
            accuracy_full: acc_full,
            accuracy_none: acc_none,
            delta: acc_full - acc_none,
            hash_full,
            hash_none,
        });
    }
    std::fs::create_dir_all(&base_dir)?;
    std::fs::write(
        base_dir.join("sweep.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(base_dir.join("sweep.txt"))?);
    writeln!(f, "# backbone sweep (projector full vs none)  scale={SCALE_NOTE:?}")?;
    writeln!(
        f,
        "{:<14} {:>10} {:>10} {:>10}",
        "backbone", "full", "none", "delta"
    )?;
    for r in &rows {
        writeln!(
            f,
            "{:<14} {:>10.6} {:>10.6} {:>+10.6}",
            r.backbone, r.accuracy_full, r.accuracy_none, r.delta
        )?;
    }
    Ok(rows)
}

/// Per-dataset `(dataset, kl, accuracy, ci)` rows, sorted by dataset
/// name for stable diffs.
pub fn emit_plot_data(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("reports"));
    }
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.dataset.cmp(&b.dataset));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "dataset kl accuracy ci config_hash")?;
    for r in sorted {
        writeln!(
            f,
            "{} {:.9e} {:.9e} {:.9e} {}",
            sanitize(&r.dataset), r.kl_divergence, r.mean_accuracy, r.ci95_half_width, r.config_hash
        )?;
    }
    Ok(())
}

/// Parse a file written by [`emit_plot_data`]:
/// `(dataset, kl, accuracy, ci)` per row.
pub fn read_plot_data(path: &Path) -> Result<Vec<(String, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            continue;
        }
        rows.push((
            toks[0].to_string(),
            toks[1].parse().map_err(|_| Error::EmptyInput("plot kl"))?,
            toks[2].parse().map_err(|_| Error::EmptyInput("plot accuracy"))?,
            toks[3].parse().map_err(|_| Error::EmptyInput("plot ci"))?,
        ));
    }
    Ok(rows)
}
