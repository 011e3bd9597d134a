//! `fewshot` command line: train models, evaluate episodes, compute
//! diagnostics, run the ablation grid and backbone sweep, generate
//! synthetic domains, and emit plot data.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fewshot::data::synth::{read_manifest, write_manifest, ShiftKind, ShiftSpec, SynthSpec};
use fewshot::harness::{
    emit_plot_data, load_checkpoint, resolve_dataset, run_ablation, run_backbone_sweep,
    run_experiment, AblationGrid, DatasetRef, EvalTarget, ExperimentConfig, SCALE_NOTE,
};
use fewshot::metrics::{
    aggregate_accuracy, cluster_metrics, export_embeddings, gaussian_kl, MetricsReport,
};
use fewshot::model::{BackboneKind, BackboneSpec, HeadKind, ImageShape};
use fewshot::paradigms::{
    evaluate_episodes, DistanceKind, EvalProtocol, InnerSubset, ParadigmConfig, ParadigmKind,
    TuneConfig,
};

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Desk-scale cross-domain few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on N-way K-shot episodes with test-tuning.
    TuneEval(TuneEvalArgs),
    /// Compute KL / cluster diagnostics (plus episode accuracy) for a
    /// checkpoint on a source/target dataset pair.
    Metrics(MetricsArgs),
    /// Run the projector component ablation grid.
    Ablate(AblateArgs),
    /// Run the backbone sweep (projector full vs none per backbone).
    Sweep(SweepArgs),
    /// Write a synthetic dataset manifest.
    MakeSynth(MakeSynthArgs),
    /// Emit per-dataset plot rows from metric reports.
    PlotData(PlotDataArgs),
}

#[derive(Args)]
struct DatasetArg {
    /// Synthetic dataset manifest (JSON).
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Folder dataset root (one subdirectory per class).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl DatasetArg {
    fn to_ref(&self) -> Result<DatasetRef> {
        match (&self.synth, &self.dataset) {
            (Some(m), None) => Ok(DatasetRef::Synth(read_manifest(m)?)),
            (None, Some(d)) => Ok(DatasetRef::Folder { path: d.clone() }),
            _ => bail!("give exactly one of --synth <manifest> or --dataset <folder>"),
        }
    }
}

fn parse_target(s: &str) -> Result<DatasetRef> {
    let path = PathBuf::from(s);
    if path.extension().is_some_and(|e| e == "json") {
        Ok(DatasetRef::Synth(read_manifest(&path)?))
    } else {
        Ok(DatasetRef::Folder { path })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// nonepisodic | meta | metric
    #[arg(long, default_value = "nonepisodic")]
    paradigm: String,
    /// conv32f-tiny | conv64f
    #[arg(long, default_value = "conv32f-tiny")]
    backbone: String,
    /// Comma list of projector components (input-fc,bn,relu,output-fc),
    /// or "none" / "full".
    #[arg(long, default_value = "full")]
    projector: String,
    #[command(flatten)]
    source: DatasetArg,
    /// Input shape CxHxW for folder datasets (synthetic manifests carry
    /// their own shape).
    #[arg(long, default_value = "3x32x32")]
    shape: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path; the run directory is its parent.
    #[arg(long)]
    out: PathBuf,
    /// linear | cosine
    #[arg(long, default_value = "linear")]
    head: String,
    /// Base learning rate (paradigm default when omitted).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    train_way: Option<usize>,
    #[arg(long)]
    train_shot: Option<usize>,
    #[arg(long)]
    train_query: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    /// all | head_only | body_only
    #[arg(long)]
    inner_subset: Option<String>,
    /// Exact second-order meta-gradients.
    #[arg(long, default_value_t = false)]
    second_order: bool,
    /// sq_euclidean | cosine (metric paradigm)
    #[arg(long)]
    distance: Option<String>,
}

fn build_paradigm(args: &TrainArgs) -> Result<ParadigmConfig> {
    let kind = ParadigmKind::parse(&args.paradigm)?;
    let mut cfg = ParadigmConfig::for_kind(kind);
    cfg.head = HeadKind::parse_cli(&args.head)?;
    cfg.epochs = args.epochs;
    if let Some(lr) = args.lr {
        cfg.outer_lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = args.episodes_per_epoch {
        cfg.episodes_per_epoch = e;
    }
    if let Some(w) = args.train_way {
        cfg.train_way = w;
    }
    if let Some(s) = args.train_shot {
        cfg.train_shot = s;
    }
    if let Some(q) = args.train_query {
        cfg.train_query = q;
    }
    if let Some(a) = args.inner_lr {
        cfg.inner_lr = a;
    }
    if let Some(s) = args.inner_steps {
        cfg.inner_steps = s;
    }
    if let Some(sub) = &args.inner_subset {
        cfg.inner_subset = InnerSubset::parse(sub)?;
    }
    cfg.second_order = args.second_order;
    if let Some(d) = &args.distance {
        cfg.distance = DistanceKind::parse(d)?;
    }
    Ok(cfg)
}

fn source_shape(source: &DatasetRef, flag_shape: &str) -> Result<ImageShape> {
    match source {
        DatasetRef::Synth(s) => Ok(s.shape),
        DatasetRef::Folder { .. } => Ok(ImageShape::parse(flag_shape)?),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let source = args.source.to_ref()?;
    let shape = source_shape(&source, &args.shape)?;
    let backbone = BackboneSpec::new(BackboneKind::parse(&args.backbone)?, shape);
    let d = backbone.feature_dim()?;
    let projector = fewshot::model::ProjectorConfig::parse(&args.projector, d)
        .map_err(|e| anyhow::anyhow!(e))?;
    let run_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let cfg = ExperimentConfig {
        paradigm: build_paradigm(&args)?,
        backbone,
        projector,
        source,
        targets: vec![],
        eval: EvalProtocol::default(),
        tune: TuneConfig::default(),
        metrics_subsample: 2000,
        seed: args.seed,
        out_dir: run_dir,
    };
    let out = run_experiment(&cfg)?;
    if out.checkpoint_path != args.out {
        std::fs::rename(&out.checkpoint_path, &args.out)
            .or_else(|_| std::fs::copy(&out.checkpoint_path, &args.out).map(|_| ()))
            .context("placing checkpoint at --out")?;
    }
    for r in &out.history.records {
        match r.accuracy {
            Some(a) => println!(
                "epoch={} loss={:.6} acc={:.4} lr={:.6} wall_s={:.2}",
                r.epoch, r.loss, a, r.lr, r.wall_s
            ),
            None => println!(
                "epoch={} loss={:.6} lr={:.6} wall_s={:.2}",
                r.epoch, r.loss, r.lr, r.wall_s
            ),
        }
    }
    println!("checkpoint: {} (config_hash {})", args.out.display(), out.config_hash);
    Ok(())
}

#[derive(Args)]
struct TuneEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    target: DatasetArg,
    #[arg(long, default_value = "3x32x32")]
    shape: String,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    tune_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    tune_lr: f64,
    /// Where to write the accuracy report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct AccuracyReport {
    dataset: String,
    mean_accuracy: f64,
    ci95_half_width: f64,
    episodes: usize,
    way: usize,
    shot: usize,
    query: usize,
    tune_steps: usize,
    config_hash: String,
    scale: String,
}

fn cmd_tune_eval(args: TuneEvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let target_ref = args.target.to_ref()?;
    let target = resolve_dataset(&target_ref, loaded.bundle.arch.spec.input_shape)?;
    let protocol = EvalProtocol {
        way: args.way,
        shot: args.shot,
        query: args.query,
        episodes: args.episodes,
    };
    let tune = TuneConfig {
        tune_steps: args.tune_steps,
        tune_lr: args.tune_lr,
        ..TuneConfig::default()
    };
    let accs = evaluate_episodes(&loaded.bundle, &target, &protocol, &tune, loaded.bundle.seed)?;
    let (mean, ci) = aggregate_accuracy(&accs)?;
    println!(
        "{}: accuracy {:.4} +/- {:.4} over {} episodes ({}-way {}-shot)",
        target.name(),
        mean,
        ci,
        accs.len(),
        args.way,
        args.shot
    );
    if let Some(path) = args.report {
        let report = AccuracyReport {
            dataset: target.name().to_string(),
            mean_accuracy: mean,
            ci95_half_width: ci,
            episodes: accs.len(),
            way: args.way,
            shot: args.shot,
            query: args.query,
            tune_steps: args.tune_steps,
            config_hash: loaded.config_hash.clone(),
            scale: SCALE_NOTE.to_string(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source dataset: synth manifest (.json) or folder.
    #[arg(long)]
    source_dataset: String,
    /// Target dataset: synth manifest (.json) or folder.
    #[arg(long)]
    target_dataset: String,
    #[arg(long, default_value_t = 2000)]
    subsample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optionally export target-features for external visualization.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let shape = loaded.bundle.arch.spec.input_shape;
    let source = resolve_dataset(&parse_target(&args.source_dataset)?, shape)?;
    let target = resolve_dataset(&parse_target(&args.target_dataset)?, shape)?;
    let source_sample = fewshot::harness::dataset_feature_sample(&loaded.bundle, &source)?
        .subsample(args.subsample, args.seed);
    let target_full = fewshot::harness::dataset_feature_sample(&loaded.bundle, &target)?;
    let target_sample = target_full.subsample(args.subsample, args.seed);
    let kl = gaussian_kl(&source_sample, &target_sample)?;
    let cm = cluster_metrics(&target_sample)?;
    let protocol = EvalProtocol {
        way: args.way,
        shot: args.shot,
        query: args.query,
        episodes: args.episodes,
    };
    let accs = evaluate_episodes(
        &loaded.bundle,
        &target,
        &protocol,
        &TuneConfig::default(),
        loaded.bundle.seed,
    )?;
    let (mean, ci) = aggregate_accuracy(&accs)?;
    let report = MetricsReport {
        dataset: target.name().to_string(),
        mean_accuracy: mean,
        ci95_half_width: ci,
        kl_divergence: kl,
        d1: cm.d1,
        v: cm.v,
        r: cm.r,
        episodes: accs.len(),
        way: args.way,
        shot: args.shot,
        config_hash: loaded.config_hash.clone(),
        scale: SCALE_NOTE.to_string(),
    };
    report.save(&args.out)?;
    println!(
        "{}: acc {:.4}+/-{:.4}  kl {:.4}  d1 {:.4}  v {:.4}  r {:.4} -> {}",
        report.dataset, mean, ci, kl, cm.d1, cm.v, cm.r,
        args.out.display()
    );
    if let Some(path) = args.export_embeddings {
        export_embeddings(&target_full, &path)?;
        println!("embeddings: {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    source: DatasetArg,
    /// Evaluation target: synth manifest (.json) or folder (repeatable).
    #[arg(long = "target")]
    targets: Vec<String>,
    #[arg(long, default_value = "3x32x32")]
    shape: String,
    #[arg(long, default_value = "conv32f-tiny")]
    backbone: String,
    #[arg(long, default_value = "nonepisodic")]
    paradigm: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long)]
    out: PathBuf,
}

impl ExperimentArgs {
    fn to_config(&self) -> Result<ExperimentConfig> {
        let source = self.source.to_ref()?;
        let shape = source_shape(&source, &self.shape)?;
        let backbone = BackboneSpec::new(BackboneKind::parse(&self.backbone)?, shape);
        let d = backbone.feature_dim()?;
        let mut paradigm = ParadigmConfig::for_kind(ParadigmKind::parse(&self.paradigm)?);
        paradigm.epochs = self.epochs;
        if let Some(lr) = self.lr {
            paradigm.outer_lr = lr;
        }
        let targets = self
            .targets
            .iter()
            .map(|t| Ok(EvalTarget { dataset: parse_target(t)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentConfig {
            paradigm,
            backbone,
            projector: fewshot::model::ProjectorConfig::full(d),
            source,
            targets,
            eval: EvalProtocol {
                way: self.way,
                shot: self.shot,
                query: self.query,
                episodes: self.episodes,
            },
            tune: TuneConfig::default(),
            metrics_subsample: 2000,
            seed: self.seed,
            out_dir: self.out.clone(),
        })
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = args.exp.to_config()?;
    if base.targets.is_empty() {
        bail!("ablate needs at least one --target");
    }
    let rows = run_ablation(&base, &AblationGrid::table4())?;
    println!("{:<6} {:<28} {:>10} {:>10}", "row", "components", "accuracy", "delta");
    for r in &rows {
        println!(
            "{:<6} {:<28} {:>10.6} {:>+10.6}",
            r.label, r.components, r.mean_accuracy, r.delta_vs_baseline
        );
    }
    println!("table: {}", fewshot::harness::resolve_out_dir(&base.out_dir).join("ablation.txt").display());
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Comma list of backbones.
    #[arg(long, default_value = "conv32f-tiny,conv64f")]
    backbones: String,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = args.exp.to_config()?;
    if base.targets.is_empty() {
        bail!("sweep needs at least one --target");
    }
    let kinds = args
        .backbones
        .split(',')
        .map(BackboneKind::parse)
        .collect::<fewshot::Result<Vec<_>>>()?;
    let rows = run_backbone_sweep(&base, &kinds)?;
    println!("{:<14} {:>10} {:>10} {:>10}", "backbone", "full", "none", "delta");
    for r in &rows {
        println!(
            "{:<14} {:>10.6} {:>10.6} {:>+10.6}",
            r.backbone, r.accuracy_full, r.accuracy_none, r.delta
        );
    }
    Ok(())
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    items: usize,
    #[arg(long, default_value = "3x32x32")]
    shape: String,
    /// none | channel-affine | hue-like-permutation | blur
    #[arg(long, default_value = "none")]
    shift_kind: String,
    #[arg(long, default_value_t = 0.0)]
    shift_magnitude: f64,
    #[arg(long, default_value_t = 0)]
    shift_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    /// Manifest output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn cmd_make_synth(args: MakeSynthArgs) -> Result<()> {
    let shift = ShiftSpec {
        kind: ShiftKind::parse(&args.shift_kind)?,
        magnitude: args.shift_magnitude,
        seed: args.shift_seed,
    };
    let spec = SynthSpec {
        name: args.name.unwrap_or_else(|| {
            format!("synth-{}-{}{}", args.seed, shift.kind, args.shift_magnitude)
        }),
        base_seed: args.seed,
        classes: args.classes,
        items_per_class: args.items,
        shape: ImageShape::parse(&args.shape)?,
        shift,
    };
    spec.validate()?;
    write_manifest(&args.out, &spec)?;
    println!(
        "manifest: {} ({} classes x {} items, shift {} {})",
        args.out.display(),
        spec.classes,
        spec.items_per_class,
        spec.shift.kind,
        spec.shift.magnitude
    );
    Ok(())
}

#[derive(Args)]
struct PlotDataArgs {
    /// Metric report files (JSON), repeatable.
    #[arg(long = "report", required = true)]
    reports: Vec<PathBuf>,
    /// Reject reports whose config hash mismatches this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_plot_data(args: PlotDataArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &args.reports {
        reports.push(MetricsReport::load(p)?);
    }
    if let Some(ckpt_path) = &args.checkpoint {
        let ckpt = load_checkpoint(ckpt_path)?;
        for r in &reports {
            if r.config_hash != ckpt.config_hash {
                return Err(fewshot::Error::ProvenanceMismatch {
                    report: r.config_hash.clone(),
                    checkpoint: ckpt.config_hash.clone(),
                }
                .into());
            }
        }
    }
    emit_plot_data(&reports, &args.out)?;
    println!("plot data: {} ({} rows)", args.out.display(), reports.len());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::TuneEval(a) => cmd_tune_eval(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::MakeSynth(a) => cmd_make_synth(a),
        Command::PlotData(a) => cmd_plot_data(a),
    }
}
