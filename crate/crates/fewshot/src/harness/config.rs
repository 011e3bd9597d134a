//! Experiment configuration with canonical serialization and hashing.
//!
//! A config flattens to sorted `key = value` lines; the SHA-256 of that
//! text is the config hash embedded in every checkpoint and report the
//! run produces. The output directory is a runtime location, not an
//! experiment parameter, so it stays out of the canonical form.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{BackboneKind, BackboneSpec, ProjectorConfig};
use crate::paradigms::{EvalProtocol, ParadigmConfig, TuneConfig};

/// A dataset the harness can resolve: a synthetic spec (regenerated
/// bit-exactly from its seeds) or an on-disk class-per-folder tree.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRef {
    Synth(SynthSpec),
    Folder { path: PathBuf },
}

impl DatasetRef {
    pub fn name(&self) -> String {
        match self {
            DatasetRef::Synth(s) => s.name.clone(),
            DatasetRef::Folder { path } => path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "folder".into()),
        }
    }
}

/// An evaluation target paired with the episode protocol it uses.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalTarget {
    pub dataset: DatasetRef,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub paradigm: ParadigmConfig,
    pub backbone: BackboneSpec,
    pub projector: ProjectorConfig,
    pub source: DatasetRef,
    pub targets: Vec<EvalTarget>,
    pub eval: EvalProtocol,
    pub tune: TuneConfig,
    /// Rows used per dataset when fitting diagnostic Gaussians.
    pub metrics_subsample: usize,
    pub seed: u64,
    #[serde(skip_serializing, default)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Enumerates every violated field before failing.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::InvalidConfig(ps)) = self.paradigm.validate() {
            problems.extend(ps);
        }
        match self.backbone.feature_dim() {
            Ok(d) => {
                if self.projector.feature_dim != d {
                    problems.push(format!(
                        "projector feature_dim {} != backbone feature_dim {}",
                        self.projector.feature_dim, d
                    ));
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
        if self.eval.way < 2 {
            problems.push(format!("eval way must be >= 2, got {}", self.eval.way));
        }
        if self.eval.shot == 0 || self.eval.query == 0 || self.eval.episodes == 0 {
            problems.push(format!(
                "eval protocol shot={} query={} episodes={} is degenerate",
                self.eval.shot, self.eval.query, self.eval.episodes
            ));
        }
        if let Err(Error::InvalidConfig(ps)) = self.tune.validate() {
            problems.extend(ps);
        }
        if self.metrics_subsample < 2 {
            problems.push(format!(
                "metrics_subsample must be >= 2, got {}",
                self.metrics_subsample
            ));
        }
        for r in std::iter::once(&self.source).chain(self.targets.iter().map(|t| &t.dataset)) {
            if let DatasetRef::Synth(s) = r {
                if let Err(Error::InvalidConfig(ps)) = s.validate() {
                    problems.extend(ps);
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Flat, order-independent `key = value` text; hashing input.
    pub fn canonical_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten_value("", &value, &mut lines);
        lines.sort();
        let mut out = String::new();
        for l in &lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_kv().as_bytes());
        crate::data::hex_string(&h.finalize())
    }
}

fn flatten_value(prefix: &str, value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_value(&key, v, out);
            }
        }
        serde_json::Value::Array(items) => {
            out.push(format!("{prefix}.len = {}", items.len()));
            for (i, v) in items.iter().enumerate() {
                flatten_value(&format!("{prefix}[{i}]"), v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Projector variants evaluated by the component ablation, with row
/// labels. `table4()` holds the canonical eight rows (a)..(g) plus the
/// full MLP.
#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub rows: Vec<(String, [bool; 4])>,
}

impl AblationGrid {
    /// Rows: (a) none; (b) input FC; (c) input FC+BN; (d) input
    /// FC+ReLU; (e) input FC+BN+output FC; (f) input FC+ReLU+output FC;
    /// (g) input FC+BN+ReLU; (h) full MLP.
    pub fn table4() -> Self {
        let rows = vec![
            ("a".to_string(), [false, false, false, false]),
            ("b".to_string(), [true, false, false, false]),
            ("c".to_string(), [true, true, false, false]),
            ("d".to_string(), [true, false, true, false]),
            ("e".to_string(), [true, true, false, true]),
            ("f".to_string(), [true, false, true, true]),
            ("g".to_string(), [true, true, true, false]),
            ("h".to_string(), [true, true, true, true]),
        ];
        Self { rows }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (label, _) in &self.rows {
            if !seen.insert(label.clone()) {
                return Err(Error::DuplicateRowLabel(label.clone()));
            }
        }
        Ok(())
    }
}

/// Projector config for a flag row at a given width.
pub fn projector_from_flags(flags: [bool; 4], feature_dim: usize) -> ProjectorConfig {
    ProjectorConfig {
        input_fc: flags[0],
        bn: flags[1],
        relu: flags[2],
        output_fc: flags[3],
        feature_dim,
    }
}

/// The run-root environment variable: relative output directories are
/// created beneath it.
pub const RUN_ROOT_ENV: &str = "FEWSHOT_RUN_ROOT";

pub fn resolve_out_dir(out_dir: &std::path::Path) -> PathBuf {
    if out_dir.is_absolute() {
        return out_dir.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(out_dir),
        None => out_dir.to_path_buf(),
    }
}

/// A ready-made desk-scale config: conv32f-tiny on a synthetic 8-class
/// source, one channel-affine-shifted novel-class target.
pub fn smoke_config(seed: u64, out_dir: PathBuf) -> ExperimentConfig {
    use crate::data::synth::{ShiftKind, ShiftSpec};
    use crate::model::ImageShape;

    let shape = ImageShape::new(3, 32, 32);
    let backbone = BackboneSpec::new(BackboneKind::Conv32fTiny, shape);
    let d = backbone.feature_dim().expect("32x32 input is large enough");
    ExperimentConfig {
        paradigm: ParadigmConfig::non_episodic(),
        backbone,
        projector: ProjectorConfig::full(d),
        source: DatasetRef::Synth(SynthSpec {
            name: "synth-source".into(),
            base_seed: 100,
            classes: 8,
            items_per_class: 40,
            shape,
            shift: ShiftSpec::none(),
        }),
        targets: vec![EvalTarget {
            dataset: DatasetRef::Synth(SynthSpec {
                name: "synth-target-affine".into(),
                base_seed: 200,
                classes: 8,
                items_per_class: 20,
                shape,
                shift: ShiftSpec {
                    kind: ShiftKind::ChannelAffine,
                    magnitude: 0.5,
                    seed: 7,
                },
            }),
        }],
        eval: EvalProtocol::default(),
        tune: TuneConfig::default(),
        metrics_subsample: 2000,
        seed,
        out_dir,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_out_dir_and_is_stable() {
        let a = smoke_config(1, PathBuf::from("runs/a"));
        let b = smoke_config(1, PathBuf::from("elsewhere/b"));
        assert_eq!(a.config_hash(), b.config_hash());
        let c = smoke_config(2, PathBuf::from("runs/a"));
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn canonical_form_is_sorted_flat_kv() {
        let cfg = smoke_config(1, PathBuf::from("runs"));
        let text = cfg.canonical_kv();
        let lines: Vec<&str> = text.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        assert!(lines.iter().all(|l| l.contains(" = ")));
        assert!(text.contains("seed = 1"));
    }

    #[test]
    fn validation_enumerates_all_problems() {
        let mut cfg = smoke_config(1, PathBuf::from("runs"));
        cfg.paradigm.epochs = 0;
        cfg.eval.way = 1;
        cfg.metrics_subsample = 0;
        match cfg.validate() {
            Err(Error::InvalidConfig(problems)) => {
                assert!(problems.len() >= 3, "got {problems:?}");
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn table4_grid_has_eight_unique_rows() {
        let grid = AblationGrid::table4();
        assert_eq!(grid.rows.len(), 8);
        grid.validate().unwrap();
        assert_eq!(grid.rows[0].1, [false; 4]);
        assert_eq!(grid.rows[7].1, [true; 4]);
        // row (e): input FC + BN + output FC
        assert_eq!(grid.rows[4].1, [true, true, false, true]);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let grid = AblationGrid {
            rows: vec![
                ("x".into(), [false; 4]),
                ("x".into(), [true; 4]),
            ],
        };
        assert!(matches!(grid.validate(), Err(Error::DuplicateRowLabel(_))));
    }
}
