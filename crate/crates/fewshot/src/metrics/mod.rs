//! Transferability diagnostics: feature-distribution KL divergence,
//! cluster compactness (D1, V, r) and accuracy aggregation.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Extracted features with integer class labels.
#[derive(Clone, Debug)]
pub struct FeatureSample {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub dataset: String,
}

impl FeatureSample {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, dataset: impl Into<String>) -> Result<Self> {
        let n = features.dim().0;
        if n < 2 {
            return Err(Error::SampleTooSmall { needed: 2, got: n });
        }
        assert_eq!(n, labels.len(), "one label per feature row");
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmptyInput("feature sample contains non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            dataset: dataset.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.features.dim().1
    }

    pub fn len(&self) -> usize {
        self.features.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic row subsample (without replacement) of at most
    /// `max_rows` rows.
    pub fn subsample(&self, max_rows: usize, seed: u64) -> FeatureSample {
        if self.len() <= max_rows {
            return self.clone();
        }
        let mut rng = crate::rng::stream(seed, "feature-subsample");
        let mut picks = crate::rng::sample_distinct(&mut rng, self.len(), max_rows);
        picks.sort_unstable();
        let mut feats = Array2::zeros((max_rows, self.dim()));
        let mut labels = Vec::with_capacity(max_rows);
        for (row, &i) in picks.iter().enumerate() {
            feats.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        FeatureSample {
            features: feats,
            labels,
            dataset: self.dataset.clone(),
        }
    }
}

/// Collapsed feature dimensions would otherwise give infinite KL.
const VAR_FLOOR: f64 = 1e-8;

fn moments(features: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = features.dim();
    let mut mean = vec![0.0; d];
    for row in features.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in features.rows() {
        for ((vv, v), m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let dlt = v - m;
            *vv += dlt * dlt;
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / n as f64).max(VAR_FLOOR));
    (mean, var)
}

/// Closed-form KL(target || source) between diagonal Gaussians fitted
/// to the two samples.
pub fn gaussian_kl(source: &FeatureSample, target: &FeatureSample) -> Result<f64> {
    if source.dim() != target.dim() {
        return Err(Error::DimMismatch {
            left: source.dim(),
            right: target.dim(),
        });
    }
    let (mu_s, var_s) = moments(&source.features);
    let (mu_t, var_t) = moments(&target.features);
    let mut kl = 0.0;
    for i in 0..mu_s.len() {
        let dm = mu_t[i] - mu_s[i];
        kl += 0.5 * ((var_s[i] / var_t[i]).ln() + (var_t[i] + dm * dm) / var_s[i] - 1.0);
    }
    Ok(kl.max(0.0))
}

/// Which pairs define the inter-class distance in `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterClassMode {
    /// Mean pairwise distance between class centroids (default reading).
    CentroidPairs,
    /// Mean pairwise distance between items of different classes.
    ItemPairs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterMetrics {
    /// Mean over classes of mean intra-class pairwise L2 distance.
    pub d1: f64,
    /// Mean over classes of mean squared distance to the class centroid.
    pub v: f64,
    /// `d1` divided by the inter-class distance.
    pub r: f64,
}

pub fn cluster_metrics(sample: &FeatureSample) -> Result<ClusterMetrics> {
    cluster_metrics_with_mode(sample, InterClassMode::CentroidPairs)
}

pub fn cluster_metrics_with_mode(
    sample: &FeatureSample,
    mode: InterClassMode,
) -> Result<ClusterMetrics> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (row, &label) in sample.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(row);
    }
    if by_class.len() < 2 {
        return Err(Error::TooFewClasses {
            dataset: sample.dataset.clone(),
            available: by_class.len(),
            needed: 2,
        });
    }
    let feats = &sample.features;
    let dist = |a: usize, b: usize| -> f64 {
        feats
            .row(a)
            .iter()
            .zip(feats.row(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    let mut d1_sum = 0.0;
    let mut v_sum = 0.0;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(by_class.len());
    for rows in by_class.values() {
        // single-item classes contribute zero to both D1 and V
        if rows.len() >= 2 {
            let mut pair_sum = 0.0;
            let mut pairs = 0usize;
            for (i, &a) in rows.iter().enumerate() {
                for &b in rows.iter().skip(i + 1) {
                    pair_sum += dist(a, b);
                    pairs += 1;
                }
            }
            d1_sum += pair_sum / pairs as f64;
        }
        let mut centroid = vec![0.0; sample.dim()];
        for &row in rows {
            for (c, v) in centroid.iter_mut().zip(feats.row(row).iter()) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= rows.len() as f64);
        let mut sq = 0.0;
        for &row in rows {
            sq += feats
                .row(row)
                .iter()
                .zip(centroid.iter())
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>();
        }
        v_sum += sq / rows.len() as f64;
        centroids.push(centroid);
    }
    let n_classes = by_class.len() as f64;
    let d1 = d1_sum / n_classes;
    let v = v_sum / n_classes;

    let inter = match mode {
        InterClassMode::CentroidPairs => {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..centroids.len() {
                for j in (i + 1)..centroids.len() {
                    sum += centroids[i]
                        .iter()
                        .zip(centroids[j].iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    pairs += 1;
                }
            }
            sum / pairs as f64
        }
        InterClassMode::ItemPairs => {
            let groups: Vec<&Vec<usize>> = by_class.values().collect();
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..groups.len() {
                for j in (i + 1)..groups.len() {
                    for &a in groups[i] {
                        for &b in groups[j] {
                            sum += dist(a, b);
                            pairs += 1;
                        }
                    }
                }
            }
            sum / pairs as f64
        }
    };
    let r = if inter > 0.0 {
        d1 / inter
    } else if d1 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ClusterMetrics { d1, v, r })
}

/// Mean episode accuracy with a 95% normal-approximation half-width
/// `1.96 * std / sqrt(n)`.
pub fn aggregate_accuracy(accuracies: &[f64]) -> Result<(f64, f64)> {
    if accuracies.is_empty() {
        return Err(Error::EmptyInput("accuracy list"));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Write features as self-describing columnar text:
/// a `# dataset=... count=... dim=...` header, then one
/// `label v_1 .. v_d` row per item.
pub fn export_embeddings(sample: &FeatureSample, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "# dataset={} count={} dim={}",
        sample.dataset,
        sample.len(),
        sample.dim()
    )?;
    for (row, &label) in sample.features.rows().into_iter().zip(sample.labels.iter()) {
        write!(out, "{label}")?;
        for v in row.iter() {
            write!(out, " {v:.12e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Read a file produced by [`export_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<FeatureSample> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or(Error::EmptyInput("embedding file"))??;
    let mut dataset = String::new();
    let mut count = 0usize;
    let mut dim = 0usize;
    for part in header.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = part.split_once('=') {
            match k {
                "dataset" => dataset = v.to_string(),
                "count" => count = v.parse().unwrap_or(0),
                "dim" => dim = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }
    let mut feats = Array2::zeros((count, dim));
    let mut labels = Vec::with_capacity(count);
    for (row, line) in lines.enumerate() {
        let line = line?;
        let mut toks = line.split_whitespace();
        let label: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(Error::EmptyInput("embedding row label"))?;
        labels.push(label);
        for (col, tok) in toks.enumerate() {
            feats[[row, col]] = tok
                .parse()
                .map_err(|_| Error::EmptyInput("embedding row value"))?;
        }
    }
    FeatureSample::new(feats, labels, dataset)
}

/// One (model, dataset) evaluation record; flat, JSON-serialized.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    pub kl_divergence: f64,
    pub d1: f64,
    pub v: f64,
    pub r: f64,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub config_hash: String,
    /// Reports label themselves honestly: protocol fidelity at desk
    /// scale, not paper-scale results.
    pub scale: String,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
