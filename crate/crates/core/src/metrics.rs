//! Pixel confusion counts, precision/recall/F1 and the evaluation runner.

use std::ops::AddAssign;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{binarize, validate_threshold, BiTemporalSample, ChangeMask, ChangeProbMap};
use crate::error::{Error, Result};

/// Changed pixels are the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(mut self, other: ConfusionCounts) -> Self {
        self += other;
        self
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), ConfusionCounts::merge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn precision_recall_f1(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionCounts> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum confusion counts over the dataset, then compute metrics.
    #[default]
    Micro,
    /// Average per-image metrics.
    Macro,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// Anything that maps a sample to a change-probability map.
pub trait ChangePredictor {
    fn predict(&self, sample: &BiTemporalSample) -> Result<ChangeProbMap>;
}

impl<F> ChangePredictor for F
where
    F: Fn(&BiTemporalSample) -> Result<ChangeProbMap>,
{
    fn predict(&self, sample: &BiTemporalSample) -> Result<ChangeProbMap> {
        self(sample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ImageReport>,
    pub threshold: f64,
    pub aggregation: Aggregation,
}

pub fn evaluate(
    model: &impl ChangePredictor,
    dataset: &[BiTemporalSample],
    threshold: f64,
    aggregation: Aggregation,
) -> Result<Evaluation> {
    validate_threshold(threshold)?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let per_image = dataset
        .iter()
        .map(|s| {
            let pred = binarize(&model.predict(s)?, threshold)?;
            let counts = confusion(&pred, &s.gt)?;
            Ok(ImageReport {
                id: s.id.clone(),
                counts,
                metrics: precision_recall_f1(&counts),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: ConfusionCounts = per_image.iter().map(|r| r.counts).sum();
    let metrics = match aggregation {
        Aggregation::Micro => precision_recall_f1(&counts),
        Aggregation::Macro => {
            let n = per_image.len() as f64;
            let mean = |f: fn(&Metrics) -> f64| per_image.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            Metrics {
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
            }
        }
    };
    Ok(Evaluation {
        metrics,
        counts,
        per_image,
        threshold,
        aggregation,
    })
}

pub fn write_per_image_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "tp", "fp", "fn", "tn", "precision", "recall", "f1"])
        .map_err(csv_err)?;
    for r in &eval.per_image {
        let c = r.counts;
        w.write_record([
            r.id.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            format!("{:.6}", r.metrics.precision),
            format!("{:.6}", r.metrics.recall),
            format!("{:.6}", r.metrics.f1),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_images: usize,
    pub config_hash: String,
}

impl Summary {
    pub fn new(eval: &Evaluation, config_hash: impl Into<String>) -> Self {
        Self {
            precision: eval.metrics.precision,
            recall: eval.metrics.recall,
            f1: eval.metrics.f1,
            threshold: eval.threshold,
            n_images: eval.per_image.len(),
            config_hash: config_hash.into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
