//! Per-shape R², threshold classification and dataset reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchyCache;
use crate::jsonfmt;
use crate::meshgraph::{DatasetManifest, Split};
use crate::model::{prepare, ForwardOptions, Model};

pub const HIST_BINS: usize = 40;

/// Coefficient of determination. `None` marks a degenerate shape whose
/// targets are constant while the prediction is not exact.
pub fn r2_score(y: &[f64], f: &[f64]) -> Result<Option<f64>> {
    if y.len() != f.len() {
        return Err(Error::Shape(format!("r2_score: {} targets, {} predictions", y.len(), f.len())));
    }
    if y.len() < 2 {
        return Err(Error::InvalidInput("r2_score needs at least 2 values".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    if ss_tot == 0.0 {
        return Ok((ss_res == 0.0).then_some(1.0));
    }
    Ok(Some(1.0 - ss_res / ss_tot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub f1: f64,
}

/// Positive class is `value > tau`; F1 is 1 when there are no positives at all.
pub fn classify_threshold(y: &[f64], f: &[f64], tau: f64) -> Result<Classification> {
    if y.len() != f.len() {
        return Err(Error::Shape(format!("classify: {} targets, {} predictions", y.len(), f.len())));
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("classify needs at least one value".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&a, &b) in y.iter().zip(f) {
        match (a > tau, b > tau) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(Classification {
        threshold: tau,
        tp,
        fp,
        fn_,
        tn,
        accuracy: (tp + tn) as f64 / y.len() as f64,
        f1,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    /// Probability-density histogram over `[min(−1, ⌊min⌋), 1]`.
    pub fn of_scores(scores: &[f64]) -> Self {
        let lo = scores.iter().copied().fold(-1.0f64, f64::min).floor().min(-1.0);
        let hi = 1.0;
        let width = (hi - lo) / HIST_BINS as f64;
        let edges: Vec<f64> = (0..=HIST_BINS).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0usize; HIST_BINS];
        for &s in scores {
            let b = (((s - lo) / width) as usize).min(HIST_BINS - 1);
            counts[b] += 1;
        }
        let total = scores.len().max(1) as f64;
        Self {
            edges,
            density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeScore {
    pub name: String,
    pub split: Split,
    pub num_nodes: usize,
    /// Unclamped; `None` for degenerate shapes.
    pub r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub num_shapes: usize,
    pub degenerate: Vec<String>,
    pub median_r2: Option<f64>,
    pub mean_r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_f1: Option<f64>,
    pub histogram: Histogram,
}

impl SplitSummary {
    pub fn from_scores(split: Split, scores: &[&ShapeScore]) -> Self {
        let r2: Vec<f64> = scores.iter().filter_map(|s| s.r2).collect();
        let degenerate = scores.iter().filter(|s| s.r2.is_none()).map(|s| s.name.clone()).collect();
        let acc: Vec<f64> = scores.iter().filter_map(|s| s.classification.map(|c| c.accuracy)).collect();
        let f1: Vec<f64> = scores.iter().filter_map(|s| s.classification.map(|c| c.f1)).collect();
        Self {
            split,
            num_shapes: scores.len(),
            degenerate,
            median_r2: median(&r2),
            mean_r2: (!r2.is_empty()).then(|| r2.iter().sum::<f64>() / r2.len() as f64),
            median_accuracy: median(&acc),
            median_f1: median(&f1),
            histogram: Histogram::of_scores(&r2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summaries: Vec<SplitSummary>,
    pub shapes: Vec<ShapeScore>,
}

impl EvalReport {
    pub fn summary(&self, split: Split) -> Option<&SplitSummary> {
        self.summaries.iter().find(|s| s.split == split)
    }

    pub fn from_scores(splits: &[Split], shapes: Vec<ShapeScore>) -> Self {
        let summaries = splits
            .iter()
            .map(|&sp| {
                let of: Vec<&ShapeScore> = shapes.iter().filter(|s| s.split == sp).collect();
                SplitSummary::from_scores(sp, &of)
            })
            .collect();
        Self { summaries, shapes }
    }
}

/// Per-node values kept for scatter export.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePredictions {
    pub name: String,
    pub target: Vec<f64>,
    pub prediction: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub threshold: Option<f64>,
    pub cache: Option<HierarchyCache>,
    /// Worker threads; 0 or 1 evaluates sequentially.
    pub jobs: usize,
    pub forward: ForwardOptions,
    pub keep_predictions: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<ShapePredictions>,
}

/// Eval-mode predictions (single precision, de-normalized) for every shape
/// of the requested splits.
pub fn evaluate_dataset(
    model: &Model,
    manifest: &DatasetManifest,
    splits: &[Split],
    options: &EvalOptions,
) -> Result<Evaluation> {
    if manifest.dim != model.config.dim {
        return Err(Error::InvalidInput(format!(
            "dataset dim {} does not match model dim {}",
            manifest.dim, model.config.dim
        )));
    }
    for f in &model.config.feature_names {
        if !manifest.feature_names.contains(f) {
            return Err(Error::InvalidInput(format!("dataset has no feature {f:?}")));
        }
    }
    let mut jobs = Vec::new();
    for &split in splits {
        let entries: Vec<_> = manifest.entries(split).collect();
        if entries.is_empty() {
            return Err(Error::InvalidInput(format!("split {split} is empty")));
        }
        jobs.extend(entries.into_iter().map(|e| (split, e)));
    }
    let run = |(split, entry): &(Split, &crate::meshgraph::ManifestEntry)| -> Result<(ShapeScore, ShapePredictions)> {
        let graph = manifest.load_entry(entry)?;
        let target = graph
            .target_values()
            .ok_or_else(|| Error::InvalidInput(format!("{}: no target field", graph.name)))?
            .to_vec();
        let input = prepare(&graph, &model.config, options.cache.as_ref())?;
        let prediction = model.predict_with::<f32>(&input, options.forward)?;
        let r2 = r2_score(&target, &prediction)?;
        let classification = match options.threshold {
            Some(t) => Some(classify_threshold(&target, &prediction, t)?),
            None => None,
        };
        Ok((
            ShapeScore {
                name: graph.name.clone(),
                split: *split,
                num_nodes: graph.num_nodes(),
                r2,
                classification,
            },
            ShapePredictions {
                name: graph.name,
                target,
                prediction,
            },
        ))
    };
    let results: Vec<Result<(ShapeScore, ShapePredictions)>> = if options.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    let mut shapes = Vec::with_capacity(results.len());
    let mut predictions = Vec::new();
    for r in results {
        let (score, pred) = r?;
        shapes.push(score);
        if options.keep_predictions {
            predictions.push(pred);
        }
    }
    Ok(Evaluation {
        report: EvalReport::from_scores(splits, shapes),
        predictions,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

pub fn scores_csv(report: &EvalReport) -> String {
    let mut out = String::from("name,split,r2,accuracy,f1\n");
    for s in &report.shapes {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.name,
            s.split,
            fmt_opt(s.r2),
            fmt_opt(s.classification.map(|c| c.accuracy)),
            fmt_opt(s.classification.map(|c| c.f1)),
        );
    }
    out
}

pub fn hist_csv(report: &EvalReport) -> String {
    let mut out = String::from("split,bin_left,bin_right,density\n");
    for s in &report.summaries {
        let h = &s.histogram;
        for (i, d) in h.density.iter().enumerate() {
            let _ = writeln!(out, "{},{:.17e},{:.17e},{:.17e}", s.split, h.edges[i], h.edges[i + 1], d);
        }
    }
    out
}

pub fn scatter_csv(p: &ShapePredictions) -> String {
    let mut out = String::from("node_id,target,prediction\n");
    for (i, (t, f)) in p.target.iter().zip(&p.prediction).enumerate() {
        let _ = writeln!(out, "{i},{t:.17e},{f:.17e}");
    }
    out
}

/// Writes `report.json`, `scores.csv`, `hist.csv` and, when predictions were
/// kept, `scatter/<shape>.csv`.
pub fn write_evaluation(eval: &Evaluation, out_dir: &Path) -> Result<()> {
    jsonfmt::write_json_17(&out_dir.join("report.json"), &eval.report)?;
    jsonfmt::write_bytes(&out_dir.join("scores.csv"), scores_csv(&eval.report).as_bytes())?;
    jsonfmt::write_bytes(&out_dir.join("hist.csv"), hist_csv(&eval.report).as_bytes())?;
    for p in &eval.predictions {
        let path = out_dir.join("scatter").join(format!("{}.csv", p.name));
        jsonfmt::write_bytes(&path, scatter_csv(p).as_bytes())?;
    }
    Ok(())
}
