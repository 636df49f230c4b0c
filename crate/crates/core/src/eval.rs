//! Accuracy, base-to-new reports and mask statistics.

use rayon::prelude::*;

use crate::adapter::{mask_sample, AdapterParams};
use crate::embedio::{ClassMatrix, DatasetBundle, EmbeddingBatch};
use crate::error::{RadaError, Result};
use crate::numerics::Tensor;
use crate::rational::{argmax_rows, rational_sample, LogitScale};

/// Summary of mask values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl MaskStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Some(MaskStats {
            mean,
            std: var.sqrt(),
            min,
            max,
            count: values.len(),
        })
    }
}

/// Equal-width histogram over the observed range of a set of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// When every value is identical the range is widened to `v ± 0.5`.
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(RadaError::Degenerate("histogram of no values or no bins".into()));
        }
        let stats = MaskStats::from_values(values).expect("non-empty");
        let (lo, hi) = if stats.max > stats.min {
            (stats.min, stats.max)
        } else {
            (stats.min - 0.5, stats.max + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Ok(Histogram { lo, hi, counts })
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + width * i as f64, self.lo + width * (i + 1) as f64)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// True when the bins holding at least half of the peak count form one
    /// contiguous run.
    pub fn is_unimodal(&self) -> bool {
        let peak = self.counts.iter().copied().max().unwrap_or(0);
        let high: Vec<usize> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| 2 * c >= peak && c > 0)
            .map(|(i, _)| i)
            .collect();
        high.windows(2).all(|w| w[1] == w[0] + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (a, b) = self.bin_edges(i);
            out.push_str(&format!("{i},{a},{b},{c}\n"));
        }
        out
    }
}

/// Accuracy of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    /// Percentage in [0, 100].
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
    pub mask_stats: Option<MaskStats>,
}

/// Predictions and (optionally) mask values for every sample. Zero-shot when
/// `params` is `None`.
pub fn predict(
    batch: &EmbeddingBatch,
    classes: &ClassMatrix,
    params: Option<&AdapterParams>,
    scale: LogitScale,
    collect_masks: bool,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(RadaError::Degenerate("evaluation batch is empty".into()));
    }
    if !batch.is_normalized() || !classes.is_normalized() {
        return Err(RadaError::Contract("evaluation inputs must be normalized".into()));
    }
    if batch.dim() != classes.dim() {
        return Err(RadaError::dim("evaluate", batch.features().shape(), classes.weights().shape()));
    }
    if let Some(p) = params {
        if p.dim() != classes.dim() {
            return Err(RadaError::dim("evaluate", &[p.dim()], &[classes.dim()]));
        }
    }
    let k = classes.num_classes();
    let per_sample: Vec<(usize, Vec<f64>)> = (0..batch.len())
        .into_par_iter()
        .map(|b| -> Result<(usize, Vec<f64>)> {
            let f = batch.sample(b);
            let (logits, mask) = match params {
                Some(p) => {
                    let (m, r) = mask_sample(p, f, classes.weights())?;
                    let d = r.last_dim();
                    let logits: Vec<f64> = r
                        .data()
                        .chunks(d)
                        .zip(m.data().chunks(d))
                        .map(|(rr, mm)| scale.get() * rr.iter().zip(mm).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    (logits, m.into_data())
                }
                None => {
                    let r = rational_sample(f, classes.weights())?;
                    let d = r.last_dim();
                    let logits = r.data().chunks(d).map(|rr| scale.get() * rr.iter().sum::<f64>()).collect();
                    (logits, vec![1.0; k * d])
                }
            };
            let pred = argmax_rows(&Tensor::new(&[1, k], logits)?)[0];
            Ok((pred, if collect_masks { mask } else { Vec::new() }))
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(per_sample.len());
    let mut masks = Vec::new();
    for (p, m) in per_sample {
        preds.push(p);
        masks.extend(m);
    }
    Ok((preds, masks))
}

pub fn evaluate(
    batch: &EmbeddingBatch,
    classes: &ClassMatrix,
    params: Option<&AdapterParams>,
    scale: LogitScale,
) -> Result<SplitEval> {
    batch.check_labels(classes.num_classes())?;
    let (predictions, masks) = predict(batch, classes, params, scale, true)?;
    Ok(split_eval(batch.labels(), predictions, classes.num_classes(), MaskStats::from_values(&masks)))
}

pub fn split_eval(labels: &[usize], predictions: Vec<usize>, classes: usize, mask_stats: Option<MaskStats>) -> SplitEval {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(&predictions) {
        totals[y] += 1;
        hits[y] += (y == p) as usize;
    }
    let correct: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { 100.0 * h as f64 / t as f64 })
        .collect();
    SplitEval {
        accuracy: 100.0 * correct as f64 / labels.len().max(1) as f64,
        per_class,
        predictions,
        mask_stats,
    }
}

pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base + new == 0.0 {
        0.0
    } else {
        2.0 * base * new / (base + new)
    }
}

/// Base-to-new evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub base_acc: f64,
    pub new_acc: f64,
    pub harmonic_mean: f64,
    pub base: SplitEval,
    pub new: SplitEval,
}

impl EvalReport {
    pub fn from_splits(base: SplitEval, new: SplitEval) -> Self {
        EvalReport {
            base_acc: base.accuracy,
            new_acc: new.accuracy,
            harmonic_mean: harmonic_mean(base.accuracy, new.accuracy),
            base,
            new,
        }
    }

    /// Mask statistics over both evaluation splits.
    pub fn mask_stats(&self) -> Option<MaskStats> {
        match (self.base.mask_stats, self.new.mask_stats) {
            (Some(a), Some(b)) => {
                let n = (a.count + b.count) as f64;
                let mean = (a.mean * a.count as f64 + b.mean * b.count as f64) / n;
                let second = ((a.std.powi(2) + a.mean.powi(2)) * a.count as f64
                    + (b.std.powi(2) + b.mean.powi(2)) * b.count as f64)
                    / n;
                Some(MaskStats {
                    mean,
                    std: (second - mean * mean).max(0.0).sqrt(),
                    min: a.min.min(b.min),
                    max: a.max.max(b.max),
                    count: a.count + b.count,
                })
            }
            (a, b) => a.or(b),
        }
    }
}

/// Evaluates base-test against `base_classes` (or a replacement classifier)
/// and new-test against the new classes.
pub fn evaluate_bundle(
    bundle: &DatasetBundle,
    params: Option<&AdapterParams>,
    base_classifier: Option<&ClassMatrix>,
    scale: LogitScale,
) -> Result<EvalReport> {
    let base_classes = match base_classifier {
        Some(c) => c.normalized()?,
        None => bundle.base_classes.normalized()?,
    };
    let new_classes = bundle.new_classes.normalized()?;
    let base = evaluate(&bundle.base_test.normalized()?, &base_classes, params, scale)?;
    let new = evaluate(&bundle.new_test.normalized()?, &new_classes, params, scale)?;
    Ok(EvalReport::from_splits(base, new))
}
