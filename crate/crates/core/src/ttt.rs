//! Offline test-time training: each sample adapts a private copy of the
//! pristine mask generator on its most confident augmented views.

use std::collections::hash_map::DefaultHasher;
use std::fmt::{self, Write as _};
use std::hash::Hasher;
use std::str::FromStr;

use rayon::prelude::*;

use crate::adapter::AdapterParams;
use crate::embedio::{ttt_views, ClassMatrix, EmbeddingBatch, SplitTag};
use crate::error::{RadaError, Result};
use crate::eval::{predict, split_eval, SplitEval};
use crate::forward::{forward_batch, forward_rows};
use crate::losses::{mask_reg, total_loss, ttt_entropy, EntropyMode, LossConfig, RegNorm, Regime};
use crate::numerics::{log_sum_exp, Tape, Tensor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rational::{argmax_rows, LogitScale, DEFAULT_LOGIT_SCALE};

/// Rounding of `batch · keep_frac` to a row count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeepRounding {
    Ceil,
    Floor,
}

impl fmt::Display for KeepRounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeepRounding::Ceil => "ceil",
            KeepRounding::Floor => "floor",
        })
    }
}

impl FromStr for KeepRounding {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceil" => Ok(KeepRounding::Ceil),
            "floor" => Ok(KeepRounding::Floor),
            _ => Err(RadaError::Config(format!("unknown rounding {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TttConfig {
    /// Augmented views per sample; the batch is `n_views + 1` rows.
    pub n_views: usize,
    pub keep_frac: f64,
    pub rounding: KeepRounding,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub jitter: f64,
    pub drop_frac: f64,
    pub seed: u64,
    pub logit_scale: f64,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            n_views: 63,
            keep_frac: 0.10,
            rounding: KeepRounding::Ceil,
            steps: 3,
            learning_rate: 0.0008,
            optimizer: OptimizerKind::adamw(),
            loss: LossConfig::for_regime(Regime::Ttt),
            jitter: 0.05,
            drop_frac: 0.1,
            seed: 0,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl TttConfig {
    pub fn batch(&self) -> usize {
        self.n_views + 1
    }

    /// Number of views kept for the entropy objective.
    pub fn keep_count(&self) -> usize {
        let raw = self.batch() as f64 * self.keep_frac;
        match self.rounding {
            KeepRounding::Ceil => raw.ceil() as usize,
            KeepRounding::Floor => raw.floor() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        LogitScale::new(self.logit_scale)?;
        if !(self.keep_frac > 0.0 && self.keep_frac <= 1.0) {
            return Err(RadaError::Config(format!("keep_frac must be in (0, 1], got {}", self.keep_frac)));
        }
        if self.keep_count() == 0 {
            return Err(RadaError::Config(format!(
                "keeping {} of {} views selects nothing",
                self.keep_frac,
                self.batch()
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RadaError::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_views={}", self.n_views);
        let _ = writeln!(s, "batch={}", self.batch());
        let _ = writeln!(s, "keep_frac={}", self.keep_frac);
        let _ = writeln!(s, "rounding={}", self.rounding);
        let _ = writeln!(s, "keep_count={}", self.keep_count());
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "optimizer={}", self.optimizer);
        let _ = writeln!(s, "alpha={}", self.loss.reg_weight);
        let _ = writeln!(s, "reg_norm={}", self.loss.reg_norm);
        let _ = writeln!(s, "entropy_mode={}", self.loss.entropy_mode);
        let _ = writeln!(s, "jitter={}", self.jitter);
        let _ = writeln!(s, "drop_frac={}", self.drop_frac);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "logit_scale={}", self.logit_scale);
        s
    }

    pub fn with_norm(mut self, norm: RegNorm) -> Self {
        self.loss.reg_norm = norm;
        self
    }

    pub fn with_entropy(mut self, mode: EntropyMode) -> Self {
        self.loss.entropy_mode = mode;
        self
    }
}

/// Shannon entropy of the softmax of each row of `logits`.
pub fn row_entropies(logits: &Tensor) -> Vec<f64> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let lse = log_sum_exp(row);
            -row.iter().map(|&z| (z - lse).exp() * (z - lse)).sum::<f64>()
        })
        .collect()
}

/// Indices of the `keep` lowest entropies, ties broken by lower index,
/// returned in ascending index order.
pub fn select_confident(entropies: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entropies.len()).collect();
    idx.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Seed for a sample's views: depends on its content, never its position.
fn view_seed(sample: &[f64], seed: u64) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_u64(seed);
    for v in sample {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TttOutcome {
    /// Prediction with the all-ones mask.
    pub zero_shot_pred: usize,
    /// Prediction of the untouched starting parameters.
    pub initial_pred: usize,
    pub adapted_pred: usize,
    /// Objective entropy of the selected views before any update.
    pub entropy_step0: f64,
    /// The same after the last update, on a fresh selection.
    pub entropy_final: f64,
    pub skipped_steps: usize,
}

struct Scored {
    logits: Tensor,
    selected: Vec<usize>,
}

fn score_views(params: &AdapterParams, views: &Tensor, classes: &Tensor, cfg: &TttConfig) -> Result<Scored> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let cls = tape.constant(classes.clone());
    let fwd = forward_batch(&mut tape, &bound, views, cls, LogitScale::new(cfg.logit_scale)?)?;
    let logits = tape.value(fwd.logits).clone();
    let selected = select_confident(&row_entropies(&logits), cfg.keep_count());
    Ok(Scored { logits, selected })
}

fn subset_entropy(logits: &Tensor, rows: &[usize], mode: EntropyMode) -> Result<f64> {
    let k = logits.last_dim();
    let data: Vec<f64> = rows.iter().flat_map(|&r| logits.row(r).to_vec()).collect();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(&[rows.len(), k], data)?);
    let h = ttt_entropy(&mut tape, z, mode)?;
    Ok(tape.value(h).data()[0])
}

/// Adapts a private copy of `params0` to one normalized sample and predicts
/// its class. `classes` must be normalized; `params0` is never modified.
pub fn adapt_one(sample: &[f64], classes: &ClassMatrix, params0: &AdapterParams, cfg: &TttConfig) -> Result<TttOutcome> {
    cfg.validate()?;
    if !classes.is_normalized() {
        return Err(RadaError::Contract("test-time classes must be normalized".into()));
    }
    if sample.len() != classes.dim() || params0.dim() != classes.dim() {
        return Err(RadaError::dim("adapt_one", &[sample.len(), params0.dim()], &[classes.dim()]));
    }
    let scale = LogitScale::new(cfg.logit_scale)?;
    let w = classes.weights();
    let views = ttt_views(sample, cfg.n_views, cfg.jitter, cfg.drop_frac, view_seed(sample, cfg.seed))?;

    let zero_shot_pred = single_prediction(sample, classes, None, scale)?;
    let initial_pred = single_prediction(sample, classes, Some(params0), scale)?;

    let mut params = params0.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, 0.0, params.tensors());
    let mut scored = score_views(&params, &views, w, cfg)?;
    let entropy_step0 = subset_entropy(&scored.logits, &scored.selected, cfg.loss.entropy_mode)?;
    let mut skipped_steps = 0;

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let cls = tape.constant(w.clone());
        let fwd = forward_rows(&mut tape, &bound, &views, &scored.selected, cls, scale)?;
        let entropy = ttt_entropy(&mut tape, fwd.logits, cfg.loss.entropy_mode)?;
        let reg = cfg.loss.apply_reg.then(|| mask_reg(&mut tape, fwd.masks, cfg.loss.reg_norm));
        let loss = total_loss(&mut tape, Regime::Ttt, entropy, reg, &cfg.loss)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            log::warn!("test-time step {step}: objective is {value}, update skipped");
            skipped_steps += 1;
            continue;
        }
        let mut grads = tape.backward(loss)?;
        let flat: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("learnable adapter weight"))
            .collect();
        if flat.iter().any(|g| !g.is_finite()) {
            log::warn!("test-time step {step}: non-finite gradient, update skipped");
            skipped_steps += 1;
            continue;
        }
        optimizer.step(params.tensors_mut(), &flat, cfg.learning_rate)?;
        scored = score_views(&params, &views, w, cfg)?;
    }
    let entropy_final = subset_entropy(&scored.logits, &scored.selected, cfg.loss.entropy_mode)?;
    // Row 0 of the views is the unaugmented sample.
    let adapted_pred = argmax_rows(&Tensor::new(&[1, classes.num_classes()], scored.logits.row(0).to_vec())?)[0];
    Ok(TttOutcome {
        zero_shot_pred,
        initial_pred,
        adapted_pred,
        entropy_step0,
        entropy_final,
        skipped_steps,
    })
}

fn single_prediction(
    sample: &[f64],
    classes: &ClassMatrix,
    params: Option<&AdapterParams>,
    scale: LogitScale,
) -> Result<usize> {
    let one = EmbeddingBatch::new(Tensor::new(&[1, sample.len()], sample.to_vec())?, vec![0], SplitTag::TttStream)?;
    Ok(predict(&one, classes, params, scale, false)?.0[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TttRecord {
    /// Position in the stream as given.
    pub sample_id: usize,
    pub label: usize,
    pub outcome: TttOutcome,
}

#[derive(Clone, Debug)]
pub struct TttReport {
    pub adapted: SplitEval,
    pub zero_shot: SplitEval,
    pub initial: SplitEval,
    /// Sorted by `sample_id`.
    pub records: Vec<TttRecord>,
}

impl TttReport {
    /// Fraction of samples whose selected-view entropy went down.
    pub fn entropy_decrease_rate(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records
            .iter()
            .filter(|r| r.outcome.entropy_final < r.outcome.entropy_step0)
            .count() as f64
            / n
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,zero_shot_pred,adapted_pred,label,entropy_step0,entropy_step3\n");
        for r in &self.records {
            let o = &r.outcome;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.sample_id, o.zero_shot_pred, o.adapted_pred, r.label, o.entropy_step0, o.entropy_final
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.records.len());
        let _ = writeln!(s, "zero_shot_acc={}", self.zero_shot.accuracy);
        let _ = writeln!(s, "initial_acc={}", self.initial.accuracy);
        let _ = writeln!(s, "adapted_acc={}", self.adapted.accuracy);
        let _ = writeln!(s, "entropy_decrease_rate={}", self.entropy_decrease_rate());
        let skipped: usize = self.records.iter().map(|r| r.outcome.skipped_steps).sum();
        let _ = writeln!(s, "skipped_steps={skipped}");
        s
    }
}

/// Runs [`adapt_one`] independently on every sample of `stream`, in parallel.
pub fn run_stream(stream: &EmbeddingBatch, classes: &ClassMatrix, params0: &AdapterParams, cfg: &TttConfig) -> Result<TttReport> {
    if stream.is_empty() {
        return Err(RadaError::Degenerate("empty test-time stream".into()));
    }
    if stream.split() != SplitTag::TttStream {
        return Err(RadaError::Contract(format!(
            "test-time training needs a {} batch, got {}",
            SplitTag::TttStream,
            stream.split()
        )));
    }
    stream.check_labels(classes.num_classes())?;
    let stream = stream.normalized()?;
    let classes = classes.normalized()?;
    let records: Vec<TttRecord> = (0..stream.len())
        .into_par_iter()
        .map(|i| {
            Ok(TttRecord {
                sample_id: i,
                label: stream.labels()[i],
                outcome: adapt_one(stream.sample(i), &classes, params0, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    let k = classes.num_classes();
    let preds = |f: fn(&TttOutcome) -> usize| records.iter().map(|r| f(&r.outcome)).collect::<Vec<_>>();
    Ok(TttReport {
        adapted: split_eval(stream.labels(), preds(|o| o.adapted_pred), k, None),
        zero_shot: split_eval(stream.labels(), preds(|o| o.zero_shot_pred), k, None),
        initial: split_eval(stream.labels(), preds(|o| o.initial_pred), k, None),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::embedio::{synth_stream, SynthConfig};

    fn setup() -> (EmbeddingBatch, ClassMatrix, AdapterParams) {
        let cfg = SynthConfig {
            classes: 4,
            dim: 8,
            ..SynthConfig::default()
        };
        let bundle = crate::embedio::synth_gaussian(&cfg).unwrap();
        let stream = synth_stream(&cfg, 6, 0.5).unwrap();
        let params = AdapterParams::new(AdapterConfig::new(8), 3).unwrap();
        (stream, bundle.base_classes, params)
    }

    fn small() -> TttConfig {
        TttConfig {
            n_views: 15,
            ..TttConfig::default()
        }
    }

    #[test]
    fn keep_counts() {
        let cfg = TttConfig::default();
        assert_eq!(cfg.batch(), 64);
        assert_eq!(cfg.keep_count(), 7);
        let floor = TttConfig {
            rounding: KeepRounding::Floor,
            ..cfg
        };
        assert_eq!(floor.keep_count(), 6);
        let tiny = TttConfig {
            n_views: 3,
            rounding: KeepRounding::Floor,
            ..cfg
        };
        assert!(tiny.validate().is_err());
        assert!(TttConfig { keep_frac: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn selection_breaks_ties_by_index() {
        assert_eq!(select_confident(&[0.5, 0.1, 0.5, 0.1, 0.5], 3), vec![0, 1, 3]);
        assert_eq!(select_confident(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn row_entropy_reference() {
        let h = row_entropies(&Tensor::from_rows(&[vec![0.0; 4], vec![1000.0, 0.0, 0.0, 0.0]]).unwrap());
        assert!((h[0] - 4f64.ln()).abs() < 1e-12);
        assert!(h[1].abs() < 1e-12);
    }

    #[test]
    fn zero_rate_and_zero_steps_change_nothing() {
        let (stream, classes, params) = setup();
        let classes = classes.normalized().unwrap();
        for cfg in [
            TttConfig { learning_rate: 0.0, ..small() },
            TttConfig { steps: 0, ..small() },
        ] {
            for i in 0..stream.len() {
                let o = adapt_one(stream.sample(i), &classes, &params, &cfg).unwrap();
                assert_eq!(o.adapted_pred, o.initial_pred);
                assert_eq!(o.adapted_pred, o.zero_shot_pred);
            }
        }
    }

    #[test]
    fn params_are_not_touched() {
        let (stream, classes, params) = setup();
        let before = params.fingerprint();
        run_stream(&stream, &classes, &params, &small()).unwrap();
        assert_eq!(params.fingerprint(), before);
    }

    #[test]
    fn single_sample_stream_equals_adapt_one() {
        let (stream, classes, params) = setup();
        let one = stream.select(&[2]);
        let report = run_stream(&one, &classes, &params, &small()).unwrap();
        let direct = adapt_one(stream.sample(2), &classes.normalized().unwrap(), &params, &small()).unwrap();
        assert_eq!(report.records[0].outcome, direct);
    }

    #[test]
    fn wrong_split_rejected() {
        let (stream, classes, params) = setup();
        let wrong = stream.with_split(SplitTag::BaseTest);
        assert!(matches!(
            run_stream(&wrong, &classes, &params, &small()),
            Err(RadaError::Contract(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let (stream, classes, params) = setup();
        let report = run_stream(&stream, &classes, &params, &small()).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("sample_id,zero_shot_pred,adapted_pred,label,entropy_step0,entropy_step3\n"));
        assert_eq!(csv.lines().count(), stream.len() + 1);
    }
}
