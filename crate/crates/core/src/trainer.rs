//! Source-data fine-tuning: mask-generator only (EFT) and the two-stage
//! schedule with a learnable linear classifier (FFT-lite).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterParams;
use crate::embedio::{ClassMatrix, DatasetBundle, EmbeddingBatch};
use crate::error::{RadaError, Result};
use crate::eval::{evaluate_bundle, EvalReport};
use crate::forward::forward_rows;
use crate::losses::{adapt_loss, mask_reg, total_loss, LossConfig, Regime};
use crate::numerics::{Tape, Tensor};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::rational::{LogitScale, DEFAULT_LOGIT_SCALE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub logit_scale: f64,
}

impl RunConfig {
    pub const EFT_LR: f64 = 0.0009;
    pub const EFT_EPOCHS: usize = 13;
    pub const EFT_BATCH: usize = 1;
    pub const FFT_STAGE1_LR: f64 = 0.004;
    pub const FFT_STAGE2_LR: f64 = 0.000004;
    pub const FFT_STAGE_EPOCHS: usize = 5;
    pub const FFT_WEIGHT_DECAY: f64 = 0.1;
    pub const FFT_BATCH: usize = 16;

    pub fn eft() -> Self {
        RunConfig {
            regime: Regime::Eft,
            learning_rate: Self::EFT_LR,
            epochs: Self::EFT_EPOCHS,
            batch_size: Self::EFT_BATCH,
            optimizer: OptimizerKind::sgd(),
            schedule: Schedule::Cosine,
            weight_decay: 0.0,
            seed: 0,
            loss: LossConfig::for_regime(Regime::Eft),
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }

    pub fn fft_stage1() -> Self {
        RunConfig {
            regime: Regime::FftLiteStage1,
            learning_rate: Self::FFT_STAGE1_LR,
            epochs: Self::FFT_STAGE_EPOCHS,
            batch_size: Self::FFT_BATCH,
            optimizer: OptimizerKind::adamw(),
            schedule: Schedule::Cosine,
            weight_decay: Self::FFT_WEIGHT_DECAY,
            seed: 0,
            loss: LossConfig::for_regime(Regime::FftLiteStage1),
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }

    pub fn fft_stage2() -> Self {
        RunConfig {
            regime: Regime::FftLiteStage2,
            learning_rate: Self::FFT_STAGE2_LR,
            loss: LossConfig::for_regime(Regime::FftLiteStage2),
            ..Self::fft_stage1()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scale(&self) -> Result<LogitScale> {
        LogitScale::new(self.logit_scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.scale()?;
        if self.batch_size == 0 {
            return Err(RadaError::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RadaError::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(RadaError::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.regime == Regime::Ttt {
            return Err(RadaError::Config("test-time training is configured through TttConfig".into()));
        }
        if self.regime == Regime::FftLiteStage2 && self.loss.apply_reg {
            return Err(RadaError::Contract(
                "the mask regularizer cannot be applied while the classifier is learnable".into(),
            ));
        }
        Ok(())
    }

    /// `key=value` lines describing every field.
    pub fn describe(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}regime={}", self.regime);
        let _ = writeln!(s, "{prefix}learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "{prefix}epochs={}", self.epochs);
        let _ = writeln!(s, "{prefix}batch_size={}", self.batch_size);
        let _ = writeln!(s, "{prefix}optimizer={}", self.optimizer);
        let _ = writeln!(s, "{prefix}schedule={}", self.schedule);
        let _ = writeln!(s, "{prefix}weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "{prefix}seed={}", self.seed);
        let _ = writeln!(s, "{prefix}alpha={}", self.loss.reg_weight);
        let _ = writeln!(s, "{prefix}reg_norm={}", self.loss.reg_norm);
        let _ = writeln!(s, "{prefix}apply_reg={}", self.loss.apply_reg);
        let _ = writeln!(s, "{prefix}logit_scale={}", self.logit_scale);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FftLiteConfig {
    pub stage1: RunConfig,
    pub stage2: RunConfig,
}

impl Default for FftLiteConfig {
    fn default() -> Self {
        FftLiteConfig {
            stage1: RunConfig::fft_stage1(),
            stage2: RunConfig::fft_stage2(),
        }
    }
}

impl FftLiteConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        FftLiteConfig {
            stage1: self.stage1.with_seed(seed),
            stage2: self.stage2.with_seed(seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across stages.
    pub epoch: usize,
    pub regime: Regime,
    /// Mean total objective over the epoch's steps.
    pub loss: f64,
    /// Mean unweighted regularizer value.
    pub reg: f64,
    pub base_acc: f64,
    pub new_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    /// Learned base classifier (FFT-lite only), rows not normalized.
    pub classifier: Option<ClassMatrix>,
    pub history: Vec<EpochRecord>,
    pub initial: EvalReport,
    pub report: EvalReport,
}

/// Minimizes the regime's objective over `base_train`, updating the mask
/// generator (and `classifier` when given). Appends one record per epoch.
fn run_stage(
    bundle: &DatasetBundle,
    train: &EmbeddingBatch,
    params: &mut AdapterParams,
    mut classifier: Option<&mut Tensor>,
    cfg: &RunConfig,
    epoch_offset: usize,
    history: &mut Vec<EpochRecord>,
) -> Result<()> {
    cfg.validate()?;
    let scale = cfg.scale()?;
    let frozen_classes = bundle.base_classes.normalized()?;
    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.regime as u64 + 1);

    let initial: Vec<&Tensor> = params.tensors().chain(classifier.as_deref()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay, initial);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut reg_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let (classes, w_var) = match classifier.as_deref() {
                Some(w) => {
                    let raw = tape.param(w.clone());
                    (tape.l2_normalize_rows(raw)?, Some(raw))
                }
                None => (tape.constant(frozen_classes.weights().clone()), None),
            };
            let fwd = forward_rows(&mut tape, &bound, train.features(), chunk, classes, scale)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let ce = adapt_loss(&mut tape, fwd.logits, &batch_labels)?;
            let reg = mask_reg(&mut tape, fwd.masks, cfg.loss.reg_norm);
            let reg_in = cfg.loss.apply_reg.then_some(reg);
            let loss = total_loss(&mut tape, cfg.regime, ce, reg_in, &cfg.loss)?;

            let (loss_v, ce_v, reg_v) = (
                tape.value(loss).data()[0],
                tape.value(ce).data()[0],
                tape.value(reg).data()[0],
            );
            if !loss_v.is_finite() {
                return Err(RadaError::NonFinite(format!(
                    "{} loss at step {step} (epoch {}): total={loss_v} ce={ce_v} reg={reg_v}",
                    cfg.regime,
                    epoch_offset + epoch + 1
                )));
            }
            loss_sum += loss_v;
            reg_sum += reg_v;

            let mut grads = tape.backward(loss)?;
            let mut flat: Vec<Tensor> = bound
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("learnable adapter weight"))
                .collect();
            if let Some(w) = w_var {
                flat.push(grads.take(w).expect("learnable classifier"));
            }
            let lr = cfg.schedule.rate(cfg.learning_rate, step, total_steps);
            let targets = params.tensors_mut().chain(classifier.as_deref_mut());
            optimizer.step(targets, &flat, lr)?;
            step += 1;
        }
        if !params.is_finite() {
            return Err(RadaError::NonFinite(format!(
                "{} parameters diverged after epoch {}",
                cfg.regime,
                epoch_offset + epoch + 1
            )));
        }
        let base_classifier = match classifier.as_deref() {
            Some(w) => Some(bundle.base_classes.with_weights(w.clone())?),
            None => None,
        };
        let report = evaluate_bundle(bundle, Some(params), base_classifier.as_ref(), scale)?;
        let n = steps_per_epoch.max(1) as f64;
        let record = EpochRecord {
            epoch: epoch_offset + epoch + 1,
            regime: cfg.regime,
            loss: loss_sum / n,
            reg: reg_sum / n,
            base_acc: report.base_acc,
            new_acc: report.new_acc,
        };
        log::info!(
            "epoch {} {}: loss={:.6} reg={:.6} base={:.2} new={:.2}",
            record.epoch,
            record.regime,
            record.loss,
            record.reg,
            record.base_acc,
            record.new_acc
        );
        history.push(record);
    }
    Ok(())
}

/// Efficient fine-tuning: only the mask generator learns; embeddings and
/// class embeddings stay frozen.
pub fn train_eft(bundle: &DatasetBundle, params: &AdapterParams, cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.regime != Regime::Eft {
        return Err(RadaError::Config(format!("train_eft needs the eft regime, got {}", cfg.regime)));
    }
    check_dims(bundle, params)?;
    let scale = cfg.scale()?;
    let train = bundle.base_train.normalized()?;
    let initial = evaluate_bundle(bundle, Some(params), None, scale)?;
    let mut trained = params.clone();
    let mut history = Vec::new();
    run_stage(bundle, &train, &mut trained, None, cfg, 0, &mut history)?;
    let report = match history.last() {
        Some(_) => evaluate_bundle(bundle, Some(&trained), None, scale)?,
        None => initial.clone(),
    };
    Ok(TrainOutcome {
        params: trained,
        classifier: None,
        history,
        initial,
        report,
    })
}

/// Two-stage schedule: stage 1 trains the mask generator against the frozen
/// class embeddings; stage 2 jointly trains it with a linear classifier
/// initialized from the normalized class embeddings.
pub fn train_fft_lite(bundle: &DatasetBundle, params: &AdapterParams, cfg: &FftLiteConfig) -> Result<TrainOutcome> {
    if cfg.stage1.regime != Regime::FftLiteStage1 || cfg.stage2.regime != Regime::FftLiteStage2 {
        return Err(RadaError::Config("fft-lite stages must use the stage1/stage2 regimes".into()));
    }
    if cfg.stage1.logit_scale != cfg.stage2.logit_scale {
        return Err(RadaError::Config("both fft-lite stages must share one logit scale".into()));
    }
    check_dims(bundle, params)?;
    let scale = cfg.stage1.scale()?;
    let train = bundle.base_train.normalized()?;
    let initial = evaluate_bundle(bundle, Some(params), None, scale)?;
    let mut trained = params.clone();
    let mut history = Vec::new();
    run_stage(bundle, &train, &mut trained, None, &cfg.stage1, 0, &mut history)?;

    let mut w = initial_classifier(&bundle.base_classes)?;
    run_stage(
        bundle,
        &train,
        &mut trained,
        Some(&mut w),
        &cfg.stage2,
        cfg.stage1.epochs,
        &mut history,
    )?;
    let classifier = bundle.base_classes.with_weights(w)?.with_learnable(true);
    let report = evaluate_bundle(bundle, Some(&trained), Some(&classifier), scale)?;
    Ok(TrainOutcome {
        params: trained,
        classifier: Some(classifier),
        history,
        initial,
        report,
    })
}

/// Starting point of the learnable classifier: a copy of the normalized class
/// embeddings.
pub fn initial_classifier(classes: &ClassMatrix) -> Result<Tensor> {
    Ok(classes.normalized()?.weights().clone())
}

fn check_dims(bundle: &DatasetBundle, params: &AdapterParams) -> Result<()> {
    if bundle.dim() != params.dim() {
        return Err(RadaError::dim("train", &[params.dim()], &[bundle.dim()]));
    }
    Ok(())
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,reg,base_acc,new_acc\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.loss, r.reg, r.base_acc, r.new_acc);
    }
    s
}

/// `key=value` report of a finished run.
pub fn report_text(outcome: &TrainOutcome) -> String {
    let mut s = String::new();
    let zs = &outcome.initial;
    let r = &outcome.report;
    let _ = writeln!(s, "zero_shot_base_acc={}", zs.base_acc);
    let _ = writeln!(s, "zero_shot_new_acc={}", zs.new_acc);
    let _ = writeln!(s, "zero_shot_hm={}", zs.harmonic_mean);
    let _ = writeln!(s, "base_acc={}", r.base_acc);
    let _ = writeln!(s, "new_acc={}", r.new_acc);
    let _ = writeln!(s, "hm={}", r.harmonic_mean);
    if let Some(m) = r.mask_stats() {
        let _ = writeln!(s, "mask_mean={}", m.mean);
        let _ = writeln!(s, "mask_std={}", m.std);
        let _ = writeln!(s, "mask_min={}", m.min);
        let _ = writeln!(s, "mask_max={}", m.max);
    }
    for (i, a) in r.base.per_class.iter().enumerate() {
        let _ = writeln!(s, "base_class_acc.{i}={a}");
    }
    for (i, a) in r.new.per_class.iter().enumerate() {
        let _ = writeln!(s, "new_class_acc.{i}={a}");
    }
    let _ = writeln!(s, "params_fingerprint={:016x}", outcome.params.fingerprint());
    s
}

/// Writes `history.csv`, `report.txt` and `adapter.rdam` (plus
/// `classifier.rda` when a classifier was learned) into `dir`.
pub fn write_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.csv"), history_csv(&outcome.history))?;
    fs::write(dir.join("report.txt"), report_text(outcome))?;
    outcome.params.save(&dir.join("adapter.rdam"))?;
    if let Some(c) = &outcome.classifier {
        crate::embedio::save(&dir.join("classifier.rda"), &crate::embedio::RdaFile::Classes(c.clone()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::embedio::{synth_gaussian, SynthConfig};

    fn small_bundle() -> DatasetBundle {
        synth_gaussian(&SynthConfig {
            classes: 3,
            dim: 6,
            shots: 2,
            test_per_class: 4,
            sigma: 0.3,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_params_untouched() {
        let bundle = small_bundle();
        let params = AdapterParams::new(AdapterConfig::new(6), 1).unwrap();
        let cfg = RunConfig { epochs: 0, ..RunConfig::eft() };
        let out = train_eft(&bundle, &params, &cfg).unwrap();
        assert_eq!(out.params, params);
        assert!(out.history.is_empty());
        let zs = evaluate_bundle(&bundle, None, None, cfg.scale().unwrap()).unwrap();
        assert_eq!(out.report.base.predictions, zs.base.predictions);
        assert_eq!(out.report.new_acc, zs.new_acc);
    }

    #[test]
    fn training_is_deterministic() {
        let bundle = small_bundle();
        let params = AdapterParams::new(AdapterConfig::new(6), 1).unwrap();
        let cfg = RunConfig { epochs: 2, ..RunConfig::eft() };
        let a = train_eft(&bundle, &params, &cfg).unwrap();
        let b = train_eft(&bundle, &params, &cfg).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_ne!(a.params.fingerprint(), params.fingerprint());
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn stage2_zero_rate_equals_stage1() {
        let bundle = small_bundle();
        let params = AdapterParams::new(AdapterConfig::new(6), 1).unwrap();
        let mut cfg = FftLiteConfig::default();
        cfg.stage1.epochs = 1;
        cfg.stage2.learning_rate = 0.0;
        cfg.stage2.weight_decay = 0.0;
        let full = train_fft_lite(&bundle, &params, &cfg).unwrap();

        let mut stage1_only = params.clone();
        let mut history = Vec::new();
        let train = bundle.base_train.normalized().unwrap();
        run_stage(&bundle, &train, &mut stage1_only, None, &cfg.stage1, 0, &mut history).unwrap();
        assert_eq!(full.params, stage1_only);
        assert_eq!(
            full.classifier.unwrap().weights(),
            bundle.base_classes.normalized().unwrap().weights()
        );
        assert_eq!(full.history.len(), 1 + RunConfig::FFT_STAGE_EPOCHS);
    }

    #[test]
    fn classifier_starts_as_normalized_class_embeddings() {
        let bundle = small_bundle();
        let w = initial_classifier(&bundle.base_classes).unwrap();
        assert_eq!(&w, bundle.base_classes.normalized().unwrap().weights());
    }

    #[test]
    fn stage2_regularizer_is_rejected() {
        let mut cfg = RunConfig::fft_stage2();
        cfg.loss.apply_reg = true;
        assert!(matches!(cfg.validate(), Err(RadaError::Contract(_))));
    }

    #[test]
    fn wrong_regime_rejected() {
        let bundle = small_bundle();
        let params = AdapterParams::new(AdapterConfig::new(6), 1).unwrap();
        assert!(matches!(
            train_eft(&bundle, &params, &RunConfig::fft_stage1()),
            Err(RadaError::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_loss_parts() {
        let bundle = small_bundle();
        let params = AdapterParams::new(AdapterConfig::new(6), 1).unwrap();
        let cfg = RunConfig {
            learning_rate: 1e300,
            epochs: 3,
            schedule: Schedule::Constant,
            ..RunConfig::eft()
        };
        match train_eft(&bundle, &params, &cfg) {
            Err(RadaError::NonFinite(msg)) => assert!(msg.contains("step") || msg.contains("diverged"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
