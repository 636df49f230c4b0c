//! Training objectives, all recorded on a [`Tape`].

use std::fmt;
use std::str::FromStr;

use crate::error::{RadaError, Result};
use crate::numerics::{Tape, Var};

/// Reduction used by the mask regularizer. All are taken over `M − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegNorm {
    /// mean |M − 1|
    L1,
    /// mean (M − 1)²
    L2,
    /// max |M − 1|
    Linf,
}

impl RegNorm {
    pub const ALL: [RegNorm; 3] = [RegNorm::L1, RegNorm::L2, RegNorm::Linf];
}

impl fmt::Display for RegNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegNorm::L1 => "l1",
            RegNorm::L2 => "l2",
            RegNorm::Linf => "linf",
        })
    }
}

impl FromStr for RegNorm {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(RegNorm::L1),
            "l2" => Ok(RegNorm::L2),
            "linf" | "l-inf" => Ok(RegNorm::Linf),
            _ => Err(RadaError::Config(format!("unknown regularizer norm {s:?}"))),
        }
    }
}

/// How the test-time entropy is reduced over the selected views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyMode {
    /// Entropy of the mean prediction.
    Marginal,
    /// Mean of the per-view entropies.
    MeanPerSample,
}

impl fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntropyMode::Marginal => "marginal",
            EntropyMode::MeanPerSample => "mean-per-sample",
        })
    }
}

impl FromStr for EntropyMode {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(EntropyMode::Marginal),
            "mean-per-sample" => Ok(EntropyMode::MeanPerSample),
            _ => Err(RadaError::Config(format!("unknown entropy mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Eft,
    Ttt,
    FftLiteStage1,
    FftLiteStage2,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Eft => "eft",
            Regime::Ttt => "ttt",
            Regime::FftLiteStage1 => "fft-lite-stage1",
            Regime::FftLiteStage2 => "fft-lite-stage2",
        })
    }
}

impl FromStr for Regime {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eft" => Ok(Regime::Eft),
            "ttt" => Ok(Regime::Ttt),
            "fft-lite-stage1" | "stage1" => Ok(Regime::FftLiteStage1),
            "fft-lite-stage2" | "stage2" => Ok(Regime::FftLiteStage2),
            _ => Err(RadaError::Config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub reg_weight: f64,
    pub reg_norm: RegNorm,
    /// Only valid while embeddings and classifier are frozen.
    pub apply_reg: bool,
    pub entropy_mode: EntropyMode,
}

impl LossConfig {
    pub const EFT_REG_WEIGHT: f64 = 1.5;
    pub const DEFAULT_REG_WEIGHT: f64 = 1.0;

    pub fn for_regime(regime: Regime) -> Self {
        let reg_weight = match regime {
            Regime::Eft => Self::EFT_REG_WEIGHT,
            _ => Self::DEFAULT_REG_WEIGHT,
        };
        LossConfig {
            reg_weight,
            reg_norm: RegNorm::L2,
            apply_reg: regime != Regime::FftLiteStage2,
            entropy_mode: EntropyMode::Marginal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(RadaError::Config(format!(
                "regularizer weight must be >= 0, got {}",
                self.reg_weight
            )));
        }
        Ok(())
    }
}

/// Batch-mean cross-entropy of masked logits against labels.
pub fn adapt_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Entropy of predictions over an S×K block of logits.
pub fn ttt_entropy(tape: &mut Tape, logits: Var, mode: EntropyMode) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(RadaError::Degenerate(format!("entropy needs S×K logits with S >= 1, got {shape:?}")));
    }
    let s = shape[0] as f64;
    let log_p = tape.log_softmax_lastdim(logits);
    match mode {
        EntropyMode::Marginal => {
            // log p̄_j = logsumexp_s log p_sj − ln S
            let by_class = tape.transpose(log_p)?;
            let lse = tape.logsumexp_lastdim(by_class);
            let log_mean = tape.add_scalar(lse, -s.ln());
            let mean = tape.exp(log_mean);
            let plogp = tape.mul(mean, log_mean)?;
            let total = tape.sum_all(plogp);
            Ok(tape.scale(total, -1.0))
        }
        EntropyMode::MeanPerSample => {
            let p = tape.exp(log_p);
            let plogp = tape.mul(p, log_p)?;
            let total = tape.sum_all(plogp);
            Ok(tape.scale(total, -1.0 / s))
        }
    }
}

/// Regularizer pulling the mask toward all-ones.
pub fn mask_reg(tape: &mut Tape, mask: Var, norm: RegNorm) -> Var {
    let offset = tape.add_scalar(mask, -1.0);
    match norm {
        RegNorm::L2 => {
            let sq = tape.mul(offset, offset).expect("same shape");
            tape.mean_all(sq)
        }
        RegNorm::L1 => {
            let a = tape.abs(offset);
            tape.mean_all(a)
        }
        RegNorm::Linf => {
            let a = tape.abs(offset);
            tape.max_all(a)
        }
    }
}

/// Combines the main objective with the weighted regularizer for `regime`.
pub fn total_loss(tape: &mut Tape, regime: Regime, main: Var, reg: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if regime == Regime::FftLiteStage2 {
        if cfg.apply_reg {
            return Err(RadaError::Contract(
                "the mask regularizer cannot be applied while the classifier is learnable".into(),
            ));
        }
        return Ok(main);
    }
    if !cfg.apply_reg {
        return Ok(main);
    }
    let reg = reg.ok_or_else(|| RadaError::Contract(format!("{regime} objective needs the mask regularizer")))?;
    let weighted = tape.scale(reg, cfg.reg_weight);
    tape.add(main, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let l = adapt_loss(&mut tape, z, &[3]).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-15);
        assert!((4f64.ln() - 1.3862943611).abs() < 1e-10);
    }

    #[test]
    fn dominant_correct_logit_costs_nothing() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
        let l = adapt_loss(&mut tape, z, &[1]).unwrap();
        assert!(scalar(&tape, l) < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(adapt_loss(&mut tape, z, &[3]).is_err());
    }

    #[test]
    fn entropy_reference_cases() {
        for mode in [EntropyMode::Marginal, EntropyMode::MeanPerSample] {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::zeros(&[1, 10]));
            let h = ttt_entropy(&mut tape, z, mode).unwrap();
            assert!((scalar(&tape, h) - 10f64.ln()).abs() < 1e-12);
            assert!((scalar(&tape, h) - 2.302585).abs() < 1e-6);

            let mut row = vec![0.0; 10];
            row[0] = 1000.0;
            let z = tape.constant(Tensor::from_rows(&[row]).unwrap());
            let h = ttt_entropy(&mut tape, z, mode).unwrap();
            assert!(scalar(&tape, h).abs() < 1e-6);
        }
    }

    #[test]
    fn opposite_confident_rows_average_to_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap());
        let h = ttt_entropy(&mut tape, z, EntropyMode::Marginal).unwrap();
        assert!((scalar(&tape, h) - 2f64.ln()).abs() < 1e-12);
        let h = ttt_entropy(&mut tape, z, EntropyMode::MeanPerSample).unwrap();
        assert!(scalar(&tape, h) < 1e-18);
    }

    #[test]
    fn regularizer_reference_values() {
        for norm in RegNorm::ALL {
            let mut tape = Tape::new();
            let ones = tape.constant(Tensor::ones(&[3, 4]));
            let r = mask_reg(&mut tape, ones, norm);
            assert_eq!(scalar(&tape, r), 0.0);
            let twos = tape.constant(Tensor::full(&[3, 4], 2.0));
            let r = mask_reg(&mut tape, twos, norm);
            assert_eq!(scalar(&tape, r), 1.0);
        }
    }

    #[test]
    fn stage2_rejects_regularizer() {
        let mut tape = Tape::new();
        let main = tape.constant(Tensor::scalar(1.0));
        let cfg = LossConfig::for_regime(Regime::FftLiteStage2);
        assert!(!cfg.apply_reg);
        assert!(total_loss(&mut tape, Regime::FftLiteStage2, main, None, &cfg).is_ok());
        let bad = LossConfig { apply_reg: true, ..cfg };
        assert!(matches!(
            total_loss(&mut tape, Regime::FftLiteStage2, main, None, &bad),
            Err(RadaError::Contract(_))
        ));
    }

    #[test]
    fn defaults_per_regime() {
        assert_eq!(LossConfig::for_regime(Regime::Eft).reg_weight, 1.5);
        assert_eq!(LossConfig::for_regime(Regime::Ttt).reg_weight, 1.0);
        assert_eq!(LossConfig::for_regime(Regime::Eft).reg_norm, RegNorm::L2);
        assert!(LossConfig::for_regime(Regime::FftLiteStage1).apply_reg);
    }

    #[test]
    fn negative_weight_rejected() {
        let mut tape = Tape::new();
        let main = tape.constant(Tensor::scalar(1.0));
        let cfg = LossConfig {
            reg_weight: -1.0,
            ..LossConfig::for_regime(Regime::Eft)
        };
        assert!(total_loss(&mut tape, Regime::Eft, main, Some(main), &cfg).is_err());
    }
}
