//! Finite-difference verification of the full training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adapter::{AdapterConfig, AdapterParams, Variant};
use crate::error::{RadaError, Result};
use crate::forward::forward_batch;
use crate::losses::{adapt_loss, mask_reg, total_loss, ttt_entropy, LossConfig, RegNorm, Regime};
use crate::numerics::{finite_diff_check, l2_normalize_rows, Tape, Tensor, Var, FD_STEP};
use crate::rational::LogitScale;

/// Pass threshold on the max relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

pub const ALL_REGIMES: [Regime; 4] = [Regime::Eft, Regime::Ttt, Regime::FftLiteStage1, Regime::FftLiteStage2];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckCase {
    pub regime: Regime,
    pub reg_norm: RegNorm,
    pub variant: Variant,
    pub n_layers: usize,
    pub batch: usize,
    pub classes: usize,
    pub dim: usize,
    pub inner: usize,
    pub logit_scale: f64,
    /// Standard deviation of every projector entry at the check point.
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for GradcheckCase {
    fn default() -> Self {
        GradcheckCase {
            regime: Regime::Eft,
            reg_norm: RegNorm::L2,
            variant: Variant::MultiQuery,
            n_layers: 1,
            batch: 2,
            classes: 3,
            dim: 4,
            inner: 4,
            // Unit-order logits keep softmax gradients away from saturation;
            // the scale is a constant factor on the graph either way.
            logit_scale: 1.0,
            weight_scale: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckResult {
    pub case: GradcheckCase,
    pub max_rel_err: f64,
    /// Number of scalar coordinates checked.
    pub coordinates: usize,
    pub loss: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

struct Instance {
    images: Tensor,
    classes: Tensor,
    labels: Vec<usize>,
    params: AdapterParams,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape")
}

fn instance(case: &GradcheckCase) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let images = l2_normalize_rows(&gaussian(&mut rng, &[case.batch, case.dim]))?;
    let classes = gaussian(&mut rng, &[case.classes, case.dim]);
    let labels = (0..case.batch).map(|_| rng.random_range(0..case.classes)).collect();
    let config = AdapterConfig {
        variant: case.variant,
        n_layers: case.n_layers,
        dim: case.dim,
        inner: case.inner,
    };
    let mut params = AdapterParams::new(config, case.seed)?;
    // Fresh weights are a poor check point: zero output projections make
    // every upstream gradient exactly zero, and small projectors give
    // near-uniform attention whose gradients drown in round-off.
    let tensors = params
        .projectors()
        .iter()
        .map(|p| gaussian(&mut rng, p.weight.shape()).map(|v| v * case.weight_scale))
        .collect();
    params.set_tensors(tensors)?;
    Ok(Instance {
        images,
        classes,
        labels,
        params,
    })
}

/// Records the objective; returns the loss and the learnable leaves in
/// `learnables` order.
fn objective(case: &GradcheckCase, inst: &Instance, learnables: &[Tensor], tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
    let scale = LogitScale::new(case.logit_scale)?;
    let n_adapter = inst.params.projectors().len();
    let mut params = inst.params.clone();
    params.set_tensors(learnables[..n_adapter].to_vec())?;
    let bound = params.bind(tape, true);
    let mut vars = bound.vars().to_vec();
    let classes = if case.regime == Regime::FftLiteStage2 {
        let w = tape.param(learnables[n_adapter].clone());
        vars.push(w);
        tape.l2_normalize_rows(w)?
    } else {
        tape.constant(l2_normalize_rows(&inst.classes)?)
    };
    let fwd = forward_batch(tape, &bound, &inst.images, classes, scale)?;
    let loss_cfg = LossConfig {
        reg_norm: case.reg_norm,
        ..LossConfig::for_regime(case.regime)
    };
    let main = match case.regime {
        Regime::Ttt => ttt_entropy(tape, fwd.logits, loss_cfg.entropy_mode)?,
        _ => adapt_loss(tape, fwd.logits, &inst.labels)?,
    };
    let reg = loss_cfg.apply_reg.then(|| mask_reg(tape, fwd.masks, case.reg_norm));
    Ok((total_loss(tape, case.regime, main, reg, &loss_cfg)?, vars))
}

/// Compares tape gradients of the regime's full objective (with respect to
/// every adapter weight, plus the classifier in stage 2) to central
/// differences at `FD_STEP`.
pub fn gradcheck(case: &GradcheckCase) -> Result<GradcheckResult> {
    if case.batch == 0 || case.classes < 2 || case.dim == 0 || case.inner == 0 {
        return Err(RadaError::Config(format!("invalid gradcheck instance {case:?}")));
    }
    let inst = instance(case)?;
    let mut learnables: Vec<Tensor> = inst.params.tensors().cloned().collect();
    if case.regime == Regime::FftLiteStage2 {
        learnables.push(inst.classes.clone());
    }

    let mut tape = Tape::new();
    let (loss, vars) = objective(case, &inst, &learnables, &mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("learnable gradient"))
        .collect();
    let loss_value = tape.value(loss).data()[0];

    let f = |p: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = objective(case, &inst, p, &mut t)?;
        Ok(t.value(l).data()[0])
    };
    let max_rel_err = finite_diff_check(f, &learnables, &analytic, FD_STEP)?;
    Ok(GradcheckResult {
        case: *case,
        max_rel_err,
        coordinates: learnables.iter().map(Tensor::numel).sum(),
        loss: loss_value,
    })
}

/// Every regime × regularizer norm × adapter variant on the base instance.
pub fn gradcheck_suite(base: &GradcheckCase) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for regime in ALL_REGIMES {
        for reg_norm in RegNorm::ALL {
            for variant in Variant::ALL {
                out.push(gradcheck(&GradcheckCase {
                    regime,
                    reg_norm,
                    variant,
                    ..*base
                })?);
            }
        }
    }
    Ok(out)
}
