//! The rational matrix and the two logit formulations built on it.
//!
//! For a normalized image embedding `f` and normalized class embeddings `h`
//! (K×D), the rational matrix is `R[i, j] = f[j] · h[i, j]`. Summing a row of
//! `R` gives the cosine similarity used by the zero-shot classifier, so a mask
//! of ones over `R` reproduces the unadapted logits exactly.

use crate::embedio::{ClassMatrix, EmbeddingBatch};
use crate::error::{RadaError, Result};
use crate::numerics::Tensor;

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// Positive temperature-like multiplier applied to logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitScale(f64);

impl LogitScale {
    pub fn new(scale: f64) -> Result<Self> {
        if scale > 0.0 && scale.is_finite() {
            Ok(LogitScale(scale))
        } else {
            Err(RadaError::Config(format!("logit scale must be positive, got {scale}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for LogitScale {
    fn default() -> Self {
        LogitScale(DEFAULT_LOGIT_SCALE)
    }
}

/// B×K×D entrywise products of normalized image and class embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalTensor {
    values: Tensor,
}

impl RationalTensor {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// K×D slice for one sample.
    pub fn sample(&self, b: usize) -> Tensor {
        let (k, d) = (self.classes(), self.dim());
        let start = b * k * d;
        Tensor::new(&[k, d], self.values.data()[start..start + k * d].to_vec()).expect("K×D slice")
    }
}

fn check_inputs(images: &EmbeddingBatch, classes: &ClassMatrix) -> Result<()> {
    if !images.is_normalized() {
        return Err(RadaError::Contract("image embeddings must be normalized".into()));
    }
    if !classes.is_normalized() {
        return Err(RadaError::Contract("class embeddings must be normalized".into()));
    }
    if images.dim() != classes.dim() {
        return Err(RadaError::dim(
            "rational",
            images.features().shape(),
            classes.weights().shape(),
        ));
    }
    Ok(())
}

/// K×D rational matrix of one normalized embedding against `classes`.
pub fn rational_sample(f: &[f64], classes: &Tensor) -> Result<Tensor> {
    let d = classes.shape()[1];
    if f.len() != d {
        return Err(RadaError::dim("rational_sample", &[f.len()], classes.shape()));
    }
    let data = classes
        .data()
        .chunks(d)
        .flat_map(|h| h.iter().zip(f).map(|(a, b)| a * b))
        .collect();
    Tensor::new(classes.shape(), data)
}

pub fn compute_rational(images: &EmbeddingBatch, classes: &ClassMatrix) -> Result<RationalTensor> {
    check_inputs(images, classes)?;
    let (b, k, d) = (images.len(), classes.num_classes(), classes.dim());
    let mut data = Vec::with_capacity(b * k * d);
    for i in 0..b {
        data.extend(rational_sample(images.sample(i), classes.weights())?.into_data());
    }
    Ok(RationalTensor {
        values: Tensor::new(&[b, k, d], data)?,
    })
}

/// `scale · ⟨f_b, h_i⟩` for every sample and class.
pub fn zeroshot_logits(images: &EmbeddingBatch, classes: &ClassMatrix, scale: LogitScale) -> Result<Tensor> {
    check_inputs(images, classes)?;
    let logits = images.features().matmul(&classes.weights().transpose()?)?;
    Ok(logits.map(|v| v * scale.get()))
}

/// `scale · Σ_j M[b,i,j] · R[b,i,j]`.
pub fn masked_logits(rational: &RationalTensor, mask: &Tensor, scale: LogitScale) -> Result<Tensor> {
    let r = rational.values();
    if r.shape() != mask.shape() {
        return Err(RadaError::dim("masked_logits", r.shape(), mask.shape()));
    }
    let d = rational.dim();
    let data = r
        .data()
        .chunks(d)
        .zip(mask.data().chunks(d))
        .map(|(rr, mm)| scale.get() * rr.iter().zip(mm).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Tensor::new(&[rational.batch(), rational.classes()], data)
}

/// Index of the largest entry of each row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedio::SplitTag;

    fn unit_batch(rows: &[Vec<f64>]) -> EmbeddingBatch {
        let labels = vec![0; rows.len()];
        EmbeddingBatch::new(Tensor::from_rows(rows).unwrap(), labels, SplitTag::BaseTest)
            .unwrap()
            .normalized()
            .unwrap()
    }

    fn unit_classes(rows: &[Vec<f64>]) -> ClassMatrix {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        ClassMatrix::new(Tensor::from_rows(rows).unwrap(), names, false)
            .unwrap()
            .normalized()
            .unwrap()
    }

    #[test]
    fn basis_image_selects_first_coordinate() {
        let f = unit_batch(&[vec![1.0, 0.0, 0.0]]);
        let h = unit_classes(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8]]);
        let r = compute_rational(&f, &h).unwrap();
        assert_eq!(r.sample(0).row(0), &[0.6, 0.0, 0.0]);
        assert_eq!(r.sample(0).row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn self_similarity_sums_to_one() {
        let v = vec![0.48, 0.6, 0.64];
        let f = unit_batch(&[v.clone()]);
        let h = unit_classes(&[vec![0.0, 1.0, 0.0], v]);
        let r = compute_rational(&f, &h).unwrap();
        let s: f64 = r.sample(0).row(1).iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_input_is_a_contract_error() {
        let raw = EmbeddingBatch::new(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap(), vec![0], SplitTag::BaseTest)
            .unwrap();
        let h = unit_classes(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(compute_rational(&raw, &h), Err(RadaError::Contract(_))));
    }

    #[test]
    fn zeroshot_self_match_and_orthogonality() {
        let f = unit_batch(&[vec![0.0, 1.0, 0.0, 0.0]]);
        let h = unit_classes(&[vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]);
        let z = zeroshot_logits(&f, &h, LogitScale::new(1.0).unwrap()).unwrap();
        assert_eq!(z.data(), &[1.0, 0.0]);

        let h = unit_classes(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]);
        let z = zeroshot_logits(&f, &h, LogitScale::default()).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_mask_gives_zero_logits() {
        let f = unit_batch(&[vec![0.3, 0.4, 0.5]]);
        let h = unit_classes(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let r = compute_rational(&f, &h).unwrap();
        let z = masked_logits(&r, &Tensor::zeros(&[1, 2, 3]), LogitScale::default()).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert!(masked_logits(&r, &Tensor::zeros(&[1, 3, 2]), LogitScale::default()).is_err());
    }

    #[test]
    fn logit_scale_must_be_positive() {
        assert!(LogitScale::new(0.0).is_err());
        assert!(LogitScale::new(-1.0).is_err());
        assert!(LogitScale::new(f64::NAN).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let z = Tensor::from_rows(&[vec![1.0, 3.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&z), vec![1, 0]);
    }
}
