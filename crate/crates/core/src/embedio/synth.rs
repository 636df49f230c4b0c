//! Seeded Gaussian-cluster datasets standing in for encoder embeddings.
//!
//! Class prototypes are uniform on the unit sphere. Image embeddings scatter
//! around their prototype with spread `sigma`; class (text) embeddings are the
//! prototypes perturbed by `sigma / 2`, which emulates the offset between the
//! image and text modalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClassMatrix, DatasetBundle, EmbeddingBatch, SplitTag};
use crate::error::{RadaError, Result};
use crate::numerics::Tensor;

const MAX_CLASSES: usize = 1 << 16;

// Independent ChaCha streams per generated split.
const STREAM_PROTOTYPES: u64 = 0;
const STREAM_BASE_TRAIN: u64 = 1;
const STREAM_BASE_TEST: u64 = 2;
const STREAM_NEW_TEST: u64 = 3;
const STREAM_TTT: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    /// Training samples per base class.
    pub shots: usize,
    /// Test samples per class, for both base and new splits.
    pub test_per_class: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            dim: 32,
            shots: 16,
            test_per_class: 50,
            sigma: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes > MAX_CLASSES {
            return Err(RadaError::Size(format!(
                "{} classes exceeds the limit of {MAX_CLASSES}",
                self.classes
            )));
        }
        if self.classes < 2 || self.dim < 2 || self.shots < 1 || self.test_per_class < 1 {
            return Err(RadaError::Config(format!(
                "need classes >= 2, dim >= 2, shots >= 1, test_per_class >= 1 (got {}, {}, {}, {})",
                self.classes, self.dim, self.shots, self.test_per_class
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RadaError::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

struct Prototypes {
    base: Vec<Vec<f64>>,
    new: Vec<Vec<f64>>,
    base_text: Vec<Vec<f64>>,
    new_text: Vec<Vec<f64>>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A Gaussian draw of dimension >= 2 has norm zero with probability zero.
    debug_assert!(norm > 0.0);
    v.iter_mut().for_each(|x| *x /= norm);
}

fn perturbed(rng: &mut impl Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let mut v: Vec<f64> = center
        .iter()
        .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&mut v);
    v
}

fn draw_prototypes(cfg: &SynthConfig) -> Prototypes {
    let mut rng = rng_for(cfg.seed, STREAM_PROTOTYPES);
    let mut sphere = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let mut v = gaussian(&mut rng, cfg.dim);
                normalize(&mut v);
                v
            })
            .collect()
    };
    let base = sphere(cfg.classes);
    let new = sphere(cfg.classes);
    let base_text = base.iter().map(|p| perturbed(&mut rng, p, cfg.sigma / 2.0)).collect();
    let new_text = new.iter().map(|p| perturbed(&mut rng, p, cfg.sigma / 2.0)).collect();
    Prototypes {
        base,
        new,
        base_text,
        new_text,
    }
}

fn draw_split(
    protos: &[Vec<f64>],
    per_class: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    split: SplitTag,
) -> EmbeddingBatch {
    let k = protos.len();
    let mut rows = Vec::with_capacity(k * per_class);
    let mut labels = Vec::with_capacity(k * per_class);
    for _ in 0..per_class {
        for (label, p) in protos.iter().enumerate() {
            rows.push(perturbed(rng, p, sigma));
            labels.push(label);
        }
    }
    let features = Tensor::from_rows(&rows).expect("non-empty split");
    EmbeddingBatch::from_parts(features, labels, true, split)
}

fn class_matrix(rows: &[Vec<f64>], prefix: &str) -> ClassMatrix {
    let names = (0..rows.len()).map(|i| format!("{prefix}_{i}")).collect();
    let weights = Tensor::from_rows(rows).expect("non-empty classes");
    ClassMatrix::from_parts(weights, names, false, true)
}

/// Base-to-new bundle: `classes` base classes plus `classes` disjoint new
/// classes, all embeddings unit-normalized.
pub fn synth_gaussian(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let protos = draw_prototypes(cfg);
    let base_train = draw_split(
        &protos.base,
        cfg.shots,
        cfg.sigma,
        &mut rng_for(cfg.seed, STREAM_BASE_TRAIN),
        SplitTag::BaseTrain,
    );
    let base_test = draw_split(
        &protos.base,
        cfg.test_per_class,
        cfg.sigma,
        &mut rng_for(cfg.seed, STREAM_BASE_TEST),
        SplitTag::BaseTest,
    );
    let new_test = draw_split(
        &protos.new,
        cfg.test_per_class,
        cfg.sigma,
        &mut rng_for(cfg.seed, STREAM_NEW_TEST),
        SplitTag::NewTest,
    );
    DatasetBundle::new(
        base_train,
        base_test,
        new_test,
        class_matrix(&protos.base_text, "base"),
        class_matrix(&protos.new_text, "new"),
    )
}

/// Test-time stream over the base classes of the bundle generated by `cfg`,
/// scattered with `drift_sigma` instead of `cfg.sigma`. Labels cycle through
/// the classes so the stream is balanced.
pub fn synth_stream(cfg: &SynthConfig, len: usize, drift_sigma: f64) -> Result<EmbeddingBatch> {
    cfg.validate()?;
    if len == 0 {
        return Err(RadaError::Degenerate("empty test-time stream".into()));
    }
    if !(drift_sigma > 0.0 && drift_sigma.is_finite()) {
        return Err(RadaError::Config(format!("drift sigma must be > 0, got {drift_sigma}")));
    }
    let protos = draw_prototypes(cfg);
    let mut rng = rng_for(cfg.seed, STREAM_TTT);
    let k = cfg.classes;
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|i| perturbed(&mut rng, &protos.base[i % k], drift_sigma))
        .collect();
    let labels = (0..len).map(|i| i % k).collect();
    Ok(EmbeddingBatch::from_parts(
        Tensor::from_rows(&rows)?,
        labels,
        true,
        SplitTag::TttStream,
    ))
}

/// Augmented views of one embedding: row 0 is `sample` itself, each further
/// row is `normalize(dropout(sample) + jitter·N(0, I))`.
pub fn ttt_views(sample: &[f64], n_views: usize, jitter: f64, drop_frac: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&drop_frac) {
        return Err(RadaError::Config(format!("drop_frac must be in [0, 1), got {drop_frac}")));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(RadaError::Config(format!("jitter must be >= 0, got {jitter}")));
    }
    let dim = sample.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = sample
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .ok_or_else(|| RadaError::Degenerate("empty sample".into()))?;
    let mut data = Vec::with_capacity((n_views + 1) * dim);
    data.extend_from_slice(sample);
    for _ in 0..n_views {
        let keep: Vec<bool> = (0..dim).map(|_| rng.random::<f64>() >= drop_frac).collect();
        let all_dropped = keep.iter().all(|k| !k);
        let mut view: Vec<f64> = sample
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let kept = keep[j] || (all_dropped && j == anchor);
                let base = if kept { x } else { 0.0 };
                base + jitter * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let norm = view.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(RadaError::Degenerate("augmented view collapsed to zero".into()));
        }
        view.iter_mut().for_each(|x| *x /= norm);
        data.extend_from_slice(&view);
    }
    Tensor::new(&[n_views + 1, dim], data)
}
