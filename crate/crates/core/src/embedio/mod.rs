//! Embedding containers, the `RDA1` file format, and synthetic data.

pub(crate) mod codec;
mod format;
mod synth;
mod tsv;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{RadaError, Result};
use crate::numerics::{l2_normalize_rows, row_norms, Tensor};

pub use format::{decode, encode, load, load_batch, load_classes, save, RdaFile};
pub use synth::{synth_gaussian, synth_stream, ttt_views, SynthConfig};
pub use tsv::{load_batch_any, parse_tsv};

/// Tolerance for the unit-norm invariant of normalized rows.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    BaseTrain,
    BaseTest,
    NewTest,
    TttStream,
}

impl SplitTag {
    pub fn code(self) -> u8 {
        match self {
            SplitTag::BaseTrain => 0,
            SplitTag::BaseTest => 1,
            SplitTag::NewTest => 2,
            SplitTag::TttStream => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SplitTag::BaseTrain,
            1 => SplitTag::BaseTest,
            2 => SplitTag::NewTest,
            3 => SplitTag::TttStream,
            _ => return None,
        })
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::BaseTrain => "base-train",
            SplitTag::BaseTest => "base-test",
            SplitTag::NewTest => "new-test",
            SplitTag::TttStream => "ttt-stream",
        })
    }
}

impl FromStr for SplitTag {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base-train" => SplitTag::BaseTrain,
            "base-test" => SplitTag::BaseTest,
            "new-test" => SplitTag::NewTest,
            "ttt-stream" => SplitTag::TttStream,
            other => return Err(RadaError::Config(format!("unknown split tag {other:?}"))),
        })
    }
}

/// B×D image embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    features: Tensor,
    labels: Vec<usize>,
    normalized: bool,
    split: SplitTag,
}

impl EmbeddingBatch {
    /// Wraps raw features. The normalized flag is set only if every row is
    /// already unit length.
    pub fn new(features: Tensor, labels: Vec<usize>, split: SplitTag) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(RadaError::Contract(format!(
                "embedding batch must be B×D, got {:?}",
                features.shape()
            )));
        }
        if features.shape()[0] != labels.len() {
            return Err(RadaError::dim("EmbeddingBatch::new", features.shape(), &[labels.len()]));
        }
        let normalized = features.numel() > 0 && rows_are_unit(&features);
        Ok(EmbeddingBatch {
            features,
            labels,
            normalized,
            split,
        })
    }

    pub(crate) fn from_parts(features: Tensor, labels: Vec<usize>, normalized: bool, split: SplitTag) -> Self {
        EmbeddingBatch {
            features,
            labels,
            normalized,
            split,
        }
    }

    /// Row-normalized copy.
    pub fn normalized(&self) -> Result<Self> {
        Ok(EmbeddingBatch {
            features: l2_normalize_rows(&self.features)?,
            labels: self.labels.clone(),
            normalized: true,
            split: self.split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rows reordered by `order` (each index used once or more).
    pub fn select(&self, order: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(order.len() * d);
        let mut labels = Vec::with_capacity(order.len());
        for &i in order {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        EmbeddingBatch {
            features: Tensor::new(&[order.len(), d], data).expect("selected rows"),
            labels,
            normalized: self.normalized,
            split: self.split,
        }
    }

    /// Checks labels against a class count.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(bad) => Err(RadaError::Contract(format!(
                "label {bad} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// K×D class embeddings (text features) or classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatrix {
    weights: Tensor,
    names: Vec<String>,
    learnable: bool,
    normalized: bool,
}

impl ClassMatrix {
    pub fn new(weights: Tensor, names: Vec<String>, learnable: bool) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(RadaError::Contract(format!(
                "class matrix must be K×D, got {:?}",
                weights.shape()
            )));
        }
        let k = weights.shape()[0];
        if k < 2 {
            return Err(RadaError::Degenerate(format!("need at least 2 classes, got {k}")));
        }
        if names.len() != k {
            return Err(RadaError::dim("ClassMatrix::new", weights.shape(), &[names.len()]));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(RadaError::Contract(format!("duplicate class name {dup:?}")));
        }
        let normalized = rows_are_unit(&weights);
        Ok(ClassMatrix {
            weights,
            names,
            learnable,
            normalized,
        })
    }

    pub(crate) fn from_parts(weights: Tensor, names: Vec<String>, learnable: bool, normalized: bool) -> Self {
        ClassMatrix {
            weights,
            names,
            learnable,
            normalized,
        }
    }

    pub fn normalized(&self) -> Result<Self> {
        Ok(ClassMatrix {
            weights: l2_normalize_rows(&self.weights)?,
            names: self.names.clone(),
            learnable: self.learnable,
            normalized: true,
        })
    }

    pub fn with_learnable(mut self, learnable: bool) -> Self {
        self.learnable = learnable;
        self
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Replaces the weights, keeping names and flags; the normalized flag is
    /// recomputed.
    pub fn with_weights(&self, weights: Tensor) -> Result<Self> {
        let mut out = ClassMatrix::new(weights, self.names.clone(), self.learnable)?;
        if out.weights.shape() != self.weights.shape() {
            return Err(RadaError::dim("with_weights", self.weights.shape(), out.weights.shape()));
        }
        out.normalized = rows_are_unit(&out.weights);
        Ok(out)
    }
}

/// Base-to-new split of a few-shot dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub base_train: EmbeddingBatch,
    pub base_test: EmbeddingBatch,
    pub new_test: EmbeddingBatch,
    pub base_classes: ClassMatrix,
    pub new_classes: ClassMatrix,
}

const BUNDLE_FILES: [&str; 5] = [
    "base_train.rda",
    "base_test.rda",
    "new_test.rda",
    "base_classes.rda",
    "new_classes.rda",
];

impl DatasetBundle {
    pub fn new(
        base_train: EmbeddingBatch,
        base_test: EmbeddingBatch,
        new_test: EmbeddingBatch,
        base_classes: ClassMatrix,
        new_classes: ClassMatrix,
    ) -> Result<Self> {
        let base: HashSet<&str> = base_classes.names().iter().map(String::as_str).collect();
        if let Some(shared) = new_classes.names().iter().find(|n| base.contains(n.as_str())) {
            return Err(RadaError::Contract(format!(
                "class {shared:?} appears in both base and new splits"
            )));
        }
        base_train.check_labels(base_classes.num_classes())?;
        base_test.check_labels(base_classes.num_classes())?;
        new_test.check_labels(new_classes.num_classes())?;
        let d = base_classes.dim();
        for (what, got) in [
            ("base_train", base_train.dim()),
            ("base_test", base_test.dim()),
            ("new_test", new_test.dim()),
            ("new_classes", new_classes.dim()),
        ] {
            if got != d {
                return Err(RadaError::Contract(format!("{what} has dim {got}, classes have {d}")));
            }
        }
        Ok(DatasetBundle {
            base_train,
            base_test,
            new_test,
            base_classes,
            new_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.base_classes.dim()
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let files = [
            RdaFile::Embeddings(self.base_train.clone()),
            RdaFile::Embeddings(self.base_test.clone()),
            RdaFile::Embeddings(self.new_test.clone()),
            RdaFile::Classes(self.base_classes.clone()),
            RdaFile::Classes(self.new_classes.clone()),
        ];
        for (name, file) in BUNDLE_FILES.iter().zip(&files) {
            save(&dir.join(name), file)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        DatasetBundle::new(
            load_batch(&dir.join(BUNDLE_FILES[0]))?,
            load_batch(&dir.join(BUNDLE_FILES[1]))?,
            load_batch(&dir.join(BUNDLE_FILES[2]))?,
            load_classes(&dir.join(BUNDLE_FILES[3]))?,
            load_classes(&dir.join(BUNDLE_FILES[4]))?,
        )
    }
}

pub(crate) fn rows_are_unit(t: &Tensor) -> bool {
    row_norms(t).iter().all(|n| (n - 1.0).abs() <= NORM_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_matrix_rejects_duplicates_and_single_class() {
        let w = Tensor::ones(&[2, 3]);
        assert!(ClassMatrix::new(w.clone(), vec!["a".into(), "a".into()], false).is_err());
        assert!(ClassMatrix::new(Tensor::ones(&[1, 3]), vec!["a".into()], false).is_err());
        assert!(ClassMatrix::new(w, vec!["a".into(), "b".into()], false).is_ok());
    }

    #[test]
    fn bundle_rejects_shared_class_names() {
        let batch = EmbeddingBatch::new(Tensor::ones(&[1, 2]), vec![0], SplitTag::BaseTrain).unwrap();
        let a = ClassMatrix::new(Tensor::ones(&[2, 2]), vec!["x".into(), "y".into()], false).unwrap();
        let b = ClassMatrix::new(Tensor::ones(&[2, 2]), vec!["y".into(), "z".into()], false).unwrap();
        let err = DatasetBundle::new(batch.clone(), batch.clone(), batch, a, b).unwrap_err();
        assert!(matches!(err, RadaError::Contract(_)));
    }

    #[test]
    fn normalized_flag_tracks_rows() {
        let raw = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let batch = EmbeddingBatch::new(raw, vec![0], SplitTag::BaseTest).unwrap();
        assert!(!batch.is_normalized());
        let n = batch.normalized().unwrap();
        assert!(n.is_normalized());
        assert!(rows_are_unit(n.features()));
    }

    #[test]
    fn split_tag_codes_round_trip() {
        for code in 0..4 {
            let tag = SplitTag::from_code(code).unwrap();
            assert_eq!(tag.code(), code);
            assert_eq!(tag.to_string().parse::<SplitTag>().unwrap(), tag);
        }
        assert!(SplitTag::from_code(4).is_none());
    }
}
