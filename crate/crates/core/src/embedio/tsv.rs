//! Plain-text import for hand-written fixtures.
//!
//! ```text
//! dim=3
//! 0	0.1	0.2	0.3
//! 2	1.0	0.0	0.0
//! ```

use std::path::Path;

use super::{load_batch, EmbeddingBatch, SplitTag};
use crate::error::{RadaError, Result};
use crate::numerics::Tensor;

pub fn parse_tsv(text: &str, split: SplitTag) -> Result<EmbeddingBatch> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| RadaError::Degenerate("empty TSV file".into()))?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| RadaError::Config(format!("TSV header must be `dim=D`, got {header:?}")))?;
    if dim == 0 {
        return Err(RadaError::Degenerate("TSV declares dim=0".into()));
    }

    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut fields = line.split('\t').map(str::trim);
        let label = fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| RadaError::Config(format!("row {}: bad label", lineno + 1)))?;
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| RadaError::Config(format!("row {}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(RadaError::dim("parse_tsv", &[dim], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RadaError::NonFinite(format!("row {}", lineno + 1)));
        }
        labels.push(label);
        data.extend(values);
    }
    if labels.is_empty() {
        return Err(RadaError::Degenerate("TSV has no rows".into()));
    }
    EmbeddingBatch::new(Tensor::new(&[labels.len(), dim], data)?, labels, split)
}

/// Loads a `.tsv` fixture or an `RDA1` file depending on the extension.
pub fn load_batch_any(path: &Path, split_for_tsv: SplitTag) -> Result<EmbeddingBatch> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) {
        parse_tsv(&std::fs::read_to_string(path)?, split_for_tsv)
    } else {
        load_batch(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows() {
        let b = parse_tsv("dim=2\n1\t3\t4\n0\t0\t1\n", SplitTag::BaseTest).unwrap();
        assert_eq!(b.labels(), &[1, 0]);
        assert_eq!(b.features().data(), &[3.0, 4.0, 0.0, 1.0]);
        assert!(!b.is_normalized());
    }

    #[test]
    fn rejects_bad_header_and_width() {
        assert!(parse_tsv("2\n0\t1\t2\n", SplitTag::BaseTest).is_err());
        assert!(parse_tsv("dim=3\n0\t1\t2\n", SplitTag::BaseTest).is_err());
        assert!(parse_tsv("dim=2\n", SplitTag::BaseTest).is_err());
    }
}
