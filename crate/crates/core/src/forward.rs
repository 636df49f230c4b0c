//! Batch forward pass: rational matrix → mask → masked logits, per sample.

use crate::adapter::BoundAdapter;
use crate::error::{RadaError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rational::LogitScale;

pub struct BatchForward {
    /// B×K masked logits.
    pub logits: Var,
    /// (B·K)×D stacked masks.
    pub masks: Var,
}

/// Runs every row of `images` (B×D, normalized) through the adapter against
/// the normalized class matrix `classes` (K×D) already on `tape`.
pub fn forward_batch(
    tape: &mut Tape,
    adapter: &BoundAdapter,
    images: &Tensor,
    classes: Var,
    scale: LogitScale,
) -> Result<BatchForward> {
    let rows: Vec<usize> = (0..images.rows()).collect();
    forward_rows(tape, adapter, images, &rows, classes, scale)
}

/// As [`forward_batch`] over a subset of rows of `images`.
pub fn forward_rows(
    tape: &mut Tape,
    adapter: &BoundAdapter,
    images: &Tensor,
    rows: &[usize],
    classes: Var,
    scale: LogitScale,
) -> Result<BatchForward> {
    if rows.is_empty() {
        return Err(RadaError::Degenerate("forward pass over zero samples".into()));
    }
    let k = tape.value(classes).shape()[0];
    let d = images.last_dim();
    let mut logits = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for &b in rows {
        let image = tape.constant(Tensor::new(&[1, d], images.row(b).to_vec())?);
        let image_rows = tape.repeat_rows(image, k)?;
        let rational = tape.mul(classes, image_rows)?;
        let mask = adapter.mask(tape, image, classes, rational)?;
        let masked = tape.mul(mask, rational)?;
        let summed = tape.sum_lastdim(masked);
        logits.push(tape.scale(summed, scale.get()));
        masks.push(mask);
    }
    Ok(BatchForward {
        logits: tape.concat_rows(&logits)?,
        masks: tape.concat_rows(&masks)?,
    })
}
