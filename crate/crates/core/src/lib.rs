//! Rational-matrix adaptation of frozen vision-language classification heads.
//!
//! Given an image embedding `f` and class embeddings `h`, the rational matrix
//! `R[i, j] = f̄[j]·h̄_i[j]` decomposes every cosine logit into per-dimension
//! contributions. A small attention layer predicts a mask over `R` and the
//! masked row sums become the adapted logits.

pub mod adapter;
pub mod embedio;
pub mod error;
pub mod eval;
pub mod forward;
pub mod infotheory;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod rational;
pub mod selfcheck;
pub mod trainer;
pub mod ttt;

pub use error::{FormatError, RadaError, Result};
