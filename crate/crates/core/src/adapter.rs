//! Mask generator over the rational matrix.
//!
//! A single attention layer runs across the class axis: every class row of
//! the rational matrix `R` (K×D) attends to every other class row. Three
//! queries are projected from the broadcast image embedding, the class
//! embeddings and `R` itself; keys and values come from `R`. The per-query
//! attention outputs are averaged, projected back to width D by a
//! zero-initialized output matrix, and offset by one, so a fresh adapter
//! produces an all-ones mask.
//!
//! Further layers (when `n_layers > 1`) query with the running mask and add
//! their own zero-initialized output to it.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedio::codec::{ByteReader, ByteWriter};
use crate::embedio::{ClassMatrix, EmbeddingBatch};
use crate::error::{FormatError, RadaError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rational::{rational_sample, RationalTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Image, class and rational queries (the full model).
    MultiQuery,
    QueryR,
    QueryHR,
    QueryFR,
    /// Row-wise two-layer perceptron on `R`; no cross-class interaction.
    Mlp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::MultiQuery,
        Variant::QueryR,
        Variant::QueryHR,
        Variant::QueryFR,
        Variant::Mlp,
    ];

    fn code(self) -> u8 {
        match self {
            Variant::MultiQuery => 0,
            Variant::QueryR => 1,
            Variant::QueryHR => 2,
            Variant::QueryFR => 3,
            Variant::Mlp => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
    }

    fn queries(self) -> &'static [Role] {
        match self {
            Variant::MultiQuery => &[Role::QueryImage, Role::QueryClass, Role::QueryRational],
            Variant::QueryR => &[Role::QueryRational],
            Variant::QueryHR => &[Role::QueryClass, Role::QueryRational],
            Variant::QueryFR => &[Role::QueryImage, Role::QueryRational],
            Variant::Mlp => &[],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MultiQuery => "multi-query",
            Variant::QueryR => "query-R",
            Variant::QueryHR => "query-hR",
            Variant::QueryFR => "query-fR",
            Variant::Mlp => "mlp",
        })
    }
}

impl FromStr for Variant {
    type Err = RadaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| RadaError::Config(format!("unknown adapter variant {s:?}")))
    }
}

/// What a projector matrix is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    QueryImage,
    QueryClass,
    QueryRational,
    /// Query from the running mask (layers after the first).
    QueryMask,
    Key,
    Value,
    /// First layer of the MLP variant.
    Hidden,
    Output,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub layer: usize,
    pub role: Role,
    pub weight: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub dim: usize,
    /// Attention width; defaults to `dim`.
    pub inner: usize,
}

impl AdapterConfig {
    pub fn new(dim: usize) -> Self {
        AdapterConfig {
            variant: Variant::MultiQuery,
            n_layers: 1,
            dim,
            inner: dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.inner == 0 {
            return Err(RadaError::Config(format!(
                "dim and inner width must be positive (got {} and {})",
                self.dim, self.inner
            )));
        }
        if self.n_layers == 0 || self.n_layers > u8::MAX as usize {
            return Err(RadaError::Config(format!("n_layers must be in 1..=255, got {}", self.n_layers)));
        }
        if self.variant == Variant::Mlp && self.n_layers != 1 {
            return Err(RadaError::Config("the mlp variant has a single layer".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<(usize, Role)> {
        let mut out = Vec::new();
        if self.variant == Variant::Mlp {
            out.push((0, Role::Hidden));
            out.push((0, Role::Output));
            return out;
        }
        for layer in 0..self.n_layers {
            if layer == 0 {
                out.extend(self.variant.queries().iter().map(|&r| (0, r)));
            } else {
                out.push((layer, Role::QueryMask));
            }
            out.extend([(layer, Role::Key), (layer, Role::Value), (layer, Role::Output)]);
        }
        out
    }

    fn shape_of(&self, role: Role) -> [usize; 2] {
        match role {
            Role::Output => [self.inner, self.dim],
            _ => [self.dim, self.inner],
        }
    }
}

/// Learnable weights of the mask generator.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    config: AdapterConfig,
    projectors: Vec<Projector>,
}

impl AdapterParams {
    /// Fresh parameters: output projections are exactly zero, everything else
    /// is uniform in `±1/√dim`.
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.dim as f64).sqrt();
        let projectors = config
            .layout()
            .into_iter()
            .map(|(layer, role)| {
                let shape = config.shape_of(role);
                let weight = if role == Role::Output {
                    Tensor::zeros(&shape)
                } else {
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::new(&shape, data).expect("projector shape")
                };
                Projector { layer, role, weight }
            })
            .collect();
        Ok(AdapterParams { config, projectors })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn inner(&self) -> usize {
        self.config.inner
    }

    pub fn projectors(&self) -> &[Projector] {
        &self.projectors
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.projectors.iter().map(|p| &p.weight)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.projectors.iter_mut().map(|p| &mut p.weight)
    }

    /// Replaces all weights, in layout order.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.projectors.len() {
            return Err(RadaError::dim("set_tensors", &[self.projectors.len()], &[tensors.len()]));
        }
        for (p, t) in self.projectors.iter_mut().zip(tensors) {
            if p.weight.shape() != t.shape() {
                return Err(RadaError::dim("set_tensors", p.weight.shape(), t.shape()));
            }
            p.weight = t;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Stable hash of the bit patterns of every weight.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_u8(self.config.variant.code());
        h.write_usize(self.config.n_layers);
        for t in self.tensors() {
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Places every weight on `tape` (learnable or constant) in layout order.
    pub fn bind(&self, tape: &mut Tape, learnable: bool) -> BoundAdapter {
        let vars = self
            .tensors()
            .map(|t| {
                if learnable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundAdapter {
            config: self.config,
            roles: self.projectors.iter().map(|p| (p.layer, p.role)).collect(),
            vars,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::decode(&fs::read(path)?)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u8(CHECKPOINT_VERSION);
        w.u8(c.variant.code());
        w.u8(c.n_layers as u8);
        w.u32(u32::try_from(c.dim).map_err(|_| RadaError::Size(format!("dim {}", c.dim)))?);
        w.u32(u32::try_from(c.inner).map_err(|_| RadaError::Size(format!("inner {}", c.inner)))?);
        for t in self.tensors() {
            w.f64s(t.data());
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.magic()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let code = r.u8()?;
        let variant =
            Variant::from_code(code).ok_or_else(|| FormatError::Malformed(format!("unknown variant {code}")))?;
        let n_layers = r.u8()? as usize;
        let dim = r.u32()? as usize;
        let inner = r.u32()? as usize;
        let config = AdapterConfig {
            variant,
            n_layers,
            dim,
            inner,
        };
        config.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
        let mut projectors = Vec::new();
        for (layer, role) in config.layout() {
            let shape = config.shape_of(role);
            let data = r.f64s(shape[0] * shape[1])?;
            let weight = Tensor::new(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
            projectors.push(Projector { layer, role, weight });
        }
        r.verify_trailer()?;
        Ok(AdapterParams { config, projectors })
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDAM";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Adapter weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    config: AdapterConfig,
    roles: Vec<(usize, Role)>,
    vars: Vec<Var>,
}

impl BoundAdapter {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, layer: usize, role: Role) -> Var {
        let idx = self
            .roles
            .iter()
            .position(|&(l, r)| l == layer && r == role)
            .expect("role present in layout");
        self.vars[idx]
    }

    /// K×D mask for one sample. `image` is the 1×D normalized embedding,
    /// `classes` the K×D normalized class matrix and `rational` their K×D
    /// rational matrix, all already on `tape`.
    pub fn mask(&self, tape: &mut Tape, image: Var, classes: Var, rational: Var) -> Result<Var> {
        Ok(self.mask_traced(tape, image, classes, rational, None)?.mask)
    }

    /// Like [`BoundAdapter::mask`], additionally returning attention weights.
    /// `key_mask[c] == false` removes class `c` as a key/value everywhere.
    pub fn mask_traced(
        &self,
        tape: &mut Tape,
        image: Var,
        classes: Var,
        rational: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<MaskTrace> {
        let k = tape.value(rational).shape()[0];
        let d = tape.value(rational).shape()[1];
        if d != self.config.dim || tape.value(classes).shape() != [k, d] {
            return Err(RadaError::dim("mask", &[k, self.config.dim], tape.value(classes).shape()));
        }
        let key_bias = match key_mask {
            Some(m) if m.len() != k => return Err(RadaError::dim("key_mask", &[k], &[m.len()])),
            Some(m) if !m.iter().any(|&keep| keep) => {
                return Err(RadaError::Degenerate("key mask removes every class".into()))
            }
            Some(m) => {
                let row: Vec<f64> = m.iter().map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY }).collect();
                Some(tape.constant(Tensor::new(&[k, k], row.repeat(k))?))
            }
            None => None,
        };

        let mut attention = Vec::new();
        if self.config.variant == Variant::Mlp {
            let hidden = tape.matmul(rational, self.get(0, Role::Hidden))?;
            let hidden = tape.tanh(hidden);
            let delta = tape.matmul(hidden, self.get(0, Role::Output))?;
            let mask = tape.add_scalar(delta, 1.0);
            return Ok(MaskTrace { mask, attention });
        }

        let scale = 1.0 / (self.config.inner as f64).sqrt();
        let image_rows = tape.repeat_rows(image, k)?;
        let mut mask: Option<Var> = None;
        for layer in 0..self.config.n_layers {
            let key = tape.matmul(rational, self.get(layer, Role::Key))?;
            let value = tape.matmul(rational, self.get(layer, Role::Value))?;
            let sources: Vec<(Var, Role)> = if layer == 0 {
                self.config
                    .variant
                    .queries()
                    .iter()
                    .map(|&role| {
                        let src = match role {
                            Role::QueryImage => image_rows,
                            Role::QueryClass => classes,
                            _ => rational,
                        };
                        (src, role)
                    })
                    .collect()
            } else {
                vec![(mask.expect("previous layer mask"), Role::QueryMask)]
            };

            let mut summed: Option<Var> = None;
            for &(src, role) in &sources {
                let q = tape.matmul(src, self.get(layer, role))?;
                let scores = tape.matmul_bt(q, key)?;
                let mut scores = tape.scale(scores, scale);
                if let Some(bias) = key_bias {
                    scores = tape.add(scores, bias)?;
                }
                let weights = tape.softmax_lastdim(scores);
                attention.push(weights);
                let out = tape.matmul(weights, value)?;
                summed = Some(match summed {
                    Some(s) => tape.add(s, out)?,
                    None => out,
                });
            }
            let averaged = tape.scale(summed.expect("at least one query"), 1.0 / sources.len() as f64);
            let delta = tape.matmul(averaged, self.get(layer, Role::Output))?;
            mask = Some(match mask {
                None => tape.add_scalar(delta, 1.0),
                Some(prev) => tape.add(prev, delta)?,
            });
        }
        Ok(MaskTrace {
            mask: mask.expect("n_layers >= 1"),
            attention,
        })
    }
}

pub struct MaskTrace {
    pub mask: Var,
    /// K×K attention weights, one per query per layer.
    pub attention: Vec<Var>,
}

/// B×K×D calibration mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    values: Tensor,
}

impl MaskTensor {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Mask of a single sample without recording gradients.
pub fn mask_sample(params: &AdapterParams, image: &[f64], classes: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let r = rational_sample(image, classes)?;
    let image = tape.constant(Tensor::new(&[1, image.len()], image.to_vec())?);
    let classes = tape.constant(classes.clone());
    let rational = tape.constant(r.clone());
    let mask = bound.mask(&mut tape, image, classes, rational)?;
    Ok((tape.value(mask).clone(), r))
}

pub fn compute_mask(
    params: &AdapterParams,
    images: &EmbeddingBatch,
    classes: &ClassMatrix,
    rational: &RationalTensor,
) -> Result<MaskTensor> {
    if !images.is_normalized() || !classes.is_normalized() {
        return Err(RadaError::Contract("mask inputs must be normalized".into()));
    }
    if rational.batch() != images.len() || rational.classes() != classes.num_classes() {
        return Err(RadaError::dim(
            "compute_mask",
            rational.values().shape(),
            &[images.len(), classes.num_classes()],
        ));
    }
    if classes.dim() != params.dim() {
        return Err(RadaError::dim("compute_mask", &[params.dim()], &[classes.dim()]));
    }
    let mut data = Vec::with_capacity(rational.values().numel());
    for b in 0..images.len() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let image = tape.constant(Tensor::new(&[1, images.dim()], images.sample(b).to_vec())?);
        let cls = tape.constant(classes.weights().clone());
        let r = tape.constant(rational.sample(b));
        let m = bound.mask(&mut tape, image, cls, r)?;
        data.extend_from_slice(tape.value(m).data());
    }
    Ok(MaskTensor {
        values: Tensor::new(rational.values().shape(), data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, n_layers: usize) -> AdapterConfig {
        AdapterConfig {
            variant,
            n_layers,
            dim: 4,
            inner: 3,
        }
    }

    #[test]
    fn fresh_adapter_yields_exact_ones() {
        let classes = Tensor::from_rows(&[
            vec![0.5, 0.5, 0.5, 0.5],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.6, 0.8, 0.0],
        ])
        .unwrap();
        let f = [0.0, 0.0, 0.6, 0.8];
        for v in Variant::ALL {
            let layers = if v == Variant::Mlp { 1 } else { 2 };
            let p = AdapterParams::new(cfg(v, layers), 9).unwrap();
            let (m, _) = mask_sample(&p, &f, &classes).unwrap();
            assert!(m.data().iter().all(|&x| x == 1.0), "{v}");
        }
    }

    #[test]
    fn layout_per_variant() {
        let p = AdapterParams::new(cfg(Variant::QueryHR, 2), 0).unwrap();
        let roles: Vec<_> = p.projectors().iter().map(|p| (p.layer, p.role)).collect();
        assert_eq!(
            roles,
            vec![
                (0, Role::QueryClass),
                (0, Role::QueryRational),
                (0, Role::Key),
                (0, Role::Value),
                (0, Role::Output),
                (1, Role::QueryMask),
                (1, Role::Key),
                (1, Role::Value),
                (1, Role::Output),
            ]
        );
        assert_eq!(p.projectors()[4].weight.shape(), &[3, 4]);
        assert_eq!(p.projectors()[0].weight.shape(), &[4, 3]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(AdapterParams::new(AdapterConfig { inner: 0, ..cfg(Variant::QueryR, 1) }, 0).is_err());
        assert!(AdapterParams::new(cfg(Variant::Mlp, 2), 0).is_err());
        assert!("attention".parse::<Variant>().is_err());
        assert_eq!("query-hR".parse::<Variant>().unwrap(), Variant::QueryHR);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut p = AdapterParams::new(cfg(Variant::MultiQuery, 2), 4).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.125);
        }
        let bytes = p.encode().unwrap();
        assert_eq!(&bytes[..4], b"RDAM");
        assert_eq!(AdapterParams::decode(&bytes).unwrap(), p);

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(AdapterParams::decode(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(AdapterParams::decode(&bad), Err(FormatError::VersionMismatch { .. })));
        assert!(matches!(
            AdapterParams::decode(&bytes[..bytes.len() - 12]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(matches!(AdapterParams::decode(&bad), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let p = AdapterParams::new(cfg(Variant::MultiQuery, 1), 1).unwrap();
        let mut q = p.clone();
        assert_eq!(p.fingerprint(), q.fingerprint());
        q.tensors_mut().next().unwrap().data_mut()[0] += 1e-12;
        assert_ne!(p.fingerprint(), q.fingerprint());
    }
}
