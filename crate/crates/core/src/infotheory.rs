//! Exact plug-in mutual information on small discrete ensembles, and
//! brute-force checks that the rational matrix is sufficient for the label
//! and that masking it dominates masking either modality.
//!
//! Mask grids use powers of two, so `f·(m·h)`, `(f·m)·h` and `(f·h)·m` are
//! bit-identical and every image-side, text-side or joint scheme coincides
//! exactly with some full mask.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{RadaError, Result};
use crate::numerics::Tensor;

pub const MAX_DIM: usize = 4;
pub const MAX_CLASSES: usize = 3;
pub const MAX_SUPPORT: usize = 32;
/// Absolute tolerance for equalities between information quantities.
pub const MI_TOL: f64 = 1e-12;

/// Mask values searched for the full, image-side and text-side schemes.
pub const BASE_GRID: [f64; 3] = [0.5, 1.0, 2.0];
/// Pairwise products of [`BASE_GRID`]: the effective masks of joint schemes.
pub const PRODUCT_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Uniform bins over `[lo, hi]`; values outside land in the edge bins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    bins: usize,
    lo: f64,
    hi: f64,
}

impl Quantizer {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(RadaError::Config(format!("invalid quantizer: {bins} bins over [{lo}, {hi}]")));
        }
        Ok(Quantizer { bins, lo, hi })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bucket(&self, v: f64) -> i64 {
        let width = (self.hi - self.lo) / self.bins as f64;
        (((v - self.lo) / width).floor() as i64).clamp(0, self.bins as i64 - 1)
    }

    pub fn key(&self, values: &[f64]) -> Vec<i64> {
        values.iter().map(|&v| self.bucket(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportPoint {
    pub f: Vec<f64>,
    pub label: usize,
    pub prob: f64,
}

/// Finite joint distribution of (image embedding, label) with fixed class
/// embeddings `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteEnsemble {
    support: Vec<SupportPoint>,
    h: Tensor,
    quantizer: Quantizer,
}

impl DiscreteEnsemble {
    pub fn new(support: Vec<SupportPoint>, h: Tensor, quantizer: Quantizer) -> Result<Self> {
        if support.is_empty() {
            return Err(RadaError::Degenerate("ensemble has empty support".into()));
        }
        if h.shape().len() != 2 {
            return Err(RadaError::dim("ensemble", &[MAX_CLASSES, MAX_DIM], h.shape()));
        }
        let (k, d) = (h.shape()[0], h.shape()[1]);
        if d == 0 || d > MAX_DIM || k == 0 || k > MAX_CLASSES || support.len() > MAX_SUPPORT {
            return Err(RadaError::Size(format!(
                "ensemble K={k}, D={d}, support={} exceeds K<={MAX_CLASSES}, D<={MAX_DIM}, support<={MAX_SUPPORT}",
                support.len()
            )));
        }
        let mut total = 0.0;
        for p in &support {
            if p.f.len() != d {
                return Err(RadaError::dim("ensemble", &[d], &[p.f.len()]));
            }
            if p.label >= k {
                return Err(RadaError::Contract(format!("label {} out of range for {k} classes", p.label)));
            }
            if !(p.prob >= 0.0 && p.prob.is_finite()) || !p.f.iter().all(|v| v.is_finite()) {
                return Err(RadaError::NonFinite(format!("invalid support point {p:?}")));
            }
            total += p.prob;
        }
        if (total - 1.0).abs() > MI_TOL {
            return Err(RadaError::Contract(format!("probabilities sum to {total}, not 1")));
        }
        if !h.is_finite() {
            return Err(RadaError::NonFinite("class embeddings".into()));
        }
        Ok(DiscreteEnsemble { support, h, quantizer })
    }

    /// `n` unit-norm Gaussian embeddings with uniform labels and random
    /// positive weights, against unit-norm Gaussian class embeddings.
    pub fn random(seed: u64, classes: usize, dim: usize, n: usize, quantizer: Quantizer) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    return v.into_iter().map(|x| x / norm).collect();
                }
            }
        };
        let h_rows: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut rng)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let support = weights
            .iter()
            .map(|w| SupportPoint {
                f: unit(&mut rng),
                label: rng.random_range(0..classes),
                prob: w / total,
            })
            .collect();
        DiscreteEnsemble::new(support, Tensor::from_rows(&h_rows)?, quantizer)
    }

    pub fn support(&self) -> &[SupportPoint] {
        &self.support
    }

    pub fn h(&self) -> &Tensor {
        &self.h
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn classes(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.h.shape()[1]
    }
}

/// Plug-in `I(A; B)` in nats of an exact joint given as weighted pairs of
/// keys. Symmetric in `A` and `B` up to summation order.
pub fn mutual_information_joint<A: Ord + Clone, B: Ord + Clone>(pairs: &[(f64, A, B)]) -> f64 {
    let mut joint: BTreeMap<(A, B), f64> = BTreeMap::new();
    let mut pa: BTreeMap<A, f64> = BTreeMap::new();
    let mut pb: BTreeMap<B, f64> = BTreeMap::new();
    for (p, a, b) in pairs {
        *joint.entry((a.clone(), b.clone())).or_default() += p;
        *pa.entry(a.clone()).or_default() += p;
        *pb.entry(b.clone()).or_default() += p;
    }
    joint
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|((a, b), &p)| p * (p / (pa[a] * pb[b])).ln())
        .sum()
}

/// `I(Y; T)` for the deterministic statistic `T = statistic(f, h)`.
pub fn mutual_information<S>(ensemble: &DiscreteEnsemble, statistic: S) -> f64
where
    S: Fn(&[f64], &Tensor) -> Vec<i64>,
{
    let pairs: Vec<(f64, usize, Vec<i64>)> = ensemble
        .support
        .iter()
        .map(|p| (p.prob, p.label, statistic(&p.f, &ensemble.h)))
        .collect();
    mutual_information_joint(&pairs)
}

/// Exact bit pattern of a vector, for statistics that must not quantize.
pub fn exact_key(values: &[f64]) -> Vec<i64> {
    // +0.0 and -0.0 are the same value.
    values.iter().map(|&v| if v == 0.0 { 0 } else { v.to_bits() as i64 }).collect()
}

/// Row-major `R[i, j] = f[j]·h[i, j]`.
pub fn rational_values(f: &[f64], h: &Tensor) -> Vec<f64> {
    let d = f.len();
    h.data().iter().enumerate().map(|(n, &hv)| f[n % d] * hv).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// The inequality holds strictly.
    Holds,
    /// Both sides agree within [`MI_TOL`].
    Equal,
    Violated,
    /// Budget exhausted before the comparison could be made.
    Partial,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Holds => "holds",
            Verdict::Equal => "equal",
            Verdict::Violated => "violated",
            Verdict::Partial => "partial",
        })
    }
}

/// Verdict for the claim `lhs >= rhs`.
pub fn ge_verdict(lhs: f64, rhs: f64) -> Verdict {
    if (lhs - rhs).abs() <= MI_TOL {
        Verdict::Equal
    } else if lhs > rhs {
        Verdict::Holds
    } else {
        Verdict::Violated
    }
}

fn line(lemma: &str, lhs: f64, rhs: f64, verdict: Verdict) -> String {
    format!("lemma={lemma} lhs={lhs} rhs={rhs} verdict={verdict}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1Report {
    /// I(Y; q(R)).
    pub lhs: f64,
    /// I(Y; f, h) over exact values.
    pub rhs: f64,
    /// Two distinct embeddings share a quantized rational matrix.
    pub collision: bool,
    pub verdict: Verdict,
}

impl Lemma1Report {
    pub fn line(&self) -> String {
        let mut s = line("1", self.lhs, self.rhs, self.verdict);
        if self.collision {
            s.push_str(" collision=true");
        }
        s
    }
}

/// Sufficiency of the rational matrix. Without quantizer collisions the two
/// sides must agree; with collisions only `lhs <= rhs` is claimed.
pub fn verify_lemma1(ensemble: &DiscreteEnsemble) -> Lemma1Report {
    let q = ensemble.quantizer;
    let lhs = mutual_information(ensemble, |f, h| q.key(&rational_values(f, h)));
    let rhs = mutual_information(ensemble, |f, _| exact_key(f));

    let mut seen: BTreeMap<Vec<i64>, Vec<i64>> = BTreeMap::new();
    let mut collision = false;
    for p in &ensemble.support {
        let rkey = q.key(&rational_values(&p.f, &ensemble.h));
        let fkey = exact_key(&p.f);
        match seen.get(&rkey) {
            Some(other) if *other != fkey => collision = true,
            Some(_) => {}
            None => {
                seen.insert(rkey, fkey);
            }
        }
    }
    let verdict = if collision {
        match ge_verdict(rhs, lhs) {
            Verdict::Violated => Verdict::Violated,
            v => v,
        }
    } else if (lhs - rhs).abs() <= MI_TOL {
        Verdict::Equal
    } else {
        Verdict::Violated
    };
    Lemma1Report {
        lhs,
        rhs,
        collision,
        verdict,
    }
}

/// What the downstream consumer sees of an adapted statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Readout {
    /// The masked quantities themselves, quantized by the ensemble quantizer.
    Features,
    /// Class logits `Σ_j` of the masked rational matrix, quantized.
    Logits(Quantizer),
    /// Predicted class (argmax of the logits, lowest index on ties).
    Decision,
}

/// One adaptation of the inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskScheme {
    /// K×D mask on R.
    Full(Vec<f64>),
    /// D mask on f, the same for every class.
    Image(Vec<f64>),
    /// K×D mask on h.
    Text(Vec<f64>),
    /// Image-side and text-side masks together.
    Joint(Vec<f64>, Vec<f64>),
}

fn logits_from(values: &[f64], k: usize) -> Vec<f64> {
    let d = values.len() / k;
    values.chunks(d).map(|row| row.iter().sum()).collect()
}

fn decision(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

fn scheme_key(ensemble: &DiscreteEnsemble, readout: Readout, scheme: &MaskScheme, f: &[f64]) -> Vec<i64> {
    let h = &ensemble.h;
    let (k, d) = (ensemble.classes(), ensemble.dim());
    let q = ensemble.quantizer;
    // Entries of the classifier input each scheme feeds forward.
    let effective: Vec<f64> = match scheme {
        MaskScheme::Full(m) => rational_values(f, h).iter().zip(m).map(|(r, m)| r * m).collect(),
        MaskScheme::Image(mf) => {
            let fm: Vec<f64> = f.iter().zip(mf).map(|(x, m)| x * m).collect();
            rational_values(&fm, h)
        }
        MaskScheme::Text(mh) => (0..k * d).map(|n| f[n % d] * (h.data()[n] * mh[n])).collect(),
        MaskScheme::Joint(mf, mh) => (0..k * d)
            .map(|n| (f[n % d] * mf[n % d]) * (h.data()[n] * mh[n]))
            .collect(),
    };
    match readout {
        Readout::Features => match scheme {
            MaskScheme::Full(_) => q.key(&effective),
            MaskScheme::Image(mf) => {
                let mut key = q.key(&f.iter().zip(mf).map(|(x, m)| x * m).collect::<Vec<_>>());
                key.extend(q.key(h.data()));
                key
            }
            MaskScheme::Text(mh) => {
                let mut key = q.key(f);
                key.extend(q.key(&h.data().iter().zip(mh).map(|(x, m)| x * m).collect::<Vec<_>>()));
                key
            }
            MaskScheme::Joint(mf, mh) => {
                let mut key = q.key(&f.iter().zip(mf).map(|(x, m)| x * m).collect::<Vec<_>>());
                key.extend(q.key(&h.data().iter().zip(mh).map(|(x, m)| x * m).collect::<Vec<_>>()));
                key
            }
        },
        Readout::Logits(lq) => lq.key(&logits_from(&effective, k)),
        Readout::Decision => vec![decision(&logits_from(&effective, k)) as i64],
    }
}

/// `I(Y; readout(scheme))`.
pub fn scheme_mi(ensemble: &DiscreteEnsemble, readout: Readout, scheme: &MaskScheme) -> Result<f64> {
    let (k, d) = (ensemble.classes(), ensemble.dim());
    let ok = match scheme {
        MaskScheme::Full(m) | MaskScheme::Text(m) => m.len() == k * d,
        MaskScheme::Image(m) => m.len() == d,
        MaskScheme::Joint(mf, mh) => mf.len() == d && mh.len() == k * d,
    };
    if !ok {
        return Err(RadaError::Contract(format!("mask scheme shape does not match K={k}, D={d}")));
    }
    Ok(mutual_information(ensemble, |f, _| scheme_key(ensemble, readout, scheme, f)))
}

/// Every assignment of `grid` values to `n` entries, in odometer order.
fn grid_points(grid: &[f64], n: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    let total = grid.len().pow(n as u32);
    (0..total).map(move |mut idx| {
        (0..n)
            .map(|_| {
                let v = grid[idx % grid.len()];
                idx /= grid.len();
                v
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma23Report {
    pub readout: Readout,
    /// Max over full masks on [`BASE_GRID`].
    pub full_max: Option<f64>,
    /// Max over full masks on [`PRODUCT_GRID`].
    pub full_product_max: Option<f64>,
    pub image_max: Option<f64>,
    pub text_max: Option<f64>,
    pub joint_max: Option<f64>,
    /// Max |I(full at M_f ⊗ 1) − I(image at M_f)| over image-side masks.
    /// Exact for logit and decision readouts; for feature readouts it relies
    /// on the quantizer being injective over the masked values (range ±4).
    pub constrained_dev: Option<f64>,
    /// Max |I(joint at (M_f, M_h)) − I(image at M_f)| over the joint grid;
    /// only meaningful for [`Readout::Features`], where h carries no label
    /// information and every grid M_h is invertible.
    pub invertible_dev: Option<f64>,
    pub evaluations: usize,
    pub partial: bool,
}

impl Lemma23Report {
    /// Full masks dominate image-side masks.
    pub fn lemma2(&self) -> (f64, f64, Verdict) {
        match (self.full_max, self.image_max) {
            (Some(full), Some(img)) => (full, img, ge_verdict(full, img)),
            _ => (f64::NAN, f64::NAN, Verdict::Partial),
        }
    }

    /// Full masks dominate text-side masks.
    pub fn lemma2_text(&self) -> (f64, f64, Verdict) {
        match (self.full_max, self.text_max) {
            (Some(full), Some(txt)) => (full, txt, ge_verdict(full, txt)),
            _ => (f64::NAN, f64::NAN, Verdict::Partial),
        }
    }

    /// Full masks dominate joint adaptation of both modalities.
    pub fn lemma3(&self) -> (f64, f64, Verdict) {
        match (self.full_product_max, self.joint_max) {
            (Some(full), Some(joint)) => (full, joint, ge_verdict(full, joint)),
            _ => (f64::NAN, f64::NAN, Verdict::Partial),
        }
    }

    /// The constrained full mask reproduces the image-side scheme exactly.
    pub fn constrained_verdict(&self) -> Verdict {
        match self.constrained_dev {
            Some(dev) if dev <= MI_TOL => Verdict::Equal,
            Some(_) => Verdict::Violated,
            None => Verdict::Partial,
        }
    }

    pub fn holds(&self) -> bool {
        let ok = |v: Verdict| matches!(v, Verdict::Holds | Verdict::Equal);
        !self.partial
            && ok(self.lemma2().2)
            && ok(self.lemma2_text().2)
            && ok(self.lemma3().2)
            && self.constrained_verdict() == Verdict::Equal
    }

    pub fn lines(&self) -> String {
        let mut s = String::new();
        let (l, r, v) = self.lemma2();
        let _ = writeln!(s, "{}", line("2", l, r, v));
        let (l, r, v) = self.lemma2_text();
        let _ = writeln!(s, "{}", line("2-text", l, r, v));
        let (l, r, v) = self.lemma3();
        let _ = writeln!(s, "{}", line("3", l, r, v));
        let dev = self.constrained_dev.unwrap_or(f64::NAN);
        let _ = write!(s, "{}", line("2-constrained", dev, 0.0, self.constrained_verdict()));
        if self.partial {
            let _ = write!(s, " partial=true evaluations={}", self.evaluations);
        }
        s
    }
}

/// Exhaustive search over mask grids. `budget` caps the number of
/// mutual-information evaluations; schemes that would exceed it are skipped
/// and the report is marked partial.
pub fn verify_lemma23(ensemble: &DiscreteEnsemble, readout: Readout, budget: usize) -> Result<Lemma23Report> {
    let (k, d) = (ensemble.classes(), ensemble.dim());
    let kd = k * d;
    let count = |g: usize, n: usize| g.checked_pow(n as u32).unwrap_or(usize::MAX);
    let n_full = count(BASE_GRID.len(), kd);
    let n_product = count(PRODUCT_GRID.len(), kd);
    let n_image = count(BASE_GRID.len(), d);
    let n_joint = n_image.saturating_mul(n_full);

    let mut used = 0usize;
    let mut partial = false;
    let mut take = |n: usize| -> bool {
        if used.saturating_add(n) <= budget {
            used += n;
            true
        } else {
            partial = true;
            false
        }
    };
    let max_over = |iter: &mut dyn Iterator<Item = MaskScheme>| -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for s in iter {
            best = best.max(scheme_mi(ensemble, readout, &s)?);
        }
        Ok(best)
    };

    let image_mis: Option<Vec<(Vec<f64>, f64)>> = if take(2 * n_image) {
        let mut out = Vec::with_capacity(n_image);
        for mf in grid_points(&BASE_GRID, d) {
            let mi = scheme_mi(ensemble, readout, &MaskScheme::Image(mf.clone()))?;
            out.push((mf, mi));
        }
        Some(out)
    } else {
        None
    };
    let image_max = image_mis.as_ref().map(|v| v.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max));
    let constrained_dev = match &image_mis {
        Some(v) => {
            let mut dev: f64 = 0.0;
            for (mf, mi) in v {
                let full = scheme_mi(ensemble, readout, &MaskScheme::Full(mf.repeat(k)))?;
                dev = dev.max((full - mi).abs());
            }
            Some(dev)
        }
        None => None,
    };
    let full_max = if take(n_full) {
        Some(max_over(&mut grid_points(&BASE_GRID, kd).map(MaskScheme::Full))?)
    } else {
        None
    };
    let text_max = if take(n_full) {
        Some(max_over(&mut grid_points(&BASE_GRID, kd).map(MaskScheme::Text))?)
    } else {
        None
    };
    let full_product_max = if take(n_product) {
        Some(max_over(&mut grid_points(&PRODUCT_GRID, kd).map(MaskScheme::Full))?)
    } else {
        None
    };
    let (joint_max, invertible_dev) = match (&image_mis, take(n_joint)) {
        (Some(img), true) => {
            let mut best = f64::NEG_INFINITY;
            let mut dev: f64 = 0.0;
            for (mf, img_mi) in img {
                for mh in grid_points(&BASE_GRID, kd) {
                    let mi = scheme_mi(ensemble, readout, &MaskScheme::Joint(mf.clone(), mh))?;
                    best = best.max(mi);
                    dev = dev.max((mi - img_mi).abs());
                }
            }
            (Some(best), (readout == Readout::Features).then_some(dev))
        }
        _ => (None, None),
    };
    Ok(Lemma23Report {
        readout,
        full_max,
        full_product_max,
        image_max,
        text_max,
        joint_max,
        constrained_dev,
        invertible_dev,
        evaluations: used,
        partial,
    })
}

/// Default evaluation budget: enough for every ensemble with K·D <= 6.
pub const DEFAULT_BUDGET: usize = 200_000;

#[cfg(test)]
mod tests {
    use super::*;

    fn fine() -> Quantizer {
        Quantizer::new(1 << 20, -1.0, 1.0).unwrap()
    }

    fn point(f: &[f64], label: usize, prob: f64) -> SupportPoint {
        SupportPoint {
            f: f.to_vec(),
            label,
            prob,
        }
    }

    #[test]
    fn quantizer_edges() {
        let q = Quantizer::new(4, -1.0, 1.0).unwrap();
        assert_eq!(q.key(&[-1.0, -0.5, 0.0, 0.49, 1.0, 7.0, -7.0]), vec![0, 1, 2, 2, 3, 3, 0]);
        assert_eq!(q.bucket(-0.0), q.bucket(0.0));
        assert!(Quantizer::new(0, 0.0, 1.0).is_err());
        assert!(Quantizer::new(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn independence_gives_zero() {
        let pairs = vec![(0.25, 0, 0), (0.25, 0, 1), (0.25, 1, 0), (0.25, 1, 1)];
        assert!(mutual_information_joint(&pairs).abs() < 1e-12);
    }

    #[test]
    fn perfect_binary_channel_gives_ln2() {
        let pairs = vec![(0.5, 0, 7), (0.5, 1, 9)];
        assert!((mutual_information_joint(&pairs) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn three_point_fixture() {
        // p(y=0,a)=1/2, p(y=1,a)=1/4, p(y=1,b)=1/4 with p(a)=3/4, p(y)=1/2.
        let expected = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
        assert!((expected - 0.215_761_554_338_835_65).abs() < 1e-15);
        let pairs = vec![(0.5, 0, 'a'), (0.25, 1, 'a'), (0.25, 1, 'b')];
        assert!((mutual_information_joint(&pairs) - expected).abs() < 1e-15);
        let swapped: Vec<_> = pairs.iter().map(|&(p, a, b)| (p, b, a)).collect();
        assert!((mutual_information_joint(&swapped) - expected).abs() < 1e-15);
    }

    #[test]
    fn ensemble_invariants() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(DiscreteEnsemble::new(vec![], h.clone(), fine()).is_err());
        assert!(DiscreteEnsemble::new(vec![point(&[1.0, 0.0], 0, 0.5)], h.clone(), fine()).is_err());
        assert!(DiscreteEnsemble::new(vec![point(&[1.0, 0.0], 2, 1.0)], h.clone(), fine()).is_err());
        let big = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            DiscreteEnsemble::new(vec![point(&[0.0; 5], 0, 1.0)], big, fine()),
            Err(RadaError::Size(_))
        ));
    }

    #[test]
    fn single_point_support_is_zero_both_sides() {
        let h = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
        let e = DiscreteEnsemble::new(vec![point(&[1.0, 0.0], 1, 1.0)], h, fine()).unwrap();
        let r = verify_lemma1(&e);
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        assert_eq!(r.verdict, Verdict::Equal);
    }

    #[test]
    fn engineered_collision_is_flagged() {
        // The zero middle column of h hides f's middle coordinate from R.
        let h = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let e = DiscreteEnsemble::new(
            vec![point(&[0.6, 0.8, 0.0], 0, 0.5), point(&[0.6, -0.8, 0.0], 1, 0.5)],
            h,
            fine(),
        )
        .unwrap();
        let r = verify_lemma1(&e);
        assert!(r.collision);
        assert_eq!(r.lhs, 0.0);
        assert!((r.rhs - 2f64.ln()).abs() < 1e-15);
        assert_eq!(r.verdict, Verdict::Holds);
        assert!(r.line().ends_with("verdict=holds collision=true"));
    }

    #[test]
    fn row_varying_mask_beats_column_masks() {
        let h = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
        let support = vec![
            point(&[1.0, 0.0], 0, 0.25),
            point(&[0.0, 1.0], 0, 0.25),
            point(&[-1.0, 0.0], 1, 0.25),
            point(&[0.0, -1.0], 1, 0.25),
        ];
        let e = DiscreteEnsemble::new(support, h, fine()).unwrap();
        let r = verify_lemma23(&e, Readout::Decision, DEFAULT_BUDGET).unwrap();
        assert!(r.image_max.unwrap().abs() < 1e-15);
        assert!((r.full_max.unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(r.lemma2().2, Verdict::Holds);
        assert_eq!(r.constrained_verdict(), Verdict::Equal);
        assert!(r.holds());
    }

    #[test]
    fn identity_masks_agree_with_rational() {
        let e = DiscreteEnsemble::random(3, 2, 3, 8, fine()).unwrap();
        for readout in [Readout::Decision, Readout::Logits(Quantizer::new(16, -3.0, 3.0).unwrap())] {
            let base = mutual_information(&e, |f, h| {
                let r = rational_values(f, h);
                match readout {
                    Readout::Logits(q) => q.key(&logits_from(&r, 2)),
                    _ => vec![decision(&logits_from(&r, 2)) as i64],
                }
            });
            for s in [
                MaskScheme::Full(vec![1.0; 6]),
                MaskScheme::Image(vec![1.0; 3]),
                MaskScheme::Text(vec![1.0; 6]),
                MaskScheme::Joint(vec![1.0; 3], vec![1.0; 6]),
            ] {
                assert_eq!(scheme_mi(&e, readout, &s).unwrap(), base);
            }
        }
    }

    #[test]
    fn invertible_text_mask_adds_nothing_to_features() {
        let e = DiscreteEnsemble::random(5, 2, 2, 6, fine()).unwrap();
        let r = verify_lemma23(&e, Readout::Features, DEFAULT_BUDGET).unwrap();
        assert!(r.invertible_dev.unwrap() <= MI_TOL);
        assert!(r.holds());
    }

    #[test]
    fn budget_exhaustion_is_partial() {
        let e = DiscreteEnsemble::random(1, 3, 4, 4, fine()).unwrap();
        let r = verify_lemma23(&e, Readout::Decision, 1000).unwrap();
        assert!(r.partial);
        assert_eq!(r.lemma2().2, Verdict::Partial);
        assert!(!r.holds());
        assert!(r.lines().contains("partial=true"));
    }

    #[test]
    fn scheme_shape_checked() {
        let e = DiscreteEnsemble::random(1, 2, 2, 4, fine()).unwrap();
        assert!(scheme_mi(&e, Readout::Decision, &MaskScheme::Image(vec![1.0; 3])).is_err());
    }
}
