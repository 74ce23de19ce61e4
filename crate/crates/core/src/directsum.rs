//! Finite direct sums `(SL∞_0 ⊕ ... ⊕ SL∞_M)_r` and the maps relating them to one
//! `SL∞` space.
//!
//! Block `n` lives on the gap `G_n = [1 - 2^-n, 1 - 2^-n-1)`, the dyadic interval of level
//! `n + 1` and position `2^{n+1} - 1`. The affine map of `[0, 1)` onto `G_n` sends `J` of
//! level `ℓ` and position `p` to level `n + 1 + ℓ` and position `(2^{n+1} - 2) 2^ℓ + p`.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dyadic::{DyadicInterval, MAX_LEVEL};
use crate::haar::{sl_inf_norm, HaarVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DirectSumError {
    #[error("target depth {got} is below the required {needed}")]
    DepthTooSmall { needed: u32, got: u32 },
    #[error("block {block} has depth {got}, expected {block}")]
    BlockDepth { block: usize, got: u32 },
    #[error("exponent r = {0} must be at least 1")]
    BadExponent(f64),
    #[error("truncation {0} is too deep to embed")]
    TooDeep(u32),
}

/// `r ∈ [1, ∞]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinite,
}

impl Exponent {
    pub fn finite(r: f64) -> Result<Self, DirectSumError> {
        if r >= 1.0 && r.is_finite() {
            Ok(Exponent::Finite(r))
        } else if r == f64::INFINITY {
            Ok(Exponent::Infinite)
        } else {
            Err(DirectSumError::BadExponent(r))
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(r) => write!(f, "{r}"),
            Exponent::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Exponent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "inf" {
            return Ok(Exponent::Infinite);
        }
        let r: f64 = s.parse().map_err(|_| format!("bad exponent `{s}`"))?;
        Exponent::finite(r).map_err(|e| e.to_string())
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Exponent::Finite(r) => s.serialize_f64(*r),
            Exponent::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(r) => Exponent::finite(r).map_err(serde::de::Error::custom),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `(f_0, ..., f_M)` with `f_n ∈ SL∞_n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectSumVector {
    #[serde(rename = "M")]
    truncation: u32,
    r: Exponent,
    blocks: Vec<HaarVector>,
}

#[derive(Deserialize)]
struct DirectSumRepr {
    #[serde(rename = "M")]
    truncation: u32,
    r: Exponent,
    blocks: Vec<HaarVector>,
}

impl<'de> Deserialize<'de> for DirectSumVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = DirectSumRepr::deserialize(d)?;
        if r.blocks.len() != r.truncation as usize + 1 {
            return Err(serde::de::Error::custom(format!(
                "M = {} needs {} blocks, got {}",
                r.truncation,
                r.truncation + 1,
                r.blocks.len()
            )));
        }
        DirectSumVector::new(r.r, r.blocks).map_err(serde::de::Error::custom)
    }
}

impl DirectSumVector {
    /// Block `n` must have depth `n`; `M` is the number of blocks minus one.
    pub fn new(r: Exponent, blocks: Vec<HaarVector>) -> Result<Self, DirectSumError> {
        if blocks.is_empty() {
            return Err(DirectSumError::BlockDepth { block: 0, got: 0 });
        }
        for (n, b) in blocks.iter().enumerate() {
            if b.depth() as usize != n {
                return Err(DirectSumError::BlockDepth { block: n, got: b.depth() });
            }
        }
        Ok(DirectSumVector { truncation: blocks.len() as u32 - 1, r, blocks })
    }

    pub fn zeros(truncation: u32, r: Exponent) -> Self {
        DirectSumVector {
            truncation,
            r,
            blocks: (0..=truncation).map(HaarVector::zeros).collect(),
        }
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn exponent(&self) -> Exponent {
        self.r
    }

    pub fn blocks(&self) -> &[HaarVector] {
        &self.blocks
    }

    pub fn block(&self, n: usize) -> &HaarVector {
        &self.blocks[n]
    }

    pub fn with_exponent(&self, r: Exponent) -> Self {
        DirectSumVector { r, ..self.clone() }
    }

    pub fn block_norms(&self) -> Vec<f64> {
        self.blocks.par_iter().map(sl_inf_norm).collect()
    }

    /// Norm with the vector's own exponent.
    pub fn norm(&self) -> f64 {
        dsum_norm(self, self.r)
    }
}

/// `(Σ ‖f_n‖^r)^{1/r}`, or `max ‖f_n‖` for `r = ∞`.
pub fn dsum_norm(x: &DirectSumVector, r: Exponent) -> f64 {
    let norms = x.block_norms();
    match r {
        Exponent::Infinite => norms.into_iter().fold(0.0, f64::max),
        Exponent::Finite(p) => {
            // Scale by the largest block so that large p does not overflow.
            let top = norms.iter().copied().fold(0.0, f64::max);
            if top == 0.0 {
                return 0.0;
            }
            top * norms.iter().map(|v| (v / top).powf(p)).sum::<f64>().powf(1.0 / p)
        }
    }
}

/// The gap `G_n`.
pub fn gap(n: u32) -> DyadicInterval {
    DyadicInterval::new(n + 1, (1u64 << (n + 1)) - 1).expect("gap level is in range")
}

/// Image of `J` under the affine map of `[0, 1)` onto `G_n`.
pub fn gap_image(n: u32, j: &DyadicInterval) -> DyadicInterval {
    let l = j.level();
    let offset = ((1u64 << (n + 1)) - 2) << l;
    DyadicInterval::new(n + 1 + l, offset + j.position()).expect("image level is in range")
}

/// Target depth of [`embed_e`] for truncation `M`.
pub fn embedding_depth(truncation: u32) -> u32 {
    2 * truncation + 1
}

/// Places block `n` on the gap `G_n`, in `SL∞_{2M+1}`.
pub fn embed_e(x: &DirectSumVector) -> Result<HaarVector, DirectSumError> {
    embed_e_into(x, embedding_depth(x.truncation))
}

/// [`embed_e`] into a given depth, which must be at least `2M + 1`.
pub fn embed_e_into(x: &DirectSumVector, depth: u32) -> Result<HaarVector, DirectSumError> {
    let needed = embedding_depth(x.truncation);
    if depth < needed {
        return Err(DirectSumError::DepthTooSmall { needed, got: depth });
    }
    if depth > MAX_LEVEL.min(24) {
        return Err(DirectSumError::TooDeep(x.truncation));
    }
    let mut out = HaarVector::zeros(depth);
    for (n, block) in x.blocks.iter().enumerate() {
        for j in DyadicInterval::all_upto(n as u32) {
            let c = block.get(&j);
            if c != 0.0 {
                out.set(&gap_image(n as u32, &j), c);
            }
        }
    }
    Ok(out)
}

/// Whether `I` lies in the range of [`embed_e`] at truncation `M`: inside some `G_n` with
/// `n ≤ M`, at most `n` levels below it.
pub fn in_embedding_range(i: &DyadicInterval, truncation: u32) -> bool {
    (0..=truncation.min(i.level().saturating_sub(1))).any(|n| {
        let g = gap(n);
        i.level() <= 2 * n + 1 && g.contains(i)
    })
}

/// Haar multiplier keeping the coefficients in the range of [`embed_e`] at truncation `M`.
pub fn project_p(f: &HaarVector, truncation: u32) -> HaarVector {
    let mut out = f.clone();
    for (idx, c) in out.coeffs_mut().iter_mut().enumerate() {
        if !in_embedding_range(&DyadicInterval::from_index(idx), truncation) {
            *c = 0.0;
        }
    }
    out
}

/// Block `n` is the truncation of `f` to `D^n`; the truncation is `f`'s depth.
pub fn embed_g(f: &HaarVector, r: Exponent) -> DirectSumVector {
    let m = f.depth();
    DirectSumVector { truncation: m, r, blocks: (0..=m).map(|n| f.truncated(n)).collect() }
}

/// The last block: the finite stand-in for a norm-one functional with `L(1, 1, ...) = 1`.
pub fn retract_q(x: &DirectSumVector) -> HaarVector {
    x.blocks.last().expect("at least one block").clone()
}

/// Random blocks with coefficients uniform in `[-1, 1]`, each zeroed with probability 1/4.
pub fn random_direct_sum(truncation: u32, r: Exponent, rng: &mut impl Rng) -> DirectSumVector {
    let blocks = (0..=truncation)
        .map(|n| {
            let mut b = HaarVector::zeros(n);
            if rng.random::<f64>() >= 0.25 {
                for c in b.coeffs_mut() {
                    *c = rng.random_range(-1.0..=1.0);
                }
            }
            b
        })
        .collect();
    DirectSumVector { truncation, r, blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_block_lands_on_first_gap() {
        let x = DirectSumVector::new(Exponent::Infinite, vec![HaarVector::basis(DyadicInterval::unit(), 0)])
            .unwrap();
        let e = embed_e(&x).unwrap();
        assert_eq!(e.depth(), 1);
        assert_eq!(e.coeffs(), &[0.0, 1.0, 0.0]);
        assert_eq!(sl_inf_norm(&e), 1.0);
    }

    #[test]
    fn gaps_tile_towards_one() {
        assert_eq!(gap(0), DyadicInterval::new(1, 1).unwrap());
        assert_eq!(gap(1), DyadicInterval::new(2, 3).unwrap());
        assert_eq!(gap(2), DyadicInterval::new(3, 7).unwrap());
        let j = DyadicInterval::new(1, 2).unwrap();
        assert_eq!(gap_image(1, &j), DyadicInterval::new(3, 6).unwrap());
    }

    #[test]
    fn max_rule_on_disjoint_blocks() {
        let blocks = (0..3u32)
            .map(|n| HaarVector::basis(DyadicInterval::unit(), n).scaled(f64::from(n + 1)))
            .collect();
        let x = DirectSumVector::new(Exponent::Infinite, blocks).unwrap();
        assert_eq!(sl_inf_norm(&embed_e(&x).unwrap()), 3.0);
        assert_eq!(x.norm(), 3.0);
    }

    #[test]
    fn p_fixes_range_and_drops_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_direct_sum(3, Exponent::Infinite, &mut rng);
        let e = embed_e(&x).unwrap();
        assert_eq!(project_p(&e, 3), e);
        let root = HaarVector::basis(DyadicInterval::unit(), 7);
        assert!(project_p(&root, 3).is_zero());
    }

    #[test]
    fn g_and_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = HaarVector::zeros(5);
        for c in f.coeffs_mut() {
            *c = rng.random_range(-1.0..=1.0);
        }
        let g = embed_g(&f, Exponent::Infinite);
        assert_eq!(retract_q(&g), f);
        assert_eq!(dsum_norm(&g, Exponent::Infinite), sl_inf_norm(&f));
    }

    #[test]
    fn exponent_json() {
        let x = DirectSumVector::zeros(1, Exponent::Infinite);
        let s = serde_json::to_string(&x).unwrap();
        assert!(s.contains("\"r\":\"inf\""));
        let back: DirectSumVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, x);
        let y: DirectSumVector = serde_json::from_str(&s.replace("\"inf\"", "2.5")).unwrap();
        assert_eq!(y.exponent(), Exponent::Finite(2.5));
    }
}
