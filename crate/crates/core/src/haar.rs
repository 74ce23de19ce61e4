//! Haar coefficient vectors and the SL-infinity / H1 norms.
//!
//! `h_I` is L-infinity normalized: `+1` on the left half of `I`, `-1` on the
//! right half. A vector `f = Σ a_I h_I` over `D^N` is stored by `order(I) - 1`.
//! The square function of `f` is constant on every interval of `D_N`; its value
//! there is `Σ_{I ⊇ K} a_I^2`.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::dyadic::{pow2_neg, tree_size, DyadicInterval};
use crate::exact::SquareSum;

/// Arithmetic backend for square functions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arith {
    /// Exact dyadic sums of squares, square root taken in floating point at the end.
    Exact,
    #[default]
    Float,
}

impl Arith {
    /// Reads `HAARFACTOR_ARITH` (`exact` or `float`); unset means float.
    pub fn from_env() -> Result<Arith, String> {
        match std::env::var("HAARFACTOR_ARITH") {
            Err(_) => Ok(Arith::Float),
            Ok(v) => v.parse(),
        }
    }
}

impl std::str::FromStr for Arith {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(Arith::Exact),
            "float" | "" => Ok(Arith::Float),
            other => Err(format!("unknown arithmetic backend `{other}` (expected exact or float)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HaarVector {
    depth: u32,
    coeffs: Vec<f64>,
}

#[derive(Deserialize)]
struct HaarVectorRepr {
    depth: u32,
    coeffs: Vec<f64>,
}

impl<'de> Deserialize<'de> for HaarVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = HaarVectorRepr::deserialize(d)?;
        if r.depth > 24 {
            return Err(serde::de::Error::custom("depth above 24"));
        }
        HaarVector::from_coeffs(r.depth, r.coeffs).map_err(serde::de::Error::custom)
    }
}

impl HaarVector {
    pub fn zeros(depth: u32) -> Self {
        HaarVector { depth, coeffs: vec![0.0; tree_size(depth)] }
    }

    pub fn from_coeffs(depth: u32, coeffs: Vec<f64>) -> Result<Self, String> {
        if coeffs.len() != tree_size(depth) {
            return Err(format!(
                "depth {depth} needs {} coefficients, got {}",
                tree_size(depth),
                coeffs.len()
            ));
        }
        Ok(HaarVector { depth, coeffs })
    }

    /// `h_I` inside `D^depth`.
    pub fn basis(interval: DyadicInterval, depth: u32) -> Self {
        assert!(interval.level() <= depth, "interval {interval} below depth {depth}");
        let mut v = Self::zeros(depth);
        v.coeffs[interval.index()] = 1.0;
        v
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn get(&self, interval: &DyadicInterval) -> f64 {
        self.coeffs.get(interval.index()).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, interval: &DyadicInterval, value: f64) {
        self.coeffs[interval.index()] = value;
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Same function viewed in a deeper (or equal) space.
    pub fn padded(&self, depth: u32) -> Self {
        assert!(depth >= self.depth);
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(tree_size(depth), 0.0);
        HaarVector { depth, coeffs }
    }

    /// Drops coefficients below `depth`.
    pub fn truncated(&self, depth: u32) -> Self {
        let d = depth.min(self.depth);
        HaarVector { depth: d, coeffs: self.coeffs[..tree_size(d)].to_vec() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        HaarVector { depth: self.depth, coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn add_scaled(&mut self, s: f64, other: &HaarVector) {
        assert_eq!(self.depth, other.depth);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &HaarVector) -> HaarVector {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// Square function values on `D_N`, left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareProfile {
    pub depth: u32,
    pub values: Vec<f64>,
}

/// Exact square function values on `D_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSquareProfile {
    pub depth: u32,
    pub values: Vec<SquareSum>,
}

/// Root-to-leaf prefix accumulation over the tree: `prefix[I] = prefix[parent] + a_I^2`.
fn prefix_accumulate<T: Clone>(
    depth: u32,
    zero: T,
    term: impl Fn(usize) -> T,
    add: impl Fn(&T, &T) -> T,
) -> Vec<T> {
    let n = tree_size(depth);
    let mut acc: Vec<T> = Vec::with_capacity(n);
    acc.push(add(&zero, &term(0)));
    for idx in 1..n {
        // parent of order o is o / 2, i.e. index (idx + 1) / 2 - 1
        let parent = (idx + 1) / 2 - 1;
        let v = add(&acc[parent], &term(idx));
        acc.push(v);
    }
    let first_leaf = tree_size(depth) - (1usize << depth);
    acc.split_off(first_leaf)
}

pub fn square_profile(f: &HaarVector) -> SquareProfile {
    let c = &f.coeffs;
    SquareProfile {
        depth: f.depth,
        values: prefix_accumulate(f.depth, 0.0, |i| c[i] * c[i], |a, b| a + b),
    }
}

pub fn square_profile_exact(f: &HaarVector) -> ExactSquareProfile {
    let c = &f.coeffs;
    ExactSquareProfile {
        depth: f.depth,
        values: prefix_accumulate(f.depth, SquareSum::zero(), |i| SquareSum::square(c[i]), |a, b| {
            a.add(b)
        }),
    }
}

pub fn sl_inf_norm(f: &HaarVector) -> f64 {
    square_profile(f).values.iter().fold(0.0f64, |m, &s| m.max(s)).sqrt()
}

pub fn h1_norm(g: &HaarVector) -> f64 {
    let w = pow2_neg(g.depth);
    square_profile(g).values.iter().map(|s| w * s.sqrt()).sum()
}

pub fn sl_inf_norm_with(f: &HaarVector, arith: Arith) -> f64 {
    match arith {
        Arith::Float => sl_inf_norm(f),
        Arith::Exact => square_profile_exact(f)
            .values
            .into_iter()
            .max()
            .map(|s| s.sqrt_f64())
            .unwrap_or(0.0),
    }
}

pub fn h1_norm_with(g: &HaarVector, arith: Arith) -> f64 {
    match arith {
        Arith::Float => h1_norm(g),
        Arith::Exact => {
            let w = pow2_neg(g.depth);
            square_profile_exact(g).values.iter().map(|s| w * s.sqrt_f64()).sum()
        }
    }
}

/// `⟨f, g⟩ = Σ a_I b_I |I|`; vectors of different depth are zero-padded.
pub fn pairing(f: &HaarVector, g: &HaarVector) -> f64 {
    f.coeffs
        .iter()
        .zip(&g.coeffs)
        .enumerate()
        .map(|(i, (a, b))| a * b * DyadicInterval::from_index(i).measure())
        .sum()
}

/// Coefficients uniform in `[-1, 1]`, each kept with probability `density`.
pub fn random_vector<R: Rng + ?Sized>(depth: u32, density: f64, rng: &mut R) -> HaarVector {
    let coeffs = (0..tree_size(depth))
        .map(|_| if rng.random::<f64>() < density { rng.random_range(-1.0..=1.0) } else { 0.0 })
        .collect();
    HaarVector { depth, coeffs }
}

/// `r_n = Σ_{I ∈ D_n} h_I` inside `D^depth`.
pub fn rademacher(level: u32, depth: u32) -> HaarVector {
    assert!(level <= depth);
    let mut v = HaarVector::zeros(depth);
    for i in DyadicInterval::at_level(level) {
        v.set(&i, 1.0);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(n: u32, k: u64) -> DyadicInterval {
        DyadicInterval::new(n, k).unwrap()
    }

    #[test]
    fn profile_examples() {
        let f = HaarVector::basis(iv(0, 1), 3);
        assert!(square_profile(&f).values.iter().all(|&s| s == 1.0));
        let mut g = HaarVector::basis(iv(0, 1), 1);
        g.set(&iv(1, 1), 1.0);
        assert_eq!(square_profile(&g).values, vec![2.0, 1.0]);
        assert_eq!(sl_inf_norm(&g), 2f64.sqrt());
        assert_eq!(h1_norm(&g), (2f64.sqrt() + 1.0) / 2.0);
        let z = HaarVector::zeros(4);
        assert_eq!((sl_inf_norm(&z), h1_norm(&z)), (0.0, 0.0));
    }

    #[test]
    fn single_haar_norms() {
        for i in DyadicInterval::all_upto(4) {
            let h = HaarVector::basis(i, 4);
            assert_eq!(sl_inf_norm(&h), 1.0);
            assert_eq!(h1_norm(&h), i.measure());
            assert_eq!(pairing(&h, &h), i.measure());
            assert_eq!(sl_inf_norm_with(&h, Arith::Exact), 1.0);
        }
        assert_eq!(pairing(&HaarVector::basis(iv(1, 1), 2), &HaarVector::basis(iv(1, 2), 2)), 0.0);
    }

    #[test]
    fn rademacher_sums() {
        assert_eq!(rademacher(0, 0), HaarVector::basis(iv(0, 1), 0));
        let r = rademacher(2, 2);
        assert_eq!(r.coeffs().iter().filter(|&&c| c == 1.0).count(), 4);
        assert_eq!(sl_inf_norm(&r), 1.0);
        for depth in 0..6 {
            let mut s = HaarVector::zeros(depth);
            for n in 0..=depth {
                s.add_scaled(1.0, &rademacher(n, depth));
            }
            assert!((sl_inf_norm(&s) - ((depth + 1) as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn padding_keeps_norms() {
        let mut f = HaarVector::zeros(2);
        f.coeffs_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0, 0.25, 1.0, -0.5]);
        let p = f.padded(5);
        assert_eq!(sl_inf_norm(&p), sl_inf_norm(&f));
        assert!((h1_norm(&p) - h1_norm(&f)).abs() < 1e-13);
        assert_eq!(p.truncated(2), f);
    }

    #[test]
    fn arith_parsing() {
        assert_eq!("exact".parse::<Arith>(), Ok(Arith::Exact));
        assert_eq!("FLOAT".parse::<Arith>(), Ok(Arith::Float));
        assert!("fast".parse::<Arith>().is_err());
    }
}
