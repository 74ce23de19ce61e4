//! Linear maps between Haar coefficient spaces, stored as dense row-major matrices.
//!
//! Column `J` of an operator holds the Haar coefficients of `T h_J`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dyadic::{tree_size, DyadicInterval};
use crate::haar::{sl_inf_norm, sl_inf_norm_with, Arith, HaarVector};

#[derive(Debug, thiserror::Error)]
pub enum OperatorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad operator file: {0}")]
    Format(String),
}

/// Linear map `SL∞_{domain} → SL∞_{codomain}` in Haar coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarOperator {
    domain: u32,
    codomain: u32,
    data: Vec<f64>,
}

impl HaarOperator {
    pub fn zeros(domain: u32, codomain: u32) -> Self {
        HaarOperator { domain, codomain, data: vec![0.0; tree_size(domain) * tree_size(codomain)] }
    }

    pub fn zero(depth: u32) -> Self {
        Self::zeros(depth, depth)
    }

    pub fn identity(depth: u32) -> Self {
        let mut t = Self::zero(depth);
        for i in 0..tree_size(depth) {
            t.set(i, i, 1.0);
        }
        t
    }

    /// Haar multiplier with the given diagonal (indexed by order - 1).
    pub fn multiplier(depth: u32, diagonal: &[f64]) -> Self {
        assert_eq!(diagonal.len(), tree_size(depth));
        let mut t = Self::zero(depth);
        for (i, &d) in diagonal.iter().enumerate() {
            t.set(i, i, d);
        }
        t
    }

    pub fn from_rows(domain: u32, codomain: u32, data: Vec<f64>) -> Result<Self, OperatorError> {
        if data.len() != tree_size(domain) * tree_size(codomain) {
            return Err(OperatorError::Shape(format!(
                "expected {}x{} entries, got {}",
                tree_size(codomain),
                tree_size(domain),
                data.len()
            )));
        }
        Ok(HaarOperator { domain, codomain, data })
    }

    pub fn domain_depth(&self) -> u32 {
        self.domain
    }

    pub fn codomain_depth(&self) -> u32 {
        self.codomain
    }

    /// Depth of a square operator.
    pub fn depth(&self) -> u32 {
        assert!(self.is_square(), "operator is not square");
        self.domain
    }

    pub fn is_square(&self) -> bool {
        self.domain == self.codomain
    }

    pub fn rows(&self) -> usize {
        tree_size(self.codomain)
    }

    pub fn cols(&self) -> usize {
        tree_size(self.domain)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let c = self.cols();
        self.data[row * c + col] = v;
    }

    pub fn entry(&self, row: &DyadicInterval, col: &DyadicInterval) -> f64 {
        self.get(row.index(), col.index())
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Coefficients of `T h_J`.
    pub fn column(&self, col: &DyadicInterval) -> HaarVector {
        let j = col.index();
        let v = (0..self.rows()).map(|i| self.get(i, j)).collect();
        HaarVector::from_coeffs(self.codomain, v).expect("row count matches codomain")
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }

    pub fn apply(&self, f: &HaarVector) -> HaarVector {
        assert_eq!(f.depth(), self.domain, "vector depth does not match operator domain");
        let x = f.coeffs();
        let c = self.cols();
        let out: Vec<f64> = self
            .data
            .par_chunks(c)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        HaarVector::from_coeffs(self.codomain, out).expect("row count matches codomain")
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &HaarOperator) -> HaarOperator {
        assert_eq!(other.codomain, self.domain, "composition shape mismatch");
        let (n, m, p) = (self.rows(), self.cols(), other.cols());
        let mut data = vec![0.0; n * p];
        data.par_chunks_mut(p).enumerate().for_each(|(i, out)| {
            for k in 0..m {
                let a = self.data[i * m + k];
                if a != 0.0 {
                    let brow = &other.data[k * p..(k + 1) * p];
                    for (o, b) in out.iter_mut().zip(brow) {
                        *o += a * b;
                    }
                }
            }
        });
        HaarOperator { domain: other.domain, codomain: self.codomain, data }
    }

    /// Coordinate adjoint `A*[J, I] = A[I, J] |I| / |J|`, so that `⟨T* g, f⟩ = ⟨g, T f⟩`.
    pub fn adjoint(&self) -> HaarOperator {
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = HaarOperator::zeros(self.codomain, self.domain);
        // |I|/|J| = 2^(level J - level I): a power of two, so the scaling is exact.
        let lvl = |i: usize| DyadicInterval::from_index(i).level() as i32;
        for i in 0..rows {
            let li = lvl(i);
            for j in 0..cols {
                let a = self.get(i, j);
                if a != 0.0 {
                    out.set(j, i, a * 2f64.powi(lvl(j) - li));
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &HaarOperator) -> HaarOperator {
        assert_eq!((self.domain, self.codomain), (other.domain, other.codomain));
        HaarOperator {
            domain: self.domain,
            codomain: self.codomain,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `Id - T`.
    pub fn complement(&self) -> HaarOperator {
        HaarOperator::identity(self.depth()).sub(self)
    }

    /// `T ∘ D` with `D` the Haar multiplier `diag(signs)`.
    pub fn scale_columns(&self, signs: &[f64]) -> HaarOperator {
        assert_eq!(signs.len(), self.cols());
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols()) {
            for (a, s) in row.iter_mut().zip(signs) {
                *a *= s;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &HaarOperator) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// `α_K = A[K,K]` and `r_K = T h_K - α_K h_K`.
    pub fn decompose(&self, k: &DyadicInterval) -> (f64, HaarVector) {
        let mut r = self.column(k);
        let alpha = r.get(k);
        r.set(k, 0.0);
        (alpha, r)
    }

    /// `|A[K,K]| ≥ δ` for every `K`.
    pub fn has_large_diagonal(&self, delta: f64) -> bool {
        self.diagonal().iter().all(|d| d.abs() >= delta)
    }

    /// Sign multiplier `σ` making the diagonal of `T ∘ diag(σ)` nonnegative, and that operator.
    pub fn normalize_diagonal_signs(&self) -> (HaarOperator, Vec<f64>) {
        let signs: Vec<f64> =
            self.diagonal().iter().map(|&d| if d < 0.0 { -1.0 } else { 1.0 }).collect();
        (self.scale_columns(&signs), signs)
    }

    /// Certified upper bound `max_K sqrt(Σ_{I ⊇ K} (Σ_J |A[I,J]|)^2)`.
    pub fn norm_upper_bound(&self) -> f64 {
        self.norm_upper_bound_with(Arith::Float)
    }

    pub fn norm_upper_bound_with(&self, arith: Arith) -> f64 {
        let sums: Vec<f64> =
            self.data.par_chunks(self.cols()).map(|r| r.iter().map(|a| a.abs()).sum()).collect();
        let v = HaarVector::from_coeffs(self.codomain, sums).expect("row count matches codomain");
        sl_inf_norm_with(&v, arith)
    }

    /// Upper bound plus a witnessed lower bound; `effort` bounds the random restarts.
    pub fn opnorm_bounds(&self, effort: usize, seed: u64) -> NormEstimate {
        let upper = self.norm_upper_bound();
        if effort == 0 {
            return NormEstimate { lower: 0.0, upper, witness: HaarVector::zeros(self.domain) };
        }
        let ratio = |f: &HaarVector| -> f64 {
            let nf = sl_inf_norm(f);
            if nf == 0.0 {
                0.0
            } else {
                sl_inf_norm(&self.apply(f)) / nf
            }
        };
        // Single Haar functions: ‖T h_J‖ / ‖h_J‖ is the SL∞ norm of column J.
        let mut best = HaarVector::zeros(self.domain);
        let mut best_val = 0.0;
        for j in 0..self.cols() {
            let col: Vec<f64> = (0..self.rows()).map(|i| self.get(i, j)).collect();
            let v = sl_inf_norm(&HaarVector::from_coeffs(self.codomain, col).unwrap());
            if v > best_val {
                best_val = v;
                best = HaarVector::basis(DyadicInterval::from_index(j), self.domain);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.cols();
        for _ in 0..effort {
            let mut x = HaarVector::zeros(self.domain);
            for c in x.coeffs_mut() {
                *c = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            let mut val = ratio(&x);
            for _ in 0..8 {
                let idx = rng.random_range(0..n);
                let old = x.coeffs()[idx];
                for cand in [-old, 0.0, 2.0 * old] {
                    x.coeffs_mut()[idx] = cand;
                    let v = ratio(&x);
                    if v > val {
                        val = v;
                        break;
                    }
                    x.coeffs_mut()[idx] = old;
                }
            }
            if val > best_val {
                best_val = val;
                best = x;
            }
        }
        let lower = ratio(&best);
        NormEstimate { lower, upper, witness: best }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormEstimate {
    pub lower: f64,
    pub upper: f64,
    pub witness: HaarVector,
}

#[derive(Serialize, Deserialize)]
struct OperatorRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain_depth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codomain_depth: Option<u32>,
    rows: Vec<Vec<f64>>,
}

impl Serialize for HaarOperator {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows = self.data.chunks(self.cols()).map(<[f64]>::to_vec).collect();
        let repr = if self.is_square() {
            OperatorRepr { depth: Some(self.domain), domain_depth: None, codomain_depth: None, rows }
        } else {
            OperatorRepr {
                depth: None,
                domain_depth: Some(self.domain),
                codomain_depth: Some(self.codomain),
                rows,
            }
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for HaarOperator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = OperatorRepr::deserialize(d)?;
        let (domain, codomain) = match (r.depth, r.domain_depth, r.codomain_depth) {
            (Some(n), None, None) => (n, n),
            (None, Some(a), Some(b)) => (a, b),
            _ => return Err(D::Error::custom("give either depth or domain_depth+codomain_depth")),
        };
        if domain > 14 || codomain > 14 {
            return Err(D::Error::custom("operator depth above 14"));
        }
        if r.rows.len() != tree_size(codomain) {
            return Err(D::Error::custom(format!("expected {} rows", tree_size(codomain))));
        }
        let mut data = Vec::with_capacity(tree_size(codomain) * tree_size(domain));
        for row in r.rows {
            if row.len() != tree_size(domain) {
                return Err(D::Error::custom(format!("expected rows of length {}", tree_size(domain))));
            }
            data.extend(row);
        }
        Ok(HaarOperator { domain, codomain, data })
    }
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    depth: u32,
    format: String,
}

const BINARY_FORMAT: &str = "dense-f64-le";

/// Writes the header line `{"depth":N,"format":"dense-f64-le"}` followed by the raw row-major payload.
pub fn write_operator_binary(t: &HaarOperator, mut w: impl Write) -> Result<(), OperatorError> {
    let header = BinaryHeader { depth: t.depth(), format: BINARY_FORMAT.into() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parses either the binary-payload form or the pure-JSON form.
pub fn parse_operator(bytes: &[u8]) -> Result<HaarOperator, OperatorError> {
    if let Some(nl) = bytes.iter().position(|&b| b == b'\n') {
        if let Ok(h) = serde_json::from_slice::<BinaryHeader>(&bytes[..nl]) {
            if h.format != BINARY_FORMAT {
                return Err(OperatorError::Format(format!("unknown format `{}`", h.format)));
            }
            if h.depth > 14 {
                return Err(OperatorError::Format("operator depth above 14".into()));
            }
            let payload = &bytes[nl + 1..];
            let n = tree_size(h.depth);
            if payload.len() != n * n * 8 {
                return Err(OperatorError::Format(format!(
                    "payload has {} bytes, expected {}",
                    payload.len(),
                    n * n * 8
                )));
            }
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            return HaarOperator::from_rows(h.depth, h.depth, data);
        }
    }
    Ok(serde_json::from_slice(bytes)?)
}

pub fn read_operator_file(path: &Path) -> Result<HaarOperator, OperatorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_operator(&bytes)
}

/// Kinds of deterministic test operators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    /// Diagonal entries of modulus in `[δ, 1]` with random signs; off-diagonal
    /// entries `noise · u · sqrt(|J|/|I|)` with `u` uniform in `[-1, 1]`.
    DiagDominant { delta: f64, noise: f64 },
    /// Diagonal entries uniform in `[-1, 1]`.
    Multiplier,
    /// Random 0/1 Haar multiplier (an idempotent).
    ProjectionLike,
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorKind::DiagDominant { delta, noise } => write!(f, "diag_dominant:{delta}:{noise}"),
            OperatorKind::Multiplier => write!(f, "multiplier"),
            OperatorKind::ProjectionLike => write!(f, "projection_like"),
        }
    }
}

impl FromStr for OperatorKind {
    type Err = String;

    /// `diag_dominant:δ:noise`, `multiplier` or `projection_like`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["multiplier"] => Ok(OperatorKind::Multiplier),
            ["projection_like"] => Ok(OperatorKind::ProjectionLike),
            ["diag_dominant", d, e] => {
                let delta: f64 = d.parse().map_err(|_| format!("bad delta `{d}`"))?;
                let noise: f64 = e.parse().map_err(|_| format!("bad noise `{e}`"))?;
                if !(0.0..=1.0).contains(&delta) || noise < 0.0 {
                    return Err("need 0 <= delta <= 1 and noise >= 0".into());
                }
                Ok(OperatorKind::DiagDominant { delta, noise })
            }
            _ => Err(format!(
                "unknown operator kind `{s}` (multiplier, projection_like, diag_dominant:DELTA:NOISE)"
            )),
        }
    }
}

pub fn random_operator(depth: u32, kind: OperatorKind, seed: u64) -> HaarOperator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tree_size(depth);
    let mut t = HaarOperator::zero(depth);
    match kind {
        OperatorKind::Multiplier => {
            for i in 0..n {
                t.set(i, i, rng.random_range(-1.0..=1.0));
            }
        }
        OperatorKind::ProjectionLike => {
            for i in 0..n {
                t.set(i, i, if rng.random::<bool>() { 1.0 } else { 0.0 });
            }
        }
        OperatorKind::DiagDominant { delta, noise } => {
            let levels: Vec<i32> =
                (0..n).map(|i| DyadicInterval::from_index(i).level() as i32).collect();
            for i in 0..n {
                for j in 0..n {
                    let v = if i == j {
                        let m = delta + rng.random::<f64>() * (1.0 - delta);
                        if rng.random::<bool>() { m } else { -m }
                    } else {
                        let u: f64 = rng.random_range(-1.0..=1.0);
                        noise * u * 2f64.powf((levels[i] - levels[j]) as f64 / 2.0)
                    };
                    t.set(i, j, v);
                }
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::pairing;

    fn iv(n: u32, k: u64) -> DyadicInterval {
        DyadicInterval::new(n, k).unwrap()
    }

    fn random_vec(depth: u32, rng: &mut ChaCha8Rng) -> HaarVector {
        let c = (0..tree_size(depth)).map(|_| rng.random_range(-1.0..1.0)).collect();
        HaarVector::from_coeffs(depth, c).unwrap()
    }

    #[test]
    fn identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_vec(4, &mut rng);
        assert_eq!(HaarOperator::identity(4).apply(&f), f);
        assert!(HaarOperator::zero(4).apply(&f).is_zero());
        let d: Vec<f64> = (0..tree_size(3)).map(|i| i as f64).collect();
        let m = HaarOperator::multiplier(3, &d);
        let j = iv(2, 3);
        assert_eq!(m.apply(&HaarVector::basis(j, 3)), HaarVector::basis(j, 3).scaled(d[j.index()]));
    }

    #[test]
    fn adjoint_examples() {
        assert_eq!(HaarOperator::identity(3).adjoint(), HaarOperator::identity(3));
        let m = random_operator(3, OperatorKind::Multiplier, 5);
        assert_eq!(m.adjoint(), m);
        let t = random_operator(4, OperatorKind::DiagDominant { delta: 0.3, noise: 0.5 }, 9);
        assert_eq!(t.adjoint().adjoint(), t);
        let ts = t.adjoint();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let f = random_vec(4, &mut rng);
            let g = random_vec(4, &mut rng);
            let lhs = pairing(&ts.apply(&g), &f);
            let rhs = pairing(&g, &t.apply(&f));
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn diagonal_identity_and_decompose() {
        let t = random_operator(3, OperatorKind::DiagDominant { delta: 0.5, noise: 0.3 }, 4);
        for k in DyadicInterval::all_upto(3) {
            let hk = HaarVector::basis(k, 3);
            let (alpha, r) = t.decompose(&k);
            assert_eq!(pairing(&t.apply(&hk), &hk), alpha * k.measure());
            assert_eq!(pairing(&r, &hk), 0.0);
            let mut back = r.clone();
            back.add_scaled(alpha, &hk);
            assert_eq!(back, t.column(&k));
        }
        let (a, r) = HaarOperator::identity(2).decompose(&iv(1, 2));
        assert_eq!(a, 1.0);
        assert!(r.is_zero());
    }

    #[test]
    fn large_diagonal_examples() {
        assert!(HaarOperator::identity(3).has_large_diagonal(1.0));
        assert!(!HaarOperator::zero(3).has_large_diagonal(0.1));
        let d: Vec<f64> = (0..tree_size(3)).map(|i| if i % 2 == 0 { 0.6 } else { 0.9 }).collect();
        assert!(HaarOperator::multiplier(3, &d).has_large_diagonal(0.5));
        let t = random_operator(6, OperatorKind::DiagDominant { delta: 0.5, noise: 0.01 }, 3);
        assert!(t.has_large_diagonal(0.5));
        let (tn, signs) = t.normalize_diagonal_signs();
        assert!(tn.diagonal().iter().all(|&d| d >= 0.5));
        assert_eq!(tn.scale_columns(&signs), t);
    }

    #[test]
    fn norm_bound_examples() {
        let e = HaarOperator::identity(2).opnorm_bounds(4, 0);
        assert_eq!(e.lower, 1.0);
        assert!((e.upper - 3f64.sqrt()).abs() < 1e-15);
        let z = HaarOperator::zero(3).opnorm_bounds(4, 0);
        assert_eq!((z.lower, z.upper), (0.0, 0.0));
        let m = random_operator(4, OperatorKind::Multiplier, 8);
        let e = m.opnorm_bounds(3, 1);
        let max = m.diagonal().iter().fold(0.0f64, |a, d| a.max(d.abs()));
        assert!(e.lower >= max);
        assert!(e.lower <= e.upper);
        let only_upper = m.opnorm_bounds(0, 1);
        assert_eq!(only_upper.lower, 0.0);
    }

    #[test]
    fn generator_is_deterministic() {
        let k = OperatorKind::DiagDominant { delta: 0.5, noise: 0.02 };
        assert_eq!(random_operator(4, k, 11), random_operator(4, k, 11));
        assert_ne!(random_operator(4, k, 11), random_operator(4, k, 12));
        let m = random_operator(3, OperatorKind::Multiplier, 2);
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if i != j {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
        assert_eq!("diag_dominant:0.5:0.02".parse::<OperatorKind>().unwrap(), k);
        assert_eq!(k.to_string().parse::<OperatorKind>().unwrap(), k);
    }

    #[test]
    fn file_round_trips() {
        let t = random_operator(3, OperatorKind::DiagDominant { delta: 0.2, noise: 0.1 }, 1);
        let mut buf = Vec::new();
        write_operator_binary(&t, &mut buf).unwrap();
        assert_eq!(parse_operator(&buf).unwrap(), t);
        let json = serde_json::to_vec(&t).unwrap();
        assert_eq!(parse_operator(&json).unwrap(), t);
        let rect = HaarOperator::zeros(1, 3);
        let back: HaarOperator = serde_json::from_str(&serde_json::to_string(&rect).unwrap()).unwrap();
        assert_eq!(back, rect);
    }

    #[test]
    fn compose_matches_apply() {
        let a = random_operator(3, OperatorKind::DiagDominant { delta: 0.2, noise: 0.4 }, 1);
        let b = random_operator(3, OperatorKind::DiagDominant { delta: 0.2, noise: 0.4 }, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_vec(3, &mut rng);
        let lhs = a.compose(&b).apply(&f);
        let rhs = a.apply(&b.apply(&f));
        assert!(lhs.sub(&rhs).max_abs() < 1e-12);
    }
}
