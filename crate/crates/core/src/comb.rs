//! Selection lemmas on dyadic trees and nested families: level covers by
//! intervals of small frequency weight, dense roots of families with large
//! Carleson constant, and pruning a family to a uniformly dense subfamily.

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic::{carleson_constant_exact, DyadicInterval, IntervalCollection, LeafSet, NestedFamily};
use crate::haar::{h1_norm, random_vector, sl_inf_norm, HaarVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CombError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no level in {from}..={to} covers enough of {interval}; best level {best_level} covers {best_coverage}")]
    DepthExhausted {
        interval: DyadicInterval,
        from: u32,
        to: u32,
        best_level: u32,
        best_coverage: f64,
    },
    #[error("Carleson constant {carleson} does not exceed {threshold}")]
    CarlesonTooSmall { carleson: f64, threshold: f64 },
    #[error("no dense root although the Carleson constant is large enough")]
    NoRootFound,
    #[error("generation coverage |G_n| / |G_0| = {coverage} is not above 1 - alpha = {required}")]
    CoverageTooSmall { coverage: f64, required: f64 },
}

/// `ω(K)` for `K ∈ D^N`, indexed by order - 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyWeight {
    pub depth: u32,
    pub values: Vec<f64>,
}

/// Sizes of the inputs of a weight against the hypothesis of the level-cover lemma.
/// The dual norm of each `g` is replaced by its H1 norm, which dominates it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightHypothesis {
    pub f_sl_inf_sum: f64,
    pub g_h1_sum: f64,
}

impl WeightHypothesis {
    pub fn holds_for(&self, root: &DyadicInterval) -> bool {
        self.f_sl_inf_sum <= 1.0 && self.g_h1_sum <= root.measure()
    }
}

impl FrequencyWeight {
    pub fn zero(depth: u32) -> Self {
        FrequencyWeight { depth, values: vec![0.0; crate::dyadic::tree_size(depth)] }
    }

    pub fn get(&self, k: &DyadicInterval) -> f64 {
        self.values.get(k.index()).copied().unwrap_or(0.0)
    }

    /// `Σ_j |⟨f_j, h_K⟩| + |⟨h_K, g_j⟩|`. Inputs of smaller depth count as zero below it.
    pub fn from_functions(depth: u32, fs: &[HaarVector], gs: &[HaarVector]) -> Self {
        let mut w = FrequencyWeight::zero(depth);
        for v in fs.iter().chain(gs) {
            for (idx, a) in v.coeffs().iter().enumerate().take(w.values.len()) {
                w.values[idx] += a.abs() * DyadicInterval::from_index(idx).measure();
            }
        }
        w
    }

    pub fn add(&mut self, other: &FrequencyWeight) {
        assert_eq!(self.depth, other.depth);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

pub fn frequency_weight(depth: u32, fs: &[HaarVector], gs: &[HaarVector]) -> (FrequencyWeight, WeightHypothesis) {
    let hyp = WeightHypothesis {
        f_sl_inf_sum: fs.iter().map(sl_inf_norm).sum(),
        g_h1_sum: gs.iter().map(h1_norm).sum(),
    };
    (FrequencyWeight::from_functions(depth, fs, gs), hyp)
}

/// Weight of `count` random `f`s and `g`s rescaled so that `Σ‖f‖ = 1` and `Σ‖g‖_H1 = |root|`.
pub fn random_weight(
    depth: u32,
    root: &DyadicInterval,
    count: usize,
    rng: &mut impl Rng,
) -> (FrequencyWeight, WeightHypothesis) {
    let draw = |rng: &mut dyn rand::RngCore| {
        let density = 0.05 + 0.3 * rng.random::<f64>();
        let mut v = random_vector(depth, density, rng);
        if v.is_zero() {
            v.set(&DyadicInterval::from_index(rng.random_range(0..v.coeffs().len())), 1.0);
        }
        v
    };
    let fs: Vec<HaarVector> = (0..count).map(|_| draw(rng)).collect();
    let gs: Vec<HaarVector> = (0..count).map(|_| draw(rng)).collect();
    let f_total: f64 = fs.iter().map(sl_inf_norm).sum();
    let g_total: f64 = gs.iter().map(h1_norm).sum();
    let fs: Vec<_> = fs.iter().map(|f| f.scaled(1.0 / f_total)).collect();
    let gs: Vec<_> = gs.iter().map(|g| g.scaled(root.measure() / g_total)).collect();
    frequency_weight(depth, &fs, &gs)
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite parameter")
}

/// `count / total ≥ 1 - ρ` (or `>` when `strict`), compared exactly.
pub fn fraction_exceeds(count: u64, total: u64, rho: f64, strict: bool) -> bool {
    let lhs = BigRational::new(BigInt::from(count), BigInt::from(total));
    let rhs = BigRational::from_integer(1.into()) - exact(rho);
    if strict {
        lhs > rhs
    } else {
        lhs >= rhs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelCover {
    pub level: u32,
    pub cover: IntervalCollection,
    /// Covered fraction of the root.
    pub coverage: f64,
    pub covered_count: u64,
    pub total_count: u64,
    /// `⌊4/(ρ²τ²)⌋ + r`, when finite and representable.
    pub guaranteed_level: Option<u64>,
}

pub fn guaranteed_level(tau: f64, rho: f64, r: u32) -> Option<u64> {
    let a = (4.0 / (rho * rho * tau * tau)).floor();
    (a.is_finite() && a < 1e18).then(|| a as u64 + u64::from(r))
}

/// Smallest `k ∈ [r, cap]` such that the good intervals
/// `{K ⊆ K0, K ∈ D_k, ω(K) ≤ τ|K|}` cover at least `(1 - ρ)|K0|`.
pub fn select_level_cover(
    root: &DyadicInterval,
    weight: &FrequencyWeight,
    tau: f64,
    rho: f64,
    r: u32,
    cap: u32,
) -> Result<LevelCover, CombError> {
    if !(tau > 0.0 && tau.is_finite()) || !(rho > 0.0 && rho.is_finite()) {
        return Err(CombError::InvalidParameter(format!("tau = {tau} and rho = {rho} must be positive")));
    }
    if r < root.level() {
        return Err(CombError::InvalidParameter(format!(
            "level {r} is coarser than the root {root}"
        )));
    }
    let cap = cap.min(weight.depth);
    let mut best = (r, -1.0);
    for k in r..=cap {
        let bound = tau * crate::dyadic::pow2_neg(k);
        let cover: IntervalCollection =
            root.descendants_at(k).filter(|cand| weight.get(cand) <= bound).collect();
        let total = 1u64 << (k - root.level());
        let count = cover.len() as u64;
        let coverage = count as f64 / total as f64;
        if fraction_exceeds(count, total, rho, false) {
            return Ok(LevelCover {
                level: k,
                cover,
                coverage,
                covered_count: count,
                total_count: total,
                guaranteed_level: guaranteed_level(tau, rho, r),
            });
        }
        if coverage > best.1 {
            best = (k, coverage);
        }
    }
    Err(CombError::DepthExhausted {
        interval: *root,
        from: r,
        to: cap,
        best_level: best.0,
        best_coverage: best.1.max(0.0),
    })
}

/// `|G_ℓ({N ∈ X : N ⊆ root})| / |root|` for `ℓ = 0..=k`, exactly.
pub fn generation_coverages(family: &NestedFamily, root: usize, k: usize) -> Vec<Ratio<u64>> {
    let n0 = &family.sets()[root];
    let sub = family.select(&family.members_within(n0));
    let gens = sub.generation_point_sets();
    (0..=k)
        .map(|l| Ratio::new(gens.get(l).map_or(0, LeafSet::count), n0.count()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DenseRoot {
    /// Index into the family.
    pub index: usize,
    pub root: LeafSet,
    /// Covered fraction of the root by every generation `0..=k`.
    pub coverages: Vec<f64>,
}

fn to_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn ratio_exceeds(r: &Ratio<u64>, rho: f64) -> bool {
    fraction_exceeds(*r.numer(), *r.denom(), rho, true)
}

/// First member `N0` (in family order) whose generations `0..=k` below it each cover
/// more than `(1 - ρ)|N0|`. Requires `cc(X) > k / ρ`.
pub fn find_dense_root(family: &NestedFamily, k: usize, rho: f64) -> Result<DenseRoot, CombError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(CombError::InvalidParameter(format!("rho = {rho} must be positive")));
    }
    let cc = carleson_constant_exact(family);
    let cc_big = BigRational::new(BigInt::from(*cc.numer()), BigInt::from(*cc.denom()));
    let threshold = BigRational::from_integer(BigInt::from(k)) / exact(rho);
    if cc_big <= threshold {
        return Err(CombError::CarlesonTooSmall {
            carleson: to_f64(&cc),
            threshold: k as f64 / rho,
        });
    }
    dense_root_search(family, k, rho).ok_or(CombError::NoRootFound)
}

/// The search of [`find_dense_root`] without the Carleson precondition.
pub fn dense_root_search(family: &NestedFamily, k: usize, rho: f64) -> Option<DenseRoot> {
    (0..family.len()).find_map(|i| {
        if family.sets()[i].is_empty() {
            return None;
        }
        let cov = generation_coverages(family, i, k);
        cov.iter().all(|c| ratio_exceeds(c, rho)).then(|| DenseRoot {
            index: i,
            root: family.sets()[i].clone(),
            coverages: cov.iter().map(to_f64).collect(),
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Pruned {
    /// Indices into the input family.
    pub kept: Vec<usize>,
    pub family: NestedFamily,
    /// Point sets `F_0, ..., F_n`.
    pub layers: Vec<LeafSet>,
    /// `F_0 ∩ ... ∩ F_n`.
    pub core: LeafSet,
}

/// The layered construction: `F_0 = G_n(X)`, then members of `G_{n-j}(X)` that are
/// `(1 - β)`-dense in `F_0 ∩ ... ∩ F_{j-1}`; keeps the layer members meeting the core.
pub fn prune_construction(family: &NestedFamily, n: usize, beta: f64) -> Pruned {
    let res = family.resolution();
    let gens = family.generation_members();
    let gen = |j: usize| gens.get(j).cloned().unwrap_or_default();
    let union = |idx: &[usize]| {
        let mut u = LeafSet::empty(res);
        for &i in idx {
            u.union_with(&family.sets()[i]);
        }
        u
    };
    let mut layer_members = vec![gen(n)];
    let mut layers = vec![union(&layer_members[0])];
    let mut running = layers[0].clone();
    for j in 1..=n {
        let members: Vec<usize> = gen(n - j)
            .into_iter()
            .filter(|&i| {
                let s = &family.sets()[i];
                fraction_exceeds(s.intersection_count(&running), s.count(), beta, false)
            })
            .collect();
        let f = union(&members);
        running = running.intersection(&f);
        layers.push(f);
        layer_members.push(members);
    }
    let core = running;
    let mut kept: Vec<usize> = layer_members
        .into_iter()
        .flatten()
        .filter(|&i| family.sets()[i].intersects(&core))
        .collect();
    kept.sort_unstable();
    Pruned { family: family.select(&kept), kept, layers, core }
}

/// Checks `0 < β < 1`, `0 < α < 2^{-n-1} β^{n+1}` and `|G_n(X)| > (1 - α)|G_0(X)|`, then prunes.
pub fn prune_to_dense(family: &NestedFamily, n: usize, alpha: f64, beta: f64) -> Result<Pruned, CombError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CombError::InvalidParameter(format!("beta = {beta} must lie in (0, 1)")));
    }
    let two = BigRational::from_integer(2.into());
    let limit = num_traits::pow(exact(beta) / two, n + 1);
    if !(alpha > 0.0) || exact(alpha) >= limit {
        return Err(CombError::InvalidParameter(format!(
            "alpha = {alpha} must lie in (0, (beta/2)^(n+1))"
        )));
    }
    let gens = family.generation_point_sets();
    let g0 = gens.first().map_or(0, LeafSet::count);
    let gn = gens.get(n).map_or(0, LeafSet::count);
    if g0 == 0 || !fraction_exceeds(gn, g0, alpha, true) {
        return Err(CombError::CoverageTooSmall {
            coverage: if g0 == 0 { 0.0 } else { gn as f64 / g0 as f64 },
            required: 1.0 - alpha,
        });
    }
    Ok(prune_construction(family, n, beta))
}
