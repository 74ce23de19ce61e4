//! Block bases that almost diagonalize an operator.
//!
//! The construction runs over `I ∈ D^n` in order. `ℬ_1 = {[0,1)}`; for a later `I0`
//! with parent `Ĩ0`, every member `K0 ∈ ℬ_{Ĩ0}` is halved, and the half on the side of
//! `I0` is covered by a level of intervals with small frequency weight against the
//! vectors already built. Signs are then chosen so that the block keeps a large diagonal.
//!
//! Two schedules are supported. The nominal one fixes every level in advance; its
//! depths explode for `n ≥ 1`, so it is kept as exact big integers and only the `n = 0`
//! case can run. The adaptive one takes per-step `(ρ_i, τ_i)`, uses the operator's own
//! depth as the cap, and reports the constants it actually achieved.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::comb::{select_level_cover, CombError, FrequencyWeight};
use crate::dyadic::{pow2_neg, tree_size, DyadicInterval, IntervalCollection};
use crate::haar::{pairing, sl_inf_norm, HaarVector};
use crate::jones::{projection_p, verify_jones, BlockBasisFamily, JonesReport};
use crate::operators::HaarOperator;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuasiDiagError {
    #[error("step {step}: no level covers enough of {interval} (best level {best_level}, coverage {best_coverage})")]
    DepthExhausted {
        step: u64,
        interval: DyadicInterval,
        best_level: u32,
        best_coverage: f64,
    },
    #[error("schedule needs depth {required}, operator has depth {available}")]
    ScheduleInfeasible { required: String, available: u32 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("net of {required} points exceeds the budget of {budget}")]
    NetTooLarge { required: String, budget: usize },
    #[error(transparent)]
    Comb(#[from] CombError),
}

/// A nonnegative integer that may be far too large to hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Magnitude {
    Exact(BigUint),
    /// The value is at least `2^e`.
    Log2AtLeast(BigUint),
    /// Even the exponent is out of reach.
    Unbounded,
}

impl Magnitude {
    pub fn to_u32(&self) -> Option<u32> {
        match self {
            Magnitude::Exact(v) => v.to_u32(),
            _ => None,
        }
    }
}

impl Serialize for Magnitude {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(rename_all = "snake_case")]
        enum Repr {
            Exact(String),
            ExactBits(u64),
            Log2AtLeast(String),
            Unbounded,
        }
        let r = match self {
            Magnitude::Exact(v) if v.bits() <= 128 => Repr::Exact(v.to_string()),
            Magnitude::Exact(v) => Repr::ExactBits(v.bits()),
            Magnitude::Log2AtLeast(e) if e.bits() <= 128 => Repr::Log2AtLeast(e.to_string()),
            Magnitude::Log2AtLeast(e) => Repr::Log2AtLeast(format!("2^{}", e.bits() - 1)),
            Magnitude::Unbounded => Repr::Unbounded,
        };
        r.serialize(s)
    }
}

impl std::fmt::Display for Magnitude {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Magnitude::Exact(v) if v.bits() <= 128 => write!(f, "{v}"),
            Magnitude::Exact(v) => write!(f, "a {}-bit integer", v.bits()),
            Magnitude::Log2AtLeast(e) if e.bits() <= 128 => write!(f, "at least 2^{e}"),
            Magnitude::Log2AtLeast(e) => write!(f, "at least 2^(a {}-bit integer)", e.bits()),
            Magnitude::Unbounded => write!(f, "a tower beyond representation"),
        }
    }
}

/// Exponents up to this many bits are expanded exactly.
const EXACT_SHIFT_LIMIT: u64 = 1 << 21;

/// Nominal constants: `ρ_i = η 2^-i`, `τ_{i+1} = η 8^{-i-1} 2^{-m_i} / Γ`,
/// `m_1 = 0`, `m_{i+1} = m_i + 1 + ⌊4 / (ρ_{i+1}² τ_{i+1}²)⌋`, depth `m_{2^{n+1}-1}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PaperSchedule {
    pub n: u32,
    pub gamma: f64,
    pub eta: f64,
    pub rho: Vec<f64>,
    /// Underflows to zero once `m_i` is large.
    pub tau: Vec<f64>,
    pub levels: Vec<Magnitude>,
    pub depth: Magnitude,
}

impl PaperSchedule {
    pub fn feasible_depth(&self) -> Option<u32> {
        self.depth.to_u32().filter(|&d| d <= 30)
    }
}

fn floor_log2(r: &BigRational) -> i64 {
    // 2^(bits(p)-1) ≤ p < 2^bits(p), so p/q ≥ 2^(bits(p) - 1 - bits(q)).
    let p = r.numer().magnitude().bits() as i64;
    let q = r.denom().magnitude().bits() as i64;
    p - 1 - q
}

pub fn paper_schedule(n: u32, gamma: f64, eta: f64) -> Result<PaperSchedule, QuasiDiagError> {
    if !(gamma > 0.0 && gamma.is_finite() && eta > 0.0 && eta.is_finite()) {
        return Err(QuasiDiagError::Precondition(format!("gamma = {gamma}, eta = {eta} must be positive")));
    }
    let dim = tree_size(n);
    let g = BigRational::from_float(gamma).unwrap();
    let e = BigRational::from_float(eta).unwrap();
    let c = &g * &g / (&e * &e * &e * &e);
    let lg = floor_log2(&c);
    let mut levels = vec![Magnitude::Exact(BigUint::zero())];
    for i in 1..dim as u64 {
        let next = match &levels[i as usize - 1] {
            Magnitude::Exact(m) => {
                let shift: BigUint = BigUint::from(8 * (i + 1) + 2) + m * 2u32;
                match shift.to_u64().filter(|s| *s <= EXACT_SHIFT_LIMIT) {
                    Some(s) => {
                        let num = c.numer().magnitude() << s as usize;
                        let floor = num / c.denom().magnitude();
                        Magnitude::Exact(m + 1u32 + floor)
                    }
                    None => {
                        let e = BigInt::from(shift) + lg;
                        Magnitude::Log2AtLeast(e.to_biguint().unwrap_or_default())
                    }
                }
            }
            _ => Magnitude::Unbounded,
        };
        levels.push(next);
    }
    let rho = (1..=dim).map(|i| eta * 2f64.powi(-(i as i32))).collect();
    let tau = (1..=dim)
        .map(|i| {
            if i == 1 {
                return eta / gamma;
            }
            match levels[i - 2].to_u32() {
                Some(m) => eta * 8f64.powi(-(i as i32)) * pow2_neg(m) / gamma,
                None => 0.0,
            }
        })
        .collect();
    let depth = levels.last().cloned().unwrap();
    Ok(PaperSchedule { n, gamma, eta, rho, tau, levels, depth })
}

/// Per-step `(ρ_i, τ_i)`; the last entry repeats when the lists are short.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSchedule {
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    /// Deepest level to use; defaults to the operator depth.
    #[serde(default)]
    pub depth_cap: Option<u32>,
    /// Operator norm bound used in the scalings; defaults to the certified upper bound.
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl AdaptiveSchedule {
    pub fn constant(rho: f64, tau: f64) -> Self {
        AdaptiveSchedule { rho: vec![rho], tau: vec![tau], depth_cap: None, gamma: None }
    }

    fn at(v: &[f64], i: usize) -> f64 {
        v[(i - 1).min(v.len() - 1)]
    }

    pub fn rho_at(&self, step: usize) -> f64 {
        Self::at(&self.rho, step)
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        Self::at(&self.tau, step)
    }

    pub fn validate(&self) -> Result<(), QuasiDiagError> {
        for (name, v) in [("rho", &self.rho), ("tau", &self.tau)] {
            if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(QuasiDiagError::Precondition(format!("{name} values must be positive")));
            }
            if v.windows(2).any(|w| w[1] > w[0]) {
                return Err(QuasiDiagError::Precondition(format!("{name} values must be non-increasing")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Schedule {
    Paper(PaperSchedule),
    Adaptive(AdaptiveSchedule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMethod {
    AllPositive,
    Exhaustive,
    Derandomized,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignChoice {
    /// One sign per member, in collection order.
    pub signs: Vec<i8>,
    /// `X(ε) = Σ_{K0 ≠ K1} ε_{K0} ε_{K1} ⟨r_{K0}, h_{K1}⟩`.
    pub x_value: f64,
    pub method: SignMethod,
}

/// Largest collection searched exhaustively.
pub const EXHAUSTIVE_SIGN_LIMIT: usize = 20;

/// `C[a][b] = ⟨r_{K_a}, h_{K_b}⟩ = A[K_b, K_a] |K_b|` for `a ≠ b`.
fn interaction(members: &[DyadicInterval], t: &HaarOperator) -> Vec<Vec<f64>> {
    let m = members.len();
    let mut c = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            if a != b {
                c[a][b] = t.entry(&members[b], &members[a]) * members[b].measure();
            }
        }
    }
    c
}

fn x_value(c: &[Vec<f64>], eps: &[f64]) -> f64 {
    let mut x = 0.0;
    for a in 0..c.len() {
        for b in 0..c.len() {
            if a != b {
                x += eps[a] * eps[b] * c[a][b];
            }
        }
    }
    x
}

fn to_signs(eps: &[f64]) -> Vec<i8> {
    eps.iter().map(|&e| if e < 0.0 { -1 } else { 1 }).collect()
}

/// Maximizes `X(ε)` over all sign patterns with the first sign fixed to `+1`.
pub fn exhaustive_signs(collection: &IntervalCollection, t: &HaarOperator) -> SignChoice {
    let members: Vec<_> = collection.iter().copied().collect();
    let c = interaction(&members, t);
    let m = members.len();
    if m <= 1 {
        return SignChoice { signs: vec![1; m], x_value: 0.0, method: SignMethod::Exhaustive };
    }
    let sym: Vec<Vec<f64>> = (0..m).map(|a| (0..m).map(|b| c[a][b] + c[b][a]).collect()).collect();
    let mut eps = vec![1.0; m];
    let mut x = x_value(&c, &eps);
    let mut best = (x, eps.clone());
    // Gray code over signs 1..m.
    for step in 1u64..(1u64 << (m - 1)) {
        let t_idx = step.trailing_zeros() as usize + 1;
        let delta: f64 = (0..m).filter(|&l| l != t_idx).map(|l| eps[l] * sym[t_idx][l]).sum();
        x -= 2.0 * eps[t_idx] * delta;
        eps[t_idx] = -eps[t_idx];
        if x > best.0 {
            best = (x, eps.clone());
        }
    }
    let x = x_value(&c, &best.1);
    SignChoice { signs: to_signs(&best.1), x_value: x, method: SignMethod::Exhaustive }
}

/// Fixes signs one at a time, heaviest rows first, never letting the conditional mean of `X` drop.
pub fn derandomized_signs(collection: &IntervalCollection, t: &HaarOperator) -> SignChoice {
    let members: Vec<_> = collection.iter().copied().collect();
    let c = interaction(&members, t);
    let m = members.len();
    let weight = |a: usize| (0..m).map(|b| c[a][b].abs() + c[b][a].abs()).sum::<f64>();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| weight(b).total_cmp(&weight(a)).then(a.cmp(&b)));
    let mut eps = vec![0.0; m];
    let mut fixed: Vec<usize> = Vec::with_capacity(m);
    for &t_idx in &order {
        let pull: f64 = fixed.iter().map(|&l| eps[l] * (c[t_idx][l] + c[l][t_idx])).sum();
        eps[t_idx] = if pull < 0.0 { -1.0 } else { 1.0 };
        fixed.push(t_idx);
    }
    SignChoice { signs: to_signs(&eps), x_value: x_value(&c, &eps), method: SignMethod::Derandomized }
}

/// Signs with `X(ε) ≥ 0` for an operator with nonnegative diagonal.
pub fn choose_signs(collection: &IntervalCollection, t: &HaarOperator) -> SignChoice {
    if collection.len() <= EXHAUSTIVE_SIGN_LIMIT {
        exhaustive_signs(collection, t)
    } else {
        derandomized_signs(collection, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub interval: DyadicInterval,
    /// Finest level already in use before this step.
    pub previous_level: Option<u32>,
    pub min_level: u32,
    pub max_level: u32,
    pub rho: f64,
    pub tau: f64,
    /// Smallest covered fraction over the halves.
    pub min_coverage: f64,
    pub members: usize,
    pub x_value: f64,
    pub sign_method: SignMethod,
    pub offdiag_sum: f64,
    pub offdiag_bound: f64,
    pub diag_value: f64,
    pub norm_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuasiDiagResult {
    pub n: u32,
    pub depth: u32,
    pub delta: f64,
    pub gamma: f64,
    pub family: BlockBasisFamily,
    /// Orders `K` with `σ_K = -1`: the run used `T ∘ diag(σ)`, whose diagonal is nonnegative.
    pub flipped_columns: Vec<u64>,
    /// Per step `i`: `Σ_{j<i} |⟨T b_j, b_i⟩| + |⟨b_i, T* b_j⟩|`.
    pub offdiag_sums: Vec<f64>,
    /// Per step: the same sum bounded through the frequency weights.
    pub offdiag_bounds: Vec<f64>,
    pub diag_values: Vec<f64>,
    pub norms_sq: Vec<f64>,
    /// `|B_I| / |I|`.
    pub measure_floors: Vec<f64>,
    /// `max_i 4^i offdiag_i / ‖b_i‖²`.
    pub eta_achieved: f64,
    /// `max_i 4^i offdiag_bound_i / ‖b_i‖²`.
    pub eta_certified: f64,
    /// `max_i 8^i 2^{m+1} Γ τ_i`: what the schedule alone guarantees.
    pub eta_schedule: f64,
    pub rho_achieved: Vec<f64>,
    /// `(1 - Σ ρ_achieved)^-1`, when the sum is below one.
    pub kappa_bound: Option<f64>,
    pub jones: JonesReport,
    /// Measured J4 constant above the bound implied by the achieved coverages.
    pub kappa_discrepancy: bool,
    pub log: Vec<StepLog>,
}

impl QuasiDiagResult {
    /// `σ` as a full multiplier diagonal.
    pub fn column_signs(&self) -> Vec<f64> {
        let mut s = vec![1.0; tree_size(self.depth)];
        for &o in &self.flipped_columns {
            s[o as usize - 1] = -1.0;
        }
        s
    }

    /// `‖b_i‖² δ ≤ ⟨T b_i, b_i⟩` for every step.
    pub fn diagonal_holds(&self) -> bool {
        self.diag_values
            .iter()
            .zip(&self.norms_sq)
            .all(|(d, nsq)| *d >= self.delta * nsq - 1e-12 * nsq.max(1.0))
    }

    /// `offdiag_i ≤ η 4^-i ‖b_i‖²` for every step.
    pub fn offdiag_holds(&self, eta: f64) -> bool {
        self.offdiag_sums
            .iter()
            .zip(&self.norms_sq)
            .enumerate()
            .all(|(k, (o, nsq))| *o <= eta * 4f64.powi(-(k as i32 + 1)) * nsq)
    }
}

/// Per-step parameters resolved from either schedule.
struct Plan {
    rho: Vec<f64>,
    tau: Vec<f64>,
    /// `Some(m_i)` in nominal mode.
    levels: Option<Vec<u32>>,
    cap: u32,
    gamma: f64,
}

fn plan(schedule: &Schedule, n: u32, depth: u32, gamma_default: f64) -> Result<Plan, QuasiDiagError> {
    let dim = tree_size(n);
    match schedule {
        Schedule::Paper(p) => {
            if p.n != n {
                return Err(QuasiDiagError::Precondition(format!(
                    "schedule built for n = {}, asked for n = {n}",
                    p.n
                )));
            }
            let levels: Option<Vec<u32>> = p.levels.iter().map(Magnitude::to_u32).collect();
            match levels {
                Some(levels) if levels.last().is_some_and(|&d| d <= depth) => Ok(Plan {
                    rho: p.rho.clone(),
                    tau: p.tau.clone(),
                    levels: Some(levels),
                    cap: depth,
                    gamma: p.gamma,
                }),
                _ => Err(QuasiDiagError::ScheduleInfeasible {
                    required: p.depth.to_string(),
                    available: depth,
                }),
            }
        }
        Schedule::Adaptive(a) => {
            a.validate()?;
            let gamma = a.gamma.unwrap_or(gamma_default);
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(QuasiDiagError::Precondition(format!("gamma = {gamma} must be positive")));
            }
            Ok(Plan {
                rho: (1..=dim).map(|i| a.rho_at(i)).collect(),
                tau: (1..=dim).map(|i| a.tau_at(i)).collect(),
                levels: None,
                cap: a.depth_cap.unwrap_or(depth).min(depth),
                gamma,
            })
        }
    }
}

/// The operator-driven part of the weight: `T b_j`, `T* b_j` for every finished step.
struct Past<'a> {
    t: &'a HaarOperator,
    adjoint: HaarOperator,
    images: Vec<HaarVector>,
    co_images: Vec<HaarVector>,
    /// `Σ_j 2^-j (|(T b_j)_K| + |(T* b_j)_K|)`, before the per-step scaling.
    raw: Vec<f64>,
}

struct Construction<'a> {
    depth: u32,
    n: u32,
    delta: f64,
    past: Option<Past<'a>>,
    fixed_weight: Option<FrequencyWeight>,
    /// Select the first step instead of fixing `ℬ_1 = {[0,1)}`.
    select_root: bool,
}

fn run(c: Construction<'_>, schedule: &Schedule) -> Result<QuasiDiagResult, QuasiDiagError> {
    let Construction { depth, n, delta, mut past, fixed_weight, select_root } = c;
    let gamma_default = past.as_ref().map_or(1.0, |p| {
        let g = p.t.norm_upper_bound();
        if g > 0.0 { g } else { 1.0 }
    });
    let plan = plan(schedule, n, depth, gamma_default)?;
    let dim = tree_size(n);
    let mut collections = vec![IntervalCollection::new(); dim];
    let mut signs: Vec<(DyadicInterval, i8)> = Vec::new();
    let mut blocks: Vec<HaarVector> = Vec::with_capacity(dim);
    let mut log = Vec::with_capacity(dim);
    let mut rho_achieved = Vec::with_capacity(dim);
    let mut finest: Option<u32> = None;
    let (mut eta_achieved, mut eta_certified, mut eta_schedule) = (0.0f64, 0.0f64, 0.0f64);
    let (mut offdiag_sums, mut offdiag_bounds, mut diag_values, mut norms_sq) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for step in 1..=dim {
        let i0 = DyadicInterval::from_order(step as u64).expect("valid order");
        let rho = plan.rho[step - 1];
        let tau = plan.tau[step - 1];
        let m_prev = match &plan.levels {
            Some(levels) if step >= 2 => Some(levels[step - 2]),
            Some(_) => None,
            None => finest,
        };
        let r = m_prev.map_or(0, |m| m + 1);
        let cap = match &plan.levels {
            Some(levels) => levels[step - 1],
            None => plan.cap,
        };
        // ω = raw / (2^{m+1} Γ) from the past vectors, plus any fixed weight.
        let scale = pow2_neg(r) / plan.gamma;
        let mut weight = fixed_weight.clone().unwrap_or_else(|| FrequencyWeight::zero(depth));
        if let Some(p) = &past {
            for (idx, w) in weight.values.iter_mut().enumerate() {
                *w += p.raw[idx] * DyadicInterval::from_index(idx).measure() * scale;
            }
        }

        let roots: Vec<DyadicInterval> = if step == 1 {
            vec![DyadicInterval::unit()]
        } else {
            let parent = i0.parent().expect("non-root step");
            collections[parent.index()]
                .iter()
                .map(|k| if i0.is_left_child() { k.left_child() } else { k.right_child() })
                .collect()
        };
        let (collection, min_coverage) = if step == 1 && !select_root {
            ([DyadicInterval::unit()].into_iter().collect::<IntervalCollection>(), 1.0)
        } else {
            if roots.iter().any(|k| k.level() > cap) {
                return Err(QuasiDiagError::DepthExhausted {
                    step: step as u64,
                    interval: roots[0],
                    best_level: cap,
                    best_coverage: 0.0,
                });
            }
            let covers: Vec<_> = roots
                .par_iter()
                .map(|k1| select_level_cover(k1, &weight, tau, rho, r, cap).map_err(|e| (k1, e)))
                .collect();
            let mut union = IntervalCollection::new();
            let mut min_cov = 1.0f64;
            for c in covers {
                match c {
                    Ok(cover) => {
                        min_cov = min_cov.min(cover.coverage);
                        union.extend(&cover.cover);
                    }
                    Err((k1, CombError::DepthExhausted { best_level, best_coverage, .. })) => {
                        return Err(QuasiDiagError::DepthExhausted {
                            step: step as u64,
                            interval: *k1,
                            best_level,
                            best_coverage,
                        })
                    }
                    Err((_, e)) => return Err(e.into()),
                }
            }
            (union, min_cov)
        };
        rho_achieved.push(1.0 - min_coverage);

        let choice = match &past {
            Some(p) if delta > 0.0 => choose_signs(&collection, p.t),
            _ => SignChoice {
                signs: vec![1; collection.len()],
                x_value: 0.0,
                method: SignMethod::AllPositive,
            },
        };
        let mut b = HaarVector::zeros(depth);
        for (k, s) in collection.iter().zip(&choice.signs) {
            b.set(k, f64::from(*s));
            signs.push((*k, *s));
        }
        let nsq = collection.total_measure().to_f64();
        let weight_sum: f64 = collection.iter().map(|k| weight.get(k)).sum();
        let pow = 2f64.powi(step as i32);

        let (offdiag, bound, diag) = match &mut past {
            Some(p) => {
                let tb = p.t.apply(&b);
                let tsb = p.adjoint.apply(&b);
                let offdiag: f64 = (0..blocks.len())
                    .map(|j| pairing(&p.images[j], &b).abs() + pairing(&b, &p.co_images[j]).abs())
                    .sum();
                let diag = pairing(&tb, &b);
                let w = 2f64.powi(-(step as i32));
                for (idx, acc) in p.raw.iter_mut().enumerate() {
                    *acc += w * (tb.coeffs()[idx].abs() + tsb.coeffs()[idx].abs());
                }
                p.images.push(tb);
                p.co_images.push(tsb);
                // Σ_j |⟨T b_j, b_i⟩| + ... ≤ 2^i 2^{m+1} Γ Σ_{K ∈ ℬ_i} ω(K)
                let bound = if step == 1 { 0.0 } else { pow / scale * weight_sum };
                (offdiag, bound, diag)
            }
            None => (0.0, 0.0, 0.0),
        };
        let four = 4f64.powi(step as i32);
        eta_achieved = eta_achieved.max(four * offdiag / nsq);
        eta_certified = eta_certified.max(four * bound / nsq);
        if step > 1 && past.is_some() {
            eta_schedule = eta_schedule.max(8f64.powi(step as i32) / scale * tau);
        }

        let levels = (collection.min_level().unwrap_or(0), collection.max_level().unwrap_or(0));
        finest = Some(finest.map_or(levels.1, |f| f.max(levels.1)));
        log.push(StepLog {
            step: step as u64,
            interval: i0,
            previous_level: m_prev,
            min_level: levels.0,
            max_level: levels.1,
            rho,
            tau,
            min_coverage,
            members: collection.len(),
            x_value: choice.x_value,
            sign_method: choice.method,
            offdiag_sum: offdiag,
            offdiag_bound: bound,
            diag_value: diag,
            norm_sq: nsq,
        });
        offdiag_sums.push(offdiag);
        offdiag_bounds.push(bound);
        diag_values.push(diag);
        norms_sq.push(nsq);
        blocks.push(b);
        collections[step - 1] = collection;
    }

    let family = BlockBasisFamily::new(depth, n, collections)
        .expect("selected levels never exceed the depth")
        .with_signs(signs);
    let measure_floors =
        DyadicInterval::all_upto(n).map(|i| family.norm_sq(&i) / i.measure()).collect();
    let jones = verify_jones(&family);
    let rho_sum: f64 = rho_achieved.iter().sum();
    let kappa_bound = (rho_sum < 1.0).then(|| 1.0 / (1.0 - rho_sum));
    let kappa_discrepancy = match (jones.kappa_measured, kappa_bound) {
        (Some(k), Some(b)) => k > b * (1.0 + 1e-12),
        _ => true,
    };
    Ok(QuasiDiagResult {
        n,
        depth,
        delta,
        gamma: plan.gamma,
        family,
        flipped_columns: Vec::new(),
        offdiag_sums,
        offdiag_bounds,
        diag_values,
        norms_sq,
        measure_floors,
        eta_achieved,
        eta_certified,
        eta_schedule,
        rho_achieved,
        kappa_bound,
        jones,
        kappa_discrepancy,
        log,
    })
}

/// Block basis of depth-`n` index tree inside `T`'s space. With `δ > 0` the operator must
/// satisfy `|A[K,K]| ≥ δ`; columns with negative diagonal are flipped first and recorded.
pub fn quasi_diagonalize(
    t: &HaarOperator,
    n: u32,
    schedule: &Schedule,
    delta: f64,
) -> Result<QuasiDiagResult, QuasiDiagError> {
    if !t.is_square() {
        return Err(QuasiDiagError::Precondition("operator must be square".into()));
    }
    if !(delta >= 0.0) {
        return Err(QuasiDiagError::Precondition(format!("delta = {delta} must be nonnegative")));
    }
    if delta > 0.0 && !t.has_large_diagonal(delta) {
        return Err(QuasiDiagError::Precondition(format!("diagonal is not {delta}-large")));
    }
    let depth = t.depth();
    if n > depth {
        return Err(QuasiDiagError::ScheduleInfeasible { required: n.to_string(), available: depth });
    }
    let (normalized, sigma) = if delta > 0.0 {
        t.normalize_diagonal_signs()
    } else {
        (t.clone(), vec![1.0; t.cols()])
    };
    let past = Past {
        t: &normalized,
        adjoint: normalized.adjoint(),
        images: Vec::new(),
        co_images: Vec::new(),
        raw: vec![0.0; t.cols()],
    };
    let mut result = run(
        Construction { depth, n, delta, past: Some(past), fixed_weight: None, select_root: false },
        schedule,
    )?;
    result.flipped_columns =
        sigma.iter().enumerate().filter(|(_, s)| **s < 0.0).map(|(i, _)| i as u64 + 1).collect();
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Annihilation {
    pub construction: QuasiDiagResult,
    /// `P f = Σ_I ⟨f, b_I⟩ / ‖b_I‖² b_I` on `SL∞_N`.
    pub projection: HaarOperator,
    pub net: Vec<HaarVector>,
    /// Bound on the coefficients of unit vectors of `F` in the given basis.
    pub coefficient_bound: f64,
    pub grid_step: f64,
    /// `max ‖P f‖ / ‖f‖` over the net.
    pub net_ratio: f64,
    pub eta: f64,
}

/// Default per-step weight threshold `η / (2 sqrt(n+1))`: each coefficient of `Q f` on the
/// net is at most `τ`, and at most `n + 1` blocks overlap at a point.
pub fn annihilating_tau(n: u32, eta: f64) -> f64 {
    eta / (2.0 * f64::from(n + 1).sqrt())
}

/// An `η/2`-net of the unit sphere of `span(basis)`, as grid points of step
/// `η / Σ‖v_k‖` in coefficient space with norm in `[1 - η/2, 1 + η/2]`.
pub fn sphere_net(
    basis: &[HaarVector],
    eta: f64,
    budget: usize,
) -> Result<(Vec<HaarVector>, f64, f64), QuasiDiagError> {
    let d = basis.len();
    if d == 0 {
        return Ok((Vec::new(), 0.0, 0.0));
    }
    let depth = basis[0].depth();
    if basis.iter().any(|v| v.depth() != depth) {
        return Err(QuasiDiagError::Precondition("basis vectors differ in depth".into()));
    }
    let rows = tree_size(depth);
    let v = DMatrix::from_fn(rows, d, |i, k| basis[k].coeffs()[i]);
    let pinv = v
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| QuasiDiagError::Precondition(e.to_string()))?;
    if (&pinv * &v - DMatrix::<f64>::identity(d, d)).amax() > 1e-8 {
        return Err(QuasiDiagError::Precondition("basis vectors are linearly dependent".into()));
    }
    // |c_k| ≤ Σ_L |V⁺[k, L]| |f_L| and every |f_L| ≤ ‖f‖.
    let bound = (0..d).map(|k| pinv.row(k).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let norm_sum: f64 = basis.iter().map(sl_inf_norm).sum();
    let step = eta / norm_sum;
    let reach = (bound * (1.0 + eta / 2.0) / step).ceil() as i64;
    let per_axis = (2 * reach + 1) as f64;
    let total = per_axis.powi(d as i32);
    if total > budget as f64 {
        return Err(QuasiDiagError::NetTooLarge { required: format!("{total:.0}"), budget });
    }
    let mut net = Vec::new();
    let mut idx = vec![-reach; d];
    loop {
        let mut f = HaarVector::zeros(depth);
        for (k, &j) in idx.iter().enumerate() {
            f.add_scaled(j as f64 * step, &basis[k]);
        }
        let nf = sl_inf_norm(&f);
        if (1.0 - eta / 2.0..=1.0 + eta / 2.0).contains(&nf) {
            net.push(f);
        }
        let mut k = 0;
        loop {
            if k == d {
                return Ok((net, bound, step));
            }
            idx[k] += 1;
            if idx[k] <= reach {
                break;
            }
            idx[k] = -reach;
            k += 1;
        }
    }
}

/// Block basis whose blocks see almost nothing of a finite-dimensional subspace `F`,
/// together with the projection onto their span.
pub fn annihilating_basis(
    depth: u32,
    n: u32,
    basis: &[HaarVector],
    eta: f64,
    schedule: &Schedule,
    net_budget: usize,
) -> Result<Annihilation, QuasiDiagError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(QuasiDiagError::Precondition(format!("eta = {eta} must lie in (0, 1)")));
    }
    if n > depth {
        return Err(QuasiDiagError::ScheduleInfeasible { required: n.to_string(), available: depth });
    }
    let basis: Vec<HaarVector> = basis.iter().map(|v| v.padded(depth.max(v.depth())).truncated(depth)).collect();
    let (net, coefficient_bound, grid_step) = sphere_net(&basis, eta, net_budget)?;
    let weight = FrequencyWeight::from_functions(depth, &net, &[]);
    let construction = run(
        Construction { depth, n, delta: 0.0, past: None, fixed_weight: Some(weight), select_root: true },
        schedule,
    )?;
    let projection = projection_p(&construction.family);
    let net_ratio = net
        .iter()
        .map(|f| sl_inf_norm(&projection.apply(f)) / sl_inf_norm(f))
        .fold(0.0, f64::max);
    Ok(Annihilation { construction, projection, net, coefficient_bound, grid_step, net_ratio, eta })
}

/// Orders of the members of a family, keyed by collection: handy for logs and tests.
pub fn member_orders(family: &BlockBasisFamily) -> BTreeMap<u64, Vec<u64>> {
    family
        .collections()
        .iter()
        .enumerate()
        .map(|(i, c)| (i as u64 + 1, c.iter().map(DyadicInterval::order).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{random_operator, OperatorKind};

    fn adaptive(rho: f64, tau: f64) -> Schedule {
        Schedule::Adaptive(AdaptiveSchedule::constant(rho, tau))
    }

    #[test]
    fn schedule_values() {
        let s = paper_schedule(0, 1.0, 1.0).unwrap();
        assert_eq!(s.depth, Magnitude::Exact(BigUint::zero()));
        assert_eq!(s.feasible_depth(), Some(0));
        let s = paper_schedule(1, 1.0, 1.0).unwrap();
        assert_eq!(s.levels[1], Magnitude::Exact(BigUint::from(262_145u32)));
        assert!(matches!(s.levels[2], Magnitude::Exact(ref v) if v.bits() > 500_000));
        assert_eq!(s.feasible_depth(), None);
        assert_eq!(s.rho[2] / s.rho[1], 0.5);
        let s = paper_schedule(2, 1.0, 1.0).unwrap();
        assert!(matches!(s.levels[3], Magnitude::Log2AtLeast(_)));
        assert_eq!(s.levels[4], Magnitude::Unbounded);
    }

    #[test]
    fn paper_mode_at_n_zero() {
        let t = HaarOperator::identity(0);
        let s = Schedule::Paper(paper_schedule(0, 1.0, 0.5).unwrap());
        let r = quasi_diagonalize(&t, 0, &s, 1.0).unwrap();
        assert_eq!(r.family, BlockBasisFamily::identity(0));
        assert_eq!(r.offdiag_sums, vec![0.0]);
        assert_eq!(r.diag_values, vec![1.0]);
        let big = Schedule::Paper(paper_schedule(1, 1.0, 0.5).unwrap());
        assert!(matches!(
            quasi_diagonalize(&HaarOperator::identity(4), 1, &big, 1.0),
            Err(QuasiDiagError::ScheduleInfeasible { .. })
        ));
    }

    #[test]
    fn identity_is_diagonal() {
        let t = HaarOperator::identity(6);
        let r = quasi_diagonalize(&t, 2, &adaptive(0.1, 0.05), 1.0).unwrap();
        assert!(r.offdiag_sums.iter().all(|&o| o == 0.0));
        assert_eq!(r.diag_values, r.norms_sq);
        assert!(r.jones.is_ok());
        // frequencies strictly separate
        for w in r.log.windows(2) {
            assert!(w[1].min_level > w[0].min_level);
        }
    }

    #[test]
    fn multiplier_keeps_large_diagonal() {
        let diag: Vec<f64> =
            (0..tree_size(5)).map(|i| if i % 3 == 0 { -0.4 } else { 0.9 }).collect();
        let t = HaarOperator::multiplier(5, &diag);
        let r = quasi_diagonalize(&t, 1, &adaptive(0.1, 0.05), 0.4).unwrap();
        assert!(r.diagonal_holds());
        assert!(r.offdiag_sums.iter().all(|&o| o == 0.0));
        assert!(!r.flipped_columns.is_empty());
    }

    #[test]
    fn diag_dominant_run() {
        let t = random_operator(10, OperatorKind::DiagDominant { delta: 0.5, noise: 0.02 }, 1);
        let r = quasi_diagonalize(&t, 2, &adaptive(0.1, 0.05), 0.5).unwrap();
        assert!(r.diagonal_holds());
        assert!(r.offdiag_holds(r.eta_achieved * (1.0 + 1e-12)));
        assert!(r.jones.is_ok());
        for (o, b) in r.offdiag_sums.iter().zip(&r.offdiag_bounds) {
            assert!(*o <= b * (1.0 + 1e-9) + 1e-15);
        }
        for f in &r.measure_floors {
            assert!(*f <= 1.0);
        }
        for w in r.log.windows(2) {
            assert!(w[1].min_level > w[0].min_level);
        }
    }

    #[test]
    fn signs_two_members() {
        let mut t = HaarOperator::identity(1);
        // ⟨r_{K0}, h_{K1}⟩ = A[K1, K0] |K1| = c > 0, the reverse term vanishes
        t.set(1, 0, 0.5);
        let coll: IntervalCollection =
            [DyadicInterval::unit(), DyadicInterval::new(1, 1).unwrap()].into_iter().collect();
        let s = choose_signs(&coll, &t);
        assert_eq!(s.signs, vec![1, 1]);
        assert_eq!(s.x_value, 0.25);
    }

    #[test]
    fn derandomized_is_nonnegative() {
        for seed in 0..10 {
            let t = random_operator(4, OperatorKind::DiagDominant { delta: 0.3, noise: 0.8 }, seed);
            let coll: IntervalCollection = DyadicInterval::at_level(4).take(12).collect();
            let d = derandomized_signs(&coll, &t);
            let e = exhaustive_signs(&coll, &t);
            assert!(d.x_value >= -1e-15);
            assert!(e.x_value >= d.x_value - 1e-12);
        }
    }

    #[test]
    fn annihilates_rademacher() {
        let f = crate::haar::rademacher(8, 8);
        let s = Schedule::Adaptive(AdaptiveSchedule::constant(0.1, annihilating_tau(1, 0.25)));
        let a = annihilating_basis(8, 1, &[f], 0.25, &s, 10_000).unwrap();
        assert_eq!(a.net.len(), 2);
        assert!(a.net_ratio <= 0.25);
        assert!(a.construction.jones.is_ok());
    }

    #[test]
    fn zero_subspace_matches_plain_run() {
        let s = adaptive(0.1, 0.05);
        let a = annihilating_basis(5, 1, &[], 0.5, &s, 10).unwrap();
        let q = quasi_diagonalize(&HaarOperator::zero(5), 1, &s, 0.0).unwrap();
        assert_eq!(a.construction.family, q.family);
    }
}
