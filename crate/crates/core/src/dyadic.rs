//! Dyadic intervals, leaf sets and nested families of leaf sets.
//!
//! A dyadic interval at level `n` and position `k` is `[(k-1)2^-n, k 2^-n)`.
//! Point sets built from finitely many dyadic intervals are stored as
//! [`LeafSet`]s: bitsets over the `2^M` intervals of a fixed resolution `M`.
//! All measures are exact dyadic rationals.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest level the crate addresses. Positions and orders stay inside `u64`.
pub const MAX_LEVEL: u32 = 62;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DyadicError {
    #[error("position {position} is outside [1, 2^{level}]")]
    BadPosition { level: u32, position: u64 },
    #[error("level {0} exceeds the supported maximum")]
    LevelTooLarge(u32),
    #[error("order index must be positive")]
    ZeroOrder,
    #[error("leaf sets have different resolutions ({0} and {1})")]
    ResolutionMismatch(u32, u32),
    #[error("interval at level {level} is finer than resolution {resolution}")]
    TooFine { level: u32, resolution: u32 },
    #[error("sets {0} and {1} are neither nested nor disjoint")]
    NotNested(usize, usize),
    #[error("leaf {leaf} out of range for resolution {resolution}")]
    LeafOutOfRange { leaf: u64, resolution: u32 },
}

/// Number of intervals in `D^n`, i.e. `2^{n+1} - 1`.
pub fn tree_size(depth: u32) -> usize {
    (1usize << (depth + 1)) - 1
}

/// `2^-level` as a float (exact).
pub fn pow2_neg(level: u32) -> f64 {
    f64::from_bits(((1023 - level as i64) as u64) << 52)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicInterval {
    #[serde(rename = "n")]
    level: u32,
    #[serde(rename = "k")]
    position: u64,
}

impl PartialOrd for DyadicInterval {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DyadicInterval {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order().cmp(&other.order())
    }
}

impl fmt::Display for DyadicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}/{n}, {}/{n})", self.position - 1, self.position, n = 1u64 << self.level)
    }
}

impl DyadicInterval {
    pub fn new(level: u32, position: u64) -> Result<Self, DyadicError> {
        if level > MAX_LEVEL {
            return Err(DyadicError::LevelTooLarge(level));
        }
        if position == 0 || position > (1u64 << level) {
            return Err(DyadicError::BadPosition { level, position });
        }
        Ok(DyadicInterval { level, position })
    }

    /// `[0, 1)`.
    pub const fn unit() -> Self {
        DyadicInterval { level: 0, position: 1 }
    }

    pub fn from_order(order: u64) -> Result<Self, DyadicError> {
        if order == 0 {
            return Err(DyadicError::ZeroOrder);
        }
        let level = 63 - order.leading_zeros();
        Ok(DyadicInterval { level, position: order - (1u64 << level) + 1 })
    }

    /// Inverse of [`DyadicInterval::index`].
    pub fn from_index(index: usize) -> Self {
        Self::from_order(index as u64 + 1).expect("index + 1 is positive")
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// `2^level - 1 + position`.
    pub fn order(&self) -> u64 {
        (1u64 << self.level) - 1 + self.position
    }

    /// Zero-based slot of the interval in coefficient arrays (`order - 1`).
    pub fn index(&self) -> usize {
        (self.order() - 1) as usize
    }

    pub fn measure(&self) -> f64 {
        pow2_neg(self.level)
    }

    pub fn measure_exact(&self) -> Dyadic {
        Dyadic::new(1, self.level)
    }

    pub fn left_end(&self) -> f64 {
        (self.position - 1) as f64 * self.measure()
    }

    pub fn parent(&self) -> Option<Self> {
        (self.level > 0).then(|| DyadicInterval {
            level: self.level - 1,
            position: self.position.div_ceil(2),
        })
    }

    pub fn left_child(&self) -> Self {
        DyadicInterval { level: self.level + 1, position: 2 * self.position - 1 }
    }

    pub fn right_child(&self) -> Self {
        DyadicInterval { level: self.level + 1, position: 2 * self.position }
    }

    pub fn is_left_child(&self) -> bool {
        self.level > 0 && self.position % 2 == 1
    }

    /// Ancestor at a coarser (or equal) level.
    pub fn ancestor_at(&self, level: u32) -> Option<Self> {
        (level <= self.level).then(|| DyadicInterval {
            level,
            position: ((self.position - 1) >> (self.level - level)) + 1,
        })
    }

    /// `other ⊆ self`.
    pub fn contains(&self, other: &Self) -> bool {
        other.level >= self.level
            && (other.position - 1) >> (other.level - self.level) == self.position - 1
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        !self.contains(other) && !other.contains(self)
    }

    /// Half-open range of zero-based leaf indices covered at resolution `m`.
    pub fn leaf_range(&self, m: u32) -> Result<(u64, u64), DyadicError> {
        if self.level > m {
            return Err(DyadicError::TooFine { level: self.level, resolution: m });
        }
        let w = 1u64 << (m - self.level);
        Ok(((self.position - 1) * w, self.position * w))
    }

    /// The `2^(level - self.level)` subintervals at `level` in left-to-right order.
    pub fn descendants_at(&self, level: u32) -> impl Iterator<Item = DyadicInterval> {
        let (lo, hi) = if level >= self.level {
            let w = 1u64 << (level - self.level);
            ((self.position - 1) * w + 1, self.position * w + 1)
        } else {
            (1, 1)
        };
        (lo..hi).map(move |position| DyadicInterval { level, position })
    }

    /// All intervals of `D^depth` in order.
    pub fn all_upto(depth: u32) -> impl Iterator<Item = DyadicInterval> {
        (0..tree_size(depth)).map(Self::from_index)
    }

    /// The intervals of `D_level` in order.
    pub fn at_level(level: u32) -> impl Iterator<Item = DyadicInterval> {
        (1..=(1u64 << level)).map(move |position| DyadicInterval { level, position })
    }
}

/// `2^level - 1 + position`.
pub fn order_of(interval: &DyadicInterval) -> u64 {
    interval.order()
}

/// Exact nonnegative dyadic rational `num / 2^shift`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Dyadic {
    pub num: u64,
    pub shift: u32,
}

impl Dyadic {
    pub fn new(num: u64, shift: u32) -> Self {
        Dyadic { num, shift }
    }

    pub fn zero() -> Self {
        Dyadic { num: 0, shift: 0 }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 * pow2_neg(self.shift)
    }

    fn widened(self, shift: u32) -> u128 {
        (self.num as u128) << (shift - self.shift)
    }

    pub fn add(self, other: Dyadic) -> Dyadic {
        let s = self.shift.max(other.shift);
        let sum = self.widened(s) + other.widened(s);
        Dyadic { num: u64::try_from(sum).expect("dyadic sum overflow"), shift: s }
    }

    /// Ratio `self / other` as an exact fraction.
    pub fn ratio(self, other: Dyadic) -> Ratio<u128> {
        let s = self.shift.max(other.shift);
        Ratio::new(self.widened(s), other.widened(s))
    }
}

impl PartialEq for Dyadic {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Dyadic {}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        let s = self.shift.max(other.shift);
        self.widened(s).cmp(&other.widened(s))
    }
}

/// A finite union of dyadic intervals of one resolution, as a bitset over its `2^M` leaves.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LeafSet {
    resolution: u32,
    words: Vec<u64>,
}

const WORD: u64 = 64;

impl LeafSet {
    pub fn empty(resolution: u32) -> Self {
        let leaves = 1u64 << resolution;
        LeafSet { resolution, words: vec![0; leaves.div_ceil(WORD) as usize] }
    }

    pub fn full(resolution: u32) -> Self {
        let mut s = Self::empty(resolution);
        s.insert_range(0, 1u64 << resolution);
        s
    }

    pub fn from_interval(interval: &DyadicInterval, resolution: u32) -> Result<Self, DyadicError> {
        let mut s = Self::empty(resolution);
        let (lo, hi) = interval.leaf_range(resolution)?;
        s.insert_range(lo, hi);
        Ok(s)
    }

    pub fn from_intervals<'a>(
        intervals: impl IntoIterator<Item = &'a DyadicInterval>,
        resolution: u32,
    ) -> Result<Self, DyadicError> {
        let mut s = Self::empty(resolution);
        for i in intervals {
            let (lo, hi) = i.leaf_range(resolution)?;
            s.insert_range(lo, hi);
        }
        Ok(s)
    }

    /// Builds a set from one-based leaf positions.
    pub fn from_positions(resolution: u32, positions: &[u64]) -> Result<Self, DyadicError> {
        let mut s = Self::empty(resolution);
        for &p in positions {
            if p == 0 || p > 1u64 << resolution {
                return Err(DyadicError::LeafOutOfRange { leaf: p, resolution });
            }
            s.insert_range(p - 1, p);
        }
        Ok(s)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn leaf_count(&self) -> u64 {
        1u64 << self.resolution
    }

    fn insert_range(&mut self, lo: u64, hi: u64) {
        let mut i = lo;
        while i < hi {
            let w = (i / WORD) as usize;
            let b = i % WORD;
            let span = (WORD - b).min(hi - i);
            let mask = if span == WORD { u64::MAX } else { ((1u64 << span) - 1) << b };
            self.words[w] |= mask;
            i += span;
        }
    }

    pub fn contains_leaf(&self, leaf: u64) -> bool {
        leaf < self.leaf_count() && self.words[(leaf / WORD) as usize] >> (leaf % WORD) & 1 == 1
    }

    /// Zero-based indices of member leaves.
    pub fn leaves(&self) -> impl Iterator<Item = u64> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &bits)| {
            let mut b = bits;
            std::iter::from_fn(move || {
                if b == 0 {
                    return None;
                }
                let t = b.trailing_zeros() as u64;
                b &= b - 1;
                Some(w as u64 * WORD + t)
            })
        })
    }

    /// Number of member leaves.
    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn measure(&self) -> Dyadic {
        Dyadic::new(self.count(), self.resolution)
    }

    pub fn measure_f64(&self) -> f64 {
        self.measure().to_f64()
    }

    fn check_same(&self, other: &LeafSet) -> Result<(), DyadicError> {
        if self.resolution != other.resolution {
            return Err(DyadicError::ResolutionMismatch(self.resolution, other.resolution));
        }
        Ok(())
    }

    fn zip(&self, other: &LeafSet, f: impl Fn(u64, u64) -> u64) -> LeafSet {
        assert_eq!(self.resolution, other.resolution, "leaf set resolution mismatch");
        LeafSet {
            resolution: self.resolution,
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Panics on resolution mismatch; see [`LeafSet::refine`].
    pub fn union(&self, other: &LeafSet) -> LeafSet {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &LeafSet) -> LeafSet {
        self.zip(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &LeafSet) -> LeafSet {
        self.zip(other, |a, b| a & !b)
    }

    pub fn complement(&self) -> LeafSet {
        let mut full = LeafSet::full(self.resolution);
        for (w, s) in full.words.iter_mut().zip(&self.words) {
            *w &= !s;
        }
        full
    }

    pub fn union_with(&mut self, other: &LeafSet) {
        assert_eq!(self.resolution, other.resolution, "leaf set resolution mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn intersection_count(&self, other: &LeafSet) -> u64 {
        assert_eq!(self.resolution, other.resolution, "leaf set resolution mismatch");
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum()
    }

    pub fn try_intersection_count(&self, other: &LeafSet) -> Result<u64, DyadicError> {
        self.check_same(other)?;
        Ok(self.intersection_count(other))
    }

    /// `self ⊆ other`.
    pub fn is_subset(&self, other: &LeafSet) -> bool {
        assert_eq!(self.resolution, other.resolution, "leaf set resolution mismatch");
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn is_disjoint(&self, other: &LeafSet) -> bool {
        self.intersection_count(other) == 0
    }

    pub fn intersects(&self, other: &LeafSet) -> bool {
        !self.is_disjoint(other)
    }

    /// Same point set at a finer resolution.
    pub fn refine(&self, resolution: u32) -> Result<LeafSet, DyadicError> {
        if resolution < self.resolution {
            return Err(DyadicError::TooFine { level: self.resolution, resolution });
        }
        let d = resolution - self.resolution;
        let mut out = LeafSet::empty(resolution);
        for leaf in self.leaves() {
            out.insert_range(leaf << d, (leaf + 1) << d);
        }
        Ok(out)
    }

    /// Left (or right) halves of the member leaves, one resolution finer.
    pub fn halves(&self, left: bool) -> LeafSet {
        let mut out = LeafSet::empty(self.resolution + 1);
        for leaf in self.leaves() {
            let l = 2 * leaf + u64::from(!left);
            out.insert_range(l, l + 1);
        }
        out
    }

    /// One-based positions of member leaves.
    pub fn positions(&self) -> Vec<u64> {
        self.leaves().map(|l| l + 1).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LeafSetRepr {
    resolution: u32,
    leaves: Vec<u64>,
}

impl Serialize for LeafSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LeafSetRepr { resolution: self.resolution, leaves: self.positions() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LeafSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = LeafSetRepr::deserialize(d)?;
        if r.resolution > 30 {
            return Err(serde::de::Error::custom("leaf set resolution above 30"));
        }
        LeafSet::from_positions(r.resolution, &r.leaves).map_err(serde::de::Error::custom)
    }
}

/// A finite set of dyadic intervals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntervalCollection {
    items: BTreeSet<DyadicInterval>,
}

impl IntervalCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, i: DyadicInterval) -> bool {
        self.items.insert(i)
    }

    pub fn contains(&self, i: &DyadicInterval) -> bool {
        self.items.contains(i)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Members in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = &DyadicInterval> {
        self.items.iter()
    }

    pub fn max_level(&self) -> Option<u32> {
        self.items.iter().map(|i| i.level()).max()
    }

    pub fn min_level(&self) -> Option<u32> {
        self.items.iter().map(|i| i.level()).min()
    }

    pub fn extend(&mut self, other: &IntervalCollection) {
        self.items.extend(other.items.iter().copied());
    }

    /// Sum of member measures, exact.
    pub fn total_measure(&self) -> Dyadic {
        let res = self.max_level().unwrap_or(0);
        Dyadic::new(self.items.iter().map(|i| 1u64 << (res - i.level())).sum(), res)
    }

    pub fn pairwise_disjoint(&self) -> bool {
        let v: Vec<_> = self.items.iter().collect();
        v.iter().enumerate().all(|(a, x)| v[a + 1..].iter().all(|y| x.is_disjoint(y)))
    }

    /// Union of the members at the given resolution.
    pub fn point_set_at(&self, resolution: u32) -> Result<LeafSet, DyadicError> {
        LeafSet::from_intervals(self.items.iter(), resolution)
    }

    /// Union of the members at the maximum member level.
    pub fn point_set(&self) -> LeafSet {
        self.point_set_at(self.max_level().unwrap_or(0)).expect("members are at most max level")
    }
}

impl FromIterator<DyadicInterval> for IntervalCollection {
    fn from_iter<T: IntoIterator<Item = DyadicInterval>>(iter: T) -> Self {
        IntervalCollection { items: iter.into_iter().collect() }
    }
}

/// Sets at a shared resolution, pairwise nested or disjoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NestedFamily {
    resolution: u32,
    sets: Vec<LeafSet>,
}

impl NestedFamily {
    pub fn new(resolution: u32, sets: Vec<LeafSet>) -> Result<Self, DyadicError> {
        for s in &sets {
            if s.resolution != resolution {
                return Err(DyadicError::ResolutionMismatch(resolution, s.resolution));
            }
        }
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                let (x, y) = (&sets[a], &sets[b]);
                let common = x.intersection_count(y);
                if common != 0 && common != x.count() && common != y.count() {
                    return Err(DyadicError::NotNested(a, b));
                }
            }
        }
        Ok(NestedFamily { resolution, sets })
    }

    pub fn empty(resolution: u32) -> Self {
        NestedFamily { resolution, sets: Vec::new() }
    }

    /// Leaf sets of the given intervals, in the given order.
    pub fn from_intervals<'a>(
        intervals: impl IntoIterator<Item = &'a DyadicInterval>,
        resolution: u32,
    ) -> Result<Self, DyadicError> {
        let sets = intervals
            .into_iter()
            .map(|i| LeafSet::from_interval(i, resolution))
            .collect::<Result<Vec<_>, _>>()?;
        NestedFamily::new(resolution, sets)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn sets(&self) -> &[LeafSet] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Subfamily at the given indices (order kept).
    pub fn select(&self, indices: &[usize]) -> NestedFamily {
        NestedFamily {
            resolution: self.resolution,
            sets: indices.iter().map(|&i| self.sets[i].clone()).collect(),
        }
    }

    /// Union of all members.
    pub fn point_set(&self) -> LeafSet {
        let mut u = LeafSet::empty(self.resolution);
        for s in &self.sets {
            u.union_with(s);
        }
        u
    }

    /// Generation index of every member: the number of distinct strict supersets in the family.
    pub fn generation_indices(&self) -> Vec<usize> {
        let counts: Vec<u64> = self.sets.iter().map(LeafSet::count).collect();
        (0..self.sets.len())
            .map(|i| {
                let mut supers: Vec<usize> = (0..self.sets.len())
                    .filter(|&j| counts[j] > counts[i] && self.sets[i].is_subset(&self.sets[j]))
                    .collect();
                supers.sort_by_key(|&j| counts[j]);
                supers.dedup_by(|a, b| self.sets[*a] == self.sets[*b]);
                supers.len()
            })
            .collect()
    }

    /// Member indices grouped by generation.
    pub fn generation_members(&self) -> Vec<Vec<usize>> {
        let idx = self.generation_indices();
        let depth = idx.iter().map(|g| g + 1).max().unwrap_or(0);
        let mut out = vec![Vec::new(); depth];
        for (i, g) in idx.into_iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// Point set `G_k` of every generation.
    pub fn generation_point_sets(&self) -> Vec<LeafSet> {
        self.generation_members()
            .iter()
            .map(|members| {
                let mut u = LeafSet::empty(self.resolution);
                for &i in members {
                    u.union_with(&self.sets[i]);
                }
                u
            })
            .collect()
    }

    /// Indices of members contained in `root`.
    pub fn members_within(&self, root: &LeafSet) -> Vec<usize> {
        (0..self.sets.len()).filter(|&i| self.sets[i].is_subset(root)).collect()
    }
}

#[derive(Deserialize)]
struct NestedFamilyRepr {
    resolution: u32,
    sets: Vec<LeafSet>,
}

impl<'de> Deserialize<'de> for NestedFamily {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = NestedFamilyRepr::deserialize(d)?;
        NestedFamily::new(r.resolution, r.sets).map_err(serde::de::Error::custom)
    }
}

/// `[0,1)` plus every finer interval down to `depth`, each kept with probability `keep`.
pub fn random_tree_family(depth: u32, keep: f64, rng: &mut impl Rng) -> NestedFamily {
    let ivs: Vec<DyadicInterval> = DyadicInterval::all_upto(depth)
        .filter(|i| i.level() == 0 || rng.random::<f64>() < keep)
        .collect();
    NestedFamily::from_intervals(&ivs, depth).expect("dyadic intervals are nested or disjoint")
}

/// Generations `G_0(X), G_1(X), ...` of a nested family; empty input gives an empty sequence.
pub fn generations(family: &NestedFamily) -> Vec<NestedFamily> {
    family.generation_members().iter().map(|m| family.select(m)).collect()
}

/// Exact Carleson constant `sup_N |N|^-1 Σ_{M ⊆ N} |M|`; zero for the empty family.
pub fn carleson_constant_exact(family: &NestedFamily) -> Ratio<u64> {
    let sets = family.sets();
    let counts: Vec<u64> = sets.iter().map(LeafSet::count).collect();
    let mut best = Ratio::from_integer(0u64);
    for (i, n) in sets.iter().enumerate() {
        if counts[i] == 0 {
            continue;
        }
        let stacked: u64 = (0..sets.len())
            .filter(|&j| counts[j] <= counts[i] && sets[j].is_subset(n))
            .map(|j| counts[j])
            .sum();
        let r = Ratio::new(stacked, counts[i]);
        if r > best {
            best = r;
        }
    }
    best
}

pub fn carleson_constant(family: &NestedFamily) -> f64 {
    let r = carleson_constant_exact(family);
    *r.numer() as f64 / *r.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(n: u32, k: u64) -> DyadicInterval {
        DyadicInterval::new(n, k).unwrap()
    }

    #[test]
    fn order_examples() {
        assert_eq!(order_of(&iv(0, 1)), 1);
        assert_eq!(order_of(&iv(1, 2)), 3);
        // [1/4, 1/2) is level 2, position 2.
        assert_eq!(order_of(&iv(2, 2)), 5);
    }

    #[test]
    fn order_is_a_bijection_up_to_depth_12() {
        for depth in 0..=12 {
            let mut seen = vec![false; tree_size(depth)];
            for level in 0..=depth {
                for i in DyadicInterval::at_level(level) {
                    let o = i.order() as usize;
                    assert!(!seen[o - 1]);
                    seen[o - 1] = true;
                    assert_eq!(DyadicInterval::from_order(o as u64).unwrap(), i);
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn containment_matches_ceiling_rule() {
        for a in DyadicInterval::all_upto(5) {
            for b in DyadicInterval::all_upto(5) {
                let rule = a.level() >= b.level()
                    && a.position().div_ceil(1u64 << (a.level() - b.level())) == b.position();
                assert_eq!(b.contains(&a), rule, "{a} in {b}");
                let (la, ha) = (a.left_end(), a.left_end() + a.measure());
                let (lb, hb) = (b.left_end(), b.left_end() + b.measure());
                assert_eq!(b.contains(&a), la >= lb && ha <= hb);
                assert_eq!(a.is_disjoint(&b), ha <= lb || hb <= la);
            }
        }
    }

    #[test]
    fn ancestors_and_children() {
        let i = iv(3, 6);
        assert_eq!(i.parent(), Some(iv(2, 3)));
        assert_eq!(i.ancestor_at(1), Some(iv(1, 2)));
        assert_eq!(i.ancestor_at(3), Some(i));
        assert_eq!(i.ancestor_at(4), None);
        assert_eq!(iv(2, 3).left_child(), iv(3, 5));
        assert!(iv(3, 5).is_left_child());
        assert!(!i.is_left_child());
    }

    #[test]
    fn leaf_set_basics() {
        let a = LeafSet::from_interval(&iv(1, 1), 3).unwrap();
        assert_eq!(a.count(), 4);
        assert_eq!(a.measure(), Dyadic::new(1, 1));
        let b = LeafSet::from_interval(&iv(2, 2), 3).unwrap();
        assert!(b.is_subset(&a));
        assert_eq!(a.difference(&b).count(), 2);
        assert_eq!(a.complement().count(), 4);
        let r = b.refine(7).unwrap();
        assert_eq!(r.measure(), b.measure());
        assert_eq!(b.halves(true).positions(), vec![5, 7]);
    }

    #[test]
    fn leaf_set_wide_ranges() {
        let s = LeafSet::from_interval(&iv(2, 3), 9).unwrap();
        assert_eq!(s.count(), 128);
        assert_eq!(s.leaves().next(), Some(256));
        assert_eq!(s.leaves().last(), Some(383));
    }

    #[test]
    fn generations_examples() {
        let x = NestedFamily::from_intervals(&[iv(0, 1), iv(1, 1), iv(1, 2)], 2).unwrap();
        let g = generations(&x);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].len(), 1);
        assert_eq!(g[1].len(), 2);
        assert!(generations(&NestedFamily::empty(3)).is_empty());

        let full: Vec<_> = DyadicInterval::all_upto(2).collect();
        let x = NestedFamily::from_intervals(&full, 2).unwrap();
        let g = generations(&x);
        assert_eq!(g.len(), 3);
        for (lvl, gen) in g.iter().enumerate() {
            assert_eq!(gen.len(), 1 << lvl);
        }
    }

    #[test]
    fn rejects_overlapping_sets() {
        let a = LeafSet::from_positions(2, &[1, 2]).unwrap();
        let b = LeafSet::from_positions(2, &[2, 3]).unwrap();
        assert_eq!(NestedFamily::new(2, vec![a, b]), Err(DyadicError::NotNested(0, 1)));
    }

    #[test]
    fn carleson_examples() {
        let x = NestedFamily::from_intervals(&[iv(0, 1)], 0).unwrap();
        assert_eq!(carleson_constant(&x), 1.0);
        let x = NestedFamily::from_intervals(&[iv(0, 1), iv(1, 1), iv(2, 1)], 2).unwrap();
        assert_eq!(carleson_constant_exact(&x), Ratio::new(7, 4));
        let full: Vec<_> = DyadicInterval::all_upto(3).collect();
        let x = NestedFamily::from_intervals(&full, 3).unwrap();
        assert_eq!(carleson_constant(&x), 4.0);
        assert_eq!(carleson_constant(&NestedFamily::empty(2)), 0.0);
    }

    #[test]
    fn duplicates_share_a_generation() {
        let a = LeafSet::from_positions(2, &[1, 2]).unwrap();
        let b = LeafSet::from_positions(2, &[1]).unwrap();
        let x = NestedFamily::new(2, vec![a.clone(), a, b]).unwrap();
        assert_eq!(x.generation_indices(), vec![0, 0, 1]);
    }

    #[test]
    fn json_shapes() {
        let i = iv(2, 3);
        assert_eq!(serde_json::to_string(&i).unwrap(), r#"{"n":2,"k":3}"#);
        let s = LeafSet::from_positions(3, &[2, 5]).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"resolution":3,"leaves":[2,5]}"#);
        let back: LeafSet = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }
}
