//! Block-basis families indexed by a dyadic tree, their compatibility
//! conditions, the embedding/projection pair they induce, and composition.
//!
//! A family assigns to every `I ∈ D^n` a collection `ℬ_I ⊆ D^N` of pairwise
//! disjoint intervals with signs; `b_I = Σ_{K ∈ ℬ_I} ε_K h_K` and
//! `B_I = ⋃ ℬ_I`. The four conditions checked here:
//!
//! - J1: all members are pairwise nested or disjoint;
//! - J2: each `ℬ_I` is nonempty with disjoint members, and distinct `I` share no member;
//! - J3: `B_{I0} ∩ B_{I1} = ∅` for disjoint `I0, I1`, and `B_{I0} ⊆ B_I` for `I0 ⊆ I`;
//! - J4: `|K ∩ B_{I0}| / |K| ≥ κ^-1 |B_{I0}| / |B_I|` for `I0 ⊆ I`, `K ∈ ℬ_I`.

use std::collections::{BTreeMap, HashMap};

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dyadic::{tree_size, DyadicError, DyadicInterval, IntervalCollection, LeafSet};
use crate::haar::HaarVector;
use crate::operators::HaarOperator;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JonesError {
    #[error("expected {expected} collections for outer depth {n}, got {got}")]
    CollectionCount { n: u32, expected: usize, got: usize },
    #[error("member {member} is finer than the inner depth {depth}")]
    MemberTooFine { member: DyadicInterval, depth: u32 },
    #[error("outer member {member} of collection {label} is not a point set of the inner family")]
    Mismatch { label: u64, member: usize },
    #[error("inner family has two labels with the same point set ({0} and {1})")]
    AmbiguousInner(u64, u64),
    #[error("outer labels range over depth {outer}, inner family has outer depth {inner}")]
    DepthMismatch { outer: u32, inner: u32 },
    #[error(transparent)]
    Dyadic(#[from] DyadicError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockBasisFamily {
    inner_depth: u32,
    outer_depth: u32,
    collections: Vec<IntervalCollection>,
    /// Keyed by the order of the member; absent means `+1`.
    signs: BTreeMap<u64, i8>,
}

impl BlockBasisFamily {
    pub fn new(
        inner_depth: u32,
        outer_depth: u32,
        collections: Vec<IntervalCollection>,
    ) -> Result<Self, JonesError> {
        if collections.len() != tree_size(outer_depth) {
            return Err(JonesError::CollectionCount {
                n: outer_depth,
                expected: tree_size(outer_depth),
                got: collections.len(),
            });
        }
        for c in &collections {
            if let Some(k) = c.iter().find(|k| k.level() > inner_depth) {
                return Err(JonesError::MemberTooFine { member: *k, depth: inner_depth });
            }
        }
        Ok(BlockBasisFamily { inner_depth, outer_depth, collections, signs: BTreeMap::new() })
    }

    /// `ℬ_I = {I}` on `D^n`.
    pub fn identity(n: u32) -> Self {
        let collections = DyadicInterval::all_upto(n).map(|i| [i].into_iter().collect()).collect();
        BlockBasisFamily { inner_depth: n, outer_depth: n, collections, signs: BTreeMap::new() }
    }

    pub fn with_signs(mut self, signs: impl IntoIterator<Item = (DyadicInterval, i8)>) -> Self {
        for (k, s) in signs {
            self.set_sign(k, s);
        }
        self
    }

    pub fn set_sign(&mut self, k: DyadicInterval, s: i8) {
        if s < 0 {
            self.signs.insert(k.order(), -1);
        } else {
            self.signs.remove(&k.order());
        }
    }

    pub fn sign(&self, k: &DyadicInterval) -> f64 {
        match self.signs.get(&k.order()) {
            Some(s) if *s < 0 => -1.0,
            _ => 1.0,
        }
    }

    /// `N`: depth of the ambient space of the blocks.
    pub fn inner_depth(&self) -> u32 {
        self.inner_depth
    }

    /// `n`: depth of the index tree.
    pub fn outer_depth(&self) -> u32 {
        self.outer_depth
    }

    pub fn collection(&self, i: &DyadicInterval) -> &IntervalCollection {
        &self.collections[i.index()]
    }

    pub fn collections(&self) -> &[IntervalCollection] {
        &self.collections
    }

    /// `(I, K)` for every member `K ∈ ℬ_I`.
    pub fn members(&self) -> impl Iterator<Item = (DyadicInterval, DyadicInterval)> + '_ {
        self.collections
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.iter().map(move |k| (DyadicInterval::from_index(i), *k)))
    }

    /// `b_I = Σ_{K ∈ ℬ_I} ε_K h_K`.
    pub fn block_vector(&self, i: &DyadicInterval) -> HaarVector {
        let mut v = HaarVector::zeros(self.inner_depth);
        for k in self.collection(i).iter() {
            v.set(k, self.sign(k));
        }
        v
    }

    /// `‖b_I‖_2^2 = |B_I|`.
    pub fn norm_sq(&self, i: &DyadicInterval) -> f64 {
        self.collection(i).total_measure().to_f64()
    }

    pub fn point_set(&self, i: &DyadicInterval, resolution: u32) -> LeafSet {
        self.collection(i).point_set_at(resolution).expect("members are at most the inner depth")
    }

    /// `B_I` for every `I`, indexed by order - 1.
    pub fn point_sets(&self, resolution: u32) -> Vec<LeafSet> {
        DyadicInterval::all_upto(self.outer_depth).map(|i| self.point_set(&i, resolution)).collect()
    }

    pub fn as_set_family(&self, resolution: u32) -> SetFamily {
        let collections = self
            .collections
            .iter()
            .map(|c| {
                c.iter()
                    .map(|k| LeafSet::from_interval(k, resolution).expect("resolution covers members"))
                    .collect()
            })
            .collect();
        SetFamily { outer_depth: self.outer_depth, resolution, collections }
    }
}

#[derive(Serialize, Deserialize)]
struct FamilyRepr {
    n: u32,
    #[serde(rename = "N")]
    big_n: u32,
    collections: BTreeMap<u64, Vec<DyadicInterval>>,
    #[serde(default)]
    signs: BTreeMap<u64, i8>,
}

impl Serialize for BlockBasisFamily {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let collections = self
            .collections
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u64 + 1, c.iter().copied().collect()))
            .collect();
        let signs = self
            .members()
            .map(|(_, k)| (k.order(), if self.sign(&k) < 0.0 { -1 } else { 1 }))
            .collect();
        FamilyRepr { n: self.outer_depth, big_n: self.inner_depth, collections, signs }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BlockBasisFamily {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = FamilyRepr::deserialize(d)?;
        if r.n > 20 || r.big_n > 30 {
            return Err(D::Error::custom("family depth out of range"));
        }
        let mut collections = vec![IntervalCollection::new(); tree_size(r.n)];
        for (order, members) in r.collections {
            if order == 0 || order as usize > collections.len() {
                return Err(D::Error::custom(format!("collection index {order} out of range")));
            }
            for k in members {
                DyadicInterval::new(k.level(), k.position()).map_err(D::Error::custom)?;
                collections[order as usize - 1].insert(k);
            }
        }
        let mut f = BlockBasisFamily::new(r.big_n, r.n, collections).map_err(D::Error::custom)?;
        for (order, s) in r.signs {
            let k = DyadicInterval::from_order(order).map_err(D::Error::custom)?;
            f.set_sign(k, s);
        }
        Ok(f)
    }
}

/// A family whose members are arbitrary leaf sets, e.g. point sets of another family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetFamily {
    pub outer_depth: u32,
    pub resolution: u32,
    pub collections: Vec<Vec<LeafSet>>,
}

impl SetFamily {
    /// Outer family given by labels `I ∈ D^m` of the inner family, turned into the sets `A_I`.
    pub fn from_labels(labels: &BlockBasisFamily, inner: &BlockBasisFamily) -> Result<Self, JonesError> {
        if labels.inner_depth != inner.outer_depth {
            return Err(JonesError::DepthMismatch {
                outer: labels.inner_depth,
                inner: inner.outer_depth,
            });
        }
        let res = inner.inner_depth;
        let collections = labels
            .collections
            .iter()
            .map(|c| c.iter().map(|i| inner.point_set(i, res)).collect())
            .collect();
        Ok(SetFamily { outer_depth: labels.outer_depth, resolution: res, collections })
    }

    pub fn point_sets(&self) -> Vec<LeafSet> {
        self.collections
            .iter()
            .map(|c| {
                let mut u = LeafSet::empty(self.resolution);
                for s in c {
                    u.union_with(s);
                }
                u
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "condition")]
pub enum Violation {
    /// Two members overlap without being nested.
    J1 { label_a: u64, member_a: usize, label_b: u64, member_b: usize },
    J2Empty { label: u64 },
    J2Overlap { label: u64, member_a: usize, member_b: usize },
    J2Shared { label_a: u64, label_b: u64 },
    J3Disjoint { label_a: u64, label_b: u64 },
    J3Nested { inner: u64, outer: u64 },
    /// `K ∈ ℬ_I` misses `B_{I0}` entirely.
    J4Empty { inner: u64, outer: u64, member: usize },
}

/// `I0 ⊆ I`, member `K` (index into `ℬ_I`) attaining the measured constant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KappaWitness {
    pub inner: u64,
    pub outer: u64,
    pub member: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JonesReport {
    pub j1_ok: bool,
    pub j2_ok: bool,
    pub j3_ok: bool,
    /// Every density in J4 is positive, so the measured constant is finite.
    pub j4_ok: bool,
    pub kappa_measured: Option<f64>,
    pub kappa_numer: u64,
    pub kappa_denom: u64,
    pub kappa_witnesses: Vec<KappaWitness>,
    pub violations: Vec<Violation>,
}

impl JonesReport {
    pub fn is_ok(&self) -> bool {
        self.j1_ok && self.j2_ok && self.j3_ok && self.j4_ok
    }

    pub fn kappa_exact(&self) -> Option<Ratio<u64>> {
        self.j4_ok.then(|| Ratio::new(self.kappa_numer, self.kappa_denom))
    }

    /// Conditions hold with J4 constant `kappa`.
    pub fn satisfies(&self, kappa: f64) -> bool {
        self.is_ok() && self.kappa_measured.is_some_and(|k| k <= kappa)
    }
}

fn j3_j4(members: &[Vec<LeafSet>], points: &[LeafSet], n: u32) -> (bool, bool, Ratio<u64>, Vec<KappaWitness>, Vec<Violation>) {
    let mut violations = Vec::new();
    let mut j3 = true;
    let dim = tree_size(n);
    for a in 0..dim {
        let ia = DyadicInterval::from_index(a);
        for b in a + 1..dim {
            let ib = DyadicInterval::from_index(b);
            if ia.is_disjoint(&ib) {
                if points[a].intersects(&points[b]) {
                    j3 = false;
                    violations.push(Violation::J3Disjoint { label_a: ia.order(), label_b: ib.order() });
                }
            } else if ia.contains(&ib) && !points[b].is_subset(&points[a]) {
                j3 = false;
                violations.push(Violation::J3Nested { inner: ib.order(), outer: ia.order() });
            }
        }
    }

    let mut j4 = true;
    let mut best = Ratio::from_integer(0u64);
    let mut witnesses = Vec::new();
    for i0 in DyadicInterval::all_upto(n) {
        let b0 = &points[i0.index()];
        let c0 = b0.count();
        for lvl in (0..=i0.level()).rev() {
            let i = i0.ancestor_at(lvl).expect("level at most that of i0");
            let ci = points[i.index()].count();
            if ci == 0 {
                continue;
            }
            for (m, k) in members[i.index()].iter().enumerate() {
                let hit = k.intersection_count(b0);
                if hit == 0 {
                    j4 = false;
                    violations.push(Violation::J4Empty { inner: i0.order(), outer: i.order(), member: m });
                    continue;
                }
                let r = Ratio::new(c0 * k.count(), ci * hit);
                let w = KappaWitness { inner: i0.order(), outer: i.order(), member: m };
                if r > best {
                    best = r;
                    witnesses.clear();
                    witnesses.push(w);
                } else if r == best {
                    witnesses.push(w);
                }
            }
        }
    }
    (j3, j4, best, witnesses, violations)
}

fn report(
    j1_ok: bool,
    j2_ok: bool,
    mut violations: Vec<Violation>,
    members: &[Vec<LeafSet>],
    points: &[LeafSet],
    n: u32,
) -> JonesReport {
    let (j3_ok, j4_ok, kappa, witnesses, more) = j3_j4(members, points, n);
    violations.extend(more);
    JonesReport {
        j1_ok,
        j2_ok,
        j3_ok,
        j4_ok,
        kappa_measured: j4_ok.then(|| *kappa.numer() as f64 / *kappa.denom() as f64),
        kappa_numer: *kappa.numer(),
        kappa_denom: *kappa.denom(),
        kappa_witnesses: if j4_ok { witnesses } else { Vec::new() },
        violations,
    }
}

/// Exhaustive check of J1-J4 with the exact J4 constant.
pub fn verify_jones(family: &BlockBasisFamily) -> JonesReport {
    let n = family.outer_depth;
    let mut violations = Vec::new();
    let mut j2 = true;
    let mut owner: HashMap<DyadicInterval, u64> = HashMap::new();
    for i in DyadicInterval::all_upto(n) {
        let c = family.collection(&i);
        if c.is_empty() {
            j2 = false;
            violations.push(Violation::J2Empty { label: i.order() });
        }
        let items: Vec<_> = c.iter().collect();
        for a in 0..items.len() {
            for b in a + 1..items.len() {
                if !items[a].is_disjoint(items[b]) {
                    j2 = false;
                    violations.push(Violation::J2Overlap { label: i.order(), member_a: a, member_b: b });
                }
            }
            if let Some(prev) = owner.insert(*items[a], i.order()) {
                j2 = false;
                violations.push(Violation::J2Shared { label_a: prev, label_b: i.order() });
            }
        }
    }
    let sf = family.as_set_family(family.inner_depth);
    let points = sf.point_sets();
    // Dyadic intervals are always nested or disjoint.
    report(true, j2, violations, &sf.collections, &points, n)
}

/// J1-J4 for a family of arbitrary leaf sets.
pub fn verify_set_family(family: &SetFamily) -> JonesReport {
    let n = family.outer_depth;
    let mut violations = Vec::new();
    let (mut j1, mut j2) = (true, true);
    let flat: Vec<(u64, usize, &LeafSet)> = family
        .collections
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.iter().enumerate().map(move |(m, s)| (i as u64 + 1, m, s)))
        .collect();
    for (i, c) in family.collections.iter().enumerate() {
        if c.is_empty() || c.iter().any(LeafSet::is_empty) {
            j2 = false;
            violations.push(Violation::J2Empty { label: i as u64 + 1 });
        }
    }
    let mut shared = BTreeMap::new();
    for a in 0..flat.len() {
        for b in a + 1..flat.len() {
            let (la, ma, sa) = flat[a];
            let (lb, mb, sb) = flat[b];
            let common = sa.intersection_count(sb);
            if common == 0 {
                continue;
            }
            if sa == sb {
                if la == lb {
                    j2 = false;
                    violations.push(Violation::J2Overlap { label: la, member_a: ma, member_b: mb });
                } else if shared.insert((la, lb), ()).is_none() {
                    j2 = false;
                    violations.push(Violation::J2Shared { label_a: la, label_b: lb });
                }
                continue;
            }
            if common != sa.count() && common != sb.count() {
                j1 = false;
                violations.push(Violation::J1 { label_a: la, member_a: ma, label_b: lb, member_b: mb });
            }
            if la == lb {
                j2 = false;
                violations.push(Violation::J2Overlap { label: la, member_a: ma, member_b: mb });
            }
        }
    }
    let points = family.point_sets();
    report(j1, j2, violations, &family.collections, &points, n)
}

/// `B f = Σ_I (⟨f, h_I⟩ / |I|) b_I`, as a map `SL∞_n → SL∞_N`.
pub fn embed_b(family: &BlockBasisFamily) -> HaarOperator {
    let mut b = HaarOperator::zeros(family.outer_depth, family.inner_depth);
    for (i, k) in family.members() {
        b.set(k.index(), i.index(), family.sign(&k));
    }
    b
}

/// `Q g = Σ_I (⟨g, b_I⟩ / ‖b_I‖_2^2) h_I`, as a map `SL∞_N → SL∞_n`.
pub fn project_q(family: &BlockBasisFamily) -> HaarOperator {
    let mut q = HaarOperator::zeros(family.inner_depth, family.outer_depth);
    for i in DyadicInterval::all_upto(family.outer_depth) {
        let norm = family.norm_sq(&i);
        if norm == 0.0 {
            continue;
        }
        for k in family.collection(&i).iter() {
            q.set(i.index(), k.index(), family.sign(k) * k.measure() / norm);
        }
    }
    q
}

/// `P = B ∘ Q` on `SL∞_N`.
pub fn projection_p(family: &BlockBasisFamily) -> HaarOperator {
    embed_b(family).compose(&project_q(family))
}

/// `Q ∘ B` in exact arithmetic; signs cancel, so entry `[I, J]` is `|ℬ_I ∩ ℬ_J| / |ℬ_I|`.
pub fn q_after_b_exact(family: &BlockBasisFamily) -> Vec<Vec<Ratio<u128>>> {
    let dim = tree_size(family.outer_depth);
    (0..dim)
        .map(|i| {
            let ci = &family.collections[i];
            let total = ci.total_measure();
            (0..dim)
                .map(|j| {
                    if total.num == 0 {
                        return Ratio::from_integer(0);
                    }
                    let shared = family.collections[j]
                        .iter()
                        .filter(|k| ci.contains(k))
                        .fold(crate::dyadic::Dyadic::zero(), |acc, k| acc.add(k.measure_exact()));
                    shared.ratio(total)
                })
                .collect()
        })
        .collect()
}

/// Composition: `ℬ̃_J = ⋃ {ℬ_I : A_I ∈ outer_J}` with the inner signs.
pub fn reiterate(outer: &SetFamily, inner: &BlockBasisFamily) -> Result<BlockBasisFamily, JonesError> {
    let res = outer.resolution.max(inner.inner_depth);
    let mut by_set: HashMap<LeafSet, u64> = HashMap::new();
    for i in DyadicInterval::all_upto(inner.outer_depth) {
        let s = inner.point_set(&i, res);
        if let Some(prev) = by_set.insert(s, i.order()) {
            return Err(JonesError::AmbiguousInner(prev, i.order()));
        }
    }
    let mut collections = Vec::with_capacity(outer.collections.len());
    for (j, members) in outer.collections.iter().enumerate() {
        let mut c = IntervalCollection::new();
        for (m, set) in members.iter().enumerate() {
            let set = set.refine(res)?;
            let label = by_set
                .get(&set)
                .ok_or(JonesError::Mismatch { label: j as u64 + 1, member: m })?;
            c.extend(inner.collection(&DyadicInterval::from_order(*label)?));
        }
        collections.push(c);
    }
    let mut out = BlockBasisFamily::new(inner.inner_depth, outer.outer_depth, collections)?;
    let members: Vec<_> = out.members().map(|(_, k)| k).collect();
    for k in members {
        if inner.sign(&k) < 0.0 {
            out.set_sign(k, -1);
        }
    }
    Ok(out)
}

/// Random family built by halving: children of `I` draw nonempty subcollections
/// inside the matching halves of the members of `ℬ_I`. Needs `N ≥ n`.
pub fn random_jones_family(n: u32, big_n: u32, rng: &mut impl Rng) -> BlockBasisFamily {
    assert!(big_n >= n, "inner depth must be at least the outer depth");
    let dim = tree_size(n);
    let mut collections = vec![IntervalCollection::new(); dim];
    let pick = |cands: Vec<DyadicInterval>, rng: &mut dyn rand::RngCore| -> Vec<DyadicInterval> {
        let p: f64 = 0.5 + 0.5 * rng.random::<f64>();
        let mut out: Vec<_> = cands.iter().copied().filter(|_| rng.random::<f64>() < p).collect();
        if out.is_empty() {
            out.push(cands[rng.random_range(0..cands.len())]);
        }
        out
    };
    let root_level = rng.random_range(0..=(big_n - n).min(1));
    collections[0] = pick(DyadicInterval::at_level(root_level).collect(), rng).into_iter().collect();
    for idx in 1..dim {
        let i0 = DyadicInterval::from_index(idx);
        let parent = i0.parent().expect("non-root");
        let cap = big_n - (n - i0.level());
        let mut c = IntervalCollection::new();
        let parents: Vec<_> = collections[parent.index()].iter().copied().collect();
        for k0 in parents {
            let k1 = if i0.is_left_child() { k0.left_child() } else { k0.right_child() };
            let top = (k1.level() + 2).min(cap);
            let level = rng.random_range(k1.level()..=top);
            for k in pick(k1.descendants_at(level).collect(), rng) {
                c.insert(k);
            }
        }
        collections[idx] = c;
    }
    let mut f = BlockBasisFamily::new(big_n, n, collections).expect("levels capped at N");
    let members: Vec<_> = f.members().map(|(_, k)| k).collect();
    for k in members {
        if rng.random::<bool>() {
            f.set_sign(k, -1);
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::sl_inf_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn iv(n: u32, k: u64) -> DyadicInterval {
        DyadicInterval::new(n, k).unwrap()
    }

    fn coll(items: &[DyadicInterval]) -> IntervalCollection {
        items.iter().copied().collect()
    }

    #[test]
    fn identity_family() {
        let f = BlockBasisFamily::identity(3);
        let r = verify_jones(&f);
        assert!(r.is_ok());
        assert_eq!(r.kappa_measured, Some(1.0));
        assert_eq!(embed_b(&f), HaarOperator::identity(3));
        assert_eq!(project_q(&f), HaarOperator::identity(3));
    }

    #[test]
    fn small_family_kappa_one() {
        let f = BlockBasisFamily::new(
            2,
            1,
            vec![coll(&[iv(0, 1)]), coll(&[iv(2, 1)]), coll(&[iv(1, 2)])],
        )
        .unwrap();
        let r = verify_jones(&f);
        assert!(r.is_ok(), "{r:?}");
        assert_eq!(r.kappa_exact(), Some(Ratio::from_integer(1)));
    }

    #[test]
    fn shared_member_is_reported() {
        let f = BlockBasisFamily::new(
            2,
            1,
            vec![coll(&[iv(0, 1)]), coll(&[iv(2, 1)]), coll(&[iv(2, 1)])],
        )
        .unwrap();
        let r = verify_jones(&f);
        assert!(!r.j2_ok);
        assert!(r.violations.contains(&Violation::J2Shared { label_a: 2, label_b: 3 }));
    }

    #[test]
    fn q_inverts_b_on_random_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(0..=3);
            let big_n = rng.random_range(n..=7);
            let f = random_jones_family(n, big_n, &mut rng);
            let r = verify_jones(&f);
            assert!(r.is_ok(), "{r:?}");
            let qb = project_q(&f).compose(&embed_b(&f));
            assert!(qb.max_abs_diff(&HaarOperator::identity(n)) < 1e-14);
            for i in DyadicInterval::all_upto(n) {
                let b = f.block_vector(&i);
                assert_eq!(sl_inf_norm(&b), 1.0);
                let back = project_q(&f).apply(&b).sub(&HaarVector::basis(i, n));
                assert!(back.max_abs() < 1e-14);
                assert_eq!(f.norm_sq(&i), f.point_set(&i, big_n).measure_f64());
            }
            // point sets are nested exactly along the index tree
            let pts = f.point_sets(big_n);
            for a in DyadicInterval::all_upto(n) {
                for b in DyadicInterval::all_upto(n) {
                    assert_eq!(pts[b.index()].is_subset(&pts[a.index()]), a.contains(&b));
                }
            }
        }
    }

    #[test]
    fn signs_do_not_change_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_jones_family(2, 6, &mut rng);
        let mut g = f.clone();
        let members: Vec<_> = g.members().map(|(_, k)| k).collect();
        for k in members {
            g.set_sign(k, 1);
        }
        assert_eq!(verify_jones(&f).kappa_exact(), verify_jones(&g).kappa_exact());
    }

    #[test]
    fn sign_identity_as_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_jones_family(2, 6, &mut rng);
        let mut plain = f.clone();
        let members: Vec<_> = plain.members().map(|(_, k)| k).collect();
        let mut d = vec![0.0; tree_size(6)];
        for k in &members {
            plain.set_sign(*k, 1);
            d[k.index()] = f.sign(k);
        }
        let lhs = project_q(&f);
        let rhs = project_q(&plain).compose(&HaarOperator::multiplier(6, &d));
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn reiterate_identities() {
        let inner = BlockBasisFamily::identity(2);
        let outer = SetFamily::from_labels(&BlockBasisFamily::identity(2), &inner).unwrap();
        assert_eq!(reiterate(&outer, &inner).unwrap(), inner);
    }

    #[test]
    fn reiterate_rejects_foreign_sets() {
        let inner = BlockBasisFamily::identity(1);
        let outer = SetFamily {
            outer_depth: 0,
            resolution: 2,
            collections: vec![vec![LeafSet::from_positions(2, &[1]).unwrap()]],
        };
        assert_eq!(reiterate(&outer, &inner), Err(JonesError::Mismatch { label: 1, member: 0 }));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_jones_family(2, 5, &mut rng);
        let s = serde_json::to_string(&f).unwrap();
        let back: BlockBasisFamily = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        assert!(s.starts_with(r#"{"n":2,"N":5,"collections":{"1":"#));
    }
}
