use haarfactor::dyadic::{carleson_constant_exact, tree_size, DyadicInterval, LeafSet, NestedFamily};
use haarfactor::haar::{h1_norm, pairing, sl_inf_norm, HaarVector};
use haarfactor::operators::{random_operator, HaarOperator, OperatorKind};
use num_rational::Ratio;
use proptest::prelude::*;

fn vector(depth: u32) -> impl Strategy<Value = HaarVector> {
    prop::collection::vec(-4.0f64..4.0, tree_size(depth))
        .prop_map(move |c| HaarVector::from_coeffs(depth, c).unwrap())
}

/// Random intervals of depth ≤ 6 always form a nested family.
fn interval_family() -> impl Strategy<Value = Vec<DyadicInterval>> {
    prop::collection::btree_set(0usize..tree_size(6), 0..24)
        .prop_map(|s| s.into_iter().map(DyadicInterval::from_index).collect())
}

#[test]
fn order_is_a_bijection() {
    for depth in 0..=12u32 {
        let mut seen = vec![false; tree_size(depth)];
        for i in DyadicInterval::all_upto(depth) {
            let o = i.order() as usize;
            assert!(o >= 1 && o <= tree_size(depth));
            assert!(!seen[o - 1]);
            seen[o - 1] = true;
            assert_eq!(DyadicInterval::from_order(o as u64).unwrap(), i);
        }
        assert!(seen.into_iter().all(|b| b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn carleson_matches_double_loop(ivs in interval_family()) {
        let fam = NestedFamily::from_intervals(&ivs, 6).unwrap();
        let mut best = Ratio::from_integer(0u64);
        for n in &ivs {
            let total: u64 = ivs
                .iter()
                .filter(|m| n.contains(m))
                .map(|m| 1u64 << (6 - m.level()))
                .sum();
            best = best.max(Ratio::new(total, 1u64 << (6 - n.level())));
        }
        prop_assert_eq!(carleson_constant_exact(&fam), best);
    }

    #[test]
    fn generation_measures_match_partition(ivs in interval_family()) {
        let fam = NestedFamily::from_intervals(&ivs, 6).unwrap();
        let total: u64 = fam.generation_point_sets().iter().map(LeafSet::count).sum();
        // Brute force: every leaf counts once per member containing it.
        let brute: u64 = (0..64u64)
            .map(|leaf| ivs.iter().filter(|i| {
                let (a, b) = i.leaf_range(6).unwrap();
                a <= leaf && leaf < b
            }).count() as u64)
            .sum();
        prop_assert_eq!(total, brute);
    }

    #[test]
    fn refinement_keeps_measure(ivs in interval_family(), extra in 0u32..4) {
        let fam = NestedFamily::from_intervals(&ivs, 6).unwrap();
        let u = fam.point_set();
        prop_assert_eq!(u.refine(6 + extra).unwrap().measure(), u.measure());
    }

    #[test]
    fn norms_ignore_signs(f in vector(5), signs in prop::collection::vec(any::<bool>(), tree_size(5))) {
        let mut g = f.clone();
        for (c, s) in g.coeffs_mut().iter_mut().zip(&signs) {
            if *s {
                *c = -*c;
            }
        }
        prop_assert_eq!(sl_inf_norm(&f), sl_inf_norm(&g));
        prop_assert_eq!(h1_norm(&f), h1_norm(&g));
    }

    #[test]
    fn h1_dominates_pairings(f in vector(5), g in vector(5)) {
        let nf = sl_inf_norm(&f);
        prop_assume!(nf > 0.0);
        prop_assert!(pairing(&f.scaled(1.0 / nf), &g).abs() <= h1_norm(&g) * (1.0 + 1e-12));
    }

    #[test]
    fn adjoint_is_an_involution(seed in any::<u64>()) {
        let t = random_operator(4, OperatorKind::DiagDominant { delta: 0.2, noise: 0.7 }, seed);
        prop_assert_eq!(t.adjoint().adjoint(), t);
    }

    #[test]
    fn sign_normalization_keeps_large_diagonal(seed in any::<u64>(), delta in 0.05f64..0.9) {
        let t = random_operator(4, OperatorKind::DiagDominant { delta, noise: 0.1 }, seed);
        prop_assert!(t.has_large_diagonal(delta));
        let (u, signs) = t.normalize_diagonal_signs();
        prop_assert!(u.diagonal().iter().all(|&d| d >= delta));
        prop_assert_eq!(u.scale_columns(&signs), t);
    }

    #[test]
    fn norm_bounds_are_ordered(seed in any::<u64>()) {
        let t = random_operator(4, OperatorKind::Multiplier, seed).sub(
            &random_operator(4, OperatorKind::DiagDominant { delta: 0.0, noise: 0.5 }, seed ^ 7),
        );
        let est = t.opnorm_bounds(3, seed);
        prop_assert!(est.lower <= est.upper * (1.0 + 1e-12));
        let nw = sl_inf_norm(&est.witness);
        if nw > 0.0 {
            let reproduced = sl_inf_norm(&t.apply(&est.witness)) / nw;
            prop_assert!((reproduced - est.lower).abs() <= 1e-12 * est.lower.max(1.0));
        }
    }
}

#[test]
fn identity_row_sum_bound() {
    // Row sums are all 1, so the bound is the norm of the constant coefficient vector.
    assert_eq!(HaarOperator::identity(5).norm_upper_bound(), 6f64.sqrt());
}
