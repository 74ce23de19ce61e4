use haarfactor::directsum::{
    dsum_norm, embed_e, embed_g, project_p, random_direct_sum, retract_q, Exponent,
};
use haarfactor::dyadic::{tree_size, DyadicInterval};
use haarfactor::factor::{
    factor_large_diagonal, factor_primary, verify_certificate, FactorSchedule, HChoice,
    RESIDUAL_TOLERANCE,
};
use haarfactor::haar::{pairing, sl_inf_norm, HaarVector};
use haarfactor::operators::{random_operator, HaarOperator, OperatorKind};
use haarfactor::quasidiag::{choose_signs, quasi_diagonalize, AdaptiveSchedule, Schedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adaptive() -> AdaptiveSchedule {
    AdaptiveSchedule::constant(0.1, 0.05)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quasidiag_invariants(seed in any::<u64>(), n in 0u32..3) {
        let t = random_operator(8, OperatorKind::DiagDominant { delta: 0.5, noise: 0.02 }, seed);
        let q = quasi_diagonalize(&t, n, &Schedule::Adaptive(adaptive()), 0.5).unwrap();
        prop_assert!(q.jones.is_ok());
        prop_assert!(q.diagonal_holds());
        for (s, b) in q.offdiag_sums.iter().zip(&q.offdiag_bounds) {
            prop_assert!(*s <= *b * (1.0 + 1e-12) + 1e-15);
        }
        let levels: Vec<u32> = q.log.iter().map(|s| s.min_level).collect();
        prop_assert!(levels.windows(2).all(|w| w[0] < w[1]));
        let rho_sum: f64 = q.rho_achieved.iter().sum();
        for &m in &q.measure_floors {
            prop_assert!(m <= 1.0 && m >= 1.0 - rho_sum - 1e-12);
        }
        if let (Some(k), Some(b)) = (q.jones.kappa_measured, q.kappa_bound) {
            prop_assert_eq!(q.kappa_discrepancy, k > b * (1.0 + 1e-12));
        }
    }

    #[test]
    fn chosen_signs_keep_cross_terms_nonnegative(seed in any::<u64>(), size in 1usize..12) {
        let t = random_operator(6, OperatorKind::DiagDominant { delta: 0.0, noise: 1.0 }, seed);
        let members: haarfactor::IntervalCollection =
            DyadicInterval::at_level(5).take(size).collect();
        let choice = choose_signs(&members, &t);
        // Independent evaluation: ⟨T b, b⟩ minus the diagonal part.
        let mut b = HaarVector::zeros(6);
        for (k, s) in members.iter().zip(&choice.signs) {
            b.set(k, f64::from(*s));
        }
        let diag: f64 = members.iter().map(|k| t.entry(k, k) * k.measure()).sum();
        let cross = pairing(&t.apply(&b), &b) - diag;
        prop_assert!(cross >= -1e-12);
        prop_assert!((cross - choice.x_value).abs() <= 1e-12);
    }

    #[test]
    fn local_factorization_inverts(seed in any::<u64>()) {
        let t = random_operator(7, OperatorKind::DiagDominant { delta: 0.4, noise: 0.05 }, seed);
        let c = factor_large_diagonal(&t, 2, 0.4, 0.5, &FactorSchedule::Adaptive(adaptive())).unwrap();
        prop_assert!(c.residual <= RESIDUAL_TOLERANCE);
        prop_assert!(verify_certificate(&c, &t).passed);
    }

    #[test]
    fn primary_choice_flips_on_multipliers(seed in any::<u64>()) {
        let t = random_operator(8, OperatorKind::ProjectionLike, seed);
        let sched = FactorSchedule::Adaptive(adaptive());
        let a = factor_primary(&t, 1, 0.5, &sched, None);
        let b = factor_primary(&t.complement(), 1, 0.5, &sched, None);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!(a.residual <= RESIDUAL_TOLERANCE && b.residual <= RESIDUAL_TOLERANCE);
            prop_assert!(verify_certificate(&a, &t).passed);
            let (pa, pb) = (a.primary.as_ref().unwrap(), b.primary.as_ref().unwrap());
            prop_assert_eq!(pa.cc_m, pb.cc_n);
            if pa.cc_m != pa.cc_n && !pa.fallback && !pb.fallback {
                prop_assert_ne!(a.h_choice, b.h_choice);
            }
        }
    }

    #[test]
    fn direct_sum_maps(seed in any::<u64>(), m in 0u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_direct_sum(m, Exponent::Infinite, &mut rng);
        let e = embed_e(&x).unwrap();
        prop_assert_eq!(sl_inf_norm(&e), dsum_norm(&x, Exponent::Infinite));
        prop_assert_eq!(project_p(&e, m), e.clone());
        let mut f = HaarVector::zeros(2 * m + 1);
        for c in f.coeffs_mut() {
            *c = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        let pf = project_p(&f, m);
        prop_assert_eq!(project_p(&pf, m), pf.clone());
        prop_assert!(sl_inf_norm(&pf) <= sl_inf_norm(&f));
        let g = f.truncated(m);
        prop_assert_eq!(retract_q(&embed_g(&g, Exponent::Infinite)), g);
        let rs = [1.0, 1.5, 2.0, 3.0, 8.0];
        for w in rs.windows(2) {
            let (lo, hi) = (dsum_norm(&x, Exponent::Finite(w[0])), dsum_norm(&x, Exponent::Finite(w[1])));
            prop_assert!(hi <= lo * (1.0 + 1e-12));
        }
        prop_assert!(dsum_norm(&x, Exponent::Infinite) <= dsum_norm(&x, Exponent::Finite(8.0)) * (1.0 + 1e-12));
    }
}

#[test]
fn primary_trivial_operators() {
    let sched = FactorSchedule::Adaptive(adaptive());
    let zero = factor_primary(&HaarOperator::zero(6), 1, 0.2, &sched, None).unwrap();
    assert_eq!(zero.h_choice, HChoice::IdMinusT);
    let id = factor_primary(&HaarOperator::identity(6), 1, 0.2, &sched, None).unwrap();
    assert_eq!(id.h_choice, HChoice::T);
    assert_eq!(tree_size(1), id.s.rows());
}
