use branchcount::eprb::{
    embed_spin_state, local_projector, outcome_independence, product_state, singlet_spin, EprbScenario, Setting, Spin,
};
use branchcount::event_space::{build_event_space, check_assignment, Event, ProbAssignment};
use branchcount::expansion::{construct, peel, randomize, validate, DirectionBudget};
use branchcount::hilbert::{
    apply, apply_kron, inner, random_projector, seeded_rng, tensor, tensor_op, Complement, Operator, Projection,
    ProjectorOp, StateVector, Tolerance, UnitaryOp, C64,
};
use branchcount::microprob::{born_weight, count, embed_for_count};
use proptest::prelude::*;

fn tol() -> Tolerance {
    Tolerance::default()
}

fn random_state(dim: usize, seed: u64) -> StateVector {
    StateVector::random(dim, &mut seeded_rng(seed))
}

fn component() -> impl Strategy<Value = C64> {
    (-10.0f64..10.0, -10.0f64..10.0).prop_map(|(re, im)| C64::new(re, im))
}

fn vector(dim: usize) -> impl Strategy<Value = StateVector> {
    prop::collection::vec(component(), dim).prop_map(|c| StateVector::new(c).unwrap())
}

fn pair(max_dim: usize) -> impl Strategy<Value = (StateVector, StateVector)> {
    (1..=max_dim).prop_flat_map(|d| (vector(d), vector(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_is_conjugate_symmetric((u, v) in pair(12)) {
        let uv = inner(&u, &v).unwrap();
        let vu = inner(&v, &u).unwrap();
        prop_assert!((uv - vu.conj()).norm() <= 1e-12 * (1.0 + uv.norm()));
    }

    #[test]
    fn cauchy_schwarz((u, v) in pair(12)) {
        let uv = inner(&u, &v).unwrap().norm();
        prop_assert!(uv <= u.norm() * v.norm() * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn inner_is_linear_in_second_argument((u, v) in pair(8), c in component()) {
        let w = &v + &v.scale(c);
        let lhs = inner(&u, &w).unwrap();
        let rhs = inner(&u, &v).unwrap() * (C64::new(1.0, 0.0) + c);
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn unitaries_preserve_norms(dim in 1usize..10, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let u = UnitaryOp::random(dim, &mut rng);
        let v = StateVector::random(dim, &mut rng);
        prop_assert!(u.operator().unitarity_defect() < 1e-12);
        prop_assert!((u.apply(&v).unwrap().norm() - v.norm()).abs() <= 1e-12 * v.norm());
    }

    #[test]
    fn tensor_of_operators_acts_factorwise(da in 1usize..5, db in 1usize..5, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let a = UnitaryOp::random(da, &mut rng).operator().clone();
        let b = random_projector(db, db / 2, &mut rng).unwrap().operator().clone();
        let u = StateVector::random(da, &mut rng);
        let v = StateVector::random(db, &mut rng);
        let lhs = apply(&tensor_op(&a, &b), &tensor(&u, &v)).unwrap();
        let rhs = tensor(&apply(&a, &u).unwrap(), &apply(&b, &v).unwrap());
        prop_assert!(lhs.distance(&rhs) <= 1e-12 * (1.0 + rhs.norm()));
        let w = StateVector::random(da * db, &mut rng);
        let dense = apply(&tensor_op(&a, &b), &w).unwrap();
        prop_assert!(apply_kron(&a, &b, &w).unwrap().distance(&dense) <= 1e-12 * (1.0 + dense.norm()));
        prop_assert!((tensor(&u, &v).norm() - u.norm() * v.norm()).abs() <= 1e-12 * (1.0 + u.norm() * v.norm()));
    }

    #[test]
    fn random_projectors_are_projectors(dim in 1usize..12, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let rank = (frac * dim as f64) as usize;
        let p = random_projector(dim, rank, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(p.rank(), rank);
        prop_assert!(p.operator().hermiticity_defect() < 1e-12);
        prop_assert!(p.operator().idempotence_defect() < 1e-12);
        prop_assert!((p.operator().trace().re - rank as f64).abs() < 1e-10);
        let sum = p.operator().plus(p.complement().operator()).unwrap();
        prop_assert!(sum.minus(&Operator::identity(dim)).unwrap().max_abs() < 1e-12);
        prop_assert_eq!(p.range_basis().len() + p.kernel_basis().len(), dim);
    }

    #[test]
    fn constructed_expansions_are_valid(dim in 1usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = 1 + (frac * (dim - 1) as f64) as usize;
        let psi = random_state(dim, seed);
        let lam = construct(&psi, n, seed).unwrap();
        let report = validate(&lam, &tol());
        prop_assert!(report.all_passed(), "{:?}", report);
        prop_assert_eq!(lam.n(), n);
        for (k, theta) in lam.theta_log().iter().enumerate().skip(1) {
            prop_assert!((theta - (1.0 / ((k + 1) as f64).sqrt()).atan()).abs() < 1e-9);
        }
    }

    #[test]
    fn randomize_keeps_invariants(dim in 2usize..16, seed in any::<u64>()) {
        let psi = random_state(dim, seed);
        let lam = construct(&psi, dim / 2 + 1, seed).unwrap();
        let turned = randomize(&lam, seed ^ 1).unwrap();
        prop_assert!(validate(&turned, &tol()).all_passed());
        prop_assert!(turned.psi().distance(&psi) < 1e-12 * psi.norm());
    }

    #[test]
    fn peel_splits_orthogonally(dim in 2usize..12, frac in 0.01f64..1.0, seed in any::<u64>()) {
        let chi = random_state(dim, seed);
        let a = chi.norm() * frac.sqrt();
        let mut dirs = DirectionBudget::new(dim, seed);
        let (xi, rest) = peel(&chi, a, &mut dirs, &tol()).unwrap();
        prop_assert!(((&xi + &rest).distance(&chi)) <= 1e-12 * chi.norm());
        prop_assert!((xi.norm() - a).abs() <= 1e-12 * chi.norm());
        prop_assert!(inner(&xi, &rest).unwrap().norm() <= 1e-12 * chi.norm_sqr());
    }

    #[test]
    fn budget_directions_stay_in_range(dim in 2usize..14, frac in 0.3f64..1.0, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let rank = ((frac * dim as f64) as usize).max(2);
        let p = random_projector(dim, rank, &mut rng).unwrap();
        let psi = StateVector::random(dim, &mut rng);
        let mut dirs = DirectionBudget::within(&p, seed);
        let part = p.project(&psi);
        dirs.exclude(&part);
        let mut seen = vec![part.normalized().unwrap()];
        for _ in 1..rank {
            let v = dirs.fresh().unwrap();
            prop_assert!(p.project(&v).distance(&v) < 1e-12);
            for w in &seen {
                prop_assert!(inner(w, &v).unwrap().norm() < 1e-12);
            }
            seen.push(v);
        }
        prop_assert!(dirs.fresh().is_err());
    }

    #[test]
    fn born_weights_of_complements_sum_to_one(dim in 1usize..12, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let p = random_projector(dim, (frac * dim as f64) as usize, &mut rng).unwrap();
        let psi = StateVector::random(dim, &mut rng);
        let w = born_weight(&p, &psi).unwrap();
        let wc = born_weight(&Complement(&p), &psi).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert!((w + wc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn counts_bracket_the_born_weight(dim in 2usize..10, n in 1usize..80, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let p = random_projector(dim, dim / 2, &mut rng).unwrap();
        let psi = StateVector::random(dim, &mut rng);
        let (p, psi) = embed_for_count(&p, &psi, n).unwrap();
        let c = count(&p, &psi, n, seed).unwrap();
        prop_assert_eq!(c.m + c.m_complement + c.cats, n);
        prop_assert!(c.cats <= 1);
        prop_assert!(c.interval.0 <= c.born + 1e-12 && c.born <= c.interval.1 + 1e-12);
        prop_assert!(c.error() < 1.0 / n as f64);
    }

    #[test]
    fn event_algebra_laws(n in 1usize..70, a in any::<u128>(), b in any::<u128>()) {
        let ev = |bits: u128| Event::from_indices(n, (0..n).filter(|k| bits >> (k % 128) & 1 == 1));
        let (x, y) = (ev(a), ev(b));
        prop_assert_eq!(x.complement().complement(), x.clone());
        prop_assert_eq!(x.union(&y).complement(), x.complement().intersection(&y.complement()));
        prop_assert!(x.is_disjoint(&x.complement()));
        prop_assert_eq!(x.len() + x.complement().len(), n);
    }

    #[test]
    fn born_assignment_passes(dim in 2usize..12, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let n = 1 + (frac * (dim.min(9) - 1) as f64) as usize;
        let lam = construct(&random_state(dim, seed), n, seed).unwrap();
        let space = build_event_space(lam);
        prop_assert!(check_assignment(&ProbAssignment::born(space.clone()), &tol()).passed);
        prop_assert!(check_assignment(&ProbAssignment::uniform(space), &tol()).passed);
    }

    #[test]
    fn local_projectors_resolve_identity(deg in -720.0f64..720.0, pad in 0usize..7) {
        let a = Setting::from_degrees(deg).unwrap();
        let up = local_projector(a, Spin::Up, pad);
        let down = local_projector(a, Spin::Down, pad);
        let total = up.operator().plus(down.operator()).unwrap();
        prop_assert!(total.minus(&Operator::identity(2 + pad)).unwrap().max_abs() < 1e-14);
        prop_assert!(up.operator().compose(down.operator()).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn singlet_table_matches_cosine_law(a in 0.0f64..360.0, b in 0.0f64..360.0) {
        let (sa, sb) = (Setting::from_degrees(a).unwrap(), Setting::from_degrees(b).unwrap());
        let sc = EprbScenario::new(embed_spin_state(&singlet_spin(), 0).unwrap(), 0, [sa; 2], [sb; 2], 1, 0).unwrap();
        let mut total = 0.0;
        for s in Spin::BOTH {
            for t in Spin::BOTH {
                let p = sc.born_joint(sa, s, sb, t);
                let oracle = (1.0 - f64::from(s.sign() * t.sign()) * (sa.radians() - sb.radians()).cos()) / 4.0;
                prop_assert!((p - oracle).abs() < 1e-14);
                total += p;
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn products_factorize(seed in any::<u64>(), a in 0.0f64..360.0, b in 0.0f64..360.0) {
        let mut rng = seeded_rng(seed);
        let state = product_state(&StateVector::random(2, &mut rng), &StateVector::random(2, &mut rng), 0).unwrap();
        let (sa, sb) = (Setting::from_degrees(a).unwrap(), Setting::from_degrees(b).unwrap());
        let sc = EprbScenario::new(state, 0, [sa; 2], [sb; 2], 1, 0).unwrap();
        let r = outcome_independence(&sc, sa, sb, &tol());
        prop_assert!(r.max_deviation <= 1e-10);
    }
}

#[test]
fn projector_bases_survive_embedding() {
    let mut rng = seeded_rng(3);
    let p = random_projector(5, 2, &mut rng).unwrap();
    let e = p.embed(3, 4);
    assert_eq!(e.range_basis().len(), 5);
    assert_eq!(e.kernel_basis().len(), 7);
    for v in e.range_basis() {
        assert!(e.project(v).distance(v) < 1e-12);
    }
    for v in e.kernel_basis() {
        assert!(e.project(v).norm() < 1e-12);
    }
    let dense = ProjectorOp::new(e.operator().clone(), &tol()).unwrap();
    assert_eq!(dense.range_basis().len(), 5);
}
