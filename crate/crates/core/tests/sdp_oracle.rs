mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zdaguard::sdp::{solve, LmiBlock, SdpOptions, SdpProblem, SdpStatus};

use common::{planted, random_sym};

#[test]
fn planted_five_variable_instance() {
    let (p, xs, opt) = planted(7, 5, &[4, 3]);
    let sol = solve(&p, &SdpOptions::default()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    assert!((sol.primal_objective - opt).abs() <= 1e-6 * (1.0 + opt.abs()), "{} vs {opt}", sol.primal_objective);
    assert!((&sol.x - &xs).amax() < 1e-4);
    let kkt = sol.kkt(&p);
    assert!(kkt.primal < 1e-7 && kkt.dual < 1e-6 && kkt.complementarity < 1e-6, "{kkt:?}");
}

#[test]
fn max_eigenvalue_epigraph_matches_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_sym(6, &mut rng);
    // minimize t s.t. tI − A ⪰ 0
    let mut p = SdpProblem::new(1);
    p.c[0] = 1.0;
    let mut blk = LmiBlock::new(6);
    blk.add_matrix(Some(0), 0, 0, &DMatrix::identity(6, 6));
    blk.add_matrix(None, 0, 0, &(-&a));
    p.add_block(blk);
    let sol = solve(&p, &SdpOptions::default()).unwrap();
    let lmax = a.symmetric_eigen().eigenvalues.max();
    assert!((sol.x[0] - lmax).abs() < 1e-7, "{} vs {lmax}", sol.x[0]);
}

#[test]
fn objective_scaling_rescales_optimum() {
    let (mut p, _, _) = planted(11, 4, &[5]);
    let base = solve(&p, &SdpOptions::default()).unwrap();
    p.c *= 10.0;
    let scaled = solve(&p, &SdpOptions::default()).unwrap();
    assert_eq!(scaled.status, SdpStatus::Optimal);
    assert!((&base.x - &scaled.x).amax() < 1e-4);
    assert!((scaled.primal_objective - 10.0 * base.primal_objective).abs() < 1e-5 * (1.0 + scaled.primal_objective.abs()));
}

#[test]
fn sparse_text_roundtrip_solves_identically() {
    let (p, _, _) = planted(5, 3, &[3, 2]);
    let q = SdpProblem::from_sparse_text(&p.to_sparse_text()).unwrap();
    let a = solve(&p, &SdpOptions::default()).unwrap();
    let b = solve(&q, &SdpOptions::default()).unwrap();
    assert!((&a.x - &b.x).amax() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn planted_instances_reach_optimum(seed in 0u64..10_000, m in 1usize..6, n1 in 2usize..6, n2 in 1usize..4) {
        // m below the svec dimension keeps the dual strictly feasible
        prop_assume!(m + 1 < n1 * (n1 + 1) / 2 + n2 * (n2 + 1) / 2);
        let (p, _, opt) = planted(seed, m, &[n1, n2]);
        let sol = solve(&p, &SdpOptions::default()).unwrap();
        prop_assert_eq!(sol.status, SdpStatus::Optimal);
        prop_assert!((sol.primal_objective - opt).abs() <= 1e-6 * (1.0 + opt.abs()));
        // duality gap measure is non-negative at every iterate and weak duality holds at the end
        for t in &sol.trace {
            prop_assert!(t.gap >= 0.0);
        }
        prop_assert!(sol.dual_objective <= sol.primal_objective + 1e-7 * (1.0 + opt.abs()));
        prop_assert!(sol.violation <= 1e-7);
    }
}

