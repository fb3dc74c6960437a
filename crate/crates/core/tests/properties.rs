use fbsvie::bsvie::{m_identity_gap, m_property_residual, SolverConfig};
use fbsvie::coefficients::{builtin_family, random_params, BoxSet, ControlProcess, Dims};
use fbsvie::control::{
    adapted_projection, directional_derivative_adjoint, directional_derivative_variational,
    gradient_pairing, mp_gradient, projected_gradient_optimize, solve_adjoint_bundle,
    solve_variational, ControlProblem, OptimizeConfig, ProblemKind,
};
use fbsvie::duality::{eval_duality_pair, random_instance, solve_linear_bsvie, solve_xi, xi_structure_gap};
use fbsvie::lattice::{AdaptedProcess, ScenarioTree, TerminalProcess, TimeGrid};
use proptest::prelude::*;
use serde_json::json;

fn lq(kind: ProblemKind, n: usize, seed: u64) -> ControlProblem {
    lq_with(kind, n, seed, SolverConfig::default())
}

fn lq_with(kind: ProblemKind, n: usize, seed: u64, solver: SolverConfig) -> ControlProblem {
    let dims = Dims { n: 2, m: 2, l: 2 };
    let mut params = random_params("lq_tracking", dims, 0.4, kind == ProblemKind::C2, seed).unwrap();
    params["control_set"] = json!({ "lo": [-4.0, -4.0], "hi": [4.0, 4.0] });
    let c = builtin_family("lq_tracking", &params).unwrap();
    ControlProblem::new(kind, c, TimeGrid::new(1.0, n).unwrap(), solver).unwrap()
}

fn kind_of(flag: bool) -> ProblemKind {
    if flag {
        ProblemKind::C2
    } else {
        ProblemKind::C1
    }
}

fn unit_box() -> BoxSet {
    BoxSet::symmetric(2, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn duality_holds_on_random_instances(n in 1usize..=4, m in 1usize..=2, seed in any::<u64>()) {
        let t = ScenarioTree::with_steps(1.0, n + 1).unwrap();
        let (d, a) = random_instance(&t, m, 0.5, seed);
        let pair = eval_duality_pair(&t, &d, &a, &SolverConfig::default()).unwrap();
        prop_assert!(pair.rel_err() <= 1e-9, "{pair:?}");
        let xi = solve_xi(&t, &d, &a, &SolverConfig::default()).unwrap();
        prop_assert!(xi_structure_gap(&t, &d, &a, &xi.xi) < 1e-12);
    }

    #[test]
    fn m_solutions_have_their_representation(n in 1usize..=5, seed in any::<u64>()) {
        let t = ScenarioTree::with_steps(1.0, n).unwrap();
        let (d, _) = random_instance(&t, 2, 0.5, seed);
        let s = solve_linear_bsvie(&t, &d, &SolverConfig::default()).unwrap();
        prop_assert!(m_property_residual(&t, &s.y, &s.z) <= 1e-12);
        prop_assert!(m_identity_gap(&t, &s.y, &s.z) <= 1e-12);
    }

    #[test]
    fn variational_tuple_is_linear_in_direction(c2 in any::<bool>(), seed in 0u64..1000, a in -1.5f64..1.5) {
        // linear up to the Picard stopping error, so solve tightly
        let solver = SolverConfig { picard_tol: 1e-14, ..SolverConfig::default() };
        let p = lq_with(kind_of(c2), 3, seed, solver);
        let set = p.coeffs().control_set().clone();
        let u = ControlProcess::random(p.tree(), &unit_box(), seed + 1);
        let d1 = ControlProcess::random(p.tree(), &unit_box(), seed + 2).into_values();
        let d2 = ControlProcess::random(p.tree(), &unit_box(), seed + 3).into_values();
        let at = |d: &AdaptedProcess| {
            let mut v = u.values().clone();
            v.add_scaled(1.0, d);
            solve_variational(&p, &u, &ControlProcess::new(v, &set).unwrap()).unwrap()
        };
        let mut combo = d1.clone();
        combo.add_scaled(a, &d2);
        let (t1, t2, tc) = (at(&d1), at(&d2), at(&combo));
        let mut x = t1.x1.clone();
        x.add_scaled(a, &t2.x1);
        let mut y = t1.y1.clone();
        y.add_scaled(a, &t2.y1);
        let mut z = t1.z1.clone();
        z.add_scaled(a, &t2.z1);
        prop_assert!(tc.x1.max_abs_diff(&x) <= 1e-12);
        prop_assert!(tc.y1.max_abs_diff(&y) <= 1e-12);
        prop_assert!(tc.z1.max_abs_diff(&z) <= 1e-12);
    }

    #[test]
    fn gradient_pairing_reproduces_variational_derivative(c2 in any::<bool>(), seed in 0u64..1000) {
        let p = lq(kind_of(c2), 3, seed);
        let u = ControlProcess::random(p.tree(), &unit_box(), seed + 10);
        let v = ControlProcess::random(p.tree(), &unit_box(), seed + 11);
        let var = directional_derivative_variational(&p, &u, &v).unwrap();
        let adj = directional_derivative_adjoint(&p, &u, &v).unwrap();
        prop_assert!((var - adj).abs() <= 1e-8 * (var.abs() + 1.0), "{var} vs {adj}");
    }

    #[test]
    fn projection_keeps_adapted_pairings(n in 1usize..=5, seed in any::<u64>()) {
        let t = ScenarioTree::with_steps(1.0, n).unwrap();
        let set = BoxSet::symmetric(2, 1.0).unwrap();
        let g = ControlProcess::random(&ScenarioTree::with_steps(1.0, n).unwrap(), &set, seed);
        // leaf-resolved field: an adapted part plus future increments
        let leafy = TerminalProcess::from_fn(2, n, n, |k, leaf, out| {
            let base = g.values().at(k, leaf, n);
            let dw = t.increment(n - 1, leaf, n);
            out[0] = base[0] + 3.0 * dw;
            out[1] = base[1] - dw * base[0];
        });
        let d = ControlProcess::random(&t, &set, seed ^ 0x5555).into_values();
        let ga = adapted_projection(&leafy);
        let raw = gradient_pairing(&t, leafy.slices(), &d);
        let proj = gradient_pairing(&t, ga.slices(), &d);
        prop_assert!((raw - proj).abs() <= 1e-12);
    }

    #[test]
    fn terminal_value_is_rebuilt_from_its_representation(c2 in any::<bool>(), seed in 0u64..1000) {
        let p = lq(kind_of(c2), 4, seed);
        let u = ControlProcess::random(p.tree(), &unit_box(), seed);
        let b = solve_adjoint_bundle(&p, &u).unwrap();
        let t = p.tree();
        let n = t.steps();
        let terminal = b.mu.slice(n);
        for leaf in 0..t.leaves() {
            for c in 0..2 {
                let mut rebuilt = b.mu.slice(0).at(0)[c];
                for j in 0..n {
                    rebuilt += b.nu.at(j, leaf, n)[c] * t.increment(j, leaf, n);
                }
                prop_assert!((rebuilt - terminal.at(leaf)[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn optimizer_ends_at_a_discrete_maximum_principle_point(
        target in proptest::collection::vec(-2.0f64..2.0, 2),
        seed in 0u64..1000,
    ) {
        // running cost |u − target|², decoupled from the state
        let params = json!({
            "l": 2,
            "f_uu": [[2.0, 0.0], [0.0, 2.0]],
            "f_lin": [0.0, 0.0, 0.0, -2.0 * target[0], -2.0 * target[1]],
        });
        let c = builtin_family("lq_tracking", &params).unwrap();
        let p = ControlProblem::new(
            ProblemKind::C1, c, TimeGrid::new(1.0, 3).unwrap(), SolverConfig::default(),
        ).unwrap();
        let start = ControlProcess::random(p.tree(), p.coeffs().control_set(), seed);
        let res = projected_gradient_optimize(&p, &start, &OptimizeConfig::default()).unwrap();
        prop_assert!(res.converged);
        let ga = adapted_projection(&mp_gradient(&p, &solve_adjoint_bundle(&p, &res.control).unwrap()));
        let set = p.coeffs().control_set();
        for s in 0..ga.len() {
            for node in 0..ga.slice(s).width() {
                let pairing = set.min_vertex_pairing(ga.slice(s).at(node), res.control.values().slice(s).at(node));
                prop_assert!(pairing >= -1e-6);
            }
        }
        for w in res.history.windows(2) {
            prop_assert!(w[1].cost <= w[0].cost);
        }
    }
}
