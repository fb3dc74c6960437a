//! Forward stochastic Volterra integral equations.
//!
//! The state at `t_i` is rebuilt from the whole past on every node:
//!
//! ```text
//! X(t_i) = φ(t_i) + Σ_{j<i} b(t_i, t_j, X(t_j), u(t_j)) dt
//!                 + Σ_{j<i} σ(t_i, t_j, X(t_j), u(t_j)) ΔW_j
//! ```
//!
//! Left endpoints keep the recursion explicit: the diagonal kernel
//! `b(t_i, t_i, ·)` never enters `X(t_i)`. Because the kernels depend on
//! `t_i`, past increments are re-weighted at every step, which is the memory
//! effect that separates a Volterra equation from an SDE. The cost is
//! `O(N²·2^N)` kernel evaluations.

use rayon::prelude::*;

use crate::coefficients::{CoefficientSet, ControlProcess};
use crate::error::{Error, Result};
use crate::kernel::MatrixKernel;
use crate::lattice::{AdaptedProcess, NodeField, ScenarioTree};

/// Forward state on time indices `0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSolution {
    pub x: AdaptedProcess,
}

/// Generic explicit recursion shared by every forward equation in the crate.
///
/// `phi(i, node, out)` writes the free term at a level-`i` node. For `j < i`,
/// `kernel(i, j, node, x_j, drift, diffusion)` writes the `dt` and `ΔW_j`
/// integrands given the level-`i` node and the state `X(t_j)` on its path;
/// both buffers arrive zeroed. Nodes of one level are filled in parallel.
pub fn forward_recursion<P, K>(
    tree: &ScenarioTree,
    dim: usize,
    context: &'static str,
    phi: P,
    kernel: K,
) -> Result<AdaptedProcess>
where
    P: Fn(usize, usize, &mut [f64]) + Sync,
    K: Fn(usize, usize, usize, &[f64], &mut [f64], &mut [f64]) + Sync,
{
    let n = tree.steps();
    let dt = tree.dt();
    let mut slices: Vec<NodeField> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut data = vec![0.0; dim << i];
        data.par_chunks_mut(dim).enumerate().for_each(|(node, out)| {
            phi(i, node, out);
            let mut drift = vec![0.0; dim];
            let mut diff = vec![0.0; dim];
            for (j, past) in slices.iter().enumerate() {
                drift.iter_mut().for_each(|d| *d = 0.0);
                diff.iter_mut().for_each(|d| *d = 0.0);
                kernel(i, j, node, past.at_descendant(node, i), &mut drift, &mut diff);
                let dw = tree.increment(j, node, i);
                for c in 0..dim {
                    out[c] += drift[c] * dt + diff[c] * dw;
                }
            }
        });
        let field = NodeField::from_values(i, dim, data)?;
        if !field.is_finite() {
            return Err(Error::NonFinite { context, index: i });
        }
        slices.push(field);
    }
    AdaptedProcess::from_slices(dim, slices)
}

/// Controlled state equation with the coefficient set's `φ, b, σ`.
pub fn solve_fsvie(
    c: &CoefficientSet,
    tree: &ScenarioTree,
    u: &ControlProcess,
) -> Result<ForwardSolution> {
    let n = c.dims().n;
    if u.len() < tree.steps() || u.dim() != c.dims().l {
        return Err(Error::Dimension {
            context: "control length",
            expected: tree.steps(),
            found: u.len(),
        });
    }
    let phis: Vec<Vec<f64>> = (0..=tree.steps())
        .map(|i| c.phi(tree.time(i)).iter().copied().collect())
        .collect();
    let u = u.values();
    let x = forward_recursion(
        tree,
        n,
        "solve_fsvie",
        |i, _, out| out.copy_from_slice(&phis[i]),
        |i, j, node, xj, drift, diff| {
            let uj = u.at(j, node, i);
            let (ti, tj) = (tree.time(i), tree.time(j));
            drift.copy_from_slice(c.b(ti, tj, xj, uj).as_slice());
            diff.copy_from_slice(c.sigma(ti, tj, xj, uj).as_slice());
        },
    )?;
    Ok(ForwardSolution { x })
}

/// `X(t_i) = φ(t_i) + Σ_{j<i} A0(i,j) X(t_j) dt + Σ_{j<i} C0(i,j) X(t_j) ΔW_j`.
///
/// `phi` must cover indices `0..=N`; the kernels need rows `0..=N`.
pub fn solve_linear_fsvie(
    tree: &ScenarioTree,
    a0: &MatrixKernel,
    c0: &MatrixKernel,
    phi: &AdaptedProcess,
) -> Result<ForwardSolution> {
    if phi.len() != tree.steps() + 1 {
        return Err(Error::Dimension {
            context: "linear FSVIE free term length",
            expected: tree.steps() + 1,
            found: phi.len(),
        });
    }
    let x = forward_recursion(
        tree,
        phi.dim(),
        "solve_linear_fsvie",
        |i, node, out| out.copy_from_slice(phi.slice(i).at(node)),
        |i, j, node, xj, drift, diff| {
            let nj = node >> (i - j);
            a0.apply_add(i, j, nj, j, xj, 1.0, drift);
            c0.apply_add(i, j, nj, j, xj, 1.0, diff);
        },
    )?;
    Ok(ForwardSolution { x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_family, BoxSet};
    use serde_json::json;

    fn tree(n: usize, t: f64) -> ScenarioTree {
        ScenarioTree::with_steps(t, n).unwrap()
    }

    fn zero_control(tree: &ScenarioTree) -> ControlProcess {
        ControlProcess::constant(tree, &[0.0], &BoxSet::symmetric(1, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn zero_family_gives_zero_state() {
        let tr = tree(3, 1.0);
        let c = builtin_family("zero", &json!({})).unwrap();
        let sol = solve_fsvie(&c, &tr, &zero_control(&tr)).unwrap();
        assert_eq!(sol.x.len(), 4);
        assert_eq!(sol.x.max_abs(), 0.0);
    }

    #[test]
    fn hand_unrolled_linear_drift() {
        let tr = tree(2, 1.0);
        let c = builtin_family("linear_volterra", &json!({ "phi": [1.0], "b_x": [[1.0]] })).unwrap();
        let x = solve_fsvie(&c, &tr, &zero_control(&tr)).unwrap().x;
        assert_eq!(x.slice(0).values(), &[1.0]);
        assert!(x.slice(1).values().iter().all(|v| *v == 1.5));
        assert!(x.slice(2).values().iter().all(|v| *v == 2.25));
    }

    #[test]
    fn pure_noise_gives_brownian_motion() {
        let tr = tree(4, 0.6);
        let c = builtin_family("linear_volterra", &json!({ "sigma0": [1.0] })).unwrap();
        let x = solve_fsvie(&c, &tr, &zero_control(&tr)).unwrap().x;
        for i in 0..=4 {
            assert!(x.slice(i).max_abs_diff(&tr.brownian(i)) < 1e-14);
        }
    }

    #[test]
    fn linear_solver_matches_coefficient_path() {
        let tr = tree(3, 1.0);
        let one = |_: usize, _: usize, _: usize| nalgebra::DMatrix::from_element(1, 1, 1.0);
        let a0 = MatrixKernel::from_fn(4, 3, 1, 1, |i, j| j < i, one);
        let c0 = MatrixKernel::zeros(4, 3, 1, 1);
        let phi = AdaptedProcess::constant(&[1.0], 4);
        let lin = solve_linear_fsvie(&tr, &a0, &c0, &phi).unwrap().x;
        let c = builtin_family("linear_volterra", &json!({ "phi": [1.0], "b_x": [[1.0]] })).unwrap();
        let x = solve_fsvie(&c, &tr, &zero_control(&tr)).unwrap().x;
        assert!(lin.max_abs_diff(&x) < 1e-14);
        let zero = MatrixKernel::zeros(4, 3, 1, 1);
        assert_eq!(solve_linear_fsvie(&tr, &zero, &zero, &phi).unwrap().x, phi);
    }

    #[test]
    fn blow_up_is_reported() {
        let tr = tree(6, 1.0);
        let c = builtin_family("smooth_nonlinear", &json!({ "b_x": [[1e300]], "phi": [1e10] }))
            .unwrap();
        let err = solve_fsvie(&c, &tr, &zero_control(&tr)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
