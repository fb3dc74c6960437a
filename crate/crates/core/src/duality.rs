//! Linear BSVIEs and their adjoint Fredholm–Volterra equation.
//!
//! For bounded adapted kernels `A, B, C` the linear BSVIE
//!
//! ```text
//! Y(t_i) = ψ(t_i) + Σ_{j≥i} [A(i,j) Y(t_j) + B(i,j) Z(i,j) + C(i,j) Z(j,i)] dt − Σ_{j≥i} Z(i,j) ΔW_j
//! ```
//!
//! is paired with the equation for a non-adapted `ξ` driven by `(α, β)`:
//!
//! ```text
//! ξ(t_i) = α(t_i) + Σ_{j≤i} A(j,i)ᵀ E_i[ξ(t_j)] dt + Σ_{j<i} E_j[C(j,i)ᵀ ξ(t_j)] ΔW_j
//!        + Σ_j β(i,j) ΔW_j + Σ_{j≥i} B(i,j)ᵀ E_j[ξ(t_i)] ΔW_j + C(i,i)ᵀ E_i[ξ(t_i)] ΔW_i
//! ```
//!
//! so that for every free term `ψ`
//!
//! ```text
//! E Σ_i ⟨ψ(t_i), ξ(t_i)⟩ dt = E Σ_i ⟨Y(t_i), α(t_i)⟩ dt + E Σ_{i,j} ⟨Z(i,j), β(i,j)⟩ dt².
//! ```
//!
//! The diagonal terms `A(i,i)` and `C(i,i)` are what the left-endpoint sums
//! of the BSVIE require for the identity to hold exactly on the tree;
//! dropping them leaves an `O(dt)` gap.
//!
//! `ξ(t_i)` is computed through `λ(i, r) = E_r[ξ(t_i)]`, which solves a
//! forward SDE in `r ≥ i` started from a level-`i` value that reads `ξ(t_j)`
//! only for `j < i`. A Picard sweep over all `i` therefore fixes one more
//! index per sweep, and `N` sweeps reach the exact fixed point.
//!
//! All double sums carry `dt²`; mixing weights breaks the identity.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bsvie::{solve_bsvie_msolution, Generator, GeneratorSpec, MSolution, SolverConfig};
use crate::error::{Error, Result};
use crate::fsvie::solve_linear_fsvie;
use crate::kernel::MatrixKernel;
use crate::lattice::{
    dot, expect_dot, AdaptedProcess, Domain, NodeField, ScenarioTree, TerminalProcess,
    VolterraField,
};

/// Kernels and free term of a linear BSVIE. Kernels have rows and columns
/// `0..N`; entries with `j < i` are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBSVIEData {
    pub a: MatrixKernel,
    pub b: MatrixKernel,
    pub c: MatrixKernel,
    /// One slice per index `0..=N`.
    pub psi: TerminalProcess,
}

impl LinearBSVIEData {
    pub fn dim(&self) -> usize {
        self.psi.dim()
    }

    /// Largest kernel entry magnitude.
    pub fn bound(&self) -> f64 {
        self.a.max_abs().max(self.b.max_abs()).max(self.c.max_abs())
    }

    fn check(&self, tree: &ScenarioTree) -> Result<()> {
        let n = tree.steps();
        if self.psi.len() != n + 1 {
            return Err(Error::Dimension {
                context: "linear BSVIE free term length",
                expected: n + 1,
                found: self.psi.len(),
            });
        }
        for k in [&self.a, &self.b, &self.c] {
            if k.out_dim() != self.dim() || k.in_dim() != self.dim() {
                return Err(Error::Dimension {
                    context: "linear BSVIE kernel size",
                    expected: self.dim(),
                    found: k.out_dim(),
                });
            }
        }
        Ok(())
    }
}

/// Driving data of the adjoint equation: `α` on `0..N`, `β` on the full
/// square `0..N × 0..N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointData {
    pub alpha: AdaptedProcess,
    pub beta: VolterraField,
}

impl AdjointData {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            alpha: AdaptedProcess::zeros(m, n),
            beta: VolterraField::zeros(m, Domain::FullSquare, n, n),
        }
    }
}

/// Generator `A(i,j) y + B(i,j) z + C(i,j) z' + s(i,j)` with an optional
/// source field `s` (entries on level `j`).
pub struct LinearGenerator<'a> {
    pub a: &'a MatrixKernel,
    pub b: &'a MatrixKernel,
    pub c: &'a MatrixKernel,
    pub source: Option<&'a VolterraField>,
}

impl Generator for LinearGenerator<'_> {
    fn dim(&self) -> usize {
        self.a.out_dim()
    }

    fn uses_zprime(&self) -> bool {
        !self.c.is_zero()
    }

    fn eval(
        &self,
        i: usize,
        j: usize,
        node: usize,
        y: &[f64],
        z: &[f64],
        zp: &[f64],
        out: &mut [f64],
    ) {
        self.a.apply_add(i, j, node, j, y, 1.0, out);
        self.b.apply_add(i, j, node, j, z, 1.0, out);
        self.c.apply_add(i, j, node, j, zp, 1.0, out);
        if let Some(s) = self.source.and_then(|s| s.get(i, j)) {
            for (o, v) in out.iter_mut().zip(s.at(node)) {
                *o += v;
            }
        }
    }
}

/// M-solution of the linear BSVIE by Picard iteration.
pub fn solve_linear_bsvie(
    tree: &ScenarioTree,
    d: &LinearBSVIEData,
    cfg: &SolverConfig,
) -> Result<MSolution> {
    d.check(tree)?;
    let gen = LinearGenerator {
        a: &d.a,
        b: &d.b,
        c: &d.c,
        source: None,
    };
    let spec = GeneratorSpec::new(d.psi.clone(), gen)?;
    solve_bsvie_msolution(tree, &spec, cfg)
}

/// Leaf-level `Σ_{j<i} E_j[C(j,i)ᵀ ξ(t_j)] ΔW_j` pieces and the other
/// level-`i` terms of `λ(i, i)` before the diagonal solve.
fn lambda_start(
    tree: &ScenarioTree,
    i: usize,
    xi: &TerminalProcess,
    d: &LinearBSVIEData,
    a: &AdjointData,
) -> NodeField {
    let n = tree.steps();
    let m = d.dim();
    let dt = tree.dt();
    let mut start = a.alpha.slice(i).clone();
    for j in 0..i {
        // β(i, j) ΔW_j
        let beta = a.beta.entry(i, j);
        // A(j, i)ᵀ E_i[ξ(t_j)] dt
        let e_i = xi.slice(j).cond_expect(i).expect("level within tree");
        // E_j[C(j, i)ᵀ ξ(t_j)]
        let c_part = if d.c.is_zero_entry(j, i) {
            None
        } else {
            let prod = NodeField::from_fn(n, m, |leaf, out| {
                d.c.apply_t_add(j, i, leaf, n, xi.slice(j).at(leaf), 1.0, out)
            });
            Some(prod.cond_expect(j).expect("level within tree"))
        };
        for v in 0..(1usize << i) {
            let dw = tree.increment(j, v, i);
            let vj = v >> (i - j);
            let mut tmp = vec![0.0; m];
            d.a.apply_t_add(j, i, v, i, e_i.at(v), dt, &mut tmp);
            let out = start.at_mut(v);
            for c in 0..m {
                out[c] += beta.at(vj)[c] * dw + tmp[c];
            }
            if let Some(cp) = &c_part {
                for c in 0..m {
                    out[c] += cp.at(vj)[c] * dw;
                }
            }
        }
    }
    // implicit diagonal: (I − A(i,i)ᵀ dt) λ = start
    if !d.a.is_zero_entry(i, i) {
        for v in 0..(1usize << i) {
            let aii = d.a.get(i, i, v, i).expect("entry present");
            let lhs = DMatrix::identity(m, m) - aii.transpose() * dt;
            let rhs = DVector::from_column_slice(start.at(v));
            let sol = lhs
                .lu()
                .solve(&rhs)
                .expect("I - A dt is invertible for bounded A and small dt");
            start.at_mut(v).copy_from_slice(sol.as_slice());
        }
    }
    start
}

/// `λ(i, r) = E_r[ξ(t_i)]` for `r = i..=N`, built from the frozen
/// `ξ(t_j)`, `j < i`.
pub fn xi_lambda_path(
    tree: &ScenarioTree,
    i: usize,
    xi_frozen: &TerminalProcess,
    d: &LinearBSVIEData,
    a: &AdjointData,
) -> Vec<NodeField> {
    let n = tree.steps();
    let m = d.dim();
    let mut path = Vec::with_capacity(n - i + 1);
    path.push(lambda_start(tree, i, xi_frozen, d, a));
    for r in i..n {
        let prev = path.last().expect("path is non-empty");
        let beta = a.beta.entry(i, r);
        let next = NodeField::from_fn(r + 1, m, |w, out| {
            let v = w >> 1;
            let lam = prev.at(v);
            let dw = tree.increment(r, w, r + 1);
            let mut zeta = beta.at(v).to_vec();
            d.b.apply_t_add(i, r, v, r, lam, 1.0, &mut zeta);
            if r == i {
                d.c.apply_t_add(i, i, v, i, lam, 1.0, &mut zeta);
            }
            for c in 0..m {
                out[c] = lam[c] + zeta[c] * dw;
            }
        });
        path.push(next);
    }
    path
}

/// `ξ(t_i) = λ(i, N)` given the frozen `ξ(t_j)`, `j < i`.
pub fn xi_forward_slice(
    tree: &ScenarioTree,
    i: usize,
    xi_frozen: &TerminalProcess,
    d: &LinearBSVIEData,
    a: &AdjointData,
) -> NodeField {
    xi_lambda_path(tree, i, xi_frozen, d, a)
        .pop()
        .expect("path is non-empty")
}

/// One Picard sweep of the adjoint map over all `i < N`.
pub fn xi_sweep(
    tree: &ScenarioTree,
    xi_frozen: &TerminalProcess,
    d: &LinearBSVIEData,
    a: &AdjointData,
) -> TerminalProcess {
    let n = tree.steps();
    let slices: Vec<NodeField> = (0..n)
        .into_par_iter()
        .map(|i| xi_forward_slice(tree, i, xi_frozen, d, a))
        .collect();
    TerminalProcess::from_fields(d.dim(), n, slices).expect("slices are leaf fields")
}

#[derive(Clone, Debug, PartialEq)]
pub struct XiSolution {
    /// Indices `0..N`, leaf-resolved.
    pub xi: TerminalProcess,
    /// Sweeps performed, including the confirming one.
    pub sweeps: usize,
    pub residual_trail: Vec<f64>,
    /// Path-wise defect of the adjoint equation.
    pub equation_residual: f64,
}

fn weighted_change(tree: &ScenarioTree, a: &TerminalProcess, b: &TerminalProcess, beta: f64) -> f64 {
    (0..a.len())
        .map(|i| {
            let d = a.slice(i).sub(b.slice(i));
            (beta * tree.time(i)).exp() * d.mean_square() * tree.dt()
        })
        .sum::<f64>()
        .sqrt()
}

/// Solves the adjoint equation by Picard sweeps from `ξ ≡ 0`.
pub fn solve_xi(
    tree: &ScenarioTree,
    d: &LinearBSVIEData,
    a: &AdjointData,
    cfg: &SolverConfig,
) -> Result<XiSolution> {
    cfg.validate()?;
    d.check(tree)?;
    let n = tree.steps();
    let beta = cfg.beta_for(tree);
    let mut xi = TerminalProcess::zeros(d.dim(), n, n);
    let mut trail = Vec::new();
    for sweep in 1..=cfg.max_iter {
        let next = xi_sweep(tree, &xi, d, a);
        if !next.is_finite() {
            return Err(Error::NonFinite {
                context: "solve_xi",
                index: sweep,
            });
        }
        let change = weighted_change(tree, &next, &xi, beta);
        trail.push(change);
        xi = next;
        if change <= cfg.picard_tol {
            let equation_residual = xi_residual(tree, d, a, &xi);
            return Ok(XiSolution {
                xi,
                sweeps: sweep,
                residual_trail: trail,
                equation_residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual: trail.last().copied().unwrap_or(f64::NAN),
    })
}

/// Path-wise defect of the adjoint equation, evaluated term by term with
/// conditional expectations of the leaf fields.
pub fn xi_residual(
    tree: &ScenarioTree,
    d: &LinearBSVIEData,
    a: &AdjointData,
    xi: &TerminalProcess,
) -> f64 {
    let n = tree.steps();
    let m = d.dim();
    let dt = tree.dt();
    (0..n)
        .into_par_iter()
        .map(|i| {
            // E_r[ξ(t_i)] for every r and E_i[ξ(t_j)] for j ≤ i
            let own: Vec<NodeField> = (0..=n)
                .map(|r| xi.slice(i).cond_expect(r).expect("level within tree"))
                .collect();
            let others: Vec<NodeField> = (0..=i)
                .map(|j| xi.slice(j).cond_expect(i).expect("level within tree"))
                .collect();
            let c_parts: Vec<Option<NodeField>> = (0..i)
                .map(|j| {
                    (!d.c.is_zero_entry(j, i)).then(|| {
                        NodeField::from_fn(n, m, |leaf, out| {
                            d.c.apply_t_add(j, i, leaf, n, xi.slice(j).at(leaf), 1.0, out)
                        })
                        .cond_expect(j)
                        .expect("level within tree")
                    })
                })
                .collect();
            let mut worst = 0.0_f64;
            for leaf in 0..tree.leaves() {
                let vi = leaf >> (n - i);
                let mut rhs = a.alpha.slice(i).at(vi).to_vec();
                for j in 0..=i {
                    d.a.apply_t_add(j, i, vi, i, others[j].at(vi), dt, &mut rhs);
                }
                for (j, cp) in c_parts.iter().enumerate() {
                    if let Some(cp) = cp {
                        let dw = tree.increment(j, leaf, n);
                        for c in 0..m {
                            rhs[c] += cp.at(leaf >> (n - j))[c] * dw;
                        }
                    }
                }
                for j in 0..n {
                    let vj = leaf >> (n - j);
                    let dw = tree.increment(j, leaf, n);
                    let mut zeta = a.beta.entry(i, j).at(vj).to_vec();
                    if j >= i {
                        d.b.apply_t_add(i, j, vj, j, own[j].at(vj), 1.0, &mut zeta);
                    }
                    if j == i {
                        d.c.apply_t_add(i, i, vj, i, own[i].at(vj), 1.0, &mut zeta);
                    }
                    for c in 0..m {
                        rhs[c] += zeta[c] * dw;
                    }
                }
                for c in 0..m {
                    worst = worst.max((rhs[c] - xi.slice(i).at(leaf)[c]).abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Both sides of the duality identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityPair {
    pub lhs: f64,
    pub rhs: f64,
    pub bsvie_iterations: usize,
    pub xi_sweeps: usize,
    pub xi_residual: f64,
}

impl DualityPair {
    pub fn abs_err(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }

    /// `|lhs − rhs| / (|lhs| + 1)`.
    pub fn rel_err(&self) -> f64 {
        self.abs_err() / (self.lhs.abs() + 1.0)
    }
}

/// `E Σ_{i<N} ⟨ψ(t_i), ξ(t_i)⟩ dt`.
pub fn pairing_lhs(tree: &ScenarioTree, psi: &TerminalProcess, xi: &TerminalProcess) -> f64 {
    (0..tree.steps())
        .map(|i| expect_dot(psi.slice(i), xi.slice(i)) * tree.dt())
        .sum()
}

/// `E Σ_{i<N} ⟨Y(t_i), α(t_i)⟩ dt + E Σ_{i,j<N} ⟨Z(i,j), β(i,j)⟩ dt²`.
pub fn pairing_rhs(
    tree: &ScenarioTree,
    y: &AdaptedProcess,
    z: &VolterraField,
    a: &AdjointData,
) -> f64 {
    let n = tree.steps();
    let dt = tree.dt();
    let mut total = 0.0;
    for i in 0..n {
        total += expect_dot(y.slice(i), a.alpha.slice(i)) * dt;
        for j in 0..n {
            total += expect_dot(z.entry(i, j), a.beta.entry(i, j)) * dt * dt;
        }
    }
    total
}

/// Solves both equations independently and evaluates the two sides.
pub fn eval_duality_pair(
    tree: &ScenarioTree,
    d: &LinearBSVIEData,
    a: &AdjointData,
    cfg: &SolverConfig,
) -> Result<DualityPair> {
    let sol = solve_linear_bsvie(tree, d, cfg)?;
    let xi = solve_xi(tree, d, a, cfg)?;
    Ok(DualityPair {
        lhs: pairing_lhs(tree, &d.psi, &xi.xi),
        rhs: pairing_rhs(tree, &sol.y, &sol.z, a),
        bsvie_iterations: sol.stats.iterations,
        xi_sweeps: xi.sweeps,
        xi_residual: xi.equation_residual,
    })
}

/// Forward kernels `A0, C0` as the backward data `A(i,j) = A0(j,i)ᵀ`,
/// `C(i,j) = C0(j,i)ᵀ` for `j > i`, `B = 0`, with `α = φ` and `β = 0`.
pub fn specialize_forward_backward(
    tree: &ScenarioTree,
    a0: &MatrixKernel,
    c0: &MatrixKernel,
    phi: &AdaptedProcess,
    psi: &TerminalProcess,
) -> (LinearBSVIEData, AdjointData) {
    let n = tree.steps();
    let m = phi.dim();
    let data = LinearBSVIEData {
        a: a0.swapped_upper(n, n),
        b: MatrixKernel::zeros(n, n, m, m),
        c: c0.swapped_upper(n, n),
        psi: psi.clone(),
    };
    let alpha = AdaptedProcess::from_slices(m, phi.slices()[..n].to_vec())
        .expect("prefix of an adapted process");
    let adj = AdjointData {
        alpha,
        beta: VolterraField::zeros(m, Domain::FullSquare, n, n),
    };
    (data, adj)
}

/// Forward-backward pairing: `E Σ ⟨ψ, X⟩ dt` with `X` from the linear
/// FSVIE against `E Σ ⟨φ, p⟩ dt` with `(p, q)` the M-solution of the
/// backward equation with swapped, transposed kernels.
pub fn eval_forward_backward_duality(
    tree: &ScenarioTree,
    a0: &MatrixKernel,
    c0: &MatrixKernel,
    phi: &AdaptedProcess,
    psi: &TerminalProcess,
    cfg: &SolverConfig,
) -> Result<DualityPair> {
    let n = tree.steps();
    let x = solve_linear_fsvie(tree, a0, c0, phi)?.x;
    let (data, _) = specialize_forward_backward(tree, a0, c0, phi, psi);
    let sol = solve_linear_bsvie(tree, &data, cfg)?;
    let dt = tree.dt();
    let lhs = (0..n)
        .map(|i| expect_dot(psi.slice(i), x.slice(i)) * dt)
        .sum();
    let rhs = (0..n)
        .map(|i| expect_dot(phi.slice(i), sol.y.slice(i)) * dt)
        .sum();
    Ok(DualityPair {
        lhs,
        rhs,
        bsvie_iterations: sol.stats.iterations,
        xi_sweeps: 0,
        xi_residual: 0.0,
    })
}

/// Seeded random bounded instance: kernels uniform in `[-bound, bound]`,
/// free term, `α` and `β` uniform in `[-1, 1]`.
pub fn random_instance(
    tree: &ScenarioTree,
    m: usize,
    bound: f64,
    seed: u64,
) -> (LinearBSVIEData, AdjointData) {
    let n = tree.steps();
    let upper = |i: usize, j: usize| j >= i;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_seed = || rng.gen::<u64>();
    let a = MatrixKernel::random(n, n, m, m, bound, upper, next_seed());
    let b = MatrixKernel::random(n, n, m, m, bound, upper, next_seed());
    let c = MatrixKernel::random(n, n, m, m, bound, upper, next_seed());
    let mut rng = ChaCha8Rng::seed_from_u64(next_seed());
    let mut unit = move || rng.gen_range(-1.0..1.0);
    let psi = TerminalProcess::from_fn(m, n + 1, n, |_, _, out| {
        out.iter_mut().for_each(|x| *x = unit())
    });
    let alpha = AdaptedProcess::from_fn(m, n, |_, _, out| out.iter_mut().for_each(|x| *x = unit()));
    let beta = VolterraField::from_fn(m, Domain::FullSquare, n, n, |_, _, _, out| {
        out.iter_mut().for_each(|x| *x = unit())
    });
    (
        LinearBSVIEData { a, b, c, psi },
        AdjointData { alpha, beta },
    )
}

/// Seeded random forward kernels (rows `0..=N`, strictly lower), free term
/// `φ` on `0..=N` and `ψ` on `0..=N`.
pub fn random_forward_backward_instance(
    tree: &ScenarioTree,
    m: usize,
    bound: f64,
    seed: u64,
) -> (MatrixKernel, MatrixKernel, AdaptedProcess, TerminalProcess) {
    let n = tree.steps();
    let lower = |i: usize, j: usize| j < i;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a0 = MatrixKernel::random(n + 1, n, m, m, bound, lower, rng.gen());
    let c0 = MatrixKernel::random(n + 1, n, m, m, bound, lower, rng.gen());
    let phi = AdaptedProcess::from_fn(m, n + 1, |_, _, out| {
        out.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0))
    });
    let psi = TerminalProcess::from_fn(m, n + 1, n, |_, _, out| {
        out.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0))
    });
    (a0, c0, phi, psi)
}

/// Largest gap between the representation coefficients of `ξ(t_i)` and
/// `B(i,r)ᵀ λ(i,r) + β(i,r)` (plus `C(i,i)ᵀ λ(i,i)` at `r = i`), and between
/// `E_r[ξ(t_i)]` and `λ(i, r)`, over `r ≥ i`.
pub fn xi_structure_gap(
    tree: &ScenarioTree,
    d: &LinearBSVIEData,
    a: &AdjointData,
    xi: &TerminalProcess,
) -> f64 {
    let n = tree.steps();
    let m = d.dim();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let path = xi_lambda_path(tree, i, xi, d, a);
        let (_, rep) = tree.martingale_repr(xi.slice(i));
        for r in i..=n {
            let ce = xi.slice(i).cond_expect(r).expect("level within tree");
            worst = worst.max(ce.max_abs_diff(&path[r - i]));
        }
        for r in i..n {
            let lam = &path[r - i];
            for v in 0..(1usize << r) {
                let mut zeta = a.beta.entry(i, r).at(v).to_vec();
                d.b.apply_t_add(i, r, v, r, lam.at(v), 1.0, &mut zeta);
                if r == i {
                    d.c.apply_t_add(i, i, v, i, lam.at(v), 1.0, &mut zeta);
                }
                for c in 0..m {
                    worst = worst.max((zeta[c] - rep.slice(r).at(v)[c]).abs());
                }
            }
        }
    }
    worst
}

/// `E⟨x, y⟩` summed over the first `len` slices of two leaf processes.
pub fn terminal_dot(a: &TerminalProcess, b: &TerminalProcess, len: usize) -> f64 {
    (0..len)
        .map(|i| {
            let (x, y) = (a.slice(i), b.slice(i));
            (0..x.width()).map(|v| dot(x.at(v), y.at(v))).sum::<f64>() / x.width() as f64
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tree(n: usize, t: f64) -> ScenarioTree {
        ScenarioTree::with_steps(t, n).unwrap()
    }

    fn zero_data(tree: &ScenarioTree, m: usize, psi: TerminalProcess) -> LinearBSVIEData {
        let n = tree.steps();
        LinearBSVIEData {
            a: MatrixKernel::zeros(n, n, m, m),
            b: MatrixKernel::zeros(n, n, m, m),
            c: MatrixKernel::zeros(n, n, m, m),
            psi,
        }
    }

    #[test]
    fn degenerate_kernels() {
        let tr = tree(3, 1.0);
        let (mut d, a) = random_instance(&tr, 2, 0.5, 1);
        d.a = MatrixKernel::zeros(3, 3, 2, 2);
        d.b = d.a.clone();
        d.c = d.a.clone();
        let sol = solve_linear_bsvie(&tr, &d, &SolverConfig::default()).unwrap();
        for i in 0..=3 {
            let ce = d.psi.slice(i).cond_expect(i).unwrap();
            assert!(sol.y.slice(i).max_abs_diff(&ce) < 1e-14);
        }
        let xi = solve_xi(&tr, &d, &a, &SolverConfig::default()).unwrap();
        assert_eq!(xi.sweeps, 2);
        for i in 0..3 {
            let mut expect = a.alpha.slice(i).lift(3);
            for j in 0..3 {
                let beta = a.beta.entry(i, j);
                let add = NodeField::from_fn(3, 2, |leaf, out| {
                    let dw = tr.increment(j, leaf, 3);
                    for c in 0..2 {
                        out[c] = beta.at_descendant(leaf, 3)[c] * dw;
                    }
                });
                expect.add_scaled(1.0, &add);
            }
            assert!(xi.xi.slice(i).max_abs_diff(&expect) < 1e-14);
        }
    }

    #[test]
    fn one_step_free_term_is_the_increment() {
        let tr = tree(1, 1.0);
        let psi = TerminalProcess::from_fields(1, 1, vec![tr.brownian(1), tr.brownian(1)]).unwrap();
        let d = zero_data(&tr, 1, psi);
        let sol = solve_linear_bsvie(&tr, &d, &SolverConfig::default()).unwrap();
        assert_eq!(sol.y.slice(0).values(), &[0.0]);
        assert_eq!(sol.z.entry(0, 0).values(), &[1.0]);
        // β(0,0) = 1, α = 0: both sides equal E[ΔW0²] = 1
        let mut adj = AdjointData::zeros(1, 1);
        adj.beta = VolterraField::from_fn(1, Domain::FullSquare, 1, 1, |_, _, _, out| out[0] = 1.0);
        let pair = eval_duality_pair(&tr, &d, &adj, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(pair.lhs, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pair.rhs, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hand_unrolled_forward_slice() {
        // N = 1, α = 1, β = 0, B(0,0) = 1, dt = 1: ξ = 1 + ΔW0 on the leaves
        let tr = tree(1, 1.0);
        let mut d = zero_data(&tr, 1, TerminalProcess::zeros(1, 2, 1));
        d.b = MatrixKernel::from_fn(1, 1, 1, 1, |_, _| true, |_, _, _| DMatrix::from_element(1, 1, 1.0));
        let a = AdjointData {
            alpha: AdaptedProcess::constant(&[1.0], 1),
            beta: VolterraField::zeros(1, Domain::FullSquare, 1, 1),
        };
        let xi = xi_forward_slice(&tr, 0, &TerminalProcess::zeros(1, 1, 1), &d, &a);
        assert_eq!(xi.values(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_data_gives_zero_pair() {
        let tr = tree(2, 1.0);
        let d = zero_data(&tr, 1, TerminalProcess::zeros(1, 3, 2));
        let pair = eval_duality_pair(&tr, &d, &AdjointData::zeros(1, 2), &SolverConfig::default())
            .unwrap();
        assert_eq!((pair.lhs, pair.rhs), (0.0, 0.0));
    }

    #[test]
    fn random_duality_and_structure() {
        let tr = tree(4, 1.0);
        for seed in 0..3 {
            let (d, a) = random_instance(&tr, 2, 0.8, seed);
            let pair = eval_duality_pair(&tr, &d, &a, &SolverConfig::default()).unwrap();
            assert!(pair.rel_err() <= 1e-9, "{pair:?}");
            assert!(pair.xi_residual <= 1e-10, "{pair:?}");
            let xi = solve_xi(&tr, &d, &a, &SolverConfig::default()).unwrap();
            assert!(xi_structure_gap(&tr, &d, &a, &xi.xi) < 1e-12);
        }
    }

    #[test]
    fn nilpotent_sweeps() {
        let tr = tree(4, 1.0);
        let (d, a) = random_instance(&tr, 1, 0.8, 5);
        let mut iterates = vec![TerminalProcess::zeros(1, 4, 4)];
        for _ in 0..5 {
            let next = xi_sweep(&tr, iterates.last().unwrap(), &d, &a);
            iterates.push(next);
        }
        assert_eq!(iterates[4], iterates[5]);
        assert_ne!(iterates[3], iterates[4]);
    }

    #[test]
    fn forward_backward_paths_agree() {
        let tr = tree(4, 1.0);
        let (a0, c0, phi, psi) = random_forward_backward_instance(&tr, 2, 0.8, 3);
        let cfg = SolverConfig::default();
        let fb = eval_forward_backward_duality(&tr, &a0, &c0, &phi, &psi, &cfg).unwrap();
        assert!(fb.rel_err() <= 1e-9, "{fb:?}");
        let (d, a) = specialize_forward_backward(&tr, &a0, &c0, &phi, &psi);
        let general = eval_duality_pair(&tr, &d, &a, &cfg).unwrap();
        assert!((general.lhs - fb.lhs).abs() <= 1e-10);
        assert!((general.rhs - fb.rhs).abs() <= 1e-10);
    }
}
