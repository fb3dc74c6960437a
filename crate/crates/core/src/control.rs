//! Optimal control of forward-backward Volterra systems.
//!
//! The state is the forward equation for `X` coupled to a backward equation
//! for `(Y, Z)` with free term `ψ(t_i, X(t_i), X(T))` and generator
//! `g(t_i, t_j, X(t_i), X(t_j), Y(t_j), Z(i,j), Z(j,i), u(t_j))`. Two cost
//! structures are supported:
//!
//! - [`ProblemKind::C1`]: `g` ignores `z'`, the backward equation has an
//!   adapted solution, and
//!   `J = E h(X(T), Y(0)) + E Σ_{i≤j<N} f(t_i, t_j, X_j, Y_j, Z(i,j), u_j) dt²`;
//! - [`ProblemKind::C2`]: `g` may read `z'`, the backward equation has an
//!   M-solution, and
//!   `J = E h(X(T), E Σ_i Y(t_i) dt) + E Σ_{i,j<N} f(…) dt²`.
//!
//! The directional derivative of `J` is computed three independent ways: a
//! finite difference of `J`, the linearized (variational) system, and the
//! pairing `E Σ_j ⟨G_j, v_j − ū_j⟩ dt` with the gradient `G` assembled from
//! the adjoint bundle `(λ, ξ, μ, ν, p, q)`. On the tree the last two agree to
//! solver precision because each adjoint step is an exact discrete identity.
//!
//! Two conventions differ from a literal transcription of the continuous
//! formulas, both forced by left-endpoint sums: sums over the outer index
//! that meet the diagonal (`i ≤ j`) include it, and the kernels of the
//! `(p, q)` equation are the state derivatives `b_x, σ_x` (not `b_u, σ_u`).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsvie::{
    solve_bsvie_adapted, solve_bsvie_msolution, GeneratorSpec, Generator, SolveStats,
    SolverConfig,
};
use crate::coefficients::{CoefficientSet, ControlProcess, Dims, GenArgs};
use crate::duality::{
    solve_linear_bsvie, solve_xi, AdjointData, LinearBSVIEData, LinearGenerator, XiSolution,
};
use crate::error::{Error, Result};
use crate::fsvie::{forward_recursion, solve_fsvie};
use crate::kernel::MatrixKernel;
use crate::lattice::{
    dot, expect_dot, AdaptedProcess, Domain, NodeField, ScenarioTree, TerminalProcess, TimeGrid,
    VolterraField,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemKind {
    C1,
    C2,
}

#[derive(Clone, Debug)]
pub struct ControlProblem {
    kind: ProblemKind,
    coeffs: CoefficientSet,
    tree: ScenarioTree,
    solver: SolverConfig,
}

impl ControlProblem {
    pub fn new(
        kind: ProblemKind,
        coeffs: CoefficientSet,
        grid: TimeGrid,
        solver: SolverConfig,
    ) -> Result<Self> {
        solver.validate()?;
        if kind == ProblemKind::C1 && coeffs.uses_zprime() {
            return Err(Error::KindMismatch(format!(
                "family `{}` has a generator reading z', which only C2 problems allow",
                coeffs.name()
            )));
        }
        Ok(Self {
            kind,
            coeffs,
            tree: ScenarioTree::new(grid),
            solver,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.coeffs
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    fn dims(&self) -> Dims {
        self.coeffs.dims()
    }

    /// Whether `(i, j)` lies in the cost's integration domain.
    fn in_domain(&self, i: usize, j: usize) -> bool {
        match self.kind {
            ProblemKind::C1 => i <= j,
            ProblemKind::C2 => true,
        }
    }

    fn zprime(&self) -> bool {
        self.kind == ProblemKind::C2 && self.coeffs.uses_zprime()
    }

    fn check_control(&self, u: &ControlProcess) -> Result<()> {
        if u.len() != self.tree.steps() || u.dim() != self.dims().l {
            return Err(Error::Dimension {
                context: "control process",
                expected: self.tree.steps(),
                found: u.len(),
            });
        }
        Ok(())
    }
}

/// `(X, Y, Z)` at a given control. `Z` is upper-triangular for C1 and on the
/// full square for C2.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTuple {
    pub x: AdaptedProcess,
    pub y: AdaptedProcess,
    pub z: VolterraField,
    pub stats: SolveStats,
}

struct StateGenerator<'a> {
    c: &'a CoefficientSet,
    tree: &'a ScenarioTree,
    x: &'a AdaptedProcess,
    u: &'a AdaptedProcess,
    zprime: bool,
}

impl Generator for StateGenerator<'_> {
    fn dim(&self) -> usize {
        self.c.dims().m
    }

    fn uses_zprime(&self) -> bool {
        self.zprime
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
        let args = GenArgs {
            xp: self.x.at(i, node, j),
            x: self.x.slice(j).at(node),
            y,
            z,
            zp,
            u: self.u.slice(j).at(node),
        };
        let g = self.c.g(self.tree.time(i), self.tree.time(j), &args);
        out.copy_from_slice(g.as_slice());
    }
}

fn state_free_term(p: &ControlProblem, x: &AdaptedProcess) -> TerminalProcess {
    let tree = &p.tree;
    let n = tree.steps();
    TerminalProcess::from_fn(p.dims().m, n + 1, n, |i, leaf, out| {
        let v = p.coeffs.psi(tree.time(i), x.at(i, leaf, n), x.slice(n).at(leaf));
        out.copy_from_slice(v.as_slice());
    })
}

/// Solves the forward equation, then the backward one.
pub fn solve_state(p: &ControlProblem, u: &ControlProcess) -> Result<StateTuple> {
    p.check_control(u)?;
    let x = solve_fsvie(&p.coeffs, &p.tree, u)?.x;
    let gen = StateGenerator {
        c: &p.coeffs,
        tree: &p.tree,
        x: &x,
        u: u.values(),
        zprime: p.zprime(),
    };
    let spec = GeneratorSpec::new(state_free_term(p, &x), gen)?;
    let (y, z, stats) = match p.kind {
        ProblemKind::C1 => {
            let s = solve_bsvie_adapted(&p.tree, &spec, &p.solver)?;
            (s.y, s.z, s.stats)
        }
        ProblemKind::C2 => {
            let s = solve_bsvie_msolution(&p.tree, &spec, &p.solver)?;
            (s.y, s.z, s.stats)
        }
    };
    Ok(StateTuple { x, y, z, stats })
}

/// The second argument of `h`: `Y(0)` for C1, `E Σ_i Y(t_i) dt` for C2.
fn h_argument(p: &ControlProblem, y: &AdaptedProcess) -> Vec<f64> {
    match p.kind {
        ProblemKind::C1 => y.slice(0).values().to_vec(),
        ProblemKind::C2 => {
            let mut acc = vec![0.0; y.dim()];
            for i in 0..p.tree.steps() {
                for (a, v) in acc.iter_mut().zip(y.slice(i).mean()) {
                    *a += v * p.tree.dt();
                }
            }
            acc
        }
    }
}

fn cost_of_state(p: &ControlProblem, st: &StateTuple, u: &ControlProcess) -> f64 {
    let tree = &p.tree;
    let n = tree.steps();
    let dt = tree.dt();
    let hy = h_argument(p, &st.y);
    let xn = st.x.slice(n);
    let terminal = (0..tree.leaves())
        .map(|leaf| p.coeffs.h(xn.at(leaf), &hy))
        .sum::<f64>()
        / tree.leaves() as f64;
    // rows in parallel, summed in a fixed order so the cost is reproducible
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                if !p.in_domain(i, j) {
                    continue;
                }
                let zij = st.z.entry(i, j);
                let width = 1usize << j;
                let mut e = 0.0;
                for v in 0..width {
                    e += p.coeffs.f(
                        tree.time(i),
                        tree.time(j),
                        st.x.slice(j).at(v),
                        st.y.slice(j).at(v),
                        zij.at(v),
                        u.values().slice(j).at(v),
                    );
                }
                acc += e / width as f64 * dt * dt;
            }
            acc
        })
        .collect();
    terminal + rows.iter().sum::<f64>()
}

/// Cost of the problem's kind at `u`.
pub fn eval_cost(p: &ControlProblem, u: &ControlProcess) -> Result<f64> {
    let st = solve_state(p, u)?;
    Ok(cost_of_state(p, &st, u))
}

/// `E h(X(T), Y(0)) + E Σ_{i≤j} f dt²`; C1 problems only.
pub fn eval_j1(p: &ControlProblem, u: &ControlProcess) -> Result<f64> {
    if p.kind != ProblemKind::C1 {
        return Err(Error::KindMismatch("J1 needs a C1 problem".into()));
    }
    eval_cost(p, u)
}

/// `E h(X(T), E Σ Y dt) + E Σ_{i,j} f dt²`; C2 problems only.
pub fn eval_j2(p: &ControlProblem, u: &ControlProcess) -> Result<f64> {
    if p.kind != ProblemKind::C2 {
        return Err(Error::KindMismatch("J2 needs a C2 problem".into()));
    }
    eval_cost(p, u)
}

/// All coefficient derivatives along a state trajectory.
#[derive(Clone, Debug)]
struct Linearization {
    // generator, entries (i, j) with j ≥ i, on level j
    gy: MatrixKernel,
    gz: MatrixKernel,
    gzp: MatrixKernel,
    gxp: MatrixKernel,
    gx: MatrixKernel,
    gu: MatrixKernel,
    // forward kernels, entries (i, j) with j < i ≤ N, on level j
    bx: MatrixKernel,
    bu: MatrixKernel,
    sx: MatrixKernel,
    su: MatrixKernel,
    // free term, [i][leaf]
    psi_xp: Vec<Vec<DMatrix<f64>>>,
    psi_x: Vec<Vec<DMatrix<f64>>>,
    // terminal cost gradients on the leaves
    hx: NodeField,
    hy: NodeField,
    // running cost gradients on the cost domain, entry (i, j) on level j
    fx: VolterraField,
    fy: VolterraField,
    fz: VolterraField,
    fu: VolterraField,
}

fn linearize(p: &ControlProblem, st: &StateTuple, u: &ControlProcess) -> Linearization {
    let tree = &p.tree;
    let n = tree.steps();
    let Dims { n: nx, m, l } = p.dims();
    let c = &p.coeffs;
    let u = u.values();
    let zeros_m = vec![0.0; m];
    let zprime = p.zprime();

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let gjacs: Vec<Vec<crate::coefficients::GenJacobian>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            (0..1usize << j)
                .map(|v| {
                    let zp = if zprime {
                        st.z.entry(j, i).at_descendant(v, j)
                    } else {
                        &zeros_m[..]
                    };
                    c.g_jac(
                        tree.time(i),
                        tree.time(j),
                        &GenArgs {
                            xp: st.x.at(i, v, j),
                            x: st.x.slice(j).at(v),
                            y: st.y.slice(j).at(v),
                            z: st.z.entry(i, j).at(v),
                            zp,
                            u: u.slice(j).at(v),
                        },
                    )
                })
                .collect()
        })
        .collect();
    let mut gy = MatrixKernel::zeros(n, n, m, m);
    let mut gz = MatrixKernel::zeros(n, n, m, m);
    let mut gzp = MatrixKernel::zeros(n, n, m, m);
    let mut gxp = MatrixKernel::zeros(n, n, m, nx);
    let mut gx = MatrixKernel::zeros(n, n, m, nx);
    let mut gu = MatrixKernel::zeros(n, n, m, l);
    for (&(i, j), jacs) in pairs.iter().zip(gjacs) {
        let take = |f: &dyn Fn(&crate::coefficients::GenJacobian) -> DMatrix<f64>| {
            jacs.iter().map(f).collect::<Vec<_>>()
        };
        gy.set(i, j, j, take(&|g| g.y.clone()));
        gz.set(i, j, j, take(&|g| g.z.clone()));
        if zprime {
            gzp.set(i, j, j, take(&|g| g.zp.clone()));
        }
        gxp.set(i, j, j, take(&|g| g.xp.clone()));
        gx.set(i, j, j, take(&|g| g.x.clone()));
        gu.set(i, j, j, take(&|g| g.u.clone()));
    }

    let lower: Vec<(usize, usize)> = (0..=n).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let fjacs: Vec<Vec<[DMatrix<f64>; 4]>> = lower
        .par_iter()
        .map(|&(i, j)| {
            (0..1usize << j)
                .map(|v| {
                    let (xj, uj) = (st.x.slice(j).at(v), u.slice(j).at(v));
                    let (bx, bu) = c.b_jac(tree.time(i), tree.time(j), xj, uj);
                    let (sx, su) = c.sigma_jac(tree.time(i), tree.time(j), xj, uj);
                    [bx, bu, sx, su]
                })
                .collect()
        })
        .collect();
    let mut bx = MatrixKernel::zeros(n + 1, n, nx, nx);
    let mut bu = MatrixKernel::zeros(n + 1, n, nx, l);
    let mut sx = MatrixKernel::zeros(n + 1, n, nx, nx);
    let mut su = MatrixKernel::zeros(n + 1, n, nx, l);
    for (&(i, j), jacs) in lower.iter().zip(fjacs) {
        for (k, target) in [&mut bx, &mut bu, &mut sx, &mut su].into_iter().enumerate() {
            target.set(i, j, j, jacs.iter().map(|js| js[k].clone()).collect());
        }
    }

    let xn = st.x.slice(n);
    let (psi_xp, psi_x): (Vec<_>, Vec<_>) = (0..=n)
        .into_par_iter()
        .map(|i| {
            (0..tree.leaves())
                .map(|leaf| c.psi_jac(tree.time(i), st.x.at(i, leaf, n), xn.at(leaf)))
                .unzip::<_, _, Vec<_>, Vec<_>>()
        })
        .unzip();

    let hy_arg = h_argument(p, &st.y);
    let mut hx = NodeField::zeros(n, nx);
    let mut hy = NodeField::zeros(n, m);
    for leaf in 0..tree.leaves() {
        let (gx_, gy_) = c.h_grad(xn.at(leaf), &hy_arg);
        hx.at_mut(leaf).copy_from_slice(gx_.as_slice());
        hy.at_mut(leaf).copy_from_slice(gy_.as_slice());
    }

    let mut fx = VolterraField::zeros(nx, Domain::FullSquare, n, n);
    let mut fy = VolterraField::zeros(m, Domain::FullSquare, n, n);
    let mut fz = VolterraField::zeros(m, Domain::FullSquare, n, n);
    let mut fu = VolterraField::zeros(l, Domain::FullSquare, n, n);
    let dom: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| p.in_domain(i, j))
        .collect();
    let fgrads: Vec<[NodeField; 4]> = dom
        .par_iter()
        .map(|&(i, j)| {
            let mut out = [
                NodeField::zeros(j, nx),
                NodeField::zeros(j, m),
                NodeField::zeros(j, m),
                NodeField::zeros(j, l),
            ];
            let zij = st.z.entry(i, j);
            for v in 0..1usize << j {
                let g = c.f_grad(
                    tree.time(i),
                    tree.time(j),
                    st.x.slice(j).at(v),
                    st.y.slice(j).at(v),
                    zij.at(v),
                    u.slice(j).at(v),
                );
                out[0].at_mut(v).copy_from_slice(g.x.as_slice());
                out[1].at_mut(v).copy_from_slice(g.y.as_slice());
                out[2].at_mut(v).copy_from_slice(g.z.as_slice());
                out[3].at_mut(v).copy_from_slice(g.u.as_slice());
            }
            out
        })
        .collect();
    for (&(i, j), [gx_, gy_, gz_, gu_]) in dom.iter().zip(fgrads) {
        fx.set(i, j, gx_);
        fy.set(i, j, gy_);
        fz.set(i, j, gz_);
        fu.set(i, j, gu_);
    }

    Linearization {
        gy,
        gz,
        gzp,
        gxp,
        gx,
        gu,
        bx,
        bu,
        sx,
        su,
        psi_xp,
        psi_x,
        hx,
        hy,
        fx,
        fy,
        fz,
        fu,
    }
}

/// Linearized state along the direction `v − ū`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalTuple {
    pub x1: AdaptedProcess,
    pub y1: AdaptedProcess,
    pub z1: VolterraField,
    pub direction: AdaptedProcess,
}

fn direction(u_bar: &ControlProcess, v: &ControlProcess) -> AdaptedProcess {
    v.values().sub(u_bar.values())
}

fn variational_from(
    p: &ControlProblem,
    lin: &Linearization,
    d: &AdaptedProcess,
) -> Result<VariationalTuple> {
    let tree = &p.tree;
    let n = tree.steps();
    let Dims { n: nx, m, .. } = p.dims();
    let x1 = forward_recursion(
        tree,
        nx,
        "variational state",
        |_, _, _| {},
        |i, j, node, x1j, drift, diff| {
            let vj = node >> (i - j);
            let dj = d.slice(j).at(vj);
            lin.bx.apply_add(i, j, vj, j, x1j, 1.0, drift);
            lin.bu.apply_add(i, j, vj, j, dj, 1.0, drift);
            lin.sx.apply_add(i, j, vj, j, x1j, 1.0, diff);
            lin.su.apply_add(i, j, vj, j, dj, 1.0, diff);
        },
    )?;
    let source = VolterraField::from_fn(m, Domain::UpperTriangle, n, n, |i, j, v, out| {
        lin.gxp.apply_add(i, j, v, j, x1.at(i, v, j), 1.0, out);
        lin.gx.apply_add(i, j, v, j, x1.slice(j).at(v), 1.0, out);
        lin.gu.apply_add(i, j, v, j, d.slice(j).at(v), 1.0, out);
    });
    let psi1 = TerminalProcess::from_fn(m, n + 1, n, |i, leaf, out| {
        let a = &lin.psi_xp[i][leaf] * DVector::from_column_slice(x1.at(i, leaf, n));
        let b = &lin.psi_x[i][leaf] * DVector::from_column_slice(x1.slice(n).at(leaf));
        for c in 0..m {
            out[c] = a[c] + b[c];
        }
    });
    let gen = LinearGenerator {
        a: &lin.gy,
        b: &lin.gz,
        c: &lin.gzp,
        source: Some(&source),
    };
    let spec = GeneratorSpec::new(psi1, gen)?;
    let (y1, z1) = match p.kind {
        ProblemKind::C1 => {
            let s = solve_bsvie_adapted(tree, &spec, &p.solver)?;
            (s.y, s.z)
        }
        ProblemKind::C2 => {
            let s = solve_bsvie_msolution(tree, &spec, &p.solver)?;
            (s.y, s.z)
        }
    };
    Ok(VariationalTuple {
        x1,
        y1,
        z1,
        direction: d.clone(),
    })
}

/// Solves the variational system at `ū` in the direction `v − ū`.
pub fn solve_variational(
    p: &ControlProblem,
    u_bar: &ControlProcess,
    v: &ControlProcess,
) -> Result<VariationalTuple> {
    p.check_control(v)?;
    let st = solve_state(p, u_bar)?;
    let lin = linearize(p, &st, u_bar);
    variational_from(p, &lin, &direction(u_bar, v))
}

fn derivative_from_tuple(p: &ControlProblem, lin: &Linearization, t: &VariationalTuple) -> f64 {
    let tree = &p.tree;
    let n = tree.steps();
    let dt = tree.dt();
    let mut total = expect_dot(&lin.hx, t.x1.slice(n));
    let ehy = lin.hy.mean();
    let y_part = match p.kind {
        ProblemKind::C1 => t.y1.slice(0).values().to_vec(),
        ProblemKind::C2 => h_argument(p, &t.y1),
    };
    total += dot(&ehy, &y_part);
    for i in 0..n {
        for j in 0..n {
            if !p.in_domain(i, j) {
                continue;
            }
            let running = expect_dot(lin.fx.entry(i, j), t.x1.slice(j))
                + expect_dot(lin.fy.entry(i, j), t.y1.slice(j))
                + expect_dot(lin.fz.entry(i, j), t.z1.entry(i, j))
                + expect_dot(lin.fu.entry(i, j), t.direction.slice(j));
            total += running * dt * dt;
        }
    }
    total
}

/// First variation of the cost from the variational system.
pub fn directional_derivative_variational(
    p: &ControlProblem,
    u_bar: &ControlProcess,
    v: &ControlProcess,
) -> Result<f64> {
    p.check_control(v)?;
    let st = solve_state(p, u_bar)?;
    let lin = linearize(p, &st, u_bar);
    let t = variational_from(p, &lin, &direction(u_bar, v))?;
    Ok(derivative_from_tuple(p, &lin, &t))
}

/// Solved adjoint processes at a control.
#[derive(Clone, Debug)]
pub struct AdjointBundle {
    /// C1 only, indices `0..=N`.
    pub lambda: Option<AdaptedProcess>,
    pub xi: XiSolution,
    /// `μ(t_j) = E_j[μ(T)]`, indices `0..=N`.
    pub mu: AdaptedProcess,
    /// Representation of `μ(T)`, indices `0..N`.
    pub nu: AdaptedProcess,
    /// Indices `0..=N`.
    pub p: AdaptedProcess,
    /// Full square.
    pub q: VolterraField,
    /// Control the bundle was solved at.
    pub control: ControlProcess,
    lin: Linearization,
}

/// Solves `λ`, `ξ`, `(μ, ν)` and `(p, q)` in that order at `ū`.
pub fn solve_adjoint_bundle(p: &ControlProblem, u_bar: &ControlProcess) -> Result<AdjointBundle> {
    let st = solve_state(p, u_bar)?;
    let lin = linearize(p, &st, u_bar);
    let tree = &p.tree;
    let n = tree.steps();
    let dt = tree.dt();
    let Dims { n: nx, m, .. } = p.dims();
    let ehy = lin.hy.mean();

    let lambda = (p.kind == ProblemKind::C1).then(|| {
        let mut slices = vec![NodeField::constant(0, &ehy)];
        for k in 0..n {
            let prev = slices.last().expect("non-empty");
            let next = NodeField::from_fn(k + 1, m, |w, out| {
                let v = w >> 1;
                let lam = prev.at(v);
                let dw = tree.increment(k, w, k + 1);
                out.copy_from_slice(lam);
                lin.gz.apply_t_add(0, k, v, k, lam, dw, out);
            });
            slices.push(next);
        }
        AdaptedProcess::from_slices(m, slices).expect("levels are consecutive")
    });

    // ξ
    let alpha = AdaptedProcess::from_fn(m, n, |j, v, out| {
        match &lambda {
            Some(lam) => lin.gy.apply_t_add(0, j, v, j, lam.slice(j).at(v), 1.0, out),
            None => out.copy_from_slice(&ehy),
        }
        for i in 0..n {
            if p.in_domain(i, j) {
                for (o, g) in out.iter_mut().zip(lin.fy.entry(i, j).at(v)) {
                    *o += g * dt;
                }
            }
        }
    });
    let beta = VolterraField::from_fn(m, Domain::FullSquare, n, n, |i, j, v, out| {
        if p.in_domain(i, j) {
            out.copy_from_slice(lin.fz.entry(i, j).at(v));
        }
    });
    let data = LinearBSVIEData {
        a: lin.gy.clone(),
        b: lin.gz.clone(),
        c: lin.gzp.clone(),
        psi: TerminalProcess::zeros(m, n + 1, n),
    };
    let adj = AdjointData { alpha, beta };
    let xi = solve_xi(tree, &data, &adj, &p.solver)?;

    // (μ, ν)
    let mut terminal = lin.hx.clone();
    if let Some(lam) = &lambda {
        let ln = lam.slice(n);
        for leaf in 0..tree.leaves() {
            let add = lin.psi_x[0][leaf].transpose() * DVector::from_column_slice(ln.at(leaf));
            for (o, a) in terminal.at_mut(leaf).iter_mut().zip(add.iter()) {
                *o += a;
            }
        }
    }
    for i in 0..n {
        let xii = xi.xi.slice(i);
        for leaf in 0..tree.leaves() {
            let add = lin.psi_x[i][leaf].transpose() * DVector::from_column_slice(xii.at(leaf));
            for (o, a) in terminal.at_mut(leaf).iter_mut().zip(add.iter()) {
                *o += a * dt;
            }
        }
    }
    let (_, nu) = tree.martingale_repr(&terminal);
    let mu = AdaptedProcess::from_slices(
        nx,
        (0..=n)
            .map(|j| terminal.cond_expect(j).expect("level within tree"))
            .collect(),
    )?;

    // (p, q) with free term P′
    let free = TerminalProcess::from_fn(nx, n + 1, n, |j, leaf, out| {
        if j == n {
            return;
        }
        let vj = leaf >> (n - j);
        lin.bx.apply_t_add(n, j, vj, j, terminal.at(leaf), 1.0, out);
        lin.sx.apply_t_add(n, j, vj, j, nu.slice(j).at(vj), 1.0, out);
        if let Some(lam) = &lambda {
            lin.gx.apply_t_add(0, j, vj, j, lam.slice(j).at(vj), 1.0, out);
        }
        for i in 0..n {
            if p.in_domain(i, j) {
                for (o, g) in out.iter_mut().zip(lin.fx.entry(i, j).at(vj)) {
                    *o += g * dt;
                }
            }
        }
        let xij = xi.xi.slice(j).at(leaf);
        let mut k_sum = lin.psi_xp[j][leaf].transpose() * DVector::from_column_slice(xij);
        for k in j..n {
            let vk = leaf >> (n - k);
            if let Some(g) = lin.gxp.get(j, k, vk, k) {
                k_sum += g.transpose() * DVector::from_column_slice(xij) * dt;
            }
        }
        for (o, a) in out.iter_mut().zip(k_sum.iter()) {
            *o += a;
        }
        for i in 0..=j {
            lin.gx
                .apply_t_add(i, j, vj, j, xi.xi.slice(i).at(leaf), dt, out);
        }
    });
    let pq_data = LinearBSVIEData {
        a: lin.bx.swapped_upper(n, n),
        b: MatrixKernel::zeros(n, n, nx, nx),
        c: lin.sx.swapped_upper(n, n),
        psi: free,
    };
    let pq = solve_linear_bsvie(tree, &pq_data, &p.solver)?;

    Ok(AdjointBundle {
        lambda,
        xi,
        mu,
        nu,
        p: pq.y,
        q: pq.z,
        control: u_bar.clone(),
        lin,
    })
}

/// Leaf-resolved gradient `G_j`, `j < N`, such that the first variation in
/// an adapted direction `d` is `E Σ_j ⟨G_j, d_j⟩ dt`.
pub fn mp_gradient(p: &ControlProblem, bundle: &AdjointBundle) -> TerminalProcess {
    let tree = &p.tree;
    let n = tree.steps();
    let dt = tree.dt();
    let l = p.dims().l;
    let lin = &bundle.lin;
    let mu_t = bundle.mu.slice(n);
    TerminalProcess::from_fn(l, n, n, |j, leaf, out| {
        let vj = leaf >> (n - j);
        for i in (j + 1)..n {
            let vi = leaf >> (n - i);
            lin.bu.apply_t_add(i, j, vj, j, bundle.p.slice(i).at(vi), dt, out);
            lin.su.apply_t_add(i, j, vj, j, bundle.q.entry(i, j).at(vj), dt, out);
        }
        lin.bu.apply_t_add(n, j, vj, j, mu_t.at(leaf), 1.0, out);
        lin.su.apply_t_add(n, j, vj, j, bundle.nu.slice(j).at(vj), 1.0, out);
        if let Some(lam) = &bundle.lambda {
            lin.gu.apply_t_add(0, j, vj, j, lam.slice(j).at(vj), 1.0, out);
        }
        for i in 0..n {
            if p.in_domain(i, j) {
                for (o, g) in out.iter_mut().zip(lin.fu.entry(i, j).at(vj)) {
                    *o += g * dt;
                }
            }
        }
        for i in 0..=j {
            lin.gu
                .apply_t_add(i, j, vj, j, bundle.xi.xi.slice(i).at(leaf), dt, out);
        }
    })
}

/// `E_j[G_j]` on level `j`.
pub fn adapted_projection(g: &TerminalProcess) -> AdaptedProcess {
    AdaptedProcess::from_slices(
        g.dim(),
        (0..g.len())
            .map(|j| g.slice(j).cond_expect(j).expect("level within tree"))
            .collect(),
    )
    .expect("levels are consecutive")
}

/// `E Σ_j ⟨G_j, d_j⟩ dt` for leaf-resolved or adapted `G`.
pub fn gradient_pairing(tree: &ScenarioTree, g: &[NodeField], d: &AdaptedProcess) -> f64 {
    g.iter()
        .zip(d.slices())
        .map(|(gj, dj)| expect_dot(gj, dj) * tree.dt())
        .sum()
}

/// First variation from the adjoint bundle.
pub fn directional_derivative_adjoint(
    p: &ControlProblem,
    u_bar: &ControlProcess,
    v: &ControlProcess,
) -> Result<f64> {
    p.check_control(v)?;
    let bundle = solve_adjoint_bundle(p, u_bar)?;
    let g = mp_gradient(p, &bundle);
    Ok(gradient_pairing(&p.tree, g.slices(), &direction(u_bar, v)))
}

/// Difference quotient of the cost along `v − ū`: central when `ū − ε d`
/// is admissible, forward otherwise.
pub fn fd_directional_derivative(
    p: &ControlProblem,
    u_bar: &ControlProcess,
    v: &ControlProcess,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::NonPositiveStep(eps));
    }
    p.check_control(v)?;
    let set = p.coeffs.control_set();
    let d = direction(u_bar, v);
    let plus = u_bar
        .shifted(eps, &d, set)
        .ok_or(Error::ControlOutsideSet { index: 0 })?;
    let j_plus = eval_cost(p, &plus)?;
    match u_bar.shifted(-eps, &d, set) {
        Some(minus) => Ok((j_plus - eval_cost(p, &minus)?) / (2.0 * eps)),
        None => Ok((j_plus - eval_cost(p, u_bar)?) / eps),
    }
}

/// `Σ_{s, node} max(0, −min_{vertex w} ⟨E_s G_s, w − u_s⟩)`.
pub fn stationarity_residual(p: &ControlProblem, u: &ControlProcess, ga: &AdaptedProcess) -> f64 {
    let set = p.coeffs.control_set();
    let mut total = 0.0;
    for s in 0..ga.len() {
        let (gs, us) = (ga.slice(s), u.values().slice(s));
        for v in 0..gs.width() {
            total += (-set.min_vertex_pairing(gs.at(v), us.at(v))).max(0.0);
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    /// Initial step of every backtracking search.
    pub step: f64,
    pub max_iters: usize,
    pub stat_tol: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    pub shrink: f64,
    /// Backtracking gives up below this step.
    pub min_step: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iters: 50,
            stat_tol: 1e-6,
            armijo: 1e-4,
            shrink: 0.5,
            min_step: 1e-12,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Error::MalformedParams {
            key: format!("optimize.{key}"),
            reason: reason.into(),
        };
        if !(self.step > 0.0) {
            return Err(bad("step", "must be positive"));
        }
        if !(self.stat_tol > 0.0) {
            return Err(bad("stat_tol", "must be positive"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(bad("armijo", "must lie in (0, 1)"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(bad("shrink", "must lie in (0, 1)"));
        }
        if !(self.min_step > 0.0) {
            return Err(bad("min_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptRecord {
    pub iter: usize,
    pub cost: f64,
    pub residual: f64,
    /// Step accepted to leave this iterate (0 at the last one).
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub control: ControlProcess,
    pub history: Vec<OptRecord>,
    pub converged: bool,
}

/// Projected gradient descent with Armijo backtracking on the cost.
pub fn projected_gradient_optimize(
    p: &ControlProblem,
    start: &ControlProcess,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    p.check_control(start)?;
    let set = p.coeffs.control_set();
    let mut u = start.clone();
    let mut cost = eval_cost(p, &u)?;
    let mut history = Vec::new();
    for iter in 0..=cfg.max_iters {
        let bundle = solve_adjoint_bundle(p, &u)?;
        let ga = adapted_projection(&mp_gradient(p, &bundle));
        let residual = stationarity_residual(p, &u, &ga);
        history.push(OptRecord {
            iter,
            cost,
            residual,
            step: 0.0,
        });
        if residual <= cfg.stat_tol {
            return Ok(OptimizeResult {
                control: u,
                history,
                converged: true,
            });
        }
        if iter == cfg.max_iters {
            break;
        }
        let mut step = cfg.step;
        loop {
            let mut trial = u.values().clone();
            trial.add_scaled(-step, &ga);
            let cand = ControlProcess::projected(&trial, set);
            let predicted = gradient_pairing(&p.tree, ga.slices(), &cand.values().sub(u.values()));
            let c_cost = eval_cost(p, &cand)?;
            if c_cost <= cost + cfg.armijo * predicted {
                history.last_mut().expect("pushed above").step = step;
                u = cand;
                cost = c_cost;
                break;
            }
            step *= cfg.shrink;
            if step < cfg.min_step {
                return Err(Error::NoDescent { step });
            }
        }
    }
    Ok(OptimizeResult {
        control: u,
        history,
        converged: false,
    })
}

/// Outcome of the BSDE recovery check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub eta0_gap: f64,
    pub zeta_gap: f64,
    pub pass: bool,
}

/// Tolerance of [`recovery_check`].
pub const RECOVERY_TOL: f64 = 1e-10;

/// `ξ = η0 − Σ_k g0(k, ζ0_k) dt + Σ_k ζ0_k ΔW_k`, the terminal value that
/// makes `(η0, ζ0)` consistent.
pub fn recovery_terminal<F>(tree: &ScenarioTree, eta0: &[f64], zeta0: &AdaptedProcess, g0: F) -> NodeField
where
    F: Fn(usize, usize, &[f64], &mut [f64]),
{
    let n = tree.steps();
    let m = eta0.len();
    let mut g = vec![0.0; m];
    NodeField::from_fn(n, m, |leaf, out| {
        out.copy_from_slice(eta0);
        for k in 0..n {
            let v = leaf >> (n - k);
            let z = zeta0.slice(k).at(v);
            g.iter_mut().for_each(|x| *x = 0.0);
            g0(k, v, z, &mut g);
            let dw = tree.increment(k, leaf, n);
            for c in 0..m {
                out[c] += -g[c] * tree.dt() + z[c] * dw;
            }
        }
    })
}

/// Solves `η(t) = ξ + Σ_{k≥t} g0(k, ζ_k) dt − Σ_{k≥t} ζ_k ΔW_k` backward and
/// compares `(η(0), ζ)` with `(η0, ζ0)`.
pub fn recovery_check<F>(
    tree: &ScenarioTree,
    xi: &NodeField,
    eta0: &[f64],
    zeta0: &AdaptedProcess,
    g0: F,
) -> RecoveryReport
where
    F: Fn(usize, usize, &[f64], &mut [f64]),
{
    let n = tree.steps();
    let m = xi.dim();
    let mut eta = xi.clone();
    let mut zeta_gap = 0.0_f64;
    let mut g = vec![0.0; m];
    for k in (0..n).rev() {
        let (mut mean, zeta) = tree.one_step(&eta);
        for v in 0..(1usize << k) {
            g.iter_mut().for_each(|x| *x = 0.0);
            g0(k, v, zeta.at(v), &mut g);
            for (e, gc) in mean.at_mut(v).iter_mut().zip(&g) {
                *e += gc * tree.dt();
            }
        }
        zeta_gap = zeta_gap.max(zeta.max_abs_diff(zeta0.slice(k)));
        eta = mean;
    }
    let eta0_gap = eta
        .values()
        .iter()
        .zip(eta0)
        .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
    RecoveryReport {
        eta0_gap,
        zeta_gap,
        pass: eta0_gap <= RECOVERY_TOL && zeta_gap <= RECOVERY_TOL,
    }
}
