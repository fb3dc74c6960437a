//! Backward stochastic Volterra integral equations
//!
//! ```text
//! Y(t_i) = ψ(t_i) + Σ_{j=i}^{N-1} g(t_i, t_j, Y(t_j), Z(i,j), Z(j,i)) dt
//!                 − Σ_{j=i}^{N-1} Z(i,j) ΔW_j
//! ```
//!
//! solved by Picard iteration on the pair `(y, z)`. One sweep freezes `y`
//! and the below-diagonal `z(j, i)` and, for every outer index `i`, runs the
//! backward recursion of a BSDE parameterized by `i`:
//!
//! ```text
//! η(i, N) = ψ(t_i)
//! η(i, r) = E_r[η(i, r+1)] + g(t_i, t_r, y(t_r), ζ(i, r), z(r, i)) dt,   r = N-1 … i
//! ```
//!
//! where `ζ(i, r)` is the one-step representation coefficient of
//! `η(i, r+1)`. The sweep returns `Y(t_i) = η(i, i)` and `Z(i, j) = ζ(i, j)`
//! for `j ≥ i`. For an M-solution the below-diagonal values come from the
//! martingale representation `Y(t_i) = E Y(t_i) + Σ_{j<i} Z(i, j) ΔW_j`.
//!
//! The outer indices of a sweep only read frozen data, so they run in
//! parallel. The diagonal term `g(t_i, t_i, ·)` is included and its `z'`
//! slot reads the frozen diagonal `z(i, i)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    dot, AdaptedProcess, Domain, NodeField, ScenarioTree, TerminalProcess, VolterraField,
};

/// Generator `g(t_i, t_j, y, z, z')` of a BSVIE.
///
/// `node` sits on level `j`; `y = y(t_j)`, `z = ζ(i, j)` and `zp = z(j, i)`
/// are values at that node. Implementations may read any data measurable at
/// level `j`. `out` arrives zeroed.
pub trait Generator: Sync {
    fn dim(&self) -> usize;

    fn uses_zprime(&self) -> bool;

    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        i: usize,
        j: usize,
        node: usize,
        y: &[f64],
        z: &[f64],
        zp: &[f64],
        out: &mut [f64],
    );
}

impl<G: Generator + ?Sized> Generator for &G {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn uses_zprime(&self) -> bool {
        (**self).uses_zprime()
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
        (**self).eval(i, j, node, y, z, zp, out)
    }
}

/// Closure-backed generator.
pub struct FnGenerator<F> {
    dim: usize,
    uses_zprime: bool,
    f: F,
}

impl<F> FnGenerator<F>
where
    F: Fn(usize, usize, usize, &[f64], &[f64], &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, uses_zprime: bool, f: F) -> Self {
        Self {
            dim,
            uses_zprime,
            f,
        }
    }
}

impl<F> Generator for FnGenerator<F>
where
    F: Fn(usize, usize, usize, &[f64], &[f64], &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn uses_zprime(&self) -> bool {
        self.uses_zprime
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
        (self.f)(i, j, node, y, z, zp, out)
    }
}

/// `g ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroGenerator(pub usize);

impl Generator for ZeroGenerator {
    fn dim(&self) -> usize {
        self.0
    }

    fn uses_zprime(&self) -> bool {
        false
    }

    fn eval(&self, _: usize, _: usize, _: usize, _: &[f64], _: &[f64], _: &[f64], _: &mut [f64]) {}
}

/// Free term plus generator. `psi` has one slice per index `0..=N`.
pub struct GeneratorSpec<G> {
    pub psi: TerminalProcess,
    pub generator: G,
}

impl<G: Generator> GeneratorSpec<G> {
    pub fn new(psi: TerminalProcess, generator: G) -> Result<Self> {
        if psi.dim() != generator.dim() {
            return Err(Error::Dimension {
                context: "free term vs generator dimension",
                expected: generator.dim(),
                found: psi.dim(),
            });
        }
        for k in 0..psi.len() {
            if !psi.slice(k).is_finite() {
                return Err(Error::NonFinite {
                    context: "BSVIE free term",
                    index: k,
                });
            }
        }
        Ok(Self { psi, generator })
    }

    fn check(&self, tree: &ScenarioTree) -> Result<()> {
        if self.psi.len() != tree.steps() + 1 || self.psi.leaf_level() != tree.steps() {
            return Err(Error::Dimension {
                context: "BSVIE free term length",
                expected: tree.steps() + 1,
                found: self.psi.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Bound on the weighted norm of the last iterate difference.
    pub picard_tol: f64,
    pub max_iter: usize,
    /// Weight of the stopping norm; `None` means `2N/T`.
    pub beta: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            picard_tol: 1e-11,
            max_iter: 200,
            beta: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0 && self.picard_tol.is_finite()) {
            return Err(Error::MalformedParams {
                key: "solver.picard_tol".into(),
                reason: "must be positive".into(),
            });
        }
        if self.max_iter == 0 {
            return Err(Error::MalformedParams {
                key: "solver.max_iter".into(),
                reason: "must be at least 1".into(),
            });
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::MalformedParams {
                    key: "solver.beta".into(),
                    reason: "must be nonnegative".into(),
                });
            }
        }
        Ok(())
    }

    pub fn beta_for(&self, tree: &ScenarioTree) -> f64 {
        self.beta
            .unwrap_or(2.0 * tree.steps() as f64 / tree.grid().horizon())
    }
}

/// Picard bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolveStats {
    /// Sweeps performed, including the one that confirmed convergence.
    pub iterations: usize,
    /// `sqrt` of the weighted norm of each iterate difference.
    pub residual_trail: Vec<f64>,
    /// Path-wise defect of the discrete equation at the returned pair.
    pub equation_residual: f64,
}

/// `Y` on `0..=N` with `Y(t_N) = ψ(t_N)`, and `Z` on the full square
/// (rows `0..=N`, columns `0..N`).
#[derive(Clone, Debug, PartialEq)]
pub struct MSolution {
    pub y: AdaptedProcess,
    pub z: VolterraField,
    pub stats: SolveStats,
}

/// `Y` as above and `Z(i, j)` for `j ≥ i` only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedSolution {
    pub y: AdaptedProcess,
    pub z: VolterraField,
    pub stats: SolveStats,
}

/// One parameterized-BSDE sweep at the frozen pair `(y, z)`.
///
/// `frozen_z` must store the below-diagonal entries `z(r, i)` when the
/// generator reads `z'`; otherwise it is ignored. Returns `Y` on `0..=N` and
/// the upper-triangle `Z` (rows `0..=N`, row `N` empty).
pub fn bsde_family_sweep<G: Generator>(
    tree: &ScenarioTree,
    spec: &GeneratorSpec<G>,
    frozen_y: &AdaptedProcess,
    frozen_z: &VolterraField,
) -> Result<(AdaptedProcess, VolterraField)> {
    spec.check(tree)?;
    let n = tree.steps();
    let m = spec.generator.dim();
    let dt = tree.dt();
    let uses_zp = spec.generator.uses_zprime();
    let zeros = vec![0.0; m];

    let rows: Vec<(NodeField, Vec<NodeField>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut eta = spec.psi.slice(i).clone();
            let mut zeta_row = Vec::with_capacity(n - i);
            let mut out = vec![0.0; m];
            for r in (i..n).rev() {
                let (mut mean, zeta) = tree.one_step(&eta);
                let y_r = frozen_y.slice(r);
                let zp_field = if uses_zp { frozen_z.get(r, i) } else { None };
                for v in 0..(1usize << r) {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    let zp = zp_field.map_or(&zeros[..], |f| f.at_descendant(v, r));
                    spec.generator
                        .eval(i, r, v, y_r.at(v), zeta.at(v), zp, &mut out);
                    for (e, g) in mean.at_mut(v).iter_mut().zip(&out) {
                        *e += g * dt;
                    }
                }
                if !mean.is_finite() {
                    return Err(Error::NonFinite {
                        context: "bsde_family_sweep",
                        index: i,
                    });
                }
                zeta_row.push(zeta);
                eta = mean;
            }
            zeta_row.reverse();
            Ok((eta, zeta_row))
        })
        .collect::<Result<_>>()?;

    let mut y_slices = Vec::with_capacity(n + 1);
    let mut z = VolterraField::zeros(m, Domain::UpperTriangle, n + 1, n);
    for (i, (yi, zrow)) in rows.into_iter().enumerate() {
        y_slices.push(yi);
        for (k, zij) in zrow.into_iter().enumerate() {
            z.set(i, i + k, zij);
        }
    }
    y_slices.push(spec.psi.slice(n).clone());
    Ok((AdaptedProcess::from_slices(m, y_slices)?, z))
}

/// Completes an upper-triangle `Z` with the representation coefficients of
/// each `Y(t_i)`, so that `Y(t_i) = E Y(t_i) + Σ_{j<i} Z(i, j) ΔW_j` exactly.
pub fn extend_to_msolution(
    tree: &ScenarioTree,
    y: &AdaptedProcess,
    z_upper: &VolterraField,
) -> VolterraField {
    let n = tree.steps();
    let rows = y.len().max(z_upper.rows());
    let reps: Vec<AdaptedProcess> = (0..y.len())
        .into_par_iter()
        .map(|i| tree.martingale_repr(y.slice(i)).1)
        .collect();
    VolterraField::from_fn(y.dim(), Domain::FullSquare, rows, n, |i, j, v, out| {
        let src = if j >= i {
            z_upper.get(i, j)
        } else {
            reps.get(i).map(|r| r.slice(j))
        };
        if let Some(f) = src {
            out.copy_from_slice(f.at(v));
        }
    })
}

fn picard<G: Generator>(
    tree: &ScenarioTree,
    spec: &GeneratorSpec<G>,
    cfg: &SolverConfig,
    init_y: AdaptedProcess,
    init_z: VolterraField,
    extend: bool,
) -> Result<(AdaptedProcess, VolterraField, SolveStats)> {
    cfg.validate()?;
    spec.check(tree)?;
    let beta = cfg.beta_for(tree);
    let mut y = init_y;
    let mut z = init_z;
    let mut trail = Vec::new();
    for it in 1..=cfg.max_iter {
        let (ny, nz_upper) = bsde_family_sweep(tree, spec, &y, &z)?;
        let nz = if extend {
            extend_to_msolution(tree, &ny, &nz_upper)
        } else {
            nz_upper
        };
        let diff = tree
            .weighted_norm(&ny.sub(&y), &nz.sub(&z).upper(), beta)
            .sqrt();
        trail.push(diff);
        y = ny;
        z = nz;
        if diff <= cfg.picard_tol {
            let equation_residual = bsvie_residual(tree, spec, &y, &z);
            return Ok((
                y,
                z,
                SolveStats {
                    iterations: it,
                    residual_trail: trail,
                    equation_residual,
                },
            ));
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual: trail.last().copied().unwrap_or(f64::NAN),
    })
}

fn zero_pair(tree: &ScenarioTree, m: usize, domain: Domain) -> (AdaptedProcess, VolterraField) {
    let n = tree.steps();
    (
        AdaptedProcess::zeros(m, n + 1),
        VolterraField::zeros(m, domain, n + 1, n),
    )
}

/// Adapted M-solution by Picard iteration from the zero pair.
pub fn solve_bsvie_msolution<G: Generator>(
    tree: &ScenarioTree,
    spec: &GeneratorSpec<G>,
    cfg: &SolverConfig,
) -> Result<MSolution> {
    let (y0, z0) = zero_pair(tree, spec.generator.dim(), Domain::FullSquare);
    solve_bsvie_msolution_from(tree, spec, cfg, y0, z0)
}

/// As [`solve_bsvie_msolution`], starting from a given pair.
pub fn solve_bsvie_msolution_from<G: Generator>(
    tree: &ScenarioTree,
    spec: &GeneratorSpec<G>,
    cfg: &SolverConfig,
    init_y: AdaptedProcess,
    init_z: VolterraField,
) -> Result<MSolution> {
    let (y, z, stats) = picard(tree, spec, cfg, init_y, init_z, true)?;
    Ok(MSolution { y, z, stats })
}

/// Adapted solution for a generator without the `z'` slot.
pub fn solve_bsvie_adapted<G: Generator>(
    tree: &ScenarioTree,
    spec: &GeneratorSpec<G>,
    cfg: &SolverConfig,
) -> Result<AdaptedSolution> {
    if spec.generator.uses_zprime() {
        return Err(Error::KindMismatch(
            "adapted solutions need a generator that ignores z'".into(),
        ));
    }
    let (y0, z0) = zero_pair(tree, spec.generator.dim(), Domain::UpperTriangle);
    let (y, z, stats) = picard(tree, spec, cfg, y0, z0, false)?;
    Ok(AdaptedSolution { y, z, stats })
}

/// Largest path-wise defect of the discrete equation over `i < N` and all
/// leaves, evaluated directly from the sums (no backward recursion).
pub fn bsvie_residual<G: Generator>(
    tree: &ScenarioTree,
    spec: &GeneratorSpec<G>,
    y: &AdaptedProcess,
    z: &VolterraField,
) -> f64 {
    let n = tree.steps();
    let m = spec.generator.dim();
    let dt = tree.dt();
    let uses_zp = spec.generator.uses_zprime();
    let zeros = vec![0.0; m];
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut worst = 0.0_f64;
            let mut g = vec![0.0; m];
            for leaf in 0..tree.leaves() {
                let mut acc: Vec<f64> = spec.psi.slice(i).at(leaf).to_vec();
                for j in i..n {
                    let v = leaf >> (n - j);
                    let zij = z.entry(i, j).at(v);
                    let zp = if uses_zp {
                        z.entry(j, i).at_descendant(v, j)
                    } else {
                        &zeros[..]
                    };
                    g.iter_mut().for_each(|o| *o = 0.0);
                    spec.generator.eval(i, j, v, y.slice(j).at(v), zij, zp, &mut g);
                    let dw = tree.increment(j, leaf, n);
                    for c in 0..m {
                        acc[c] += g[c] * dt - zij[c] * dw;
                    }
                }
                let yi = y.at(i, leaf, n);
                for c in 0..m {
                    worst = worst.max((acc[c] - yi[c]).abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Largest path-wise gap in `Y(t_i) = E Y(t_i) + Σ_{j<i} Z(i,j) ΔW_j`.
pub fn m_property_residual(tree: &ScenarioTree, y: &AdaptedProcess, z: &VolterraField) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..y.len() {
        let yi = y.slice(i);
        let mean = yi.mean();
        for v in 0..yi.width() {
            for (c, m) in mean.iter().enumerate() {
                let mut rebuilt = *m;
                for j in 0..i {
                    rebuilt += z.entry(i, j).at_descendant(v, i)[c] * tree.increment(j, v, i);
                }
                worst = worst.max((rebuilt - yi.at(v)[c]).abs());
            }
        }
    }
    worst
}

/// Largest gap in `E|Y(t_i)|² = |E Y(t_i)|² + Σ_{j<i} E|Z(i,j)|² dt`.
pub fn m_identity_gap(tree: &ScenarioTree, y: &AdaptedProcess, z: &VolterraField) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..y.len() {
        let yi = y.slice(i);
        let mean = yi.mean();
        let rhs = dot(&mean, &mean)
            + (0..i)
                .map(|j| z.entry(i, j).mean_square() * tree.dt())
                .sum::<f64>();
        worst = worst.max((yi.mean_square() - rhs).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tree(n: usize, t: f64) -> ScenarioTree {
        ScenarioTree::with_steps(t, n).unwrap()
    }

    fn random_psi(tree: &ScenarioTree, m: usize, seed: u64) -> TerminalProcess {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TerminalProcess::from_fn(m, tree.steps() + 1, tree.steps(), |_, _, out| {
            out.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn zero_generator_is_conditional_expectation() {
        let tr = tree(3, 1.0);
        let psi = random_psi(&tr, 2, 1);
        let spec = GeneratorSpec::new(psi.clone(), ZeroGenerator(2)).unwrap();
        let sol = solve_bsvie_msolution(&tr, &spec, &SolverConfig::default()).unwrap();
        for i in 0..=3 {
            let ce = psi.slice(i).cond_expect(i).unwrap();
            assert!(sol.y.slice(i).max_abs_diff(&ce) < 1e-15);
        }
        // the second sweep only confirms the first
        assert_eq!(sol.stats.iterations, 2);
        assert_eq!(sol.stats.residual_trail[1], 0.0);
        // Z is the representation of each free term
        for i in 0..3 {
            let (_, rep) = tr.martingale_repr(psi.slice(i));
            for j in i..3 {
                assert!(sol.z.entry(i, j).max_abs_diff(rep.slice(j)) < 1e-14);
            }
        }
    }

    #[test]
    fn terminal_brownian_free_term() {
        let tr = tree(1, 1.0);
        let psi = TerminalProcess::from_fields(1, 1, vec![tr.brownian(1), tr.brownian(1)]).unwrap();
        let spec = GeneratorSpec::new(psi, ZeroGenerator(1)).unwrap();
        let sol = solve_bsvie_adapted(&tr, &spec, &SolverConfig::default()).unwrap();
        assert_eq!(sol.y.slice(0).values(), &[0.0]);
        assert_eq!(sol.z.entry(0, 0).values(), &[1.0]);
    }

    #[test]
    fn zprime_generator_one_step() {
        // ψ(t0) = 0, ψ(t1) = ΔW0, g = z'
        let tr = tree(1, 1.0);
        let psi = TerminalProcess::from_fields(
            1,
            1,
            vec![NodeField::zeros(1, 1), tr.brownian(1)],
        )
        .unwrap();
        let g = FnGenerator::new(1, true, |_, _, _, _, _, zp: &[f64], out: &mut [f64]| {
            out[0] = zp[0]
        });
        let spec = GeneratorSpec::new(psi, g).unwrap();
        let sol = solve_bsvie_msolution(&tr, &spec, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.y.slice(0).values()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.z.entry(0, 0).values()[0], 0.0, epsilon = 1e-15);
        assert!(sol.y.slice(1).max_abs_diff(&tr.brownian(1)) < 1e-15);
        assert_abs_diff_eq!(sol.z.entry(1, 0).values()[0], 1.0, epsilon = 1e-15);
        assert!(solve_bsvie_adapted(&tr, &spec, &SolverConfig::default()).is_err());
    }

    #[test]
    fn extension_examples() {
        let tr = tree(3, 1.0);
        let det = AdaptedProcess::constant(&[2.0], 4);
        let z = extend_to_msolution(&tr, &det, &VolterraField::zeros(1, Domain::UpperTriangle, 4, 3));
        for i in 0..4 {
            for j in 0..i.min(3) {
                assert_eq!(z.entry(i, j).max_abs(), 0.0);
            }
        }
        let tr1 = tree(1, 1.0);
        let y = AdaptedProcess::from_slices(1, vec![NodeField::zeros(0, 1), tr1.brownian(1)]).unwrap();
        let z = extend_to_msolution(&tr1, &y, &VolterraField::zeros(1, Domain::UpperTriangle, 2, 1));
        assert_eq!(z.entry(1, 0).values(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = AdaptedProcess::from_fn(2, 4, |_, _, out| {
            out.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0))
        });
        let z = extend_to_msolution(&tr, &y, &VolterraField::zeros(2, Domain::UpperTriangle, 4, 3));
        assert!(m_property_residual(&tr, &y, &z) < 1e-12);
        assert!(m_identity_gap(&tr, &y, &z) < 1e-12);
    }

    #[test]
    fn nonlinear_generator_converges_and_satisfies_equation() {
        let tr = tree(4, 1.0);
        let psi = random_psi(&tr, 1, 7);
        let g = FnGenerator::new(1, true, |i, j, _, y: &[f64], z: &[f64], zp: &[f64], out: &mut [f64]| {
            let w = 1.0 + 0.1 * (i + j) as f64;
            out[0] = 0.5 * w * y[0].sin() + 0.3 * z[0].tanh() + 0.2 * zp[0];
        });
        let spec = GeneratorSpec::new(psi, g).unwrap();
        let sol = solve_bsvie_msolution(&tr, &spec, &SolverConfig::default()).unwrap();
        assert!(sol.stats.equation_residual < 1e-10, "{:?}", sol.stats);
        assert!(m_property_residual(&tr, &sol.y, &sol.z) < 1e-12);
        let trail = &sol.stats.residual_trail;
        for w in trail.windows(2).skip(1) {
            if w[0] > 1e-13 {
                assert!(w[1] < w[0], "{trail:?}");
            }
        }
    }

    #[test]
    fn iteration_cap_reports_no_convergence() {
        let tr = tree(3, 1.0);
        let psi = random_psi(&tr, 1, 2);
        let g = FnGenerator::new(1, false, |_, _, _, y: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| {
            out[0] = 0.9 * y[0]
        });
        let spec = GeneratorSpec::new(psi, g).unwrap();
        let cfg = SolverConfig {
            max_iter: 2,
            ..SolverConfig::default()
        };
        assert!(matches!(
            solve_bsvie_adapted(&tr, &spec, &cfg),
            Err(Error::NoConvergence { iterations: 2, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = SolverConfig {
            picard_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let tr = tree(4, 2.0);
        assert_eq!(SolverConfig::default().beta_for(&tr), 4.0);
    }
}
