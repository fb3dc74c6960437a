//! Problem data of the controlled forward-backward Volterra system.
//!
//! A model supplies the Volterra drift and diffusion `b, σ`, the backward
//! generator `g`, the free terms `φ, ψ`, the costs `h, f` and their first
//! derivatives. Jacobians of vector maps are returned as matrices; derivatives
//! of the scalar costs are returned as column vectors, i.e. the transpose of
//! the row-vector derivative.
//!
//! Time arguments are real times `t, s`, not grid indices, so one model can be
//! evaluated on any grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, ScenarioTree};

/// State, backward and control dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub l: usize,
}

/// Arguments of the generator `g(t, s, x', x, y, z, z', u)`.
#[derive(Clone, Copy, Debug)]
pub struct GenArgs<'a> {
    pub xp: &'a [f64],
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub zp: &'a [f64],
    pub u: &'a [f64],
}

/// Partial Jacobians of `g`, each with `m` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GenJacobian {
    pub xp: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub zp: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

/// Gradients of the running cost `f(t, s, x, y, z, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostGradient {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub u: DVector<f64>,
}

/// Evaluable problem data with analytic derivatives.
///
/// Implementations must be pure: the solvers call them from several threads.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> Dims;

    /// Whether `g` reads its `z'` slot.
    fn uses_zprime(&self) -> bool;

    fn phi(&self, t: f64) -> DVector<f64>;

    fn b(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> DVector<f64>;
    /// `(b_x, b_u)`.
    fn b_jac(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);

    fn sigma(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> DVector<f64>;
    /// `(σ_x, σ_u)`.
    fn sigma_jac(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);

    fn g(&self, t: f64, s: f64, a: &GenArgs) -> DVector<f64>;
    fn g_jac(&self, t: f64, s: f64, a: &GenArgs) -> GenJacobian;

    /// `ψ(t, x', x)`, where `x'` is the state at `t` and `x` the terminal state.
    fn psi(&self, t: f64, xp: &[f64], x: &[f64]) -> DVector<f64>;
    /// `(ψ_{x'}, ψ_x)`.
    fn psi_jac(&self, t: f64, xp: &[f64], x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);

    fn h(&self, x: &[f64], y: &[f64]) -> f64;
    /// `(h_xᵀ, h_yᵀ)`.
    fn h_grad(&self, x: &[f64], y: &[f64]) -> (DVector<f64>, DVector<f64>);

    fn f(&self, t: f64, s: f64, x: &[f64], y: &[f64], z: &[f64], u: &[f64]) -> f64;
    fn f_grad(&self, t: f64, s: f64, x: &[f64], y: &[f64], z: &[f64], u: &[f64])
        -> CostGradient;
}

/// Box control set `Π [lo_k, hi_k]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxSet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxSet {
    /// Requires `lo ≤ 0 ≤ hi` componentwise, so that `0 ∈ U`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidControlSet(format!(
                "bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (k, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite()) || a > b {
                return Err(Error::InvalidControlSet(format!(
                    "component {k}: [{a}, {b}] is not a bounded interval"
                )));
            }
            if *a > 0.0 || *b < 0.0 {
                return Err(Error::InvalidControlSet(format!(
                    "component {k}: [{a}, {b}] does not contain 0"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(dim: usize, radius: f64) -> Result<Self> {
        Self::new(vec![-radius; dim], vec![radius; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (a, b))| *a <= *x && *x <= *b)
    }

    /// Euclidean projection, a componentwise clamp.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (a, b))| x.clamp(*a, *b))
            .collect()
    }

    pub fn project_in_place(&self, v: &mut [f64]) {
        for (x, (a, b)) in v.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *x = x.clamp(*a, *b);
        }
    }

    /// `min over vertices v of ⟨g, v - u⟩`. The box is separable so the
    /// minimum is taken per component.
    pub fn min_vertex_pairing(&self, g: &[f64], u: &[f64]) -> f64 {
        g.iter()
            .zip(u)
            .zip(self.lo.iter().zip(&self.hi))
            .map(|((gk, uk), (a, b))| (gk * (a - uk)).min(gk * (b - uk)))
            .sum()
    }
}

/// Free function form of [`BoxSet::project`].
pub fn project_onto_u(v: &[f64], set: &BoxSet) -> Vec<f64> {
    set.project(v)
}

/// Adapted control taking values in a box.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProcess {
    values: AdaptedProcess,
}

impl ControlProcess {
    /// Checks membership of every stored value.
    pub fn new(values: AdaptedProcess, set: &BoxSet) -> Result<Self> {
        if values.dim() != set.dim() {
            return Err(Error::Dimension {
                context: "control dimension",
                expected: set.dim(),
                found: values.dim(),
            });
        }
        for k in 0..values.len() {
            let slice = values.slice(k);
            for v in 0..slice.width() {
                if !set.contains(slice.at(v)) {
                    return Err(Error::ControlOutsideSet { index: k });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn constant(tree: &ScenarioTree, value: &[f64], set: &BoxSet) -> Result<Self> {
        Self::new(AdaptedProcess::constant(value, tree.steps()), set)
    }

    /// Uniform random adapted control, reproducible from `seed`.
    pub fn random(tree: &ScenarioTree, set: &BoxSet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = AdaptedProcess::from_fn(set.dim(), tree.steps(), |_, _, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = if set.lo[k] < set.hi[k] {
                    rng.gen_range(set.lo[k]..=set.hi[k])
                } else {
                    set.lo[k]
                };
            }
        });
        Self { values }
    }

    /// Projects every value of an arbitrary process onto the box.
    pub fn projected(values: &AdaptedProcess, set: &BoxSet) -> Self {
        let mut values = values.clone();
        for k in 0..values.len() {
            let slice = values.slice_mut(k);
            for v in 0..slice.width() {
                set.project_in_place(slice.at_mut(v));
            }
        }
        Self { values }
    }

    pub fn values(&self) -> &AdaptedProcess {
        &self.values
    }

    pub fn into_values(self) -> AdaptedProcess {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self + eps·dir`, not checked against the set.
    pub(crate) fn shifted_unchecked(&self, eps: f64, dir: &AdaptedProcess) -> Self {
        let mut values = self.values.clone();
        values.add_scaled(eps, dir);
        Self { values }
    }

    /// `self + eps·dir` if it stays in the set.
    pub fn shifted(&self, eps: f64, dir: &AdaptedProcess, set: &BoxSet) -> Option<Self> {
        let cand = self.shifted_unchecked(eps, dir);
        Self::new(cand.values, set).ok()
    }
}

/// Problem data plus control set: everything a control problem needs.
#[derive(Clone)]
pub struct CoefficientSet {
    name: String,
    model: Arc<dyn Coefficients>,
    control_set: BoxSet,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("dims", &self.model.dims())
            .field("control_set", &self.control_set)
            .finish()
    }
}

impl CoefficientSet {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn Coefficients>,
        control_set: BoxSet,
    ) -> Result<Self> {
        if control_set.dim() != model.dims().l {
            return Err(Error::Dimension {
                context: "control set dimension",
                expected: model.dims().l,
                found: control_set.dim(),
            });
        }
        Ok(Self {
            name: name.into(),
            model,
            control_set,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model(&self) -> &dyn Coefficients {
        self.model.as_ref()
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }

    pub fn control_set(&self) -> &BoxSet {
        &self.control_set
    }
}

impl std::ops::Deref for CoefficientSet {
    type Target = dyn Coefficients;

    fn deref(&self) -> &Self::Target {
        self.model.as_ref()
    }
}

// ---------------------------------------------------------------------------
// Polynomial tables

/// `c0 + c1 t + c2 t²`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Poly1([f64; 3]);

impl Poly1 {
    pub fn constant(c: f64) -> Self {
        Self([c, 0.0, 0.0])
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.0[0] + t * (self.0[1] + t * self.0[2])
    }

}

/// `c0 + c1 t + c2 s + c3 t² + c4 t s + c5 s²`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Poly2([f64; 6]);

impl Poly2 {
    pub fn constant(c: f64) -> Self {
        Self([c, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn new(coeffs: [f64; 6]) -> Self {
        Self(coeffs)
    }

    #[inline]
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        let c = &self.0;
        c[0] + c[1] * t + c[2] * s + c[3] * t * t + c[4] * t * s + c[5] * s * s
    }

    fn is_zero(&self) -> bool {
        self.0.iter().all(|c| *c == 0.0)
    }
}

/// A matrix whose entries are polynomials in time.
#[derive(Clone, Debug, PartialEq)]
struct PolyMatrix<P> {
    rows: usize,
    cols: usize,
    entries: Vec<P>,
    zero: bool,
}

impl<P: Copy + Default> PolyMatrix<P> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![P::default(); rows * cols],
            zero: true,
        }
    }
}

impl PolyMatrix<Poly2> {
    fn eval(&self, t: f64, s: f64) -> DMatrix<f64> {
        if self.zero {
            return DMatrix::zeros(self.rows, self.cols);
        }
        DMatrix::from_row_iterator(
            self.rows,
            self.cols,
            self.entries.iter().map(|p| p.eval(t, s)),
        )
    }
}

impl PolyMatrix<Poly1> {
    fn eval(&self, t: f64) -> DMatrix<f64> {
        if self.zero {
            return DMatrix::zeros(self.rows, self.cols);
        }
        DMatrix::from_row_iterator(self.rows, self.cols, self.entries.iter().map(|p| p.eval(t)))
    }
}

/// `M(t,s)·v`, skipping zero tables.
fn apply(acc: &mut DVector<f64>, m: &PolyMatrix<Poly2>, t: f64, s: f64, v: &[f64]) {
    if m.zero {
        return;
    }
    for r in 0..m.rows {
        let row = &m.entries[r * m.cols..(r + 1) * m.cols];
        acc[r] += row.iter().zip(v).map(|(p, x)| p.eval(t, s) * x).sum::<f64>();
    }
}

fn apply1(acc: &mut DVector<f64>, m: &PolyMatrix<Poly1>, t: f64, v: &[f64]) {
    if m.zero {
        return;
    }
    for r in 0..m.rows {
        let row = &m.entries[r * m.cols..(r + 1) * m.cols];
        acc[r] += row.iter().zip(v).map(|(p, x)| p.eval(t) * x).sum::<f64>();
    }
}

fn sym_quad(q: &DMatrix<f64>, w: &[f64]) -> (f64, DVector<f64>) {
    if q.is_empty() {
        return (0.0, DVector::zeros(w.len()));
    }
    let w = DVector::from_column_slice(w);
    let qs = (q + q.transpose()) * 0.5;
    let grad = &qs * &w;
    (0.5 * w.dot(&grad), grad)
}

/// Which nonlinear and quadratic keys a family accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FamilyKind {
    Zero,
    LinearVolterra,
    LqTracking,
    SmoothNonlinear,
}

impl FamilyKind {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "zero" => Ok(Self::Zero),
            "linear_volterra" => Ok(Self::LinearVolterra),
            "lq_tracking" => Ok(Self::LqTracking),
            "smooth_nonlinear" => Ok(Self::SmoothNonlinear),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }

    fn allowed_keys(self) -> Vec<&'static str> {
        let mut keys = vec!["n", "m", "l", "control_set"];
        if self == Self::Zero {
            return keys;
        }
        keys.extend(LINEAR_KEYS);
        if matches!(self, Self::LqTracking | Self::SmoothNonlinear) {
            keys.extend(QUADRATIC_KEYS);
        }
        if self == Self::SmoothNonlinear {
            keys.extend(NONLINEAR_KEYS);
        }
        keys
    }
}

const LINEAR_KEYS: [&str; 22] = [
    "phi", "b0", "b_x", "b_u", "sigma0", "sigma_x", "sigma_u", "g0", "g_xp", "g_x", "g_y",
    "g_z", "g_zp", "g_u", "psi0", "psi_xp", "psi_x", "h0", "h_x", "h_y", "f0", "f_lin",
];
const QUADRATIC_KEYS: [&str; 5] = ["h_xx", "h_yy", "h_quad", "f_uu", "f_quad"];
const NONLINEAR_KEYS: [&str; 7] = [
    "b_sin", "b_usin", "sigma_tanh", "g_sin", "g_tanh", "h_cos", "f_cos",
];

pub const FAMILIES: [&str; 4] = ["zero", "linear_volterra", "lq_tracking", "smooth_nonlinear"];

/// Polynomial-table model behind every built-in family.
///
/// ```text
/// b(t,s,x,u)        = b0 + B_x x + B_u u + b_sin·sin(x) + b_usin·Σ sin(u_k)·1
/// σ(t,s,x,u)        = σ0 + S_x x + S_u u + σ_tanh·tanh(x)
/// g(t,s,x',x,y,z,z',u) = g0 + G_x' x' + G_x x + G_y y + G_z z + G_z' z' + G_u u
///                      + g_sin·sin(y) + g_tanh·tanh(z)
/// ψ(t,x',x)         = ψ0 + P_x' x' + P_x x
/// h(x,y)            = h0 + h_x·x + h_y·y + ½ (x,y)ᵀ H (x,y) + h_cos·Σ cos(x_k)
/// f(t,s,x,y,z,u)    = f0 + f_lin·w + ½ wᵀ Q w + f_cos·Σ cos(u_k),  w = (x,y,z,u)
/// ```
/// Kernel tables are polynomials of degree ≤ 2 in `(t, s)`; free-term tables
/// are polynomials of degree ≤ 2 in `t`; `H` and `Q` are constant. `sin`,
/// `tanh` and `cos` act componentwise and their weights are scalar polynomials.
#[derive(Clone, Debug)]
pub struct PolyFamily {
    dims: Dims,
    phi: PolyMatrix<Poly1>,
    b0: PolyMatrix<Poly2>,
    b_x: PolyMatrix<Poly2>,
    b_u: PolyMatrix<Poly2>,
    b_sin: Poly2,
    b_usin: Poly2,
    sigma0: PolyMatrix<Poly2>,
    sigma_x: PolyMatrix<Poly2>,
    sigma_u: PolyMatrix<Poly2>,
    sigma_tanh: Poly2,
    g0: PolyMatrix<Poly2>,
    g_xp: PolyMatrix<Poly2>,
    g_x: PolyMatrix<Poly2>,
    g_y: PolyMatrix<Poly2>,
    g_z: PolyMatrix<Poly2>,
    g_zp: PolyMatrix<Poly2>,
    g_u: PolyMatrix<Poly2>,
    g_sin: Poly2,
    g_tanh: Poly2,
    psi0: PolyMatrix<Poly1>,
    psi_xp: PolyMatrix<Poly1>,
    psi_x: PolyMatrix<Poly1>,
    h0: f64,
    h_x: DVector<f64>,
    h_y: DVector<f64>,
    /// Over `(x, y)`, size `n + m` (empty when absent).
    h_quad: DMatrix<f64>,
    h_cos: f64,
    f0: Poly2,
    /// Over `w = (x, y, z, u)`.
    f_lin: PolyMatrix<Poly2>,
    f_quad: DMatrix<f64>,
    f_cos: Poly2,
}

impl PolyFamily {
    pub fn zero(dims: Dims) -> Self {
        let Dims { n, m, l } = dims;
        Self {
            dims,
            phi: PolyMatrix::zeros(n, 1),
            b0: PolyMatrix::zeros(n, 1),
            b_x: PolyMatrix::zeros(n, n),
            b_u: PolyMatrix::zeros(n, l),
            b_sin: Poly2::default(),
            b_usin: Poly2::default(),
            sigma0: PolyMatrix::zeros(n, 1),
            sigma_x: PolyMatrix::zeros(n, n),
            sigma_u: PolyMatrix::zeros(n, l),
            sigma_tanh: Poly2::default(),
            g0: PolyMatrix::zeros(m, 1),
            g_xp: PolyMatrix::zeros(m, n),
            g_x: PolyMatrix::zeros(m, n),
            g_y: PolyMatrix::zeros(m, m),
            g_z: PolyMatrix::zeros(m, m),
            g_zp: PolyMatrix::zeros(m, m),
            g_u: PolyMatrix::zeros(m, l),
            g_sin: Poly2::default(),
            g_tanh: Poly2::default(),
            psi0: PolyMatrix::zeros(m, 1),
            psi_xp: PolyMatrix::zeros(m, n),
            psi_x: PolyMatrix::zeros(m, n),
            h0: 0.0,
            h_x: DVector::zeros(n),
            h_y: DVector::zeros(m),
            h_quad: DMatrix::zeros(0, 0),
            h_cos: 0.0,
            f0: Poly2::default(),
            f_lin: PolyMatrix::zeros(1, n + 2 * m + l),
            f_quad: DMatrix::zeros(0, 0),
            f_cos: Poly2::default(),
        }
    }

    fn from_params(kind: FamilyKind, params: &Map<String, Value>) -> Result<Self> {
        let allowed = kind.allowed_keys();
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::MalformedParams {
                key: bad.clone(),
                reason: "not a parameter of this family".into(),
            });
        }
        let dim = |key: &str| -> Result<usize> {
            match params.get(key) {
                None => Ok(1),
                Some(v) => v
                    .as_u64()
                    .filter(|d| (1..=8).contains(d))
                    .map(|d| d as usize)
                    .ok_or_else(|| malformed(key, "expected an integer in 1..=8")),
            }
        };
        let dims = Dims {
            n: dim("n")?,
            m: dim("m")?,
            l: dim("l")?,
        };
        let Dims { n, m, l } = dims;
        let mut fam = Self::zero(dims);
        let p = Parser { params };
        fam.phi = p.vec1("phi", n)?;
        fam.b0 = p.vec2("b0", n)?;
        fam.b_x = p.mat2("b_x", n, n)?;
        fam.b_u = p.mat2("b_u", n, l)?;
        fam.b_sin = p.scalar2("b_sin")?;
        fam.b_usin = p.scalar2("b_usin")?;
        fam.sigma0 = p.vec2("sigma0", n)?;
        fam.sigma_x = p.mat2("sigma_x", n, n)?;
        fam.sigma_u = p.mat2("sigma_u", n, l)?;
        fam.sigma_tanh = p.scalar2("sigma_tanh")?;
        fam.g0 = p.vec2("g0", m)?;
        fam.g_xp = p.mat2("g_xp", m, n)?;
        fam.g_x = p.mat2("g_x", m, n)?;
        fam.g_y = p.mat2("g_y", m, m)?;
        fam.g_z = p.mat2("g_z", m, m)?;
        fam.g_zp = p.mat2("g_zp", m, m)?;
        fam.g_u = p.mat2("g_u", m, l)?;
        fam.g_sin = p.scalar2("g_sin")?;
        fam.g_tanh = p.scalar2("g_tanh")?;
        fam.psi0 = p.vec1("psi0", m)?;
        fam.psi_xp = p.mat1("psi_xp", m, n)?;
        fam.psi_x = p.mat1("psi_x", m, n)?;
        fam.h0 = p.number("h0")?.unwrap_or(0.0);
        fam.h_x = p.const_vec("h_x", n)?;
        fam.h_y = p.const_vec("h_y", m)?;
        fam.h_cos = p.number("h_cos")?.unwrap_or(0.0);
        fam.f0 = p.scalar2("f0")?;
        let w = n + 2 * m + l;
        let f_lin = p.vec2("f_lin", w)?;
        fam.f_lin = PolyMatrix {
            rows: 1,
            cols: w,
            entries: f_lin.entries,
            zero: f_lin.zero,
        };
        fam.f_cos = p.scalar2("f_cos")?;

        // quadratic blocks accumulate into one matrix per cost
        let mut hq = p.const_mat("h_quad", n + m, n + m)?;
        let h_xx = p.const_mat("h_xx", n, n)?;
        let h_yy = p.const_mat("h_yy", m, m)?;
        if !h_xx.is_empty() || !h_yy.is_empty() {
            if hq.is_empty() {
                hq = DMatrix::zeros(n + m, n + m);
            }
            if !h_xx.is_empty() {
                hq.view_mut((0, 0), (n, n)).add_assign(&h_xx);
            }
            if !h_yy.is_empty() {
                hq.view_mut((n, n), (m, m)).add_assign(&h_yy);
            }
        }
        fam.h_quad = hq;
        let mut fq = p.const_mat("f_quad", w, w)?;
        let f_uu = p.const_mat("f_uu", l, l)?;
        if !f_uu.is_empty() {
            if fq.is_empty() {
                fq = DMatrix::zeros(w, w);
            }
            fq.view_mut((w - l, w - l), (l, l)).add_assign(&f_uu);
        }
        fam.f_quad = fq;
        Ok(fam)
    }

    fn split_f(&self, g: DVector<f64>) -> CostGradient {
        let Dims { n, m, l } = self.dims;
        CostGradient {
            x: g.rows(0, n).into_owned(),
            y: g.rows(n, m).into_owned(),
            z: g.rows(n + m, m).into_owned(),
            u: g.rows(n + 2 * m, l).into_owned(),
        }
    }
}

trait AddAssignExt {
    fn add_assign(&mut self, other: &DMatrix<f64>);
}

impl AddAssignExt for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign(&mut self, other: &DMatrix<f64>) {
        *self += other;
    }
}

fn col(m: &PolyMatrix<Poly2>, t: f64, s: f64) -> DVector<f64> {
    DVector::from_iterator(m.rows, (0..m.rows).map(|r| m.entries[r].eval(t, s)))
}

impl Coefficients for PolyFamily {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn uses_zprime(&self) -> bool {
        !self.g_zp.zero
    }

    fn phi(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.dims.n, self.phi.entries.iter().map(|p| p.eval(t)))
    }

    fn b(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        let mut out = col(&self.b0, t, s);
        apply(&mut out, &self.b_x, t, s, x);
        apply(&mut out, &self.b_u, t, s, u);
        if !self.b_sin.is_zero() {
            let c = self.b_sin.eval(t, s);
            for (o, xi) in out.iter_mut().zip(x) {
                *o += c * xi.sin();
            }
        }
        if !self.b_usin.is_zero() {
            let c = self.b_usin.eval(t, s) * u.iter().map(|v| v.sin()).sum::<f64>();
            out.iter_mut().for_each(|o| *o += c);
        }
        out
    }

    fn b_jac(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut bx = self.b_x.eval(t, s);
        let mut bu = self.b_u.eval(t, s);
        if !self.b_sin.is_zero() {
            let c = self.b_sin.eval(t, s);
            for (k, xi) in x.iter().enumerate() {
                bx[(k, k)] += c * xi.cos();
            }
        }
        if !self.b_usin.is_zero() {
            let c = self.b_usin.eval(t, s);
            for r in 0..self.dims.n {
                for (k, uk) in u.iter().enumerate() {
                    bu[(r, k)] += c * uk.cos();
                }
            }
        }
        (bx, bu)
    }

    fn sigma(&self, t: f64, s: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        let mut out = col(&self.sigma0, t, s);
        apply(&mut out, &self.sigma_x, t, s, x);
        apply(&mut out, &self.sigma_u, t, s, u);
        if !self.sigma_tanh.is_zero() {
            let c = self.sigma_tanh.eval(t, s);
            for (o, xi) in out.iter_mut().zip(x) {
                *o += c * xi.tanh();
            }
        }
        out
    }

    fn sigma_jac(&self, t: f64, s: f64, x: &[f64], _u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut sx = self.sigma_x.eval(t, s);
        if !self.sigma_tanh.is_zero() {
            let c = self.sigma_tanh.eval(t, s);
            for (k, xi) in x.iter().enumerate() {
                let th = xi.tanh();
                sx[(k, k)] += c * (1.0 - th * th);
            }
        }
        (sx, self.sigma_u.eval(t, s))
    }

    fn g(&self, t: f64, s: f64, a: &GenArgs) -> DVector<f64> {
        let mut out = col(&self.g0, t, s);
        apply(&mut out, &self.g_xp, t, s, a.xp);
        apply(&mut out, &self.g_x, t, s, a.x);
        apply(&mut out, &self.g_y, t, s, a.y);
        apply(&mut out, &self.g_z, t, s, a.z);
        apply(&mut out, &self.g_zp, t, s, a.zp);
        apply(&mut out, &self.g_u, t, s, a.u);
        if !self.g_sin.is_zero() {
            let c = self.g_sin.eval(t, s);
            for (o, y) in out.iter_mut().zip(a.y) {
                *o += c * y.sin();
            }
        }
        if !self.g_tanh.is_zero() {
            let c = self.g_tanh.eval(t, s);
            for (o, z) in out.iter_mut().zip(a.z) {
                *o += c * z.tanh();
            }
        }
        out
    }

    fn g_jac(&self, t: f64, s: f64, a: &GenArgs) -> GenJacobian {
        let mut jac = GenJacobian {
            xp: self.g_xp.eval(t, s),
            x: self.g_x.eval(t, s),
            y: self.g_y.eval(t, s),
            z: self.g_z.eval(t, s),
            zp: self.g_zp.eval(t, s),
            u: self.g_u.eval(t, s),
        };
        if !self.g_sin.is_zero() {
            let c = self.g_sin.eval(t, s);
            for (k, y) in a.y.iter().enumerate() {
                jac.y[(k, k)] += c * y.cos();
            }
        }
        if !self.g_tanh.is_zero() {
            let c = self.g_tanh.eval(t, s);
            for (k, z) in a.z.iter().enumerate() {
                let th = z.tanh();
                jac.z[(k, k)] += c * (1.0 - th * th);
            }
        }
        jac
    }

    fn psi(&self, t: f64, xp: &[f64], x: &[f64]) -> DVector<f64> {
        let mut out =
            DVector::from_iterator(self.dims.m, self.psi0.entries.iter().map(|p| p.eval(t)));
        apply1(&mut out, &self.psi_xp, t, xp);
        apply1(&mut out, &self.psi_x, t, x);
        out
    }

    fn psi_jac(&self, t: f64, _xp: &[f64], _x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.psi_xp.eval(t), self.psi_x.eval(t))
    }

    fn h(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v = self.h0 + dot_v(&self.h_x, x) + dot_v(&self.h_y, y);
        if !self.h_quad.is_empty() {
            let w: Vec<f64> = x.iter().chain(y).copied().collect();
            v += sym_quad(&self.h_quad, &w).0;
        }
        if self.h_cos != 0.0 {
            v += self.h_cos * x.iter().map(|xi| xi.cos()).sum::<f64>();
        }
        v
    }

    fn h_grad(&self, x: &[f64], y: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let n = self.dims.n;
        let mut gx = self.h_x.clone();
        let mut gy = self.h_y.clone();
        if !self.h_quad.is_empty() {
            let w: Vec<f64> = x.iter().chain(y).copied().collect();
            let g = sym_quad(&self.h_quad, &w).1;
            gx += g.rows(0, n);
            gy += g.rows(n, self.dims.m);
        }
        if self.h_cos != 0.0 {
            for (k, xi) in x.iter().enumerate() {
                gx[k] -= self.h_cos * xi.sin();
            }
        }
        (gx, gy)
    }

    fn f(&self, t: f64, s: f64, x: &[f64], y: &[f64], z: &[f64], u: &[f64]) -> f64 {
        let w: Vec<f64> = x.iter().chain(y).chain(z).chain(u).copied().collect();
        let mut v = self.f0.eval(t, s);
        if !self.f_lin.zero {
            v += self
                .f_lin
                .entries
                .iter()
                .zip(&w)
                .map(|(p, wi)| p.eval(t, s) * wi)
                .sum::<f64>();
        }
        if !self.f_quad.is_empty() {
            v += sym_quad(&self.f_quad, &w).0;
        }
        if !self.f_cos.is_zero() {
            v += self.f_cos.eval(t, s) * u.iter().map(|uk| uk.cos()).sum::<f64>();
        }
        v
    }

    fn f_grad(
        &self,
        t: f64,
        s: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        u: &[f64],
    ) -> CostGradient {
        let w: Vec<f64> = x.iter().chain(y).chain(z).chain(u).copied().collect();
        let mut g = DVector::from_iterator(w.len(), self.f_lin.entries.iter().map(|p| p.eval(t, s)));
        if !self.f_quad.is_empty() {
            g += sym_quad(&self.f_quad, &w).1;
        }
        if !self.f_cos.is_zero() {
            let c = self.f_cos.eval(t, s);
            let off = w.len() - u.len();
            for (k, uk) in u.iter().enumerate() {
                g[off + k] -= c * uk.sin();
            }
        }
        self.split_f(g)
    }
}

fn dot_v(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn malformed(key: &str, reason: &str) -> Error {
    Error::MalformedParams {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

struct Parser<'a> {
    params: &'a Map<String, Value>,
}

impl Parser<'_> {
    fn coeffs<const K: usize>(key: &str, v: &Value) -> Result<[f64; K]> {
        let mut out = [0.0; K];
        match v {
            Value::Number(x) => out[0] = finite(key, x.as_f64())?,
            Value::Array(a) if a.len() <= K && !a.is_empty() => {
                for (o, c) in out.iter_mut().zip(a) {
                    *o = finite(key, c.as_f64())?;
                }
            }
            _ => {
                return Err(malformed(
                    key,
                    &format!("polynomial entry must be a number or 1..={K} coefficients"),
                ))
            }
        }
        Ok(out)
    }

    fn grid<P, const K: usize>(
        &self,
        key: &str,
        rows: usize,
        cols: usize,
        wrap: impl Fn([f64; K]) -> P,
        matrix: bool,
    ) -> Result<PolyMatrix<P>>
    where
        P: Copy + Default,
    {
        let Some(v) = self.params.get(key) else {
            return Ok(PolyMatrix::zeros(rows, cols));
        };
        let shape_err = || {
            malformed(
                key,
                &if matrix {
                    format!("expected a {rows}x{cols} table")
                } else {
                    format!("expected {rows} entries")
                },
            )
        };
        let mut entries = Vec::with_capacity(rows * cols);
        let mut zero = true;
        let outer = v.as_array().filter(|a| a.len() == rows).ok_or_else(shape_err)?;
        for row in outer {
            let cells: Vec<&Value> = if matrix {
                row.as_array()
                    .filter(|a| a.len() == cols)
                    .ok_or_else(shape_err)?
                    .iter()
                    .collect()
            } else {
                vec![row]
            };
            for cell in cells {
                let c = Self::coeffs::<K>(key, cell)?;
                zero &= c.iter().all(|x| *x == 0.0);
                entries.push(wrap(c));
            }
        }
        Ok(PolyMatrix {
            rows,
            cols,
            entries,
            zero,
        })
    }

    fn vec1(&self, key: &str, rows: usize) -> Result<PolyMatrix<Poly1>> {
        self.grid(key, rows, 1, Poly1, false)
    }

    fn mat1(&self, key: &str, rows: usize, cols: usize) -> Result<PolyMatrix<Poly1>> {
        self.grid(key, rows, cols, Poly1, true)
    }

    fn vec2(&self, key: &str, rows: usize) -> Result<PolyMatrix<Poly2>> {
        self.grid(key, rows, 1, Poly2, false)
    }

    fn mat2(&self, key: &str, rows: usize, cols: usize) -> Result<PolyMatrix<Poly2>> {
        self.grid(key, rows, cols, Poly2, true)
    }

    fn scalar2(&self, key: &str) -> Result<Poly2> {
        match self.params.get(key) {
            None => Ok(Poly2::default()),
            Some(v) => Ok(Poly2(Self::coeffs::<6>(key, v)?)),
        }
    }

    fn number(&self, key: &str) -> Result<Option<f64>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => Ok(Some(finite(key, v.as_f64())?)),
        }
    }

    fn const_vec(&self, key: &str, len: usize) -> Result<DVector<f64>> {
        let Some(v) = self.params.get(key) else {
            return Ok(DVector::zeros(len));
        };
        let a = v
            .as_array()
            .filter(|a| a.len() == len)
            .ok_or_else(|| malformed(key, &format!("expected {len} numbers")))?;
        let vals = a
            .iter()
            .map(|c| finite(key, c.as_f64()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    }

    /// Empty matrix when absent.
    fn const_mat(&self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let Some(v) = self.params.get(key) else {
            return Ok(DMatrix::zeros(0, 0));
        };
        let err = || malformed(key, &format!("expected a {rows}x{cols} table of numbers"));
        let outer = v.as_array().filter(|a| a.len() == rows).ok_or_else(err)?;
        let mut vals = Vec::with_capacity(rows * cols);
        for row in outer {
            let r = row.as_array().filter(|a| a.len() == cols).ok_or_else(err)?;
            for c in r {
                vals.push(finite(key, c.as_f64())?);
            }
        }
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }
}

fn finite(key: &str, v: Option<f64>) -> Result<f64> {
    v.filter(|x| x.is_finite())
        .ok_or_else(|| malformed(key, "expected a finite number"))
}

fn parse_control_set(params: &Map<String, Value>, l: usize) -> Result<BoxSet> {
    let Some(v) = params.get("control_set") else {
        return BoxSet::symmetric(l, 1.0);
    };
    let obj = v
        .as_object()
        .ok_or_else(|| malformed("control_set", "expected an object with `lo` and `hi`"))?;
    if let Some(bad) = obj.keys().find(|k| *k != "lo" && *k != "hi") {
        return Err(malformed(&format!("control_set.{bad}"), "unknown key"));
    }
    let side = |key: &str| -> Result<Vec<f64>> {
        let full = format!("control_set.{key}");
        let a = obj
            .get(key)
            .and_then(Value::as_array)
            .filter(|a| a.len() == l)
            .ok_or_else(|| malformed(&full, &format!("expected {l} numbers")))?;
        a.iter().map(|c| finite(&full, c.as_f64())).collect()
    };
    BoxSet::new(side("lo")?, side("hi")?)
}

/// Builds a named family from its parameter table (a JSON object).
///
/// Absent entries default to zero and dimensions default to 1; unknown keys
/// and shape mismatches are rejected.
pub fn builtin_family(name: &str, params: &Value) -> Result<CoefficientSet> {
    let kind = FamilyKind::parse(name)?;
    let empty = Map::new();
    let map = match params {
        Value::Null => &empty,
        Value::Object(m) => m,
        _ => return Err(malformed("params", "expected an object")),
    };
    let model = PolyFamily::from_params(kind, map)?;
    let set = parse_control_set(map, model.dims.l)?;
    CoefficientSet::new(name, Arc::new(model), set)
}

/// Random parameter table for a family, reproducible from `seed`.
///
/// Coefficients are drawn uniformly from `[-scale, scale]`; every slot the
/// family supports is populated, except `g_zp` unless `with_zprime`.
pub fn random_params(family: &str, dims: Dims, scale: f64, with_zprime: bool, seed: u64) -> Result<Value> {
    let kind = FamilyKind::parse(family)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Dims { n, m, l } = dims;
    let mut out = Map::new();
    out.insert("n".into(), json!(n));
    out.insert("m".into(), json!(m));
    out.insert("l".into(), json!(l));
    if kind == FamilyKind::Zero {
        return Ok(Value::Object(out));
    }
    let num = |rng: &mut ChaCha8Rng| rng.gen_range(-scale..=scale);
    let poly = |rng: &mut ChaCha8Rng, k: usize| -> Value {
        Value::Array((0..k).map(|_| json!(num(rng))).collect())
    };
    let table = |rng: &mut ChaCha8Rng, rows: usize, cols: Option<usize>, k: usize| -> Value {
        Value::Array(
            (0..rows)
                .map(|_| match cols {
                    None => poly(rng, k),
                    Some(c) => Value::Array((0..c).map(|_| poly(rng, k)).collect()),
                })
                .collect(),
        )
    };
    let w = n + 2 * m + l;
    let entries: Vec<(&str, usize, Option<usize>, usize)> = vec![
        ("phi", n, None, 3),
        ("b0", n, None, 6),
        ("b_x", n, Some(n), 6),
        ("b_u", n, Some(l), 6),
        ("sigma0", n, None, 6),
        ("sigma_x", n, Some(n), 6),
        ("sigma_u", n, Some(l), 6),
        ("g0", m, None, 6),
        ("g_xp", m, Some(n), 6),
        ("g_x", m, Some(n), 6),
        ("g_y", m, Some(m), 6),
        ("g_z", m, Some(m), 6),
        ("g_u", m, Some(l), 6),
        ("psi0", m, None, 3),
        ("psi_xp", m, Some(n), 3),
        ("psi_x", m, Some(n), 3),
        ("f_lin", w, None, 6),
    ];
    for (key, rows, cols, k) in entries {
        out.insert(key.into(), table(&mut rng, rows, cols, k));
    }
    if with_zprime {
        out.insert("g_zp".into(), table(&mut rng, m, Some(m), 6));
    }
    out.insert("h0".into(), json!(num(&mut rng)));
    out.insert("h_x".into(), Value::Array((0..n).map(|_| json!(num(&mut rng))).collect()));
    out.insert("h_y".into(), Value::Array((0..m).map(|_| json!(num(&mut rng))).collect()));
    out.insert("f0".into(), poly(&mut rng, 6));
    if matches!(kind, FamilyKind::LqTracking | FamilyKind::SmoothNonlinear) {
        let quad = |size: usize, rng: &mut ChaCha8Rng| -> Value {
            // symmetric positive semidefinite: R Rᵀ
            let r = DMatrix::from_fn(size, size, |_, _| rng.gen_range(-scale..=scale));
            let q = &r * r.transpose();
            Value::Array(
                (0..size)
                    .map(|i| Value::Array((0..size).map(|j| json!(q[(i, j)])).collect()))
                    .collect(),
            )
        };
        out.insert("h_quad".into(), quad(n + m, &mut rng));
        out.insert("f_quad".into(), quad(w, &mut rng));
    }
    if kind == FamilyKind::SmoothNonlinear {
        for key in ["b_sin", "b_usin", "sigma_tanh", "g_sin", "g_tanh", "f_cos"] {
            out.insert(key.into(), poly(&mut rng, 6));
        }
        out.insert("h_cos".into(), json!(num(&mut rng)));
    }
    Ok(Value::Object(out))
}

/// One row of a derivative check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotCheck {
    pub kernel: &'static str,
    pub slot: &'static str,
    pub max_discrepancy: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub step: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub slots: Vec<SlotCheck>,
}

impl DerivativeReport {
    pub fn all_pass(&self) -> bool {
        self.slots.iter().all(|s| s.pass)
    }

    pub fn max_discrepancy(&self) -> f64 {
        self.slots.iter().fold(0.0, |m, s| m.max(s.max_discrepancy))
    }
}

/// Discrepancy threshold flagged by [`validate_derivatives`].
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;

/// Compares every analytic derivative with a central difference of the
/// values at `probes` random points. The discrepancy of an entry is
/// `|analytic − fd| / max(1, |analytic|)`.
pub fn validate_derivatives(
    c: &CoefficientSet,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<DerivativeReport> {
    if !(step > 0.0) {
        return Err(Error::NonPositiveStep(step));
    }
    let Dims { n, m, l } = c.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, &'static str, f64)> = Vec::new();
    let mut record = |kernel: &'static str, slot: &'static str, d: f64| {
        match worst.iter_mut().find(|(k, s, _)| *k == kernel && *s == slot) {
            Some(e) => e.2 = e.2.max(d),
            None => worst.push((kernel, slot, d)),
        }
    };
    let gap = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(1.0);
    let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };

    // vector-valued maps: compare Jacobian column `k` of a slot against
    // (F(v + h e_k) − F(v − h e_k)) / 2h
    fn fd_vec(
        args: &mut [Vec<f64>],
        slot: usize,
        step: f64,
        eval: &dyn Fn(&[Vec<f64>]) -> DVector<f64>,
    ) -> DMatrix<f64> {
        let k = args[slot].len();
        let rows = eval(args).len();
        let mut jac = DMatrix::zeros(rows, k);
        for c in 0..k {
            let orig = args[slot][c];
            args[slot][c] = orig + step;
            let plus = eval(args);
            args[slot][c] = orig - step;
            let minus = eval(args);
            args[slot][c] = orig;
            jac.set_column(c, &((plus - minus) / (2.0 * step)));
        }
        jac
    }

    for _ in 0..probes {
        let t = rng.gen_range(0.0..1.0);
        let s = rng.gen_range(0.0..1.0);

        // b and σ over (x, u)
        let mut args = vec![draw(&mut rng, n), draw(&mut rng, l)];
        let (bx, bu) = c.b_jac(t, s, &args[0], &args[1]);
        let (sx, su) = c.sigma_jac(t, s, &args[0], &args[1]);
        let b_eval = |a: &[Vec<f64>]| c.b(t, s, &a[0], &a[1]);
        let s_eval = |a: &[Vec<f64>]| c.sigma(t, s, &a[0], &a[1]);
        for (kernel, eval, jx, ju) in [
            ("b", &b_eval as &dyn Fn(&[Vec<f64>]) -> DVector<f64>, &bx, &bu),
            ("sigma", &s_eval, &sx, &su),
        ] {
            let fx = fd_vec(&mut args, 0, step, eval);
            let fu = fd_vec(&mut args, 1, step, eval);
            record(kernel, "x", max_gap(jx.as_slice(), fx.as_slice(), gap));
            record(kernel, "u", max_gap(ju.as_slice(), fu.as_slice(), gap));
        }

        // g over (x', x, y, z, z', u)
        let mut gargs = vec![
            draw(&mut rng, n),
            draw(&mut rng, n),
            draw(&mut rng, m),
            draw(&mut rng, m),
            draw(&mut rng, m),
            draw(&mut rng, l),
        ];
        let pack = |a: &[Vec<f64>]| -> DVector<f64> {
            c.g(
                t,
                s,
                &GenArgs {
                    xp: &a[0],
                    x: &a[1],
                    y: &a[2],
                    z: &a[3],
                    zp: &a[4],
                    u: &a[5],
                },
            )
        };
        let jac = c.g_jac(
            t,
            s,
            &GenArgs {
                xp: &gargs[0],
                x: &gargs[1],
                y: &gargs[2],
                z: &gargs[3],
                zp: &gargs[4],
                u: &gargs[5],
            },
        );
        for (slot, (name, analytic)) in [
            ("xp", &jac.xp),
            ("x", &jac.x),
            ("y", &jac.y),
            ("z", &jac.z),
            ("zp", &jac.zp),
            ("u", &jac.u),
        ]
        .into_iter()
        .enumerate()
        {
            let fd = fd_vec(&mut gargs, slot, step, &pack);
            record("g", name, max_gap(analytic.as_slice(), fd.as_slice(), gap));
        }

        // ψ over (x', x)
        let mut pargs = vec![draw(&mut rng, n), draw(&mut rng, n)];
        let (pxp, px) = c.psi_jac(t, &pargs[0], &pargs[1]);
        let p_eval = |a: &[Vec<f64>]| c.psi(t, &a[0], &a[1]);
        let fxp = fd_vec(&mut pargs, 0, step, &p_eval);
        let fx = fd_vec(&mut pargs, 1, step, &p_eval);
        record("psi", "xp", max_gap(pxp.as_slice(), fxp.as_slice(), gap));
        record("psi", "x", max_gap(px.as_slice(), fx.as_slice(), gap));

        // h over (x, y), as 1-row maps
        let mut hargs = vec![draw(&mut rng, n), draw(&mut rng, m)];
        let (hx, hy) = c.h_grad(&hargs[0], &hargs[1]);
        let h_eval = |a: &[Vec<f64>]| DVector::from_element(1, c.h(&a[0], &a[1]));
        let fx = fd_vec(&mut hargs, 0, step, &h_eval);
        let fy = fd_vec(&mut hargs, 1, step, &h_eval);
        record("h", "x", max_gap(hx.as_slice(), fx.as_slice(), gap));
        record("h", "y", max_gap(hy.as_slice(), fy.as_slice(), gap));

        // f over (x, y, z, u)
        let mut fargs = vec![
            draw(&mut rng, n),
            draw(&mut rng, m),
            draw(&mut rng, m),
            draw(&mut rng, l),
        ];
        let fg = c.f_grad(t, s, &fargs[0], &fargs[1], &fargs[2], &fargs[3]);
        let f_eval =
            |a: &[Vec<f64>]| DVector::from_element(1, c.f(t, s, &a[0], &a[1], &a[2], &a[3]));
        for (slot, (name, analytic)) in [("x", &fg.x), ("y", &fg.y), ("z", &fg.z), ("u", &fg.u)]
            .into_iter()
            .enumerate()
        {
            let fd = fd_vec(&mut fargs, slot, step, &f_eval);
            record("f", name, max_gap(analytic.as_slice(), fd.as_slice(), gap));
        }
    }

    Ok(DerivativeReport {
        step,
        probes,
        tolerance: DERIVATIVE_TOLERANCE,
        slots: worst
            .into_iter()
            .map(|(kernel, slot, d)| SlotCheck {
                kernel,
                slot,
                max_discrepancy: d,
                pass: d <= DERIVATIVE_TOLERANCE,
            })
            .collect(),
    })
}

fn max_gap(a: &[f64], fd: &[f64], gap: impl Fn(f64, f64) -> f64) -> f64 {
    a.iter().zip(fd.iter()).fold(0.0, |m, (x, y)| m.max(gap(*x, *y)))
}
