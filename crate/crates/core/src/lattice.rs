//! The exact finite filtered probability space.
//!
//! Time `[0, T]` is cut into `N` equal steps and the Brownian motion is
//! replaced by a non-recombining binary tree whose step-`k` increment is
//! `±√dt` with probability one half. A node at level `k` is the `k`-bit path
//! of moves taken so far, most significant bit first, with `0` meaning "up".
//! Its children are `2v` (up) and `2v + 1` (down), and its ancestor at level
//! `r ≤ k` is `v >> (k - r)`.
//!
//! Every conditional expectation is a finite uniform average over a subtree,
//! so identities such as the Itô isometry hold to machine precision.
//!
//! Conventions used everywhere in the crate:
//! - time integrals are left-endpoint sums `Σ f(t_j) dt`;
//! - stochastic integrals are `Σ z(t_j) ΔW_j`, with `ΔW_j = W(t_{j+1}) - W(t_j)`
//!   measurable at level `j + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of steps a tree may have. Storage grows like `N·2^N`.
pub const MAX_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 || steps > MAX_STEPS {
            return Err(Error::InvalidGrid(format!(
                "steps must lie in 1..={MAX_STEPS}, got {steps}"
            )));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `t_k = k·dt`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Binary non-recombining tree with Rademacher increments.
///
/// Immutable after construction and cheap to clone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioTree {
    grid: TimeGrid,
    sqrt_dt: f64,
}

impl ScenarioTree {
    pub fn new(grid: TimeGrid) -> Self {
        Self {
            sqrt_dt: grid.dt().sqrt(),
            grid,
        }
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Result<Self> {
        Ok(Self::new(TimeGrid::new(horizon, steps)?))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k)
    }

    /// Number of nodes at `level`.
    pub fn width(&self, level: usize) -> usize {
        1 << level
    }

    pub fn leaves(&self) -> usize {
        self.width(self.steps())
    }

    /// Uniform probability of one node at `level`.
    pub fn node_probability(&self, level: usize) -> f64 {
        1.0 / self.width(level) as f64
    }

    pub fn check_index(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            return Err(Error::IndexOutOfRange {
                index: k,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `ΔW_k` along the path of `node` (which must sit at a level `> k`).
    #[inline]
    pub fn increment(&self, k: usize, node: usize, level: usize) -> f64 {
        debug_assert!(k < level);
        if (node >> (level - 1 - k)) & 1 == 0 {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    /// `W(t_k)` as a level-`k` field.
    pub fn brownian(&self, k: usize) -> NodeField {
        NodeField::from_fn(k, 1, |node, out| {
            out[0] = (0..k).map(|j| self.increment(j, node, k)).sum();
        })
    }

    /// One backward step: splits a level-`(r+1)` field into its conditional
    /// mean at level `r` and the representation coefficient
    /// `(V_up - V_down) / (2√dt)`, so that `x = mean + coef·ΔW_r` exactly.
    pub fn one_step(&self, x: &NodeField) -> (NodeField, NodeField) {
        assert!(x.level > 0, "cannot step back from the root");
        let level = x.level - 1;
        let dim = x.dim;
        let mut mean = NodeField::zeros(level, dim);
        let mut coef = NodeField::zeros(level, dim);
        let scale = 0.5 / self.sqrt_dt;
        for v in 0..(1 << level) {
            let up = x.at(2 * v);
            let down = x.at(2 * v + 1);
            let m = mean.at_mut(v);
            for c in 0..dim {
                m[c] = 0.5 * (up[c] + down[c]);
            }
            let z = coef.at_mut(v);
            for c in 0..dim {
                z[c] = (up[c] - down[c]) * scale;
            }
        }
        (mean, coef)
    }

    /// Martingale representation of a random vector measurable at its level
    /// `L`: returns `(E[y], z)` with `y = E[y] + Σ_{k<L} z(k)·ΔW_k` on every
    /// node. `z` has `L` slices.
    pub fn martingale_repr(&self, y: &NodeField) -> (Vec<f64>, AdaptedProcess) {
        let mut slices = Vec::with_capacity(y.level);
        let mut current = y.clone();
        while current.level > 0 {
            let (mean, coef) = self.one_step(&current);
            slices.push(coef);
            current = mean;
        }
        slices.reverse();
        (
            current.data,
            AdaptedProcess {
                dim: y.dim,
                slices,
            },
        )
    }

    /// `Σ_{k=a}^{b-1} z(k)·ΔW_k`, returned on the leaves (it is constant on
    /// level-`b` subtrees).
    pub fn ito_integral(&self, z: &AdaptedProcess, a: usize, b: usize) -> Result<NodeField> {
        self.check_index(b)?;
        if a > b {
            return Err(Error::IndexOutOfRange { index: a, max: b });
        }
        if b > z.len() {
            return Err(Error::IndexOutOfRange {
                index: b,
                max: z.len(),
            });
        }
        let n = self.steps();
        let dim = z.dim;
        Ok(NodeField::from_fn(n, dim, |leaf, out| {
            for k in a..b {
                let dw = self.increment(k, leaf, n);
                let zk = z.slices[k].at(leaf >> (n - k));
                for c in 0..dim {
                    out[c] += zk[c] * dw;
                }
            }
        }))
    }

    /// `Σ_{i<N} e^{β t_i} ( E|y_i|² + Σ_{j≥i} E|z(i,j)|² dt ) dt`, the
    /// squared β-weighted norm on the discrete M-space.
    pub fn weighted_norm(&self, y: &AdaptedProcess, z: &VolterraField, beta: f64) -> f64 {
        assert_eq!(y.dim, z.dim, "weighted_norm: dimension mismatch");
        let n = self.steps();
        let dt = self.dt();
        let mut total = 0.0;
        for i in 0..n.min(y.len()) {
            let mut term = y.slices[i].mean_square();
            for j in i..z.cols() {
                if let Some(zij) = z.get(i, j) {
                    term += zij.mean_square() * dt;
                }
            }
            total += (beta * self.time(i)).exp() * term * dt;
        }
        total
    }
}

/// A random vector measurable at a given tree level: one `dim`-vector per
/// node of that level.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeField {
    level: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NodeField {
    pub fn zeros(level: usize, dim: usize) -> Self {
        Self {
            level,
            dim,
            data: vec![0.0; dim << level],
        }
    }

    pub fn constant(level: usize, value: &[f64]) -> Self {
        let dim = value.len();
        let mut data = Vec::with_capacity(dim << level);
        for _ in 0..(1usize << level) {
            data.extend_from_slice(value);
        }
        Self { level, dim, data }
    }

    /// Builds a field by filling each node's vector (zero-initialised).
    pub fn from_fn(level: usize, dim: usize, mut fill: impl FnMut(usize, &mut [f64])) -> Self {
        let mut field = Self::zeros(level, dim);
        for v in 0..(1usize << level) {
            fill(v, field.at_mut(v));
        }
        field
    }

    pub fn from_values(level: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim << level {
            return Err(Error::Dimension {
                context: "NodeField::from_values",
                expected: dim << level,
                found: data.len(),
            });
        }
        Ok(Self { level, dim, data })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        1 << self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, node: usize) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.dim..(node + 1) * self.dim]
    }

    /// Value seen from a node at a deeper `level` (through its ancestor).
    #[inline]
    pub fn at_descendant(&self, node: usize, level: usize) -> &[f64] {
        debug_assert!(level >= self.level);
        self.at(node >> (level - self.level))
    }

    /// Re-indexes the field on a deeper level; every descendant inherits the
    /// ancestor's value.
    pub fn lift(&self, level: usize) -> NodeField {
        assert!(level >= self.level, "lift: target level below field level");
        NodeField::from_fn(level, self.dim, |v, out| {
            out.copy_from_slice(self.at_descendant(v, level))
        })
    }

    /// `E[x | F_r]` as a level-`r` field: the uniform average over each
    /// level-`r` subtree.
    pub fn cond_expect(&self, r: usize) -> Result<NodeField> {
        if r > self.level {
            return Err(Error::IndexOutOfRange {
                index: r,
                max: self.level,
            });
        }
        let shift = self.level - r;
        let block = 1usize << shift;
        let inv = 1.0 / block as f64;
        Ok(NodeField::from_fn(r, self.dim, |v, out| {
            for w in (v << shift)..((v + 1) << shift) {
                for (o, x) in out.iter_mut().zip(self.at(w)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }))
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for v in 0..self.width() {
            for (o, x) in out.iter_mut().zip(self.at(v)) {
                *o += x;
            }
        }
        let inv = 1.0 / self.width() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    /// `E|x|²`.
    pub fn mean_square(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>() / self.width() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor·other`, lifting `other` if it lives on a shallower level.
    pub fn add_scaled(&mut self, factor: f64, other: &NodeField) {
        assert_eq!(self.dim, other.dim, "add_scaled: dimension mismatch");
        assert!(other.level <= self.level, "add_scaled: other is deeper");
        let level = self.level;
        for v in 0..self.width() {
            let o = other.at_descendant(v, level);
            for (s, x) in self.at_mut(v).iter_mut().zip(o) {
                *s += factor * x;
            }
        }
    }

    pub fn sub(&self, other: &NodeField) -> NodeField {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    /// `max_node |self − other|` after lifting both to the deeper level.
    pub fn max_abs_diff(&self, other: &NodeField) -> f64 {
        let level = self.level.max(other.level);
        let mut worst = 0.0_f64;
        for v in 0..(1usize << level) {
            let a = self.at_descendant(v, level);
            let b = other.at_descendant(v, level);
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// `E⟨a, b⟩` for fields measurable at possibly different levels.
pub fn expect_dot(a: &NodeField, b: &NodeField) -> f64 {
    assert_eq!(a.dim, b.dim, "expect_dot: dimension mismatch");
    let level = a.level.max(b.level);
    let mut sum = 0.0;
    for v in 0..(1usize << level) {
        sum += dot(a.at_descendant(v, level), b.at_descendant(v, level));
    }
    sum / (1usize << level) as f64
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adapted process: slice `k` lives on level `k`, so adaptedness is structural.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    slices: Vec<NodeField>,
}

impl AdaptedProcess {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            dim,
            slices: (0..len).map(|k| NodeField::zeros(k, dim)).collect(),
        }
    }

    pub fn constant(value: &[f64], len: usize) -> Self {
        Self {
            dim: value.len(),
            slices: (0..len).map(|k| NodeField::constant(k, value)).collect(),
        }
    }

    /// `fill(k, node, out)` for every slice `k < len` and level-`k` node.
    pub fn from_fn(
        dim: usize,
        len: usize,
        mut fill: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        Self {
            dim,
            slices: (0..len)
                .map(|k| NodeField::from_fn(k, dim, |v, out| fill(k, v, out)))
                .collect(),
        }
    }

    pub fn from_slices(dim: usize, slices: Vec<NodeField>) -> Result<Self> {
        for (k, s) in slices.iter().enumerate() {
            if s.level != k {
                return Err(Error::Dimension {
                    context: "AdaptedProcess slice level",
                    expected: k,
                    found: s.level,
                });
            }
            if s.dim != dim {
                return Err(Error::Dimension {
                    context: "AdaptedProcess slice dim",
                    expected: dim,
                    found: s.dim,
                });
            }
        }
        Ok(Self { dim, slices })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, k: usize) -> &NodeField {
        &self.slices[k]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut NodeField {
        &mut self.slices[k]
    }

    pub fn slices(&self) -> &[NodeField] {
        &self.slices
    }

    /// Value at time `k` seen from a node on a level `≥ k`.
    #[inline]
    pub fn at(&self, k: usize, node: usize, level: usize) -> &[f64] {
        self.slices[k].at_descendant(node, level)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.slices.iter_mut().for_each(|s| s.scale(factor));
        out
    }

    pub fn add_scaled(&mut self, factor: f64, other: &AdaptedProcess) {
        for (s, o) in self.slices.iter_mut().zip(&other.slices) {
            s.add_scaled(factor, o);
        }
    }

    pub fn sub(&self, other: &AdaptedProcess) -> Self {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices.iter().fold(0.0, |m, s| m.max(s.max_abs()))
    }

    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .fold(0.0, |m, (a, b)| m.max(a.max_abs_diff(b)))
    }
}

/// Time-indexed process whose every entry is only `F_T`-measurable (all
/// slices live on the leaves).
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalProcess {
    dim: usize,
    leaf_level: usize,
    slices: Vec<NodeField>,
}

impl TerminalProcess {
    pub fn zeros(dim: usize, len: usize, leaf_level: usize) -> Self {
        Self {
            dim,
            leaf_level,
            slices: (0..len).map(|_| NodeField::zeros(leaf_level, dim)).collect(),
        }
    }

    /// `fill(k, leaf, out)`.
    pub fn from_fn(
        dim: usize,
        len: usize,
        leaf_level: usize,
        mut fill: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        Self {
            dim,
            leaf_level,
            slices: (0..len)
                .map(|k| NodeField::from_fn(leaf_level, dim, |v, out| fill(k, v, out)))
                .collect(),
        }
    }

    /// Lifts each field to the leaves; fields may sit on any level.
    pub fn from_fields(dim: usize, leaf_level: usize, fields: Vec<NodeField>) -> Result<Self> {
        let mut slices = Vec::with_capacity(fields.len());
        for f in fields {
            if f.dim != dim {
                return Err(Error::Dimension {
                    context: "TerminalProcess slice dim",
                    expected: dim,
                    found: f.dim,
                });
            }
            slices.push(if f.level == leaf_level {
                f
            } else {
                f.lift(leaf_level)
            });
        }
        Ok(Self {
            dim,
            leaf_level,
            slices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn leaf_level(&self) -> usize {
        self.leaf_level
    }

    pub fn slice(&self, k: usize) -> &NodeField {
        &self.slices[k]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut NodeField {
        &mut self.slices[k]
    }

    pub fn slices(&self) -> &[NodeField] {
        &self.slices
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(NodeField::is_finite)
    }

    pub fn max_abs_diff(&self, other: &TerminalProcess) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .fold(0.0, |m, (a, b)| m.max(a.max_abs_diff(b)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Every `(i, j)` with `j < cols`.
    FullSquare,
    /// Only `j ≥ i`.
    UpperTriangle,
}

/// Two-parameter field `Z(i, j)`: the `(i, j)` entry lives on level `j`
/// (adapted in the inner index).
#[derive(Clone, Debug, PartialEq)]
pub struct VolterraField {
    dim: usize,
    domain: Domain,
    cols: usize,
    rows: Vec<Vec<NodeField>>,
}

impl VolterraField {
    pub fn zeros(dim: usize, domain: Domain, rows: usize, cols: usize) -> Self {
        let rows = (0..rows)
            .map(|i| {
                let start = Self::start(domain, i);
                (start..cols).map(|j| NodeField::zeros(j, dim)).collect()
            })
            .collect();
        Self {
            dim,
            domain,
            cols,
            rows,
        }
    }

    /// `fill(i, j, node, out)` for every stored entry.
    pub fn from_fn(
        dim: usize,
        domain: Domain,
        rows: usize,
        cols: usize,
        mut fill: impl FnMut(usize, usize, usize, &mut [f64]),
    ) -> Self {
        let mut field = Self::zeros(dim, domain, rows, cols);
        for i in 0..rows {
            let start = Self::start(domain, i);
            for j in start..cols {
                let entry = &mut field.rows[i][j - start];
                for v in 0..entry.width() {
                    fill(i, j, v, entry.at_mut(v));
                }
            }
        }
        field
    }

    #[inline]
    fn start(domain: Domain, i: usize) -> usize {
        match domain {
            Domain::FullSquare => 0,
            Domain::UpperTriangle => i,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&NodeField> {
        let row = self.rows.get(i)?;
        let start = Self::start(self.domain, i);
        if j < start || j >= self.cols {
            return None;
        }
        row.get(j - start)
    }

    /// Entry `(i, j)`; panics when it is not stored.
    pub fn entry(&self, i: usize, j: usize) -> &NodeField {
        self.get(i, j)
            .unwrap_or_else(|| panic!("VolterraField: entry ({i}, {j}) not stored"))
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut NodeField {
        let start = Self::start(self.domain, i);
        assert!(j >= start && j < self.cols, "VolterraField: entry ({i}, {j}) not stored");
        &mut self.rows[i][j - start]
    }

    pub fn set(&mut self, i: usize, j: usize, value: NodeField) {
        assert_eq!(value.level, j, "VolterraField::set: entry must live on level j");
        *self.entry_mut(i, j) = value;
    }

    pub fn add_scaled(&mut self, factor: f64, other: &VolterraField) {
        for i in 0..self.rows() {
            let start = Self::start(self.domain, i);
            for j in start..self.cols {
                if let Some(o) = other.get(i, j) {
                    self.rows[i][j - start].add_scaled(factor, o);
                }
            }
        }
    }

    pub fn sub(&self, other: &VolterraField) -> Self {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.rows
            .iter_mut()
            .flatten()
            .for_each(|e| e.scale(factor));
        out
    }

    /// Largest entry-wise gap over entries stored in both fields.
    pub fn max_abs_diff(&self, other: &VolterraField) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows().min(other.rows()) {
            for j in 0..self.cols.min(other.cols) {
                if let (Some(a), Some(b)) = (self.get(i, j), other.get(i, j)) {
                    worst = worst.max(a.max_abs_diff(b));
                }
            }
        }
        worst
    }

    /// Copy restricted to the upper triangle `j ≥ i`.
    pub fn upper(&self) -> VolterraField {
        VolterraField::from_fn(
            self.dim,
            Domain::UpperTriangle,
            self.rows(),
            self.cols,
            |i, j, v, out| {
                if let Some(e) = self.get(i, j) {
                    out.copy_from_slice(e.at(v))
                }
            },
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .fold(0.0, |m, e| m.max(e.max_abs()))
    }
}

/// `E[x | F_r]` of a random vector; see [`NodeField::cond_expect`].
pub fn cond_expect(x: &NodeField, r: usize) -> Result<NodeField> {
    x.cond_expect(r)
}
