//! Random matrix kernels `K(i, j)` adapted in the inner index.
//!
//! Entry `(i, j)` is a matrix per node of its storage level, which is `j`
//! for kernels built directly and may be shallower for transposed ones
//! (a coarser field is still measurable at level `j`). Absent entries are zero.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lattice::{NodeField, VolterraField};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    level: usize,
    mats: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixKernel {
    rows: usize,
    cols: usize,
    out_dim: usize,
    in_dim: usize,
    entries: Vec<Option<Entry>>,
}

impl MatrixKernel {
    pub fn zeros(rows: usize, cols: usize, out_dim: usize, in_dim: usize) -> Self {
        Self {
            rows,
            cols,
            out_dim,
            in_dim,
            entries: vec![None; rows * cols],
        }
    }

    /// `fill(i, j, node)` is called for every level-`j` node of every entry
    /// where `keep(i, j)` holds.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        out_dim: usize,
        in_dim: usize,
        keep: impl Fn(usize, usize) -> bool,
        mut fill: impl FnMut(usize, usize, usize) -> DMatrix<f64>,
    ) -> Self {
        let mut k = Self::zeros(rows, cols, out_dim, in_dim);
        for i in 0..rows {
            for j in 0..cols {
                if keep(i, j) {
                    let mats = (0..1usize << j).map(|v| fill(i, j, v)).collect();
                    k.entries[i * cols + j] = Some(Entry { level: j, mats });
                }
            }
        }
        k
    }

    /// Entries uniform in `[-bound, bound]`, reproducible from `seed`.
    pub fn random(
        rows: usize,
        cols: usize,
        out_dim: usize,
        in_dim: usize,
        bound: f64,
        keep: impl Fn(usize, usize) -> bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(rows, cols, out_dim, in_dim, keep, |_, _, _| {
            DMatrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-bound..=bound))
        })
    }

    /// Stores one entry given on any level up to `j`.
    pub fn set(&mut self, i: usize, j: usize, level: usize, mats: Vec<DMatrix<f64>>) {
        assert!(level <= j, "kernel entry ({i}, {j}) must be measurable at level {j}");
        assert_eq!(mats.len(), 1 << level);
        self.entries[i * self.cols + j] = Some(Entry { level, mats });
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// No stored entries at all.
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }

    pub fn is_zero_entry(&self, i: usize, j: usize) -> bool {
        i >= self.rows || j >= self.cols || self.entries[i * self.cols + j].is_none()
    }

    /// `K(i, j)` seen from `node` at `level ≥` its storage level.
    #[inline]
    pub fn get(&self, i: usize, j: usize, node: usize, level: usize) -> Option<&DMatrix<f64>> {
        if i >= self.rows || j >= self.cols {
            return None;
        }
        let e = self.entries[i * self.cols + j].as_ref()?;
        debug_assert!(level >= e.level);
        Some(&e.mats[node >> (level - e.level)])
    }

    /// `out += factor·K(i,j)·v`.
    #[inline]
    pub fn apply_add(
        &self,
        i: usize,
        j: usize,
        node: usize,
        level: usize,
        v: &[f64],
        factor: f64,
        out: &mut [f64],
    ) {
        if let Some(k) = self.get(i, j, node, level) {
            for (r, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (c, x) in v.iter().enumerate() {
                    acc += k[(r, c)] * x;
                }
                *o += factor * acc;
            }
        }
    }

    /// `out += factor·K(i,j)ᵀ·v`.
    #[inline]
    pub fn apply_t_add(
        &self,
        i: usize,
        j: usize,
        node: usize,
        level: usize,
        v: &[f64],
        factor: f64,
        out: &mut [f64],
    ) {
        if let Some(k) = self.get(i, j, node, level) {
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, x) in v.iter().enumerate() {
                    acc += k[(r, c)] * x;
                }
                *o += factor * acc;
            }
        }
    }

    /// `K'(i, j) = K(j, i)ᵀ` restricted to `j > i`, with `cols` columns of
    /// the result. This is the kernel swap that turns a forward equation's
    /// data into its backward adjoint's data; the diagonal is dropped because
    /// the forward recursion never reads `K(i, i)`.
    pub fn swapped_upper(&self, rows: usize, cols: usize) -> MatrixKernel {
        let mut out = MatrixKernel::zeros(rows, cols, self.in_dim, self.out_dim);
        for i in 0..rows {
            for j in (i + 1)..cols {
                if j < self.rows && i < self.cols {
                    if let Some(e) = &self.entries[j * self.cols + i] {
                        out.entries[i * cols + j] = Some(Entry {
                            level: e.level,
                            mats: e.mats.iter().map(|m| m.transpose()).collect(),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .flat_map(|e| e.mats.iter())
            .fold(0.0, |m, k| m.max(k.amax()))
    }

    /// `K(i, j)·v(i, j)` for a Volterra field `v`, as a new field on the
    /// entries both store.
    pub fn times_field(&self, v: &VolterraField) -> VolterraField {
        VolterraField::from_fn(
            self.out_dim,
            v.domain(),
            v.rows(),
            v.cols(),
            |i, j, node, out| {
                if let Some(e) = v.get(i, j) {
                    self.apply_add(i, j, node, j, e.at(node), 1.0, out);
                }
            },
        )
    }

    /// Entry `(i, j)` as a per-node field of flattened column-major matrices.
    pub fn entry_field(&self, i: usize, j: usize) -> Option<NodeField> {
        let e = self.entries.get(i * self.cols + j)?.as_ref()?;
        let width = self.out_dim * self.in_dim;
        NodeField::from_values(
            e.level,
            width,
            e.mats.iter().flat_map(|m| m.iter().copied()).collect(),
        )
        .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_transposes_and_drops_diagonal() {
        let k = MatrixKernel::random(3, 3, 2, 1, 1.0, |i, j| j < i, 4);
        let s = k.swapped_upper(3, 3);
        assert_eq!(s.out_dim(), 1);
        assert_eq!(s.in_dim(), 2);
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    for node in 0..(1 << j) {
                        let a = s.get(i, j, node, j).unwrap();
                        let b = k.get(j, i, node >> (j - i), i).unwrap();
                        assert_eq!(a, &b.transpose());
                    }
                } else {
                    assert!(s.is_zero_entry(i, j));
                }
            }
        }
    }

    #[test]
    fn apply_matches_matrix_product() {
        let k = MatrixKernel::random(2, 2, 2, 3, 1.0, |_, _| true, 1);
        let v = [0.5, -1.0, 2.0];
        let mut out = [0.0; 2];
        k.apply_add(1, 1, 1, 1, &v, 2.0, &mut out);
        let want = k.get(1, 1, 1, 1).unwrap() * nalgebra::DVector::from_column_slice(&v) * 2.0;
        assert!((out[0] - want[0]).abs() < 1e-15 && (out[1] - want[1]).abs() < 1e-15);
        let w = [1.0, 3.0];
        let mut out = [0.0; 3];
        k.apply_t_add(1, 1, 2, 2, &w, 1.0, &mut out);
        let want = k.get(1, 1, 1, 1).unwrap().transpose() * nalgebra::DVector::from_column_slice(&w);
        for c in 0..3 {
            assert!((out[c] - want[c]).abs() < 1e-15);
        }
    }
}
