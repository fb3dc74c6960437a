//! Dense linear-algebra oracles. Each one writes the discrete equation as a
//! single linear system over all unknowns at once and solves it directly, so
//! it shares nothing with the recursive solvers beyond the tree geometry.

#![allow(dead_code)]

use fbsvie::duality::{AdjointData, LinearBSVIEData};
use fbsvie::kernel::MatrixKernel;
use fbsvie::lattice::{AdaptedProcess, ScenarioTree};
use nalgebra::{DMatrix, DVector};

/// `E_r` of a leaf-indexed vector, seen from `leaf`.
pub fn leaf_cexp(f: &[Vec<f64>], n: usize, r: usize, leaf: usize) -> Vec<f64> {
    let block = 1usize << (n - r);
    let start = (leaf >> (n - r)) << (n - r);
    let m = f[0].len();
    let mut acc = vec![0.0; m];
    for w in start..start + block {
        for c in 0..m {
            acc[c] += f[w][c];
        }
    }
    acc.iter().map(|a| a / block as f64).collect()
}

fn mat(k: &MatrixKernel, i: usize, j: usize, node: usize, level: usize) -> Option<DMatrix<f64>> {
    k.get(i, j, node, level).cloned()
}

struct Rows {
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl Rows {
    fn new(cols: usize) -> Self {
        Self { cols, entries: Vec::new(), rhs: Vec::new() }
    }

    fn push(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        let r = self.rhs.len();
        for &(c, v) in coeffs {
            self.entries.push((r, c, v));
        }
        self.rhs.push(rhs);
    }

    fn solve(self) -> (Vec<f64>, f64) {
        let mut a = DMatrix::zeros(self.rhs.len(), self.cols);
        for (r, c, v) in self.entries {
            a[(r, c)] += v;
        }
        let b = DVector::from_vec(self.rhs);
        assert_eq!(a.nrows(), a.ncols(), "oracle system must be square");
        let x = a.clone().full_piv_lu().solve(&b).expect("nonsingular oracle system");
        let res = (&a * &x - &b).amax();
        (x.as_slice().to_vec(), res)
    }
}

/// Dense solution of a linear BSVIE with its M-solution closure:
/// `y[i][node][c]` for `i ≤ N`, `z[i][j][node][c]` for `i ≤ N`, `j < N`.
pub struct DenseBsvie {
    pub y: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<Vec<Vec<f64>>>>,
    /// Max-norm residual of the dense solve.
    pub residual: f64,
}

pub fn dense_linear_bsvie(tree: &ScenarioTree, d: &LinearBSVIEData) -> DenseBsvie {
    let n = tree.steps();
    let m = d.dim();
    let dt = tree.dt();
    let leaves = 1usize << n;
    let y_total = m * ((2usize << n) - 1);
    let y_idx = |i: usize, v: usize, c: usize| m * ((1usize << i) - 1 + v) + c;
    let z_idx = |i: usize, j: usize, v: usize, c: usize| {
        y_total + m * (i * (leaves - 1) + (1usize << j) - 1 + v) + c
    };
    let total = y_total + m * (n + 1) * (leaves - 1);
    let mut rows = Rows::new(total);

    // the equation on every path
    for i in 0..n {
        for leaf in 0..leaves {
            for c in 0..m {
                let mut row = vec![(y_idx(i, leaf >> (n - i), c), 1.0)];
                for j in i..n {
                    let vj = leaf >> (n - j);
                    let dw = tree.increment(j, leaf, n);
                    if let Some(a) = mat(&d.a, i, j, vj, j) {
                        for c2 in 0..m {
                            row.push((y_idx(j, vj, c2), -dt * a[(c, c2)]));
                        }
                    }
                    if let Some(b) = mat(&d.b, i, j, vj, j) {
                        for c2 in 0..m {
                            row.push((z_idx(i, j, vj, c2), -dt * b[(c, c2)]));
                        }
                    }
                    if let Some(k) = mat(&d.c, i, j, vj, j) {
                        for c2 in 0..m {
                            row.push((z_idx(j, i, leaf >> (n - i), c2), -dt * k[(c, c2)]));
                        }
                    }
                    row.push((z_idx(i, j, vj, c), dw));
                }
                rows.push(&row, d.psi.slice(i).at(leaf)[c]);
            }
        }
    }
    for leaf in 0..leaves {
        for c in 0..m {
            rows.push(&[(y_idx(n, leaf, c), 1.0)], d.psi.slice(n).at(leaf)[c]);
        }
    }
    // Y(t_i) = E Y(t_i) + Σ_{j<i} Z(i,j) ΔW_j; the rows sum to 0 = 0 over
    // the nodes, so node 0 is dropped to keep the system square
    for i in 1..=n {
        let width = 1usize << i;
        for v in 1..width {
            for c in 0..m {
                let mut row = vec![(y_idx(i, v, c), 1.0)];
                for w in 0..width {
                    row.push((y_idx(i, w, c), -1.0 / width as f64));
                }
                for j in 0..i {
                    row.push((z_idx(i, j, v >> (i - j), c), -tree.increment(j, v, i)));
                }
                rows.push(&row, 0.0);
            }
        }
    }
    let (x, residual) = rows.solve();
    let y = (0..=n)
        .map(|i| (0..1usize << i).map(|v| (0..m).map(|c| x[y_idx(i, v, c)]).collect()).collect())
        .collect();
    let z = (0..=n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    (0..1usize << j)
                        .map(|v| (0..m).map(|c| x[z_idx(i, j, v, c)]).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    DenseBsvie { y, z, residual }
}

/// Right-hand side of the adjoint equation at `xi[i][leaf][c]`, `i < N`,
/// written from its definition with leaf-block averages.
pub fn xi_map(
    tree: &ScenarioTree,
    d: &LinearBSVIEData,
    a: &AdjointData,
    xi: &[Vec<Vec<f64>>],
) -> Vec<Vec<Vec<f64>>> {
    let n = tree.steps();
    let m = d.dim();
    let dt = tree.dt();
    let leaves = 1usize << n;
    let tmv = |k: &DMatrix<f64>, v: &[f64]| -> Vec<f64> {
        (k.transpose() * DVector::from_column_slice(v)).as_slice().to_vec()
    };
    let add = |acc: &mut Vec<f64>, v: &[f64], s: f64| {
        for c in 0..m {
            acc[c] += s * v[c];
        }
    };
    let mut out = vec![vec![vec![0.0; m]; leaves]; n];
    for i in 0..n {
        for leaf in 0..leaves {
            let vi = leaf >> (n - i);
            let mut acc = a.alpha.slice(i).at(vi).to_vec();
            for j in 0..=i {
                if let Some(k) = mat(&d.a, j, i, vi, i) {
                    add(&mut acc, &tmv(&k, &leaf_cexp(&xi[j], n, i, leaf)), dt);
                }
            }
            for j in 0..i {
                if !d.c.is_zero_entry(j, i) {
                    let prod: Vec<Vec<f64>> = (0..leaves)
                        .map(|w| tmv(&mat(&d.c, j, i, w >> (n - i), i).unwrap(), &xi[j][w]))
                        .collect();
                    add(&mut acc, &leaf_cexp(&prod, n, j, leaf), tree.increment(j, leaf, n));
                }
            }
            for j in 0..n {
                let vj = leaf >> (n - j);
                let dw = tree.increment(j, leaf, n);
                add(&mut acc, a.beta.entry(i, j).at(vj), dw);
                if j >= i {
                    if let Some(k) = mat(&d.b, i, j, vj, j) {
                        add(&mut acc, &tmv(&k, &leaf_cexp(&xi[i], n, j, leaf)), dw);
                    }
                }
            }
            if let Some(k) = mat(&d.c, i, i, vi, i) {
                add(&mut acc, &tmv(&k, &leaf_cexp(&xi[i], n, i, leaf)), tree.increment(i, leaf, n));
            }
            out[i][leaf] = acc;
        }
    }
    out
}

/// Solves `ξ = F(ξ)` as `(I − M) ξ = F(0)` with `M` assembled column by
/// column from the affine map.
pub fn dense_xi(tree: &ScenarioTree, d: &LinearBSVIEData, a: &AdjointData) -> Vec<Vec<Vec<f64>>> {
    let n = tree.steps();
    let m = d.dim();
    let leaves = 1usize << n;
    let size = n * leaves * m;
    let flat = |x: &[Vec<Vec<f64>>]| -> Vec<f64> {
        x.iter().flat_map(|s| s.iter().flat_map(|v| v.iter().copied())).collect()
    };
    let zero = vec![vec![vec![0.0; m]; leaves]; n];
    let f0 = flat(&xi_map(tree, d, a, &zero));
    let mut sys = DMatrix::<f64>::identity(size, size);
    for k in 0..size {
        let mut basis = zero.clone();
        basis[k / (leaves * m)][(k / m) % leaves][k % m] = 1.0;
        let fk = flat(&xi_map(tree, d, a, &basis));
        for r in 0..size {
            sys[(r, k)] -= fk[r] - f0[r];
        }
    }
    let x = sys.lu().solve(&DVector::from_vec(f0)).expect("invertible adjoint system");
    (0..n)
        .map(|i| {
            (0..leaves)
                .map(|leaf| (0..m).map(|c| x[(i * leaves + leaf) * m + c]).collect())
                .collect()
        })
        .collect()
}

/// Linear FSVIE written as one lower-triangular system over every node of
/// every level and solved by LU.
pub fn dense_linear_fsvie(
    tree: &ScenarioTree,
    a0: &MatrixKernel,
    c0: &MatrixKernel,
    phi: &AdaptedProcess,
) -> Vec<Vec<Vec<f64>>> {
    let n = tree.steps();
    let m = phi.dim();
    let dt = tree.dt();
    let idx = |i: usize, v: usize, c: usize| m * ((1usize << i) - 1 + v) + c;
    let size = m * ((2usize << n) - 1);
    let mut sys = DMatrix::<f64>::identity(size, size);
    let mut rhs = DVector::zeros(size);
    for i in 0..=n {
        for v in 0..1usize << i {
            for c in 0..m {
                let r = idx(i, v, c);
                rhs[r] = phi.slice(i).at(v)[c];
                for j in 0..i {
                    let vj = v >> (i - j);
                    let dw = tree.increment(j, v, i);
                    for (k, w) in [(a0, dt), (c0, dw)] {
                        if let Some(kk) = k.get(i, j, vj, j) {
                            for c2 in 0..m {
                                sys[(r, idx(j, vj, c2))] -= w * kk[(c, c2)];
                            }
                        }
                    }
                }
            }
        }
    }
    let x = sys.lu().solve(&rhs).expect("unit lower-triangular system");
    (0..=n)
        .map(|i| (0..1usize << i).map(|v| (0..m).map(|c| x[idx(i, v, c)]).collect()).collect())
        .collect()
}
