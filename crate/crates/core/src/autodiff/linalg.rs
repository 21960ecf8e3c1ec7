//! Dense linear-algebra operations on the tape: matrix product, transpose,
//! diagonal embed/extract, triangular-factor construction, Cholesky
//! factorization, and lower-triangular solves.

use super::{accumulate, Node, NodeId, Op, Tape};
use crate::error::{Error, Result};

impl Tape {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape(format!(
                "matmul expects [m,k] x [k,n], got {ash:?} x {bsh:?}"
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let values = mat_mul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        self.push(Op::Matmul, vec![a, b], vec![m, n], values)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::shape(format!("transpose expects 2-d input, got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let values = mat_transpose(&self.nodes[a.0].values, m, n);
        self.push(Op::Transpose, vec![a], vec![n, m], values)
    }

    /// Embeds a `[n]` vector as the diagonal of an `[n, n]` matrix.
    pub fn diag_embed(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape.len() != 1 {
            return Err(Error::shape(format!("diag_embed expects 1-d input, got {shape:?}")));
        }
        let n = shape[0];
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = self.nodes[a.0].values[i];
        }
        self.push(Op::DiagEmbed, vec![a], vec![n, n], values)
    }

    /// Extracts the diagonal of an `[n, n]` matrix as a `[n]` vector.
    pub fn diag_part(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape(format!("diag_part expects square input, got {shape:?}")));
        }
        let n = shape[0];
        let values: Vec<f64> = (0..n).map(|i| self.nodes[a.0].values[i * n + i]).collect();
        self.push(Op::DiagPart, vec![a], vec![n], values)
    }

    /// Maps an unconstrained `[n, n]` matrix to a lower-triangular factor:
    /// strictly-lower entries pass through, the diagonal is exponentiated
    /// (guaranteeing positive pivots), and the upper triangle is zeroed.
    pub fn lower_tri_exp_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape(format!(
                "lower_tri_exp_diag expects square input, got {shape:?}"
            )));
        }
        let n = shape[0];
        let raw = &self.nodes[a.0].values;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                values[i * n + j] = raw[i * n + j];
            }
            values[i * n + i] = raw[i * n + i].exp();
        }
        self.push(Op::LowerTriExpDiag, vec![a], vec![n, n], values)
    }

    /// Cholesky factor `L` with `A = L Lᵀ`. `A` must be symmetric positive
    /// definite; a non-positive pivot reports the failing index.
    pub fn cholesky_factor(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape(format!("cholesky expects square input, got {shape:?}")));
        }
        let n = shape[0];
        let av = &self.nodes[a.0].values;
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (av[i * n + j], av[j * n + i]);
                if (x - y).abs() > 1e-8 * x.abs().max(y.abs()).max(1.0) {
                    return Err(Error::numeric(format!(
                        "cholesky input not symmetric at ({i},{j}): {x} vs {y}"
                    )));
                }
            }
        }
        let values = cholesky_vals(av, n)?;
        self.push(Op::CholeskyFactor, vec![a], vec![n, n], values)
    }

    /// Solves `L X = B` for lower-triangular `L` `[n, n]` and `B` either
    /// `[n]` or `[n, m]`.
    pub fn tri_solve_lower(&mut self, l: NodeId, b: NodeId) -> Result<NodeId> {
        let lsh = self.shape(l);
        if lsh.len() != 2 || lsh[0] != lsh[1] {
            return Err(Error::shape(format!("tri_solve expects square factor, got {lsh:?}")));
        }
        let n = lsh[0];
        let bsh = self.shape(b).to_vec();
        let m = match bsh.as_slice() {
            [rows] if *rows == n => 1,
            [rows, cols] if *rows == n => *cols,
            _ => {
                return Err(Error::shape(format!(
                    "tri_solve rhs must be [{n}] or [{n}, m], got {bsh:?}"
                )))
            }
        };
        let values = solve_lower(&self.nodes[l.0].values, &self.nodes[b.0].values, n, m);
        self.push(Op::TriSolveLower, vec![l, b], bsh, values)
    }
}

pub(super) fn backward(node: &Node, before: &mut [Node], go: &[f64]) {
    match &node.op {
        Op::Matmul => {
            let a = node.inputs[0];
            let b = node.inputs[1];
            let m = before[a.0].shape[0];
            let k = before[a.0].shape[1];
            let n = node.shape[1];
            // gA = gC Bᵀ ; gB = Aᵀ gC
            let bt = mat_transpose(&before[b.0].values, k, n);
            let ga = mat_mul(go, &bt, m, n, k);
            let at = mat_transpose(&before[a.0].values, m, k);
            let gb = mat_mul(&at, go, k, m, n);
            accumulate(before, a, &ga);
            accumulate(before, b, &gb);
        }
        Op::Transpose => {
            let (n, m) = (node.shape[0], node.shape[1]);
            let ga = mat_transpose(go, n, m);
            accumulate(before, node.inputs[0], &ga);
        }
        Op::DiagEmbed => {
            let n = node.shape[0];
            let ga: Vec<f64> = (0..n).map(|i| go[i * n + i]).collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::DiagPart => {
            let n = node.values.len();
            let mut ga = vec![0.0; n * n];
            for i in 0..n {
                ga[i * n + i] = go[i];
            }
            accumulate(before, node.inputs[0], &ga);
        }
        Op::LowerTriExpDiag => {
            let n = node.shape[0];
            let mut ga = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..i {
                    ga[i * n + j] = go[i * n + j];
                }
                // diagonal went through exp, so scale by the forward value
                ga[i * n + i] = go[i * n + i] * node.values[i * n + i];
            }
            accumulate(before, node.inputs[0], &ga);
        }
        Op::CholeskyFactor => {
            let n = node.shape[0];
            let ga = cholesky_backward(&node.values, go, n);
            accumulate(before, node.inputs[0], &ga);
        }
        Op::TriSolveLower => {
            let l = node.inputs[0];
            let n = node.shape[0];
            let m = node.values.len() / n;
            // y = L⁻¹B: gB = L⁻ᵀ ȳ ; gL = -tril(gB yᵀ)
            let gb = solve_lower_transpose(&before[l.0].values, go, n, m);
            let mut gl = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..m {
                        s += gb[i * m + c] * node.values[j * m + c];
                    }
                    gl[i * n + j] = -s;
                }
            }
            accumulate(before, l, &gl);
            accumulate(before, node.inputs[1], &gb);
        }
        _ => unreachable!("linalg::backward got a non-linalg op"),
    }
}

pub(crate) fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += av * row[j];
            }
        }
    }
    out
}

pub(crate) fn mat_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Plain Cholesky factorization, row-major lower factor.
pub(crate) fn cholesky_vals(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::numeric(format!(
                        "matrix not positive definite: pivot {i} is {s}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L X = B` by forward substitution; `B` is `[n, m]` row-major.
pub(crate) fn solve_lower(l: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for p in 0..i {
            let lip = l[i * n + p];
            for c in 0..m {
                x[i * m + c] -= lip * x[p * m + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    x
}

/// Solves `Lᵀ X = B` by back substitution; `B` is `[n, m]` row-major.
pub(crate) fn solve_lower_transpose(l: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for p in (i + 1)..n {
            // (Lᵀ)[i][p] = L[p][i]
            let lpi = l[p * n + i];
            for c in 0..m {
                x[i * m + c] -= lpi * x[p * m + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    x
}

/// Reverse-mode rule for Cholesky (Murray, 2016): with `P = Φ(Lᵀ L̄)` where
/// `Φ` keeps the lower triangle and halves the diagonal,
/// `Ā = ½ L⁻ᵀ (P + Pᵀ) L⁻¹`.
fn cholesky_backward(l: &[f64], gl: &[f64], n: usize) -> Vec<f64> {
    let lt = mat_transpose(l, n, n);
    let mut p = mat_mul(&lt, gl, n, n, n);
    for i in 0..n {
        p[i * n + i] *= 0.5;
        for j in (i + 1)..n {
            p[i * n + j] = 0.0;
        }
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = p[i * n + j] + p[j * n + i];
        }
    }
    // Ā = ½ L⁻ᵀ S L⁻¹ computed as ½ (L⁻ᵀ (L⁻ᵀ S)ᵀ)ᵀ
    let z = solve_lower_transpose(l, &s, n, n);
    let zt = mat_transpose(&z, n, n);
    let w = solve_lower_transpose(l, &zt, n, n);
    let wt = mat_transpose(&w, n, n);
    wt.iter().map(|v| 0.5 * v).collect()
}
