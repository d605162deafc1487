use super::schur::{blocks_of, real_schur, SchurForm};
use super::{ensure_finite, ensure_square, DenseMatrix, MatError};

/// Largest `n·m` accepted by [`separation`].
pub const SEPARATION_MAX_DIM: usize = 4096;

const PIVOT_RTOL: f64 = 1e-12;
const CONSISTENT_RTOL: f64 = 1e-8;

/// Solves `a1 X - X a2 = c` by Bartels–Stewart.
pub fn solve_sylvester(a1: &DenseMatrix, a2: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix, MatError> {
    let s1 = real_schur(a1)?;
    let s2 = real_schur(a2)?;
    solve_sylvester_schur(&s1, &s2, c)
}

/// Bartels–Stewart with precomputed Schur forms of `a1` and `a2`.
///
/// A pivot of the block back-substitution below `1e-12·(‖a1‖_F + ‖a2‖_F)`
/// raises `SpectraOverlap`, unless the corresponding reduced right-hand side
/// is negligible too; the system is then consistent and the free unknowns
/// are set to zero.
pub fn solve_sylvester_schur(s1: &SchurForm, s2: &SchurForm, c: &DenseMatrix) -> Result<DenseMatrix, MatError> {
    let n = s1.dim();
    let m = s2.dim();
    if c.nrows() != n || c.ncols() != m {
        return Err(MatError::ShapeMismatch(format!(
            "right-hand side is {}x{}, expected {n}x{m}",
            c.nrows(),
            c.ncols()
        )));
    }
    ensure_finite(c)?;
    if n == 0 || m == 0 {
        return Ok(DenseMatrix::zeros(n, m));
    }
    let t1 = &s1.t;
    let t2 = &s2.t;
    let threshold = PIVOT_RTOL * (t1.norm() + t2.norm());
    let consistent_tol = CONSISTENT_RTOL * c.norm();

    let mut y = s1.q.transpose() * c * &s2.q;
    let rows = blocks_of(t1);
    let cols = blocks_of(t2);

    for &(j0, q) in &cols {
        // fold in the already solved columns: F_J + Y_{<J} T2_{<J,J}
        for jj in 0..q {
            let j = j0 + jj;
            for l in 0..j0 {
                let t = t2[(l, j)];
                if t != 0.0 {
                    for i in 0..n {
                        let v = y[(i, l)];
                        y[(i, j)] += v * t;
                    }
                }
            }
        }
        for &(i0, p) in rows.iter().rev() {
            let mut rhs = [[0.0; 2]; 2];
            for ii in 0..p {
                for jj in 0..q {
                    let mut s = y[(i0 + ii, j0 + jj)];
                    for k in i0 + p..n {
                        s -= t1[(i0 + ii, k)] * y[(k, j0 + jj)];
                    }
                    rhs[ii][jj] = s;
                }
            }
            let mut a = [[0.0; 2]; 2];
            let mut b = [[0.0; 2]; 2];
            for ii in 0..p {
                for kk in 0..p {
                    a[ii][kk] = t1[(i0 + ii, i0 + kk)];
                }
            }
            for ll in 0..q {
                for jj in 0..q {
                    b[ll][jj] = t2[(j0 + ll, j0 + jj)];
                }
            }
            let x = small_solve(&a, p, &b, q, &rhs, threshold, consistent_tol)?;
            for ii in 0..p {
                for jj in 0..q {
                    y[(i0 + ii, j0 + jj)] = x[ii][jj];
                }
            }
        }
    }
    Ok(&s1.q * y * s2.q.transpose())
}

/// Solves `a x - x b = rhs` for blocks of size `p`, `q` ≤ 2 by Gaussian
/// elimination with complete pivoting.
fn small_solve(
    a: &[[f64; 2]; 2],
    p: usize,
    b: &[[f64; 2]; 2],
    q: usize,
    rhs: &[[f64; 2]; 2],
    threshold: f64,
    consistent_tol: f64,
) -> Result<[[f64; 2]; 2], MatError> {
    let dim = p * q;
    let mut m = [[0.0f64; 4]; 4];
    let mut f = [0.0f64; 4];
    for j in 0..q {
        for i in 0..p {
            let row = i + j * p;
            f[row] = rhs[i][j];
            for l in 0..p {
                m[row][l + j * p] += a[i][l];
            }
            for l in 0..q {
                m[row][i + l * p] -= b[l][j];
            }
        }
    }
    let mut perm = [0usize, 1, 2, 3];
    let mut rank = dim;
    for k in 0..dim {
        let (mut pi, mut pj, mut best) = (k, k, -1.0f64);
        for i in k..dim {
            for j in k..dim {
                if m[i][j].abs() > best {
                    best = m[i][j].abs();
                    pi = i;
                    pj = j;
                }
            }
        }
        if best < threshold {
            rank = k;
            break;
        }
        m.swap(k, pi);
        f.swap(k, pi);
        for row in m.iter_mut() {
            row.swap(k, pj);
        }
        perm.swap(k, pj);
        for i in k + 1..dim {
            let g = m[i][k] / m[k][k];
            if g != 0.0 {
                for j in k..dim {
                    m[i][j] -= g * m[k][j];
                }
                f[i] -= g * f[k];
            }
        }
    }
    if rank < dim {
        let worst = f[rank..dim].iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if worst > consistent_tol {
            let pivot = (rank..dim)
                .flat_map(|i| (rank..dim).map(move |j| (i, j)))
                .fold(0.0f64, |acc, (i, j)| acc.max(m[i][j].abs()));
            return Err(MatError::SpectraOverlap { pivot, threshold });
        }
    }
    let mut z = [0.0f64; 4];
    for k in (0..rank).rev() {
        let mut s = f[k];
        for j in k + 1..rank {
            s -= m[k][j] * z[j];
        }
        z[k] = s / m[k][k];
    }
    let mut sol = [0.0f64; 4];
    for k in 0..dim {
        sol[perm[k]] = z[k];
    }
    let mut x = [[0.0; 2]; 2];
    for j in 0..q {
        for i in 0..p {
            x[i][j] = sol[i + j * p];
        }
    }
    Ok(x)
}

/// Explicit matrix of `X ↦ a1 X - X a2` acting on column-stacked `vec(X)`:
/// `I ⊗ a1 - a2ᵀ ⊗ I`.
pub(crate) fn sylvester_operator(a1: &DenseMatrix, a2: &DenseMatrix) -> DenseMatrix {
    let n = a1.nrows();
    let m = a2.nrows();
    let mut k = DenseMatrix::zeros(n * m, n * m);
    for j in 0..m {
        for i in 0..n {
            for l in 0..n {
                k[(j * n + i, j * n + l)] += a1[(i, l)];
            }
        }
        for l in 0..m {
            let v = a2[(l, j)];
            if v != 0.0 {
                for i in 0..n {
                    k[(j * n + i, l * n + i)] -= v;
                }
            }
        }
    }
    k
}

/// `sep(a1, a2) = min ‖a1 X - X a2‖_F / ‖X‖_F`, the smallest singular value
/// of the assembled Kronecker operator.
///
/// Returns exactly 0 when a pair of diagonal Schur blocks fails the pivot
/// test of [`solve_sylvester`], so that the two agree on which pairs have
/// overlapping spectra.
pub fn separation(a1: &DenseMatrix, a2: &DenseMatrix) -> Result<f64, MatError> {
    let n = ensure_square(a1)?;
    let m = ensure_square(a2)?;
    ensure_finite(a1)?;
    ensure_finite(a2)?;
    let dim = n * m;
    if dim > SEPARATION_MAX_DIM {
        return Err(MatError::TooLarge { dim, limit: SEPARATION_MAX_DIM });
    }
    if dim == 0 {
        return Ok(0.0);
    }
    let s1 = real_schur(a1)?;
    let s2 = real_schur(a2)?;
    let threshold = PIVOT_RTOL * (s1.t.norm() + s2.t.norm());
    for &(i0, p) in &blocks_of(&s1.t) {
        for &(j0, q) in &blocks_of(&s2.t) {
            let a = diag_block(&s1.t, i0, p);
            let b = diag_block(&s2.t, j0, q);
            // any rank loss is reported since no residual is below -1
            if small_solve(&a, p, &b, q, &[[1.0; 2]; 2], threshold, -1.0).is_err() {
                return Ok(0.0);
            }
        }
    }
    let k = sylvester_operator(a1, a2);
    Ok(k.svd(false, false).singular_values.min())
}

fn diag_block(t: &DenseMatrix, i0: usize, p: usize) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..p {
        for j in 0..p {
            out[i][j] = t[(i0 + i, i0 + j)];
        }
    }
    out
}
