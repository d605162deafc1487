use nalgebra::Complex;

use super::{ensure_finite, ensure_square, DenseMatrix, Eigenvalue, MatError};

const EPS: f64 = f64::EPSILON;
const MAX_ITERS_PER_EIGENVALUE: usize = 60;

/// Real Schur factorization `A = Q T Qᵀ` with `T` quasi-upper-triangular.
///
/// Diagonal 2x2 blocks hold complex conjugate pairs in standard form
/// (equal diagonal entries); real eigenvalues always sit in 1x1 blocks.
#[derive(Debug, Clone)]
pub struct SchurForm {
    pub q: DenseMatrix,
    pub t: DenseMatrix,
    pub eigenvalues: Vec<Eigenvalue>,
}

impl SchurForm {
    /// Diagonal blocks as `(start, size)` pairs.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        blocks_of(&self.t)
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }
}

pub(crate) fn blocks_of(t: &DenseMatrix) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

fn eigenvalues_of(t: &DenseMatrix) -> Vec<Eigenvalue> {
    let mut ev = Vec::with_capacity(t.nrows());
    for (i, size) in blocks_of(t) {
        if size == 1 {
            ev.push(Complex::new(t[(i, i)], 0.0));
        } else {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let re = 0.5 * (a + d);
            let p = 0.5 * (a - d);
            let disc = p * p + b * c;
            let im = (-disc).max(0.0).sqrt();
            ev.push(Complex::new(re, im));
            ev.push(Complex::new(re, -im));
        }
    }
    ev
}

/// Computes the real Schur factorization of a square matrix.
pub fn real_schur(a: &DenseMatrix) -> Result<SchurForm, MatError> {
    let n = ensure_square(a)?;
    ensure_finite(a)?;
    let mut t = a.clone();
    let mut q = DenseMatrix::identity(n, n);
    if n > 0 {
        schur_window(&mut t, &mut q, 0, n - 1)?;
    }
    let eigenvalues = eigenvalues_of(&t);
    Ok(SchurForm { q, t, eigenvalues })
}

/// Schur factorization after isolating eigenvalues exposed by zero rows and
/// columns (permutation-only balancing). Used where exact structural zeros
/// matter, e.g. Hamiltonians with uncontrollable or unobservable modes.
pub(crate) fn real_schur_isolated(a: &DenseMatrix) -> Result<SchurForm, MatError> {
    let n = ensure_square(a)?;
    ensure_finite(a)?;
    let mut t = a.clone();
    let mut q = DenseMatrix::identity(n, n);
    if n == 0 {
        return Ok(SchurForm { q, t, eigenvalues: Vec::new() });
    }
    let (ilo, ihi) = isolate(&mut t, &mut q);
    if ilo <= ihi {
        schur_window(&mut t, &mut q, ilo, ihi)?;
    }
    let eigenvalues = eigenvalues_of(&t);
    Ok(SchurForm { q, t, eigenvalues })
}

fn swap_sym(t: &mut DenseMatrix, q: &mut DenseMatrix, i: usize, j: usize) {
    if i != j {
        t.swap_rows(i, j);
        t.swap_columns(i, j);
        q.swap_columns(i, j);
    }
}

/// Permutes rows/columns whose off-diagonal part (inside the active window)
/// vanishes to the borders. Returns the remaining active window.
fn isolate(t: &mut DenseMatrix, q: &mut DenseMatrix) -> (usize, usize) {
    let n = t.nrows();
    let mut ilo = 0usize;
    let mut ihi = n - 1;
    // rows with zero off-diagonal part go to the bottom
    'rows: loop {
        if ihi == 0 {
            break;
        }
        for j in (0..=ihi).rev() {
            if (0..=ihi).all(|i| i == j || t[(j, i)] == 0.0) {
                swap_sym(t, q, j, ihi);
                if ihi == 0 {
                    break 'rows;
                }
                ihi -= 1;
                continue 'rows;
            }
        }
        break;
    }
    // columns with zero off-diagonal part go to the top
    'cols: loop {
        for j in ilo..=ihi {
            if (ilo..=ihi).all(|i| i == j || t[(i, j)] == 0.0) {
                swap_sym(t, q, j, ilo);
                ilo += 1;
                if ilo > ihi {
                    break 'cols;
                }
                continue 'cols;
            }
        }
        break;
    }
    (ilo, ihi)
}

/// Householder vector for `x`: returns `(v, beta)` with `(I - beta v vᵀ) x = ±‖x‖ e1`.
fn householder(x: &[f64], v: &mut [f64]) -> f64 {
    let alpha = x[0];
    let sigma: f64 = x[1..].iter().map(|z| z * z).sum();
    v.copy_from_slice(x);
    if sigma == 0.0 {
        return 0.0;
    }
    let norm = (alpha * alpha + sigma).sqrt();
    v[0] = if alpha <= 0.0 { alpha - norm } else { alpha + norm };
    let vtv = v[0] * v[0] + sigma;
    2.0 / vtv
}

/// Applies `I - beta v vᵀ` from the left to rows `r0..r0+len`, columns `c0..c1`.
fn reflect_rows(m: &mut DenseMatrix, v: &[f64], beta: f64, r0: usize, c0: usize, c1: usize) {
    if beta == 0.0 {
        return;
    }
    let len = v.len();
    for j in c0..c1 {
        let mut s = 0.0;
        for k in 0..len {
            s += v[k] * m[(r0 + k, j)];
        }
        s *= beta;
        for k in 0..len {
            m[(r0 + k, j)] -= s * v[k];
        }
    }
}

/// Applies `I - beta v vᵀ` from the right to columns `c0..c0+len`, rows `r0..r1`.
fn reflect_cols(m: &mut DenseMatrix, v: &[f64], beta: f64, c0: usize, r0: usize, r1: usize) {
    if beta == 0.0 {
        return;
    }
    let len = v.len();
    for i in r0..r1 {
        let mut s = 0.0;
        for k in 0..len {
            s += m[(i, c0 + k)] * v[k];
        }
        s *= beta;
        for k in 0..len {
            m[(i, c0 + k)] -= s * v[k];
        }
    }
}

/// Plane rotation on rows `i, i+1` (columns `c0..c1`): `x' = c x + s y`, `y' = c y - s x`.
fn rot_rows(m: &mut DenseMatrix, i: usize, cs: f64, sn: f64, c0: usize, c1: usize) {
    for j in c0..c1 {
        let x = m[(i, j)];
        let y = m[(i + 1, j)];
        m[(i, j)] = cs * x + sn * y;
        m[(i + 1, j)] = cs * y - sn * x;
    }
}

fn rot_cols(m: &mut DenseMatrix, j: usize, cs: f64, sn: f64, r0: usize, r1: usize) {
    for i in r0..r1 {
        let x = m[(i, j)];
        let y = m[(i, j + 1)];
        m[(i, j)] = cs * x + sn * y;
        m[(i, j + 1)] = cs * y - sn * x;
    }
}

/// Reduces `t` to Hessenberg form on the window and runs the Francis
/// double-shift QR iteration there; all transformations are applied to the
/// full matrix and accumulated into `q`.
fn schur_window(t: &mut DenseMatrix, q: &mut DenseMatrix, ilo: usize, ihi: usize) -> Result<(), MatError> {
    let n = t.nrows();
    let mut x = vec![0.0; n];
    let mut v = vec![0.0; n];

    // Hessenberg reduction
    for k in ilo..ihi.saturating_sub(1) {
        let len = ihi - k;
        for (i, xi) in x[..len].iter_mut().enumerate() {
            *xi = t[(k + 1 + i, k)];
        }
        let beta = householder(&x[..len], &mut v[..len]);
        if beta == 0.0 {
            continue;
        }
        reflect_rows(t, &v[..len], beta, k + 1, k, n);
        reflect_cols(t, &v[..len], beta, k + 1, 0, n);
        reflect_cols(q, &v[..len], beta, k + 1, 0, n);
        for i in k + 2..=ihi {
            t[(i, k)] = 0.0;
        }
    }

    let window_norm = {
        let mut s = 0.0f64;
        for j in ilo..=ihi {
            for i in ilo..=ihi.min(j + 1) {
                s = s.max(t[(i, j)].abs());
            }
        }
        s
    };

    let mut hi = ihi as isize;
    let mut its = 0usize;
    let mut total_its = 0usize;
    let cap = MAX_ITERS_PER_EIGENVALUE * (ihi - ilo + 1).max(1);
    let ilo_i = ilo as isize;
    while hi >= ilo_i {
        let m = hi as usize;
        // look for a negligible subdiagonal entry
        let mut l = m;
        while l > ilo {
            let s = t[(l - 1, l - 1)].abs() + t[(l, l)].abs();
            let s = if s == 0.0 { window_norm } else { s };
            if t[(l, l - 1)].abs() <= EPS * s {
                t[(l, l - 1)] = 0.0;
                break;
            }
            l -= 1;
        }
        if l == m {
            hi -= 1;
            its = 0;
            continue;
        }
        if l + 1 == m {
            standardize_block(t, q, l);
            hi -= 2;
            its = 0;
            continue;
        }
        its += 1;
        total_its += 1;
        if its > MAX_ITERS_PER_EIGENVALUE || total_its > cap {
            return Err(MatError::ConvergenceFailure { iterations: total_its });
        }

        let (sum, prod) = if its % 10 == 0 {
            let s = t[(m, m - 1)].abs() + t[(m - 1, m - 2)].abs();
            let h = t[(m, m)];
            (2.0 * h + 1.5 * s, h * h + 1.5 * s * h + s * s)
        } else {
            let (a, b, c, d) = (t[(m - 1, m - 1)], t[(m - 1, m)], t[(m, m - 1)], t[(m, m)]);
            (a + d, a * d - b * c)
        };
        francis_step(t, q, l, m, sum, prod);
    }
    Ok(())
}

fn francis_step(t: &mut DenseMatrix, q: &mut DenseMatrix, l: usize, m: usize, sum: f64, prod: f64) {
    let n = t.nrows();
    let h00 = t[(l, l)];
    let h10 = t[(l + 1, l)];
    let mut x = h00 * h00 + t[(l, l + 1)] * h10 - sum * h00 + prod;
    let mut y = h10 * (h00 + t[(l + 1, l + 1)] - sum);
    let mut z = h10 * t[(l + 2, l + 1)];
    let mut v = [0.0; 3];
    for k in l..=m - 2 {
        let beta = householder(&[x, y, z], &mut v);
        let c0 = if k > l { k - 1 } else { l };
        reflect_rows(t, &v, beta, k, c0, n);
        let r1 = (k + 4).min(m + 1);
        reflect_cols(t, &v, beta, k, 0, r1);
        reflect_cols(q, &v, beta, k, 0, n);
        if k > l {
            t[(k + 1, k - 1)] = 0.0;
            t[(k + 2, k - 1)] = 0.0;
        }
        x = t[(k + 1, k)];
        y = t[(k + 2, k)];
        if k + 3 <= m {
            z = t[(k + 3, k)];
        }
    }
    let mut v2 = [0.0; 2];
    let beta = householder(&[x, y], &mut v2);
    reflect_rows(t, &v2, beta, m - 1, m - 2, n);
    reflect_cols(t, &v2, beta, m - 1, 0, m + 1);
    reflect_cols(q, &v2, beta, m - 1, 0, n);
    t[(m, m - 2)] = 0.0;
}

/// Rotation that brings the 2x2 block at `(k, k)` to standard form; real
/// eigenvalue pairs are split into two 1x1 blocks.
pub(crate) fn standardize_block(t: &mut DenseMatrix, q: &mut DenseMatrix, k: usize) {
    let n = t.nrows();
    let (a, b, c, d) = (t[(k, k)], t[(k, k + 1)], t[(k + 1, k)], t[(k + 1, k + 1)]);
    let (na, nb, nc, nd, cs, sn) = lanv2(a, b, c, d);
    if k + 2 < n {
        rot_rows(t, k, cs, sn, k + 2, n);
    }
    if k > 0 {
        rot_cols(t, k, cs, sn, 0, k);
    }
    rot_cols(q, k, cs, sn, 0, n);
    t[(k, k)] = na;
    t[(k, k + 1)] = nb;
    t[(k + 1, k)] = nc;
    t[(k + 1, k + 1)] = nd;
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Schur factorization of a real 2x2 block in standard form (LAPACK `dlanv2`).
/// Returns the new block `(a, b, c, d)` and the rotation `(cs, sn)`.
fn lanv2(mut a: f64, mut b: f64, mut c: f64, mut d: f64) -> (f64, f64, f64, f64, f64, f64) {
    let (mut cs, mut sn);
    if c == 0.0 {
        cs = 1.0;
        sn = 0.0;
    } else if b == 0.0 {
        cs = 0.0;
        sn = 1.0;
        std::mem::swap(&mut a, &mut d);
        b = -c;
        c = 0.0;
    } else if a - d == 0.0 && sign(1.0, b) != sign(1.0, c) {
        cs = 1.0;
        sn = 0.0;
    } else {
        let temp = a - d;
        let mut p = 0.5 * temp;
        let bcmax = b.abs().max(c.abs());
        let bcmis = b.abs().min(c.abs()) * sign(1.0, b) * sign(1.0, c);
        let scale = p.abs().max(bcmax);
        let mut z = (p / scale) * p + (bcmax / scale) * bcmis;
        if z >= 4.0 * EPS {
            z = p + sign(scale.sqrt() * z.sqrt(), p);
            a = d + z;
            d -= (bcmax / z) * bcmis;
            let tau = c.hypot(z);
            cs = z / tau;
            sn = c / tau;
            b -= c;
            c = 0.0;
        } else {
            let sigma = b + c;
            let tau = sigma.hypot(temp);
            cs = (0.5 * (1.0 + sigma.abs() / tau)).sqrt();
            sn = -(p / (tau * cs)) * sign(1.0, sigma);
            let aa = a * cs + b * sn;
            let bb = -a * sn + b * cs;
            let cc = c * cs + d * sn;
            let dd = -c * sn + d * cs;
            a = aa * cs + cc * sn;
            b = bb * cs + dd * sn;
            c = -aa * sn + cc * cs;
            d = -bb * sn + dd * cs;
            let temp = 0.5 * (a + d);
            a = temp;
            d = temp;
            if c != 0.0 {
                if b != 0.0 {
                    if sign(1.0, b) == sign(1.0, c) {
                        let sab = b.abs().sqrt();
                        let sac = c.abs().sqrt();
                        p = sign(sab * sac, c);
                        let tau = 1.0 / (b + c).abs().sqrt();
                        a = temp + p;
                        d = temp - p;
                        b -= c;
                        c = 0.0;
                        let cs1 = sab * tau;
                        let sn1 = sac * tau;
                        let t2 = cs * cs1 - sn * sn1;
                        sn = cs * sn1 + sn * cs1;
                        cs = t2;
                    }
                } else {
                    b = -c;
                    c = 0.0;
                    let t2 = cs;
                    cs = -sn;
                    sn = t2;
                }
            }
        }
    }
    (a, b, c, d, cs, sn)
}

/// Solves the small Sylvester system `t11 x - x t22 = rhs` (block sizes ≤ 2)
/// by Gaussian elimination with complete pivoting; tiny pivots are replaced
/// by `smin`.
fn small_sylvester(t11: &[[f64; 2]; 2], p: usize, t22: &[[f64; 2]; 2], q: usize, rhs: &[[f64; 2]; 2], smin: f64) -> [[f64; 2]; 2] {
    let dim = p * q;
    let mut m = [[0.0f64; 4]; 4];
    let mut b = [0.0f64; 4];
    // unknown index: i + j * p ; equation index likewise
    for j in 0..q {
        for i in 0..p {
            let row = i + j * p;
            b[row] = rhs[i][j];
            for l in 0..p {
                m[row][l + j * p] += t11[i][l];
            }
            for l in 0..q {
                m[row][i + l * p] -= t22[l][j];
            }
        }
    }
    let sol = gauss_complete(&mut m, &mut b, dim, smin);
    let mut x = [[0.0; 2]; 2];
    for j in 0..q {
        for i in 0..p {
            x[i][j] = sol[i + j * p];
        }
    }
    x
}

fn gauss_complete(m: &mut [[f64; 4]; 4], b: &mut [f64; 4], dim: usize, smin: f64) -> [f64; 4] {
    let mut colperm = [0usize, 1, 2, 3];
    for k in 0..dim {
        let (mut pi, mut pj, mut best) = (k, k, -1.0);
        for i in k..dim {
            for j in k..dim {
                if m[i][j].abs() > best {
                    best = m[i][j].abs();
                    pi = i;
                    pj = j;
                }
            }
        }
        m.swap(k, pi);
        b.swap(k, pi);
        if pj != k {
            for row in m.iter_mut() {
                row.swap(k, pj);
            }
            colperm.swap(k, pj);
        }
        if m[k][k].abs() < smin {
            m[k][k] = smin;
        }
        for i in k + 1..dim {
            let f = m[i][k] / m[k][k];
            if f != 0.0 {
                for j in k..dim {
                    m[i][j] -= f * m[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut y = [0.0; 4];
    for k in (0..dim).rev() {
        let mut s = b[k];
        for j in k + 1..dim {
            s -= m[k][j] * y[j];
        }
        y[k] = s / m[k][k];
    }
    let mut x = [0.0; 4];
    for k in 0..dim {
        x[colperm[k]] = y[k];
    }
    x
}

/// Swaps the adjacent diagonal blocks of sizes `p` (at `k`) and `q` (at `k+p`).
fn swap_blocks(t: &mut DenseMatrix, qm: &mut DenseMatrix, k: usize, p: usize, q: usize) -> Result<(), MatError> {
    let n = t.nrows();
    let tnorm = t.amax();
    let smin = (EPS * tnorm).max(f64::MIN_POSITIVE);
    let mut t11 = [[0.0; 2]; 2];
    let mut t22 = [[0.0; 2]; 2];
    let mut t12 = [[0.0; 2]; 2];
    for i in 0..p {
        for j in 0..p {
            t11[i][j] = t[(k + i, k + j)];
        }
        for j in 0..q {
            t12[i][j] = t[(k + i, k + p + j)];
        }
    }
    for i in 0..q {
        for j in 0..q {
            t22[i][j] = t[(k + p + i, k + p + j)];
        }
    }
    let x = small_sylvester(&t11, p, &t22, q, &t12, smin);

    // Orthogonal basis for range([-X; I]) via Householder QR
    let m = p + q;
    let mut basis = DenseMatrix::zeros(m, q);
    for j in 0..q {
        for i in 0..p {
            basis[(i, j)] = -x[i][j];
        }
        basis[(p + j, j)] = 1.0;
    }
    let mut w = DenseMatrix::identity(m, m);
    let mut v = [0.0; 4];
    let mut col = [0.0; 4];
    for j in 0..q {
        let len = m - j;
        for i in 0..len {
            col[i] = basis[(j + i, j)];
        }
        let beta = householder(&col[..len], &mut v[..len]);
        reflect_rows(&mut basis, &v[..len], beta, j, j, q);
        reflect_cols(&mut w, &v[..len], beta, j, 0, m);
    }

    // Apply the similarity to T and accumulate into Q
    let mut rows = DenseMatrix::zeros(m, n - k);
    for i in 0..m {
        for j in k..n {
            rows[(i, j - k)] = t[(k + i, j)];
        }
    }
    let rows = w.transpose() * rows;
    for i in 0..m {
        for j in k..n {
            t[(k + i, j)] = rows[(i, j - k)];
        }
    }
    let cols = t.view((0, k), (k + m, m)) * &w;
    t.view_mut((0, k), (k + m, m)).copy_from(&cols);
    let qcols = qm.view((0, k), (n, m)) * &w;
    qm.view_mut((0, k), (n, m)).copy_from(&qcols);

    // new layout: q-block first, then p-block; the lower-left p x q part must vanish
    let mut resid = 0.0f64;
    for i in 0..p {
        for j in 0..q {
            resid = resid.max(t[(k + q + i, k + j)].abs());
            t[(k + q + i, k + j)] = 0.0;
        }
    }
    if resid > 100.0 * EPS * tnorm.max(1.0) {
        return Err(MatError::SwapRejected { position: k });
    }
    if q == 2 {
        standardize_block(t, qm, k);
    }
    if p == 2 {
        standardize_block(t, qm, k + q);
    }
    Ok(())
}

/// Moves the blocks flagged in `select` (one flag per diagonal block, in
/// order) to the leading positions, preserving the Schur structure.
pub(crate) fn reorder_blocks(s: &mut SchurForm, select: &[bool]) -> Result<(), MatError> {
    let mut blocks: Vec<(usize, bool)> = s.blocks().iter().map(|&(_, sz)| sz).zip(select.iter().copied()).collect();
    if blocks.len() != select.len() {
        return Err(MatError::InvalidArgument(format!(
            "selection has {} flags for {} blocks",
            select.len(),
            blocks.len()
        )));
    }
    let mut target = 0usize; // block index where the next selected block goes
    for idx in 0..blocks.len() {
        if !blocks[idx].1 {
            continue;
        }
        let mut cur = idx;
        while cur > target {
            let start: usize = blocks[..cur - 1].iter().map(|b| b.0).sum();
            let p = blocks[cur - 1].0;
            let q = blocks[cur].0;
            swap_blocks(&mut s.t, &mut s.q, start, p, q)?;
            // a perturbed complex pair may split into two real eigenvalues
            let moved = if q == 2 { s.t[(start + 1, start)] != 0.0 } else { true };
            let stayed = if p == 2 { s.t[(start + q + 1, start + q)] != 0.0 } else { true };
            if !(moved && stayed) {
                return Err(MatError::SwapRejected { position: start });
            }
            blocks.swap(cur - 1, cur);
            cur -= 1;
        }
        target += 1;
    }
    s.eigenvalues = eigenvalues_of(&s.t);
    Ok(())
}

/// Reorders a Schur form so eigenvalues accepted by `predicate` lead the
/// diagonal. The selection must be closed under complex conjugation.
pub fn order_schur<F>(s: &SchurForm, predicate: F) -> Result<SchurForm, MatError>
where
    F: Fn(Eigenvalue) -> bool,
{
    let mut out = s.clone();
    let mut select = Vec::new();
    let mut ev = 0usize;
    for (bi, (_, size)) in s.blocks().into_iter().enumerate() {
        if size == 1 {
            select.push(predicate(s.eigenvalues[ev]));
        } else {
            let a = predicate(s.eigenvalues[ev]);
            let b = predicate(s.eigenvalues[ev + 1]);
            if a != b {
                return Err(MatError::ConjugatePairSplit { block: bi });
            }
            select.push(a);
        }
        ev += size;
    }
    reorder_blocks(&mut out, &select)?;
    Ok(out)
}
