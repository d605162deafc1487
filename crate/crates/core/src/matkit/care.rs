use super::schur::{real_schur, real_schur_isolated, reorder_blocks};
use super::sylvester::solve_sylvester_schur;
use super::{ensure_finite, ensure_square, DenseMatrix, MatError, SchurForm};

const NEWTON_STEPS: usize = 3;
// eigenvalues with |Re λ| below this fraction of ‖H‖_F count as on the axis
const AXIS_RTOL: f64 = 1e-6;
const MAX_AXIS_BLOCKS: usize = 12;

/// Solution of `PA + AᵀP − PBR⁻¹BᵀP + Q = 0`.
#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DenseMatrix,
    /// `A − BR⁻¹BᵀP`.
    pub closed_loop: DenseMatrix,
    /// Frobenius norm of the Riccati residual.
    pub residual_norm: f64,
    /// Residual scale `max(1, ‖Q‖_F, ‖P‖_F²·‖BR⁻¹Bᵀ‖_F)`.
    pub residual_scale: f64,
    /// False when undetectable modes on the imaginary axis had to be kept,
    /// so the closed loop is only marginally stable.
    pub stabilizing: bool,
}

impl CareSolution {
    pub fn relative_residual(&self) -> f64 {
        self.residual_norm / self.residual_scale
    }
}

fn projection_rcond(s: &SchurForm, n: usize) -> f64 {
    let sv = s.q.view((0, 0), (n, n)).into_owned().svd(false, false).singular_values;
    sv.min() / sv.max()
}

fn riccati_residual(a: &DenseMatrix, g: &DenseMatrix, q: &DenseMatrix, p: &DenseMatrix) -> DenseMatrix {
    let pa = p * a;
    pa.transpose() + &pa - p * g * p + q
}

/// Solves the continuous algebraic Riccati equation through the ordered real
/// Schur form of the Hamiltonian `[[A, −BR⁻¹Bᵀ], [−Q, −Aᵀ]]`, followed by a
/// few Newton refinement steps.
pub fn solve_care(a: &DenseMatrix, b: &DenseMatrix, q: &DenseMatrix, r: &DenseMatrix) -> Result<CareSolution, MatError> {
    let n = ensure_square(a)?;
    let m = ensure_square(r)?;
    if b.nrows() != n || b.ncols() != m {
        return Err(MatError::ShapeMismatch(format!("B is {}x{}, expected {n}x{m}", b.nrows(), b.ncols())));
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(MatError::ShapeMismatch(format!("Q is {}x{}, expected {n}x{n}", q.nrows(), q.ncols())));
    }
    for mat in [a, b, q, r] {
        ensure_finite(mat)?;
    }
    if (r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) {
        return Err(MatError::NotPositiveDefinite);
    }
    let chol = r.clone().cholesky().ok_or(MatError::NotPositiveDefinite)?;
    let rinv_bt = chol.solve(&b.transpose());
    let g = b * &rinv_bt;

    let mut h = DenseMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut schur = real_schur_isolated(&h)?;
    let blocks = schur.blocks();
    let delta = AXIS_RTOL * h.norm();
    let mut select = vec![false; blocks.len()];
    let mut chosen = 0usize;
    let mut ev = 0usize;
    let mut axis: Vec<(f64, usize, usize)> = Vec::new();
    for (bi, &(_, size)) in blocks.iter().enumerate() {
        let re = schur.eigenvalues[ev].re;
        if re < -delta {
            select[bi] = true;
            chosen += size;
        } else if re <= delta {
            axis.push((re, bi, size));
        }
        ev += size;
    }
    let stable = chosen;
    if chosen == n {
        reorder_blocks(&mut schur, &select)?;
    } else {
        // Keep axis modes that cannot be moved (uncontrollable and
        // undetectable). Which of the ±λ copies belongs to the state side is
        // decided by the conditioning of the resulting projection block.
        if axis.len() > MAX_AXIS_BLOCKS {
            return Err(MatError::NotStabilizable { stable, required: n });
        }
        let mut best: Option<(f64, SchurForm)> = None;
        for mask in 0u32..(1 << axis.len()) {
            let size: usize = axis.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, a)| a.2).sum();
            if chosen + size != n {
                continue;
            }
            let mut sel = select.clone();
            for (i, a) in axis.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    sel[a.1] = true;
                }
            }
            let mut trial = schur.clone();
            if reorder_blocks(&mut trial, &sel).is_err() {
                continue;
            }
            let rc = projection_rcond(&trial, n);
            if best.as_ref().is_none_or(|b| rc > b.0) {
                best = Some((rc, trial));
            }
        }
        schur = match best {
            Some((_, s)) => s,
            None => return Err(MatError::NotStabilizable { stable, required: n }),
        };
    }

    let u11 = schur.q.view((0, 0), (n, n)).into_owned();
    let u21 = schur.q.view((n, 0), (n, n)).into_owned();
    if n > 0 && projection_rcond(&schur, n) <= 1e-13 {
        return Err(MatError::SingularProjection);
    }
    // P U11 = U21  ⇔  U11ᵀ Pᵀ = U21ᵀ
    let pt = u11.transpose().lu().solve(&u21.transpose()).ok_or(MatError::SingularProjection)?;
    let mut p = (&pt + pt.transpose()) * 0.5;

    let mut res = riccati_residual(a, &g, q, &p);
    let mut res_norm = res.norm();
    for _ in 0..NEWTON_STEPS {
        let scale = 1f64.max(q.norm()).max(p.norm_squared() * g.norm());
        if res_norm <= 1e-14 * scale {
            break;
        }
        // (A − GP)ᵀ X + X (A − GP) = −Res
        let acl = a - &g * &p;
        let x = match newton_correction(&acl, &res) {
            Ok(x) => x,
            Err(_) => break,
        };
        let cand = &p + (&x + x.transpose()) * 0.5;
        let cand_res = riccati_residual(a, &g, q, &cand);
        let cand_norm = cand_res.norm();
        if !(cand_norm < res_norm) {
            break;
        }
        p = cand;
        res = cand_res;
        res_norm = cand_norm;
    }
    let closed_loop = a - &g * &p;
    let residual_scale = 1f64.max(q.norm()).max(p.norm_squared() * g.norm());
    Ok(CareSolution {
        p,
        closed_loop,
        residual_norm: res_norm,
        residual_scale,
        stabilizing: stable == n,
    })
}

/// Newton correction `X` with `Aclᵀ X + X Acl = −Res`.
fn newton_correction(acl: &DenseMatrix, res: &DenseMatrix) -> Result<DenseMatrix, MatError> {
    let s1 = real_schur(&acl.transpose())?;
    let s = real_schur(acl)?;
    // −Acl shares Q with Acl; negation keeps 2x2 blocks in standard form
    let s2 = SchurForm {
        q: s.q,
        t: -s.t,
        eigenvalues: s.eigenvalues.iter().map(|l| -l).collect(),
    };
    solve_sylvester_schur(&s1, &s2, &(-res))
}
