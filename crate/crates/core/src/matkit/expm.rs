use nalgebra::{Complex, DMatrix};

use super::{ensure_finite, ensure_square, lu_solve, operator_norm, spectral_abscissa, DenseMatrix, MatError};

/// Number of τ samples used by [`transient_bound`] when callers have no
/// better choice.
pub const DEFAULT_TRANSIENT_SAMPLES: usize = 2000;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA13: f64 = 5.371920351148152;

// slack on the pointwise stability precondition
const ABSCISSA_TOL: f64 = 1e-8;

fn norm1(a: &DenseMatrix) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `e^{a t}` by scaling and squaring with a diagonal Padé approximant
/// (orders 3 to 13).
pub fn matrix_exponential(a: &DenseMatrix, t: f64) -> Result<DenseMatrix, MatError> {
    let n = ensure_square(a)?;
    if !t.is_finite() {
        return Err(MatError::InvalidArgument(format!("time {t} is not finite")));
    }
    ensure_finite(a)?;
    if n == 0 {
        return Ok(DenseMatrix::zeros(0, 0));
    }
    let at = a * t;
    Ok(expm(&at))
}

fn pade_odd_even(a: &DenseMatrix, a2: &DenseMatrix, b: &[f64]) -> (DenseMatrix, DenseMatrix) {
    let n = a.nrows();
    let id = DenseMatrix::identity(n, n);
    let mut u = &id * b[1];
    let mut v = &id * b[0];
    let mut pow = id;
    let mut k = 2;
    while k < b.len() {
        pow = &pow * a2;
        u += &pow * b[k + 1];
        v += &pow * b[k];
        k += 2;
    }
    (a * u, v)
}

fn expm(a: &DenseMatrix) -> DenseMatrix {
    let n = a.nrows();
    let norm = norm1(a);
    if norm == 0.0 {
        return DenseMatrix::identity(n, n);
    }
    let a2 = a * a;
    for &(m, theta) in &THETA {
        if norm <= theta {
            let b: &[f64] = match m {
                3 => &B3,
                5 => &B5,
                7 => &B7,
                _ => &B9,
            };
            let (u, v) = pade_odd_even(a, &a2, b);
            return pade_quotient(&u, &v);
        }
    }
    let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
    let scale = 0.5f64.powi(s);
    let a = a * scale;
    let a2 = a2 * (scale * scale);
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let id = DenseMatrix::identity(n, n);
    let b = &B13;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = &a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let mut r = pade_quotient(&u, &v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade_quotient(u: &DenseMatrix, v: &DenseMatrix) -> DenseMatrix {
    let p = v + u;
    let q = v - u;
    lu_solve(&q, &p).unwrap_or_else(|| DenseMatrix::from_element(u.nrows(), u.ncols(), f64::NAN))
}

/// How a transient bound was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransientMethod {
    Sampled,
    EigenvectorCondition,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientBound {
    /// The reported constant, the smaller of the available bounds.
    pub k: f64,
    /// `max(1, max_τ ‖e^{Aτ}‖₂ e^{ωτ})` over the sample grid.
    pub sampled: f64,
    /// Eigenvector condition number when `A` is numerically diagonalizable.
    pub eigenvector_condition: Option<f64>,
    pub method: TransientMethod,
}

/// Smallest `K ≥ 1` with `‖e^{Aτ}‖₂ ≤ K e^{-ωτ}` on sampled `τ ∈ [0, tau_max]`,
/// or the eigenvector condition number if that is smaller.
pub fn transient_bound(a: &DenseMatrix, omega: f64, tau_max: f64, samples: usize) -> Result<f64, MatError> {
    Ok(transient_bound_with(a, omega, tau_max, samples)?.k)
}

/// [`transient_bound`] with the individual estimates exposed.
pub fn transient_bound_with(a: &DenseMatrix, omega: f64, tau_max: f64, samples: usize) -> Result<TransientBound, MatError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    if !(tau_max > 0.0 && tau_max.is_finite()) {
        return Err(MatError::InvalidArgument(format!("tauMax must be positive, got {tau_max}")));
    }
    if !omega.is_finite() {
        return Err(MatError::InvalidArgument("omega must be finite".into()));
    }
    let abscissa = spectral_abscissa(a)?;
    if abscissa > -omega + ABSCISSA_TOL * (1.0 + omega.abs()) {
        return Err(MatError::UnstableMatrix { abscissa, omega });
    }
    let sampled = sampled_bound(a, omega, tau_max, samples.max(2));
    let kappa = eigenvector_condition(a);
    let (k, method) = match kappa {
        Some(c) if c < sampled => (c.max(1.0), TransientMethod::EigenvectorCondition),
        _ => (sampled, TransientMethod::Sampled),
    };
    Ok(TransientBound { k, sampled, eigenvector_condition: kappa, method })
}

fn weighted_norm(a: &DenseMatrix, omega: f64, tau: f64) -> f64 {
    operator_norm(&expm(&(a * tau))) * (omega * tau).exp()
}

fn sampled_bound(a: &DenseMatrix, omega: f64, tau_max: f64, samples: usize) -> f64 {
    let lo = tau_max * 1e-6;
    let ratio = (tau_max / lo).ln() / (samples - 1) as f64;
    let taus: Vec<f64> = (0..samples).map(|i| lo * (ratio * i as f64).exp()).collect();
    let vals: Vec<f64> = taus.iter().map(|&t| weighted_norm(a, omega, t)).collect();
    let mut best = vals.iter().copied().fold(1.0f64, f64::max);

    // polish interior local maxima that compete with the best sample
    for i in 1..samples - 1 {
        if vals[i] >= vals[i - 1] && vals[i] >= vals[i + 1] && vals[i] >= 0.99 * best {
            let (mut l, mut r) = (taus[i - 1], taus[i + 1]);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let mut x1 = r - g * (r - l);
            let mut x2 = l + g * (r - l);
            let mut f1 = weighted_norm(a, omega, x1);
            let mut f2 = weighted_norm(a, omega, x2);
            for _ in 0..30 {
                if f1 > f2 {
                    r = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = r - g * (r - l);
                    f1 = weighted_norm(a, omega, x1);
                } else {
                    l = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = l + g * (r - l);
                    f2 = weighted_norm(a, omega, x2);
                }
            }
            best = best.max(f1).max(f2);
        }
    }
    best
}

/// Condition number `κ₂(V)` of a unit-column eigenvector matrix, or `None`
/// when the matrix is not numerically diagonalizable (κ ≥ 1e8).
pub fn eigenvector_condition(a: &DenseMatrix) -> Option<f64> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return None;
    }
    let eig = super::eigenvalues(a).ok()?;
    let ac: DMatrix<Complex<f64>> = a.map(|v| Complex::new(v, 0.0));
    let scale = a.norm().max(1.0);
    let mut v = DMatrix::<Complex<f64>>::zeros(n, n);
    for (j, &lambda) in eig.iter().enumerate() {
        let shift = lambda + Complex::new(1e-10 * scale, 0.0);
        let mut m = ac.clone();
        for i in 0..n {
            m[(i, i)] -= shift;
        }
        let lu = m.lu();
        let mut x = DMatrix::<Complex<f64>>::from_fn(n, 1, |i, _| Complex::new(1.0, 0.1 * (i as f64 + 1.0)));
        for _ in 0..3 {
            x = lu.solve(&x)?;
            let nrm = x.norm();
            if !nrm.is_finite() || nrm == 0.0 {
                return None;
            }
            x /= Complex::new(nrm, 0.0);
        }
        v.set_column(j, &x.column(0));
    }
    let sv = v.svd(false, false).singular_values;
    let kappa = sv.max() / sv.min();
    if kappa.is_finite() && kappa < 1e8 {
        Some(kappa)
    } else {
        None
    }
}
