//! Independent ground truth for the learner: closed-form linear-quadratic
//! solutions of the stationarity equation, plus finite-difference gradient
//! oracles.
//!
//! The Riccati solver is Newton-Kleinman iteration from a stabilizing
//! initial gain. Every inner step is a Lyapunov solve done by the
//! vectorized linear-system method, so the solver needs nothing beyond LU;
//! stability checks also go through Lyapunov solves rather than an
//! eigensolver.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::{Error, Result};

/// Linear plant `x' = A x + B u` with quadratic cost `x'Qx + u'Ru`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQuadraticProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearQuadraticProblem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Config("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::Config("B must have one row per state".into()));
        }
        let m = b.ncols();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::Config("Q must match the state dimension".into()));
        }
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::Config("R must match the control dimension".into()));
        }
        if (&q - q.transpose()).amax() > 1e-12 || (&r - r.transpose()).amax() > 1e-12 {
            return Err(Error::Config("Q and R must be symmetric".into()));
        }
        if q.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .any(|&l| l < -1e-10)
        {
            return Err(Error::Config("Q must be positive semi-definite".into()));
        }
        if Cholesky::new(r.clone()).is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(LinearQuadraticProblem { a, b, q, r })
    }

    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Solve `A'P + PA = -C` by vectorization: `(I (x) A' + A' (x) I) vec(P) = -vec(C)`.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || c.nrows() != n || c.ncols() != n {
        return Err(Error::Config(
            "Lyapunov operands must be square and same size".into(),
        ));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let coeff = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, c.iter().map(|x| -x));
    let lu = coeff.lu();
    let p_vec = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("singular Lyapunov operator".into()))?;
    // vec() above is column-major, matching DMatrix storage.
    let p = DMatrix::from_iterator(n, n, p_vec.iter().copied());
    Ok((&p + p.transpose()) * 0.5)
}

/// Hurwitz test without an eigensolver: `A'S + SA = -I` must yield a
/// positive-definite `S`.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    match solve_lyapunov(a, &DMatrix::identity(n, n)) {
        Ok(s) => {
            // The residual must actually be satisfied; a nearly singular
            // operator can return garbage that still factors.
            let res = (a.transpose() * &s + &s * a + DMatrix::<f64>::identity(n, n)).amax();
            res < 1e-6 && Cholesky::new(s).is_some()
        }
        Err(_) => false,
    }
}

const CARE_RESIDUAL_TOL: f64 = 1e-8;
const MAX_NEWTON_ITERS: usize = 60;

/// Frobenius norm of the stationarity-equation residual at `P`. Infinite
/// when `R` is not invertible (fields are public, so the construction
/// invariant can be broken after the fact).
pub fn care_residual_norm(p: &DMatrix<f64>, prob: &LinearQuadraticProblem) -> f64 {
    let Some(chol) = Cholesky::new(prob.r.clone()) else {
        return f64::INFINITY;
    };
    let r_inv_bt = chol.solve(&prob.b.transpose());
    (prob.a.transpose() * p + p * &prob.a - p * &prob.b * r_inv_bt * p + &prob.q).norm()
}

/// Stabilizing initial gain. Tries `K = 0` first; otherwise runs the Bass
/// construction: with `beta` beyond the spectral abscissa of `A`, solve
/// `-(A + beta I) Z + Z (-(A + beta I))' = -2 B B'` and take `K = B' Z^{-1}`.
fn stabilizing_gain(prob: &LinearQuadraticProblem) -> Result<DMatrix<f64>> {
    let n = prob.state_dim();
    let m = prob.control_dim();
    if is_hurwitz(&prob.a) {
        return Ok(DMatrix::zeros(m, n));
    }
    let beta = prob.a.norm() + 0.5;
    let shifted = -(&prob.a + DMatrix::<f64>::identity(n, n) * beta);
    let bbt = &prob.b * prob.b.transpose() * 2.0;
    // solve_lyapunov works on A'P + PA; pass the transpose to get the
    // controllability-style equation shifted Z + Z shifted' = -2BB'.
    let z = solve_lyapunov(&shifted.transpose(), &bbt)?;
    let z_inv = z.clone().try_inverse().ok_or_else(|| {
        Error::Solver("Bass Gramian is singular; (A, B) may not be stabilizable".into())
    })?;
    let k = prob.b.transpose() * z_inv;
    if !is_hurwitz(&(&prob.a - &prob.b * &k)) {
        return Err(Error::Solver(
            "failed to find a stabilizing initial gain; (A, B) may not be stabilizable".into(),
        ));
    }
    Ok(k)
}

/// Solve `A'P + PA - P B R^{-1} B' P + Q = 0` for the stabilizing `P` by
/// Newton-Kleinman iteration. The returned `P` is symmetric, positive
/// semi-definite, and satisfies the equation to 1e-8 in Frobenius norm.
pub fn solve_care(prob: &LinearQuadraticProblem) -> Result<DMatrix<f64>> {
    solve_care_from(prob, None)
}

/// Same as [`solve_care`] but from an explicitly supplied stabilizing gain.
pub fn solve_care_from(
    prob: &LinearQuadraticProblem,
    initial_gain: Option<DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let r_chol = Cholesky::new(prob.r.clone())
        .ok_or_else(|| Error::Config("R must be positive definite".into()))?;
    let mut k = match initial_gain {
        Some(k0) => {
            if k0.nrows() != prob.control_dim() || k0.ncols() != prob.state_dim() {
                return Err(Error::Config("initial gain has the wrong shape".into()));
            }
            if !is_hurwitz(&(&prob.a - &prob.b * &k0)) {
                return Err(Error::Solver(
                    "supplied initial gain is not stabilizing".into(),
                ));
            }
            k0
        }
        None => stabilizing_gain(prob)?,
    };

    let mut p_prev: Option<DMatrix<f64>> = None;
    for _ in 0..MAX_NEWTON_ITERS {
        let a_k = &prob.a - &prob.b * &k;
        let c = &prob.q + k.transpose() * &prob.r * &k;
        let p = solve_lyapunov(&a_k, &c)?;
        k = r_chol.solve(&(prob.b.transpose() * &p));
        let step = p_prev
            .as_ref()
            .map(|prev| (&p - prev).norm() / p.norm().max(1.0))
            .unwrap_or(f64::INFINITY);
        p_prev = Some(p.clone());
        if step < 1e-13 || care_residual_norm(&p, prob) <= CARE_RESIDUAL_TOL * 0.1 {
            break;
        }
    }
    let p = p_prev.expect("at least one Newton step ran");
    if care_residual_norm(&p, prob) > CARE_RESIDUAL_TOL {
        return Err(Error::Solver(format!(
            "Newton-Kleinman did not reach the residual tolerance: {:.3e}",
            care_residual_norm(&p, prob)
        )));
    }
    if p.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .any(|&l| l < -1e-10)
    {
        return Err(Error::Solver(
            "Riccati solution is not positive semi-definite".into(),
        ));
    }
    Ok(p)
}

/// State-feedback gain `K = R^{-1} B' P`, checked stabilizing through a
/// Lyapunov solve on the closed loop.
pub fn lqr_policy(p: &DMatrix<f64>, prob: &LinearQuadraticProblem) -> Result<DMatrix<f64>> {
    let r_chol = Cholesky::new(prob.r.clone())
        .ok_or_else(|| Error::Config("R must be positive definite".into()))?;
    let k = r_chol.solve(&(prob.b.transpose() * p));
    let closed = &prob.a - &prob.b * &k;
    if !is_hurwitz(&closed) {
        return Err(Error::Solver(
            "closed loop A - BK is not asymptotically stable".into(),
        ));
    }
    Ok(k)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient(
    f: &dyn Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    let mut grad = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
