//! Learning posed as control: output/neuron-space error, the affine error
//! system obtained from the network, and the quadratic running-cost
//! machinery evaluated along rollouts.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::jsonio::MatrixDoc;
use crate::net::{Activation, LeakSpec, WeightSet};
use crate::{Error, Result};

/// Rollouts abort as divergent once the error state leaves this box.
pub const OVERFLOW_GUARD: f64 = 1e6;

/// Output error together with the neuron-space error on the plastic subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState {
    pub e: DVector<f64>,
    pub v_e: DVector<f64>,
}

impl ErrorState {
    /// Build from a full network state, the teacher state, the target
    /// output, and the weight set; `v_e` is restricted to plastic indices.
    pub fn from_state(
        v: &DVector<f64>,
        v_d: &DVector<f64>,
        y: &DVector<f64>,
        w: &WeightSet,
    ) -> Result<Self> {
        if v.len() != w.n_neurons() || v_d.len() != w.n_neurons() {
            return Err(Error::Config(
                "state and teacher state must have one entry per neuron".into(),
            ));
        }
        let y_hat = crate::net::decode(v, w)?;
        let e = output_error(&y_hat, y)?;
        let idx = w.plastic_indices();
        let v_e = DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i] - v_d[i]));
        if !v_e.iter().all(|x| x.is_finite()) {
            return Err(Error::Overflow("non-finite neuron-space error".into()));
        }
        Ok(ErrorState { e, v_e })
    }
}

/// Quadratic running-cost specification: `l(v_e, u) = v_e' Q v_e + u' R u`
/// over the horizon `t_f`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    r_chol: Cholesky<f64, nalgebra::Dyn>,
    t_f: f64,
}

const SYMMETRY_TOL: f64 = 1e-12;

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

impl CostSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, t_f: f64) -> Result<Self> {
        if q.nrows() != q.ncols() || r.nrows() != r.ncols() {
            return Err(Error::Config("Q and R must be square".into()));
        }
        if symmetry_defect(&q) > SYMMETRY_TOL {
            return Err(Error::Config("Q must be symmetric".into()));
        }
        if symmetry_defect(&r) > SYMMETRY_TOL {
            return Err(Error::Config("R must be symmetric".into()));
        }
        let q_eigs = q.clone().symmetric_eigen().eigenvalues;
        if q_eigs.iter().any(|&l| l < -1e-10) {
            return Err(Error::Config("Q must be positive semi-definite".into()));
        }
        let r_eigs = r.clone().symmetric_eigen().eigenvalues;
        if r_eigs.iter().any(|&l| l <= 0.0) {
            return Err(Error::Config("R must be positive definite".into()));
        }
        let r_chol = Cholesky::new(r.clone())
            .ok_or_else(|| Error::Config("R must be positive definite".into()))?;
        if !(t_f > 0.0 && t_f.is_finite()) {
            return Err(Error::Config("horizon t_f must be positive".into()));
        }
        Ok(CostSpec { q, r, r_chol, t_f })
    }

    /// Scalar convenience constructor.
    pub fn scalar(q: f64, r: f64, t_f: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            t_f,
        )
    }

    /// `q_scale * I` and `r_scale * I` of the given dimensions.
    pub fn diagonal(n: usize, q_scale: f64, m: usize, r_scale: f64, t_f: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(n, n) * q_scale,
            DMatrix::identity(m, m) * r_scale,
            t_f,
        )
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    /// `R^{-1} m` via the cached Cholesky factor.
    pub fn r_solve(&self, m: &DVector<f64>) -> DVector<f64> {
        self.r_chol.solve(m)
    }

    pub fn r_solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.r_chol.solve(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CostSpecDoc::from(self)).expect("cost spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CostSpecDoc = serde_json::from_str(s)?;
        CostSpec::new(doc.q.to_matrix()?, doc.r.to_matrix()?, doc.t_f)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CostSpecDoc {
    q: MatrixDoc,
    r: MatrixDoc,
    t_f: f64,
}

impl From<&CostSpec> for CostSpecDoc {
    fn from(c: &CostSpec) -> Self {
        CostSpecDoc {
            q: MatrixDoc::from_matrix(&c.q),
            r: MatrixDoc::from_matrix(&c.r),
            t_f: c.t_f,
        }
    }
}

/// Where an affine system came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NetworkDerived,
    SyntheticLinear,
}

type DriftFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type InputFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Control-affine system `x' = f(x) + g(x) u`.
#[derive(Clone)]
pub struct AffineSystem {
    state_dim: usize,
    control_dim: usize,
    drift: Arc<DriftFn>,
    input: Arc<InputFn>,
    provenance: Provenance,
}

impl fmt::Debug for AffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineSystem")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl AffineSystem {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        input: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        provenance: Provenance,
    ) -> Result<Self> {
        let sys = AffineSystem {
            state_dim,
            control_dim,
            drift: Arc::new(drift),
            input: Arc::new(input),
            provenance,
        };
        // f(0) must be evaluable and finite.
        let f0 = sys.f(&DVector::zeros(state_dim));
        if f0.len() != state_dim || !f0.iter().all(|x| x.is_finite()) {
            return Err(Error::Config(
                "drift map is ill-formed at the origin".into(),
            ));
        }
        let g0 = sys.g(&DVector::zeros(state_dim));
        if g0.nrows() != state_dim || g0.ncols() != control_dim {
            return Err(Error::Config(format!(
                "input map returns {}x{}, expected {}x{}",
                g0.nrows(),
                g0.ncols(),
                state_dim,
                control_dim
            )));
        }
        Ok(sys)
    }

    /// Constant-coefficient linear system `x' = A x + B u`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Config("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::Config("B must have one row per state".into()));
        }
        let m = b.ncols();
        let a = Arc::new(a);
        let b = Arc::new(b);
        Self::new(
            n,
            m,
            move |x| a.as_ref() * x,
            move |_| b.as_ref().clone(),
            Provenance::SyntheticLinear,
        )
    }

    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input)(x)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Closed-loop derivative `f(x) + g(x) u`.
    pub fn xdot(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.f(x) + self.g(x) * u
    }
}

/// Output error `e = y_hat - y`.
pub fn output_error(y_hat: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y_hat.len() != y.len() {
        return Err(Error::Argument(format!(
            "output error lengths disagree: {} vs {}",
            y_hat.len(),
            y.len()
        )));
    }
    Ok(y_hat - y)
}

/// Reduce the network to the affine error system on the plastic subset:
/// drift is the leak restricted to plastic indices, the input map is the
/// plastic block of the recurrent matrix, and the control is the commanded
/// state correction.
pub fn error_system_from_network(
    w: &WeightSet,
    leak: &LeakSpec,
    _phi: Activation,
) -> Result<AffineSystem> {
    let idx = w.plastic_indices();
    if idx.is_empty() {
        return Err(Error::Config(
            "error system needs a nonempty plastic subset".into(),
        ));
    }
    if leak.len() != w.n_neurons() {
        return Err(Error::Config("leak spec must cover every neuron".into()));
    }
    let n = idx.len();
    let alpha = leak.restrict(&idx).alpha().clone();
    let g = w.plastic_block();
    AffineSystem::new(
        n,
        n,
        move |v| DVector::from_iterator(n, (0..n).map(|i| -alpha[i] * v[i])),
        move |_| g.clone(),
        Provenance::NetworkDerived,
    )
}

/// Quadratic running cost `v_e' Q v_e + u' R u`.
pub fn utility(v_e: &DVector<f64>, u: &DVector<f64>, cost: &CostSpec) -> Result<f64> {
    if v_e.len() != cost.state_dim() {
        return Err(Error::Argument(format!(
            "error state has length {} but Q is {}x{}",
            v_e.len(),
            cost.state_dim(),
            cost.state_dim()
        )));
    }
    if u.len() != cost.control_dim() {
        return Err(Error::Argument(format!(
            "control has length {} but R is {}x{}",
            u.len(),
            cost.control_dim(),
            cost.control_dim()
        )));
    }
    Ok((v_e.transpose() * cost.q() * v_e)[(0, 0)] + (u.transpose() * cost.r() * u)[(0, 0)])
}

/// Integrate the running cost along the closed-loop trajectory from `v_e0`
/// to the cost horizon: RK4 states, trapezoidal quadrature. Returns the
/// empirical estimate of the value at `v_e0`.
pub fn rollout_cost(
    sys: &AffineSystem,
    policy: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    v_e0: &DVector<f64>,
    cost: &CostSpec,
    dt: f64,
) -> Result<f64> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    let steps_f = cost.t_f() / dt;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-6 {
        return Err(Error::Argument(format!(
            "horizon {} is not an integral number of steps of {}",
            cost.t_f(),
            dt
        )));
    }
    let steps = steps as usize;
    if v_e0.len() != sys.state_dim() {
        return Err(Error::Argument(format!(
            "initial state has length {}, system expects {}",
            v_e0.len(),
            sys.state_dim()
        )));
    }

    let mut x = v_e0.clone();
    let mut total = 0.0;
    let mut prev_l = {
        let u = policy(&x);
        utility(&x, &u, cost)?
    };
    for k in 0..steps {
        let t = k as f64 * dt;
        if x.amax() > OVERFLOW_GUARD {
            return Err(Error::Divergence {
                t,
                context: "rollout left the overflow guard region".into(),
            });
        }
        // Closed-loop RK4: the policy is re-evaluated at every stage state.
        let rhs = |s: &DVector<f64>| sys.xdot(s, &policy(s));
        let k1 = rhs(&x);
        let k2 = rhs(&(&x + &k1 * (dt / 2.0)));
        let k3 = rhs(&(&x + &k2 * (dt / 2.0)));
        let k4 = rhs(&(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                t: t + dt,
                context: "rollout state became non-finite".into(),
            });
        }
        let u = policy(&x);
        let l = utility(&x, &u, cost)?;
        total += 0.5 * (prev_l + l) * dt;
        prev_l = l;
    }
    Ok(total)
}
