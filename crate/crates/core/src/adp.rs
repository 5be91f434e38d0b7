//! Feedback pathway: reservoir-based critic and actor, the Hamiltonian and
//! its stationary-point control law, readout gradient updates, and a
//! pluggable unsupervised-plasticity hook.
//!
//! The critic approximates the value gradient with respect to the error
//! state; the actor approximates the control. Both are echo-state feature
//! maps with fixed random weights and a trainable linear readout, updated
//! once per simulator step (critic first).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error_dynamics::{utility, AffineSystem, CostSpec};
use crate::jsonio::MatrixDoc;
use crate::net::{spectral_radius, WeightSet};
use crate::{Error, Result};

/// Construction parameters for one reservoir feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    pub size: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub leak: f64,
    pub spectral_radius: f64,
    pub input_scale: f64,
    pub seed: u64,
}

impl ReservoirSpec {
    pub fn new(size: usize, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        ReservoirSpec {
            size,
            input_dim,
            output_dim,
            leak: 0.3,
            spectral_radius: 0.9,
            input_scale: 1.0,
            seed,
        }
    }
}

/// Echo-state feature map with a trainable linear readout. `W_in` and
/// `W_res` are fixed at construction; only `W_out` learns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirApproximator {
    w_in: DMatrix<f64>,
    w_res: DMatrix<f64>,
    w_out: DMatrix<f64>,
    z: DVector<f64>,
    leak: f64,
    seed: u64,
}

impl ReservoirApproximator {
    pub fn new(spec: &ReservoirSpec) -> Result<Self> {
        if spec.size == 0 {
            return Err(Error::Config("reservoir needs at least one unit".into()));
        }
        if !(spec.leak > 0.0 && spec.leak <= 1.0) {
            return Err(Error::Config("reservoir leak must lie in (0, 1]".into()));
        }
        if !(spec.spectral_radius > 0.0 && spec.spectral_radius < 1.0) {
            return Err(Error::Config(
                "echo-state condition requires spectral radius in (0, 1)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let w_in = DMatrix::from_fn(spec.size, spec.input_dim, |_, _| {
            rng.gen_range(-1.0..1.0) * spec.input_scale
        });
        let mut w_res = DMatrix::from_fn(spec.size, spec.size, |_, _| rng.gen_range(-1.0..1.0));
        let rho = spectral_radius(&w_res);
        if rho < 1e-12 {
            return Err(Error::Config("degenerate reservoir draw".into()));
        }
        w_res *= spec.spectral_radius / rho;
        let achieved = spectral_radius(&w_res);
        if (achieved - spec.spectral_radius).abs() > 1e-6 || achieved >= 1.0 {
            return Err(Error::Config(format!(
                "reservoir rescaling missed the echo-state condition: radius {achieved}"
            )));
        }
        Ok(ReservoirApproximator {
            w_in,
            w_res,
            w_out: DMatrix::zeros(spec.output_dim, spec.size),
            z: DVector::zeros(spec.size),
            leak: spec.leak,
            seed: spec.seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.z.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn set_features(&mut self, z: DVector<f64>) -> Result<()> {
        if z.len() != self.feature_dim() {
            return Err(Error::Config("feature vector has the wrong length".into()));
        }
        self.z = z;
        Ok(())
    }

    pub fn reset_features(&mut self) {
        self.z.fill(0.0);
    }

    pub fn readout_weights(&self) -> &DMatrix<f64> {
        &self.w_out
    }

    pub fn set_readout_weights(&mut self, w: DMatrix<f64>) -> Result<()> {
        if w.nrows() != self.output_dim() || w.ncols() != self.feature_dim() {
            return Err(Error::Config("readout has the wrong shape".into()));
        }
        self.w_out = w;
        Ok(())
    }

    /// Leaky feature step `z <- (1 - leak) z + leak tanh(W_in u + W_res z)`.
    pub fn advance(&mut self, input: &DVector<f64>) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "reservoir input has length {}, expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        let pre = &self.w_in * input + &self.w_res * &self.z;
        for i in 0..self.z.len() {
            self.z[i] = (1.0 - self.leak) * self.z[i] + self.leak * pre[i].tanh();
        }
        if !self.z.iter().all(|x| x.is_finite()) {
            return Err(Error::Overflow(
                "reservoir features became non-finite".into(),
            ));
        }
        Ok(())
    }

    /// Linear readout of the current features.
    pub fn readout(&self) -> DVector<f64> {
        &self.w_out * &self.z
    }

    /// Readout after letting the features settle at a constant input,
    /// without disturbing the live feature state. This is how the learned
    /// map is probed pointwise.
    pub fn settled_readout(&self, input: &DVector<f64>, washout: usize) -> Result<DVector<f64>> {
        let mut probe = self.clone();
        probe.reset_features();
        for _ in 0..washout {
            probe.advance(input)?;
        }
        Ok(probe.readout())
    }
}

/// Learning rates and exploration settings for the paired approximators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub critic_rate: f64,
    pub actor_rate: f64,
    pub exploration_noise_std: f64,
    /// Steps each exploration sample is held for. Persistently exciting
    /// inputs need correlation beyond one integrator step; white per-step
    /// noise integrates away at small dt.
    pub noise_hold_steps: usize,
    pub normalize: bool,
    pub critic_size: usize,
    pub actor_size: usize,
    pub reservoir_leak: f64,
    pub reservoir_spectral_radius: f64,
    pub reservoir_input_scale: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            critic_rate: 0.5,
            actor_rate: 0.01,
            exploration_noise_std: 0.1,
            noise_hold_steps: 20,
            normalize: true,
            critic_size: 100,
            actor_size: 100,
            reservoir_leak: 0.3,
            reservoir_spectral_radius: 0.9,
            reservoir_input_scale: 1.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is allowed: a frozen learner is a legitimate control case.
        if self.critic_rate < 0.0 || !self.critic_rate.is_finite() {
            return Err(Error::Config(
                "critic learning rate must be non-negative".into(),
            ));
        }
        if self.actor_rate < 0.0 || !self.actor_rate.is_finite() {
            return Err(Error::Config(
                "actor learning rate must be non-negative".into(),
            ));
        }
        if self.exploration_noise_std < 0.0 || !self.exploration_noise_std.is_finite() {
            return Err(Error::Config(
                "exploration noise std must be non-negative".into(),
            ));
        }
        if self.critic_size == 0 || self.actor_size == 0 {
            return Err(Error::Config("reservoir sizes must be positive".into()));
        }
        if !(self.reservoir_leak > 0.0 && self.reservoir_leak <= 1.0) {
            return Err(Error::Config("reservoir leak must lie in (0, 1]".into()));
        }
        if !(self.reservoir_spectral_radius > 0.0 && self.reservoir_spectral_radius < 1.0) {
            return Err(Error::Config(
                "reservoir spectral radius must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjbDiagnostics {
    pub step: usize,
    pub hamiltonian: f64,
    pub hjb_residual: f64,
    pub bellman_error: f64,
}

impl HjbDiagnostics {
    pub fn is_finite(&self) -> bool {
        self.hamiltonian.is_finite()
            && self.hjb_residual.is_finite()
            && self.bellman_error.is_finite()
    }
}

/// Stream diagnostics records as CSV with a header row.
pub fn write_diagnostics_csv<W: Write>(out: &mut W, records: &[HjbDiagnostics]) -> Result<()> {
    writeln!(out, "step,hamiltonian,hjb_residual,bellman_error")?;
    for d in records {
        writeln!(
            out,
            "{},{},{},{}",
            d.step, d.hamiltonian, d.hjb_residual, d.bellman_error
        )?;
    }
    Ok(())
}

/// Advance the critic's features with `v_e` and return the value-gradient
/// estimate.
pub fn critic_evaluate(
    critic: &mut ReservoirApproximator,
    v_e: &DVector<f64>,
) -> Result<DVector<f64>> {
    critic.advance(v_e)?;
    Ok(critic.readout())
}

/// Advance the actor's features with `v_e` and return the control, with
/// zero-mean exploration noise of the given standard deviation added when
/// `noise_std > 0`.
pub fn actor_evaluate<R: Rng>(
    actor: &mut ReservoirApproximator,
    v_e: &DVector<f64>,
    noise_std: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::Argument("noise std must be non-negative".into()));
    }
    actor.advance(v_e)?;
    let mut u = actor.readout();
    if noise_std > 0.0 {
        for i in 0..u.len() {
            let n: f64 = rng.sample(StandardNormal);
            u[i] += noise_std * n;
        }
    }
    Ok(u)
}

/// `H(v_e, u, V_e) = l(v_e, u) + V_e' (f(v_e) + g(v_e) u)`.
pub fn hamiltonian(
    v_e: &DVector<f64>,
    u: &DVector<f64>,
    value_grad: &DVector<f64>,
    sys: &AffineSystem,
    cost: &CostSpec,
) -> Result<f64> {
    if value_grad.len() != sys.state_dim() || v_e.len() != sys.state_dim() {
        return Err(Error::Argument(
            "Hamiltonian operands must match the system state dimension".into(),
        ));
    }
    if u.len() != sys.control_dim() {
        return Err(Error::Argument(
            "control must match the system control dimension".into(),
        ));
    }
    Ok(utility(v_e, u, cost)? + value_grad.dot(&sys.xdot(v_e, u)))
}

/// Stationary-point control `u* = -1/2 R^{-1} g'(v) V_e`, the unique
/// minimizer of the Hamiltonian in `u` for positive-definite `R`.
pub fn optimal_control_from_value(
    v: &DVector<f64>,
    value_grad: &DVector<f64>,
    sys: &AffineSystem,
    cost: &CostSpec,
) -> Result<DVector<f64>> {
    if value_grad.len() != sys.state_dim() {
        return Err(Error::Argument(
            "value gradient must match the system state dimension".into(),
        ));
    }
    let gt_grad = sys.g(v).transpose() * value_grad;
    Ok(cost.r_solve(&gt_grad) * -0.5)
}

/// Right-hand side of the stationarity equation at the supplied value
/// gradient: `v_e'Qv_e + V_e'f(v_e) - 1/4 V_e' g R^{-1} g' V_e`. Zero at
/// the true optimal value function.
pub fn hjb_residual(
    v_e: &DVector<f64>,
    value_grad: &DVector<f64>,
    sys: &AffineSystem,
    cost: &CostSpec,
) -> Result<f64> {
    if v_e.len() != sys.state_dim() || value_grad.len() != sys.state_dim() {
        return Err(Error::Argument(
            "residual operands must match the system state dimension".into(),
        ));
    }
    if v_e.len() != cost.state_dim() {
        return Err(Error::Argument(
            "cost state dimension must match the system".into(),
        ));
    }
    let g = sys.g(v_e);
    let gt_grad = g.transpose() * value_grad;
    let quad = (v_e.transpose() * cost.q() * v_e)[(0, 0)];
    Ok(quad + value_grad.dot(&sys.f(v_e)) - 0.25 * gt_grad.dot(&cost.r_solve(&gt_grad)))
}

/// One gradient step on the squared Bellman residual
/// `delta = (W_c z_c)' v_e_dot + l(v_e, u)`:
/// `W_c <- W_c - alpha_c delta (v_e_dot z_c') / nu`, where `nu` is
/// `(1 + |sigma|^2)^2` when normalization is on and 1 otherwise.
/// Returns `delta`. The critic's features must already be advanced for
/// this `v_e`.
pub fn critic_update(
    critic: &mut ReservoirApproximator,
    v_e: &DVector<f64>,
    u: &DVector<f64>,
    v_e_dot: &DVector<f64>,
    cost: &CostSpec,
    cfg: &LearnerConfig,
) -> Result<f64> {
    if v_e_dot.len() != critic.output_dim() {
        return Err(Error::Argument(
            "state derivative must match the critic output dimension".into(),
        ));
    }
    let value_grad = critic.readout();
    let delta = value_grad.dot(v_e_dot) + utility(v_e, u, cost)?;
    if !delta.is_finite() {
        return Err(Error::Diagnostics(
            "Bellman residual became non-finite; training diverged".into(),
        ));
    }
    let sigma = v_e_dot * critic.features().transpose();
    let nu = if cfg.normalize {
        let s2 = sigma.norm_squared();
        (1.0 + s2).powi(2)
    } else {
        1.0
    };
    let update = sigma * (-cfg.critic_rate * delta / nu);
    critic.w_out += update;
    if !critic.w_out.iter().all(|x| x.is_finite()) {
        return Err(Error::Diagnostics(
            "critic readout became non-finite; training diverged".into(),
        ));
    }
    Ok(delta)
}

/// Gradient step moving the actor readout toward the critic-implied
/// stationary control:
/// `W_a <- W_a - alpha_a (W_a z_a + 1/2 R^{-1} g'(v) W_c z_c) z_a'`.
/// Returns the mismatch norm `|W_a z_a - u*_critic|`. Both feature states
/// must already be advanced for this `v_e`.
pub fn actor_update(
    actor: &mut ReservoirApproximator,
    critic: &ReservoirApproximator,
    v_e: &DVector<f64>,
    sys: &AffineSystem,
    cost: &CostSpec,
    cfg: &LearnerConfig,
) -> Result<f64> {
    let value_grad = critic.readout();
    let target = optimal_control_from_value(v_e, &value_grad, sys, cost)?;
    let mismatch = actor.readout() - target;
    let update = &mismatch * actor.features().transpose() * (-cfg.actor_rate);
    actor.w_out += update;
    if !actor.w_out.iter().all(|x| x.is_finite()) {
        return Err(Error::Diagnostics(
            "actor readout became non-finite; training diverged".into(),
        ));
    }
    Ok(mismatch.norm())
}

/// Unsupervised plasticity over the plastic recurrent block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum PlasticityRule {
    #[default]
    None,
    BoundedHebbian {
        eta: f64,
        w_max: f64,
    },
}

/// Apply the plasticity rule to the plastic block of the recurrent matrix;
/// fixed rows and columns are untouched by construction.
pub fn apply_plasticity(
    rule: &PlasticityRule,
    w: &WeightSet,
    pre_activity: &DVector<f64>,
    post_activity: &DVector<f64>,
    _u: &DVector<f64>,
    _dt: f64,
) -> Result<WeightSet> {
    match rule {
        PlasticityRule::None => Ok(w.clone()),
        PlasticityRule::BoundedHebbian { eta, w_max } => {
            let n = w.n_plastic();
            if pre_activity.len() != n || post_activity.len() != n {
                return Err(Error::Argument(
                    "activity vectors must match the plastic subset".into(),
                ));
            }
            if *w_max <= 0.0 || w_max.is_nan() {
                return Err(Error::Config("w_max must be positive".into()));
            }
            let mut block = w.plastic_block();
            block += post_activity * pre_activity.transpose() * *eta;
            block.apply(|x| *x = x.clamp(-*w_max, *w_max));
            let mut out = w.clone();
            out.set_plastic_block(&block)?;
            Ok(out)
        }
    }
}

/// The paired approximators plus their configuration; drives one learning
/// step per simulator step.
#[derive(Debug, Clone)]
pub struct AdpLearner {
    pub critic: ReservoirApproximator,
    pub actor: ReservoirApproximator,
    pub cfg: LearnerConfig,
    seed: u64,
    noise_unit: DVector<f64>,
    noise_steps_left: usize,
}

/// What one learner step produced: the applied control and diagnostics.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub control: DVector<f64>,
    pub diagnostics: HjbDiagnostics,
    pub actor_error: f64,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl AdpLearner {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        cfg: LearnerConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let critic = ReservoirApproximator::new(&ReservoirSpec {
            leak: cfg.reservoir_leak,
            spectral_radius: cfg.reservoir_spectral_radius,
            input_scale: cfg.reservoir_input_scale,
            ..ReservoirSpec::new(cfg.critic_size, state_dim, state_dim, mix_seed(seed, 1))
        })?;
        let actor = ReservoirApproximator::new(&ReservoirSpec {
            leak: cfg.reservoir_leak,
            spectral_radius: cfg.reservoir_spectral_radius,
            input_scale: cfg.reservoir_input_scale,
            ..ReservoirSpec::new(cfg.actor_size, state_dim, control_dim, mix_seed(seed, 2))
        })?;
        let control_dim = actor.output_dim();
        Ok(AdpLearner {
            critic,
            actor,
            cfg,
            seed,
            noise_unit: DVector::zeros(control_dim),
            noise_steps_left: 0,
        })
    }

    /// Held exploration sample: a fresh unit-normal vector every
    /// `noise_hold_steps` calls, scaled by the current std.
    fn exploration<R: Rng>(&mut self, noise_std: f64, rng: &mut R) -> DVector<f64> {
        if noise_std <= 0.0 {
            return DVector::zeros(self.control_dim());
        }
        if self.noise_steps_left == 0 {
            for i in 0..self.noise_unit.len() {
                self.noise_unit[i] = rng.sample(StandardNormal);
            }
            self.noise_steps_left = self.cfg.noise_hold_steps.max(1);
        }
        self.noise_steps_left -= 1;
        &self.noise_unit * noise_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state_dim(&self) -> usize {
        self.critic.input_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn reset_features(&mut self) {
        self.critic.reset_features();
        self.actor.reset_features();
        self.noise_steps_left = 0;
    }

    /// One training step at `v_e`: actor features and exploratory control,
    /// critic features, diagnostics, then critic and actor updates in that
    /// order. The model derivative `f + g u` feeds the Bellman residual.
    pub fn step<R: Rng>(
        &mut self,
        v_e: &DVector<f64>,
        sys: &AffineSystem,
        cost: &CostSpec,
        noise_std: f64,
        rng: &mut R,
        step_idx: usize,
    ) -> Result<StepOutcome> {
        self.actor.advance(v_e)?;
        let u = self.actor.readout() + self.exploration(noise_std, rng);
        let value_grad = critic_evaluate(&mut self.critic, v_e)?;
        let ham = hamiltonian(v_e, &u, &value_grad, sys, cost)?;
        let residual = hjb_residual(v_e, &value_grad, sys, cost)?;
        let v_e_dot = sys.xdot(v_e, &u);
        let bellman = critic_update(&mut self.critic, v_e, &u, &v_e_dot, cost, &self.cfg)?;
        let actor_error = actor_update(&mut self.actor, &self.critic, v_e, sys, cost, &self.cfg)?;
        let diagnostics = HjbDiagnostics {
            step: step_idx,
            hamiltonian: ham,
            hjb_residual: residual,
            bellman_error: bellman,
        };
        if !diagnostics.is_finite() {
            return Err(Error::Diagnostics("non-finite training diagnostics".into()));
        }
        Ok(StepOutcome {
            control: u,
            diagnostics,
            actor_error,
        })
    }

    /// Advance both feature maps and produce the exploratory control
    /// without updating any weights (used while features wash in at
    /// episode start).
    pub fn observe<R: Rng>(
        &mut self,
        v_e: &DVector<f64>,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        self.actor.advance(v_e)?;
        let u = self.actor.readout() + self.exploration(noise_std, rng);
        self.critic.advance(v_e)?;
        Ok(u)
    }

    /// The control the actor would apply at `v_e` without exploring and
    /// without touching the live feature state.
    pub fn policy_static(&self, v_e: &DVector<f64>, washout: usize) -> Result<DVector<f64>> {
        self.actor.settled_readout(v_e, washout)
    }

    /// The critic's value-gradient estimate at `v_e`, probed statically.
    pub fn value_grad_static(&self, v_e: &DVector<f64>, washout: usize) -> Result<DVector<f64>> {
        self.critic.settled_readout(v_e, washout)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LearnerCheckpoint::from(self)).expect("learner serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: LearnerCheckpoint = serde_json::from_str(s)?;
        doc.into_learner()
    }
}

/// Serialized learner: readouts, config, and the seeds that reproduce the
/// fixed feature maps.
#[derive(Debug, Serialize, Deserialize)]
pub struct LearnerCheckpoint {
    pub config: LearnerConfig,
    pub seed: u64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub critic_readout: MatrixDoc,
    pub actor_readout: MatrixDoc,
}

impl From<&AdpLearner> for LearnerCheckpoint {
    fn from(l: &AdpLearner) -> Self {
        LearnerCheckpoint {
            config: l.cfg.clone(),
            seed: l.seed,
            state_dim: l.state_dim(),
            control_dim: l.control_dim(),
            critic_readout: MatrixDoc::from_matrix(l.critic.readout_weights()),
            actor_readout: MatrixDoc::from_matrix(l.actor.readout_weights()),
        }
    }
}

impl LearnerCheckpoint {
    pub fn into_learner(self) -> Result<AdpLearner> {
        let mut learner =
            AdpLearner::new(self.state_dim, self.control_dim, self.config, self.seed)?;
        learner
            .critic
            .set_readout_weights(self.critic_readout.to_matrix()?)?;
        learner
            .actor
            .set_readout_weights(self.actor_readout.to_matrix()?)?;
        Ok(learner)
    }
}

/// Ridge-fit an approximator's readout to the linear map `x -> M x` over
/// settled features at seeded sample points. Used to seed the actor with
/// an admissible (stabilizing) policy (`M = -K`) and the critic with a
/// positive-definite value-gradient anchor (`M = 2 gamma I`) before
/// training; gradient descent on the squared residual is only guaranteed
/// to land on the stabilizing root of the stationarity equation when
/// training starts from admissible control.
pub fn fit_readout_to_linear_map(
    approx: &mut ReservoirApproximator,
    map: &DMatrix<f64>,
    sample_range: (f64, f64),
    n_samples: usize,
    washout: usize,
    ridge: f64,
    seed: u64,
) -> Result<()> {
    let n = approx.input_dim();
    if map.ncols() != n || map.nrows() != approx.output_dim() {
        return Err(Error::Config(
            "map shape does not match the approximator".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_feat = approx.feature_dim();
    let mut feats = DMatrix::zeros(n_samples, n_feat);
    let mut targets = DMatrix::zeros(n_samples, approx.output_dim());
    for s in 0..n_samples {
        let x = DVector::from_fn(n, |_, _| rng.gen_range(sample_range.0..sample_range.1));
        let mut probe = approx.clone();
        probe.reset_features();
        for _ in 0..washout {
            probe.advance(&x)?;
        }
        feats.row_mut(s).copy_from(&probe.features().transpose());
        let u = map * &x;
        targets.row_mut(s).copy_from(&u.transpose());
    }
    let gram = feats.transpose() * &feats + DMatrix::<f64>::identity(n_feat, n_feat) * ridge;
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or_else(|| Error::Solver("readout-fit normal matrix is singular".into()))?;
    let wt = chol.solve(&(feats.transpose() * targets));
    approx.set_readout_weights(wt.transpose())
}

/// Exploration schedule: full noise until the tail fraction of episodes,
/// then a linear ramp down to zero.
pub fn annealed_noise_std(base: f64, episode: usize, episodes: usize, tail_fraction: f64) -> f64 {
    if episodes == 0 {
        return 0.0;
    }
    let ramp_start = ((1.0 - tail_fraction) * episodes as f64).floor();
    let e = episode as f64;
    if e < ramp_start {
        base
    } else {
        let span = (episodes as f64 - ramp_start).max(1.0);
        base * ((episodes as f64 - e - 1.0) / span).max(0.0)
    }
}

/// Options for episode-based training on an affine system.
#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub episodes: usize,
    pub dt: f64,
    /// Per-coordinate uniform range for the episode's initial error state.
    pub init_range: (f64, f64),
    /// Fraction of episodes over which exploration anneals to zero.
    pub anneal_tail: f64,
    /// Admissible linear gain the actor is pre-fit to before training
    /// (`u = -K x`). Plants whose drift is already stable can leave this
    /// unset; marginally stable or unstable plants need it to keep the
    /// iteration on the stabilizing root.
    pub initial_gain: Option<DMatrix<f64>>,
    /// Steps at each episode start where features advance but no updates
    /// run, so the readouts never fit washing-in transients.
    pub washout_steps: usize,
    pub seed: u64,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            episodes: 500,
            dt: 0.005,
            init_range: (-1.0, 1.0),
            anneal_tail: 0.2,
            initial_gain: None,
            washout_steps: 20,
            seed: 0,
        }
    }
}

/// Per-episode training summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub mean_abs_hamiltonian: f64,
    pub mean_abs_bellman: f64,
    pub final_hjb_residual: f64,
    pub mean_actor_error: f64,
    pub diverged: bool,
}

/// Train the learner directly on an affine system (the plant IS the model).
/// Each episode runs from a seeded random initial state over the cost
/// horizon; the learner's feature states are reset at episode start.
pub fn train_on_system(
    learner: &mut AdpLearner,
    sys: &AffineSystem,
    cost: &CostSpec,
    opts: &EpisodeOptions,
) -> Result<Vec<EpisodeSummary>> {
    if sys.state_dim() != learner.state_dim() || sys.control_dim() != learner.control_dim() {
        return Err(Error::Config(
            "learner does not match the system dimensions".into(),
        ));
    }
    let steps_per_episode = (cost.t_f() / opts.dt).round() as usize;
    if steps_per_episode == 0 {
        return Err(Error::Argument("horizon shorter than one step".into()));
    }
    if let Some(gain) = &opts.initial_gain {
        fit_readout_to_linear_map(
            &mut learner.actor,
            &(-gain),
            opts.init_range,
            (50 * sys.state_dim()).max(100),
            60,
            1e-6,
            mix_seed(opts.seed, 4),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 3));
    let mut summaries = Vec::with_capacity(opts.episodes);
    for episode in 0..opts.episodes {
        let noise_std = annealed_noise_std(
            learner.cfg.exploration_noise_std,
            episode,
            opts.episodes,
            opts.anneal_tail,
        );
        let mut x = DVector::from_fn(sys.state_dim(), |_, _| {
            rng.gen_range(opts.init_range.0..opts.init_range.1)
        });
        learner.reset_features();
        let mut sum_ham = 0.0;
        let mut sum_bell = 0.0;
        let mut sum_aerr = 0.0;
        let mut last_residual = 0.0;
        let mut diverged = false;
        let mut steps_done = 0usize;
        for k in 0..steps_per_episode {
            if x.amax() > crate::error_dynamics::OVERFLOW_GUARD {
                diverged = true;
                break;
            }
            let control = if k < opts.washout_steps {
                learner.observe(&x, noise_std, &mut rng)?
            } else {
                let out = learner.step(&x, sys, cost, noise_std, &mut rng, k)?;
                sum_ham += out.diagnostics.hamiltonian.abs();
                sum_bell += out.diagnostics.bellman_error.abs();
                sum_aerr += out.actor_error;
                last_residual = out.diagnostics.hjb_residual;
                steps_done += 1;
                out.control
            };
            // Plant step under zero-order hold of the applied control.
            let rhs = |s: &DVector<f64>| sys.xdot(s, &control);
            let k1 = rhs(&x);
            let k2 = rhs(&(&x + &k1 * (opts.dt / 2.0)));
            let k3 = rhs(&(&x + &k2 * (opts.dt / 2.0)));
            let k4 = rhs(&(&x + &k3 * opts.dt));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (opts.dt / 6.0);
            if !x.iter().all(|v| v.is_finite()) {
                diverged = true;
                break;
            }
        }
        let denom = steps_done.max(1) as f64;
        summaries.push(EpisodeSummary {
            episode,
            mean_abs_hamiltonian: sum_ham / denom,
            mean_abs_bellman: sum_bell / denom,
            final_hjb_residual: last_residual,
            mean_actor_error: sum_aerr / denom,
            diverged,
        });
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_difference_gradient;
    use approx::assert_relative_eq;

    fn scalar_sys() -> AffineSystem {
        AffineSystem::linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap()
    }

    fn leak_sys() -> AffineSystem {
        AffineSystem::linear(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1)).unwrap()
    }

    fn unit_cost() -> CostSpec {
        CostSpec::scalar(1.0, 1.0, 1.0).unwrap()
    }

    /// A reservoir with hand-chosen feature state and readout, bypassing
    /// the random construction. Feature dynamics are irrelevant for the
    /// update-rule algebra being tested.
    fn rigged(features: &[f64], readout_rows: usize) -> ReservoirApproximator {
        let mut r = ReservoirApproximator::new(&ReservoirSpec {
            leak: 1.0,
            ..ReservoirSpec::new(features.len(), 1, readout_rows, 0)
        })
        .unwrap();
        r.set_features(DVector::from_row_slice(features)).unwrap();
        r
    }

    #[test]
    fn zero_readout_evaluates_to_zero() {
        let mut critic = ReservoirApproximator::new(&ReservoirSpec::new(30, 2, 2, 1)).unwrap();
        let v_e = DVector::from_vec(vec![0.3, -0.4]);
        let out = critic_evaluate(&mut critic, &v_e).unwrap();
        assert_eq!(out, DVector::zeros(2));
        // Features did move.
        assert!(critic.features().norm() > 0.0);
    }

    #[test]
    fn readout_is_linear_in_the_weights() {
        let mut r = rigged(&[0.5, -0.25, 1.0], 1);
        r.set_readout_weights(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]))
            .unwrap();
        let y1 = r.readout();
        r.set_readout_weights(DMatrix::from_row_slice(1, 3, &[2.0, 4.0, 6.0]))
            .unwrap();
        let y2 = r.readout();
        assert_relative_eq!(y2[0], 2.0 * y1[0], epsilon = 1e-14);
    }

    #[test]
    fn actor_noise_is_zero_mean_and_absent_at_eval() {
        let mut actor = ReservoirApproximator::new(&ReservoirSpec::new(20, 1, 1, 2)).unwrap();
        let v_e = DVector::from_element(1, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clean = actor_evaluate(&mut actor, &v_e, 0.0, &mut rng).unwrap();
        assert_eq!(clean, DVector::zeros(1));
        let mut sum = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let noisy = actor_evaluate(&mut actor, &v_e, 0.5, &mut rng).unwrap();
            sum += noisy[0];
        }
        assert!((sum / trials as f64).abs() < 0.05);
    }

    #[test]
    fn hamiltonian_at_equilibrium_is_zero() {
        let sys = leak_sys();
        let zero = DVector::zeros(1);
        let h = hamiltonian(&zero, &zero, &zero, &sys, &unit_cost()).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn hamiltonian_hand_case() {
        // v_e = 1, u = 0, V_e = 2, f = -v_e, g = 1, Q = R = 1:
        // H = 1 + 2 * (-1) = -1.
        let sys = leak_sys();
        let h = hamiltonian(
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            &DVector::from_element(1, 2.0),
            &sys,
            &unit_cost(),
        )
        .unwrap();
        assert_relative_eq!(h, -1.0, epsilon = 1e-14);
    }

    #[test]
    fn hamiltonian_vanishes_at_the_lqr_solution() {
        // a = 0, b = 1, q = r = 1: P = 1, V_e = 2x, u = -x.
        let sys = scalar_sys();
        let cost = unit_cost();
        for &x in &[-1.0, -0.3, 0.2, 0.9, 2.5] {
            let h = hamiltonian(
                &DVector::from_element(1, x),
                &DVector::from_element(1, -x),
                &DVector::from_element(1, 2.0 * x),
                &sys,
                &cost,
            )
            .unwrap();
            assert!(h.abs() <= 1e-12, "H = {h} at x = {x}");
        }
    }

    #[test]
    fn zero_gradient_gives_zero_control() {
        let sys = scalar_sys();
        let u =
            optimal_control_from_value(&DVector::zeros(1), &DVector::zeros(1), &sys, &unit_cost())
                .unwrap();
        assert_eq!(u, DVector::zeros(1));
    }

    #[test]
    fn stationary_control_matches_lqr_gain() {
        let sys = scalar_sys();
        let cost = unit_cost();
        for &x in &[-2.0, -0.5, 0.1, 1.7] {
            let u = optimal_control_from_value(
                &DVector::from_element(1, x),
                &DVector::from_element(1, 2.0 * x),
                &sys,
                &cost,
            )
            .unwrap();
            assert_relative_eq!(u[0], -x, epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_control_minimizes_the_hamiltonian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sys = AffineSystem::linear(
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.1, -1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]),
        )
        .unwrap();
        let cost = CostSpec::diagonal(2, 1.0, 2, 0.5, 1.0).unwrap();
        for _ in 0..20 {
            let v_e = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let grad = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let u_star = optimal_control_from_value(&v_e, &grad, &sys, &cost).unwrap();
            let h_star = hamiltonian(&v_e, &u_star, &grad, &sys, &cost).unwrap();
            for _ in 0..50 {
                let delta = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
                let h = hamiltonian(&v_e, &(&u_star + delta), &grad, &sys, &cost).unwrap();
                assert!(h >= h_star - 1e-12);
            }
        }
    }

    #[test]
    fn hjb_residual_at_origin_is_zero() {
        let sys = leak_sys();
        let r = hjb_residual(&DVector::zeros(1), &DVector::zeros(1), &sys, &unit_cost()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn riccati_gradient_annihilates_the_residual() {
        let sys = scalar_sys();
        let cost = unit_cost();
        for &x in &[-2.0, -0.7, 0.4, 1.3] {
            let r = hjb_residual(
                &DVector::from_element(1, x),
                &DVector::from_element(1, 2.0 * x),
                &sys,
                &cost,
            )
            .unwrap();
            assert!(r.abs() <= 1e-12, "residual {r} at x = {x}");
        }
    }

    #[test]
    fn wrong_gradient_leaves_residual() {
        // V_e = x at x = 1: residual = 1 - 1/4 = 0.75.
        let sys = scalar_sys();
        let r = hjb_residual(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 1.0),
            &sys,
            &unit_cost(),
        )
        .unwrap();
        assert_relative_eq!(r, 0.75, epsilon = 1e-14);
    }

    #[test]
    fn residual_equals_hamiltonian_at_stationary_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = AffineSystem::linear(
            DMatrix::from_row_slice(2, 2, &[-0.3, 0.4, -0.1, -0.9]),
            DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.2, 1.1]),
        )
        .unwrap();
        let cost = CostSpec::diagonal(2, 2.0, 2, 0.5, 1.0).unwrap();
        for _ in 0..100 {
            let v_e = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let grad = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let u_star = optimal_control_from_value(&v_e, &grad, &sys, &cost).unwrap();
            let lhs = hjb_residual(&v_e, &grad, &sys, &cost).unwrap();
            let rhs = hamiltonian(&v_e, &u_star, &grad, &sys, &cost).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10, "identity broke: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn critic_update_hand_case() {
        // z_c = (1), W_c = (0), v_e = 1, u = 0, v_e_dot = -1, Q = R = 1,
        // alpha_c = 0.1, no normalization: delta = 1, W_c becomes (0.1).
        let mut critic = rigged(&[1.0], 1);
        let cfg = LearnerConfig {
            critic_rate: 0.1,
            normalize: false,
            ..LearnerConfig::default()
        };
        let delta = critic_update(
            &mut critic,
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            &DVector::from_element(1, -1.0),
            &unit_cost(),
            &cfg,
        )
        .unwrap();
        assert_relative_eq!(delta, 1.0, epsilon = 1e-14);
        assert_relative_eq!(critic.readout_weights()[(0, 0)], 0.1, epsilon = 1e-14);
    }

    #[test]
    fn consistent_critic_is_not_moved() {
        // Choose W_c so delta = 0: readout * v_e_dot = -l(v_e, u).
        // v_e = 1, u = 0, l = 1; v_e_dot = -1; readout must be 1.
        let mut critic = rigged(&[1.0], 1);
        critic
            .set_readout_weights(DMatrix::from_element(1, 1, 1.0))
            .unwrap();
        let cfg = LearnerConfig {
            critic_rate: 0.5,
            normalize: false,
            ..LearnerConfig::default()
        };
        let delta = critic_update(
            &mut critic,
            &DVector::from_element(1, 1.0),
            &DVector::zeros(1),
            &DVector::from_element(1, -1.0),
            &unit_cost(),
            &cfg,
        )
        .unwrap();
        assert!(delta.abs() < 1e-14);
        assert_relative_eq!(critic.readout_weights()[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn critic_update_is_the_gradient_of_half_delta_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let n = 2;
            let n_c = 3;
            let features: Vec<f64> = (0..n_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v_e = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let v_e_dot = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let w0 = DMatrix::from_fn(n, n_c, |_, _| rng.gen_range(-1.0..1.0));
            let cost = CostSpec::diagonal(n, 1.0, n, 1.0, 1.0).unwrap();

            // Analytic update direction out of critic_update with rate 1,
            // no normalization: -delta * v_e_dot z'.
            let mut critic = rigged(&features, n);
            critic.set_readout_weights(w0.clone()).unwrap();
            let cfg = LearnerConfig {
                critic_rate: 1.0,
                normalize: false,
                ..LearnerConfig::default()
            };
            critic_update(&mut critic, &v_e, &u, &v_e_dot, &cost, &cfg).unwrap();
            let analytic_step = critic.readout_weights() - &w0;

            // Finite differences on E(W) = 1/2 delta(W)^2 over flattened W.
            let z = DVector::from_row_slice(&features);
            let objective = |wflat: &DVector<f64>| {
                let w = DMatrix::from_iterator(n, n_c, wflat.iter().copied());
                let delta = (w * &z).dot(&v_e_dot) + utility(&v_e, &u, &cost).unwrap();
                0.5 * delta * delta
            };
            let wflat = DVector::from_iterator(n * n_c, w0.iter().copied());
            let fd = finite_difference_gradient(&objective, &wflat, 1e-6).unwrap();
            let fd_mat = DMatrix::from_iterator(n, n_c, fd.iter().copied());
            let expected_step = -fd_mat;
            let scale = expected_step.norm().max(1e-12);
            assert!(
                (analytic_step - &expected_step).norm() / scale < 1e-6,
                "gradient mismatch"
            );
        }
    }

    #[test]
    fn actor_update_hand_case() {
        // z_a = z_c = (1), W_a = (0), W_c = (2), g = 1, R = 1,
        // alpha_a = 0.1: mismatch = 1, W_a becomes -0.1.
        let mut actor = rigged(&[1.0], 1);
        let mut critic = rigged(&[1.0], 1);
        critic
            .set_readout_weights(DMatrix::from_element(1, 1, 2.0))
            .unwrap();
        let cfg = LearnerConfig {
            actor_rate: 0.1,
            ..LearnerConfig::default()
        };
        let sys = scalar_sys();
        let err = actor_update(
            &mut actor,
            &critic,
            &DVector::zeros(1),
            &sys,
            &unit_cost(),
            &cfg,
        )
        .unwrap();
        assert_relative_eq!(err, 1.0, epsilon = 1e-14);
        assert_relative_eq!(actor.readout_weights()[(0, 0)], -0.1, epsilon = 1e-14);
    }

    #[test]
    fn zero_readouts_produce_zero_actor_update() {
        let mut actor = rigged(&[0.7, -0.3], 1);
        let critic = rigged(&[0.5, 0.5], 1);
        let cfg = LearnerConfig::default();
        let sys = scalar_sys();
        let err = actor_update(
            &mut actor,
            &critic,
            &DVector::zeros(1),
            &sys,
            &unit_cost(),
            &cfg,
        )
        .unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(actor.readout_weights(), &DMatrix::zeros(1, 2));
    }

    #[test]
    fn frozen_feature_actor_converges_monotonically() {
        let mut actor = rigged(&[0.8, -0.4, 0.2], 1);
        let mut critic = rigged(&[1.0], 1);
        critic
            .set_readout_weights(DMatrix::from_element(1, 1, 2.0))
            .unwrap();
        let cfg = LearnerConfig {
            actor_rate: 0.5,
            ..LearnerConfig::default()
        };
        let sys = scalar_sys();
        let cost = unit_cost();
        let v_e = DVector::zeros(1);
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let err = actor_update(&mut actor, &critic, &v_e, &sys, &cost, &cfg).unwrap();
            if i > 0 {
                assert!(err <= prev + 1e-14, "actor error rose: {prev} -> {err}");
            }
            prev = err;
        }
        assert!(prev < 1e-8, "actor error did not vanish: {prev}");
    }

    #[test]
    fn plasticity_none_is_identity() {
        let w = crate::net::WeightInit {
            density: 0.5,
            ..crate::net::WeightInit::new(4, 1, 1, 3)
        }
        .build()
        .unwrap();
        let pre = DVector::from_element(4, 1.0);
        let out = apply_plasticity(&PlasticityRule::None, &w, &pre, &pre, &pre, 0.01).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn bounded_hebbian_single_step() {
        let w = WeightSet::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            vec![true],
            0,
        )
        .unwrap();
        let one = DVector::from_element(1, 1.0);
        let rule = PlasticityRule::BoundedHebbian {
            eta: 0.1,
            w_max: 1.0,
        };
        let out = apply_plasticity(&rule, &w, &one, &one, &one, 1.0).unwrap();
        assert_relative_eq!(out.recurrent()[(0, 0)], 0.1, epsilon = 1e-14);
    }

    #[test]
    fn bounded_hebbian_never_escapes_the_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut w = crate::net::WeightInit {
            density: 0.5,
            n_fixed: 1,
            ..crate::net::WeightInit::new(4, 1, 1, 3)
        }
        .build()
        .unwrap();
        let rule = PlasticityRule::BoundedHebbian {
            eta: 0.2,
            w_max: 1.0,
        };
        let fixed_before = w.recurrent().row(0).clone_owned();
        for _ in 0..10_000 {
            let pre = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let post = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            w = apply_plasticity(&rule, &w, &pre, &post, &pre, 0.01).unwrap();
            assert!(w.plastic_block().iter().all(|&x| x.abs() <= 1.0 + 1e-15));
        }
        // Fixed row untouched.
        assert_eq!(w.recurrent().row(0).clone_owned(), fixed_before);
    }

    #[test]
    fn echo_state_forgets_initial_features() {
        let spec = ReservoirSpec::new(60, 1, 1, 5);
        let mut a = ReservoirApproximator::new(&spec).unwrap();
        let mut b = ReservoirApproximator::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.set_features(DVector::from_fn(60, |_, _| rng.gen_range(-1.0..1.0)))
            .unwrap();
        let initial = (a.features() - b.features()).norm();
        let mut drive = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let u = DVector::from_element(1, drive.gen_range(-1.0..1.0));
            a.advance(&u).unwrap();
            b.advance(&u).unwrap();
        }
        let final_d = (a.features() - b.features()).norm();
        assert!(
            final_d * 10.0 <= initial,
            "feature distance only shrank {initial} -> {final_d}"
        );
    }

    #[test]
    fn reservoir_spectral_radius_is_verified() {
        let bad = ReservoirSpec {
            spectral_radius: 1.2,
            ..ReservoirSpec::new(10, 1, 1, 0)
        };
        assert!(ReservoirApproximator::new(&bad).is_err());
    }

    #[test]
    fn zero_learning_rates_mean_frozen_weights() {
        let sys = scalar_sys();
        let cost = unit_cost();
        let cfg = LearnerConfig {
            critic_rate: 0.0,
            actor_rate: 0.0,
            exploration_noise_std: 0.0,
            ..LearnerConfig::default()
        };
        let mut learner = AdpLearner::new(1, 1, cfg, 9).unwrap();
        learner
            .critic
            .set_readout_weights(DMatrix::from_fn(1, 100, |_, j| 0.01 * j as f64))
            .unwrap();
        let wc = learner.critic.readout_weights().clone();
        let wa = learner.actor.readout_weights().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..5 {
            learner
                .step(
                    &DVector::from_element(1, 0.5),
                    &sys,
                    &cost,
                    0.0,
                    &mut rng,
                    k,
                )
                .unwrap();
        }
        assert_eq!(learner.critic.readout_weights(), &wc);
        assert_eq!(learner.actor.readout_weights(), &wa);
    }

    #[test]
    fn learner_checkpoint_round_trip() {
        let mut learner = AdpLearner::new(2, 2, LearnerConfig::default(), 123).unwrap();
        learner
            .critic
            .set_readout_weights(DMatrix::from_fn(2, 100, |i, j| (i + j) as f64 * 0.01))
            .unwrap();
        let json = learner.to_json();
        let back = AdpLearner::from_json(&json).unwrap();
        assert_eq!(
            back.critic.readout_weights(),
            learner.critic.readout_weights()
        );
        assert_eq!(
            back.actor.readout_weights(),
            learner.actor.readout_weights()
        );
        assert_eq!(back.critic.features(), &DVector::zeros(100));
        // Fixed matrices rebuilt from the recorded seed.
        assert_eq!(back.seed(), learner.seed());
    }

    #[test]
    fn anneal_schedule_shape() {
        assert_eq!(annealed_noise_std(0.1, 0, 100, 0.2), 0.1);
        assert_eq!(annealed_noise_std(0.1, 79, 100, 0.2), 0.1);
        let last = annealed_noise_std(0.1, 99, 100, 0.2);
        assert!(last.abs() < 1e-12, "last episode noise {last}");
        let mid = annealed_noise_std(0.1, 89, 100, 0.2);
        assert!(mid > 0.0 && mid < 0.1);
    }

    #[test]
    fn diagnostics_csv_has_expected_columns() {
        let recs = vec![HjbDiagnostics {
            step: 0,
            hamiltonian: 1.5,
            hjb_residual: -0.25,
            bellman_error: 0.125,
        }];
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, &recs).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "step,hamiltonian,hjb_residual,bellman_error\n0,1.5,-0.25,0.125\n"
        );
    }
}
