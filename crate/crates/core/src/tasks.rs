//! Desk-scale experiments: reference-trajectory generation, decoder
//! pre-training, the training loop wiring plant and learner together, and
//! feedback-removal evaluation.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

use crate::adp::{
    annealed_noise_std, apply_plasticity, AdpLearner, LearnerCheckpoint, LearnerConfig,
    PlasticityRule,
};
use crate::error_dynamics::{
    error_system_from_network, AffineSystem, CostSpec, ErrorState, OVERFLOW_GUARD,
};
use crate::jsonio::MatrixDoc;
use crate::net::{
    neuron_input_split, step_dynamics, Activation, Integrator, LeakSpec, NetworkState, WeightInit,
    WeightSet,
};
use crate::{Error, Result};

/// One sinusoid term: `a sin(w t + phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

/// Reference trajectory families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceKind {
    /// Scalar `a sin(w t + phi)`.
    Sine {
        amplitude: f64,
        omega: f64,
        phase: f64,
    },
    /// Scalar sum of sinusoids.
    SumOfSines { terms: Vec<SineTerm> },
    /// Per-class constant setpoints; the active class selects the target.
    SetpointClassification {
        setpoints: Vec<Vec<f64>>,
        active_class: usize,
    },
}

/// A reference task: the trajectory family plus duration and sample step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTask {
    pub signal: ReferenceKind,
    pub duration: f64,
    pub dt: f64,
}

impl ReferenceTask {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("task duration must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("task dt must be positive".into()));
        }
        match &self.signal {
            ReferenceKind::Sine { omega, .. } => {
                if *omega <= 0.0 {
                    return Err(Error::Config("sine frequency must be positive".into()));
                }
            }
            ReferenceKind::SumOfSines { terms } => {
                if terms.is_empty() {
                    return Err(Error::Config("sum-of-sines needs at least one term".into()));
                }
                if terms.iter().any(|t| t.omega <= 0.0) {
                    return Err(Error::Config("sine frequencies must be positive".into()));
                }
            }
            ReferenceKind::SetpointClassification {
                setpoints,
                active_class,
            } => {
                if setpoints.is_empty() {
                    return Err(Error::Config("setpoint map must be nonempty".into()));
                }
                let dim = setpoints[0].len();
                if dim == 0 || setpoints.iter().any(|s| s.len() != dim) {
                    return Err(Error::Config(
                        "setpoints must share a nonzero dimension".into(),
                    ));
                }
                // Injectivity of the class -> setpoint map.
                for i in 0..setpoints.len() {
                    for j in (i + 1)..setpoints.len() {
                        if setpoints[i] == setpoints[j] {
                            return Err(Error::Config(format!(
                                "setpoint map is not injective: classes {i} and {j} coincide"
                            )));
                        }
                    }
                }
                if *active_class >= setpoints.len() {
                    return Err(Error::Config("active class out of range".into()));
                }
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match &self.signal {
            ReferenceKind::Sine { .. } | ReferenceKind::SumOfSines { .. } => 1,
            ReferenceKind::SetpointClassification { setpoints, .. } => setpoints[0].len(),
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Analytic reference value and derivative at time `t`.
pub fn generate_reference(task: &ReferenceTask, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(0.0..=task.duration + 1e-12).contains(&t) {
        return Err(Error::Argument(format!(
            "t = {t} outside task range [0, {}]",
            task.duration
        )));
    }
    match &task.signal {
        ReferenceKind::Sine {
            amplitude,
            omega,
            phase,
        } => {
            let y = amplitude * (omega * t + phase).sin();
            let ydot = amplitude * omega * (omega * t + phase).cos();
            Ok((DVector::from_element(1, y), DVector::from_element(1, ydot)))
        }
        ReferenceKind::SumOfSines { terms } => {
            let mut y = 0.0;
            let mut ydot = 0.0;
            for term in terms {
                y += term.amplitude * (term.omega * t + term.phase).sin();
                ydot += term.amplitude * term.omega * (term.omega * t + term.phase).cos();
            }
            Ok((DVector::from_element(1, y), DVector::from_element(1, ydot)))
        }
        ReferenceKind::SetpointClassification {
            setpoints,
            active_class,
        } => {
            let y = DVector::from_row_slice(&setpoints[*active_class]);
            let ydot = DVector::zeros(y.len());
            Ok((y, ydot))
        }
    }
}

/// Classify a trial by the setpoint nearest to the time-averaged output
/// over the last 20% of the episode.
pub fn classify_setpoint(task: &ReferenceTask, outputs: &[DVector<f64>]) -> Result<usize> {
    let ReferenceKind::SetpointClassification { setpoints, .. } = &task.signal else {
        return Err(Error::Argument(
            "classification needs a setpoint task".into(),
        ));
    };
    if outputs.is_empty() {
        return Err(Error::Argument("no outputs to classify".into()));
    }
    let tail = (outputs.len() as f64 * 0.2).ceil() as usize;
    let tail = tail.max(1);
    let mut mean = DVector::zeros(outputs[0].len());
    for out in &outputs[outputs.len() - tail..] {
        mean += out;
    }
    mean /= tail as f64;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, sp) in setpoints.iter().enumerate() {
        let d = (DVector::from_row_slice(sp) - &mean).norm();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    Ok(best)
}

/// Ridge regression of the decoder on collected state/target samples:
/// `W_D = argmin sum |W v - y|^2 + lambda |W|^2` by normal equations.
/// `states` is samples-by-neurons, `targets` samples-by-outputs.
pub fn pretrain_decoder(
    states: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Argument(
            "ridge parameter must be non-negative".into(),
        ));
    }
    let n_samples = states.nrows();
    let n = states.ncols();
    if targets.nrows() != n_samples {
        return Err(Error::Argument(
            "states and targets must have the same sample count".into(),
        ));
    }
    if n_samples < n {
        return Err(Error::Argument(format!(
            "need at least {n} samples, got {n_samples}"
        )));
    }
    let gram = states.transpose() * states + DMatrix::<f64>::identity(n, n) * ridge;
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::RankDeficient(
            "normal matrix is singular; state samples do not span the network (try lambda > 0)"
                .into(),
        )
    })?;
    // W' = (S'S + lambda I)^{-1} S'Y, so W = Y'S (S'S + lambda I)^{-1}.
    let wt = chol.solve(&(states.transpose() * targets));
    Ok(wt.transpose())
}

/// Minimum-norm teacher state with `W_D v_d = y`, via the decoder's
/// pseudoinverse. Requires full row rank.
pub fn derive_teacher_state(y: &DVector<f64>, w_d: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(teacher_map(w_d)? * y)
}

/// The pseudoinverse matrix `W_D' (W_D W_D')^{-1}` applied by
/// [`derive_teacher_state`]; cached by the training loop.
pub fn teacher_map(w_d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = w_d * w_d.transpose();
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::RankDeficient("decoder is not full row rank; teacher state undefined".into())
    })?;
    Ok(w_d.transpose() * chol.solve(&DMatrix::identity(w_d.nrows(), w_d.nrows())))
}

/// Network half of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub n_neurons: usize,
    pub n_fixed: usize,
    pub density: f64,
    pub spectral_radius: f64,
    pub input_scale: f64,
    pub leak_alpha: f64,
    pub activation: Activation,
    /// Nonlinearity on the external input before encoding; `None` follows
    /// `activation`.
    pub input_activation: Option<Activation>,
    pub integrator: Integrator,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_neurons: 1,
            n_fixed: 0,
            density: 1.0,
            spectral_radius: 0.9,
            input_scale: 1.0,
            leak_alpha: 1.0,
            activation: Activation::Tanh,
            input_activation: None,
            integrator: Integrator::Rk4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neurons == 0 {
            return Err(Error::Config("network needs at least one neuron".into()));
        }
        if self.n_fixed >= self.n_neurons {
            return Err(Error::Config(
                "at least one neuron must stay plastic".into(),
            ));
        }
        if self.leak_alpha < 0.0 || !self.leak_alpha.is_finite() {
            return Err(Error::Config("leak rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config("density must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cost half of a run configuration (diagonal Q and R).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub q_scale: f64,
    pub r_scale: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            q_scale: 1.0,
            r_scale: 0.01,
        }
    }
}

/// Decoder pre-training settings. Samples are collected by driving the
/// plant with a seeded multisine probe, then ridge-regressing the states
/// onto the probe signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub ridge: f64,
    pub probe_terms: usize,
    pub probe_duration: f64,
    /// Angular-frequency band the probe multisine is drawn from. The
    /// decoder is a generic state-to-output map fit on this band, not on
    /// the task trajectory itself.
    pub probe_band: (f64, f64),
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            ridge: 25.0,
            probe_terms: 4,
            probe_duration: 20.0,
            probe_band: (4.0, 12.0),
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: ReferenceTask,
    pub network: NetworkConfig,
    pub learner: LearnerConfig,
    pub cost: CostConfig,
    pub pretrain: PretrainConfig,
    pub plasticity: PlasticityRule,
    pub episodes: usize,
    pub seed: u64,
    /// Input forcing: feed the reference into the input channel.
    pub input_follows_reference: bool,
    /// Fraction of episodes over which exploration anneals to zero.
    pub anneal_tail: f64,
    /// Admissible warm start: the actor readout is pre-fit to
    /// `u = -k v_e` before training (0 disables).
    pub initial_policy_gain: f64,
    /// Critic warm start: value-gradient readout pre-fit to
    /// `2 gamma v_e`, anchoring every direction on the stabilizing side
    /// (0 disables).
    pub initial_value_gain: f64,
    /// Steps at each episode start where features advance but no learner
    /// updates run.
    pub washout_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: ReferenceTask {
                signal: ReferenceKind::Sine {
                    amplitude: 1.0,
                    omega: 2.0,
                    phase: 0.0,
                },
                duration: 4.0,
                dt: 0.005,
            },
            network: NetworkConfig::default(),
            learner: LearnerConfig {
                critic_rate: 0.002,
                actor_rate: 0.0005,
                exploration_noise_std: 0.3,
                ..LearnerConfig::default()
            },
            cost: CostConfig::default(),
            pretrain: PretrainConfig::default(),
            plasticity: PlasticityRule::None,
            episodes: 300,
            seed: 2,
            input_follows_reference: true,
            anneal_tail: 0.2,
            initial_policy_gain: 0.05,
            initial_value_gain: 0.0,
            washout_steps: 20,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.network.validate()?;
        self.learner.validate()?;
        if self.cost.q_scale < 0.0 || self.cost.r_scale <= 0.0 {
            return Err(Error::Config(
                "cost scales need q_scale >= 0 and r_scale > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.anneal_tail) {
            return Err(Error::Config("anneal tail must lie in [0, 1]".into()));
        }
        if self.initial_policy_gain < 0.0 || !self.initial_policy_gain.is_finite() {
            return Err(Error::Config(
                "initial policy gain must be non-negative".into(),
            ));
        }
        if self.initial_value_gain < 0.0 || !self.initial_value_gain.is_finite() {
            return Err(Error::Config(
                "initial value gain must be non-negative".into(),
            ));
        }
        if self.pretrain.enabled {
            if self.pretrain.ridge < 0.0 {
                return Err(Error::Config("ridge must be non-negative".into()));
            }
            if self.pretrain.probe_terms == 0 || self.pretrain.probe_duration <= 0.0 {
                return Err(Error::Config(
                    "probe needs terms and a positive duration".into(),
                ));
            }
            if !(self.pretrain.probe_band.0 > 0.0
                && self.pretrain.probe_band.1 > self.pretrain.probe_band.0)
            {
                return Err(Error::Config(
                    "probe band must be a positive interval".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One simulator step of everything the report records.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub t: f64,
    pub y: DVector<f64>,
    pub y_hat: DVector<f64>,
    pub error_norm: f64,
    pub control_norm: f64,
    pub hamiltonian: f64,
    pub hjb_residual: f64,
    pub bellman_error: f64,
}

/// Receives step records as training runs; lets callers stream CSV without
/// buffering whole runs.
pub trait StepSink {
    fn on_step(&mut self, record: &StepRecord) -> Result<()>;
}

/// Discards records.
pub struct NullSink;

impl StepSink for NullSink {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes the report CSV (one row per step).
pub struct CsvStepWriter<W: Write> {
    out: W,
    wrote_header: bool,
    output_dim: usize,
}

impl<W: Write> CsvStepWriter<W> {
    pub fn new(out: W, output_dim: usize) -> Self {
        CsvStepWriter {
            out,
            wrote_header: false,
            output_dim,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> StepSink for CsvStepWriter<W> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        if !self.wrote_header {
            let mut header = String::from("episode,step,t");
            for i in 0..self.output_dim {
                header.push_str(&format!(",y{i}"));
            }
            for i in 0..self.output_dim {
                header.push_str(&format!(",y_hat{i}"));
            }
            header.push_str(",error_norm,control_norm,hamiltonian,hjb_residual,bellman_error");
            writeln!(self.out, "{header}")?;
            self.wrote_header = true;
        }
        let mut row = format!("{},{},{}", r.episode, r.step, r.t);
        for v in r.y.iter() {
            row.push_str(&format!(",{v}"));
        }
        for v in r.y_hat.iter() {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(
            ",{},{},{},{},{}",
            r.error_norm, r.control_norm, r.hamiltonian, r.hjb_residual, r.bellman_error
        ));
        writeln!(self.out, "{row}")?;
        Ok(())
    }
}

/// Per-episode training report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub tracking_mse: Vec<f64>,
    pub mean_abs_hamiltonian: Vec<f64>,
    pub final_hjb_residual: Vec<f64>,
    pub mean_abs_bellman: Vec<f64>,
    pub diverged: Vec<bool>,
    pub wall_clock_seconds: f64,
    pub seed: u64,
}

impl TrainReport {
    pub fn episodes(&self) -> usize {
        self.tracking_mse.len()
    }

    pub fn write_episode_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "episode,tracking_mse,mean_abs_hamiltonian,final_hjb_residual,mean_abs_bellman,diverged"
        )?;
        for i in 0..self.episodes() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                i,
                self.tracking_mse[i],
                self.mean_abs_hamiltonian[i],
                self.final_hjb_residual[i],
                self.mean_abs_bellman[i],
                self.diverged[i]
            )?;
        }
        Ok(())
    }
}

/// Everything needed to re-run the trained system.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: RunConfig,
    pub weights: serde_json::Value,
    pub learner: LearnerCheckpoint,
    pub decoder: MatrixDoc,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// The assembled plant + learner, ready to train or evaluate.
pub struct Experiment {
    pub config: RunConfig,
    pub weights: WeightSet,
    pub leak: LeakSpec,
    pub learner: AdpLearner,
    pub cost: CostSpec,
    pub system: AffineSystem,
    teacher: DMatrix<f64>,
    plastic_idx: Vec<usize>,
    /// The plastic recurrent block: the channel the control acts through,
    /// matching the error-system input map.
    control_channel: DMatrix<f64>,
}

impl Experiment {
    /// Build the plant, pre-train the decoder, and assemble the learner.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let task_dim = config.task.output_dim();
        let mut weights = WeightInit {
            n_fixed: config.network.n_fixed,
            density: config.network.density,
            spectral_radius: config.network.spectral_radius,
            input_scale: config.network.input_scale,
            ..WeightInit::new(config.network.n_neurons, task_dim, task_dim, config.seed)
        }
        .build()?;
        let leak = LeakSpec::uniform(config.network.n_neurons, config.network.leak_alpha)?;

        if config.pretrain.enabled {
            let (states, targets) = collect_probe_samples(config, &weights, &leak)?;
            let w_d = pretrain_decoder(&states, &targets, config.pretrain.ridge)?;
            weights.set_decoder(w_d)?;
        }

        let teacher = teacher_map(weights.decoder())?;
        let system = error_system_from_network(&weights, &leak, config.network.activation)?;
        let n = system.state_dim();
        let cost = CostSpec::diagonal(
            n,
            config.cost.q_scale,
            n,
            config.cost.r_scale,
            config.task.duration,
        )?;
        let mut learner = AdpLearner::new(n, n, config.learner.clone(), config.seed)?;
        if config.initial_policy_gain > 0.0 {
            // Admissible warm start aligned with the control channel:
            // u = -k g' v_e descends the model's quadratic Lyapunov
            // function whatever the sign structure of g.
            let channel = weights.plastic_block();
            crate::adp::fit_readout_to_linear_map(
                &mut learner.actor,
                &(channel.transpose() * -config.initial_policy_gain),
                (-1.0, 1.0),
                (50 * n).max(100),
                60,
                1e-6,
                config.seed ^ 0x011D_0F17,
            )?;
        }
        if config.initial_value_gain > 0.0 {
            crate::adp::fit_readout_to_linear_map(
                &mut learner.critic,
                &(DMatrix::identity(n, n) * (2.0 * config.initial_value_gain)),
                (-1.0, 1.0),
                (50 * n).max(100),
                60,
                1e-6,
                config.seed ^ 0x00C7_171C,
            )?;
        }
        let plastic_idx = weights.plastic_indices();
        let control_channel = weights.plastic_block();
        Ok(Experiment {
            config: config.clone(),
            weights,
            leak,
            learner,
            cost,
            system,
            teacher,
            plastic_idx,
            control_channel,
        })
    }

    fn input_activation(&self) -> Activation {
        self.config
            .network
            .input_activation
            .unwrap_or(self.config.network.activation)
    }

    /// Control embedded as additive current on plastic neurons, acting
    /// through the plastic recurrent block so the plant sees the same
    /// input channel the error-system model assumes.
    fn embed_control(&self, u: &DVector<f64>, n_neurons: usize) -> DVector<f64> {
        let routed = &self.control_channel * u;
        let mut full = DVector::zeros(n_neurons);
        for (k, &i) in self.plastic_idx.iter().enumerate() {
            full[i] = routed[k];
        }
        full
    }

    /// Rebuild the error-system model and control channel after the
    /// recurrent weights changed (plasticity).
    fn refresh_model(&mut self) -> Result<()> {
        self.system =
            error_system_from_network(&self.weights, &self.leak, self.config.network.activation)?;
        self.control_channel = self.weights.plastic_block();
        Ok(())
    }

    /// Run training; streams per-step records into `sink`.
    pub fn train(&mut self, sink: &mut dyn StepSink) -> Result<TrainReport> {
        let start = Instant::now();
        let episodes = self.config.episodes;
        let steps = self.config.task.steps();
        let dt = self.config.task.dt;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_5EED);
        let mut report = TrainReport {
            tracking_mse: Vec::with_capacity(episodes),
            mean_abs_hamiltonian: Vec::with_capacity(episodes),
            final_hjb_residual: Vec::with_capacity(episodes),
            mean_abs_bellman: Vec::with_capacity(episodes),
            diverged: Vec::with_capacity(episodes),
            wall_clock_seconds: 0.0,
            seed: self.config.seed,
        };

        for episode in 0..episodes {
            let noise_std = annealed_noise_std(
                self.learner.cfg.exploration_noise_std,
                episode,
                episodes,
                self.config.anneal_tail,
            );
            let mut state = NetworkState::zeros(self.weights.n_neurons());
            self.learner.reset_features();
            let mut sum_sq_err = 0.0;
            let mut sum_ham = 0.0;
            let mut sum_bell = 0.0;
            let mut last_residual = 0.0;
            let mut diverged = false;
            let mut sim_steps = 0usize;
            let mut update_steps = 0usize;

            for k in 0..steps {
                let t = k as f64 * dt;
                if state.v().amax() > OVERFLOW_GUARD {
                    diverged = true;
                    break;
                }
                let (y, _ydot) = generate_reference(&self.config.task, t)?;
                let x = if self.config.input_follows_reference {
                    y.clone()
                } else {
                    DVector::zeros(y.len())
                };
                let v_d = &self.teacher * &y;
                let err = ErrorState::from_state(state.v(), &v_d, &y, &self.weights)?;
                let v_e = &err.v_e;

                let (control, diag) = if k < self.config.washout_steps {
                    let u = self.learner.observe(v_e, noise_std, &mut rng)?;
                    (u, None)
                } else {
                    let out =
                        self.learner
                            .step(v_e, &self.system, &self.cost, noise_std, &mut rng, k)?;
                    (out.control, Some(out.diagnostics))
                };

                let y_hat = &err.e + &y;
                sum_sq_err += err.e.norm_squared();
                sim_steps += 1;
                let (ham, residual, bellman) = match &diag {
                    Some(d) => {
                        sum_ham += d.hamiltonian.abs();
                        sum_bell += d.bellman_error.abs();
                        last_residual = d.hjb_residual;
                        update_steps += 1;
                        (d.hamiltonian, d.hjb_residual, d.bellman_error)
                    }
                    None => (f64::NAN, f64::NAN, f64::NAN),
                };

                sink.on_step(&StepRecord {
                    episode,
                    step: k,
                    t,
                    y: y.clone(),
                    y_hat,
                    error_norm: err.e.norm(),
                    control_norm: control.norm(),
                    hamiltonian: ham,
                    hjb_residual: residual,
                    bellman_error: bellman,
                })?;

                // Plant step with the control as additive current on the
                // plastic neurons.
                let current = neuron_input_split(
                    &state,
                    &x,
                    &self.weights,
                    self.input_activation(),
                    self.config.network.activation,
                )? + self.embed_control(&control, self.weights.n_neurons());
                let next = step_dynamics(
                    &state,
                    &current,
                    &self.leak,
                    dt,
                    self.config.network.integrator,
                );
                let next = match next {
                    Ok(s) => s,
                    Err(Error::Overflow(_)) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };

                if !matches!(self.config.plasticity, PlasticityRule::None) {
                    let phi = self.config.network.activation;
                    let pre = DVector::from_iterator(
                        self.plastic_idx.len(),
                        self.plastic_idx.iter().map(|&i| phi.scalar(state.v()[i])),
                    );
                    let post = DVector::from_iterator(
                        self.plastic_idx.len(),
                        self.plastic_idx.iter().map(|&i| phi.scalar(next.v()[i])),
                    );
                    self.weights = apply_plasticity(
                        &self.config.plasticity,
                        &self.weights,
                        &pre,
                        &post,
                        &control,
                        dt,
                    )?;
                    self.refresh_model()?;
                }
                state = next;
            }

            report
                .tracking_mse
                .push(sum_sq_err / sim_steps.max(1) as f64);
            let denom = update_steps.max(1) as f64;
            report.mean_abs_hamiltonian.push(sum_ham / denom);
            report.final_hjb_residual.push(last_residual);
            report.mean_abs_bellman.push(sum_bell / denom);
            report.diverged.push(diverged);
        }
        report.wall_clock_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            weights: serde_json::from_str(&self.weights.to_json())
                .expect("weight json round-trips"),
            learner: LearnerCheckpoint::from(&self.learner),
            decoder: MatrixDoc::from_matrix(self.weights.decoder()),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint schema version {}",
                ckpt.schema_version
            )));
        }
        ckpt.config.validate()?;
        let weights = WeightSet::from_json(&serde_json::to_string(&ckpt.weights)?)?;
        let leak = LeakSpec::uniform(
            ckpt.config.network.n_neurons,
            ckpt.config.network.leak_alpha,
        )?;
        let system = error_system_from_network(&weights, &leak, ckpt.config.network.activation)?;
        let n = system.state_dim();
        let cost = CostSpec::diagonal(
            n,
            ckpt.config.cost.q_scale,
            n,
            ckpt.config.cost.r_scale,
            ckpt.config.task.duration,
        )?;
        let learner = LearnerCheckpoint {
            config: ckpt.learner.config.clone(),
            seed: ckpt.learner.seed,
            state_dim: ckpt.learner.state_dim,
            control_dim: ckpt.learner.control_dim,
            critic_readout: ckpt.learner.critic_readout.clone(),
            actor_readout: ckpt.learner.actor_readout.clone(),
        }
        .into_learner()?;
        let teacher = teacher_map(weights.decoder())?;
        let plastic_idx = weights.plastic_indices();
        let control_channel = weights.plastic_block();
        Ok(Experiment {
            config: ckpt.config.clone(),
            weights,
            leak,
            learner,
            cost,
            system,
            teacher,
            plastic_idx,
            control_channel,
        })
    }

    /// Run the plant under the actor's learned control with no critic
    /// updates and no exploration; returns the tracking MSE against the
    /// reference. Deterministic.
    pub fn evaluate_feedforward_only(&self, task: &ReferenceTask) -> Result<f64> {
        task.validate()?;
        if task.output_dim() != self.weights.output_dim() {
            return Err(Error::Config(
                "task output dimension does not match the decoder".into(),
            ));
        }
        let steps = task.steps();
        let dt = task.dt;
        let mut state = NetworkState::zeros(self.weights.n_neurons());
        let mut actor = self.learner.actor.clone();
        actor.reset_features();
        let mut sum_sq_err = 0.0;
        for k in 0..steps {
            let t = k as f64 * dt;
            let (y, _) = generate_reference(task, t)?;
            let x = if self.config.input_follows_reference {
                y.clone()
            } else {
                DVector::zeros(y.len())
            };
            let v_d = &self.teacher * &y;
            let err = ErrorState::from_state(state.v(), &v_d, &y, &self.weights)?;
            actor.advance(&err.v_e)?;
            let u = actor.readout();

            sum_sq_err += err.e.norm_squared();

            let current = neuron_input_split(
                &state,
                &x,
                &self.weights,
                self.input_activation(),
                self.config.network.activation,
            )? + self.embed_control(&u, self.weights.n_neurons());
            state = step_dynamics(
                &state,
                &current,
                &self.leak,
                dt,
                self.config.network.integrator,
            )?;
        }
        Ok(sum_sq_err / steps.max(1) as f64)
    }
}

/// Drive the untrained plant with a seeded multisine probe and collect
/// (state, probe) samples for decoder pre-training. The probe band sits
/// around the task's own timescale so the decoder generalizes without
/// being fit to the task trajectory itself.
fn collect_probe_samples(
    config: &RunConfig,
    weights: &WeightSet,
    leak: &LeakSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dim = config.task.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0B5E_55ED);
    let dt = config.task.dt;
    let steps = (config.pretrain.probe_duration / dt).round() as usize;
    let skip = (steps / 10).max(1);

    // Random multisine per output channel.
    let mut terms = Vec::new();
    for _ in 0..dim {
        let (lo, hi) = config.pretrain.probe_band;
        let channel: Vec<SineTerm> = (0..config.pretrain.probe_terms)
            .map(|_| SineTerm {
                amplitude: rng.gen_range(0.3..1.0),
                omega: rng.gen_range(lo..hi),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        terms.push(channel);
    }
    let probe = |t: f64| {
        DVector::from_fn(dim, |i, _| {
            terms[i]
                .iter()
                .map(|s| s.amplitude * (s.omega * t + s.phase).sin())
                .sum()
        })
    };

    let mut state = NetworkState::zeros(weights.n_neurons());
    let mut states = Vec::new();
    let mut targets = Vec::new();
    let phi = config.network.activation;
    let phi_in = config.network.input_activation.unwrap_or(phi);
    for k in 0..steps {
        let t = k as f64 * dt;
        let x = probe(t);
        let current = neuron_input_split(&state, &x, weights, phi_in, phi)?;
        state = step_dynamics(&state, &current, leak, dt, config.network.integrator)?;
        if k >= skip {
            states.push(state.v().clone());
            targets.push(x);
        }
    }
    let n_samples = states.len();
    let s = DMatrix::from_fn(n_samples, weights.n_neurons(), |i, j| states[i][j]);
    let y = DMatrix::from_fn(n_samples, dim, |i, j| targets[i][j]);
    Ok((s, y))
}

/// Train from a config: prepare, run, checkpoint.
pub fn train(config: &RunConfig, sink: &mut dyn StepSink) -> Result<(TrainReport, Checkpoint)> {
    let mut exp = Experiment::prepare(config)?;
    let report = exp.train(sink)?;
    let ckpt = exp.checkpoint();
    Ok((report, ckpt))
}
