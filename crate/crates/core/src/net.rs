//! Feedforward pathway: leaky recurrent neuron dynamics, spike filtering,
//! and the linear decoder.
//!
//! The membrane equation integrated here is `v' = -alpha .* v + I`, with the
//! input current assembled from an encoder acting on the external input and
//! the recurrent weights acting on the network state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::jsonio::MatrixDoc;
use crate::{Error, Result};

/// Elementwise nonlinearity applied to presynaptic signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn map(self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Tanh => v.map(|x| x.tanh()),
            Activation::Identity => v.clone(),
        }
    }
}

/// Fixed-step integrator for the membrane equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// Membrane potentials of the recurrent network at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    v: DVector<f64>,
    t: f64,
}

impl NetworkState {
    pub fn new(v: DVector<f64>, t: f64) -> Result<Self> {
        if !v.iter().all(|x| x.is_finite()) || !t.is_finite() {
            return Err(Error::Overflow("non-finite network state".into()));
        }
        Ok(NetworkState { v, t })
    }

    /// All-zero state at t = 0.
    pub fn zeros(n: usize) -> Self {
        NetworkState {
            v: DVector::zeros(n),
            t: 0.0,
        }
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.len() == 0
    }
}

/// Per-neuron leak rates (1/s, non-negative).
#[derive(Debug, Clone, PartialEq)]
pub struct LeakSpec {
    alpha: DVector<f64>,
}

impl LeakSpec {
    pub fn per_neuron(alpha: DVector<f64>) -> Result<Self> {
        if !alpha.iter().all(|a| a.is_finite() && *a >= 0.0) {
            return Err(Error::Config(
                "leak rates must be finite and non-negative".into(),
            ));
        }
        Ok(LeakSpec { alpha })
    }

    /// Same leak rate for every neuron.
    pub fn uniform(n: usize, alpha: f64) -> Result<Self> {
        Self::per_neuron(DVector::from_element(n, alpha))
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.len() == 0
    }

    /// Leak rates restricted to the given indices.
    pub fn restrict(&self, idx: &[usize]) -> LeakSpec {
        LeakSpec {
            alpha: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.alpha[i])),
        }
    }
}

/// Encoder, recurrent, and decoder weights plus the fixed/plastic partition
/// of neuron indices.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    w_e: DMatrix<f64>,
    w_r: DMatrix<f64>,
    w_d: DMatrix<f64>,
    plastic_mask: Vec<bool>,
    seed: u64,
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

impl WeightSet {
    pub fn new(
        w_e: DMatrix<f64>,
        w_r: DMatrix<f64>,
        w_d: DMatrix<f64>,
        plastic_mask: Vec<bool>,
        seed: u64,
    ) -> Result<Self> {
        let n = w_r.nrows();
        if w_r.ncols() != n {
            return Err(Error::Config(format!(
                "recurrent matrix must be square, got {}x{}",
                w_r.nrows(),
                w_r.ncols()
            )));
        }
        if w_e.nrows() != n {
            return Err(Error::Config(format!(
                "encoder has {} rows but the network has {} neurons",
                w_e.nrows(),
                n
            )));
        }
        if w_d.ncols() != n {
            return Err(Error::Config(format!(
                "decoder has {} columns but the network has {} neurons",
                w_d.ncols(),
                n
            )));
        }
        if plastic_mask.len() != n {
            return Err(Error::Config(format!(
                "plastic mask has length {} but the network has {} neurons",
                plastic_mask.len(),
                n
            )));
        }
        if !(all_finite(&w_e) && all_finite(&w_r) && all_finite(&w_d)) {
            return Err(Error::Config("weights must be finite".into()));
        }
        Ok(WeightSet {
            w_e,
            w_r,
            w_d,
            plastic_mask,
            seed,
        })
    }

    pub fn encoder(&self) -> &DMatrix<f64> {
        &self.w_e
    }

    pub fn recurrent(&self) -> &DMatrix<f64> {
        &self.w_r
    }

    pub fn decoder(&self) -> &DMatrix<f64> {
        &self.w_d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_neurons(&self) -> usize {
        self.w_r.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_e.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_d.nrows()
    }

    pub fn plastic_mask(&self) -> &[bool] {
        &self.plastic_mask
    }

    /// Indices of plastic neurons, in ascending order.
    pub fn plastic_indices(&self) -> Vec<usize> {
        self.plastic_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }

    pub fn n_plastic(&self) -> usize {
        self.plastic_mask.iter().filter(|&&p| p).count()
    }

    /// Replace the decoder (used once after pre-training; shapes must match).
    pub fn set_decoder(&mut self, w_d: DMatrix<f64>) -> Result<()> {
        if w_d.ncols() != self.n_neurons() {
            return Err(Error::Config(format!(
                "decoder has {} columns but the network has {} neurons",
                w_d.ncols(),
                self.n_neurons()
            )));
        }
        if !all_finite(&w_d) {
            return Err(Error::Config("decoder must be finite".into()));
        }
        self.w_d = w_d;
        Ok(())
    }

    /// The plastic-by-plastic block of the recurrent matrix.
    pub fn plastic_block(&self) -> DMatrix<f64> {
        let idx = self.plastic_indices();
        DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.w_r[(idx[i], idx[j])])
    }

    /// Overwrite the plastic-by-plastic block; fixed rows/columns are
    /// untouchable through this interface.
    pub fn set_plastic_block(&mut self, block: &DMatrix<f64>) -> Result<()> {
        let idx = self.plastic_indices();
        if block.nrows() != idx.len() || block.ncols() != idx.len() {
            return Err(Error::Config(format!(
                "plastic block must be {}x{}, got {}x{}",
                idx.len(),
                idx.len(),
                block.nrows(),
                block.ncols()
            )));
        }
        if !all_finite(block) {
            return Err(Error::Config("plastic block must be finite".into()));
        }
        for (bi, &i) in idx.iter().enumerate() {
            for (bj, &j) in idx.iter().enumerate() {
                self.w_r[(i, j)] = block[(bi, bj)];
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WeightSetDoc::from(self)).expect("weight set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: WeightSetDoc = serde_json::from_str(s)?;
        doc.into_weight_set()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightSetDoc {
    seed: u64,
    plastic_mask: Vec<bool>,
    encoder: MatrixDoc,
    recurrent: MatrixDoc,
    decoder: MatrixDoc,
}

impl From<&WeightSet> for WeightSetDoc {
    fn from(w: &WeightSet) -> Self {
        WeightSetDoc {
            seed: w.seed,
            plastic_mask: w.plastic_mask.clone(),
            encoder: MatrixDoc::from_matrix(&w.w_e),
            recurrent: MatrixDoc::from_matrix(&w.w_r),
            decoder: MatrixDoc::from_matrix(&w.w_d),
        }
    }
}

impl WeightSetDoc {
    fn into_weight_set(self) -> Result<WeightSet> {
        WeightSet::new(
            self.encoder.to_matrix()?,
            self.recurrent.to_matrix()?,
            self.decoder.to_matrix()?,
            self.plastic_mask,
            self.seed,
        )
    }
}

/// Seeded weight initializer. The encoder is dense uniform(-1, 1) scaled by
/// `input_scale`; the recurrent matrix is sparse uniform(-1, 1) rescaled to
/// the requested spectral radius; the first `n_fixed` neuron indices form
/// the fixed subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightInit {
    pub n_neurons: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_fixed: usize,
    pub density: f64,
    pub spectral_radius: f64,
    pub input_scale: f64,
    pub seed: u64,
}

impl WeightInit {
    pub fn new(n_neurons: usize, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        WeightInit {
            n_neurons,
            input_dim,
            output_dim,
            n_fixed: 0,
            density: 0.1,
            spectral_radius: 0.9,
            input_scale: 1.0,
            seed,
        }
    }

    pub fn build(&self) -> Result<WeightSet> {
        if self.n_neurons == 0 {
            return Err(Error::Config("network needs at least one neuron".into()));
        }
        if self.n_fixed > self.n_neurons {
            return Err(Error::Config(format!(
                "{} fixed neurons exceeds network size {}",
                self.n_fixed, self.n_neurons
            )));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config("density must lie in [0, 1]".into()));
        }
        if self.spectral_radius <= 0.0 || !self.spectral_radius.is_finite() {
            return Err(Error::Config("spectral radius must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let w_e = DMatrix::from_fn(self.n_neurons, self.input_dim, |_, _| {
            rng.gen_range(-1.0..1.0) * self.input_scale
        });

        let mut w_r = DMatrix::from_fn(self.n_neurons, self.n_neurons, |_, _| {
            if rng.gen_bool(self.density) {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let rho = spectral_radius(&w_r);
        if rho < 1e-12 {
            return Err(Error::Config(
                "sparse recurrent draw has (near-)zero spectral radius; raise density".into(),
            ));
        }
        w_r *= self.spectral_radius / rho;

        let scale = 1.0 / (self.n_neurons as f64).sqrt();
        let w_d = DMatrix::from_fn(self.output_dim, self.n_neurons, |_, _| {
            rng.gen_range(-1.0..1.0) * scale
        });

        let mut mask = vec![true; self.n_neurons];
        for m in mask.iter_mut().take(self.n_fixed) {
            *m = false;
        }
        WeightSet::new(w_e, w_r, w_d, mask, self.seed)
    }
}

/// Largest eigenvalue magnitude, computed as `lim ||A^m||_F^(1/m)` by
/// repeated squaring with renormalization. 48 squarings put the neglected
/// factors below 1e-12 relative, and the method cannot stall the way QR
/// iteration can on sparse matrices.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut b = m.clone();
    let mut log_rho = 0.0;
    let mut weight = 1.0;
    for _ in 0..48 {
        let f = b.norm();
        if f == 0.0 || !f.is_finite() {
            return 0.0;
        }
        log_rho += weight * f.ln();
        b = (&b / f) * (&b / f);
        weight *= 0.5;
    }
    // Include the final factor ||B_k||^(1/2^k).
    let f = b.norm();
    if f > 0.0 {
        log_rho += weight * f.ln();
    }
    log_rho.exp()
}

/// One neuron's spike events plus the exponential filter time constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    spike_times: Vec<f64>,
    tau: f64,
}

impl SpikeTrain {
    pub fn new(spike_times: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(
                "filter time constant must be positive".into(),
            ));
        }
        if !spike_times.iter().all(|s| s.is_finite()) {
            return Err(Error::Config("spike times must be finite".into()));
        }
        if spike_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "spike times must be strictly increasing".into(),
            ));
        }
        Ok(SpikeTrain { spike_times, tau })
    }

    pub fn spike_times(&self) -> &[f64] {
        &self.spike_times
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Input current `I = W_E phi(x) + W_r phi(v)`.
pub fn neuron_input(
    state: &NetworkState,
    x: &DVector<f64>,
    w: &WeightSet,
    phi: Activation,
) -> Result<DVector<f64>> {
    neuron_input_split(state, x, w, phi, phi)
}

/// Same as [`neuron_input`] but with a separate nonlinearity on the external
/// input, for configurations that feed the raw input into the encoder.
pub fn neuron_input_split(
    state: &NetworkState,
    x: &DVector<f64>,
    w: &WeightSet,
    phi_input: Activation,
    phi_rec: Activation,
) -> Result<DVector<f64>> {
    if x.len() != w.input_dim() {
        return Err(Error::Config(format!(
            "input has length {} but the encoder expects {}",
            x.len(),
            w.input_dim()
        )));
    }
    if state.len() != w.n_neurons() {
        return Err(Error::Config(format!(
            "state has length {} but the network has {} neurons",
            state.len(),
            w.n_neurons()
        )));
    }
    let current = w.encoder() * phi_input.map(x) + w.recurrent() * phi_rec.map(state.v());
    if !current.iter().all(|c| c.is_finite()) {
        return Err(Error::Overflow("non-finite input current".into()));
    }
    Ok(current)
}

fn membrane_rhs(v: &DVector<f64>, input: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    let mut dv = input.clone();
    for i in 0..v.len() {
        dv[i] -= alpha[i] * v[i];
    }
    dv
}

/// Advance `v' = -alpha .* v + I` by one step, holding the input current
/// constant over the step.
pub fn step_dynamics(
    state: &NetworkState,
    input: &DVector<f64>,
    leak: &LeakSpec,
    dt: f64,
    method: Integrator,
) -> Result<NetworkState> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::Argument(format!(
            "dt must be non-negative, got {dt}"
        )));
    }
    let n = state.len();
    if input.len() != n || leak.len() != n {
        return Err(Error::Config(format!(
            "state/input/leak lengths disagree: {} / {} / {}",
            n,
            input.len(),
            leak.len()
        )));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let alpha = leak.alpha();
    let v = state.v();
    let next = match method {
        Integrator::Euler => v + membrane_rhs(v, input, alpha) * dt,
        Integrator::Rk4 => {
            let k1 = membrane_rhs(v, input, alpha);
            let k2 = membrane_rhs(&(v + &k1 * (dt / 2.0)), input, alpha);
            let k3 = membrane_rhs(&(v + &k2 * (dt / 2.0)), input, alpha);
            let k4 = membrane_rhs(&(v + &k3 * dt), input, alpha);
            v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    };
    if !next.iter().all(|x| x.is_finite()) {
        return Err(Error::Overflow(format!(
            "membrane state became non-finite at t = {}",
            state.t() + dt
        )));
    }
    NetworkState::new(next, state.t() + dt)
}

/// Filtered spike activity `q(t)`: each spike at `s <= t` contributes
/// `exp(-(t - s)/tau) / tau`.
pub fn filter_spikes(train: &SpikeTrain, t: f64) -> f64 {
    let tau = train.tau();
    train
        .spike_times()
        .iter()
        .take_while(|&&s| s <= t)
        .map(|&s| (-(t - s) / tau).exp() / tau)
        .sum()
}

/// Linear decoder `y_hat = W_D v`.
pub fn decode(v: &DVector<f64>, w: &WeightSet) -> Result<DVector<f64>> {
    if v.len() != w.n_neurons() {
        return Err(Error::Config(format!(
            "state has length {} but the decoder expects {}",
            v.len(),
            w.n_neurons()
        )));
    }
    Ok(w.decoder() * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn weights_2x2(w_e: [f64; 4], w_r: [f64; 4]) -> WeightSet {
        WeightSet::new(
            DMatrix::from_row_slice(2, 2, &w_e),
            DMatrix::from_row_slice(2, 2, &w_r),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            vec![true, true],
            0,
        )
        .unwrap()
    }

    #[test]
    fn input_is_zero_at_the_origin() {
        let w = weights_2x2([0.3, -0.2, 0.1, 0.5], [0.2, 0.1, -0.4, 0.3]);
        let state = NetworkState::zeros(2);
        let x = DVector::zeros(2);
        let current = neuron_input(&state, &x, &w, Activation::Tanh).unwrap();
        assert_eq!(current, DVector::zeros(2));
    }

    #[test]
    fn identity_encoder_passes_input_through() {
        let w = weights_2x2([1.0, 0.0, 0.0, 1.0], [0.0; 4]);
        let state = NetworkState::zeros(2);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let current = neuron_input(&state, &x, &w, Activation::Identity).unwrap();
        assert_eq!(current, x);
    }

    #[test]
    fn recurrent_input_applies_tanh_to_state() {
        let w = weights_2x2([0.0; 4], [0.0, 1.0, 1.0, 0.0]);
        let state = NetworkState::new(DVector::from_vec(vec![1.0, -1.0]), 0.0).unwrap();
        let x = DVector::zeros(2);
        let current = neuron_input(&state, &x, &w, Activation::Tanh).unwrap();
        assert_relative_eq!(current[0], (-1.0f64).tanh(), epsilon = 1e-12);
        assert_relative_eq!(current[1], 1.0f64.tanh(), epsilon = 1e-12);
    }

    #[test]
    fn input_shape_mismatch_is_a_config_error() {
        let w = weights_2x2([0.0; 4], [0.0; 4]);
        let state = NetworkState::zeros(2);
        let x = DVector::zeros(3);
        assert!(matches!(
            neuron_input(&state, &x, &w, Activation::Tanh),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_width_step_is_identity() {
        let state = NetworkState::new(DVector::from_vec(vec![0.3, -0.7]), 1.5).unwrap();
        let leak = LeakSpec::uniform(2, 1.0).unwrap();
        let input = DVector::from_vec(vec![0.1, 0.2]);
        let next = step_dynamics(&state, &input, &leak, 0.0, Integrator::Rk4).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn euler_step_matches_hand_rule() {
        let state = NetworkState::new(DVector::from_element(1, 1.0), 0.0).unwrap();
        let leak = LeakSpec::uniform(1, 1.0).unwrap();
        let input = DVector::zeros(1);
        let next = step_dynamics(&state, &input, &leak, 0.1, Integrator::Euler).unwrap();
        assert_relative_eq!(next.v()[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(next.t(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn rk4_tracks_exponential_decay() {
        let mut state = NetworkState::new(DVector::from_element(1, 1.0), 0.0).unwrap();
        let leak = LeakSpec::uniform(1, 1.0).unwrap();
        let input = DVector::zeros(1);
        for _ in 0..100 {
            state = step_dynamics(&state, &input, &leak, 0.01, Integrator::Rk4).unwrap();
        }
        assert_relative_eq!(state.v()[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn negative_dt_is_an_argument_error() {
        let state = NetworkState::zeros(1);
        let leak = LeakSpec::uniform(1, 1.0).unwrap();
        let input = DVector::zeros(1);
        assert!(matches!(
            step_dynamics(&state, &input, &leak, -0.1, Integrator::Euler),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn integrator_order_ratios() {
        // v' = -v from v(0) = 1; global error at t = 1 against e^{-1}.
        let exact = (-1.0f64).exp();
        let run = |dt: f64, method: Integrator| {
            let mut state = NetworkState::new(DVector::from_element(1, 1.0), 0.0).unwrap();
            let leak = LeakSpec::uniform(1, 1.0).unwrap();
            let input = DVector::zeros(1);
            let steps = (1.0 / dt).round() as usize;
            for _ in 0..steps {
                state = step_dynamics(&state, &input, &leak, dt, method).unwrap();
            }
            (state.v()[0] - exact).abs()
        };
        let euler_ratio = run(0.01, Integrator::Euler) / run(0.005, Integrator::Euler);
        let rk4_ratio = run(0.1, Integrator::Rk4) / run(0.05, Integrator::Rk4);
        assert!(
            (1.6..=2.4).contains(&euler_ratio),
            "euler halving ratio {euler_ratio}"
        );
        assert!(
            (10.0..=22.0).contains(&rk4_ratio),
            "rk4 halving ratio {rk4_ratio}"
        );
    }

    #[test]
    fn empty_spike_train_filters_to_zero() {
        let train = SpikeTrain::new(vec![], 1.0).unwrap();
        assert_eq!(filter_spikes(&train, 5.0), 0.0);
    }

    #[test]
    fn single_spike_impulse_response() {
        let train = SpikeTrain::new(vec![0.0], 1.0).unwrap();
        assert_relative_eq!(filter_spikes(&train, 1.0), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn two_spikes_superpose() {
        let train = SpikeTrain::new(vec![0.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(
            filter_spikes(&train, 1.0),
            (-1.0f64).exp() + 1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn future_spikes_do_not_contribute() {
        let train = SpikeTrain::new(vec![0.0, 2.0], 1.0).unwrap();
        assert_relative_eq!(filter_spikes(&train, 1.0), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn filter_decays_exactly_between_spikes() {
        let train = SpikeTrain::new(vec![0.0, 0.3, 0.9], 0.7).unwrap();
        let (t1, t2) = (1.2, 2.5);
        let q1 = filter_spikes(&train, t1);
        let q2 = filter_spikes(&train, t2);
        assert_relative_eq!(q2, q1 * (-(t2 - t1) / 0.7).exp(), epsilon = 1e-12);
    }

    #[test]
    fn unsorted_spike_train_is_rejected() {
        assert!(SpikeTrain::new(vec![1.0, 0.5], 1.0).is_err());
        assert!(SpikeTrain::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(SpikeTrain::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn identity_decoder_returns_state() {
        let w = WeightSet::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            vec![true, true],
            0,
        )
        .unwrap();
        let v = DVector::from_vec(vec![0.4, -1.2]);
        assert_eq!(decode(&v, &w).unwrap(), v);
    }

    #[test]
    fn row_decoder_sums_components() {
        let w = weights_2x2([0.0; 4], [0.0; 4]);
        let v = DVector::from_vec(vec![2.0, 3.0]);
        let y = decode(&v, &w).unwrap();
        assert_eq!(y.len(), 1);
        assert_relative_eq!(y[0], 5.0);
    }

    #[test]
    fn decode_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = WeightSet::new(
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 3),
            DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0)),
            vec![true; 3],
            0,
        )
        .unwrap();
        for _ in 0..20 {
            let v1 = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let v2 = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let lhs = decode(&(&v1 * a + &v2 * b), &w).unwrap();
            let rhs = decode(&v1, &w).unwrap() * a + decode(&v2, &w).unwrap() * b;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn filter_is_linear_in_the_train_and_nonnegative() {
        // Filtering the union of two trains equals the sum of filtering
        // each train alone.
        let t1 = SpikeTrain::new(vec![0.1, 0.7, 1.9], 0.5).unwrap();
        let t2 = SpikeTrain::new(vec![0.4, 1.2], 0.5).unwrap();
        let union = SpikeTrain::new(vec![0.1, 0.4, 0.7, 1.2, 1.9], 0.5).unwrap();
        for k in 0..30 {
            let t = 0.1 * k as f64;
            let combined = filter_spikes(&union, t);
            assert_relative_eq!(
                combined,
                filter_spikes(&t1, t) + filter_spikes(&t2, t),
                epsilon = 1e-14
            );
            assert!(combined >= 0.0);
        }
    }

    #[test]
    fn leak_only_norm_is_nonincreasing_and_analytic() {
        let alpha = 2.0;
        let mut state = NetworkState::new(DVector::from_vec(vec![1.0, -0.5]), 0.0).unwrap();
        let leak = LeakSpec::uniform(2, alpha).unwrap();
        let input = DVector::zeros(2);
        let dt = 0.01 / alpha;
        let mut prev_norm = state.v().norm();
        for k in 1..=400 {
            state = step_dynamics(&state, &input, &leak, dt, Integrator::Rk4).unwrap();
            let norm = state.v().norm();
            assert!(norm <= prev_norm + 1e-15);
            prev_norm = norm;
            let expected = (-alpha * (k as f64) * dt).exp();
            assert_relative_eq!(state.v()[0], expected, max_relative = 1e-5);
            assert_relative_eq!(state.v()[1], -0.5 * expected, max_relative = 1e-5);
        }
    }

    #[test]
    fn spectral_radius_known_cases() {
        // Diagonal: radius is the largest |entry|.
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        assert_relative_eq!(spectral_radius(&d), 2.0, max_relative = 1e-10);
        // Rotation scaled by r has both eigenvalues at |r|.
        let r = 0.7;
        let th: f64 = 0.3;
        let rot = DMatrix::from_row_slice(
            2,
            2,
            &[r * th.cos(), -r * th.sin(), r * th.sin(), r * th.cos()],
        );
        assert_relative_eq!(spectral_radius(&rot), r, max_relative = 1e-10);
        // Nilpotent: radius zero.
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(spectral_radius(&nil), 0.0);
        // Triangular: radius is the dominant diagonal entry.
        let tri = DMatrix::from_row_slice(3, 3, &[0.5, 3.0, -2.0, 0.0, -0.9, 4.0, 0.0, 0.0, 0.2]);
        assert_relative_eq!(spectral_radius(&tri), 0.9, max_relative = 1e-10);
    }

    #[test]
    fn weight_init_hits_requested_spectral_radius() {
        let init = WeightInit {
            density: 0.2,
            ..WeightInit::new(50, 2, 1, 7)
        };
        let w = init.build().unwrap();
        assert_relative_eq!(spectral_radius(w.recurrent()), 0.9, epsilon = 1e-8);
        assert_eq!(w.n_plastic(), 50);
    }

    #[test]
    fn weight_init_is_deterministic() {
        let init = WeightInit::new(20, 3, 2, 42);
        assert_eq!(init.build().unwrap(), init.build().unwrap());
    }

    #[test]
    fn fixed_prefix_is_respected() {
        let init = WeightInit {
            n_fixed: 3,
            density: 0.3,
            ..WeightInit::new(10, 1, 1, 5)
        };
        let w = init.build().unwrap();
        assert_eq!(w.plastic_indices(), vec![3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn plastic_block_round_trip_leaves_fixed_entries() {
        let init = WeightInit {
            n_fixed: 2,
            density: 0.5,
            ..WeightInit::new(6, 1, 1, 11)
        };
        let mut w = init.build().unwrap();
        let before = w.recurrent().clone();
        let mut block = w.plastic_block();
        block.fill(0.25);
        w.set_plastic_block(&block).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i < 2 || j < 2 {
                    assert_eq!(w.recurrent()[(i, j)], before[(i, j)]);
                } else {
                    assert_eq!(w.recurrent()[(i, j)], 0.25);
                }
            }
        }
    }

    #[test]
    fn weight_set_json_round_trip() {
        let w = WeightInit::new(8, 2, 1, 99).build().unwrap();
        let json = w.to_json();
        let back = WeightSet::from_json(&json).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.seed(), 99);
    }
}
