//! Neuron dynamics: the ferroelectric LIF (FeLIF), the discrete LIF used in
//! hidden layers, and a continuous leaky integrator.
//!
//! Every neuron that takes part in dual-timescale training implements
//! [`DualRateNeuron`]: an off-tape Euler step for the fine forward pass and
//! the identical step recorded on a [`Tape`] for the coarse gradient pass.
//! The two are written with the same floating-point operation order, so a
//! single recorded step reproduces the raw step bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{self, Tape, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error("numerical instability: non-finite state with dt = {dt:e} s")]
    Instability { dt: f64 },
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("cannot parse neuron parameters: {0}")]
    Parse(String),
}

/// Physical parameters of the FeLIF neuron, SI units throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeLifParams {
    /// Device area (m²).
    pub area: f64,
    /// FeCAP capacitance (F).
    pub c0: f64,
    /// Parasitic capacitance (F).
    pub c_par: f64,
    /// Saturation polarization (C/m²).
    pub p_s: f64,
    /// Activation field (V/m).
    pub e_a: f64,
    /// Elementary switching time (s).
    pub tau0: f64,
    /// Field exponent of the switching-time law.
    pub alpha_merz: f64,
    /// Ferroelectric thickness (m); sets E = V / d_fe.
    pub d_fe: f64,
    /// Leak resistance (Ω).
    pub r_leak: f64,
    /// Firing threshold (V).
    pub v_thr: f64,
    /// Refractory period (s).
    pub t_refr: f64,
}

impl Default for FeLifParams {
    fn default() -> Self {
        FeLifParams {
            area: 25e-12,
            c0: 0.558e-12,
            c_par: 15e-15,
            p_s: 0.22,
            e_a: 1.27e9,
            tau0: 0.1e-12,
            alpha_merz: 1.3,
            d_fe: 10e-9,
            r_leak: 1.75e11,
            v_thr: 3.388,
            t_refr: 0.0,
        }
    }
}

/// exp(-x) is exactly zero in f64 beyond this exponent.
const EXP_UNDERFLOW: f64 = 746.0;

impl FeLifParams {
    pub fn validate(&self) -> Result<(), NeuronError> {
        let positive = [
            ("area", self.area),
            ("c0", self.c0),
            ("c_par", self.c_par),
            ("p_s", self.p_s),
            ("e_a", self.e_a),
            ("tau0", self.tau0),
            ("d_fe", self.d_fe),
            ("r_leak", self.r_leak),
            ("v_thr", self.v_thr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NeuronError::InvalidParams(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.alpha_merz >= 1.0 && self.alpha_merz.is_finite()) {
            return Err(NeuronError::InvalidParams(format!(
                "alpha_merz must be >= 1, got {}",
                self.alpha_merz
            )));
        }
        if !(self.t_refr >= 0.0 && self.t_refr.is_finite()) {
            return Err(NeuronError::InvalidParams(format!(
                "t_refr must be non-negative, got {}",
                self.t_refr
            )));
        }
        Ok(())
    }

    pub fn c_total(&self) -> f64 {
        self.c0 + self.c_par
    }

    /// Parses the flat `key = value` format; missing keys keep their defaults.
    pub fn from_toml_str(s: &str) -> Result<Self, NeuronError> {
        let p: FeLifParams = toml::from_str(s).map_err(|e| NeuronError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat struct of floats serializes")
    }

    /// Polarization switching rate 1/τ(E) and its derivative with respect
    /// to E. Zero (with zero slope) at E = 0, where τ is infinite.
    pub fn switching_rate(&self, e: f64) -> (f64, f64) {
        let mag = e.abs();
        if mag == 0.0 {
            return (0.0, 0.0);
        }
        let x = (self.e_a / mag).powf(self.alpha_merz);
        if x > EXP_UNDERFLOW {
            return (0.0, 0.0);
        }
        let rate = (-x).exp() / self.tau0;
        (rate, rate * self.alpha_merz * x / e)
    }
}

/// Switching time constant τ(E) = τ0 · exp((E_a/|E|)^α); +∞ at E = 0.
pub fn tau_fe(e: f64, p: &FeLifParams) -> f64 {
    if e == 0.0 {
        return f64::INFINITY;
    }
    p.tau0 * (p.e_a / e.abs()).powf(p.alpha_merz).exp()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// State of a single FeLIF neuron.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NeuronState {
    /// Membrane potential (V).
    pub v_mem: f64,
    /// Ferroelectric polarization (C/m²).
    pub p: f64,
    /// Remaining refractory time (s).
    pub refr_remaining: f64,
}

/// Instantaneous time derivatives (dV/dt in V/s, dP/dt in C/m²/s).
pub fn felif_derivatives(s: &NeuronState, i_syn: f64, p: &FeLifParams) -> (f64, f64) {
    let e = s.v_mem / p.d_fe;
    let (rate, _) = p.switching_rate(e);
    let dp = (sign(e) * p.p_s - s.p) * rate;
    let i_p = p.area * dp;
    let i_leak = s.v_mem / p.r_leak;
    ((i_syn - i_leak - i_p) / p.c_total(), dp)
}

/// One explicit Euler step of (V, P) without threshold handling.
///
/// The polarization update is clamped to ±P_s, and the displacement current
/// charged to the membrane is the one implied by the clamped update, so an
/// overshooting step never removes more charge than the polarization took.
#[inline]
pub fn felif_integrate(v: f64, pol: f64, i_syn: f64, dt: f64, p: &FeLifParams) -> (f64, f64) {
    let e = v * (1.0 / p.d_fe);
    let (rate, _) = p.switching_rate(e);
    let target = sign(e) * p.p_s;
    let dpdt = (target - pol) * rate;
    let p_new = (pol + dpdt * dt).clamp(-p.p_s, p.p_s);
    let i_p = (p_new - pol) * (p.area / dt);
    let i_leak = v * (1.0 / p.r_leak);
    let v_new = v + ((i_syn - i_leak) - i_p) * (dt / p.c_total());
    (v_new, p_new)
}

/// Full single-neuron update: refractory hold, Euler step, threshold and
/// reset of both V and P.
pub fn felif_step(
    s: &NeuronState,
    i_syn: f64,
    dt: f64,
    p: &FeLifParams,
) -> Result<(NeuronState, bool), NeuronError> {
    if s.refr_remaining > 0.0 {
        let held = NeuronState {
            v_mem: 0.0,
            p: s.p,
            refr_remaining: (s.refr_remaining - dt).max(0.0),
        };
        return Ok((held, false));
    }
    let (v, pol) = felif_integrate(s.v_mem, s.p, i_syn, dt, p);
    if !(v.is_finite() && pol.is_finite()) {
        return Err(NeuronError::Instability { dt });
    }
    if v >= p.v_thr {
        let reset = NeuronState {
            v_mem: 0.0,
            p: 0.0,
            refr_remaining: p.t_refr,
        };
        return Ok((reset, true));
    }
    Ok((
        NeuronState {
            v_mem: v,
            p: pol,
            refr_remaining: 0.0,
        },
        false,
    ))
}

/// A sampled single-neuron trajectory under constant input.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub dt_sample: f64,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    /// Spike times (s).
    pub spikes: Vec<f64>,
}

/// Integrates a FeLIF neuron from rest under a constant current, sampling
/// the state every `every` steps (the first sample is the initial state).
pub fn simulate_constant_current(
    p: &FeLifParams,
    i_syn: f64,
    dt: f64,
    steps: usize,
    every: usize,
) -> Result<Trajectory, NeuronError> {
    let every = every.max(1);
    let mut s = NeuronState::default();
    let mut out = Trajectory {
        dt_sample: dt * every as f64,
        ..Default::default()
    };
    out.v.push(s.v_mem);
    out.p.push(s.p);
    for k in 1..=steps {
        let (next, spiked) = felif_step(&s, i_syn, dt, p)?;
        if spiked {
            out.spikes.push(k as f64 * dt);
        }
        s = next;
        if k % every == 0 {
            out.v.push(s.v_mem);
            out.p.push(s.p);
        }
    }
    Ok(out)
}

/// How a recorded FeLIF step differentiates the switching rate 1/τ(E).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateGradient {
    /// Exact derivative of the Euler step.
    #[default]
    Full,
    /// The rate enters the step as a constant: gradients still flow through
    /// the polarization and membrane terms, but not through dτ/dE. At a
    /// 1 ms step the exact term makes the membrane Jacobian strongly
    /// negative (≈ -16 per step while the polarization switches).
    Frozen,
}

impl std::str::FromStr for RateGradient {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(RateGradient::Full),
            "frozen" => Ok(RateGradient::Frozen),
            other => Err(format!("unknown rate gradient {other:?}")),
        }
    }
}

/// Tape-recorded FeLIF Euler step for a layer; bit-identical to
/// [`felif_integrate`] applied per neuron.
pub fn felif_integrate_tape(
    tape: &mut Tape,
    v: &Value,
    pol: &Value,
    i_syn: &Value,
    dt: f64,
    p: &FeLifParams,
) -> tape::Result<(Value, Value)> {
    felif_integrate_tape_with(tape, v, pol, i_syn, dt, p, RateGradient::Full)
}

/// [`felif_integrate_tape`] with a choice of rate gradient. Forward values
/// do not depend on `rg`.
pub fn felif_integrate_tape_with(
    tape: &mut Tape,
    v: &Value,
    pol: &Value,
    i_syn: &Value,
    dt: f64,
    p: &FeLifParams,
    rg: RateGradient,
) -> tape::Result<(Value, Value)> {
    let e = tape.scale(v, 1.0 / p.d_fe)?;
    let rate = tape.map("switching_rate", &e, |x| {
        let (r, slope) = p.switching_rate(x);
        match rg {
            RateGradient::Full => (r, slope),
            RateGradient::Frozen => (r, 0.0),
        }
    })?;
    let sgn = tape.sign(&e)?;
    let target = tape.scale(&sgn, p.p_s)?;
    let diff = tape.sub(&target, pol)?;
    let dpdt = tape.mul(&diff, &rate)?;
    let incr = tape.scale(&dpdt, dt)?;
    let p_raw = tape.add(pol, &incr)?;
    let p_new = tape.clamp(&p_raw, -p.p_s, p.p_s)?;
    let dp = tape.sub(&p_new, pol)?;
    let i_p = tape.scale(&dp, p.area / dt)?;
    let i_leak = tape.scale(v, 1.0 / p.r_leak)?;
    let net = tape.sub(i_syn, &i_leak)?;
    let net = tape.sub(&net, &i_p)?;
    let dv = tape.scale(&net, dt / p.c_total())?;
    let v_new = tape.add(v, &dv)?;
    Ok((v_new, p_new))
}

/// Reset behaviour of the discrete LIF after a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    /// Subtract the threshold.
    #[default]
    Soft,
    /// Set the membrane to zero.
    Hard,
}

/// Discrete-time LIF with an exponentially decaying synaptic current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifParams {
    /// Membrane decay per step.
    pub alpha: f64,
    /// Synaptic current decay per step.
    pub beta: f64,
    pub v_thr: f64,
    pub recurrent: bool,
    pub reset: ResetMode,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            alpha: 0.9,
            beta: 0.8,
            v_thr: 1.0,
            recurrent: false,
            reset: ResetMode::Soft,
        }
    }
}

impl LifParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        LifParams {
            alpha,
            beta,
            ..Default::default()
        }
    }

    /// Decays must lie in the open interval (0, 1).
    pub fn validate(&self) -> Result<(), NeuronError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(NeuronError::InvalidParams(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if !(self.v_thr > 0.0 && self.v_thr.is_finite()) {
            return Err(NeuronError::InvalidParams(format!(
                "v_thr must be positive, got {}",
                self.v_thr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LifState {
    pub v: f64,
    pub i: f64,
}

/// `i' = beta·i + input + rec`, `v' = alpha·v + i'`, spike at `v' >= v_thr`.
pub fn lif_step(s: &LifState, input: f64, p: &LifParams, rec_drive: f64) -> (LifState, bool) {
    let i = p.beta * s.i + input + rec_drive;
    let v = p.alpha * s.v + i;
    if v >= p.v_thr {
        let v = match p.reset {
            ResetMode::Soft => v - p.v_thr,
            ResetMode::Hard => 0.0,
        };
        (LifState { v, i }, true)
    } else {
        (LifState { v, i }, false)
    }
}

/// Tape-recorded LIF layer step. Returns `(v, i, spikes)` with the reset
/// already applied to `v`.
pub fn lif_step_tape(
    tape: &mut Tape,
    v: &Value,
    i: &Value,
    drive: &Value,
    p: &LifParams,
    slope: f64,
) -> tape::Result<(Value, Value, Value)> {
    let i_dec = tape.scale(i, p.beta)?;
    let i_new = tape.add(&i_dec, drive)?;
    let v_dec = tape.scale(v, p.alpha)?;
    let v_new = tape.add(&v_dec, &i_new)?;
    let spikes = tape.spike_sg(&v_new, p.v_thr, slope)?;
    let v_reset = match p.reset {
        ResetMode::Soft => {
            let sub = tape.scale(&spikes, p.v_thr)?;
            tape.sub(&v_new, &sub)?
        }
        ResetMode::Hard => {
            let keep = tape.sub(&Value::scalar(1.0), &spikes)?;
            tape.mul(&v_new, &keep)?
        }
    };
    Ok((v_reset, i_new, spikes))
}

/// A neuron with matched fine (off-tape) and coarse (on-tape) steppers.
///
/// State is a fixed number of per-neuron components; component 0 is the
/// membrane potential compared against [`DualRateNeuron::v_thr`].
pub trait DualRateNeuron {
    fn state_len(&self) -> usize;

    fn v_thr(&self) -> f64;

    /// One Euler step of a single neuron's state, in place.
    fn step_raw(&self, state: &mut [f64], input: f64, dt: f64);

    /// The same step recorded on a tape for a whole layer.
    fn step_tape(
        &self,
        tape: &mut Tape,
        state: &[Value],
        input: &Value,
        dt: f64,
    ) -> tape::Result<Vec<Value>>;
}

impl DualRateNeuron for FeLifParams {
    fn state_len(&self) -> usize {
        2
    }

    fn v_thr(&self) -> f64 {
        self.v_thr
    }

    fn step_raw(&self, state: &mut [f64], input: f64, dt: f64) {
        let (v, p) = felif_integrate(state[0], state[1], input, dt, self);
        state[0] = v;
        state[1] = p;
    }

    fn step_tape(
        &self,
        tape: &mut Tape,
        state: &[Value],
        input: &Value,
        dt: f64,
    ) -> tape::Result<Vec<Value>> {
        let (v, p) = felif_integrate_tape(tape, &state[0], &state[1], input, dt, self)?;
        Ok(vec![v, p])
    }
}

/// A FeLIF layer together with the gradient convention of its recorded
/// steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeLifNeuron {
    pub params: FeLifParams,
    pub rate_gradient: RateGradient,
}

impl DualRateNeuron for FeLifNeuron {
    fn state_len(&self) -> usize {
        2
    }

    fn v_thr(&self) -> f64 {
        self.params.v_thr
    }

    fn step_raw(&self, state: &mut [f64], input: f64, dt: f64) {
        self.params.step_raw(state, input, dt);
    }

    fn step_tape(
        &self,
        tape: &mut Tape,
        state: &[Value],
        input: &Value,
        dt: f64,
    ) -> tape::Result<Vec<Value>> {
        let (v, p) = felif_integrate_tape_with(
            tape,
            &state[0],
            &state[1],
            input,
            dt,
            &self.params,
            self.rate_gradient,
        )?;
        Ok(vec![v, p])
    }
}

/// Continuous leaky integrator `dv/dt = -v/tau + I`, integrated with Euler.
///
/// Linear, so its fine and coarse Jacobians have closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakyIntegrator {
    pub tau: f64,
    pub v_thr: f64,
}

impl DualRateNeuron for LeakyIntegrator {
    fn state_len(&self) -> usize {
        1
    }

    fn v_thr(&self) -> f64 {
        self.v_thr
    }

    fn step_raw(&self, state: &mut [f64], input: f64, dt: f64) {
        state[0] = state[0] * (1.0 - dt / self.tau) + input * dt;
    }

    fn step_tape(
        &self,
        tape: &mut Tape,
        state: &[Value],
        input: &Value,
        dt: f64,
    ) -> tape::Result<Vec<Value>> {
        let decayed = tape.scale(&state[0], 1.0 - dt / self.tau)?;
        let drive = tape.scale(input, dt)?;
        Ok(vec![tape.add(&decayed, &drive)?])
    }
}
