//! Dual-timescale training.
//!
//! A coarse step of a [`DualRateNeuron`] layer in [`Mode::Bruno`] runs `S`
//! fine Euler steps off the tape, records a single coarse Euler step from
//! the same starting state, and then swaps the recorded values for the fine
//! result while keeping the coarse step's Jacobian:
//!
//! ```text
//! s_t = s_ms + detach(s_us - s_ms)
//! ```
//!
//! [`Mode::Vanilla`] records all `S` fine steps instead. Both modes then
//! threshold the membrane with a surrogate-gradient spike and reset the
//! whole state through the multiplicative gate `(1 - spike) * s_t`.
//!
//! With `S = 1` both modes record exactly the same operations.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netdata::{Dataset, Network, OutputKind, SpikeEventStream, Split};
use crate::neurons::{lif_step_tape, DualRateNeuron, LifParams};
use crate::quant::{quantize_ste, stream_rng, QuantError, QuantSpec, Rounding};
use crate::tape::{Gradients, NodeId, Tape, TapeError, Value, NODE_HEADER_BYTES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("gradient explosion at node {node}")]
    GradientExplosion { node: NodeId },
    #[error("tape memory budget of {budget} bytes exceeded")]
    OutOfMemory { budget: usize },
    #[error(transparent)]
    Tape(TapeError),
}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        match e {
            TapeError::GradientExplosion { node } => TrainError::GradientExplosion { node },
            TapeError::BudgetExceeded { budget } => TrainError::OutOfMemory { budget },
            TapeError::NonFinite { op } => {
                TrainError::Instability(format!("non-finite forward value in {op}"))
            }
            other => TrainError::Tape(other),
        }
    }
}

impl From<QuantError> for TrainError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Tape(t) => t.into(),
            other => TrainError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Bruno,
    Vanilla,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bruno" => Ok(Mode::Bruno),
            "vanilla" => Ok(Mode::Vanilla),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Bruno => "bruno",
            Mode::Vanilla => "vanilla",
        })
    }
}

/// Time discretization shared by every dual-rate layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualRate {
    pub mode: Mode,
    pub dt_fine: f64,
    pub dt_coarse: f64,
    pub substeps: usize,
    /// Surrogate slope `k` of the spike nonlinearity.
    pub slope: f64,
}

impl DualRate {
    pub fn new(mode: Mode, dt_fine: f64, substeps: usize) -> Self {
        DualRate {
            mode,
            dt_fine,
            dt_coarse: dt_fine * substeps as f64,
            substeps,
            slope: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(TrainError::Config("substeps must be at least 1".into()));
        }
        if !(self.dt_fine > 0.0 && self.dt_fine.is_finite()) {
            return Err(TrainError::Config("dt_fine must be positive".into()));
        }
        let product = self.dt_fine * self.substeps as f64;
        if (product - self.dt_coarse).abs() > 1e-12 * self.dt_coarse {
            return Err(TrainError::Config(format!(
                "dt_coarse {} differs from substeps x dt_fine = {product}",
                self.dt_coarse
            )));
        }
        if !(self.slope > 0.0) {
            return Err(TrainError::Config("surrogate slope must be positive".into()));
        }
        Ok(())
    }
}

fn spike_and_reset<N: DualRateNeuron>(
    tape: &mut Tape,
    neuron: &N,
    s_t: Vec<Value>,
    slope: f64,
) -> Result<(Vec<Value>, Value)> {
    let spikes = tape.spike_sg(&s_t[0], neuron.v_thr(), slope)?;
    let keep = tape.sub(&Value::scalar(1.0), &spikes)?;
    let reset = s_t
        .iter()
        .map(|c| tape.mul(c, &keep))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((reset, spikes))
}

/// Integrates every neuron of a layer for `substeps` fine steps, off tape.
pub fn fine_steps<N: DualRateNeuron>(
    neuron: &N,
    state: &[Vec<f64>],
    input: &[f64],
    dt: f64,
    substeps: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = neuron.state_len();
    let mut out: Vec<Vec<f64>> = state.to_vec();
    let mut s = vec![0.0; k];
    for (j, &i_j) in input.iter().enumerate() {
        for (c, comp) in state.iter().enumerate() {
            s[c] = comp[j];
        }
        for _ in 0..substeps {
            neuron.step_raw(&mut s, i_j, dt);
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::Instability(format!(
                "fine integration of neuron {j} diverged at dt = {dt:e} s"
            )));
        }
        for (c, comp) in out.iter_mut().enumerate() {
            comp[j] = s[c];
        }
    }
    Ok(out)
}

/// One coarse step of a dual-rate layer in BRUNO mode.
///
/// `state` holds one vector per state component (component 0 is the
/// membrane), `input` the drive held constant over the coarse step. Returns
/// the reset state and the spikes.
pub fn bruno_step<N: DualRateNeuron>(
    tape: &mut Tape,
    neuron: &N,
    state: &[Value],
    input: &Value,
    dr: &DualRate,
) -> Result<(Vec<Value>, Value)> {
    if dr.substeps == 1 {
        return vanilla_step(tape, neuron, state, input, dr);
    }
    let data: Vec<Vec<f64>> = state.iter().map(|c| c.data().to_vec()).collect();
    let n = data[0].len();
    let drive = broadcast_input(input, n);
    let fine = fine_steps(neuron, &data, &drive, dr.dt_fine, dr.substeps)?;
    let coarse = neuron.step_tape(tape, state, input, dr.dt_coarse)?;
    let s_t = coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| tape.pass_through(c, f))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    spike_and_reset(tape, neuron, s_t, dr.slope)
}

/// One coarse step with every fine step recorded on the tape.
pub fn vanilla_step<N: DualRateNeuron>(
    tape: &mut Tape,
    neuron: &N,
    state: &[Value],
    input: &Value,
    dr: &DualRate,
) -> Result<(Vec<Value>, Value)> {
    let mut s = state.to_vec();
    for _ in 0..dr.substeps {
        s = neuron.step_tape(tape, &s, input, dr.dt_fine)?;
    }
    spike_and_reset(tape, neuron, s, dr.slope)
}

pub fn dual_rate_step<N: DualRateNeuron>(
    tape: &mut Tape,
    neuron: &N,
    state: &[Value],
    input: &Value,
    dr: &DualRate,
) -> Result<(Vec<Value>, Value)> {
    match dr.mode {
        Mode::Bruno => bruno_step(tape, neuron, state, input, dr),
        Mode::Vanilla => vanilla_step(tape, neuron, state, input, dr),
    }
}

fn broadcast_input(input: &Value, n: usize) -> Vec<f64> {
    if input.len() == 1 {
        vec![input.data()[0]; n]
    } else {
        input.data().to_vec()
    }
}

/// Network weights as they enter one forward pass: tape leaves plus the
/// (possibly quantized) values the dynamics see.
#[derive(Debug, Clone)]
pub struct TapeWeights {
    pub leaves: Vec<Value>,
    pub used: Vec<Value>,
}

impl TapeWeights {
    /// Registers the network's parameters on `tape` and quantizes them with
    /// `spec`, drawing rounding noise from `stream`.
    pub fn record(tape: &mut Tape, net: &Network, spec: &QuantSpec, stream: u64) -> Result<Self> {
        let mut rng = stream_rng(spec.seed, stream);
        let mut leaves = Vec::new();
        let mut used = Vec::new();
        for w in net.params() {
            let leaf = tape.leaf(w.to_vec())?;
            let q = quantize_ste(tape, &leaf, spec, &mut rng)?;
            leaves.push(leaf);
            used.push(q.value);
        }
        Ok(TapeWeights { leaves, used })
    }

    fn w_in(&self) -> &Value {
        &self.used[0]
    }

    fn w_rec(&self) -> Option<&Value> {
        (self.used.len() == 3).then(|| &self.used[1])
    }

    fn w_out(&self) -> &Value {
        self.used.last().expect("at least two weight tensors")
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.leaves.iter().map(|l| grads.wrt(l)).collect()
    }
}

/// Per-sample forward result.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Output spikes summed over time, one entry per class.
    pub counts: Value,
    /// Hidden spikes summed over time and neurons.
    pub hidden_spikes: f64,
}

/// Runs the network over `steps` coarse steps of one sample.
///
/// Events are binned into coarse windows; a longer sample is truncated and
/// a shorter one zero-padded.
pub fn forward_sequence(
    tape: &mut Tape,
    net: &Network,
    weights: &TapeWeights,
    sample: &SpikeEventStream,
    dr: &DualRate,
    steps: usize,
) -> Result<SampleOutput> {
    let window_us = (dr.dt_coarse * 1e6).round().max(1.0) as u64;
    let inputs = sample.binned(window_us, steps);
    forward_binned(tape, net, weights, &inputs, dr)
}

/// [`forward_sequence`] on pre-binned inputs, one vector per coarse step.
pub fn forward_binned(
    tape: &mut Tape,
    net: &Network,
    weights: &TapeWeights,
    inputs: &[Vec<f64>],
    dr: &DualRate,
) -> Result<SampleOutput> {
    let spec = &net.spec;
    let (nh, no, ni) = (spec.hidden, spec.outputs, spec.inputs);
    let hid: &LifParams = &spec.hidden_lif;
    let mut hv = Value::zeros(nh);
    let mut hi = Value::zeros(nh);
    let mut hs = Value::zeros(nh);
    let mut ov = Value::zeros(no);
    let mut oi = Value::zeros(no);
    let mut felif_state = vec![Value::zeros(no), Value::zeros(no)];
    let mut counts = Value::zeros(no);
    let mut hidden_spikes = 0.0;

    for x in inputs {
        if x.len() != ni {
            return Err(TrainError::Config(format!(
                "input has {} channels, network expects {ni}",
                x.len()
            )));
        }
        let x = Value::constant(x.clone());
        let mut drive = tape.matvec(weights.w_in(), nh, ni, &x)?;
        if let Some(w_rec) = weights.w_rec() {
            let rec = tape.matvec(w_rec, nh, nh, &hs)?;
            drive = tape.add(&drive, &rec)?;
        }
        let (v, i, s) = lif_step_tape(tape, &hv, &hi, &drive, hid, dr.slope)?;
        hidden_spikes += s.data().iter().sum::<f64>();
        (hv, hi, hs) = (v, i, s);

        let out_drive = tape.matvec(weights.w_out(), no, nh, &hs)?;
        let spikes = match spec.output_kind {
            OutputKind::Lif => {
                let (v, i, s) = lif_step_tape(tape, &ov, &oi, &out_drive, &spec.output_lif, dr.slope)?;
                (ov, oi) = (v, i);
                s
            }
            OutputKind::Felif => {
                let current = tape.scale(&out_drive, spec.felif_current)?;
                let neuron = spec.felif_neuron();
                let (state, s) = dual_rate_step(tape, &neuron, &felif_state, &current, dr)?;
                felif_state = state;
                s
            }
        };
        counts = tape.add(&counts, &spikes)?;
    }
    Ok(SampleOutput {
        counts,
        hidden_spikes,
    })
}

/// Softmax cross-entropy of the spike counts against `label`.
pub fn cross_entropy(tape: &mut Tape, counts: &Value, label: usize) -> Result<Value> {
    let n = counts.len();
    if label >= n {
        return Err(TrainError::Config(format!("label {label} with {n} outputs")));
    }
    let m = counts.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = tape.offset(counts, -m)?;
    let e = tape.exp(&shifted)?;
    let z = tape.sum(&e)?;
    let lse = tape.ln(&z)?;
    let mut onehot = vec![0.0; n];
    onehot[label] = 1.0;
    let picked = tape.mul(&shifted, &Value::constant(onehot))?;
    let picked = tape.sum(&picked)?;
    Ok(tape.sub(&lse, &picked)?)
}

/// Index of the largest count, `None` when the maximum is shared.
pub fn predict(counts: &[f64]) -> Option<usize> {
    let m = counts.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut hits = counts.iter().enumerate().filter(|(_, &c)| c == m);
    let first = hits.next()?.0;
    hits.next().is_none().then_some(first)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &g)) in p.iter_mut().zip(g).enumerate() {
                let m = beta1 * self.m[k][j] + (1.0 - beta1) * g;
                let v = beta2 * self.v[k][j] + (1.0 - beta2) * g * g;
                self.m[k][j] = m;
                self.v[k][j] = v;
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let peak = grads
        .iter()
        .flatten()
        .fold(0.0f64, |a, g| a.max(g.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let norm = peak
        * grads
            .iter()
            .flatten()
            .map(|g| (g / peak).powi(2))
            .sum::<f64>()
            .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= f);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dt_fine: f64,
    pub dt_coarse: f64,
    pub substeps: usize,
    /// Sequence length in coarse steps.
    pub steps: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub surrogate_slope: f64,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: Option<f64>,
    /// Reuse the same rounding draws for every minibatch.
    pub freeze_rounding: bool,
    pub shuffle: bool,
    /// Accounted tape memory limit in bytes.
    pub tape_budget: Option<usize>,
    /// Evaluate validation/test accuracy after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Bruno,
            dt_fine: 1e-6,
            dt_coarse: 1e-3,
            substeps: 1000,
            steps: 200,
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 16,
            seed: 0,
            surrogate_slope: 10.0,
            grad_clip: None,
            freeze_rounding: false,
            shuffle: true,
            tape_budget: None,
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn dual_rate(&self) -> DualRate {
        DualRate {
            mode: self.mode,
            dt_fine: self.dt_fine,
            dt_coarse: self.dt_coarse,
            substeps: self.substeps,
            slope: self.surrogate_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dual_rate().validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch_size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(TrainError::Config("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config("invalid Adam hyperparameters".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
    pub max_grad_norm: f64,
    pub fwd_s: f64,
    pub bwd_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Exploded { epoch: usize, node: usize },
    Unstable { epoch: usize, detail: String },
    OutOfMemory { epoch: usize, budget: usize },
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }

    fn from_error(epoch: usize, e: TrainError) -> Self {
        match e {
            TrainError::GradientExplosion { node } => RunStatus::Exploded {
                epoch,
                node: node.0,
            },
            TrainError::OutOfMemory { budget } => RunStatus::OutOfMemory { epoch, budget },
            other => RunStatus::Unstable {
                epoch,
                detail: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub status: RunStatus,
    pub epochs_completed: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
    pub wall_s: f64,
}

/// Configuration and metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub network: crate::netdata::NetworkSpec,
    pub epochs: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

impl TrainRun {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> TrainRun {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.fwd_s = 0.0;
            e.bwd_s = 0.0;
        }
        r.summary.wall_s = 0.0;
        r
    }

    /// One JSON object per epoch followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let mut v = serde_json::to_value(e).expect("serializable");
            v["kind"] = "epoch".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut v = serde_json::to_value(&self.summary).expect("serializable");
        v["kind"] = "summary".into();
        v["config"] = serde_json::to_value(&self.config).expect("serializable");
        v["network"] = serde_json::to_value(&self.network).expect("serializable");
        out.push_str(&v.to_string());
        out.push('\n');
        out
    }
}

/// Weights and optimizer state at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub network: Network,
    pub adam: Adam,
    /// Level export of each weight tensor when the network is quantized.
    pub quantized: Vec<crate::quant::QuantizedExport>,
}

impl Checkpoint {
    pub fn new(epoch: usize, network: &Network, adam: &Adam) -> Self {
        let quantized = match network.spec.quant.n_bits {
            None => Vec::new(),
            Some(n) => {
                let s = &network.spec;
                let mut shapes = vec![(s.hidden, s.inputs)];
                if network.w_rec.is_some() {
                    shapes.push((s.hidden, s.hidden));
                }
                shapes.push((s.outputs, s.hidden));
                network
                    .params()
                    .into_iter()
                    .zip(shapes)
                    .map(|(w, (r, c))| crate::quant::QuantizedExport::from_weights(w, r, c, n))
                    .collect()
            }
        };
        Checkpoint {
            epoch,
            network: network.clone(),
            adam: adam.clone(),
            quantized,
        }
    }
}

const QUANT_STREAM: u64 = 1 << 32;
const EVAL_STREAM: u64 = 3 << 32;
const SHUFFLE_STREAM: u64 = 4 << 32;

/// Result of one minibatch: summed sample losses (in sample order), correct
/// predictions and the gradient per parameter tensor.
pub struct BatchResult {
    pub losses: Vec<f64>,
    /// Output spikes of the whole batch.
    pub output_spikes: f64,
    pub correct: usize,
    pub grads: Vec<Vec<f64>>,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
    pub fwd_s: f64,
    pub bwd_s: f64,
}

/// Forward and backward pass of one minibatch on a fresh tape. The loss is
/// the mean cross-entropy over the batch.
pub fn batch_gradients(
    net: &Network,
    batch: &[&SpikeEventStream],
    cfg: &TrainConfig,
    quant_stream: u64,
) -> Result<BatchResult> {
    let dr = cfg.dual_rate();
    let mut tape = match cfg.tape_budget {
        Some(b) => Tape::with_budget(b),
        None => Tape::new(),
    };
    let t0 = Instant::now();
    let weights = TapeWeights::record(&mut tape, net, &net.spec.quant, quant_stream)?;
    let mut total: Option<Value> = None;
    let mut losses = Vec::with_capacity(batch.len());
    let mut correct = 0;
    let mut output_spikes = 0.0;
    for sample in batch {
        let out = forward_sequence(&mut tape, net, &weights, sample, &dr, cfg.steps)?;
        output_spikes += out.counts.data().iter().sum::<f64>();
        if predict(out.counts.data()) == Some(sample.label) {
            correct += 1;
        }
        let loss = cross_entropy(&mut tape, &out.counts, sample.label)?;
        losses.push(loss.item());
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(&t, &loss)?,
        });
    }
    let total = total.ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let mean = tape.scale(&total, 1.0 / batch.len() as f64)?;
    let fwd_s = t0.elapsed().as_secs_f64();
    let peak_nodes = tape.node_count();
    let peak_bytes = tape.accounted_bytes();
    let t1 = Instant::now();
    let grads = tape.backward(&mean)?;
    let grads = weights.gradients(&grads);
    let bwd_s = t1.elapsed().as_secs_f64();
    Ok(BatchResult {
        losses,
        output_spikes,
        correct,
        grads,
        peak_nodes,
        peak_bytes,
        fwd_s,
        bwd_s,
    })
}

/// Fraction of samples classified correctly. Quantized networks are
/// evaluated at their nearest levels, the values a device would be
/// programmed with.
pub fn evaluate(net: &Network, samples: &[&SpikeEventStream], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let dr = cfg.dual_rate();
    let spec = QuantSpec {
        rounding: Rounding::Nearest,
        ..net.spec.quant
    };
    let mut correct = 0;
    let mut tape = Tape::new();
    for s in samples {
        tape.reset();
        let weights = TapeWeights::record(&mut tape, net, &spec, EVAL_STREAM)?;
        let out = forward_sequence(&mut tape, net, &weights, s, &dr, cfg.steps)?;
        if predict(out.counts.data()) == Some(s.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains `net` in place on the training split of `data`.
///
/// Gradient explosions, diverging forward passes and tape budget overruns
/// end the run early with the corresponding [`RunStatus`]; the weights are
/// left at their last finite values.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train_with(net, data, cfg, |_| {})
}

/// [`train`] that hands a [`Checkpoint`] to `on_epoch` after every
/// completed epoch.
pub fn train_with<F: FnMut(&Checkpoint)>(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainRun> {
    cfg.validate()?;
    net.spec
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let start = Instant::now();
    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    let test_set = data.split(Split::Test);
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut epochs = Vec::new();
    let mut status = RunStatus::Ok;
    let mut batches_done: u64 = 0;
    let mut peak_nodes = 0;
    let mut peak_bytes = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        }
        let mut losses = vec![0.0; train_set.len()];
        let mut correct = 0;
        let mut rec = EpochRecord {
            epoch,
            loss: 0.0,
            train_acc: 0.0,
            val_acc: None,
            test_acc: None,
            peak_nodes: 0,
            peak_bytes: 0,
            max_grad_norm: 0.0,
            fwd_s: 0.0,
            bwd_s: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SpikeEventStream> = chunk.iter().map(|&k| train_set[k]).collect();
            let stream = if cfg.freeze_rounding {
                QUANT_STREAM
            } else {
                QUANT_STREAM + batches_done
            };
            batches_done += 1;
            let mut res = match batch_gradients(net, &batch, cfg, stream) {
                Ok(r) => r,
                Err(e @ TrainError::Config(_)) | Err(e @ TrainError::Tape(_)) => return Err(e),
                Err(e) => {
                    status = RunStatus::from_error(epoch, e);
                    break 'epochs;
                }
            };
            for (&k, l) in chunk.iter().zip(&res.losses) {
                losses[k] = *l;
            }
            correct += res.correct;
            rec.peak_nodes = rec.peak_nodes.max(res.peak_nodes);
            rec.peak_bytes = rec.peak_bytes.max(res.peak_bytes);
            rec.fwd_s += res.fwd_s;
            rec.bwd_s += res.bwd_s;
            let norm = match cfg.grad_clip {
                Some(c) => clip_global_norm(&mut res.grads, c),
                None => clip_global_norm(&mut res.grads, f64::INFINITY),
            };
            rec.max_grad_norm = rec.max_grad_norm.max(norm);
            let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.to_vec()).collect();
            adam.step(&mut net.params_mut(), &res.grads);
            if net.params().iter().any(|p| p.iter().any(|w| !w.is_finite())) {
                for (p, b) in net.params_mut().into_iter().zip(before) {
                    *p = b;
                }
                status = RunStatus::Exploded {
                    epoch,
                    node: 0,
                };
                break 'epochs;
            }
        }
        rec.loss = losses.iter().sum::<f64>() / losses.len() as f64;
        rec.train_acc = correct as f64 / train_set.len() as f64;
        if cfg.eval_every_epoch {
            rec.val_acc = Some(eval_or_status(net, &val_set, cfg, epoch, &mut status)?);
            rec.test_acc = Some(eval_or_status(net, &test_set, cfg, epoch, &mut status)?);
        }
        peak_nodes = peak_nodes.max(rec.peak_nodes);
        peak_bytes = peak_bytes.max(rec.peak_bytes);
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} nodes {}",
            rec.loss,
            rec.train_acc,
            rec.peak_nodes
        );
        epochs.push(rec);
        on_epoch(&Checkpoint::new(epoch, net, &adam));
        if !status.is_ok() {
            break;
        }
    }

    let mut summary = TrainSummary {
        status,
        epochs_completed: epochs.len(),
        train_acc: epochs.last().map_or(0.0, |e| e.train_acc),
        val_acc: 0.0,
        test_acc: 0.0,
        peak_nodes,
        peak_bytes,
        wall_s: 0.0,
    };
    if summary.status.is_ok() {
        let mut st = RunStatus::Ok;
        summary.val_acc = eval_or_status(net, &val_set, cfg, epochs.len(), &mut st)?;
        summary.test_acc = eval_or_status(net, &test_set, cfg, epochs.len(), &mut st)?;
        summary.status = st;
    }
    summary.wall_s = start.elapsed().as_secs_f64();
    Ok(TrainRun {
        config: cfg.clone(),
        network: net.spec.clone(),
        epochs,
        summary,
    })
}

fn eval_or_status(
    net: &Network,
    samples: &[&SpikeEventStream],
    cfg: &TrainConfig,
    epoch: usize,
    status: &mut RunStatus,
) -> Result<f64> {
    match evaluate(net, samples, cfg) {
        Ok(a) => Ok(a),
        Err(e @ TrainError::Config(_)) | Err(e @ TrainError::Tape(_)) => Err(e),
        Err(e) => {
            *status = RunStatus::from_error(epoch, e);
            Ok(0.0)
        }
    }
}

/// Per-node footprint used for `peak_bytes`: a fixed header plus eight
/// bytes per element of the node's output.
pub const fn node_bytes(len: usize) -> usize {
    NODE_HEADER_BYTES + 8 * len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdata::{build_network, Architecture, NetworkSpec};
    use crate::neurons::{FeLifParams, LeakyIntegrator};

    fn dr(mode: Mode, substeps: usize) -> DualRate {
        DualRate::new(mode, 1e-3 / substeps as f64, substeps)
    }

    #[test]
    fn predict_rejects_ties() {
        assert_eq!(predict(&[0.0, 3.0, 1.0]), Some(1));
        assert_eq!(predict(&[2.0, 2.0, 1.0]), None);
        assert_eq!(predict(&[0.0; 4]), None);
    }

    #[test]
    fn uniform_loss_on_a_silent_network() {
        let mut spec = NetworkSpec::new(Architecture::FfLif, 12, 16, 27);
        spec.seed = 3;
        let mut net = build_network(&spec).unwrap();
        net.w_in.iter_mut().for_each(|w| *w = 0.0);
        net.w_out.iter_mut().for_each(|w| *w = 0.0);
        let sample = SpikeEventStream {
            channels: 12,
            duration_us: 50_000,
            label: 4,
            events: vec![],
        };
        let mut tape = Tape::new();
        let w = TapeWeights::record(&mut tape, &net, &spec.quant, 0).unwrap();
        let out = forward_sequence(&mut tape, &net, &w, &sample, &dr(Mode::Bruno, 1), 50).unwrap();
        assert_eq!(out.counts.data(), &[0.0; 27][..]);
        let l = cross_entropy(&mut tape, &out.counts, 4).unwrap();
        assert!((l.item() - 27f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_output_beats_uniform() {
        let mut tape = Tape::new();
        let mut c = vec![0.0; 27];
        c[5] = 4.0;
        let l = cross_entropy(&mut tape, &Value::constant(c), 5).unwrap();
        assert!(l.item() < 27f64.ln());
    }

    #[test]
    fn strong_input_spikes_hidden_layer_in_same_step() {
        let mut spec = NetworkSpec::new(Architecture::FfLif, 2, 3, 2);
        spec.hidden_lif.v_thr = 1.0;
        let mut net = build_network(&spec).unwrap();
        net.w_in = vec![2.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let mut tape = Tape::new();
        let w = TapeWeights::record(&mut tape, &net, &spec.quant, 0).unwrap();
        let out = forward_binned(&mut tape, &net, &w, &[vec![1.0, 0.0]], &dr(Mode::Bruno, 1)).unwrap();
        assert_eq!(out.hidden_spikes, 1.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut w = vec![0.5, -1.0];
        for _ in 0..2 {
            adam.step(&mut [&mut w], &[vec![0.0, 0.0]]);
        }
        assert_eq!(w, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_matches_hand_stepped_oracle() {
        // minimize (w - 3)^2 from w = 0 with lr 0.1
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg);
        let mut w = vec![0.0];
        let mut got = Vec::new();
        for _ in 0..5 {
            let g = 2.0 * (w[0] - 3.0);
            adam.step(&mut [&mut w], &[vec![g]]);
            got.push(w[0]);
        }
        // frozen from an independent step-by-step evaluation
        let want = [
            0.09999999983333335,
            0.19989729258521102,
            0.29961847654925267,
            0.3990864689442145,
            0.4982205437727129,
        ];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut huge = vec![vec![1e200, 1e200]];
        let n = clip_global_norm(&mut huge, 1.0);
        assert!(n.is_finite());
        assert!((huge[0][0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            dt_coarse: 2e-3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            substeps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn leaky() -> LeakyIntegrator {
        LeakyIntegrator {
            tau: 20e-3,
            v_thr: 1e9,
        }
    }

    #[test]
    fn linear_neuron_forward_is_fine_gradient_is_coarse() {
        let n = leaky();
        let s = 1000;
        let d = dr(Mode::Bruno, s);
        let mut tape = Tape::new();
        let v0 = tape.leaf(vec![0.7]).unwrap();
        let (st, _) = bruno_step(&mut tape, &n, &[v0.clone()], &Value::scalar(0.0), &d).unwrap();
        let fine = 0.7 * (1.0 - d.dt_fine / n.tau).powi(s as i32);
        assert!((st[0].item() - fine).abs() < 1e-12);
        let l = tape.sum(&st[0]).unwrap();
        let g = tape.backward(&l).unwrap().wrt(&v0)[0];
        let coarse = 1.0 - d.dt_coarse / n.tau;
        assert!((g - coarse).abs() < 1e-15, "{g} vs {coarse}");
        assert!((g - (1.0 - d.dt_fine / n.tau).powi(s as i32)).abs() > 1e-3);
    }

    #[test]
    fn bruno_node_count_is_independent_of_substeps() {
        let p = FeLifParams::default();
        let counts: Vec<usize> = [1, 10, 1000]
            .iter()
            .map(|&s| {
                let mut tape = Tape::new();
                let st = vec![tape.leaf(vec![0.5; 4]).unwrap(), tape.leaf(vec![0.01; 4]).unwrap()];
                let i = tape.leaf(vec![3e-10; 4]).unwrap();
                bruno_step(&mut tape, &p, &st, &i, &dr(Mode::Bruno, s)).unwrap();
                tape.node_count()
            })
            .collect();
        assert_eq!(counts[1], counts[2]);
        // S = 1 skips the two combine nodes
        assert_eq!(counts[0] + 2, counts[1]);

        let mut tape = Tape::new();
        let st = vec![tape.leaf(vec![0.5; 4]).unwrap(), tape.leaf(vec![0.01; 4]).unwrap()];
        let i = tape.leaf(vec![3e-10; 4]).unwrap();
        vanilla_step(&mut tape, &p, &st, &i, &dr(Mode::Vanilla, 1000)).unwrap();
        // three leaves, then spike, gate and two gated components
        let per_step = counts[0] - 3 - 4;
        assert_eq!(per_step, 16);
        assert_eq!(tape.node_count(), 3 + 1000 * per_step + 4);
    }

    #[test]
    fn bruno_and_vanilla_agree_forward() {
        let p = FeLifParams::default();
        let run = |mode| {
            let mut tape = Tape::new();
            let mut st = vec![Value::zeros(2), Value::zeros(2)];
            let i = Value::constant(vec![3.08e-10, 1e-9]);
            let mut spikes = Vec::new();
            for _ in 0..30 {
                let (s, sp) = dual_rate_step(&mut tape, &p, &st, &i, &dr(mode, 100)).unwrap();
                st = s;
                spikes.push(sp.data().to_vec());
            }
            (st[0].data().to_vec(), spikes)
        };
        assert_eq!(run(Mode::Bruno), run(Mode::Vanilla));
    }
}
