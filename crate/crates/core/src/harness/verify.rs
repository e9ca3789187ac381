//! Self-checks of the simulator and the gradient machinery.
//!
//! Each check returns a [`Check`] with pass/fail, a one-line detail and the
//! measured quantities, so the report can be printed or serialized.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bruno::{
    batch_gradients, dual_rate_step, forward_sequence, Adam, AdamConfig, DualRate, Mode, TapeWeights, TrainConfig,
    TrainError,
};
use crate::netdata::{build_network, generate_dataset, Architecture, DatasetSpec, NetworkSpec};
use crate::neurons::{simulate_constant_current, FeLifNeuron, FeLifParams, RateGradient, Trajectory};
use crate::quant::{quantize_ste, sround, stream_rng, QuantSpec};
use crate::tape::{Tape, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {:<22} {} ({:.2} s)\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail,
                c.elapsed_s
            ));
        }
        out
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String, BTreeMap<String, f64>), String>) -> Check {
    let t0 = Instant::now();
    let (passed, detail, metrics) = f().unwrap_or_else(|e| (false, format!("error: {e}"), BTreeMap::new()));
    Check {
        name: name.into(),
        passed,
        detail,
        metrics,
        elapsed_s: t0.elapsed().as_secs_f64(),
    }
}

/// Runs the full suite with the default neuron parameters.
pub fn run_verify() -> VerifyReport {
    let p = FeLifParams::default();
    let checks = vec![
        felif_transient(&p, &p),
        gradient_fd(),
        sround_unbiased(100_000),
        quant_levels(),
        s1_equivalence(),
    ];
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Constant drive of the transient check (A).
pub const TRANSIENT_CURRENT: f64 = 308e-12;
/// Duration of the transient check (s).
pub const TRANSIENT_DURATION: f64 = 50e-3;
pub const MODEL_DT: f64 = 1e-6;
pub const REFERENCE_DT: f64 = 10e-9;

/// Measured comparison of a 1 µs trajectory against a 10 ns one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientComparison {
    /// Largest |ΔV| on the shared 1 µs grid, excluding samples between the
    /// two spike times of a spike pair.
    pub max_dv: f64,
    pub model_spikes: Vec<f64>,
    pub reference_spikes: Vec<f64>,
    pub first_spike_error: Option<f64>,
    /// Fast/slow pattern of dV/dt before the first model spike.
    pub phases: Vec<Phase>,
    pub rising: bool,
    /// P / P_s one sample before the first model spike.
    pub p_before_spike: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Fast,
    Slow,
}

/// Integrates `model` at 1 µs and `reference` at 10 ns under the same drive
/// and compares them.
pub fn compare_transient(model: &FeLifParams, reference: &FeLifParams) -> Result<TransientComparison, String> {
    let n = (TRANSIENT_DURATION / MODEL_DT).round() as usize;
    let ratio = (MODEL_DT / REFERENCE_DT).round() as usize;
    let m = simulate_constant_current(model, TRANSIENT_CURRENT, MODEL_DT, n, 1).map_err(|e| e.to_string())?;
    let r = simulate_constant_current(reference, TRANSIENT_CURRENT, REFERENCE_DT, n * ratio, ratio)
        .map_err(|e| e.to_string())?;

    // Samples inside [min, max] of a spike pair are compared against a
    // trajectory that has already reset, so they are skipped.
    let mut windows: Vec<(f64, f64)> = m
        .spikes
        .iter()
        .zip(&r.spikes)
        .map(|(&a, &b)| (a.min(b) - 0.5 * MODEL_DT, a.max(b) + 0.5 * MODEL_DT))
        .collect();
    let paired = windows.len();
    let cutoff = match (m.spikes.get(paired), r.spikes.get(paired)) {
        (None, None) => f64::INFINITY,
        (a, b) => a.into_iter().chain(b).fold(f64::INFINITY, |x, &y| x.min(y)) - 0.5 * MODEL_DT,
    };
    windows.retain(|w| w.0 < cutoff);
    let mut max_dv: f64 = 0.0;
    for k in 0..m.v.len().min(r.v.len()) {
        let t = k as f64 * MODEL_DT;
        if t >= cutoff {
            break;
        }
        if windows.iter().any(|&(a, b)| t >= a && t <= b) {
            continue;
        }
        max_dv = max_dv.max((m.v[k] - r.v[k]).abs());
    }

    let first_spike_error = match (m.spikes.first(), r.spikes.first()) {
        (Some(a), Some(b)) => Some((a - b).abs()),
        _ => None,
    };
    let (phases, rising, p_before_spike) = shape(&m, model);
    Ok(TransientComparison {
        max_dv,
        model_spikes: m.spikes,
        reference_spikes: r.spikes,
        first_spike_error,
        phases,
        rising,
        p_before_spike,
    })
}

/// dV/dt classified as fast (> 1/2 of the initial slope) or slow (< 1/20
/// of it) up to the first spike, with repeats collapsed.
fn shape(tr: &Trajectory, p: &FeLifParams) -> (Vec<Phase>, bool, Option<f64>) {
    let Some(&t1) = tr.spikes.first() else {
        return (Vec::new(), false, None);
    };
    let ks = ((t1 / tr.dt_sample).round() as usize).min(tr.v.len() - 1);
    if ks < 3 {
        return (Vec::new(), false, None);
    }
    // Sample ks is already reset; the last pre-spike sample is ks - 1.
    let slopes: Vec<f64> = tr.v[..ks].windows(2).map(|w| (w[1] - w[0]) / tr.dt_sample).collect();
    let s0 = slopes[0];
    let rising = s0 > 0.0 && slopes.iter().all(|&d| d > 0.0);
    let mut phases: Vec<Phase> = Vec::new();
    for &d in &slopes {
        let ph = if d > 0.5 * s0 {
            Phase::Fast
        } else if d < 0.05 * s0 {
            Phase::Slow
        } else {
            continue;
        };
        if phases.last() != Some(&ph) {
            phases.push(ph);
        }
    }
    (phases, rising, Some(tr.p[ks - 1] / p.p_s))
}

/// FeLIF Euler at 1 µs against a 10 ns reference at 308 pA over 50 ms:
/// max |ΔV| ≤ 1% of v_thr, first spike within 100 µs, a rise / stall /
/// rise pattern with dV/dt > 0 throughout, and P ≥ 0.99 P_s before the
/// spike. Passing different parameter sets injects a model fault.
pub fn felif_transient(model: &FeLifParams, reference: &FeLifParams) -> Check {
    timed("felif_transient", || {
        let c = compare_transient(model, reference)?;
        let tol_v = 0.01 * reference.v_thr;
        let mut fails = Vec::new();
        if c.max_dv > tol_v {
            fails.push(format!("max |dV| {:.3e} V > {tol_v:.3e} V", c.max_dv));
        }
        match c.first_spike_error {
            None => fails.push("no spike in one of the trajectories".into()),
            Some(e) if e > 100e-6 => fails.push(format!("first spike off by {:.1} us", e * 1e6)),
            _ => {}
        }
        if c.model_spikes.len() != c.reference_spikes.len() {
            fails.push(format!(
                "{} model spikes vs {} reference spikes",
                c.model_spikes.len(),
                c.reference_spikes.len()
            ));
        }
        if !c.rising || c.phases != [Phase::Fast, Phase::Slow, Phase::Fast] {
            fails.push(format!("dV/dt pattern {:?} (rising: {})", c.phases, c.rising));
        }
        if !c.p_before_spike.is_some_and(|x| x >= 0.99) {
            fails.push(format!("P/P_s before spike {:?}", c.p_before_spike));
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("max_dv".into(), c.max_dv);
        metrics.insert("first_spike_model_s".into(), c.model_spikes.first().copied().unwrap_or(f64::NAN));
        metrics.insert(
            "first_spike_reference_s".into(),
            c.reference_spikes.first().copied().unwrap_or(f64::NAN),
        );
        metrics.insert("p_before_spike".into(), c.p_before_spike.unwrap_or(f64::NAN));
        let detail = if fails.is_empty() {
            format!(
                "max |dV| {:.2e} V, first spike {:.3} ms ({:.2} us off)",
                c.max_dv,
                c.model_spikes[0] * 1e3,
                c.first_spike_error.unwrap_or(0.0) * 1e6
            )
        } else {
            fails.join("; ")
        };
        Ok((fails.is_empty(), detail, metrics))
    })
}

/// The subthreshold network of the finite-difference check: 2 constant
/// inputs into 5 FeLIF neurons (10 weights), 5 coarse steps of 200 µs
/// recorded in vanilla mode. The loss is Σ V_T + Σ P_T / P_s.
pub struct FdProblem {
    pub weights: Vec<f64>,
    pub inputs: [f64; 2],
    pub current_scale: f64,
    pub steps: usize,
    pub dr: DualRate,
    pub neuron: FeLifNeuron,
}

impl Default for FdProblem {
    fn default() -> Self {
        let mut dr = DualRate::new(Mode::Vanilla, 1e-6, 200);
        // Steep surrogate: far below threshold its slope is ~1/(k x²), so
        // the surrogate path contributes nothing measurable.
        dr.slope = 1e6;
        FdProblem {
            weights: vec![1.2, 0.4, 0.8, 1.5, 2.0, 0.3, 0.6, 1.9, 1.1, 1.0],
            inputs: [1.0, 0.5],
            current_scale: 1e-9,
            steps: 5,
            dr,
            neuron: FeLifNeuron {
                params: FeLifParams::default(),
                rate_gradient: RateGradient::Full,
            },
        }
    }
}

impl FdProblem {
    /// Loss, its gradient with respect to the weights, and the spike count.
    pub fn loss_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>, f64), TrainError> {
        let mut tape = Tape::new();
        let wl = tape.leaf(w.to_vec())?;
        let x = Value::constant(self.inputs.to_vec());
        let drive = tape.matvec(&wl, 5, 2, &x)?;
        let current = tape.scale(&drive, self.current_scale)?;
        let mut state = vec![Value::zeros(5), Value::zeros(5)];
        let mut spikes = 0.0;
        for _ in 0..self.steps {
            let (s, sp) = dual_rate_step(&mut tape, &self.neuron, &state, &current, &self.dr)?;
            spikes += sp.data().iter().sum::<f64>();
            state = s;
        }
        let v = tape.sum(&state[0])?;
        let p = tape.sum(&state[1])?;
        let p = tape.scale(&p, 1.0 / self.neuron.params.p_s)?;
        let loss = tape.add(&v, &p)?;
        let g = tape.backward(&loss)?.wrt(&wl);
        Ok((loss.item(), g, spikes))
    }
}

/// Vanilla-mode gradients of [`FdProblem`] against central differences
/// (ε = 1e-5), relative error ≤ 1e-4 per weight.
pub fn gradient_fd() -> Check {
    timed("gradient_fd", || {
        let prob = FdProblem::default();
        let (_, g, spikes) = prob.loss_and_grad(&prob.weights).map_err(|e| e.to_string())?;
        let eps = 1e-5;
        let mut fd = Vec::with_capacity(g.len());
        for k in 0..prob.weights.len() {
            let mut wp = prob.weights.clone();
            wp[k] += eps;
            let mut wm = prob.weights.clone();
            wm[k] -= eps;
            let lp = prob.loss_and_grad(&wp).map_err(|e| e.to_string())?.0;
            let lm = prob.loss_and_grad(&wm).map_err(|e| e.to_string())?.0;
            fd.push((lp - lm) / (2.0 * eps));
        }
        let floor = 1e-8 * fd.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let rel = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0f64, f64::max);
        let ok = rel <= 1e-4 && spikes == 0.0;
        let mut metrics = BTreeMap::new();
        metrics.insert("max_rel_error".into(), rel);
        metrics.insert("spikes".into(), spikes);
        let detail = if spikes > 0.0 {
            format!("network spiked ({spikes} spikes)")
        } else {
            format!("max relative error {rel:.2e} over {} weights", g.len())
        };
        Ok((ok, detail, metrics))
    })
}

/// |mean − x| < 4 σ_mc over `draws` stochastic roundings of 2.3, −0.5 and 0.
pub fn sround_unbiased(draws: usize) -> Check {
    timed("sround_unbiased", || {
        let mut rng = stream_rng(0, 0);
        let mut ok = true;
        let mut parts = Vec::new();
        let mut metrics = BTreeMap::new();
        for x in [2.3f64, -0.5, 0.0] {
            let sum: i64 = (0..draws).map(|_| sround(x, &mut rng)).sum();
            let mean = sum as f64 / draws as f64;
            let f = x - x.floor();
            let sigma = (f * (1.0 - f) / draws as f64).sqrt();
            let err = (mean - x).abs();
            let pass = if sigma == 0.0 { err == 0.0 } else { err < 4.0 * sigma };
            ok &= pass;
            parts.push(format!("{x}: {:.2} sigma", if sigma == 0.0 { 0.0 } else { err / sigma }));
            metrics.insert(format!("mean[{x}]"), mean);
        }
        Ok((ok, parts.join(", "), metrics))
    })
}

/// At most 2^N − 1 distinct levels for N ∈ {3, 4, 8}, and an STE gradient
/// of exactly 1 in range and 0 where a fixed scale clamps.
pub fn quant_levels() -> Check {
    timed("quant_levels", || {
        let mut ok = true;
        let mut parts = Vec::new();
        let w: Vec<f64> = (0..1000).map(|k| ((k as f64) * 0.7312).sin() * 1.7).collect();
        for n in [3u32, 4, 8] {
            let mut tape = Tape::new();
            let leaf = tape.leaf(w.clone()).map_err(|e| e.to_string())?;
            let spec = QuantSpec::bits(n);
            let q = quantize_ste(&mut tape, &leaf, &spec, &mut stream_rng(1, n as u64)).map_err(|e| e.to_string())?;
            let mut distinct: Vec<i64> = q.levels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let bound = (1usize << n) - 1;
            ok &= distinct.len() <= bound;
            parts.push(format!("{n} bit: {} levels", distinct.len()));
        }
        // Fixed scale 0.1 at 3 bits clamps beyond |w| = 0.3.
        let spec = QuantSpec {
            scale: crate::quant::ScaleMode::Fixed(0.1),
            ..QuantSpec::bits(3)
        };
        let xs = [0.05, -0.2, 0.29, 0.5, -0.9];
        let mut tape = Tape::new();
        let leaf = tape.leaf(xs.to_vec()).map_err(|e| e.to_string())?;
        let q = quantize_ste(&mut tape, &leaf, &spec, &mut stream_rng(2, 0)).map_err(|e| e.to_string())?;
        let loss = tape.sum(&q.value).map_err(|e| e.to_string())?;
        let g = tape.backward(&loss).map_err(|e| e.to_string())?.wrt(&leaf);
        let ste_ok = g == [1.0, 1.0, 1.0, 0.0, 0.0];
        ok &= ste_ok;
        parts.push(format!("STE {}", if ste_ok { "1/0" } else { "wrong" }));
        Ok((ok, parts.join(", "), BTreeMap::new()))
    })
}

/// Outcome of running one minibatch in both modes at one substep.
pub struct S1Outcome {
    pub identical_forward: bool,
    pub identical_loss: bool,
    pub identical_grads: bool,
    pub identical_update: bool,
    pub nodes: (usize, usize),
    /// Output spikes of the batch (equal in both modes when forward is).
    pub output_spikes: f64,
}

/// 2-layer FF-FeLIF network with 4 hidden and 4 output neurons over 20
/// coarse steps, trained for one Adam step in each mode.
pub fn s1_outcome() -> Result<S1Outcome, TrainError> {
    let mut spec = NetworkSpec::new(Architecture::FfFelif, 6, 4, 4);
    spec.seed = 3;
    spec.felif_current = 2e-9;
    let net = build_network(&spec).map_err(|e| TrainError::Config(e.to_string()))?;
    let data = generate_dataset(&DatasetSpec {
        channels: 6,
        classes: 4,
        samples_per_class: 1,
        duration_ms: 20.0,
        active_rate_hz: 300.0,
        seed: 5,
        ..DatasetSpec::default()
    })
    .map_err(|e| TrainError::Config(e.to_string()))?;
    let batch: Vec<_> = data.samples.iter().collect();
    let cfg = |mode| TrainConfig {
        mode,
        dt_fine: 1e-3,
        dt_coarse: 1e-3,
        substeps: 1,
        steps: 20,
        ..TrainConfig::default()
    };
    let (cb, cv) = (cfg(Mode::Bruno), cfg(Mode::Vanilla));

    let forward = |c: &TrainConfig| -> Result<Vec<(Vec<f64>, f64)>, TrainError> {
        let mut out = Vec::new();
        for s in &batch {
            let mut tape = Tape::new();
            let w = TapeWeights::record(&mut tape, &net, &net.spec.quant, 0)?;
            let o = forward_sequence(&mut tape, &net, &w, s, &c.dual_rate(), c.steps)?;
            out.push((o.counts.data().to_vec(), o.hidden_spikes));
        }
        Ok(out)
    };
    let identical_forward = forward(&cb)? == forward(&cv)?;
    let rb = batch_gradients(&net, &batch, &cb, 0)?;
    let rv = batch_gradients(&net, &batch, &cv, 0)?;
    let update = |grads: &[Vec<f64>]| {
        let mut n = net.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut n.params_mut(), grads);
        n.params().iter().map(|p| p.to_vec()).collect::<Vec<_>>()
    };
    let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    Ok(S1Outcome {
        identical_forward,
        identical_loss: rb.losses.iter().map(|x| x.to_bits()).eq(rv.losses.iter().map(|x| x.to_bits())),
        identical_grads: bits(&rb.grads) == bits(&rv.grads),
        identical_update: bits(&update(&rb.grads)) == bits(&update(&rv.grads)),
        nodes: (rb.peak_nodes, rv.peak_nodes),
        output_spikes: rb.output_spikes,
    })
}

/// BRUNO and vanilla agree bit for bit at one substep.
pub fn s1_equivalence() -> Check {
    timed("s1_equivalence", || {
        let o = s1_outcome().map_err(|e| e.to_string())?;
        let ok = o.identical_forward && o.identical_loss && o.identical_grads && o.identical_update && o.nodes.0 == o.nodes.1;
        let detail = format!(
            "forward {}, loss {}, gradients {}, update {}, nodes {}/{}, {} output spikes",
            o.identical_forward, o.identical_loss, o.identical_grads, o.identical_update, o.nodes.0, o.nodes.1, o.output_spikes
        );
        Ok((ok, detail, BTreeMap::new()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sround_check_passes() {
        assert!(sround_unbiased(10_000).passed);
    }

    #[test]
    fn quant_check_passes() {
        let c = quant_levels();
        assert!(c.passed, "{}", c.detail);
    }

    #[test]
    fn s1_check_passes() {
        let c = s1_equivalence();
        assert!(c.passed, "{}", c.detail);
    }

    #[test]
    fn fd_check_passes() {
        let c = gradient_fd();
        assert!(c.passed, "{}", c.detail);
    }
}
