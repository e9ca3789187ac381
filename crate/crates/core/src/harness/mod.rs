//! Experiment drivers behind the command-line tool: time/memory sweeps,
//! the architecture × quantization accuracy grid, random-search
//! hyperparameter optimization and the verification suite.

pub mod bench;
pub mod grid;
pub mod hpo;
pub mod verify;

use serde::{Deserialize, Serialize};

use crate::bruno::TrainConfig;
use crate::netdata::{Architecture, NetworkSpec};
use crate::quant::QuantSpec;

/// Per-cell hyperparameters: layer decays, learning rate and the FeLIF
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub alpha_hid: f64,
    pub beta_hid: f64,
    pub alpha_out: f64,
    pub beta_out: f64,
    pub lr: f64,
    pub felif_v_thr: f64,
}

impl CellParams {
    /// Preset hyperparameters per architecture and bit width (`None` = full
    /// precision). FeLIF presets have no output-layer decays; those fields
    /// keep the LIF defaults.
    pub fn reference(arch: Architecture, bits: Option<u32>) -> CellParams {
        use Architecture::*;
        let row = match (bits, arch) {
            (Some(3), FfLif) => [0.662, 0.703, 0.565, 0.696, 3.429e-2, 0.0],
            (Some(3), Rlif) => [0.603, 0.310, 0.354, 0.295, 1.478e-3, 0.0],
            (Some(3), FfFelif) => [0.468, 0.735, 0.0, 0.0, 7.840e-4, 3.039],
            (Some(4), FfLif) => [0.226, 0.245, 0.865, 0.834, 3.276e-3, 0.0],
            (Some(4), Rlif) => [0.599, 0.710, 0.390, 0.349, 6.055e-3, 0.0],
            (Some(4), FfFelif) => [0.456, 0.322, 0.0, 0.0, 3.716e-3, 2.544],
            (Some(8), FfLif) => [0.230, 0.302, 0.901, 0.591, 1.283e-2, 0.0],
            (Some(8), Rlif) => [0.186, 0.537, 0.347, 0.846, 6.766e-3, 0.0],
            (Some(8), FfFelif) => [0.682, 0.662, 0.0, 0.0, 4.387e-3, 2.928],
            (_, FfLif) => [0.959, 0.202, 0.716, 0.600, 3.006e-3, 0.0],
            (_, Rlif) => [0.343, 0.406, 0.764, 0.874, 6.174e-3, 0.0],
            (_, FfFelif) => [0.299, 0.147, 0.0, 0.0, 2.628e-3, 3.388],
        };
        let d = NetworkSpec::default();
        let or = |x: f64, y: f64| if x == 0.0 { y } else { x };
        CellParams {
            alpha_hid: row[0],
            beta_hid: row[1],
            alpha_out: or(row[2], d.output_lif.alpha),
            beta_out: or(row[3], d.output_lif.beta),
            lr: row[4],
            felif_v_thr: or(row[5], d.felif.v_thr),
        }
    }

    /// Writes these hyperparameters into a network spec and a training
    /// configuration.
    pub fn apply(&self, net: &mut NetworkSpec, cfg: &mut TrainConfig) {
        net.hidden_lif.alpha = self.alpha_hid;
        net.hidden_lif.beta = self.beta_hid;
        net.output_lif.alpha = self.alpha_out;
        net.output_lif.beta = self.beta_out;
        net.felif.v_thr = self.felif_v_thr;
        cfg.adam.lr = self.lr;
    }
}

/// Network spec for one grid cell.
pub fn cell_network(
    arch: Architecture,
    bits: Option<u32>,
    inputs: usize,
    hidden: usize,
    outputs: usize,
    seed: u64,
) -> NetworkSpec {
    let mut spec = NetworkSpec::new(arch, inputs, hidden, outputs);
    spec.seed = seed;
    spec.quant = QuantSpec {
        n_bits: bits,
        seed,
        ..QuantSpec::default()
    };
    spec
}

pub fn quant_label(bits: Option<u32>) -> String {
    match bits {
        None => "FP".into(),
        Some(n) => n.to_string(),
    }
}

/// Parses `FP`, `fp32` or a bit width.
pub fn parse_quant(s: &str) -> Result<Option<u32>, String> {
    match s.to_ascii_lowercase().as_str() {
        "fp" | "fp32" | "fp64" | "none" => Ok(None),
        other => other
            .parse::<u32>()
            .map(Some)
            .map_err(|_| format!("bad quantization level {s:?}")),
    }
}
