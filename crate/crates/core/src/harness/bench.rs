//! Training time and tape memory of BRUNO versus fine-step BPTT.
//!
//! Each case trains one minibatch of a FF-FeLIF network with `size` hidden
//! and `size` output neurons on a single synthetic sample lasting `steps`
//! coarse steps. One warm-up run is discarded and the median of the timed
//! runs is reported.

use serde::{Deserialize, Serialize};

use crate::bruno::{batch_gradients, Mode, TrainConfig, TrainError};
use crate::netdata::{build_network, generate_dataset, Architecture, DatasetSpec, NetworkSpec};
use crate::tape::NODE_HEADER_BYTES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub steps: Vec<usize>,
    pub modes: Vec<Mode>,
    pub substeps: usize,
    pub dt_fine: f64,
    pub inputs: usize,
    /// Timed runs per case (the median is reported).
    pub repeats: usize,
    pub warmup: bool,
    /// Accounted tape memory limit; cases above it report `oom`.
    pub tape_budget: Option<usize>,
    pub seed: u64,
    /// Overrides for the benchmark network (sizes are taken from `sizes`).
    pub network: Option<NetworkSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![64, 128, 256],
            steps: vec![10, 50, 100, 200, 500],
            modes: vec![Mode::Bruno, Mode::Vanilla],
            substeps: 1000,
            dt_fine: 1e-6,
            inputs: 12,
            repeats: 3,
            warmup: true,
            tape_budget: Some(4 << 30),
            seed: 0,
            network: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub steps: usize,
    pub mode: Mode,
    pub substeps: usize,
    pub fwd_s: Option<f64>,
    pub bwd_s: Option<f64>,
    pub peak_nodes: Option<usize>,
    pub peak_bytes: Option<usize>,
    /// Output spikes of the forward pass.
    pub spikes: Option<f64>,
    /// `ok`, `exploded`, `oom` or `unstable`.
    pub status: String,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn status_of(e: &TrainError) -> &'static str {
    match e {
        TrainError::GradientExplosion { .. } => "exploded",
        TrainError::OutOfMemory { .. } => "oom",
        _ => "unstable",
    }
}

/// Runs one (size, steps, mode) case.
pub fn bench_case(cfg: &BenchConfig, size: usize, steps: usize, mode: Mode) -> Result<BenchRow, TrainError> {
    let mut spec = cfg
        .network
        .clone()
        .unwrap_or_else(|| NetworkSpec::new(Architecture::FfFelif, cfg.inputs, size, size));
    spec.inputs = cfg.inputs;
    spec.hidden = size;
    spec.outputs = size;
    spec.seed = cfg.seed;
    let net = build_network(&spec).map_err(|e| TrainError::Config(e.to_string()))?;
    let data = generate_dataset(&DatasetSpec {
        channels: cfg.inputs,
        duration_ms: steps as f64 * cfg.dt_fine * cfg.substeps as f64 * 1e3,
        classes: 1,
        samples_per_class: 1,
        seed: cfg.seed,
        ..DatasetSpec::default()
    })
    .map_err(|e| TrainError::Config(e.to_string()))?;
    let sample = &data.samples[0];
    let train = TrainConfig {
        mode,
        dt_fine: cfg.dt_fine,
        dt_coarse: cfg.dt_fine * cfg.substeps as f64,
        substeps: cfg.substeps,
        steps,
        batch_size: 1,
        seed: cfg.seed,
        tape_budget: cfg.tape_budget,
        ..TrainConfig::default()
    };
    train.validate()?;

    let mut row = BenchRow {
        size,
        steps,
        mode,
        substeps: cfg.substeps,
        fwd_s: None,
        bwd_s: None,
        peak_nodes: None,
        peak_bytes: None,
        spikes: None,
        status: "ok".into(),
    };
    let runs = cfg.repeats.max(1) + usize::from(cfg.warmup);
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    for k in 0..runs {
        match batch_gradients(&net, &[sample], &train, 0) {
            Ok(r) => {
                row.peak_nodes = Some(r.peak_nodes);
                row.peak_bytes = Some(r.peak_bytes);
                row.spikes = Some(r.output_spikes);
                if !(cfg.warmup && k == 0) {
                    fwd.push(r.fwd_s);
                    bwd.push(r.bwd_s);
                }
            }
            Err(e @ TrainError::Config(_)) => return Err(e),
            Err(e) => {
                log::warn!("{mode} size {size} steps {steps}: {e}");
                row.status = status_of(&e).into();
                return Ok(row);
            }
        }
    }
    row.fwd_s = Some(median(&mut fwd));
    row.bwd_s = Some(median(&mut bwd));
    Ok(row)
}

/// Runs every case of the sweep in order: sizes, then lengths, then modes.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, TrainError> {
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for &steps in &cfg.steps {
            for &mode in &cfg.modes {
                let row = bench_case(cfg, size, steps, mode)?;
                log::info!(
                    "bench size {size} steps {steps} {mode}: {} nodes, {}",
                    row.peak_nodes.unwrap_or(0),
                    row.status
                );
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// CSV with header `size,steps,mode,substeps,fwd_s,bwd_s,peak_nodes,
/// peak_bytes,spikes,status`; failed measurements are empty fields.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize to csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

/// Bytes charged per tape node on top of its data, as used for
/// `peak_bytes`.
pub const PER_NODE_BYTES: usize = NODE_HEADER_BYTES;

#[cfg(test)]
mod tests {
    use super::*;

    fn small(substeps: usize) -> BenchConfig {
        BenchConfig {
            sizes: vec![4],
            steps: vec![5],
            substeps,
            repeats: 1,
            warmup: false,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn one_substep_rows_match() {
        let rows = run_bench(&small(1)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].peak_nodes, rows[1].peak_nodes);
        assert_eq!(rows[0].spikes, rows[1].spikes);
        assert!(rows.iter().all(|r| r.status == "ok"));
    }

    #[test]
    fn budget_overrun_is_a_row() {
        let cfg = BenchConfig {
            tape_budget: Some(100_000),
            modes: vec![Mode::Vanilla],
            ..small(100)
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows[0].status, "oom");
        assert!(rows[0].fwd_s.is_none());
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("size,steps,mode,substeps,fwd_s,bwd_s,peak_nodes,peak_bytes,spikes,status\n"));
        assert!(csv.contains(",,,,,oom"), "{csv}");
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}
