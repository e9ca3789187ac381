//! Test accuracy over architectures × quantization levels × seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cell_network, quant_label, CellParams};
use crate::bruno::{train, RunStatus, TrainConfig, TrainError, TrainRun};
use crate::netdata::{build_network, generate_dataset, Architecture, Dataset, DatasetSpec};

/// Hyperparameters for one (architecture, bit width) cell, e.g. from HPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOverride {
    pub architecture: Architecture,
    pub bits: Option<u32>,
    pub params: CellParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub architectures: Vec<Architecture>,
    /// Bit widths; `None` is full precision.
    pub quant: Vec<Option<u32>>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub hidden: usize,
    /// Start every cell from the preset hyperparameters.
    pub presets: bool,
    /// Per-cell hyperparameters, applied after the presets.
    pub cells: Vec<CellOverride>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            architectures: Architecture::ALL.to_vec(),
            quant: vec![None, Some(8), Some(4), Some(3)],
            seeds: (0..5).collect(),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            hidden: 64,
            presets: false,
            cells: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.architectures.is_empty() || self.quant.is_empty() || self.seeds.is_empty() {
            return Err(TrainError::Config("grid needs architectures, quantization levels and seeds".into()));
        }
        self.train.validate()
    }

    /// Network and training configuration of one cell and seed.
    pub fn cell(
        &self,
        arch: Architecture,
        bits: Option<u32>,
        seed: u64,
    ) -> (crate::netdata::NetworkSpec, TrainConfig) {
        let mut net = cell_network(arch, bits, self.dataset.channels, self.hidden, self.dataset.classes, seed);
        let mut cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        if self.presets {
            CellParams::reference(arch, bits).apply(&mut net, &mut cfg);
        }
        if let Some(o) = self
            .cells
            .iter()
            .find(|c| c.architecture == arch && c.bits == bits)
        {
            o.params.apply(&mut net, &mut cfg);
        }
        (net, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub architecture: Architecture,
    pub quant: String,
    pub seed: u64,
    pub status: String,
    pub epochs_completed: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub wall_s: f64,
}

/// Mean and sample standard deviation of the test accuracy of one cell over
/// its successful runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub architecture: Architecture,
    pub quant: String,
    pub n: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub runs: Vec<TrainRun>,
    pub summary: Vec<GridSummary>,
}

fn status_name(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::Exploded { .. } => "exploded",
        RunStatus::Unstable { .. } => "unstable",
        RunStatus::OutOfMemory { .. } => "oom",
    }
}

/// Trains one cell/seed on `data`.
pub fn run_cell(spec: &GridSpec, data: &Dataset, arch: Architecture, bits: Option<u32>, seed: u64) -> Result<TrainRun, TrainError> {
    let (net_spec, cfg) = spec.cell(arch, bits, seed);
    let mut net = build_network(&net_spec).map_err(|e| TrainError::Config(e.to_string()))?;
    train(&mut net, data, &cfg)
}

/// Runs every cell × seed on a worker pool. Rows come back in
/// (architecture, quant, seed) order regardless of scheduling.
pub fn run_grid(spec: &GridSpec) -> Result<GridResult, TrainError> {
    spec.validate()?;
    let data = generate_dataset(&spec.dataset).map_err(|e| TrainError::Config(e.to_string()))?;
    let jobs: Vec<(Architecture, Option<u32>, u64)> = spec
        .architectures
        .iter()
        .flat_map(|&a| spec.quant.iter().flat_map(move |&q| spec.seeds.iter().map(move |&s| (a, q, s))))
        .collect();
    let results: Vec<Result<TrainRun, TrainError>> = jobs
        .par_iter()
        .map(|&(a, q, s)| {
            let r = run_cell(spec, &data, a, q, s);
            match &r {
                Ok(run) => log::info!(
                    "grid {} {} seed {s}: test {:.3} ({})",
                    a.name(),
                    quant_label(q),
                    run.summary.test_acc,
                    status_name(&run.summary.status)
                ),
                Err(e) => log::warn!("grid {} {} seed {s}: {e}", a.name(), quant_label(q)),
            }
            r
        })
        .collect();

    let mut rows = Vec::with_capacity(jobs.len());
    let mut runs = Vec::new();
    for (&(a, q, s), r) in jobs.iter().zip(results) {
        let row = match r {
            Ok(run) => {
                let row = GridRow {
                    architecture: a,
                    quant: quant_label(q),
                    seed: s,
                    status: status_name(&run.summary.status).into(),
                    epochs_completed: run.summary.epochs_completed,
                    train_acc: run.summary.train_acc,
                    val_acc: run.summary.val_acc,
                    test_acc: run.summary.test_acc,
                    wall_s: run.summary.wall_s,
                };
                runs.push(run);
                row
            }
            Err(e @ TrainError::Config(_)) => return Err(e),
            Err(e) => GridRow {
                architecture: a,
                quant: quant_label(q),
                seed: s,
                status: format!("error: {e}"),
                epochs_completed: 0,
                train_acc: f64::NAN,
                val_acc: f64::NAN,
                test_acc: f64::NAN,
                wall_s: 0.0,
            },
        };
        rows.push(row);
    }
    let summary = summarize(&rows);
    Ok(GridResult { rows, runs, summary })
}

/// Sample mean and standard deviation (n − 1 denominator).
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// One summary per (architecture, quant) in first-appearance order. Only
/// rows with status `ok` enter the statistics; the rest count as failed.
pub fn summarize(rows: &[GridRow]) -> Vec<GridSummary> {
    let mut keys: Vec<(Architecture, String)> = Vec::new();
    for r in rows {
        let k = (r.architecture, r.quant.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(a, q)| {
            let cell: Vec<&GridRow> = rows.iter().filter(|r| r.architecture == a && r.quant == q).collect();
            let acc: Vec<f64> = cell.iter().filter(|r| r.status == "ok").map(|r| r.test_acc).collect();
            let (mean, std) = mean_std(&acc);
            GridSummary {
                architecture: a,
                quant: q,
                n: acc.len(),
                failed: cell.len() - acc.len(),
                mean,
                std,
            }
        })
        .collect()
}

fn to_csv<T: Serialize>(items: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for it in items {
        w.serialize(it).expect("rows serialize to csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

pub fn rows_csv(rows: &[GridRow]) -> String {
    to_csv(rows)
}

pub fn summary_csv(summary: &[GridSummary]) -> String {
    to_csv(summary)
}

/// Architectures as rows, quantization levels as columns, cells formatted
/// as `mean±std` in percent. Missing cells are empty.
pub fn wide_csv(summary: &[GridSummary]) -> String {
    let mut archs: Vec<Architecture> = Vec::new();
    let mut quants: Vec<String> = Vec::new();
    for s in summary {
        if !archs.contains(&s.architecture) {
            archs.push(s.architecture);
        }
        if !quants.contains(&s.quant) {
            quants.push(s.quant.clone());
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["architecture".to_string()];
    header.extend(quants.iter().cloned());
    w.write_record(&header).expect("csv header");
    for a in archs {
        let mut rec = vec![a.name().to_string()];
        for q in &quants {
            let cell = summary.iter().find(|s| s.architecture == a && &s.quant == q);
            rec.push(match cell {
                Some(GridSummary { mean: Some(m), std, .. }) => {
                    format!("{:.2}±{:.2}", 100.0 * m, 100.0 * std.unwrap_or(0.0))
                }
                _ => String::new(),
            });
        }
        w.write_record(&rec).expect("csv record");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a: Architecture, q: &str, seed: u64, acc: f64, status: &str) -> GridRow {
        GridRow {
            architecture: a,
            quant: q.into(),
            seed,
            status: status.into(),
            epochs_completed: 1,
            train_acc: acc,
            val_acc: acc,
            test_acc: acc,
            wall_s: 0.0,
        }
    }

    #[test]
    fn three_seeds_two_cells() {
        let mut rows = Vec::new();
        for s in 0..3 {
            rows.push(row(Architecture::FfLif, "FP", s, 0.5 + 0.1 * s as f64, "ok"));
            rows.push(row(Architecture::FfFelif, "FP", s, 0.9, "ok"));
        }
        let sum = summarize(&rows);
        assert_eq!(sum.len(), 2);
        assert_eq!(sum[0].n, 3);
        assert!((sum[0].mean.unwrap() - 0.6).abs() < 1e-12);
        assert!((sum[0].std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(sum[1].std, Some(0.0));
    }

    #[test]
    fn failed_runs_are_counted_not_averaged() {
        let rows = vec![
            row(Architecture::Rlif, "3", 0, 0.7, "ok"),
            row(Architecture::Rlif, "3", 1, 0.1, "exploded"),
        ];
        let sum = summarize(&rows);
        assert_eq!((sum[0].n, sum[0].failed), (1, 1));
        assert_eq!(sum[0].mean, Some(0.7));
        assert_eq!(sum[0].std, None);
        let wide = wide_csv(&sum);
        assert_eq!(wide, "architecture,3\nRLIF,70.00±0.00\n");
    }

    #[test]
    fn tiny_grid_runs_in_order() {
        let spec = GridSpec {
            architectures: vec![Architecture::FfLif],
            quant: vec![None, Some(3)],
            seeds: vec![0, 1],
            dataset: DatasetSpec {
                samples_per_class: 5,
                duration_ms: 20.0,
                ..DatasetSpec::default()
            },
            train: TrainConfig {
                steps: 20,
                epochs: 1,
                ..TrainConfig::default()
            },
            hidden: 8,
            ..GridSpec::default()
        };
        let res = run_grid(&spec).unwrap();
        let keys: Vec<(String, u64)> = res.rows.iter().map(|r| (r.quant.clone(), r.seed)).collect();
        assert_eq!(keys, [("FP".into(), 0), ("FP".into(), 1), ("3".into(), 0), ("3".into(), 1)]);
        assert_eq!(res.summary.len(), 2);
        let again = run_grid(&spec).unwrap();
        let strip = |rs: &[GridRow]| rs.iter().map(|r| (r.test_acc, r.status.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&res.rows), strip(&again.rows));
    }
}
