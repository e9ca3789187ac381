//! Random-search hyperparameter optimization for one grid cell.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cell_network, quant_label, CellParams};
use crate::bruno::{train, RunStatus, TrainConfig, TrainError};
use crate::netdata::{build_network, generate_dataset, Architecture, DatasetSpec};
use crate::quant::stream_rng;

/// Closed sampling interval; `lo == hi` pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn point(x: f64) -> Self {
        Range { lo: x, hi: x }
    }

    fn check(&self, name: &str, positive: bool) -> Result<(), TrainError> {
        let ok = self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi && (!positive || self.lo > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("bad search range for {name}: [{}, {}]", self.lo, self.hi)))
        }
    }

    fn uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn log_uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo.ln()..=self.hi.ln()).exp()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSpec {
    pub architecture: Architecture,
    pub bits: Option<u32>,
    pub alpha_hid: Range,
    pub beta_hid: Range,
    pub alpha_out: Range,
    pub beta_out: Range,
    /// Sampled log-uniformly.
    pub lr: Range,
    pub felif_v_thr: Range,
    pub trials: usize,
    /// Epochs per trial.
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl Default for HpoSpec {
    fn default() -> Self {
        HpoSpec {
            architecture: Architecture::FfLif,
            bits: None,
            alpha_hid: Range::new(0.1, 0.99),
            beta_hid: Range::new(0.1, 0.99),
            alpha_out: Range::new(0.1, 0.99),
            beta_out: Range::new(0.1, 0.99),
            lr: Range::new(1e-4, 1e-1),
            felif_v_thr: Range::new(2.0, 4.0),
            trials: 20,
            epochs: 5,
            seed: 0,
            hidden: 64,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl HpoSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.trials == 0 {
            return Err(TrainError::Config("hpo needs at least one trial".into()));
        }
        for (name, r) in [
            ("alpha_hid", self.alpha_hid),
            ("beta_hid", self.beta_hid),
            ("alpha_out", self.alpha_out),
            ("beta_out", self.beta_out),
        ] {
            r.check(name, false)?;
            if r.lo < 0.0 || r.hi > 1.0 {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        self.lr.check("lr", true)?;
        self.felif_v_thr.check("felif_v_thr", true)?;
        self.train.validate()
    }

    /// Hyperparameters of trial `k`, drawn from its own stream.
    pub fn sample(&self, k: usize) -> CellParams {
        let mut rng = stream_rng(self.seed, k as u64);
        CellParams {
            alpha_hid: self.alpha_hid.uniform(&mut rng),
            beta_hid: self.beta_hid.uniform(&mut rng),
            alpha_out: self.alpha_out.uniform(&mut rng),
            beta_out: self.beta_out.uniform(&mut rng),
            lr: self.lr.log_uniform(&mut rng),
            felif_v_thr: self.felif_v_thr.uniform(&mut rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: CellParams,
    pub status: String,
    pub val_acc: f64,
    pub train_acc: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoResult {
    pub architecture: Architecture,
    pub quant: String,
    pub best: CellParams,
    pub best_trial: usize,
    pub best_val_acc: f64,
    pub trials: Vec<Trial>,
}

/// Trains one network with the given hyperparameters and returns the run's
/// final validation accuracy.
pub fn run_trial(spec: &HpoSpec, index: usize, params: CellParams) -> Result<Trial, TrainError> {
    let data = generate_dataset(&spec.dataset).map_err(|e| TrainError::Config(e.to_string()))?;
    trial_on(spec, &data, index, params)
}

fn trial_on(spec: &HpoSpec, data: &crate::netdata::Dataset, index: usize, params: CellParams) -> Result<Trial, TrainError> {
    let mut net_spec = cell_network(
        spec.architecture,
        spec.bits,
        spec.dataset.channels,
        spec.hidden,
        spec.dataset.classes,
        spec.seed,
    );
    let mut cfg = TrainConfig {
        epochs: spec.epochs,
        seed: spec.seed,
        ..spec.train.clone()
    };
    params.apply(&mut net_spec, &mut cfg);
    let mut net = build_network(&net_spec).map_err(|e| TrainError::Config(e.to_string()))?;
    let run = train(&mut net, data, &cfg)?;
    let status = match run.summary.status {
        RunStatus::Ok => "ok",
        RunStatus::Exploded { .. } => "exploded",
        RunStatus::Unstable { .. } => "unstable",
        RunStatus::OutOfMemory { .. } => "oom",
    };
    Ok(Trial {
        index,
        params,
        status: status.into(),
        val_acc: run.summary.val_acc,
        train_acc: run.summary.train_acc,
        wall_s: run.summary.wall_s,
    })
}

/// Runs all trials (in parallel) and returns the one with the highest
/// validation accuracy; ties go to the earliest trial.
pub fn run_hpo(spec: &HpoSpec) -> Result<HpoResult, TrainError> {
    spec.validate()?;
    let data = generate_dataset(&spec.dataset).map_err(|e| TrainError::Config(e.to_string()))?;
    let trials: Vec<Trial> = (0..spec.trials)
        .into_par_iter()
        .map(|k| {
            let p = spec.sample(k);
            let t = trial_on(spec, &data, k, p);
            if let Ok(t) = &t {
                log::info!("hpo trial {k}: val {:.3} ({})", t.val_acc, t.status);
            }
            t
        })
        .collect::<Result<_, _>>()?;
    let score = |t: &Trial| if t.val_acc.is_finite() { t.val_acc } else { f64::NEG_INFINITY };
    let best = trials
        .iter()
        .fold(&trials[0], |b, t| if score(t) > score(b) { t } else { b });
    Ok(HpoResult {
        architecture: spec.architecture,
        quant: quant_label(spec.bits),
        best: best.params,
        best_trial: best.index,
        best_val_acc: best.val_acc,
        trials: trials.clone(),
    })
}
