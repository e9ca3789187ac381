//! Configuration file and flag merging. Precedence: built-in defaults, then
//! the TOML file given with `--config`, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use bruno_core::bruno::{Mode, TrainConfig};
use bruno_core::harness::bench::BenchConfig;
use bruno_core::harness::grid::GridSpec;
use bruno_core::harness::hpo::HpoSpec;
use bruno_core::harness::{parse_quant, CellParams};
use bruno_core::netdata::{Architecture, DatasetSpec, NetworkSpec};
use bruno_core::neurons::{FeLifParams, LifParams, RateGradient};

use crate::Failure;

/// Network settings that may appear under `[network]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkFile {
    pub architecture: Option<Architecture>,
    pub hidden: Option<usize>,
    /// `FP` or a bit width.
    pub quant: Option<String>,
    pub presets: Option<bool>,
    pub felif: Option<FeLifParams>,
    pub felif_current: Option<f64>,
    pub felif_rate_gradient: Option<RateGradient>,
    pub hidden_lif: Option<LifParams>,
    pub output_lif: Option<LifParams>,
    pub read_noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub train: Option<TrainConfig>,
    pub dataset: Option<DatasetSpec>,
    pub network: NetworkFile,
    pub bench: Option<BenchConfig>,
    pub grid: Option<GridSpec>,
    pub hpo: Option<HpoSpec>,
    /// Whether `[train]` set `steps` explicitly.
    #[serde(skip)]
    pub steps_given: bool,
}

pub fn load(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ConfigFile =
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))?;
    let raw: toml::Table = toml::from_str(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.steps_given = raw
        .get("train")
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key("steps"));
    Ok(cfg)
}

/// Training flags; every field of the training configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// bruno or vanilla
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Fine integration step (s).
    #[arg(long)]
    pub dt_fine: Option<f64>,
    /// Coarse step (s); defaults to substeps × dt_fine.
    #[arg(long)]
    pub dt_coarse: Option<f64>,
    /// Fine steps per coarse step.
    #[arg(long)]
    pub substeps: Option<usize>,
    /// Sequence length in coarse steps; defaults to the sample duration.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of shuffling, rounding and weight initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub surrogate_slope: Option<f64>,
    /// Global gradient-norm clipping threshold.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Reuse one set of stochastic-rounding draws for all minibatches.
    #[arg(long)]
    pub freeze_rounding: bool,
    #[arg(long)]
    pub no_shuffle: bool,
    /// Tape memory budget in MiB of accounted bytes.
    #[arg(long)]
    pub tape_budget_mb: Option<usize>,
    /// Evaluate validation and test accuracy after every epoch.
    #[arg(long)]
    pub eval_every_epoch: bool,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.mode => cfg.mode);
        set!(self.dt_fine => cfg.dt_fine);
        set!(self.substeps => cfg.substeps);
        set!(self.steps => cfg.steps);
        set!(self.lr => cfg.adam.lr);
        set!(self.beta1 => cfg.adam.beta1);
        set!(self.beta2 => cfg.adam.beta2);
        set!(self.adam_eps => cfg.adam.eps);
        set!(self.epochs => cfg.epochs);
        set!(self.batch_size => cfg.batch_size);
        set!(self.seed => cfg.seed);
        set!(self.surrogate_slope => cfg.surrogate_slope);
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        if let Some(mb) = self.tape_budget_mb {
            cfg.tape_budget = Some(mb << 20);
        }
        cfg.freeze_rounding |= self.freeze_rounding;
        cfg.shuffle &= !self.no_shuffle;
        cfg.eval_every_epoch |= self.eval_every_epoch;
        cfg.dt_coarse = self.dt_coarse.unwrap_or(cfg.dt_fine * cfg.substeps as f64);
    }
}

/// Synthetic dataset flags; every field of the generator spec.
#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    /// Load a dataset directory instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub duration_ms: Option<f64>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub active_per_segment: Option<usize>,
    #[arg(long)]
    pub base_rate_hz: Option<f64>,
    #[arg(long)]
    pub active_rate_hz: Option<f64>,
    #[arg(long)]
    pub jitter_ms: Option<f64>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl DataFlags {
    pub fn apply(&self, spec: &mut DatasetSpec) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { spec.$field = v; })*
            };
        }
        set!(
            classes => classes,
            channels => channels,
            duration_ms => duration_ms,
            segments => segments,
            active_per_segment => active_per_segment,
            base_rate_hz => base_rate_hz,
            active_rate_hz => active_rate_hz,
            jitter_ms => jitter_ms,
            samples_per_class => samples_per_class,
            data_seed => seed
        );
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct NetFlags {
    /// FF-LIF, RLIF or FF-FeLIF
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// FP or a bit width (8, 4, 3, ...)
    #[arg(long)]
    pub quant: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Start from the preset decays, learning rate and threshold of the cell.
    #[arg(long)]
    pub presets: bool,
    /// full or frozen
    #[arg(long)]
    pub rate_gradient: Option<RateGradient>,
    /// FeLIF input current per unit of weighted spikes (A).
    #[arg(long)]
    pub felif_current: Option<f64>,
    /// Read noise in level gaps.
    #[arg(long)]
    pub read_noise: Option<f64>,
}

/// Builds the network spec and training config of a `train` run.
pub fn network_and_train(
    file: &ConfigFile,
    net: &NetFlags,
    data: &DatasetSpec,
    flags: &TrainFlags,
) -> Result<(NetworkSpec, TrainConfig), Failure> {
    let nf = &file.network;
    let arch = net.arch.or(nf.architecture).unwrap_or(Architecture::FfLif);
    let quant = net.quant.clone().or_else(|| nf.quant.clone()).unwrap_or_else(|| "FP".into());
    let bits = parse_quant(&quant).map_err(Failure::Usage)?;
    let hidden = net.hidden.or(nf.hidden).unwrap_or(64);
    let mut cfg = file.train.clone().unwrap_or_default();
    let seed = flags.seed.unwrap_or(cfg.seed);
    let mut spec = bruno_core::harness::cell_network(arch, bits, data.channels, hidden, data.classes, seed);
    if net.presets || nf.presets.unwrap_or(false) {
        CellParams::reference(arch, bits).apply(&mut spec, &mut cfg);
    }
    if let Some(p) = nf.felif {
        spec.felif = p;
    }
    if let Some(p) = nf.hidden_lif {
        spec.hidden_lif = p;
    }
    if let Some(p) = nf.output_lif {
        spec.output_lif = p;
    }
    if let Some(x) = net.felif_current.or(nf.felif_current) {
        spec.felif_current = x;
    }
    if let Some(r) = net.rate_gradient.or(nf.felif_rate_gradient) {
        spec.felif_rate_gradient = r;
    }
    if let Some(s) = net.read_noise.or(nf.read_noise_sigma) {
        spec.quant.read_noise_sigma = s;
    }
    flags.apply(&mut cfg);
    if flags.steps.is_none() && !file.steps_given {
        cfg.steps = steps_for(data.duration_ms, cfg.dt_coarse);
    }
    Ok((spec, cfg))
}

/// Coarse steps covering `duration_ms`.
pub fn steps_for(duration_ms: f64, dt_coarse: f64) -> usize {
    ((duration_ms * 1e-3 / dt_coarse) - 1e-9).ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let text = "[train]\nepochs = 7\nsubsteps = 10\n[network]\narchitecture = \"FF-FeLIF\"\nquant = \"4\"\n[network.felif]\nv_thr = 3.0\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let file = load(Some(&p)).unwrap();
        assert!(!file.steps_given);
        let flags = TrainFlags {
            epochs: Some(3),
            ..TrainFlags::default()
        };
        let (spec, cfg) = network_and_train(&file, &NetFlags::default(), &DatasetSpec::default(), &flags).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.substeps, 10);
        assert!((cfg.dt_coarse - 1e-5).abs() < 1e-18);
        assert_eq!(cfg.steps, 20_000);
        assert_eq!(spec.quant.n_bits, Some(4));
        assert_eq!(spec.felif.v_thr, 3.0);
        assert_eq!(spec.architecture(), Some(Architecture::FfFelif));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[dataset]\nclases = 3\n").unwrap();
        assert!(matches!(load(Some(&p)), Err(Failure::Usage(_))));
    }

    #[test]
    fn steps_cover_duration() {
        assert_eq!(steps_for(200.0, 1e-3), 200);
        assert_eq!(steps_for(200.5, 1e-3), 201);
    }
}
