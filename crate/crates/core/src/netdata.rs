//! Benchmark architectures, the synthetic spike dataset and the event file
//! format.
//!
//! Event files are plain text:
//!
//! ```text
//! channels=12 duration_us=200000 label=3
//! 1520,4
//! 1520,7
//! 2210,0
//! ```
//!
//! One `t_us,channel` pair per line with non-decreasing timestamps. A
//! dataset directory holds one file per sample plus `manifest.json` listing
//! every file with its label and split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neurons::{FeLifNeuron, FeLifParams, LifParams, RateGradient};
use crate::quant::{stream_rng, QuantSpec};

#[derive(Debug, Error)]
pub enum NetDataError {
    #[error("invalid network: {0}")]
    Dimension(String),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenKind {
    Lif,
    Rlif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Lif,
    Felif,
}

/// The three benchmark topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "FF-LIF")]
    FfLif,
    #[serde(rename = "RLIF")]
    Rlif,
    #[serde(rename = "FF-FeLIF")]
    FfFelif,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::FfLif, Architecture::Rlif, Architecture::FfFelif];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::FfLif => "FF-LIF",
            Architecture::Rlif => "RLIF",
            Architecture::FfFelif => "FF-FeLIF",
        }
    }

    pub fn kinds(self) -> (HiddenKind, OutputKind) {
        match self {
            Architecture::FfLif => (HiddenKind::Lif, OutputKind::Lif),
            Architecture::Rlif => (HiddenKind::Rlif, OutputKind::Lif),
            Architecture::FfFelif => (HiddenKind::Lif, OutputKind::Felif),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ff-lif" | "lif" => Ok(Architecture::FfLif),
            "rlif" => Ok(Architecture::Rlif),
            "ff-felif" | "felif" => Ok(Architecture::FfFelif),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub inputs: usize,
    pub hidden: usize,
    pub hidden_kind: HiddenKind,
    pub outputs: usize,
    pub output_kind: OutputKind,
    pub hidden_lif: LifParams,
    pub output_lif: LifParams,
    pub felif: FeLifParams,
    /// Synaptic current (A) delivered to a FeLIF neuron per unit of
    /// weighted hidden spikes in one coarse step.
    pub felif_current: f64,
    /// Gradient convention of the recorded FeLIF steps.
    pub felif_rate_gradient: RateGradient,
    pub quant: QuantSpec,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::new(Architecture::FfLif, 12, 256, 27)
    }
}

impl NetworkSpec {
    pub fn new(arch: Architecture, inputs: usize, hidden: usize, outputs: usize) -> Self {
        let (hidden_kind, output_kind) = arch.kinds();
        NetworkSpec {
            inputs,
            hidden,
            hidden_kind,
            outputs,
            output_kind,
            hidden_lif: LifParams {
                recurrent: hidden_kind == HiddenKind::Rlif,
                ..LifParams::default()
            },
            output_lif: LifParams::default(),
            felif: FeLifParams::default(),
            felif_current: 1e-9,
            felif_rate_gradient: RateGradient::Frozen,
            quant: QuantSpec::full_precision(),
            seed: 0,
        }
    }

    pub fn felif_neuron(&self) -> FeLifNeuron {
        FeLifNeuron {
            params: self.felif,
            rate_gradient: self.felif_rate_gradient,
        }
    }

    /// The architecture this spec corresponds to, or `None` for a
    /// combination outside the three benchmark topologies.
    pub fn architecture(&self) -> Option<Architecture> {
        match (self.hidden_kind, self.output_kind) {
            (HiddenKind::Lif, OutputKind::Lif) => Some(Architecture::FfLif),
            (HiddenKind::Rlif, OutputKind::Lif) => Some(Architecture::Rlif),
            (HiddenKind::Lif, OutputKind::Felif) => Some(Architecture::FfFelif),
            (HiddenKind::Rlif, OutputKind::Felif) => None,
        }
    }

    pub fn validate(&self) -> Result<(), NetDataError> {
        for (name, n) in [
            ("inputs", self.inputs),
            ("hidden", self.hidden),
            ("outputs", self.outputs),
        ] {
            if n == 0 {
                return Err(NetDataError::Dimension(format!("{name} must be positive")));
            }
        }
        let bad = |e: crate::neurons::NeuronError| NetDataError::Dimension(e.to_string());
        self.hidden_lif.validate().map_err(bad)?;
        self.output_lif.validate().map_err(bad)?;
        self.felif.validate().map_err(bad)?;
        self.quant
            .validate()
            .map_err(|e| NetDataError::Dimension(e.to_string()))?;
        if !(self.felif_current > 0.0 && self.felif_current.is_finite()) {
            return Err(NetDataError::Dimension("felif_current must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of a two-layer spiking network, row-major `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub w_in: Vec<f64>,
    pub w_rec: Option<Vec<f64>>,
    pub w_out: Vec<f64>,
}

impl Network {
    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.w_rec.as_ref().map_or(0, Vec::len) + self.w_out.len()
    }

    /// Parameter tensors in a fixed order: input, recurrent (if any), output.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = vec![&self.w_in[..]];
        if let Some(w) = &self.w_rec {
            out.push(w);
        }
        out.push(&self.w_out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.w_in];
        if let Some(w) = &mut self.w_rec {
            out.push(w);
        }
        out.push(&mut self.w_out);
        out
    }
}

fn uniform_init(rows: usize, cols: usize, seed: u64, stream: u64) -> Vec<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    let mut rng = stream_rng(seed, stream);
    (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

/// Allocates and initializes the weights, uniform in `±1/sqrt(fan_in)`.
///
/// Each matrix has its own random stream, so two specs that share a seed
/// and a hidden layer get the same hidden weights whatever their outputs.
pub fn build_network(spec: &NetworkSpec) -> Result<Network, NetDataError> {
    spec.validate()?;
    if spec.architecture().is_none() {
        log::warn!("building a network outside the benchmark topologies");
    }
    let w_in = uniform_init(spec.hidden, spec.inputs, spec.seed, 0);
    let w_rec = (spec.hidden_kind == HiddenKind::Rlif)
        .then(|| uniform_init(spec.hidden, spec.hidden, spec.seed, 1));
    let w_out = uniform_init(spec.outputs, spec.hidden, spec.seed, 2);
    Ok(Network {
        spec: spec.clone(),
        w_in,
        w_rec,
        w_out,
    })
}

/// Spike events of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeEventStream {
    pub channels: usize,
    pub duration_us: u64,
    pub label: usize,
    /// `(t_us, channel)`, sorted by time.
    pub events: Vec<(u64, usize)>,
}

impl SpikeEventStream {
    pub fn validate(&self) -> Result<(), String> {
        let mut last = 0;
        for (k, &(t, c)) in self.events.iter().enumerate() {
            if t < last {
                return Err(format!("event {k}: time {t} before {last}"));
            }
            if t >= self.duration_us {
                return Err(format!("event {k}: time {t} outside duration"));
            }
            if c >= self.channels {
                return Err(format!("event {k}: channel {c} out of range"));
            }
            last = t;
        }
        Ok(())
    }

    /// Event counts per channel in consecutive windows of `window_us`.
    ///
    /// Exactly `steps` windows are returned: later events are dropped with a
    /// warning and missing windows are zero.
    pub fn binned(&self, window_us: u64, steps: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.channels]; steps];
        let mut dropped = 0usize;
        for &(t, c) in &self.events {
            match out.get_mut((t / window_us) as usize) {
                Some(w) => w[c] += 1.0,
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            log::warn!(
                "sample longer than {steps} windows of {window_us} us; {dropped} events dropped"
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "channels={} duration_us={} label={}\n",
            self.channels, self.duration_us, self.label
        );
        for &(t, c) in &self.events {
            writeln!(s, "{t},{c}").expect("writing to a String");
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, NetDataError> {
        let err = |line: usize, msg: String| NetDataError::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut channels = None;
        let mut duration = None;
        let mut label = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| err(1, format!("malformed header field {field:?}")))?;
            let parsed: u64 = value
                .parse()
                .map_err(|_| err(1, format!("bad value for {key}: {value:?}")))?;
            match key {
                "channels" => channels = Some(parsed as usize),
                "duration_us" => duration = Some(parsed),
                "label" => label = Some(parsed as usize),
                _ => return Err(err(1, format!("unknown header key {key:?}"))),
            }
        }
        let (Some(channels), Some(duration_us), Some(label)) = (channels, duration, label) else {
            return Err(err(1, "header needs channels, duration_us and label".into()));
        };
        let mut events = Vec::new();
        let mut last = 0u64;
        for (k, line) in lines {
            let n = k + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (t, c) = line
                .split_once(',')
                .ok_or_else(|| err(n, format!("expected t_us,channel, got {line:?}")))?;
            let t: u64 = t
                .trim()
                .parse()
                .map_err(|_| err(n, format!("bad timestamp {t:?}")))?;
            let c: usize = c
                .trim()
                .parse()
                .map_err(|_| err(n, format!("bad channel {c:?}")))?;
            if t < last {
                return Err(err(n, format!("timestamp {t} decreases (previous {last})")));
            }
            if t >= duration_us {
                return Err(err(n, format!("timestamp {t} not below duration {duration_us}")));
            }
            if c >= channels {
                return Err(err(n, format!("channel {c} exceeds {channels} channels")));
            }
            last = t;
            events.push((t, c));
        }
        Ok(SpikeEventStream {
            channels,
            duration_us,
            label,
            events,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetDataError> {
        fs::write(path, self.to_text()).map_err(|e| NetDataError::Io(path.to_path_buf(), e))
    }
}

pub fn load_events(path: &Path) -> Result<SpikeEventStream, NetDataError> {
    let text = fs::read_to_string(path).map_err(|e| NetDataError::Io(path.to_path_buf(), e))?;
    SpikeEventStream::parse(&text, &path.display().to_string())
}

/// Parameters of the synthetic spatio-temporal dataset.
///
/// Each class owns a fixed random choice of active channels in each of
/// `segments` equal time segments. Samples draw Poisson events at
/// `active_rate_hz` on active channels and `base_rate_hz` elsewhere, then
/// shift every event by Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub channels: usize,
    pub duration_ms: f64,
    pub segments: usize,
    pub active_per_segment: usize,
    pub base_rate_hz: f64,
    pub active_rate_hz: f64,
    pub jitter_ms: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 4,
            channels: 12,
            duration_ms: 200.0,
            segments: 4,
            active_per_segment: 3,
            base_rate_hz: 5.0,
            active_rate_hz: 100.0,
            jitter_ms: 2.0,
            samples_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), NetDataError> {
        let bad = |m: &str| Err(NetDataError::Spec(m.into()));
        if self.classes == 0 || self.channels == 0 || self.segments == 0 {
            return bad("classes, channels and segments must be positive");
        }
        if self.active_per_segment > self.channels {
            return bad("active_per_segment exceeds channels");
        }
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.base_rate_hz >= 0.0 && self.active_rate_hz >= 0.0)
            || !self.base_rate_hz.is_finite()
            || !self.active_rate_hz.is_finite()
        {
            return bad("rates must be finite and non-negative");
        }
        if !(self.jitter_ms >= 0.0 && self.jitter_ms.is_finite()) {
            return bad("jitter must be non-negative");
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        (self.duration_ms * 1000.0).round() as u64
    }

    /// Active channels of every class, indexed `[class][segment]`.
    pub fn templates(&self) -> Vec<Vec<Vec<usize>>> {
        let mut rng = stream_rng(self.seed, u64::MAX);
        let all: Vec<usize> = (0..self.channels).collect();
        (0..self.classes)
            .map(|_| {
                (0..self.segments)
                    .map(|_| {
                        let mut active: Vec<usize> = all
                            .choose_multiple(&mut rng, self.active_per_segment)
                            .copied()
                            .collect();
                        active.sort_unstable();
                        active
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<SpikeEventStream>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&SpikeEventStream> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }
}

fn poisson_times<R: Rng>(rate_hz: f64, start_us: f64, end_us: f64, rng: &mut R, out: &mut Vec<f64>) {
    if rate_hz <= 0.0 {
        return;
    }
    let gap = Exp::new(rate_hz * 1e-6).expect("positive rate");
    let mut t = start_us;
    loop {
        t += gap.sample(rng);
        if t >= end_us {
            break;
        }
        out.push(t);
    }
}

/// Generates the dataset; sample `k` uses its own random stream, so the
/// result does not depend on generation order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, NetDataError> {
    spec.validate()?;
    let templates = spec.templates();
    let duration = spec.duration_us();
    let seg_len = duration as f64 / spec.segments as f64;
    let jitter = Normal::new(0.0, spec.jitter_ms * 1000.0).expect("finite jitter");
    let n = spec.classes * spec.samples_per_class;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % spec.classes;
        let mut rng = stream_rng(spec.seed, k as u64);
        let mut events = Vec::new();
        let mut times = Vec::new();
        for c in 0..spec.channels {
            for (s, active) in templates[label].iter().enumerate() {
                let rate = if active.contains(&c) {
                    spec.active_rate_hz
                } else {
                    spec.base_rate_hz
                };
                times.clear();
                let start = s as f64 * seg_len;
                poisson_times(rate, start, start + seg_len, &mut rng, &mut times);
                for &t in &times {
                    let t = if spec.jitter_ms > 0.0 {
                        t + jitter.sample(&mut rng)
                    } else {
                        t
                    };
                    let t = t.floor().clamp(0.0, (duration - 1) as f64) as u64;
                    events.push((t, c));
                }
            }
        }
        events.sort_unstable();
        samples.push(SpikeEventStream {
            channels: spec.channels,
            duration_us: duration,
            label,
            events,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, u64::MAX - 1));
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &k) in order.iter().enumerate() {
        splits[k] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Generator parameters, absent for imported data.
    pub spec: Option<DatasetSpec>,
    pub channels: usize,
    pub classes: usize,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one event file per sample and `manifest.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest, NetDataError> {
    fs::create_dir_all(dir).map_err(|e| NetDataError::Io(dir.to_path_buf(), e))?;
    let mut files = Vec::with_capacity(ds.samples.len());
    for (k, (s, split)) in ds.samples.iter().zip(&ds.splits).enumerate() {
        let file = format!("sample_{k:05}.evt");
        s.save(&dir.join(&file))?;
        files.push(ManifestEntry {
            file,
            label: s.label,
            split: *split,
        });
    }
    let manifest = DatasetManifest {
        spec: Some(ds.spec.clone()),
        channels: ds.spec.channels,
        classes: ds.spec.classes,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| NetDataError::Io(path, e))?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`save_dataset`] or assembled by
/// hand in the same layout.
pub fn load_dataset(dir: &Path) -> Result<Dataset, NetDataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| NetDataError::Io(path.clone(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.files.len());
    let mut splits = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let s = load_events(&dir.join(&entry.file))?;
        if s.channels != manifest.channels || s.label != entry.label || s.label >= manifest.classes
        {
            return Err(NetDataError::Parse {
                path: entry.file.clone(),
                line: 1,
                msg: "header disagrees with manifest".into(),
            });
        }
        samples.push(s);
        splits.push(entry.split);
    }
    let spec = manifest.spec.unwrap_or_else(|| DatasetSpec {
        classes: manifest.classes,
        channels: manifest.channels,
        duration_ms: samples.first().map_or(0.0, |s| s.duration_us as f64 / 1000.0),
        ..DatasetSpec::default()
    });
    Ok(Dataset {
        spec,
        samples,
        splits,
    })
}
