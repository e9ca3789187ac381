use bruno_core::bruno::{batch_gradients, train, Mode, RunStatus, TrainConfig};
use bruno_core::harness::bench::{bench_case, BenchConfig};
use bruno_core::netdata::{build_network, generate_dataset, Architecture, Dataset, DatasetSpec, NetworkSpec, Split};
use bruno_core::quant::QuantSpec;

fn small_data() -> Dataset {
    generate_dataset(&DatasetSpec {
        samples_per_class: 8,
        duration_ms: 40.0,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        steps: 40,
        epochs: 2,
        batch_size: 4,
        substeps: 50,
        dt_fine: 2e-5,
        ..TrainConfig::default()
    }
}

fn bench(substeps: usize) -> BenchConfig {
    BenchConfig {
        substeps,
        dt_fine: 1e-3 / substeps as f64,
        repeats: 1,
        warmup: false,
        tape_budget: None,
        ..BenchConfig::default()
    }
}

#[test]
fn bruno_tape_grows_linearly_in_sequence_length() {
    let cfg = bench(100);
    let a = bench_case(&cfg, 16, 50, Mode::Bruno).unwrap().peak_nodes.unwrap() as f64;
    let b = bench_case(&cfg, 16, 100, Mode::Bruno).unwrap().peak_nodes.unwrap() as f64;
    let r = b / a;
    assert!((r - 2.0).abs() <= 0.2, "ratio {r}");
}

#[test]
fn one_substep_gives_identical_node_counts() {
    let cfg = bench(1);
    let b = bench_case(&cfg, 8, 20, Mode::Bruno).unwrap();
    let v = bench_case(&cfg, 8, 20, Mode::Vanilla).unwrap();
    assert_eq!(b.peak_nodes, v.peak_nodes);
    assert_eq!(b.spikes, v.spikes);
}

#[test]
fn forward_spikes_match_between_modes() {
    let cfg = bench(1000);
    let b = bench_case(&cfg, 8, 30, Mode::Bruno).unwrap();
    let v = bench_case(&cfg, 8, 30, Mode::Vanilla).unwrap();
    assert_eq!(b.spikes, v.spikes);
    assert!(b.peak_nodes.unwrap() * 100 < v.peak_nodes.unwrap());
}

#[test]
fn zero_learning_rate_keeps_loss_flat() {
    let data = small_data();
    let mut spec = NetworkSpec::new(Architecture::FfFelif, 12, 8, 4);
    spec.quant = QuantSpec::bits(4);
    let mut net = build_network(&spec).unwrap();
    let before = net.clone();
    let mut cfg = TrainConfig {
        shuffle: false,
        freeze_rounding: true,
        epochs: 3,
        ..small_cfg()
    };
    cfg.adam.lr = 0.0;
    let run = train(&mut net, &data, &cfg).unwrap();
    assert_eq!(net, before);
    let l0 = run.epochs[0].loss;
    assert!(run.epochs.iter().all(|e| e.loss == l0));
}

#[test]
fn training_is_deterministic() {
    let data = small_data();
    let spec = NetworkSpec::new(Architecture::Rlif, 12, 8, 4);
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let mut net = build_network(&spec).unwrap();
            let run = train(&mut net, &data, &small_cfg()).unwrap();
            (net, run.without_timings())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn batch_loss_is_mean_of_sample_losses() {
    let data = small_data();
    let net = build_network(&NetworkSpec::new(Architecture::FfLif, 12, 8, 4)).unwrap();
    let samples = data.split(Split::Train);
    let res = batch_gradients(&net, &samples[..4], &small_cfg(), 0).unwrap();
    assert_eq!(res.losses.len(), 4);
    assert!(res.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_eq!(res.grads.len(), net.params().len());
}

#[test]
fn tape_budget_stops_the_run() {
    let data = small_data();
    let mut net = build_network(&NetworkSpec::new(Architecture::FfLif, 12, 8, 4)).unwrap();
    let cfg = TrainConfig {
        tape_budget: Some(1 << 16),
        ..small_cfg()
    };
    let before = net.clone();
    let run = train(&mut net, &data, &cfg).unwrap();
    assert!(matches!(run.summary.status, RunStatus::OutOfMemory { epoch: 0, .. }));
    assert_eq!(net, before);
}
