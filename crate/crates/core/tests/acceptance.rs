//! Acceptance criteria 1-10, run sequentially in one test so that timings
//! are not disturbed by other tests. Prints one PASS/FAIL line per
//! criterion; criterion 9 only warns.

use std::time::Instant;

use bruno_core::bruno::{bruno_step, train, DualRate, Mode, RunStatus, TrainConfig};
use bruno_core::harness::bench::{bench_case, BenchConfig};
use bruno_core::harness::grid::{run_grid, GridSpec};
use bruno_core::harness::verify::{felif_transient, gradient_fd, quant_levels, s1_outcome, sround_unbiased};
use bruno_core::netdata::{
    build_network, generate_dataset, Architecture, Dataset, DatasetSpec, NetworkSpec, SpikeEventStream, Split,
};
use bruno_core::neurons::{FeLifNeuron, FeLifParams, RateGradient};
use bruno_core::tape::{Tape, Value};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(n: usize, title: &str, limit_s: f64, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let mut o = f();
    let secs = t0.elapsed().as_secs_f64();
    if secs > limit_s {
        o.passed = false;
        o.detail.push_str(&format!("; runtime {secs:.1} s over {limit_s} s"));
    }
    println!(
        "criterion {n:>2} [{}] {title}: {} ({secs:.2} s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
    o.passed
}

fn c1() -> Outcome {
    let o = s1_outcome().expect("runs");
    Outcome {
        passed: o.identical_forward && o.identical_loss && o.identical_grads && o.identical_update,
        detail: format!(
            "forward {}, loss {}, gradients {}, updated weights {} bit-identical; nodes {}/{}",
            o.identical_forward, o.identical_loss, o.identical_grads, o.identical_update, o.nodes.0, o.nodes.1
        ),
    }
}

fn c2() -> Outcome {
    let c = gradient_fd();
    Outcome {
        passed: c.passed,
        detail: c.detail,
    }
}

// ---- criterion 3: forward-mode oracle of the hybrid graph ----

const NP: usize = 6;

/// Value with derivatives with respect to NP parameters.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; NP],
}

impl Dual {
    fn c(v: f64) -> Dual {
        Dual { v, d: [0.0; NP] }
    }
    fn var(v: f64, k: usize) -> Dual {
        let mut d = [0.0; NP];
        d[k] = 1.0;
        Dual { v, d }
    }
    fn map(self, v: f64, dv: f64) -> Dual {
        Dual {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Dual { v: self.v + o.v, d }
    }
    fn sub(self, o: Dual) -> Dual {
        self.add(o.map(-o.v, -1.0))
    }
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; NP];
        for k in 0..NP {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
    fn scale(self, c: f64) -> Dual {
        self.map(self.v * c, c)
    }
}

struct OracleParams {
    p: FeLifParams,
    frozen: bool,
}

/// Euler step of the FeLIF (V, P) pair on duals.
fn euler(n: &OracleParams, v: Dual, pol: Dual, i: Dual, dt: f64) -> (Dual, Dual) {
    let p = &n.p;
    let e = v.scale(1.0 / p.d_fe);
    // rate = exp(-(E_a/|E|)^alpha) / tau0 for E != 0
    let mag = e.v.abs();
    let sgn = e.v.signum();
    let x = (p.e_a / mag).powf(p.alpha_merz);
    let rate_v = (-x).exp() / p.tau0;
    // d rate / dE = rate * alpha * x / E
    let drate_de = rate_v * p.alpha_merz * x / e.v;
    let rate = if n.frozen { Dual::c(rate_v) } else { e.map(rate_v, drate_de) };
    let target = Dual::c(sgn * p.p_s);
    let dpdt = target.sub(pol).mul(rate);
    let raw = pol.add(dpdt.scale(dt));
    let p_new = if raw.v <= -p.p_s {
        Dual::c(-p.p_s)
    } else if raw.v >= p.p_s {
        Dual::c(p.p_s)
    } else {
        raw
    };
    let i_p = p_new.sub(pol).scale(p.area / dt);
    let i_leak = v.scale(1.0 / p.r_leak);
    let dv = i.sub(i_leak).sub(i_p).scale(dt / (p.c0 + p.c_par));
    (v.add(dv), p_new)
}

fn surrogate(u: f64, k: f64) -> f64 {
    let d = 1.0 + k * u.abs();
    1.0 / (d * d)
}

/// Loss Σ spikes + Σ V_T + Σ P_T / P_s over `steps` coarse steps, where the
/// values follow the fine trajectory and the derivatives follow the coarse
/// Jacobians evaluated along it.
fn oracle(n: &OracleParams, theta: &[f64; NP], dr: &DualRate, steps: usize) -> (f64, [f64; NP]) {
    let scale = 1e-9;
    let mut v: Vec<Dual> = (0..2).map(|j| Dual::var(theta[2 + j], 2 + j)).collect();
    let mut pol: Vec<Dual> = (0..2).map(|j| Dual::var(theta[4 + j], 4 + j)).collect();
    let cur: Vec<Dual> = (0..2).map(|j| Dual::var(theta[j], j).scale(scale)).collect();
    let mut loss = Dual::c(0.0);
    for _ in 0..steps {
        for j in 0..2 {
            let (mut fv, mut fp) = (Dual::c(v[j].v), Dual::c(pol[j].v));
            for _ in 0..dr.substeps {
                (fv, fp) = euler(n, fv, fp, Dual::c(cur[j].v), dr.dt_fine);
            }
            let (cv, cp) = euler(n, v[j], pol[j], cur[j], dr.dt_coarse);
            let hv = Dual { v: fv.v, d: cv.d };
            let hp = Dual { v: fp.v, d: cp.d };
            let u = hv.v - n.p.v_thr;
            let spike = hv.map(if u >= 0.0 { 1.0 } else { 0.0 }, surrogate(u, dr.slope));
            let keep = Dual::c(1.0).sub(spike);
            v[j] = hv.mul(keep);
            pol[j] = hp.mul(keep);
            loss = loss.add(spike);
        }
    }
    for j in 0..2 {
        loss = loss.add(v[j]).add(pol[j].scale(1.0 / n.p.p_s));
    }
    (loss.v, loss.d)
}

fn tape_gradient(neuron: &FeLifNeuron, theta: &[f64; NP], dr: &DualRate, steps: usize) -> (f64, [f64; NP]) {
    let mut t = Tape::new();
    let w = t.leaf(theta[0..2].to_vec()).unwrap();
    let v0 = t.leaf(theta[2..4].to_vec()).unwrap();
    let p0 = t.leaf(theta[4..6].to_vec()).unwrap();
    let cur = t.scale(&w, 1e-9).unwrap();
    let mut state = vec![v0.clone(), p0.clone()];
    let mut loss = Value::scalar(0.0);
    for _ in 0..steps {
        let (s, spikes) = bruno_step(&mut t, neuron, &state, &cur, dr).unwrap();
        let n = t.sum(&spikes).unwrap();
        loss = t.add(&loss, &n).unwrap();
        state = s;
    }
    let sv = t.sum(&state[0]).unwrap();
    let sp = t.sum(&state[1]).unwrap();
    let sp = t.scale(&sp, 1.0 / neuron.params.p_s).unwrap();
    let loss = t.add(&loss, &sv).unwrap();
    let loss = t.add(&loss, &sp).unwrap();
    let g = t.backward(&loss).unwrap();
    let mut out = [0.0; NP];
    for (k, leaf) in [&w, &v0, &p0].into_iter().enumerate() {
        let gk = g.wrt(leaf);
        out[2 * k] = gk[0];
        out[2 * k + 1] = gk[1];
    }
    (loss.item(), out)
}

fn c3() -> Outcome {
    let p = FeLifParams::default();
    // Neuron 0 sits in the switching stall, neuron 1 fires in the first
    // coarse step and restarts from reset.
    let theta = [0.5, 5.0, 1.05, 3.3, 0.3 * p.p_s, 0.999 * p.p_s];
    let dr = DualRate {
        mode: Mode::Bruno,
        dt_fine: 1e-5,
        dt_coarse: 1e-4,
        substeps: 10,
        slope: 10.0,
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for rg in [RateGradient::Full, RateGradient::Frozen] {
        let neuron = FeLifNeuron {
            params: p,
            rate_gradient: rg,
        };
        let (lt, gt) = tape_gradient(&neuron, &theta, &dr, 3);
        let (lo, go) = oracle(
            &OracleParams {
                p,
                frozen: rg == RateGradient::Frozen,
            },
            &theta,
            &dr,
            3,
        );
        let mut err = ((lt - lo) / lo.abs().max(1.0)).abs();
        for k in 0..NP {
            err = err.max((gt[k] - go[k]).abs() / go[k].abs().max(1.0));
        }
        worst = worst.max(err);
        parts.push(format!("{rg:?} max rel err {err:.1e}"));
    }
    Outcome {
        passed: worst <= 1e-12,
        detail: parts.join(", "),
    }
}

fn bench_cfg() -> BenchConfig {
    BenchConfig {
        sizes: vec![64],
        steps: vec![200],
        substeps: 1000,
        tape_budget: None,
        ..BenchConfig::default()
    }
}

fn c4_c5() -> (Outcome, Outcome) {
    let cfg = bench_cfg();
    let b = bench_case(&cfg, 64, 200, Mode::Bruno).unwrap();
    let v = bench_case(&cfg, 64, 200, Mode::Vanilla).unwrap();
    assert_eq!(b.status, "ok");
    assert_eq!(v.status, "ok");
    let (bn, vn) = (b.peak_nodes.unwrap(), v.peak_nodes.unwrap());
    let ratio = bn as f64 / vn as f64;
    let mem = Outcome {
        passed: ratio <= 0.005,
        detail: format!(
            "peak nodes {bn} vs {vn} (ratio {ratio:.5}), accounted {:.1} MB vs {:.1} MB, output spikes {} vs {}",
            b.peak_bytes.unwrap() as f64 / 1e6,
            v.peak_bytes.unwrap() as f64 / 1e6,
            b.spikes.unwrap(),
            v.spikes.unwrap()
        ),
    };
    let (bb, vb) = (b.bwd_s.unwrap(), v.bwd_s.unwrap());
    let time = Outcome {
        passed: bb <= vb / 5.0,
        detail: format!(
            "median backward {bb:.4} s vs {vb:.4} s (ratio {:.4}); forward {:.3} s vs {:.3} s",
            bb / vb,
            b.fwd_s.unwrap(),
            v.fwd_s.unwrap()
        ),
    };
    (mem, time)
}

fn c6() -> Outcome {
    let p = FeLifParams::default();
    let c = felif_transient(&p, &p);
    let mut faulty = p;
    faulty.c0 *= 10.0;
    let neg = felif_transient(&faulty, &p);
    Outcome {
        passed: c.passed && !neg.passed,
        detail: format!(
            "{}; C0 x10 control {}",
            c.detail,
            if neg.passed { "passed (bad)" } else { "fails as expected" }
        ),
    }
}

fn c7() -> Outcome {
    let a = sround_unbiased(100_000);
    let b = quant_levels();
    Outcome {
        passed: a.passed && b.passed,
        detail: format!("sround {}; {}", a.detail, b.detail),
    }
}

fn desk_task() -> Dataset {
    generate_dataset(&DatasetSpec::default()).unwrap()
}

fn c8() -> Outcome {
    let data = desk_task();
    let lif_cfg = TrainConfig {
        steps: 200,
        epochs: 50,
        ..TrainConfig::default()
    };
    let mut lif = build_network(&NetworkSpec::new(Architecture::FfLif, 12, 64, 4)).unwrap();
    let run = train(&mut lif, &data, &lif_cfg).unwrap();
    let best_train = run.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max);
    let first = run.epochs.iter().position(|e| e.train_acc >= 0.9);

    let fe_cfg = TrainConfig {
        steps: 200,
        epochs: 6,
        ..TrainConfig::default()
    };
    let mut fe = build_network(&NetworkSpec::new(Architecture::FfFelif, 12, 64, 4)).unwrap();
    let fe_run = train(&mut fe, &data, &fe_cfg).unwrap();
    let fe_ok = fe_run.summary.status == RunStatus::Ok && fe_run.summary.test_acc >= 0.8;
    Outcome {
        passed: best_train >= 0.9 && fe_ok,
        detail: format!(
            "FF-LIF FP best train {best_train:.3} (>= 0.9 first at epoch {}); FF-FeLIF BRUNO test {:.3} after {} epochs",
            first.map_or("-".into(), |e| (e + 1).to_string()),
            fe_run.summary.test_acc,
            fe_run.summary.epochs_completed
        ),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn c9() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let spec = GridSpec {
        architectures: vec![Architecture::FfLif, Architecture::FfFelif],
        quant: vec![None, Some(3)],
        seeds: seeds.clone(),
        dataset: DatasetSpec {
            samples_per_class: 40,
            ..DatasetSpec::default()
        },
        train: TrainConfig {
            steps: 200,
            epochs: 5,
            ..TrainConfig::default()
        },
        hidden: 32,
        ..GridSpec::default()
    };
    let res = run_grid(&spec).unwrap();
    let acc = |a: Architecture, q: &str, s: u64| {
        res.rows
            .iter()
            .find(|r| r.architecture == a && r.quant == q && r.seed == s)
            .map(|r| r.test_acc)
            .unwrap()
    };
    let drop = |a| median(seeds.iter().map(|&s| acc(a, "FP", s) - acc(a, "3", s)).collect());
    let (dl, df) = (drop(Architecture::FfLif), drop(Architecture::FfFelif));
    let cells: Vec<String> = res
        .summary
        .iter()
        .map(|s| format!("{} {} {:.3}", s.architecture.name(), s.quant, s.mean.unwrap_or(f64::NAN)))
        .collect();
    Outcome {
        passed: df < dl,
        detail: format!("median 3-bit drop FF-FeLIF {df:.3} vs FF-LIF {dl:.3}; means [{}]", cells.join(", ")),
    }
}

fn c10() -> Outcome {
    // A single hidden neuron firing every step drives two FeLIF outputs
    // with a constant 100 nA; with the exact rate gradient the fine-step
    // backward over 500 ms overflows.
    let stream = |label| SpikeEventStream {
        channels: 1,
        duration_us: 500_000,
        label,
        events: (0..500u64).map(|k| (k * 1000, 0)).collect(),
    };
    let data = Dataset {
        spec: DatasetSpec {
            classes: 2,
            channels: 1,
            duration_ms: 500.0,
            ..DatasetSpec::default()
        },
        samples: vec![stream(0)],
        splits: vec![Split::Train],
    };
    let mut spec = NetworkSpec::new(Architecture::FfFelif, 1, 1, 2);
    spec.felif_rate_gradient = RateGradient::Full;
    spec.felif_current = 100e-9;
    let mut net = build_network(&spec).unwrap();
    net.w_in = vec![10.0];
    net.w_out = vec![1.0, 0.5];
    let before = net.clone();
    let cfg = TrainConfig {
        mode: Mode::Vanilla,
        substeps: 1000,
        steps: 500,
        epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let run = train(&mut net, &data, &cfg).unwrap();
    let finite = net.params().iter().all(|p| p.iter().all(|w| w.is_finite()));
    let exploded = matches!(run.summary.status, RunStatus::Exploded { epoch: 0, .. });
    Outcome {
        passed: exploded && finite && net == before,
        detail: format!(
            "status {}, weights finite {finite}, unchanged {}",
            serde_json::to_string(&run.summary.status).unwrap(),
            net == before
        ),
    }
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut check = |n: usize, ok: bool| {
        if !ok {
            failed.push(n);
        }
    };
    check(1, report(1, "BRUNO equals BPTT at S=1", 1.0, c1));
    check(2, report(2, "gradients match finite differences", 10.0, c2));
    check(3, report(3, "BRUNO gradient equals hybrid-graph oracle", 1.0, c3));
    let t0 = Instant::now();
    let (mem, time) = c4_c5();
    let secs = t0.elapsed().as_secs_f64();
    check(4, report(4, "tape memory ratio, 64 FeLIF, T=200, S=1000", 300.0, || mem));
    check(5, report(5, "backward time ratio, same configuration", 600.0 - secs, || time));
    println!("             (criteria 4 and 5 measured together in {secs:.1} s)");
    check(6, report(6, "FeLIF 1 us Euler against 10 ns reference", 120.0, c6));
    check(7, report(7, "quantization suite", 30.0, c7));
    check(8, report(8, "learnability on the desk-scale task", 900.0, c8));
    let soft = report(9, "3-bit robustness direction (soft)", f64::INFINITY, c9);
    if !soft {
        println!("             warning: criterion 9 is soft and does not fail the suite");
    }
    check(10, report(10, "vanilla explosion is detected and reported", 120.0, c10));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
