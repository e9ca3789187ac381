"""Smoke test for the bruno_py extension module.

Build and run from the repository root:

    cargo build --release -p bruno-py --features extension-module
    cp target/release/libbruno_py.so crates/python/python/bruno_py.so
    python3 crates/python/python/smoke.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import bruno_py as b  # noqa: E402


def main():
    neuron = b.FeLif()
    assert math.isclose(neuron.params()["v_thr"], 3.388)
    tr = neuron.simulate(308e-12, 1e-6, 30_000, every=100)
    assert tr["spikes"], "308 pA should fire within 30 ms"
    print(f"FeLIF first spike at {tr['spikes'][0] * 1e3:.3f} ms")

    draws = b.sround(2.3, n=20_000, seed=1)
    mean = sum(draws) / len(draws)
    assert abs(mean - 2.3) < 0.02, mean
    q = b.quantize([0.5, -1.0, 0.25, 0.8], 3, stochastic=False)
    assert len(set(q["levels"])) <= 7 and q["ste"] == [1.0] * 4
    print(f"sround mean {mean:.4f}, 3-bit levels {q['levels']}")

    data = b.Dataset.generate({"samples_per_class": 10, "duration_ms": 50.0})
    assert len(data) == 40
    with tempfile.TemporaryDirectory() as d:
        data.save(d)
        again = b.Dataset.load(d)
        assert again.sample(3) == data.sample(3)

    net = b.Network("FF-LIF", inputs=12, hidden=16, outputs=4, seed=0)
    assert net.param_count == 12 * 16 + 16 * 4
    run = net.train(data, {"epochs": 3, "steps": 50, "adam": {"lr": 0.01}})
    assert run["summary"]["status"] == "ok"
    acc = net.evaluate(data, "train", {"steps": 50})
    print(f"FF-LIF after {len(run['epochs'])} epochs: train accuracy {acc:.3f}")

    report = b.verify()
    assert report["passed"], report
    print("verify:", ", ".join(c["name"] for c in report["checks"]))

    rows = b.bench({"sizes": [4], "steps": [3], "substeps": 10, "repeats": 1})
    assert [r["mode"] for r in rows] == ["bruno", "vanilla"]
    print("smoke test passed")


if __name__ == "__main__":
    main()
