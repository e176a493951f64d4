"""Smoke test for the Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
Then run:                 python python/smoke_test.py   (or pytest)
"""

import json
import os
import random
import tempfile

import ropdf


def test_case_and_correlation():
    case = ropdf.Case("case9")
    assert case.n == 9
    delta, residual = case.equilibrium()
    assert len(delta) == 9 and residual < 1e-8
    r = case.correlation("constant")
    assert r[0][0] == 1.0
    assert all(r[i][j] == r[j][i] for i in range(9) for j in range(9))
    assert case.without_line(8, 9).n == 9


def test_kde_and_transport():
    rng = random.Random(3)
    samples = [rng.gauss(0.0, 1.0) for _ in range(2000)]
    f = ropdf.kde(samples, -6.0, 6.0, 240)
    dz = 12.0 / 240
    assert abs(sum(f) * dz - 1.0) < 1e-3
    out = ropdf.transport(f, -6.0, 6.0, 0.5, [0.0, 1.0, 2.0])
    assert len(out) == 3
    for snapshot in out:
        assert abs(sum(snapshot) * dz - 1.0) < 1e-6


def test_regression_recovers_a_line():
    rng = random.Random(5)
    x = [rng.uniform(-1, 1) for _ in range(500)]
    y = [0.3 - 2.0 * v + rng.gauss(0, 0.05) for v in x]
    method, bandwidth, m = ropdf.regress(x, y, -1.0, 1.0, 20, mode="linear")
    assert method == "linear" and bandwidth is None
    centre = -1.0 + 0.05
    assert abs(m[0] - (0.3 - 2.0 * centre)) < 0.05


def test_pipeline_round_trip():
    cfg = ropdf.Config(json.dumps({
        "sim": {"n_realizations": 200, "t_final": 1.0},
        "qoi": ["omega_4"],
    }))
    cfg.set(case="case9", correlation="uncorrelated", failure="none", seed=2)
    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        try:
            ropdf.run("solve", cfg, first)
            raise AssertionError("solve without learn must fail")
        except FileNotFoundError as e:
            assert "run" in str(e)
        for command in ["simulate", "learn", "solve"]:
            ropdf.run(command, cfg, first)
        assert os.path.isfile(os.path.join(first, "density_omega_4.csv"))
        checked, mismatches = ropdf.replay(os.path.join(first, "manifest.json"), second)
        assert checked > 0 and mismatches == []
    assert json.loads(cfg.to_json())["sim"]["seed"] == 2


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
    print("smoke test passed")
