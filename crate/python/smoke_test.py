"""Smoke test for the torus_lab_py extension.

Build and install first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/torus_lab_py-*.whl

then run ``python python/smoke_test.py``.
"""

import json
import math

import torus_lab_py as tl


def main():
    f = tl.Potential.example(1.0, 0.5, 6)
    assert len(f) == 2 * len(tl.enumerate_generators(6))
    g = f.gradient(0.3, -0.2)
    h = 1e-6
    num = (f(0.3 + h, -0.2) - f(0.3 - h, -0.2)) / (2 * h)
    assert abs(g[0] - num) < 1e-6

    back = tl.Potential.from_json(f.to_json())
    assert back.coeff(1, 2) == f.coeff(1, 2)

    gen = f.check_genericity(0.5, 6)
    assert gen["passed"], gen

    assert tl.bezout_complement(1, 0) == (0, -1)

    zones = tl.Zones.for_eps(0.5, 2.0, 1e-3, 0.1)
    assert zones.classify(1.0, 0.0).startswith("D1")

    pend = tl.ExactPendulum(1, 0)
    assert pend.separatrix_energy() == 1.0
    # large-energy rotation: I -> sqrt(2E)
    e = 1e6
    assert abs(pend.action("plus", e) / math.sqrt(2 * e) - 1) < 1e-6

    cert = tl.kam_certificate(1.0, 1.0, 0.0, 1.0, 1.0, 2.0)
    assert cert["satisfied"]

    rotor = tl.Potential(1.0, [(1, 0, 0.5, 0.0)])
    rep = tl.measure_scan(rotor, 0.0, 0.5, 2.0, json.dumps({"grid": 10, "t_final": 300.0}))
    assert rep["counts"]["non_torus"] == 0

    code, results = tl.run_stage("zones", json.dumps({"eps": [1e-3], "zone_grid": 20}))
    assert code == 0 and results["zones.json"][0]["cutoff"] == 2

    fit = tl.scaling_fit([(e, 0.3 * math.exp(-2.0 / e**0.1)) for e in (0.02, 0.01, 0.005, 0.0025)])
    assert abs(fit["a"] - 0.1) < 0.02, fit

    try:
        tl.Potential(1.0, [(0, 0, 1.0, 0.0)])
    except ValueError:
        pass
    else:
        raise AssertionError("mean mode accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
