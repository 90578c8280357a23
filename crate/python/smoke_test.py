"""Smoke test for the stomax_py extension module.

Build and install first, e.g. `pip install maturin` then
`maturin develop -m crates/python/Cargo.toml`, and run
`python python/smoke_test.py`.
"""

import json
import math

import stomax_py as sm


def main():
    grid = sm.Grid(8)
    assert grid.dim == 81 + 72 + 72, grid.dim

    u0 = grid.initial_condition(7)
    assert len(u0) == grid.dim
    assert max(abs(d) for d in grid.divergence(u0)) == 0.0

    au = grid.apply_maxwell(u0)
    skew = grid.v_inner(au, u0)
    assert abs(skew) < 1e-12 * grid.energy(u0) * 16, skew

    prop = sm.Propagator(grid, 0.05)
    u1 = prop.apply(u0)
    assert math.isclose(grid.energy(u1), grid.energy(u0), rel_tol=1e-12)
    assert prop.spectral_abscissa() < 1e-10

    model = json.dumps({"drift": "zero", "diffusion": "additive_constant", "lambda_e": 0.0, "lambda_h": 0.0})
    zero = [0.0] * grid.dim
    assert prop.step("sexp", model, u0, zero) == u1

    assert sm.q_eigenvalue(1, 1) == 1.5
    assert sm.drift_rate(grid, 0.0, 0.0) == 0.0

    checks = json.loads(sm.run("check", "", ["grid.n_cells=6", "check.steps=20"]))
    assert all(c["passed"] for c in checks), checks

    trace = json.loads(
        sm.run("trace", "{}", ["grid.n_cells=4", "trace.samples=8", "trace.t_final=0.1", "trace.dt=0.05"])
    )
    assert [s["scheme"] for s in trace["schemes"]] == ["sexp", "em", "sem"]

    try:
        sm.run("trace", '{"bogus": 1}')
    except ValueError as err:
        assert "bogus" in str(err)
    else:
        raise AssertionError("unknown key accepted")

    print("stomax_py smoke test passed")


if __name__ == "__main__":
    main()
