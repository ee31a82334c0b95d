#!/usr/bin/env python3
"""
Tests for mvfbm.coefficients: Wasserstein distances, moduli, builtin families and assumption probes.
Run from project root: python test_coefficients.py   (or: pytest test_coefficients.py)
"""
import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np

from mvfbm.coefficients import (
    FAMILIES,
    AssumptionParams,
    EmpiricalMeasure,
    ModulusSpec,
    ProbeSampler,
    builtin_family,
    modulus_eval,
    origin_level,
    osgood_integral,
    probe_growth_g,
    probe_H1,
    probe_H2,
    wasserstein2,
)
from mvfbm.errors import DomainError, UnsupportedInstanceError


def _raises(exc, fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except exc:
        return True
    return False


def test_wasserstein_examples():
    mu = EmpiricalMeasure(np.array([0.0, 0.3, 2.0]))
    assert wasserstein2(mu, mu) == 0.0
    assert math.isclose(wasserstein2(EmpiricalMeasure([0.0]), EmpiricalMeasure([1.0])), 1.0)
    assert math.isclose(wasserstein2(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([0.5, 1.5])), 0.5)


def test_wasserstein_unequal_counts_one_dimension():
    # {0} against {-1, 1}: every quantile level moves by 1
    assert math.isclose(wasserstein2(EmpiricalMeasure([0.0]), EmpiricalMeasure([-1.0, 1.0])), 1.0)


def test_wasserstein_is_a_metric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b, c = (EmpiricalMeasure(rng.standard_normal(6)) for _ in range(3))
        assert wasserstein2(a, b) == wasserstein2(b, a)
        assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-12
        assert abs(float(a.mean()[0] - b.mean()[0])) <= wasserstein2(a, b) + 1e-12


def test_wasserstein_higher_dimension():
    rng = np.random.default_rng(1)
    a = EmpiricalMeasure(rng.standard_normal((5, 2)))
    b = EmpiricalMeasure(rng.standard_normal((5, 2)))
    assert math.isclose(wasserstein2(a, b), wasserstein2(b, a), rel_tol=1e-12)
    shifted = EmpiricalMeasure(a.atoms + np.array([3.0, 4.0]))
    assert math.isclose(wasserstein2(a, shifted), 5.0, rel_tol=1e-12)
    assert _raises(UnsupportedInstanceError, wasserstein2, a, EmpiricalMeasure(rng.standard_normal((4, 2))))
    assert _raises(DomainError, wasserstein2, a, EmpiricalMeasure([0.0]))


def test_modulus_examples():
    assert modulus_eval(ModulusSpec("linear", K=2.0), 3.0) == 6.0
    for family in ("xlog", "xloglog"):
        k = ModulusSpec(family, K=1.5, gamma=0.01)
        assert modulus_eval(k, 0.0) == 0.0
        g = k.gamma
        left, right = modulus_eval(k, g * (1 - 1e-9)), modulus_eval(k, g * (1 + 1e-9))
        assert abs(left - right) <= 1e-9
    assert _raises(DomainError, modulus_eval, ModulusSpec(), -1.0)
    assert _raises(DomainError, ModulusSpec, "xlog", 1.0, 0.5)
    assert _raises(DomainError, ModulusSpec, "cubic")


def test_modulus_monotone_concave_with_envelope():
    u = np.linspace(0.0, 3.0, 3001)
    for spec in (ModulusSpec("linear", 2.0), ModulusSpec("xlog", 1.0, 0.05), ModulusSpec("xloglog", 1.0, 0.02)):
        v = modulus_eval(spec, u)
        assert np.all(np.diff(v) >= -1e-15), spec.family
        mid = modulus_eval(spec, 0.5 * (u[:-2] + u[2:]))
        assert np.all(mid >= 0.5 * (v[:-2] + v[2:]) - 1e-12), spec.family
        assert np.all(v <= spec.a * (1.0 + u) + 1e-12), spec.family


def test_osgood_integral_diverges():
    for spec in (ModulusSpec("linear"), ModulusSpec("xlog", 1.0, 0.1), ModulusSpec("xloglog", 1.0, 0.05)):
        values = [osgood_integral(spec, lo, 1.0) for lo in (1e-2, 1e-4, 1e-8)]
        assert values[0] < values[1] < values[2], spec.family
    assert _raises(DomainError, osgood_integral, ModulusSpec(), 0.0, 1.0)


def test_assumption_params_validation():
    assert _raises(DomainError, AssumptionParams, beta1=0.0)
    assert _raises(DomainError, AssumptionParams, theta=1.5)
    assert _raises(DomainError, AssumptionParams, k0=0.0)
    p = AssumptionParams(k_slope=2.0)
    assert p.K(0.0) == 1.0 and p.K(1.0) == 3.0
    assert AssumptionParams(k0=2.5, k_slope=1.0).K(0.5) == 3.0
    assert origin_level(0.5, 0.5) == 1.25 and origin_level(0.1) == 1.0


def test_builtin_families():
    for name in FAMILIES:
        builtin_family(name).check_shapes()
    assert _raises(DomainError, builtin_family, "nope")
    assert _raises(DomainError, builtin_family, "linear_meanfield", nonsense=1.0)
    c = builtin_family("linear_meanfield", s0=0.7)
    assert np.allclose(c.sigma(0.0, EmpiricalMeasure.dirac([0.0])), [[0.7]])
    two = builtin_family("gaussian_decoupled", dim=2)
    assert two.n == 2 and two.m == 2
    two.check_shapes(batch=4)


def test_linear_family_passes_probes():
    c = builtin_family("linear_meanfield")
    sampler = ProbeSampler(seed=11)
    for probe in (probe_H1, probe_H2, probe_growth_g):
        report = probe(c, c.params, sampler, 256)
        assert report["pass"], report
        assert report["worst_ratio"] <= 1.0 + 1e-9


def test_other_families_pass_probes():
    for name in ("ou_frozen_gaussian", "gaussian_decoupled"):
        c = builtin_family(name)
        for probe in (probe_H1, probe_H2, probe_growth_g):
            assert probe(c, c.params, ProbeSampler(seed=5), 128)["pass"], (name, probe.__name__)


def test_origin_bound_has_room_in_every_family():
    cases = [
        ("linear_meanfield", {}),
        ("linear_meanfield", {"a4": 0.7, "s0": 1.5, "gamma0": 2.0, "dim": 2}),
        ("ou_frozen_gaussian", {}),
        ("gaussian_decoupled", {}),
        ("gaussian_decoupled", {"sigma0": 2.0, "gamma0": 1.5, "dim": 3}),
    ]
    for name, settings in cases:
        c = builtin_family(name, **settings)
        report = probe_H1(c, c.params, ProbeSampler(seed=6), 64)
        assert report["pass"], (name, settings, report)
        assert report["by_inequality"]["origin"] < 1.0, (name, settings, report["by_inequality"])


def test_quadratic_drift_fails_H1():
    c = builtin_family("linear_meanfield")
    base = c.b
    bad = replace(c, b=lambda t, x, mu, y: base(t, x, mu, y) + x**2)
    report = probe_H1(bad, c.params, ProbeSampler(seed=3, scale=10.0), 256)
    assert not report["pass"] and report["worst_ratio"] > 1.0
    assert report["worst_case"] in ("b", "origin")


def test_anti_dissipative_fast_drift_fails_H2():
    c = builtin_family("linear_meanfield")
    bad = replace(c, f=lambda t, x, mu, y: 5.0 * y)
    assert not probe_H2(bad, c.params, ProbeSampler(seed=4), 256)["pass"]


def test_growth_of_g():
    c = builtin_family("gaussian_decoupled")
    unbounded = replace(c, g=lambda t, x, mu, y: np.abs(y)[:, :, None])
    assert not probe_growth_g(unbounded, c.params, ProbeSampler(seed=2), 128)["pass"]
    linear = replace(c, g=lambda t, x, mu, y: (1.0 + np.abs(x))[:, :, None])
    assert probe_growth_g(linear, AssumptionParams(C_T=1.0), ProbeSampler(seed=2), 128)["pass"]


def test_probes_deterministic_and_vacuous():
    c = builtin_family("linear_meanfield")
    a = probe_H1(c, c.params, ProbeSampler(seed=9), 64)
    b = probe_H1(c, c.params, ProbeSampler(seed=9), 64)
    assert a == b
    empty = probe_H2(c, c.params, ProbeSampler(), 0)
    assert empty["pass"] and empty["evidence"] == "no evidence" and empty["trials"] == 0
    assert _raises(DomainError, probe_H1, c, c.params, None, -1)


def main():
    parser = argparse.ArgumentParser(description="Tests for mvfbm.coefficients")
    parser.parse_args()
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"{name}: OK")
        except Exception as e:
            failed += 1
            print(f"{name}: FAIL {type(e).__name__} {e}")
    print(f"{len(tests) - failed}/{len(tests)} passed.")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
