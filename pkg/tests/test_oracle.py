import json
import math

import numpy as np
import pytest

from femix import fem_read as fr
from femix.errors import AbsoluteContinuityError
from femix.fem_read import FemGates
from femix.oracle import (
    brute_force_read,
    brute_free_energy,
    brute_posterior,
    finite_diff,
    finite_diff_hessian,
    kl,
    make_report,
)
from femix.priors import softmax_prior


def test_kl_values_and_zero_mass():
    assert kl([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-16)
    with pytest.raises(AbsoluteContinuityError):
        kl([0.5, 0.5], [1.0, 0.0])


def test_brute_free_energy_closed_form():
    want = 0.5 * math.log(0.25 * math.e**2 + 0.75 * math.e**-2)
    assert brute_free_energy([0.25, 0.75], [1.0, -1.0], 2.0) == pytest.approx(want, abs=1e-15)
    assert brute_free_energy([0.25, 0.75], [1.0, -1.0], 0.0) == pytest.approx(-0.5, abs=1e-16)


def test_brute_posterior_sums_to_one_and_masks():
    q = brute_posterior([0.2, 0.0, 0.8], [1.0, 5.0, -1.0], 3.0)
    assert q[1] == 0.0
    assert math.fsum(q) == pytest.approx(1.0, abs=1e-15)


def test_brute_read_agrees_with_vectorised():
    rng = np.random.default_rng(0)
    w = softmax_prior(rng.normal(size=(7, 7))).weights
    v = rng.normal(size=(7, 3))
    gates = FemGates(rng.uniform(size=(7, 3)), rng.uniform(0.5, 2, (7, 3)), np.array([0.3, 1.0, 6.0]))
    ref = brute_force_read(w, v, gates)
    rd = fr.two_gate_read(w, v, gates)
    for name in ("o", "mu", "f_max", "f_tilde"):
        assert np.max(np.abs(getattr(rd, name) - getattr(ref, name))) <= 1e-12


def test_finite_diff_on_known_functions():
    np.testing.assert_allclose(finite_diff(lambda x: float(np.sum(x**3)), np.array([1.0, -2.0])), [3.0, 12.0], rtol=1e-9)
    assert finite_diff(math.sin, 0.3, richardson=True) == pytest.approx(math.cos(0.3), abs=1e-9)
    H = finite_diff_hessian(lambda x: x[0] ** 2 * x[1], np.array([1.0, 2.0]))
    np.testing.assert_allclose(H, [[4.0, 2.0], [2.0, 0.0]], atol=1e-6)


def test_report_abs_and_rel():
    r = make_report("op", {"seed": 1}, [1.0, 200.0], [1.0, 201.0], tol=1e-2, kind="rel")
    assert r.max_abs_err == 1.0
    assert r.max_rel_err == pytest.approx(1 / 201)
    assert r.passed
    assert not make_report("op", {}, [0.0], [1.0], tol=0.5).passed
    assert json.loads(r.to_json())["instance"] == {"seed": 1}
