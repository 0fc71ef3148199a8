import pytest

from femix.checks import DEFAULT_COUNTS, SUITES, run_suites, select

GRADIENT_SUITES = {"fem_read.grad_v", "fem_read.dbeta", "fem_read.backward", "fem_read.prior_logits", "block.backward"}


def test_registry():
    assert len(select("fem_read")) >= 12
    assert select("") == list(SUITES)
    assert select("no.such") == []
    assert set(DEFAULT_COUNTS) == set(SUITES)


@pytest.mark.parametrize("name", sorted(SUITES))
def test_suite_passes(name):
    n = 1 if name.startswith("block.backward") else min(5, DEFAULT_COUNTS[name])
    reports = run_suites(name, seed=0, n=n)
    bad = [r for r in reports if not r.passed]
    assert not bad, [r.to_json() for r in bad]


@pytest.mark.parametrize("name", sorted(GRADIENT_SUITES))
def test_fault_injection_is_caught(name):
    reports = run_suites(name, seed=0, fault=True, n=2 if name != "block.backward" else 1)
    assert any(not r.passed for r in reports)


def test_fault_injection_leaves_value_suites_alone():
    reports = run_suites("fem_read.shift_scale", seed=0, fault=True, n=3)
    assert all(r.passed for r in reports)
