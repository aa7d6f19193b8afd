import numpy as np
import pytest

from affuse import autodiff as A
from affuse.checks import SCOPES, TOLERANCE, format_results, run_suite, units
from affuse.fusion import KINDS
from affuse.tensor import ConfigError


def corrupt_backward(monkeypatch, name, factor=2.0):
    """Replace ``autodiff.<name>`` by a version whose backward rule is scaled by ``factor``."""
    original = getattr(A, name)

    def patched(*args, **kw):
        out = original(*args, **kw)
        if out.backward_fn is not None:
            rule = out.backward_fn
            out.backward_fn = lambda g: tuple(None if t is None else factor * t for t in rule(g))
        return out

    monkeypatch.setattr(A, name, patched)


def test_unit_inventory():
    names = {s: [n for _, n, _ in units(s)] for s in SCOPES if s != "all"}
    assert sorted(names["fusion"]) == sorted(KINDS)
    assert {"mscam_global+local", "mscam_global+global", "mscam_local+local"} == set(names["attention"])
    for op in ("conv2d_k3_s1", "batch_norm_train", "relu", "sigmoid", "global_avg_pool", "mul", "add",
               "concat_channels", "upsample2x", "fully_connected", "softmax_cross_entropy"):
        assert op in names["ops"]
    assert len(units("all")) == sum(len(v) for v in names.values())
    with pytest.raises(ConfigError):
        units("everything")


@pytest.mark.parametrize("scope", ["ops", "attention", "fusion"])
def test_scope_passes(scope):
    results = run_suite(scope, seed=0)
    bad = [(r.unit, r.error) for r in results if not r.passed]
    assert not bad
    assert all(r.tolerance == TOLERANCE for r in results)


def test_blocks_scope_passes():
    results = run_suite("blocks", seed=1)
    assert all(r.passed for r in results), format_results(results)


@pytest.mark.parametrize("op,unit", [("relu", "relu"), ("sigmoid", "sigmoid"), ("mul", "mul")])
def test_corrupted_backward_is_caught(monkeypatch, op, unit):
    corrupt_backward(monkeypatch, op)
    results = {r.unit: r for r in run_suite("ops")}
    assert not results[unit].passed
    assert results["conv2d_k3_s1"].passed
    assert unit in format_results(list(results.values())).splitlines()[-1]


def test_corruption_propagates_to_composites(monkeypatch):
    corrupt_backward(monkeypatch, "sigmoid")
    assert not any(r.passed for r in run_suite("fusion", only=["aff", "iaff"]))


def test_precision_restored():
    from affuse import tensor as K
    K.set_precision("f32")
    run_suite("ops", only=["relu"])
    assert K.get_precision() == "f32"


def test_non_finite_error_fails():
    from affuse.checks import CheckResult
    assert not CheckResult("ops", "x", float("nan"), 0.0).passed
    assert not CheckResult("ops", "x", float("inf"), 0.0).passed
    assert CheckResult("ops", "x", 0.0, 0.0).passed
    assert np.isfinite(TOLERANCE)
