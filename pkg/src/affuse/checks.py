"""Finite-difference gradient-check suites.

Each *unit* is a small differentiable function of a few random inputs and
parameters; :func:`run_suite` compares its reverse-mode gradients with
central differences and reports the worst relative error per unit.

Primitive ops are always reached through ``autodiff.<name>`` at call time,
so a patched backward rule is picked up by the suite.

Batch norm runs in training mode with batch statistics, so each unit is
a pure differentiable function of its batch. The one exception is batch
norm inside a global (pooled) context branch: at the check's batch size
of two it would normalize two values per channel, whose output is
``+-gamma + beta`` regardless of the input, leaving only rounding noise
for the finite differences to measure. Those layers run in inference mode
on running statistics calibrated from a separate eight-sample batch;
gamma and beta are randomized everywhere.

Central differences are only meaningful where the function is smooth
over the stencil. A draw that puts any ReLU input within
``KINK_MARGIN`` of zero (but not exactly at zero, which arises from sums
of inactive ReLU outputs and stays there under perturbation) is
discarded and the unit is redrawn from the next generator in a fixed
sequence, so results stay deterministic per seed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as A
from . import tensor as K
from .attention import MSCAM, ContextBranch
from .fusion import KINDS, Fusion
from .layers import BatchNorm2d, Module
from .networks import NetworkSpec, build_inception_block, build_network, build_resblock

__all__ = ["SCOPES", "TOLERANCE", "KINK_MARGIN", "CheckResult", "units", "run_suite", "format_results"]

SCOPES = ("ops", "attention", "fusion", "blocks", "all")
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
MAX_DRAWS = 50


@dataclass
class CheckResult:
    scope: str
    unit: str
    error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


# a unit builds (fn, inputs, params) from a generator; ``n_trials`` (optional
# attribute on the factory) caps the scalars checked per tensor
UnitFactory = Callable[[np.random.Generator], Tuple[Callable[..., A.Var], List[np.ndarray], List[A.Parameter]]]


def _condition_bn(module: Module, shapes, rng: np.random.Generator) -> Module:
    """Randomize gamma/beta and calibrate running statistics; only global-context BN stays in eval mode."""
    bns = [m for _, m in module.modules() if isinstance(m, BatchNorm2d)]
    for m in bns:
        c = m.gamma.value.size
        m.gamma.value[...] = rng.uniform(0.5, 1.5, c)
        m.beta.value[...] = rng.normal(0.0, 0.2, c)
    momenta = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        module.train()
        module(*[A.Var(rng.standard_normal((8,) + tuple(s[1:]))) for s in shapes])
    finally:
        for m, mom in zip(bns, momenta):
            m.momentum = mom
    module.train()
    for _, m in module.modules():
        if isinstance(m, ContextBranch) and m.scale == "global":
            m.eval()
    return module


def _module_unit(build: Callable[[np.random.Generator], Module], *shapes,
                 n_trials=None) -> UnitFactory:
    def factory(rng):
        mod = _condition_bn(build(rng).assign_names(), shapes, rng)
        return (lambda *xs: mod(*xs)), [rng.standard_normal(s) for s in shapes], mod.parameters()
    factory.n_trials = n_trials
    return factory


def _param(rng, *shape) -> A.Parameter:
    return A.Parameter(rng.standard_normal(shape))


def _op_units() -> Dict[str, UnitFactory]:
    u: Dict[str, UnitFactory] = {}
    for k in (1, 3, 5):
        for stride in (1, 2):
            def conv(rng, k=k, stride=stride):
                w, b = _param(rng, 4, 3, k, k), _param(rng, 4)
                return (lambda x: A.conv2d(x, w, b, stride, k // 2)), [rng.standard_normal((2, 3, 6, 6))], [w, b]
            u[f"conv2d_k{k}_s{stride}"] = conv

    def bn(train):
        def f(rng):
            g, be = A.Parameter(rng.uniform(0.5, 1.5, 3)), _param(rng, 3)
            rm, rv = rng.normal(0, 0.2, 3), rng.uniform(0.5, 1.5, 3)
            return (lambda x: A.batch_norm(x, g, be, rm, rv, 1e-5, 0.9, train)), \
                [rng.standard_normal((2, 3, 4, 4))], [g, be]
        return f
    u["batch_norm_train"] = bn(True)
    u["batch_norm_eval"] = bn(False)

    def unary(name, shape=(2, 3, 4, 4)):
        return lambda rng: ((lambda x: getattr(A, name)(x)), [rng.standard_normal(shape)], [])
    for name in ("relu", "sigmoid", "global_avg_pool", "one_minus", "upsample2x"):
        u[name] = unary(name)
    u["scale"] = lambda rng: ((lambda x: A.scale(x, -0.7)), [rng.standard_normal((2, 3, 4, 4))], [])

    full, pooled = (2, 3, 4, 4), (2, 3, 1, 1)
    for name in ("add", "sub", "mul"):
        cases = (("", full, full),)
        if name != "sub":
            cases += (("_bcast_y", full, pooled), ("_bcast_x", pooled, full))
        for tag, sx, sy in cases:
            u[name + tag] = (lambda rng, name=name, sx=sx, sy=sy:
                             ((lambda x, y: getattr(A, name)(x, y)),
                              [rng.standard_normal(sx), rng.standard_normal(sy)], []))
    u["concat_channels"] = lambda rng: ((lambda x, y: A.concat_channels(x, y)),
                                        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4))], [])
    u["broadcast_to"] = lambda rng: ((lambda x: A.broadcast_to(x, full)), [rng.standard_normal(pooled)], [])

    def fc(rng):
        w, b = _param(rng, 5, 4), _param(rng, 5)
        return (lambda x: A.fully_connected(x, w, b)), [rng.standard_normal((2, 4, 1, 1))], [w, b]
    u["fully_connected"] = fc

    def xent(rng):
        labels = rng.integers(0, 4, size=(2, 3, 3))
        return (lambda x: A.softmax_cross_entropy(x, labels)), [rng.standard_normal((2, 4, 3, 3))], []
    u["softmax_cross_entropy"] = xent
    return u


def _attention_units() -> Dict[str, UnitFactory]:
    u = {}
    for scales in (("global", "local"), ("global", "global"), ("local", "local")):
        u["mscam_" + "+".join(scales)] = _module_unit(
            lambda rng, s=scales: MSCAM(8, 2, s, rng=rng), (2, 8, 4, 4))
    return u


def _fusion_units() -> Dict[str, UnitFactory]:
    return {k: _module_unit(lambda rng, k=k: Fusion(k, 8, 2, rng=rng), (2, 8, 4, 4), (2, 8, 4, 4))
            for k in KINDS}


def _block_units() -> Dict[str, UnitFactory]:
    # whole blocks hold thousands of scalars; a random sample per tensor keeps every tensor covered
    def unit(build, *shapes):
        return _module_unit(build, *shapes, n_trials=12)

    spec = NetworkSpec(fusion="aff", r=2, base_channels=4, multipliers=(1, 2), num_classes=3)
    seg = NetworkSpec(scenario="long_skip", fusion="aff", r=2, base_channels=4, multipliers=(1, 2), num_classes=3)
    same = NetworkSpec(scenario="same_layer", fusion="iaff", r=2, base_channels=4, multipliers=(1, 2), num_classes=3)
    return {
        "resblock_aff": unit(lambda rng: build_resblock(spec, 8, 8, 1, rng), (2, 8, 4, 4)),
        "resblock_aff_doubling": unit(lambda rng: build_resblock(spec, 4, 8, 2, rng), (2, 4, 8, 8)),
        "inception_block_aff": unit(lambda rng: build_inception_block(spec, 8, rng=rng), (2, 8, 4, 4)),
        "classifier_short_skip_aff": unit(lambda rng: build_network(spec, rng), (2, 3, 4, 4)),
        "classifier_same_layer_iaff": unit(lambda rng: build_network(same, rng), (2, 3, 4, 4)),
        "fpn_segmenter_aff": unit(lambda rng: build_network(seg, rng), (1, 3, 4, 4)),
    }


_SCOPE_UNITS = {
    "ops": _op_units,
    "attention": _attention_units,
    "fusion": _fusion_units,
    "blocks": _block_units,
}


def units(scope: str) -> List[Tuple[str, str, UnitFactory]]:
    """``(scope, name, factory)`` for every unit in ``scope`` (``"all"`` = every scope)."""
    if scope not in SCOPES:
        raise K.ConfigError(f"scope must be one of {SCOPES}, got {scope!r}")
    scopes = [s for s in SCOPES if s != "all"] if scope == "all" else [scope]
    return [(s, name, f) for s in scopes for name, f in _SCOPE_UNITS[s]().items()]


def _nearest_kink(fn, inputs) -> float:
    """Smallest nonzero ``|x|`` over every ReLU input of one forward pass."""
    nearest = [np.inf]

    def hook(op, value, parents):
        if op == "relu":
            a = np.abs(parents[0].value)
            a = a[a > 0]
            if a.size:
                nearest[0] = min(nearest[0], float(a.min()))

    prev = A.set_op_hook(hook)
    try:
        fn(*[A.Var(np.array(a, dtype=np.float64)) for a in inputs])
    finally:
        A.set_op_hook(prev)
    return nearest[0]


def _draw(factory, seed: int, i: int):
    """First draw of the unit whose ReLU inputs all keep ``KINK_MARGIN`` from the kink."""
    for attempt in range(MAX_DRAWS):
        rng = np.random.default_rng([seed, i] + ([attempt] if attempt else []))
        fn, inputs, params = factory(rng)
        if _nearest_kink(fn, inputs) >= KINK_MARGIN:
            break
    return fn, inputs, params


def run_suite(scope: str = "all", seed: int = 0, tolerance: float = TOLERANCE,
              only: Sequence[str] = ()) -> List[CheckResult]:
    """Run every unit of ``scope`` in double precision; ``only`` filters unit names."""
    prev = K.get_precision()
    K.set_precision("f64")
    results = []
    try:
        for i, (sc, name, factory) in enumerate(units(scope)):
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            fn, inputs, params = _draw(factory, seed, i)
            try:
                err = A.grad_check(fn, inputs, params, seed=seed,
                                   n_trials=getattr(factory, "n_trials", None))
            except FloatingPointError:
                err = float("inf")
            results.append(CheckResult(sc, name, err, time.perf_counter() - t0, tolerance))
    finally:
        K.set_precision(prev)
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    lines = [f"{'scope':<10} {'unit':<32} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.scope:<10} {r.unit:<32} {r.error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.unit for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} units passed"
                 + (f"; failing: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
