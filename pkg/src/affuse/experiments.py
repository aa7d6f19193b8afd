"""Desk-scale fusion comparison on the synthetic classification set.

:func:`ordering_trend` trains one network per (fusion kind, seed) with the
default run configuration and records each run's final validation
accuracy and CPU time. Results are appended to a JSON file as they finish;
a rerun reuses entries whose configuration and source fingerprint match,
so an interrupted sweep resumes where it stopped.
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import time
from pathlib import Path
from statistics import median
from typing import Callable, Dict, Optional, Sequence

from .train import parse_config, train_run

__all__ = ["source_fingerprint", "ordering_trend", "summarize"]

# modules whose code determines training numerics
_NUMERIC_MODULES = ("tensor", "autodiff", "layers", "attention", "fusion", "networks", "data", "optim", "train")


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
            node.body = body[1:] or [ast.Pass()]
    return tree


def source_fingerprint() -> str:
    """Hash of the training-relevant code; comments and docstrings do not count."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _NUMERIC_MODULES:
        tree = _strip_docstrings(ast.parse((root / f"{name}.py").read_text()))
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def ordering_trend(results_path, fusions: Sequence[str] = ("add", "aff", "iaff"),
                   seeds: Sequence[int] = (1, 2, 3), overrides: Sequence[str] = ("precision=f32",),
                   log: Optional[Callable[[str], None]] = None) -> Dict[str, dict]:
    """Train every (fusion, seed) pair not already in ``results_path``; return all entries."""
    results_path = Path(results_path)
    fp = source_fingerprint()
    stored = json.loads(results_path.read_text()) if results_path.exists() else {}
    runs = stored.get("runs", {}) if stored.get("fingerprint") == fp else {}
    for fusion in fusions:
        for seed in seeds:
            cfg = parse_config(overrides=tuple(overrides) + (f"fusion={fusion}", f"seed={seed}"))
            key = f"{fusion}/seed{seed}"
            cfg_dict = dataclasses.asdict(cfg)
            if key in runs and runs[key]["config"] == cfg_dict:
                continue
            if log:
                log(f"training {key}")
            c0, w0 = time.process_time(), time.perf_counter()
            res = train_run(cfg)
            runs[key] = {
                "config": cfg_dict,
                "fusion": fusion,
                "seed": seed,
                "val_accuracy": res.final["val_accuracy"],
                "curve": [r["val_accuracy"] for r in res.records],
                "cpu_seconds": time.process_time() - c0,
                "wall_seconds": time.perf_counter() - w0,
            }
            results_path.parent.mkdir(parents=True, exist_ok=True)
            results_path.write_text(json.dumps({"fingerprint": fp, "runs": runs}, indent=1))
            if log:
                log(f"{key}: val_accuracy={runs[key]['val_accuracy']:.4f} "
                    f"cpu={runs[key]['cpu_seconds']:.0f}s")
    return runs


def summarize(runs: Dict[str, dict]) -> Dict[str, dict]:
    """Median final accuracy and worst CPU time per fusion kind."""
    by: Dict[str, list] = {}
    for r in runs.values():
        by.setdefault(r["fusion"], []).append(r)
    return {f: {"median_val_accuracy": median(r["val_accuracy"] for r in rs),
                "accuracies": [r["val_accuracy"] for r in sorted(rs, key=lambda r: r["seed"])],
                "max_cpu_seconds": max(r["cpu_seconds"] for r in rs)}
            for f, rs in by.items()}
