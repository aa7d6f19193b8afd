"""Compare add, AFF and iAFF fusion on the synthetic shape set.

Trains ResNet-20-b style classifiers (one block per stage) for 30 epochs
with three seeds each and prints the median validation accuracy per
fusion kind. Runs are cached in ``results/ordering_trend.json``; an
interrupted sweep resumes where it stopped.

    python demos/ordering_trend.py
"""
from pathlib import Path

from affuse.experiments import ordering_trend, summarize

RESULTS = Path(__file__).resolve().parent.parent / "results" / "ordering_trend.json"

runs = ordering_trend(RESULTS, log=lambda msg: print(msg, flush=True))
for fusion, s in summarize(runs).items():
    accs = ", ".join(f"{a:.3f}" for a in s["accuracies"])
    print(f"{fusion:>5}: median {s['median_val_accuracy']:.4f}  (seeds: {accs})  "
          f"max cpu {s['max_cpu_seconds'] / 60:.1f} min")
