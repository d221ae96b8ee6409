"""Offline black-box optimization from small datasets.

Pipeline: generate GP-derived synthetic tasks from the offline data, meta-train
a gradient-matching surrogate across them, fine-tune on the real data, then
recover optimized designs by gradient search on the surrogate. A benchmark
harness with analytic oracles, internal baselines, and ablation diagnostics
lives in :mod:`optbias.bench`; the CLI in :mod:`optbias.cli`.
"""

__version__ = "0.1.0"
