"""Acceptance-rate driven step-size selection."""

import math
from dataclasses import replace

from .ensemble import run_sampler
from .streams import PHASE_TUNE


def acceptance_goal(h, target_accept=None):
    """Required acceptance at step ``h``: ``1 - h/4`` unless a fixed goal is given."""
    return 1.0 - h / 4.0 if target_accept is None else target_accept


def tune_step_size(target, cfg, seed, init=None, probe_sweeps=200, h_start=1.0,
                   target_accept=None, max_reductions=60):
    """Shrink ``h`` by ``sqrt(2)`` from ``h_start`` until acceptance meets the goal.

    Each candidate runs a short probe (half burn-in with adaptation, half
    measured) on a random stream separate from the production run.

    Returns:
        ``(h, history)`` with ``history`` a list of ``(h, acceptance)`` pairs.
    """
    history = []
    h = h_start
    half = max(probe_sweeps // 2, 1)
    for _ in range(max_reductions):
        probe = replace(
            cfg,
            h_max=h,
            burn_in=half,
            sweeps=half,
            thin=1,
            restart_period=min(cfg.restart_period, max(half // 4, 1)) if cfg.restart_period else 0,
            restart_last=None,
        )
        rec = run_sampler(target, probe, seed, run=len(history), init=init, stream_phase=PHASE_TUNE)
        acc = rec.acceptance_rate("sampling")
        history.append((h, acc))
        if acc >= acceptance_goal(h, target_accept):
            return h, history
        h /= math.sqrt(2.0)
    return h, history
