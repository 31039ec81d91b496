"""Rank sweeps: score low-rank mixtures against their dense counterparts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import adapter_from_svds, delta
from .analysis import FULL, ScoreRecord, ScoreTable
from .errors import DataError
from .linalg import SvdResult, svd
from .moe import FullExpert, LowRankExpert, MixtureSpec, mixture_forward
from .synth import fidelity_values
from .weights import ExpertBundle

MAX_EXPERT_LOG2 = 14
MAX_MIXTURE_LOG2 = 11
EXPERT_RANKS = tuple(2**k for k in range(MAX_EXPERT_LOG2 + 1))
MIXTURE_RANKS = tuple(2**k for k in range(MAX_MIXTURE_LOG2 + 1))
DEFAULT_ACTIVE = (2, 4, 7)


def check_grid(ranks: Sequence, max_log2: int) -> None:
    seen = set()
    for r in ranks:
        if r == FULL:
            continue
        if not isinstance(r, int) or r < 1 or r & (r - 1) or r > 2**max_log2:
            raise DataError(f"rank {r!r} is not a power of two in [1, 2^{max_log2}]")
        if r in seen:
            raise DataError(f"rank {r} listed twice")
        seen.add(r)


@dataclass
class SweepInputs:
    base: ExpertBundle
    experts: list[ExpertBundle]
    router: np.ndarray
    probes: dict[str, list[np.ndarray]]  # group -> one h x count matrix per task
    softmax_mode: str = "global"
    activation: str = "silu"


class _AdapterCache:
    """One delta SVD per (expert, target); adapters at any rank are cut from it."""

    def __init__(self, base: ExpertBundle, experts: list[ExpertBundle]):
        self.base = base
        self.svds: dict[str, dict[str, SvdResult]] = {}
        for e in experts:
            d = delta(e, base)
            self.svds[e.name] = {t: svd(d[t]) for t in d.targets}

    def adapter(self, name: str, rank: int):
        # ranks beyond a target's full rank are clamped to it
        svds = self.svds[name]
        ranks = {t: min(rank, s.k) for t, s in svds.items()}
        return adapter_from_svds(name, self.base.name, svds, ranks)


def _score_rows(
    table: ScoreTable,
    model: str,
    rank,
    spec_lr: MixtureSpec | None,
    spec_full: MixtureSpec,
    probes: dict[str, list[np.ndarray]],
    full_outputs: dict,
) -> None:
    for group, tasks in probes.items():
        for j, x in enumerate(tasks):
            key = (group, j)
            if key not in full_outputs:
                full_outputs[key] = mixture_forward(spec_full, x)
            y_full = full_outputs[key]
            if spec_lr is None:
                score = float(np.mean(fidelity_values(y_full, y_full)))
            else:
                score = float(np.mean(fidelity_values(mixture_forward(spec_lr, x), y_full)))
            table.add(ScoreRecord(model, rank, group, f"{group}-{j}", score))


def expert_sweep(
    inputs: SweepInputs,
    ranks: Sequence = EXPERT_RANKS,
    *,
    cache: _AdapterCache | None = None,
) -> ScoreTable:
    """Each expert alone with the base (two routed experts), scored per rank."""
    check_grid(ranks, MAX_EXPERT_LOG2)
    cache = cache or _AdapterCache(inputs.base, inputs.experts)
    ordered = sorted(ranks, key=lambda r: (r == FULL, 0 if r == FULL else r))
    table = ScoreTable()
    for i, e in enumerate(inputs.experts, start=1):
        router = inputs.router[[0, i]]
        spec_full = MixtureSpec(inputs.base, [FullExpert(e)], router, 2,
                                inputs.softmax_mode, inputs.activation)
        full_outputs: dict = {}
        for r in ordered:
            spec_lr = None
            if r != FULL:
                spec_lr = MixtureSpec(inputs.base, [LowRankExpert(cache.adapter(e.name, r))],
                                      router, 2, inputs.softmax_mode, inputs.activation)
            _score_rows(table, e.name, r, spec_lr, spec_full, inputs.probes, full_outputs)
    return table


def mixture_sweep(
    inputs: SweepInputs,
    ranks: Sequence = MIXTURE_RANKS,
    active: Sequence[int] = DEFAULT_ACTIVE,
    *,
    cache: _AdapterCache | None = None,
) -> ScoreTable:
    """All experts as homogeneous-rank adapters, for each active-expert count.

    The ``full`` row (dense experts, score 1 by construction) is always
    emitted so relative improvements have a baseline.
    """
    check_grid(ranks, MAX_MIXTURE_LOG2)
    n_total = len(inputs.experts) + 1
    for k in active:
        if not 1 <= k <= n_total:
            raise DataError(f"active experts {k} outside [1, {n_total}]")
    cache = cache or _AdapterCache(inputs.base, inputs.experts)
    ordered = sorted(set(ranks) | {FULL}, key=lambda r: (r == FULL, 0 if r == FULL else r))
    full_entries = [FullExpert(e) for e in inputs.experts]
    table = ScoreTable()
    for k in active:
        model = f"mixture-a{k}"
        spec_full = MixtureSpec(inputs.base, full_entries, inputs.router, k,
                                inputs.softmax_mode, inputs.activation)
        full_outputs: dict = {}
        for r in ordered:
            spec_lr = None
            if r != FULL:
                entries = [LowRankExpert(cache.adapter(e.name, r)) for e in inputs.experts]
                spec_lr = MixtureSpec(inputs.base, entries, inputs.router, k,
                                      inputs.softmax_mode, inputs.activation)
            _score_rows(table, model, r, spec_lr, spec_full, inputs.probes, full_outputs)
    return table


def run_sweep(
    inputs: SweepInputs,
    expert_ranks: Sequence = EXPERT_RANKS,
    mixture_ranks: Sequence | None = MIXTURE_RANKS,
    active: Sequence[int] = DEFAULT_ACTIVE,
) -> ScoreTable:
    """Expert sweep followed by the mixture sweep, sharing one SVD cache."""
    cache = _AdapterCache(inputs.base, inputs.experts)
    table = expert_sweep(inputs, expert_ranks, cache=cache)
    if mixture_ranks:
        for rec in mixture_sweep(inputs, mixture_ranks, active, cache=cache):
            table.add(rec)
    return table
