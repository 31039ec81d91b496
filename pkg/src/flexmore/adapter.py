"""Post-hoc low-rank adapter extraction and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import InvariantError, ShapeError
from .linalg import SvdResult, svd, truncate_svd
from .weights import AdapterEntry, ExpertBundle, LowRankAdapter

RankSpec = Union[int, Mapping[str, int]]


def _check_composable(expert: ExpertBundle, base: ExpertBundle) -> None:
    if expert.targets != base.targets:
        for i, (x, y) in enumerate(zip(expert.targets, base.targets)):
            if x != y:
                raise ShapeError(f"target #{i}: expert has {x!r}, base has {y!r}")
        raise ShapeError(
            f"target lists differ in length: expert {len(expert.targets)}, "
            f"base {len(base.targets)}"
        )
    for t in expert.targets:
        if expert[t].shape != base[t].shape:
            raise ShapeError(
                f"target {t!r}: expert shape {expert[t].shape} != base shape {base[t].shape}"
            )


def delta(expert: ExpertBundle, base: ExpertBundle) -> ExpertBundle:
    """Per-target difference ``expert - base``."""
    _check_composable(expert, base)
    return ExpertBundle(
        expert.name + ".delta", {t: expert[t] - base[t] for t in expert.targets}
    )


def _resolve_ranks(targets: Iterable[str], ranks: RankSpec) -> dict[str, int]:
    targets = list(targets)
    if isinstance(ranks, Mapping):
        unknown = set(ranks) - set(targets)
        if unknown:
            raise ShapeError(f"ranks given for unknown targets: {sorted(unknown)}")
        return {t: int(ranks[t]) for t in targets if t in ranks}
    return {t: int(ranks) for t in targets}


def split_factors(s: SvdResult) -> tuple[np.ndarray, np.ndarray]:
    """Split a (truncated) SVD symmetrically: ``B = U sqrt(S)``, ``A = sqrt(S) Vt``."""
    root = np.sqrt(s.sigma)
    return s.u * root, root[:, None] * s.vt


def adapter_from_svds(
    name: str, base_name: str, svds: Mapping[str, SvdResult], ranks: Mapping[str, int]
) -> LowRankAdapter:
    """Build an adapter from precomputed delta SVDs (lets sweeps reuse one SVD per target)."""
    entries = []
    for target, s in svds.items():
        if target not in ranks:
            continue
        r = ranks[target]
        if r < 1 or r > s.k:
            raise ShapeError(f"target {target!r}: rank {r} outside [1, {s.k}]")
        b, a = split_factors(truncate_svd(s, r))
        entries.append(AdapterEntry(target, r, b, a))
    return LowRankAdapter(name, base_name, entries)


def phlora_extract(
    expert: ExpertBundle, base: ExpertBundle, ranks: RankSpec, *, name: str | None = None
) -> LowRankAdapter:
    """Extract a low-rank adapter of ``expert - base`` by truncated SVD.

    *ranks* is either one rank for every target or a mapping target -> rank;
    with a mapping, targets left out are not adapted.
    """
    d = delta(expert, base)
    resolved = _resolve_ranks(d.targets, ranks)
    for t, r in resolved.items():
        limit = min(d[t].shape)
        if r < 1 or r > limit:
            raise ShapeError(f"target {t!r}: rank {r} outside [1, {limit}]")
    svds = {t: svd(d[t]) for t in d.targets if t in resolved}
    return adapter_from_svds(name or expert.name, base.name, svds, resolved)


def materialize(adapter: LowRankAdapter, base: ExpertBundle) -> ExpertBundle:
    """Dense weights ``W0 + B @ A`` for every adapted target."""
    if adapter.base_name != base.name:
        raise InvariantError(
            f"adapter {adapter.name!r} is anchored to {adapter.base_name!r}, not {base.name!r}"
        )
    out = {t: m.copy() for t, m in base.matrices.items()}
    for e in adapter:
        if e.target not in out:
            raise ShapeError(f"adapter target {e.target!r} missing from base {base.name!r}")
        if e.shape != out[e.target].shape:
            raise ShapeError(
                f"target {e.target!r}: adapter shape {e.shape} != base shape {out[e.target].shape}"
            )
        out[e.target] = out[e.target] + e.product()
    return ExpertBundle(adapter.name, out)


# --- parameter accounting -------------------------------------------------


def adapter_params(r: int, d_in: int, d_out: int) -> int:
    """LoRA parameter count ``r * (d_in + d_out)`` for one matrix."""
    if r < 1 or d_in < 1 or d_out < 1:
        raise ValueError(f"adapter_params needs positive arguments, got r={r}, {d_in}x{d_out}")
    return r * (d_in + d_out)


def max_useful_rank(d_in: int, d_out: int) -> int:
    """Largest rank whose adapter is no larger than the dense ``d_out x d_in`` matrix."""
    if d_in < 1 or d_out < 1:
        raise ValueError("dimensions must be positive")
    return (d_in * d_out) // (d_in + d_out)


@dataclass(frozen=True)
class ParamPreset:
    """Model dimensions used for whole-model parameter totals.

    ``router_params_per_expert`` counts the router embedding row each
    non-base expert adds (one ``d_in`` row per layer).
    """

    name: str
    d_in: int
    d_out_list: tuple[int, ...]
    matrices_per_layer: int
    layers: int
    full_expert_params: int
    base_params: int
    router_params_per_expert: int = 0

    def __post_init__(self):
        counts = [self.d_in, self.matrices_per_layer, self.layers, self.full_expert_params,
                  self.base_params, *self.d_out_list]
        if any(c <= 0 for c in counts) or self.router_params_per_expert < 0:
            raise ValueError(f"preset {self.name!r}: counts must be positive")
        if len(self.d_out_list) != self.matrices_per_layer:
            raise ValueError(
                f"preset {self.name!r}: {len(self.d_out_list)} matrix dims for "
                f"{self.matrices_per_layer} matrices per layer"
            )

    def adapter_expert_params(self, r: int) -> int:
        per_layer = sum(adapter_params(r, self.d_in, d) for d in self.d_out_list)
        return self.layers * per_layer + self.router_params_per_expert


OLMO7B = ParamPreset(
    name="olmo7b",
    d_in=4096,
    d_out_list=(11008, 11008, 11008),
    matrices_per_layer=3,
    layers=32,
    full_expert_params=4_330_000_000,
    base_params=7_300_000_000,
    router_params_per_expert=4096 * 32,
)

PRESETS = {OLMO7B.name: OLMO7B}

FULL = "full"
ExpertSpec = Union[int, str]


def expert_params(preset: ParamPreset, expert: ExpertSpec) -> int:
    if expert == FULL:
        return preset.full_expert_params
    return preset.adapter_expert_params(int(expert))


def mixture_params(preset: ParamPreset, experts: Iterable[ExpertSpec]) -> int:
    """Exact total for the base plus each expert (``"full"`` or an adapter rank)."""
    return preset.base_params + sum(expert_params(preset, e) for e in experts)


def format_params(n: int) -> str:
    """Display a count the way the result tables do (``11.63B``, ``743M``, ``23.3M``)."""
    if n >= 1_000_000_000:
        return f"{n / 1e9:.2f}B"
    if n >= 100_000_000:
        return f"{n / 1e6:.0f}M"
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)
