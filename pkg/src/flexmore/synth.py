"""Deterministic synthetic experts, probes and fidelity scores.

All randomness flows from :class:`SplitMix64`, so every artifact is a pure
function of the scenario seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, ShapeError
from .moe import MixtureSpec, mixture_forward
from .weights import ExpertBundle

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """splitmix64 generator; ``next_u64`` advances the state by the golden gamma."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def next_double(self) -> float:
        """Uniform in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def u64_array(self, n: int) -> np.ndarray:
        """The next *n* outputs, vectorized (identical to *n* calls of ``next_u64``)."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def doubles(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def child(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


def random_matrix(rng: SplitMix64, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    """Entries uniform in [-scale, scale], drawn in row-major order."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"random_matrix needs positive dimensions, got {rows}x{cols}")
    u = rng.doubles(rows * cols).reshape(rows, cols)
    return scale * (2.0 * u - 1.0)


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on the columns of *m*, with a second pass on heavy cancellation."""
    q = np.array(m, dtype=np.float64, copy=True)
    for j in range(q.shape[1]):
        v = q[:, j]
        before = np.linalg.norm(v)
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        norm = np.linalg.norm(v)
        if norm < 0.5 * before:
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
            norm = np.linalg.norm(v)
        if norm < 1e-8:
            raise DataError(f"column {j} is linearly dependent on earlier columns")
        q[:, j] = v / norm
    return q


@dataclass(frozen=True)
class SpectrumSpec:
    """Planted delta spectrum: ``sigma_k = sigma0 * decay**(k-1)`` for ``k <= effective_rank``."""

    effective_rank: int
    sigma0: float = 1.0
    decay: float = 0.5
    noise_floor: float = 0.0

    def __post_init__(self):
        if self.effective_rank < 0:
            raise DataError(f"effective_rank must be >= 0, got {self.effective_rank}")
        if not self.sigma0 > 0:
            raise DataError(f"sigma0 must be positive, got {self.sigma0}")
        if not 0 < self.decay <= 1:
            raise DataError(f"decay must lie in (0, 1], got {self.decay}")
        if self.noise_floor < 0:
            raise DataError(f"noise_floor must be >= 0, got {self.noise_floor}")

    def sigmas(self) -> np.ndarray:
        return self.sigma0 * self.decay ** np.arange(self.effective_rank)


def make_expert(
    base: ExpertBundle,
    spec: SpectrumSpec,
    rng: SplitMix64,
    *,
    name: str = "expert",
    targets: list[str] | None = None,
) -> ExpertBundle:
    """Base weights plus a planted low-rank delta (and optional noise) on *targets*."""
    targets = base.targets if targets is None else targets
    out = {}
    for t, w0 in base.matrices.items():
        if t not in targets:
            out[t] = w0.copy()
            continue
        d_out, d_in = w0.shape
        rho = spec.effective_rank
        if rho > min(d_out, d_in):
            raise DataError(f"effective rank {rho} exceeds min dims of {t!r} {w0.shape}")
        w = w0.copy()
        if rho > 0:
            u = orthonormalize(random_matrix(rng, d_out, rho))
            v = orthonormalize(random_matrix(rng, d_in, rho))
            w = w + (u * spec.sigmas()) @ v.T
        noise = random_matrix(rng, d_out, d_in)
        if spec.noise_floor > 0:
            w = w + spec.noise_floor * noise / np.linalg.norm(noise)
        out[t] = w
    return ExpertBundle(name, out)


def make_probes(
    rng: SplitMix64, h: int, count: int, scale: float = 1.0, subspace_dim: int | None = None
) -> np.ndarray:
    """``h x count`` probe inputs, optionally confined to a random subspace."""
    if subspace_dim is None or subspace_dim >= h:
        return random_matrix(rng, h, count, scale)
    basis = orthonormalize(random_matrix(rng, h, subspace_dim))
    return scale * basis @ random_matrix(rng, subspace_dim, count)


@dataclass(frozen=True)
class FidelityScore:
    value: float
    probes: int


def fidelity_values(y_lr: np.ndarray, y_full: np.ndarray) -> np.ndarray:
    """Per-probe ``max(0, 1 - |y_lr - y_full| / |y_full|)`` over columns."""
    ref = np.linalg.norm(y_full, axis=0)
    err = np.linalg.norm(y_lr - y_full, axis=0)
    out = np.zeros(ref.shape)
    nz = ref > 0
    out[nz] = np.maximum(0.0, 1.0 - err[nz] / ref[nz])
    out[~nz] = np.where(np.linalg.norm(y_lr[:, ~nz], axis=0) == 0, 1.0, 0.0)
    return out


def fidelity(spec_lr: MixtureSpec, spec_full: MixtureSpec, probes) -> FidelityScore:
    """Mean clamped agreement of two mixtures over *probes*.

    *probes* is a list of vectors or an ``h x count`` array.
    """
    if isinstance(probes, np.ndarray) and probes.ndim == 2:
        cols = probes.astype(np.float64)
    else:
        if len(probes) == 0:
            raise DataError("fidelity needs at least one probe")
        cols = np.column_stack([np.asarray(p, dtype=np.float64) for p in probes])
    if cols.shape[1] == 0:
        raise DataError("fidelity needs at least one probe")
    probes = cols
    if spec_lr.h != spec_full.h:
        raise ShapeError(f"mixtures differ in width: {spec_lr.h} vs {spec_full.h}")
    vals = fidelity_values(mixture_forward(spec_lr, probes), mixture_forward(spec_full, probes))
    return FidelityScore(float(np.mean(vals)), probes.shape[1])


# --- scenario files -------------------------------------------------------


@dataclass(frozen=True)
class GroupSpec:
    """A synthetic evaluation group: *tasks* probe sets drawn at one scale/subspace."""

    name: str
    tasks: int = 1
    probe_scale: float | None = None
    subspace_dim: int | None = None


@dataclass(frozen=True)
class ExpertSpec:
    name: str
    spectrum: SpectrumSpec


@dataclass(frozen=True)
class Scenario:
    seed: int
    h: int
    d_ff: int
    experts: tuple[ExpertSpec, ...]
    groups: tuple[GroupSpec, ...] = (GroupSpec("default"),)
    targets: tuple[str, ...] = ("w1", "w2")
    probes: int = 8
    probe_scale: float = 1.0
    base_scale: float = 0.2
    router_scale: float = 1.0

    def __post_init__(self):
        if self.h < 1 or self.d_ff < 1:
            raise DataError(f"dims must be positive, got h={self.h}, d_ff={self.d_ff}")
        if self.probes < 1:
            raise DataError("probe count must be positive")
        unknown = set(self.targets) - {"w1", "w2"}
        if unknown:
            raise DataError(f"unknown targets {sorted(unknown)}; experts carry 'w1' and 'w2'")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names) or "base" in names:
            raise DataError(f"expert names must be unique and not 'base': {names}")
        for e in self.experts:
            if e.spectrum.effective_rank > min(self.h, self.d_ff):
                raise DataError(
                    f"expert {e.name!r}: effective rank {e.spectrum.effective_rank} "
                    f"exceeds min(h, d_ff) = {min(self.h, self.d_ff)}"
                )
        if not self.groups:
            raise DataError("scenario needs at least one group")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            experts = tuple(
                ExpertSpec(
                    e["name"],
                    SpectrumSpec(
                        int(e.get("effective_rank", 0)),
                        float(e.get("sigma0", 1.0)),
                        float(e.get("decay", 0.5)),
                        float(e.get("noise_floor", 0.0)),
                    ),
                )
                for e in d["experts"]
            )
            groups = tuple(
                GroupSpec(
                    g["name"],
                    int(g.get("tasks", 1)),
                    g.get("probe_scale"),
                    g.get("subspace_dim"),
                )
                for g in d.get("groups", [{"name": "default"}])
            )
            return cls(
                seed=int(d["seed"]),
                h=int(d["h"]),
                d_ff=int(d["d_ff"]),
                experts=experts,
                groups=groups,
                targets=tuple(d.get("targets", ("w1", "w2"))),
                probes=int(d.get("probes", 8)),
                probe_scale=float(d.get("probe_scale", 1.0)),
                base_scale=float(d.get("base_scale", 0.2)),
                router_scale=float(d.get("router_scale", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid scenario: {exc!r}") from exc

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))


def load_scenario(path: str | os.PathLike) -> Scenario:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    return Scenario.from_dict(d)


@dataclass
class GeneratedModel:
    base: ExpertBundle
    experts: list[ExpertBundle]
    router: np.ndarray


def _streams(seed: int) -> tuple[SplitMix64, SplitMix64, SplitMix64]:
    master = SplitMix64(seed)
    return master.child(), master.child(), master.child()


def generate(scenario: Scenario) -> GeneratedModel:
    """Base bundle, one bundle per expert and the router, in that draw order."""
    weights_rng, router_rng, _ = _streams(scenario.seed)
    h, d_ff = scenario.h, scenario.d_ff
    base = ExpertBundle(
        "base",
        {
            "w1": random_matrix(weights_rng, d_ff, h, scenario.base_scale),
            "w2": random_matrix(weights_rng, h, d_ff, scenario.base_scale),
        },
    )
    experts = [
        make_expert(base, e.spectrum, weights_rng, name=e.name, targets=list(scenario.targets))
        for e in scenario.experts
    ]
    router = random_matrix(router_rng, len(experts) + 1, h, scenario.router_scale)
    return GeneratedModel(base, experts, router)


def group_probes(scenario: Scenario) -> dict[str, list[np.ndarray]]:
    """Probe matrices per group, one ``h x probes`` matrix per task."""
    _, _, probe_rng = _streams(scenario.seed)
    out = {}
    for g in scenario.groups:
        scale = scenario.probe_scale if g.probe_scale is None else float(g.probe_scale)
        out[g.name] = [
            make_probes(probe_rng, scenario.h, scenario.probes, scale, g.subspace_dim)
            for _ in range(g.tasks)
        ]
    return out
