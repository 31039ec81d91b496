"""Mixture forward pass over a base expert plus full or low-rank experts.

Every expert is a two-matrix block ``w2 @ act(w1 @ x)`` stored under the
targets ``"w1"`` (d_ff x h) and ``"w2"`` (h x d_ff). Router row 0 belongs to
the base expert; row ``i`` belongs to ``experts[i - 1]``. A low-rank expert
runs the base block with ``B @ A`` added to each adapted target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

from .errors import InvariantError, ShapeError
from .weights import ExpertBundle, LowRankAdapter

GLOBAL = "global"
RENORMALIZED = "renormalized"
SOFTMAX_MODES = (GLOBAL, RENORMALIZED)
ACTIVATIONS = ("silu", "linear")
BLOCK_TARGETS = ("w1", "w2")


@dataclass(frozen=True)
class FullExpert:
    bundle: ExpertBundle

    @property
    def name(self) -> str:
        return self.bundle.name


@dataclass(frozen=True)
class LowRankExpert:
    adapter: LowRankAdapter

    @property
    def name(self) -> str:
        return self.adapter.name


ExpertEntry = Union[FullExpert, LowRankExpert]


def silu(z: np.ndarray) -> np.ndarray:
    # z * sigmoid(z), written to avoid overflow in exp for large |z|
    return z * (0.5 * (1.0 + np.tanh(0.5 * z)))


def expert_forward(w1: np.ndarray, w2: np.ndarray, x: np.ndarray, activation: str = "silu"):
    """Evaluate ``w2 @ act(w1 @ x)``; *x* may be a vector or an h x batch matrix."""
    if w1.ndim != 2 or w2.ndim != 2 or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"w1 {w1.shape} and w2 {w2.shape} do not chain")
    if x.shape[0] != w1.shape[1]:
        raise ShapeError(f"input has length {x.shape[0]}, w1 expects {w1.shape[1]}")
    hidden = w1 @ x
    if activation == "silu":
        hidden = silu(hidden)
    elif activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return w2 @ hidden


@dataclass
class MixtureSpec:
    base: ExpertBundle
    experts: list[ExpertEntry]
    router: np.ndarray
    top_k: int
    softmax_mode: Literal["global", "renormalized"] = GLOBAL
    activation: Literal["silu", "linear"] = "silu"
    _effective: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.router = np.asarray(self.router, dtype=np.float64)
        n_total = len(self.experts) + 1
        if self.router.ndim != 2 or self.router.shape[0] != n_total:
            raise InvariantError(
                f"router has shape {self.router.shape}, expected {n_total} rows "
                f"(base + {len(self.experts)} experts)"
            )
        if not 1 <= self.top_k <= n_total:
            raise InvariantError(f"top_k={self.top_k} outside [1, {n_total}]")
        if self.softmax_mode not in SOFTMAX_MODES:
            raise InvariantError(f"unknown softmax mode {self.softmax_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise InvariantError(f"unknown activation {self.activation!r}")
        for t in BLOCK_TARGETS:
            if t not in self.base.matrices:
                raise InvariantError(f"base {self.base.name!r} has no {t!r} target")
        w1, w2 = self.base["w1"], self.base["w2"]
        if w2.shape[1] != w1.shape[0] or w2.shape[0] != w1.shape[1]:
            raise ShapeError(f"base block w1 {w1.shape} / w2 {w2.shape} is not h -> d_ff -> h")
        if self.router.shape[1] != self.h:
            raise InvariantError(f"router width {self.router.shape[1]} != model width {self.h}")
        for e in self.experts:
            if isinstance(e, FullExpert):
                if not e.bundle.composable_with(self.base):
                    raise ShapeError(f"expert {e.name!r} does not match the base signature")
            elif isinstance(e, LowRankExpert):
                a = e.adapter
                if a.base_name != self.base.name:
                    raise InvariantError(
                        f"adapter {a.name!r} is anchored to {a.base_name!r}, "
                        f"which is not the base {self.base.name!r}"
                    )
                for entry in a:
                    if entry.target not in self.base.matrices:
                        raise ShapeError(f"adapter {a.name!r} targets unknown {entry.target!r}")
                    if entry.shape != self.base[entry.target].shape:
                        raise ShapeError(
                            f"adapter {a.name!r} target {entry.target!r} has shape "
                            f"{entry.shape}, base has {self.base[entry.target].shape}"
                        )
            else:
                raise InvariantError(f"unsupported expert entry {e!r}")

    @property
    def h(self) -> int:
        return self.base["w1"].shape[1]

    @property
    def n_experts(self) -> int:
        return len(self.experts) + 1


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def route_weights(spec: MixtureSpec, x: np.ndarray) -> np.ndarray:
    """Dense (n+1) x batch matrix of routing weights, zero for unselected experts."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    cols = x[:, None] if single else x
    if cols.shape[0] != spec.h:
        raise ShapeError(f"input has length {cols.shape[0]}, router expects {spec.h}")
    logits = spec.router @ cols
    probs = _softmax(logits)
    # stable sort on -logit keeps the lower index first among ties
    order = np.argsort(-logits, axis=0, kind="stable")[: spec.top_k]
    batch = np.arange(cols.shape[1])
    weights = np.zeros_like(probs)
    weights[order, batch] = probs[order, batch]
    if spec.softmax_mode == RENORMALIZED:
        weights /= weights.sum(axis=0, keepdims=True)
    return weights[:, 0] if single else weights


def route(spec: MixtureSpec, x) -> list[tuple[int, float]]:
    """Selected ``(expert_index, weight)`` pairs for one input, highest logit first."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("route takes a single input vector")
    weights = route_weights(spec, x)
    order = np.argsort(-(spec.router @ x), kind="stable")[: spec.top_k]
    return [(int(i), float(weights[i])) for i in order]


def _block_output(spec: MixtureSpec, index: int, x: np.ndarray) -> np.ndarray:
    base = spec.base
    if index == 0:
        return expert_forward(base["w1"], base["w2"], x, spec.activation)
    entry = spec.experts[index - 1]
    if isinstance(entry, FullExpert):
        return expert_forward(entry.bundle["w1"], entry.bundle["w2"], x, spec.activation)
    # base block with each adapted target's B @ A applied in factored form
    w1 = entry.adapter.entry("w1")
    w2 = entry.adapter.entry("w2")
    hidden = base["w1"] @ x
    if w1 is not None:
        hidden = hidden + w1.b @ (w1.a @ x)
    if spec.activation == "silu":
        hidden = silu(hidden)
    out = base["w2"] @ hidden
    if w2 is not None:
        out = out + w2.b @ (w2.a @ hidden)
    return out


def mixture_forward(spec: MixtureSpec, x) -> np.ndarray:
    """Weighted sum of routed expert outputs; *x* is a vector or an h x batch matrix.

    Only the routed expert's weight scales a low-rank block; the base
    expert's own router weight is not added on its behalf.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = route_weights(spec, x)
    single = x.ndim == 1
    cols = x[:, None] if single else x
    w = weights[:, None] if single else weights
    y = np.zeros((spec.h, cols.shape[1]))
    for i in range(spec.n_experts):
        active = np.nonzero(w[i])[0]
        if active.size == 0:
            continue
        y[:, active] += w[i, active] * _block_output(spec, i, cols[:, active])
    return y[:, 0] if single else y


def densify(spec: MixtureSpec) -> MixtureSpec:
    """Same mixture with every low-rank expert replaced by its materialized bundle."""
    from .adapter import materialize

    experts = [
        FullExpert(materialize(e.adapter, spec.base)) if isinstance(e, LowRankExpert) else e
        for e in spec.experts
    ]
    return MixtureSpec(
        spec.base, experts, spec.router, spec.top_k, spec.softmax_mode, spec.activation
    )
