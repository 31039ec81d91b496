"""Mixtures of rank-heterogeneous experts at desk scale.

Extract low-rank adapters from full expert weights, compose them into routed
mixtures over a shared base expert, count parameters, and analyse how task
scores move with adapter rank.
"""

__version__ = "0.1.0"

from .adapter import (
    OLMO7B,
    ParamPreset,
    adapter_params,
    delta,
    materialize,
    max_useful_rank,
    mixture_params,
    phlora_extract,
)
from .analysis import (
    ScoreRecord,
    ScoreTable,
    avg_score,
    fit_rank_sensitivity,
    peak_rank,
    rel_improvement,
    select_ranks,
    summarize_peaks,
    summarize_slopes,
)
from .linalg import SvdResult, frobenius_norm, matmul, svd, truncate_svd
from .moe import FullExpert, LowRankExpert, MixtureSpec, expert_forward, mixture_forward, route
from .synth import SplitMix64, SpectrumSpec, fidelity, make_expert, random_matrix
from .weights import (
    AdapterEntry,
    ExpertBundle,
    LowRankAdapter,
    load_adapter,
    load_bundle,
    save_adapter,
    save_bundle,
)
