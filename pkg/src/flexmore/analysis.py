"""Score tables and the rank-sensitivity arithmetic run over them."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence, Union

from .errors import DataError

FULL = "full"
AVG_GROUP = "Avg"
HEADER = ("expert", "rank", "group", "task", "score")
Rank = Union[int, str]


@dataclass(frozen=True)
class ScoreRecord:
    expert: str
    rank: Rank
    group: str
    task: str
    score: float

    @property
    def key(self) -> tuple:
        return (self.expert, self.rank, self.group, self.task)


def parse_rank(text: str) -> Rank:
    text = text.strip()
    if text == FULL:
        return FULL
    r = int(text)
    if r < 1 or r & (r - 1):
        raise ValueError(f"rank {r} is not a positive power of two")
    return r


def rank_sort_key(rank: Rank) -> tuple[int, int]:
    """Numeric ranks ascending, ``full`` last."""
    return (1, 0) if rank == FULL else (0, int(rank))


class ScoreTable:
    """Ordered collection of :class:`ScoreRecord` with unique keys."""

    def __init__(self, records: Iterable[ScoreRecord] = ()):
        self.records: list[ScoreRecord] = []
        self._keys: set = set()
        for rec in records:
            self.add(rec)

    def add(self, rec: ScoreRecord) -> None:
        if rec.key in self._keys:
            raise DataError(f"duplicate score record {rec.key}")
        self._keys.add(rec.key)
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def experts(self) -> list[str]:
        return list(OrderedDict.fromkeys(r.expert for r in self.records))

    def groups(self) -> list[str]:
        return list(OrderedDict.fromkeys(r.group for r in self.records))

    def ranks(self, expert: str) -> list[Rank]:
        return sorted({r.rank for r in self.records if r.expert == expert}, key=rank_sort_key)

    def group_means(self, expert: str, rank: Rank) -> dict[str, float]:
        """Mean task score per group for one (expert, rank), in first-seen group order."""
        acc: dict[str, list[float]] = OrderedDict()
        for r in self.records:
            if r.expert == expert and r.rank == rank:
                acc.setdefault(r.group, []).append(r.score)
        return {g: math.fsum(v) / len(v) for g, v in acc.items()}

    # --- text formats ---

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.records:
            w.writerow([r.expert, r.rank, r.group, r.task, repr(float(r.score))])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({k: getattr(r, k) for k in HEADER}) + "\n" for r in self.records
        )

    @classmethod
    def from_csv(cls, text: str, source: str = "<table>") -> "ScoreTable":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{source}: empty score table") from None
        if tuple(h.strip() for h in header) != HEADER:
            raise DataError(f"{source}:1: expected header {','.join(HEADER)}, got {','.join(header)}")
        table = cls()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise DataError(f"{source}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                rec = ScoreRecord(row[0], parse_rank(row[1]), row[2], row[3], float(row[4]))
            except ValueError as exc:
                raise DataError(f"{source}:{lineno}: {exc}") from None
            if not math.isfinite(rec.score):
                raise DataError(f"{source}:{lineno}: non-finite score")
            try:
                table.add(rec)
            except DataError as exc:
                raise DataError(f"{source}:{lineno}: {exc}") from None
        if not table.records:
            raise DataError(f"{source}: score table has no rows")
        return table

    @classmethod
    def from_jsonl(cls, text: str, source: str = "<table>") -> "ScoreTable":
        table = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rank = d["rank"] if d["rank"] == FULL else parse_rank(str(d["rank"]))
                rec = ScoreRecord(str(d["expert"]), rank, str(d["group"]), str(d["task"]),
                                  float(d["score"]))
                table.add(rec)
            except (ValueError, KeyError, TypeError, DataError) as exc:
                raise DataError(f"{source}:{lineno}: {exc}") from None
        if not table.records:
            raise DataError(f"{source}: score table has no rows")
        return table

    @classmethod
    def read(cls, path) -> "ScoreTable":
        with open(path) as f:
            text = f.read()
        if str(path).endswith((".jsonl", ".json")):
            return cls.from_jsonl(text, str(path))
        return cls.from_csv(text, str(path))


# --- aggregate scores -------------------------------------------------------


def avg_score(groups: Union[Mapping[str, Sequence[float]], Iterable[ScoreRecord]]) -> float:
    """Unweighted mean of per-group mean task scores."""
    if not isinstance(groups, Mapping):
        acc: dict[str, list[float]] = defaultdict(list)
        for rec in groups:
            acc[rec.group].append(rec.score)
        groups = acc
    if not groups:
        raise DataError("avg_score needs at least one group")
    means = []
    for g, scores in groups.items():
        scores = list(scores)
        if not scores:
            raise DataError(f"group {g!r} has no scores")
        means.append(math.fsum(scores) / len(scores))
    return math.fsum(means) / len(means)


def rel_improvement(model_avg: float, baseline_avg: float) -> float:
    """Relative improvement in percent."""
    if not baseline_avg > 0:
        raise DataError(f"baseline average must be positive, got {baseline_avg}")
    return 100.0 * (model_avg - baseline_avg) / baseline_avg


# --- regression and peaks ---------------------------------------------------


@dataclass(frozen=True)
class RegressionResult:
    alpha: float
    beta: float
    pearson_r: float
    n_points: int


def fit_rank_sensitivity(points: Iterable[tuple[float, float]]) -> RegressionResult:
    """Least-squares fit of ``score = alpha + beta * log2(rank)`` plus Pearson r.

    Pearson r is reported as 0 when the scores have zero variance.
    """
    pts = [(math.log2(r), float(s)) for r, s in points]
    n = len(pts)
    if n < 2:
        raise DataError(f"need at least 2 points, got {n}")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    if sxx == 0:
        raise DataError("all ranks are equal; slope is undefined")
    beta = sxy / sxx
    alpha = my - beta * mx
    pearson = 0.0 if syy == 0 else sxy / math.sqrt(sxx * syy)
    return RegressionResult(alpha, beta, max(-1.0, min(1.0, pearson)), n)


@dataclass(frozen=True)
class PeakRank:
    expert: str
    group: str
    r_star: int
    log2_r_star: int


def peak_rank(points: Iterable[tuple[int, float]], expert: str = "", group: str = "") -> PeakRank:
    """Rank with the highest score; the lowest such rank on ties."""
    pts = sorted(((int(r), float(s)) for r, s in points), key=lambda p: p[0])
    if not pts:
        raise DataError("peak_rank needs at least one point")
    ranks = [r for r, _ in pts]
    if len(set(ranks)) != len(ranks):
        raise DataError(f"duplicate ranks in {ranks}")
    best_r, best_s = pts[0]
    for r, s in pts[1:]:
        if s > best_s:
            best_r, best_s = r, s
    return PeakRank(expert, group, best_r, int(round(math.log2(best_r))))


def quantile(values: Sequence[float], p: float) -> float:
    """Linear-interpolation quantile at index ``p * (n - 1)`` of the sorted values."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise DataError("quantile of an empty sequence")
    pos = p * (len(xs) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


@dataclass(frozen=True)
class PeakSummary:
    median: float
    q25: float
    q75: float
    n: int


def summarize_peaks(peaks: Iterable[Union[PeakRank, float]]) -> PeakSummary:
    """Median and quartiles of log2 peak ranks."""
    vals = [p.log2_r_star if isinstance(p, PeakRank) else float(p) for p in peaks]
    if not vals:
        raise DataError("no peaks to summarize")
    return PeakSummary(quantile(vals, 0.5), quantile(vals, 0.25), quantile(vals, 0.75), len(vals))


@dataclass(frozen=True)
class SlopeSummary:
    median: float
    min: float
    max: float
    n: int


def summarize_slopes(results: Iterable[Union[RegressionResult, float]]) -> SlopeSummary:
    slopes = [r.beta if isinstance(r, RegressionResult) else float(r) for r in results]
    if not slopes:
        raise DataError("no slopes to summarize")
    return SlopeSummary(quantile(slopes, 0.5), min(slopes), max(slopes), len(slopes))


# --- rank selection ---------------------------------------------------------


@dataclass(frozen=True)
class RankSelection:
    strategy: str
    chosen: dict[str, int]
    proxy_group: str | None = None


def select_ranks(
    table: ScoreTable,
    strategy: str = "all_groups_avg",
    proxy_group: str | None = None,
    experts: Sequence[str] | None = None,
) -> RankSelection:
    """Best rank per expert by a proxy group's mean score or by the all-group average."""
    if strategy not in ("per_group_proxy", "all_groups_avg"):
        raise DataError(f"unknown strategy {strategy!r}")
    if strategy == "per_group_proxy" and not proxy_group:
        raise DataError("per_group_proxy needs a proxy group")
    chosen = {}
    for expert in experts or table.experts():
        points = []
        for rank in table.ranks(expert):
            if rank == FULL:
                continue
            means = table.group_means(expert, rank)
            if strategy == "per_group_proxy":
                if proxy_group not in means:
                    raise DataError(f"expert {expert!r} rank {rank}: no scores for {proxy_group!r}")
                points.append((rank, means[proxy_group]))
            else:
                points.append((rank, math.fsum(means.values()) / len(means)))
        if not points:
            raise DataError(f"expert {expert!r} has no numeric-rank scores")
        chosen[expert] = peak_rank(points).r_star
    return RankSelection(strategy, chosen, proxy_group)


# --- full report -------------------------------------------------------------


def is_mixture(model: str) -> bool:
    return model.startswith("mixture-")


@dataclass
class Report:
    regression: list[dict]
    slope_summary: list[dict]
    peaks: list[dict]
    peak_summary: list[dict]
    averages: list[dict]
    groups: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def rank_series(table: ScoreTable, model: str) -> dict[str, list[tuple[int, float]]]:
    """group (plus ``Avg``) -> [(rank, group mean)] over numeric ranks."""
    out: dict[str, list[tuple[int, float]]] = OrderedDict()
    for rank in table.ranks(model):
        if rank == FULL:
            continue
        means = table.group_means(model, rank)
        for g, m in means.items():
            out.setdefault(g, []).append((rank, m))
        out.setdefault(AVG_GROUP, []).append((rank, avg_score({g: [m] for g, m in means.items()})))
    return out


def build_report(table: ScoreTable) -> Report:
    if not len(table):
        raise DataError("empty score table")
    groups = table.groups()
    all_groups = groups + [AVG_GROUP]
    models = table.experts()
    series = {m: rank_series(table, m) for m in models}

    regression, slope_summary, peaks = [], [], []
    for m in models:
        fits = []
        for g in all_groups:
            pts = series[m].get(g, [])
            if len({r for r, _ in pts}) < 2:
                continue
            fit = fit_rank_sensitivity(pts)
            regression.append({"model": m, "group": g, **asdict(fit)})
            if g != AVG_GROUP:
                fits.append(fit)
            pk = peak_rank(pts, m, g)
            peaks.append(asdict(pk))
        if fits:
            slope_summary.append({"model": m, **asdict(summarize_slopes(fits))})

    # pooled rows over all single experts, per group
    singles = [m for m in models if not is_mixture(m)]
    pooled_fits = []
    for g in all_groups:
        pts = [p for m in singles for p in series[m].get(g, [])]
        if len(singles) > 1 and len({r for r, _ in pts}) >= 2:
            fit = fit_rank_sensitivity(pts)
            regression.append({"model": "experts", "group": g, **asdict(fit)})
            if g != AVG_GROUP:
                pooled_fits.append(fit)
    if pooled_fits:
        slope_summary.append({"model": "experts", **asdict(summarize_slopes(pooled_fits))})

    peak_summary = []
    for g in all_groups:
        vals = [p for p in peaks if p["group"] == g and not is_mixture(p["expert"])]
        if vals:
            s = summarize_peaks([p["log2_r_star"] for p in vals])
            peak_summary.append({"group": g, **asdict(s)})

    averages = []
    for m in models:
        baseline = None
        if FULL in table.ranks(m):
            baseline = avg_score({g: [v] for g, v in table.group_means(m, FULL).items()})
        for rank in table.ranks(m):
            means = table.group_means(m, rank)
            avg = avg_score({g: [v] for g, v in means.items()})
            row = {"model": m, "rank": rank}
            row.update({g: means.get(g) for g in groups})
            row["avg"] = avg
            row["delta_pct"] = (
                None if baseline is None or rank == FULL or baseline <= 0
                else rel_improvement(avg, baseline)
            )
            averages.append(row)
    return Report(regression, slope_summary, peaks, peak_summary, averages, groups)
