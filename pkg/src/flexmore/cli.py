"""Command-line entry point: ``flexmore <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
Errors are reported on stderr as a single ``flexmore: error: <kind>: <msg>`` line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .adapter import FULL, PRESETS, delta, expert_params, format_params, mixture_params, phlora_extract
from .analysis import ScoreTable, build_report, select_ranks
from .errors import DataError, FlexMoreError, NumericalError
from .linalg import frobenius_norm
from .moe import FullExpert, LowRankExpert, MixtureSpec, mixture_forward
from .sweep import (
    DEFAULT_ACTIVE,
    EXPERT_RANKS,
    MIXTURE_RANKS,
    SweepInputs,
    expert_sweep,
    mixture_sweep,
)
from .synth import generate, group_probes, load_scenario
from .weights import ExpertBundle, load_adapter, load_bundle, save_adapter, save_bundle

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(text)


def _parse_rank_list(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok == FULL:
            out.append(FULL)
        elif "^" in tok:
            b, e = tok.split("^")
            out.append(int(b) ** int(e))
        else:
            out.append(int(tok))
    return out


def _parse_target_ranks(text: str) -> dict[str, int]:
    out = {}
    for tok in text.split(","):
        if "=" not in tok:
            raise UsageError(f"expected target=rank, got {tok!r}")
        t, r = tok.split("=", 1)
        out[t.strip()] = int(r)
    return out


def _rows_to_text(rows: list[dict], columns: list[str], fmt: str, digits: dict) -> str:
    def cell(col, v):
        if v is None:
            return ""
        if isinstance(v, float) and col in digits:
            return f"{v:.{digits[col]}f}"
        return v

    if fmt == "json-lines":
        return "".join(
            json.dumps({c: cell(c, r.get(c)) for c in columns}) + "\n" for r in rows
        )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([cell(c, r.get(c)) for c in columns])
    return buf.getvalue()


def _ext(fmt: str) -> str:
    return "jsonl" if fmt == "json-lines" else "csv"


# --- commands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    model = generate(scenario)
    written = []
    path = _out_path(args, "base.fmw")
    save_bundle(model.base, path)
    written.append(path)
    for e in model.experts:
        path = _out_path(args, f"{e.name}.fmw")
        save_bundle(e, path)
        written.append(path)
    path = _out_path(args, "router.fmw")
    save_bundle(ExpertBundle("router", {"router": model.router}), path)
    written.append(path)
    for p in written:
        print(p)
    return 0


def cmd_extract(args) -> int:
    expert = load_bundle(args.expert)
    base = load_bundle(args.base)
    if args.ranks:
        ranks = _parse_target_ranks(args.ranks)
    elif args.rank is not None:
        ranks = args.rank
    else:
        raise UsageError("one of --rank or --ranks is required")
    adapter = phlora_extract(expert, base, ranks, name=args.name or expert.name)
    d = delta(expert, base)
    for e in adapter:
        err = frobenius_norm(d[e.target] - e.product())
        ref = frobenius_norm(d[e.target])
        rel = err / ref if ref > 0 else 0.0
        print(f"target={e.target} rank={e.rank} abs_error={err:.6e} rel_error={rel:.6e}")
    path = args.output or _out_path(args, f"{expert.name}.fma")
    save_adapter(adapter, path)
    print(path)
    return 0


def _load_composition(path: str) -> MixtureSpec:
    try:
        with open(path) as f:
            comp = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    root = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    try:
        base = load_bundle(resolve(comp["base"]))
        router_bundle = load_bundle(resolve(comp["router"]))
        entries = []
        for e in comp["experts"]:
            if e["kind"] == "full":
                entries.append(FullExpert(load_bundle(resolve(e["path"]))))
            elif e["kind"] == "adapter":
                entries.append(LowRankExpert(load_adapter(resolve(e["path"]))))
            else:
                raise DataError(f"{path}: unknown expert kind {e['kind']!r}")
        router = router_bundle.matrices[router_bundle.targets[0]]
        return MixtureSpec(
            base,
            entries,
            router,
            int(comp["top_k"]),
            comp.get("softmax_mode", "global"),
            comp.get("activation", "silu"),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from None


def cmd_compose(args) -> int:
    experts = []
    for item in args.expert or []:
        kind, _, p = item.partition(":")
        if kind not in ("full", "adapter") or not p:
            raise UsageError(f"--expert takes full:PATH or adapter:PATH, got {item!r}")
        experts.append({"kind": kind, "path": os.path.abspath(p)})
    comp = {
        "base": os.path.abspath(args.base),
        "router": os.path.abspath(args.router),
        "experts": experts,
        "top_k": args.top_k,
        "softmax_mode": args.softmax_mode,
        "activation": args.activation,
    }
    path = args.output or _out_path(args, "composition.json")
    text = json.dumps(comp, indent=2) + "\n"
    _write_text(path, text)
    # validate by loading it back
    spec = _load_composition(path)
    print(f"{path} experts={len(spec.experts)} top_k={spec.top_k} mode={spec.softmax_mode}")
    return 0


def _read_inputs(args, h: int) -> np.ndarray:
    rows = []
    if args.x:
        rows = [[float(v) for v in row.split(",")] for row in args.x.split(";")]
    elif args.input:
        with open(args.input) as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#"):
                    rows.append([float(v) for v in line.split(",")])
    else:
        raise UsageError("forward needs --x or --input")
    x = np.array(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != h:
        raise DataError(f"inputs must have {h} values per row")
    return x.T


def cmd_forward(args) -> int:
    spec = _load_composition(args.composition)
    x = _read_inputs(args, spec.h)
    y = mixture_forward(spec, x)
    if not np.all(np.isfinite(y)):
        raise NumericalError("mixture output contains non-finite values")
    for col in y.T:
        print(",".join(repr(float(v)) for v in col))
    return 0


def _load_sweep_inputs(args, scenario) -> SweepInputs:
    bundles = args.bundles or args.out
    try:
        base = load_bundle(os.path.join(bundles, "base.fmw"))
        experts = [load_bundle(os.path.join(bundles, f"{e.name}.fmw")) for e in scenario.experts]
        router_bundle = load_bundle(os.path.join(bundles, "router.fmw"))
    except FileNotFoundError as exc:
        raise DataError(f"missing bundle file {exc.filename} (run `gen` first)") from None
    router = router_bundle.matrices[router_bundle.targets[0]]
    return SweepInputs(base, experts, router, group_probes(scenario),
                       softmax_mode=args.softmax_mode, activation=args.activation)


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    inputs = _load_sweep_inputs(args, scenario)
    n_total = len(inputs.experts) + 1
    table = ScoreTable()
    if args.mode in ("experts", "both"):
        ranks = _parse_rank_list(args.ranks) if args.ranks else list(EXPERT_RANKS)
        for rec in expert_sweep(inputs, ranks):
            table.add(rec)
    if args.mode in ("mixture", "both"):
        ranks = _parse_rank_list(args.mixture_ranks) if args.mixture_ranks else list(MIXTURE_RANKS)
        if args.active:
            active = [int(v) for v in args.active.split(",")]
        else:
            active = [k for k in DEFAULT_ACTIVE if k <= n_total]
        for rec in mixture_sweep(inputs, ranks, active):
            table.add(rec)
    fmt = args.format
    text = table.to_jsonl() if fmt == "json-lines" else table.to_csv()
    path = args.output or _out_path(args, f"scores.{_ext(fmt)}")
    _write_text(path, text)
    print(f"{path} rows={len(table)}")
    return 0


def cmd_select_ranks(args) -> int:
    table = ScoreTable.read(args.table)
    strategy = "per_group_proxy" if args.group else "all_groups_avg"
    experts = [e for e in table.experts() if not e.startswith("mixture-")]
    sel = select_ranks(table, strategy, args.group, experts)
    rows = [{"expert": e, "rank": r} for e, r in sel.chosen.items()]
    print(_rows_to_text(rows, ["expert", "rank"], args.format, {}), end="")
    return 0


REPORT_DIGITS = {
    "alpha": 4, "beta": 4, "pearson_r": 4, "median": 4, "min": 4, "max": 4,
    "q25": 2, "q75": 2, "avg": 4, "delta_pct": 2,
}


def cmd_analyze(args) -> int:
    from .plotting import render_figures

    table = ScoreTable.read(args.table)
    report = build_report(table)
    fmt = args.format
    ext = _ext(fmt)
    digits = dict(REPORT_DIGITS)
    digits.update({g: 4 for g in report.groups})
    files = {
        f"regression.{ext}": _rows_to_text(
            report.regression, ["model", "group", "alpha", "beta", "pearson_r", "n_points"],
            fmt, digits),
        f"slope_summary.{ext}": _rows_to_text(
            report.slope_summary, ["model", "median", "min", "max", "n"], fmt, digits),
        f"peaks.{ext}": _rows_to_text(
            report.peaks, ["expert", "group", "r_star", "log2_r_star"], fmt, digits),
        f"peak_summary.{ext}": _rows_to_text(
            report.peak_summary, ["group", "median", "q25", "q75", "n"],
            fmt, {"median": 2, "q25": 2, "q75": 2}),
        f"averages.{ext}": _rows_to_text(
            report.averages, ["model", "rank", *report.groups, "avg", "delta_pct"], fmt, digits),
        "summary.json": json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
    }
    outdir = args.out
    os.makedirs(outdir, exist_ok=True)
    for name, text in files.items():
        _write_text(os.path.join(outdir, name), text)
    figures = [] if args.no_figures else render_figures(table, report, os.path.join(outdir, "figures"))
    for name in list(files) + [os.path.relpath(p, outdir) for p in figures]:
        print(os.path.join(outdir, name))
    return 0


def cmd_params(args) -> int:
    preset = PRESETS.get(args.preset)
    if preset is None:
        raise UsageError(f"unknown preset {args.preset!r}; known: {sorted(PRESETS)}")
    experts: list = []
    if args.composition:
        spec = _load_composition(args.composition)
        for e in spec.experts:
            if isinstance(e, FullExpert):
                experts.append(FULL)
            else:
                ranks = set(e.adapter.ranks.values())
                if len(ranks) != 1:
                    raise DataError(f"adapter {e.name!r} mixes ranks {sorted(ranks)}")
                experts.append(ranks.pop())
    for tok in args.experts or []:
        experts.extend(_parse_rank_list(tok))
    rows = [{"entry": "base", "params": preset.base_params,
             "display": format_params(preset.base_params)}]
    for i, e in enumerate(experts, start=1):
        n = expert_params(preset, e)
        label = "full" if e == FULL else f"r={e}"
        rows.append({"entry": f"expert{i} ({label})", "params": n, "display": format_params(n)})
    total = mixture_params(preset, experts)
    rows.append({"entry": "total", "params": total, "display": f"{total / 1e9:.2f}B"})
    print(_rows_to_text(rows, ["entry", "params", "display"], args.format, {}), end="")
    return 0


# --- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: usage: {message}\n")


def _global_flags(parser, defaults: bool) -> None:
    # subcommands repeat the flags with suppressed defaults so they never clobber top-level ones
    kw = (lambda v: {"default": v}) if defaults else (lambda v: {"default": argparse.SUPPRESS})
    parser.add_argument("--seed", type=int, help="override the scenario seed (u64)", **kw(None))
    parser.add_argument("--out", help="output directory", **kw("."))
    parser.add_argument("--format", choices=("csv", "json-lines"), **kw("csv"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, defaults=False)

    p = _Parser(prog="flexmore", description=__doc__.splitlines()[0])
    _global_flags(p, defaults=True)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate base, experts and router")
    s.add_argument("scenario")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("extract", parents=[common], help="extract a low-rank adapter")
    s.add_argument("expert")
    s.add_argument("base")
    s.add_argument("--rank", type=int)
    s.add_argument("--ranks", help="per-target ranks, e.g. w1=4,w2=8")
    s.add_argument("--name")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("compose", parents=[common], help="write a composition file")
    s.add_argument("--base", required=True)
    s.add_argument("--router", required=True)
    s.add_argument("--expert", action="append", help="full:PATH or adapter:PATH (repeatable)")
    s.add_argument("--top-k", type=int, required=True)
    s.add_argument("--softmax-mode", choices=("global", "renormalized"), default="global")
    s.add_argument("--activation", choices=("silu", "linear"), default="silu")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("forward", parents=[common], help="run a composed mixture on inputs")
    s.add_argument("composition")
    s.add_argument("--x", help="inputs as 'a,b,c;d,e,f'")
    s.add_argument("--input", help="file with one comma-separated input per line")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("sweep", parents=[common], help="score adapters across ranks")
    s.add_argument("scenario")
    s.add_argument("--bundles", help="directory holding gen output (default: --out)")
    s.add_argument("--mode", choices=("experts", "mixture", "both"), default="both")
    s.add_argument("--ranks", help="expert-sweep ranks, e.g. 1,2,4 or 2^0,...,full")
    s.add_argument("--mixture-ranks")
    s.add_argument("--active", help="active-expert counts, default 2,4,7")
    s.add_argument("--softmax-mode", choices=("global", "renormalized"), default="global")
    s.add_argument("--activation", choices=("silu", "linear"), default="silu")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("select-ranks", parents=[common], help="best rank per expert")
    s.add_argument("table")
    s.add_argument("--group", help="proxy group; omit to use the all-group average")
    s.set_defaults(func=cmd_select_ranks)

    s = sub.add_parser("analyze", parents=[common], help="regression / peak-rank report")
    s.add_argument("table")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("params", parents=[common], help="parameter totals for a preset")
    s.add_argument("--preset", default="olmo7b")
    s.add_argument("--composition")
    s.add_argument("experts", nargs="*", help="'full' or adapter ranks, comma or space separated")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"flexmore: error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"flexmore: error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FlexMoreError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"flexmore: error: data: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
