"""Experiment plans, result rows and the trend self-check.

A plan is a grid of (model, n) cells.  Each cell gets one line topology
(seeded from the base seed and ``n`` only, so all models at a given ``n``
share it), one network and, for ORR models, one circuit setup that every
iteration of the cell reuses.  Each iteration then distributes a fresh
secret under its own seed.
"""

from __future__ import annotations

import csv
import gc
import hashlib
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .crypto import RngContext
from .errors import ConfigError
from .onioncodec import Variant
from .protocols import (
    MODELS,
    Circuit,
    LayerKeys,
    RunTranscript,
    kr_run,
    orr_ext_run,
    orr_run,
    orr_setup,
    tn_run,
)
from .simnet import Network, Topology

log = logging.getLogger(__name__)

DEFAULT_NODES = (3, 5, 7, 9, 11)
DEFAULT_ITERATIONS = 100
FORMATS = ("csv", "json", "md", "svg")

CSV_COLUMNS = (
    "model",
    "variant",
    "n",
    "iterations",
    "enc_mean_us",
    "enc_min_us",
    "enc_max_us",
    "enc_std_us",
    "dist_mean_us",
    "dist_min_us",
    "dist_max_us",
    "dist_std_us",
    "wire_bytes_mean",
    "setup_us",
    "digest",
)
TIMING_COLUMNS = frozenset(c for c in CSV_COLUMNS if c.endswith("_us"))


class RunFailure(Exception):
    """One iteration of a plan did not deliver; carries what is needed to replay it."""

    def __init__(self, model: str, n: int, iteration: int | str, seed: int, cause: BaseException):
        self.model, self.n, self.iteration, self.seed, self.cause = model, n, iteration, seed, cause
        hop = getattr(cause, "hop", None)
        where = f" at hop {hop}" if hop is not None else ""
        super().__init__(
            f"{model} n={n} iteration={iteration} (base seed {seed}) failed{where}: {type(cause).__name__}: {cause}"
        )

    def __reduce__(self):
        return (RunFailure, (self.model, self.n, self.iteration, self.seed, RuntimeError(str(self.cause))))


@dataclass
class ExperimentPlan:
    models: tuple[str, ...] = MODELS
    ext_variant: Variant = Variant.EXT_HMAC256
    node_counts: tuple[int, ...] = DEFAULT_NODES
    iterations: int = DEFAULT_ITERATIONS
    seed: int = 0
    out_dir: Path | None = None
    formats: tuple[str, ...] = ("csv", "json", "md")
    parallel: int = 1
    latency: float = 0.0
    warmup: int = 2

    def validate(self) -> None:
        if not self.models:
            raise ConfigError("plan has no models")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ConfigError(f"unknown models {bad}; choose from {', '.join(MODELS)}")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("models listed twice")
        if not self.node_counts or any(int(n) < 1 for n in self.node_counts):
            raise ConfigError("node counts must be >= 1")
        if "tn" in self.models and any(n < 2 for n in self.node_counts):
            raise ConfigError("TN needs node counts >= 2")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be non-negative")
        if self.latency < 0:
            raise ConfigError("latency must be non-negative")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown output formats {bad}")
        if self.ext_variant is Variant.ORR:
            raise ConfigError("ext_variant must be an ORR-Ext variant")

    def cells(self) -> list[tuple[str, int]]:
        return [(m, n) for m in self.models for n in self.node_counts]


@dataclass
class ResultRow:
    model: str
    variant: str
    n: int
    iterations: int
    enc_mean_us: float
    enc_min_us: float
    enc_max_us: float
    enc_std_us: float
    dist_mean_us: float
    dist_min_us: float
    dist_max_us: float
    dist_std_us: float
    wire_bytes_mean: float
    setup_us: float
    digest: str

    def as_csv(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = f"{v:.3f}" if isinstance(v, float) else v
        return out

    def non_timing(self) -> tuple:
        return tuple(v for k, v in asdict(self).items() if k not in TIMING_COLUMNS)


def topology_seed(base: int, n: int) -> int:
    return RngContext(base).derive("topology", n).randrange(2**63)


def run_seed(base: int, model: str, n: int, iteration: int) -> RngContext:
    return RngContext(base).derive("run", model, n, iteration)


def _summary(values: list[float]) -> tuple[float, float, float, float]:
    us = [v * 1e6 for v in values]
    std = statistics.stdev(us) if len(us) > 1 else 0.0
    return statistics.fmean(us), min(us), max(us), std


def run_cell(plan: ExperimentPlan, model: str, n: int) -> ResultRow:
    topo = Topology.random_line(n + 1, topology_seed(plan.seed, n))
    network = Network(topo, latency=plan.latency)
    circuit = Circuit.along(topo.nodes)
    keys: LayerKeys | None = None
    if model in ("orr", "orr-ext"):
        keys = orr_setup(network, circuit, rng=RngContext(plan.seed).derive("setup", model, n))

    enc, dist, wire = [], [], []
    digest = hashlib.sha256()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        # untimed warm-up runs on their own seeds, then the measured ones
        for i in range(plan.warmup):
            try:
                _one(model, network, circuit, keys, plan.ext_variant, RngContext(plan.seed).derive("warmup", model, n, i))
            except Exception as exc:
                raise RunFailure(model, n, f"warmup-{i}", plan.seed, exc) from exc
        for i in range(plan.iterations):
            rng = run_seed(plan.seed, model, n, i)
            try:
                t = _one(model, network, circuit, keys, plan.ext_variant, rng)
            except Exception as exc:
                raise RunFailure(model, n, i, plan.seed, exc) from exc
            if not t.ok:
                raise RunFailure(model, n, i, plan.seed, RuntimeError("delivered secret differs from S"))
            enc.append(t.encryption_time)
            dist.append(t.distribution_time)
            wire.append(t.wire_total)
            digest.update(t.delivered_secret)
            for rec in t.bytes_on_wire:
                digest.update(f"{rec.kind}:{rec.n_bytes};".encode())
            if i % 10 == 9:
                gc.collect()
    finally:
        if was_enabled:
            gc.enable()

    e, d = _summary(enc), _summary(dist)
    return ResultRow(
        model=model,
        variant=plan.ext_variant.label if model == "orr-ext" else "",
        n=n,
        iterations=plan.iterations,
        enc_mean_us=e[0], enc_min_us=e[1], enc_max_us=e[2], enc_std_us=e[3],
        dist_mean_us=d[0], dist_min_us=d[1], dist_max_us=d[2], dist_std_us=d[3],
        wire_bytes_mean=statistics.fmean(wire),
        setup_us=keys.setup_time * 1e6 if keys is not None else 0.0,
        digest=digest.hexdigest()[:16],
    )


def _one(model: str, network: Network, circuit: Circuit, keys, variant: Variant, rng: RngContext) -> RunTranscript:
    if model == "kr":
        return kr_run(network, circuit, rng=rng)
    if model == "tn":
        return tn_run(network, circuit, rng=rng)
    if model == "orr":
        return orr_run(network, circuit, keys, rng=rng)
    return orr_ext_run(network, circuit, keys, variant, rng=rng)


def _run_cell_job(args) -> ResultRow:
    plan, model, n = args
    return run_cell(plan, model, n)


def run_plan(plan: ExperimentPlan) -> list[ResultRow]:
    plan.validate()
    cells = plan.cells()
    if plan.parallel == 1:
        return [run_cell(plan, m, n) for m, n in cells]
    # whole cells go to workers; a single run never spans processes
    with ProcessPoolExecutor(max_workers=plan.parallel) as pool:
        return list(pool.map(_run_cell_job, [(plan, m, n) for m, n in cells]))


# -- outputs ------------------------------------------------------------------------


def write_csv(rows: list[ResultRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


def write_json(rows: list[ResultRow], plan: ExperimentPlan, path: Path) -> None:
    doc = {
        "plan": {
            "models": list(plan.models),
            "ext_variant": plan.ext_variant.label,
            "node_counts": list(plan.node_counts),
            "iterations": plan.iterations,
            "seed": plan.seed,
            "latency": plan.latency,
        },
        "rows": [asdict(r) for r in rows],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def markdown_table(rows: list[ResultRow]) -> str:
    out = [
        "| model | variant | n | enc mean (µs) | enc min–max (µs) | dist mean (µs) | dist min–max (µs) | wire bytes |",
        "|---|---|---:|---:|---:|---:|---:|---:|",
    ]
    for r in rows:
        out.append(
            f"| {r.model} | {r.variant or '-'} | {r.n} | {r.enc_mean_us:.2f} | {r.enc_min_us:.2f}–{r.enc_max_us:.2f} "
            f"| {r.dist_mean_us:.2f} | {r.dist_min_us:.2f}–{r.dist_max_us:.2f} | {r.wire_bytes_mean:.0f} |"
        )
    return "\n".join(out) + "\n"


_COLOURS = {"kr": "#1b9e77", "tn": "#d95f02", "orr": "#7570b3", "orr-ext": "#e7298a"}


def svg_chart(rows: list[ResultRow], metric: str = "dist_mean_us", width: int = 640, height: int = 400) -> str:
    """Minimal log-scale line chart of ``metric`` against n, one line per model."""
    import math

    pts = [(r.model, r.n, getattr(r, metric)) for r in rows if getattr(r, metric) > 0]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    ns = [p[1] for p in pts]
    ys = [math.log10(p[2]) for p in pts]
    x0, x1 = min(ns), max(ns) if max(ns) > min(ns) else min(ns) + 1
    y0, y1 = math.floor(min(ys)), math.ceil(max(ys)) if math.ceil(max(ys)) > math.floor(min(ys)) else math.floor(min(ys)) + 1
    m = 50

    def sx(n):
        return m + (n - x0) / (x1 - x0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2}" y="18" text-anchor="middle">{metric} (log scale)</text>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
    ]
    for n in sorted(set(ns)):
        parts.append(f'<text x="{sx(n):.1f}" y="{height - m + 15}" text-anchor="middle">{n}</text>')
    for y in range(y0, y1 + 1):
        parts.append(f'<text x="{m - 5}" y="{sy(y) + 4:.1f}" text-anchor="end">1e{y}</text>')
    for i, model in enumerate(dict.fromkeys(p[0] for p in pts)):
        line = sorted((n, v) for mm, n, v in pts if mm == model)
        coords = " ".join(f"{sx(n):.1f},{sy(math.log10(v)):.1f}" for n, v in line)
        colour = _COLOURS.get(model, "black")
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - m + 5}" y="{m + 14 * i}" fill="{colour}">{model}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_outputs(rows: list[ResultRow], plan: ExperimentPlan) -> list[Path]:
    out = Path(plan.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in plan.formats:
        write_csv(rows, out / "results.csv")
        written.append(out / "results.csv")
    if "json" in plan.formats:
        write_json(rows, plan, out / "results.json")
        written.append(out / "results.json")
    if "md" in plan.formats:
        (out / "results.md").write_text(markdown_table(rows))
        written.append(out / "results.md")
    if "svg" in plan.formats:
        (out / "results.svg").write_text(svg_chart(rows))
        written.append(out / "results.svg")
    return written


# -- trend self-check -------------------------------------------------------------------


@dataclass
class TrendCheck:
    name: str
    ok: bool | None
    detail: str

    def render(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[self.ok]
        return f"[{status}] {self.name}: {self.detail}"


@dataclass
class TrendReport:
    checks: list[TrendCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok is not False for c in self.checks)

    def render(self) -> str:
        return "\n".join(c.render() for c in self.checks)


def _series(rows, model, metric) -> dict[int, float]:
    return {r.n: getattr(r, metric) for r in rows if r.model == model}


def check_trends(rows: list[ResultRow], n_small: int = 3, n_large: int = 11) -> TrendReport:
    """The five qualitative trends a full plan is expected to show."""
    report = TrendReport()
    add = report.checks.append

    kr = _series(rows, "kr", "enc_mean_us")
    if len(kr) >= 2:
        ratio = max(kr.values()) / min(kr.values())
        add(TrendCheck("a: KR encryption flat in n", ratio < 2, f"max/min = {ratio:.2f} (< 2)"))
    else:
        add(TrendCheck("a: KR encryption flat in n", None, "needs KR at two or more n"))

    for model in ("tn", "orr"):
        s = _series(rows, model, "enc_mean_us")
        name = f"b: {model.upper()} encryption strictly increasing"
        if len(s) >= 2:
            xs = [s[n] for n in sorted(s)]
            ok = all(a < b for a, b in zip(xs, xs[1:]))
            add(TrendCheck(name, ok, " < ".join(f"{v:.2f}" for v in xs)))
        else:
            add(TrendCheck(name, None, f"needs {model} at two or more n"))

    ext = _series(rows, "orr-ext", "enc_mean_us")
    if n_small in ext and n_large in ext:
        ratio = ext[n_large] / ext[n_small]
        bound = n_large / n_small
        add(TrendCheck("c: ORR-Ext encryption superlinear", ratio > bound, f"t({n_large})/t({n_small}) = {ratio:.2f} (> {bound:.2f})"))
    else:
        add(TrendCheck("c: ORR-Ext encryption superlinear", None, f"needs ORR-Ext at n={n_small} and n={n_large}"))

    for label, metric, order in (
        ("d: encryption ordering", "enc_mean_us", ("kr", "tn", "orr", "orr-ext")),
        ("e: distribution ordering", "dist_mean_us", ("kr", "orr", "tn", "orr-ext")),
    ):
        vals = {m: _series(rows, m, metric).get(n_large) for m in order}
        name = f"{label} at n={n_large}"
        if any(v is None for v in vals.values()):
            add(TrendCheck(name, None, "needs all four models"))
            continue
        ok = all(vals[a] < vals[b] for a, b in zip(order, order[1:]))
        add(TrendCheck(name, ok, " < ".join(f"{m} {vals[m]:.2f}" for m in order)))
    return report
