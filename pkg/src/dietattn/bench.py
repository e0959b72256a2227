"""Step-time micro-benchmarks across encoding schemes and backends.

All harness runs share one token stream per seed, so the math is
identical across schemes and repetitions; only the clock varies. The
reported mean is a median of group means, which shrugs off scheduler
spikes better than a plain average.
"""

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

from . import backend
from .config import AttentionConfig, PositionScheme
from .errors import ConfigError, MeasurementError
from .model import Model, loss_and_grads
from .rng import Rng
from .tensor import Matrix

MIN_REPS = 10
MIN_WARMUP = 3
MIN_TICKS = 100
BENCH_VOCAB = 64
BENCH_CLASSES = 8

SCHEME_LABELS = ("none", "input-add", "sinusoidal", "diet-abs", "diet-rel",
                 "shaw", "t5", "linformer-diet-abs")
BASELINE = "input-add"
MODES = ("train", "inference")


def timer_tick_ns():
    """Smallest observable step of perf_counter_ns on this host."""
    best = None
    for _ in range(5):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        d = b - a
        if best is None or d < best:
            best = d
    return best


def _pin_single_cpu(parallel):
    if parallel or not hasattr(os, "sched_setaffinity"):
        return None
    prev = os.sched_getaffinity(0)
    os.sched_setaffinity(0, {min(prev)})
    return prev


def _unpin(prev):
    if prev is not None:
        os.sched_setaffinity(0, prev)


def scheme_variant(base, label):
    """Re-dress a base shape with one of the benchmark schemes."""
    n, d_h = base.n, base.d_h
    kw = {"linformer_k": None}
    if label == "none":
        sch = PositionScheme.none()
    elif label == "input-add":
        sch = PositionScheme.input_additive()
    elif label == "sinusoidal":
        sch = PositionScheme.sinusoidal()
    elif label == "diet-abs":
        sch = PositionScheme.diet_abs(d_h)
    elif label == "diet-rel":
        sch = PositionScheme.diet_rel()
    elif label == "shaw":
        sch = PositionScheme.shaw(n - 1)
    elif label == "t5":
        sch = PositionScheme.t5(32, max(64, n))
    elif label == "linformer-diet-abs":
        sch = PositionScheme.diet_abs(d_h)
        kw["linformer_k"] = max(1, n // 4)
    else:
        raise ConfigError(f"unknown benchmark scheme {label!r}; "
                          f"have {SCHEME_LABELS}")
    return base.with_scheme(sch, **kw)


@dataclass
class BenchEntry:
    scheme: str
    mode: str
    n: int
    d: int
    h: int
    d_h: int
    reps: int
    mean_ns: float
    stdev_ns: float
    min_ns: int
    rel_slowdown: float = None
    checksum: str = ""

    CSV_COLUMNS = ("scheme", "mode", "n", "d", "h", "d_h", "reps",
                   "mean_ns", "stdev_ns", "min_ns", "rel_slowdown")

    def csv_row(self):
        return {c: getattr(self, c) for c in self.CSV_COLUMNS}

    def to_dict(self):
        d = self.csv_row()
        d["checksum"] = self.checksum
        return d


@dataclass
class BenchReport:
    entries: list
    context: dict = field(default_factory=dict)

    def to_dict(self):
        return {"context": self.context,
                "entries": [e.to_dict() for e in self.entries]}

    def save_json(self, path):
        with open(path, "w", encoding="ascii") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def save_csv(self, path):
        with open(path, "w", encoding="ascii", newline="") as f:
            w = csv.DictWriter(f, fieldnames=BenchEntry.CSV_COLUMNS)
            w.writeheader()
            for e in self.entries:
                w.writerow(e.csv_row())

    def entry(self, scheme, mode):
        for e in self.entries:
            if e.scheme == scheme and e.mode == mode:
                return e
        raise KeyError(f"no entry for ({scheme}, {mode})")


def _median_of_means(samples, groups=5):
    g = min(groups, len(samples))
    size = len(samples) // g
    means = []
    for i in range(g):
        chunk = samples[i * size:(i + 1) * size] if i < g - 1 \
            else samples[(g - 1) * size:]
        means.append(sum(chunk) / len(chunk))
    means.sort()
    mid = len(means) // 2
    if len(means) % 2:
        return means[mid]
    return 0.5 * (means[mid - 1] + means[mid])


def _stdev(samples):
    mean = sum(samples) / len(samples)
    var = sum((s - mean) ** 2 for s in samples) / (len(samples) - 1)
    return math.sqrt(var)


def _bench_data(config, seed):
    rng = Rng(seed, "bench-data")
    tokens = [rng.randint(0, BENCH_VOCAB) for _ in range(config.n)]
    labels = [rng.randint(0, BENCH_CLASSES) for _ in range(config.n)]
    return tokens, labels


def _logits_checksum(logits):
    acc = 0.0
    buf = logits.data
    for i in range(logits.rows * logits.cols):
        acc += buf[i] * ((i % 7) + 1)
    return acc.hex()


def _time_step(step, reps, warmup, check_ticks=True):
    for _ in range(warmup):
        step()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        step()
        samples.append(time.perf_counter_ns() - t0)
    if check_ticks:
        tick = timer_tick_ns()
        if min(samples) < MIN_TICKS * tick:
            raise MeasurementError(
                f"step time {min(samples)}ns is under {MIN_TICKS} timer "
                f"ticks ({tick}ns each); use a larger config")
    return samples


def bench_scheme(config, scheme, mode, reps=50, warmup=5, seed=0,
                 parallel=False):
    """Time one (scheme, mode) pair; returns a BenchEntry.

    Train steps run a full forward+backward with loss; inference steps
    run a cached forward only. The entry's rel_slowdown is left for the
    caller, since it depends on a baseline measured the same way.
    """
    if reps < MIN_REPS:
        raise ConfigError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < MIN_WARMUP:
        raise ConfigError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = scheme_variant(config, scheme)
    model = Model(cfg, vocab=BENCH_VOCAB, num_classes=BENCH_CLASSES,
                  seed=seed)
    tokens, labels = _bench_data(cfg, seed)
    if mode == "train":
        batch = [(tokens, labels)]

        def step():
            return loss_and_grads(model, batch)
    else:
        cache = model.build_cache()

        def step():
            return model.forward(tokens, cache=cache)

    prev = _pin_single_cpu(parallel)
    try:
        before = model.forward(tokens)[0]
        samples = _time_step(step, reps, warmup)
        after = model.forward(tokens)[0]
    finally:
        _unpin(prev)
    if not before.equals_bitwise(after):
        raise MeasurementError(
            f"outputs drifted during the {scheme}/{mode} benchmark; "
            "the timed step must not mutate the model")
    return BenchEntry(
        scheme=scheme, mode=mode, n=cfg.n, d=cfg.d, h=cfg.h, d_h=cfg.d_h,
        reps=reps, mean_ns=_median_of_means(samples),
        stdev_ns=_stdev(samples), min_ns=min(samples),
        checksum=_logits_checksum(before))


def compare_all(config, reps=50, warmup=5, seed=0, parallel=False,
                schemes=SCHEME_LABELS):
    """Every scheme in both modes, slowdowns relative to input-add."""
    entries = []
    for mode in MODES:
        base = None
        for label in schemes:
            e = bench_scheme(config, label, mode, reps, warmup, seed,
                             parallel)
            if label == BASELINE:
                e.rel_slowdown = 1.0
                base = e
            entries.append(e)
        if base is None:
            raise ConfigError(f"scheme set must include {BASELINE!r} "
                              "to anchor slowdowns")
        for e in entries:
            if e.mode == mode and e.rel_slowdown is None:
                e.rel_slowdown = e.mean_ns / base.mean_ns
    return BenchReport(entries=entries, context={
        "kind": "compare-all", "backend": backend.active(),
        "config": config.to_dict(), "reps": reps, "warmup": warmup,
        "seed": seed, "pinned": not parallel,
        "timer_tick_ns": timer_tick_ns(), "baseline": BASELINE})


# ------------------------------------------------------- attention scaling

def _attention_step(cfg, seed):
    """A forward pass through one cached attention sublayer."""
    from .attention import HeadWeights, multi_head
    from .encodings import build_cache, init_params

    params = init_params(cfg, seed)
    rng = Rng(seed, "scaling")
    heads = []
    for i in range(cfg.h):
        mats = []
        for nm in ("wq", "wk", "wv"):
            m = Matrix(cfg.d, cfg.d_h)
            rng.split(f"h{i}.{nm}").fill_normal(m.data, 0.02)
            mats.append(m)
        heads.append(HeadWeights(*mats))
    w_o = Matrix(cfg.h * cfg.d_h, cfg.d)
    rng.split("wo").fill_normal(w_o.data, 0.02)
    x = Matrix(cfg.n, cfg.d)
    rng.split("x").fill_normal(x.data, 1.0)
    cache = build_cache(params, cfg.n)

    def step():
        return multi_head(x, heads, w_o, params, 0, None, cfg, cache=cache)
    return step


def fit_loglog_slope(ns, means):
    """Least-squares slope of log(mean) against log(n)."""
    xs = [math.log(v) for v in ns]
    ys = [math.log(v) for v in means]
    mx = sum(xs) / len(xs)
    my = sum(ys) / len(ys)
    num = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    den = sum((a - mx) ** 2 for a in xs)
    return num / den


def scaling_scan(sizes=(64, 128, 256, 512), reps=30, warmup=5, seed=0,
                 parallel=False, d=32, h=2, d_h=16, k=32):
    """Attention-sublayer cost against n for full and projected scores.

    Times just the multi_head call (cached bias, forward only) so the
    linear embed/FF work cannot mask the attention term's growth. The
    report summary carries the fitted log-log slopes.
    """
    entries = []
    slopes = {}
    prev = _pin_single_cpu(parallel)
    try:
        for label in ("diet-abs", "linformer-diet-abs"):
            means = []
            first = None
            for n in sizes:
                cfg = AttentionConfig(
                    n=n, d=d, h=h, d_h=d_h,
                    scheme=PositionScheme.diet_abs(d_h), layers=1,
                    linformer_k=k if label == "linformer-diet-abs" else None)
                step = _attention_step(cfg, seed)
                samples = _time_step(step, reps, warmup)
                e = BenchEntry(
                    scheme=label, mode="attention", n=n, d=d, h=h, d_h=d_h,
                    reps=reps, mean_ns=_median_of_means(samples),
                    stdev_ns=_stdev(samples), min_ns=min(samples))
                first = first or e
                e.rel_slowdown = e.mean_ns / first.mean_ns
                means.append(e.mean_ns)
                entries.append(e)
            slopes[label] = fit_loglog_slope(sizes, means)
    finally:
        _unpin(prev)
    return BenchReport(entries=entries, context={
        "kind": "scaling-scan", "backend": backend.active(),
        "sizes": list(sizes), "d": d, "h": h, "d_h": d_h, "linformer_k": k,
        "reps": reps, "warmup": warmup, "seed": seed,
        "pinned": not parallel, "slopes": slopes})


# --------------------------------------------------------- backend compare

def bench_backends(config, reps=30, warmup=5, seed=0, scheme="diet-abs",
                   parallel=False):
    """Same train step timed under each available kernel backend."""
    entries = []
    saved = backend.active()
    try:
        for name in backend.available():
            backend.use(name)
            e = bench_scheme(config, scheme, "train", reps, warmup, seed,
                             parallel)
            e.mode = f"train/{name}"
            e.rel_slowdown = 1.0
            entries.append(e)
    finally:
        backend.use(saved)
    py = next((e for e in entries if e.mode == "train/python"), None)
    for e in entries:
        if py is not None:
            e.rel_slowdown = e.mean_ns / py.mean_ns
    checksums = {e.mode: e.checksum for e in entries}
    return BenchReport(entries=entries, context={
        "kind": "backend-compare", "config": config.to_dict(),
        "scheme": scheme, "reps": reps, "warmup": warmup, "seed": seed,
        "pinned": not parallel, "backends": backend.available(),
        "bitwise_equal": len(set(checksums.values())) == 1,
        "checksums": checksums})
