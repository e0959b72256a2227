"""Verification suites, rank reports, and visualization exporters.

The two verifiers never assert; they return reports with a passed flag
so callers (tests, the CLI) decide how to react. Rank everywhere means
numerical rank at a stated relative tolerance, default 1e-8.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from xml.etree import ElementTree

from .attention import (HeadWeights, scores_diet_abs, scores_diet_rel,
                        scores_shaw, scores_t5, scores_vanilla,
                        scores_input_additive)
from .backend import K, active as active_backend
from .config import AttentionConfig, PositionScheme
from .encodings import SegmentMap, init_params
from .errors import DimensionError, SchemeError
from .model import batch_loss, loss_and_grads
from .rng import Rng
from .tensor import Matrix, matmul, max_abs_diff, numerical_rank

DEFAULT_RANK_TOL = 1e-8
FD_EPS = 1e-5
FD_TOL = 1e-4


def _rel_err(a, b, floor=FD_EPS):
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class RankReport:
    kind: str
    rel_tol: float
    context: dict
    rows: list
    summary: dict
    passed: bool

    def to_dict(self):
        return {"kind": self.kind, "rel_tol": self.rel_tol,
                "backend": active_backend(), "context": self.context,
                "rows": self.rows, "summary": self.summary,
                "passed": self.passed}

    def save_json(self, path):
        with open(path, "w", encoding="ascii") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def save_csv(self, path):
        if not self.rows:
            raise ValueError("report has no rows to write")
        cols = sorted({k for row in self.rows for k in row})
        with open(path, "w", encoding="ascii", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)


@dataclass
class GradCheckReport:
    kind: str
    rows: list
    summary: dict
    passed: bool
    context: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "backend": active_backend(),
                "context": self.context, "rows": self.rows,
                "summary": self.summary, "passed": self.passed}

    def save_json(self, path):
        with open(path, "w", encoding="ascii") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")


# ------------------------------------------------------------- theorem one

def witness_scores(n, d, d_h, d_p):
    """The explicit construction that escapes the head-width rank bound.

    X = [I_d; 0], W_Q = W_K = [I_{d_h}; 0], and a position matrix whose
    trailing d_p rows are the identity. The resulting score matrix is
    diagonal with unit entries at [0, d_h) and [n-d_p, n), so its rank
    is exactly min(d_h + d_p, n).
    """
    if n < d:
        raise DimensionError(f"witness needs n >= d, got n={n} d={d}")
    if d < d_h:
        raise DimensionError(f"witness needs d >= d_h, got d={d} d_h={d_h}")
    if d_p < 0 or n < d_h + d_p:
        raise DimensionError(
            f"witness needs 0 <= d_p and n >= d_h + d_p, got "
            f"n={n} d_h={d_h} d_p={d_p}")
    x = Matrix(n, d)
    for i in range(d):
        x.data[i * d + i] = 1.0
    w = Matrix(d, d_h)
    for i in range(d_h):
        w.data[i * d_h + i] = 1.0
    p_hat = Matrix(n, d_p)
    for j in range(d_p):
        p_hat.data[(n - d_p + j) * d_p + j] = 1.0
    xw = matmul(x, w)
    a = Matrix(n, n)
    K.matmul_nt(xw.data, xw.data, a.data, n, d_h, n, 0)
    if d_p > 0:
        K.matmul_nt(p_hat.data, p_hat.data, a.data, n, d_p, n, 1)
    return a


def verify_theorem1(n, d, d_h, d_p, trials, seed, rel_tol=DEFAULT_RANK_TOL):
    """Random-draw rank bound for input-additive scores, plus the witness.

    Part one draws X, P, W_Q, W_K at random `trials` times and requires
    numerical_rank of the input-additive scores <= d_h every time. Part
    two builds the witness and requires rank exactly min(d_h + d_p, n).
    """
    rng = Rng(seed, "theorem1")
    scale = math.sqrt(d)
    violations = []
    max_rank = 0

    def draw(r, rows, cols):
        m = Matrix(rows, cols)
        r.fill_normal(m.data, 1.0)
        return m

    for t in range(trials):
        r = rng.split(f"trial{t}")
        x = draw(r, n, d)
        p = draw(r, n, d)
        w = HeadWeights(draw(r, d, d_h), draw(r, d, d_h),
                        Matrix(d, d_h))
        a = scores_input_additive(x, p, w, scale)
        rank = numerical_rank(a, rel_tol)
        if rank > max_rank:
            max_rank = rank
        if rank > d_h:
            violations.append(t)
    witness_rank = numerical_rank(witness_scores(n, d, d_h, d_p), rel_tol)
    expected = min(d_h + d_p, n)
    passed = not violations and witness_rank == expected
    rows = [{"trial": t, "rank_violation": True} for t in violations]
    rows.append({"witness_rank": witness_rank, "witness_expected": expected})
    return RankReport(
        kind="theorem1",
        rel_tol=rel_tol,
        context={"n": n, "d": d, "d_h": d_h, "d_p": d_p,
                 "trials": trials, "seed": seed},
        rows=rows,
        summary={"max_rank_seen": max_rank, "bound": d_h,
                 "violations": len(violations),
                 "counterexample_trials": violations[:16],
                 "witness_rank": witness_rank,
                 "witness_expected": expected},
        passed=passed)


# ------------------------------------------------------------- theorem two

def verify_theorem2(model, batch, loss_kind="cross_entropy",
                    fd_samples=64, eps=FD_EPS, fd_seed=0):
    """Input-gradient versus P-gradient equality for one model and batch.

    The per-example input gradients are re-accumulated here with the
    same kernel and order the model used for P, and the two must match
    bitwise. A finite-difference probe then perturbs entries of the
    shared additive input path and checks the analytic gradient.
    """
    if model.config.scheme.kind != "input_add":
        raise SchemeError(
            "gradient-equality check requires the input-additive scheme "
            f"with trainable P, not {model.config.scheme.kind}")
    n, d = model.config.n, model.config.d
    _, grads = loss_and_grads(model, batch, loss_kind, want_input_grads=True)
    acc = Matrix(n, d)
    for dx in grads.input_grads:
        K.add(acc.data, dx.data, acc.data, n * d)
    gp = grads.pos.tables["p"]
    diff = max_abs_diff(acc, gp)
    bitwise = acc.equals_bitwise(gp)

    p = model.pos.tables["p"]
    rng = Rng(fd_seed, "theorem2-fd")
    worst = 0.0
    for _ in range(fd_samples):
        i = rng.randint(0, n * d)
        old = p.data[i]
        p.data[i] = old + eps
        model.pos.bump()
        lp = batch_loss(model, batch, loss_kind)
        p.data[i] = old - eps
        model.pos.bump()
        lm = batch_loss(model, batch, loss_kind)
        p.data[i] = old
        model.pos.bump()
        fd = (lp - lm) / (2.0 * eps)
        err = _rel_err(gp.data[i], fd)
        if err > worst:
            worst = err
    passed = bitwise and diff == 0.0 and worst <= FD_TOL
    return GradCheckReport(
        kind="theorem2",
        context={"loss_kind": loss_kind, "batch_size": len(batch),
                 "fd_samples": fd_samples, "eps": eps},
        rows=[{"group": "P", "fd_max_rel_err": worst,
               "entries_checked": fd_samples}],
        summary={"xp_max_abs_diff": diff, "bitwise_equal": bitwise,
                 "fd_max_rel_err": worst},
        passed=passed)


# --------------------------------------------------------- gradient checks

def gradient_check(model, batch, loss_kind="cross_entropy", eps=FD_EPS,
                   entries_per_tensor=0, seed=0, tol=FD_TOL):
    """Central finite differences against the analytic gradients.

    entries_per_tensor = 0 checks every entry; a positive value spot
    checks that many per tensor (deterministic in the seed), which is
    the fast mode the CLI verify command uses.
    """
    _, grads = loss_and_grads(model, batch, loss_kind)
    gmap = dict(grads.named_grads())
    rng = Rng(seed, "gradcheck")
    rows = []
    worst = 0.0
    worst_at = ""
    for name, par in model.named_params():
        g = gmap[name]
        total = par.rows * par.cols
        if entries_per_tensor and entries_per_tensor < total:
            r = rng.split(name)
            picks = sorted({r.randint(0, total)
                            for _ in range(entries_per_tensor)})
        else:
            picks = range(total)
        tensor_worst = 0.0
        count = 0
        for i in picks:
            old = par.data[i]
            par.data[i] = old + eps
            model.pos.bump()
            lp = batch_loss(model, batch, loss_kind)
            par.data[i] = old - eps
            model.pos.bump()
            lm = batch_loss(model, batch, loss_kind)
            par.data[i] = old
            model.pos.bump()
            fd = (lp - lm) / (2.0 * eps)
            err = _rel_err(g.data[i], fd)
            count += 1
            if err > tensor_worst:
                tensor_worst = err
            if err > worst:
                worst = err
                worst_at = f"{name}[{i}]"
        rows.append({"group": name, "max_rel_err": tensor_worst,
                     "entries_checked": count})
    return GradCheckReport(
        kind="finite-difference",
        context={"loss_kind": loss_kind, "eps": eps, "tol": tol,
                 "scheme": model.config.scheme_label(),
                 "entries_per_tensor": entries_per_tensor, "seed": seed},
        rows=rows,
        summary={"max_rel_err": worst, "worst_at": worst_at},
        passed=worst <= tol)


# ----------------------------------------------------- zero-param scores

def zero_param_check(n, d, d_h, trials, seed, scale=None):
    """Zeroed positional parameters must reproduce vanilla scores bitwise.

    Covers the decoupled absolute, relative, bucketed, and key-relative
    schemes on random inputs; the first three also carry a zeroed
    per-head segment table.
    """
    scale = math.sqrt(d) if scale is None else scale
    rng = Rng(seed, "zero-param")
    segmap = SegmentMap.from_lengths([n - n // 2, n // 2])
    base = dict(n=n, d=d, h=1, d_h=d_h, layers=1, scale=scale)
    setups = []
    for label, scheme, seg in (
            ("diet-abs", PositionScheme.diet_abs(max(1, d_h)), True),
            ("diet-rel", PositionScheme.diet_rel(), True),
            ("t5", PositionScheme.t5(8, 16), True),
            ("shaw", PositionScheme.shaw(n - 1), False)):
        kw = dict(base)
        if seg:
            kw.update(num_segments=2, segment_location="per_head")
        cfg = AttentionConfig(scheme=scheme, **kw)
        params = init_params(cfg, seed)
        params.zero_positional()
        setups.append((label, cfg, params, segmap if seg else None))
    rows = []
    mismatches = 0
    for label, cfg, params, seg in setups:
        bad = 0
        for t in range(trials):
            r = rng.split(f"{label}/{t}")
            x = Matrix(n, d)
            r.fill_normal(x.data, 1.0)
            w = HeadWeights(*(Matrix(d, d_h) for _ in range(3)))
            for m in (w.w_q, w.w_k, w.w_v):
                r.fill_normal(m.data, 1.0)
            ref = scores_vanilla(x, w, scale)
            if label == "diet-abs":
                got = scores_diet_abs(x, w, params, 0, 0, seg, scale)
            elif label == "diet-rel":
                got = scores_diet_rel(x, w, params, 0, 0, seg, scale)
            elif label == "t5":
                got = scores_t5(x, w, params, 0, 0, seg, scale)
            else:
                got = scores_shaw(x, w, params.slots[0]["a_k"],
                                  cfg.scheme.clip, scale)
            if not got.equals_bitwise(ref):
                bad += 1
        mismatches += bad
        rows.append({"scheme": label, "trials": trials, "mismatches": bad})
    return RankReport(
        kind="zero-param-equivalence",
        rel_tol=0.0,
        context={"n": n, "d": d, "d_h": d_h, "trials": trials, "seed": seed},
        rows=rows,
        summary={"mismatches": mismatches},
        passed=mismatches == 0)


# ----------------------------------------------------------------- scans

def rank_scan(model, batch, segmap=None, rel_tol=DEFAULT_RANK_TOL):
    """Numerical ranks of each head's score pieces over a token batch.

    Per (layer, head): the token term rank, the additive bias rank for
    schemes that have one, and the full pre-softmax score rank; the
    reported rank is the maximum over the batch.
    """
    cfg = model.config
    inv = 1.0 / cfg.scale
    per = {}
    for tokens in batch:
        _, tape = model.forward(tokens, segmap, keep=True)
        for layer, bt in enumerate(tape.blocks):
            at = bt.attn
            for head, ht in enumerate(at.heads):
                n, kcols = ht.q.rows, ht.k.rows
                tok = Matrix(n, kcols)
                K.matmul_nt(ht.q.data, ht.k.data, tok.data,
                            n, ht.q.cols, kcols, 0)
                K.scale(tok.data, inv, tok.data, n * kcols)
                tok_rank = numerical_rank(tok, rel_tol)
                bias_rank = None
                score_rank = tok_rank
                if cfg.scheme.kind in ("diet_abs", "diet_rel", "t5"):
                    slot = model.pos.slot_of(layer, head)
                    if cfg.linformer_k is not None:
                        bias = model.pos.linformer_slot_bias(slot)
                    else:
                        seg = segmap if cfg.segment_location == "per_head" else None
                        bias = model.pos.slot_bias(slot, n, seg)
                    bias_rank = numerical_rank(bias, rel_tol)
                    K.add(tok.data, bias.data, tok.data, n * kcols)
                    score_rank = numerical_rank(tok, rel_tol)
                key = (layer, head)
                old = per.get(key)
                row = (tok_rank, bias_rank, score_rank)
                if old is None:
                    per[key] = row
                else:
                    per[key] = tuple(
                        None if a is None else max(a, b)
                        for a, b in zip(old, row))
    rows = [{"layer": ly, "head": hd, "token_rank": tr, "bias_rank": br,
             "score_rank": sr}
            for (ly, hd), (tr, br, sr) in sorted(per.items())]
    max_score = max((r["score_rank"] for r in rows), default=0)
    return RankReport(
        kind="rank-scan",
        rel_tol=rel_tol,
        context={"config": cfg.to_dict(), "batch_size": len(batch)},
        rows=rows,
        summary={"max_score_rank": max_score,
                 "head_width_bound": cfg.d_h},
        passed=True)


# -------------------------------------------------------------- heatmaps

def _heat_lut():
    lut = []
    for i in range(256):
        g = max(0, min(255, round((i - 64) * 255 / 160)))
        b = max(0, min(255, round((i - 192) * 255 / 63)))
        lut.append((i, g, b))
    return lut


COLOR_MAPS = {
    "gray": [(i, i, i) for i in range(256)],
    "heat": _heat_lut(),
}


def export_heatmap(m, path, color_map="gray", cell=12):
    """Write a matrix as a standalone SVG, one rectangle per cell.

    Values map linearly onto a 256-entry color table; the exact min and
    max are annotated below the grid and stored as attributes, so
    read_heatmap can reconstruct values to within 1/255 of the range.
    """
    if color_map not in COLOR_MAPS:
        raise ValueError(f"unknown color map {color_map!r}; "
                         f"have {sorted(COLOR_MAPS)}")
    if not K.all_finite(m.data, m.rows * m.cols):
        raise ValueError("matrix contains non-finite values")
    lut = COLOR_MAPS[color_map]
    vmin = min(m.data)
    vmax = max(m.data)
    span = vmax - vmin
    width = m.cols * cell
    height = m.rows * cell
    label_h = 16
    out = []
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{width}" height="{height + label_h}" '
        f'viewBox="0 0 {width} {height + label_h}" '
        f'data-rows="{m.rows}" data-cols="{m.cols}" '
        f'data-vmin="{vmin!r}" data-vmax="{vmax!r}" '
        f'data-cmap="{color_map}">')
    for i in range(m.rows):
        for j in range(m.cols):
            v = m.data[i * m.cols + j]
            q = 0 if span == 0.0 else round((v - vmin) / span * 255)
            r, g, b = lut[q]
            out.append(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" '
                f'height="{cell}" fill="#{r:02x}{g:02x}{b:02x}"/>')
    out.append(
        f'<text x="0" y="{height + label_h - 4}" font-size="10" '
        f'font-family="monospace" fill="#888888">'
        f'min={vmin!r} max={vmax!r} ({color_map})</text>')
    out.append("</svg>\n")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(out))


def read_heatmap(path):
    """Reconstruct (matrix, meta) from an export_heatmap file."""
    ns = "{http://www.w3.org/2000/svg}"
    root = ElementTree.parse(path).getroot()
    rows = int(root.get("data-rows"))
    cols = int(root.get("data-cols"))
    vmin = float(root.get("data-vmin"))
    vmax = float(root.get("data-vmax"))
    cmap = root.get("data-cmap")
    lut = COLOR_MAPS[cmap]
    back = {f"#{r:02x}{g:02x}{b:02x}": q for q, (r, g, b) in enumerate(lut)}
    span = vmax - vmin
    cells = root.findall(f"{ns}rect")
    if len(cells) != rows * cols:
        raise ValueError(
            f"{path} holds {len(cells)} cells, expected {rows * cols}")
    m = Matrix(rows, cols)
    for i, rect in enumerate(cells):
        q = back[rect.get("fill")]
        m.data[i] = vmin + (q / 255.0) * span if span else vmin
    meta = {"vmin": vmin, "vmax": vmax, "cmap": cmap}
    return m, meta


# ------------------------------------------------------- cosine statistics

@dataclass
class CosineStats:
    count: int
    mean: float
    std: float
    lo: float
    hi: float
    bins: list
    bin_count: int = 50

    def to_dict(self):
        return {"count": self.count, "mean": self.mean, "std": self.std,
                "min": self.lo, "max": self.hi, "bins": self.bins,
                "bin_count": self.bin_count, "bin_range": [-1.0, 1.0]}

    def save_json(self, path):
        with open(path, "w", encoding="ascii") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")


def position_cosine_stats(p, bins=50):
    """Pairwise cosine similarities between all rows of P, binned.

    The histogram uses uniform bins over [-1, 1]; values are clamped
    into range only for binning, the moments use the raw cosines.
    """
    if p.rows < 2:
        raise ValueError(f"need at least 2 rows, got {p.rows}")
    norms = []
    for i in range(p.rows):
        s = 0.0
        base = i * p.cols
        for j in range(p.cols):
            s += p.data[base + j] * p.data[base + j]
        if s == 0.0:
            raise ValueError(f"row {i} has zero norm")
        norms.append(math.sqrt(s))
    counts = [0] * bins
    total = 0.0
    total_sq = 0.0
    lo, hi = 1.0, -1.0
    count = 0
    for i in range(p.rows):
        for j in range(i + 1, p.rows):
            dot = 0.0
            bi, bj = i * p.cols, j * p.cols
            for k in range(p.cols):
                dot += p.data[bi + k] * p.data[bj + k]
            c = dot / (norms[i] * norms[j])
            count += 1
            total += c
            total_sq += c * c
            lo = min(lo, c)
            hi = max(hi, c)
            clamped = min(1.0, max(-1.0, c))
            idx = min(bins - 1, int((clamped + 1.0) * 0.5 * bins))
            counts[idx] += 1
    mean = total / count
    var = max(0.0, total_sq / count - mean * mean)
    return CosineStats(count=count, mean=mean, std=math.sqrt(var),
                       lo=lo, hi=hi, bins=counts, bin_count=bins)
