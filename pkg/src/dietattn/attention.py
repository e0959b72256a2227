"""Attention score construction and multi-head assembly.

Every scheme produces scores with the token term multiplied by 1/scale
and any positional bias added unscaled; softmax downstream always runs
at scale 1. Forward functions have backward companions that accumulate
into caller-owned gradient buffers in a fixed order, so training is
bitwise reproducible for a given seed and backend.
"""

from dataclasses import dataclass

from .backend import K
from .errors import DimensionError, SchemeError
from .tensor import Matrix, matmul, matmul_nt, softmax_rows

_BIAS_KINDS = ("diet_abs", "diet_rel", "t5")


@dataclass
class HeadWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix

    def check(self, d, d_h):
        for name in ("w_q", "w_k", "w_v"):
            m = getattr(self, name)
            if m.shape != (d, d_h):
                raise DimensionError(
                    f"{name} is {m.rows}x{m.cols}, expected {d}x{d_h}")

    def tensors(self):
        return (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v))


def zeros_like_heads(heads):
    return [HeadWeights(Matrix(h.w_q.rows, h.w_q.cols),
                        Matrix(h.w_k.rows, h.w_k.cols),
                        Matrix(h.w_v.rows, h.w_v.cols)) for h in heads]


class PosGrads:
    """Gradient mirror of a PositionParams object (same slot layout)."""

    __slots__ = ("slots", "tables")

    def __init__(self, slots, tables):
        self.slots = slots
        self.tables = tables

    @classmethod
    def zeros_like(cls, params):
        slots = [{name: Matrix(m.rows, m.cols) for name, m in slot.items()}
                 for slot in params.slots]
        tables = {name: Matrix(m.rows, m.cols)
                  for name, m in params.tables.items()}
        return cls(slots, tables)


# ----------------------------------------------------------- score forward

def _token_scores(x, w, scale):
    q = matmul(x, w.w_q)
    k = matmul(x, w.w_k)
    s = matmul_nt(q, k)
    K.scale(s.data, 1.0 / scale, s.data, s.rows * s.cols)
    return s, q, k


def scores_vanilla(x, w, scale):
    """(X W_Q)(X W_K)^T / scale."""
    s, _, _ = _token_scores(x, w, scale)
    return s


def scores_input_additive(x, p, w, scale):
    """Vanilla scores of X + P; the whole positional signal rides on X."""
    if p.shape != x.shape:
        raise DimensionError(
            f"P is {p.rows}x{p.cols}, expected {x.rows}x{x.cols}")
    xp = Matrix(x.rows, x.cols)
    K.add(x.data, p.data, xp.data, x.rows * x.cols)
    return scores_vanilla(xp, w, scale)


def _require_kind(params, kind):
    if params.scheme.kind != kind:
        raise SchemeError(
            f"params hold scheme {params.scheme.kind}, operation needs {kind}")


def _scores_with_bias(x, w, params, layer, head, segmap, scale):
    s, _, _ = _token_scores(x, w, scale)
    bias = params.slot_bias(params.slot_of(layer, head), x.rows, segmap)
    K.add(s.data, bias.data, s.data, s.rows * s.cols)
    return s


def scores_diet_abs(x, w, params, layer, head, segmap, scale):
    """Token term plus the decoupled P_Q P_K^T bias (and segment term)."""
    _require_kind(params, "diet_abs")
    return _scores_with_bias(x, w, params, layer, head, segmap, scale)


def scores_diet_rel(x, w, params, layer, head, segmap, scale):
    """Token term plus the Toeplitz R_{i-j} bias (and segment term)."""
    _require_kind(params, "diet_rel")
    return _scores_with_bias(x, w, params, layer, head, segmap, scale)


def scores_t5(x, w, params, layer, head, segmap, scale):
    """Token term plus the bucketed relative bias (and segment term)."""
    _require_kind(params, "t5")
    return _scores_with_bias(x, w, params, layer, head, segmap, scale)


def scores_shaw(x, w, a_k, clip, scale):
    """A_ij = (X_i W_Q)(X_j W_K + a_{clamp(j-i)})^T / scale."""
    if a_k.shape != (2 * clip + 1, w.w_q.cols):
        raise DimensionError(
            f"a_K is {a_k.rows}x{a_k.cols}, expected {2 * clip + 1}x{w.w_q.cols}")
    n = x.rows
    s, q, _ = _token_scores(x, w, 1.0)
    idx = _shaw_idx_for(n, clip)
    K.bias_dot_add(q.data, a_k.data, idx, s.data, n, n, a_k.cols)
    K.scale(s.data, 1.0 / scale, s.data, n * n)
    return s


_shaw_idx_cache = {}


def _shaw_idx_for(n, clip):
    got = _shaw_idx_cache.get((n, clip))
    if got is None:
        from .encodings import _shaw_index
        got = _shaw_index(n, clip)
        _shaw_idx_cache[(n, clip)] = got
    return got


def scores_linformer_diet_abs(x, w, e, params, scale, layer=0, head=0):
    """n x k scores: projected token term plus the rectangular DIET bias."""
    _require_kind(params, "diet_abs")
    k = params.config.linformer_k
    if k is None:
        raise SchemeError("params were not configured with a linformer projection")
    if e.shape != (k, x.rows):
        raise DimensionError(
            f"E is {e.rows}x{e.cols}, expected {k}x{x.rows}")
    xp = matmul(e, x)
    q = matmul(x, w.w_q)
    kp = matmul(xp, w.w_k)
    s = matmul_nt(q, kp)
    K.scale(s.data, 1.0 / scale, s.data, s.rows * s.cols)
    bias = params.linformer_slot_bias(params.slot_of(layer, head))
    K.add(s.data, bias.data, s.data, s.rows * s.cols)
    return s


def attention_head(scores, values, w_v):
    """softmax(scores) @ (values W_V); scale is already inside scores."""
    probs = softmax_rows(scores)
    return matmul(probs, matmul(values, w_v))


# ------------------------------------------------------------- multi-head

class HeadTape:
    __slots__ = ("q", "k", "v", "probs")

    def __init__(self, q, k, v, probs):
        self.q = q
        self.k = k
        self.v = v
        self.probs = probs


class AttnTape:
    """Intermediates from one multi_head call, for the backward pass."""

    __slots__ = ("x", "xp", "heads", "concat")

    def __init__(self, x, xp, heads, concat):
        self.x = x
        self.xp = xp
        self.heads = heads
        self.concat = concat


def _head_segmap(config, segmap):
    if config.segment_location != "per_head":
        return None
    return segmap


def _head_forward(x, w, params, layer, head, config, segmap, cache, xp):
    n = x.rows
    inv = 1.0 / config.scale
    kind = config.scheme.kind
    q = matmul(x, w.w_q)
    if xp is not None:
        kk = matmul(xp, w.w_k)
        v = matmul(xp, w.w_v)
    else:
        kk = matmul(x, w.w_k)
        v = matmul(x, w.w_v)
    s = matmul_nt(q, kk)
    if kind == "shaw":
        a_k = params.slots[params.slot_of(layer, head)]["a_k"]
        K.bias_dot_add(q.data, a_k.data, params.shaw_index(n), s.data,
                       n, n, config.d_h)
        K.scale(s.data, inv, s.data, n * s.cols)
    else:
        K.scale(s.data, inv, s.data, n * s.cols)
        if kind in _BIAS_KINDS:
            slot = params.slot_of(layer, head)
            if cache is not None:
                bias = cache.bias(layer, head)
            elif xp is not None:
                bias = params.linformer_slot_bias(slot)
            else:
                bias = params.slot_bias(slot, n, _head_segmap(config, segmap))
            K.add(s.data, bias.data, s.data, n * s.cols)
    probs = softmax_rows(s)
    out = matmul(probs, v)
    if kind == "shaw" and config.scheme.with_value:
        a_v = params.slots[params.slot_of(layer, head)]["a_v"]
        K.mix_rel_values(probs.data, a_v.data, params.shaw_index(n), out.data,
                         n, n, config.d_h)
    return out, HeadTape(q, kk, v, probs)


def multi_head(x, heads, w_o, params, layer, segmap, config,
               cache=None, keep=False):
    """Concatenated heads through the output projection.

    Returns (out, tape); tape is None unless keep is set. Pass a
    BiasCache to reuse precomputed biases on the inference path.
    """
    n, d = x.rows, x.cols
    if len(heads) != config.h:
        raise DimensionError(f"{len(heads)} head weights for h={config.h}")
    xp = None
    if config.linformer_k is not None:
        e = params.tables["e"]
        xp = matmul(e, x)
    concat = Matrix(n, d)
    tapes = []
    for h, w in enumerate(heads):
        out, tape = _head_forward(x, w, params, layer, h, config, segmap,
                                  cache, xp)
        K.paste_cols(out.data, concat.data, n, config.d_h, d, h * config.d_h)
        tapes.append(tape)
    y = matmul(concat, w_o)
    if not keep:
        return y, None
    return y, AttnTape(x, xp, tapes, concat)


def _head_backward(dh, tape, w, params, layer, head, config, segmap,
                   gw, pos_grads, x, xp, dx, dxp):
    n = tape.q.rows
    width = config.d_h
    inv = 1.0 / config.scale
    kind = config.scheme.kind
    kcols = tape.k.rows
    slot = params.slot_of(layer, head)

    dprobs = Matrix(n, kcols)
    K.matmul_nt(dh.data, tape.v.data, dprobs.data, n, width, kcols, 0)
    if kind == "shaw" and config.scheme.with_value:
        K.mix_rel_values_backward(
            tape.probs.data, params.slots[slot]["a_v"].data,
            params.shaw_index(n), dh.data, dprobs.data,
            pos_grads.slots[slot]["a_v"].data, n, n, width)
    dv = Matrix(kcols, width)
    K.matmul_tn(tape.probs.data, dh.data, dv.data, kcols, n, width, 0)

    ds = Matrix(n, kcols)
    K.softmax_backward(tape.probs.data, dprobs.data, ds.data, n, kcols, 0)

    if kind in _BIAS_KINDS:
        g = pos_grads.slots[slot]
        if kind == "diet_abs":
            p = params.slots[slot]
            d_p = config.scheme.d_p
            K.matmul(ds.data, p["p_k"].data, g["p_q"].data, n, kcols, d_p, 1)
            K.matmul_tn(ds.data, p["p_q"].data, g["p_k"].data,
                        kcols, n, d_p, 1)
        elif kind == "diet_rel":
            K.scatter_add_scalars(ds.data, params.rel_index(n),
                                  g["r"].data, n * n)
        else:
            K.scatter_add_scalars(ds.data, params.t5_index(n),
                                  g["bucket"].data, n * n)
        seg = _head_segmap(config, segmap)
        if seg is not None:
            K.scatter_add_scalars(ds.data, params.seg_index(seg),
                                  g["seg"].data, n * n)

    K.scale(ds.data, inv, ds.data, n * kcols)

    dq = Matrix(n, width)
    K.matmul(ds.data, tape.k.data, dq.data, n, kcols, width, 0)
    if kind == "shaw":
        K.bias_dot_backward(tape.q.data, params.slots[slot]["a_k"].data,
                            params.shaw_index(n), ds.data, dq.data,
                            pos_grads.slots[slot]["a_k"].data, n, n, width)
    dk = Matrix(kcols, width)
    K.matmul_tn(ds.data, tape.q.data, dk.data, kcols, n, width, 0)

    K.matmul_tn(x.data, dq.data, gw.w_q.data, x.cols, n, width, 1)
    K.matmul_nt(dq.data, w.w_q.data, dx.data, n, width, x.cols, 1)
    if dxp is None:
        K.matmul_tn(x.data, dk.data, gw.w_k.data, x.cols, n, width, 1)
        K.matmul_nt(dk.data, w.w_k.data, dx.data, n, width, x.cols, 1)
        K.matmul_tn(x.data, dv.data, gw.w_v.data, x.cols, n, width, 1)
        K.matmul_nt(dv.data, w.w_v.data, dx.data, n, width, x.cols, 1)
    else:
        K.matmul_tn(xp.data, dk.data, gw.w_k.data, xp.cols, kcols, width, 1)
        K.matmul_nt(dk.data, w.w_k.data, dxp.data, kcols, width, xp.cols, 1)
        K.matmul_tn(xp.data, dv.data, gw.w_v.data, xp.cols, kcols, width, 1)
        K.matmul_nt(dv.data, w.w_v.data, dxp.data, kcols, width, xp.cols, 1)


def multi_head_backward(dy, tape, heads, w_o, params, layer, segmap, config,
                        head_grads, w_o_grad, pos_grads, e_grad=None):
    """Accumulate grads for one multi_head call; returns dX.

    head_grads/w_o_grad/pos_grads (and e_grad for the projected path)
    must be preallocated; this adds into them so repeated calls sum.
    """
    n, d = tape.x.rows, tape.x.cols
    K.matmul_tn(tape.concat.data, dy.data, w_o_grad.data, d, n, d, 1)
    dconcat = Matrix(n, d)
    K.matmul_nt(dy.data, w_o.data, dconcat.data, n, d, d, 0)

    dx = Matrix(n, d)
    dxp = None
    if tape.xp is not None:
        dxp = Matrix(tape.xp.rows, tape.xp.cols)
    dh = Matrix(n, config.d_h)
    for h, w in enumerate(heads):
        K.slice_cols(dconcat.data, dh.data, n, config.d_h, d, h * config.d_h)
        _head_backward(dh, tape.heads[h], w, params, layer, h, config, segmap,
                       head_grads[h], pos_grads, tape.x, tape.xp, dx, dxp)
    if dxp is not None:
        e = params.tables["e"]
        K.matmul_tn(e.data, dxp.data, dx.data, n, e.rows, d, 1)
        if e_grad is not None:
            K.matmul_nt(dxp.data, tape.x.data, e_grad.data, e.rows, d, n, 1)
    return dx
