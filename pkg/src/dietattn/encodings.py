"""Positional and segment encodings as per-head additive score biases.

Builds the learned parameter sets for every scheme under a sharing
strategy, evaluates them into bias matrices, and provides the inference
cache plus the flat key-to-tensor archive format used for export.
"""

import json
import math
import sys
import zipfile
from array import array

from .backend import K
from .config import AttentionConfig, slot_count, slot_index
from .errors import ConfigError, DimensionError, SchemeError, StaleCacheError
from .rng import Rng
from .tensor import Matrix, matmul_nt

EMBED_STD = 0.02


def relative_offset(i, j):
    """Query index minus key index; the subscript of the R table."""
    return i - j


def t5_bucket(offset, num_buckets, max_distance):
    """Map a signed offset to a bucket in [0, num_buckets).

    Half the buckets per sign. Within a sign, small offsets get their own
    bucket; larger ones are log-spaced up to max_distance and then clamp
    into the last bucket of the half. Offset 0 is always bucket 0.
    """
    half = num_buckets // 2
    max_exact = half // 2
    if max_exact < 1:
        max_exact = 1
    if offset >= 0:
        base = 0
        m = offset
    else:
        base = half
        m = -offset - 1
    if m < max_exact:
        idx = m
    else:
        ratio = math.log(m / max_exact) / math.log(max_distance / max_exact)
        idx = max_exact + int(ratio * (half - max_exact))
        if idx > half - 1:
            idx = half - 1
    return base + idx


def sinusoidal_table(n, d):
    """Interleaved sin/cos embeddings at wavelengths 10^4^(2k/d)."""
    p = Matrix(n, d)
    for pos in range(n):
        base = pos * d
        k = 0
        while 2 * k < d:
            w = math.pow(10000.0, -2.0 * k / d)
            p.data[base + 2 * k] = math.sin(pos * w)
            if 2 * k + 1 < d:
                p.data[base + 2 * k + 1] = math.cos(pos * w)
            k += 1
    return p


class SegmentMap:
    """Index-to-segment assignment; segments must be contiguous runs."""

    __slots__ = ("assignment", "num_segments")

    def __init__(self, assignment, num_segments=None):
        assignment = list(assignment)
        if not assignment:
            raise ConfigError("empty segment map")
        seen = set()
        prev = None
        for s in assignment:
            if s < 0:
                raise ConfigError(f"negative segment id {s}")
            if s != prev:
                if s in seen:
                    raise ConfigError(
                        f"segment {s} is not a contiguous run")
                seen.add(s)
                prev = s
        self.assignment = assignment
        self.num_segments = max(assignment) + 1 if num_segments is None else num_segments
        for s in assignment:
            if s >= self.num_segments:
                raise ConfigError(
                    f"segment id {s} >= num_segments {self.num_segments}")

    @classmethod
    def from_lengths(cls, lengths):
        ids = []
        for seg, ln in enumerate(lengths):
            if ln < 1:
                raise ConfigError(f"segment {seg} has length {ln}")
            ids.extend([seg] * ln)
        return cls(ids, num_segments=len(lengths))

    @classmethod
    def uniform(cls, n):
        return cls([0] * n, num_segments=1)

    @property
    def n(self):
        return len(self.assignment)

    def key(self):
        return tuple(self.assignment)


def segment_bias(s, segmap):
    """n x n matrix with entry (i, j) = s[seg(i), seg(j)]."""
    if s.rows != s.cols:
        raise DimensionError(f"segment matrix must be square, got {s.rows}x{s.cols}")
    if segmap.num_segments > s.rows:
        raise DimensionError(
            f"segment map uses {segmap.num_segments} segments but matrix is {s.rows}x{s.cols}")
    n = segmap.n
    out = Matrix(n, n)
    idx = _segment_index(segmap, s.rows)
    K.take_scalars(s.data, idx, out.data, n * n, 0)
    return out


def _segment_index(segmap, num_segments):
    n = segmap.n
    idx = array("q", bytes(8 * n * n))
    a = segmap.assignment
    for i in range(n):
        base = i * n
        row = a[i] * num_segments
        for j in range(n):
            idx[base + j] = row + a[j]
    return idx


def _relative_index(n):
    # flat (i, j) -> (i - j) + (n - 1)
    idx = array("q", bytes(8 * n * n))
    for i in range(n):
        base = i * n
        for j in range(n):
            idx[base + j] = i - j + n - 1
    return idx


def _t5_index(n, num_buckets, max_distance):
    lut = [t5_bucket(off, num_buckets, max_distance) for off in range(-(n - 1), n)]
    idx = array("q", bytes(8 * n * n))
    for i in range(n):
        base = i * n
        for j in range(n):
            idx[base + j] = lut[i - j + n - 1]
    return idx


def _shaw_index(n, clip):
    # flat (i, j) -> clamp(j - i, -clip, clip) + clip
    idx = array("q", bytes(8 * n * n))
    for i in range(n):
        base = i * n
        for j in range(n):
            off = j - i
            if off > clip:
                off = clip
            elif off < -clip:
                off = -clip
            idx[base + j] = off + clip
    return idx


class PositionParams:
    """Learned positional/segment parameters for one scheme and sharing.

    Per-head schemes keep one parameter dict per slot; input-level tables
    (the additive P, input segment embeddings) live alongside. A version
    counter is bumped on every mutation so caches can detect staleness.
    """

    def __init__(self, config, slots, tables, fixed_names=()):
        self.config = config
        self.scheme = config.scheme
        self.sharing = config.sharing
        self.layers = config.layers
        self.heads = config.h
        self.n = config.n
        self.slots = slots
        self.tables = tables
        self.fixed_names = frozenset(fixed_names)
        self.version = 0
        self._index_cache = {}

    # -- structure ---------------------------------------------------------

    @property
    def num_slots(self):
        return len(self.slots)

    def slot_of(self, layer, head):
        if not (0 <= layer < self.layers and 0 <= head < self.heads):
            raise ConfigError(
                f"layer {layer}, head {head} outside model shape "
                f"{self.layers}x{self.heads}")
        return slot_index(self.sharing, layer, head, self.heads)

    def slot_label(self, s):
        if self.sharing == "none":
            return f"layer{s // self.heads}.head{s % self.heads}"
        if self.sharing == "layer":
            return f"head{s}"
        return f"layer{s}"

    def named_tensors(self):
        """All tensors as (key, Matrix), fixed tables included."""
        out = []
        label_root = self.config.scheme_label()
        for name in sorted(self.tables):
            out.append((f"{label_root}/{name}", self.tables[name]))
        for s, slot in enumerate(self.slots):
            label = self.slot_label(s)
            for name in sorted(slot):
                out.append((f"{label_root}/{label}/{name}", slot[name]))
        return out

    def trainables(self):
        for key, m in self.named_tensors():
            if key.rsplit("/", 1)[-1] in self.fixed_names:
                continue
            yield key, m

    def param_count(self):
        return sum(m.rows * m.cols for _, m in self.trainables())

    # -- mutation ----------------------------------------------------------

    def bump(self):
        self.version += 1

    def zero_positional(self):
        """Zero every positional and segment tensor (fixed tables included).

        The linformer projection E is a token-path matrix, not a position
        signal, so it is left alone.
        """
        for key, m in self.named_tensors():
            if key.rsplit("/", 1)[-1] == "e":
                continue
            K.zero_buf(m.data, m.rows * m.cols)
        self.bump()

    # -- evaluation --------------------------------------------------------

    def _index(self, kid, builder):
        got = self._index_cache.get(kid)
        if got is None:
            got = builder()
            self._index_cache[kid] = got
        return got

    def rel_index(self, n):
        return self._index(("rel", n), lambda: _relative_index(n))

    def t5_index(self, n):
        sch = self.scheme
        return self._index(
            ("t5", n), lambda: _t5_index(n, sch.num_buckets, sch.max_distance))

    def shaw_index(self, n):
        return self._index(("shaw", n), lambda: _shaw_index(n, self.scheme.clip))

    def seg_index(self, segmap):
        key = ("seg", segmap.key(), self.config.num_segments)
        return self._index(key, lambda: _segment_index(segmap, self.config.num_segments))

    def slot_bias(self, s, n, segmap=None):
        """Square additive bias for one parameter slot."""
        kind = self.scheme.kind
        if kind not in ("diet_abs", "diet_rel", "t5"):
            raise SchemeError(
                f"scheme {kind} does not reduce to an additive score bias")
        if self.config.linformer_k is not None:
            raise SchemeError(
                "linformer bias is n x k; use linformer_slot_bias")
        if n != self.n:
            raise DimensionError(f"bias length {n} != configured n {self.n}")
        slot = self.slots[s]
        out = Matrix(n, n)
        if kind == "diet_abs":
            K.matmul_nt(slot["p_q"].data, slot["p_k"].data, out.data,
                        n, self.scheme.d_p, n, 0)
        elif kind == "diet_rel":
            K.take_scalars(slot["r"].data, self.rel_index(n), out.data, n * n, 0)
        else:
            K.take_scalars(slot["bucket"].data, self.t5_index(n), out.data, n * n, 0)
        if segmap is not None:
            self._add_segment(slot, segmap, out, n)
        return out

    def _add_segment(self, slot, segmap, out, n):
        if self.config.segment_location != "per_head":
            raise ConfigError("segment bias requested but per-head segments are not enabled")
        if segmap.n != n:
            raise DimensionError(f"segment map length {segmap.n} != n {n}")
        K.take_scalars(slot["seg"].data, self.seg_index(segmap), out.data, n * n, 1)

    def linformer_slot_bias(self, s):
        """n x k bias P_Q P_K^T for the projected path."""
        k = self.config.linformer_k
        if k is None:
            raise SchemeError("model has no linformer projection configured")
        slot = self.slots[s]
        return matmul_nt(slot["p_q"], slot["p_k"])


def init_params(config, seed):
    """Build PositionParams for a config; deterministic in the seed.

    Embedding-like tensors are N(0, 0.02^2); scalar tables start at zero
    so every score-bias scheme opens exactly at vanilla attention.
    """
    config.validate()
    sch = config.scheme
    rng = Rng(seed, "pos")
    nslots = slot_count(config.sharing, config.layers, config.h)
    n, d = config.n, config.d

    def normal(rows, cols, label):
        m = Matrix(rows, cols)
        rng.split(label).fill_normal(m.data, EMBED_STD)
        return m

    slots = []
    tables = {}
    fixed = []
    if sch.kind in ("diet_abs", "diet_rel", "t5", "shaw"):
        for s in range(nslots):
            label = f"slot{s}"
            slot = {}
            if sch.kind == "diet_abs":
                krows = config.linformer_k if config.linformer_k is not None else n
                slot["p_q"] = normal(n, sch.d_p, label + "/p_q")
                slot["p_k"] = normal(krows, sch.d_p, label + "/p_k")
            elif sch.kind == "diet_rel":
                slot["r"] = Matrix(2 * n - 1, 1)
            elif sch.kind == "t5":
                slot["bucket"] = Matrix(sch.num_buckets, 1)
            else:
                rows = 2 * sch.clip + 1
                slot["a_k"] = normal(rows, config.d_h, label + "/a_k")
                if sch.with_value:
                    slot["a_v"] = normal(rows, config.d_h, label + "/a_v")
            if config.segment_location == "per_head":
                slot["seg"] = Matrix(config.num_segments, config.num_segments)
            slots.append(slot)
    elif sch.kind == "input_add":
        tables["p"] = normal(n, d, "p")
    elif sch.kind == "sinusoidal":
        tables["p"] = sinusoidal_table(n, d)
        fixed.append("p")

    if config.segment_location == "input":
        tables["seg_input"] = normal(config.num_segments, d, "seg_input")

    if config.linformer_k is not None:
        e = Matrix(config.linformer_k, n)
        rng.split("e").fill_normal(e.data, 1.0 / math.sqrt(n))
        tables["e"] = e

    return PositionParams(config, slots, tables, fixed)


def positional_bias(params, layer, head, n, segmap=None):
    """Additive n x n score bias for one (layer, head), via sharing."""
    s = params.slot_of(layer, head)
    return params.slot_bias(s, n, segmap)


class BiasCache:
    """Precomputed per-slot bias matrices for inference.

    Stamped with the parameter version at build time; any later parameter
    mutation makes the cache stale and use raises StaleCacheError.
    """

    def __init__(self, params, n, segmap=None):
        kind = params.scheme.kind
        if kind not in ("diet_abs", "diet_rel", "t5"):
            raise SchemeError(
                f"scheme {kind} has no precomputable score bias")
        self._params = params
        self.version = params.version
        self.n = n
        self.segmap_key = None if segmap is None else segmap.key()
        if params.config.linformer_k is not None:
            self.slot_biases = [
                params.linformer_slot_bias(s) for s in range(params.num_slots)]
        else:
            self.slot_biases = [
                params.slot_bias(s, n, segmap) for s in range(params.num_slots)]

    def check(self, params=None):
        p = self._params if params is None else params
        if p is not self._params or p.version != self.version:
            raise StaleCacheError(
                "positional parameters changed after the cache was built")

    def bias(self, layer, head):
        self.check()
        return self.slot_biases[self._params.slot_of(layer, head)]


def build_cache(params, n, segmap=None):
    return BiasCache(params, n, segmap)


# ------------------------------------------------------------------ archive

_ARCHIVE_FORMAT = "dietattn-archive"
# fixed zip metadata keeps archive bytes deterministic
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_archive(path, tensors, meta=None):
    """Write a flat key-to-matrix archive: JSON manifest + packed f64."""
    manifest = {"format": _ARCHIVE_FORMAT, "version": 1, "meta": meta or {},
                "tensors": {}}
    blob = array("d")
    for key in sorted(tensors):
        m = tensors[key]
        manifest["tensors"][key] = {
            "rows": m.rows, "cols": m.cols, "offset": len(blob)}
        blob.extend(m.data)
    if sys.byteorder == "big":
        blob = array("d", blob)
        blob.byteswap()
    payload = blob.tobytes()
    mtext = json.dumps(manifest, sort_keys=True, indent=1).encode()
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as z:
        for name, data in (("manifest.json", mtext), ("data.bin", payload)):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o600 << 16
            z.writestr(info, data)


def load_archive(path):
    """Read an archive written by save_archive; returns (tensors, meta)."""
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        payload = z.read("data.bin")
    if manifest.get("format") != _ARCHIVE_FORMAT:
        raise ValueError(f"{path} is not a {_ARCHIVE_FORMAT} file")
    blob = array("d")
    blob.frombytes(payload)
    if sys.byteorder == "big":
        blob.byteswap()
    tensors = {}
    for key, spec in manifest["tensors"].items():
        r, c, off = spec["rows"], spec["cols"], spec["offset"]
        tensors[key] = Matrix(r, c, blob[off:off + r * c])
    return tensors, manifest.get("meta", {})


def save_params(path, params, extra_meta=None):
    meta = {"kind": "position-params",
            "config": params.config.to_dict(),
            "param_version": params.version}
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, dict(params.named_tensors()), meta)


def load_params(path):
    """Rebuild PositionParams from an archive; returns (params, meta)."""
    tensors, meta = load_archive(path)
    if meta.get("kind") != "position-params":
        raise ValueError(f"{path} does not hold position parameters")
    config = AttentionConfig.from_dict(meta["config"])
    params = init_params(config, 0)
    stored = dict(params.named_tensors())
    if set(stored) != set(tensors):
        raise ValueError("archive keys do not match the config's parameter set")
    for key, m in stored.items():
        src = tensors[key]
        if src.shape != m.shape:
            raise DimensionError(
                f"archived {key} is {src.rows}x{src.cols}, expected {m.rows}x{m.cols}")
        K.copy_buf(src.data, m.data, m.rows * m.cols)
    params.bump()
    return params, meta
