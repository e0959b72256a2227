"""Scheme, sharing and attention configuration types."""

import math
from dataclasses import dataclass, field, replace

from .errors import ConfigError

SCHEME_KINDS = (
    "none", "input_add", "sinusoidal", "diet_abs", "diet_rel", "shaw", "t5",
)

# CLI-facing names for config kinds; linformer gets its own label because
# it changes the score shape even though it reuses the diet_abs parameters.
_LABELS = {
    "none": "none",
    "input_add": "input-add",
    "sinusoidal": "sinusoidal",
    "diet_abs": "diet-abs",
    "diet_rel": "diet-rel",
    "shaw": "shaw",
    "t5": "t5",
}
LABEL_TO_KIND = {v: k for k, v in _LABELS.items()}

SHARINGS = ("none", "layer", "head")
SEGMENT_LOCATIONS = ("none", "input", "per_head")


@dataclass(frozen=True)
class PositionScheme:
    """One positional encoding variant plus its shape parameters."""

    kind: str
    d_p: int = 0
    clip: int = 0
    with_value: bool = False
    num_buckets: int = 0
    max_distance: int = 0

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def input_additive(cls):
        return cls("input_add")

    @classmethod
    def sinusoidal(cls):
        return cls("sinusoidal")

    @classmethod
    def diet_abs(cls, d_p):
        return cls("diet_abs", d_p=d_p)

    @classmethod
    def diet_rel(cls):
        return cls("diet_rel")

    @classmethod
    def shaw(cls, clip, with_value=False):
        return cls("shaw", clip=clip, with_value=with_value)

    @classmethod
    def t5(cls, num_buckets=32, max_distance=128):
        return cls("t5", num_buckets=num_buckets, max_distance=max_distance)

    def validate(self, n):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "diet_abs":
            if not 1 <= self.d_p <= n:
                raise ConfigError(f"diet_abs needs 1 <= d_p <= n, got d_p={self.d_p}, n={n}")
        elif self.kind == "shaw":
            if self.clip < 1:
                raise ConfigError(f"shaw needs clip >= 1, got {self.clip}")
        elif self.kind == "t5":
            if self.num_buckets <= 0 or self.num_buckets % 2:
                raise ConfigError(f"t5 needs an even positive num_buckets, got {self.num_buckets}")
            if self.max_distance <= self.num_buckets // 2:
                raise ConfigError(
                    f"t5 needs max_distance > num_buckets/2, got "
                    f"{self.max_distance} <= {self.num_buckets // 2}")

    def to_dict(self):
        return {
            "kind": self.kind, "d_p": self.d_p, "clip": self.clip,
            "with_value": self.with_value, "num_buckets": self.num_buckets,
            "max_distance": self.max_distance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def slot_count(sharing, layers, heads):
    """Number of independent positional parameter slots."""
    if sharing == "none":
        return layers * heads
    if sharing == "layer":
        # shared across layers, one slot per head
        return heads
    if sharing == "head":
        # shared across heads, one slot per layer
        return layers
    raise ConfigError(f"unknown sharing {sharing!r}")


def slot_index(sharing, layer, head, heads):
    if sharing == "none":
        return layer * heads + head
    if sharing == "layer":
        return head
    if sharing == "head":
        return layer
    raise ConfigError(f"unknown sharing {sharing!r}")


@dataclass
class AttentionConfig:
    """Shape, scheme and sharing hyperparameters for one model.

    `layers` is the owning model's block count; the sharing strategy needs
    it to size the positional parameter slots. `d_h` defaults to d // h,
    `scale` to sqrt(d).
    """

    n: int = 32
    d: int = 32
    h: int = 4
    d_h: int = None
    scheme: PositionScheme = field(default_factory=PositionScheme.none)
    sharing: str = "none"
    layers: int = 2
    num_segments: int = 0
    segment_location: str = "none"
    linformer_k: int = None
    scale: float = None

    def __post_init__(self):
        if self.d_h is None:
            if self.h < 1 or self.d % self.h:
                raise ConfigError(
                    f"default head size needs h | d, got d={self.d}, h={self.h}")
            self.d_h = self.d // self.h
        if self.scale is None:
            self.scale = math.sqrt(self.d)
        self.validate()

    def validate(self):
        if min(self.n, self.d, self.h, self.d_h, self.layers) < 1:
            raise ConfigError(
                f"shape fields must be positive: n={self.n} d={self.d} "
                f"h={self.h} d_h={self.d_h} layers={self.layers}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.sharing not in SHARINGS:
            raise ConfigError(f"sharing must be one of {SHARINGS}, got {self.sharing!r}")
        if self.segment_location not in SEGMENT_LOCATIONS:
            raise ConfigError(
                f"segment_location must be one of {SEGMENT_LOCATIONS}, "
                f"got {self.segment_location!r}")
        if self.segment_location != "none" and self.num_segments < 1:
            raise ConfigError("segment attention enabled but num_segments < 1")
        self.scheme.validate(self.n)
        if self.linformer_k is not None:
            if not 1 <= self.linformer_k < self.n:
                raise ConfigError(
                    f"linformer_k must satisfy 1 <= k < n, got k={self.linformer_k}, n={self.n}")
            if self.scheme.kind != "diet_abs":
                raise ConfigError("linformer_k requires the diet_abs scheme")
            if self.segment_location == "per_head":
                raise ConfigError("per-head segments are not defined on the linformer path")
        if self.segment_location == "per_head" and self.scheme.kind not in (
                "diet_abs", "diet_rel", "t5"):
            raise ConfigError(
                "per-head segment attention needs a score-bias scheme "
                "(diet-abs, diet-rel or t5)")

    def scheme_label(self):
        if self.linformer_k is not None:
            return "linformer-diet-abs"
        return _LABELS[self.scheme.kind]

    def with_scheme(self, scheme, **kw):
        return replace(self, scheme=scheme, **kw)

    def to_dict(self):
        return {
            "n": self.n, "d": self.d, "h": self.h, "d_h": self.d_h,
            "scheme": self.scheme.to_dict(), "sharing": self.sharing,
            "layers": self.layers, "num_segments": self.num_segments,
            "segment_location": self.segment_location,
            "linformer_k": self.linformer_k, "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scheme"] = PositionScheme.from_dict(d["scheme"])
        return cls(**d)
