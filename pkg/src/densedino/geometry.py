"""Multi-crop view geometry: crop sampling, overlap constraints, reference points.

All boxes are ``(x1, y1, x2, y2)`` in real-valued source-image pixels.
Randomness is always passed in as a ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Box = tuple[float, float, float, float]

GLOBAL = "global"
LOCAL = "local"


class GeometryError(ValueError):
    pass


class UnsatisfiableConfig(GeometryError):
    """No crop of the requested scale/aspect fits the source."""


class RetryExhausted(GeometryError):
    """The overlap constraint could not be met within the retry budget."""


class OutOfView(GeometryError):
    pass


class NoOverlap(GeometryError):
    pass


@dataclass(frozen=True)
class ViewSpec:
    box: Box
    flip: bool
    out_resolution: int
    kind: str

    @property
    def width(self) -> float:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class OverlapRegion:
    box: Box
    ratio: float


@dataclass(frozen=True)
class ReferencePoint:
    abs: tuple[float, float]
    rel_a: tuple[float, float]
    rel_b: tuple[float, float]


@dataclass(frozen=True)
class ViewConfig:
    global_scale: tuple[float, float] = (0.40, 1.00)
    local_scale: tuple[float, float] = (0.05, 0.40)
    global_res: int = 224
    local_res: int = 96
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    max_attempts: int = 10

    def scale_for(self, kind: str) -> tuple[float, float]:
        return self.global_scale if kind == GLOBAL else self.local_scale

    def res_for(self, kind: str) -> int:
        return self.global_res if kind == GLOBAL else self.local_res


@dataclass(frozen=True)
class ViewGroup:
    count: int
    kind: str
    resolution: int | None = None  # None: take the ViewConfig default for `kind`


@dataclass(frozen=True)
class Layout:
    """Ordered view groups. The first two views are the teacher views."""

    groups: tuple[ViewGroup, ...] = field(default_factory=lambda: (ViewGroup(2, GLOBAL),))

    @property
    def n_views(self) -> int:
        return sum(g.count for g in self.groups)

    def expand(self) -> list[ViewGroup]:
        out = []
        for g in self.groups:
            out.extend([ViewGroup(1, g.kind, g.resolution)] * g.count)
        return out

    def __str__(self) -> str:
        parts = []
        for g in self.groups:
            parts.append(f"{g.count}{g.kind[0]}{'' if g.resolution is None else g.resolution}")
        return "+".join(parts)


_GROUP_RE = re.compile(r"^(\d+)([gl])(\d*)$")


def parse_layout(text: str) -> Layout:
    """Parse ``"2g"``, ``"2g+4l"``, ``"2g64+4g32"`` style layout strings.

    ``g``/``l`` pick the crop-scale range; an optional trailing integer
    overrides the output resolution for that group.
    """
    groups = []
    for part in text.replace(" ", "").split("+"):
        m = _GROUP_RE.match(part)
        if not m:
            raise ValueError(f"bad view layout component {part!r} in {text!r}")
        count = int(m.group(1))
        kind = GLOBAL if m.group(2) == "g" else LOCAL
        res = int(m.group(3)) if m.group(3) else None
        if count < 1:
            raise ValueError(f"view group count must be positive in {text!r}")
        groups.append(ViewGroup(count, kind, res))
    layout = Layout(tuple(groups))
    views = layout.expand()
    if len(views) < 2 or views[0].kind != GLOBAL or views[1].kind != GLOBAL:
        raise ValueError(f"layout {text!r} must start with at least two global views")
    return layout


def _fits(w: float, h: float, width: float, height: float) -> bool:
    return 0 < w <= width and 0 < h <= height


def sample_view(
    rng: np.random.Generator,
    source_size: tuple[int, int],
    kind: str,
    config: ViewConfig = ViewConfig(),
    resolution: int | None = None,
) -> ViewSpec:
    """Random-resized-crop box plus flip. ``source_size`` is ``(width, height)``."""
    width, height = source_size
    if width <= 0 or height <= 0:
        raise GeometryError(f"source size must be positive, got {source_size}")
    lo, hi = config.scale_for(kind)
    res = resolution if resolution is not None else config.res_for(kind)
    area = float(width * height)
    log_lo, log_hi = math.log(config.aspect[0]), math.log(config.aspect[1])

    box = None
    for _ in range(config.max_attempts):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = math.sqrt(target * ratio)
        h = math.sqrt(target / ratio)
        if _fits(w, h, width, height):
            x1 = rng.uniform(0, width - w)
            y1 = rng.uniform(0, height - h)
            box = (x1, y1, x1 + w, y1 + h)
            break
    if box is None:
        # Fallback: largest centred crop whose aspect lies in range.
        src_ratio = width / height
        if src_ratio < config.aspect[0]:
            w, h = float(width), width / config.aspect[0]
        elif src_ratio > config.aspect[1]:
            w, h = height * config.aspect[1], float(height)
        else:
            w, h = float(width), float(height)
        if not lo - 1e-12 <= (w * h) / area <= hi + 1e-12:
            raise UnsatisfiableConfig(
                f"no {kind} crop with scale {lo}-{hi} and aspect {config.aspect} fits {source_size}"
            )
        x1, y1 = (width - w) / 2, (height - h) / 2
        box = (x1, y1, x1 + w, y1 + h)
    flip = bool(rng.random() < config.flip_prob)
    return ViewSpec(box=box, flip=flip, out_resolution=res, kind=kind)


def overlap(a: ViewSpec, b: ViewSpec) -> OverlapRegion | None:
    x1 = max(a.box[0], b.box[0])
    y1 = max(a.box[1], b.box[1])
    x2 = min(a.box[2], b.box[2])
    y2 = min(a.box[3], b.box[3])
    if x2 <= x1 or y2 <= y1:
        return None
    inter = (x2 - x1) * (y2 - y1)
    return OverlapRegion(box=(x1, y1, x2, y2), ratio=inter / min(a.area, b.area))


def overlap_ratio(a: ViewSpec, b: ViewSpec) -> float:
    region = overlap(a, b)
    return 0.0 if region is None else region.ratio


def loss_pairs(n_views: int) -> list[tuple[int, int]]:
    """Ordered (teacher view, student view) pairs; teacher views are 0 and 1."""
    return [(t, s) for t in (0, 1) for s in range(n_views) if s != t]


def point_pairs(n_views: int) -> list[tuple[int, int]]:
    """Unordered view pairs that carry reference points (at least one teacher view)."""
    return [(a, b) for a in range(n_views) for b in range(a + 1, n_views) if a < 2]


def sample_view_set(
    rng: np.random.Generator,
    source_size: tuple[int, int],
    layout: Layout,
    min_overlap_ratio: float = 0.3,
    config: ViewConfig = ViewConfig(),
    retry_budget: int = 100,
) -> list[ViewSpec]:
    if not 0.0 <= min_overlap_ratio < 1.0:
        raise GeometryError(f"min_overlap_ratio must lie in [0, 1), got {min_overlap_ratio}")
    slots = layout.expand()
    for _ in range(retry_budget):
        views = [sample_view(rng, source_size, g.kind, config, g.resolution) for g in slots]
        if all(overlap_ratio(views[t], views[s]) >= min_overlap_ratio for t, s in loss_pairs(len(views))):
            return views
    raise RetryExhausted(
        f"could not satisfy min_overlap_ratio={min_overlap_ratio} for layout {layout} "
        f"in {retry_budget} attempts"
    )


def to_relative(p: Sequence[float], v: ViewSpec) -> tuple[float, float]:
    x, y = p
    x1, y1, x2, y2 = v.box
    if not (x1 <= x <= x2 and y1 <= y <= y2):
        raise OutOfView(f"point {tuple(p)} lies outside view box {v.box}")
    u = (x - x1) / (x2 - x1)
    w = (y - y1) / (y2 - y1)
    if v.flip:
        u = 1.0 - u
    return (u, w)


def from_relative(rel: Sequence[float], v: ViewSpec) -> tuple[float, float]:
    u, w = rel
    if v.flip:
        u = 1.0 - u
    x1, y1, x2, y2 = v.box
    return (x1 + u * (x2 - x1), y1 + w * (y2 - y1))


def sample_reference_points(
    rng: np.random.Generator, a: ViewSpec, b: ViewSpec, m: int
) -> list[ReferencePoint]:
    region = overlap(a, b)
    if region is None:
        raise NoOverlap(f"views {a.box} and {b.box} do not overlap")
    if m == 0:
        return []
    x1, y1, x2, y2 = region.box
    xs = rng.uniform(x1, x2, size=m)
    ys = rng.uniform(y1, y2, size=m)
    points = []
    for x, y in zip(xs.tolist(), ys.tolist()):
        points.append(ReferencePoint(abs=(x, y), rel_a=to_relative((x, y), a), rel_b=to_relative((x, y), b)))
    return points
