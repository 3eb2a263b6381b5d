"""Synthetic multi-object scenes with exact segmentation masks, and view rendering."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ViewSpec

SHAPES = ("circle", "square", "triangle")

# Each shape class draws its colour from its own hue family (warm, green,
# blue), so a class has a characteristic appearance beyond its outline. The
# background comes from a separate muted range.
CLASS_PALETTES = (
    ((0.90, 0.20, 0.20), (0.95, 0.50, 0.15), (0.85, 0.25, 0.45)),
    ((0.20, 0.75, 0.25), (0.55, 0.85, 0.20), (0.15, 0.60, 0.45)),
    ((0.20, 0.35, 0.90), (0.15, 0.70, 0.90), (0.45, 0.30, 0.85)),
)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 96
    supersample: int = 2
    n_objects: tuple[int, int] = (2, 4)
    shapes: tuple[str, ...] = SHAPES
    size_range: tuple[float, float] = (8.0, 22.0)  # equal-area radius, source pixels
    palettes: tuple[tuple[tuple[float, float, float], ...], ...] = CLASS_PALETTES  # one per entry of SHAPES
    shared_palette: bool = False  # True: every class draws from the union, so colour carries no class information
    background_range: tuple[float, float] = (0.05, 0.45)
    gray_background: bool = False  # one grey level instead of an independent value per channel
    noise_std: float = 0.02
    # One primary object (uniform class, painted last, centre at least one radius in) plus
    # distractors whose radius is the primary's times a factor from distractor_scale.
    primary_object: bool = False
    distractor_scale: tuple[float, float] = (0.3, 0.6)

    @property
    def num_classes(self) -> int:
        return len(SHAPES)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    cx: float
    cy: float
    radius: float  # equal-area radius
    angle: float


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 0 = background, class id = SHAPES index + 1
    classes: frozenset = field(default_factory=frozenset)
    objects: tuple[SceneObject, ...] = ()  # paint order; empty for scenes loaded from disk

    def dominant_class(self) -> int:
        """Foreground class id covering the most pixels (0 for an empty scene)."""
        counts = np.bincount(self.mask.ravel(), minlength=len(SHAPES) + 1)[1:]
        if counts.sum() == 0:
            return 0
        return int(np.argmax(counts)) + 1


@dataclass
class ViewImage:
    pixels: np.ndarray  # (R, R, 3)
    spec: ViewSpec


def _shape_inside(kind: str, cx: float, cy: float, r: float, angle: float, xs, ys) -> np.ndarray:
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    c, s = math.cos(angle), math.sin(angle)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    # `r` is the equal-area radius: every class covers pi*r^2 when unoccluded.
    if kind == "square":
        half = r * math.sqrt(math.pi) / 2
        return (np.abs(lx) <= half) & (np.abs(ly) <= half)
    if kind == "triangle":
        # Equilateral triangle: each edge sits at the inradius, opposite its vertex.
        inradius = r * math.sqrt(math.pi / (3 * math.sqrt(3)))
        inside = np.ones(np.broadcast(lx, ly).shape, dtype=bool)
        for k in range(3):
            vertex = -math.pi / 2 + k * 2 * math.pi / 3
            inside &= -(lx * math.cos(vertex) + ly * math.sin(vertex)) <= inradius
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def generate_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> Scene:
    size, ss = config.size, config.supersample
    lo, hi = config.n_objects
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0

    bg = rng.uniform(*config.background_range, size=1 if config.gray_background else 3)
    # Supersampled coordinates of sub-pixel centres, in source pixel units.
    sub = (np.arange(size * ss) + 0.5) / ss
    sxs, sys_ = np.meshgrid(sub, sub)
    centers = np.arange(size) + 0.5
    xs, ys = np.meshgrid(centers, centers)

    hi_res = np.empty((size * ss, size * ss, 3), dtype=np.float64)
    hi_res[:] = bg
    mask = np.zeros((size, size), dtype=np.uint8)
    objects = []

    primary_r = float(rng.uniform(*config.size_range)) if config.primary_object and n else 0.0
    for i in range(n):
        kind = config.shapes[int(rng.integers(len(config.shapes)))]
        class_id = SHAPES.index(kind) + 1
        if not primary_r:
            r = float(rng.uniform(*config.size_range))
            cx = float(rng.uniform(0, size))
            cy = float(rng.uniform(0, size))
        elif i == n - 1:
            r = primary_r
            margin = min(r, size / 2)
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
        else:
            r = primary_r * float(rng.uniform(*config.distractor_scale))
            cx = float(rng.uniform(0, size))
            cy = float(rng.uniform(0, size))
        angle = float(rng.uniform(0, 2 * math.pi))
        choices = [c for p in config.palettes for c in p] if config.shared_palette else config.palettes[class_id - 1]
        color = np.asarray(choices[int(rng.integers(len(choices)))])
        hi_res[_shape_inside(kind, cx, cy, r, angle, sxs, sys_)] = color
        mask[_shape_inside(kind, cx, cy, r, angle, xs, ys)] = class_id
        objects.append(SceneObject(class_id, cx, cy, r, angle))

    image = hi_res.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    classes = frozenset(int(c) for c in np.unique(mask) if c != 0)
    return Scene(image=image, mask=mask, classes=classes, objects=tuple(objects))


def _check_box(shape: tuple[int, ...], spec: ViewSpec) -> None:
    h, w = shape[:2]
    x1, y1, x2, y2 = spec.box
    tol = 1e-9
    if x1 < -tol or y1 < -tol or x2 > w + tol or y2 > h + tol or x2 <= x1 or y2 <= y1:
        raise ValueError(f"view box {spec.box} out of bounds for image {w}x{h}")


def _sample_coords(lo: float, hi: float, n: int) -> np.ndarray:
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def _linear_taps(coords: np.ndarray, size: int):
    # Continuous pixel coordinate -> index space where pixel i has its centre at i.
    f = coords - 0.5
    i0 = np.floor(f).astype(np.int64)
    t = f - i0
    return np.clip(i0, 0, size - 1), np.clip(i0 + 1, 0, size - 1), t


def crop_resize(image: np.ndarray, spec: ViewSpec) -> ViewImage:
    """Bilinear resample of ``spec.box`` to ``out_resolution`` squared, mirrored if flipped."""
    _check_box(image.shape, spec)
    h, w = image.shape[:2]
    r = spec.out_resolution
    x1, y1, x2, y2 = spec.box
    cx0, cx1, tx = _linear_taps(_sample_coords(x1, x2, r), w)
    cy0, cy1, ty = _linear_taps(_sample_coords(y1, y2, r), h)
    img = image.astype(np.float64)
    top = img[cy0][:, cx0] * (1 - tx)[None, :, None] + img[cy0][:, cx1] * tx[None, :, None]
    bot = img[cy1][:, cx0] * (1 - tx)[None, :, None] + img[cy1][:, cx1] * tx[None, :, None]
    out = top * (1 - ty)[:, None, None] + bot * ty[:, None, None]
    if spec.flip:
        out = out[:, ::-1]
    return ViewImage(pixels=np.clip(out, 0.0, 1.0).astype(image.dtype), spec=spec)


def crop_resize_mask(mask: np.ndarray, spec: ViewSpec) -> np.ndarray:
    _check_box(mask.shape, spec)
    h, w = mask.shape
    r = spec.out_resolution
    x1, y1, x2, y2 = spec.box
    ix = np.clip(np.floor(_sample_coords(x1, x2, r)).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor(_sample_coords(y1, y2, r)).astype(np.int64), 0, h - 1)
    out = mask[iy][:, ix]
    if spec.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class PhotometricConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1  # max hue rotation as a fraction of a full turn
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)


_LUMA = np.array([0.299, 0.587, 0.114])
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def _gray(x: np.ndarray) -> np.ndarray:
    return (x @ _LUMA)[..., None]


def rotate_hue(x: np.ndarray, turns: float) -> np.ndarray:
    """Rotate chroma about the luma axis in YIQ space by ``turns`` of a full circle."""
    c, s = math.cos(2 * math.pi * turns), math.sin(2 * math.pi * turns)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return x @ (_YIQ2RGB @ rot @ _RGB2YIQ).T


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(x, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    n_h, n_w = x.shape[:2]
    rows = sum(k[i] * pad[:, i : i + n_w] for i in range(len(k)))
    return sum(k[i] * rows[i : i + n_h] for i in range(len(k)))


def apply_photometric(
    rng: np.random.Generator, view: ViewImage, config: PhotometricConfig = PhotometricConfig()
) -> ViewImage:
    # Every draw happens unconditionally so the stream stays aligned across configs.
    u = rng.random(3)
    b = rng.uniform(1 - config.brightness, 1 + config.brightness)
    c = rng.uniform(1 - config.contrast, 1 + config.contrast)
    s = rng.uniform(1 - config.saturation, 1 + config.saturation)
    hue = rng.uniform(-config.hue, config.hue)
    sigma = rng.uniform(*config.blur_sigma)

    x = view.pixels.astype(np.float64)
    if u[0] < config.jitter_prob:
        if b != 1.0:
            x = np.clip(x * b, 0, 1)
        if c != 1.0:
            m = _gray(x).mean()
            x = np.clip((x - m) * c + m, 0, 1)
        if s != 1.0:
            g = _gray(x)
            x = np.clip((x - g) * s + g, 0, 1)
        if hue != 0.0:
            x = np.clip(rotate_hue(x, hue), 0, 1)
    if u[1] < config.grayscale_prob:
        x = np.repeat(_gray(x), 3, axis=-1)
    if u[2] < config.blur_prob:
        x = gaussian_blur(x, sigma)
    return ViewImage(pixels=np.clip(x, 0.0, 1.0).astype(view.pixels.dtype), spec=view.spec)


_SPLIT_IDS = {"train": 0, "test": 1}


def scene_seed(seed: int, split: str, index: int) -> int:
    """Integer seed of scene ``index`` in ``split``; recorded in dataset dumps."""
    return int(np.random.SeedSequence([seed, _SPLIT_IDS[split], index]).generate_state(1, np.uint64)[0])


def split_scenes(seed: int, split: str, n: int, config: SceneConfig = SceneConfig()) -> list[Scene]:
    return [generate_scene(np.random.default_rng(scene_seed(seed, split, i)), config) for i in range(n)]


# --- dataset dump: PPM/PGM + index.tsv -------------------------------------


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def write_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    data = np.asarray(values, dtype=np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def _read_netpbm(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6").astype(np.float32) / 255.0


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def dump_split(out_dir: str | os.PathLike, split: str, seeds: list[int], config: SceneConfig = SceneConfig()) -> Path:
    """Write one directory per split: ``{id}.ppm``, ``{id}.pgm`` and ``index.tsv``."""
    root = Path(out_dir) / split
    root.mkdir(parents=True, exist_ok=True)
    rows = ["id\tseed\tclasses"]
    for i, seed in enumerate(seeds):
        scene = generate_scene(np.random.default_rng(seed), config)
        write_ppm(root / f"{i:06d}.ppm", scene.image)
        write_pgm(root / f"{i:06d}.pgm", scene.mask)
        rows.append(f"{i:06d}\t{seed}\t{','.join(str(c) for c in sorted(scene.classes))}")
    (root / "index.tsv").write_text("\n".join(rows) + "\n")
    return root


def load_split(split_dir: str | os.PathLike) -> list[Scene]:
    root = Path(split_dir)
    lines = (root / "index.tsv").read_text().splitlines()
    if not lines or lines[0].split("\t") != ["id", "seed", "classes"]:
        raise ValueError(f"{root}/index.tsv: bad header")
    scenes = []
    for line in lines[1:]:
        if not line.strip():
            continue
        sid = line.split("\t")[0]
        mask = read_pgm(root / f"{sid}.pgm")
        scenes.append(
            Scene(
                image=read_ppm(root / f"{sid}.ppm"),
                mask=mask,
                classes=frozenset(int(c) for c in np.unique(mask) if c != 0),
            )
        )
    return scenes
