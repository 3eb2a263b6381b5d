"""Student/teacher self-distillation with class-token and reference-token losses."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import geometry as geo
from .encoder import EncoderConfig, EncoderOutput, VisionTransformer
from .scenes import (
    PhotometricConfig,
    Scene,
    SceneConfig,
    apply_photometric,
    crop_resize,
    generate_scene,
    scene_seed,
)

log = logging.getLogger(__name__)

# Named RNG streams: every random draw is keyed by (seed, stream, step, sample).
STREAM_PERM = 1
STREAM_VIEWS = 2
STREAM_INIT = 3


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    data_seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    n_train_scenes: int = 3200
    precision: str = "float32"
    # loss
    alpha: float = 0.5
    num_points: int = 4
    # views
    views: str = "2g"
    local_res: int = 32
    min_overlap_ratio: float = 0.3
    global_scale: tuple[float, float] = (0.40, 1.00)
    local_scale: tuple[float, float] = (0.05, 0.40)
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    overlap_retry_budget: int = 100
    # photometric
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # scenes
    scene_size: int = 96
    n_objects: tuple[int, int] = (2, 4)
    object_size: tuple[float, float] = (8.0, 22.0)
    primary_object: bool = False
    distractor_scale: tuple[float, float] = (0.3, 0.6)
    # optimisation
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.1
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    clip_grad: float = 3.0
    # distillation
    student_temp: float = 0.1
    teacher_temp: float = 0.07
    warmup_teacher_temp: float = 0.04
    warmup_teacher_temp_epochs: int = 30
    center_momentum: float = 0.9
    shared_center: bool = False  # True: one center pooled over class and reference logits
    momentum_teacher: float = 0.996
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.num_points < 0:
            raise ValueError(f"num_points must be >= 0, got {self.num_points}")
        if self.batch_size < 1 or self.n_train_scenes < self.batch_size:
            raise ValueError("need 1 <= batch_size <= n_train_scenes")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.student_temp <= 0 or self.teacher_temp <= 0 or self.warmup_teacher_temp <= 0:
            raise ValueError("temperatures must be positive")
        geo.parse_layout(self.views)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def steps_per_epoch(self) -> int:
        return self.n_train_scenes // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def layout(self) -> geo.Layout:
        return geo.parse_layout(self.views)

    def view_config(self, image_res: int) -> geo.ViewConfig:
        return geo.ViewConfig(
            global_scale=self.global_scale,
            local_scale=self.local_scale,
            global_res=image_res,
            local_res=self.local_res,
            aspect=self.aspect,
            flip_prob=self.flip_prob,
        )

    def photometric(self, blur: bool) -> PhotometricConfig:
        return PhotometricConfig(
            brightness=self.brightness,
            contrast=self.contrast,
            saturation=self.saturation,
            hue=self.hue,
            jitter_prob=self.jitter_prob,
            grayscale_prob=self.grayscale_prob,
            blur_prob=self.blur_prob if blur else 0.0,
            blur_sigma=self.blur_sigma,
        )

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            size=self.scene_size,
            n_objects=self.n_objects,
            size_range=self.object_size,
            primary_object=self.primary_object,
            distractor_scale=self.distractor_scale,
        )


# --- probabilities and losses ----------------------------------------------


def student_probs(logits: Tensor, tau_s: float) -> Tensor:
    return torch.softmax(logits / tau_s, dim=-1)


def teacher_probs(logits: Tensor, center: Tensor, tau_t: float) -> Tensor:
    return torch.softmax((logits - center) / tau_t, dim=-1)


def cross_entropy(p_teacher: Tensor, student_logits: Tensor, tau_s: float) -> Tensor:
    """Per-row ``-sum_k p_t[k] log p_s[k]``."""
    return -(p_teacher * F.log_softmax(student_logits / tau_s, dim=-1)).sum(dim=-1)


def entropy(p: Tensor) -> Tensor:
    return -(p * torch.log(p.clamp_min(1e-30))).sum(dim=-1)


def update_center(center: Tensor, teacher_logits: Tensor, momentum: float) -> Tensor:
    """EMA of the batch-mean teacher logit; ``teacher_logits`` is ``(rows, K)``."""
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return center * momentum + batch_mean * (1 - momentum)


def loss_cls(
    student_cls: list[Tensor], teacher_cls: list[Tensor], center: Tensor, tau_s: float, tau_t: float
) -> tuple[Tensor, int]:
    """Average cross-entropy over (teacher view, other view) pairs and the batch.

    ``student_cls[v]`` holds ``(B, K)`` logits of view ``v``; ``teacher_cls``
    covers views 0 and 1 only. Returns the loss and the number of view pairs.
    """
    terms = []
    for t, s in geo.loss_pairs(len(student_cls)):
        p_t = teacher_probs(teacher_cls[t], center, tau_t)
        terms.append(cross_entropy(p_t, student_cls[s], tau_s).mean())
    return torch.stack(terms).mean(), len(terms)


@dataclass
class RefLayout:
    """Where each point pair's M reference tokens live inside every view's token list."""

    n_views: int
    m: int
    pairs: list[tuple[int, int]]
    teacher_slot: dict[tuple[int, int], int]  # (teacher view, pair index) -> first token index
    student_slot: dict[tuple[int, int], int]  # (student view, pair index) -> first token index
    teacher_count: list[int]
    student_count: list[int]

    @classmethod
    def build(cls, n_views: int, m: int) -> "RefLayout":
        pairs = geo.point_pairs(n_views)
        t_slot, s_slot = {}, {}
        t_count, s_count = [0, 0], [0] * n_views
        for p, (a, b) in enumerate(pairs):
            for v in (a, b):
                if v < 2:
                    t_slot[(v, p)] = t_count[v] * m
                    t_count[v] += 1
            # Student side of this pair: the non-teacher view, or both teacher views.
            for v in (a, b) if b < 2 else (b,):
                s_slot[(v, p)] = s_count[v] * m
                s_count[v] += 1
        return cls(
            n_views=n_views,
            m=m,
            pairs=pairs,
            teacher_slot=t_slot,
            student_slot=s_slot,
            teacher_count=[c * m for c in t_count],
            student_count=[c * m for c in s_count],
        )

    def pair_index(self, a: int, b: int) -> int:
        return self.pairs.index((min(a, b), max(a, b)))


def loss_ref(
    student_ref: list[Tensor],
    teacher_ref: list[Tensor],
    pair_valid: Tensor,
    layout: RefLayout,
    center: Tensor,
    tau_s: float,
    tau_t: float,
) -> tuple[Tensor, int]:
    """Mean cross-entropy over all (teacher view, student view, point) triples.

    ``pair_valid`` is ``(B, P)``: pairs whose views do not overlap carry no
    points and contribute nothing. Returns the loss and the triple count.
    """
    m = layout.m
    dtype = center.dtype
    if m == 0:
        return torch.zeros((), dtype=dtype), 0
    total = torch.zeros((), dtype=dtype)
    count = 0
    for t, s in geo.loss_pairs(layout.n_views):
        p = layout.pair_index(t, s)
        valid = pair_valid[:, p]
        n_valid = int(valid.sum())
        if n_valid == 0:
            continue
        ot, os_ = layout.teacher_slot[(t, p)], layout.student_slot[(s, p)]
        p_t = teacher_probs(teacher_ref[t][:, ot : ot + m], center, tau_t)
        ce = cross_entropy(p_t, student_ref[s][:, os_ : os_ + m], tau_s)
        total = total + (ce * valid.to(dtype).unsqueeze(-1)).sum()
        count += n_valid * m
    if count == 0:
        log.warning("no overlapping view pairs in batch; reference loss is 0")
        return torch.zeros((), dtype=dtype), 0
    return total / count, count


def total_loss(cls: Tensor | float, ref: Tensor | float, alpha: float):
    return alpha * cls + (1 - alpha) * ref


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ValueError("teacher and student have different parameter lists")
    for pt, ps in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch {tuple(pt.shape)} vs {tuple(ps.shape)}")
        pt.copy_(pt * momentum + ps * (1 - momentum))


# --- schedules ---------------------------------------------------------------


def cosine(start: float, end: float, step: int, total: int) -> float:
    if total <= 0:
        return start
    frac = min(max(step / total, 0.0), 1.0)
    return end + (start - end) * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class Schedules:
    config: TrainConfig

    @property
    def warmup_steps(self) -> int:
        return int(round(self.config.warmup_frac * self.config.total_steps))

    def lr(self, step: int) -> float:
        c, w = self.config, self.warmup_steps
        if step < w:
            return c.lr * (step + 1) / w
        return cosine(c.lr, c.min_lr, step - w, c.total_steps - w)

    def weight_decay(self, step: int) -> float:
        c = self.config
        return cosine(c.weight_decay, c.weight_decay_end, step, c.total_steps)

    def ema_momentum(self, step: int) -> float:
        c = self.config
        return cosine(c.momentum_teacher, 1.0, step, c.total_steps)

    def teacher_temp(self, step: int) -> float:
        c = self.config
        epoch = step // c.steps_per_epoch
        n = c.warmup_teacher_temp_epochs
        if epoch >= n:
            return c.teacher_temp
        if n == 1:
            return c.warmup_teacher_temp
        return c.warmup_teacher_temp + (c.teacher_temp - c.warmup_teacher_temp) * epoch / (n - 1)


@dataclass
class DistillState:
    center: Tensor
    ref_center: Tensor | None = None  # set when class and reference tokens are centred separately
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    ema_momentum: float = 0.996
    lr: float = 0.0
    step: int = 0


# --- batches -------------------------------------------------------------


@dataclass
class Batch:
    indices: list[int]
    views: list[list[geo.ViewSpec]]  # per sample
    pixels: list[np.ndarray]  # per view: (B, R, R, 3)
    teacher_rel: list[np.ndarray]  # views 0, 1: (B, Rt, 2)
    student_rel: list[np.ndarray]  # per view: (B, Rs, 2)
    pair_valid: np.ndarray  # (B, P) bool
    layout: RefLayout


def sample_rng(seed: int, stream: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step, index])


def prepare_batch(
    scenes: list[Scene], indices: list[int], config: TrainConfig, image_res: int, step: int
) -> Batch:
    layout = config.layout()
    n_views = layout.n_views
    refs = RefLayout.build(n_views, config.num_points)
    m = config.num_points
    vcfg = config.view_config(image_res)
    b = len(scenes)
    res = [g.resolution or vcfg.res_for(g.kind) for g in layout.expand()]
    pixels = [np.empty((b, r, r, 3), dtype=np.float32) for r in res]
    t_rel = [np.full((b, refs.teacher_count[v], 2), 0.5) for v in (0, 1)]
    s_rel = [np.full((b, refs.student_count[v], 2), 0.5) for v in range(n_views)]
    valid = np.zeros((b, len(refs.pairs)), dtype=bool)
    all_views = []
    for i, (scene, idx) in enumerate(zip(scenes, indices)):
        rng = sample_rng(config.seed, STREAM_VIEWS, step, i)
        h, w = scene.image.shape[:2]
        views = geo.sample_view_set(
            rng, (w, h), layout, config.min_overlap_ratio, vcfg, config.overlap_retry_budget
        )
        all_views.append(views)
        for p, (a, c) in enumerate(refs.pairs):
            if geo.overlap(views[a], views[c]) is None:
                continue
            valid[i, p] = True
            pts = geo.sample_reference_points(rng, views[a], views[c], m)
            rel = {a: np.array([q.rel_a for q in pts]).reshape(m, 2), c: np.array([q.rel_b for q in pts]).reshape(m, 2)}
            for v in (a, c):
                if (v, p) in refs.teacher_slot:
                    o = refs.teacher_slot[(v, p)]
                    t_rel[v][i, o : o + m] = rel[v]
                if (v, p) in refs.student_slot:
                    o = refs.student_slot[(v, p)]
                    s_rel[v][i, o : o + m] = rel[v]
        for v, spec in enumerate(views):
            view = crop_resize(scene.image, spec)
            view = apply_photometric(rng, view, config.photometric(blur=(v == 0)))
            pixels[v][i] = view.pixels
    return Batch(
        indices=list(indices),
        views=all_views,
        pixels=pixels,
        teacher_rel=t_rel,
        student_rel=s_rel,
        pair_valid=valid,
        layout=refs,
    )


def _forward_groups(model: VisionTransformer, pixels: list[Tensor], rel: list[Tensor]) -> list[EncoderOutput]:
    """Forward views sharing (resolution, reference count) as one concatenated batch."""
    groups: dict[tuple[int, int], list[int]] = {}
    for v, (px, r) in enumerate(zip(pixels, rel)):
        groups.setdefault((px.shape[1], r.shape[1]), []).append(v)
    outs: list[EncoderOutput | None] = [None] * len(pixels)
    for members in groups.values():
        b = pixels[members[0]].shape[0]
        out = model(torch.cat([pixels[v] for v in members]), torch.cat([rel[v] for v in members]))
        for j, v in enumerate(members):
            sl = slice(j * b, (j + 1) * b)
            outs[v] = EncoderOutput(
                cls_feat=out.cls_feat[sl],
                patch_feats=out.patch_feats[sl],
                ref_feats=out.ref_feats[sl],
                cls_logits=out.cls_logits[sl],
                ref_logits=out.ref_logits[sl],
            )
    return outs


@dataclass
class TeacherTargets:
    outputs: list[EncoderOutput]  # views 0 and 1


@dataclass
class BatchTensors:
    pixels: list[Tensor]
    teacher_rel: list[Tensor]
    student_rel: list[Tensor]
    pair_valid: Tensor
    layout: RefLayout

    @classmethod
    def from_batch(cls, batch: Batch, dtype: torch.dtype) -> "BatchTensors":
        return cls(
            pixels=[torch.from_numpy(p).to(dtype) for p in batch.pixels],
            teacher_rel=[torch.from_numpy(r).to(dtype) for r in batch.teacher_rel],
            student_rel=[torch.from_numpy(r).to(dtype) for r in batch.student_rel],
            pair_valid=torch.from_numpy(batch.pair_valid),
            layout=batch.layout,
        )


@torch.no_grad()
def teacher_forward(teacher: VisionTransformer, bt: BatchTensors) -> TeacherTargets:
    return TeacherTargets(_forward_groups(teacher, bt.pixels[:2], bt.teacher_rel))


@dataclass
class Losses:
    cls: Tensor
    ref: Tensor
    total: Tensor
    n_cls_terms: int
    n_ref_terms: int


def student_losses(
    student: VisionTransformer, bt: BatchTensors, targets: TeacherTargets, state: DistillState, alpha: float
) -> Losses:
    outs = _forward_groups(student, bt.pixels, bt.student_rel)
    t = targets.outputs
    lc, n_cls = loss_cls(
        [o.cls_logits for o in outs], [o.cls_logits for o in t], state.center, state.student_temp, state.teacher_temp
    )
    lr_, n_ref = loss_ref(
        [o.ref_logits for o in outs],
        [o.ref_logits for o in t],
        bt.pair_valid,
        bt.layout,
        state.center if state.ref_center is None else state.ref_center,
        state.student_temp,
        state.teacher_temp,
    )
    return Losses(cls=lc, ref=lr_, total=total_loss(lc, lr_, alpha), n_cls_terms=n_cls, n_ref_terms=n_ref)


def teacher_logit_rows(targets: TeacherTargets, bt: BatchTensors, cls: bool = True, ref: bool = True) -> Tensor:
    """Teacher class logits of both views and/or every valid reference logit, ``(rows, K)``."""
    rows = [o.cls_logits for o in targets.outputs] if cls else []
    lay = bt.layout
    if not ref:
        return torch.cat(rows)
    for t in (0, 1):
        for p in range(len(lay.pairs)):
            if (t, p) not in lay.teacher_slot or lay.m == 0:
                continue
            o = lay.teacher_slot[(t, p)]
            block = targets.outputs[t].ref_logits[:, o : o + lay.m]
            rows.append(block[bt.pair_valid[:, p]].reshape(-1, block.shape[-1]))
    if not rows:
        return targets.outputs[0].cls_logits[:0]
    return torch.cat(rows)


@dataclass
class StepReport:
    step: int
    epoch: int
    loss_cls: float
    loss_ref: float
    total: float
    teacher_entropy: float
    grad_norm: float
    lr: float
    ema_momentum: float


def build_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    regularized, plain = [], []
    for name, p in model.named_parameters():
        (plain if name.endswith(".bias") or p.ndim == 1 else regularized).append(p)
    return torch.optim.AdamW(
        [{"params": regularized}, {"params": plain, "weight_decay": 0.0}],
        lr=config.lr,
        weight_decay=config.weight_decay,
        foreach=False,
    )


class SceneSource:
    """Lazily generated, cached training scenes keyed by index."""

    def __init__(self, config: TrainConfig, split: str = "train"):
        self.config = config
        self.split = split
        self.scene_config = config.scene_config()
        self._cache: dict[int, Scene] = {}

    def __len__(self) -> int:
        return self.config.n_train_scenes

    def __getitem__(self, i: int) -> Scene:
        if i not in self._cache:
            self._cache[i] = generate_scene(
                np.random.default_rng(scene_seed(self.config.data_seed, self.split, i)), self.scene_config
            )
        return self._cache[i]


class Trainer:
    """Owns student, teacher, optimiser and distillation state for one run."""

    def __init__(self, encoder_config: EncoderConfig, config: TrainConfig, scenes: SceneSource | None = None):
        self.encoder_config = encoder_config
        self.config = config
        self.schedules = Schedules(config)
        self.scenes = scenes if scenes is not None else SceneSource(config)
        init_seed = int(np.random.default_rng([config.seed, STREAM_INIT]).integers(2**62))
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.student = VisionTransformer(encoder_config)
        self.student.to(config.dtype)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        self.optimizer = build_optimizer(self.student, config)
        self.state = DistillState(
            center=torch.zeros(encoder_config.out_dim, dtype=config.dtype),
            center_momentum=config.center_momentum,
            student_temp=config.student_temp,
        )
        if not config.shared_center:
            self.state.ref_center = torch.zeros(encoder_config.out_dim, dtype=config.dtype)
        self._sync_schedules()

    @property
    def step_count(self) -> int:
        return self.state.step

    def _sync_schedules(self) -> None:
        s, step = self.schedules, self.state.step
        self.state.teacher_temp = s.teacher_temp(step)
        self.state.ema_momentum = s.ema_momentum(step)
        self.state.lr = s.lr(step)

    def batch_indices(self, step: int) -> list[int]:
        c = self.config
        epoch, k = divmod(step, c.steps_per_epoch)
        perm = np.random.default_rng([c.seed, STREAM_PERM, epoch]).permutation(c.n_train_scenes)
        return perm[k * c.batch_size : (k + 1) * c.batch_size].tolist()

    def make_batch(self, step: int) -> Batch:
        idx = self.batch_indices(step)
        return prepare_batch([self.scenes[i] for i in idx], idx, self.config, self.encoder_config.image_res, step)

    def train_step(self) -> StepReport:
        c, state = self.config, self.state
        step = state.step
        self._sync_schedules()
        batch = self.make_batch(step)
        bt = BatchTensors.from_batch(batch, c.dtype)

        self.student.train()
        try:
            targets = teacher_forward(self.teacher, bt)
            losses = student_losses(self.student, bt, targets, state, c.alpha)
        except FloatingPointError as exc:
            raise DivergenceError(step, str(exc)) from exc
        if not torch.isfinite(losses.total):
            raise DivergenceError(step, f"non-finite loss {float(losses.total.detach())}")

        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.student.parameters(), c.clip_grad))
        wd = self.schedules.weight_decay(step)
        for i, group in enumerate(self.optimizer.param_groups):
            group["lr"] = state.lr
            group["weight_decay"] = wd if i == 0 else 0.0
        self.optimizer.step()

        ema_update(self.teacher, self.student, state.ema_momentum)
        with torch.no_grad():
            # Entropy of the batch-averaged teacher distribution: near 0 only when
            # every image lands on the same prototype.
            cls_logits = torch.cat([o.cls_logits for o in targets.outputs])
            t_entropy = float(entropy(teacher_probs(cls_logits, state.center, state.teacher_temp).mean(dim=0)))
            if state.ref_center is None:
                state.center = update_center(state.center, teacher_logit_rows(targets, bt), state.center_momentum)
            else:
                state.center = update_center(state.center, cls_logits, state.center_momentum)
                ref_rows = teacher_logit_rows(targets, bt, cls=False)
                if len(ref_rows):
                    state.ref_center = update_center(state.ref_center, ref_rows, state.center_momentum)

        report = StepReport(
            step=step,
            epoch=step // c.steps_per_epoch,
            loss_cls=losses.cls.item(),
            loss_ref=losses.ref.item(),
            total=losses.total.item(),
            teacher_entropy=t_entropy,
            grad_norm=grad_norm,
            lr=state.lr,
            ema_momentum=state.ema_momentum,
        )
        state.step = step + 1
        self._sync_schedules()
        return report

    def run(self, steps: int | None = None, callback=None) -> list[StepReport]:
        end = self.config.total_steps if steps is None else min(self.state.step + steps, self.config.total_steps)
        reports = []
        while self.state.step < end:
            rep = self.train_step()
            reports.append(rep)
            if callback is not None:
                callback(rep)
        return reports

