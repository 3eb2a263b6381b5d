"""Frozen-feature evaluation: weighted k-NN, linear-probe segmentation, attention maps."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .encoder import VisionTransformer
from .geometry import GLOBAL, ViewSpec
from .scenes import Scene, crop_resize, crop_resize_mask


@dataclass(frozen=True)
class EvalConfig:
    n_bank: int = 1000
    n_test: int = 600
    k: int = 20
    knn_temperature: float = 0.07
    probe_epochs: int = 50
    probe_lr: float = 1e-3
    probe_batch: int = 64
    probe_seed: int = 0
    batch_size: int = 128


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- features ------------------------------------------------------------


def full_view(scene: Scene, resolution: int) -> ViewSpec:
    h, w = scene.mask.shape
    return ViewSpec(box=(0.0, 0.0, float(w), float(h)), flip=False, out_resolution=resolution, kind=GLOBAL)


def render_full(scenes: list[Scene], resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Whole-scene images ``(n, R, R, 3)`` and nearest-resampled masks ``(n, R, R)``."""
    imgs = np.empty((len(scenes), resolution, resolution, 3), dtype=np.float32)
    masks = np.empty((len(scenes), resolution, resolution), dtype=np.int64)
    for i, s in enumerate(scenes):
        spec = full_view(s, resolution)
        imgs[i] = crop_resize(s.image, spec).pixels
        masks[i] = crop_resize_mask(s.mask, spec)
    return imgs, masks


@torch.no_grad()
def extract_features(encoder: VisionTransformer, images: np.ndarray, batch_size: int = 128) -> tuple[Tensor, Tensor]:
    """Class features ``(n, D)`` and patch features ``(n, N, D)`` with no reference tokens."""
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    cls, patches = [], []
    for start in range(0, len(images), batch_size):
        out = encoder(torch.from_numpy(images[start : start + batch_size]).to(dtype), with_head=False)
        cls.append(out.cls_feat)
        patches.append(out.patch_feats)
    encoder.train(was_training)
    return torch.cat(cls), torch.cat(patches)


# --- weighted k-NN ---------------------------------------------------------


@dataclass
class FeatureBank:
    features: np.ndarray  # (n, D), unit rows
    labels: np.ndarray  # (n,)

    @classmethod
    def build(cls, features, labels) -> "FeatureBank":
        f = np.asarray(features, dtype=np.float64)
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        return cls(features=f / np.maximum(norms, 1e-12), labels=np.asarray(labels, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)


def knn_predict(queries, bank: FeatureBank, k: int = 20, temperature: float = 0.07) -> np.ndarray:
    """Cosine top-k vote, each neighbour weighted by ``exp(sim / temperature)``.

    Ties go to the smallest label.
    """
    if len(bank) == 0:
        raise ValueError("empty feature bank")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    k = max(1, min(k, len(bank)))
    sims = q @ bank.features.T
    # Stable sort keeps the retrieval deterministic when similarities tie.
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, order, axis=1)
    top_labels = bank.labels[order]
    n_labels = int(bank.labels.max()) + 1
    votes = np.zeros((len(q), n_labels))
    weights = np.exp(top_sims / temperature)
    for j in range(k):
        np.add.at(votes, (np.arange(len(q)), top_labels[:, j]), weights[:, j])
    return votes.argmax(axis=1)


def knn_classify(query, bank: FeatureBank, k: int = 20, temperature: float = 0.07) -> int:
    return int(knn_predict(query, bank, k, temperature)[0])


# --- linear probe segmentation -------------------------------------------


def patch_labels(masks: np.ndarray, patch_size: int, num_classes: int) -> np.ndarray:
    """Majority pixel label under each patch, ``(n, G*G)``; ties go to the smaller label."""
    n, h, w = masks.shape
    g = h // patch_size
    blocks = masks.reshape(n, g, patch_size, g, patch_size).transpose(0, 1, 3, 2, 4).reshape(n * g * g, -1)
    counts = np.zeros((blocks.shape[0], num_classes), dtype=np.int64)
    for c in range(num_classes):
        counts[:, c] = (blocks == c).sum(axis=1)
    return counts.argmax(axis=1).reshape(n, g * g)


class SegProbe(nn.Module):
    """Per-patch linear classifier, i.e. a 1x1 convolution over the patch grid."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(dim, num_classes)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)

    @torch.no_grad()
    def predict(self, feats: Tensor) -> Tensor:
        return self(feats.to(self.linear.weight.dtype)).argmax(dim=-1)


def train_probe(
    features: Tensor,
    labels,
    num_classes: int,
    epochs: int = 50,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> SegProbe:
    """Softmax cross-entropy on frozen ``(n, N, D)`` patch features; batches are images."""
    feats = features.detach()
    targets = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n = feats.shape[0]
    probe = SegProbe(feats.shape[-1], num_classes).to(feats.dtype)
    if epochs <= 0:
        return probe
    opt = torch.optim.Adam(probe.parameters(), lr=lr, foreach=False)
    iters_per_epoch = math.ceil(n / batch_size)
    total = epochs * iters_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: 0.5 * (1 + math.cos(math.pi * it / total)))
    rng = np.random.default_rng(seed)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(epochs):
        perm = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            logits = probe(feats[idx]).reshape(-1, num_classes)
            loss = loss_fn(logits, targets[idx].reshape(-1))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    return probe


@dataclass
class MiouReport:
    iou: dict[int, float]  # only classes present in prediction or truth
    miou: float
    pixel_acc: float


def miou_from_labels(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> MiouReport:
    pred = np.asarray(pred).ravel().astype(np.int64)
    truth = np.asarray(truth).ravel().astype(np.int64)
    conf = np.bincount(truth * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    iou = {}
    for c in range(num_classes):
        denom = tp[c] + fp[c] + fn[c]
        if denom > 0:
            iou[c] = float(tp[c] / denom)
    miou = float(np.mean(list(iou.values()))) if iou else 0.0
    return MiouReport(iou=iou, miou=miou, pixel_acc=float(tp.sum() / max(conf.sum(), 1)))


def upsample_patches(pred: np.ndarray, patch_size: int) -> np.ndarray:
    """Nearest-neighbour upsampling of ``(n, G, G)`` patch labels to pixels."""
    return np.repeat(np.repeat(pred, patch_size, axis=1), patch_size, axis=2)


def evaluate_miou(probe: SegProbe, features: Tensor, masks: np.ndarray, patch_size: int, num_classes: int) -> MiouReport:
    n, npatch, _ = features.shape
    g = int(round(math.sqrt(npatch)))
    pred = probe.predict(features).reshape(n, g, g).numpy()
    return miou_from_labels(upsample_patches(pred, patch_size), masks, num_classes)


# --- attention maps --------------------------------------------------------


def attention_maps(encoder: VisionTransformer, image: np.ndarray) -> np.ndarray:
    """Class-token attention over patches in the last block, ``(heads, G, G)``."""
    dtype = next(encoder.parameters()).dtype
    px = torch.from_numpy(np.asarray(image, dtype=np.float32)[None]).to(dtype)
    attn = encoder.last_attention(px)[0]  # (heads, T, T)
    g = image.shape[0] // encoder.config.patch_size
    return attn[:, 0, 1 : 1 + g * g].reshape(-1, g, g).numpy()


# --- full protocol -------------------------------------------------------


@dataclass
class EvalReport:
    knn_acc: float
    miou: float
    iou: dict[int, float]
    pixel_acc: float


def knn_accuracy(
    encoder: VisionTransformer, bank_scenes: list[Scene], test_scenes: list[Scene], config: EvalConfig = EvalConfig()
) -> float:
    res = encoder.config.image_res
    bank_imgs, _ = render_full(bank_scenes, res)
    test_imgs, _ = render_full(test_scenes, res)
    bank_cls, _ = extract_features(encoder, bank_imgs, config.batch_size)
    test_cls, _ = extract_features(encoder, test_imgs, config.batch_size)
    bank = FeatureBank.build(bank_cls.double().numpy(), [s.dominant_class() for s in bank_scenes])
    pred = knn_predict(test_cls.double().numpy(), bank, config.k, config.knn_temperature)
    truth = np.array([s.dominant_class() for s in test_scenes])
    return float((pred == truth).mean())


def segmentation_miou(
    encoder: VisionTransformer,
    train_scenes: list[Scene],
    test_scenes: list[Scene],
    num_classes: int,
    config: EvalConfig = EvalConfig(),
) -> MiouReport:
    res, p = encoder.config.image_res, encoder.config.patch_size
    train_imgs, train_masks = render_full(train_scenes, res)
    test_imgs, test_masks = render_full(test_scenes, res)
    _, train_feats = extract_features(encoder, train_imgs, config.batch_size)
    _, test_feats = extract_features(encoder, test_imgs, config.batch_size)
    probe = train_probe(
        train_feats,
        patch_labels(train_masks, p, num_classes),
        num_classes,
        epochs=config.probe_epochs,
        lr=config.probe_lr,
        batch_size=config.probe_batch,
        seed=config.probe_seed,
    )
    return evaluate_miou(probe, test_feats, test_masks, p, num_classes)


def evaluate_encoder(
    encoder: VisionTransformer,
    bank_scenes: list[Scene],
    test_scenes: list[Scene],
    num_classes: int,
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    acc = knn_accuracy(encoder, bank_scenes, test_scenes, config)
    seg = segmentation_miou(encoder, bank_scenes, test_scenes, num_classes, config)
    return EvalReport(knn_acc=acc, miou=seg.miou, iou=seg.iou, pixel_acc=seg.pixel_acc)
