"""Downstream segmentation: pre-training and freezing the segmenter, imitation
targets, and corpus-level mIoU / pixel accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import LabeledScene, stack
from .nets import Network, build_segmenter

log = logging.getLogger(__name__)

MIN_PRETRAIN_ACCURACY = 90.0


class ConvergenceError(RuntimeError):
    pass


class FrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskMetrics:
    miou: float
    accuracy: float
    per_class_iou: tuple[float | None, ...] = field(default=())


class FrozenSegmenter:
    def __init__(self, net: Network, m: int, val_metrics: TaskMetrics | None = None):
        if not net.frozen:
            net.freeze()
        self.net = net
        self.m = m
        self.train_digest = net.digest()
        self.val_metrics = val_metrics

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def digest(self) -> str:
        return self.net.digest()

    def verify(self) -> None:
        if self.net.digest() != self.train_digest:
            raise FrozenError("segmenter parameters changed after freezing")

    @property
    def dtype(self):
        return self.net.parameters()[0].dtype


def confusion(pred: np.ndarray, gt: np.ndarray, m: int) -> np.ndarray:
    """m x m counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= m):
            raise ValueError(f"label outside [0, {m})")
    flat = gt.astype(np.int64).reshape(-1) * m + pred.astype(np.int64).reshape(-1)
    return np.bincount(flat, minlength=m * m).reshape(m, m)


def metrics_from_confusion(conf: np.ndarray) -> TaskMetrics:
    conf = np.asarray(conf, dtype=np.int64)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    per_class = tuple(float(i / u) if u > 0 else None for i, u in zip(inter, union))
    present = [v for v in per_class if v is not None]
    total = conf.sum()
    miou = 100.0 * float(np.mean(present)) if present else 0.0
    acc = 100.0 * float(inter.sum() / total) if total else 0.0
    return TaskMetrics(miou=miou, accuracy=acc, per_class_iou=per_class)


def metrics(pred: np.ndarray, gt: np.ndarray, m: int) -> TaskMetrics:
    return metrics_from_confusion(confusion(pred, gt, m))


def segment(F: FrozenSegmenter, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=F.dtype))
    return ad.softmax_channels(F(x))


def imitation_target(F: FrozenSegmenter, x) -> Tensor:
    return ad.sg(segment(F, x))


def hard_labels(S) -> np.ndarray:
    probs = S.data if isinstance(S, Tensor) else np.asarray(S)
    return np.argmax(probs, axis=-1)


def predict_labels(F: FrozenSegmenter, images: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch):
        out.append(hard_labels(F(Tensor(images[s:s + batch].astype(F.dtype)))))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def pretrain_segmenter(train: list[LabeledScene], val: list[LabeledScene], m: int,
                       epochs: int = 15, seed: int = 0, lr: float = 3e-3, batch: int = 8,
                       dtype=np.float32) -> FrozenSegmenter:
    """Fit the segmenter to ground-truth labels with cross-entropy, then freeze it.

    Raises ConvergenceError if validation pixel accuracy stays below 90%.
    """
    if not train:
        raise ValueError("segmenter pre-training needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    net = build_segmenter(m, rng, dtype)
    opt = ad.Adam(net.parameters(), lr=lr)
    images, labels = stack(train, dtype)
    eye = np.eye(m, dtype=dtype)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for s in range(0, len(order), batch):
            sel = order[s:s + batch]
            logits = net(Tensor(images[sel]))
            probs = ad.softmax_channels(logits)
            picked = ad.sum(probs * eye[labels[sel]], axis=-1)
            loss = -ad.mean(ad.log(picked + 1e-8), axis=(0, 1, 2))
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.debug("segmenter epoch %d loss %.4f", epoch, loss.item())

    eval_scenes = val if val else train
    vimg, vlab = stack(eval_scenes, dtype)
    net.freeze()
    F = FrozenSegmenter(net, m)
    result = metrics(predict_labels(F, vimg), vlab, m)
    F.val_metrics = result
    if result.accuracy < MIN_PRETRAIN_ACCURACY:
        raise ConvergenceError(
            f"segmenter reached {result.accuracy:.2f}% pixel accuracy, need {MIN_PRETRAIN_ACCURACY}%")
    return F
