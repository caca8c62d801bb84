"""Evaluation metrics: reprojection error, AUROC, 1-NN label transfer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import Dataset


@dataclass
class MetricRecord:
    per_sample: np.ndarray
    mean: float
    std: float
    extras: dict = field(default_factory=dict)


def reprojection_error(x_gt: np.ndarray, x_hat: np.ndarray) -> MetricRecord:
    """Per-sample Euclidean norm over all pixels of (x_gt - x_hat)."""
    x_gt = np.asarray(x_gt, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_gt.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x_gt.shape} vs {x_hat.shape}")
    d = np.linalg.norm((x_gt - x_hat).reshape(x_gt.shape[0], -1), axis=1)
    return MetricRecord(per_sample=d, mean=float(d.mean()), std=float(d.std()))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group-average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores_normal: np.ndarray, scores_anomalous: np.ndarray) -> float:
    """P(random anomalous score > random normal score), ties counted 0.5.

    Computed exactly via the rank statistic (Mann-Whitney U).
    """
    a = np.asarray(scores_normal, dtype=np.float64).ravel()
    b = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty score arrays")
    ranks = _average_ranks(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def nn_classify_accuracy(source: Dataset, projected_target: np.ndarray,
                         target_labels: np.ndarray, chunk: int = 256) -> float:
    """1-NN label transfer: fraction of target samples whose nearest source
    image (Euclidean, pixel space) carries the same label. Ties break to the
    lowest source index."""
    tgt = np.asarray(projected_target, dtype=np.float64)
    if tgt.shape[1:] != source.images.shape[1:]:
        raise ValueError(f"resolution mismatch: target {tgt.shape[1:]} vs "
                         f"source {source.images.shape[1:]}")
    src = source.images.reshape(len(source), -1).astype(np.float64)
    tgt = tgt.reshape(tgt.shape[0], -1)
    labels = np.asarray(target_labels)
    src_sq = (src ** 2).sum(axis=1)
    correct = 0
    for i in range(0, tgt.shape[0], chunk):
        t = tgt[i:i + chunk]
        d2 = (t ** 2).sum(axis=1)[:, None] - 2.0 * t @ src.T + src_sq[None, :]
        nearest = d2.argmin(axis=1)  # argmin returns the lowest index on ties
        correct += int((source.labels[nearest] == labels[i:i + chunk]).sum())
    return correct / tgt.shape[0]
