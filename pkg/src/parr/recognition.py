"""Multi-label recognition: loss, thresholding, metrics, training loop.

Metrics follow the usual person-attribute protocol: label-based mean accuracy
(average of positive and negative recall per attribute) and example-based F1.
Empty-support conventions are fixed explicitly so results are deterministic:
an attribute with no positives (or no negatives) contributes 1.0 for that
half-term, and an example with an empty prediction/label set scores 1 only
when both sets are empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import TrainingDivergedError

PROB_EPS = 1e-7


def bce_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over every element.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs, so exact
    0/1 predictions stay finite.
    """
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def predict(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize probabilities; ties (== threshold) count as positive."""
    return (np.asarray(probs) >= threshold).astype(np.int64)


def _as_2d(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.atleast_2d(np.asarray(preds, dtype=np.int64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: preds {p.shape} vs labels {y.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, y


def metric_mean_accuracy(preds, labels) -> tuple[float, np.ndarray]:
    """Label-based mA: mean over attributes of (pos recall + neg recall)/2.

    Returns (mA, per-attribute accuracies).

    >>> ma, per = metric_mean_accuracy([[1, 0], [1, 1]], [[1, 0], [0, 1]])
    >>> per.tolist(), round(ma, 6)
    ([0.5, 1.0], 0.75)
    """
    p, y = _as_2d(preds, labels)
    n_pos = y.sum(axis=0)
    n_neg = (1 - y).sum(axis=0)
    tp = (p & y).sum(axis=0)
    tn = ((1 - p) & (1 - y)).sum(axis=0)
    pos_term = np.where(n_pos > 0, tp / np.maximum(n_pos, 1), 1.0)
    neg_term = np.where(n_neg > 0, tn / np.maximum(n_neg, 1), 1.0)
    per_attr = 0.5 * (pos_term + neg_term)
    return float(per_attr.mean()), per_attr


def metric_example_f1(preds, labels) -> float:
    """Example-based F1 from mean per-example precision and recall.

    >>> round(metric_example_f1([[1, 0], [1, 1]], [[1, 0], [0, 1]]), 3)
    0.857
    """
    p, y = _as_2d(preds, labels)
    inter = (p & y).sum(axis=1).astype(np.float64)
    n_pred = p.sum(axis=1)
    n_true = y.sum(axis=1)
    both_empty = (n_pred == 0) & (n_true == 0)
    prec_terms = np.where(
        n_pred > 0, inter / np.maximum(n_pred, 1), both_empty.astype(np.float64)
    )
    rec_terms = np.where(
        n_true > 0, inter / np.maximum(n_true, 1), both_empty.astype(np.float64)
    )
    precision = float(prec_terms.mean())
    recall = float(rec_terms.mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class ParTrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TrainState:
    """Everything needed to continue or reproduce a run."""

    step: int
    seed: int
    model: nn.Module
    optimizer: torch.optim.Optimizer

    def arrays(self) -> dict[str, np.ndarray]:
        """Model + optimizer moments as flat float32 arrays for archiving."""
        out = {
            name: t.detach().cpu().numpy().astype("<f4")
            for name, t in self.model.state_dict().items()
        }
        names = [n for n, _ in self.model.named_parameters()]
        params = dict(self.model.named_parameters())
        for name in names:
            slot = self.optimizer.state.get(params[name], {})
            for key, val in slot.items():
                if isinstance(val, torch.Tensor):
                    out[f"opt.{name}.{key}"] = (
                        val.detach().cpu().numpy().astype("<f4")
                    )
        return out


def _step_generator(seed: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + step) % (2**63 - 1))
    return g


def _batch_indices(n: int, batch_size: int, seed: int, step: int) -> torch.Tensor:
    """Seed-and-step addressed sampling: reproducible without carried state."""
    g = _step_generator(seed, step)
    return torch.randperm(n, generator=g)[: min(batch_size, n)]


def train_par(
    model: nn.Module,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ParTrainConfig,
    on_step=None,
) -> tuple[TrainState, list[float]]:
    """Mini-batch training with decoupled weight decay and cosine-decayed lr.

    Returns the final state and the per-step loss curve.  A non-finite loss
    aborts immediately rather than writing a poisoned checkpoint.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    images_t = torch.as_tensor(images, dtype=torch.float32)
    labels_t = torch.as_tensor(labels, dtype=torch.float32)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, total_steps)
    )
    model.train()
    curve: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            idx = _batch_indices(n, cfg.batch_size, cfg.seed, step)
            out = model(images_t[idx])
            loss = bce_loss(out.probs, labels_t[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} "
                    f"(lr={scheduler.get_last_lr()[0]:.3e})"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            curve.append(loss.item())
            step += 1
            if on_step is not None:
                on_step(step, curve[-1])
    return TrainState(step=step, seed=cfg.seed, model=model, optimizer=optimizer), curve


@torch.no_grad()
def evaluate_par(
    model: nn.Module, images: np.ndarray, labels: np.ndarray, batch_size: int = 64
) -> dict:
    """Threshold at 0.5 and report {mA, F1, per_attribute}."""
    model.eval()
    probs = predict_probs(model, images, batch_size)
    preds = predict(probs)
    y = np.asarray(labels, dtype=np.int64)
    ma, per_attr = metric_mean_accuracy(preds, y)
    f1 = metric_example_f1(preds, y)
    return {"mA": ma, "F1": f1, "per_attribute": per_attr.tolist()}


@torch.no_grad()
def predict_probs(
    model: nn.Module, images: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    model.eval()
    chunks = []
    images_t = torch.as_tensor(images, dtype=torch.float32)
    for start in range(0, images_t.shape[0], batch_size):
        out = model(images_t[start : start + batch_size])
        chunks.append(out.probs.cpu().numpy())
    return np.concatenate(chunks, axis=0)
