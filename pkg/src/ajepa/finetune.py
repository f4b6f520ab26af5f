"""Downstream adaptation: regularized-masking forward, heads, metrics.

Regularized masking (RM) excludes a freshly sampled token subset from
attention-key participation in every encoder layer during training
forwards only; the excluded tokens remain as queries and in the mean
pool, so their outputs are contributed entirely by the other tokens.
Evaluation always runs the vanilla dense forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MelCache
from .errors import ConfigError, MetricError, ShapeError
from .model import (
    Encoder,
    ModelConfig,
    init_parameters,
    load_module_arrays,
    module_arrays,
    position_tables,
    read_checkpoint,
    write_checkpoint,
)
from .pretrain import OptimizerConfig, adamw_step, lr_at
from .records import MetricsRecord
from .spectro import FrontendConfig
from .streams import stream


@dataclass(frozen=True)
class RMConfig:
    ratio: float = 0.10
    active: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError("rm ratio must lie in [0, 1)")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 16
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    freeze_encoder: bool = False
    multi_label: bool = False


class ClassifierHead(nn.Module):
    """Linear map from pooled features to class logits."""

    def __init__(self, embed_dim: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(embed_dim, n_classes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


def sample_rm_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """floor(ratio * n) indices drawn uniformly without replacement, sorted."""
    k = int(math.floor(ratio * n_tokens))
    if k >= n_tokens:
        raise ConfigError(f"rm ratio {ratio} leaves no unmasked token")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(n_tokens, size=k, replace=False)).astype(np.int64)


def rm_forward(
    grids: torch.Tensor,
    encoder: Encoder,
    pos_enc: torch.Tensor,
    rm: RMConfig,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Full-grid forward with one shared RM key-exclusion set per sample,
    applied in every layer; mean pool over ALL tokens. With rm.active off
    (or ratio 0) this is exactly the dense forward. A single [T, patch]
    grid yields one [embed_dim] vector; a batch yields [B, embed_dim]."""
    single = grids.ndim == 2
    if single:
        grids = grids.unsqueeze(0)
    b, t, _ = grids.shape
    excluded = None
    if rm.active and rm.ratio > 0.0:
        if rng is None:
            raise ConfigError("rm forward with masking needs an rng")
        excluded = torch.zeros(b, t, dtype=torch.bool)
        for i in range(b):
            excluded[i, sample_rm_mask(t, rm.ratio, rng)] = True
    feats = encoder(grids, pos_enc.unsqueeze(0), excluded_keys=excluded)
    pooled = feats.mean(dim=1)
    return pooled.squeeze(0) if single else pooled


def classify(pooled: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    if pooled.shape[-1] != head.linear.in_features:
        raise ShapeError(
            f"pooled width {pooled.shape[-1]} != head width {head.linear.in_features}"
        )
    return head(pooled)


def classification_loss(
    logits: torch.Tensor, labels: torch.Tensor, multi_label: bool
) -> torch.Tensor:
    """Softmax cross-entropy, or per-class sigmoid BCE for multi-label."""
    if multi_label:
        return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metric_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 rate; for multi-hot labels a hit is argmax landing on a positive."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise MetricError("no items to evaluate")
    top1 = logits.argmax(axis=1)
    if labels.ndim == 1:
        return float((top1 == labels).mean())
    return float(labels[np.arange(len(top1)), top1].mean())


def metric_map(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes of non-interpolated average precision.

    AP per class averages the precision at each positive's rank in the
    score-descending ordering (ties broken by item index). Classes with no
    positive are skipped; if none remain, that is a metric error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ShapeError("scores and multi-hot labels must share shape [N, C]")
    aps = []
    for c in range(scores.shape[1]):
        positives = labels[:, c] > 0
        if not positives.any():
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        hits = positives[order]
        ranks = np.flatnonzero(hits) + 1
        precision_at = np.cumsum(hits)[hits.nonzero()] / ranks
        aps.append(precision_at.mean())
    if not aps:
        raise MetricError("no class has a positive example")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Fine-tuning and probing
# ---------------------------------------------------------------------------

def _grids_tensor(items, cache: MelCache) -> torch.Tensor:
    if not items:
        raise ConfigError("item list is empty")
    tokens = np.stack([cache.eval_tokens(p) for p, _ in items])
    return torch.from_numpy(tokens).to(torch.float32)


def _labels_tensor(items, n_classes: int, multi_label: bool) -> torch.Tensor:
    idx = torch.as_tensor([label for _, label in items], dtype=torch.long)
    if not multi_label:
        return idx
    return F.one_hot(idx, n_classes).to(torch.float32)


def evaluate(
    grids: torch.Tensor,
    labels: torch.Tensor,
    encoder: Encoder,
    head: ClassifierHead,
    pos_enc: torch.Tensor,
    batch_size: int = 64,
) -> tuple[float, float]:
    """Dense-forward accuracy and mAP; deterministic."""
    logits = []
    rm_off = RMConfig(ratio=0.0, active=False)
    with torch.no_grad():
        for i in range(0, grids.shape[0], batch_size):
            pooled = rm_forward(grids[i : i + batch_size], encoder, pos_enc, rm_off)
            logits.append(classify(pooled, head))
    logits = torch.cat(logits).numpy()
    labels_np = labels.numpy()
    onehot = labels_np if labels_np.ndim == 2 else np.eye(logits.shape[1])[labels_np]
    return metric_accuracy(logits, labels_np), metric_map(logits, onehot)


def load_encoder_checkpoint(path, model_cfg: ModelConfig) -> Encoder:
    """Load context-encoder weights from any checkpoint; the predictor and
    every other array are ignored (discarded after pretraining)."""
    arrays = read_checkpoint(path)
    encoder = Encoder(model_cfg)
    load_module_arrays(encoder, arrays, "enc")
    return encoder


def save_classifier_checkpoint(path, encoder: Encoder, head: ClassifierHead) -> None:
    arrays = module_arrays(encoder, "enc")
    arrays.update(module_arrays(head, "head"))
    write_checkpoint(path, arrays)


def load_classifier_checkpoint(
    path, model_cfg: ModelConfig, n_classes: int
) -> tuple[Encoder, ClassifierHead]:
    arrays = read_checkpoint(path)
    encoder = Encoder(model_cfg)
    head = ClassifierHead(model_cfg.embed_dim, n_classes)
    load_module_arrays(encoder, arrays, "enc")
    load_module_arrays(head, arrays, "head")
    return encoder, head


def finetune_loop(
    train_items,
    eval_items,
    encoder: Encoder,
    model_cfg: ModelConfig,
    frontend_cfg: FrontendConfig,
    ft_cfg: FinetuneConfig,
    rm: RMConfig,
    n_classes: int,
    root_seed: int,
) -> tuple[Encoder, ClassifierHead, MetricsRecord]:
    """Supervised training with RM active in training forwards only.

    With freeze_encoder the encoder receives no updates (linear probing
    through the full pipeline); otherwise encoder and head train jointly.
    """
    cache = MelCache(frontend_cfg)
    grids = _grids_tensor(train_items, cache)
    labels = _labels_tensor(train_items, n_classes, ft_cfg.multi_label)
    eval_grids = _grids_tensor(eval_items, cache)
    eval_labels = _labels_tensor(eval_items, n_classes, ft_cfg.multi_label)
    pos_enc, _ = position_tables(frontend_cfg.grid, model_cfg)

    head = ClassifierHead(model_cfg.embed_dim, n_classes)
    init_parameters(head, stream(root_seed, "head"))

    n = grids.shape[0]
    batch = min(ft_cfg.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    opt_cfg = OptimizerConfig(
        lr=ft_cfg.lr,
        betas=ft_cfg.betas,
        weight_decay=ft_cfg.weight_decay,
        warmup_steps=0,
        total_steps=max(1, ft_cfg.epochs * steps_per_epoch),
        batch_size=batch,
    )
    params = {f"head.{k}": p for k, p in head.named_parameters()}
    if ft_cfg.freeze_encoder:
        for p in encoder.parameters():
            p.requires_grad_(False)
    else:
        params.update({f"enc.{k}": p for k, p in encoder.named_parameters()})
    opt_m = {k: torch.zeros_like(p) for k, p in params.items()}
    opt_v = {k: torch.zeros_like(p) for k, p in params.items()}

    metrics = MetricsRecord(("epoch", "train_loss", "eval_accuracy", "eval_map"))
    step = 0
    for epoch in range(ft_cfg.epochs):
        perm = stream(root_seed, "data", epoch).permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            chosen = torch.from_numpy(perm[b * batch : (b + 1) * batch].copy())
            rng = stream(root_seed, "rm", step)
            pooled = rm_forward(grids[chosen], encoder, pos_enc, rm, rng)
            logits = classify(pooled, head)
            loss = classification_loss(logits, labels[chosen], ft_cfg.multi_label)
            for p in params.values():
                p.grad = None
            loss.backward()
            adamw_step(params, opt_m, opt_v, step + 1, lr_at(step, opt_cfg), opt_cfg)
            epoch_losses.append(float(loss.detach()))
            step += 1
        acc, ap = evaluate(eval_grids, eval_labels, encoder, head, pos_enc)
        metrics.append(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            eval_accuracy=acc,
            eval_map=ap,
        )
    return encoder, head, metrics


def linear_probe(
    train_items,
    eval_items,
    encoder: Encoder,
    model_cfg: ModelConfig,
    frontend_cfg: FrontendConfig,
    n_classes: int,
    root_seed: int,
    epochs: int = 300,
    lr: float = 1e-2,
) -> tuple[ClassifierHead, float, float]:
    """Train a linear head on frozen pooled features, extracted once.

    Returns (head, eval accuracy, eval mAP). Feature extraction uses the
    dense forward, so the probe measures representation quality directly.
    """
    cache = MelCache(frontend_cfg)
    pos_enc, _ = position_tables(frontend_cfg.grid, model_cfg)
    rm_off = RMConfig(ratio=0.0, active=False)

    def features(items):
        grids = _grids_tensor(items, cache)
        out = []
        with torch.no_grad():
            for i in range(0, grids.shape[0], 64):
                out.append(rm_forward(grids[i : i + 64], encoder, pos_enc, rm_off))
        return torch.cat(out)

    feats = features(train_items)
    labels = _labels_tensor(train_items, n_classes, multi_label=False)
    eval_feats = features(eval_items)
    eval_labels = _labels_tensor(eval_items, n_classes, multi_label=False)

    head = ClassifierHead(model_cfg.embed_dim, n_classes)
    init_parameters(head, stream(root_seed, "head"))
    params = {f"head.{k}": p for k, p in head.named_parameters()}
    opt_cfg = OptimizerConfig(
        lr=lr, weight_decay=0.0, warmup_steps=0, total_steps=epochs, batch_size=1
    )
    opt_m = {k: torch.zeros_like(p) for k, p in params.items()}
    opt_v = {k: torch.zeros_like(p) for k, p in params.items()}
    for step in range(epochs):
        logits = classify(feats, head)
        loss = classification_loss(logits, labels, multi_label=False)
        for p in params.values():
            p.grad = None
        loss.backward()
        adamw_step(params, opt_m, opt_v, step + 1, lr_at(step, opt_cfg), opt_cfg)

    with torch.no_grad():
        eval_logits = classify(eval_feats, head).numpy()
    onehot = np.eye(n_classes)[eval_labels.numpy()]
    acc = metric_accuracy(eval_logits, eval_labels.numpy())
    ap = metric_map(eval_logits, onehot)
    return head, acc, ap
