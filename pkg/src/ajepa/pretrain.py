"""Latent-space masked-prediction training loop.

Each step builds one mask plan per sample, encodes the visible context,
computes full-grid target features once per sample (no gradient), predicts
every target set from the context, and averages the per-mask mean squared
error. The context encoder and predictor take a decoupled-weight-decay
adaptive-moment step; the target encoder then moves by EMA only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MelCache
from .errors import CheckpointError, ConfigError, ShapeError
from .maskgen import MODE_TF, CurriculumSchedule, MaskPlan, SamplerConfig, build_mask_plan, curriculum_f
from .model import (
    Encoder,
    ModelConfig,
    Predictor,
    ema_update,
    init_parameters,
    load_module_arrays,
    module_arrays,
    position_tables,
    read_checkpoint,
    write_checkpoint,
)
from .records import MetricsRecord
from .spectro import FrontendConfig
from .streams import stream

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class OptimizerConfig:
    """Desk-scale defaults; full scale ran lr 2e-4 at batch 512 for 24 epochs."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    ema_momentum: tuple[float, float] = (0.996, 1.0)  # ramped linearly over training
    target_norm: str = "layernorm"  # or "none"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be below total_steps")
        if self.target_norm not in ("layernorm", "none"):
            raise ConfigError("target_norm must be 'layernorm' or 'none'")
        if self.total_steps >= 2**24:
            raise ConfigError("total_steps must stay below 2**24 (checkpoint scalars)")


@dataclass
class TrainState:
    step: int
    encoder: Encoder
    target_encoder: Encoder
    predictor: Predictor
    opt_m: dict[str, torch.Tensor]
    opt_v: dict[str, torch.Tensor]
    schedule: CurriculumSchedule
    root_seed: int

    def trainable(self) -> dict[str, nn.Parameter]:
        named = {}
        for prefix, module in (("enc", self.encoder), ("pred", self.predictor)):
            for k, p in module.named_parameters():
                named[f"{prefix}.{k}"] = p
        return named


def init_train_state(
    model_cfg: ModelConfig,
    sched: CurriculumSchedule,
    root_seed: int,
) -> TrainState:
    """Fresh networks with the target encoder starting as a copy of the
    context encoder, and zeroed optimizer moments."""
    rng = stream(root_seed, "init")
    encoder = Encoder(model_cfg)
    predictor = Predictor(model_cfg)
    init_parameters(encoder, rng)
    init_parameters(predictor, rng)
    target_encoder = Encoder(model_cfg)
    target_encoder.load_state_dict(encoder.state_dict())
    for p in target_encoder.parameters():
        p.requires_grad_(False)
    state = TrainState(
        step=0,
        encoder=encoder,
        target_encoder=target_encoder,
        predictor=predictor,
        opt_m={},
        opt_v={},
        schedule=sched,
        root_seed=int(root_seed),
    )
    state.opt_m = {k: torch.zeros_like(p) for k, p in state.trainable().items()}
    state.opt_v = {k: torch.zeros_like(p) for k, p in state.trainable().items()}
    return state


# ---------------------------------------------------------------------------
# Objective and schedules
# ---------------------------------------------------------------------------

def jepa_loss(preds: list[torch.Tensor], targets: list[torch.Tensor]) -> torch.Tensor:
    """Mean over masks of the mean squared feature distance.

    Targets are the (already normalized) target-encoder features at target
    positions, computed once per sample and sliced per mask.
    """
    if not preds:
        raise ConfigError("need at least one target mask")
    if len(preds) != len(targets):
        raise ShapeError("preds and targets differ in mask count")
    per_mask = []
    for p, t in zip(preds, targets):
        if p.shape != t.shape:
            raise ShapeError(f"per-mask shape mismatch: {p.shape} vs {t.shape}")
        per_mask.append(((p - t) ** 2).mean())
    return torch.stack(per_mask).mean()


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at total_steps."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def ema_momentum_at(step: int, cfg: OptimizerConfig) -> float:
    m0, m1 = cfg.ema_momentum
    return m0 + (m1 - m0) * min(1.0, step / cfg.total_steps)


def adamw_step(
    params: dict[str, nn.Parameter],
    opt_m: dict[str, torch.Tensor],
    opt_v: dict[str, torch.Tensor],
    t: int,
    lr: float,
    cfg: OptimizerConfig,
) -> None:
    """One decoupled-weight-decay adaptive-moment update; decay applies to
    matrices only (biases, norm gains and the mask token are exempt)."""
    beta1, beta2 = cfg.betas
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = opt_m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = opt_v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(ADAM_EPS), value=-lr)
            if p.ndim >= 2:
                p.add_(p, alpha=-lr * cfg.weight_decay)


# ---------------------------------------------------------------------------
# Batched forward
# ---------------------------------------------------------------------------

def compute_batch_loss(
    encoder: Encoder,
    target_encoder: Encoder,
    predictor: Predictor,
    grids: torch.Tensor,
    plans: list[MaskPlan],
    pos_enc: torch.Tensor,
    pos_pred: torch.Tensor,
    target_norm: str = "layernorm",
) -> torch.Tensor:
    """Loss over a batch of full patch grids and their mask plans.

    Contexts and target sets have ragged lengths, so they are padded to a
    common length and the pads are excluded as attention keys; excluded
    pads produce outputs that are never read, which makes the padded batch
    equal (to float precision) to looping sample by sample.
    """
    b, n_patches, _ = grids.shape
    if len(plans) != b:
        raise ShapeError("one mask plan per sample required")
    device = grids.device

    with torch.no_grad():
        tgt_all = target_encoder(grids, pos_enc.unsqueeze(0))
        if target_norm == "layernorm":
            tgt_all = F.layer_norm(tgt_all, (tgt_all.shape[-1],))

    n_ctx = max(len(p.context) for p in plans)
    ctx_idx = torch.zeros(b, n_ctx, dtype=torch.long, device=device)
    ctx_pad = torch.ones(b, n_ctx, dtype=torch.bool, device=device)
    for i, plan in enumerate(plans):
        k = len(plan.context)
        ctx_idx[i, :k] = torch.from_numpy(plan.context.as_array())
        ctx_pad[i, :k] = False
    rows = torch.arange(b, device=device)[:, None]
    ctx_feats = encoder(grids[rows, ctx_idx], pos_enc[ctx_idx], excluded_keys=ctx_pad)

    pair_sample = []
    pair_targets = []
    for i, plan in enumerate(plans):
        for tset in plan.targets:
            pair_sample.append(i)
            pair_targets.append(tset.as_array())
    n_pairs = len(pair_sample)
    n_tgt = max(len(t) for t in pair_targets)
    tgt_idx = torch.zeros(n_pairs, n_tgt, dtype=torch.long, device=device)
    tgt_pad = torch.ones(n_pairs, n_tgt, dtype=torch.bool, device=device)
    for j, t in enumerate(pair_targets):
        tgt_idx[j, : len(t)] = torch.from_numpy(t)
        tgt_pad[j, : len(t)] = False
    sample = torch.as_tensor(pair_sample, dtype=torch.long, device=device)

    preds = predictor(
        ctx_feats[sample],
        pos_pred[ctx_idx][sample],
        pos_pred[tgt_idx],
        excluded_keys=torch.cat([ctx_pad[sample], tgt_pad], dim=1),
    )
    tgt_feats = tgt_all[sample[:, None], tgt_idx]
    real = (~tgt_pad).unsqueeze(-1)
    per_pair = ((preds - tgt_feats) ** 2 * real).sum(dim=(1, 2))
    per_pair = per_pair / (real.sum(dim=(1, 2)) * preds.shape[-1])

    per_sample = torch.zeros(b, dtype=per_pair.dtype, device=device)
    counts = torch.zeros(b, dtype=per_pair.dtype, device=device)
    per_sample.index_add_(0, sample, per_pair)
    counts.index_add_(0, sample, torch.ones_like(per_pair))
    return (per_sample / counts).mean()


def training_step(
    state: TrainState,
    grids: torch.Tensor,
    opt_cfg: OptimizerConfig,
    sampler_cfg: SamplerConfig,
    grid_shape: tuple[int, int],
    pos_enc: torch.Tensor,
    pos_pred: torch.Tensor,
) -> tuple[float, float]:
    """One optimization step over a batch of full patch grids.

    Returns (batch loss, fraction of samples that drew tf mode).
    """
    if grids.shape[0] == 0:
        raise ConfigError("batch must be non-empty")
    s = state.step
    plans = [
        build_mask_plan(
            grid_shape, sampler_cfg, s, state.schedule,
            stream(state.root_seed, "masks", s, i),
        )
        for i in range(grids.shape[0])
    ]
    loss = compute_batch_loss(
        state.encoder, state.target_encoder, state.predictor,
        grids, plans, pos_enc, pos_pred, opt_cfg.target_norm,
    )
    params = state.trainable()
    for p in params.values():
        p.grad = None
    loss.backward()
    adamw_step(params, state.opt_m, state.opt_v, s + 1, lr_at(s, opt_cfg), opt_cfg)
    ema_update(state.target_encoder, state.encoder, ema_momentum_at(s, opt_cfg))
    state.step += 1
    tf_fraction = sum(p.mode == MODE_TF for p in plans) / len(plans)
    return float(loss.detach()), tf_fraction


# ---------------------------------------------------------------------------
# Loop and state persistence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainSetup:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: CurriculumSchedule | None = None

    def __post_init__(self):
        ph, pw = self.frontend.patch
        if self.model.patch_len != ph * pw:
            raise ConfigError(
                f"model patch_len {self.model.patch_len} != frontend patch area {ph * pw}"
            )

    def resolved_schedule(self) -> CurriculumSchedule:
        if self.schedule is not None:
            return self.schedule
        return CurriculumSchedule(total_steps=self.optimizer.total_steps)


def pretrain_loop(
    wav_paths: list,
    setup: PretrainSetup,
    root_seed: int,
    state: TrainState | None = None,
    epochs: int | None = None,
    out_dir=None,
    ckpt_interval: int = 0,
    log_every: int = 0,
) -> tuple[TrainState, MetricsRecord]:
    """Run (or resume) pretraining over a directory of clips.

    Shuffling is re-derived per epoch from the root seed, and every random
    draw is keyed by step or epoch indices, so resuming from a checkpoint
    reproduces the uninterrupted run exactly. Stops at total_steps, or
    earlier after ``epochs`` epochs.
    """
    if not wav_paths:
        raise ConfigError("pretraining dataset is empty")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    opt = setup.optimizer
    sched = setup.resolved_schedule()
    if state is None:
        state = init_train_state(setup.model, sched, root_seed)
    cache = MelCache(setup.frontend)
    grid_shape = setup.frontend.grid
    pos_enc, pos_pred = position_tables(grid_shape, setup.model)
    metrics = MetricsRecord(("step", "loss", "f_s", "mode_tf_fraction", "lr"))

    batch = min(opt.batch_size, len(wav_paths))
    steps_per_epoch = len(wav_paths) // batch
    end_step = opt.total_steps
    if epochs is not None:
        end_step = min(end_step, epochs * steps_per_epoch)

    perm_epoch, perm = -1, None
    while state.step < end_step:
        epoch, pos = divmod(state.step, steps_per_epoch)
        if epoch != perm_epoch:
            perm = stream(root_seed, "data", epoch).permutation(len(wav_paths))
            perm_epoch = epoch
        chosen = perm[pos * batch : (pos + 1) * batch]
        tokens = np.stack(
            [
                cache.pretrain_tokens(
                    wav_paths[int(i)], stream(root_seed, "aug", epoch, int(i))
                )
                for i in chosen
            ]
        )
        grids = torch.from_numpy(tokens).to(torch.float32)
        s = state.step
        loss, tf_fraction = training_step(
            state, grids, opt, setup.sampler, grid_shape, pos_enc, pos_pred
        )
        metrics.append(
            step=s,
            loss=loss,
            f_s=curriculum_f(s, sched),
            mode_tf_fraction=tf_fraction,
            lr=lr_at(s, opt),
        )
        if log_every and (s % log_every == 0 or state.step == end_step):
            print(f"step {s:6d}  loss {loss:.4f}  f(s) {curriculum_f(s, sched):.4f}")
        if out_dir is not None and ckpt_interval and state.step % ckpt_interval == 0:
            save_train_state(
                Path(out_dir) / f"checkpoint_step{state.step:06d}.ajepa", state
            )
    if out_dir is not None:
        save_train_state(Path(out_dir) / "checkpoint_final.ajepa", state)
        metrics.write_csv(Path(out_dir) / "pretrain_loss.csv")
    return state, metrics


def save_train_state(path, state: TrainState) -> None:
    arrays = {}
    arrays.update(module_arrays(state.encoder, "enc"))
    arrays.update(module_arrays(state.target_encoder, "tgt"))
    arrays.update(module_arrays(state.predictor, "pred"))
    for name, t in state.opt_m.items():
        arrays[f"opt_m.{name}"] = t.detach().cpu().numpy()
    for name, t in state.opt_v.items():
        arrays[f"opt_v.{name}"] = t.detach().cpu().numpy()
    seed = state.root_seed & 0xFFFFFFFF
    arrays["meta.step"] = np.array(float(state.step), dtype=np.float32)
    arrays["meta.seed_lo"] = np.array(float(seed & 0xFFFF), dtype=np.float32)
    arrays["meta.seed_hi"] = np.array(float(seed >> 16), dtype=np.float32)
    write_checkpoint(path, arrays)


def load_train_state(
    path, model_cfg: ModelConfig, sched: CurriculumSchedule
) -> TrainState:
    arrays = read_checkpoint(path)
    for key in ("meta.step", "meta.seed_lo", "meta.seed_hi"):
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing {key}; not a training state")
    encoder = Encoder(model_cfg)
    target_encoder = Encoder(model_cfg)
    predictor = Predictor(model_cfg)
    load_module_arrays(encoder, arrays, "enc")
    load_module_arrays(target_encoder, arrays, "tgt")
    load_module_arrays(predictor, arrays, "pred")
    for p in target_encoder.parameters():
        p.requires_grad_(False)
    seed = (int(arrays["meta.seed_hi"]) << 16) | int(arrays["meta.seed_lo"])
    state = TrainState(
        step=int(arrays["meta.step"]),
        encoder=encoder,
        target_encoder=target_encoder,
        predictor=predictor,
        opt_m={},
        opt_v={},
        schedule=sched,
        root_seed=seed,
    )
    for name, p in state.trainable().items():
        for store, tag in ((state.opt_m, "opt_m"), (state.opt_v, "opt_v")):
            key = f"{tag}.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing {key}")
            if arrays[key].shape != tuple(p.shape):
                raise CheckpointError(f"optimizer moment {key} has wrong shape")
            store[name] = torch.from_numpy(arrays[key].copy())
    return state
