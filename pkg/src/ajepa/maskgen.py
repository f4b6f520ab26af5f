"""Curriculum mask sampling over the patch grid.

A mask plan holds one context index set and several target index sets.
Early in training targets are sampled as random blocks; late in training
they are small blocks whose whole time rows and frequency columns are
additionally withheld from the context (time-frequency aware masking).
The per-step choice between the two is Bernoulli with probability given
by a progressive schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SamplingError, UnsatisfiableMaskError

MODE_BLOCK = "block"
MODE_TF = "time_frequency"


@dataclass(frozen=True)
class MaskIndexSet:
    """Strictly increasing patch indices into the raster-ordered grid."""

    indices: tuple[int, ...]
    grid: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        n = rows * cols
        prev = -1
        for i in self.indices:
            if not prev < i < n:
                raise ConfigError(
                    f"indices must be strictly increasing and < {n}"
                )
            prev = i

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


@dataclass(frozen=True)
class SamplerConfig:
    n_targets_block: int = 4
    block_scale: tuple[float, float] = (0.15, 0.20)
    block_aspect: tuple[float, float] = (0.75, 1.5)
    n_targets_tf: int = 3
    tf_scale: tuple[float, float] = (0.05, 0.075)
    context_scale: tuple[float, float] = (0.85, 1.0)
    context_aspect: float = 1.0
    min_ratio: float = 0.35
    max_tries: int = 20
    plan_retries: int = 10

    def __post_init__(self):
        for lo, hi in (self.block_scale, self.tf_scale, self.context_scale):
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigError("scale ranges must be non-empty and within (0, 1]")
        if self.block_aspect[0] > self.block_aspect[1]:
            raise ConfigError("aspect range must be non-empty")
        if not 0.0 < self.min_ratio < 1.0:
            raise ConfigError("min_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Progressive function parameters; ``kind`` selects the shape."""

    total_steps: int
    c0: float = 0.01
    kind: str = "sqrt"

    _KINDS = ("sqrt", "linear", "step", "constant", "reversed")

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if not 0.0 < self.c0 < 1.0:
            raise ConfigError("c0 must lie in (0, 1)")
        if self.kind not in self._KINDS:
            raise ConfigError(f"kind must be one of {self._KINDS}")


@dataclass(frozen=True)
class MaskPlan:
    context: MaskIndexSet
    targets: tuple[MaskIndexSet, ...]
    mode: str

    def __post_init__(self):
        if len(self.context) == 0:
            raise ConfigError("context must be non-empty")
        ctx = set(self.context.indices)
        for t in self.targets:
            if len(t) == 0:
                raise ConfigError("every target must be non-empty")
            if ctx & set(t.indices):
                raise ConfigError("context overlaps a target set")


# ---------------------------------------------------------------------------
# Curriculum schedule
# ---------------------------------------------------------------------------

def curriculum_f(s: int, sched: CurriculumSchedule) -> float:
    """Probability of time-frequency mode at step ``s``, in [0, 1].

    The sqrt shape is min(1, sqrt(s * (1 - c0^2) / S) + c0^2); it starts at
    c0^2 and reaches 1 exactly at s = S. The other kinds share the same
    endpoints: linear ramps affinely, step jumps at S/2, constant stays at
    0.5, and reversed mirrors sqrt for the inverse-curriculum ablation.
    """
    if s < 0:
        raise ConfigError("step must be non-negative")
    c2 = sched.c0**2
    s_frac = min(1.0, s / sched.total_steps)
    if sched.kind == "sqrt":
        return min(1.0, math.sqrt(s * (1.0 - c2) / sched.total_steps) + c2)
    if sched.kind == "linear":
        return min(1.0, c2 + (1.0 - c2) * s_frac)
    if sched.kind == "step":
        return c2 if s < sched.total_steps / 2 else 1.0
    if sched.kind == "constant":
        return 0.5
    # reversed: 1 - f_sqrt(s), the inverse-curriculum ablation
    return 1.0 - min(1.0, math.sqrt(s * (1.0 - c2) / sched.total_steps) + c2)


def choose_mode(s: int, sched: CurriculumSchedule, rng: np.random.Generator) -> str:
    """Bernoulli(f(s)) draw: time-frequency on success, block otherwise."""
    return MODE_TF if rng.random() < curriculum_f(s, sched) else MODE_BLOCK


# ---------------------------------------------------------------------------
# Block geometry
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_block_size(
    grid: tuple[int, int],
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Draw a block size: area = scale * rows * cols, aspect = h/w.

    h = round(sqrt(area * aspect)) and w = round(sqrt(area / aspect)),
    each clamped to [1, axis - 1] so a block never spans a full axis.
    """
    rows, cols = grid
    if rows < 2 or cols < 2:
        raise ConfigError(f"grid {grid} too small to sample blocks")
    s = rng.uniform(*scale_range)
    a = rng.uniform(*aspect_range)
    area = s * rows * cols
    h = min(max(_round_half_up(math.sqrt(area * a)), 1), rows - 1)
    w = min(max(_round_half_up(math.sqrt(area / a)), 1), cols - 1)
    return h, w


def sample_tf_size(
    grid: tuple[int, int],
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Draw a time-frequency block size as independent per-axis fractions.

    Each axis keeps a scale-fraction of its own extent: h = round(rows*s_t),
    w = round(cols*s_f), clamped to [1, axis - 1]. Sizing per axis (instead
    of by grid area) keeps the cross-shaped row/column removal proportionate
    on any grid shape; area-sized crosses would swallow the whole frequency
    axis of wide-and-short audio grids and leave no room for a context.
    """
    rows, cols = grid
    if rows < 2 or cols < 2:
        raise ConfigError(f"grid {grid} too small to sample blocks")
    s_t = rng.uniform(*scale_range)
    s_f = rng.uniform(*scale_range)
    h = min(max(_round_half_up(rows * s_t), 1), rows - 1)
    w = min(max(_round_half_up(cols * s_f), 1), cols - 1)
    return h, w


# ---------------------------------------------------------------------------
# Mask sampling
# ---------------------------------------------------------------------------

def _place_block(
    size: tuple[int, int], grid: tuple[int, int], rng: np.random.Generator
) -> tuple[int, int]:
    """Uniform top-left corner; blocks never touch the last row/column."""
    rows, cols = grid
    h, w = size
    top = int(rng.integers(0, rows - h))
    left = int(rng.integers(0, cols - w))
    return top, left


def _check_size(size: tuple[int, int], grid: tuple[int, int]) -> None:
    h, w = size
    rows, cols = grid
    if not (1 <= h < rows and 1 <= w < cols):
        raise ConfigError(f"block size {size} invalid for grid {grid}")


def sample_block_mask(
    size: tuple[int, int],
    grid: tuple[int, int],
    acceptable: list[np.ndarray] | None,
    min_ratio: float,
    max_tries: int,
    rng: np.random.Generator,
) -> tuple[MaskIndexSet, np.ndarray]:
    """Rejection-sample a block mask restricted to acceptable regions.

    Each try places the block uniformly and intersects it with the first
    max(len(acceptable) - tries, 0) acceptable rasters, i.e. one constraint
    is relaxed per extra try. The mask is accepted once the surviving patch
    count exceeds min_ratio * h * w. Returns the surviving indices and the
    complement raster of the full block rectangle.
    """
    _check_size(size, grid)
    rows, cols = grid
    h, w = size
    for tries in range(max_tries):
        top, left = _place_block(size, grid, rng)
        mask = np.zeros((rows, cols), dtype=bool)
        mask[top : top + h, left : left + w] = True
        if acceptable is not None:
            keep = max(len(acceptable) - tries, 0)
            for region in acceptable[:keep]:
                mask &= region
        if mask.sum() > min_ratio * h * w:
            complement = np.ones((rows, cols), dtype=bool)
            complement[top : top + h, left : left + w] = False
            indices = tuple(int(i) for i in np.flatnonzero(mask))
            return MaskIndexSet(indices=indices, grid=grid), complement
    raise SamplingError(
        f"no valid {h}x{w} block found on {rows}x{cols} grid in {max_tries} tries"
    )


def sample_tf_mask(
    size: tuple[int, int],
    grid: tuple[int, int],
    acceptable: list[np.ndarray] | None,
    min_ratio: float,
    max_tries: int,
    rng: np.random.Generator,
) -> tuple[MaskIndexSet, np.ndarray]:
    """Block mask whose complement removes the block's full rows and columns.

    The target indices are the surviving block patches, as in
    :func:`sample_block_mask`; the returned cross-shaped complement zeroes
    every patch sharing any of the block's h time rows or w frequency
    columns, so a context intersected with it avoids them entirely.
    """
    _check_size(size, grid)
    rows, cols = grid
    h, w = size
    for tries in range(max_tries):
        top, left = _place_block(size, grid, rng)
        mask = np.zeros((rows, cols), dtype=bool)
        mask[top : top + h, left : left + w] = True
        if acceptable is not None:
            keep = max(len(acceptable) - tries, 0)
            for region in acceptable[:keep]:
                mask &= region
        if mask.sum() > min_ratio * h * w:
            complement_tf = np.ones((rows, cols), dtype=bool)
            complement_tf[top : top + h, :] = False
            complement_tf[:, left : left + w] = False
            indices = tuple(int(i) for i in np.flatnonzero(mask))
            return MaskIndexSet(indices=indices, grid=grid), complement_tf
    raise SamplingError(
        f"no valid {h}x{w} tf block found on {rows}x{cols} grid in {max_tries} tries"
    )


def sample_context_mask(
    grid: tuple[int, int],
    cfg: SamplerConfig,
    acceptable_regions: list[np.ndarray],
    rng: np.random.Generator,
    min_keep: float | None = None,
) -> MaskIndexSet:
    """Sample the context block and subtract every target's complement.

    Unlike target sampling, all acceptable regions are always applied (no
    relaxation), so the result is guaranteed disjoint from every target and,
    in tf mode, from their removed rows/columns. ``min_keep`` is the patch
    count the survivors must exceed; it defaults to min_ratio * h * w of the
    context's own block.
    """
    rows, cols = grid
    h, w = sample_block_size(grid, cfg.context_scale, (cfg.context_aspect,) * 2, rng)
    floor = cfg.min_ratio * h * w if min_keep is None else min_keep
    for _ in range(cfg.max_tries):
        top, left = _place_block((h, w), grid, rng)
        mask = np.zeros((rows, cols), dtype=bool)
        mask[top : top + h, left : left + w] = True
        for region in acceptable_regions:
            mask &= region
        if mask.sum() > floor:
            indices = tuple(int(i) for i in np.flatnonzero(mask))
            return MaskIndexSet(indices=indices, grid=grid)
    raise SamplingError(
        f"no context placement kept more than {floor:.1f} patches "
        f"in {cfg.max_tries} tries"
    )


def build_mask_plan(
    grid: tuple[int, int],
    cfg: SamplerConfig,
    s: int,
    sched: CurriculumSchedule,
    rng: np.random.Generator,
    force_mode: str | None = None,
) -> MaskPlan:
    """Sample one full plan: mode, shared target size, targets, context.

    One target size is drawn per plan and reused for all its target blocks;
    positions are independent. Target complements (cross-shaped in tf mode)
    become the context's acceptable regions. The context must keep more
    than min_ratio of one target block's area, a floor that is satisfiable
    on small grids where min_ratio of the near-full-grid context block is
    not. On sampling failure the whole plan is retried with fresh draws.
    """
    for _ in range(cfg.plan_retries):
        mode = force_mode if force_mode is not None else choose_mode(s, sched, rng)
        if mode == MODE_TF:
            n_targets = cfg.n_targets_tf
            size = sample_tf_size(grid, cfg.tf_scale, rng)
            sampler = sample_tf_mask
        elif mode == MODE_BLOCK:
            n_targets = cfg.n_targets_block
            size = sample_block_size(grid, cfg.block_scale, cfg.block_aspect, rng)
            sampler = sample_block_mask
        else:
            raise ConfigError(f"unknown mask mode {mode!r}")
        targets = []
        complements = []
        for _ in range(n_targets):
            m, c = sampler(size, grid, None, cfg.min_ratio, cfg.max_tries, rng)
            targets.append(m)
            complements.append(c)
        try:
            context = sample_context_mask(
                grid, cfg, complements, rng,
                min_keep=cfg.min_ratio * size[0] * size[1],
            )
        except SamplingError:
            continue
        return MaskPlan(context=context, targets=tuple(targets), mode=mode)
    raise UnsatisfiableMaskError(
        f"failed to build a {force_mode or 'curriculum'} mask plan on grid "
        f"{grid} after {cfg.plan_retries} retries"
    )
