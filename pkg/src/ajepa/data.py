"""Datasets: synthetic tone generation, directory layouts, feature assembly.

Labeled sets live under ``root/<class_name>/*.wav``; unlabeled pretraining
accepts a flat directory (any nested wav files are collected). Synthetic
classes are tone mixtures with class-specific amplitude modulation, built
to be separable in the mel domain so probe accuracy measures representation
quality rather than dataset difficulty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .spectro import (
    SAMPLE_RATE,
    FrontendConfig,
    Waveform,
    cyclic_crop_jitter,
    decode_wav,
    encode_wav,
    fix_length,
    mel_frames,
    patchify,
    standardize,
)
from .streams import stream


@dataclass(frozen=True)
class ToneRecipe:
    freqs_hz: tuple[float, ...]
    am_hz: float

    def __post_init__(self):
        if not self.freqs_hz:
            raise ConfigError("a recipe needs at least one tone")
        if any(not 0 < f < SAMPLE_RATE / 2 for f in self.freqs_hz):
            raise ConfigError("tone frequencies must lie below 8000 Hz")


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    clips_per_class: int = 50
    duration_s: float = 1.5
    noise_db: float | None = -30.0
    seed: int = 0
    recipes: tuple[ToneRecipe, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 1 or self.clips_per_class < 1:
            raise ConfigError("need at least one class and one clip per class")
        if self.duration_s <= 0:
            raise ConfigError("duration must be positive")
        if self.recipes is not None:
            if len(self.recipes) != self.n_classes:
                raise ConfigError("need one recipe per class")
            if len(set(self.recipes)) != self.n_classes:
                raise ConfigError("recipes must be pairwise distinct")

    def resolved_recipes(self) -> tuple[ToneRecipe, ...]:
        if self.recipes is not None:
            return self.recipes
        return default_recipes(self.n_classes)


def default_recipes(n_classes: int) -> tuple[ToneRecipe, ...]:
    """Two-tone recipes with centers spread geometrically over 300-3500 Hz."""
    out = []
    for i in range(n_classes):
        frac = i / max(n_classes - 1, 1)
        base = 300.0 * (3500.0 / 300.0) ** frac
        out.append(ToneRecipe(freqs_hz=(base, 1.5 * base), am_hz=2.0 + 3.0 * i))
    return tuple(out)


def synthesize_clip(
    recipe: ToneRecipe,
    duration_s: float,
    noise_db: float | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """One clip: AM-enveloped tone mixture at 0.9 peak, plus white noise."""
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    sig = np.zeros(n)
    for f in recipe.freqs_hz:
        sig += np.sin(2 * math.pi * f * t + rng.uniform(0, 2 * math.pi))
    envelope = 0.6 + 0.4 * np.sin(2 * math.pi * recipe.am_hz * t + rng.uniform(0, 2 * math.pi))
    sig *= envelope
    sig *= 0.9 / np.max(np.abs(sig))
    if noise_db is not None:
        sig = sig + rng.normal(0.0, 10.0 ** (noise_db / 20.0), size=n)
    return np.clip(sig, -1.0, 1.0)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> list[Path]:
    """Write the dataset as root/<class>/clip_NNNN.wav; deterministic."""
    out_dir = Path(out_dir)
    recipes = spec.resolved_recipes()
    paths = []
    for ci, recipe in enumerate(recipes):
        class_dir = out_dir / f"class{ci}"
        class_dir.mkdir(parents=True, exist_ok=True)
        for j in range(spec.clips_per_class):
            rng = stream(spec.seed, "gen", ci, j)
            clip = synthesize_clip(recipe, spec.duration_s, spec.noise_db, rng)
            path = class_dir / f"clip_{j:04d}.wav"
            path.write_bytes(encode_wav(clip))
            paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Directory layouts
# ---------------------------------------------------------------------------

def list_wavs(root) -> list[Path]:
    """All wav files under root, sorted for deterministic ordering."""
    paths = sorted(Path(root).rglob("*.wav"))
    if not paths:
        raise ConfigError(f"no .wav files under {root}")
    return paths


def load_labeled(root) -> tuple[list[tuple[Path, int]], list[str]]:
    """Items as (path, class index) with classes sorted by directory name."""
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"no class directories under {root}")
    items = []
    names = []
    for ci, d in enumerate(class_dirs):
        names.append(d.name)
        wavs = sorted(d.glob("*.wav"))
        if not wavs:
            raise ConfigError(f"class directory {d} holds no .wav files")
        items.extend((p, ci) for p in wavs)
    return items, names


def split_eval(
    items: list[tuple[Path, int]], eval_fraction: float = 0.2
) -> tuple[list[tuple[Path, int]], list[tuple[Path, int]]]:
    """Per class, the last ceil(fraction * n) sorted files become eval."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError("eval_fraction must lie in (0, 1)")
    by_class: dict[int, list[tuple[Path, int]]] = {}
    for item in items:
        by_class.setdefault(item[1], []).append(item)
    train, eval_ = [], []
    for ci in sorted(by_class):
        group = sorted(by_class[ci])
        n_eval = max(1, math.ceil(eval_fraction * len(group)))
        if n_eval >= len(group):
            raise ConfigError(f"class {ci} too small for an eval split")
        train.extend(group[:-n_eval])
        eval_.extend(group[-n_eval:])
    return train, eval_


# ---------------------------------------------------------------------------
# Feature assembly
# ---------------------------------------------------------------------------

class MelCache:
    """Caches full-length unnormalized mel frames per file.

    Augmentation and standardization happen after the cache, so cached
    frames are reusable across epochs and between training and eval paths.
    """

    def __init__(self, cfg: FrontendConfig):
        self.cfg = cfg
        self._frames: dict[Path, np.ndarray] = {}

    def frames(self, path) -> np.ndarray:
        path = Path(path)
        if path not in self._frames:
            wav = decode_wav(path.read_bytes())
            self._frames[path] = mel_frames(wav, self.cfg)
        return self._frames[path]

    def pretrain_tokens(self, path, rng: np.random.Generator) -> np.ndarray:
        """Augmented patch tokens [T, patch_len] for one pretraining sample."""
        values = standardize(cyclic_crop_jitter(self.frames(path), self.cfg, rng))
        return patchify(values, self.cfg).tokens

    def eval_tokens(self, path) -> np.ndarray:
        """Deterministic patch tokens for fine-tuning and evaluation."""
        values = standardize(fix_length(self.frames(path), self.cfg))
        return patchify(values, self.cfg).tokens


def waveform_from_file(path) -> Waveform:
    return decode_wav(Path(path).read_bytes())
