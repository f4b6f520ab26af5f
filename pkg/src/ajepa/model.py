"""Transformer stack: patch embedding, encoders, predictor, EMA, checkpoints.

Three networks share the block design: a context encoder over visible
patches only, a shape-identical target encoder updated purely by EMA, and
a narrow predictor that fills positional mask tokens from context features.
Attention supports excluding a set of keys for every query, which serves
both padded batching and regularized masking during fine-tuning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigError, DegenerateMaskError, ShapeError
from .maskgen import MaskIndexSet, MaskPlan
from .spectro import PatchGrid, sincos_positions


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; the full-scale analog (ViT-B encoder with a
    16-layer, 512-wide predictor) is reachable through the same fields."""

    embed_dim: int = 64
    enc_depth: int = 4
    n_heads: int = 4
    pred_depth: int = 4
    pred_dim: int = 32
    mlp_ratio: float = 4.0
    patch_len: int = 256

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if self.pred_dim % self.n_heads != 0:
            raise ConfigError("pred_dim must be divisible by n_heads")
        if self.pred_dim > self.embed_dim:
            raise ConfigError("pred_dim must not exceed embed_dim")
        if self.embed_dim % 4 != 0 or self.pred_dim % 4 != 0:
            raise ConfigError("widths must be divisible by 4 for sin/cos positions")


@dataclass
class TokenSequence:
    """Features aligned with the patch indices they came from."""

    features: torch.Tensor  # [n_tokens, width]
    positions: np.ndarray  # [n_tokens] raster patch indices

    def __post_init__(self):
        if self.features.shape[0] != len(self.positions):
            raise ShapeError("features and positions disagree on token count")
        if len(np.unique(self.positions)) != len(self.positions):
            raise ConfigError("positions must be unique")


# ---------------------------------------------------------------------------
# Attention with key exclusion
# ---------------------------------------------------------------------------

def multihead_attention(
    x: torch.Tensor,
    block: "Block",
    excluded_keys: torch.Tensor | None = None,
    need_weights: bool = False,
):
    """Multi-head scaled dot-product attention with optional key removal.

    ``excluded_keys`` is a bool tensor [T] or [B, T]; logits of excluded
    keys are dropped for every query before the softmax, so weights
    renormalize over the survivors. Excluded tokens still act as queries
    and produce outputs. Raises if any query would see no key at all.
    """
    b, t, d = x.shape
    h = block.n_heads
    dh = d // h
    qkv = block.qkv(x).reshape(b, t, 3, h, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # each [B, H, T, dh]
    logits = (q @ k.transpose(-2, -1)) / dh**0.5
    if excluded_keys is not None:
        excl = excluded_keys.to(torch.bool)
        if excl.ndim == 1:
            excl = excl.unsqueeze(0).expand(b, t)
        if excl.shape != (b, t):
            raise ShapeError("excluded_keys must have shape [T] or [B, T]")
        if bool(excl.all(dim=-1).any()):
            raise DegenerateMaskError("every key excluded for some sequence")
        logits = logits.masked_fill(excl[:, None, None, :], float("-inf"))
    weights = logits.softmax(dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, t, d)
    out = block.proj(out)
    return (out, weights) if need_weights else (out, None)


class Block(nn.Module):
    """Pre-norm transformer block with GELU MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, excluded_keys=None):
        attn, _ = multihead_attention(self.norm1(x), self, excluded_keys)
        x = x + attn
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class Encoder(nn.Module):
    """Linear patch embedding plus a stack of blocks and a final norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_len, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.enc_depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def embed(self, tokens: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.cfg.patch_len:
            raise ShapeError(
                f"patch length {tokens.shape[-1]} != configured {self.cfg.patch_len}"
            )
        return self.patch_proj(tokens) + pos

    def forward(self, tokens, pos, excluded_keys=None):
        x = self.embed(tokens, pos)
        for block in self.blocks:
            x = block(x, excluded_keys)
        return self.norm(x)


class Predictor(nn.Module):
    """Narrow transformer filling positional mask tokens from context."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_in = nn.Linear(cfg.embed_dim, cfg.pred_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.pred_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.pred_dim, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.pred_depth)
        )
        self.norm = nn.LayerNorm(cfg.pred_dim)
        self.proj_out = nn.Linear(cfg.pred_dim, cfg.embed_dim)

    def forward(self, ctx_feats, ctx_pos, tgt_pos, excluded_keys=None):
        """ctx_feats [B, n_ctx, embed]; positions already in pred width.

        Returns predictions at the target slots, [B, n_tgt, embed_dim].
        """
        n_ctx = ctx_feats.shape[-2]
        x_ctx = self.proj_in(ctx_feats) + ctx_pos
        x_tgt = self.mask_token + tgt_pos
        if x_tgt.ndim == 2:
            x_tgt = x_tgt.unsqueeze(0).expand(x_ctx.shape[0], -1, -1)
        x = torch.cat([x_ctx, x_tgt], dim=-2)
        for block in self.blocks:
            x = block(x, excluded_keys)
        return self.proj_out(self.norm(x[..., n_ctx:, :]))


# ---------------------------------------------------------------------------
# Functional operations over one sample
# ---------------------------------------------------------------------------

def position_tables(
    grid: tuple[int, int], cfg: ModelConfig, dtype=torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fixed sin/cos tables for the encoder and the predictor widths."""
    enc = torch.from_numpy(sincos_positions(grid, cfg.embed_dim)).to(dtype)
    pred = torch.from_numpy(sincos_positions(grid, cfg.pred_dim)).to(dtype)
    return enc, pred


def _as_tensor(grid: PatchGrid | torch.Tensor, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    if isinstance(grid, PatchGrid):
        return torch.from_numpy(grid.tokens).to(dtype)
    return grid.to(dtype)


def embed_patches(
    grid: PatchGrid | torch.Tensor, pos: torch.Tensor, encoder: Encoder
) -> torch.Tensor:
    """token_i = tokens_i @ W + b + pos_i."""
    return encoder.embed(_as_tensor(grid, encoder), pos)


def encode_context(
    grid: PatchGrid | torch.Tensor,
    plan: MaskPlan,
    encoder: Encoder,
    pos_table: torch.Tensor,
) -> TokenSequence:
    """Run the encoder over context patches only."""
    if len(plan.context) == 0:
        raise DegenerateMaskError("empty context")
    idx = plan.context.as_array()
    tokens = _as_tensor(grid, encoder)[idx]
    feats = encoder(tokens.unsqueeze(0), pos_table[idx].unsqueeze(0)).squeeze(0)
    return TokenSequence(features=feats, positions=idx)


def encode_target(
    grid: PatchGrid | torch.Tensor,
    target_encoder: Encoder,
    pos_table: torch.Tensor,
    normalize: bool = True,
) -> TokenSequence:
    """Full-grid forward with target weights; consumers get no gradient.

    With ``normalize`` the per-token features are layer-normalized (no
    affine parameters), the form the prediction loss trains against.
    """
    tokens = _as_tensor(grid, target_encoder)
    with torch.no_grad():
        feats = target_encoder(tokens.unsqueeze(0), pos_table.unsqueeze(0)).squeeze(0)
        if normalize:
            feats = F.layer_norm(feats, (feats.shape[-1],))
    return TokenSequence(features=feats, positions=np.arange(tokens.shape[0]))


def predict_targets(
    ctx: TokenSequence,
    target_positions: MaskIndexSet,
    predictor: Predictor,
    pred_pos_table: torch.Tensor,
) -> torch.Tensor:
    """Predict target-position features from one context; one call per mask."""
    tgt_idx = target_positions.as_array()
    if np.intersect1d(tgt_idx, ctx.positions).size:
        raise ConfigError("target positions overlap the context")
    ctx_pos = pred_pos_table[ctx.positions]
    tgt_pos = pred_pos_table[tgt_idx]
    out = predictor(
        ctx.features.unsqueeze(0), ctx_pos.unsqueeze(0), tgt_pos.unsqueeze(0)
    )
    return out.squeeze(0)


def ema_update(target: nn.Module, source: nn.Module, m: float) -> None:
    """theta_tgt <- m * theta_tgt + (1 - m) * theta_src, array by array."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError("momentum must lie in [0, 1]")
    tgt_params = dict(target.named_parameters())
    src_params = dict(source.named_parameters())
    if tgt_params.keys() != src_params.keys():
        raise ShapeError("parameter stores have different names")
    with torch.no_grad():
        for name, tp in tgt_params.items():
            sp = src_params[name]
            if tp.shape != sp.shape:
                raise ShapeError(f"shape mismatch for {name}")
            tp.mul_(m).add_(sp, alpha=1.0 - m)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, like ViT init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_parameters(module: nn.Module, rng: np.random.Generator) -> None:
    """Truncated normal for matrices and the mask token, ones for norm
    gains, zeros for biases. Draw order follows parameter registration."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("mask_token") or p.ndim >= 2:
                arr = trunc_normal(rng, tuple(p.shape))
            elif name.endswith(".weight"):
                arr = np.ones(tuple(p.shape))
            else:
                arr = np.zeros(tuple(p.shape))
            p.copy_(torch.from_numpy(arr).to(p.dtype))


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"AJEPA1"


def write_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Binary layout: magic, count, manifest entries (name, rank, dims),
    then contiguous little-endian float32 payloads in manifest order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an AJEPA1 checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated manifest")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (count,) = take("<I")
    manifest = []
    for _ in range(count):
        (name_len,) = take("<I")
        if off + name_len > len(data):
            raise CheckpointError(f"{path}: truncated name")
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        manifest.append((name, dims))

    arrays = {}
    for name, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        size = 4 * n
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(
            dims
        ).copy()
        off += size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return arrays


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy()
        for k, v in module.state_dict().items()
    }


def load_module_arrays(
    module: nn.Module, arrays: dict[str, np.ndarray], prefix: str
) -> None:
    """Copy named arrays into the module, validating presence and shape."""
    state = module.state_dict()
    for k, v in state.items():
        key = f"{prefix}.{k}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(
                f"array {key} has shape {arr.shape}, model expects {tuple(v.shape)}"
            )
    with torch.no_grad():
        for k, v in module.state_dict().items():
            v.copy_(torch.from_numpy(arrays[f"{prefix}.{k}"]).to(v.dtype))
