import numpy as np
import pytest
import torch

from ajepa.errors import (
    CheckpointError,
    ConfigError,
    DegenerateMaskError,
    ShapeError,
)
from ajepa.maskgen import MaskIndexSet, MaskPlan
from ajepa.model import (
    Block,
    Encoder,
    ModelConfig,
    Predictor,
    embed_patches,
    ema_update,
    encode_context,
    encode_target,
    init_parameters,
    load_module_arrays,
    module_arrays,
    multihead_attention,
    position_tables,
    predict_targets,
    read_checkpoint,
    trunc_normal,
    write_checkpoint,
)
from ajepa.spectro import PatchGrid

TOY = ModelConfig(
    embed_dim=8, enc_depth=2, n_heads=2, pred_depth=2, pred_dim=8, patch_len=12
)
GRID = (4, 4)


def make_encoder(seed=0, cfg=TOY):
    enc = Encoder(cfg)
    init_parameters(enc, np.random.default_rng(seed))
    return enc


def make_predictor(seed=1, cfg=TOY):
    pred = Predictor(cfg)
    init_parameters(pred, np.random.default_rng(seed))
    return pred


def toy_grid(seed=2, cfg=TOY, grid=GRID):
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(grid[0] * grid[1], cfg.patch_len))
    return PatchGrid(tokens=tokens, grid=grid, patch=(1, cfg.patch_len))


def toy_plan(grid=GRID):
    ctx = MaskIndexSet(indices=tuple(range(0, 10)), grid=grid)
    t1 = MaskIndexSet(indices=(10, 11, 12), grid=grid)
    t2 = MaskIndexSet(indices=(13, 14, 15), grid=grid)
    return MaskPlan(context=ctx, targets=(t1, t2), mode="block")


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def test_embed_zero_patches_zero_bias_is_positional():
    enc = make_encoder()
    with torch.no_grad():
        enc.patch_proj.bias.zero_()
    pos, _ = position_tables(GRID, TOY)
    grid = PatchGrid(np.zeros((16, 12)), grid=GRID, patch=(1, 12))
    out = embed_patches(grid, pos, enc)
    torch.testing.assert_close(out, pos)


def test_embed_identity_projection_adds_positions():
    cfg = ModelConfig(
        embed_dim=8, enc_depth=1, n_heads=2, pred_depth=1, pred_dim=8, patch_len=8
    )
    enc = Encoder(cfg)
    with torch.no_grad():
        enc.patch_proj.weight.copy_(torch.eye(8))
        enc.patch_proj.bias.zero_()
    pos, _ = position_tables((2, 2), cfg)
    tokens = np.random.default_rng(0).normal(size=(4, 8))
    grid = PatchGrid(tokens, grid=(2, 2), patch=(1, 8))
    out = embed_patches(grid, pos, enc)
    torch.testing.assert_close(
        out, torch.from_numpy(tokens).float() + pos, atol=1e-6, rtol=1e-6
    )


def test_embed_linearity():
    enc = make_encoder()
    pos, _ = position_tables(GRID, TOY)
    g = toy_grid()
    base = embed_patches(g, pos, enc) - pos
    scaled = embed_patches(
        PatchGrid(3.0 * g.tokens, grid=GRID, patch=g.patch), pos, enc
    ) - pos
    with torch.no_grad():
        enc.patch_proj.bias.zero_()
    base_nb = embed_patches(g, pos, enc) - pos
    scaled_nb = embed_patches(
        PatchGrid(3.0 * g.tokens, grid=GRID, patch=g.patch), pos, enc
    ) - pos
    torch.testing.assert_close(scaled_nb, 3.0 * base_nb, atol=1e-5, rtol=1e-5)
    # with a bias the map is affine, not linear
    assert not torch.allclose(scaled, 3.0 * base)


def test_embed_rejects_wrong_patch_len():
    enc = make_encoder()
    pos, _ = position_tables(GRID, TOY)
    with pytest.raises(ShapeError):
        embed_patches(PatchGrid(np.zeros((16, 9)), GRID, (1, 9)), pos, enc)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def reference_dense_attention(x, block):
    b, t, d = x.shape
    h, dh = block.n_heads, d // block.n_heads
    qkv = x @ block.qkv.weight.T + block.qkv.bias
    q, k, v = qkv.split(d, dim=-1)
    q = q.reshape(b, t, h, dh).transpose(1, 2)
    k = k.reshape(b, t, h, dh).transpose(1, 2)
    v = v.reshape(b, t, h, dh).transpose(1, 2)
    w = ((q @ k.transpose(-2, -1)) / dh**0.5).softmax(-1)
    out = (w @ v).transpose(1, 2).reshape(b, t, d)
    return out @ block.proj.weight.T + block.proj.bias


def test_attention_matches_reference_without_exclusion():
    block = Block(8, 2)
    init_parameters(block, np.random.default_rng(0))
    x = torch.from_numpy(np.random.default_rng(1).normal(size=(2, 5, 8))).float()
    out, _ = multihead_attention(x, block)
    torch.testing.assert_close(out, reference_dense_attention(x, block), atol=1e-6, rtol=1e-5)


def test_attention_three_token_exclusion_oracle():
    block = Block(4, 1)
    with torch.no_grad():
        block.qkv.weight.zero_()
        block.qkv.bias.zero_()
        block.qkv.weight[8:12].copy_(torch.eye(4))  # v = x, q = k = 0
        block.proj.weight.copy_(torch.eye(4))
        block.proj.bias.zero_()
    x = torch.from_numpy(np.random.default_rng(2).normal(size=(1, 3, 4))).float()
    excluded = torch.tensor([False, True, False])
    out, weights = multihead_attention(x, block, excluded, need_weights=True)
    expected = torch.tensor([0.5, 0.0, 0.5])
    for q in range(3):
        torch.testing.assert_close(weights[0, 0, q], expected, atol=1e-6, rtol=0)
    # every query's output is the average of tokens 0 and 2
    mean02 = (x[0, 0] + x[0, 2]) / 2
    for q in range(3):
        torch.testing.assert_close(out[0, q], mean02, atol=1e-6, rtol=0)


def test_attention_weights_sum_to_one_under_exclusion():
    block = Block(8, 2)
    init_parameters(block, np.random.default_rng(3))
    x = torch.from_numpy(np.random.default_rng(4).normal(size=(3, 7, 8))).float()
    excluded = torch.zeros(3, 7, dtype=torch.bool)
    excluded[0, [1, 4]] = True
    excluded[1, [0, 2, 3, 5, 6]] = True
    _, w = multihead_attention(x, block, excluded, need_weights=True)
    sums = w.sum(dim=-1)
    torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)
    # excluded keys receive exactly zero weight from every query
    assert w[0, :, :, 1].abs().max() == 0
    assert w[0, :, :, 4].abs().max() == 0


def test_attention_all_keys_excluded_errors():
    block = Block(8, 2)
    init_parameters(block, np.random.default_rng(3))
    x = torch.zeros(1, 3, 8)
    with pytest.raises(DegenerateMaskError):
        multihead_attention(x, block, torch.ones(1, 3, dtype=torch.bool))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def test_encode_context_token_count_and_positions():
    enc = make_encoder()
    pos, _ = position_tables(GRID, TOY)
    plan = toy_plan()
    seq = encode_context(toy_grid(), plan, enc, pos)
    assert seq.features.shape == (len(plan.context), TOY.embed_dim)
    np.testing.assert_array_equal(seq.positions, plan.context.as_array())


def test_full_context_equals_target_trunk():
    enc = make_encoder()
    pos, _ = position_tables(GRID, TOY)
    full = MaskPlan(
        context=MaskIndexSet(indices=tuple(range(16)), grid=GRID),
        targets=(),
        mode="block",
    )
    g = toy_grid()
    ctx = encode_context(g, full, enc, pos)
    tgt = encode_target(g, enc, pos, normalize=False)
    torch.testing.assert_close(ctx.features, tgt.features, atol=1e-6, rtol=1e-5)
    assert tgt.features.shape[0] == 16


def test_encode_context_permutation_equivariance():
    enc = make_encoder()
    pos, _ = position_tables(GRID, TOY)
    g = toy_grid()
    idx = np.array([0, 3, 5, 9, 11])
    perm = np.array([4, 2, 0, 1, 3])
    tokens = torch.from_numpy(g.tokens[idx]).float()
    out = enc(tokens.unsqueeze(0), pos[idx].unsqueeze(0)).squeeze(0)
    out_perm = enc(
        tokens[perm].unsqueeze(0), pos[idx[perm]].unsqueeze(0)
    ).squeeze(0)
    torch.testing.assert_close(out_perm, out[perm], atol=1e-6, rtol=1e-5)


def test_encode_target_receives_no_gradient():
    enc = make_encoder(0)
    tgt_enc = make_encoder(5)
    predictor = make_predictor()
    pos, pos_pred = position_tables(GRID, TOY)
    g = toy_grid()
    plan = toy_plan()
    ctx = encode_context(g, plan, enc, pos)
    targets = encode_target(g, tgt_enc, pos)
    preds = predict_targets(ctx, plan.targets[0], predictor, pos_pred)
    loss = ((preds - targets.features[plan.targets[0].as_array()]) ** 2).mean()
    loss.backward()
    assert all(p.grad is None for p in tgt_enc.parameters())
    assert any(
        p.grad is not None and p.grad.abs().sum() > 0 for p in enc.parameters()
    )


def test_empty_context_rejected():
    enc = make_encoder()
    pos, _ = position_tables(GRID, TOY)
    plan = toy_plan()
    object.__setattr__(plan.context, "indices", ())
    with pytest.raises(DegenerateMaskError):
        encode_context(toy_grid(), plan, enc, pos)


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

def test_predict_zero_output_projection_gives_zeros():
    enc = make_encoder()
    predictor = make_predictor()
    with torch.no_grad():
        predictor.proj_out.weight.zero_()
        predictor.proj_out.bias.zero_()
    pos, pos_pred = position_tables(GRID, TOY)
    plan = toy_plan()
    ctx = encode_context(toy_grid(), plan, enc, pos)
    preds = predict_targets(ctx, plan.targets[0], predictor, pos_pred)
    assert preds.shape == (3, TOY.embed_dim)
    assert preds.abs().max() == 0


def test_predict_rejects_overlap():
    enc = make_encoder()
    predictor = make_predictor()
    pos, pos_pred = position_tables(GRID, TOY)
    plan = toy_plan()
    ctx = encode_context(toy_grid(), plan, enc, pos)
    overlapping = MaskIndexSet(indices=(0, 12), grid=GRID)
    with pytest.raises(ConfigError):
        predict_targets(ctx, overlapping, predictor, pos_pred)


def test_predict_per_set_is_the_contract():
    enc = make_encoder()
    predictor = make_predictor()
    pos, pos_pred = position_tables(GRID, TOY)
    plan = toy_plan()
    ctx = encode_context(toy_grid(), plan, enc, pos)
    a1 = predict_targets(ctx, plan.targets[0], predictor, pos_pred)
    a2 = predict_targets(ctx, plan.targets[0], predictor, pos_pred)
    torch.testing.assert_close(a1, a2, atol=0, rtol=0)  # deterministic
    joint_idx = plan.targets[0].indices + plan.targets[1].indices
    joint = predict_targets(
        ctx, MaskIndexSet(indices=joint_idx, grid=GRID), predictor, pos_pred
    )
    # evaluating two sets jointly changes the attention pool: not equal
    assert not torch.allclose(joint[:3], a1, atol=1e-6)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_scalar_toy():
    a = torch.nn.Linear(1, 1, bias=False)
    b = torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        a.weight.fill_(1.0)
        b.weight.fill_(0.0)
    ema_update(a, b, 0.99)
    assert a.weight.item() == pytest.approx(0.99)
    ema_update(a, b, 0.0)
    assert a.weight.item() == 0.0


def test_ema_geometric_contraction():
    tgt = make_encoder(0).double()
    src = make_encoder(9).double()
    diff0 = torch.sqrt(
        sum(
            ((a - b) ** 2).sum()
            for a, b in zip(tgt.parameters(), src.parameters())
        )
    )
    for _ in range(50):
        ema_update(tgt, src, 0.99)
    diff = torch.sqrt(
        sum(
            ((a - b) ** 2).sum()
            for a, b in zip(tgt.parameters(), src.parameters())
        )
    )
    assert abs(diff.item() - 0.99**50 * diff0.item()) < 1e-6


def test_ema_rejects_mismatched_stores():
    small = ModelConfig(embed_dim=8, enc_depth=1, n_heads=2, pred_depth=1, pred_dim=8, patch_len=12)
    with pytest.raises(ShapeError):
        ema_update(make_encoder(0), make_encoder(0, small), 0.9)


def test_momentum_out_of_range_rejected():
    enc = make_encoder()
    with pytest.raises(ConfigError):
        ema_update(enc, make_encoder(1), 1.5)


# ---------------------------------------------------------------------------
# config validation, init
# ---------------------------------------------------------------------------

def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(pred_dim=128, embed_dim=64)


def test_trunc_normal_bounds():
    x = trunc_normal(np.random.default_rng(0), (5000,), std=0.02)
    assert np.abs(x).max() <= 0.04
    assert abs(x.mean()) < 0.002


def test_init_is_deterministic():
    a = make_encoder(4)
    b = make_encoder(4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(pa, pb, atol=0, rtol=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    arrays = {
        "a.weight": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
        "b": np.array(2.0, dtype=np.float32),
        "c.long.name": np.arange(5, dtype=np.float32),
    }
    path = tmp_path / "x.ajepa"
    write_checkpoint(path, arrays)
    assert path.read_bytes()[:6] == b"AJEPA1"
    back = read_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ajepa"
    path.write_bytes(b"NOTAJEPA" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    arrays = {"w": np.zeros((4, 4), dtype=np.float32)}
    path = tmp_path / "t.ajepa"
    write_checkpoint(path, arrays)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_module_load_validates_shapes(tmp_path):
    enc = make_encoder()
    arrays = module_arrays(enc, "enc")
    other_cfg = ModelConfig(
        embed_dim=16, enc_depth=2, n_heads=2, pred_depth=2, pred_dim=8, patch_len=12
    )
    with pytest.raises(CheckpointError):
        load_module_arrays(Encoder(other_cfg), arrays, "enc")
    with pytest.raises(CheckpointError):
        load_module_arrays(Encoder(TOY), {}, "enc")
    # and a clean roundtrip restores every tensor exactly
    target = Encoder(TOY)
    load_module_arrays(target, arrays, "enc")
    for pa, pb in zip(enc.parameters(), target.parameters()):
        torch.testing.assert_close(pa, pb, atol=0, rtol=0)
