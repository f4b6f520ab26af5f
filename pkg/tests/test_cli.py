import csv
import io

import numpy as np
import pytest

from ajepa import cli
from ajepa.data import SyntheticSpec, gen_synthetic, list_wavs, load_labeled, split_eval
from ajepa.errors import ConfigError
from ajepa.records import MetricsRecord
from ajepa.spectro import decode_wav


def read_pgm(path):
    data = path.read_bytes()
    assert data.startswith(b"P5\n")
    header, _, rest = data.partition(b"255\n")
    dims = header.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    assert len(rest) == w * h
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def test_gen_synthetic_counts_and_layout(tmp_path):
    spec = SyntheticSpec(n_classes=4, clips_per_class=5, duration_s=0.5, seed=1)
    paths = gen_synthetic(spec, tmp_path / "d")
    assert len(paths) == 20
    assert sorted({p.parent.name for p in paths}) == [f"class{i}" for i in range(4)]


def test_gen_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(n_classes=2, clips_per_class=3, duration_s=0.4, seed=9)
    a = gen_synthetic(spec, tmp_path / "a")
    b = gen_synthetic(spec, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_gen_synthetic_noiseless_peak(tmp_path):
    spec = SyntheticSpec(
        n_classes=2, clips_per_class=2, duration_s=0.4, noise_db=None, seed=2
    )
    for p in gen_synthetic(spec, tmp_path / "d"):
        w = decode_wav(p.read_bytes())
        assert np.abs(w.samples).max() <= 0.9 + 1 / 32768


def test_split_eval_classes_disjoint(tmp_path):
    spec = SyntheticSpec(n_classes=3, clips_per_class=5, duration_s=0.4, seed=0)
    gen_synthetic(spec, tmp_path / "d")
    items, names = load_labeled(tmp_path / "d")
    train, eval_ = split_eval(items, 0.2)
    assert len(train) == 12 and len(eval_) == 3
    assert not set(p for p, _ in train) & set(p for p, _ in eval_)
    assert {c for _, c in eval_} == {0, 1, 2}


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# desk overrides\n"
        "\n"
        "embed_dim = 32\n"
        "total_steps = 64\n"
        "warmup_steps = 8\n"
        "block_scale_min = 0.10\n"
        "kind = linear\n"
        "target_frames = 64\n"
        "patch_h = 8\n"
    )
    setup = cli.build_setup(cli.parse_config_file(cfg))
    assert setup.model.embed_dim == 32
    assert setup.model.patch_len == 8 * 16
    assert setup.optimizer.total_steps == 64
    assert setup.sampler.block_scale == (0.10, 0.20)
    assert setup.resolved_schedule().kind == "linear"
    assert setup.resolved_schedule().total_steps == 64
    assert setup.frontend.grid == (8, 8)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError):
        cli.build_setup({"not_a_key": "1"})


def test_config_bad_syntax_and_duplicates(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("embed_dim 32\n")
    with pytest.raises(ConfigError):
        cli.parse_config_file(bad)
    dup = tmp_path / "dup.cfg"
    dup.write_text("embed_dim = 32\nembed_dim = 64\n")
    with pytest.raises(ConfigError):
        cli.parse_config_file(dup)


def test_config_bad_value(tmp_path):
    with pytest.raises(ConfigError):
        cli.build_setup({"embed_dim": "lots"})


# ---------------------------------------------------------------------------
# metrics records
# ---------------------------------------------------------------------------

def test_metrics_record_validation():
    rec = MetricsRecord(("step", "loss"))
    rec.append(step=0, loss=1.0)
    with pytest.raises(ConfigError):
        rec.append(step=1)  # missing cell
    with pytest.raises(ConfigError):
        rec.append(step=0, loss=1.0, extra=2.0)
    rec.append(step=1, loss=0.5)
    with pytest.raises(ConfigError):
        rec.append(step=0, loss=0.1)  # non-monotone


def test_metrics_csv_roundtrip(tmp_path):
    rec = MetricsRecord(("step", "loss"))
    rec.append(step=0, loss=0.125)
    rec.append(step=1, loss=1.0)
    path = tmp_path / "m.csv"
    rec.write_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss"]
    assert [float(x) for x in rows[1]] == [0.0, 0.125]
    assert [float(x) for x in rows[2]] == [1.0, 1.0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def test_masks_subcommand_writes_plan_and_pgm(tmp_path, capsys):
    out = tmp_path / "plan.pgm"
    code = cli.run([
        "masks", "--grid", "8x8", "--seed", "1", "--step", "0",
        "--total-steps", "100", "--out", str(out),
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "mode: block" in printed and "context (" in printed
    img = read_pgm(out)
    assert img.shape == (128, 128)
    assert set(np.unique(img)) <= {0, 128, 255}
    assert (img == 128).any() and (img == 255).any()


def test_masks_forced_tf_on_wide_grid(tmp_path, capsys):
    out = tmp_path / "plan.pgm"
    code = cli.run([
        "masks", "--grid", "64x8", "--mode", "tf", "--seed", "3",
        "--step", "0", "--total-steps", "10", "--out", str(out),
    ])
    assert code == 0
    assert "mode: time_frequency" in capsys.readouterr().out


def test_masks_bad_grid_is_usage_error(tmp_path, capsys):
    code = cli.run(["masks", "--grid", "8by8"])
    assert code == 1


def test_missing_required_flag_exits_1(capsys):
    code = cli.run(["pretrain", "--out", "/tmp/x"])
    assert code == 1
    assert "--data" in capsys.readouterr().err


def test_unknown_subcommand_exits_1(capsys):
    code = cli.run(["transmogrify"])
    assert code == 1
    err = capsys.readouterr().err
    assert "pretrain" in err  # listing of valid choices


def test_help_exits_0(capsys):
    assert cli.run(["--help"]) == 0
    assert cli.run(["pretrain", "--help"]) == 0


def test_runtime_error_exits_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = cli.run([
        "pretrain", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o"),
    ])
    assert code == 2


@pytest.fixture(scope="module")
def mini_config(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "mini.cfg"
    cfg.write_text(
        "total_steps = 8\n"
        "warmup_steps = 2\n"
        "batch_size = 8\n"
        "embed_dim = 32\n"
        "enc_depth = 2\n"
        "pred_depth = 2\n"
        "pred_dim = 16\n"
    )
    return cfg


def test_full_cli_pipeline(tmp_path, mini_config, capsys):
    data = tmp_path / "data"
    code = cli.run([
        "gen-data", "--out", str(data), "--classes", "4",
        "--clips-per-class", "5", "--duration", "1.5", "--seed", "3",
    ])
    assert code == 0
    assert len(list_wavs(data)) == 20

    out = tmp_path / "pre"
    code = cli.run([
        "pretrain", "--data", str(data), "--out", str(out),
        "--config", str(mini_config), "--seed", "3", "--log-every", "0",
    ])
    assert code == 0
    ckpt = out / "checkpoint_final.ajepa"
    assert ckpt.exists()
    with open(out / "pretrain_loss.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "f_s", "mode_tf_fraction", "lr"]
    assert len(rows) == 1 + 8
    assert all(len(r) == 5 for r in rows[1:])

    code = cli.run([
        "probe", "--data", str(data), "--init", str(ckpt),
        "--config", str(mini_config), "--epochs", "60",
        "--out", str(tmp_path / "probe"), "--compare-random",
    ])
    assert code == 0
    assert "random-encoder probe" in capsys.readouterr().out
    assert (tmp_path / "probe" / "probe_metrics.csv").exists()

    ft = tmp_path / "ft"
    code = cli.run([
        "finetune", "--data", str(data), "--init", str(ckpt), "--out", str(ft),
        "--config", str(mini_config), "--epochs", "2", "--rm-ratio", "0.1",
    ])
    assert code == 0
    assert (ft / "classifier.ajepa").exists()
    assert (ft / "finetune_metrics.csv").exists()

    code = cli.run([
        "eval", "--data", str(data), "--ckpt", str(ft / "classifier.ajepa"),
        "--config", str(mini_config),
    ])
    assert code == 0

    wav = next(iter(list_wavs(data)))
    spec_out = tmp_path / "spec.pgm"
    code = cli.run([
        "dump-spec", "--wav", str(wav), "--out", str(spec_out),
        "--config", str(mini_config),
    ])
    assert code == 0
    img = read_pgm(spec_out)
    assert img.shape == (128, 128)
    assert img.max() == 255 and img.min() == 0
