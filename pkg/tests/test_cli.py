"""End-to-end command tests: every subcommand against a toy corpus."""
import csv

import numpy as np
import pytest

from gridcast.cli import main
from gridcast.dataset import load_cache

TOY_CONFIG = """\
model_context_len = 12
model_horizon = 4
model_width = 16
model_gru_hidden = 8
model_embed_width = 2
model_guide_hidden = 6
model_n_layers = 2
model_n_heads = 2
model_adapted_blocks = 1
model_lora_rank = 2
model_intervals_per_day = 24
model_scale_hidden = 4
model_gate_hidden = 4
train_warmup_steps = 2
train_total_steps = 6
train_batch_size = 8
eval_batch_size = 16
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> prepare -> train once; downstream commands reuse it."""
    root = tmp_path_factory.mktemp("cli")
    tsv = root / "raw.tsv"
    cache = root / "grid.cache"
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CONFIG)
    assert main(["synth", "--out", str(tsv), "--grid-width", "4",
                 "--grid-height", "4", "--channels", "1", "--days", "20",
                 "--steps-per-day", "24"]) == 0
    assert main(["prepare", "--input", str(tsv), "--grid-width", "4",
                 "--clusters", "4", "--channels", "1", "--step-ms", "3600000",
                 "--out", str(cache)]) == 0
    train_dir = root / "train"
    assert main(["train", "--data", str(cache), "--config", str(cfg),
                 "--out", str(train_dir)]) == 0
    return {"root": root, "tsv": tsv, "cache": cache, "cfg": cfg,
            "train": train_dir}


def test_prepare_cache_is_loadable(workspace):
    ds = load_cache(workspace["cache"])
    assert ds.n_nodes == 4
    assert ds.n_channels == 1
    assert ds.n_steps == 480


def test_train_artifacts_exist(workspace):
    out = workspace["train"]
    for name in ("model.ckpt", "config.txt", "train_steps.csv",
                 "train_epochs.csv", "summary.txt", "loss_curve.png",
                 "metrics_predict.csv", "metrics_impute.csv",
                 "metrics_predict.png", "metrics_impute.png"):
        assert (out / name).exists(), name
    rows = read_csv(out / "train_steps.csv")
    assert len(rows) == 1 + 6  # header + total_steps
    summary = (out / "summary.txt").read_text()
    assert "config_hash = " in summary
    assert "params.trainable = " in summary
    assert "wall_time_s.train = " in summary


def test_eval_command(workspace, tmp_path):
    out = tmp_path / "eval"
    code = main(["eval", "--data", str(workspace["cache"]),
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--task", "impute", "--config", str(workspace["cfg"]),
                 "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "metrics_impute_test.csv")
    assert rows[0][0] == "task"
    assert all(row[0] == "impute" for row in rows[1:])


def test_eval_needs_no_config_file(workspace, tmp_path):
    """The checkpoint alone must pin the architecture."""
    out = tmp_path / "eval_bare"
    code = main(["eval", "--data", str(workspace["cache"]),
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--out", str(out)])
    assert code == 0
    assert (out / "metrics_predict_test.csv").exists()


def test_zeroshot_command(workspace, tmp_path):
    out = tmp_path / "zs"
    code = main(["zeroshot", "--source-ckpt",
                 str(workspace["train"] / "model.ckpt"),
                 "--target-data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    assert (out / "metrics_zeroshot_predict.csv").exists()
    summary = (out / "summary.txt").read_text()
    assert "reused_adjacency = false" in summary


def test_zeroshot_matches_eval_on_source(workspace, tmp_path):
    eval_out = tmp_path / "ev"
    zs_out = tmp_path / "zs"
    main(["eval", "--data", str(workspace["cache"]),
          "--ckpt", str(workspace["train"] / "model.ckpt"),
          "--task", "predict", "--config", str(workspace["cfg"]),
          "--out", str(eval_out)])
    main(["zeroshot", "--source-ckpt", str(workspace["train"] / "model.ckpt"),
          "--target-data", str(workspace["cache"]),
          "--config", str(workspace["cfg"]), "--out", str(zs_out)])
    direct = read_csv(eval_out / "metrics_predict_test.csv")
    transfer = read_csv(zs_out / "metrics_zeroshot_predict.csv")
    assert [r[4:6] for r in direct[1:]] == [r[4:6] for r in transfer[1:]]


def test_ablate_command(workspace, tmp_path):
    out = tmp_path / "ab"
    code = main(["ablate", "--which", "gs", "--data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    assert (out / "metrics_predict_wo_gs.csv").exists()
    assert (out / "metrics_impute_wo_gs.csv").exists()
    assert "ablation = gs" in (out / "summary.txt").read_text()


def test_dump_attention_row_counts(workspace, tmp_path):
    out = tmp_path / "dump"
    code = main(["dump", "--what", "attention",
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]),
                 "--sample", "4", "--out", str(out)])
    assert code == 0
    for layer in range(2):
        rows = read_csv(out / f"attention_l{layer}.csv")
        assert len(rows) == 1 + 12      # header + context_len
        assert len(rows[1]) == 12
        # causal prediction dump: strictly upper entries are exactly zero
        assert float(rows[1][5]) == 0.0
    assert (out / "attention_l0.png").exists()


def test_dump_adjacency_symmetric(workspace, tmp_path):
    out = tmp_path / "dump"
    code = main(["dump", "--what", "adjacency",
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "adjacency.csv")
    matrix = np.array([[float(v) for v in row] for row in rows[1:]])
    assert matrix.shape == (4, 4)
    np.testing.assert_allclose(matrix, matrix.T, atol=1e-6)


def test_dump_features_column_contract(workspace, tmp_path):
    out = tmp_path / "dump"
    code = main(["dump", "--what", "features",
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]),
                 "--sample", "3", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "features.csv")
    assert rows[0][-1] == "hour_of_week"
    assert len(rows[0]) == 16 + 1       # model width + label
    assert len(rows) == 1 + 3 * 12      # windows x context_len
    hours = {int(row[-1]) for row in rows[1:]}
    assert hours <= set(range(168))


def test_dump_bias_matrix(workspace, tmp_path):
    out = tmp_path / "dump"
    code = main(["dump", "--what", "bias", "--task", "impute",
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "bias.csv")
    assert len(rows) == 1 + 12
    matrix = np.array([[float(v) for v in row] for row in rows[1:]])
    assert np.isfinite(matrix).all()


def test_error_single_line_and_nonzero(workspace, tmp_path, capsys):
    code = main(["eval", "--data", str(tmp_path / "missing.cache"),
                 "--ckpt", str(workspace["train"] / "model.ckpt"),
                 "--out", str(tmp_path / "x")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("gridcast: error: ")


def test_usage_error_exits_2(workspace, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["dump", "--what", "gradients",
              "--ckpt", "x", "--data", "y", "--out", str(tmp_path)])
    assert info.value.code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("gridcast: error: ")


def test_bad_config_key_is_single_line_error(workspace, tmp_path, capsys):
    code = main(["train", "--data", str(workspace["cache"]),
                 "--config", str(workspace["cfg"]),
                 "--set", "train_lrr=5", "--out", str(tmp_path / "t")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("gridcast: error: unknown config keys")


def test_prepare_is_byte_deterministic(workspace, tmp_path):
    out1, out2 = tmp_path / "c1.cache", tmp_path / "c2.cache"
    for out in (out1, out2):
        assert main(["prepare", "--input", str(workspace["tsv"]),
                     "--grid-width", "4", "--clusters", "4", "--channels", "1",
                     "--step-ms", "3600000", "--out", str(out)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_train_outputs_byte_deterministic(workspace, tmp_path):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert main(["train", "--data", str(workspace["cache"]),
                     "--config", str(workspace["cfg"]),
                     "--out", str(out)]) == 0
    for name in ("train_steps.csv", "train_epochs.csv", "metrics_predict.csv",
                 "metrics_impute.csv", "model.ckpt", "config.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
