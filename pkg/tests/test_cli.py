import json

import numpy as np
import pytest

from gmlfm.cli import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    ConfigError,
    ExperimentConfig,
    cmd_evaluate,
    cmd_export_embeddings,
    cmd_recommend,
    main,
    read_config_file,
)
from gmlfm.evaluate import MetricsReport
from gmlfm.io import layout_from_header, load_model, vocabulary_from_header
from gmlfm.synthetic import make_implicit, write_synthetic


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.tsv"
    write_synthetic(path, make_implicit(n_users=120, n_items=120, n_categories=5, per_user=(3, 6),
                                           temperature=20.0, seed=1))
    return path


def train_args(data_file, out, *extra):
    return ["train", "--data", str(data_file), "--output-dir", str(out), "--epochs", "2",
            "--embed-dim", "4", "--batch-size", "64", *extra]


@pytest.fixture(scope="module")
def trained(data_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "exp"
    assert main(train_args(data_file, out)) == EXIT_OK
    return out


def test_train_writes_all_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"model.bin", "model.meta.json", "history.tsv", "metrics.txt", "config.txt"} <= names
    rep = MetricsReport.from_text((trained / "metrics.txt").read_text())
    assert rep.task == "topn" and 0 <= rep.hr <= 1 and rep.count == 120
    assert rep.config["toolkit_version"] and rep.config["kind"] == "dnn"
    hist = (trained / "history.tsv").read_text().splitlines()
    assert hist[0].startswith("# gmlfm")
    rows = [l for l in hist if not l.startswith("#")]
    assert rows[0].split("\t") == ["epoch", "train_loss", "val_metric", "wall_time"]
    assert len(rows) == 3
    meta = json.loads((trained / "model.meta.json").read_text())
    assert meta["hyper"]["k"] == 4
    cfg = ExperimentConfig.from_mapping(read_config_file(trained / "config.txt"))
    assert cfg.embed_dim == 4 and cfg.epochs == 2
    assert load_model(trained / "model.bin", expect_k=4)[2]["config"]["seed"] == 0


def test_train_is_deterministic(data_file, trained, tmp_path):
    out = tmp_path / "again"
    assert main(train_args(data_file, out)) == EXIT_OK
    assert (out / "metrics.txt").read_bytes() == (trained / "metrics.txt").read_bytes()
    assert (out / "model.bin").read_bytes() == (trained / "model.bin").read_bytes()


def test_refuses_to_overwrite(data_file, trained):
    assert main(train_args(data_file, trained)) == EXIT_CONFIG


def test_invalid_kind(data_file, tmp_path, capsys):
    assert main(train_args(data_file, tmp_path / "x", "--distance", "hamming")) == EXIT_CONFIG
    assert "unknown distance kind" in capsys.readouterr().err


def test_config_validation_names_key():
    with pytest.raises(ConfigError, match="lr"):
        ExperimentConfig.from_mapping({"lr": "fast"})
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_mapping({"bogus": 1})
    with pytest.raises(ConfigError, match="task"):
        ExperimentConfig.from_mapping({"task": "ranking"})
    with pytest.raises(ConfigError, match="layers"):
        ExperimentConfig.from_mapping({"kind": "dnn", "layers": 0})
    cfg = ExperimentConfig.from_mapping({"distance": "mahalanobis", "use_weight": "false", "layers": 3})
    assert cfg.spec().layers == 0 and not cfg.spec().use_weight


def test_config_file_and_rating_task(data_file, tmp_path):
    conf = tmp_path / "rating.conf"
    conf.write_text(f"# rating run\ntask=rating\ndata_path={data_file}\nkind=mahalanobis\nlayers=0\n"
                    f"embed_dim=4\nepochs=2\nbatch_size=64\noutput_dir={tmp_path / 'out'}\n")
    assert main(["train", "--config", str(conf), "--lr", "0.01"]) == EXIT_OK
    rep = MetricsReport.from_text((tmp_path / "out" / "metrics.txt").read_text())
    assert rep.task == "rating" and rep.rmse > 0 and rep.config["lr"] == 0.01


def test_missing_data_is_runtime_failure(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.tsv"), "--output-dir", str(tmp_path / "o"),
                 "--epochs", "1"]) == EXIT_RUNTIME
    assert "stage 'load'" in capsys.readouterr().err


def test_evaluate_matches_training_metrics(trained, tmp_path):
    rep = cmd_evaluate(trained / "model.bin", output=tmp_path / "m.txt")
    assert rep.to_text() == (trained / "metrics.txt").read_text()
    assert main(["evaluate", str(trained / "model.bin")]) == EXIT_OK


def test_evaluate_rejects_corrupt_model(trained, tmp_path, capsys):
    bad = tmp_path / "model.bin"
    raw = bytearray((trained / "model.bin").read_bytes())
    raw[100] ^= 1
    bad.write_bytes(bytes(raw))
    (tmp_path / "model.meta.json").write_text((trained / "model.meta.json").read_text())
    assert main(["evaluate", str(bad)]) == EXIT_RUNTIME
    assert "checksum" in capsys.readouterr().err


def test_recommend(trained, capsys):
    top1 = cmd_recommend(trained / "model.bin", "3", None, 1)
    assert len(top1) == 1
    full = cmd_recommend(trained / "model.bin", "3", None, 10_000)
    assert len(full) == 120
    assert full[0] == top1[0]
    assert [s for _, s in full] == sorted((s for _, s in full), reverse=True)
    cold = cmd_recommend(trained / "model.bin", "somebody-new", ["1", "2", "3"], 2)
    assert len(cold) == 2
    with pytest.raises(ConfigError, match="empty"):
        cmd_recommend(trained / "model.bin", "3", [], 5)
    assert main(["recommend", str(trained / "model.bin"), "--user", "0", "--top-k", "3"]) == EXIT_OK
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_export_embeddings(trained, tmp_path):
    text = cmd_export_embeddings(trained / "model.bin", "item", tmp_path / "emb.tsv")
    lines = text.splitlines()
    assert lines[0].startswith("# gmlfm")
    assert lines[1].split("\t") == ["category", "v0", "v1", "v2", "v3"]
    rows = [l.split("\t") for l in lines[2:]]
    assert len(rows) == 120 and all(len(r) == 5 for r in rows)
    params, _, header = load_model(trained / "model.bin")
    lay, vocab = layout_from_header(header), vocabulary_from_header(header)
    off = lay.offsets[lay.position("item")]
    for r in rows[:10]:
        idx = vocab.encode("item", r[0])
        np.testing.assert_array_equal([float(x) for x in r[1:]], params.V[off + idx])
    with pytest.raises(ConfigError, match="unknown field"):
        cmd_export_embeddings(trained / "model.bin", "colour")


def test_oracle_check_cli(capsys):
    assert main(["oracle-check", "--k", "4", "--m", "2,3", "--trials", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "overall\tPASS" in out and len(out.splitlines()) == 1 + 8 + 1
    assert main(["oracle-check", "--trials", "0"]) == EXIT_CONFIG


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--kinds", "dnn"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "dnn-w-l3" in out and "W3" in out
    assert main(["gradcheck", "--kinds", "bogus"]) == EXIT_CONFIG


def test_oracle_check_mutation_fails(monkeypatch, capsys):
    import gmlfm.cli as cli
    from gmlfm.checks import oracle_check
    from gmlfm.model import second_order_mahalanobis_fast

    def broken(active, V, M, h):
        return second_order_mahalanobis_fast(active, V, M, h) * (1 + 1e-6)

    monkeypatch.setattr(cli, "oracle_check",
                        lambda *a: oracle_check(*a, mahalanobis_fast=broken))
    assert main(["oracle-check", "--k", "4", "--m", "3", "--trials", "5"]) == EXIT_CHECK
    assert "mahalanobis\t0\t4\t3\t5" in capsys.readouterr().out


def test_ablation_presets_parse():
    from pathlib import Path

    from gmlfm.experiments import VARIANTS

    root = Path(__file__).resolve().parents[1] / "configs" / "ablation"
    found = {}
    for conf in sorted(root.glob("*.conf")):
        found[conf.stem] = ExperimentConfig.from_mapping(read_config_file(conf)).spec()
    assert found == VARIANTS
