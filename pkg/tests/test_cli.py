"""End-to-end CLI flows, config resolution, and exit codes."""

import numpy as np
import pytest

from langtail import data_model as dm
from langtail.cli import load_config_file, main, parse_granularities, SYNTH_KEYS
from langtail.errors import ConfigError

SMALL_SYNTH = ["--n-classes", "3", "--points-per-scene", "120",
               "--n-scenes", "2", "--seed", "5"]
SMALL_TRAIN = ["--granularities", "4", "--epochs", "2", "--recluster-every", "2",
               "--lambda", "0", "--use-global", "false", "--feat-dim", "8",
               "--hidden-dim", "8", "--warmup-epochs", "0", "--batch-scenes", "2"]


def test_parse_granularities():
    assert parse_granularities("120,80,20") == (120, 80, 20)
    assert parse_granularities((5, 2)) == (5, 2)
    with pytest.raises(ConfigError):
        parse_granularities("a,b")


def test_config_file_parsing(tmp_path):
    p = tmp_path / "synth.cfg"
    p.write_text("# comment\nn_classes = 4\nout = corpus  # inline\n\nseed=7\n")
    cfg = load_config_file(p, SYNTH_KEYS)
    assert cfg["n_classes"] == 4
    assert cfg["seed"] == 7
    assert cfg["out"] == str(tmp_path / "corpus")  # relative to the config file


def test_config_file_unknown_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("bogus = 1\n")
    with pytest.raises(ConfigError):
        load_config_file(p, SYNTH_KEYS)


def test_synth_then_train_then_eval(tmp_path, capsys):
    corpus = str(tmp_path / "corpus")
    out = str(tmp_path / "out")
    assert main(["synth", "--out", corpus] + SMALL_SYNTH) == 0
    assert (tmp_path / "corpus" / "manifest.tsv").exists()
    assert (tmp_path / "corpus" / "config.resolved").exists()

    assert main(["train", "--corpus", corpus, "--out", out] + SMALL_TRAIN) == 0
    for rel in ("checkpoint.ltck", "losses.tsv", "prototypes.ltfm",
                "pred.ltlb", "config.resolved"):
        assert (tmp_path / "out" / rel).exists(), rel

    rc = main(["eval", "--pred", f"{out}/pred.ltlb",
               "--gt", f"{corpus}/labels.ltlb", "--out", str(tmp_path / "ev")])
    assert rc == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("OA=")
    assert (tmp_path / "ev" / "report.tsv").exists()


def test_cli_baseline_flag(tmp_path):
    corpus = str(tmp_path / "corpus")
    assert main(["synth", "--out", corpus] + SMALL_SYNTH) == 0
    rc = main(["train", "--corpus", corpus, "--out", str(tmp_path / "b"),
               "--baseline", "true"] + SMALL_TRAIN)
    assert rc == 0
    assert (tmp_path / "b" / "losses.tsv").exists()


def test_cli_flag_overrides_config_file(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("n_classes = 3\npoints_per_scene = 120\nn_scenes = 1\n"
                   "seed = 1\nout = corpus\n")
    assert main(["synth", "--config", str(cfg), "--n-scenes", "2"]) == 0
    manifest = (tmp_path / "corpus" / "manifest.tsv").read_text()
    assert len(manifest.strip().splitlines()) == 2
    resolved = (tmp_path / "corpus" / "config.resolved").read_text()
    assert "n_scenes = 2" in resolved


def test_cli_transfer_and_report(tmp_path, capsys):
    protos = tmp_path / "p.ltfm"
    feats = tmp_path / "f.ltfm"
    rng = np.random.default_rng(0)
    dm.write_feature_matrix(protos, rng.normal(size=(4, 3)).astype(np.float32))
    dm.write_feature_matrix(feats, rng.normal(size=(20, 3)).astype(np.float32))
    out = tmp_path / "t.ltlb"
    assert main(["transfer", "--prototypes", str(protos),
                 "--features", str(feats), "--out", str(out)]) == 0
    labels = dm.read_labels(out)
    assert labels.shape == (20,)

    gt = tmp_path / "gt.ltlb"
    dm.write_labels(gt, rng.integers(0, 3, size=20))
    assert main(["report", "--pred", str(out), "--gt", str(gt)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "class\tcount\tiou\trecall\tabsorbed"


def test_cli_exit_codes(tmp_path):
    # usage error: missing required option
    assert main(["synth", "--n-classes", "3"]) == 1
    # usage error: unknown config key
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "c")]) == 1
    # data error: unreadable corpus
    assert main(["train", "--corpus", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")] + SMALL_TRAIN) == 2
    # no subcommand
    assert main([]) == 1


def test_cli_data_error_on_corrupt_file(tmp_path):
    p = tmp_path / "x.ltlb"
    p.write_bytes(b"XXXX" + b"\x00" * 12)
    assert main(["eval", "--pred", str(p), "--gt", str(p)]) == 2
