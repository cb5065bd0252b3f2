import json

import numpy as np
import pytest

from ssg.cli import main
from ssg.config import ConfigError, load_config
from ssg.types import ModelParams, load_dataset

SMALL = ["--num_identities", "6", "--samples_per_identity", "10", "--seed", "3"]
QUICK = ["--pretrain_epochs", "3", "--adapt_epochs", "1", "--outer_iterations", "2", "--rho", "0.1"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["gen-synth", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--source", str(synth_dir / "source.txt"), "--out", str(out), *QUICK]) == 0
    return out


def _same_model(a, b):
    pa, pb = ModelParams.load(a), ModelParams.load(b)
    return all(np.array_equal(getattr(pa, n), getattr(pb, n)) for n in ModelParams.NAMES)


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "adapt" in capsys.readouterr().out
    assert main(["adapt", "--help"]) == 0


def test_unknown_mode_is_rejected():
    assert main(["transmogrify"]) != 0


def test_missing_input_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.txt"
    assert main(["pretrain", "--source", str(missing), "--out", str(tmp_path / "o")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_flag_beats_config_file(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("margin=0.3\n")
    assert load_config(conf).values["margin"] == 0.3
    assert load_config(conf, {"margin": "0.7"}).pipeline().triplet.margin == 0.7


def test_flag_beats_file_through_the_cli(synth_dir, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("margin=0.3\npretrain_epochs=1\n")
    out = tmp_path / "o"
    assert main(["pretrain", "--config", str(conf), "--margin", "0.7",
                 "--source", str(synth_dir / "source.txt"), "--out", str(out)]) == 0
    assert "margin=0.7\n" in (out / "resolved_config").read_text()


def test_misspelled_key_is_named(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("marginn=0.3\n")
    with pytest.raises(ConfigError, match="marginn"):
        load_config(conf)
    assert main(["eval", "--config", str(conf), "--model", "m", "--query", "q", "--gallery", "g"]) != 0
    assert "marginn" in capsys.readouterr().err


def test_bad_value_type_is_reported():
    with pytest.raises(ConfigError, match="P"):
        load_config(overrides={"P": "sixteen"})


def test_empty_config_gives_defaults(tmp_path):
    conf = tmp_path / "empty.conf"
    conf.write_text("# nothing\n")
    pipe = load_config(conf).pipeline()
    assert pipe.triplet.margin == 0.5
    assert (pipe.triplet.P, pipe.triplet.K) == (16, 8)
    assert (pipe.train.pretrain_lr, pipe.train.pretrain_lr_decayed) == (3e-4, 3e-5)
    assert (pipe.train.pretrain_epochs, pipe.train.pretrain_decay_epoch) == (150, 100)


def test_threads_env_default(monkeypatch, synth_dir, tmp_path):
    monkeypatch.setenv("SSG_THREADS", "3")
    out = tmp_path / "o"
    assert main(["cluster", "--model", str(tmp_path / "absent.npz"), "--target",
                 str(synth_dir / "target_train.txt"), "--out", str(out)]) != 0
    assert main(["gen-synth", "--out", str(out), *SMALL]) == 0
    assert "threads=3\n" in (out / "resolved_config").read_text()


def test_gen_synth_writes_four_sets(synth_dir):
    for name in ("source", "target_train", "query", "gallery"):
        ds = load_dataset(synth_dir / f"{name}.txt")
        assert len(ds) > 0


def test_resolved_config_reproduces_the_run(synth_dir, pretrained, tmp_path):
    again = tmp_path / "again"
    assert main(["pretrain", "--config", str(pretrained / "resolved_config"), "--out", str(again),
                 "--source", str(synth_dir / "source.txt")]) == 0
    assert _same_model(pretrained / "model.npz", again / "model.npz")
    assert (pretrained / "pretrain_trace.json").read_text() == (again / "pretrain_trace.json").read_text()


def test_pretrain_adapt_eval_flow(synth_dir, pretrained, tmp_path, capsys):
    out = tmp_path / "adapt"
    evals = ["--query", str(synth_dir / "query.txt"), "--gallery", str(synth_dir / "gallery.txt")]
    assert main(["adapt", "--model", str(pretrained), "--target", str(synth_dir / "target_train.txt"),
                 "--out", str(out), *evals, *QUICK]) == 0
    history = json.loads((out / "history.json").read_text())
    assert 1 <= len(history) <= 2 and "clusters_per_view" in history[0]
    capsys.readouterr()
    assert main(["eval", "--model", str(out / "model.npz"), *evals]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((out / "metrics.json").read_text())
    assert 0.0 <= printed["mAP"] <= 1.0


def test_cluster_writes_label_table(synth_dir, pretrained, tmp_path):
    out = tmp_path / "cl"
    assert main(["cluster", "--model", str(pretrained), "--target", str(synth_dir / "target_train.txt"),
                 "--out", str(out), "--rho", "0.1"]) == 0
    lines = (out / "label_table.csv").read_text().splitlines()
    assert len(lines) == 1 + len(load_dataset(synth_dir / "target_train.txt"))


def test_annotation_round_trip(synth_dir, pretrained, tmp_path):
    target = synth_dir / "target_train.txt"
    out = tmp_path / "semi"
    base = ["adapt-semi", "--model", str(pretrained), "--target", str(target), "--out", str(out), *QUICK]
    assert main(base) == 0
    request = (out / "to_annotate.csv").read_text().splitlines()
    assert request[0] == "sample_id,cluster_id" and len(request) > 1
    assert not (out / "model.npz").exists()

    truth = {s.sample_id: s.identity for s in load_dataset(target).samples}
    answers = tmp_path / "answers.csv"
    answers.write_text("sample_id,identity\n" + "".join(
        f"{sid},{truth[int(sid)]}\n" for sid, _ in (r.split(",") for r in request[1:])))
    assert main(base + ["--annotations", str(answers)]) == 0
    assert (out / "model.npz").exists()

    oracle_out = tmp_path / "oracle"
    assert main(["adapt-semi", "--model", str(pretrained), "--target", str(target),
                 "--out", str(oracle_out), "--oracle", *QUICK]) == 0
    assert _same_model(out / "model.npz", oracle_out / "model.npz")


def test_required_path_may_come_from_config(synth_dir, tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path / "o")]) != 0
    assert "--source" in capsys.readouterr().err
    conf = tmp_path / "paths.conf"
    conf.write_text(f"source={synth_dir / 'source.txt'}\npretrain_epochs=1\n")
    assert main(["pretrain", "--config", str(conf), "--out", str(tmp_path / "o")]) == 0
