import csv
import hashlib
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from macnet.cli import (
    EXIT_INPUT,
    EXIT_OK,
    EXIT_USAGE,
    UsageError,
    main,
    read_config_file,
    resolve_settings,
)
from macnet.data import read_manifest
from macnet.metrics import read_report, report_from_confusion, write_report
from macnet.report import confusion_heatmap, f1_bar_chart, row_normalize, write_report_charts
from macnet.train import read_history

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(autouse=True)
def out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MACNET_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def bars(svg_bytes):
    return [r for r in ET.fromstring(svg_bytes).iter(f"{SVG}rect") if r.get("class") == "bar"]


def cells(svg_bytes):
    return [r for r in ET.fromstring(svg_bytes).iter(f"{SVG}rect") if r.get("class") == "cell"]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--events-per-class", "3", "--images-per-event", "2", "3",
                 "--size", "32", "--split", "0.6,0.2,0.2"]) == EXIT_OK
    run = root / "run"
    code = main(["train", "--manifest", str(root / "data" / "manifest.csv"), "--out", str(run),
                 "--epochs", "40", "--stop-at-train-accuracy", "1.0", "--batch-size", "8"])
    assert code == EXIT_OK
    return root, run


# synth and split


def test_synth_defaults(out_env, capsys):
    assert main(["synth"]) == EXIT_OK
    data = out_env / "synth"
    manifest_lines = (data / "manifest.csv").read_text().splitlines()
    with open(data / "stats.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    total = rows[-1]
    assert total[0] == "TOTAL"
    assert sum(int(v) for v in total[1::2]) == len(manifest_lines) - 1 == 80
    assert "wrote 80 images" in capsys.readouterr().out


def test_synth_same_seed_same_tree(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "3", "--classes", "3",
                     "--events-per-class", "2", "--size", "24"]) == EXIT_OK
    assert main(["synth", "--out", str(tmp_path / "c"), "--seed", "4", "--classes", "3",
                 "--events-per-class", "2", "--size", "24"]) == EXIT_OK
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b") != tree_digest(tmp_path / "c")


def test_split_merges_and_keeps_events_whole(tmp_path):
    for seed in (0, 1):
        main(["synth", "--out", str(tmp_path / f"d{seed}"), "--seed", str(seed), "--events-per-class", "4",
              "--size", "16"])
    out = tmp_path / "merged.csv"
    assert main(["split", "--manifest", str(tmp_path / "d0" / "manifest.csv"),
                 "--manifest", str(tmp_path / "d1" / "manifest.csv"), "--out", str(out)]) == EXIT_OK
    m = read_manifest(out)
    assert len(m.events) == 32 and m.num_images() == 128
    assert (tmp_path / "merged_stats.csv").exists()
    for name in m.class_names:
        assert m.class_counts("train")[m.class_index(name)] > 0
    lines = out.read_text().splitlines()[1:]
    split_of = {}
    for line in lines:
        _, _, event, split = line.split(",")
        assert split_of.setdefault(event, split) == split


# exit codes and help


@pytest.mark.parametrize("command", ["synth", "split", "train", "eval", "report"])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == EXIT_OK
    assert "--out" in capsys.readouterr().out


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "macnet.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("synth", "split", "train", "eval", "report"):
        assert sub in res.stdout


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == EXIT_USAGE
    main(["synth", "--out", str(tmp_path / "d"), "--events-per-class", "1", "--size", "16", "--split", "train"])
    manifest = str(tmp_path / "d" / "manifest.csv")
    assert main(["train", "--manifest", manifest, "--epochs", "0"]) == EXIT_USAGE
    assert main(["train", "--manifest", manifest, "--set", "nonsense=1"]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path / "e"), "--images-per-event", "3", "1"]) == EXIT_USAGE
    assert "epochs must be >= 1" in capsys.readouterr().err


def test_input_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "missing.csv")]) == EXIT_INPUT
    assert main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"), "--manifest", "x"]) == EXIT_INPUT
    assert main(["report", "--report", str(tmp_path)]) == EXIT_INPUT
    assert "missing" in capsys.readouterr().err


# settings


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nepochs = 7\nbatch_size = 4   # small\naugment = yes\natrous_rates = 1,2,3\n")
    file_values = read_config_file(cfg)
    assert file_values == {"epochs": 7, "batch_size": 4, "augment": True, "atrous_rates": (1, 2, 3)}
    s = resolve_settings(file_values, {"epochs": 2})
    assert (s["epochs"], s["batch_size"], s["augment"], s["base_lr"]) == (2, 4, True, 0.001)
    assert s["profile"] == "desk"


def test_config_unknown_key_names_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 3\n\nlearning_rate = 0.1\n")
    with pytest.raises(UsageError, match=r"bad.cfg:3: unknown key 'learning_rate'"):
        read_config_file(cfg)
    assert main(["train", "--config", str(cfg), "--manifest", "m.csv"]) == EXIT_USAGE


def test_paper_faithful_profile():
    s = resolve_settings({}, {}, paper_faithful=True)
    assert (s["epochs"], s["batch_size"], s["augment"], s["width_multiplier"]) == (100, 32, True, 1.0)
    assert s["stage_channels"] == (256, 512, 1024, 2048) and s["profile"] == "paper"
    desk = resolve_settings({}, {})
    assert (desk["epochs"], desk["batch_size"], desk["augment"]) == (200, 16, False)


# training, resume, eval through the CLI


def test_cli_train_reaches_full_train_accuracy(trained_run):
    _, run = trained_run
    history = read_history(run / "history.csv")
    assert history[-1]["train_top1"] == 1.0
    for name in ("config.txt", "manifest.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt",
                 "reports/test/f1_per_class.svg", "reports/test/confusion.csv", "reports/val/per_class.csv"):
        assert (run / name).exists(), name
    assert "input_size = 32,32" in (run / "config.txt").read_text()


def test_cli_resume_and_eval(trained_run, tmp_path):
    root, run = trained_run
    n = len(read_history(run / "history.csv"))
    assert main(["train", "--resume", str(run / "checkpoints" / "last.ckpt"), "--epochs", str(n + 1)]) == EXIT_OK
    history = read_history(run / "history.csv")
    assert [r["epoch"] for r in history] == list(range(n + 1))
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "checkpoints" / "last.ckpt"),
                 "--manifest", str(root / "data" / "manifest.csv"), "--split", "test", "--out", str(out)]) == 0
    rep = read_report(out)
    assert rep.num_samples == read_manifest(root / "data" / "manifest.csv").num_images("test")
    assert main(["report", "--report", str(out)]) == EXIT_OK
    assert len(bars((out / "f1_per_class.svg").read_bytes())) == 4


def test_cli_report_malformed_csv(tmp_path, capsys):
    write_report(report_from_confusion([[2, 1], [0, 3]], ["a", "b"]), tmp_path)
    lines = (tmp_path / "per_class.csv").read_text().splitlines()
    lines[2] = "b,3,0.75,oops,0.8"
    (tmp_path / "per_class.csv").write_text("\n".join(lines) + "\n")
    assert main(["report", "--report", str(tmp_path)]) == EXIT_INPUT
    assert "per_class.csv:3" in capsys.readouterr().err


# charts


def test_bar_chart_structure():
    svg = f1_bar_chart(["a", "b", "c"], [0.5, 0.0, 1.0])
    bs = bars(svg)
    assert [b.get("data-class") for b in bs] == ["a", "b", "c"]
    heights = [float(b.get("height")) for b in bs]
    assert heights[1] == 0.0 and heights[2] == 2 * heights[0] > 0


def test_perfect_report_charts(tmp_path):
    names = [f"class_{i}" for i in range(5)]
    rep = report_from_confusion(np.diag([3, 1, 4, 1, 5]), names)
    paths = write_report_charts(rep, tmp_path)
    assert all(float(b.get("data-f1")) == 1.0 for b in bars(paths["f1"].read_bytes()))
    cs = cells(paths["confusion"].read_bytes())
    assert len(cs) == 25
    for c in cs:
        expected = 1.0 if c.get("data-row") == c.get("data-col") else 0.0
        assert float(c.get("data-value")) == expected
    assert "macro_f1 = 1.000000" in paths["summary"].read_text()


def test_heatmap_rows_normalized():
    cm = np.array([[2, 1, 0], [0, 3, 0], [1, 0, 3]])
    values = np.zeros((3, 3))
    for c in cells(confusion_heatmap(["a", "b", "c"], cm)):
        values[int(c.get("data-row")), int(c.get("data-col"))] = float(c.get("data-value"))
    np.testing.assert_allclose(values, row_normalize(cm), atol=1e-6)
    np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-5)
    assert np.array_equal(row_normalize(np.zeros((2, 2))), np.zeros((2, 2)))


def test_charts_idempotent(tmp_path):
    rep = report_from_confusion([[2, 1, 0], [0, 3, 0], [1, 0, 3]], ["x", "y", "z"])
    a = write_report_charts(rep, tmp_path / "a")
    b = write_report_charts(read_report(write_report(rep, tmp_path / "b")), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_chart_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        f1_bar_chart(["a"], [0.1, 0.2])
    with pytest.raises(ValueError):
        confusion_heatmap(["a", "b"], np.eye(3))
