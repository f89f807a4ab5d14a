import csv
import subprocess
import sys

import numpy as np
import pytest

from vgn.checkpoint import load_checkpoint, params_equal
from vgn.cli import main
from vgn.data import load_dataset, read_prob_png, write_prob_png
from vgn.graph import VesselGraph
from vgn.trainer import TrainConfig

SMALL = ["--stages", "2", "--base-width", "4", "--tap-channels", "4",
         "--pretrain-iterations", "6", "--iterations", "4", "--k-gc", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n-samples", "2", "--extent", "32",
                 "--seed", "5"]) == 0
    return root


def test_synth_layout(workdir):
    samples = load_dataset(workdir / "data")
    assert [s.id for s in samples] == ["synth_000", "synth_001"]
    assert samples[0].image.shape == (32, 32, 1)


def test_pretrain_then_train(workdir):
    d = workdir
    assert main(["pretrain", "--data", str(d / "data"), "--out", str(d / "pre"),
                 "--log", str(d / "pre.csv")] + SMALL) == 0
    assert main(["train", "--data", str(d / "data"), "--init", str(d / "pre"),
                 "--out", str(d / "ck"), "--log", str(d / "log.csv"), "--lr-cnn", "0"] + SMALL) == 0
    pre, ck = load_checkpoint(d / "pre"), load_checkpoint(d / "ck")
    for name, p in pre.params.items():
        if name.startswith("cnn."):
            assert p.value.tobytes() == ck.params[name].value.tobytes()
    with open(d / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    with open(d / "pre.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and all(r["L_GCN"] == "nan" for r in rows)
    stored = TrainConfig.load(d / "ck" / "train_config.txt")
    assert stored.iterations == 4 and stored.base_width == 4


def test_train_without_init_pretrains(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "ck"),
                 "--log", str(tmp_path / "j.csv")] + SMALL) == 0
    assert (tmp_path / "j.pretrain.csv").is_file()
    assert (tmp_path / "ck" / "manifest.txt").is_file()


def test_config_file_precedence(workdir, tmp_path):
    (tmp_path / "c.txt").write_text("iterations = 3\nk_gc = 1\n")
    assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "ck"),
                 "--config", str(tmp_path / "c.txt")] + SMALL[:8] + ["--k-gc", "5"]) == 0
    cfg = TrainConfig.load(tmp_path / "ck" / "train_config.txt")
    assert cfg.iterations == 3 and cfg.k_gc == 5


def test_infer_and_eval(workdir, tmp_path):
    d = workdir
    if not (d / "ck").exists():
        test_pretrain_then_train(d)
    assert main(["infer", "--checkpoint", str(d / "ck"), "--data", str(d / "data"),
                 "--out", str(tmp_path / "vgn")]) == 0
    assert main(["infer", "--checkpoint", str(d / "ck"), "--data", str(d / "data"),
                 "--out", str(tmp_path / "cnn"), "--cnn-only"]) == 0
    p = read_prob_png(tmp_path / "vgn" / "synth_000.png")
    assert p.shape == (32, 32) and 0.0 <= p.min() and p.max() <= 1.0
    assert main(["eval", "--data", str(d / "data"), "--pred", f"VGN={tmp_path / 'vgn'}",
                 "--pred", str(tmp_path / "cnn"), "--out", str(tmp_path / "rep")]) == 0
    names = sorted(x.name for x in (tmp_path / "rep").iterdir())
    assert names == ["curve_VGN.csv", "curve_cnn.csv", "pr_curves.svg", "summary.csv"]


def test_infer_single_image(workdir, tmp_path):
    d = workdir
    if not (d / "ck").exists():
        test_pretrain_then_train(d)
    img = d / "data" / "images" / "synth_001.png"
    assert main(["infer", "--checkpoint", str(d / "ck"), "--image", str(img),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "synth_001.png").is_file()


def test_construct_graph(tmp_path):
    prob = np.zeros((20, 30))
    prob[10, 2:28] = 0.9
    write_prob_png(tmp_path / "p.png", prob)
    assert main(["construct-graph", "--prob", str(tmp_path / "p.png"), "--out",
                 str(tmp_path / "g.txt"), "--delta", "5"]) == 0
    g = VesselGraph.load(tmp_path / "g.txt")
    assert g.n >= 2 and all(r == 10 for r, _ in g.coordinate_set())


def test_bad_checkpoint_exit_code(tmp_path, capsys):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.txt").write_text("not a checkpoint\n")
    (tmp_path / "ck" / "params.bin").write_bytes(b"")
    assert main(["infer", "--checkpoint", str(tmp_path / "ck"), "--image",
                 str(tmp_path / "nothing.png"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err.lower()


def test_missing_dataset(tmp_path):
    with pytest.raises(SystemExit):
        main(["pretrain", "--data", str(tmp_path), "--out", str(tmp_path / "o")])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vgn", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("pretrain", "train", "infer", "construct-graph", "eval", "synth"):
        assert cmd in out.stdout


def test_trained_checkpoint_matches_in_process(workdir, tmp_path):
    """The CLI and the library produce the same parameters from the same inputs."""
    from vgn.trainer import pretrain_cnn, train_vgn
    assert main(["train", "--data", str(workdir / "data"), "--out", str(tmp_path / "ck")]
                + SMALL) == 0
    cfg = TrainConfig.load(tmp_path / "ck" / "train_config.txt")
    samples = load_dataset(workdir / "data")
    model = train_vgn(samples, pretrain_cnn(samples, cfg), cfg)
    assert params_equal(model, load_checkpoint(tmp_path / "ck"))
