import numpy as np
import pytest
import yaml
from PIL import Image

from contifuse.cli import main
from contifuse.model import ContiFuse, ModelConfig, save_checkpoint

from conftest import synthetic_pairs, write_dataset

TINY_SETS = [
    "--set", "model.num_layers=1",
    "--set", "model.num_states=3",
    "--set", "model.base_width=4",
    "--set", "aug.crop_size=16",
    "--set", "train.warmup_epochs=0",
]  # fmt: skip


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_dataset(root / "data", synthetic_pairs(3, 20), color=True)
    out = root / "run"
    code = main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--batch-size", "2", *TINY_SETS])
    assert code == 0
    return data, out


def test_train_writes_run_directory(trained):
    _, out = trained
    assert (out / "checkpoint_epoch0000.pt").exists()
    assert (out / "checkpoint_epoch0001.pt").exists()
    assert (out / "train_log.csv").read_text().count("\n") == 3
    cfg = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert cfg["model.num_states"] == 3
    assert cfg["train.epochs"] == 1
    assert cfg["train.batch_size"] == 2


def test_fuse_single_pair_color_and_gray(trained, tmp_path):
    data, out = trained
    ckpt = str(out / "checkpoint_epoch0001.pt")
    ir, vis = str(data / "ir/p000.png"), str(data / "vi/p000.png")
    assert main(["fuse", "--checkpoint", ckpt, "--ir", ir, "--vis", vis, "--out", str(tmp_path / "c")]) == 0
    color = Image.open(tmp_path / "c" / "p000.png")
    assert color.mode == "RGB" and color.size == (20, 20)
    args = ["fuse", "--checkpoint", ckpt, "--ir", ir, "--vis", vis, "--out", str(tmp_path / "g"), "--grayscale"]
    assert main(args) == 0
    assert Image.open(tmp_path / "g" / "p000.png").mode == "L"


def test_fuse_directory(trained, tmp_path):
    data, out = trained
    ckpt = str(out / "checkpoint_epoch0001.pt")
    assert main(["fuse", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["p000.png", "p001.png", "p002.png"]


def test_fuse_reports_partial_failure(trained, tmp_path):
    data, out = trained
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"junk")
    args = ["fuse", "--checkpoint", str(out / "checkpoint_epoch0001.pt"), "--out", str(tmp_path / "o")]
    args += ["--ir", str(data / "ir/p000.png"), str(bad), "--vis", str(data / "vi/p000.png"), str(bad)]
    assert main(args) == 1
    assert (tmp_path / "o" / "p000.png").exists()


def test_dump_states(tmp_path):
    ckpt = save_checkpoint(tmp_path / "m.pt", ContiFuse(ModelConfig(num_layers=2, num_states=7, base_width=4)))
    data = write_dataset(tmp_path / "data", synthetic_pairs(1, 12))
    args = ["dump-states", "--checkpoint", str(ckpt), "--ir", str(data / "ir/p000.png")]
    args += ["--vis", str(data / "vi/p000.png"), "--layer", "2", "--out", str(tmp_path / "s")]
    assert main(args) == 0
    files = sorted(p.name for p in (tmp_path / "s").iterdir())
    assert len(files) == 9
    assert files[0] == "p000_layer2_state00.png"
    assert Image.open(tmp_path / "s" / files[0]).size == (3, 3)
    args[args.index("2")] = "3"
    assert main(args) == 2


def test_eval(trained, tmp_path, capsys):
    data, out = trained
    fused = tmp_path / "fused"
    main(["fuse", "--checkpoint", str(out / "checkpoint_epoch0001.pt"), "--data", str(data), "--out", str(fused)])
    capsys.readouterr()
    report = tmp_path / "r.csv"
    args = ["eval", "--fused", str(fused), "--ir", str(data / "ir"), "--vis", str(data / "vi")]
    assert main([*args, "--report", str(report)]) == 0
    printed = capsys.readouterr().out
    assert "mean (n=3)" in printed and "Qabf" in printed
    assert report.read_text().splitlines()[-1].startswith("mean,")
    assert main([*args, "--metrics", "sf,MI"]) == 0
    header = [l for l in capsys.readouterr().out.splitlines() if l.startswith("image_id")][0]
    assert header.split() == ["image_id", "SF", "MI"]
    assert main([*args, "--metrics", "psnr"]) == 2


def test_eval_missing_fused_images(trained, tmp_path):
    data, _ = trained
    fused = tmp_path / "fused"
    fused.mkdir()
    args = ["eval", "--fused", str(fused), "--ir", str(data / "ir"), "--vis", str(data / "vi")]
    assert main(args) == 1
    Image.fromarray(np.zeros((20, 20), np.uint8)).save(fused / "p001.png")
    assert main(args) == 1


def test_bench_single_row(capsys):
    assert main(["bench-sds", "--k", "5", "--trials", "1", "--layers", "1", "--size", "8"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert lines[1].split()[:3] == ["5", "20", "12"]


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train.epochz: 3\nmodel.num_states: 0\n")
    code = main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "train.epochz" in err and "num_states" in err


def test_missing_dataset_is_partial_failure(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 1


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.pt").write_bytes(b"nope")
    args = ["fuse", "--checkpoint", str(tmp_path / "x.pt"), "--ir", "a", "--vis", "b", "--out", str(tmp_path)]
    assert main(args) == 2
