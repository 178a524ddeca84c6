import yaml
import pytest
import torch

from srstar import cli
from srstar.pngio import list_pngs, read_png, write_png
from srstar.trainer import TrainConfig, TrainState, save_checkpoint

TINY = ["--generator.base_channels", "8", "--generator.res_blocks", "1", "--disc_base_channels", "4",
        "--batch_size", "2"]


@pytest.fixture()
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    from srstar.models import GeneratorConfig
    cfg = TrainConfig(patch=64, generator=GeneratorConfig(base_channels=8, res_blocks=1), disc_base_channels=4)
    return save_checkpoint(TrainState(cfg), tmp_path_factory.mktemp("ck") / "tiny.safetensors")


def test_overrides_parse_nested_and_typed():
    got = cli.parse_overrides(["--batch-size", "8", "--aug.mixup_alpha=0.7", "--flip_rotate", "false"])
    assert got == {"batch_size": 8, "aug": {"mixup_alpha": 0.7}, "flip_rotate": False}
    with pytest.raises(cli.UsageError):
        cli.parse_overrides(["--seed"])


def test_config_precedence(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"seed": 5, "batch_size": 8, "aug": {"mixup_alpha": 0.9}}))
    cfg = cli.build_config(str(f), {"batch_size": 2}, desk_scale=True)
    assert (cfg.seed, cfg.batch_size, cfg.patch, cfg.aug.mixup_alpha) == (5, 2, 64, 0.9)
    assert cli.build_config(None, {}).batch_size == 16


def test_synth_writes_three_domains(tmp_path, desk_root):
    out = tmp_path / "lr"
    assert cli.main(["synth", "--hr", str(desk_root / "HR"), "--out", str(out)]) == 0
    names = {d: [p.name for p in list_pngs(out / d)] for d in ("bicubic", "bilinear", "nearest")}
    assert sum(len(v) for v in names.values()) == 24
    assert read_png(out / "bicubic" / "img_000.png").shape == (3, 32, 32)
    first = (out / "nearest" / "img_003.png").read_bytes()
    cli.main(["synth", "--hr", str(desk_root / "HR"), "--out", str(out)])
    assert (out / "nearest" / "img_003.png").read_bytes() == first


def test_synth_empty_input(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["synth", "--hr", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_train_invalid_mode_names_flag(runs, desk_root, capsys):
    assert cli.main(["train", "--data", str(desk_root), "--mode", "v7"]) == cli.EXIT_CONFIG
    assert "--mode" in capsys.readouterr().err


def test_train_lists_all_config_problems(runs, desk_root, capsys):
    code = cli.main(["train", "--data", str(desk_root), "--batch_size", "0", "--patch", "100"])
    err = capsys.readouterr().err
    assert code == cli.EXIT_CONFIG and "batch_size" in err and "patch" in err


def test_train_missing_data(runs, tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nothing"), *TINY]) == cli.EXIT_DATA


def test_train_snapshot_resume_and_report(runs, desk_root, capsys):
    args = ["train", "--data", str(desk_root), "--desk-scale", "--iterations", "2", "--name", "r1", *TINY]
    assert cli.main(args) == 0
    run = runs / "r1"
    snap = (run / "config.yaml").read_text()
    assert yaml.safe_load(snap)["config"]["iterations"] == 2
    ckpt = run / "checkpoints" / "ckpt_000002.safetensors"
    assert ckpt.exists()
    capsys.readouterr()
    assert cli.main(args + ["--resume", str(ckpt)]) == 0
    assert "nothing to do" in capsys.readouterr().out
    assert (run / "config.yaml").read_text() == snap
    # a different config cannot reuse the run directory
    assert cli.main(args[:-len(TINY)] + TINY[:-2] + ["--batch_size", "3"]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--name", "r1"]) == 0
    assert "g_total" in (run / "report.md").read_text()


def test_infer_blind_and_deterministic(tmp_path, tiny_ckpt):
    src = tmp_path / "in"
    write_png(src / "a.png", torch.rand(3, 32, 32))
    (src / "broken.png").write_bytes(b"not a png")
    args = ["infer", "--checkpoint", str(tiny_ckpt), "--input", str(src)]
    assert cli.main(args + ["--output", str(tmp_path / "o1")]) == 0
    assert cli.main(args + ["--output", str(tmp_path / "o2")]) == 0
    assert read_png(tmp_path / "o1" / "a.png").shape == (3, 128, 128)
    assert (tmp_path / "o1" / "a.png").read_bytes() == (tmp_path / "o2" / "a.png").read_bytes()


def test_infer_empty_folder(tmp_path, tiny_ckpt):
    (tmp_path / "e").mkdir()
    code = cli.main(["infer", "--checkpoint", str(tiny_ckpt), "--input", str(tmp_path / "e"),
                     "--output", str(tmp_path / "o")])
    assert code == cli.EXIT_DATA


def test_eval_tables(tmp_path, paired_root, desk_root, tiny_ckpt):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(tiny_ckpt), "--data", str(paired_root),
                     "--out", str(out), "--panels"]) == 0
    rows = [ln.split("\t")[0] for ln in (out / "results.tsv").read_text().splitlines()[1:]]
    assert rows == ["bicubic", "bilinear", "nearest", "real", "average"]
    assert list((out / "panels").glob("*.png"))
    assert cli.main(["eval", "--checkpoint", str(tiny_ckpt), "--data", str(desk_root), "--domains", "bicubic",
                     "--backbone", "none", "--out", str(out)]) == 0
    rows = [ln.split("\t")[0] for ln in (out / "results.tsv").read_text().splitlines()[1:]]
    assert rows == ["bicubic", "average"]
    # the unpaired corpus has no real LR images, so that domain cannot be evaluated
    assert cli.main(["eval", "--checkpoint", str(tiny_ckpt), "--data", str(desk_root), "--domains", "real",
                     "--backbone", "none", "--out", str(out)]) == cli.EXIT_DATA


def test_eval_missing_checkpoint(tmp_path, desk_root):
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "none.safetensors"), "--data", str(desk_root),
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_DATA


def test_unknown_command():
    assert cli.main(["fly"]) == cli.EXIT_CONFIG
