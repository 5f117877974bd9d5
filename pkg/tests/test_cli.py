import numpy as np
import pytest

from svreid.cli import main
from svreid.imaging import write_image

SMALL = ["--set", "backbone.height=32", "--set", "backbone.width=16"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_layout_and_reproducibility(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "synth", "--ids", "8", "--per-camera", "2", "--out", str(a), *SMALL)[0] == 0
    assert run(capsys, "synth", "--ids", "8", "--per-camera", "2", "--out", str(b), *SMALL)[0] == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*.png"))
    assert len(files) == 32 and len({f.parent for f in files}) == 8
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert (a / "config.txt").is_file()


def test_synth_needs_two_ids(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--ids", "1", "--out", str(tmp_path))
    assert code == 2 and "error" in err


def test_train_without_data_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path))
    assert code == 2 and "usage: svreid train" in err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("train.lr = 1e-3\ntrain.warmup = 5\n")
    code, _, err = run(capsys, "train", "--data", "synth", "--config", str(cfg), "--out", str(tmp_path / "r"))
    assert code == 2 and "train.warmup" in err


def test_missing_checkpoint_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.svr1"), "--data", "synth")
    assert code == 3


@pytest.fixture(scope="module")
def zero_step_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run0")
    assert main(["train", "--data", "synth", "--steps", "0", "--out", str(out), "-q", *SMALL]) == 0
    return out


def test_score_zero_head_and_symmetry(zero_step_run, tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    write_image(a, rng.random((3, 40, 20)))
    write_image(b, rng.random((3, 64, 30)))
    ckpt = str(zero_step_run / "checkpoint.svr1")
    code, out, _ = run(capsys, "score", "--checkpoint", ckpt, "--img-a", str(a), "--img-b", str(b))
    assert code == 0 and out.strip() == "0.500000"
    (bad := tmp_path / "bad.png").write_bytes(b"garbage")
    assert run(capsys, "score", "--checkpoint", ckpt, "--img-a", str(a), "--img-b", str(bad))[0] == 3


def test_gradcheck_exit_codes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "conv2d", "--op", "swish")
    assert code == 0 and out.count("ok") == 2
    code, out, _ = run(capsys, "gradcheck", "--op", "conv2d", "--tol", "1e-30")
    assert code == 1 and "FAIL" in out


def test_train_eval_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "train", "--data", "synth", "--synth-ids", "8", "--test-ids", "3",
                        "--steps", "2", "--batch-size", "4", "--out", str(out), "-q", *SMALL)
    assert code == 0 and "pair accuracy" in text
    assert (out / "checkpoint.svr1").is_file() and (out / "train_log.csv").is_file()
    code, text, _ = run(capsys, "eval", "--checkpoint", str(out / "checkpoint.svr1"), "--trials", "2", "-q")
    assert code == 0
    assert text.split()[:5] == ["R-1", "R-5", "R-10", "R-15", "R-20"]
    lines = (out / "cmc.csv").read_text().splitlines()
    assert lines[0] == "k,cmc" and len(lines) == 4  # three test identities in the gallery
    assert (out / "ranks.csv").read_text().splitlines()[1].endswith("-,-")


def test_eval_on_empty_test_split(zero_step_run, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(zero_step_run / "checkpoint.svr1"), "-q")
    assert code == 3 and "empty" in err
