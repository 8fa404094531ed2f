import numpy as np
import pytest

from trikd import cli, gradsuite
from trikd.autodiff import ops
from trikd.autodiff.tensor import make_result
from trikd.config import schema
from trikd.data import read_pgm, read_ppm, write_ppm

TINY = ["--set", "dataset_size=16", "--set", "eval_size=4", "--set", "epochs=2", "--quiet"]


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--out", str(out), *TINY) == 0
    return out


def _dir_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_manifest_counts(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("label_ratio = 1/16  # a twentieth of the data, nearly\n")
    assert run("gen-data", "--out", str(tmp_path / "d"), "--count", "320", "--config", str(cfg)) == 0
    lines = (tmp_path / "d" / "manifest.txt").read_text().splitlines()
    assert len(lines) == 320
    assert sum(line.endswith(" labeled") for line in lines) == 20


def test_gen_data_rejects_indivisible_size(tmp_path, capsys):
    assert run("gen-data", "--out", str(tmp_path / "d"), "--size", "48") == 1
    assert "divisible by 32" in capsys.readouterr().err


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", str(tmp_path / name), "--count", "12", "--seed", "3") == 0
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_gen_data_refuses_non_empty_dir(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x").write_text("keep")
    assert run("gen-data", "--out", str(tmp_path / "d"), "--count", "4") == 1
    assert run("gen-data", "--out", str(tmp_path / "d"), "--count", "4", "--force") == 0


def test_gen_data_prints_histogram(tmp_path, capsys):
    run("gen-data", "--out", str(tmp_path / "d"), "--count", "4", "--classes", "3")
    out = capsys.readouterr().out
    assert "class 0:" in out and "class 2:" in out


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        run("train", "--help")
    text = capsys.readouterr().out
    for key in schema():
        assert key in text


def test_unknown_config_key_named(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr = 0.01\nlearning_rate = 0.1\n")
    assert run("train", "--config", str(cfg), "--out", str(tmp_path / "o")) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_malformed_value_named(tmp_path, capsys):
    assert run("train", "--out", str(tmp_path / "o"), "--set", "epochs=many") == 1
    assert "epochs" in capsys.readouterr().err


def test_train_outputs(trained):
    for name in ("checkpoint.bin", "metrics.csv", "eval.txt", "config.txt"):
        assert (trained / name).exists()
    lines = (trained / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,seg,cps,spa,att,total,miou_eval"
    assert lines[-1].split(",")[-1] != ""


def test_supervised_cps_column_zero(tmp_path):
    assert run("train", "--out", str(tmp_path), "--mode", "supervised", *TINY) == 0
    rows = [line.split(",") for line in (tmp_path / "metrics.csv").read_text().splitlines()[1:]]
    assert rows and all(float(r[3]) == 0.0 for r in rows)


def test_resume_continues_step_counter(tmp_path):
    assert run("train", "--out", str(tmp_path), *TINY, "--set", "max_steps=2") == 0
    assert run("train", "--out", str(tmp_path), *TINY, "--resume") == 0
    steps = [int(line.split(",")[0]) for line in (tmp_path / "metrics.csv").read_text().splitlines()[1:]]
    assert steps == list(range(1, len(steps) + 1)) and len(steps) > 2


def test_resume_without_checkpoint(tmp_path):
    assert run("train", "--out", str(tmp_path), *TINY, "--resume") == 1


def test_train_from_disk(tmp_path):
    assert run("gen-data", "--out", str(tmp_path / "d"), "--count", "16", "--ratio", "1/2") == 0
    assert run("train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o"), *TINY) == 0
    assert (tmp_path / "o" / "eval.txt").read_text().startswith("mIoU=")


def test_lambda_sweep_grid(tmp_path):
    values = "0,0.1,0.3,0.5,0.7,0.9,1.0"
    argv = ["train", "--out", str(tmp_path), "--sweep", f"lambda={values}", *TINY, "--set", "max_steps=1"]
    assert run(*argv) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "key,value,miou_eval"
    assert [r.split(",")[1] for r in rows[1:]] == values.split(",")
    assert all(r.startswith("lambda_cps,") for r in rows[1:])
    assert (tmp_path / "lambda_cps=0.5" / "metrics.csv").exists()


def test_sweep_unknown_key(tmp_path):
    assert run("train", "--out", str(tmp_path), "--sweep", "gamma=1,2", *TINY) == 1


def test_eval_command(trained, capsys):
    assert run("eval", "--checkpoint", str(trained / "checkpoint.bin"), "--count", "2") == 0
    assert capsys.readouterr().out.startswith("mIoU=")


def test_infer_deterministic_with_palette(trained, tmp_path):
    img = np.random.default_rng(0).random((3, 64, 64))
    write_ppm(tmp_path / "x.ppm", img)
    ck = str(trained / "checkpoint.bin")
    for k in (1, 2):
        assert run("infer", "--checkpoint", ck, "--image", str(tmp_path / "x.ppm"),
                   "--out", str(tmp_path / f"y{k}.pgm"), "--viz", str(tmp_path / f"v{k}.ppm")) == 0
    assert (tmp_path / "y1.pgm").read_bytes() == (tmp_path / "y2.pgm").read_bytes()
    label, viz = read_pgm(tmp_path / "y1.pgm"), read_ppm(tmp_path / "v1.ppm")
    assert label.shape == (64, 64) and label.max() < 4
    np.testing.assert_array_equal(viz[:, label == 0], 0.0)


def test_palette_background_black():
    assert cli.colorize(np.zeros((2, 2), int)).max() == 0
    assert cli.colorize(np.ones((2, 2), int)).max() > 0


def test_infer_rejects_extent_mismatch(trained, tmp_path, capsys):
    write_ppm(tmp_path / "x.ppm", np.zeros((3, 32, 32)))
    assert run("infer", "--checkpoint", str(trained / "checkpoint.bin"), "--image", str(tmp_path / "x.ppm"),
               "--out", str(tmp_path / "y.pgm")) == 1
    assert "extents" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_code(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTACHECKPOINT")
    assert run("eval", "--checkpoint", str(tmp_path / "bad.bin")) == 1


def test_gradcheck_single_op(capsys):
    assert run("gradcheck", "--op", "softmax") == 0
    assert capsys.readouterr().out.startswith("PASS softmax max_rel_err=")


def test_gradcheck_unknown_op():
    assert run("gradcheck", "--op", "nope") == 1


def test_gradcheck_broken_backward_fails(monkeypatch, capsys):
    def broken(seed):
        x = np.random.default_rng(seed).normal(size=4)

        def f(t):
            out = make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "half_square")
            return ops.sum(out)
        return [("x", f, x)]
    monkeypatch.setitem(gradsuite.REGISTRY, "broken", broken)
    assert run("gradcheck", "--op", "broken", "--seeds", "2") == 1
    assert "FAIL broken" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exit_code(tmp_path, capsys):
    assert run("train", "--out", str(tmp_path), *TINY, "--set", "lr=1e300") == 2
    assert "non-finite" in capsys.readouterr().err


def test_usage_error_is_validation_failure():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 1
