import re

import numpy as np
import pytest

from latentpde import cli
from latentpde.persistence import read_dataset

TINY = ["--set", "resolution=16", "--set", "n_steps=8", "--set", "n_train=16", "--set", "n_val=2",
        "--set", "warmup=2"]
TINY_MODEL = ["--set", "ae_widths=8,8,8", "--set", "ae_res_blocks=0,0", "--set", "ae_steps=20",
              "--set", "dit_hidden=32", "--set", "dit_depth=1", "--set", "dit_heads=2", "--set", "cond_dim=16",
              "--set", "ldm_steps=10", "--set", "diffusion_steps=50", "--set", "sampler=ddim",
              "--set", "sample_steps=4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(d / "data"), *TINY]) == 0
    return d


def test_gen_data_is_deterministic(workdir, tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), *TINY]) == 0
    out = capsys.readouterr().out
    assert "# gen-data seed=0" in out
    assert re.search(r"resolution\s+= 16  \(flag\)", out) and re.search(r"n_steps\s+= 8  \(flag\)", out)
    for name in ("train.lpde", "val.lpde"):
        assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()
    ds = read_dataset(tmp_path / "train.lpde")
    assert len(ds) == 16 and ds.samples[0].shape == (8, 16, 16, 3)


def test_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["gen-data"]) == cli.EXIT_USAGE
    assert cli.main(["gen-data", "--out", "x", "--set", "nonsense=1"]) == cli.EXIT_USAGE
    assert cli.main(["gen-data", "--out", "x", "--set", "resolution"]) == cli.EXIT_USAGE
    assert cli.main(["caption"]) == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_corrupted_dataset_is_a_data_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.lpde"
    buf = bytearray((workdir / "data" / "train.lpde").read_bytes())
    buf[0:4] = b"ZZZZ"
    bad.write_bytes(bytes(buf))
    (tmp_path / "bad.lpde.json").write_bytes((workdir / "data" / "train.lpde.json").read_bytes())
    assert cli.main(["train-ae", "--data", str(bad), "--out", str(tmp_path / "ae.lpck")]) == cli.EXIT_DATA
    assert "magic" in capsys.readouterr().err
    assert cli.main(["caption", "--data", str(tmp_path / "missing.lpde")]) == cli.EXIT_DATA


def test_too_few_training_samples(workdir, tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), *TINY, "--set", "n_train=4"]) == 0
    code = cli.main(["train-ae", "--data", str(tmp_path / "train.lpde"), "--out", str(tmp_path / "a.lpck"),
                     *TINY, *TINY_MODEL])
    assert code == cli.EXIT_DATA


def test_caption_commands(workdir, capsys):
    assert cli.main(["caption", "--cylinder", "0.035", "0.40", "0.20", "1.25", "850"]) == 0
    assert capsys.readouterr().out.strip() == (
        "Fluid passes over a cylinder with a radius of 3.50 and position: 0.40, 0.20. "
        "Fluid enters with a velocity of 1.25. The Reynolds number is 850. The flow is turbulent.")
    assert cli.main(["caption", "--reynolds", "250"]) == 0
    assert capsys.readouterr().out.strip() == "transition"
    assert cli.main(["caption", "--data", str(workdir / "data" / "val.lpde")]) == 0
    assert capsys.readouterr().out.startswith("0: The buoyancy factor is")


def test_flops_table(capsys):
    assert cli.main(["flops", "--set", "dit_depth=2", "--cond-len", "8"]) == 0
    lines = capsys.readouterr().out.splitlines()
    total = next(line for line in lines if line.startswith("total"))
    assert int(total.split()[1]) > 0
    assert any(line.startswith("sampling") and "1000 denoiser evaluations" in line for line in lines)


def test_train_sample_evaluate_end_to_end(workdir, tmp_path, capsys):
    data = workdir / "data"
    ae, ldm = tmp_path / "ae.lpck", tmp_path / "ldm.lpck"
    args = [*TINY, *TINY_MODEL]
    assert cli.main(["train-ae", "--data", str(data / "train.lpde"), "--out", str(ae), *args]) == 0
    assert "reconstruction rel L2" in capsys.readouterr().out
    assert cli.main(["train-ldm", "--data", str(data / "train.lpde"), "--ae", str(ae), "--out", str(ldm),
                     "--point-decoder", *args]) == 0
    traj = tmp_path / "s.lpde"
    pts = tmp_path / "q.npy"
    np.save(pts, np.random.default_rng(0).random((30, 2)))
    assert cli.main(["sample", "--ckpt", str(ldm), "--frame-from", str(data / "val.lpde"), "--out", str(traj),
                     "--queries", str(pts), "--render", str(tmp_path / "img"), *args]) == 0
    out = read_dataset(traj)
    assert out.samples[0].shape == (8, 16, 16, 3) and np.isfinite(out.samples[0]).all()
    assert np.load(str(traj) + ".points.npy").shape == (8, 30, 3)
    assert (tmp_path / "img" / "s_density.ppm").exists()
    assert cli.main(["sample", "--ckpt", str(ldm), "--out", str(traj), *args]) == cli.EXIT_USAGE
    capsys.readouterr()
    csv = tmp_path / "rows.csv"
    assert cli.main(["evaluate", "--ckpt", str(ldm), "--data", str(data / "val.lpde"), "--csv", str(csv),
                     "--mode", "resolve", *args]) == 0
    assert "mean" in capsys.readouterr().out
    assert csv.read_text().startswith("sample,rel_l2")
    assert cli.main(["rollout-ar", "--ckpt", str(ldm), "--frame-from", str(data / "val.lpde"), "--windows", "2",
                     "--out", str(tmp_path / "r.lpde"), *args]) == 0
    assert read_dataset(tmp_path / "r.lpde").samples[0].shape[0] >= 8
    assert cli.main(["flops", "--ckpt", str(ldm), *args]) == 0
