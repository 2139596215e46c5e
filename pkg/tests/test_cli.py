from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from niot import cli
from niot.imageio import load_float_field, load_grayscale, save_grayscale

BASE = """\
[model]
gamma = 0.8
lambda = {lam}

[fitting]
{fitting}

[optimization]
dt0 = 1e-3
k_max = {k_max}

[io]
{io}
forcing = {forcing}
total_mass = 0.1
output = out
"""


def write_config(tmp_path: Path, lam=0.0, fitting="", k_max=30, io="nx = 12\nny = 12", forcing="source 6,1 1; sink 1,10 1; sink 10,10 1") -> Path:
    path = tmp_path / "run.ini"
    path.write_text(BASE.format(lam=lam, fitting=fitting, k_max=k_max, io=io, forcing=forcing), encoding="utf-8")
    return path


def test_run_writes_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
    out = tmp_path / "out"
    for name in ("mu_rec.niotf", "I_rec.niotf", "u_final.niotf", "mu_rec.png", "I_rec.png", "report.json"):
        assert (out / name).is_file(), name
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "completed"
    assert report["summary"]["iterations"] == report["run"]["iterations"]
    assert report["summary"]["stopping_reason"] in ("tolerance_met", "k_max")
    assert report["grid"] == {"nx": 12, "ny": 12, "h": pytest.approx(1 / 12)}
    mu = load_float_field(out / "mu_rec.niotf")
    assert mu.shape == (12, 12) and np.all(mu > 0)
    # the preview is scaled by its own maximum
    assert report["previews"]["mu_rec.png"]["white_value"] == pytest.approx(mu.max())
    assert load_grayscale(out / "mu_rec.png").max() == 1.0
    printed = json.loads(capsys.readouterr().out)
    assert printed["J"] == report["summary"]["J"]


def test_rerun_is_bitwise_identical(tmp_path):
    cfg = write_config(tmp_path, k_max=15)
    cli.main(["run", str(cfg)])
    first = (tmp_path / "out" / "mu_rec.niotf").read_bytes()
    cli.main(["run", str(cfg)])
    assert (tmp_path / "out" / "mu_rec.niotf").read_bytes() == first


def test_missing_observed_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, lam=0.1, fitting="weight = mask", io="observed = nope.png\nmask = nope_mask.png")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "text",
    [
        "[model]\ngamma = 0.5\nbogus = 1\n",
        "[weird]\ngamma = 0.5\n",
        "[io]\ngamma = 0.5\n",
        "[model]\ngamma = abc\n[io]\nnx = 4\nny = 4\nforcing = y-network\noutput = o\n",
        "[model]\ngamma = 1.5\n[io]\nnx = 4\nny = 4\nforcing = y-network\noutput = o\n",
        "[model]\nlambda = 0.1\n[io]\nnx = 8\nny = 8\nforcing = y-network\noutput = o\n",
        "[io]\nnx = 8\nny = 8\nforcing = source 1,1 1\noutput = o\n",
        "[io]\nnx = 8\nny = 8\nforcing = source 20,1 1; sink 1,1 1\noutput = o\n",
        "[io]\nnx = 8\nforcing = y-network\noutput = o\n",
    ],
)
def test_bad_configs_rejected(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text, encoding="utf-8")
    assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_missing_config_file(tmp_path):
    assert cli.main(["run", str(tmp_path / "none.ini")]) == cli.EXIT_CONFIG


def test_forcing_from_file_and_region(tmp_path):
    region = np.zeros((10, 10))
    region[8:, :3] = 1.0
    save_grayscale(region, tmp_path / "region.png")
    (tmp_path / "forcing.txt").write_text("source 5,0 1  # bottom\nsink region.png 1\n", encoding="utf-8")
    cfg = write_config(tmp_path, io="nx = 10\nny = 10", forcing="@forcing.txt", k_max=3)
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK


def test_y_network_keyword():
    grid = cli.build_grid(52, 52)
    spec = cli.parse_forcing("y-network", grid)
    assert len(spec.sources) == 1 and len(spec.sinks) == 2


def test_inpaint_run_with_mask(tmp_path):
    img = np.zeros((12, 12))
    img[1:11, 6] = 1.0
    mask = np.zeros((12, 12))
    mask[5:7, 4:9] = 1.0
    save_grayscale(img * (1 - mask), tmp_path / "obs.png")
    save_grayscale(mask, tmp_path / "mask.png")
    cfg = write_config(
        tmp_path, lam=0.1, fitting="weight = mask\nmu0 = from_observation", k_max=10,
        io="observed = obs.png\nmask = mask.png", forcing="source 6,1 1; sink 6,10 1",
    )
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["summary"]["D"] > 0


def test_sweep_product_and_index(tmp_path, capsys):
    cfg = write_config(tmp_path, k_max=5)
    assert cli.main(["--workers", "1", "sweep", str(cfg), "gamma=0.5,0.8", "dt0=1e-3,2e-3"]) == cli.EXIT_OK
    index = json.loads((tmp_path / "out" / "index.json").read_text())
    runs = index["runs"]
    assert len(runs) == 4
    assert {tuple(sorted(r["parameters"].items())) for r in runs} == {
        (("dt0", d), ("gamma", g)) for g in ("0.5", "0.8") for d in ("1e-3", "2e-3")
    }
    for r in runs:
        assert r["status"] == "completed"
        assert (tmp_path / "out" / r["name"] / "report.json").is_file()
        assert {"J", "D", "connected"} <= set(r)
    assert json.loads(capsys.readouterr().out) == {"runs": 4, "failed": []}


def test_sweep_without_overrides_runs_base(tmp_path):
    cfg = write_config(tmp_path, k_max=2)
    assert cli.main(["--workers", "1", "sweep", str(cfg)]) == cli.EXIT_OK
    runs = json.loads((tmp_path / "out" / "index.json").read_text())["runs"]
    assert [r["name"] for r in runs] == ["000_base"]


def test_sweep_rejects_bad_overrides(tmp_path):
    cfg = write_config(tmp_path, k_max=2)
    for bad in ("nonsense=1", "gamma", "output=a,b", "k_max=x", "gamma="):
        assert cli.main(["sweep", str(cfg), bad]) == cli.EXIT_CONFIG


def test_sweep_reports_per_run_failures(tmp_path):
    cfg = write_config(tmp_path, k_max=2)
    assert cli.main(["--workers", "1", "sweep", str(cfg), "gamma=0.5,3"]) == cli.EXIT_SOLVER
    runs = json.loads((tmp_path / "out" / "index.json").read_text())["runs"]
    assert [r["status"] for r in runs] == ["completed", "config_error"]


def test_job_names_are_filesystem_safe():
    assert cli._job_name(3, {"map": "pm", "gamma": "0.5"}) == "003_map=pm_gamma=0.5"
    assert "/" not in cli._job_name(0, {"forcing": "a/b"})


def test_corrupt(tmp_path):
    img = np.linspace(0, 1, 16).reshape(4, 4)
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    save_grayscale(img, tmp_path / "img.png", bits=16)
    save_grayscale(mask, tmp_path / "mask.png")
    assert cli.main(["corrupt", str(tmp_path / "img.png"), str(tmp_path / "mask.png"), str(tmp_path / "out.png"), "--bits", "16"]) == 0
    out = load_grayscale(tmp_path / "out.png")
    assert np.all(out[1:3, 1:3] == 0)
    np.testing.assert_allclose(out[0], img[0], atol=1 / 65535)
    assert cli.main(["corrupt", str(tmp_path / "img.png"), str(tmp_path / "missing.png"), str(tmp_path / "x.png")]) == 1


def test_enhance(tmp_path, capsys):
    thick = np.zeros((16, 16))
    thick[4:12, 8] = 2.0
    save_grayscale(thick / 2.0, tmp_path / "t.png")
    save_grayscale((thick > 0).astype(float), tmp_path / "s.png")
    code = cli.main([
        "enhance", str(tmp_path / "t.png"), str(tmp_path / "s.png"), "500", "3", str(tmp_path / "k.niotf"),
        "--thickness-scale", "2", "--substeps", "3",
    ])
    assert code == 0
    info = json.loads(capsys.readouterr().out)
    assert info["m"] == 2.0
    k = load_float_field(tmp_path / "k.niotf")
    assert k.shape == (16, 16) and np.all(k >= 0) and k.max() > 0


def test_oracle_prints_symmetric_answer(capsys):
    assert cli.main(["oracle", "0,0", "1,0.5", "1,-0.5", "0.5", "0.5"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("B=(0.5000,0.0000) E=1.500000")
    assert line.endswith("angle=90.00deg")
    assert cli.main(["oracle", "0,0", "1,0.5", "1,-0.5", "0.5", "1.5"]) == 1


def test_demo_writes_inputs(tmp_path):
    out = tmp_path / "demo"
    assert cli.main(["demo", str(out), "--n", "24"]) == 0
    for name in ("y_true.png", "y_mask.png", "y_observed.png", "transport.ini", "inpaint.ini"):
        assert (out / name).is_file()
    # both generated configs validate
    for name in ("transport.ini", "inpaint.ini"):
        setup = cli.build_setup(cli.read_config(out / name))
        assert setup.grid.nx == 24
    observed = load_grayscale(out / "y_observed.png")
    assert np.all(observed[load_grayscale(out / "y_mask.png") > 0.5] == 0)
