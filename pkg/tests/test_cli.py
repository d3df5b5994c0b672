import csv
import shutil
from dataclasses import replace

import numpy as np
import pytest

from gsurerecon.cli import main, quicklook, read_pgm, to_gray, write_pgm
from gsurerecon.config import ExperimentConfig, config_hash, parse_config, render_config
from gsurerecon.errors import ConfigError
from gsurerecon.tensorcore import save_tensor

TINY = """\
[experiment]
seed = 7
out_dir = {out}

[data]
height = 16
width = 16
coils = 2
n_train = 8
n_val = 6
acs_size = 2
snr_grid = 32, 22, 12

[sampling]
r_grid = 4, 8
acs_width = 2

[denoiser]
channels = 4, 8
iterations = 5
batch_size = 4

[edm]
channels = 4, 8
iterations = 5
batch_size = 4

[dps]
steps = 8
n_samples = 3

[modl]
channels = 4, 8
unrolls = 2
cg_iters = 3
epochs = 1
batch_size = 4

[sweep]
chunk_size = 4
"""


# -- config -----------------------------------------------------------------------

def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.train_snrs == cfg.data.snr_grid


def test_hash_ignores_section_and_key_order():
    a = parse_config("[data]\nn_train = 5\nn_val = 3\n[experiment]\nseed = 4\n")
    b = parse_config("[experiment]\nseed = 4\n[data]\nn_val = 3\nn_train = 5\n")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(replace(a, seed=5))


def test_render_round_trip(tmp_path):
    cfg = parse_config(TINY.format(out=tmp_path))
    assert parse_config(render_config(cfg)) == cfg


def test_matched_cells():
    full = parse_config("[data]\nsnr_grid = 32, 22, 12\n")
    assert len(full.cells) == 9
    matched = parse_config("[data]\nsnr_grid = 32, 22, 12\n[sweep]\nmatched = true\ntrain_snrs = 32, 12\n")
    assert matched.cells == [(32.0, 32.0), (12.0, 12.0)]
    with pytest.raises(ConfigError):
        parse_config("[sweep]\nmatched = true\ntrain_snrs = 32\ninfer_snrs = 12\n")


@pytest.mark.parametrize("text", [
    "[data]\nsnr_grid = 12, 32\n",
    "[data]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[sweep]\nmethods = naive-dps, magic\n",
    "[data]\nn_train = lots\n",
    "[sweep]\ninfer_snrs = 5\n",
    "not an ini",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# -- PGM quicklooks ---------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    img, maxval = read_pgm(write_pgm(tmp_path / "a.pgm", gray))
    assert maxval == 255 and img.shape == (3, 4) and (img == gray).all()


def test_to_gray_clips():
    assert to_gray(np.array([-1.0, 0.5, 3.0]), 1.0).tolist() == [0, 128, 255]
    assert not to_gray(np.ones(3), 0.0).any()


def test_quicklook_magnitude_and_difference(tmp_path, rng):
    img = (rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))).astype(np.complex64)
    save_tensor(tmp_path / "x.cxt", img)
    gray, maxval = read_pgm(quicklook(tmp_path / "x.cxt"))
    assert maxval == 255 and gray.max() == 255
    diff, _ = read_pgm(quicklook(tmp_path / "x.cxt", ref=tmp_path / "x.cxt"))
    assert not diff.any()
    save_tensor(tmp_path / "y.cxt", img * 1.4)
    bright, _ = read_pgm(quicklook(tmp_path / "y.cxt", tmp_path / "d.pgm", ref=tmp_path / "x.cxt"))
    scale = np.percentile(np.abs(img), 99)
    expected = np.round(np.clip(2.5 * 0.4 * np.abs(img) / scale, 0, 1) * 255)
    assert np.abs(bright.astype(float) - expected).max() <= 1
    assert (bright == 255).any()


def test_quicklook_cli(tmp_path, capsys):
    save_tensor(tmp_path / "x.cxt", np.ones((4, 4), dtype=np.complex64))
    assert main(["quicklook", str(tmp_path / "x.cxt"), "--out", str(tmp_path / "q.pgm")]) == 0
    assert (tmp_path / "q.pgm").exists()
    assert main(["quicklook", str(tmp_path / "missing.cxt")]) == 1


# -- exit codes -------------------------------------------------------------------

def test_missing_config_exit_2(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.ini")]) == 2


def test_unknown_method_exit_2(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(TINY.format(out=tmp_path / "run"))
    assert main(["reconstruct", "--config", str(ini), "--method", "magic-dps"]) == 2


def test_missing_prerequisite_exit_3(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(TINY.format(out=tmp_path / "run"))
    assert main(["train", "--stage", "edm", "--config", str(ini)]) == 3
    assert main(["evaluate", "--config", str(ini)]) == 3


# -- tiny end-to-end sweep --------------------------------------------------------

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    ini = root / "tiny.ini"
    ini.write_text(TINY.format(out=root / "run"))
    assert main(["run", "--config", str(ini)]) == 0
    return root, ini


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_outputs(tiny):
    root, _ = tiny
    ev = root / "run" / "eval"
    metrics = _rows(ev / "metrics.csv")
    assert len(metrics) == 4 * 2 * 9 * 6
    assert len(_rows(ev / "summary.csv")) == 72
    assert len(_rows(ev / "stats.csv")) == 2 * 2 * 2 * 9
    assert len(_rows(ev / "averages.csv")) == 2 * 2 * 9 * 3
    for name in ("nrmse_vs_snr.png", "averages.png", "pvalues.png"):
        assert (ev / "figures" / name).stat().st_size > 0
    assert list((ev / "figures").glob("gallery_*.png"))
    assert (ev / "summary.txt").read_text().strip()


def test_recon_files_per_family(tiny):
    root, _ = tiny
    dps = root / "run" / "recon" / "gsure-dps" / "R4" / "train12_infer12"
    modl = root / "run" / "recon" / "gsure-modl" / "R4" / "train12_infer12"
    assert len(list(dps.glob("val0000_*.cxt"))) == 3 + 1
    assert len(list(modl.glob("val0000*.cxt"))) == 1


def test_rerun_skips(tiny, capsys):
    root, ini = tiny
    before = (root / "run" / "eval" / "metrics.csv").stat().st_mtime_ns
    assert main(["run", "--config", str(ini)]) == 0
    out = capsys.readouterr().out
    assert "skip" in out
    assert (root / "run" / "eval" / "metrics.csv").stat().st_mtime_ns == before


def test_changed_config_refused(tiny):
    root, ini = tiny
    changed = root / "changed.ini"
    changed.write_text(ini.read_text().replace("seed = 7", "seed = 8"))
    assert main(["gen-data", "--config", str(changed)]) == 2


def test_rerun_is_byte_identical(tiny, tmp_path):
    root, ini = tiny
    other = tmp_path / "again.ini"
    other.write_text(ini.read_text().replace(str(root / "run"), str(tmp_path / "run")))
    assert main(["run", "--config", str(other)]) == 0
    for name in ("metrics.csv", "stats.csv", "summary.csv", "averages.csv"):
        assert (tmp_path / "run" / "eval" / name).read_bytes() == (root / "run" / "eval" / name).read_bytes()
    shutil.rmtree(tmp_path / "run")
