import csv
import io
import json

import numpy as np
import pytest

from dgmnet import cli, fieldio
from dgmnet.priors import make_priors


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture
def block_mask(tmp_path):
    mask = np.zeros((9, 9), dtype=np.int64)
    mask[2:7, 2:7] = 1
    path = tmp_path / "mask.pgm"
    path.write_bytes(fieldio.encode_pgm(mask))
    return mask, path


def test_priors_round_trip(capsys, tmp_path, block_mask):
    mask, path = block_mask
    code, out, _ = run(capsys, "priors", path, tmp_path / "p")
    assert code == 0
    assert [line.split(":")[0] for line in out.splitlines()] == list(cli.PRIOR_FILES)
    loaded = cli.load_priors(tmp_path / "p")
    ref = make_priors(mask)
    for name, arr in ref.fields().items():
        assert fieldio.read_field(tmp_path / "p" / f"{name}.dgmf").tobytes() == \
            np.asarray(arr, dtype=np.float64).reshape(-1).tobytes()
    assert loaded.vmap[4, 4] == 1.0
    cfg = json.loads((tmp_path / "p" / cli.CONFIG_NAME).read_text())
    assert cfg["command"] == "priors"


def test_priors_on_empty_mask(capsys, tmp_path):
    path = tmp_path / "empty.pgm"
    path.write_bytes(fieldio.encode_pgm(np.zeros((6, 7), dtype=np.int64)))
    assert run(capsys, "priors", path, tmp_path / "p")[0] == 0
    for name in cli.PRIOR_FILES:
        assert not fieldio.read_field(tmp_path / "p" / f"{name}.dgmf").any()


def test_scan_modes(capsys, tmp_path, block_mask):
    mask, path = block_mask
    run(capsys, "priors", path, tmp_path / "p")
    feats = np.random.default_rng(0).uniform(-0.5, 0.5, (3, 9, 9))
    fieldio.write_field(tmp_path / "f.dgmf", feats)
    assert run(capsys, "scan", tmp_path / "f.dgmf", tmp_path / "p", "--mode", "iso",
               "--out", tmp_path / "iso.dgmf")[0] == 0
    assert run(capsys, "scan", tmp_path / "f.dgmf", tmp_path / "p", "--mode", "geo",
               "--out", tmp_path / "geo.dgmf")[0] == 0
    iso = fieldio.read_field(tmp_path / "iso.dgmf")
    geo = fieldio.read_field(tmp_path / "geo.dgmf")
    assert iso.shape == geo.shape == feats.shape
    assert (tmp_path / "geo_delta.dgmf").exists()
    assert not np.array_equal(iso, geo)


def test_scan_geo_without_boundaries_matches_iso(capsys, tmp_path):
    path = tmp_path / "flat.pgm"
    path.write_bytes(fieldio.encode_pgm(np.zeros((8, 8), dtype=np.int64)))
    run(capsys, "priors", path, tmp_path / "p")
    fieldio.write_field(tmp_path / "f.dgmf", np.random.default_rng(1).uniform(-1, 1, (2, 8, 8)))
    for mode in ("iso", "geo"):
        run(capsys, "scan", tmp_path / "f.dgmf", tmp_path / "p", "--mode", mode,
            "--out", tmp_path / f"{mode}.dgmf")
    assert (tmp_path / "iso.dgmf").read_bytes() == (tmp_path / "geo.dgmf").read_bytes()


def test_scan_zero_features_give_zero(capsys, tmp_path, block_mask):
    run(capsys, "priors", block_mask[1], tmp_path / "p")
    fieldio.write_field(tmp_path / "z.dgmf", np.zeros((2, 9, 9)))
    run(capsys, "scan", tmp_path / "z.dgmf", tmp_path / "p", "--out", tmp_path / "o.dgmf")
    assert not fieldio.read_field(tmp_path / "o.dgmf").any()


def test_scan_size_mismatch(capsys, tmp_path, block_mask):
    run(capsys, "priors", block_mask[1], tmp_path / "p")
    fieldio.write_field(tmp_path / "f.dgmf", np.zeros((2, 8, 9)))
    code, _, err = run(capsys, "scan", tmp_path / "f.dgmf", tmp_path / "p", "--out",
                       tmp_path / "o.dgmf")
    assert code == 2 and "differ" in err


def test_leakage_csv(capsys):
    code, out, _ = run(capsys, "leakage", "--size", 16, "--channels", 4)
    table = rows(out)
    assert code == 0 and table[0] == ["seed", "guided", "isotropic", "ratio"]
    seed, guided, iso, ratio = table[1]
    assert float(ratio) == pytest.approx(float(guided) / float(iso), rel=1e-12)


def test_bench_csv(capsys, tmp_path):
    out_path = tmp_path / "bench.csv"
    code, out, _ = run(capsys, "bench", "--sizes", "8x8,8x16,16", "--repeats", 1,
                       "--out", out_path)
    assert code == 0 and out == ""
    table = rows(out_path.read_text())
    assert table[0] == ["h", "w", "pixels", "madds", "seconds"]
    madds = [int(r[3]) for r in table[1:]]
    assert madds[1] == 2 * madds[0] and madds[2] == 4 * madds[0]
    assert (tmp_path / cli.CONFIG_NAME).exists()


@pytest.mark.parametrize("sizes", ["2x8", "axb", ",", "8x"])
def test_bench_bad_sizes(capsys, sizes):
    code = run(capsys, "bench", "--sizes", sizes, "--repeats", 1)[0]
    assert code == (0 if sizes == "8x" else 2)


def test_gradcheck_pass_and_corrupt(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "goad", "--instances", 2)
    table = rows(out)
    assert code == 0 and table[0] == ["op", "max_rel_error", "worst_arg", "step", "status"]
    assert all(r[-1] == "pass" for r in table[1:])
    code, out, err = run(capsys, "gradcheck", "--scope", "goad", "--instances", 2,
                         "--corrupt-gradient")
    assert code == 1 and "failed" in err
    assert all(r[-1] == "FAIL" for r in rows(out)[1:])


def test_overfit_gamma_column(capsys):
    code, out, err = run(capsys, "overfit", "--steps", 2, "--size", 16, "--channels", 4)
    table = rows(out)
    assert code == 0 and table[0][0] == "step"
    gamma = table[0].index("gamma_geo")
    assert [float(r[gamma]) for r in table[1:]] == [2.2, 1.2, 0.2]
    assert "ratio" in err


def test_overfit_divergence_exit(capsys):
    code, _, err = run(capsys, "overfit", "--steps", 3, "--size", 16, "--lr", 1e6)
    assert code == 1 and "diverged" in err


def test_miou_command(capsys, tmp_path):
    (tmp_path / "gt.pgm").write_bytes(fieldio.encode_pgm(np.array([[0, 0], [1, 1]])))
    (tmp_path / "pr.pgm").write_bytes(fieldio.encode_pgm(np.array([[0, 1], [1, 1]])))
    code, out, _ = run(capsys, "miou", tmp_path / "pr.pgm", tmp_path / "gt.pgm", "--classes", 2)
    table = rows(out)
    assert code == 0 and table[0] == ["class", "iou"]
    assert table[-1][0] == "mean" and float(table[-1][1]) == pytest.approx(7 / 12, abs=1e-15)


def test_exit_codes(capsys, tmp_path, monkeypatch):
    assert run(capsys, "priors", tmp_path / "nope.pgm", tmp_path / "o")[0] == 3
    (tmp_path / "bad.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
    code, _, err = run(capsys, "priors", tmp_path / "bad.pgm", tmp_path / "o")
    assert code == 3 and "offset" in err
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    monkeypatch.setenv("DGM_THREADS", "0")
    assert run(capsys, "bench", "--sizes", "8", "--repeats", 1)[0] == 2


def test_outputs_are_deterministic(capsys, tmp_path, block_mask):
    for k in range(2):
        d = tmp_path / f"run{k}"
        run(capsys, "priors", block_mask[1], d / "p")
        fieldio.write_field(d / "f.dgmf", np.linspace(-1, 1, 162).reshape(2, 9, 9))
        run(capsys, "scan", d / "f.dgmf", d / "p", "--out", d / "s.dgmf")
        run(capsys, "leakage", "--size", 16, "--channels", 4, "--out", d / "leak.csv")
    a, b = tmp_path / "run0", tmp_path / "run1"
    for name in ["p/vmap.dgmf", "p/flow.dgmf", "p/curv.dgmf", "p/dcoarse.dgmf", "s.dgmf",
                 "s_delta.dgmf", "leak.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_leakage_zero_feature_scene(capsys):
    code, out, _ = run(capsys, "leakage", "--size", 16, "--channels", 4, "--feature-scale", 0)
    _, guided, iso, _ = rows(out)[1]
    assert code == 0 and float(guided) == 0.0 and float(iso) == 0.0
