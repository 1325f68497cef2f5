import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from quadcurv import cli, io


@pytest.fixture()
def kfile(tmp_path, small_k):
    p = tmp_path / "k.json"
    io.write_intrinsics(p, small_k)
    return p


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def _synth(tmp_path, kfile, name="scene", *extra):
    out = tmp_path / name
    assert cli.main(["synth", "sphere", "--intrinsics", str(kfile), "--out", str(out), *extra]) == 0
    return out


def test_synth_center_pixel(tmp_path, kfile, small_k):
    scene = tmp_path / "s.json"
    scene.write_text(json.dumps({"shapes": [{"kind": "sphere", "radius": 100, "translation": [0, 0, 1000]}]}))
    out = tmp_path / "o"
    assert cli.main(["synth", str(scene), "--intrinsics", str(kfile), "--out", str(out)]) == 0
    depth = np.asarray(Image.open(out / cli.DEPTH))
    assert depth.dtype == np.uint16
    assert depth[int(small_k.cy), int(small_k.cx)] == 900
    manifest = json.loads((out / cli.MANIFEST).read_text())
    assert manifest["command"] == "synth" and cli.DEPTH in manifest["outputs"]
    assert {"config", "inputs", "tool_version", "wall_time_s"} <= set(manifest)


def test_synth_byte_identical_reruns(tmp_path, kfile):
    a = _files(_synth(tmp_path, kfile, "a", "--sigma", "2", "--seed", "7"))
    b = _files(_synth(tmp_path, kfile, "b", "--sigma", "2", "--seed", "7"))
    a.pop(cli.MANIFEST), b.pop(cli.MANIFEST)  # carries wall time
    assert a == b
    c = _files(_synth(tmp_path, kfile, "c", "--sigma", "2", "--seed", "8"))
    assert c[cli.DEPTH] != a[cli.DEPTH]


def test_synth_rejects_negative_radius(tmp_path, kfile, capsys):
    scene = tmp_path / "bad.json"
    scene.write_text(json.dumps([{"kind": "sphere", "radius": -5}]))
    out = tmp_path / "o"
    assert cli.main(["synth", str(scene), "--intrinsics", str(kfile), "--out", str(out)]) != 0
    err = capsys.readouterr().err
    assert "shapes[0].radius" in err
    assert not out.exists()


def test_synth_malformed_json(tmp_path, capsys):
    scene = tmp_path / "bad.json"
    scene.write_text("{not json")
    assert cli.main(["synth", str(scene), "--out", str(tmp_path / "o")]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_curvature_and_eval_roundtrip(tmp_path, kfile):
    gt = _synth(tmp_path, kfile)
    est = tmp_path / "est"
    assert cli.main(["curvature", str(gt / cli.DEPTH), "--intrinsics", str(kfile), "--out", str(est),
                     "--threads", "2"]) == 0
    assert {cli.CURVATURE, cli.NORMALS, cli.VALID, cli.CONVERGED, cli.MANIFEST} <= set(_files(est))
    planes = io.read_planes(est / cli.CURVATURE)
    valid = io.read_mask(est / cli.VALID)
    assert planes.shape[0] == 2 and valid.sum() > 1000
    rep = tmp_path / "rep"
    assert cli.main(["eval", "--mode", "rms", "--est", str(est), "--gt", str(gt), "--out", str(rep)]) == 0
    rows = (rep / "rms.csv").read_text().splitlines()
    assert rows[0].startswith("method,label,rms")
    assert float(rows[1].split(",")[2]) < 2e-3
    rep = tmp_path / "nrm"
    assert cli.main(["eval", "--mode", "normals", "--est", str(est), "--gt", str(gt), "--out", str(rep)]) == 0
    assert float((rep / "normals.csv").read_text().splitlines()[1].split(",")[1]) < 1.0


def test_rejection_flag_maps_to_ours_r(tmp_path, kfile):
    gt = _synth(tmp_path, kfile, "g", "--sigma", "1")
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["curvature", str(gt / cli.DEPTH), "--intrinsics", str(kfile), "--rejection", "--out", str(a)])
    cli.main(["curvature", str(gt / cli.DEPTH), "--intrinsics", str(kfile), "--method", "ours-r", "--out", str(b)])
    assert (a / cli.CURVATURE).read_bytes() == (b / cli.CURVATURE).read_bytes()
    assert json.loads((a / cli.MANIFEST).read_text())["inputs"]["method"] == "ours-r"


def test_curvature_threads_byte_identical(tmp_path, kfile):
    gt = _synth(tmp_path, kfile, "g", "--sigma", "1")
    outs = []
    for t in ("1", "3"):
        o = tmp_path / f"t{t}"
        cli.main(["curvature", str(gt / cli.DEPTH), "--intrinsics", str(kfile), "--method", "pca",
                  "--threads", t, "--out", str(o)])
        outs.append({n: v for n, v in _files(o).items() if n != cli.MANIFEST})
    assert outs[0] == outs[1]


def test_curvature_missing_intrinsics(tmp_path, kfile, capsys):
    gt = _synth(tmp_path, kfile)
    out = tmp_path / "est"
    code = cli.main(["curvature", str(gt / cli.DEPTH), "--intrinsics", str(tmp_path / "nope.json"),
                     "--out", str(out)])
    assert code != 0
    assert "no such file" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_method_lists_choices(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["curvature", "d.png", "--intrinsics", "k.json", "--method", "magic", "--out", str(tmp_path)])
    assert exc.value.code != 0
    err = capsys.readouterr().err
    assert all(m in err for m in ("ours", "ours-r", "douros", "besl", "pca"))


def test_eval_rms_identical_is_zero(tmp_path, kfile):
    gt = _synth(tmp_path, kfile)
    # an "estimate" directory made from the ground truth itself
    est = tmp_path / "est"
    est.mkdir()
    (est / cli.CURVATURE).write_bytes((gt / cli.GT_CURVATURE).read_bytes())
    (est / cli.NORMALS).write_bytes((gt / cli.GT_NORMALS).read_bytes())
    labels = io.read_labels(gt / cli.LABELS)
    io.write_mask(est / cli.VALID, labels > 0)
    io.write_mask(est / cli.CONVERGED, labels > 0)
    out = tmp_path / "rep"
    assert cli.main(["eval", "--mode", "rms", "--est", str(est), "--gt", str(gt), "--out", str(out)]) == 0
    rows = [r.split(",") for r in (out / "rms.csv").read_text().splitlines()[1:]]
    assert all(float(r[2]) == 0.0 for r in rows)


def test_eval_dimension_mismatch(tmp_path, kfile, capsys):
    gt = _synth(tmp_path, kfile)
    other = tmp_path / "big"
    assert cli.main(["synth", "sphere", "--out", str(other)]) == 0
    est = tmp_path / "est"
    cli.main(["curvature", str(other / cli.DEPTH), "--intrinsics", str(other / cli.INTRINSICS),
              "--method", "douros", "--out", str(est)])
    out = tmp_path / "rep"
    assert cli.main(["eval", "--mode", "rms", "--est", str(est), "--gt", str(gt), "--out", str(out)]) == 2
    assert "dimension mismatch" in capsys.readouterr().err
    assert not out.exists()


def test_eval_noise_rows(tmp_path, kfile):
    out = tmp_path / "noise"
    code = cli.main(["eval", "--mode", "noise", "--methods", "ours", "pca", "--trials", "1",
                     "--intrinsics", str(kfile), "--scene", "sphere", "--out", str(out)])
    assert code == 0
    rows = (out / "noise.csv").read_text().splitlines()
    assert len(rows) == 1 + 6 * 2
    assert sum(r.startswith("ours,") for r in rows) == 6


def test_eval_confusion_rows_sum_to_one(tmp_path, kfile):
    dirs = []
    for name, view in (("a", "three-object"), ("b", "three-object")):
        g = tmp_path / name
        cli.main(["synth", view, "--intrinsics", str(kfile), "--sigma", "1", "--seed", name == "b" and "1" or "0",
                  "--out", str(g)])
        e = tmp_path / (name + "_est")
        cli.main(["curvature", str(g / cli.DEPTH), "--intrinsics", str(kfile), "--out", str(e)])
        dirs.append((g, e))
    out = tmp_path / "conf"
    code = cli.main(["eval", "--mode", "confusion", "--est", *[str(e) for _, e in dirs],
                     "--gt", *[str(g) for g, _ in dirs], "--out", str(out)])
    assert code == 0
    rows = (out / "confusion.csv").read_text().splitlines()
    assert rows[0] == "method,sample,1,2,3,background"
    for r in rows[1:]:
        assert abs(sum(float(v) for v in r.split(",")[2:]) - 1.0) < 1e-5


def test_colorize_key(tmp_path):
    k1 = np.array([[0.0, 1.0, -1.0, 0.025]])
    k2 = np.array([[0.0, -1.0, 1.0, 0.0]])
    rgb = cli.colorize(k1, k2, np.array([[True, True, True, False]]))
    assert rgb[0, 0].tolist() == [128, 128, 255]  # origin colour
    assert rgb[0, 1].tolist() == [255, 0, 255]  # clamped, not wrapped
    assert rgb[0, 2].tolist() == [0, 255, 255]
    assert rgb[0, 3].tolist() == [0, 0, 0]  # invalid is black


def test_colorize_command_deterministic(tmp_path, kfile):
    gt = _synth(tmp_path, kfile)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (a, b):
        assert cli.main(["colorize", str(gt / cli.GT_CURVATURE), "--valid", str(gt / cli.EDGES),
                         "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.manifest.json").exists()
    assert np.asarray(Image.open(a)).shape[-1] == 3


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "quadcurv", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("quadcurv ")
