"""Command line interface: ``quadcurv synth | curvature | eval | colorize``.

Every command computes all of its outputs in memory first and only then
writes them (each file atomically), so a failing run leaves no partial output.
A ``manifest.json`` describing the run is written next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from quadcurv import __version__, evaluation, io, synth
from quadcurv.core import DEFAULT_INTRINSICS, CurvatureField, NormalField, PatchSpec
from quadcurv.evaluation import METHODS, MethodConfig
from quadcurv.quadric import FitConfig
from quadcurv.synth import GroundTruth, NoiseSpec, ShapeSpec

#: Curvature colour key: values are clamped to +-KEY_RANGE 1/mm.
KEY_RANGE = 0.05

#: Named scenes accepted wherever a scene JSON path is expected.
REFERENCE_SCENES = {
    "sphere": synth.sphere_scene,
    "cylinder": synth.cylinder_scene,
    "torus": synth.torus_scene,
    "three-object": synth.three_object_scene,
}

DEFAULT_SIGMAS = "0,1,2,3,4,5"
DEFAULT_DISTANCES = "600,900,1200,1500,1800,2100,2400"

# output file names
DEPTH = "depth.png"
INTRINSICS = "intrinsics.json"
GT_CURVATURE = "gt_curvature.f32"
GT_NORMALS = "gt_normals.f32"
LABELS = "labels.u16"
EDGES = "edges.mask"
CURVATURE = "curvature.f32"
NORMALS = "normals.f32"
VALID = "valid.mask"
CONVERGED = "converged.mask"
MANIFEST = "manifest.json"


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# input helpers


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def load_scene(arg: str) -> list[ShapeSpec]:
    """A reference scene name or a JSON file holding a list of shapes (or ``{"shapes": [...]}``)."""
    if arg in REFERENCE_SCENES:
        return REFERENCE_SCENES[arg]()
    data = _load_json(arg)
    if isinstance(data, dict):
        if "shapes" not in data:
            raise CliError(f"{arg}: shapes: missing")
        data = data["shapes"]
    if not isinstance(data, list) or not data:
        raise CliError(f"{arg}: shapes: expected a non-empty list")
    scene = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise CliError(f"{arg}: shapes[{i}]: expected an object")
        try:
            scene.append(ShapeSpec.from_dict(item))
        except (ValueError, TypeError) as exc:
            raise CliError(f"{arg}: shapes[{i}].{exc}") from None
    return scene


def load_intrinsics(path: str | None):
    if path is None:
        return DEFAULT_INTRINSICS
    data = _load_json(path)
    try:
        return io.intrinsics_from_dict(data)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected comma separated numbers, got {text!r}") from None


def _read(reader, path: Path):
    if not path.exists():
        raise CliError(f"{path}: no such file")
    try:
        return reader(path)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def read_ground_truth(d: Path) -> GroundTruth:
    curv = _read(io.read_planes, d / GT_CURVATURE)
    nrm = _read(io.read_planes, d / GT_NORMALS)
    return GroundTruth(
        k1=curv[0],
        k2=curv[1],
        normal=np.moveaxis(nrm, 0, -1),
        label=_read(io.read_labels, d / LABELS),
        edge_mask=_read(io.read_mask, d / EDGES),
    )


def read_estimate(d: Path) -> tuple[CurvatureField, NormalField]:
    curv = _read(io.read_planes, d / CURVATURE)
    valid = _read(io.read_mask, d / VALID)
    conv_path = d / CONVERGED
    converged = _read(io.read_mask, conv_path) if conv_path.exists() else valid
    nrm = _read(io.read_planes, d / NORMALS)
    return CurvatureField(curv[0], curv[1], valid, converged), NormalField(np.moveaxis(nrm, 0, -1), valid)


# --------------------------------------------------------------------------
# output helpers


def _commit(out_dir: Path, files: dict[str, bytes], manifest: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        io.atomic_write_bytes(out_dir / name, data)
    manifest["outputs"] = sorted(files)
    io.atomic_write_bytes(out_dir / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _manifest(args: argparse.Namespace, inputs: dict, started: float) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "config": config,
        "inputs": inputs,
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }


def _method_config(args) -> MethodConfig:
    return MethodConfig(
        spec=PatchSpec(window=args.window, stride=args.stride),
        max_iters=args.max_iters,
        radius_mm=args.radius_mm,
        threads=args.threads,
    )


def colorize(k1: np.ndarray, k2: np.ndarray, valid: np.ndarray, key_range: float = KEY_RANGE) -> np.ndarray:
    """RGB key: red encodes k1 and green k2, both mapped linearly from
    ``[-key_range, key_range]`` to ``[0, 255]`` after clamping; blue is 255 on
    valid pixels.  Invalid pixels are black, so a flat surface is (128, 128, 255).
    """
    def channel(k):
        return np.rint(127.5 * (1.0 + np.clip(k / key_range, -1.0, 1.0))).astype(np.uint8)

    rgb = np.zeros(valid.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = channel(k1)
    rgb[..., 1] = channel(k2)
    rgb[..., 2] = 255
    rgb[~valid] = 0
    return rgb


def _png(rgb: np.ndarray) -> bytes:
    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    started = time.perf_counter()
    scene = load_scene(args.scene)
    k = load_intrinsics(args.intrinsics)
    img, gt = synth.render(scene, k)
    try:
        noise = NoiseSpec(sigma_mm=args.sigma, quantize_mm=args.quantize, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    img = synth.add_noise(img, noise)
    files = {
        DEPTH: io.depth_png_bytes(img),
        INTRINSICS: (json.dumps(io.intrinsics_to_dict(k), indent=2) + "\n").encode(),
        GT_CURVATURE: io.planes_bytes(np.stack([gt.k1, gt.k2])),
        GT_NORMALS: io.planes_bytes(np.moveaxis(gt.normal, -1, 0)),
        LABELS: io.labels_bytes(gt.label),
        EDGES: io.mask_bytes(gt.edge_mask),
    }
    manifest = _manifest(args, {"scene": [s.to_dict() for s in scene], "intrinsics": io.intrinsics_to_dict(k)}, started)
    _commit(Path(args.out), files, manifest)


def cmd_curvature(args) -> None:
    started = time.perf_counter()
    method = "ours-r" if (args.method == "ours" and args.rejection) else args.method
    k = load_intrinsics(args.intrinsics)
    img = _read(io.read_depth_png, Path(args.depth))
    if img.shape != k.shape:
        raise CliError(f"depth image {img.shape[1]}x{img.shape[0]} does not match intrinsics {k.width}x{k.height}")
    est = evaluation.estimate(method, evaluation.Frame(img, k, args.threads), _method_config(args))
    cf, nf = est.curvature, est.normals
    files = {
        CURVATURE: io.planes_bytes(np.stack([cf.k1, cf.k2])),
        NORMALS: io.planes_bytes(np.moveaxis(nf.normals, -1, 0)),
        VALID: io.mask_bytes(cf.valid),
        CONVERGED: io.mask_bytes(cf.converged),
    }
    inputs = {"depth": str(args.depth), "intrinsics": args.intrinsics, "method": method}
    if method in ("ours", "ours-r"):
        inputs["fit_config"] = json.loads(_method_config(args).fit_config(method == "ours-r").to_json())
    _commit(Path(args.out), files, _manifest(args, inputs, started))


def _eval_rms(args, files):
    if len(args.est) != len(args.gt):
        raise CliError("--est and --gt need the same number of directories")
    reports = {}
    for e, g in zip(args.est, args.gt):
        cf, _ = read_estimate(Path(e))
        gt = read_ground_truth(Path(g))
        if cf.shape != gt.shape:
            raise CliError(f"dimension mismatch: {e} is {cf.shape}, {g} is {gt.shape}")
        reports[e] = evaluation.rms_error(cf, gt)
    files["rms.csv"] = evaluation.report_csv(reports).encode()
    lines = [f"{name}: rms={r.rms:.3e} sigma={r.sigma:.3e} n={r.n}" for name, r in reports.items()]
    files["summary.txt"] = ("\n".join(lines) + "\n").encode()


def _eval_normals(args, files):
    if len(args.est) != len(args.gt):
        raise CliError("--est and --gt need the same number of directories")
    rows = ["est,mean_deg,n"]
    for e, g in zip(args.est, args.gt):
        _, nf = read_estimate(Path(e))
        gt = read_ground_truth(Path(g))
        if nf.shape != gt.shape:
            raise CliError(f"dimension mismatch: {e} is {nf.shape}, {g} is {gt.shape}")
        rep = evaluation.normal_angular_error(nf, gt)
        rows.append(f"{e},{rep.mean_deg:.9f},{rep.n}")
    files["normals.csv"] = ("\n".join(rows) + "\n").encode()


def _eval_noise(args, files):
    scene = load_scene(args.scene) if args.scene else synth.sphere_scene()
    rows = evaluation.noise_sweep(
        args.methods, _floats(args.sigmas), args.trials, args.seed, scene, load_intrinsics(args.intrinsics),
        _method_config(args),
    )
    files["noise.csv"] = evaluation.sweep_csv(rows, "sigma_mm").encode()
    files["summary.txt"] = evaluation.sweep_summary(rows, "sigma", "mm").encode()
    if args.svg:
        files["noise.svg"] = evaluation.sweep_svg(rows, "noise sigma (mm)")


def _eval_distance(args, files):
    base = load_scene(args.scene)[0] if args.scene else None
    rows, notes = evaluation.distance_sweep_eval(
        args.methods, _floats(args.distances), base, args.quantize, args.sigma, args.seed,
        load_intrinsics(args.intrinsics), _method_config(args),
    )
    files["distance.csv"] = evaluation.sweep_csv(rows, "distance_mm").encode()
    files["summary.txt"] = (evaluation.sweep_summary(rows, "distance", "mm") + "".join(f"{n}\n" for n in notes)).encode()
    if args.svg:
        files["distance.svg"] = evaluation.sweep_svg(rows, "distance (mm)")


def _eval_confusion(args, files):
    if args.est or args.gt:
        if len(args.est) != len(args.gt) or len(args.est) < 2:
            raise CliError("confusion needs at least two --est directories with matching --gt directories")
        frames = []
        for e, g in zip(args.est, args.gt):
            cf, _ = read_estimate(Path(e))
            gt = read_ground_truth(Path(g))
            if cf.shape != gt.shape:
                raise CliError(f"dimension mismatch: {e} is {cf.shape}, {g} is {gt.shape}")
            frames.append((cf, gt))
        results = {"given": frames}
    else:
        results = evaluation.confusion_experiment(
            args.methods, sigma_mm=args.sigma if args.sigma else 1.0, seed=args.seed, cfg=_method_config(args)
        )
    rows, summary = [], []
    for name, frames in results.items():
        cm = evaluation.correspondence_confusion(frames, args.samples, args.k_nearest, args.seed)
        csv_text = evaluation.confusion_csv(cm).splitlines()
        if not rows:
            rows.append("method," + csv_text[0])
        rows.extend(f"{name},{line}" for line in csv_text[1:])
        flag = f" incomplete={list(cm.incomplete)}" if cm.incomplete else ""
        summary.append(f"{name}: diagonal mean {cm.diagonal_mean():.4f}{flag}")
    files["confusion.csv"] = ("\n".join(rows) + "\n").encode()
    files["summary.txt"] = ("\n".join(summary) + "\n").encode()


_EVAL_MODES = {
    "rms": _eval_rms,
    "normals": _eval_normals,
    "noise": _eval_noise,
    "distance": _eval_distance,
    "confusion": _eval_confusion,
}


def cmd_eval(args) -> None:
    started = time.perf_counter()
    files: dict[str, bytes] = {}
    _EVAL_MODES[args.mode](args, files)
    _commit(Path(args.out), files, _manifest(args, {"est": args.est, "gt": args.gt}, started))


def cmd_colorize(args) -> None:
    started = time.perf_counter()
    planes = _read(io.read_planes, Path(args.field))
    if planes.shape[0] < 2:
        raise CliError(f"{args.field}: expected two planes (k1, k2), found {planes.shape[0]}")
    valid = _read(io.read_mask, Path(args.valid)) if args.valid else np.isfinite(planes[0]) & np.isfinite(planes[1])
    if valid.shape != planes.shape[1:]:
        raise CliError(f"{args.valid}: mask {valid.shape} does not match field {planes.shape[1:]}")
    out = Path(args.out)
    data = _png(colorize(planes[0], planes[1], valid, args.range))
    manifest = _manifest(args, {"field": args.field, "valid": args.valid}, started)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.atomic_write_bytes(out, data)
    manifest["outputs"] = [out.name]
    io.atomic_write_bytes(out.with_name(out.stem + ".manifest.json"),
                          (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


# --------------------------------------------------------------------------
# argument parsing


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, default=PatchSpec.window, help="patch side length in pixels (odd)")
    p.add_argument("--stride", type=int, default=PatchSpec.stride, help="patch sampling step in pixels")
    p.add_argument("--max-iters", type=int, default=FitConfig.max_iters)
    p.add_argument("--radius-mm", type=float, default=10.0, help="neighbourhood radius of the pca method")
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadcurv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("scene", help=f"scene JSON file or one of: {', '.join(REFERENCE_SCENES)}")
    p.add_argument("--intrinsics", help="intrinsics JSON (default 640x480, f=525)")
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian depth noise in mm")
    p.add_argument("--quantize", type=float, default=None, help="depth quantisation step in mm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curvature", help="estimate curvature and normals from a depth PNG")
    p.add_argument("depth")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--method", choices=METHODS, default="ours")
    p.add_argument("--rejection", action="store_true", help="enable the rejection filter (ours)")
    p.add_argument("--seed", type=int, default=0, help="unused; recorded for reproducibility")
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curvature)

    p = sub.add_parser("eval", help="accuracy reports and sweeps")
    p.add_argument("--mode", choices=tuple(_EVAL_MODES), required=True)
    p.add_argument("--est", nargs="*", default=[], help="curvature output directories")
    p.add_argument("--gt", nargs="*", default=[], help="synth output directories")
    p.add_argument("--methods", "--method", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--scene", help="scene for sweeps (JSON file or reference name)")
    p.add_argument("--intrinsics")
    p.add_argument("--sigmas", default=DEFAULT_SIGMAS)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--distances", default=DEFAULT_DISTANCES)
    p.add_argument("--quantize", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=1, help="confusion samples per object and frame")
    p.add_argument("--k-nearest", type=int, default=400)
    p.add_argument("--svg", action="store_true", help="also write a line chart for sweeps")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("colorize", help="render a curvature field with the fixed colour key")
    p.add_argument("field", help="curvature planes (.f32, k1 then k2)")
    p.add_argument("--valid", help="validity mask (.mask)")
    p.add_argument("--range", type=float, default=KEY_RANGE, help="clamp range in 1/mm")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_colorize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"quadcurv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"quadcurv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
