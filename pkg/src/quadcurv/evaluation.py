"""Accuracy experiments: RMS curvature error, normal error, sweeps and correspondence confusion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from quadcurv import baselines, normals, quadric, synth
from quadcurv.core import (
    DEFAULT_INTRINSICS,
    CurvatureField,
    Intrinsics,
    NormalField,
    PatchSpec,
    RangeImage,
    backproject,
)
from quadcurv.synth import GroundTruth, NoiseSpec, ShapeSpec

#: Estimators in the comparison, in report order.
METHODS = ("ours", "ours-r", "douros", "besl", "pca")

#: Column label used for matches that land on unlabelled pixels.
BACKGROUND = 0


# --------------------------------------------------------------------------
# error statistics


@dataclass(frozen=True)
class ObjectError:
    rms: float
    sigma: float
    mean_k1: float
    mean_k2: float
    n: int


@dataclass(frozen=True)
class ErrorReport:
    rms: float
    sigma: float
    n: int
    per_object: dict[int, ObjectError] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.n == 0


def evaluation_mask(est: CurvatureField, gt: GroundTruth) -> np.ndarray:
    """Pixels that count: valid, converged, on an object and away from edges."""
    return est.valid & est.converged & ~gt.edge_mask & (gt.label > 0)


def pixel_error(est: CurvatureField, gt: GroundTruth) -> np.ndarray:
    """Per-pixel ``sqrt(((k1 - k1_gt)^2 + (k2 - k2_gt)^2) / 2)``."""
    return np.sqrt(0.5 * ((est.k1 - gt.k1) ** 2 + (est.k2 - gt.k2) ** 2))


def _stats(e: np.ndarray) -> tuple[float, float]:
    return float(np.sqrt(np.mean(e * e))), float(np.std(e))


def rms_error(est: CurvatureField, gt: GroundTruth) -> ErrorReport:
    if est.shape != gt.shape:
        raise ValueError(f"estimate {est.shape} and ground truth {gt.shape} disagree")
    mask = evaluation_mask(est, gt)
    if not mask.any():
        return ErrorReport(float("nan"), float("nan"), 0)
    e = pixel_error(est, gt)
    per = {}
    for lab in np.unique(gt.label[mask]):
        m = mask & (gt.label == lab)
        rms, sigma = _stats(e[m])
        per[int(lab)] = ObjectError(rms, sigma, float(est.k1[m].mean()), float(est.k2[m].mean()), int(m.sum()))
    rms, sigma = _stats(e[mask])
    return ErrorReport(rms, sigma, int(mask.sum()), per)


@dataclass(frozen=True)
class AngleReport:
    mean_deg: float
    n: int

    @property
    def empty(self) -> bool:
        return self.n == 0


def normal_angular_error(est: NormalField, gt: GroundTruth) -> AngleReport:
    """Mean absolute angle between estimated and true normals, in degrees.

    Estimated normals are sign-aligned with the truth before comparison.
    """
    if est.shape != gt.shape:
        raise ValueError(f"estimate {est.shape} and ground truth {gt.shape} disagree")
    mask = est.valid & ~gt.edge_mask & (gt.label > 0)
    if not mask.any():
        return AngleReport(float("nan"), 0)
    dot = np.abs(np.einsum("ni,ni->n", est.normals[mask], gt.normal[mask]))
    ang = np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))
    return AngleReport(float(ang.mean()), int(mask.sum()))


# --------------------------------------------------------------------------
# running the estimators


@dataclass(frozen=True)
class MethodConfig:
    """Settings shared by all estimators of a comparison run."""

    spec: PatchSpec = field(default_factory=PatchSpec)
    max_iters: int = quadric.FitConfig.max_iters
    radius_mm: float = 10.0
    irls_iters: int = 5
    threads: int = 1

    def fit_config(self, rejection: bool = False) -> quadric.FitConfig:
        return quadric.FitConfig(max_iters=self.max_iters, rejection=rejection)

    def baseline_config(self, method: str) -> baselines.BaselineConfig:
        return baselines.BaselineConfig(
            method=method, radius_mm=self.radius_mm, spec=self.spec, irls_iters=self.irls_iters
        )


@dataclass(frozen=True)
class Estimate:
    curvature: CurvatureField
    normals: NormalField


class Frame:
    """A range image with lazily computed, cached shared intermediates."""

    def __init__(self, img: RangeImage, k: Intrinsics = DEFAULT_INTRINSICS, threads: int = 1):
        self.img = img
        self.k = k
        self.threads = threads
        self.points = backproject(img, k)
        self._initial: NormalField | None = None

    @property
    def initial_normals(self) -> NormalField:
        if self._initial is None:
            self._initial = normals.initial_normal_field(self.points, threads=self.threads)
        return self._initial


def estimate(method: str, frame: Frame, cfg: MethodConfig = MethodConfig()) -> Estimate:
    """Run one estimator.

    ``ours``/``ours-r`` return refined normals, ``douros``/``besl`` the initial
    regression normals they start from, and ``pca`` its covariance normals.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method in ("ours", "ours-r"):
        cf, nf = quadric.curvature_field(
            frame.points, frame.initial_normals, cfg.spec, cfg.fit_config(method == "ours-r"), cfg.threads
        )
        return Estimate(cf, nf)
    if method == "pca":
        nf, cf = baselines.pca_curvature(frame.points, frame.k, cfg.baseline_config("pca"), cfg.threads)
        return Estimate(cf, nf)
    bcfg = cfg.baseline_config("lsq_quadric" if method == "douros" else "reweighted_lsq")
    cf = baselines.quadric_baseline_field(frame.points, frame.initial_normals, bcfg, cfg.threads)
    return Estimate(cf, frame.initial_normals)


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    method: str
    x: float
    rms: float
    sigma: float
    n: int
    trials: int


def noise_seed(seed: int, trial: int) -> int:
    return seed * 1_000_003 + trial


def noise_sweep(
    methods: Sequence[str],
    sigmas: Sequence[float],
    trials: int = 20,
    seed: int = 0,
    scene: Sequence[ShapeSpec] | None = None,
    k: Intrinsics = DEFAULT_INTRINSICS,
    cfg: MethodConfig = MethodConfig(),
) -> list[SweepRow]:
    """Mean RMS over ``trials`` noise draws for each sigma and method.

    ``rms`` is the mean of the per-trial RMS values and ``sigma`` their
    standard deviation.  Noise-free settings are evaluated once since every
    trial would be identical.
    """
    scene = synth.sphere_scene() if scene is None else scene
    clean, gt = synth.render(scene, k)
    rows = []
    for s in sigmas:
        n_runs = 1 if s == 0 else trials
        values = {m: [] for m in methods}
        counts = {m: 0 for m in methods}
        for t in range(n_runs):
            img = synth.add_noise(clean, NoiseSpec(sigma_mm=s, seed=noise_seed(seed, t)))
            frame = Frame(img, k, cfg.threads)
            for m in methods:
                rep = rms_error(estimate(m, frame, cfg).curvature, gt)
                values[m].append(rep.rms)
                counts[m] += rep.n
        for m in methods:
            v = np.asarray(values[m])
            rows.append(SweepRow(m, float(s), float(v.mean()), float(v.std()), counts[m] // n_runs, trials))
    return rows


def distance_sweep_eval(
    methods: Sequence[str],
    distances: Sequence[float],
    base: ShapeSpec | None = None,
    quantize_mm: float | None = None,
    sigma_mm: float = 0.0,
    seed: int = 0,
    k: Intrinsics = DEFAULT_INTRINSICS,
    cfg: MethodConfig = MethodConfig(),
) -> tuple[list[SweepRow], list[str]]:
    """RMS against distance.  Returns the rows and notes on skipped frames."""
    base = synth.sphere_scene()[0] if base is None else base
    rows, notes = [], []
    for d, (img, gt) in zip(distances, synth.distance_sweep(base, distances, k)):
        if gt.is_empty:
            notes.append(f"distance {d:g} mm: object outside the frame, skipped")
            continue
        if sigma_mm > 0 or quantize_mm is not None:
            img = synth.add_noise(img, NoiseSpec(sigma_mm=sigma_mm, quantize_mm=quantize_mm, seed=seed))
        frame = Frame(img, k, cfg.threads)
        for m in methods:
            rep = rms_error(estimate(m, frame, cfg).curvature, gt)
            if rep.empty:
                notes.append(f"distance {d:g} mm: no evaluable pixels for {m}")
                continue
            rows.append(SweepRow(m, float(d), rep.rms, rep.sigma, rep.n, 1))
    return rows, notes


def max_min_ratio(rows: Iterable[SweepRow], method: str) -> float:
    v = np.array([r.rms for r in rows if r.method == method])
    return float(v.max() / v.min())


# --------------------------------------------------------------------------
# correspondence confusion


@dataclass(frozen=True)
class ConfusionMatrix:
    rows: tuple[int, ...]
    cols: tuple[int, ...]
    values: np.ndarray
    counts: np.ndarray
    incomplete: tuple[int, ...] = ()

    def diagonal(self) -> np.ndarray:
        idx = [self.cols.index(r) for r in self.rows]
        return self.values[np.arange(len(self.rows)), idx]

    def diagonal_mean(self) -> float:
        return float(self.diagonal().mean())


def correspondence_confusion(
    frames: Sequence[tuple[CurvatureField, GroundTruth]],
    samples_per_object: int = 1,
    k_nearest: int = 400,
    seed: int = 0,
    margin: int = 0,
) -> ConfusionMatrix:
    """How often the curvature-space neighbours of a sample land on its own object.

    Each frame contributes ``samples_per_object`` random interior samples per
    object, drawn from evaluable pixels at least ``margin`` pixels away from
    any other label.  For each sample the ``k_nearest`` pixels of all frames closest in
    ``(k1, k2)`` are found (ties go to the lower frame-major pixel index) and
    their labels are histogrammed into the sample object's row.
    """
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    pool_k, pool_lab, masks = [], [], []
    for cf, gt in frames:
        if cf.shape != gt.shape:
            raise ValueError(f"estimate {cf.shape} and ground truth {gt.shape} disagree")
        m = cf.valid & cf.converged & ~gt.edge_mask
        masks.append(m)
        pool_k.append(np.stack([cf.k1[m], cf.k2[m]], axis=1))
        pool_lab.append(gt.label[m])
    pool_k = np.concatenate(pool_k)
    pool_lab = np.concatenate(pool_lab)
    objects = sorted({int(v) for cf_gt in frames for v in np.unique(cf_gt[1].label) if v > 0})
    cols = tuple(objects) + (BACKGROUND,)
    col_of = {c: i for i, c in enumerate(cols)}
    lab_col = np.array([col_of.get(int(v), col_of[BACKGROUND]) for v in range(int(pool_lab.max(initial=0)) + 1)])
    counts = np.zeros((len(objects), len(cols)))
    incomplete = set()
    rng = np.random.default_rng(seed)
    k_eff = min(k_nearest, len(pool_k))
    order_idx = np.arange(len(pool_k))
    for (cf, gt), m in zip(frames, masks):
        for i, obj in enumerate(objects):
            inside = gt.label == obj
            if margin > 0:
                inside = ndimage.binary_erosion(inside, np.ones((2 * margin + 1,) * 2, bool), border_value=0)
            cand = np.flatnonzero((m & inside).ravel())
            if cand.size == 0:
                incomplete.add(obj)
                continue
            picks = rng.choice(cand, size=min(samples_per_object, cand.size), replace=False)
            for flat in np.sort(picks):
                r, c = np.unravel_index(flat, gt.shape)
                d2 = (pool_k[:, 0] - cf.k1[r, c]) ** 2 + (pool_k[:, 1] - cf.k2[r, c]) ** 2
                nearest = np.lexsort((order_idx, d2))[:k_eff]
                counts[i] += np.bincount(lab_col[pool_lab[nearest]], minlength=len(cols))
    sums = counts.sum(axis=1, keepdims=True)
    values = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    return ConfusionMatrix(tuple(objects), cols, values, counts, tuple(sorted(incomplete)))


def scene_pair(distance: float = 800.0, yaw_deg: float = 15.0) -> list[list[ShapeSpec]]:
    """The three-object scene and the same scene seen after orbiting the camera by ``yaw_deg``."""
    scene = synth.three_object_scene(distance)
    rot, trans = synth.look_at_rotation(yaw_deg, np.array([0.0, 60.0, distance]))
    return [scene, synth.move_camera(scene, rot, trans)]


def confusion_experiment(
    methods: Sequence[str],
    scenes: Sequence[Sequence[ShapeSpec]] | None = None,
    sigma_mm: float = 1.0,
    seed: int = 0,
    k: Intrinsics = DEFAULT_INTRINSICS,
    cfg: MethodConfig = MethodConfig(),
) -> dict[str, list[tuple[CurvatureField, GroundTruth]]]:
    """Render, perturb and estimate every view; returns per-method frame lists."""
    scenes = scene_pair() if scenes is None else scenes
    out = {m: [] for m in methods}
    for i, scene in enumerate(scenes):
        img, gt = synth.render(scene, k)
        img = synth.add_noise(img, NoiseSpec(sigma_mm=sigma_mm, seed=noise_seed(seed, i)))
        frame = Frame(img, k, cfg.threads)
        for m in methods:
            out[m].append((estimate(m, frame, cfg).curvature, gt))
    return out


# --------------------------------------------------------------------------
# reports


def sweep_csv(rows: Sequence[SweepRow], x_name: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", x_name, "rms", "sigma", "n", "trials"])
    for r in rows:
        w.writerow([r.method, f"{r.x:g}", f"{r.rms:.9e}", f"{r.sigma:.9e}", r.n, r.trials])
    return buf.getvalue()


def report_csv(reports: dict[str, ErrorReport]) -> str:
    """One row per method and object (label ``all`` for the pooled figure)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "label", "rms", "sigma", "n", "mean_k1", "mean_k2"])
    for name, rep in reports.items():
        w.writerow([name, "all", f"{rep.rms:.9e}", f"{rep.sigma:.9e}", rep.n, "", ""])
        for lab, o in sorted(rep.per_object.items()):
            w.writerow([name, lab, f"{o.rms:.9e}", f"{o.sigma:.9e}", o.n, f"{o.mean_k1:.9e}", f"{o.mean_k2:.9e}"])
    return buf.getvalue()


def confusion_csv(cm: ConfusionMatrix, names: dict[int, str] | None = None) -> str:
    names = names or {}
    label = lambda v: "background" if v == BACKGROUND else names.get(v, str(v))  # noqa: E731
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample"] + [label(c) for c in cm.cols])
    for i, r in enumerate(cm.rows):
        w.writerow([label(r)] + [f"{v:.6f}" for v in cm.values[i]])
    return buf.getvalue()


def sweep_summary(rows: Sequence[SweepRow], x_name: str, unit: str) -> str:
    methods = list(dict.fromkeys(r.method for r in rows))
    xs = sorted({r.x for r in rows})
    lines = [f"{x_name} ({unit})".ljust(14) + "".join(m.rjust(12) for m in methods)]
    table = {(r.method, r.x): r.rms for r in rows}
    for x in xs:
        cells = "".join((f"{table[(m, x)]:.3e}" if (m, x) in table else "-").rjust(12) for m in methods)
        lines.append(f"{x:g}".ljust(14) + cells)
    return "\n".join(lines) + "\n"


def sweep_svg(rows: Sequence[SweepRow], x_name: str) -> bytes:
    """Minimal line chart of RMS against the sweep variable (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "quadcurv", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in dict.fromkeys(r.method for r in rows):
            pts = sorted((r.x, r.rms) for r in rows if r.method == m)
            ax.plot(*zip(*pts), marker="o", label=m)
        ax.set_xlabel(x_name)
        ax.set_ylabel("RMS error (1/mm)")
        ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()
