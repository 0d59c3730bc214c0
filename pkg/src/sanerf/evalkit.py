"""Image metrics, trajectory error and run reports."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import torch

from .geometry import ate_rmse, read_pose_map
from .renderer import RenderConfig, render_image

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

REPORT_COLUMNS = ["view", "psnr", "ssim", "lpips"]


class EvalError(ValueError):
    pass


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"{name}: shapes {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical
    images give +inf."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise EvalError(f"expected (H, W), (H, W, 1) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, keeping only windows fully inside the image
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


def ssim(a, b) -> float:
    """Mean structural similarity of the luma channels over every window
    lying fully inside the image."""
    a, b = _pair(a, b, "ssim")
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise EvalError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def _num(x):
    if x is None:
        return None
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _denum(x):
    if x in ("inf", "-inf"):
        return float(x)
    return x


def evaluate_views(fields, poses: dict, dataset, ids, render_cfg: RenderConfig, dtype=torch.float32) -> list[dict]:
    """Render each view in ``ids`` from ``poses`` and score it against the
    dataset image. Returns one ``{view, psnr, ssim, lpips}`` row per view."""
    rows = []
    for i in ids:
        if i not in poses:
            raise EvalError(f"no pose for view {i}")
        p = poses[i]
        img, _ = render_image(fields, p.rotation, p.translation, dataset.intrinsics, render_cfg, dtype=dtype)
        truth = dataset.image(i)
        rows.append({"view": int(i), "psnr": psnr(img, truth), "ssim": ssim(img, truth), "lpips": None})
    return rows


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def trajectory_error(estimated: dict, reference, ids) -> float:
    """ATE over ``ids`` after similarity alignment of the estimate onto the
    reference trajectory."""
    ids = [i for i in ids if i in estimated]
    return ate_rmse([estimated[i] for i in ids], [reference[i] for i in ids])


def evaluate_run(checkpoint, dataset, reference_poses=None, out_path=None, matches_path=None) -> dict:
    """Evaluate a trained checkpoint on the dataset's held-out views.

    Test views use the checkpoint's own pose estimate when the view was
    trained, otherwise the frozen pose stored with it. ``reference_poses``
    (a list indexed by image id, an id-keyed dict or a pose file) defaults to the
    dataset's own; without either the report has no ATE entry. With
    ``out_path`` the report is written as JSON and mirrored to a CSV next to
    it.
    """
    from . import trainer

    if not dataset.test_ids:
        raise EvalError("dataset has no held-out test views")
    state = trainer.load_state(checkpoint, dataset, matches_path)
    poses = trainer.estimated_poses(state)
    cfg = state.render_config()
    cfg.perturb = False
    rows = evaluate_views((state.coarse, state.fine), poses, dataset, dataset.test_ids, cfg, state.dtype)
    report = {
        "checkpoint": str(checkpoint),
        "step": state.step,
        "config_hash": state.config.hash(),
        "reference_image": state.reference,
        "trained_views": list(state.ids),
        "views": rows,
        "mean": {
            "psnr": _mean([r["psnr"] for r in rows]),
            "ssim": _mean([r["ssim"] for r in rows]),
            "lpips": None,
        },
    }
    if isinstance(reference_poses, (str, Path)):
        reference_poses = read_pose_map(reference_poses)
    if reference_poses is None and dataset.has_reference_poses:
        reference_poses = dataset.reference_poses
    if reference_poses is not None:
        if not isinstance(reference_poses, dict):
            reference_poses = dict(enumerate(reference_poses))
        own = [i for i in state.ids if i in reference_poses]
        report["ate"] = trajectory_error(poses, reference_poses, own)
    if out_path is not None:
        write_report(report, out_path)
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return _num(obj)


def write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in report["views"]:
            w.writerow([r["view"], *("" if r[c] is None else _num(r[c]) for c in REPORT_COLUMNS[1:])])
        m = report["mean"]
        w.writerow(["mean", *("" if m[c] is None else _num(m[c]) for c in REPORT_COLUMNS[1:])])
        if "ate" in report:
            w.writerow(["ate", report["ate"], "", ""])


def read_report(path) -> dict:
    def hook(d):
        return {k: _denum(v) for k, v in d.items()}

    return json.loads(Path(path).read_text(), object_hook=hook)

