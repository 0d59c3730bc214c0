"""Joint optimisation of the radiance field and the pose network."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import gradflow as gf
from . import matching
from .field import FieldConfig, RadianceField
from .geometry import Pose, project_to_so3, sim3_pose, write_pose_map
from .objective import (
    LossReport,
    LossWeights,
    bilinear_sample,
    feature_color_loss,
    match_consistency_loss,
    photometric_loss,
    total_loss,
)
from .posenet import PoseNet, PoseNetConfig
from .renderer import RenderConfig, render_rays

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "L_pixel", "L_feat_color", "L_pr", "L_3D", "L_total", "gated_match_fraction", "lr"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 10000
    rays_per_step: int = 32
    features_per_triple: int = 16
    lr: float = 5e-4
    lr_final: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    n_coarse: int = 64
    n_fine: int = 64
    perturb: bool = True
    min_match_weight: float = 0.5
    normalize_expected_point: bool = False
    expected_point_level: str = "fine"
    coarse_photometric: bool = True
    matcher: str = "oracle"
    max_triples_per_anchor: int | None = None
    dtype: str = "float32"
    log_every: int = 1
    checkpoint_every: int = 0
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    posenet: PoseNetConfig = dc_field(default_factory=PoseNetConfig)

    def __post_init__(self):
        for name in ("steps", "rays_per_step", "n_coarse"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.features_per_triple < 0 or self.n_fine < 0:
            raise ValueError("sample counts must be non-negative")
        if isinstance(self.field, dict):
            self.field = FieldConfig.from_dict(self.field)
        if isinstance(self.posenet, dict):
            self.posenet = PoseNetConfig.from_dict(self.posenet)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field"] = self.field.to_dict()
        d["posenet"] = self.posenet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def render_config(self, near, far) -> RenderConfig:
        return RenderConfig(
            n_coarse=self.n_coarse,
            n_fine=self.n_fine,
            near=near,
            far=far,
            perturb=self.perturb,
            normalize_expected_point=self.normalize_expected_point,
            expected_point_level=self.expected_point_level,
        )


# Named option sets applied on top of the defaults. "standard" is tuned for
# the 64x48 benchmark scene: fewer samples and a smaller pose-network input
# keep a 10k-step run within minutes on one CPU core, and the larger
# translation scale lets the pose head reach the rig's baseline early. The
# time saved goes into a wider field trained at a higher learning rate.
PRESETS = {
    "standard": {
        "n_coarse": 32,
        "n_fine": 32,
        "lr": 2e-3,
        "lr_final": 1e-4,
        "features_per_triple": 8,
        "field": {"width": 96, "pos_encoding": {"n_freqs": 6}, "dir_encoding": {"n_freqs": 4}, "pos_scale": 0.25},
        "posenet": {"image_size": [48, 64], "translation_scale": 10.0},
    },
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    base = merge_config(TrainConfig().to_dict(), PRESETS[name])
    return TrainConfig.from_dict(merge_config(base, overrides))


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class TrainState:
    config: TrainConfig
    params: gf.ParamStore
    coarse: RadianceField
    fine: RadianceField
    posenet: PoseNet
    rng: np.random.Generator
    ids: list
    images: dict
    intrinsics: object
    near: float
    far: float
    reference: int
    triples: list
    graph: matching.MatchGraph | None = None
    frozen_poses: dict = dc_field(default_factory=dict)
    history: list = dc_field(default_factory=list)

    @property
    def step(self) -> int:
        return self.params.step

    @property
    def dtype(self):
        return self.params.dtype

    def render_config(self) -> RenderConfig:
        return self.config.render_config(self.near, self.far)


def _dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def build_params(config: TrainConfig, ids, seed: int):
    rng = np.random.default_rng(seed)
    params = gf.ParamStore(_dtype(config.dtype))
    coarse = RadianceField(params, "coarse", config.field, rng)
    fine = RadianceField(params, "fine", config.field, rng)
    posenet = PoseNet(params, config.posenet, rng, image_ids=ids)
    return params, coarse, fine, posenet


def preprocess(dataset, config: TrainConfig, matches_path=None):
    """Triples anchored at the selected reference image, plus the graph."""
    if matches_path is not None and Path(matches_path).exists():
        meta, pairs, _ = matching.load_matches(matches_path)
        keep = set(dataset.ids)
        if keep <= set(meta["ids"]):
            pairs = {k: m for k, m in pairs.items() if k[0] in keep and k[1] in keep}
        else:
            pairs = None
    else:
        pairs = None
    if pairs is None:
        matcher = matching.make_matcher(config.matcher, dataset)
        pairs = matching.match_all_pairs(dataset, matcher)
    graph = matching.build_graph(dataset.ids, pairs)
    isolated = graph.isolated()
    if isolated:
        raise TrainingError(f"disconnected match graph; images without matched partners: {isolated}")
    ref = matching.select_reference(graph)
    triples = matching.triples_from_pairs(dataset.ids, pairs, graph, [ref], config.max_triples_per_anchor)
    if matches_path is not None and not Path(matches_path).exists():
        all_triples = matching.triples_from_pairs(dataset.ids, pairs, graph)
        matching.save_matches(matches_path, dataset.ids, pairs, all_triples, config.matcher)
    return ref, triples, graph


def init_state(dataset, config: TrainConfig, matches_path=None) -> TrainState:
    ids = list(dataset.ids)
    ref, triples, graph = preprocess(dataset, config, matches_path)
    params, coarse, fine, posenet = build_params(config, ids, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    images = {i: dataset.image(i) for i in ids}
    return TrainState(config, params, coarse, fine, posenet, rng, ids, images, dataset.intrinsics,
                      dataset.near, dataset.far, ref, triples, graph)


# ---------------------------------------------------------------------------
# one step


@dataclass
class Batch:
    ids: tuple
    pix_img: np.ndarray  # (P,) slot 0..2 within the triple
    pix_uv: np.ndarray  # (P, 2) integer pixel coords
    pix_rgb: np.ndarray  # (P, 3)
    feat_uv: np.ndarray  # (K, 3, 2) locations in ref, i, j
    feat_rgb: np.ndarray  # (K, 3, 3)


def sample_batch(state: TrainState) -> Batch:
    rng = state.rng
    cfg = state.config
    tri = state.triples[int(rng.integers(len(state.triples)))]
    ids = tri.ids
    intr = state.intrinsics
    slot = rng.integers(0, 3, size=cfg.rays_per_step)
    u = rng.integers(0, intr.width, size=cfg.rays_per_step)
    v = rng.integers(0, intr.height, size=cfg.rays_per_step)
    rgb = np.stack([state.images[ids[s]][vv, uu] for s, uu, vv in zip(slot, u, v)]).reshape(-1, 3)
    n = tri.n_matches
    k = min(cfg.features_per_triple, n)
    if k > 0:
        pick = np.sort(rng.choice(n, size=k, replace=False))
        fuv = np.stack([tri.uv_ref[pick], tri.uv_i[pick], tri.uv_j[pick]], axis=1)
        frgb = np.stack([bilinear_sample(state.images[ids[s]], fuv[:, s])[0] for s in range(3)], axis=1)
    else:
        fuv = np.zeros((0, 3, 2))
        frgb = np.zeros((0, 3, 3))
    return Batch(ids, slot, np.stack([u, v], axis=-1).astype(np.float64), rgb, fuv, frgb)


def _camera_dirs(intr, uv):
    d = np.stack([(uv[:, 0] - intr.cx) / intr.fx, -(uv[:, 1] - intr.cy) / intr.fy, -np.ones(len(uv))], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def forward_batch(state: TrainState, batch: Batch, poses: dict | None = None):
    """Render the batch and evaluate every loss term. Returns
    ``(L_total, report, tensors)``; ``tensors`` keeps intermediates for NaN
    diagnostics."""
    cfg = state.config
    dtype = state.dtype
    ids = batch.ids
    if poses is None:
        poses = state.posenet.poses_for_triple(ids, state.images)
    rots = torch.stack([poses[i][0] for i in ids]).to(dtype)
    trans = torch.stack([poses[i][1] for i in ids]).to(dtype)

    k = batch.feat_uv.shape[0]
    slots = np.concatenate([batch.pix_img, np.repeat(np.arange(3)[None], k, axis=0).reshape(-1)])
    uv = np.concatenate([batch.pix_uv, batch.feat_uv.reshape(-1, 2)])
    d_cam = torch.as_tensor(_camera_dirs(state.intrinsics, uv), dtype=dtype)
    slot_t = torch.as_tensor(slots, dtype=torch.long)
    d = torch.einsum("nij,nj->ni", rots[slot_t], d_cam)
    d = d / d.norm(dim=-1, keepdim=True)
    o = trans[slot_t]
    coarse, fine = render_rays((state.coarse, state.fine), o, d, state.render_config(), state.rng)

    p = len(batch.pix_img)
    truth = torch.as_tensor(batch.pix_rgb, dtype=dtype)
    ftruth = torch.as_tensor(batch.feat_rgb.reshape(-1, 3), dtype=dtype)
    l_pix = photometric_loss(fine.color[:p], truth)
    l_feat, no_feat = feature_color_loss(fine.color[p:], ftruth)
    if cfg.coarse_photometric and cfg.n_fine > 0:
        l_pix = l_pix + photometric_loss(coarse.color[:p], truth)
        l_feat = l_feat + feature_color_loss(coarse.color[p:], ftruth)[0]
    l_pr = l_pix + l_feat

    level = fine if cfg.expected_point_level == "fine" else coarse
    xs = level.expected_point[p:].reshape(k, 3, 3)
    ws = level.total_weight[p:].reshape(k, 3)
    l_3d, gated, no_match = match_consistency_loss(
        xs[:, 0], xs[:, 1], xs[:, 2], ws[:, 0], ws[:, 1], ws[:, 2], cfg.min_match_weight
    )
    l_total = total_loss(l_pr, l_3d, LossWeights(cfg.alpha, cfg.beta))
    report = LossReport(
        L_pixel=float(l_pix.detach()), L_feat_color=float(l_feat.detach()), L_pr=float(l_pr.detach()),
        L_3D=float(l_3d.detach()), L_total=float(l_total.detach()), gated_match_fraction=gated, no_features=no_feat, no_matches=no_match,
    )
    tensors = {
        "pose_rotations": rots, "pose_translations": trans,
        "coarse_color": coarse.color, "fine_color": fine.color,
        "expected_points": level.expected_point,
        "L_pixel": l_pix, "L_feat_color": l_feat, "L_3D": l_3d, "L_total": l_total,
    }
    return l_total, report, tensors


def _first_nonfinite(tensors: dict) -> str | None:
    for name, t in tensors.items():
        if not torch.isfinite(t.detach()).all():
            return name
    return None


def train_step(state: TrainState, batch: Batch | None = None) -> LossReport:
    cfg = state.config
    if batch is None:
        batch = sample_batch(state)
    loss, report, tensors = forward_batch(state, batch)
    bad = _first_nonfinite(tensors)
    if bad is not None:
        raise TrainingError(f"non-finite value at step {state.step} in {bad!r}")
    gf.backward(loss, state.params)
    lr = gf.lr_at(state.step, cfg.steps, cfg.lr, cfg.lr_final)
    gf.adam_step(state.params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    state.history.append(report)
    return report


# ---------------------------------------------------------------------------
# poses


def estimated_poses(state: TrainState) -> dict:
    """One camera-to-world pose per image.

    The reference is the identity. Every other image takes the chordal mean
    of the poses predicted for it across all training triples (mean
    translation, mean rotation projected onto SO(3)). Frozen poses win.
    """
    out = {state.reference: Pose.identity()}
    acc: dict = {}
    with torch.no_grad():
        for tri in state.triples:
            poses = state.posenet.poses_for_triple(tri.ids, state.images)
            for i in tri.ids[1:]:
                r, t = poses[i]
                acc.setdefault(i, []).append((r.double().numpy(), t.double().numpy()))
    for i, lst in acc.items():
        rs = np.mean([r for r, _ in lst], axis=0)
        ts = np.mean([t for _, t in lst], axis=0)
        out[i] = Pose(project_to_so3(rs), ts)
    for i, p in state.frozen_poses.items():
        out[i] = p
    return out


def map_poses_between_frames(src_poses: dict, dst_poses: dict, which) -> dict:
    """Carry ``src_poses[which]`` into the frame of ``dst_poses`` with a
    similarity fitted to the poses the two share.

    The rotation is the chordal mean of the per-camera relative rotations,
    then scale and translation fit the camera centres. Fitting orientations
    as well as centres matters for forward-facing rigs, where both runs can
    tilt every camera by the same few degrees against its centre layout.
    """
    common = sorted(set(src_poses) & set(dst_poses))
    if len(common) < 2:
        raise TrainingError(f"need at least 2 shared poses to map between frames, got {len(common)}")
    r = project_to_so3(sum(dst_poses[i].rotation @ src_poses[i].rotation.T for i in common))
    x = np.array([src_poses[i].translation for i in common]) @ r.T
    y = np.array([dst_poses[i].translation for i in common])
    xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
    if not (xc * xc).sum() > 0:
        raise TrainingError("shared camera centres coincide; cannot fit a scale")
    s = float((xc * yc).sum() / (xc * xc).sum())
    t = y.mean(axis=0) - s * x.mean(axis=0)
    return {i: sim3_pose(s, r, t, src_poses[i]) for i in which}


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_state(state: TrainState, path, extra: dict | None = None) -> None:
    meta = {
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "rng_state": _rng_state(state.rng),
        "reference": state.reference,
        "ids": list(state.ids),
        "frozen_poses": {str(i): p.matrix().reshape(-1).tolist() for i, p in sorted(state.frozen_poses.items())},
    }
    if extra:
        meta.update(extra)
    gf.save_checkpoint(path, state.params, meta)


def load_state(path, dataset, matches_path=None) -> TrainState:
    params, meta = gf.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    ids = meta["ids"]
    sub = dataset if list(dataset.ids) == ids else dataset.subset(ids)
    state = init_state(sub, config, matches_path)
    if state.reference != meta["reference"]:
        raise TrainingError("checkpoint reference image disagrees with the dataset's match graph")
    want = [(n, tuple(p.shape)) for n, p in state.params.items()]
    if want != [(n, tuple(p.shape)) for n, p in params.items()]:
        raise TrainingError("checkpoint parameters do not match the configured model")
    state.params = params
    state.coarse.params = state.fine.params = state.posenet.params = params
    state.rng.bit_generator.state = meta["rng_state"]
    state.frozen_poses = {int(i): Pose.from_matrix(m) for i, m in meta.get("frozen_poses", {}).items()}
    return state


# ---------------------------------------------------------------------------
# loops


def train(state: TrainState, steps: int | None = None, log_path=None, checkpoint_path=None,
          progress_every: int = 0) -> TrainState:
    cfg = state.config
    end = cfg.steps if steps is None else min(cfg.steps, state.step + steps)
    writer = None
    fh = None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_COLUMNS)
    t0 = time.time()
    try:
        while state.step < end:
            step = state.step
            lr = gf.lr_at(step, cfg.steps, cfg.lr, cfg.lr_final)
            rep = train_step(state)
            if writer is not None and (step % cfg.log_every == 0):
                writer.writerow([step, *(f"{getattr(rep, c):.8g}" for c in LOG_COLUMNS[1:-1]), f"{lr:.8g}"])
            if progress_every and (step + 1) % progress_every == 0:
                log.info("step %d L_total %.5f L_3D %.5f (%.1fs)", step + 1, rep.L_total, rep.L_3D, time.time() - t0)
            if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    return state


def train_scene(dataset, config: TrainConfig, out_dir, phase: str = "all", frozen_poses: dict | None = None,
                matches_path=None, progress_every: int = 0) -> TrainState:
    """Run one training phase and write checkpoint, log and pose dump.

    ``phase="all"`` trains on every image; ``"train-only"`` drops the
    held-out split and keeps ``frozen_poses`` (test poses from a previous
    all-image run, in that run's frame) for evaluation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if phase == "all":
        sub = dataset
    elif phase == "train-only":
        sub = dataset.subset(dataset.train_ids)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    ckpt = out / "checkpoint.bin"
    if ckpt.exists():
        state = load_state(ckpt, sub, matches_path)
    else:
        state = init_state(sub, config, matches_path)
    train(state, log_path=out / "train_log.csv", checkpoint_path=ckpt, progress_every=progress_every)
    poses = estimated_poses(state)
    extra = {}
    if frozen_poses:
        source = dict(frozen_poses)
        held = [i for i in source if i not in poses]
        if held:
            mapped = map_poses_between_frames(source, poses, held)
            state.frozen_poses = mapped
            poses.update(mapped)
    save_state(state, ckpt, extra)
    write_pose_map(out / "poses.txt", poses, comment="estimated camera-to-world poses")
    return state
