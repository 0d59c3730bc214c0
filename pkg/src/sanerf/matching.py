"""Feature matching across image triples and reference-view selection.

Matchers implement ``match_pair(dataset, a, b)`` and return a
:class:`PairMatches` whose keys identify features within each image, so
pairwise matches can be chained through a shared reference feature.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class MatchingError(ValueError):
    pass


@dataclass
class Feature:
    position: np.ndarray  # (u, v)
    descriptor: np.ndarray
    scale: float


@dataclass
class PairMatches:
    a: int
    b: int
    keys_a: np.ndarray  # (M,) int
    keys_b: np.ndarray
    uv_a: np.ndarray  # (M, 2)
    uv_b: np.ndarray

    def __len__(self):
        return len(self.keys_a)

    def swapped(self) -> "PairMatches":
        return PairMatches(self.b, self.a, self.keys_b, self.keys_a, self.uv_b, self.uv_a)


@dataclass
class MatchTriple:
    ref_id: int
    img_i_id: int
    img_j_id: int
    uv_ref: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    uv_i: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    uv_j: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if self.ref_id in (self.img_i_id, self.img_j_id):
            raise MatchingError("reference image must differ from the other two")

    @property
    def n_matches(self) -> int:
        return len(self.uv_ref)

    @property
    def ids(self) -> tuple[int, int, int]:
        return self.ref_id, self.img_i_id, self.img_j_id


@dataclass
class MatchGraph:
    ids: list
    pair_counts: np.ndarray  # (n, n) symmetric correspondence counts
    min_matches: int = 4

    @property
    def matched(self) -> np.ndarray:
        return self.pair_counts >= self.min_matches

    def matched_images(self, i: int) -> int:
        k = self.ids.index(i)
        return int(self.matched[k].sum())

    def correspondences(self, i: int) -> int:
        k = self.ids.index(i)
        return int(self.pair_counts[k][self.matched[k]].sum())

    def counts(self) -> dict:
        return {i: (self.matched_images(i), self.correspondences(i)) for i in self.ids}

    def isolated(self) -> list:
        return [i for i in self.ids if self.matched_images(i) == 0]


# ---------------------------------------------------------------------------
# Harris corners + patch descriptors


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])


def _bilinear(img, u, v):
    """Clamp-to-edge bilinear lookup; ``img`` (H, W[, C]), ``u``/``v`` arrays."""
    h, w = img.shape[:2]
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros_like(u, dtype=int)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros_like(v, dtype=int)
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    return (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )


@dataclass
class HarrisDetector:
    """Multi-scale Harris corners described by normalised colour patches."""

    scales: tuple = (0.8, 1.2, 1.8)
    k: float = 0.05
    rel_threshold: float = 0.01
    patch: int = 11
    ratio: float = 0.8
    max_features: int = 500
    dedupe_radius: float = 1.5

    def detect(self, img: np.ndarray) -> list[Feature]:
        if img is None or np.asarray(img).size == 0:
            raise MatchingError("empty image")
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None].repeat(3, axis=2)
        gray = _gray(img)
        h, w = gray.shape
        cands = []
        for s in self.scales:
            sm = ndimage.gaussian_filter(gray, s)
            gy, gx = np.gradient(sm)
            ixx = ndimage.gaussian_filter(gx * gx, 2 * s)
            iyy = ndimage.gaussian_filter(gy * gy, 2 * s)
            ixy = ndimage.gaussian_filter(gx * gy, 2 * s)
            resp = ixx * iyy - ixy * ixy - self.k * (ixx + iyy) ** 2
            peak = resp.max()
            if peak <= 0:
                continue
            local = ndimage.maximum_filter(resp, size=3, mode="nearest") == resp
            mask = local & (resp > self.rel_threshold * peak)
            half = (self.patch // 2) * s
            margin = int(np.ceil(half)) + 1
            mask[:margin] = False
            mask[-margin:] = False
            mask[:, :margin] = False
            mask[:, -margin:] = False
            for y, x in zip(*np.nonzero(mask)):
                du = _subpixel(resp[y, x - 1], resp[y, x], resp[y, x + 1])
                dv = _subpixel(resp[y - 1, x], resp[y, x], resp[y + 1, x])
                cands.append((resp[y, x] / peak, x + du, y + dv, s))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        feats: list[Feature] = []
        for _, u, v, s in cands:
            if any(abs(f.position[0] - u) < self.dedupe_radius and abs(f.position[1] - v) < self.dedupe_radius
                   for f in feats):
                continue
            desc = self.describe(img, u, v, s)
            if desc is None:
                continue
            feats.append(Feature(np.array([u, v]), desc, s))
            if len(feats) >= self.max_features:
                break
        return feats

    def describe(self, img, u, v, scale):
        r = self.patch // 2
        offs = np.arange(-r, r + 1) * scale
        gu, gv = np.meshgrid(u + offs, v + offs)
        patch = _bilinear(img, gu, gv).reshape(-1)
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm < 1e-6:
            return None
        return patch / norm


def _subpixel(l, c, r):
    den = l - 2 * c + r
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))


def match_descriptors(da: np.ndarray, db: np.ndarray, ratio: float = 0.8):
    """Mutual nearest neighbours that pass the ratio test in both directions.

    Returns index arrays ``(ia, ib)`` sorted by ``ia``.
    """
    if len(da) == 0 or len(db) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    d2 = (da**2).sum(1)[:, None] + (db**2).sum(1)[None, :] - 2 * da @ db.T
    dist = np.sqrt(np.maximum(d2, 0.0))

    def best_two(m):
        order = np.argsort(m, axis=1, kind="stable")
        first = order[:, 0]
        d1 = m[np.arange(len(m)), first]
        d_2 = m[np.arange(len(m)), order[:, 1]] if m.shape[1] > 1 else np.full(len(m), np.inf)
        return first, d1, d_2

    fa, a1, a2 = best_two(dist)
    fb, b1, b2 = best_two(dist.T)
    ia = np.arange(len(da))
    mutual = fb[fa] == ia
    ok = mutual & (a1 <= ratio * a2) & (b1[fa] <= ratio * b2[fa])
    return ia[ok], fa[ok]


def detect_and_match_pair(img_a, img_b, detector: HarrisDetector | None = None):
    """Matched subpixel locations ``(uv_a, uv_b)`` between two images."""
    det = detector or HarrisDetector()
    fa = det.detect(img_a)
    fb = det.detect(img_b)
    ia, ib = _match_features(fa, fb, det.ratio)
    uv_a = np.array([fa[i].position for i in ia]).reshape(-1, 2)
    uv_b = np.array([fb[i].position for i in ib]).reshape(-1, 2)
    return uv_a, uv_b


def _match_features(fa, fb, ratio):
    da = np.array([f.descriptor for f in fa]).reshape(len(fa), -1)
    db = np.array([f.descriptor for f in fb]).reshape(len(fb), -1)
    return match_descriptors(da, db, ratio)


class DetectorMatcher:
    """Pairwise matcher over image content with per-image feature caching."""

    name = "harris"

    def __init__(self, detector: HarrisDetector | None = None):
        self.detector = detector or HarrisDetector()
        self._cache: dict = {}

    def features(self, dataset, i):
        key = (id(dataset), i)
        if key not in self._cache:
            self._cache[key] = self.detector.detect(dataset.image(i))
        return self._cache[key]

    def match_pair(self, dataset, a: int, b: int) -> PairMatches:
        fa, fb = self.features(dataset, a), self.features(dataset, b)
        ia, ib = _match_features(fa, fb, self.detector.ratio)
        uva = np.array([fa[i].position for i in ia]).reshape(-1, 2)
        uvb = np.array([fb[i].position for i in ib]).reshape(-1, 2)
        return PairMatches(a, b, ia, ib, uva, uvb)


class OracleMatcher:
    """Ground-truth correspondences from a synthetic scene's tracks; the
    track index is the feature key in every image."""

    name = "oracle"

    def __init__(self, tracks):
        self.tracks = tracks

    def match_pair(self, dataset, a: int, b: int) -> PairMatches:
        keys, uva, uvb = [], [], []
        for k, tr in enumerate(self.tracks):
            views = tr["views"]
            if a in views and b in views:
                keys.append(k)
                uva.append(views[a])
                uvb.append(views[b])
        keys = np.asarray(keys, dtype=int)
        return PairMatches(a, b, keys, keys.copy(), np.array(uva).reshape(-1, 2), np.array(uvb).reshape(-1, 2))


def make_matcher(kind: str, dataset=None):
    if kind == "oracle":
        if dataset is None or dataset.tracks is None:
            raise MatchingError("oracle matching needs a scene with ground-truth correspondences")
        return OracleMatcher(dataset.tracks)
    if kind in ("detector", "harris", "default"):
        return DetectorMatcher()
    raise MatchingError(f"unknown matcher {kind!r}")


# ---------------------------------------------------------------------------
# triples


def chain_matches(m_ri: PairMatches, m_rj: PairMatches):
    """Three-way matches through shared reference keys."""
    if len(m_ri) == 0 or len(m_rj) == 0:
        z = np.zeros((0, 2))
        return z, z.copy(), z.copy()
    idx_j = {int(k): n for n, k in enumerate(m_rj.keys_a)}
    rows = [(n, idx_j[int(k)]) for n, k in enumerate(m_ri.keys_a) if int(k) in idx_j]
    if not rows:
        z = np.zeros((0, 2))
        return z, z.copy(), z.copy()
    a, b = map(np.array, zip(*rows))
    return m_ri.uv_a[a], m_ri.uv_b[a], m_rj.uv_b[b]


def match_all_pairs(dataset, matcher) -> dict:
    pairs = {}
    for a, b in itertools.combinations(dataset.ids, 2):
        pairs[(a, b)] = matcher.match_pair(dataset, a, b)
    return pairs


def _pair(pairs, a, b) -> PairMatches:
    return pairs[(a, b)] if (a, b) in pairs else pairs[(b, a)].swapped()


def build_graph(ids, pairs, min_matches: int = 4) -> MatchGraph:
    ids = list(ids)
    n = len(ids)
    counts = np.zeros((n, n), dtype=int)
    for (a, b), m in pairs.items():
        ia, ib = ids.index(a), ids.index(b)
        counts[ia, ib] = counts[ib, ia] = len(m)
    return MatchGraph(ids, counts, min_matches)


def triples_from_pairs(ids, pairs, graph: MatchGraph, anchors=None, max_per_anchor: int | None = None):
    triples = []
    anchors = list(ids) if anchors is None else list(anchors)
    for r in anchors:
        others = [i for i in ids if i != r]
        combos = list(itertools.combinations(others, 2))
        if max_per_anchor is not None:
            combos = combos[:max_per_anchor]
        kr = graph.ids.index(r)
        for i, j in combos:
            ok = graph.matched[kr, graph.ids.index(i)] and graph.matched[kr, graph.ids.index(j)]
            if ok:
                uvr, uvi, uvj = chain_matches(_pair(pairs, r, i), _pair(pairs, r, j))
                triples.append(MatchTriple(r, i, j, uvr, uvi, uvj))
            else:
                triples.append(MatchTriple(r, i, j))
    return triples


def build_triples(dataset, matcher, max_per_anchor: int | None = None, min_matches: int = 4):
    """Triples anchored at every image plus the pairwise match graph.

    A pair counts as matched only with at least ``min_matches`` (more than
    three) correspondences; three-way matches chain the anchor's matches with
    both partners and are empty when either pair is unmatched.
    """
    if len(dataset.ids) < 3:
        raise MatchingError(f"need at least 3 images, got {len(dataset.ids)}")
    pairs = match_all_pairs(dataset, matcher)
    graph = build_graph(dataset.ids, pairs, min_matches)
    return triples_from_pairs(dataset.ids, pairs, graph, None, max_per_anchor), graph, pairs


def select_reference(graph: MatchGraph) -> int:
    """Most matched images, then most correspondences, then lowest id."""
    if not graph.ids:
        raise MatchingError("empty match graph")
    best = min(graph.ids, key=lambda i: (-graph.matched_images(i), -graph.correspondences(i), i))
    if graph.matched_images(best) == 0:
        raise MatchingError("no image has any matched partner (disconnected dataset)")
    return best


# ---------------------------------------------------------------------------
# cache


def save_matches(path, ids, pairs, triples, matcher_name: str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "meta", "ids": list(map(int, ids)), "matcher": matcher_name}) + "\n")
        for (a, b), m in sorted(pairs.items()):
            fh.write(json.dumps({
                "type": "pair", "a": int(a), "b": int(b),
                "keys_a": m.keys_a.tolist(), "keys_b": m.keys_b.tolist(),
                "uv_a": m.uv_a.tolist(), "uv_b": m.uv_b.tolist(),
            }) + "\n")
        for t in triples:
            fh.write(json.dumps({
                "type": "triple", "ref": t.ref_id, "i": t.img_i_id, "j": t.img_j_id,
                "uv_ref": t.uv_ref.tolist(), "uv_i": t.uv_i.tolist(), "uv_j": t.uv_j.tolist(),
            }) + "\n")


def load_matches(path):
    """Returns ``(meta, pairs, triples)`` from a JSON-lines cache."""
    meta, pairs, triples = None, {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec["type"]
        if kind == "meta":
            meta = rec
        elif kind == "pair":
            pairs[(rec["a"], rec["b"])] = PairMatches(
                rec["a"], rec["b"], np.asarray(rec["keys_a"], dtype=int), np.asarray(rec["keys_b"], dtype=int),
                np.asarray(rec["uv_a"], dtype=np.float64).reshape(-1, 2),
                np.asarray(rec["uv_b"], dtype=np.float64).reshape(-1, 2),
            )
        elif kind == "triple":
            triples.append(MatchTriple(
                rec["ref"], rec["i"], rec["j"],
                np.asarray(rec["uv_ref"], dtype=np.float64).reshape(-1, 2),
                np.asarray(rec["uv_i"], dtype=np.float64).reshape(-1, 2),
                np.asarray(rec["uv_j"], dtype=np.float64).reshape(-1, 2),
            ))
    if meta is None:
        raise MatchingError(f"{path}: missing meta record")
    return meta, pairs, triples
