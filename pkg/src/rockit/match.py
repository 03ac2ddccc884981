"""Keypoint extraction and descriptor matching.

Keypoints are confidence local maxima above a threshold; matching is
mutual-nearest-neighbour under cosine similarity.  Two template-matching
strategies exist: "direct" concatenates both descriptor branches, while
"objectness_filtered" first discards scene keypoints whose inter-object
descriptor does not resemble the template's mean inter-object descriptor
(the key), then matches on the intra-object branch only.

Keypoint coordinates are (row, col).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter


@dataclass
class Keypoint:
    coord: tuple            # (row, col)
    confidence: float
    desc_intra: np.ndarray  # [C1]
    desc_inter: np.ndarray  # [C2]


@dataclass
class MatchSet:
    pairs: list             # (index_a, index_b, similarity)
    method: str
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    @property
    def indices_a(self):
        return np.array([p[0] for p in self.pairs], dtype=int)

    @property
    def indices_b(self):
        return np.array([p[1] for p in self.pairs], dtype=int)

    def to_json(self):
        return {
            "method": self.method,
            "pairs": [[int(a), int(b), float(s)] for a, b, s in self.pairs],
            "params": self.stats,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            pairs=[(int(a), int(b), float(s)) for a, b, s in d["pairs"]],
            method=d["method"],
            stats=d.get("params", {}),
        )


def coords_array(keypoints):
    return np.array([kp.coord for kp in keypoints], dtype=np.float64).reshape(-1, 2)


def _stack(keypoints, attr):
    return np.stack([getattr(kp, attr) for kp in keypoints]).astype(np.float64)


def _rows_unit(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.maximum(norms, 1e-12)


def extract_keypoints(output, r_thr=1.5, topk=512, nms_radius=2, mask=None):
    """Thresholded local maxima of the confidence map, strongest first.

    A pixel survives when its confidence strictly exceeds ``r_thr`` and is
    >= every pixel within ``nms_radius`` (Chebyshev).  ``mask`` optionally
    restricts candidates (used when the object region is known).  Ties in
    the confidence sort break toward the lower row-major pixel index.
    """
    if r_thr < 0:
        raise ValueError("r_thr must be >= 0")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    conf = output.confidence.value
    h, w = conf.shape
    if nms_radius > 0:
        local_max = conf >= maximum_filter(
            conf, size=2 * nms_radius + 1, mode="constant", cval=-np.inf
        )
    else:
        local_max = np.ones_like(conf, dtype=bool)
    keep = local_max & (conf > r_thr)
    if mask is not None:
        keep &= mask.astype(bool)
    rows, cols = np.nonzero(keep)
    if len(rows) == 0:
        return []
    order = np.lexsort((cols, rows, -conf[rows, cols]))
    order = order[:topk]
    rows, cols = rows[order], cols[order]
    di = output.desc_intra.value
    de = output.desc_inter.value
    return [
        Keypoint(
            coord=(int(r), int(c)),
            confidence=float(conf[r, c]),
            desc_intra=di[:, r, c].copy(),
            desc_inter=de[:, r, c].copy(),
        )
        for r, c in zip(rows, cols)
    ]


def mutual_nn(desc_a, desc_b, method="mutual_nn"):
    """Mutual nearest neighbours under cosine similarity.

    ``desc_a``/``desc_b`` are [N,C] arrays or lists of vectors.  (i, j) is a
    match iff j is i's best column and i is j's best row; argmax ties break
    toward the lowest index.  The result is a partial bijection.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise ValueError("need non-empty [N,C] descriptor arrays")
    sim = _rows_unit(a) @ _rows_unit(b).T
    nn12 = sim.argmax(axis=1)
    nn21 = sim.argmax(axis=0)
    ids = np.arange(len(a))
    mutual = nn21[nn12] == ids
    pairs = [
        (int(i), int(nn12[i]), float(sim[i, nn12[i]])) for i in ids[mutual]
    ]
    return MatchSet(pairs=pairs, method=method,
                    stats={"n_a": len(a), "n_b": len(b), "n_matches": len(pairs)})


def match_direct(template_kps, scene_kps):
    """Mutual-NN on the re-normalized concatenation of both branches."""
    if not template_kps or not scene_kps:
        return MatchSet(pairs=[], method="direct",
                        stats={"n_a": len(template_kps), "n_b": len(scene_kps), "n_matches": 0})
    a = np.concatenate([_stack(template_kps, "desc_intra"), _stack(template_kps, "desc_inter")], axis=1)
    b = np.concatenate([_stack(scene_kps, "desc_intra"), _stack(scene_kps, "desc_inter")], axis=1)
    out = mutual_nn(_rows_unit(a), _rows_unit(b), method="direct")
    return out


def match_objectness_filtered(template_kps, scene_kps, inter_sim_thr=0.5):
    """Filter scene keypoints by inter-object similarity, then match intra.

    The key is the re-normalized mean of the template's inter-object
    descriptors; scene keypoints with cosine(key, desc_inter) below the
    threshold are discarded.  An empty survivor set means the object is
    absent from the scene.
    """
    stats = {"n_a": len(template_kps), "n_b": len(scene_kps),
             "inter_sim_thr": inter_sim_thr}
    if not template_kps or not scene_kps:
        stats.update({"n_survivors": 0, "n_matches": 0})
        return MatchSet(pairs=[], method="objectness_filtered", stats=stats)
    key = _stack(template_kps, "desc_inter").mean(axis=0)
    key = key / max(np.linalg.norm(key), 1e-12)
    scene_inter = _rows_unit(_stack(scene_kps, "desc_inter"))
    cos = scene_inter @ key
    survivors = np.nonzero(cos >= inter_sim_thr)[0]
    stats["n_survivors"] = int(len(survivors))
    if len(survivors) == 0:
        stats["n_matches"] = 0
        return MatchSet(pairs=[], method="objectness_filtered", stats=stats)
    sub = mutual_nn(
        _stack(template_kps, "desc_intra"),
        _stack(scene_kps, "desc_intra")[survivors],
    )
    pairs = [(ia, int(survivors[ib]), s) for ia, ib, s in sub.pairs]
    stats["n_matches"] = len(pairs)
    return MatchSet(pairs=pairs, method="objectness_filtered", stats=stats)


def ransac_match_filter(matches, coords_a, coords_b, inlier_px=3.0, iters=200, seed=0):
    """Keep matches consistent with a RANSAC-estimated homography.

    ``coords_*`` are (row, col) keypoint coordinates.  Fewer than 4 matches
    passes through unchanged with a flag in the stats.
    """
    from . import geom

    if len(matches) < 4:
        out = MatchSet(pairs=list(matches.pairs), method=matches.method,
                       stats=dict(matches.stats))
        out.stats["ransac"] = "skipped_too_few"
        return out
    coords_a = np.asarray(coords_a, dtype=np.float64)
    coords_b = np.asarray(coords_b, dtype=np.float64)
    ia = matches.indices_a
    ib = matches.indices_b
    pts_a = coords_a[ia][:, ::-1]  # to (x, y)
    pts_b = coords_b[ib][:, ::-1]

    def solver(idx):
        try:
            return geom.estimate_homography(pts_a[idx], pts_b[idx])
        except geom.GeometryError:
            return None

    def inlier_fn(model):
        proj = geom.apply_homography(model, pts_a)
        err = np.linalg.norm(proj - pts_b, axis=1)
        return err < inlier_px, err

    result = geom.ransac(solver, len(pts_a), inlier_fn, iters=iters, seed=seed, sample_size=4)
    out_stats = dict(matches.stats)
    if not result.success:
        out = MatchSet(pairs=list(matches.pairs), method=matches.method, stats=out_stats)
        out.stats["ransac"] = "failed"
        return out
    pairs = [p for p, ok in zip(matches.pairs, result.inliers) if ok]
    out_stats.update({"ransac": "ok", "ransac_inliers": int(result.inliers.sum())})
    return MatchSet(pairs=pairs, method=matches.method, stats=out_stats)


def save_matches(path, matches):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(matches.to_json(), fh, sort_keys=True, indent=1)


def load_matches(path):
    with open(path, encoding="utf-8") as fh:
        return MatchSet.from_json(json.load(fh))
