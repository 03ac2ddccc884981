"""Evaluation protocols: matching metrics and template-based pose metrics.

Two matching tasks mirror the reference/target setups the detector is
meant for: "syn_real" matches each object's clean render (view 1) against
the other view of the pair, "real_real" matches the object's region of
frame 1 (mask known) against frame 2.  Both score mutual-NN matches with
Kpts (matches per object per image) and MMA at pixel thresholds via the
ground-truth warp.

Pose evaluation renders a grid of templates per object, runs the
best-template pipeline on held-out frames and reports ADD / ADD-S recall
plus absent-object detection rates.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .match import (
    coords_array,
    extract_keypoints,
    match_direct,
    match_objectness_filtered,
    ransac_match_filter,
)
from .simscene import SceneSpec, TextureSpec, make_view, render_frame

DEFAULT_MMA_THRESHOLDS = (1.0, 2.0, 3.0, 5.0, 7.0)


@dataclass
class EvalConfig:
    r_thr: float = 1.5
    topk: int = 512
    nms_radius: int = 2
    method: str = "objectness_filtered"   # or "direct"
    inter_sim_thr: float = 0.5
    mma_thresholds: tuple = DEFAULT_MMA_THRESHOLDS
    ransac_filter: bool = False
    ransac_inlier_px: float = 3.0
    ransac_iters: int = 200
    norm_mode: str = "per_image"
    tasks: tuple = ("syn_real", "real_real")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "mma_thresholds" in d:
            d["mma_thresholds"] = tuple(float(t) for t in d["mma_thresholds"])
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)


def worker_count():
    env = os.environ.get("ROCKIT_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Order-preserving map over a bounded thread pool (ROCKIT_THREADS)."""
    n = worker_count()
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _match_one(query_kps, scene_kps, cfg, seed=0):
    if not query_kps or not scene_kps:
        from .match import MatchSet

        return MatchSet(pairs=[], method=cfg.method, stats={})
    if cfg.method == "objectness_filtered":
        matches = match_objectness_filtered(query_kps, scene_kps, cfg.inter_sim_thr)
    elif cfg.method == "direct":
        matches = match_direct(query_kps, scene_kps)
    else:
        raise ValueError(f"unknown matching method {cfg.method!r}")
    if cfg.ransac_filter and len(matches) >= 4:
        matches = ransac_match_filter(
            matches, coords_array(query_kps), coords_array(scene_kps),
            inlier_px=cfg.ransac_inlier_px, iters=cfg.ransac_iters, seed=seed,
        )
    return matches


def _pair_records(net, pair, cfg):
    """Per-object match records for one pair, for every requested task."""
    out2 = net.forward(pair.frame2.image, norm_mode=cfg.norm_mode)
    scene_kps = extract_keypoints(out2, cfg.r_thr, cfg.topk, cfg.nms_radius)
    records = []
    object_ids = sorted(int(v) for v in np.unique(pair.frame1.label_map) if v > 0)

    query_outputs = {}
    if "syn_real" in cfg.tasks:
        # the clean render is the whole reference image: no mask, so an
        # undiscriminating detector (e.g. r_thr=0) floods it with unreliable
        # background points exactly as it would a real template
        for oid in object_ids:
            fr = pair.clean_renders[oid]
            query_outputs[("syn_real", oid)] = (net.forward(fr.image, norm_mode=cfg.norm_mode),
                                                None)
    if "real_real" in cfg.tasks:
        # the object mask is known in the initial frame only
        out1 = net.forward(pair.frame1.image, norm_mode=cfg.norm_mode)
        for oid in object_ids:
            query_outputs[("real_real", oid)] = (out1, pair.frame1.label_map == oid)

    for (task, oid), (out_q, mask) in sorted(query_outputs.items()):
        q_kps = extract_keypoints(out_q, cfg.r_thr, cfg.topk, cfg.nms_radius, mask=mask)
        matches = _match_one(q_kps, scene_kps, cfg)
        if len(matches):
            scores = geom.mma(matches, coords_array(q_kps), coords_array(scene_kps),
                              pair.homography12, cfg.mma_thresholds)
        else:
            scores = {float(t): 0.0 for t in cfg.mma_thresholds}
        records.append({
            "task": task,
            "object_id": oid,
            "kpts": len(matches),
            "n_query_kps": len(q_kps),
            "n_scene_kps": len(scene_kps),
            "mma": scores,
        })
    return records


def _aggregate(records, thresholds):
    def summarize(rows):
        if not rows:
            return {"kpts": 0.0, "mma": {float(t): 0.0 for t in thresholds}, "n": 0}
        return {
            "kpts": float(np.mean([r["kpts"] for r in rows])),
            "mma": {
                float(t): float(np.mean([r["mma"][float(t)] for r in rows]))
                for t in thresholds
            },
            "n": len(rows),
        }

    out = {}
    for task in sorted({r["task"] for r in records}):
        rows = [r for r in records if r["task"] == task]
        per_object = {}
        for oid in sorted({r["object_id"] for r in rows}):
            per_object[str(oid)] = summarize([r for r in rows if r["object_id"] == oid])
        out[task] = {"per_object": per_object, "overall": summarize(rows)}
    return out


def eval_match(net, dataset, cfg=None):
    """Kpts / MMA report over every pair of the dataset.

    Deterministic: pairs are processed in manifest order and aggregation is
    keyed by scene/object ids, independent of worker parallelism.
    """
    cfg = cfg or EvalConfig()
    pairs = dataset.all_pairs()
    all_records = parallel_map(lambda pair: _pair_records(net, pair, cfg), pairs)
    flat = [r for recs in all_records for r in recs]
    report = _aggregate(flat, cfg.mma_thresholds)
    return {"config": {"r_thr": cfg.r_thr, "topk": cfg.topk, "method": cfg.method,
                       "norm_mode": cfg.norm_mode, "ransac_filter": cfg.ransac_filter},
            "n_pairs": len(pairs), "tasks": report}


# ---------------------------------------------------------------------------
# pose evaluation


@dataclass
class PoseEvalConfig:
    n_templates: int = 24
    template_radius: float = 2.8
    matcher: str = "objectness_filtered"
    inter_sim_thr: float = 0.5
    min_matches: int = 4
    ransac_iters: int = 200
    inlier_px: float = 3.0
    r_thr: float = 1.5
    topk: int = 512
    nms_radius: int = 2
    norm_mode: str = "per_image"
    model_grid: int = 5
    max_pairs_per_scene: int = 2
    absent_queries: int = 50
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def pose_config(self):
        return geom.PoseConfig(
            matcher=self.matcher, inter_sim_thr=self.inter_sim_thr,
            min_matches=self.min_matches, ransac_iters=self.ransac_iters,
            inlier_px=self.inlier_px, seed=self.seed, n_templates=self.n_templates,
        )


def template_views(n, canvas, radius):
    """Deterministic azimuth x elevation grid over the upper hemisphere."""
    n_el = max(2, int(round(np.sqrt(n / 3.0))))
    n_az = max(1, int(np.ceil(n / n_el)))
    views = []
    for ei in range(n_el):
        el = np.deg2rad(45 + (82 - 45) * (ei + 0.5) / n_el)
        for ai in range(n_az):
            if len(views) >= n:
                break
            az = 2 * np.pi * ai / n_az + 0.3 * ei
            views.append(make_view(canvas, azimuth=az, elevation=el, radius=radius))
    return views[:n]


def canonical_object_scene(spec, object_id, bg=0.35):
    """The sprite re-posed at the origin: world frame == object model frame."""
    sprite = spec.sprite(object_id)
    centered = type(sprite)(
        object_id=sprite.object_id, texture=sprite.texture,
        tx=0.0, ty=0.0, theta=0.0, scale=sprite.scale, z_order=1,
    )
    return SceneSpec(
        scene_id=spec.scene_id,
        sprites=(centered,),
        background=TextureSpec(kind="flat", params={
            "c0": [bg] * 3, "c1": [bg] * 3, "border": [bg] * 3,
            "angle": 0.0, "freq": 1.0, "phase": 0.0,
        }),
        canvas=spec.canvas,
    )


def build_templates(net, spec, object_id, cfg):
    """Render template views of one object and lift keypoints to 3-D."""
    scene = canonical_object_scene(spec, object_id)
    templates = []
    for view in template_views(cfg.n_templates, spec.canvas, cfg.template_radius):
        frame = render_frame(scene, view)
        out = net.forward(frame.image, norm_mode=cfg.norm_mode)
        kps = extract_keypoints(out, cfg.r_thr, cfg.topk, cfg.nms_radius,
                                mask=frame.label_map == object_id)
        model_pts = geom.lift_keypoints_to_plane(view, kps)
        templates.append(geom.Template(
            object_id=object_id,
            pose=geom.Pose(view.rotation, view.translation),
            keypoints=kps,
            model_points=model_pts,
        ))
    return templates


def object_model_points(sprite, grid=5):
    g = np.linspace(-1, 1, grid)
    xx, yy = np.meshgrid(g, g)
    local = np.column_stack([xx.ravel(), yy.ravel()])
    pts = sprite.scale * local
    return np.column_stack([pts, np.zeros(len(pts))])


def gt_object_pose(sprite, view):
    """Ground-truth object->camera pose for a sprite seen from a view."""
    c, s = np.cos(sprite.theta), np.sin(sprite.theta)
    r_ow = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t_ow = np.array([sprite.tx, sprite.ty, 0.0])
    r = view.rotation @ r_ow
    t = view.rotation @ t_ow + view.translation
    return geom.Pose(r, t)


def eval_pose(net, dataset, cfg=None):
    """ADD / ADD-S recall over held-out frames plus absent-object rates."""
    cfg = cfg or PoseEvalConfig()
    pose_cfg = cfg.pose_config()
    records = []
    scene_templates = {}
    scene_kp_cache = []

    for scene in dataset.scenes:
        spec = scene.spec
        templates = {
            oid: build_templates(net, spec, oid, cfg) for oid in spec.object_ids
        }
        scene_templates[scene.scene_id] = templates
        for pair in scene.pairs[: cfg.max_pairs_per_scene]:
            out = net.forward(pair.frame1.image, norm_mode=cfg.norm_mode)
            scene_kps = extract_keypoints(out, cfg.r_thr, cfg.topk, cfg.nms_radius)
            scene_kp_cache.append((scene, pair, scene_kps))
            intr = pair.frame1.view.intrinsics
            for oid in spec.object_ids:
                result = geom.pose_pipeline(oid, scene_kps, intr, templates[oid], pose_cfg)
                sprite = spec.sprite(oid)
                model_pts = object_model_points(sprite, cfg.model_grid)
                gt = gt_object_pose(sprite, pair.frame1.view)
                rec = {
                    "scene_id": scene.scene_id,
                    "object_id": oid,
                    "found": result.pose is not None,
                    "n_matches": result.n_matches,
                    "inliers": result.inliers,
                    "diameter": geom.model_diameter(model_pts),
                }
                if result.pose is not None:
                    rec["add"] = geom.add_metric(result.pose, gt, model_pts)
                    rec["adds"] = geom.adds_metric(result.pose, gt, model_pts)
                    rec["rot_err_rad"] = geom.rotation_geodesic(
                        result.pose.rotation, gt.rotation
                    )
                records.append(rec)

    # absent-object queries: templates from one scene against the next scene
    absent = []
    scenes = dataset.scenes
    if len(scenes) >= 2 and scene_kp_cache:
        qi = 0
        while len(absent) < cfg.absent_queries:
            scene, pair, scene_kps = scene_kp_cache[qi % len(scene_kp_cache)]
            donor = scenes[([s.scene_id for s in scenes].index(scene.scene_id) + 1) % len(scenes)]
            oid = donor.spec.object_ids[qi % len(donor.spec.object_ids)]
            result = geom.pose_pipeline(
                oid, scene_kps, pair.frame1.view.intrinsics,
                scene_templates[donor.scene_id][oid], pose_cfg,
            )
            absent.append({"scene_id": scene.scene_id, "donor_scene": donor.scene_id,
                           "object_id": oid, "reported_absent": result.pose is None,
                           "n_matches": result.n_matches})
            qi += 1

    def recall(rows, key):
        vals = []
        for r in rows:
            if r["found"]:
                vals.append(r[key] < 0.1 * r["diameter"])
            else:
                vals.append(False)  # missed detection counts as failure
        return float(np.mean(vals)) if vals else 0.0

    per_object = {}
    for oid in sorted({r["object_id"] for r in records}):
        rows = [r for r in records if r["object_id"] == oid]
        per_object[str(oid)] = {
            "add_recall": recall(rows, "add"),
            "adds_recall": recall(rows, "adds"),
            "detection_rate": float(np.mean([r["found"] for r in rows])),
            "n": len(rows),
        }
    report = {
        "config": {"n_templates": cfg.n_templates, "matcher": cfg.matcher,
                   "r_thr": cfg.r_thr, "inlier_px": cfg.inlier_px},
        "per_object": per_object,
        "overall": {
            "add_recall": recall(records, "add"),
            "adds_recall": recall(records, "adds"),
            "detection_rate": float(np.mean([r["found"] for r in records])) if records else 0.0,
            "n": len(records),
        },
        "absent": {
            "n": len(absent),
            "reported_absent_rate": float(np.mean([a["reported_absent"] for a in absent]))
            if absent else 0.0,
        },
        "records": records,
    }
    return report


# ---------------------------------------------------------------------------
# descriptor separation diagnostic


def inter_descriptor_separation(net, dataset, norm_mode="per_image", samples_per_object=64,
                                seed=0, max_pairs=16):
    """Mean within-object vs cross-object cosine of the inter branch.

    Returns (within, across, margin) averaged over sampled held-out frames.
    """
    rng = np.random.default_rng(seed)
    within, across = [], []
    pairs = dataset.all_pairs()[:max_pairs]
    for pair in pairs:
        out = net.forward(pair.frame1.image, norm_mode=norm_mode)
        de = out.desc_inter.value
        de = de / np.maximum(np.linalg.norm(de, axis=0, keepdims=True), 1e-12)
        labels = pair.frame1.label_map
        descs = {}
        for oid in sorted(int(v) for v in np.unique(labels) if v > 0):
            coords = np.argwhere(labels == oid)
            take = coords[rng.choice(len(coords), size=min(samples_per_object, len(coords)),
                                     replace=False)]
            descs[oid] = de[:, take[:, 0], take[:, 1]].T
        oids = sorted(descs)
        for i, oid in enumerate(oids):
            d = descs[oid]
            sim = d @ d.T
            iu = np.triu_indices(len(d), k=1)
            if len(iu[0]):
                within.append(float(sim[iu].mean()))
            for other in oids[i + 1:]:
                across.append(float((d @ descs[other].T).mean()))
    w = float(np.mean(within)) if within else 0.0
    a = float(np.mean(across)) if across else 0.0
    return {"within": w, "across": a, "margin": w - a}


def cross_object_mismatch_rate(net, dataset, cfg=None, max_pairs=16):
    """Count matches landing on wrong-object pixels, per matching method.

    A match is a mismatch when the scene keypoint's ground-truth label
    differs from the query object.  Returns per-method mean counts and
    rates over (pair, object) queries.
    """
    cfg = cfg or EvalConfig()
    methods = ("objectness_filtered", "direct")
    counts = {m: [] for m in methods}
    rates = {m: [] for m in methods}
    for pair in dataset.all_pairs()[:max_pairs]:
        out2 = net.forward(pair.frame2.image, norm_mode=cfg.norm_mode)
        scene_kps = extract_keypoints(out2, cfg.r_thr, cfg.topk, cfg.nms_radius)
        if not scene_kps:
            continue
        scene_labels = np.array([
            pair.frame2.label_map[int(kp.coord[0]), int(kp.coord[1])] for kp in scene_kps
        ])
        for oid in sorted(int(v) for v in np.unique(pair.frame1.label_map) if v > 0):
            fr = pair.clean_renders[oid]
            out_q = net.forward(fr.image, norm_mode=cfg.norm_mode)
            q_kps = extract_keypoints(out_q, cfg.r_thr, cfg.topk, cfg.nms_radius,
                                      mask=fr.label_map == oid)
            if not q_kps:
                continue
            for method in methods:
                if method == "objectness_filtered":
                    m = match_objectness_filtered(q_kps, scene_kps, cfg.inter_sim_thr)
                else:
                    m = match_direct(q_kps, scene_kps)
                if len(m):
                    wrong = int((scene_labels[m.indices_b] != oid).sum())
                else:
                    wrong = 0
                counts[method].append(wrong)
                rates[method].append(wrong / max(len(m), 1))
    return {
        m: {"mean_wrong_matches": float(np.mean(counts[m])) if counts[m] else 0.0,
            "mean_wrong_rate": float(np.mean(rates[m])) if rates[m] else 0.0,
            "n": len(counts[m])}
        for m in methods
    }
