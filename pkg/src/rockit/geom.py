"""Geometric estimation and pose evaluation.

Homography via normalized DLT, pose-from-plane PnP (homography
decomposition plus Levenberg-Marquardt refinement), a generic RANSAC
driver, matching/pose metrics (MMA, ADD, ADD-S) and the template-based
pose pipeline: match every template, pick the one with the most matches,
gate at 4 matches, then RANSAC-PnP the 2D-3D correspondences.

Geometry works in (x, y) pixel coordinates; keypoint coords (row, col) are
converted at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .match import MatchSet, coords_array, match_direct, match_objectness_filtered
from .simscene import apply_homography


class GeometryError(RuntimeError):
    """Degenerate input or no geometrically valid solution."""


@dataclass
class Pose:
    rotation: np.ndarray     # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise GeometryError("rotation determinant must be +1")

    def transform(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass
class Template:
    object_id: int
    pose: Pose                 # object -> camera at render time
    keypoints: list
    model_points: np.ndarray   # [N,3], z = 0 plane points in the object frame

    def __post_init__(self):
        if len(self.keypoints) != len(self.model_points):
            raise ValueError("every keypoint needs a 3-D model point")


@dataclass
class PoseResult:
    object_id: int
    best_template_id: int
    pose: Pose | None
    n_matches: int
    inliers: int

    def to_json(self):
        out = {
            "object_id": int(self.object_id),
            "template_id": int(self.best_template_id),
            "n_matches": int(self.n_matches),
            "inliers": int(self.inliers),
        }
        if self.pose is not None:
            out["R"] = self.pose.rotation.ravel().tolist()
            out["t"] = self.pose.translation.tolist()
        return out


def rotation_geodesic(r_a, r_b):
    """Angle (radians) between two rotations."""
    c = np.clip((np.trace(r_a @ r_b.T) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def project_points(pose, intrinsics, pts3):
    cam = pose.transform(pts3)
    if np.any(cam[:, 2] <= 0):
        raise GeometryError("points behind camera")
    pix = cam @ intrinsics.T
    return pix[:, :2] / pix[:, 2:3]


# ---------------------------------------------------------------------------
# homography


def _hartley_normalize(pts):
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return apply_homography(t, pts), t


def estimate_homography(pts_a, pts_b):
    """Normalized DLT from >= 4 (x, y) correspondences; H[2,2] = 1.

    Raises :class:`GeometryError` on rank-deficient configurations (e.g.
    three collinear points in a minimal sample).
    """
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    if len(pts_a) < 4 or len(pts_a) != len(pts_b):
        raise GeometryError("need >= 4 correspondences")
    an, ta = _hartley_normalize(pts_a)
    bn, tb = _hartley_normalize(pts_b)
    n = len(an)
    a = np.zeros((2 * n, 9))
    x, y = an[:, 0], an[:, 1]
    u, v = bn[:, 0], bn[:, 1]
    a[0::2] = np.column_stack([x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u])
    a[1::2] = np.column_stack([np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v])
    _, s, vt = np.linalg.svd(a)
    # unique solution needs rank 8: the 8th-largest singular value must be
    # clearly nonzero (index 7 covers both the 8x9 minimal case and n >= 5)
    if s[7] < 1e-8 * max(s[0], 1.0):
        raise GeometryError("degenerate correspondences (rank-deficient DLT)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ hn @ ta
    if abs(h[2, 2]) < 1e-12:
        raise GeometryError("homography with zero scale")
    return h / h[2, 2]


# ---------------------------------------------------------------------------
# PnP for planar model points


def _nearest_rotation(m):
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _rodrigues(omega):
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        k = _skew(omega)
        return np.eye(3) + k
    k = _skew(omega / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


def _pnp_init_planar(model_pts, image_pts, intrinsics):
    """Pose seed from the model-plane-to-image homography decomposition."""
    h = estimate_homography(model_pts[:, :2], image_pts)
    g = np.linalg.inv(intrinsics) @ h
    lam = 2.0 / (np.linalg.norm(g[:, 0]) + np.linalg.norm(g[:, 1]))
    for sign in (1.0, -1.0):
        r1 = sign * lam * g[:, 0]
        r2 = sign * lam * g[:, 1]
        t = sign * lam * g[:, 2]
        r = _nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
        depths = model_pts @ r.T[:, 2] + t[2]
        if np.all(depths > 0):
            return r, t
    raise GeometryError("all decompositions place points behind the camera")


def _reproj_residuals(r, t, model_pts, image_pts, intrinsics):
    cam = model_pts @ r.T + t
    z = cam[:, 2]
    pix = cam @ intrinsics.T
    proj = pix[:, :2] / pix[:, 2:3]
    res = (proj - image_pts).ravel()
    return res, cam, z, proj


def solve_pnp(model_pts, image_pts, intrinsics, max_iters=50, tol=1e-10):
    """Pose from >= 4 planar (z=0) model points and their (x, y) pixels.

    Initializes from the homography decomposition, then minimizes the
    reprojection error with Levenberg-Marquardt over an axis-angle update
    (at most ``max_iters`` iterations, stopping when the step norm falls
    under ``tol``).  The returned pose puts every point in front of the
    camera.
    """
    model_pts = np.asarray(model_pts, dtype=np.float64)
    image_pts = np.asarray(image_pts, dtype=np.float64)
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    if model_pts.ndim != 2 or model_pts.shape[1] != 3 or len(model_pts) < 4:
        raise GeometryError("need >= 4 3-D model points")
    spread = max(np.abs(model_pts[:, :2]).max(), 1.0)
    if np.abs(model_pts[:, 2]).max() > 1e-6 * spread:
        raise GeometryError("model points must lie on the z=0 plane")

    r, t = _pnp_init_planar(model_pts, image_pts, intrinsics)
    fx, fy = intrinsics[0, 0], intrinsics[1, 1]
    lam = 1e-6
    res, cam, z, _ = _reproj_residuals(r, t, model_pts, image_pts, intrinsics)
    cost = float(res @ res)
    for _ in range(max_iters):
        n = len(model_pts)
        jac = np.zeros((2 * n, 6))
        x, y = cam[:, 0], cam[:, 1]
        # d(proj)/d(cam): rows (u, v); cam perturbation d(cam) = dw x cam + dt
        du = np.column_stack([fx / z, np.zeros(n), -fx * x / z**2])
        dv = np.column_stack([np.zeros(n), fy / z, -fy * y / z**2])
        for i in range(n):
            dcam_dw = -_skew(cam[i] - t)  # rotation update acts on R @ p only
            jac[2 * i, :3] = du[i] @ dcam_dw
            jac[2 * i, 3:] = du[i]
            jac[2 * i + 1, :3] = dv[i] @ dcam_dw
            jac[2 * i + 1, 3:] = dv[i]
        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -jtr)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        r_new = _rodrigues(step[:3]) @ r
        t_new = t + step[3:]
        res_new, cam_new, z_new, _ = _reproj_residuals(
            r_new, t_new, model_pts, image_pts, intrinsics
        )
        if np.all(z_new > 0) and res_new @ res_new < cost:
            r, t, cam, z = r_new, t_new, cam_new, z_new
            res = res_new
            cost = float(res @ res)
            lam = max(lam * 0.3, 1e-12)
        else:
            lam = min(lam * 10, 1e6)
        if np.linalg.norm(step) < tol:
            break
    return Pose(rotation=_nearest_rotation(r), translation=t)


# ---------------------------------------------------------------------------
# RANSAC


@dataclass
class RansacResult:
    model: object
    inliers: np.ndarray
    success: bool
    iters: int


def ransac(solver, n_data, inlier_fn, iters=200, seed=0, sample_size=4):
    """Generic hypothesize-and-verify.

    ``solver(indices)`` fits a model from a sample (None on degeneracy);
    ``inlier_fn(model)`` returns (bool mask, per-datum errors).  The best
    model maximizes the inlier count, ties broken by lower total inlier
    error; the winner is refit on its inliers.  Deterministic per seed.
    """
    if n_data < sample_size:
        return RansacResult(model=None, inliers=np.zeros(n_data, dtype=bool),
                            success=False, iters=0)
    rng = np.random.default_rng(seed)
    best = None  # (count, -total_err, mask, model)
    for it in range(iters):
        idx = rng.choice(n_data, size=sample_size, replace=False)
        model = solver(idx)
        if model is None:
            continue
        mask, err = inlier_fn(model)
        count = int(mask.sum())
        if count < sample_size:
            continue
        total_err = float(err[mask].sum())
        key = (count, -total_err)
        if best is None or key > best[0]:
            best = (key, mask, model)
    if best is None:
        return RansacResult(model=None, inliers=np.zeros(n_data, dtype=bool),
                            success=False, iters=iters)
    _, mask, model = best
    refit = solver(np.nonzero(mask)[0])
    if refit is not None:
        mask2, err2 = inlier_fn(refit)
        if int(mask2.sum()) >= int(mask.sum()):
            return RansacResult(model=refit, inliers=mask2, success=True, iters=iters)
    return RansacResult(model=model, inliers=mask, success=True, iters=iters)


# ---------------------------------------------------------------------------
# metrics


def mma(matches, coords_a, coords_b, warp, thresholds=(1, 2, 3, 5, 7)):
    """Fraction of matches whose warp reprojection error is under each
    threshold; an empty match set scores 0 everywhere.

    ``coords_*`` are (row, col); ``warp`` is the 3x3 ground-truth map from
    image a to image b in (x, y) convention.
    """
    out = {}
    if len(matches) == 0:
        return {float(t): 0.0 for t in thresholds}
    coords_a = np.asarray(coords_a, dtype=np.float64)
    coords_b = np.asarray(coords_b, dtype=np.float64)
    pa = coords_a[matches.indices_a][:, ::-1]
    pb = coords_b[matches.indices_b][:, ::-1]
    err = np.linalg.norm(apply_homography(warp, pa) - pb, axis=1)
    for t in thresholds:
        out[float(t)] = float((err < t).mean())
    return out


def add_metric(pose_est, pose_gt, model_pts):
    """Mean distance between correspondingly transformed model points."""
    model_pts = np.asarray(model_pts, dtype=np.float64)
    if len(model_pts) == 0:
        raise ValueError("need at least one model point")
    d = np.linalg.norm(pose_est.transform(model_pts) - pose_gt.transform(model_pts), axis=1)
    return float(d.mean())


def adds_metric(pose_est, pose_gt, model_pts):
    """Symmetric variant: mean closest-point distance between the two
    transformed point sets (order-insensitive)."""
    model_pts = np.asarray(model_pts, dtype=np.float64)
    if len(model_pts) == 0:
        raise ValueError("need at least one model point")
    a = pose_est.transform(model_pts)
    b = pose_gt.transform(model_pts)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


def model_diameter(model_pts):
    pts = np.asarray(model_pts, dtype=np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.max()))


def add_recall(distances, diameter, frac=0.1):
    """Fraction of pose errors below ``frac`` of the object diameter."""
    if diameter <= 0:
        raise ValueError("diameter must be > 0")
    distances = np.asarray(list(distances), dtype=np.float64)
    if len(distances) == 0:
        return 0.0
    return float((distances < frac * diameter).mean())


# ---------------------------------------------------------------------------
# template pose pipeline


@dataclass
class PoseConfig:
    matcher: str = "objectness_filtered"   # or "direct"
    inter_sim_thr: float = 0.5
    min_matches: int = 4
    ransac_iters: int = 200
    inlier_px: float = 3.0
    seed: int = 0
    n_templates: int = 24

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lift_keypoints_to_plane(view, keypoints):
    """Back-project pixel keypoints onto the world plane z=0.

    Returns [N,3] points; with the object rendered in its own (model)
    frame these are exactly the 3-D model points of the keypoints.
    """
    from .simscene import view_homography

    if not keypoints:
        return np.zeros((0, 3))
    h = view_homography(view)
    xy = coords_array(keypoints)[:, ::-1]
    plane = apply_homography(np.linalg.inv(h), xy)
    return np.column_stack([plane, np.zeros(len(plane))])


def match_template(template, scene_kps, config):
    if config.matcher == "objectness_filtered":
        return match_objectness_filtered(template.keypoints, scene_kps, config.inter_sim_thr)
    if config.matcher == "direct":
        return match_direct(template.keypoints, scene_kps)
    raise ValueError(f"unknown matcher {config.matcher!r}")


def pose_pipeline(object_id, scene_kps, intrinsics, templates, config=None):
    """Best-template matching followed by RANSAC-PnP.

    Matches every template against the scene keypoints, keeps the template
    with the most matches (ties toward the lower template index), declares
    the object absent below ``min_matches``, and otherwise solves the pose
    from the matched 2D-3D pairs.  The absent case is a valid result, not
    an error.
    """
    config = config or PoseConfig()
    if not templates:
        raise ValueError("need at least one template")
    best_idx, best_matches = None, None
    for ti, template in enumerate(templates):
        if not scene_kps:
            m = MatchSet(pairs=[], method=config.matcher, stats={})
        else:
            m = match_template(template, scene_kps, config)
        if best_matches is None or len(m) > len(best_matches):
            best_idx, best_matches = ti, m
    n_matches = len(best_matches)
    if n_matches < config.min_matches:
        return PoseResult(object_id=object_id, best_template_id=best_idx,
                          pose=None, n_matches=n_matches, inliers=0)

    template = templates[best_idx]
    model_pts = template.model_points[best_matches.indices_a]
    scene_xy = coords_array(scene_kps)[best_matches.indices_b][:, ::-1]

    def solver(idx):
        try:
            return solve_pnp(model_pts[idx], scene_xy[idx], intrinsics)
        except GeometryError:
            return None

    def inlier_fn(pose):
        try:
            proj = project_points(pose, intrinsics, model_pts)
        except GeometryError:
            return np.zeros(len(model_pts), dtype=bool), np.full(len(model_pts), np.inf)
        err = np.linalg.norm(proj - scene_xy, axis=1)
        return err < config.inlier_px, err

    result = ransac(solver, len(model_pts), inlier_fn,
                    iters=config.ransac_iters, seed=config.seed, sample_size=4)
    if not result.success:
        return PoseResult(object_id=object_id, best_template_id=best_idx,
                          pose=None, n_matches=n_matches, inliers=0)
    return PoseResult(
        object_id=object_id,
        best_template_id=best_idx,
        pose=result.model,
        n_matches=n_matches,
        inliers=int(result.inliers.sum()),
    )
