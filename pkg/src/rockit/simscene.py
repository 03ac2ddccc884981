"""Procedural multi-object planar scenes with exact cross-view geometry.

The world is a single textured plane z=0 holding flat "sprite" objects.
Every view is a pinhole camera on the upper hemisphere, so the map between
any two views is an exact plane-induced homography: ground-truth pixel
correspondences, per-pixel object labels and object-only clean renders all
come for free.

Conventions: pixel coordinates in homography/projection math are
``(x, y) = (col, row)``; arrays are indexed ``[row, col]``.  Images are
``[3, H, W]`` float32 in [0, 1]; label maps ``[H, W]`` int32 with 0 =
background.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

WINDOW_HALF = 1.35         # plane window is [-WINDOW_HALF, WINDOW_HALF]^2
FOCAL_PER_UNIT = 0.24      # f = FOCAL_PER_UNIT * min(H, W) * camera_radius
MAX_OVERLAP = 0.4          # pairwise sprite overlap cap (fraction of smaller footprint)
TEXTURE_KINDS = ("stripes", "checker", "blob", "flat", "symmetric")


class PlacementError(RuntimeError):
    """Raised when rejection sampling cannot place the requested sprites."""


class DegenerateViewError(RuntimeError):
    """Raised when the plane is edge-on or behind the camera."""


# ---------------------------------------------------------------------------
# scene specification


@dataclass(frozen=True)
class TextureSpec:
    kind: str
    params: dict


@dataclass(frozen=True)
class ObjectSprite:
    object_id: int
    texture: TextureSpec
    tx: float
    ty: float
    theta: float
    scale: float
    z_order: int

    def world_to_local(self, xy):
        """Map [N,2] plane points into sprite-local [-1,1]^2 coordinates."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        d = xy - np.array([self.tx, self.ty])
        lx = (c * d[:, 0] + s * d[:, 1]) / self.scale
        ly = (-s * d[:, 0] + c * d[:, 1]) / self.scale
        return np.stack([lx, ly], axis=1)

    def local_to_world(self, st):
        c, s = np.cos(self.theta), np.sin(self.theta)
        x = self.scale * (c * st[:, 0] - s * st[:, 1]) + self.tx
        y = self.scale * (s * st[:, 0] + c * st[:, 1]) + self.ty
        return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    sprites: tuple
    background: TextureSpec
    canvas: tuple  # (H, W)

    def sprite(self, object_id):
        for sp in self.sprites:
            if sp.object_id == object_id:
                return sp
        raise KeyError(f"object {object_id} not in scene {self.scene_id}")

    @property
    def object_ids(self):
        return [sp.object_id for sp in self.sprites]


@dataclass
class CameraView:
    intrinsics: np.ndarray   # 3x3
    rotation: np.ndarray     # 3x3 world->camera
    translation: np.ndarray  # 3

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has negative determinant")
        if self.camera_center()[2] <= 0:
            raise ValueError("camera must be above the plane")

    def camera_center(self):
        return -self.rotation.T @ self.translation


@dataclass
class Frame:
    image: np.ndarray      # [3,H,W] float32 in [0,1]
    label_map: np.ndarray  # [H,W] int32
    view: CameraView


@dataclass
class PairSample:
    frame1: Frame
    frame2: Frame
    clean_renders: dict            # object_id -> Frame (view1, object only)
    homography12: np.ndarray       # 3x3, maps (x,y,1) in frame1 to frame2
    covisibility: np.ndarray       # [H,W] bool on frame1

    @property
    def shape(self):
        return self.frame1.label_map.shape


# ---------------------------------------------------------------------------
# procedural textures


def _sample_palette(rng, n):
    # saturated-ish colors away from the light gray background range
    hues = rng.uniform(0, 1, n)
    out = []
    for h in hues:
        base = np.array([abs(np.cos(2 * np.pi * h)), abs(np.cos(2 * np.pi * (h + 1 / 3))),
                         abs(np.cos(2 * np.pi * (h + 2 / 3)))])
        out.append(np.clip(0.15 + 0.8 * base, 0, 1))
    return out


def sample_texture(rng, kind=None, symmetric_allowed=True):
    kinds = list(TEXTURE_KINDS if symmetric_allowed else TEXTURE_KINDS[:-1])
    if kind is None:
        kind = kinds[rng.integers(len(kinds))]
    c0, c1 = _sample_palette(rng, 2)
    params = {
        "c0": c0.tolist(),
        "c1": c1.tolist(),
        "border": _sample_palette(rng, 1)[0].tolist(),
        "angle": float(rng.uniform(0, np.pi)),
        "freq": float(rng.uniform(1.5, 3.5)),
        "phase": float(rng.uniform(0, 1)),
    }
    if kind in ("blob", "symmetric"):
        k = 4
        params["centers"] = rng.uniform(-0.8, 0.8, (k, 2)).tolist()
        params["widths"] = rng.uniform(0.25, 0.6, k).tolist()
        params["amps"] = rng.uniform(0.5, 1.0, k).tolist()
    return TextureSpec(kind=kind, params=params)


def texture_rgb(tex, st):
    """Evaluate texture color at sprite-local points st [N,2]; returns [N,3]."""
    p = tex.params
    s, t = st[:, 0], st[:, 1]
    c0 = np.asarray(p["c0"])
    c1 = np.asarray(p["c1"])
    kind = tex.kind
    if kind == "symmetric":
        s = np.abs(s)
        kind = "blob"
    if kind == "flat":
        rgb = np.tile(c0, (len(s), 1))
    elif kind == "stripes":
        u = s * np.cos(p["angle"]) + t * np.sin(p["angle"])
        sel = np.floor(u * p["freq"] + p["phase"]).astype(int) % 2
        rgb = np.where(sel[:, None] == 0, c0, c1)
    elif kind == "checker":
        sel = (
            np.floor((s + 1) * p["freq"] + p["phase"]).astype(int)
            + np.floor((t + 1) * p["freq"]).astype(int)
        ) % 2
        rgb = np.where(sel[:, None] == 0, c0, c1)
    elif kind == "blob":
        centers = np.asarray(p["centers"])
        widths = np.asarray(p["widths"])
        amps = np.asarray(p["amps"])
        d2 = (s[:, None] - centers[None, :, 0]) ** 2 + (t[:, None] - centers[None, :, 1]) ** 2
        mix = np.clip((amps * np.exp(-d2 / widths**2)).sum(axis=1), 0, 1)
        rgb = c0 * (1 - mix[:, None]) + c1 * mix[:, None]
    else:
        raise ValueError(f"unknown texture kind {tex.kind!r}")
    border = (np.abs(st[:, 0]) > 0.88) | (np.abs(st[:, 1]) > 0.88)
    rgb = np.where(border[:, None], np.asarray(p["border"]), rgb)
    return rgb


# ---------------------------------------------------------------------------
# scene sampling


def _footprint_mask(sprite, grid_xy):
    loc = sprite.world_to_local(grid_xy)
    return (np.abs(loc[:, 0]) <= 1) & (np.abs(loc[:, 1]) <= 1)


def sample_scene(seed, n_objects=3, canvas=(64, 64), scene_id=0):
    """Place ``n_objects`` textured sprites with bounded pairwise overlap.

    Deterministic in ``seed``.  Raises :class:`PlacementError` if rejection
    sampling fails 1000 times for any sprite.
    """
    if n_objects < 1:
        raise ValueError("need at least one object")
    rng = np.random.default_rng(seed)
    res = 160
    ax = np.linspace(-WINDOW_HALF, WINDOW_HALF, res)
    gx, gy = np.meshgrid(ax, ax)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)

    sprites = []
    masks = []
    z_orders = rng.permutation(n_objects) + 1
    for idx in range(n_objects):
        tex = sample_texture(rng)
        placed = False
        for _ in range(1000):
            scale = float(rng.uniform(0.5, 0.65))
            margin = WINDOW_HALF - scale * np.sqrt(2.0)
            margin = max(margin, 0.05)
            cand = ObjectSprite(
                object_id=idx + 1,
                texture=tex,
                tx=float(rng.uniform(-margin, margin)),
                ty=float(rng.uniform(-margin, margin)),
                theta=float(rng.uniform(0, 2 * np.pi)),
                scale=scale,
                z_order=int(z_orders[idx]),
            )
            m = _footprint_mask(cand, grid)
            ok = True
            for other in masks:
                inter = np.count_nonzero(m & other)
                cap = MAX_OVERLAP * min(np.count_nonzero(m), np.count_nonzero(other))
                if inter > cap:
                    ok = False
                    break
            if ok:
                sprites.append(cand)
                masks.append(m)
                placed = True
                break
        if not placed:
            raise PlacementError(f"could not place sprite {idx + 1} after 1000 attempts")

    bg_color = rng.uniform(0.55, 0.85, 3)
    background = TextureSpec(kind="flat", params={
        "c0": bg_color.tolist(), "c1": bg_color.tolist(),
        "border": bg_color.tolist(), "angle": 0.0, "freq": 1.0, "phase": 0.0,
    })
    return SceneSpec(scene_id=scene_id, sprites=tuple(sprites),
                     background=background, canvas=tuple(canvas))


def make_view(canvas, azimuth, elevation, radius, target=(0.0, 0.0)):
    """Camera on the upper hemisphere looking at ``target`` on the plane."""
    h, w = canvas
    center = np.array([
        radius * np.cos(elevation) * np.cos(azimuth),
        radius * np.cos(elevation) * np.sin(azimuth),
        radius * np.sin(elevation),
    ])
    tgt = np.array([target[0], target[1], 0.0])
    z_axis = tgt - center
    z_axis = z_axis / np.linalg.norm(z_axis)
    world_up = np.array([0.0, 0.0, 1.0])
    x_axis = np.cross(z_axis, world_up)
    nx = np.linalg.norm(x_axis)
    if nx < 1e-8:
        x_axis = np.array([1.0, 0.0, 0.0])
    else:
        x_axis = x_axis / nx
    y_axis = np.cross(z_axis, x_axis)
    rot = np.stack([x_axis, y_axis, z_axis])
    trans = -rot @ center
    f = FOCAL_PER_UNIT * min(h, w) * radius
    intr = np.array([
        [f, 0.0, (w - 1) / 2.0],
        [0.0, f, (h - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return CameraView(intrinsics=intr, rotation=rot, translation=trans)


def sample_view(rng, canvas):
    return make_view(
        canvas,
        azimuth=rng.uniform(0, 2 * np.pi),
        elevation=rng.uniform(np.deg2rad(45), np.deg2rad(82)),
        radius=rng.uniform(2.6, 3.0),
        target=rng.uniform(-0.08, 0.08, 2),
    )


def view_homography(view):
    """3x3 map from plane coords (X,Y,1) to pixel coords (x,y,1)."""
    r = view.rotation
    return view.intrinsics @ np.column_stack([r[:, 0], r[:, 1], view.translation])


def plane_homography(view1, view2):
    """Pixel map frame1 -> frame2 for points on the plane; H[2,2] = 1."""
    h1 = view_homography(view1)
    h2 = view_homography(view2)
    h = h2 @ np.linalg.inv(h1)
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateViewError("plane-induced homography is singular")
    return h / h[2, 2]


def apply_homography(h, xy):
    """Apply 3x3 ``h`` to [N,2] (x,y) points; returns [N,2]."""
    pts = np.column_stack([xy, np.ones(len(xy))])
    q = pts @ h.T
    return q[:, :2] / q[:, 2:3]


def render_frame(scene, view, lighting=None):
    """Pinhole render of the textured plane; labels from the top sprite.

    ``lighting`` is an optional (gain, tint[3]) pair applied to the RGB
    output.  Raises :class:`DegenerateViewError` if any image pixel fails to
    backproject onto the plane in front of the camera.
    """
    h, w = scene.canvas
    hm = view_homography(view)
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xy = np.stack([cols.ravel(), rows.ravel()], axis=1)
    plane = apply_homography(np.linalg.inv(hm), xy)
    depth = plane @ view.rotation[2, :2] + view.translation[2]
    if np.any(depth <= 1e-6):
        raise DegenerateViewError("plane points behind camera (view too shallow)")

    rgb = texture_rgb(scene.background, plane / WINDOW_HALF)
    labels = np.zeros(h * w, dtype=np.int32)
    for sprite in sorted(scene.sprites, key=lambda s: s.z_order):
        loc = sprite.world_to_local(plane)
        inside = (np.abs(loc[:, 0]) <= 1) & (np.abs(loc[:, 1]) <= 1)
        if np.any(inside):
            rgb[inside] = texture_rgb(sprite.texture, loc[inside])
            labels[inside] = sprite.object_id
    if lighting is not None:
        gain, tint = lighting
        rgb = rgb * gain * np.asarray(tint)
    rgb = np.clip(rgb, 0.0, 1.0)
    image = rgb.T.reshape(3, h, w).astype(np.float32)
    return Frame(image=image, label_map=labels.reshape(h, w), view=view)


def render_object_only(scene, view, object_id, bg_color=(0.35, 0.35, 0.35)):
    """Render one sprite on a constant background (the clean reference)."""
    sprite = scene.sprite(object_id)
    solo = SceneSpec(
        scene_id=scene.scene_id,
        sprites=(sprite,),
        background=TextureSpec(kind="flat", params={
            "c0": list(bg_color), "c1": list(bg_color), "border": list(bg_color),
            "angle": 0.0, "freq": 1.0, "phase": 0.0,
        }),
        canvas=scene.canvas,
    )
    return render_frame(solo, view)


def compute_covisibility(label1, label2, homography12):
    """Pixels of frame1 whose warp lands in frame2 on the same label.

    Warped coordinates must stay inside [0, W-1] x [0, H-1] (so they are
    usable for bilinear lookup); the label in frame2 is read at the nearest
    pixel.
    """
    h, w = label1.shape
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    warped = apply_homography(homography12, np.stack([cols.ravel(), rows.ravel()], axis=1))
    x2, y2 = warped[:, 0], warped[:, 1]
    inb = (x2 >= 0) & (x2 <= w - 1) & (y2 >= 0) & (y2 <= h - 1)
    cov = np.zeros(h * w, dtype=bool)
    xr = np.rint(x2[inb]).astype(np.intp)
    yr = np.rint(y2[inb]).astype(np.intp)
    cov[inb] = label2.ravel()[yr * w + xr] == label1.ravel()[inb]
    return cov.reshape(h, w)


def relative_rotation_deg(view1, view2):
    r = view2.rotation @ view1.rotation.T
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def sample_lighting(rng):
    return float(rng.uniform(0.75, 1.15)), rng.uniform(0.9, 1.1, 3)


def make_pair(scene, seed, max_tries=30):
    """Render two nearby views plus per-object clean renders of view1.

    Guarantees: relative rotation <= 30 degrees, camera motion <= 20% of the
    camera distance, every object visible (>= 1 labelled pixel) in both
    frames.  Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    want = set(scene.object_ids)
    for _ in range(max_tries):
        view1 = sample_view(rng, scene.canvas)
        radius = np.linalg.norm(view1.camera_center())
        az = np.arctan2(view1.camera_center()[1], view1.camera_center()[0])
        el = np.arcsin(view1.camera_center()[2] / radius)
        view2 = make_view(
            scene.canvas,
            azimuth=az + rng.uniform(-np.deg2rad(14), np.deg2rad(14)),
            elevation=np.clip(
                el + rng.uniform(-np.deg2rad(9), np.deg2rad(9)),
                np.deg2rad(40), np.deg2rad(84),
            ),
            radius=radius,
            target=rng.uniform(-0.08, 0.08, 2),
        )
        if relative_rotation_deg(view1, view2) > 30.0:
            continue
        motion = np.linalg.norm(view2.camera_center() - view1.camera_center())
        if motion > 0.2 * radius:
            continue
        try:
            frame1 = render_frame(scene, view1, sample_lighting(rng))
            frame2 = render_frame(scene, view2, sample_lighting(rng))
        except DegenerateViewError:
            continue
        if set(np.unique(frame1.label_map)) - {0} != want:
            continue
        if set(np.unique(frame2.label_map)) - {0} != want:
            continue
        h12 = plane_homography(view1, view2)
        clean = {oid: render_object_only(scene, view1, oid) for oid in scene.object_ids}
        cov = compute_covisibility(frame1.label_map, frame2.label_map, h12)
        return PairSample(
            frame1=frame1, frame2=frame2, clean_renders=clean,
            homography12=h12, covisibility=cov,
        )
    raise PlacementError(f"could not sample a valid pair for scene {scene.scene_id}")


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class DatasetConfig:
    n_scenes: int = 40
    pairs_per_scene: int = 8
    n_objects: int = 3
    canvas: tuple = (64, 64)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "canvas" in d:
            d["canvas"] = tuple(d["canvas"])
        return cls(**d)


def scene_seed(config, scene_idx):
    return [config.seed, 1000 + scene_idx]


def pair_seed(config, scene_idx, pair_idx):
    return [config.seed, 1000 + scene_idx, pair_idx]


def _save_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.ndim == 3:  # [3,H,W] float image
        arr = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path)
    else:
        Image.fromarray(array.astype(np.uint8), mode="L").save(path)


def _load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.moveaxis(arr, -1, 0)


def _load_labels(path):
    return np.asarray(Image.open(path), dtype=np.int32)


def _view_to_json(view):
    return {
        "R": view.rotation.ravel().tolist(),
        "t": view.translation.tolist(),
    }


def _view_from_json(intr, d):
    return CameraView(
        intrinsics=np.asarray(intr, dtype=np.float64).reshape(3, 3),
        rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
        translation=np.asarray(d["t"], dtype=np.float64),
    )


def generate_dataset(config, out_dir):
    """Render and write a full dataset; returns the manifest path.

    Pure function of (config, seed): rerunning into a fresh directory
    produces byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes_json = []
    for si in range(config.n_scenes):
        scene = sample_scene(
            scene_seed(config, si), config.n_objects, config.canvas, scene_id=si
        )
        pairs_json = []
        for pi in range(config.pairs_per_scene):
            pair = make_pair(scene, pair_seed(config, si, pi))
            rel = Path(f"scene_{si:03d}") / f"pair_{pi:02d}"
            _save_png(out / rel / "img1.png", pair.frame1.image)
            _save_png(out / rel / "img2.png", pair.frame2.image)
            _save_png(out / rel / "lab1.png", pair.frame1.label_map)
            _save_png(out / rel / "lab2.png", pair.frame2.label_map)
            clean_json = {}
            for oid, fr in sorted(pair.clean_renders.items()):
                _save_png(out / rel / f"clean_{oid}.png", fr.image)
                _save_png(out / rel / f"clean_lab_{oid}.png", fr.label_map)
                clean_json[str(oid)] = {
                    "image": str(rel / f"clean_{oid}.png"),
                    "labels": str(rel / f"clean_lab_{oid}.png"),
                }
            pairs_json.append({
                "frame1": {"image": str(rel / "img1.png"), "labels": str(rel / "lab1.png")},
                "frame2": {"image": str(rel / "img2.png"), "labels": str(rel / "lab2.png")},
                "clean_renders": clean_json,
                "homography12": pair.homography12.ravel().tolist(),
                "intrinsics": pair.frame1.view.intrinsics.ravel().tolist(),
                "extrinsics1": _view_to_json(pair.frame1.view),
                "extrinsics2": _view_to_json(pair.frame2.view),
            })
        scenes_json.append({
            "scene_id": si,
            "objects": [
                {
                    "object_id": sp.object_id,
                    "texture_kind": sp.texture.kind,
                    "pose": {"tx": sp.tx, "ty": sp.ty, "theta": sp.theta, "scale": sp.scale},
                    "z_order": sp.z_order,
                }
                for sp in scene.sprites
            ],
            "pairs": pairs_json,
        })
    manifest = {"config": asdict(config), "scenes": scenes_json}
    manifest["config"]["canvas"] = list(config.canvas)
    path = out / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return path


def manifest_hash(manifest_path):
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


@dataclass
class LoadedScene:
    scene_id: int
    spec: SceneSpec
    pairs: list


@dataclass
class Dataset:
    config: DatasetConfig
    scenes: list = field(default_factory=list)

    def all_pairs(self):
        return [p for sc in self.scenes for p in sc.pairs]


def load_dataset(manifest_path):
    """Reload a generated dataset; covisibility is recomputed from stored
    homographies and label maps so it always agrees with them."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = DatasetConfig.from_dict(manifest["config"])
    scenes = []
    for sc in manifest["scenes"]:
        si = sc["scene_id"]
        spec = sample_scene(scene_seed(config, si), config.n_objects, config.canvas, scene_id=si)
        pairs = []
        for pj in sc["pairs"]:
            intr = pj["intrinsics"]
            view1 = _view_from_json(intr, pj["extrinsics1"])
            view2 = _view_from_json(intr, pj["extrinsics2"])
            f1 = Frame(_load_image(root / pj["frame1"]["image"]),
                       _load_labels(root / pj["frame1"]["labels"]), view1)
            f2 = Frame(_load_image(root / pj["frame2"]["image"]),
                       _load_labels(root / pj["frame2"]["labels"]), view2)
            clean = {}
            for oid, cj in pj["clean_renders"].items():
                clean[int(oid)] = Frame(_load_image(root / cj["image"]),
                                        _load_labels(root / cj["labels"]), view1)
            h12 = np.asarray(pj["homography12"], dtype=np.float64).reshape(3, 3)
            cov = compute_covisibility(f1.label_map, f2.label_map, h12)
            pairs.append(PairSample(f1, f2, clean, h12, cov))
        scenes.append(LoadedScene(scene_id=si, spec=spec, pairs=pairs))
    return Dataset(config=config, scenes=scenes)
