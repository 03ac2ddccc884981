"""Training loop: augmentation, Adam, schedule, metrics log, checkpoints.

Augmentation applies photometric jitter per view and an in-plane rotation
per view; label maps, the cross-view homography and the covisibility mask
are transformed consistently so the sampled supervision stays exact.  Every
step derives its RNG from (seed, step), which makes runs resumable and
bit-identically reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ndtensor as nd
from .losses import LossConfig, sample_queries, total_loss
from .model import KeypointNet, ModelConfig
from .simscene import Dataset, Frame, PairSample, apply_homography, compute_covisibility, load_dataset


class TrainAbort(RuntimeError):
    """Raised when a non-finite loss aborts training (diagnostics dumped)."""


@dataclass
class AugmentConfig:
    enabled: bool = True
    jitter_gain: float = 0.15
    jitter_offset: float = 0.08
    gray_p: float = 0.1
    noise_std_max: float = 0.02
    blur_p: float = 0.3
    blur_sigma_max: float = 0.8
    rot_max_deg: float = 15.0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 3
    lr_drop_frac: float = 0.75   # schedule shape: constant, then one 10x drop
    lr_drop_factor: float = 0.1

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# augmentation


def _rotation_matrix(theta, shape):
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = np.cos(theta), np.sin(theta)
    t1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    t2 = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    return t2 @ rot @ t1


def _warp_map(arr, a_inv, order, cval=0.0):
    """Resample [H,W] or [C,H,W] through output->input map ``a_inv``."""
    h, w = arr.shape[-2:]
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    src = apply_homography(a_inv, np.stack([cols.ravel(), rows.ravel()], axis=1))
    sx, sy = src[:, 0], src[:, 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    if order == 0:
        xr = np.clip(np.rint(sx), 0, w - 1).astype(np.intp)
        yr = np.clip(np.rint(sy), 0, h - 1).astype(np.intp)
        out = arr[..., yr, xr]
    else:
        x0 = np.clip(np.floor(sx), 0, w - 2).astype(np.intp)
        y0 = np.clip(np.floor(sy), 0, h - 2).astype(np.intp)
        fx = np.clip(sx - x0, 0, 1)
        fy = np.clip(sy - y0, 0, 1)
        out = (
            arr[..., y0, x0] * (1 - fy) * (1 - fx)
            + arr[..., y0, x0 + 1] * (1 - fy) * fx
            + arr[..., y0 + 1, x0] * fy * (1 - fx)
            + arr[..., y0 + 1, x0 + 1] * fy * fx
        )
    out = np.where(inside, out, cval).astype(arr.dtype)
    return out.reshape(arr.shape[:-2] + (h, w))


def _photometric(img, rng, cfg):
    out = img.astype(np.float32).copy()
    gains = rng.uniform(1 - cfg.jitter_gain, 1 + cfg.jitter_gain, 3).astype(np.float32)
    offs = rng.uniform(-cfg.jitter_offset, cfg.jitter_offset, 3).astype(np.float32)
    out = out * gains[:, None, None] + offs[:, None, None]
    if rng.uniform() < cfg.gray_p:
        gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]).astype(np.float32)
        out = np.stack([gray, gray, gray])
    blur_sigma = rng.uniform(0, cfg.blur_sigma_max)
    if rng.uniform() < cfg.blur_p and blur_sigma > 1e-3:
        out = gaussian_filter(out, sigma=(0, blur_sigma, blur_sigma))
    noise_std = rng.uniform(0, cfg.noise_std_max)
    out = out + rng.normal(0, noise_std, out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def augment_pair(pair, rng, cfg):
    """Photometric + rotation augmentation with consistent geometry.

    Rotating frame k by A_k turns the ground-truth warp H into
    A_2 @ H @ inv(A_1); clean renders share frame1's rotation so their
    coordinates stay aligned with frame1.  Covisibility is recomputed on
    the transformed label maps.
    """
    if not cfg.enabled:
        return pair
    shape = pair.frame1.label_map.shape
    theta1 = rng.uniform(-np.deg2rad(cfg.rot_max_deg), np.deg2rad(cfg.rot_max_deg))
    theta2 = rng.uniform(-np.deg2rad(cfg.rot_max_deg), np.deg2rad(cfg.rot_max_deg))
    a1 = _rotation_matrix(theta1, shape)
    a2 = _rotation_matrix(theta2, shape)
    a1_inv = np.linalg.inv(a1)
    a2_inv = np.linalg.inv(a2)

    img1 = _warp_map(_photometric(pair.frame1.image, rng, cfg), a1_inv, order=1)
    img2 = _warp_map(_photometric(pair.frame2.image, rng, cfg), a2_inv, order=1)
    lab1 = _warp_map(pair.frame1.label_map, a1_inv, order=0, cval=0)
    lab2 = _warp_map(pair.frame2.label_map, a2_inv, order=0, cval=0)
    h12 = a2 @ pair.homography12 @ a1_inv
    h12 = h12 / h12[2, 2]
    clean = {
        oid: Frame(
            image=_warp_map(fr.image, a1_inv, order=1),
            label_map=_warp_map(fr.label_map, a1_inv, order=0, cval=0),
            view=fr.view,
        )
        for oid, fr in pair.clean_renders.items()
    }
    return PairSample(
        frame1=Frame(img1, lab1, pair.frame1.view),
        frame2=Frame(img2, lab2, pair.frame2.view),
        clean_renders=clean,
        homography12=h12,
        covisibility=compute_covisibility(lab1, lab2, h12),
    )


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, config):
        self.params = params
        self.cfg = config
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.value = p.value - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype)

    def state_tensors(self):
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors, t):
        for name in self.params:
            self.m[name] = tensors[f"adam.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = tensors[f"adam.v.{name}"].astype(self.v[name].dtype)
        self.t = t


def grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


@dataclass
class TrainResult:
    net: KeypointNet
    steps: int
    metrics: list
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def _step_rng(seed, step):
    return np.random.default_rng([seed, 3, step])


def train(
    dataset,
    model_config=None,
    loss_config=None,
    optimizer_config=None,
    augment_config=None,
    seed=0,
    out_dir=None,
    resume=None,
    max_steps=None,
):
    """Optimize the network over a generated dataset.

    ``dataset`` is a Dataset or a manifest path.  The learning rate follows
    the drop schedule in OptimizerConfig (one 10x drop late in training).
    Deterministic per seed; ``resume`` continues a checkpoint and reproduces
    the uninterrupted run bit-for-bit.  A non-finite loss aborts with a
    diagnostic dump of the offending pair.
    """
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    model_config = model_config or ModelConfig()
    loss_config = loss_config or LossConfig()
    opt_config = optimizer_config or OptimizerConfig()
    aug_config = augment_config or AugmentConfig()
    model_config = dataclasses.replace(model_config, decoupled=loss_config.use_decoupled)

    pairs = dataset.all_pairs()
    if not pairs:
        raise ValueError("dataset has no pairs")
    # the lr schedule always follows the planned horizon; max_steps only
    # pauses early so a resumed run is bit-identical to an uninterrupted one
    planned_steps = opt_config.epochs * len(pairs)
    total_steps = planned_steps if max_steps is None else min(planned_steps, max_steps)
    drop_at = int(np.floor(opt_config.lr_drop_frac * planned_steps))

    start_step = 0
    if resume is not None:
        net, extra, meta = KeypointNet.load(resume)
        optimizer = Adam(net.params, opt_config)
        start_step = int(meta["train_state"]["step"])
        optimizer.load_state(extra, t=start_step)
    else:
        net = KeypointNet(model_config, seed=[seed, 0])
        optimizer = Adam(net.params, opt_config)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.ndjson"
        log_fh = open(metrics_path, "a" if resume else "w", encoding="utf-8")

    metrics = []
    perm_cache = {}
    try:
        for step in range(start_step, total_steps):
            epoch, idx = divmod(step, len(pairs))
            if epoch not in perm_cache:
                perm_cache[epoch] = np.random.default_rng([seed, 2, epoch]).permutation(len(pairs))
            pair = pairs[perm_cache[epoch][idx]]
            rng = _step_rng(seed, step)
            lr = opt_config.lr * (opt_config.lr_drop_factor if step >= drop_at else 1.0)
            try:
                aug = augment_pair(pair, rng, aug_config)
                out1 = net.forward(aug.frame1.image, norm_mode="train")
                out2 = net.forward(aug.frame2.image, norm_mode="train")
                batch = sample_queries(aug, out1, loss_config, rng)
                outs0 = None
                if loss_config.use_semantic and batch.size:
                    outs0 = {
                        oid: net.forward(aug.clean_renders[oid].image, norm_mode="per_image")
                        for oid in sorted(set(batch.object_ids.tolist()))
                    }
                bundle = total_loss(aug, out1, out2, outs0, loss_config, batch=batch)
                nd.backward(bundle.total)
            except FloatingPointError as err:
                if out_dir is not None:
                    _dump_diagnostics(out_dir, step, pair, err)
                raise TrainAbort(f"non-finite loss at step {step}: {err}") from err
            gn = grad_norm(net.params)
            optimizer.step(lr)
            for p in net.params.values():
                p.zero_grad()
            record = {"step": step, "lr": lr, "grad_norm": gn}
            record.update(bundle.components())
            metrics.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint.rocktnsr"
        save_checkpoint(net, optimizer, total_steps, seed, loss_config, opt_config, checkpoint_path)
    return TrainResult(net=net, steps=total_steps - start_step, metrics=metrics,
                       checkpoint_path=checkpoint_path, metrics_path=metrics_path)


def save_checkpoint(net, optimizer, step, seed, loss_config, opt_config, path):
    extra = optimizer.state_tensors()
    extra["train.step"] = np.array([step], dtype=np.int64)
    net.save(
        path,
        extra_tensors=extra,
        extra_meta={
            "train_state": {"step": step, "seed": seed},
            "loss_config": dataclasses.asdict(loss_config),
            "optimizer_config": dataclasses.asdict(opt_config),
        },
    )


def _dump_diagnostics(out_dir, step, pair, err):
    dump = {
        "img1": pair.frame1.image,
        "img2": pair.frame2.image,
        "labels1": pair.frame1.label_map.astype(np.int64),
        "labels2": pair.frame2.label_map.astype(np.int64),
        "homography12": pair.homography12,
    }
    nd.save_tensors(out_dir / f"nan_dump_step{step}.rocktnsr", dump)
    with open(out_dir / f"nan_dump_step{step}.json", "w", encoding="utf-8") as fh:
        json.dump({"step": step, "error": str(err)}, fh)
