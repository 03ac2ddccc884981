"""Detector/descriptor network on the autodiff substrate.

A small fully-convolutional encoder/decoder produces full-resolution
features; the detector head squares them and maps through a 1x1 conv plus
softplus to a strictly positive confidence map, and the descriptor head
splits the features into an intra-object part and an inter-object part,
each L2-normalized per pixel.

Normalization layers support three modes: ``train`` (current-image stats,
running stats updated), ``running`` (stored stats, frozen) and
``per_image`` (current-image stats, nothing updated) - the last one is the
test-time adaptation trick for unseen imagery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ndtensor as nd

NORM_MODES = ("train", "running", "per_image")
NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    enc_channels: list = field(default_factory=lambda: [16, 32, 64])
    feat_dim: int = 96
    c1_intra: int = 64
    c2_inter: int = 32
    norm_mode: str = "train"
    decoupled: bool = True

    def __post_init__(self):
        if self.c1_intra + self.c2_inter != self.feat_dim:
            raise ValueError("c1_intra + c2_inter must equal feat_dim")
        if self.c1_intra < 1 or self.c2_inter < 1:
            raise ValueError("descriptor splits must be >= 1 channel")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")

    @property
    def downsamplings(self):
        return len(self.enc_channels)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NormLayerState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    initialized: bool = False


@dataclass
class ModelOutput:
    confidence: nd.DiffNode   # [H,W], > 0
    desc_intra: nd.DiffNode   # [C1,H,W]
    desc_inter: nd.DiffNode   # [C2,H,W]

    @property
    def shape(self):
        return self.confidence.value.shape


def normalize_features(x, gamma, beta, state, mode):
    """Channel normalization of [C,H,W] features with learned affine.

    train: current-image spatial stats, running stats EMA-updated.
    running: stored stats only (error if never trained).
    per_image: current-image stats, no state update.
    """
    if mode not in NORM_MODES:
        raise ValueError(f"unknown norm mode {mode!r}")
    c = x.value.shape[0]
    if mode == "running":
        if not state.initialized:
            raise RuntimeError("running-mode normalization before any training step")
        mu = state.running_mean.reshape(c, 1, 1).astype(x.value.dtype)
        scale = 1.0 / np.sqrt(state.running_var.reshape(c, 1, 1) + NORM_EPS)
        y = nd.mul(nd.sub(x, mu), scale.astype(x.value.dtype))
    else:
        mu = nd.mean(x, axes=(1, 2), keepdims=True)
        centered = nd.sub(x, mu)
        var = nd.mean(nd.square(centered), axes=(1, 2), keepdims=True)
        y = nd.div(centered, nd.elementwise(nd.add(var, NORM_EPS), "sqrt"))
        if mode == "train":
            m = state.momentum
            batch_mean = mu.value.reshape(c).astype(np.float64)
            batch_var = var.value.reshape(c).astype(np.float64)
            state.running_mean = (1 - m) * state.running_mean + m * batch_mean
            state.running_var = (1 - m) * state.running_var + m * batch_var
            state.initialized = True
    g = nd.reshape(gamma, (c, 1, 1))
    b = nd.reshape(beta, (c, 1, 1))
    return nd.add(nd.mul(y, g), b)


def _conv_shapes(config):
    """(name, cin, cout) for every 3x3 conv in the network."""
    enc = config.enc_channels
    shapes = []
    cin = 3
    for i, cout in enumerate(enc):
        shapes.append((f"enc{i}", cin, cout))
        cin = cout
    dec_out = list(reversed(enc[:-1]))  # skip-connection conv outputs
    for i, cout in enumerate(dec_out):
        skip = enc[len(enc) - 2 - i]
        shapes.append((f"dec{i}", cin + skip, cout))
        cin = cout
    shapes.append(("final", cin, config.feat_dim))
    return shapes


def init_params(config, seed, dtype=np.float32):
    """He fan-in initialized parameter dict, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}

    def conv_init(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.w"] = nd.leaf(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype))
        params[f"{name}.b"] = nd.leaf(np.zeros(cout, dtype=dtype))

    def norm_init(name, c):
        params[f"{name}.gamma"] = nd.leaf(np.ones(c, dtype=dtype))
        params[f"{name}.beta"] = nd.leaf(np.zeros(c, dtype=dtype))

    norm_init("norm_in", 3)
    for name, cin, cout in _conv_shapes(config):
        conv_init(name, cin, cout, 3)
        if name != "final":
            norm_init(name, cout)
    conv_init("det", config.feat_dim, 1, 1)
    return params


def init_norm_states(config):
    states = {"norm_in": NormLayerState(np.zeros(3), np.ones(3))}
    for name, _, cout in _conv_shapes(config):
        if name != "final":
            states[name] = NormLayerState(np.zeros(cout), np.ones(cout))
    return states


class KeypointNet:
    """Bundles config, parameters and normalization state."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = dtype
        self.params = init_params(self.config, seed, dtype)
        self.norm_states = init_norm_states(self.config)

    def forward(self, image, norm_mode=None):
        """Run the network on one [3,H,W] image (array or DiffNode).

        H and W must be divisible by 2**len(enc_channels).  Returns a
        :class:`ModelOutput` of graph nodes; training reads gradients out of
        them, inference reads ``.value``.
        """
        cfg = self.config
        mode = norm_mode or cfg.norm_mode
        x = image if isinstance(image, nd.DiffNode) else nd.leaf(np.asarray(image, dtype=self.dtype))
        if x.value.ndim != 3 or x.value.shape[0] != 3:
            raise ValueError(f"expected [3,H,W] image, got {x.value.shape}")
        h, w = x.value.shape[1:]
        div = 2 ** cfg.downsamplings
        if h % div or w % div:
            raise ValueError(f"image size {h}x{w} not divisible by {div}")

        p = self.params

        def norm(name, t):
            return normalize_features(
                t, p[f"{name}.gamma"], p[f"{name}.beta"], self.norm_states[name], mode
            )

        x = norm("norm_in", x)
        skips = []
        n_enc = len(cfg.enc_channels)
        for i in range(n_enc):
            x = nd.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=1, pad=1)
            x = nd.avgpool2x(nd.elementwise(norm(f"enc{i}", x), "elu"))
            skips.append(x)
        for i in range(n_enc - 1):
            x = nd.upsample_nearest2x(x)
            x = nd.concat([x, skips[n_enc - 2 - i]], axis=0)
            x = nd.conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=1, pad=1)
            x = nd.elementwise(norm(f"dec{i}", x), "elu")
        x = nd.upsample_nearest2x(x)
        feats = nd.conv2d(x, p["final.w"], p["final.b"], stride=1, pad=1)

        logits = nd.conv2d(nd.square(feats), p["det.w"], p["det.b"], stride=1, pad=0)
        confidence = nd.reshape(nd.softplus(logits), (h, w))

        c1 = cfg.c1_intra
        if cfg.decoupled:
            intra = nd.l2_normalize_channels(nd.slice_channels(feats, 0, c1))
            inter = nd.l2_normalize_channels(nd.slice_channels(feats, c1, cfg.feat_dim))
        else:
            full = nd.l2_normalize_channels(feats)
            intra = nd.slice_channels(full, 0, c1)
            inter = nd.slice_channels(full, c1, cfg.feat_dim)
        return ModelOutput(confidence=confidence, desc_intra=intra, desc_inter=inter)

    # -- persistence ------------------------------------------------------

    def state_tensors(self):
        out = {name: node.value for name, node in self.params.items()}
        for name, st in self.norm_states.items():
            out[f"norm_state.{name}.mean"] = st.running_mean
            out[f"norm_state.{name}.var"] = st.running_var
        return out

    def save(self, path, extra_tensors=None, extra_meta=None):
        """Checkpoint to the tensor container plus a JSON sidecar."""
        path = Path(path)
        tensors = self.state_tensors()
        if extra_tensors:
            tensors.update(extra_tensors)
        nd.save_tensors(path, tensors)
        meta = {
            "model_config": asdict(self.config),
            "norm_initialized": {k: st.initialized for k, st in self.norm_states.items()},
            "norm_momentum": {k: st.momentum for k, st in self.norm_states.items()},
        }
        if extra_meta:
            meta.update(extra_meta)
        with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        """Restore a checkpoint; returns (net, extra_tensors, meta)."""
        path = Path(path)
        tensors = nd.load_tensors(path)
        with open(path.with_suffix(path.suffix + ".json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        config = ModelConfig.from_dict(meta["model_config"])
        net = cls(config, seed=0)
        extra = {}
        for name, arr in tensors.items():
            if name in net.params:
                net.params[name].value = arr.astype(net.dtype)
            elif name.startswith("norm_state."):
                _, layer, kind = name.split(".")
                st = net.norm_states[layer]
                if kind == "mean":
                    st.running_mean = arr.astype(np.float64)
                else:
                    st.running_var = arr.astype(np.float64)
            else:
                extra[name] = arr
        for layer, flag in meta.get("norm_initialized", {}).items():
            net.norm_states[layer].initialized = bool(flag)
        for layer, mom in meta.get("norm_momentum", {}).items():
            net.norm_states[layer].momentum = float(mom)
        return net, extra, meta
