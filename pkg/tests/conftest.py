"""Shared fixtures: synthetic pairs and hand-built model outputs."""

import numpy as np
import pytest

from rockit import ndtensor as nd
from rockit.model import ModelOutput
from rockit.simscene import Frame, PairSample, compute_covisibility, make_view


def synthetic_pair(rng, h=16, w=16, shift=(0, 0), n_objects=2, dtype=np.float32):
    """Hand-built PairSample: rectangular objects, integer-shift homography.

    frame2 is frame1 translated by ``shift`` = (dy, dx); the homography and
    label maps are exact, so every supervision invariant holds by
    construction.
    """
    labels1 = np.zeros((h, w), dtype=np.int32)
    boxes = [
        (2, 2, h // 2 - 1, w // 2 - 1),
        (h // 2 + 1, w // 2 + 1, h - 3, w - 3),
        (2, w // 2 + 1, h // 2 - 1, w - 3),
    ]
    for oid in range(1, n_objects + 1):
        r0, c0, r1, c1 = boxes[oid - 1]
        labels1[r0:r1, c0:c1] = oid
    dy, dx = shift
    labels2 = np.zeros_like(labels1)
    src = labels1[
        max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)
    ]
    labels2[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] = src
    img1 = rng.uniform(0, 1, (3, h, w)).astype(dtype)
    img2 = np.zeros_like(img1)
    img2[:, max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] = img1[
        :, max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)
    ]
    hom = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    view = make_view((h, w), azimuth=0.3, elevation=1.2, radius=2.8)
    f1 = Frame(img1, labels1, view)
    f2 = Frame(img2, labels2, view)
    clean = {}
    for oid in range(1, n_objects + 1):
        mask = labels1 == oid
        cimg = np.full((3, h, w), 0.35, dtype=dtype)
        cimg[:, mask] = img1[:, mask]
        clean[oid] = Frame(cimg, np.where(mask, oid, 0).astype(np.int32), view)
    cov = compute_covisibility(labels1, labels2, hom)
    return PairSample(f1, f2, clean, hom, cov)


def fake_outputs(rng, h=16, w=16, c1=4, c2=2, conf=None, dtype=np.float64):
    """ModelOutput built from leaves; returns (output, raw leaf dict)."""
    conf_arr = conf if conf is not None else rng.uniform(0.5, 2.0, (h, w))
    leaves = {
        "conf": nd.leaf(np.asarray(conf_arr, dtype=dtype)),
        "intra": nd.leaf(rng.standard_normal((c1, h, w)).astype(dtype)),
        "inter": nd.leaf(rng.standard_normal((c2, h, w)).astype(dtype)),
    }
    out = ModelOutput(
        confidence=leaves["conf"],
        desc_intra=nd.l2_normalize_channels(leaves["intra"]),
        desc_inter=nd.l2_normalize_channels(leaves["inter"]),
    )
    return out, leaves


@pytest.fixture
def rng():
    return np.random.default_rng(0)
