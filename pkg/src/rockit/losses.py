"""Training objective: repeatability, uncertainty-weighted contrastive
descriptor losses, and the object-centric positive/negative sampling rules.

The total objective is

    L = L_rep + lambda1 * L_intra + lambda2 * L_inter

where L_rep compares detector confidence patches across views through the
ground-truth warp, L_intra pulls a query descriptor toward its reprojected
location (weighted by detector confidence, which acts as an inverse
uncertainty), and L_inter pulls it toward its own object while pushing away
other objects and background.  Clean single-object renders can contribute
extra positives so descriptors cannot lean on background context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .simscene import apply_homography

NEG_STRATEGIES = ("object_centric", "random_all_pixels")
SEMANTIC_MODES = ("average", "multi_positive")


@dataclass
class LossConfig:
    alpha: float = 0.85            # SSIM/L1 mix in the patch metric
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    patch_N: int = 16              # patch side in pixels
    patch_stride: int = 8          # patch grid stride
    delta: float = 8.0             # intra-negative exclusion radius (px)
    tau_intra: float = 0.07
    tau_inter: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    queries_per_object: int = 20
    negs_per_query: int = 64
    sigma_floor: float = 1e-3
    use_semantic: bool = True
    use_decoupled: bool = True
    use_repeatability: bool = True
    neg_strategy: str = "object_centric"
    semantic_mode: str = "average"

    def __post_init__(self):
        if self.tau_intra <= 0 or self.tau_inter <= 0:
            raise ValueError("temperatures must be > 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be > 0")
        if self.neg_strategy not in NEG_STRATEGIES:
            raise ValueError(f"neg_strategy must be one of {NEG_STRATEGIES}")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class QueryBatch:
    """Sampled contrastive coordinates for one image pair.

    All coordinates are (row, col); ``pos2`` is float (warped location in
    frame2), every other array holds integer pixel coordinates.  The I0
    fields are None when semantic consistency is off.
    """

    coords1: np.ndarray          # [M,2] int
    object_ids: np.ndarray       # [M] int
    pos2: np.ndarray             # [M,2] float
    inter_pos2: np.ndarray       # [M,2] int
    neg_intra: np.ndarray        # [M,K,2] int
    neg_inter: np.ndarray        # [M,K,2] int
    sigma1: np.ndarray           # [M] float, detector value at coords1
    pos0: np.ndarray | None = None        # [M,2] int (same coords as coords1)
    inter_pos0: np.ndarray | None = None  # [M,2] int

    @property
    def size(self):
        return len(self.coords1)


def _zero():
    return nd.leaf(np.zeros((), dtype=np.float64))


# ---------------------------------------------------------------------------
# patch metric


def ssim(x, y, c1=1e-4, c2=9e-4):
    """SSIM of patch pairs; reduces the last two axes of [..., N, N]."""
    x, y = nd.as_node(x), nd.as_node(y)
    if x.value.shape != y.value.shape:
        raise ValueError("patch shapes differ")
    if x.value.size == 0:
        raise ValueError("empty patch")
    ax = (-2, -1)
    mx = nd.mean(x, axes=ax, keepdims=True)
    my = nd.mean(y, axes=ax, keepdims=True)
    vx = nd.sub(nd.mean(nd.square(x), axes=ax, keepdims=True), nd.square(mx))
    vy = nd.sub(nd.mean(nd.square(y), axes=ax, keepdims=True), nd.square(my))
    cov = nd.sub(nd.mean(nd.mul(x, y), axes=ax, keepdims=True), nd.mul(mx, my))
    num = nd.mul(nd.add(nd.mul(nd.mul(mx, my), 2.0), c1), nd.add(nd.mul(cov, 2.0), c2))
    den = nd.mul(nd.add(nd.add(nd.square(mx), nd.square(my)), c1),
                 nd.add(nd.add(vx, vy), c2))
    out = nd.div(num, den)
    return nd.reshape(out, x.value.shape[:-2])


def metric_r(x, y, alpha=0.85, c1=1e-4, c2=9e-4):
    """alpha/2 * (1 - SSIM) + (1 - alpha) * mean-abs-difference per patch."""
    x, y = nd.as_node(x), nd.as_node(y)
    sim = ssim(x, y, c1, c2)
    l1 = nd.mean(nd.elementwise(nd.sub(x, y), "abs"), axes=(-2, -1))
    return nd.add(nd.mul(nd.sub(1.0, sim), alpha / 2.0), nd.mul(l1, 1.0 - alpha))


def _warp_grid(homography12, shape):
    h, w = shape
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    warped = apply_homography(homography12, np.stack([cols.ravel(), rows.ravel()], axis=1))
    wx = warped[:, 0].reshape(h, w)
    wy = warped[:, 1].reshape(h, w)
    return wy, wx


def repeatability_loss(conf1, conf2, homography12, covisibility, config):
    """Mean patch metric between conf1 and the warp of conf2 into frame1.

    Patches come from a stride grid; a patch participates only if every one
    of its pixels is covisible.  Returns (loss node, number of patches);
    zero patches yields a constant 0 loss.
    """
    n = config.patch_N
    stride = config.patch_stride
    h, w = covisibility.shape
    if h < n or w < n:
        return _zero(), 0
    r0s = np.arange(0, h - n + 1, stride)
    c0s = np.arange(0, w - n + 1, stride)
    rr, cc = np.meshgrid(r0s, c0s, indexing="ij")
    corners = np.stack([rr.ravel(), cc.ravel()], axis=1)
    dr, dc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rows = corners[:, 0][:, None, None] + dr[None]
    cols = corners[:, 1][:, None, None] + dc[None]
    valid = covisibility[rows, cols].all(axis=(1, 2))
    if not np.any(valid):
        return _zero(), 0
    rows, cols = rows[valid], cols[valid]
    wy, wx = _warp_grid(homography12, (h, w))
    x = nd.gather_pixels(conf1, rows, cols)
    y = nd.bilinear_pixels(conf2, wy[rows, cols], wx[rows, cols])
    r = metric_r(x, y, config.alpha, config.ssim_c1, config.ssim_c2)
    return nd.mean(r), int(valid.sum())


# ---------------------------------------------------------------------------
# contrastive losses


def infonce_rows(query, positive, negatives, tau):
    """Batched InfoNCE: query [M,C], positive [M,C], negatives [M,K,C] -> [M].

    Rows are -log softmax of the positive among {positive} + negatives at
    temperature tau; an empty negative set gives exact zeros.
    """
    query = nd.as_node(query)
    positive = nd.as_node(positive)
    m, c = query.value.shape
    pos_sim = nd.mul(nd.nsum(nd.mul(query, positive), axes=(1,)), 1.0 / tau)
    if negatives is None or negatives.value.shape[1] == 0:
        return nd.mul(pos_sim, 0.0)
    q3 = nd.reshape(query, (m, 1, c))
    neg_sim = nd.mul(nd.nsum(nd.mul(q3, negatives), axes=(2,)), 1.0 / tau)
    logits = nd.concat([nd.reshape(pos_sim, (m, 1)), neg_sim], axis=1)
    return nd.sub(nd.logsumexp(logits, axis=1), pos_sim)


def infonce(query, positive, negatives, tau):
    """Single-query InfoNCE (scalar node); see :func:`infonce_rows`."""
    q = nd.as_node(query)
    p = nd.as_node(positive)
    if isinstance(negatives, (list, tuple)):
        negs = np.stack([n.value if isinstance(n, nd.DiffNode) else np.asarray(n) for n in negatives]) \
            if len(negatives) else np.zeros((0, q.value.shape[-1]))
        negs = nd.leaf(negs)
    else:
        negs = nd.as_node(negatives)
    c = q.value.shape[-1]
    k = negs.value.shape[0] if negs.value.ndim == 2 else 0
    out = infonce_rows(
        nd.reshape(q, (1, c)),
        nd.reshape(p, (1, c)),
        nd.reshape(negs, (1, k, c)) if k else None,
        tau,
    )
    return nd.reshape(out, ())


def uncertainty_weight(loss_c, sigma, floor=1e-3):
    """Confidence-weighted loss: sigma * loss_c - log(sigma), sigma clamped.

    Treating the reciprocal of detector confidence as a variance, the
    negative log-likelihood of the contrastive error reduces to this form;
    it is stationary in sigma at sigma = 1/loss_c.
    """
    s = nd.maximum_const(nd.as_node(sigma), floor)
    return nd.sub(nd.mul(s, nd.as_node(loss_c)), nd.elementwise(s, "log"))


# ---------------------------------------------------------------------------
# sampling


def _choice(rng, pool_size, k):
    if pool_size >= k:
        return rng.choice(pool_size, size=k, replace=False)
    return rng.choice(pool_size, size=k, replace=True)


def sample_queries(pair, outputs1, config, rng):
    """Draw per-object queries plus positive/negative coordinate sets.

    Queries are covisible pixels of each object in frame1.  Intra negatives
    are same-object pixels of frame2 outside the delta-neighbourhood of the
    warped query; inter negatives carry a different label (other objects or
    background).  With ``neg_strategy='random_all_pixels'`` both sets are
    uniform over all pixels instead.  Queries with no eligible intra
    negative are dropped.  Deterministic per rng seed.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels1 = pair.frame1.label_map
    labels2 = pair.frame2.label_map
    cov = pair.covisibility
    h, w = labels1.shape
    k = config.negs_per_query
    conf = outputs1.confidence.value

    all_coords = np.argwhere(np.ones((h, w), dtype=bool))
    random_mode = config.neg_strategy == "random_all_pixels"

    per_obj = []
    for oid in sorted(int(v) for v in np.unique(labels1) if v > 0):
        qmask = (labels1 == oid) & cov
        qcoords = np.argwhere(qmask)
        if len(qcoords) == 0:
            continue
        take = rng.choice(len(qcoords), size=config.queries_per_object,
                          replace=len(qcoords) < config.queries_per_object)
        coords1 = qcoords[take]
        warped = apply_homography(
            pair.homography12, coords1[:, ::-1].astype(np.float64)
        )
        pos2 = warped[:, ::-1]  # back to (row, col)

        obj2 = np.argwhere(labels2 == oid)
        other2 = np.argwhere(labels2 != oid)

        keep, negs_i = [], []
        for i in range(len(coords1)):
            if random_mode:
                negs_i.append(all_coords[rng.choice(len(all_coords), size=k)])
                keep.append(i)
                continue
            d2 = ((obj2 - pos2[i]) ** 2).sum(axis=1)
            eligible = np.nonzero(d2 > config.delta**2)[0]
            if len(eligible) == 0:
                continue
            negs_i.append(obj2[eligible[_choice(rng, len(eligible), k)]])
            keep.append(i)
        if not keep:
            continue
        keep = np.asarray(keep)
        coords1, pos2 = coords1[keep], pos2[keep]
        m = len(keep)

        if random_mode:
            neg_inter = all_coords[rng.choice(len(all_coords), size=(m, k))]
        else:
            neg_inter = other2[np.stack([_choice(rng, len(other2), k) for _ in range(m)])]
        inter_pos2 = obj2[rng.choice(len(obj2), size=m)] if len(obj2) else coords1.copy()

        entry = {
            "coords1": coords1,
            "object_ids": np.full(m, oid),
            "pos2": pos2.astype(np.float64),
            "inter_pos2": inter_pos2,
            "neg_intra": np.stack(negs_i),
            "neg_inter": neg_inter,
            "sigma1": conf[coords1[:, 0], coords1[:, 1]].astype(np.float64),
        }
        if config.use_semantic:
            lab0 = pair.clean_renders[oid].label_map
            obj0 = np.argwhere(lab0 == oid)
            entry["pos0"] = coords1.copy()
            entry["inter_pos0"] = obj0[rng.choice(len(obj0), size=m)]
        per_obj.append(entry)

    if not per_obj:
        empty2 = np.zeros((0, 2), dtype=np.intp)
        return QueryBatch(
            coords1=empty2, object_ids=np.zeros(0, dtype=int),
            pos2=np.zeros((0, 2)), inter_pos2=empty2,
            neg_intra=np.zeros((0, k, 2), dtype=np.intp),
            neg_inter=np.zeros((0, k, 2), dtype=np.intp),
            sigma1=np.zeros(0),
            pos0=empty2 if config.use_semantic else None,
            inter_pos0=empty2 if config.use_semantic else None,
        )
    cat = {key: np.concatenate([e[key] for e in per_obj]) for key in per_obj[0]}
    if not config.use_semantic:
        cat["pos0"] = None
        cat["inter_pos0"] = None
    return QueryBatch(**cat)


# ---------------------------------------------------------------------------
# descriptor losses


def _desc_map(output, branch, config):
    """Select the descriptor map a loss operates on.

    Decoupled training uses the matching branch; otherwise both losses see
    the full-length vector (the model already normalized it jointly).
    """
    if config.use_decoupled:
        return output.desc_intra if branch == "intra" else output.desc_inter
    return nd.concat([output.desc_intra, output.desc_inter], axis=0)


def _rows_for_object(batch, sel, desc1, desc2, descs0, tau, config, bilinear_pos):
    """Per-query InfoNCE rows for one object's slice of the batch."""
    coords1 = batch.coords1[sel]
    q = nd.gather_pixels(desc1, coords1[:, 0], coords1[:, 1])
    negs = nd.gather_pixels(desc2, batch.neg_intra[sel][..., 0], batch.neg_intra[sel][..., 1]) \
        if bilinear_pos else \
        nd.gather_pixels(desc2, batch.neg_inter[sel][..., 0], batch.neg_inter[sel][..., 1])
    if bilinear_pos:
        pos = nd.bilinear_pixels(desc2, batch.pos2[sel][:, 0], batch.pos2[sel][:, 1])
        pos = nd.l2_normalize_channels(pos, axis=1)
    else:
        ip = batch.inter_pos2[sel]
        pos = nd.gather_pixels(desc2, ip[:, 0], ip[:, 1])

    if descs0 is None:
        return infonce_rows(q, pos, negs, tau)

    if bilinear_pos:
        p0c = batch.pos0[sel]
    else:
        p0c = batch.inter_pos0[sel]
    pos0 = nd.gather_pixels(descs0, p0c[:, 0], p0c[:, 1])
    if config.semantic_mode == "average":
        rows2 = infonce_rows(q, pos, negs, tau)
        rows0 = infonce_rows(q, pos0, negs, tau)
        return nd.mul(nd.add(rows2, rows0), 0.5)
    # multi_positive: joint softmax with both positives in the numerator
    m, c = q.value.shape
    pos_sims = nd.concat(
        [
            nd.reshape(nd.mul(nd.nsum(nd.mul(q, pos), axes=(1,)), 1.0 / tau), (m, 1)),
            nd.reshape(nd.mul(nd.nsum(nd.mul(q, pos0), axes=(1,)), 1.0 / tau), (m, 1)),
        ],
        axis=1,
    )
    neg_sims = nd.mul(nd.nsum(nd.mul(nd.reshape(q, (m, 1, c)), negs), axes=(2,)), 1.0 / tau)
    all_logits = nd.concat([pos_sims, neg_sims], axis=1)
    return nd.sub(nd.logsumexp(all_logits, axis=1), nd.logsumexp(pos_sims, axis=1))


def _descriptor_loss(outputs1, outputs2, outputs0, batch, config, branch):
    if batch.size == 0:
        return _zero()
    tau = config.tau_intra if branch == "intra" else config.tau_inter
    desc1 = _desc_map(outputs1, branch, config)
    desc2 = _desc_map(outputs2, branch, config)
    use0 = config.use_semantic and outputs0 is not None and batch.pos0 is not None
    rows_all = []
    sig_all = []
    for oid in sorted(set(batch.object_ids.tolist())):
        sel = np.nonzero(batch.object_ids == oid)[0]
        descs0 = _desc_map(outputs0[oid], branch, config) if use0 else None
        rows = _rows_for_object(
            batch, sel, desc1, desc2, descs0, tau, config, bilinear_pos=(branch == "intra")
        )
        rows_all.append(rows)
        if branch == "intra":
            c1 = batch.coords1[sel]
            sig_all.append(nd.gather_pixels(outputs1.confidence, c1[:, 0], c1[:, 1]))
    rows = nd.concat(rows_all, axis=0) if len(rows_all) > 1 else rows_all[0]
    if branch == "intra":
        sig = nd.concat(sig_all, axis=0) if len(sig_all) > 1 else sig_all[0]
        rows = uncertainty_weight(rows, sig, config.sigma_floor)
    return nd.mean(rows)


def loss_intra(outputs1, outputs2, outputs0, batch, config):
    """Intra-object salience loss (uncertainty-weighted InfoNCE, Eq. form
    sigma*Lc - log sigma averaged over queries)."""
    return _descriptor_loss(outputs1, outputs2, outputs0, batch, config, "intra")


def loss_inter(outputs1, outputs2, outputs0, batch, config):
    """Inter-object distinctness loss (plain InfoNCE over object labels)."""
    return _descriptor_loss(outputs1, outputs2, outputs0, batch, config, "inter")


@dataclass
class LossBundle:
    total: nd.DiffNode
    loss_r: nd.DiffNode
    loss_ds: nd.DiffNode
    loss_dc: nd.DiffNode
    n_patches: int
    batch: QueryBatch

    def components(self):
        return {
            "loss_total": float(self.total.value),
            "loss_r": float(self.loss_r.value),
            "loss_ds": float(self.loss_ds.value),
            "loss_dc": float(self.loss_dc.value),
        }


def total_loss(pair, outputs1, outputs2, outputs0, config, batch=None, rng=None):
    """Weighted sum of the three objectives plus per-component nodes.

    ``batch`` may be passed in (the trainer samples first so it only renders
    the clean views it needs); otherwise it is sampled here using ``rng``.
    """
    if batch is None:
        if rng is None:
            raise ValueError("need either a QueryBatch or an rng to sample one")
        batch = sample_queries(pair, outputs1, config, rng)
    if config.use_repeatability:
        lr, n_patches = repeatability_loss(
            outputs1.confidence, outputs2.confidence,
            pair.homography12, pair.covisibility, config,
        )
    else:
        lr, n_patches = _zero(), 0
    lds = loss_intra(outputs1, outputs2, outputs0, batch, config)
    ldc = loss_inter(outputs1, outputs2, outputs0, batch, config)
    total = nd.add(nd.add(lr, nd.mul(lds, config.lambda1)), nd.mul(ldc, config.lambda2))
    return LossBundle(total=total, loss_r=lr, loss_ds=lds, loss_dc=ldc,
                      n_patches=n_patches, batch=batch)
