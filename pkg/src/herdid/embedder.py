"""Embedding network and its optimisation.

Maps rotation-normalised crops to unit-length 128-d vectors and trains the
mapping with reciprocal triplet loss (d_ap + 1/d_an on squared Euclidean
distances) under online batch-hard mining, plain SGD with weight decay, and
pocket-algorithm model selection against a held-out validation set.

Two feature extractors satisfy the same contract:

* ``patch``: average-pool the crop onto a coarse grid, flatten, affine
  project to the embedding. Keeps spatial layout, which is what separates
  same-process coat patterns; the default for pipeline runs.
* ``conv``: two 3x3 conv + ReLU + 2x2 average-pool stages, global average
  pooling, affine projection. Texture statistics only; kept as the small
  convolutional reference and for gradient-check coverage.

Forward passes are deterministic; gradient accumulation reduces in fixed
index order so results do not depend on thread timing.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .geometry import Crop
from .tripletgen import TripletBatch
from .util import rng_for

NORM_EPSILON = 1e-12
RTL_EPSILON = 1e-6


@dataclass(frozen=True)
class EmbedderConfig:
    """Architecture of the embedding network."""

    kind: str = "patch"               # "patch" or "conv"
    in_h: int = 40
    in_w: int = 96
    embed_dim: int = 128
    patch_grid: tuple[int, int] = (10, 24)
    conv_channels: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.kind not in ("patch", "conv"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "patch":
            gh, gw = self.patch_grid
            if self.in_h % gh or self.in_w % gw:
                raise ValueError("patch_grid must divide the crop size evenly")
        else:
            if self.in_h % 4 or self.in_w % 4:
                raise ValueError("conv extractor needs crop sides divisible by 4")

    def to_json(self) -> dict:
        return {"kind": self.kind, "in_h": self.in_h, "in_w": self.in_w,
                "embed_dim": self.embed_dim,
                "patch_grid": list(self.patch_grid),
                "conv_channels": list(self.conv_channels)}

    @classmethod
    def from_json(cls, obj: dict) -> "EmbedderConfig":
        return cls(kind=obj["kind"], in_h=obj["in_h"], in_w=obj["in_w"],
                   embed_dim=obj["embed_dim"],
                   patch_grid=tuple(obj["patch_grid"]),
                   conv_channels=tuple(obj["conv_channels"]))


@dataclass
class EmbedderModel:
    """Parameter container; immutable once handed to evaluation."""

    config: EmbedderConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "EmbedderModel":
        return EmbedderModel(self.config,
                             {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0
        for k in sorted(self.params):
            size = self.params[k].size
            self.params[k][...] = flat[pos:pos + size].reshape(self.params[k].shape)
            pos += size


@dataclass
class Embedding:
    """Unit-norm latent vector with a back-reference to its crop."""

    vector: np.ndarray
    source: Crop | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    rtl_margin: float = 2.0   # recorded hyperparameter; the loss has no margin term
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "learning_rate", "weight_decay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def init_model(config: EmbedderConfig = EmbedderConfig(),
               rng_seed: int = 0) -> EmbedderModel:
    """Uniform fan-in initialisation of all parameters."""
    rng = rng_for(rng_seed, "init")
    params: dict[str, np.ndarray] = {}
    if config.kind == "patch":
        n_feat = config.patch_grid[0] * config.patch_grid[1]
    else:
        c1, c2 = config.conv_channels
        bound1 = 1.0 / math.sqrt(9)
        params["conv1_w"] = rng.uniform(-bound1, bound1, (c1, 1, 3, 3))
        params["conv1_b"] = np.zeros(c1)
        bound2 = 1.0 / math.sqrt(9 * c1)
        params["conv2_w"] = rng.uniform(-bound2, bound2, (c2, c1, 3, 3))
        params["conv2_b"] = np.zeros(c2)
        n_feat = c2
    bound = 1.0 / math.sqrt(n_feat)
    params["out_w"] = rng.uniform(-bound, bound, (config.embed_dim, n_feat))
    params["out_b"] = np.zeros(config.embed_dim)
    return EmbedderModel(config=config, params=params)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _patch_features(config: EmbedderConfig, crops: np.ndarray) -> np.ndarray:
    """(B, H, W) -> (B, gh*gw) grid-average features."""
    b = crops.shape[0]
    gh, gw = config.patch_grid
    ch, cw = config.in_h // gh, config.in_w // gw
    pooled = crops.reshape(b, gh, ch, gw, cw).mean(axis=(2, 4))
    return pooled.reshape(b, gh * gw)


def _conv_forward_single(model: EmbedderModel, crop: np.ndarray):
    """Per-crop conv stack; returns (features, cache for backward)."""
    p = model.params
    x0 = crop[None, :, :]
    z1 = _kernels.conv3x3_forward(x0, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    p1 = _kernels.avgpool2_forward(a1)
    z2 = _kernels.conv3x3_forward(p1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    p2 = _kernels.avgpool2_forward(a2)
    feat = p2.mean(axis=(1, 2))
    return feat, (x0, z1, p1, z2, p2)


def _conv_backward_single(model: EmbedderModel, cache, gfeat: np.ndarray,
                          grads: dict[str, np.ndarray]) -> None:
    p = model.params
    x0, z1, p1, z2, p2 = cache
    c2, h2, w2 = p2.shape
    gp2 = np.broadcast_to(gfeat[:, None, None] / (h2 * w2), p2.shape)
    ga2 = _kernels.avgpool2_backward(np.ascontiguousarray(gp2))
    gz2 = ga2 * (z2 > 0)
    gp1, gw2, gb2 = _kernels.conv3x3_backward(p1, p["conv2_w"], gz2)
    grads["conv2_w"] += gw2
    grads["conv2_b"] += gb2
    ga1 = _kernels.avgpool2_backward(gp1)
    gz1 = ga1 * (z1 > 0)
    _, gw1, gb1 = _kernels.conv3x3_backward(x0, p["conv1_w"], gz1)
    grads["conv1_w"] += gw1
    grads["conv1_b"] += gb1


def _normalize_rows(z: np.ndarray):
    norms = np.linalg.norm(z, axis=1)
    out = np.empty_like(z)
    degenerate = norms < NORM_EPSILON
    safe = ~degenerate
    out[safe] = z[safe] / norms[safe, None]
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0  # epsilon guard: zero vectors map to e1
    return out, norms, degenerate


def forward_batch(model: EmbedderModel, crops: np.ndarray):
    """Embed a (B, H, W) stack; returns (embeddings, cache)."""
    crops = np.ascontiguousarray(crops, dtype=np.float64)
    if crops.ndim == 2:
        crops = crops[None]
    if crops.shape[1:] != (model.config.in_h, model.config.in_w):
        raise ValueError(
            f"crop size {crops.shape[1:]} does not match model input "
            f"{(model.config.in_h, model.config.in_w)}")
    if model.config.kind == "patch":
        feats = _patch_features(model.config, crops)
        conv_caches = None
    else:
        results = [_conv_forward_single(model, crop) for crop in crops]
        feats = np.stack([r[0] for r in results])
        conv_caches = [r[1] for r in results]
    z = feats @ model.params["out_w"].T + model.params["out_b"]
    emb, norms, degenerate = _normalize_rows(z)
    return emb, (feats, z, emb, norms, degenerate, conv_caches)


def backward_batch(model: EmbedderModel, cache, gemb: np.ndarray) -> dict:
    """Parameter gradients given d(loss)/d(embeddings)."""
    feats, z, emb, norms, degenerate, conv_caches = cache
    gz = np.zeros_like(z)
    safe = ~degenerate
    dot = np.sum(gemb[safe] * emb[safe], axis=1, keepdims=True)
    gz[safe] = (gemb[safe] - dot * emb[safe]) / norms[safe, None]
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["out_w"] += gz.T @ feats
    grads["out_b"] += gz.sum(axis=0)
    if model.config.kind == "conv":
        gfeats = gz @ model.params["out_w"]
        for i in range(len(conv_caches)):
            _conv_backward_single(model, conv_caches[i], gfeats[i], grads)
    return grads


def embed(model: EmbedderModel, crop: Crop) -> Embedding:
    """Deterministic forward pass of one crop; output has unit norm."""
    pixels = np.asarray(crop.pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels.mean(axis=2)
    emb, _ = forward_batch(model, pixels[None])
    return Embedding(vector=emb[0], source=crop)


def embed_crops(model: EmbedderModel, crops: Sequence[Crop]) -> np.ndarray:
    """(N, embed_dim) embeddings for a crop sequence."""
    stack = np.stack([np.asarray(c.pixels, dtype=np.float64) if
                      np.asarray(c.pixels).ndim == 2 else
                      np.asarray(c.pixels, dtype=np.float64).mean(axis=2)
                      for c in crops])
    emb, _ = forward_batch(model, stack)
    return emb


# ---------------------------------------------------------------------------
# Distances, reciprocal triplet loss, batch-hard mining
# ---------------------------------------------------------------------------

def distance(u: Embedding, v: Embedding) -> float:
    """Squared Euclidean distance; in [0, 4] for unit vectors."""
    a = u.vector if isinstance(u, Embedding) else np.asarray(u)
    b = v.vector if isinstance(v, Embedding) else np.asarray(v)
    if a.shape != b.shape:
        raise ValueError("embedding dimensions differ")
    diff = a - b
    return float(diff @ diff)


def sq_distance_matrix(emb: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances of row vectors."""
    sq = np.sum(emb * emb, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    return np.maximum(d, 0.0)


def rtl_loss(d_ap: float, d_an: float) -> float:
    """Reciprocal triplet loss d_ap + 1/d_an.

    d_an is clamped below at 1e-6 because the loss is singular at zero
    negative distance.
    """
    if d_ap < 0:
        raise ValueError("d_ap must be non-negative")
    if d_an < 0:
        raise ValueError("d_an must be non-negative")
    return d_ap + 1.0 / max(d_an, RTL_EPSILON)


def rtl_loss_grad(d_ap: float, d_an: float) -> tuple[float, float]:
    """Partials (d/d_ap, d/d_an); the latter is -1/d_an^2 above the clamp."""
    if d_ap < 0 or d_an < 0:
        raise ValueError("distances must be non-negative")
    eff = max(d_an, RTL_EPSILON)
    return 1.0, -1.0 / (eff * eff)


@dataclass(frozen=True)
class MinedAnchor:
    """Batch-hard selection for one anchor."""

    anchor_index: int
    positive_index: int
    negative_index: int
    hardest_positive_dist: float
    hardest_negative_dist: float


def batch_hard_mine(embeddings, tracklet_ids,
                    video_ids=None) -> list[MinedAnchor]:
    """Per-anchor hardest positive / hardest negative over a batch.

    The hardest positive is the farthest same-tracklet element, the hardest
    negative the nearest element from a different video (different tracklet
    when video_ids is omitted). Anchors whose tracklet has no other member
    in the batch are skipped; mining fails if every anchor is skipped.
    """
    if isinstance(embeddings, np.ndarray):
        emb = embeddings
    else:
        emb = np.stack([e.vector if isinstance(e, Embedding) else np.asarray(e)
                        for e in embeddings])
    tracklet_ids = list(tracklet_ids)
    video_ids = list(video_ids) if video_ids is not None else list(tracklet_ids)
    if len(tracklet_ids) != emb.shape[0] or len(video_ids) != emb.shape[0]:
        raise ValueError("ids must align with embeddings")
    if len(set(tracklet_ids)) < 2:
        raise ValueError("batch-hard mining needs at least two tracklets")
    dists = sq_distance_matrix(emb)
    mined: list[MinedAnchor] = []
    n = emb.shape[0]
    for i in range(n):
        pos_j, pos_d = -1, -1.0
        neg_k, neg_d = -1, math.inf
        for j in range(n):
            if j == i:
                continue
            if tracklet_ids[j] == tracklet_ids[i]:
                if dists[i, j] > pos_d:
                    pos_j, pos_d = j, dists[i, j]
            if video_ids[j] != video_ids[i] and dists[i, j] < neg_d:
                neg_k, neg_d = j, dists[i, j]
        if pos_j < 0 or neg_k < 0:
            continue
        mined.append(MinedAnchor(i, pos_j, neg_k, float(pos_d), float(neg_d)))
    if not mined:
        raise ValueError("no anchor had both an in-batch positive and negative")
    return mined


def batch_loss_and_grads(model: EmbedderModel, crops: np.ndarray,
                         tracklet_ids, video_ids,
                         mined: list[MinedAnchor] | None = None):
    """Mean batch-hard RTL over a crop stack plus parameter gradients.

    When ``mined`` is provided the hardest-pair selection is held fixed,
    which is what finite-difference gradient checks need.
    """
    emb, cache = forward_batch(model, crops)
    if not np.isfinite(emb).all():
        raise RuntimeError("non-finite embeddings")
    if mined is None:
        mined = batch_hard_mine(emb, tracklet_ids, video_ids)
    dists = sq_distance_matrix(emb)
    total = 0.0
    gemb = np.zeros_like(emb)
    inv_n = 1.0 / len(mined)
    for sel in mined:
        i, j, k = sel.anchor_index, sel.positive_index, sel.negative_index
        d_ap = float(dists[i, j])
        d_an = float(dists[i, k])
        total += rtl_loss(d_ap, d_an)
        g_ap, g_an = rtl_loss_grad(d_ap, d_an)
        diff_ap = emb[i] - emb[j]
        diff_an = emb[i] - emb[k]
        gemb[i] += inv_n * (g_ap * 2.0 * diff_ap + g_an * 2.0 * diff_an)
        gemb[j] += inv_n * (-g_ap * 2.0 * diff_ap)
        gemb[k] += inv_n * (-g_an * 2.0 * diff_an)
    grads = backward_batch(model, cache, gemb)
    return total * inv_n, grads, mined


def _crop_stack(crops: Sequence[Crop]) -> np.ndarray:
    arrs = []
    for c in crops:
        px = np.asarray(c.pixels, dtype=np.float64)
        arrs.append(px.mean(axis=2) if px.ndim == 3 else px)
    return np.stack(arrs)


def _flatten_triplet_batch(batch: TripletBatch):
    crops = _crop_stack(list(batch.anchors) + list(batch.positives)
                        + list(batch.negatives))
    tids = (list(batch.anchor_tracklet_ids) * 2) + list(batch.negative_tracklet_ids)
    vids = (list(batch.anchor_video_ids) * 2) + list(batch.negative_video_ids)
    return crops, tids, vids


def validation_loss(model: EmbedderModel, val_crops: Sequence[Crop],
                    val_labels: Sequence) -> float:
    """Mean batch-hard RTL over the whole validation set as one batch.

    Labels group the crops (identities when known); groups double as videos
    so negatives come from any other group.
    """
    emb = embed_crops(model, val_crops)
    if not np.isfinite(emb).all():
        raise RuntimeError("non-finite embeddings in validation set")
    mined = batch_hard_mine(emb, list(val_labels), list(val_labels))
    return float(np.mean([rtl_loss(m.hardest_positive_dist,
                                   m.hardest_negative_dist) for m in mined]))


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float   # nan for the pre-training snapshot row
    val_loss: float
    is_pocket: bool = False


@dataclass
class TrainResult:
    model: EmbedderModel
    log: list[TrainLogRow]
    pocket_epoch: int


def train(batches, val_set, cfg: TrainConfig,
          model: EmbedderModel | None = None,
          embedder_config: EmbedderConfig | None = None) -> TrainResult:
    """SGD with weight decay on mean batch-hard RTL, pocket model selection.

    Args:
        batches: a sequence of TripletBatch reused every epoch, or a callable
            epoch -> sequence producing fresh batches.
        val_set: (crops, labels) pair evaluated after every epoch; the
            returned model is the snapshot with the lowest validation loss
            (the untrained epoch-0 snapshot included).
        cfg: optimisation settings.
        model: starting parameters; freshly initialised when omitted.

    Raises:
        RuntimeError: when a batch produces a non-finite loss.
    """
    if model is None:
        model = init_model(embedder_config or EmbedderConfig(), cfg.rng_seed)
    val_crops, val_labels = val_set
    if len(val_crops) == 0:
        raise ValueError("validation set is empty")

    make_batches: Callable[[int], Sequence[TripletBatch]]
    if callable(batches):
        make_batches = batches
    else:
        fixed = list(batches)
        if not fixed and cfg.epochs > 0:
            raise ValueError("no training batches")
        make_batches = lambda epoch: fixed  # noqa: E731

    log: list[TrainLogRow] = []
    pocket = model.copy()
    pocket_val = validation_loss(model, val_crops, val_labels)
    pocket_epoch = 0
    log.append(TrainLogRow(epoch=0, train_loss=float("nan"),
                           val_loss=pocket_val))

    for epoch in range(1, cfg.epochs + 1):
        epoch_losses = []
        for b_idx, batch in enumerate(make_batches(epoch)):
            crops, tids, vids = _flatten_triplet_batch(batch)
            try:
                loss, grads, _ = batch_loss_and_grads(model, crops, tids, vids)
            except RuntimeError as exc:
                raise RuntimeError(
                    f"epoch {epoch}, batch {b_idx}: {exc}") from exc
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} in epoch {epoch}, batch {b_idx}")
            for key in sorted(model.params):
                grad = grads[key] + cfg.weight_decay * model.params[key]
                model.params[key] -= cfg.learning_rate * grad
            epoch_losses.append(loss)
        if not epoch_losses:
            raise ValueError(f"epoch {epoch} produced no batches")
        val = validation_loss(model, val_crops, val_labels)
        row = TrainLogRow(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                          val_loss=val)
        log.append(row)
        if val < pocket_val:
            pocket = model.copy()
            pocket_val = val
            pocket_epoch = epoch

    for row in log:
        row.is_pocket = row.epoch == pocket_epoch
    return TrainResult(model=pocket, log=log, pocket_epoch=pocket_epoch)


def log_to_csv(log: Sequence[TrainLogRow]) -> str:
    """epoch, train_loss, val_loss, is_pocket as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss", "is_pocket"])
    for row in log:
        train_s = "" if math.isnan(row.train_loss) else repr(row.train_loss)
        writer.writerow([row.epoch, train_s, repr(row.val_loss),
                         int(row.is_pocket)])
    return buf.getvalue()


def save_model(model: EmbedderModel, path) -> None:
    """Versioned JSON checkpoint: config header plus base64 float64 params."""
    payload = {
        "format": "herdid-embedder",
        "version": 1,
        "config": model.config.to_json(),
        "params": {
            k: {"shape": list(v.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(v, dtype=np.float64).tobytes()).decode()}
            for k, v in model.params.items()
        },
    }
    from pathlib import Path

    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_model(path) -> EmbedderModel:
    from pathlib import Path

    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "herdid-embedder" or payload.get("version") != 1:
        raise ValueError("unrecognised checkpoint format")
    config = EmbedderConfig.from_json(payload["config"])
    params = {}
    for k, spec in payload["params"].items():
        arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=np.float64)
        params[k] = arr.reshape(spec["shape"]).copy()
    return EmbedderModel(config=config, params=params)
