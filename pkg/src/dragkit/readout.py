"""Appearance readout head over multi-scale denoiser features.

Each feature layer goes through a linear bottleneck to a common channel
width, gets a projected timestep embedding added, is bilinearly upsampled
to the finest layer's resolution, and the layers are combined by learned
scalar weights. The head trains with a cosine-distance triplet loss and
supplies the appearance-guidance term (squared embedding distance to the
pre-drag reference) with exact gradients back to the latent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .fields import (
    FeatureField,
    LatentField,
    resize_bilinear,
    resize_bilinear_adjoint,
    sample_bilinear_many,
)
from .toydiffusion import ToyDenoiser, extract_features, features_pullback

TIME_BASIS_DIM = 8
COSINE_EPS = 1e-12


def time_basis(t: int, dim: int = TIME_BASIS_DIM) -> np.ndarray:
    """Fixed sinusoidal encoding of a timestep index."""
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class ReadoutHead:
    """Learnable parameters of the aggregation head."""

    bottlenecks: list  # L arrays of shape (width, C)
    time_proj: np.ndarray  # (width, TIME_BASIS_DIM)
    agg_weights: np.ndarray  # (L,)
    margin: float = 0.3

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ConfigurationError("margin must be > 0")
        widths = {w.shape[0] for w in self.bottlenecks}
        if len(widths) != 1 or self.time_proj.shape[0] not in widths:
            raise ConfigurationError("bottlenecks and time_proj must share one width")
        if self.agg_weights.shape != (len(self.bottlenecks),):
            raise ConfigurationError("one aggregation weight per layer is required")
        if not all(
            np.all(np.isfinite(p))
            for p in (*self.bottlenecks, self.time_proj, self.agg_weights)
        ):
            raise ConfigurationError("head parameters must be finite")

    @property
    def width(self) -> int:
        return self.bottlenecks[0].shape[0]

    @property
    def layer_count(self) -> int:
        return len(self.bottlenecks)

    def copy(self) -> "ReadoutHead":
        return ReadoutHead(
            bottlenecks=[w.copy() for w in self.bottlenecks],
            time_proj=self.time_proj.copy(),
            agg_weights=self.agg_weights.copy(),
            margin=self.margin,
        )

    @classmethod
    def create(
        cls,
        layer_channels: Sequence[int],
        width: int = 6,
        margin: float = 0.3,
        rng: Optional[np.random.Generator] = None,
    ) -> "ReadoutHead":
        rng = rng or np.random.default_rng(0)
        bottlenecks = [
            rng.standard_normal((width, c)) / np.sqrt(c) for c in layer_channels
        ]
        time_proj = 0.01 * rng.standard_normal((width, TIME_BASIS_DIM))
        return cls(
            bottlenecks=bottlenecks,
            time_proj=time_proj,
            agg_weights=np.ones(len(layer_channels)),
            margin=margin,
        )


@dataclass(frozen=True)
class TripletBatch:
    """Anchor / positive / negative feature triple at one timestep."""

    anchor: FeatureField
    positive: FeatureField
    negative: FeatureField

    def __post_init__(self) -> None:
        shapes = [tuple(l.shape for l in f.layers) for f in (self.anchor, self.positive, self.negative)]
        if shapes[0] != shapes[1] or shapes[0] != shapes[2]:
            raise InvalidInputError("triplet members must share layer shapes")


def _layer_terms(features: FeatureField, t: int, head: ReadoutHead):
    """Per-layer upsampled bottleneck outputs (before aggregation weights)."""
    if len(features.layers) != head.layer_count:
        raise ConfigurationError(
            f"head expects {head.layer_count} layers, features have {len(features.layers)}"
        )
    h0, w0 = features.layers[0].shape[1:]
    emb = np.sum(head.time_proj * time_basis(t), axis=1)
    terms = []
    for w_mat, layer in zip(head.bottlenecks, features.layers):
        y = np.einsum("oc,chw->ohw", w_mat, layer) + emb[:, None, None]
        terms.append(resize_bilinear(y, h0, w0))
    return terms


def readout_forward(features: FeatureField, t: int, head: ReadoutHead) -> np.ndarray:
    """Embedding grid (width, H0, W0) aggregated over all layers."""
    terms = _layer_terms(features, t, head)
    out = np.zeros_like(terms[0])
    for weight, term in zip(head.agg_weights, terms):
        out += weight * term
    return out


@dataclass
class HeadGradients:
    bottlenecks: list
    time_proj: np.ndarray
    agg_weights: np.ndarray

    def scaled(self, c: float) -> "HeadGradients":
        return HeadGradients(
            [w * c for w in self.bottlenecks], self.time_proj * c, self.agg_weights * c
        )

    def add_(self, other: "HeadGradients") -> None:
        for mine, theirs in zip(self.bottlenecks, other.bottlenecks):
            mine += theirs
        self.time_proj += other.time_proj
        self.agg_weights += other.agg_weights

    @classmethod
    def zeros_like(cls, head: ReadoutHead) -> "HeadGradients":
        return cls(
            [np.zeros_like(w) for w in head.bottlenecks],
            np.zeros_like(head.time_proj),
            np.zeros_like(head.agg_weights),
        )


def readout_pullback(
    features: FeatureField,
    t: int,
    head: ReadoutHead,
    grad_out: np.ndarray,
    want_params: bool = True,
    want_layers: bool = False,
):
    """Adjoint of readout_forward for one embedding gradient.

    Returns (HeadGradients or None, list of per-layer feature grads or None).
    """
    basis = time_basis(t)
    params = HeadGradients.zeros_like(head) if want_params else None
    layer_grads = [] if want_layers else None
    terms = _layer_terms(features, t, head) if want_params else None
    emb_grad_total = np.zeros(head.width)
    for idx, (w_mat, layer) in enumerate(zip(head.bottlenecks, features.layers)):
        g = head.agg_weights[idx] * resize_bilinear_adjoint(
            grad_out, layer.shape[1], layer.shape[2]
        )
        if want_params:
            params.agg_weights[idx] = np.sum(grad_out * terms[idx])
            params.bottlenecks[idx] = np.einsum("ohw,chw->oc", g, layer)
            emb_grad_total += g.sum(axis=(1, 2))
        if want_layers:
            layer_grads.append(np.einsum("oc,ohw->chw", w_mat, g))
    if want_params:
        params.time_proj = np.outer(emb_grad_total, basis)
    return params, layer_grads


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity with epsilon-guarded norms."""
    u = u.ravel()
    v = v.ravel()
    nu = np.linalg.norm(u) + COSINE_EPS
    nv = np.linalg.norm(v) + COSINE_EPS
    return float(1.0 - np.sum(u * v) / (nu * nv))


def _cosine_distance_grads(u: np.ndarray, v: np.ndarray):
    """Gradients of cosine_distance with respect to both (flattened) args."""
    uf = u.ravel()
    vf = v.ravel()
    raw_nu = np.linalg.norm(uf)
    raw_nv = np.linalg.norm(vf)
    nu = raw_nu + COSINE_EPS
    nv = raw_nv + COSINE_EPS
    dot = float(np.sum(uf * vf))
    du = -(vf / (nu * nv))
    dv = -(uf / (nu * nv))
    if raw_nu > 0:
        du += dot * uf / (raw_nu * nu * nu * nv)
    if raw_nv > 0:
        dv += dot * vf / (raw_nv * nv * nv * nu)
    return du.reshape(u.shape), dv.reshape(v.shape)


def triplet_loss(batch: TripletBatch, head: ReadoutHead, delta: float) -> float:
    """max(0, D(F(a), F(p)) - D(F(a), F(n)) + delta) at the batch timestep."""
    if delta <= 0:
        raise InvalidInputError("delta must be > 0")
    t = batch.anchor.timestep
    ea = readout_forward(batch.anchor, t, head)
    ep = readout_forward(batch.positive, t, head)
    en = readout_forward(batch.negative, t, head)
    return max(0.0, cosine_distance(ea, ep) - cosine_distance(ea, en) + delta)


def _triplet_loss_and_grad(batch: TripletBatch, head: ReadoutHead, delta: float):
    t = batch.anchor.timestep
    ea = readout_forward(batch.anchor, t, head)
    ep = readout_forward(batch.positive, t, head)
    en = readout_forward(batch.negative, t, head)
    value = cosine_distance(ea, ep) - cosine_distance(ea, en) + delta
    grads = HeadGradients.zeros_like(head)
    if value <= 0.0:
        return 0.0, grads
    dap_da, dap_dp = _cosine_distance_grads(ea, ep)
    dan_da, dan_dn = _cosine_distance_grads(ea, en)
    for feats, grad_out in (
        (batch.anchor, dap_da - dan_da),
        (batch.positive, dap_dp),
        (batch.negative, -dan_dn),
    ):
        params, _ = readout_pullback(feats, t, head, grad_out, want_params=True)
        grads.add_(params)
    return value, grads


def mean_triplet_loss(dataset: Sequence[TripletBatch], head: ReadoutHead, delta=None) -> float:
    delta = head.margin if delta is None else delta
    return float(np.mean([triplet_loss(b, head, delta) for b in dataset]))


class _StackedTriplets:
    """Dataset flattened into per-layer arrays for vectorized training.

    Items are ordered anchor block, positive block, negative block, so
    member m of triplet n sits at row m * count + n.
    """

    def __init__(self, dataset: Sequence[TripletBatch]):
        shapes = tuple(l.shape for l in dataset[0].anchor.layers)
        for batch in dataset:
            for member in (batch.anchor, batch.positive, batch.negative):
                if tuple(l.shape for l in member.layers) != shapes:
                    raise InvalidInputError("training dataset must share layer shapes")
        self.count = len(dataset)
        members = (
            [b.anchor for b in dataset]
            + [b.positive for b in dataset]
            + [b.negative for b in dataset]
        )
        self.layers = [
            np.stack([m.layers[l] for m in members]) for l in range(len(shapes))
        ]
        self.basis = np.stack([time_basis(m.timestep) for m in members])

    def embeddings(self, head: ReadoutHead, keep_terms: bool = False):
        h0, w0 = self.layers[0].shape[2:]
        emb = np.einsum("ne,oe->no", self.basis, head.time_proj)
        out = None
        terms = [] if keep_terms else None
        for w_mat, layer, weight in zip(head.bottlenecks, self.layers, head.agg_weights):
            y = np.einsum("oc,nchw->nohw", w_mat, layer) + emb[:, :, None, None]
            y = resize_bilinear(y, h0, w0)
            if keep_terms:
                terms.append(y)
            out = weight * y if out is None else out + weight * y
        return out, terms

    def loss_and_grad(self, head: ReadoutHead, delta: float, want_grad: bool = True):
        emb, terms = self.embeddings(head, keep_terms=want_grad)
        n = self.count
        flat = emb.reshape(3 * n, -1)
        norms = np.linalg.norm(flat, axis=1)
        guarded = norms + COSINE_EPS
        a, p, ng = flat[:n], flat[n : 2 * n], flat[2 * n :]
        dot_ap = np.einsum("ij,ij->i", a, p)
        dot_an = np.einsum("ij,ij->i", a, ng)
        sim_ap = dot_ap / (guarded[:n] * guarded[n : 2 * n])
        sim_an = dot_an / (guarded[:n] * guarded[2 * n :])
        values = sim_an - sim_ap + delta  # D_ap - D_an + delta
        active = values > 0
        loss = float(np.sum(values[active])) / n
        if not want_grad:
            return loss, None
        grad_flat = np.zeros_like(flat)
        if active.any():
            act = np.nonzero(active)[0]

            def norm_dir(block, idx):
                d = np.zeros((idx.size, flat.shape[1]))
                nz = norms[block * n + idx] > 0
                d[nz] = flat[block * n + idx[nz]] / norms[block * n + idx[nz], None]
                return d

            na, np_, nn = guarded[act], guarded[n + act], guarded[2 * n + act]
            # d(D_ap)/d a = -p/(na np) + dot_ap * a_hat / (na^2 np)
            da = (
                -p[act] / (na * np_)[:, None]
                + (dot_ap[act] / (na * na * np_))[:, None] * norm_dir(0, act)
                + ng[act] / (na * nn)[:, None]
                - (dot_an[act] / (na * na * nn))[:, None] * norm_dir(0, act)
            )
            dp = (
                -a[act] / (na * np_)[:, None]
                + (dot_ap[act] / (np_ * np_ * na))[:, None] * norm_dir(1, act)
            )
            dn = (
                a[act] / (na * nn)[:, None]
                - (dot_an[act] / (nn * nn * na))[:, None] * norm_dir(2, act)
            )
            grad_flat[act] = da / n
            grad_flat[n + act] = dp / n
            grad_flat[2 * n + act] = dn / n
        grad_emb = grad_flat.reshape(emb.shape)
        grads = HeadGradients.zeros_like(head)
        emb_grad_rows = np.zeros((3 * n, head.width))
        for idx, (w_mat, layer) in enumerate(zip(head.bottlenecks, self.layers)):
            g = head.agg_weights[idx] * resize_bilinear_adjoint(
                grad_emb, layer.shape[2], layer.shape[3]
            )
            grads.agg_weights[idx] = np.sum(grad_emb * terms[idx])
            grads.bottlenecks[idx] = np.einsum("nohw,nchw->oc", g, layer)
            emb_grad_rows += g.sum(axis=(2, 3))
        grads.time_proj = np.einsum("no,ne->oe", emb_grad_rows, self.basis)
        return loss, grads


def train_readout(
    dataset: Sequence[TripletBatch],
    head: ReadoutHead,
    steps: int = 500,
    learning_rate: float = 1e-2,
) -> ReadoutHead:
    """Full-batch gradient descent on the mean triplet loss.

    Each step backtracks the learning rate until the loss does not
    increase, so the loss trace is non-increasing. Returns a new head;
    the input head is untouched.
    """
    if len(dataset) == 0:
        raise InvalidInputError("training dataset must not be empty")
    head = head.copy()
    delta = head.margin
    stacked = _StackedTriplets(dataset)
    current, _ = stacked.loss_and_grad(head, delta, want_grad=False)
    if not np.isfinite(current):
        raise TrainingDivergedError(f"non-finite initial loss {current}")
    step_size = learning_rate
    for _ in range(steps):
        if current == 0.0:
            break
        _, grads = stacked.loss_and_grad(head, delta)
        lr = min(learning_rate, 2.0 * step_size)
        improved = False
        for _ in range(30):
            trial = head.copy()
            for w, gw in zip(trial.bottlenecks, grads.bottlenecks):
                w -= lr * gw
            trial.time_proj -= lr * grads.time_proj
            trial.agg_weights -= lr * grads.agg_weights
            trial_loss, _ = stacked.loss_and_grad(trial, delta, want_grad=False)
            if not np.isfinite(trial_loss):
                raise TrainingDivergedError(f"non-finite loss {trial_loss}")
            if trial_loss <= current:
                head, current, improved = trial, trial_loss, True
                step_size = lr
                break
            lr *= 0.5
        if not improved:
            break  # flat hinge plateau; smaller steps cannot help
    return head


def normalize_embedding_scale(
    head: ReadoutHead, reference: Sequence[FeatureField], target_rms: float = 1.0
) -> ReadoutHead:
    """Rescale head parameters so reference embeddings have a known RMS.

    Cosine-distance training leaves the embedding scale free; pinning it
    makes the guidance weight meaningful across trained heads.
    """
    if len(reference) == 0:
        raise InvalidInputError("need at least one reference feature field")
    rms = np.sqrt(
        np.mean(
            [np.mean(readout_forward(f, f.timestep, head) ** 2) for f in reference]
        )
    )
    if rms <= 0:
        raise ConfigurationError("reference embeddings have zero energy")
    scale = target_rms / rms
    out = head.copy()
    for w in out.bottlenecks:
        w *= scale
    out.time_proj *= scale
    return out


def rg_loss(
    current: LatentField,
    reference_embedding: np.ndarray,
    head: ReadoutHead,
    denoiser: ToyDenoiser,
):
    """Squared embedding distance to the reference with its latent gradient."""
    feats = extract_features(current, denoiser)
    emb = readout_forward(feats, current.timestep, head)
    if emb.shape != reference_embedding.shape:
        raise InvalidInputError(
            f"embedding {emb.shape} does not match reference {reference_embedding.shape}"
        )
    diff = emb - reference_embedding
    loss = float(np.sum(diff * diff))
    _, layer_grads = readout_pullback(
        feats, current.timestep, head, 2.0 * diff, want_params=False, want_layers=True
    )
    grad = features_pullback(layer_grads, current.values.shape, denoiser)
    return loss, grad


def _local_translation(anchor: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Backward-warp a random local region of the anchor by about a cell.

    Mimics what a drag edit does to the latent, so trained heads tolerate
    content moves while still flagging recoloring.
    """
    c, h, w = anchor.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
    radius = rng.uniform(1.5, 3.0)
    bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * radius**2))
    angle = rng.uniform(0, 2 * np.pi)
    dx, dy = np.cos(angle), np.sin(angle)
    src_x = np.clip(xs - bump * dx, 0, w - 1)
    src_y = np.clip(ys - bump * dy, 0, h - 1)
    out = np.empty_like(anchor)
    for ch in range(c):
        out[ch] = sample_bilinear_many(anchor[ch], src_x.ravel(), src_y.ravel()).reshape(h, w)
    return out


def synthetic_triplets(
    count: int,
    denoiser: ToyDenoiser,
    timestep: int,
    rng: np.random.Generator,
    shape: tuple = (4, 16, 16),
) -> list:
    """Synthetic training data: positives are small local-translation
    warps of the anchor (appearance preserved), negatives are channel-wise
    affine recolorings (appearance perturbed, structure kept)."""
    triplets = []
    for _ in range(count):
        anchor = denoiser.smooth(rng.standard_normal(shape), 1.0)
        positive = _local_translation(anchor, rng)
        # recoloring stays far from the identity: every channel scale is
        # bounded away from 1, offsets away from 0, and the two
        # highest-energy channels are inverted
        signs = np.where(rng.random(shape[0]) < 0.5, -1.0, 1.0)
        energy_order = np.argsort(np.sqrt((anchor**2).mean(axis=(1, 2))))
        signs[energy_order[-2:]] = -1.0
        scales = (signs * rng.uniform(0.6, 1.6, size=shape[0]))[:, None, None]
        offsets = (
            rng.choice([-1.0, 1.0], size=shape[0]) * rng.uniform(0.4, 1.0, size=shape[0])
        )[:, None, None]
        negative = anchor * scales + offsets
        triplets.append(
            TripletBatch(
                anchor=extract_features(LatentField(anchor, timestep), denoiser),
                positive=extract_features(LatentField(positive, timestep), denoiser),
                negative=extract_features(LatentField(negative, timestep), denoiser),
            )
        )
    return triplets


HEAD_FORMAT_VERSION = 1


def save_head(head: ReadoutHead, path) -> None:
    """Persist head parameters as a versioned .npz file."""
    arrays = {
        "format_version": np.array(HEAD_FORMAT_VERSION),
        "margin": np.array(head.margin),
        "time_proj": head.time_proj,
        "agg_weights": head.agg_weights,
        "layer_count": np.array(head.layer_count),
    }
    for idx, w in enumerate(head.bottlenecks):
        arrays[f"bottleneck_{idx}"] = w
    np.savez(path, **arrays)


def load_head(path) -> ReadoutHead:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != HEAD_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported head file version {version}")
        count = int(data["layer_count"])
        return ReadoutHead(
            bottlenecks=[data[f"bottleneck_{i}"] for i in range(count)],
            time_proj=data["time_proj"],
            agg_weights=data["agg_weights"],
            margin=float(data["margin"]),
        )
