"""Word-to-image attention scorer, contrastive loss, gradients and training.

The scorer projects a word feature and every pixel of an image grid into a
shared space with one affine map per modality, L2-normalises both, and takes
the dot product of the word with each pixel as the attention weight. The
similarity is the largest weight mapped affinely from [-1, 1] to [0, 100].
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, FormatError, InsufficientPool, ZeroVector
from .pairs import MinedPairSet, TrainingBundle, sample_bundle, validation_triplets

log = logging.getLogger(__name__)

MAT_MAGIC = b"MAT1"
S_MAX = 100.0
_HALF = S_MAX / 2.0


@dataclass
class ModelParams:
    W_a: np.ndarray  # (d_emb, d_aud)
    b_a: np.ndarray  # (d_emb,)
    W_v: np.ndarray  # (d_emb, d_pix)
    b_v: np.ndarray  # (d_emb,)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        e = self.W_a.shape[0]
        if self.W_v.shape[0] != e or self.b_a.shape != (e,) or self.b_v.shape != (e,):
            raise DimensionMismatch("inconsistent parameter shapes")
        if not all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self)):
            raise ValueError("parameters must be finite")

    @property
    def d_aud(self) -> int:
        return self.W_a.shape[1]

    @property
    def d_pix(self) -> int:
        return self.W_v.shape[1]

    @property
    def d_emb(self) -> int:
        return self.W_a.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W_a, self.b_a, self.W_v, self.b_v]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        out, k = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[k:k + a.size]).reshape(a.shape))
            k += a.size
        return ModelParams(*out)


def init_params(d_aud: int, d_pix: int, d_emb: int, seed: int = 0, scale: float = 1.0) -> ModelParams:
    """Gaussian weights with std ``scale / sqrt(fan_in)`` and zero biases."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        rng.normal(0.0, scale / np.sqrt(d_aud), size=(d_emb, d_aud)),
        np.zeros(d_emb),
        rng.normal(0.0, scale / np.sqrt(d_pix), size=(d_emb, d_pix)),
        np.zeros(d_emb),
    )


def orthogonal_params(d_aud: int, d_pix: int, d_emb: int) -> ModelParams:
    """Every word projects to e0 and every pixel to e1, so every score is 50."""
    if d_emb < 2:
        raise ValueError("need d_emb >= 2 for orthogonal projections")
    b_a = np.zeros(d_emb)
    b_v = np.zeros(d_emb)
    b_a[0] = 1.0
    b_v[1] = 1.0
    return ModelParams(np.zeros((d_emb, d_aud)), b_a, np.zeros((d_emb, d_pix)), b_v)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _project(W, b, X, what):
    if X.shape[-1] != W.shape[1]:
        raise DimensionMismatch(f"{what} features have dim {X.shape[-1]}, expected {W.shape[1]}")
    Z = X @ W.T + b
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector(f"a projected {what} vector has zero norm")
    return Z / norms, norms


@dataclass(frozen=True)
class AttentionOutput:
    weights: np.ndarray
    argmax_pixel: tuple[int, int]
    S: float


def attend(params: ModelParams, word, grid) -> AttentionOutput:
    word = np.asarray(getattr(word, "vector", word), dtype=np.float64)
    grid = np.asarray(getattr(grid, "grid", grid), dtype=np.float64)
    if grid.ndim != 3:
        raise DimensionMismatch("grid must be (H, W, d_pix)")
    ya, _ = _project(params.W_a, params.b_a, word[None, :], "word")
    h, w, d = grid.shape
    yv, _ = _project(params.W_v, params.b_v, grid.reshape(h * w, d), "pixel")
    a = yv @ ya[0]
    k = int(np.argmax(a))  # first maximum = row-major tie-break
    return AttentionOutput(a.reshape(h, w), (k // w, k % w), float((a[k] + 1.0) * _HALF))


class _Encoded:
    """Projected words and pixels for a batch, plus what backprop needs."""

    def __init__(self, params: ModelParams, words: np.ndarray, grids: Sequence[np.ndarray]):
        words = np.atleast_2d(np.asarray(words, dtype=np.float64))
        flat = []
        for g in grids:
            g = np.asarray(g, dtype=np.float64)
            if g.ndim != 3:
                raise DimensionMismatch("grid must be (H, W, d_pix)")
            flat.append(g.reshape(-1, g.shape[-1]))
        self.sizes = np.array([f.shape[0] for f in flat])
        self.offsets = np.concatenate(([0], np.cumsum(self.sizes)[:-1]))
        self.X_a = words
        self.X_v = np.concatenate(flat) if flat else np.empty((0, params.d_pix))
        self.Y_a, self.n_a = _project(params.W_a, params.b_a, self.X_a, "word")
        self.Y_v, self.n_v = _project(params.W_v, params.b_v, self.X_v, "pixel")

    def scores(self, ai: np.ndarray, vi: np.ndarray):
        """Similarity and global argmax-pixel row for each (word, grid) pair."""
        ai = np.asarray(ai, dtype=np.int64)
        vi = np.asarray(vi, dtype=np.int64)
        sims = self.Y_v @ self.Y_a.T  # (pixels, words)
        width = int(self.sizes.max())
        rows = self.offsets[vi][:, None] + np.arange(width)[None, :]
        valid = np.arange(width)[None, :] < self.sizes[vi][:, None]
        rows = np.where(valid, rows, 0)
        vals = np.where(valid, sims[rows, ai[:, None]], -np.inf)
        k = np.argmax(vals, axis=1)
        best_row = rows[np.arange(len(ai)), k]
        best = vals[np.arange(len(ai)), k]
        return (best + 1.0) * _HALF, best_row


def score_matrix(params: ModelParams, words, grids: Sequence[np.ndarray]) -> np.ndarray:
    """``S[i, j]`` for every word row ``i`` and grid ``j``."""
    enc = _Encoded(params, words, grids)
    sims = enc.Y_v @ enc.Y_a.T
    out = np.empty((enc.Y_a.shape[0], len(grids)))
    for j, (o, s) in enumerate(zip(enc.offsets, enc.sizes)):
        out[:, j] = sims[o:o + s].max(axis=0)
    return (out + 1.0) * _HALF


# ---------------------------------------------------------------------------
# contrastive objective
# ---------------------------------------------------------------------------


@dataclass
class BundleTensors:
    """Numeric form of a bundle.

    ``audio`` rows: anchor, ``n_pos`` positives, ``n_neg`` negatives.
    ``grids``: anchor, positives, negatives, then ``n_neg`` background images.
    """

    audio: np.ndarray
    grids: list
    n_pos: int
    n_neg: int

    def __post_init__(self):
        if self.audio.shape[0] != 1 + self.n_pos + self.n_neg:
            raise ValueError("audio rows do not match n_pos / n_neg")
        if len(self.grids) != 1 + self.n_pos + 2 * self.n_neg:
            raise ValueError("grid count does not match n_pos / n_neg")

    @classmethod
    def from_bundle(
        cls,
        bundle: TrainingBundle,
        words: Mapping[str, np.ndarray],
        grids: Mapping[str, np.ndarray],
    ) -> "BundleTensors":
        if len(bundle.background_image_ids) != len(bundle.negatives):
            raise ValueError("need one background image per negative")
        items = (bundle.anchor, *bundle.positives, *bundle.negatives)
        audio = np.stack([np.asarray(words[p.word_id], dtype=np.float64) for p in items])
        gs = [grids[p.image_id] for p in items] + [grids[i] for i in bundle.background_image_ids]
        return cls(audio, gs, len(bundle.positives), len(bundle.negatives))


def loss_terms(n_pos: int, n_neg: int):
    """Index layout of every score in the objective.

    Returns ``(audio_idx, grid_idx, target, weight)`` arrays. Each bracketed
    list of scores is averaged, so its members share weight 1/len(list).
    """
    ai, vi, tgt, wt = [0], [0], [S_MAX], [1.0]
    for i in range(n_neg):
        ai += [1 + n_pos + i, 0, 0]
        vi += [0, 1 + n_pos + i, 1 + n_pos + n_neg + i]
        tgt += [0.0, 0.0, 0.0]
        wt += [1 / 3, 1 / 3, 1 / 3]
    for i in range(n_pos):
        ai += [0, 1 + i]
        vi += [1 + i, 0]
        tgt += [S_MAX, S_MAX]
        wt += [0.5, 0.5]
    return np.array(ai), np.array(vi), np.array(tgt), np.array(wt)


def loss(params: ModelParams, bundle: BundleTensors) -> float:
    enc = _Encoded(params, bundle.audio, bundle.grids)
    ai, vi, tgt, wt = loss_terms(bundle.n_pos, bundle.n_neg)
    S, _ = enc.scores(ai, vi)
    return float(np.sum(wt * (S - tgt) ** 2))


def loss_and_gradient(params: ModelParams, bundle: BundleTensors) -> tuple[float, ModelParams]:
    enc = _Encoded(params, bundle.audio, bundle.grids)
    ai, vi, tgt, wt = loss_terms(bundle.n_pos, bundle.n_neg)
    S, rows = enc.scores(ai, vi)
    value = float(np.sum(wt * (S - tgt) ** 2))

    dS = 2.0 * wt * (S - tgt) * _HALF  # dL/d(max weight)
    gYa = np.zeros_like(enc.Y_a)
    gYv = np.zeros_like(enc.Y_v)
    np.add.at(gYa, ai, dS[:, None] * enc.Y_v[rows])
    np.add.at(gYv, rows, dS[:, None] * enc.Y_a[ai])

    # through y = z / |z|
    gZa = (gYa - enc.Y_a * np.sum(enc.Y_a * gYa, axis=1, keepdims=True)) / enc.n_a
    gZv = (gYv - enc.Y_v * np.sum(enc.Y_v * gYv, axis=1, keepdims=True)) / enc.n_v
    grad = ModelParams(gZa.T @ enc.X_a, gZa.sum(axis=0), gZv.T @ enc.X_v, gZv.sum(axis=0))
    return value, grad


def loss_gradient(params: ModelParams, bundle: BundleTensors) -> ModelParams:
    return loss_and_gradient(params, bundle)[1]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: ModelParams, grad: ModelParams) -> ModelParams:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = []
        for k, (p, g) in enumerate(zip(params.arrays(), grad.arrays())):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            new.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return ModelParams(*new)


def triplet_scores(params: ModelParams, dev) -> tuple[np.ndarray, np.ndarray]:
    """``(S(word, positive), S(word, negative))`` for each dev triplet."""
    dev = list(dev)
    if not dev:
        raise EmptyInput("validation set is empty")
    words = np.stack([np.asarray(w, dtype=np.float64) for w, _, _ in dev])
    grids = [g for _, p, n in dev for g in (p, n)]
    enc = _Encoded(params, words, grids)
    idx = np.arange(len(dev))
    S, _ = enc.scores(np.repeat(idx, 2), np.arange(2 * len(dev)))
    return S[0::2], S[1::2]


def validate_triplets(params: ModelParams, dev) -> float:
    """Fraction of triplets whose positive strictly outscores the negative."""
    pos, neg = triplet_scores(params, dev)
    return float(np.mean(pos > neg))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    n_pos: int = 5
    n_neg: int = 11
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    initial_validation: float = 0.0
    initial_margin: float = 0.0
    best_epoch: int = 0
    stopped_early: bool = False

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "initial_validation": self.initial_validation,
            "initial_margin": self.initial_margin,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


def _dev_arrays(pairs, words, grids, seed):
    return [(words[w], grids[p], grids[n]) for w, p, n in validation_triplets(pairs, seed)]


def train(
    params_init: ModelParams,
    pairs: MinedPairSet,
    words: Mapping[str, np.ndarray],
    grids: Mapping[str, np.ndarray],
    config: TrainConfig = TrainConfig(),
) -> tuple[ModelParams, TrainHistory]:
    """Adam on one bundle per step; keep the best parameters on validation.

    Model selection compares (triplet accuracy, mean S margin) so saturated
    accuracy still prefers better-separated parameters. Training stops after
    ``patience`` epochs without improvement.
    """
    train_pairs = pairs.train
    if not train_pairs or not pairs.validation:
        raise EmptyInput("need non-empty train and validation splits")
    dev = _dev_arrays(pairs, words, grids, config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Adam(params_init, lr=config.lr)
    params = params_init.copy()

    def evaluate(p):
        pos, neg = triplet_scores(p, dev)
        return float(np.mean(pos > neg)), float(np.mean(pos - neg))

    acc, margin = evaluate(params)
    hist = TrainHistory(initial_validation=acc, initial_margin=margin)
    best_key, best = (acc, margin), params.copy()
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_pairs))
        seeds = rng.integers(0, 2**63 - 1, size=len(order))
        total = 0.0
        for step, (idx, s) in enumerate(zip(order, seeds)):
            try:
                bundle = sample_bundle(pairs, int(idx), config.n_pos, config.n_neg, int(s))
            except InsufficientPool as exc:
                raise InsufficientPool(f"epoch {epoch} step {step}: {exc}", side=exc.side) from exc
            value, grad = loss_and_gradient(params, BundleTensors.from_bundle(bundle, words, grids))
            total += value
            params = opt.step(params, grad)
        acc, margin = evaluate(params)
        hist.epochs.append({"epoch": epoch, "loss": total / len(order), "validation": acc, "margin": margin})
        if (acc, margin) > best_key:
            best_key, best = (acc, margin), params.copy()
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                hist.stopped_early = True
                log.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
                break
    return best, hist


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, history: TrainHistory | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAT_MAGIC)
        fh.write(struct.pack("<III", params.d_aud, params.d_pix, params.d_emb))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    if history is not None:
        with open(str(path) + ".history.json", "w", encoding="utf-8") as fh:
            json.dump(history.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    d_aud, d_pix, d_emb = struct.unpack_from("<III", data, 4)
    shapes = [(d_emb, d_aud), (d_emb,), (d_emb, d_pix), (d_emb,)]
    need = sum(int(np.prod(s)) for s in shapes) * 4
    body = data[16:]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} parameter bytes, found {len(body)}")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64)
    out, k = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(vals[k:k + size].reshape(s))
        k += size
    return ModelParams(*out)
