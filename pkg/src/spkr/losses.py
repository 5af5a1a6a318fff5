"""Margin-softmax losses, their analytic gradients, and the learning-rate
and margin schedulers, plus a small classification-head trainer that
exercises both schedules end to end.

Everything here is double precision and pure; the gradients include the
Jacobians of the embedding and weight-row normalizations.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import apply_flat

KINDS = ("softmax", "a_softmax", "am_softmax", "aam_softmax")

_SIN_FLOOR = 1e-12


@dataclass
class SchedulerConfig:
    """All knobs of the warmup/exponential-descent LR schedule and the
    three-stage margin ramp."""

    T: int = 1000
    T_warm: int = 0
    eta0: float = 0.1
    etaT: float = 1e-4
    T1: int = 0
    T2: int = 0
    M: float = 0.2
    ramp: str = "linear"  # or "logarithmic"

    def validate(self):
        if not 0 <= self.T_warm <= self.T:
            raise ValueError("need 0 <= T_warm <= T")
        if not 0 <= self.T1 <= self.T2 <= self.T:
            raise ValueError("need 0 <= T1 <= T2 <= T")
        if self.eta0 <= 0 or self.etaT <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.M < 1.0:
            raise ValueError("final margin must be in [0, 1)")
        if self.ramp not in ("linear", "logarithmic"):
            raise ValueError(f"unknown ramp {self.ramp!r}")
        return self

    @classmethod
    def from_flat(cls, flat: dict, consumed: set) -> "SchedulerConfig":
        cfg = cls()
        apply_flat(cfg, flat, consumed)
        return cfg.validate()


@dataclass
class MarginLossConfig:
    kind: str = "aam_softmax"
    scale: float = 32.0
    margin: float = 0.2
    num_classes: int = 2
    embed_dim: int = 512

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.kind == "a_softmax":
            if self.margin != int(self.margin) or self.margin < 1:
                raise ValueError("a_softmax margin must be an integer >= 1")
        elif self.kind in ("am_softmax", "aam_softmax"):
            if not 0.0 <= self.margin < 1.0:
                raise ValueError("margin must be in [0, 1)")
        return self

    @classmethod
    def from_flat(cls, flat: dict, consumed: set) -> "MarginLossConfig":
        cfg = cls()
        apply_flat(cfg, flat, consumed)
        return cfg.validate()


@dataclass
class HeadParams:
    """Classifier weights; rows are L2-normalized inside the ops, storage
    is unconstrained."""

    W: np.ndarray  # num_classes x embed_dim


@dataclass(frozen=True)
class FineTuneConfig:
    scheduler: SchedulerConfig
    loss: MarginLossConfig
    chunk_frames: int


def lr_schedule(t: int, cfg: SchedulerConfig) -> float:
    """Warmup ramp times exponential descent from eta0 to etaT."""
    if not 0 <= t < cfg.T:
        raise ValueError(f"iteration {t} outside [0, {cfg.T})")
    g = t / cfg.T_warm if t < cfg.T_warm else 1.0
    h = cfg.eta0 * math.exp((t / cfg.T) * math.log(cfg.etaT / cfg.eta0))
    return g * h


def margin_schedule(t: int, cfg: SchedulerConfig) -> float:
    """Three-stage margin: 0, then a ramp rising to M, then constant M."""
    if not 0 <= t < cfg.T:
        raise ValueError(f"iteration {t} outside [0, {cfg.T})")
    if t < cfg.T1:
        return 0.0
    if t >= cfg.T2:
        return cfg.M
    u = (t - cfg.T1) / (cfg.T2 - cfg.T1)
    if cfg.ramp == "linear":
        return cfg.M * u
    return cfg.M * math.log1p((math.e - 1.0) * u)


def lmf_config(sched: SchedulerConfig, loss: MarginLossConfig,
               frame_shift_ms: float = 10.0) -> FineTuneConfig:
    """Large-margin fine-tuning setup: margin pinned at 0.5, 6 s training
    segments, no margin ramp."""
    chunk_frames = int(round(6000.0 / frame_shift_ms))
    return FineTuneConfig(
        scheduler=replace(sched, M=0.5, T1=0, T2=0),
        loss=replace(loss, margin=0.5),
        chunk_frames=chunk_frames,
    )


# ---------------------------------------------------------------------------
# margin logits and gradients


def _target_transform(c: np.ndarray, kind: str, margin: float):
    """Map target-class cosines through the margin penalty.

    Returns (phi(c), dphi/dc); non-target logits are untouched cosines.
    """
    c = np.asarray(c, dtype=np.float64)
    if kind == "softmax":
        return c, np.ones_like(c)
    if kind == "am_softmax":
        return c - margin, np.ones_like(c)
    if kind == "aam_softmax":
        cos_m = math.cos(margin)
        sin_m = math.sin(margin)
        sin_theta = np.sqrt(np.maximum(1.0 - c * c, 0.0))
        rotated = c * cos_m - sin_theta * sin_m
        # cos(theta + m) stops being monotonic past theta = pi - m; fall
        # back to the linear penalty there.
        ok = c > math.cos(math.pi - margin)
        phi = np.where(ok, rotated, c - margin * sin_m)
        if sin_m == 0.0:
            dphi = np.ones_like(c)
        else:
            dphi = np.where(
                ok, cos_m + c * sin_m / np.maximum(sin_theta, _SIN_FLOOR),
                np.ones_like(c),
            )
        return phi, dphi
    if kind == "a_softmax":
        m = int(margin)
        theta = np.arccos(np.clip(c, -1.0, 1.0))
        k = np.minimum(np.floor(m * theta / math.pi), m - 1)
        sign = np.where(k % 2 == 0, 1.0, -1.0)
        phi = sign * np.cos(m * theta) - 2.0 * k
        sin_theta = np.maximum(np.sin(theta), _SIN_FLOOR)
        dphi = sign * m * np.sin(m * theta) / sin_theta
        return phi, dphi
    raise ValueError(f"unknown loss kind {kind!r}")


def _normalize_rows(mat: np.ndarray):
    norms = np.linalg.norm(mat, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm vector cannot be angle-normalized")
    return mat / norms[..., None], norms


def margin_logits(x: np.ndarray, label: int, params: HeadParams,
                  cfg: MarginLossConfig, margin: float | None = None) -> np.ndarray:
    """Scaled cosine logits with the margin penalty applied to the target
    class. Scale-invariant in x by construction."""
    if margin is None:
        margin = cfg.margin
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ValueError("zero-norm embedding")
    x_hat = x / norm
    w_hat, _ = _normalize_rows(np.asarray(params.W, dtype=np.float64))
    cos = w_hat @ x_hat
    logits = cfg.scale * cos
    phi, _ = _target_transform(cos[label:label + 1], cfg.kind, margin)
    logits[label] = cfg.scale * phi[0]
    return logits


def _softmax_ce(logits: np.ndarray, label: int):
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = math.log(total) - shifted[label]
    return loss, exp / total


def loss_and_grad(x: np.ndarray, label: int, params: HeadParams,
                  cfg: MarginLossConfig, margin: float | None = None):
    """Cross-entropy over margin logits with exact gradients.

    Returns (loss, grad wrt x, grad wrt W); the gradients account for the
    normalization of both the embedding and the weight rows.
    """
    if margin is None:
        margin = cfg.margin
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x)
    if r == 0.0:
        raise ValueError("zero-norm embedding")
    x_hat = x / r
    W = np.asarray(params.W, dtype=np.float64)
    w_hat, w_norms = _normalize_rows(W)
    cos = w_hat @ x_hat
    logits = cfg.scale * cos
    phi, dphi = _target_transform(cos[label:label + 1], cfg.kind, margin)
    logits[label] = cfg.scale * phi[0]
    loss, p = _softmax_ce(logits, label)

    q = p.copy()
    q[label] -= 1.0
    q *= cfg.scale
    q[label] *= dphi[0]

    grad_x = (w_hat.T @ q - (q @ cos) * x_hat) / r
    grad_w = (q[:, None] * (x_hat[None, :] - cos[:, None] * w_hat)) / w_norms[:, None]
    return loss, grad_x, grad_w


def _batch_loss_grad_w(X_hat: np.ndarray, labels: np.ndarray, W: np.ndarray,
                       cfg: MarginLossConfig, margin: float):
    """Mean loss and grad wrt W over a batch of pre-normalized embeddings."""
    n = X_hat.shape[0]
    w_hat, w_norms = _normalize_rows(W)
    cos = X_hat @ w_hat.T  # n x C
    rows = np.arange(n)
    c_y = cos[rows, labels]
    phi, dphi = _target_transform(c_y, cfg.kind, margin)
    logits = cfg.scale * cos
    logits[rows, labels] = cfg.scale * phi

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    losses = np.log(total) - shifted[rows, labels]
    p = exp / total[:, None]

    q = p
    q[rows, labels] -= 1.0
    q *= cfg.scale / n
    q[rows, labels] *= dphi

    grad_w = (q.T @ X_hat - ((q * cos).sum(axis=0))[:, None] * w_hat)
    grad_w /= w_norms[:, None]
    return float(losses.mean()), grad_w


def fit_head(embeddings: np.ndarray, labels, cfg: MarginLossConfig,
             scheduler: SchedulerConfig, epochs: int | None = None,
             seed: int = 0, init_w: np.ndarray | None = None):
    """Train the classifier head by plain full-batch gradient descent.

    One iteration is one gradient step; the LR and margin schedules are
    evaluated per iteration. Returns (HeadParams, per-iteration losses).
    """
    cfg.validate()
    scheduler.validate()
    steps = scheduler.T if epochs is None else epochs
    if steps > scheduler.T:
        raise ValueError(f"epochs {steps} exceeds scheduler horizon {scheduler.T}")
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if init_w is None:
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((cfg.num_classes, cfg.embed_dim))
        W /= np.sqrt(cfg.embed_dim)
    else:
        W = np.array(init_w, dtype=np.float64)
    X_hat, _ = _normalize_rows(X)
    trace = []
    for t in range(steps):
        lr = lr_schedule(t, scheduler)
        margin = margin_schedule(t, scheduler)
        loss, grad_w = _batch_loss_grad_w(X_hat, labels, W, cfg, margin)
        W = W - lr * grad_w
        trace.append(loss)
    return HeadParams(W=W), trace


def head_accuracy(embeddings: np.ndarray, labels, params: HeadParams) -> float:
    """Fraction of samples whose largest cosine matches the label."""
    X_hat, _ = _normalize_rows(np.asarray(embeddings, dtype=np.float64))
    w_hat, _ = _normalize_rows(np.asarray(params.W, dtype=np.float64))
    pred = (X_hat @ w_hat.T).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())
