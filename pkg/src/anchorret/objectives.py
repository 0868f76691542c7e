"""Contrastive and invariance losses over unit-norm embedding batches.

All functions take and return :class:`~anchorret.numcore.Node` objects (plain
arrays are wrapped as constants), so the same code computes values for
tests and gradients for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Node

NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    eps: float = 1e-8
    use_v2t: bool = True
    use_t2v: bool = True
    use_inv: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.eps < 0:
            raise ValueError("lambda and epsilon must be non-negative")
        if not (self.use_v2t or self.use_t2v or self.use_inv):
            raise ValueError("at least one loss term must be enabled")


@dataclass
class EmbeddingBatch:
    V: Node
    Z: Node
    labels: np.ndarray
    languages: Sequence[str] | None = None

    def __post_init__(self):
        self.V = _node(self.V)
        self.Z = _node(self.Z)
        self.labels = np.asarray(self.labels)
        n = self.V.shape[0]
        if self.V.shape != self.Z.shape or len(self.labels) != n:
            raise nc.ShapeError(f"V {self.V.shape}, Z {self.Z.shape}, labels {len(self.labels)} disagree")
        if n < 2:
            raise ContractError("a batch needs at least two pairs")


def _node(x) -> Node:
    return x if isinstance(x, Node) else nc.constant(x)


def _temperature(tau) -> Node:
    if isinstance(tau, Node):
        return tau
    return nc.constant([float(tau)])


def _check_unit_rows(x: Node, what: str) -> None:
    norms = np.linalg.norm(x.value, axis=1)
    bad = np.abs(norms - 1.0) > NORM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise ContractError(f"{what} row {i} has norm {norms[i]:.9f}, expected 1")


def similarity_matrix(V, Z) -> Node:
    """S[i, j] = v_i . z_j for unit-norm rows."""
    V, Z = _node(V), _node(Z)
    _check_unit_rows(V, "V")
    _check_unit_rows(Z, "Z")
    return nc.matmul(V, nc.transpose(Z))


def _directional(S: Node, tau) -> Node:
    # -(1/N) sum_i log softmax(S_i / tau)[i]
    t = _temperature(tau)
    logits = nc.scale_by(S, nc.reciprocal(t))
    return nc.mean(nc.logsumexp_rows(logits) - nc.diag(logits))


def loss_v2t(S, tau) -> Node:
    """Image-to-text InfoNCE: each image row against every text in the batch."""
    return _directional(_node(S), tau)


def loss_t2v(S, tau) -> Node:
    """Text-to-image InfoNCE: softmax over the columns of S."""
    return _directional(nc.transpose(_node(S)), tau)


def loss_itc(S, tau) -> Node:
    S = _node(S)
    t = _temperature(tau)
    return nc.scale(loss_v2t(S, t) + loss_t2v(S, t), 0.5)


def semantic_mask(labels) -> np.ndarray:
    """M[j, k] = 1 if labels match and j != k."""
    labels = np.asarray(labels)
    m = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(m, 0.0)
    return m


def loss_inv(H, labels, eps: float = 1e-8) -> Node:
    """One minus the mean cosine over all same-label pairs of ``H`` (any modality)."""
    H = _node(H)
    M = semantic_mask(labels)
    gram = nc.matmul(H, nc.transpose(H))
    positive = nc.total(nc.mul(gram, nc.constant(M)))
    return nc.constant([1.0]) - nc.scale(positive, 1.0 / (M.sum() + eps))


def total_loss(batch: EmbeddingBatch, cfg: LossConfig, tau) -> Node:
    """L_ITC + lambda * L_INV, with terms switched off per ``cfg`` for ablations.

    With one contrastive direction disabled the contrastive part is the
    remaining direction alone; with only the invariance term enabled the
    loss is ``lambda * L_INV``.
    """
    t = _temperature(tau)
    S = similarity_matrix(batch.V, batch.Z)
    if cfg.use_v2t and cfg.use_t2v:
        loss = loss_itc(S, t)
    elif cfg.use_v2t:
        loss = loss_v2t(S, t)
    elif cfg.use_t2v:
        loss = loss_t2v(S, t)
    else:
        loss = None
    if cfg.use_inv:
        H = nc.concat_rows(batch.V, batch.Z)
        labels = np.concatenate([batch.labels, batch.labels])
        inv = nc.scale(loss_inv(H, labels, cfg.eps), cfg.lam)
        loss = inv if loss is None else loss + inv
    return loss


def loss_parts(batch: EmbeddingBatch, cfg: LossConfig, tau: float) -> dict[str, float]:
    """Unweighted component values, for logging."""
    S = similarity_matrix(nc.constant(batch.V.value), nc.constant(batch.Z.value))
    H = np.vstack([batch.V.value, batch.Z.value])
    labels = np.concatenate([batch.labels, batch.labels])
    return {
        "v2t": loss_v2t(S, tau).item(),
        "t2v": loss_t2v(S, tau).item(),
        "itc": loss_itc(S, tau).item(),
        "inv": loss_inv(H, labels, cfg.eps).item(),
    }

