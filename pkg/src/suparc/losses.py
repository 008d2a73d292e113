"""Training objectives over batches of fusion vectors.

The contrastive losses work on the full n x n cosine matrix of a batch and
average one term per (anchor, positive) pair. Masks are constant arrays, so
the only tape nodes are the cosine matrix and the elementwise maths on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, DimensionError, EmptyPositiveError


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    margin_m: float = 0.15
    threshold_TH: float = 0.5
    m_tri: float = 0.2
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.margin_m < 0 or self.m_tri < 0:
            raise ConfigError("margins must be >= 0")
        if not self.threshold_TH > 0:
            raise ConfigError(f"threshold_TH must be > 0, got {self.threshold_TH}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class PairMatrix:
    """``t[i, j] = 1`` iff ``|y_i - y_j| <= TH``; ``delta[i, j] = |y_i - y_j|``."""

    t: np.ndarray
    delta: np.ndarray

    @property
    def n(self) -> int:
        return self.t.shape[0]

    def positive_mask(self) -> np.ndarray:
        """Same-class pairs excluding the diagonal."""
        mask = self.t.astype(np.float64)
        np.fill_diagonal(mask, 0.0)
        return mask

    def negative_mask(self) -> np.ndarray:
        return 1.0 - self.t.astype(np.float64)


def pair_label(y, threshold: float = 0.5) -> PairMatrix:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size < 2:
        raise ContractError("pair labelling needs at least two samples")
    delta = np.abs(y[:, None] - y[None, :])
    return PairMatrix(t=(delta <= threshold).astype(np.int8), delta=delta)


def _as_vector(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return ad.reshape(x, (x.size,))


def mae_loss(y_hat, y) -> Tensor:
    """Mean absolute error; subgradient sign(y_hat - y) / n."""
    y_hat = _as_vector(y_hat)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y_hat.size == 0:
        raise ContractError("mae_loss on an empty batch")
    if y_hat.size != y.size:
        raise DimensionError(f"mae_loss: {y_hat.size} predictions for {y.size} labels")
    return ad.mean(ad.absolute(ad.sub(y_hat, y)))


def _check_batch(h: Tensor, pairs: PairMatrix) -> None:
    if h.ndim != 2 or h.shape[0] != pairs.n:
        raise DimensionError(f"fusion batch {h.shape} does not match pair matrix of size {pairs.n}")


def _positives(pairs: PairMatrix) -> tuple[np.ndarray, float]:
    pos = pairs.positive_mask()
    count = float(pos.sum())
    if count == 0:
        raise EmptyPositiveError("no anchor in the batch has an in-batch positive")
    return pos, count


def _row_sums_broadcast(x: Tensor) -> Tensor:
    """Matrix whose every column is the row sums of ``x``."""
    return ad.matmul(x, Tensor(np.ones((x.shape[1], x.shape[1]))))


def supervised_ntxent(h, pairs: PairMatrix, tau: float = 0.1) -> Tensor:
    """Supervised NT-Xent: -log(e^{s_ip/tau} / sum_{j != i} e^{s_ij/tau}), mean over (i, p)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    _check_batch(h, pairs)
    pos, count = _positives(pairs)
    off_diag = 1.0 - np.eye(pairs.n)
    logits = ad.scale(ad.pairwise_cosine(h), 1.0 / tau)
    denom = _row_sums_broadcast(ad.exp(logits) * off_diag)
    terms = ad.log(denom) - logits
    return ad.scale(ad.tensor_sum(terms * pos), 1.0 / count)


def _angular_contrastive(h: Tensor, pairs: PairMatrix, tau: float, pos_shift: float, neg_margin) -> Tensor:
    """Shared body of the ArcCos and SupArc objectives.

    Positive logit ``cos(theta_ip + pos_shift) / tau``; negatives (t_ij = 0)
    contribute ``cos(clamp(theta_ij - neg_margin_ij, 0, pi)) / tau``. With
    ``neg_margin`` None the negatives use ``cos(theta_ij)`` unclamped.
    """
    _check_batch(h, pairs)
    pos, count = _positives(pairs)
    neg = pairs.negative_mask()
    theta = ad.arccos(ad.pairwise_cosine(h))
    pos_angle = theta if pos_shift == 0 else ad.add(theta, pos_shift)
    pos_logits = ad.scale(ad.cos(pos_angle), 1.0 / tau)
    if neg_margin is None:
        neg_logits = ad.scale(ad.cos(theta), 1.0 / tau)
    else:
        shifted = ad.clamp(ad.sub(theta, neg_margin), 0.0, np.pi)
        neg_logits = ad.scale(ad.cos(shifted), 1.0 / tau)
    neg_sum = _row_sums_broadcast(ad.exp(neg_logits) * neg)
    terms = ad.log(ad.exp(pos_logits) + neg_sum) - pos_logits
    return ad.scale(ad.tensor_sum(terms * pos), 1.0 / count)


def arccos_loss(h, pairs: PairMatrix, tau: float = 0.1, m: float = 0.0) -> Tensor:
    """ArcCos objective: additive angular margin ``m`` on the positive pair."""
    if m < 0:
        raise ContractError(f"margin must be >= 0, got {m}")
    h = h if isinstance(h, Tensor) else Tensor(h)
    return _angular_contrastive(h, pairs, tau, pos_shift=float(m), neg_margin=None)


def suparc_loss(h, y, pairs: PairMatrix, tau: float = 0.1, m: float = 0.15) -> Tensor:
    """SupArc: each negative's angle shrinks by ``m * |y_i - y_j|`` before the cosine.

    Negatives with a larger sentiment gap are pulled closer in the logit, so
    the anchor must push them further away. The shifted angle is clamped to
    [0, pi].
    """
    if m < 0:
        raise ContractError(f"margin must be >= 0, got {m}")
    h = h if isinstance(h, Tensor) else Tensor(h)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != pairs.n:
        raise DimensionError(f"{y.size} labels for a pair matrix of size {pairs.n}")
    delta = np.abs(y[:, None] - y[None, :])
    return _angular_contrastive(h, pairs, tau, pos_shift=0.0, neg_margin=m * delta)


def triplet_modalities_loss(h, singles: dict, doubles: dict, m_tri: float = 0.2) -> Tensor:
    """Hinge over the 6 ordered modality pairs (x, y), averaged over the batch.

    Each term is ``max(0, s(h, h_without_xy) - s(h, h_without_x) + m_tri)``
    with s the cosine similarity. ``singles`` maps a modality to its
    one-masked fusion; ``doubles`` maps a 2-element frozenset to the
    two-masked fusion.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    if len(singles) != 3 or len(doubles) != 3:
        raise ContractError("triplet loss needs three one-masked and three two-masked fusions")
    single = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in singles.items()}
    double = {frozenset(k): v if isinstance(v, Tensor) else Tensor(v) for k, v in doubles.items()}
    squeeze = h.ndim == 1
    if squeeze:
        h = ad.reshape(h, (1, -1))
        single = {k: ad.reshape(v, (1, -1)) for k, v in single.items()}
        double = {k: ad.reshape(v, (1, -1)) for k, v in double.items()}

    sim_single = {k: ad.rowwise_cosine(h, v) for k, v in single.items()}
    sim_double = {k: ad.rowwise_cosine(h, v) for k, v in double.items()}
    total = None
    for x in sorted(single):
        for y in sorted(single):
            if x == y:
                continue
            term = ad.relu(ad.add(sim_double[frozenset((x, y))] - sim_single[x], m_tri))
            total = term if total is None else total + term
    return ad.mean(total)


def total_loss(main, suparc, tri, alpha: float = 0.1, beta: float = 0.1) -> Tensor:
    """``main + alpha * suparc + beta * tri``; a skipped term may be passed as 0."""
    out = main if isinstance(main, Tensor) else Tensor(main)
    if alpha != 0:
        out = out + ad.scale(suparc, alpha) if isinstance(suparc, Tensor) else out + alpha * float(suparc)
    if beta != 0:
        out = out + ad.scale(tri, beta) if isinstance(tri, Tensor) else out + beta * float(tri)
    return out
