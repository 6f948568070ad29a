"""Forward values and analytic input-gradients for the training losses.

Four pieces: cross-entropy on logits, mean-squared error between semantic
codes and their class codewords, a global margin triplet loss over all
negative classes, and a correlation-consistency penalty pushing codewords
toward mutual orthogonality. ``compose_objective`` merges them into the
three training objectives (plain cross-entropy, fixed-code regularization,
learnable-code regularization).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Matrix, as_matrix, labels_array
from .errors import DimensionError, DomainError, UsageError

BASELINE = "baseline"
HTC = "htc"
LTC = "ltc"

MODES = (BASELINE, HTC, LTC)


@dataclass
class Hyperparams:
    """Weights, margins, and optimizer settings for one training run.

    ``margin`` defaults to the code length; halve it for long-tailed
    (imbalanced) training runs. Learning rates are grouped: the feature
    extractor, the newly added heads (classifier and semantic encoder),
    and the learnable codes each have their own rate. ``decay_epochs``
    are 0-based epoch indices at which every rate is multiplied by
    ``decay_factor``.
    """

    num_classes: int
    code_length: int = 512
    mse_weight: float = 1.0
    triplet_weight: float = 0.01
    corr_weight: float = 0.1
    margin: Optional[float] = None
    tanh_scale: float = 1.0
    lr_feature: float = 0.001
    lr_new: float = 0.01
    lr_codes: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise DomainError(f"num_classes must be positive, got {self.num_classes}")
        if self.code_length < 1:
            raise DomainError(f"code_length must be positive, got {self.code_length}")
        for name in ("mse_weight", "triplet_weight", "corr_weight"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.margin is None:
            self.margin = float(self.code_length)
        if self.margin < 0:
            raise DomainError(f"margin must be non-negative, got {self.margin}")
        if self.tanh_scale <= 0:
            raise DomainError(f"tanh_scale must be positive, got {self.tanh_scale}")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)


@dataclass(frozen=True)
class LossBundle:
    """One objective evaluation: raw component values plus merged gradients.

    Component losses are stored unweighted; ``total`` applies the
    Hyperparams weights. ``grad_semantic`` and ``grad_codes`` are None for
    modes that do not use the corresponding branch.
    """

    mode: str
    total: float
    ce: float
    mse: float
    triplet: float
    corr: float
    grad_logits: Matrix
    grad_semantic: Optional[Matrix] = field(default=None, repr=False)
    grad_codes: Optional[Matrix] = field(default=None, repr=False)


def cross_entropy(logits, labels) -> tuple[float, Matrix]:
    """Mean negative log-softmax of the true class, with its logits gradient.

    Stabilized with log-sum-exp; the gradient is (softmax - onehot) / N.
    """
    logits = as_matrix(logits)
    n, k = logits.shape
    y = labels_array(labels, k)
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} rows of logits")
    shift = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shift)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shift - np.log(denom)
    loss = float(-log_probs[np.arange(n), y].mean())
    grad = exp / denom
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def mse_codes(semantic, codes, labels) -> tuple[float, Matrix, Matrix]:
    """Mean squared error between semantic codes and their class codewords.

    Averaged over both samples and code positions. Returns the loss, the
    gradient w.r.t. the semantic codes (N x L), and the gradient w.r.t. the
    codeword matrix (K x L, zero rows for classes absent from the batch).
    """
    v = as_matrix(semantic)
    s = as_matrix(codes)
    if v.shape[1] != s.shape[1]:
        raise DimensionError(
            f"semantic code length {v.shape[1]} does not match codewords {s.shape[1]}"
        )
    n, length = v.shape
    y = labels_array(labels, s.shape[0])
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} semantic codes")
    diff = v - s[y]
    loss = float((diff * diff).sum() / (n * length))
    grad_v = (2.0 / (n * length)) * diff
    grad_s = np.zeros_like(s)
    np.add.at(grad_s, y, -grad_v)
    return loss, grad_v, grad_s


def triplet_global(semantic, codes, labels, margin: float) -> tuple[float, Matrix, Matrix]:
    """Hinge loss on (negative-class correlation - true-class correlation + margin)
    summed over every negative class of every sample.

    Correlation here is the plain inner product between a semantic code and
    a codeword. The average runs over N * (K - 1) pairs. Gradients flow only
    through strictly positive hinge terms; a hinge exactly at zero
    contributes nothing.
    """
    v = as_matrix(semantic)
    s = as_matrix(codes)
    k = s.shape[0]
    if k < 2:
        raise DomainError("triplet loss needs at least two classes")
    if margin < 0:
        raise DomainError(f"margin must be non-negative, got {margin}")
    if v.shape[1] != s.shape[1]:
        raise DimensionError(
            f"semantic code length {v.shape[1]} does not match codewords {s.shape[1]}"
        )
    n = v.shape[0]
    y = labels_array(labels, k)
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} semantic codes")
    rows = np.arange(n)
    corr = v @ s.T
    hinge = corr - corr[rows, y][:, None] + margin
    hinge[rows, y] = 0.0
    active = hinge > 0.0
    scale = 1.0 / (n * (k - 1))
    loss = float(hinge[active].sum() * scale)
    weights = active.astype(np.float64) * scale
    per_row = weights.sum(axis=1)
    grad_v = weights @ s - per_row[:, None] * s[y]
    grad_s = weights.T @ v
    np.add.at(grad_s, y, -per_row[:, None] * v)
    return loss, grad_v, grad_s


def corr_consistency(codes) -> tuple[float, Matrix]:
    """Mean absolute pairwise inner product between distinct codewords.

    Pushes the codeword matrix toward mutual orthogonality. The subgradient
    of each |s_k . s_j| term flows into both rows, with sign(0) taken as 0.
    """
    s = as_matrix(codes)
    k = s.shape[0]
    if k < 2:
        raise DomainError("correlation consistency needs at least two classes")
    gram = s @ s.T
    signs = np.sign(gram)
    np.fill_diagonal(signs, 0.0)
    scale = 1.0 / (k * (k - 1))
    off = np.abs(gram).sum() - np.abs(np.diag(gram)).sum()
    loss = float(off * scale)
    # each unordered pair appears twice in the double sum, hence the factor 2
    grad_s = (2.0 * scale) * (signs @ s)
    return loss, grad_s


def compose_objective(
    mode: str,
    hp: Hyperparams,
    ce: tuple[float, Matrix],
    mse: Optional[tuple[float, Matrix, Matrix]] = None,
    triplet: Optional[tuple[float, Matrix, Matrix]] = None,
    corr: Optional[tuple[float, Matrix]] = None,
) -> LossBundle:
    """Merge loss parts into the weighted objective for ``mode``.

    baseline uses cross-entropy alone; htc adds the weighted MSE with the
    codeword gradient forced to zero (fixed codes); ltc adds the weighted
    triplet and correlation terms and sums all codeword gradients.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}")
    ce_loss, grad_logits = ce
    if mode == BASELINE:
        return LossBundle(mode, ce_loss, ce_loss, 0.0, 0.0, 0.0, grad_logits)
    if mse is None:
        raise UsageError(f"mode {mode!r} requires the mse part")
    mse_loss, mse_gv, mse_gs = mse
    if mode == HTC:
        total = ce_loss + hp.mse_weight * mse_loss
        return LossBundle(
            mode,
            total,
            ce_loss,
            mse_loss,
            0.0,
            0.0,
            grad_logits,
            grad_semantic=hp.mse_weight * mse_gv,
            grad_codes=np.zeros_like(mse_gs),
        )
    if triplet is None or corr is None:
        raise UsageError("mode 'ltc' requires the triplet and corr parts")
    tri_loss, tri_gv, tri_gs = triplet
    corr_loss, corr_gs = corr
    total = (
        ce_loss
        + hp.mse_weight * mse_loss
        + hp.triplet_weight * tri_loss
        + hp.corr_weight * corr_loss
    )
    grad_semantic = hp.mse_weight * mse_gv + hp.triplet_weight * tri_gv
    grad_codes = (
        hp.mse_weight * mse_gs
        + hp.triplet_weight * tri_gs
        + hp.corr_weight * corr_gs
    )
    return LossBundle(
        mode,
        total,
        ce_loss,
        mse_loss,
        tri_loss,
        corr_loss,
        grad_logits,
        grad_semantic=grad_semantic,
        grad_codes=grad_codes,
    )
