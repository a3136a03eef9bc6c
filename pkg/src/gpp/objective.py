"""GPP losses, variational bound estimators, and exact discrete information measures.

All entropies and mutual informations are in nats.

The encoder objective for one mini-batch is::

    beta * sum_j CE(u_j) - sum_j CE(s_j) + lam * KL

with each cross-entropy averaged over the batch. Classifier parameters are
treated as constants when differentiating it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .encoder import GaussianEncoder, encode_cache, encoder_backward, kl_divergence, reparameterize
from .errors import DomainError, ShapeError
from .nn import DenseNet, classifier_loss


@dataclass(frozen=True)
class GppLossConfig:
    beta: float = 1.0
    lam: float = 0.01
    # weight on the adversary term; 0 turns the loss into the no-privacy objective
    adversary_weight: float = 1.0

    def __post_init__(self):
        for name in ("beta", "lam", "adversary_weight"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise DomainError(f"{name} must be finite and >= 0, got {val}")


def utility_classifier_loss(z, u_labels, classifier: DenseNet):
    """``(CE, classifier grads, dCE/dz)`` for one utility attribute."""
    return classifier_loss(classifier, z, u_labels)


def adversary_classifier_loss(z, s_labels, classifier: DenseNet):
    """``(CE, classifier grads, dCE/dz)`` for one sensitive attribute."""
    return classifier_loss(classifier, z, s_labels)


def combine_losses(utility_ces: Sequence[float], adversary_ces: Sequence[float],
                   kl: float, cfg: GppLossConfig) -> float:
    return (cfg.beta * float(np.sum(utility_ces))
            - cfg.adversary_weight * float(np.sum(adversary_ces))
            + cfg.lam * kl)


@dataclass
class EncoderLoss:
    loss: float
    grads: List[np.ndarray]
    utility_ce: List[float]
    adversary_ce: List[float]
    kl: float
    z: np.ndarray = field(repr=False, default=None)


def _as_2d(labels, n):
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != n:
        raise ShapeError(f"labels have {arr.shape[0]} rows, expected {n}")
    return arr


def encoder_loss(enc: GaussianEncoder, x: np.ndarray, epsilon: np.ndarray,
                 u_labels, s_labels, utility_clfs: Sequence[DenseNet],
                 adversary_clfs: Sequence[DenseNet], cfg: GppLossConfig,
                 extra_noise: np.ndarray = None) -> EncoderLoss:
    """Encoder objective and its gradient w.r.t. ``enc.params()``.

    ``epsilon`` is the reparameterization noise, replayed exactly so the
    pathwise gradient is exact. ``extra_noise`` (noisy-encoder baseline) is
    added to ``z`` after sampling and carries no parameters.
    """
    n = x.shape[0]
    u_labels = _as_2d(u_labels, n)
    s_labels = _as_2d(s_labels, n)
    if u_labels.shape[1] != len(utility_clfs) or s_labels.shape[1] != len(adversary_clfs):
        raise ShapeError("one classifier per attribute is required")

    mu, logvar, cache = encode_cache(enc, x)
    sample = reparameterize(mu, logvar, epsilon=epsilon)
    z = sample.z if extra_noise is None else sample.z + extra_noise

    dz = np.zeros_like(z)
    u_ces, s_ces = [], []
    for j, clf in enumerate(utility_clfs):
        ce, _, g = classifier_loss(clf, z, u_labels[:, j])
        u_ces.append(ce)
        if cfg.beta:
            dz += cfg.beta * g
    for j, clf in enumerate(adversary_clfs):
        ce, _, g = classifier_loss(clf, z, s_labels[:, j])
        s_ces.append(ce)
        if cfg.adversary_weight:
            dz -= cfg.adversary_weight * g

    kl, dkl_mu, dkl_lv = kl_divergence(mu, logvar)
    std = sample.std
    dmu = dz + cfg.lam * dkl_mu
    dlogvar = dz * epsilon * 0.5 * std + cfg.lam * dkl_lv
    grads = encoder_backward(enc, cache, dmu, dlogvar)
    loss = combine_losses(u_ces, s_ces, kl, cfg)
    return EncoderLoss(loss, grads, u_ces, s_ces, kl, z)


# ---------------------------------------------------------------------------
# exact discrete information measures

def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class DiscreteJoint:
    """Joint probability table ``P(Z = row, S = col)``."""
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise DomainError("joint table must be 2-D")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise DomainError("joint table entries must be finite and >= 0")
        if abs(t.sum() - 1.0) > 1e-12:
            raise DomainError(f"joint table sums to {t.sum()!r}, not 1")
        self.table = t

    @property
    def p_z(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def p_s(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def posterior(self) -> np.ndarray:
        """``P(S | Z)``; rows with zero mass get the marginal ``P(S)``."""
        pz = self.p_z[:, None]
        out = np.where(pz > 0, self.table / np.where(pz > 0, pz, 1.0), self.p_s[None, :])
        return out


def exact_mi_discrete(joint: DiscreteJoint):
    """Return ``(I(Z;S), H(S), H(S|Z))`` by enumeration."""
    t = joint.table
    h_s = entropy(joint.p_s)
    h_zs = entropy(t)
    h_z = entropy(joint.p_z)
    h_s_given_z = h_zs - h_z
    mi = h_s - h_s_given_z
    return max(mi, 0.0), h_s, h_s_given_z


def conditional_mi(table3: np.ndarray) -> float:
    """``I(A; B | C)`` for a joint table indexed ``[a, b, c]``."""
    t = np.asarray(table3, dtype=np.float64)
    h_ac = entropy(t.sum(axis=1))
    h_bc = entropy(t.sum(axis=0))
    h_c = entropy(t.sum(axis=(0, 1)))
    h_abc = entropy(t)
    return max(h_ac + h_bc - h_c - h_abc, 0.0)


def _check_q(q: np.ndarray, rows: int, cols: int):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (rows, cols):
        raise ShapeError(f"Q has shape {q.shape}, expected {(rows, cols)}")
    if np.any(q < 0) or not np.allclose(q.sum(axis=1), 1.0, atol=1e-9):
        raise DomainError("Q rows must be valid conditional distributions")
    return q


def _safe_log(q):
    with np.errstate(divide="ignore"):
        return np.log(q)


def mi_lower_bound_exact(joint: DiscreteJoint, q: np.ndarray) -> float:
    """``H(S) + E_{P(Z,S)}[log Q(S|Z)]`` computed from the full table."""
    t = joint.table
    q = _check_q(q, *t.shape)
    mask = t > 0
    return entropy(joint.p_s) + float((t[mask] * _safe_log(q[mask])).sum())


def cond_entropy_upper_bound_exact(joint: DiscreteJoint, q: np.ndarray) -> float:
    """``E_{P(Z,U)}[-log Q(U|Z)]`` computed from the full table."""
    t = joint.table
    q = _check_q(q, *t.shape)
    mask = t > 0
    return float(-(t[mask] * _safe_log(q[mask])).sum())


def mi_lower_bound_estimate(z_cells, s, q: np.ndarray, h_s: float = None) -> float:
    """Plug-in estimate of ``H(S) + E[log Q(S|Z)]`` from paired samples.

    ``h_s`` defaults to the entropy of the empirical label frequencies.
    """
    z_cells = np.asarray(z_cells, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    if z_cells.size == 0:
        raise DomainError("empty sample")
    q = np.asarray(q, dtype=np.float64)
    if h_s is None:
        h_s = entropy(np.bincount(s, minlength=q.shape[1]) / s.size)
    return h_s + float(_safe_log(q[z_cells, s]).mean())


def cond_entropy_upper_bound_estimate(z_cells, u, q: np.ndarray) -> float:
    """Plug-in estimate of ``E[-log Q(U|Z)]`` from paired samples."""
    z_cells = np.asarray(z_cells, dtype=np.int64)
    u = np.asarray(u, dtype=np.int64)
    if z_cells.size == 0:
        raise DomainError("empty sample")
    q = np.asarray(q, dtype=np.float64)
    return float(-_safe_log(q[z_cells, u]).mean())
