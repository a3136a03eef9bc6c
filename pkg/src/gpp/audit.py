"""Post-hoc privacy audit with freshly trained probe classifiers.

A probe only ever sees released representations and labels. It is trained on
the released training set and scored on the released test set. The
classifiers used during encoder training play no part here.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import DataError, DomainError
from .nn import AdamState, DenseNet, adam_step, classifier_loss, forward, init_dense_net
from .objective import entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeSpec:
    hidden: tuple = (256, 128)
    activation: str = "relu"
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 64

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("a probe needs at least one hidden layer")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_probe(z_train: np.ndarray, labels, spec: ProbeSpec = ProbeSpec(),
                seed: int = 0, n_classes: Optional[int] = None) -> DenseNet:
    """Train a new softmax MLP from scratch on ``(z, label)`` pairs."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z_train.shape[0],):
        raise DataError("label count does not match representation count")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    elif labels.max() >= n_classes:
        raise DataError("label cardinality mismatch")
    rng = np.random.default_rng(seed)
    probe = init_dense_net((z_train.shape[1],) + tuple(spec.hidden) + (n_classes,), rng,
                           hidden_activation=spec.activation, output_activation="softmax")
    opt = AdamState.for_params(probe.params())
    n = z_train.shape[0]
    b = min(spec.batch_size, n)
    for _ in range(spec.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, b):
            idx = perm[start:start + b]
            _, grads, _ = classifier_loss(probe, z_train[idx], labels[idx],
                                          need_input_grad=False)
            adam_step(probe.params(), grads, opt, spec.lr)
    return probe


def binary_auc(scores, labels) -> float:
    """``P(score_pos > score_neg) + P(tie) / 2`` via average ranks (Mann-Whitney U)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DomainError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise DomainError("binary labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC is undefined unless both classes are present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # tied runs share the mean of their 1-based ranks
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def macro_auc(class_scores: np.ndarray, labels, return_skipped: bool = False):
    """Unweighted mean of one-vs-rest AUCs over classes present in ``labels``."""
    class_scores = np.asarray(class_scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise DomainError("macro AUC needs at least two classes present")
    skipped = [c for c in range(class_scores.shape[1]) if c not in set(present.tolist())]
    if skipped:
        warnings.warn(f"classes {skipped} absent from labels; skipped in macro AUC")
    aucs = [binary_auc(class_scores[:, c], (labels == c).astype(np.int64)) for c in present]
    value = float(np.mean(aucs))
    return (value, skipped) if return_skipped else value


def fano_error_bound(h_s: float, i_zs: float, num_classes: int) -> float:
    """Lower bound ``max(0, (H(S) - I(Z;S) - 1) / ln|S|)`` on any estimator's error.

    Zero means the bound is vacuous (always the case for binary ``S``).
    """
    if num_classes < 2:
        raise DomainError("Fano bound needs at least two classes")
    if h_s < 0 or i_zs < 0:
        raise DomainError("entropy and mutual information must be >= 0")
    return float(min(1.0, max(0.0, (h_s - i_zs - 1.0) / np.log(num_classes))))


@dataclass
class AuditReport:
    utility_auc: float
    adversary_auc: float
    privacy_gap: float
    fano_lower_bound_on_error: float
    config_fingerprint: str
    seed: object
    utility_auc_std: float = 0.0
    adversary_auc_std: float = 0.0
    per_seed: List[dict] = field(default_factory=list)
    mi_estimate: float = 0.0
    h_s: float = 0.0
    release_mode: str = "mean"
    multiclass: str = "macro-ovr"
    skipped_classes: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _release(model, x, mode, rng):
    if isinstance(model, np.ndarray):
        return model
    return model.release(x, mode=mode, rng=rng)


def _probe_auc(z_tr, y_tr, z_te, y_te, n_classes, spec, seed):
    probe = train_probe(z_tr, y_tr, spec, seed, n_classes)
    p = forward(probe, z_te)
    auc, skipped = macro_auc(p, y_te, return_skipped=True)
    picked = np.clip(p[np.arange(y_te.size), y_te], 1e-12, 1.0)
    return auc, skipped, float(np.log(picked).mean())


def run_audit(model, train: LabeledDataset, test: LabeledDataset,
              spec: ProbeSpec = ProbeSpec(), seeds: Sequence[int] = (0,),
              mode: str = "mean", fingerprint: str = "",
              z_train: np.ndarray = None, z_test: np.ndarray = None) -> AuditReport:
    """Audit a released representation with fresh utility and adversary probes.

    ``model`` is anything with ``release(x, mode, rng)``, or None when
    ``z_train``/``z_test`` are passed directly. Each seed trains one new
    utility probe and one new adversary probe per attribute. AUCs are averaged
    over attributes, then mean and std are taken over seeds.
    """
    if train.u.size == 0 or test.s.size == 0:
        raise DataError("audit needs utility and sensitive labels")
    seeds = list(seeds)
    per_seed, skipped_all = [], set()
    h_s = float(np.mean([entropy(np.bincount(test.s[:, j], minlength=c) / test.n)
                         for j, c in enumerate(test.s_card)]))
    for seed in seeds:
        rng = np.random.default_rng([seed, 0x5EED])
        ztr = z_train if z_train is not None else _release(model, train.x, mode, rng)
        zte = z_test if z_test is not None else _release(model, test.x, mode, rng)
        u_aucs, s_aucs, loglik = [], [], []
        for j, c in enumerate(train.u_card):
            auc, sk, _ = _probe_auc(ztr, train.u[:, j], zte, test.u[:, j], c, spec, seed)
            u_aucs.append(auc)
            skipped_all.update(sk)
        for j, c in enumerate(train.s_card):
            auc, sk, ll = _probe_auc(ztr, train.s[:, j], zte, test.s[:, j], c, spec,
                                     seed + 7919)
            s_aucs.append(auc)
            loglik.append(ll)
        mi = max(0.0, h_s + float(np.mean(loglik)))
        per_seed.append({"seed": seed, "utility_auc": float(np.mean(u_aucs)),
                         "adversary_auc": float(np.mean(s_aucs)), "mi_estimate": mi})
    u = np.array([r["utility_auc"] for r in per_seed])
    a = np.array([r["adversary_auc"] for r in per_seed])
    mi = float(np.mean([r["mi_estimate"] for r in per_seed]))
    fano = fano_error_bound(h_s, min(mi, h_s), max(test.s_card))
    return AuditReport(
        utility_auc=float(u.mean()), adversary_auc=float(a.mean()),
        privacy_gap=float(abs(a.mean() - 0.5)), fano_lower_bound_on_error=fano,
        config_fingerprint=fingerprint or spec.fingerprint(),
        seed=seeds[0] if len(seeds) == 1 else seeds,
        utility_auc_std=float(u.std(ddof=1)) if len(seeds) > 1 else 0.0,
        adversary_auc_std=float(a.std(ddof=1)) if len(seeds) > 1 else 0.0,
        per_seed=per_seed, mi_estimate=mi, h_s=h_s, release_mode=mode,
        skipped_classes=sorted(skipped_all))
