"""Alternating saddle-point training of the GPP encoder, plus the baselines.

One outer iteration runs ``k`` classifier mini-batches (utility classifiers,
then adversaries, on freshly sampled ``z``), followed by one encoder update on
a fresh mini-batch with the classifiers frozen. An epoch is one pass of the
encoder over the data (``n // b`` outer iterations). Classifier batches come
from an independent shuffled stream.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .encoder import GaussianEncoder, encode, init_encoder, reparameterize
from .errors import ConfigError, NumericError
from .nn import AdamState, DenseNet, adam_step, classifier_loss, init_dense_net
from .objective import GppLossConfig, encoder_loss

log = logging.getLogger(__name__)

METHODS = ("gpp", "no-privacy", "noisy-encoder")
DEFAULT_NOISE_SCALE = 0.5


@dataclass
class TrainConfig:
    batch_size: int = 64
    k: int = 2
    beta: float = 1.0
    lam: float = 0.01
    lr: float = 1e-4
    epochs: int = 50
    seed: int = 0
    d_z: int = 120
    encoder_hidden: tuple = (512, 256)
    classifier_hidden: tuple = (256, 128)

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.classifier_hidden = tuple(int(h) for h in self.classifier_hidden)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["classifier_hidden"] = list(self.classifier_hidden)
        return d


def init_classifier(d_in: int, n_classes: int, hidden: Sequence[int],
                    rng: np.random.Generator) -> DenseNet:
    return init_dense_net((d_in,) + tuple(hidden) + (n_classes,), rng,
                          output_activation="softmax")


@dataclass
class TrainedModel:
    encoder: GaussianEncoder
    utility_clfs: List[DenseNet]
    adversary_clfs: List[DenseNet]
    traces: Dict[str, List[float]] = field(default_factory=dict)
    method: str = "gpp"
    noise_scale: float = 0.0
    config: Optional[TrainConfig] = None

    def release(self, x: np.ndarray, mode: str = "mean",
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Sanitized representation of ``x``.

        ``mode="mean"`` releases the latent mean, ``"sample"`` a reparameterized
        draw. The noisy-encoder baseline adds its isotropic noise in both modes.
        """
        mu, logvar = encode(self.encoder, x)
        if mode == "mean":
            z = mu
        elif mode == "sample":
            if rng is None:
                raise ValueError("sampled release needs an rng")
            z = reparameterize(mu, logvar, rng).z
        else:
            raise ValueError(f"unknown release mode {mode!r}")
        if self.noise_scale > 0:
            if rng is None:
                raise ValueError("noisy-encoder release needs an rng")
            z = z + self.noise_scale * rng.standard_normal(z.shape)
        return z


class BatchStream:
    """Endless mini-batch index stream; reshuffles after each full pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.b = min(batch_size, n)
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.b > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.b]
        self.pos += self.b
        return idx


def _check_finite(value: float, what: str, iteration: int):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} at iteration {iteration}")


class GppTrainer:
    """Stateful training loop; :func:`train_gpp` and friends wrap it.

    All randomness flows from ``cfg.seed`` through independent child streams,
    so a run is reproducible and can be checkpointed between epochs.
    """

    TRACE_KEYS = ("utility_ce", "adversary_ce", "encoder_loss", "encoder_utility_ce",
                  "encoder_adversary_ce", "kl", "epoch_encoder_loss")

    def __init__(self, data: LabeledDataset, cfg: TrainConfig, method: str = "gpp",
                 noise_scale: float = 0.0):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        if data.n == 0:
            raise ConfigError("empty dataset")
        if noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if cfg.d_z >= data.d_x:
            raise ConfigError(f"d_z={cfg.d_z} must be smaller than d_x={data.d_x}")
        self.data = data
        self.cfg = cfg
        self.method = method
        self.noise_scale = noise_scale if method == "noisy-encoder" else 0.0
        self.loss_cfg = GppLossConfig(beta=cfg.beta, lam=cfg.lam,
                                      adversary_weight=1.0 if method == "gpp" else 0.0)

        ss = np.random.SeedSequence(cfg.seed)
        init_ss, p1_ss, p2_ss, eps_ss, noise_ss = ss.spawn(5)
        init_rng = np.random.default_rng(init_ss)
        enc = init_encoder(data.d_x, cfg.d_z, init_rng, cfg.encoder_hidden)
        util = [init_classifier(cfg.d_z, c, cfg.classifier_hidden, init_rng) for c in data.u_card]
        adv = [init_classifier(cfg.d_z, c, cfg.classifier_hidden, init_rng) for c in data.s_card]
        self.model = TrainedModel(enc, util, adv, {k: [] for k in self.TRACE_KEYS},
                                  method, self.noise_scale, cfg)
        self.enc_opt = AdamState.for_params(enc.params())
        self.util_opt = [AdamState.for_params(c.params()) for c in util]
        self.adv_opt = [AdamState.for_params(c.params()) for c in adv]
        self.p1_stream = BatchStream(data.n, cfg.batch_size, np.random.default_rng(p1_ss))
        self.p2_rng = np.random.default_rng(p2_ss)
        self.eps_rng = np.random.default_rng(eps_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.epoch = 0
        self.iteration = 0

    # -- helpers ---------------------------------------------------------
    def _noise(self, shape):
        if self.noise_scale > 0:
            return self.noise_scale * self.noise_rng.standard_normal(shape)
        return None

    def _sample_z(self, x):
        mu, logvar = encode(self.model.encoder, x)
        z = reparameterize(mu, logvar, self.eps_rng).z
        extra = self._noise(z.shape)
        return z if extra is None else z + extra

    # -- phases ----------------------------------------------------------
    def phase1(self):
        """``k`` classifier updates on fresh mini-batches; encoder untouched."""
        d, tr = self.data, self.model.traces
        for _ in range(self.cfg.k):
            idx = self.p1_stream.next()
            z = self._sample_z(d.x[idx])
            tot = 0.0
            for j, (clf, opt) in enumerate(zip(self.model.utility_clfs, self.util_opt)):
                loss, grads, _ = classifier_loss(clf, z, d.u[idx, j], need_input_grad=False)
                _check_finite(loss, "utility loss", self.iteration)
                adam_step(clf.params(), grads, opt, self.cfg.lr)
                tot += loss
            tr["utility_ce"].append(tot)
            tot = 0.0
            for j, (clf, opt) in enumerate(zip(self.model.adversary_clfs, self.adv_opt)):
                loss, grads, _ = classifier_loss(clf, z, d.s[idx, j], need_input_grad=False)
                _check_finite(loss, "adversary loss", self.iteration)
                adam_step(clf.params(), grads, opt, self.cfg.lr)
                tot += loss
            tr["adversary_ce"].append(tot)

    def phase2(self, idx):
        """One encoder update with frozen classifiers."""
        d, m = self.data, self.model
        x = d.x[idx]
        eps = self.eps_rng.standard_normal((idx.size, self.cfg.d_z))
        extra = self._noise(eps.shape)
        res = encoder_loss(m.encoder, x, eps, d.u[idx], d.s[idx], m.utility_clfs,
                           m.adversary_clfs, self.loss_cfg, extra_noise=extra)
        _check_finite(res.loss, "encoder loss", self.iteration)
        try:
            adam_step(m.encoder.params(), res.grads, self.enc_opt, self.cfg.lr)
        except NumericError as exc:
            raise NumericError(f"{exc} at iteration {self.iteration}") from None
        tr = m.traces
        tr["encoder_loss"].append(res.loss)
        tr["encoder_utility_ce"].append(float(sum(res.utility_ce)))
        tr["encoder_adversary_ce"].append(float(sum(res.adversary_ce)))
        tr["kl"].append(res.kl)
        return res.loss

    def run_epoch(self) -> float:
        n, b = self.data.n, min(self.cfg.batch_size, self.data.n)
        perm = self.p2_rng.permutation(n)
        losses = []
        for start in range(0, (n // b) * b, b):
            self.phase1()
            losses.append(self.phase2(perm[start:start + b]))
            self.iteration += 1
        self.epoch += 1
        mean_loss = float(np.mean(losses))
        self.model.traces["epoch_encoder_loss"].append(mean_loss)
        log.debug("epoch %d: encoder loss %.5f", self.epoch, mean_loss)
        return mean_loss

    def run(self, epochs: Optional[int] = None, callback=None) -> TrainedModel:
        """Train until ``epochs`` (default ``cfg.epochs``) epochs have completed."""
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            loss = self.run_epoch()
            if callback is not None:
                callback(self, loss)
        return self.model


def train_gpp(data: LabeledDataset, cfg: TrainConfig, callback=None) -> TrainedModel:
    return GppTrainer(data, cfg, "gpp").run(callback=callback)


def train_no_privacy(data: LabeledDataset, cfg: TrainConfig, callback=None) -> TrainedModel:
    """Same loop with the adversary term dropped from the encoder loss.

    Adversaries are still trained, for monitoring only.
    """
    return GppTrainer(data, cfg, "no-privacy").run(callback=callback)


def train_noisy_encoder(data: LabeledDataset, cfg: TrainConfig,
                        noise_scale: float = DEFAULT_NOISE_SCALE,
                        callback=None) -> TrainedModel:
    """No adversary term; isotropic noise of ``noise_scale`` is added to ``z``
    during training and at release."""
    return GppTrainer(data, cfg, "noisy-encoder", noise_scale).run(callback=callback)


@dataclass
class RandomProjection:
    """Fixed seeded linear map ``z = x @ matrix.T``; no training."""
    matrix: np.ndarray
    method: str = "random-projection"

    @classmethod
    def fit(cls, d_x: int, d_z: int, seed: int, orthonormal: bool = False) -> "RandomProjection":
        if d_z > d_x or d_z < 1:
            raise ConfigError(f"need 1 <= d_z <= d_x, got d_z={d_z}, d_x={d_x}")
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d_z, d_x)) / np.sqrt(d_z)
        if orthonormal:
            q, _ = np.linalg.qr(a.T)
            a = q.T
        return cls(a)

    def release(self, x: np.ndarray, mode: str = "mean", rng=None) -> np.ndarray:
        return x @ self.matrix.T


def random_projection_release(data: LabeledDataset, d_z: int, seed: int,
                              orthonormal: bool = False) -> np.ndarray:
    return RandomProjection.fit(data.d_x, d_z, seed, orthonormal).release(data.x)
