"""Gaussian stochastic encoder with diagonal covariance.

The trunk is a ReLU MLP; two linear heads read its last hidden layer and
produce the latent mean and log-variance. Samples are drawn with the
reparameterization ``z = mu + exp(logvar / 2) * eps`` and the noise is kept so
the backward pass can replay it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .nn import DenseNet, backward, forward_cache, init_dense_net


@dataclass
class GaussianEncoder:
    trunk: DenseNet
    mean_head: DenseNet
    logvar_head: DenseNet

    def __post_init__(self):
        width = self.trunk.out_dim if self.trunk.layers else None
        for head in (self.mean_head, self.logvar_head):
            if len(head.layers) != 1 or head.layers[0].activation != "identity":
                raise ValueError("heads must be single linear layers")
            if width is not None and head.in_dim != width:
                raise ShapeError("heads must consume the trunk's output width")
        if self.mean_head.out_dim != self.logvar_head.out_dim:
            raise ShapeError("mean and log-variance heads differ in width")
        if self.d_z < 1 or self.d_z >= self.d_x:
            raise ShapeError(f"need 1 <= d_z < d_x, got d_z={self.d_z}, d_x={self.d_x}")

    @property
    def d_x(self) -> int:
        return self.trunk.in_dim if self.trunk.layers else self.mean_head.in_dim

    @property
    def d_z(self) -> int:
        return self.mean_head.out_dim

    def params(self) -> List[np.ndarray]:
        return self.trunk.params() + self.mean_head.params() + self.logvar_head.params()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "GaussianEncoder":
        return GaussianEncoder(self.trunk.copy(), self.mean_head.copy(),
                               self.logvar_head.copy())


def init_encoder(d_x: int, d_z: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (512, 256)) -> GaussianEncoder:
    hidden = tuple(hidden)
    if not hidden:
        trunk = DenseNet([])
        width = d_x
    else:
        trunk = init_dense_net((d_x,) + hidden, rng, output_activation="relu")
        width = hidden[-1]
    mean_head = init_dense_net((width, d_z), rng)
    logvar_head = init_dense_net((width, d_z), rng)
    return GaussianEncoder(trunk, mean_head, logvar_head)


@dataclass
class EncoderCache:
    x: np.ndarray
    trunk_cache: list
    hidden: np.ndarray
    mean_cache: list
    logvar_cache: list


def encode_cache(enc: GaussianEncoder, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != enc.d_x:
        raise ShapeError(f"input shape {x.shape} does not match d_x={enc.d_x}")
    if enc.trunk.layers:
        h, tcache = forward_cache(enc.trunk, x)
    else:
        h, tcache = x, []
    mu, mcache = forward_cache(enc.mean_head, h)
    logvar, lcache = forward_cache(enc.logvar_head, h)
    return mu, logvar, EncoderCache(x, tcache, h, mcache, lcache)


def encode(enc: GaussianEncoder, x: np.ndarray):
    """Return ``(mu, logvar)``, each of shape ``(n, d_z)``."""
    mu, logvar, _ = encode_cache(enc, x)
    return mu, logvar


def encoder_backward(enc: GaussianEncoder, cache: EncoderCache,
                     dmu: np.ndarray, dlogvar: np.ndarray) -> List[np.ndarray]:
    """Gradients w.r.t. ``enc.params()`` given dL/dmu and dL/dlogvar."""
    gm, dh_m = backward(enc.mean_head, cache.hidden, dmu, cache=cache.mean_cache)
    gl, dh_l = backward(enc.logvar_head, cache.hidden, dlogvar, cache=cache.logvar_cache)
    if not enc.trunk.layers:
        return gm + gl
    gt, _ = backward(enc.trunk, cache.x, dh_m + dh_l, cache=cache.trunk_cache,
                     need_input_grad=False)
    return gt + gm + gl


@dataclass
class LatentSample:
    z: np.ndarray
    epsilon: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


def reparameterize(mu: np.ndarray, logvar: np.ndarray,
                   rng: Optional[np.random.Generator] = None,
                   epsilon: Optional[np.ndarray] = None) -> LatentSample:
    """Draw ``z = mu + exp(logvar/2) * eps`` with ``eps ~ N(0, I)``.

    Passing ``epsilon`` skips the draw and replays the given noise.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if epsilon is None:
        if rng is None:
            raise ValueError("need an rng or an explicit epsilon")
        epsilon = rng.standard_normal(mu.shape)
    elif epsilon.shape != mu.shape:
        raise ShapeError("epsilon shape differs from mu")
    z = mu + np.exp(0.5 * logvar) * epsilon
    return LatentSample(z, epsilon, mu, logvar)


def kl_divergence(mu: np.ndarray, logvar: np.ndarray):
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), averaged over the batch.

    Returns ``(kl, dkl_dmu, dkl_dlogvar)`` with batch-averaged gradients.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    n = mu.shape[0]
    var = np.exp(logvar)
    per_sample = 0.5 * (mu * mu + var - logvar - 1.0).sum(axis=1)
    kl = float(per_sample.sum() / n)
    return kl, mu / n, 0.5 * (var - 1.0) / n
