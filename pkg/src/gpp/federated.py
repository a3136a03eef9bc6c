"""Distributed GPP simulator: t clients, one aggregator, serialized round messages.

Each client keeps its raw features, its sensitive labels, its encoder and its
adversaries. Per round it uploads one sanitized mini-batch ``(z, u)``. The
aggregator trains the shared utility classifiers on the round's pool and
broadcasts them back. Every message crosses a byte buffer, so the
communication ledger counts real wire bytes.

Wire format (little-endian)::

    header   u8 direction | u32 round | u32 client_id | u32 payload_len
    uplink   u32 batch | u32 d_z | u32 d_u | f32 z[batch*d_z] | f32 u[batch*d_u]
    downlink per tensor, in layer order (W then b per layer, classifier by
             classifier): u32 rows | u32 cols | f32 data[rows*cols]
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LabeledDataset, Shard
from .encoder import GaussianEncoder, encode, init_encoder, reparameterize
from .errors import ConfigError, DomainError, ParseError, ProtocolViolation
from .nn import AdamState, DenseNet, Layer, adam_step, classifier_loss
from .objective import GppLossConfig, encoder_loss
from .trainer import BatchStream, init_classifier

log = logging.getLogger(__name__)

UPLINK = 0
DOWNLINK = 1
HEADER = struct.Struct("<BIII")
UPLINK_DIMS = struct.Struct("<III")
TENSOR_DIMS = struct.Struct("<II")
WIRE_SCALAR = np.dtype("<f4")


# ---------------------------------------------------------------------------
# messages

@dataclass(frozen=True)
class SanitizedBatch:
    """The only payload a client may send: latent samples and utility labels."""
    z: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.z.ndim != 2 or self.u.ndim != 2 or self.z.shape[0] != self.u.shape[0]:
            raise ProtocolViolation("sanitized batch must be (b, d_z) and (b, d_u)")


def encode_sanitized(batch: SanitizedBatch) -> bytes:
    if not isinstance(batch, SanitizedBatch):
        raise ProtocolViolation(f"uplink payload must be a SanitizedBatch, got "
                                f"{type(batch).__name__}")
    b, d_z = batch.z.shape
    d_u = batch.u.shape[1]
    return (UPLINK_DIMS.pack(b, d_z, d_u)
            + batch.z.astype(WIRE_SCALAR).tobytes()
            + batch.u.astype(WIRE_SCALAR).tobytes())


def decode_sanitized(payload: bytes) -> SanitizedBatch:
    if len(payload) < UPLINK_DIMS.size:
        raise ParseError("truncated uplink payload", 0)
    b, d_z, d_u = UPLINK_DIMS.unpack_from(payload, 0)
    need = UPLINK_DIMS.size + 4 * b * (d_z + d_u)
    if len(payload) != need:
        raise ParseError(f"uplink payload is {len(payload)} bytes, expected {need}",
                         len(payload))
    off = UPLINK_DIMS.size
    z = np.frombuffer(payload, WIRE_SCALAR, b * d_z, off).reshape(b, d_z)
    u = np.frombuffer(payload, WIRE_SCALAR, b * d_u, off + 4 * b * d_z).reshape(b, d_u)
    return SanitizedBatch(z.astype(np.float64), np.rint(u).astype(np.int64))


def encode_params(nets: Sequence[DenseNet]) -> bytes:
    parts = []
    for net in nets:
        for p in net.params():
            mat = p if p.ndim == 2 else p.reshape(1, -1)
            parts.append(TENSOR_DIMS.pack(*mat.shape))
            parts.append(mat.astype(WIRE_SCALAR).tobytes())
    return b"".join(parts)


def decode_params(payload: bytes, template: Sequence[DenseNet]) -> List[DenseNet]:
    """Rebuild classifier nets from wire tensors, taking activations from ``template``."""
    off, out = 0, []
    for net in template:
        layers = []
        for layer in net.layers:
            mats = []
            for ref in (layer.weight, layer.bias):
                if off + TENSOR_DIMS.size > len(payload):
                    raise ParseError("truncated parameter payload", off)
                rows, cols = TENSOR_DIMS.unpack_from(payload, off)
                off += TENSOR_DIMS.size
                if rows * cols != ref.size:
                    raise ParseError(f"tensor {rows}x{cols} does not match {ref.shape}", off)
                if off + 4 * rows * cols > len(payload):
                    raise ParseError("truncated parameter tensor", off)
                arr = np.frombuffer(payload, WIRE_SCALAR, rows * cols, off).astype(np.float64)
                off += 4 * rows * cols
                mats.append(arr.reshape(ref.shape))
            layers.append(Layer(mats[0], mats[1], layer.activation))
        out.append(DenseNet(layers))
    if off != len(payload):
        raise ParseError("trailing bytes after parameter tensors", off)
    return out


@dataclass(frozen=True)
class RoundMessage:
    direction: int
    round: int
    client_id: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return HEADER.pack(self.direction, self.round, self.client_id, len(self.payload)) + self.payload

    @property
    def byte_size(self) -> int:
        return HEADER.size + len(self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoundMessage":
        if len(data) < HEADER.size:
            raise ParseError("truncated message header", 0)
        direction, rnd, cid, plen = HEADER.unpack_from(data, 0)
        if direction not in (UPLINK, DOWNLINK):
            raise ParseError(f"unknown direction {direction}", 0)
        if len(data) != HEADER.size + plen:
            raise ParseError("payload length does not match header", HEADER.size)
        return cls(direction, rnd, cid, bytes(data[HEADER.size:]))


def uplink_message(round_idx: int, client_id: int, batch) -> RoundMessage:
    return RoundMessage(UPLINK, round_idx, client_id, encode_sanitized(batch))


def inspect_message(data: bytes) -> Dict[str, tuple]:
    """Decode a serialized message and list the named fields it carries with shapes."""
    msg = RoundMessage.from_bytes(data)
    if msg.direction == UPLINK:
        batch = decode_sanitized(msg.payload)
        return {"z": batch.z.shape, "u": batch.u.shape}
    fields, off, i = {}, 0, 0
    while off < len(msg.payload):
        rows, cols = TENSOR_DIMS.unpack_from(msg.payload, off)
        off += TENSOR_DIMS.size + 4 * rows * cols
        fields[f"psi.{i}"] = (rows, cols)
        i += 1
    return fields


# ---------------------------------------------------------------------------
# communication accounting

def comm_cost(b: int, d_z: int, d_u: int, bytes_per_scalar: int = WIRE_SCALAR.itemsize):
    """Per-client, per-round uplink ``(scalars, bytes)``: ``b * (d_z + d_u)`` scalars."""
    if min(b, d_z, d_u, bytes_per_scalar) < 0:
        raise DomainError("communication parameters must be non-negative")
    scalars = b * (d_z + d_u)
    return scalars, scalars * bytes_per_scalar


def crossover_check(b: int, d_z: int, d_u: int, encoder_param_count: int):
    """``(|theta| / (b (d_z + d_u)), sanitized upload is cheaper than a gradient)``."""
    scalars, _ = comm_cost(b, d_z, d_u)
    if scalars <= 0 or encoder_param_count <= 0:
        raise DomainError("crossover needs positive sizes")
    ratio = encoder_param_count / scalars
    return ratio, ratio > 1.0


@dataclass
class LedgerEntry:
    round: int
    client_id: int
    uplink_bytes: int = 0
    uplink_scalar_bytes: int = 0
    downlink_bytes: int = 0


@dataclass
class CommLedger:
    entries: List[LedgerEntry] = field(default_factory=list)

    @property
    def uplink_total(self) -> int:
        return sum(e.uplink_bytes for e in self.entries)

    @property
    def uplink_scalar_total(self) -> int:
        return sum(e.uplink_scalar_bytes for e in self.entries)

    @property
    def downlink_total(self) -> int:
        return sum(e.downlink_bytes for e in self.entries)

    def per_round(self) -> Dict[int, Tuple[int, int]]:
        out: Dict[int, Tuple[int, int]] = {}
        for e in self.entries:
            up, down = out.get(e.round, (0, 0))
            out[e.round] = (up + e.uplink_bytes, down + e.downlink_bytes)
        return out


class Transport:
    """In-process byte transport that records every serialized message."""

    def __init__(self):
        self.wire_log: List[bytes] = []

    def send(self, msg: RoundMessage) -> bytes:
        data = msg.to_bytes()
        self.wire_log.append(data)
        return data


# ---------------------------------------------------------------------------
# privacy bound

BOUND_ASSUMPTIONS = (
    "client datasets are mutually independent",
    "the aggregator is honest-but-curious",
    "clients transmit only sanitized z and utility labels u",
)


@dataclass(frozen=True)
class PrivacyBound:
    value: float
    epsilon: float
    delta: float
    assumptions: Tuple[str, ...] = BOUND_ASSUMPTIONS


def distributed_privacy_bound(epsilon: float, delta: float) -> PrivacyBound:
    """Upper bound ``epsilon + delta`` on what the pooled released view reveals
    about any one client's sensitive attribute."""
    if epsilon < 0 or delta < 0:
        raise DomainError("epsilon and delta must be non-negative")
    return PrivacyBound(epsilon + delta, epsilon, delta)


# ---------------------------------------------------------------------------
# protocol state

@dataclass
class FedConfig:
    batch_size: int = 64
    k: int = 2
    lr: float = 1e-4
    rounds: int = 100
    d_z: int = 80
    seed: int = 0
    encoder_hidden: tuple = (512, 256)
    classifier_hidden: tuple = (256, 128)
    # keep every round's uploads instead of discarding the pool after training
    replay_pool: bool = False
    # every client starts from the same publicly seeded encoder weights
    shared_init: bool = True


@dataclass
class ClientState:
    client_id: int
    data: LabeledDataset
    encoder: GaussianEncoder
    adversaries: List[DenseNet]
    beta: float
    lam: float
    enc_opt: AdamState
    adv_opts: List[AdamState]
    stream: BatchStream
    eps_rng: np.random.Generator
    utility_clfs: List[DenseNet] = field(default_factory=list)

    def sample_batch(self):
        idx = self.stream.next()
        mu, logvar = encode(self.encoder, self.data.x[idx])
        return idx, reparameterize(mu, logvar, self.eps_rng).z

    def release(self, x, mode="mean", rng=None):
        mu, logvar = encode(self.encoder, x)
        if mode == "mean":
            return mu
        return reparameterize(mu, logvar, rng).z


@dataclass
class AggregatorState:
    utility_clfs: List[DenseNet]
    opts: List[AdamState]
    pool: List[SanitizedBatch] = field(default_factory=list)


def init_protocol(data: LabeledDataset, shards: Sequence[Shard], cfg: FedConfig,
                  betas: Sequence[float], lams: Sequence[float]):
    if len(betas) != len(shards) or len(lams) != len(shards):
        raise ConfigError("one beta and one lambda per client are required")
    seen = set()
    for sh in shards:
        if len(sh.indices) == 0:
            raise ConfigError(f"client {sh.client_id} has an empty shard")
        ids = set(np.asarray(sh.indices).tolist())
        if ids & seen:
            raise ConfigError("shards must be pairwise disjoint")
        seen |= ids
    root = np.random.SeedSequence(cfg.seed)
    agg_ss, *client_ss = root.spawn(len(shards) + 1)
    agg_rng = np.random.default_rng(agg_ss)
    psi = [init_classifier(cfg.d_z, c, cfg.classifier_hidden, agg_rng) for c in data.u_card]
    agg = AggregatorState(psi, [AdamState.for_params(c.params()) for c in psi])
    common = init_encoder(data.d_x, cfg.d_z, agg_rng, cfg.encoder_hidden)
    clients = []
    for sh, ss, beta, lam in zip(shards, client_ss, betas, lams):
        init_ss, stream_ss, eps_ss = ss.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        local = data.subset(sh.indices)
        if cfg.shared_init:
            enc = common.copy()
        else:
            enc = init_encoder(data.d_x, cfg.d_z, init_rng, cfg.encoder_hidden)
        advs = [init_classifier(cfg.d_z, c, cfg.classifier_hidden, init_rng) for c in data.s_card]
        clients.append(ClientState(
            sh.client_id, local, enc, advs, float(beta), float(lam),
            AdamState.for_params(enc.params()),
            [AdamState.for_params(a.params()) for a in advs],
            BatchStream(local.n, cfg.batch_size, np.random.default_rng(stream_ss)),
            np.random.default_rng(eps_ss)))
    return clients, agg


def run_round(clients: List[ClientState], agg: AggregatorState, cfg: FedConfig,
              round_idx: int, ledger: CommLedger, transport: Transport = None) -> List[LedgerEntry]:
    """One round: client uploads, aggregator classifier steps and broadcast,
    then local adversary and encoder updates."""
    transport = transport or Transport()
    entries = {c.client_id: LedgerEntry(round_idx, c.client_id) for c in clients}

    # phase 1: local encoding and upload
    if not cfg.replay_pool:
        agg.pool = []
    for c in clients:
        idx, z = c.sample_batch()
        batch = SanitizedBatch(z, c.data.u[idx])
        wire = transport.send(uplink_message(round_idx, c.client_id, batch))
        entries[c.client_id].uplink_bytes += len(wire)
        entries[c.client_id].uplink_scalar_bytes += len(wire) - HEADER.size - UPLINK_DIMS.size
        agg.pool.append(decode_sanitized(RoundMessage.from_bytes(wire).payload))

    # phase 2: aggregator trains the shared utility classifiers on the pool
    z_pool = np.concatenate([p.z for p in agg.pool])
    u_pool = np.concatenate([p.u for p in agg.pool])
    for _ in range(cfg.k):
        for j, (clf, opt) in enumerate(zip(agg.utility_clfs, agg.opts)):
            _, grads, _ = classifier_loss(clf, z_pool, u_pool[:, j], need_input_grad=False)
            adam_step(clf.params(), grads, opt, cfg.lr)
    psi_bytes = encode_params(agg.utility_clfs)
    for c in clients:
        wire = transport.send(RoundMessage(DOWNLINK, round_idx, c.client_id, psi_bytes))
        entries[c.client_id].downlink_bytes += len(wire)
        c.utility_clfs = decode_params(RoundMessage.from_bytes(wire).payload, agg.utility_clfs)

    # phase 3: local adversaries, then one encoder step
    for c in clients:
        for _ in range(cfg.k):
            idx, z = c.sample_batch()
            for j, (adv, opt) in enumerate(zip(c.adversaries, c.adv_opts)):
                _, grads, _ = classifier_loss(adv, z, c.data.s[idx, j], need_input_grad=False)
                adam_step(adv.params(), grads, opt, cfg.lr)
        idx = c.stream.next()
        eps = c.eps_rng.standard_normal((idx.size, cfg.d_z))
        res = encoder_loss(c.encoder, c.data.x[idx], eps, c.data.u[idx], c.data.s[idx],
                           c.utility_clfs, c.adversaries, GppLossConfig(c.beta, c.lam))
        adam_step(c.encoder.params(), res.grads, c.enc_opt, cfg.lr)

    new = [entries[c.client_id] for c in clients]
    ledger.entries.extend(new)
    return new


@dataclass
class FederatedResult:
    clients: List[ClientState]
    aggregator: AggregatorState
    ledger: CommLedger
    transport: Transport

    def release(self, x: np.ndarray, owner: np.ndarray, mode: str = "mean",
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Encode each row with the encoder of the client that owns it."""
        owner = np.asarray(owner)
        out = np.empty((x.shape[0], self.clients[0].encoder.d_z))
        for c in self.clients:
            rows = np.flatnonzero(owner == c.client_id)
            if rows.size:
                out[rows] = c.release(x[rows], mode, rng)
        return out


def run_protocol(data: LabeledDataset, shards: Sequence[Shard], cfg: FedConfig,
                 betas: Sequence[float] = None, lams: Sequence[float] = None,
                 keep_wire_log: bool = False) -> FederatedResult:
    """Run ``cfg.rounds`` rounds of distributed GPP over horizontally partitioned shards."""
    t = len(shards)
    betas = [1.0] * t if betas is None else list(betas)
    lams = [0.01] * t if lams is None else list(lams)
    clients, agg = init_protocol(data, shards, cfg, betas, lams)
    ledger = CommLedger()
    transport = Transport()
    for r in range(cfg.rounds):
        run_round(clients, agg, cfg, r, ledger, transport)
        if not keep_wire_log:
            transport.wire_log.clear()
    return FederatedResult(clients, agg, ledger, transport)


def heterogeneous_betas(t: int, seed: int, low: float = 0.5, high: float = 1.5) -> List[float]:
    return np.random.default_rng(seed).uniform(low, high, size=t).tolist()
