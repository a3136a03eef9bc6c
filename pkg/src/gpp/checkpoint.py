"""Binary checkpoints for trained models and in-flight trainers.

Layout (little-endian)::

    b"GPP1" | u32 version | block*

    block = u32 name_len | name (utf-8) | u32 rows | u32 cols | f64[rows*cols]

Structure that is not a tensor (activations, config, Adam step counts, RNG
states) travels as utf-8 JSON inside a ``__meta__`` block, one byte per f64
entry. The last block, ``__end__``, holds the CRC32 of everything before it,
so both truncation and bit rot are caught before a model is built.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Dict, List, Tuple

import numpy as np

from .encoder import GaussianEncoder
from .errors import CheckpointError
from .nn import AdamState, DenseNet, Layer
from .trainer import GppTrainer, TrainConfig, TrainedModel

MAGIC = b"GPP1"
VERSION = 1
_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<II")


# -- block codec -------------------------------------------------------------

def _block(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise CheckpointError(f"block {name!r} must be 1-D or 2-D")
    raw = name.encode("utf-8")
    return (_U32.pack(len(raw)) + raw + _DIMS.pack(*arr.shape)
            + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode_blocks(blocks: List[Tuple[str, np.ndarray]]) -> bytes:
    body = MAGIC + _U32.pack(VERSION) + b"".join(_block(n, a) for n, a in blocks)
    return body + _block("__end__", np.array([[float(zlib.crc32(body))]]))


def decode_blocks(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not a GPP1 checkpoint (bad magic)")
    (version,) = _U32.unpack_from(data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: Dict[str, np.ndarray] = {}
    pos = 8
    while True:
        start = pos
        try:
            (nlen,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + nlen > len(data):
                raise struct.error
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = _DIMS.unpack_from(data, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(f"corrupt or truncated block header at byte {start}") from None
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise CheckpointError(f"block {name!r} truncated at byte {pos}")
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
        pos += nbytes
        if name == "__end__":
            if arr.size != 1 or int(arr[0]) != zlib.crc32(data[:start]):
                raise CheckpointError("checksum mismatch; file is corrupt")
            if pos != len(data):
                raise CheckpointError("trailing bytes after end block")
            return out
        if name in out:
            raise CheckpointError(f"duplicate block {name!r}")
        out[name] = arr.reshape(rows, cols).astype(np.float64)
        if pos >= len(data):
            raise CheckpointError("missing end block; file is truncated")


def _text_block(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _read_text(arr: np.ndarray):
    return json.loads(arr.ravel().astype(np.uint8).tobytes().decode("utf-8"))


# -- model <-> blocks --------------------------------------------------------

def _net_blocks(prefix: str, net: DenseNet):
    for i, layer in enumerate(net.layers):
        yield f"{prefix}.{i}.W", layer.weight
        yield f"{prefix}.{i}.b", layer.bias


def _net_from(blocks, prefix: str, activations: List[str]) -> DenseNet:
    try:
        return DenseNet([Layer(blocks[f"{prefix}.{i}.W"].copy(),
                               blocks[f"{prefix}.{i}.b"].ravel().copy(), act)
                         for i, act in enumerate(activations)])
    except KeyError as exc:
        raise CheckpointError(f"missing block {exc.args[0]}") from None


def _acts(net: DenseNet) -> List[str]:
    return [l.activation for l in net.layers]


def _model_parts(model: TrainedModel):
    enc = model.encoder
    nets = [("enc.trunk", enc.trunk), ("enc.mean", enc.mean_head), ("enc.logvar", enc.logvar_head)]
    nets += [(f"util.{j}", c) for j, c in enumerate(model.utility_clfs)]
    nets += [(f"adv.{j}", c) for j, c in enumerate(model.adversary_clfs)]
    return nets


def _model_meta(model: TrainedModel) -> dict:
    return {
        "activations": {p: _acts(n) for p, n in _model_parts(model)},
        "n_util": len(model.utility_clfs), "n_adv": len(model.adversary_clfs),
        "method": model.method, "noise_scale": model.noise_scale,
        "config": model.config.to_dict() if model.config is not None else None,
        "trace_keys": sorted(model.traces),
    }


def _model_blocks(model: TrainedModel):
    blocks = []
    for prefix, net in _model_parts(model):
        blocks.extend(_net_blocks(prefix, net))
    for key in sorted(model.traces):
        blocks.append((f"trace.{key}", np.asarray(model.traces[key], dtype=np.float64)))
    return blocks


def _model_from(blocks, meta) -> TrainedModel:
    acts = meta["activations"]
    enc = GaussianEncoder(_net_from(blocks, "enc.trunk", acts["enc.trunk"]),
                          _net_from(blocks, "enc.mean", acts["enc.mean"]),
                          _net_from(blocks, "enc.logvar", acts["enc.logvar"]))
    util = [_net_from(blocks, f"util.{j}", acts[f"util.{j}"]) for j in range(meta["n_util"])]
    adv = [_net_from(blocks, f"adv.{j}", acts[f"adv.{j}"]) for j in range(meta["n_adv"])]
    traces = {k: blocks[f"trace.{k}"].ravel().tolist() if f"trace.{k}" in blocks else []
              for k in meta["trace_keys"]}
    cfg = TrainConfig(**meta["config"]) if meta["config"] else None
    return TrainedModel(enc, util, adv, traces, meta["method"], meta["noise_scale"], cfg)


def _adam_blocks(prefix: str, state: AdamState):
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        yield f"{prefix}.m.{i}", m
        yield f"{prefix}.v.{i}", v


def _adam_meta(state: AdamState) -> dict:
    return {"n": len(state.m), "step": state.step, "beta1": state.beta1,
            "beta2": state.beta2, "eps": state.eps}


def _adam_from(blocks, prefix: str, meta: dict, params) -> AdamState:
    try:
        m = [blocks[f"{prefix}.m.{i}"].reshape(p.shape).copy() for i, p in enumerate(params)]
        v = [blocks[f"{prefix}.v.{i}"].reshape(p.shape).copy() for i, p in enumerate(params)]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad optimizer state for {prefix}: {exc}") from None
    return AdamState(m, v, meta["step"], meta["beta1"], meta["beta2"], meta["eps"])


# -- public API --------------------------------------------------------------

def _atomic_write(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gpp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(obj) -> bytes:
    """Serialize a :class:`TrainedModel` or a whole :class:`GppTrainer`."""
    if isinstance(obj, GppTrainer):
        model = obj.model
        meta = {"kind": "trainer", "model": _model_meta(model),
                "epoch": obj.epoch, "iteration": obj.iteration,
                "stream_pos": obj.p1_stream.pos,
                "rngs": {name: getattr(obj, name).bit_generator.state
                         for name in ("p2_rng", "eps_rng", "noise_rng")},
                "stream_rng": obj.p1_stream.rng.bit_generator.state,
                "enc_opt": _adam_meta(obj.enc_opt),
                "util_opt": [_adam_meta(s) for s in obj.util_opt],
                "adv_opt": [_adam_meta(s) for s in obj.adv_opt]}
        blocks = [("__meta__", _text_block(meta))] + _model_blocks(model)
        blocks += list(_adam_blocks("opt.enc", obj.enc_opt))
        for j, s in enumerate(obj.util_opt):
            blocks += list(_adam_blocks(f"opt.util.{j}", s))
        for j, s in enumerate(obj.adv_opt):
            blocks += list(_adam_blocks(f"opt.adv.{j}", s))
        blocks.append(("stream.perm", obj.p1_stream.perm.astype(np.float64)))
    elif isinstance(obj, TrainedModel):
        meta = {"kind": "model", "model": _model_meta(obj)}
        blocks = [("__meta__", _text_block(meta))] + _model_blocks(obj)
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    return encode_blocks(blocks)


def save_checkpoint(obj, path: str) -> None:
    _atomic_write(path, checkpoint_bytes(obj))


def _read(path: str):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    blocks = decode_blocks(data)
    if "__meta__" not in blocks:
        raise CheckpointError("checkpoint has no metadata block")
    try:
        meta = _read_text(blocks["__meta__"])
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError("metadata block is not valid JSON") from None
    return blocks, meta


def load_checkpoint(path: str) -> TrainedModel:
    """Load the model stored at ``path`` (from either checkpoint kind)."""
    blocks, meta = _read(path)
    try:
        return _model_from(blocks, meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed model in checkpoint: {exc}") from None


def load_trainer(path: str, data) -> GppTrainer:
    """Rebuild a trainer so that ``run()`` continues the saved trajectory."""
    blocks, meta = _read(path)
    if meta.get("kind") != "trainer":
        raise CheckpointError("checkpoint holds a model only, not trainer state")
    try:
        model = _model_from(blocks, meta["model"])
        trainer = GppTrainer(data, model.config, model.method, model.noise_scale)
        trainer.model = model
        trainer.enc_opt = _adam_from(blocks, "opt.enc", meta["enc_opt"], model.encoder.params())
        trainer.util_opt = [_adam_from(blocks, f"opt.util.{j}", s, c.params())
                            for j, (s, c) in enumerate(zip(meta["util_opt"], model.utility_clfs))]
        trainer.adv_opt = [_adam_from(blocks, f"opt.adv.{j}", s, c.params())
                           for j, (s, c) in enumerate(zip(meta["adv_opt"], model.adversary_clfs))]
        for name, state in meta["rngs"].items():
            getattr(trainer, name).bit_generator.state = state
        stream = trainer.p1_stream
        stream.rng.bit_generator.state = meta["stream_rng"]
        stream.perm = blocks["stream.perm"].ravel().astype(np.int64)
        stream.pos = meta["stream_pos"]
        if stream.perm.size != data.n:
            raise CheckpointError("checkpoint was taken on a dataset of a different size")
        trainer.epoch = meta["epoch"]
        trainer.iteration = meta["iteration"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed trainer state: {exc}") from None
    return trainer
