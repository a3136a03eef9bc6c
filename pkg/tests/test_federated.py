import numpy as np
import pytest

from gpp.data import Shard, gen_correlated_synthetic, partition_horizontal
from gpp.errors import ConfigError, DomainError, ParseError, ProtocolViolation
from gpp.federated import (DOWNLINK, HEADER, UPLINK, UPLINK_DIMS, FedConfig, RoundMessage,
                           SanitizedBatch, comm_cost, crossover_check, decode_sanitized,
                           distributed_privacy_bound, encode_sanitized, heterogeneous_betas,
                           init_protocol, inspect_message, run_protocol, uplink_message)
from gpp.objective import DiscreteJoint, conditional_mi, exact_mi_discrete

CFG = dict(batch_size=16, k=2, lr=1e-3, d_z=3, encoder_hidden=(8,), classifier_hidden=(4,))


@pytest.fixture(scope="module")
def fed_data():
    ds = gen_correlated_synthetic(300, 8, 0.0, 0)
    return ds, partition_horizontal(ds, 3, seed=0)


def test_uplink_wire_layout():
    z = np.array([[1.5, -2.0]])
    msg = uplink_message(7, 2, SanitizedBatch(z, np.array([[3]]))).to_bytes()
    assert msg[:HEADER.size] == bytes([0]) + (7).to_bytes(4, "little") + (2).to_bytes(4, "little") \
        + (24).to_bytes(4, "little")
    body = msg[HEADER.size:]
    assert body[:12] == b"\x01\x00\x00\x00\x02\x00\x00\x00\x01\x00\x00\x00"
    np.testing.assert_array_equal(np.frombuffer(body[12:], "<f4"), [1.5, -2.0, 3.0])


def test_uplink_round_trip():
    rng = np.random.default_rng(0)
    batch = SanitizedBatch(rng.standard_normal((5, 3)), rng.integers(0, 4, (5, 2)))
    back = decode_sanitized(encode_sanitized(batch))
    np.testing.assert_allclose(back.z, batch.z, rtol=1e-6)
    np.testing.assert_array_equal(back.u, batch.u)


def test_uplink_refuses_anything_but_sanitized_batch():
    with pytest.raises(ProtocolViolation):
        encode_sanitized({"z": np.zeros((1, 2)), "s": np.zeros((1, 1))})
    with pytest.raises(ProtocolViolation):
        SanitizedBatch(np.zeros((2, 2)), np.zeros((3, 1)))


def test_truncated_messages():
    data = uplink_message(0, 0, SanitizedBatch(np.zeros((2, 2)), np.zeros((2, 1)))).to_bytes()
    with pytest.raises(ParseError):
        RoundMessage.from_bytes(data[:-1])
    with pytest.raises(ParseError):
        decode_sanitized(data[HEADER.size:-4])


def test_no_raw_features_or_sensitive_labels_on_the_wire(fed_data):
    ds, shards = fed_data
    res = run_protocol(ds, shards, FedConfig(**CFG, rounds=5), keep_wire_log=True)
    log = res.transport.wire_log
    assert len(log) == 5 * 3 * 2
    for wire in log:
        fields = inspect_message(wire)
        direction = wire[0]
        if direction == UPLINK:
            assert set(fields) == {"z", "u"}
            assert fields["z"][1] == 3 and fields["u"][1] == 1
        else:
            assert direction == DOWNLINK
            assert all(k.startswith("psi.") for k in fields)


def test_comm_cost_values():
    assert comm_cost(64, 256, 1) == (16448, 65792)
    assert comm_cost(0, 0, 0) == (0, 0)
    with pytest.raises(DomainError):
        comm_cost(-1, 2, 1)


def test_crossover_values():
    ratio, cheaper = crossover_check(64, 256, 1, 500_000)
    assert ratio == pytest.approx(30.4, abs=0.05) and cheaper
    assert crossover_check(64, 256, 1, 16448) == (1.0, False)
    assert not crossover_check(64, 256, 1, 100)[1]


def test_ledger_matches_formula_and_wire(fed_data):
    ds, shards = fed_data
    rounds = 4
    res = run_protocol(ds, shards, FedConfig(**CFG, rounds=rounds), keep_wire_log=True)
    _, per_client = comm_cost(16, 3, 1)
    assert res.ledger.uplink_scalar_total == per_client * rounds * len(shards)
    sent_up = sum(len(w) for w in res.transport.wire_log if w[0] == UPLINK)
    sent_down = sum(len(w) for w in res.transport.wire_log if w[0] == DOWNLINK)
    assert res.ledger.uplink_total == sent_up
    assert res.ledger.downlink_total == sent_down
    assert sent_up - res.ledger.uplink_scalar_total == rounds * 3 * (HEADER.size + UPLINK_DIMS.size)
    per_round = res.ledger.per_round()
    assert sum(u for u, _ in per_round.values()) == sent_up


def test_zero_rounds_changes_nothing(fed_data):
    ds, shards = fed_data
    cfg = FedConfig(**CFG, rounds=0)
    res = run_protocol(ds, shards, cfg)
    fresh, _ = init_protocol(ds, shards, cfg, [1.0] * 3, [0.01] * 3)
    assert res.ledger.entries == []
    for a, b in zip(res.clients, fresh):
        assert all(np.array_equal(p, q) for p, q in zip(a.encoder.params(), b.encoder.params()))


def test_protocol_is_deterministic(fed_data):
    ds, shards = fed_data
    cfg = FedConfig(**CFG, rounds=3)
    a, b = run_protocol(ds, shards, cfg), run_protocol(ds, shards, cfg)
    for ca, cb in zip(a.clients, b.clients):
        assert all(np.array_equal(p, q) for p, q in zip(ca.encoder.params(), cb.encoder.params()))


def test_release_uses_owner_encoder(fed_data):
    ds, shards = fed_data
    res = run_protocol(ds, shards, FedConfig(**CFG, rounds=2, shared_init=False))
    x = ds.x[:4]
    z = res.release(x, np.array([0, 1, 2, 0]))
    np.testing.assert_array_equal(z[1], res.clients[1].release(x[1:2])[0])
    assert not np.allclose(z[1], res.clients[0].release(x[1:2])[0])


def test_empty_and_overlapping_shards(fed_data):
    ds, _ = fed_data
    cfg = FedConfig(**CFG, rounds=1)
    with pytest.raises(ConfigError):
        run_protocol(ds, [Shard(0, np.arange(10)), Shard(1, np.array([], int))], cfg)
    with pytest.raises(ConfigError):
        run_protocol(ds, [Shard(0, np.arange(10)), Shard(1, np.arange(5, 15))], cfg)
    with pytest.raises(ConfigError):
        run_protocol(ds, [Shard(0, np.arange(10))], cfg, betas=[1.0, 2.0])


def test_heterogeneous_betas_range():
    b = heterogeneous_betas(50, seed=0)
    assert len(b) == 50 and min(b) >= 0.5 and max(b) <= 1.5


# -- discrete two-client simulation ------------------------------------------

def _client_joint(rng):
    """P(z, u, s) for one client: x in 4 cells, u and s binary, z | x over 3 cells."""
    p_xus = rng.dirichlet(np.ones(16)).reshape(4, 2, 2)
    channel = rng.dirichlet(np.ones(3), size=4)  # P(z | x)
    return np.einsum("xus,xz->zus", p_xus, channel)


@pytest.mark.parametrize("seed", range(10))
def test_pooled_view_respects_bound(seed):
    rng = np.random.default_rng(seed)
    j1, j2 = _client_joint(rng), _client_joint(rng)
    full = np.einsum("abc,def->abcdef", j1, j2)  # z1 u1 s1 z2 u2 s2
    # what the aggregator sees: (z1, u1, z2, u2); target: s1
    view_s1 = full.sum(axis=5).transpose(0, 1, 3, 4, 2).reshape(-1, 2)
    leak, _, _ = exact_mi_discrete(DiscreteJoint(view_s1))
    eps, _, _ = exact_mi_discrete(DiscreteJoint(j1.sum(axis=1)))
    delta = conditional_mi(j1.transpose(1, 2, 0))  # I(U; S | Z)
    assert leak <= distributed_privacy_bound(eps, delta).value + 1e-9

    # client 1's stream says nothing about client 2's sensitive labels
    stream1_s2 = full.sum(axis=(2, 3, 4)).reshape(-1, 2)
    assert exact_mi_discrete(DiscreteJoint(stream1_s2))[0] < 1e-9


def test_privacy_bound_values():
    assert distributed_privacy_bound(0.0, 0.0).value == 0.0
    b = distributed_privacy_bound(0.1, 0.02)
    assert b.value == pytest.approx(0.12) and len(b.assumptions) == 3
    with pytest.raises(DomainError):
        distributed_privacy_bound(-0.1, 0.0)
