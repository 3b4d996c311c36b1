from __future__ import annotations

import pytest

from qkdrelay.crypto import KEM_CIPHERTEXT_LEN, RngContext, kdf_expand, kem_decapsulate
from qkdrelay.errors import AuthError, ConfigError, DecryptError, LinkMissing, UnknownNode
from qkdrelay.onioncodec import Variant, onion_size
from qkdrelay.protocols import (
    Circuit,
    KemDirectory,
    kr_run,
    node_layer_key,
    orr_ext_run,
    orr_run,
    orr_setup,
    run_model,
    tn_run,
    trusted_node,
)
from qkdrelay.simnet import routing_view

from .conftest import line_network, needs_dilithium, needs_falcon


def no_pad_reuse(transcript) -> bool:
    ids = [p.key_id for pads in transcript.pads.values() for p in pads]
    return len(ids) == len(set(ids))


class TestCircuit:
    def test_invariants(self):
        a, b = b"a" * 16, b"b" * 16
        with pytest.raises(ConfigError):
            Circuit(a, ())
        with pytest.raises(ConfigError):
            Circuit(a, (b, a))

    def test_missing_link(self):
        net, circuit = line_network(3)
        skip = Circuit(circuit.initiator, (circuit.hops[1], circuit.hops[2]))
        with pytest.raises(LinkMissing):
            kr_run(net, skip, rng=RngContext(0))

    def test_positions(self):
        _, c = line_network(4)
        assert c.position(c.initiator) == 0 and c.position(c.destination) == 4
        assert c.intermediates == c.hops[:3]


class TestKr:
    def test_direct_neighbour(self):
        net, c = line_network(1)
        t = kr_run(net, c, rng=RngContext(1))
        assert t.ok and t.n == 1
        assert t.audit().by_role("intermediate") == []

    def test_n5_every_intermediate_sees_s(self):
        net, c = line_network(5)
        t = kr_run(net, c, rng=RngContext(2))
        assert t.ok
        for node in c.intermediates:
            assert any(data == t.secret for _, data in t.observations.entries(node))
        assert t.audit().ok

    def test_round_trip_100(self):
        net, c = line_network(4, seed=3)
        for i in range(100):
            t = kr_run(net, c, rng=RngContext(3).derive(i))
            assert t.delivered_secret == t.secret
            assert no_pad_reuse(t)

    def test_given_secret_is_used(self):
        net, c = line_network(2)
        s = bytes(range(32))
        assert kr_run(net, c, s, rng=RngContext(0)).delivered_secret == s

    def test_metrics(self):
        net, c = line_network(3)
        t = kr_run(net, c, rng=RngContext(0))
        assert 0 <= t.encryption_time <= t.distribution_time
        assert t.wire_total == 32 * 3


class TestTn:
    def test_trusted_node_choice(self):
        for n, idx in [(2, 0), (3, 1), (5, 2), (11, 5)]:
            _, c = line_network(n)
            assert trusted_node(c) == c.hops[idx]

    def test_needs_a_relay(self):
        net, c = line_network(1)
        with pytest.raises(ConfigError):
            tn_run(net, c, rng=RngContext(0))

    def test_n2(self):
        net, c = line_network(2)
        t = tn_run(net, c, rng=RngContext(4))
        assert t.ok and t.trusted == c.hops[0]

    @pytest.mark.parametrize("n", [3, 5, 8])
    def test_lattice(self, n):
        net, c = line_network(n)
        t = tn_run(net, c, rng=RngContext(n))
        assert t.ok
        rep = t.audit()
        assert rep.ok
        assert not any(v.observes_secret for v in rep.verdicts if v.role in ("intermediate", "trusted"))
        (tv,) = rep.by_role("trusted")
        assert tv.reconstructs_with_pad

    def test_trusted_log_xor_each_link_pad(self):
        # independent check: some logged aggregate XOR every link pad gives S
        net, c = line_network(5)
        t = tn_run(net, c, rng=RngContext(5))
        logged = [d for _, d in t.observations.entries(t.trusted, "tn-aggregate")]
        for link, pads in t.pads.items():
            assert any(bytes(x ^ y for x, y in zip(a, p.key)) == t.secret for a in logged for p in pads), link

    def test_xor_work_linear(self):
        counts = []
        for n in (3, 5, 7, 9):
            net, c = line_network(n)
            counts.append(tn_run(net, c, rng=RngContext(0)).counters["tn_xor_bytes"])
        assert counts == [32 * (n - 1) for n in (3, 5, 7, 9)]

    def test_round_trip_100(self):
        net, c = line_network(4, seed=6)
        for i in range(100):
            t = tn_run(net, c, rng=RngContext(6).derive(i))
            assert t.delivered_secret == t.secret
            assert no_pad_reuse(t)


class TestOrrSetup:
    def test_keys_converge(self):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(1))
        for hop, key in zip(c.hops, keys):
            assert node_layer_key(net, hop) == key

    def test_five_kem_ciphertexts_on_wire(self):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(1))
        setup_msgs = [r for r in keys.bytes_on_wire if r.kind == "setup"]
        # hop j's ciphertext crosses j links; only the last crossing is bare
        bare = [r for r in setup_msgs if r.n_bytes == KEM_CIPHERTEXT_LEN]
        assert len(bare) == 5
        assert len(setup_msgs) == sum(range(1, 6))

    def test_keys_match_independent_decapsulation(self):
        net, c = line_network(4)
        keys = orr_setup(net, c, rng=RngContext(2))
        assert keys.setup_time > 0
        for hop, key in zip(c.hops, keys):
            # the first cell a hop unpads is its own KEM ciphertext
            phase, ct = keys.observations.entries(hop, "setup-link")[0]
            assert len(ct) == KEM_CIPHERTEXT_LEN
            ss = kem_decapsulate(net.kem_keypair(hop).secret_key, ct)
            assert kdf_expand(ss, "enc") == key.enc_key
            assert kdf_expand(ss, "mac") == key.mac_key

    def test_unregistered_hop(self):
        net, c = line_network(3)
        directory = KemDirectory.from_network(net, c.hops[:2])
        with pytest.raises(UnknownNode):
            orr_setup(net, c, directory, rng=RngContext(0))

    def test_hops_learn_only_their_successor_during_setup(self):
        net, c = line_network(4)
        keys = orr_setup(net, c, rng=RngContext(3))
        for i, node in enumerate(c.intermediates, start=1):
            assert routing_view(keys.observations, node, list(c.path), phase="setup-peel") == {c.path[i + 1]}


class TestOrr:
    def test_round_trip_random_circuits(self):
        for i, n in enumerate([3, 5, 7, 9, 11]):
            net, c = line_network(n, seed=100 + i)
            keys = orr_setup(net, c, rng=RngContext(i))
            for j in range(5):
                t = orr_run(net, c, keys, rng=RngContext(i).derive(j))
                assert t.ok and no_pad_reuse(t)

    def test_lattice_and_anonymity(self):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(0))
        t = orr_run(net, c, keys, rng=RngContext(1))
        assert t.audit().ok
        for i, node in enumerate(c.intermediates, start=1):
            assert routing_view(t.observations, node, list(c.path)) == {c.path[i + 1]}

    def test_wire_sizes_shrink(self):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(0))
        t = orr_run(net, c, keys, rng=RngContext(1))
        sizes = [r.n_bytes - 3 for r in t.bytes_on_wire if r.kind == "onion"]
        assert sizes == [256, 208, 160, 112, 64]

    def test_aes_link_cipher(self):
        net, c = line_network(3)
        keys = orr_setup(net, c, rng=RngContext(0))
        assert orr_run(net, c, keys, rng=RngContext(1), link_cipher="aes").ok

    def test_tamper_is_not_authenticated(self):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(0))
        with pytest.raises(DecryptError) as info:
            orr_run(net, c, keys, rng=RngContext(1), tamper_hop=2, tamper_offset=0)
        assert info.value.hop == 3

    def test_setup_mismatch(self):
        net, c = line_network(3)
        keys = orr_setup(net, c, rng=RngContext(0))
        net2, c2 = line_network(4)
        with pytest.raises(ConfigError):
            orr_run(net2, c2, keys, rng=RngContext(0))


class TestOrrExt:
    def test_hmac_round_trip(self):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(0))
        t = orr_ext_run(net, c, keys, Variant.EXT_HMAC256, rng=RngContext(1))
        assert t.ok and t.audit().ok
        assert t.counters["auth_bytes"] > 0
        onion = [r.n_bytes - 3 for r in t.bytes_on_wire if r.kind == "onion"]
        assert onion == [onion_size(Variant.EXT_HMAC256, k) for k in range(5, 0, -1)]

    @pytest.mark.parametrize("hop", [0, 1, 2, 3])
    def test_tamper_detected_at_next_hop(self, hop):
        net, c = line_network(5)
        keys = orr_setup(net, c, rng=RngContext(0))
        with pytest.raises(AuthError) as info:
            orr_ext_run(net, c, keys, Variant.EXT_HMAC256, rng=RngContext(1), tamper_hop=hop, tamper_offset=5)
        assert info.value.hop == hop + 1
        # the destination never got a frame
        assert info.value.transcript.delivered_secret is None

    def test_auth_bytes_superlinear(self):
        totals = {}
        for n in (3, 11):
            net, c = line_network(n)
            keys = orr_setup(net, c, rng=RngContext(0))
            totals[n] = orr_ext_run(net, c, keys, rng=RngContext(1)).counters["auth_bytes"]
        assert totals[11] / totals[3] > 11 / 3

    def test_rejects_basic_variant(self):
        net, c = line_network(2)
        keys = orr_setup(net, c, rng=RngContext(0))
        with pytest.raises(ConfigError):
            orr_ext_run(net, c, keys, Variant.ORR, rng=RngContext(0))

    @needs_falcon
    def test_falcon(self):
        net, c = line_network(3)
        keys = orr_setup(net, c, rng=RngContext(0))
        assert orr_ext_run(net, c, keys, Variant.EXT_FALCON1024, rng=RngContext(1)).ok

    @needs_dilithium
    def test_dilithium(self):
        net, c = line_network(2)
        keys = orr_setup(net, c, rng=RngContext(0))
        assert orr_ext_run(net, c, keys, Variant.EXT_DILITHIUM3, rng=RngContext(1)).ok


class TestDeterminism:
    @pytest.mark.parametrize("model", ["kr", "tn", "orr", "orr-ext"])
    def test_identical_transcripts(self, model):
        def once():
            net, c = line_network(4, seed=42)
            t = run_model(net, c, model, rng=RngContext(7))
            return t.secret, t.delivered_secret, t.bytes_on_wire, t.observations.snapshot(), t.pads

        assert once() == once()
