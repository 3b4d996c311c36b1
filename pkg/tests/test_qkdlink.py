from __future__ import annotations

import uuid

import pytest

from qkdrelay.errors import (
    AlreadyConsumed,
    BadRequest,
    ConfigError,
    Exhausted,
    Unauthorized,
    UnknownKeyId,
    UnknownLink,
)
from qkdrelay.qkdlink import KeyManager, LinkId, LocalKeyClient

A, B, C = b"\xaa" * 16, b"\xbb" * 16, b"\xcc" * 16


def manager(seed=0, **kw) -> KeyManager:
    km = KeyManager(seed, **kw)
    km.add_link(LinkId(A, B))
    km.add_link(LinkId(B, C))
    return km


class TestLinkId:
    def test_unordered(self):
        assert LinkId(A, B) == LinkId(B, A)
        assert hash(LinkId(A, B)) == hash(LinkId(B, A))

    def test_peer(self):
        link = LinkId(B, A)
        assert link.peer(A) == B and link.peer(B) == A
        with pytest.raises(Unauthorized):
            link.peer(C)

    def test_self_link_rejected(self):
        with pytest.raises(ConfigError):
            LinkId(A, A)


class TestKeyLifecycle:
    def test_enc_then_dec_converges(self):
        km = manager()
        pads = km.get_enc_keys(LinkId(A, B), A, number=5, size_bits=256)
        back = km.get_dec_keys(LinkId(A, B), B, [p.key_id for p in pads])
        assert back == pads
        assert all(len(p.key) == 32 for p in pads)

    def test_key_ids_are_uuid4(self):
        (pad,) = manager().get_enc_keys(LinkId(A, B), A, 1, 256)
        assert uuid.UUID(pad.key_id).version == 4

    def test_double_fetch(self):
        km = manager()
        (pad,) = km.get_enc_keys(LinkId(A, B), A, 1, 256)
        km.get_dec_keys(LinkId(A, B), B, [pad.key_id])
        with pytest.raises(AlreadyConsumed):
            km.get_dec_keys(LinkId(A, B), B, [pad.key_id])

    def test_issuer_cannot_fetch_its_own_key(self):
        km = manager()
        (pad,) = km.get_enc_keys(LinkId(A, B), A, 1, 256)
        with pytest.raises(Unauthorized):
            km.get_dec_keys(LinkId(A, B), A, [pad.key_id])

    def test_unknown_key_id(self):
        with pytest.raises(UnknownKeyId):
            manager().get_dec_keys(LinkId(A, B), B, ["nope"])

    def test_dec_keys_is_all_or_nothing(self):
        km = manager()
        (pad,) = km.get_enc_keys(LinkId(A, B), A, 1, 256)
        with pytest.raises(UnknownKeyId):
            km.get_dec_keys(LinkId(A, B), B, [pad.key_id, "missing"])
        # the valid id was not consumed by the failed batch
        assert km.get_dec_keys(LinkId(A, B), B, [pad.key_id]) == [pad]

    def test_unknown_link(self):
        with pytest.raises(UnknownLink):
            manager().get_enc_keys(LinkId(A, C), A, 1, 256)

    def test_outsider_cannot_draw(self):
        with pytest.raises(Unauthorized):
            manager().get_enc_keys(LinkId(A, B), C, 1, 256)

    @pytest.mark.parametrize("number,size", [(0, 256), (129, 256), (1, 0), (1, 12)])
    def test_bad_requests(self, number, size):
        with pytest.raises(BadRequest):
            manager().get_enc_keys(LinkId(A, B), A, number, size)

    def test_finite_store_exhausts(self):
        km = manager(finite=True, max_key_count=3)
        km.get_enc_keys(LinkId(A, B), A, 2, 256)
        assert km.status(LinkId(A, B))["stored_key_count"] == 1
        with pytest.raises(Exhausted):
            km.get_enc_keys(LinkId(A, B), A, 2, 256)

    def test_duplicate_link(self):
        km = manager()
        with pytest.raises(ConfigError):
            km.add_link(LinkId(B, A))


class TestDeterminism:
    def test_same_seed_same_pad_stream(self):
        a, b = manager(seed=11), manager(seed=11)
        for km in (a, b):
            km.get_enc_keys(LinkId(B, C), B, 3, 512)
        assert a.pads_issued(LinkId(B, C)) == b.pads_issued(LinkId(B, C))

    def test_links_have_independent_streams(self):
        km = manager(seed=11)
        (p1,) = km.get_enc_keys(LinkId(A, B), A, 1, 256)
        (p2,) = km.get_enc_keys(LinkId(B, C), B, 1, 256)
        assert p1.key != p2.key

    def test_stream_does_not_depend_on_other_links(self):
        plain = manager(seed=4)
        busy = manager(seed=4)
        busy.get_enc_keys(LinkId(B, C), B, 10, 256)
        assert plain.get_enc_keys(LinkId(A, B), A, 1, 256) == busy.get_enc_keys(LinkId(A, B), A, 1, 256)


class TestStatusAndClient:
    def test_status_fields(self):
        doc = manager().status(LinkId(A, B))
        assert doc["key_size"] == 256
        assert doc["max_key_count"] == doc["stored_key_count"] == 100_000
        assert doc["max_key_per_request"] == 128
        assert {"source_KME_ID", "target_KME_ID", "master_SAE_ID", "slave_SAE_ID"} <= doc.keys()

    def test_local_client(self):
        km = manager()
        alice, bob = LocalKeyClient(km, A), LocalKeyClient(km, B)
        pads = alice.enc_keys(B, 2, 128)
        assert bob.dec_keys(A, [p.key_id for p in pads]) == pads

    def test_draw_link_pad_consumes(self):
        km = manager()
        pad = km.draw_link_pad(LinkId(A, B), A, 48)
        assert len(pad.key) == 48
        with pytest.raises(AlreadyConsumed):
            km.get_dec_keys(LinkId(A, B), B, [pad.key_id])

    def test_import_keys(self):
        issuer, mirror = manager(seed=1), manager(seed=2)
        pads = issuer.get_enc_keys(LinkId(A, B), A, 2, 256)
        mirror.import_keys(LinkId(A, B), B, pads)
        assert mirror.get_dec_keys(LinkId(A, B), B, [p.key_id for p in pads]) == pads
        with pytest.raises(BadRequest):
            mirror.import_keys(LinkId(A, B), B, pads)
