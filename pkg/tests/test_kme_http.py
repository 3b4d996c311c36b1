from __future__ import annotations

import base64
import json
import socket
import subprocess
import sys
import urllib.error
import urllib.request

import pytest

from qkdrelay.errors import AlreadyConsumed, BadRequest, UnknownKeyId, UnknownLink
from qkdrelay.kme_http import Etsi014Client, KmeHttpServer, decode_keys, encode_keys
from qkdrelay.qkdlink import KeyManager, LinkId, QkdPad

A, B = b"\x0a" * 16, b"\x0b" * 16


def _manager(seed=0):
    km = KeyManager(seed)
    km.add_link(LinkId(A, B))
    return km


@pytest.fixture
def pair():
    """Two endpoints, each with its own key manager, wired as peers."""
    kb = KmeHttpServer(_manager(1), local_sae=B).start()
    ka = KmeHttpServer(_manager(1), local_sae=A, peers={B: kb.url}).start()
    yield Etsi014Client(ka.url), Etsi014Client(kb.url)
    ka.stop()
    kb.stop()


def _post(url, body: bytes):
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    return urllib.request.urlopen(req, timeout=5)


class TestContainers:
    def test_round_trip(self):
        pads = [QkdPad("id-1", b"\x00\xff" * 16)]
        assert decode_keys(json.loads(json.dumps(encode_keys(pads)))) == pads

    def test_rejects_bad_base64(self):
        with pytest.raises(BadRequest):
            decode_keys({"keys": [{"key_ID": "x", "key": "!!"}]})


class TestEndpoints:
    def test_status_schema(self, pair):
        alice, _ = pair
        doc = alice.status(B)
        assert doc["key_size"] == 256
        assert doc["master_SAE_ID"] == A.hex() and doc["slave_SAE_ID"] == B.hex()
        for field in ("stored_key_count", "max_key_count", "max_key_per_request", "max_key_size", "min_key_size"):
            assert isinstance(doc[field], int)

    def test_enc_dec_convergence(self, pair):
        alice, bob = pair
        pads = alice.enc_keys(B, number=4, size_bits=256)
        assert bob.dec_keys(A, [p.key_id for p in pads]) == pads

    def test_double_fetch(self, pair):
        alice, bob = pair
        (pad,) = alice.enc_keys(B, 1)
        bob.dec_keys(A, [pad.key_id])
        with pytest.raises(AlreadyConsumed):
            bob.dec_keys(A, [pad.key_id])

    def test_unknown_key_id(self, pair):
        _, bob = pair
        with pytest.raises(UnknownKeyId):
            bob.dec_keys(A, ["00000000-0000-4000-8000-000000000000"])

    def test_unknown_link_is_404(self, pair):
        alice, _ = pair
        with pytest.raises(UnknownLink):
            alice.enc_keys(b"\x0c" * 16, 1)

    def test_malformed_dec_keys_body_is_400(self, pair):
        _, bob = pair
        with pytest.raises(urllib.error.HTTPError) as info:
            _post(f"{bob.base_url}/api/v1/keys/{A.hex()}/dec_keys", b"{not json")
        assert info.value.code == 400
        doc = json.loads(info.value.read())
        assert doc["details"][0]["error"] == "BadRequest"

    def test_post_enc_keys(self, pair):
        alice, _ = pair
        with _post(f"{alice.base_url}/api/v1/keys/{B.hex()}/enc_keys", json.dumps({"number": 2, "size": 128}).encode()) as resp:
            doc = json.loads(resp.read())
        assert len(doc["keys"]) == 2
        assert all(len(base64.b64decode(k["key"])) == 16 for k in doc["keys"])

    def test_header_mode(self):
        with KmeHttpServer(_manager()) as srv:
            alice, bob = Etsi014Client(srv.url, sae_id=A), Etsi014Client(srv.url, sae_id=B)
            pads = alice.enc_keys(B, 2)
            assert bob.dec_keys(A, [p.key_id for p in pads]) == pads


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _serve(tmp_path, name, port, text):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(text)
    proc = subprocess.Popen(
        [sys.executable, "-m", "qkdrelay", "--skip-backend-check", "kms", "serve", "--port", str(port), "--config", str(cfg)],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    line = proc.stdout.readline()
    assert "listening" in line, proc.stderr.read()
    return proc


class TestServeCommand:
    def test_two_processes_converge(self, tmp_path):
        from qkdrelay.cli import node_id

        pb, pa = _free_port(), _free_port()
        links = "[links]\nalice = bob\n"
        bob_proc = _serve(tmp_path, "bob", pb, f"[kms]\nseed = 3\nlocal = bob\n{links}")
        alice_proc = _serve(tmp_path, "alice", pa, f"[kms]\nseed = 3\nlocal = alice\n{links}[peers]\nbob = http://127.0.0.1:{pb}\n")
        try:
            alice = Etsi014Client(f"http://127.0.0.1:{pa}")
            bob = Etsi014Client(f"http://127.0.0.1:{pb}")
            pads = alice.enc_keys(node_id("bob"), 3)
            back = bob.dec_keys(node_id("alice"), [p.key_id for p in pads])
            assert [base64.b64encode(p.key) for p in back] == [base64.b64encode(p.key) for p in pads]
        finally:
            for p in (alice_proc, bob_proc):
                p.terminate()
                p.wait(5)

    def test_bind_failure_exits_5(self, tmp_path):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            s.listen()
            port = s.getsockname()[1]
            res = subprocess.run(
                [sys.executable, "-m", "qkdrelay", "--skip-backend-check", "kms", "serve", "--port", str(port)],
                capture_output=True,
                text=True,
                timeout=30,
            )
        assert res.returncode == 5
