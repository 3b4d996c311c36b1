"""HTTP surface of the key manager, shaped after ETSI GS QKD 014.

Routes (``peer_id`` is the hex NodeId of the other SAE on the link)::

    GET  /api/v1/keys/{peer_id}/status
    GET  /api/v1/keys/{peer_id}/enc_keys?number=N&size=S
    POST /api/v1/keys/{peer_id}/enc_keys     {"number": N, "size": S}
    POST /api/v1/keys/{peer_id}/dec_keys     {"key_IDs": [{"key_ID": "..."}]}

Key responses are ``{"keys": [{"key_ID": "...", "key": "<base64>"}]}``.
The calling SAE is the server's bound node, or the ``X-SAE-ID`` header
when the server fronts every node of a key manager.

When the two ends of a link are served by different key managers, the
issuing KME pushes fresh keys to its peer over a KME-to-KME route that is
not part of ETSI 014::

    POST /kme/v1/sync/{issuer_id}            {"receiver": "...", "keys": [...]}
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import re
import threading
import urllib.error
import urllib.request
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping
from urllib.parse import parse_qs, urlsplit

from . import errors
from .errors import BadRequest, KmeError, Unauthorized
from .qkdlink import DEFAULT_KEY_SIZE, KeyManager, LinkId, QkdPad

log = logging.getLogger(__name__)

_ROUTE = re.compile(r"^/api/v1/keys/(?P<peer>[0-9a-fA-F]{32})/(?P<method>status|enc_keys|dec_keys)/?$")
_SYNC_ROUTE = re.compile(r"^/kme/v1/sync/(?P<issuer>[0-9a-fA-F]{32})/?$")

_STATUS_FOR = {
    "BadRequest": HTTPStatus.BAD_REQUEST,
    "UnknownKeyId": HTTPStatus.BAD_REQUEST,
    "AlreadyConsumed": HTTPStatus.BAD_REQUEST,
    "Unauthorized": HTTPStatus.UNAUTHORIZED,
    "UnknownLink": HTTPStatus.NOT_FOUND,
    "Exhausted": HTTPStatus.SERVICE_UNAVAILABLE,
    "PeerUnreachable": HTTPStatus.SERVICE_UNAVAILABLE,
}

_ERROR_TYPES = {
    cls.code: cls
    for cls in (
        errors.BadRequest,
        errors.UnknownKeyId,
        errors.AlreadyConsumed,
        errors.Unauthorized,
        errors.UnknownLink,
        errors.Exhausted,
        errors.PeerUnreachable,
    )
}


def encode_keys(pads: list[QkdPad]) -> dict:
    return {"keys": [{"key_ID": p.key_id, "key": base64.b64encode(p.key).decode("ascii")} for p in pads]}


def decode_keys(doc: dict) -> list[QkdPad]:
    try:
        return [QkdPad(k["key_ID"], base64.b64decode(k["key"], validate=True)) for k in doc["keys"]]
    except (KeyError, TypeError, binascii.Error) as exc:
        raise BadRequest(f"malformed key container: {exc}") from exc


def _parse_key_ids(body: bytes) -> list[str]:
    try:
        doc = json.loads(body or b"null")
        ids = [entry["key_ID"] for entry in doc["key_IDs"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise BadRequest("body must be {\"key_IDs\": [{\"key_ID\": ...}]}") from exc
    if not ids or not all(isinstance(i, str) for i in ids):
        raise BadRequest("key_IDs must be a non-empty list of strings")
    return ids


class _Handler(BaseHTTPRequestHandler):
    server: KmeHttpServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _reply(self, status: int, doc: dict) -> None:
        payload = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _fail(self, exc: KmeError) -> None:
        status = _STATUS_FOR.get(exc.code, HTTPStatus.BAD_REQUEST)
        self._reply(status, {"message": str(exc), "details": [{"error": exc.code}]})

    def _caller(self) -> bytes:
        if self.server.local_sae is not None:
            return self.server.local_sae
        header = self.headers.get("X-SAE-ID")
        try:
            node = bytes.fromhex(header or "")
        except ValueError:
            node = b""
        if len(node) != 16:
            raise Unauthorized("missing or invalid X-SAE-ID header")
        return node

    def _sync(self, issuer: bytes, body: bytes) -> None:
        try:
            doc = json.loads(body or b"null")
            receiver = bytes.fromhex(doc["receiver"])
        except (ValueError, KeyError, TypeError) as exc:
            raise BadRequest("sync body needs receiver and keys") from exc
        self.server.manager.import_keys(LinkId(issuer, receiver), receiver, decode_keys(doc))
        self._reply(HTTPStatus.OK, {"imported": len(doc["keys"])})

    def _dispatch(self, verb: str) -> None:
        parts = urlsplit(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        sync = _SYNC_ROUTE.match(parts.path)
        if sync is not None and verb == "POST":
            try:
                self._sync(bytes.fromhex(sync["issuer"]), body)
            except errors.ConfigError as exc:
                self._fail(BadRequest(str(exc)))
            except KmeError as exc:
                self._fail(exc)
            return
        m = _ROUTE.match(parts.path)
        if m is None:
            self._reply(HTTPStatus.NOT_FOUND, {"message": f"no route {parts.path}"})
            return
        kms = self.server.manager
        try:
            caller = self._caller()
            link = LinkId(caller, bytes.fromhex(m["peer"]))
            method = m["method"]
            if method == "status" and verb == "GET":
                doc = kms.status(link)
                doc["master_SAE_ID"], doc["slave_SAE_ID"] = caller.hex(), link.peer(caller).hex()
                self._reply(HTTPStatus.OK, doc)
            elif method == "enc_keys":
                number, size = self._enc_params(verb, parts.query, body)
                pads = kms.get_enc_keys(link, caller, number, size)
                self.server.replicate(caller, link.peer(caller), pads)
                self._reply(HTTPStatus.OK, encode_keys(pads))
            elif method == "dec_keys" and verb == "POST":
                self._reply(HTTPStatus.OK, encode_keys(kms.get_dec_keys(link, caller, _parse_key_ids(body))))
            else:
                raise BadRequest(f"{verb} not allowed on {method}")
        except errors.ConfigError as exc:
            self._fail(BadRequest(str(exc)))
        except KmeError as exc:
            self._fail(exc)

    @staticmethod
    def _enc_params(verb: str, query: str, body: bytes) -> tuple[int, int]:
        try:
            if verb == "GET":
                q = parse_qs(query)
                number = int(q.get("number", ["1"])[0])
                size = int(q.get("size", [str(DEFAULT_KEY_SIZE)])[0])
            else:
                doc = json.loads(body or b"{}")
                number, size = int(doc.get("number", 1)), int(doc.get("size", DEFAULT_KEY_SIZE))
        except (ValueError, TypeError, AttributeError) as exc:
            raise BadRequest("number and size must be integers") from exc
        return number, size

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


class KmeHttpServer(ThreadingHTTPServer):
    """One KME endpoint.

    Several servers may share a :class:`KeyManager`.  ``peers`` maps a
    remote SAE to the base URL of the KME that serves it; keys issued
    toward such an SAE are pushed there before the caller sees them.
    """

    daemon_threads = True

    def __init__(
        self,
        manager: KeyManager,
        address=("127.0.0.1", 0),
        local_sae: bytes | None = None,
        peers: Mapping[bytes, str] | None = None,
        timeout: float = 10.0,
    ):
        self.manager = manager
        self.local_sae = local_sae
        self.peers = dict(peers or {})
        self.timeout = timeout
        super().__init__(address, _Handler)
        self._thread: threading.Thread | None = None

    def replicate(self, issuer: bytes, receiver: bytes, pads: list[QkdPad]) -> None:
        url = self.peers.get(receiver)
        if url is None:
            return
        doc = {"receiver": receiver.hex(), **encode_keys(pads)}
        req = urllib.request.Request(
            f"{url.rstrip('/')}/kme/v1/sync/{issuer.hex()}",
            data=json.dumps(doc).encode(),
            method="POST",
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise errors.PeerUnreachable(f"could not hand keys to the KME at {url}: {exc}") from exc

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> KmeHttpServer:
        self._thread = threading.Thread(target=self.serve_forever, name=f"kme-{self.server_address[1]}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class Etsi014Client:
    """Minimal SAE-side client.

    Also usable as a node key client by the protocols (``enc_keys`` /
    ``dec_keys`` take the peer NodeId).
    """

    def __init__(self, base_url: str, sae_id: bytes | None = None, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.sae_id = sae_id
        self.timeout = timeout

    def _request(self, peer: bytes, method: str, *, query: str = "", doc: dict | None = None) -> dict:
        url = f"{self.base_url}/api/v1/keys/{peer.hex()}/{method}"
        if query:
            url += "?" + query
        data = json.dumps(doc).encode() if doc is not None else None
        req = urllib.request.Request(url, data=data, method="POST" if data is not None else "GET")
        req.add_header("Accept", "application/json")
        if data is not None:
            req.add_header("Content-Type", "application/json")
        if self.sae_id is not None:
            req.add_header("X-SAE-ID", self.sae_id.hex())
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                err = json.loads(exc.read())
                code = err["details"][0]["error"]
                message = err.get("message", "")
            except (ValueError, KeyError, IndexError, TypeError):
                raise KmeError(f"HTTP {exc.code} from KME") from exc
            raise _ERROR_TYPES.get(code, KmeError)(message) from None

    def status(self, peer: bytes) -> dict:
        return self._request(peer, "status")

    def enc_keys(self, peer: bytes, number: int = 1, size_bits: int = DEFAULT_KEY_SIZE) -> list[QkdPad]:
        return decode_keys(self._request(peer, "enc_keys", query=f"number={number}&size={size_bits}"))

    def dec_keys(self, peer: bytes, key_ids: list[str]) -> list[QkdPad]:
        doc = {"key_IDs": [{"key_ID": k} for k in key_ids]}
        return decode_keys(self._request(peer, "dec_keys", doc=doc))
