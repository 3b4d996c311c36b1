"""Simulated QKD links behind an ETSI GS QKD 014 style key manager.

Each link has one :class:`KmeStore` holding a seeded key stream.  The node
that wants to encrypt asks for keys with :meth:`KeyManager.get_enc_keys`;
its peer fetches the same bytes by ``key_ID`` with
:meth:`KeyManager.get_dec_keys`.  A key_ID is served once to each side.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

from .crypto import RngContext
from .errors import (
    AlreadyConsumed,
    BadRequest,
    ConfigError,
    Exhausted,
    Unauthorized,
    UnknownKeyId,
    UnknownLink,
)

NODE_ID_LEN = 16

DEFAULT_KEY_SIZE = 256
DEFAULT_MAX_KEY_COUNT = 100_000
DEFAULT_MAX_KEYS_PER_REQUEST = 128
MAX_KEY_SIZE = 8 * 1024 * 1024


def short(node: bytes) -> str:
    return node.hex()[:8]


@dataclass(frozen=True)
class LinkId:
    """Unordered pair of node identifiers; ``LinkId(a, b) == LinkId(b, a)``."""

    a: bytes
    b: bytes

    def __post_init__(self):
        if self.a == self.b:
            raise ConfigError("a link needs two distinct endpoints")
        if self.b < self.a:
            lo, hi = self.b, self.a
            object.__setattr__(self, "a", lo)
            object.__setattr__(self, "b", hi)

    def __contains__(self, node: bytes) -> bool:
        return node == self.a or node == self.b

    def peer(self, node: bytes) -> bytes:
        if node == self.a:
            return self.b
        if node == self.b:
            return self.a
        raise Unauthorized(f"{short(node)} is not an endpoint of {self}")

    def __str__(self) -> str:
        return f"{short(self.a)}<->{short(self.b)}"


@dataclass(frozen=True)
class QkdPad:
    key_id: str
    key: bytes

    def __repr__(self) -> str:
        return f"QkdPad({self.key_id}, {len(self.key)} bytes)"


@dataclass
class _Issued:
    key: bytes
    receiver: bytes
    consumed: bool = False


@dataclass
class KmeStore:
    """Key material and bookkeeping for one link."""

    link: LinkId
    rng: RngContext
    key_size: int = DEFAULT_KEY_SIZE
    max_key_count: int = DEFAULT_MAX_KEY_COUNT
    max_keys_per_request: int = DEFAULT_MAX_KEYS_PER_REQUEST
    finite: bool = False
    stored_key_count: int = field(init=False)
    issued: dict[str, _Issued] = field(default_factory=dict, repr=False)
    history: list[QkdPad] = field(default_factory=list, repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.stored_key_count = self.max_key_count

    def _fresh_id(self) -> str:
        return str(uuid.UUID(bytes=self.rng.bytes(16), version=4))


class KeyManager:
    """All KME stores of a network, indexed by link."""

    def __init__(self, seed: int = 0, *, finite: bool = False, max_key_count: int = DEFAULT_MAX_KEY_COUNT):
        self.seed = seed
        self.finite = finite
        self.max_key_count = max_key_count
        self._root = RngContext(seed).derive("kme")
        self._stores: dict[LinkId, KmeStore] = {}

    def add_link(self, link: LinkId) -> KmeStore:
        if link in self._stores:
            raise ConfigError(f"duplicate link {link}")
        store = KmeStore(
            link,
            # per-link stream depends only on the seed and the endpoints
            self._root.derive(link.a, link.b),
            max_key_count=self.max_key_count,
            finite=self.finite,
        )
        self._stores[link] = store
        return store

    @property
    def links(self) -> list[LinkId]:
        return list(self._stores)

    def store(self, link: LinkId) -> KmeStore:
        try:
            return self._stores[link]
        except KeyError:
            raise UnknownLink(f"no QKD link {link}") from None

    def get_enc_keys(self, link: LinkId, caller: bytes, number: int = 1, size_bits: int = DEFAULT_KEY_SIZE) -> list[QkdPad]:
        store = self.store(link)
        peer = link.peer(caller)
        if number < 1 or number > store.max_keys_per_request:
            raise BadRequest(f"number must be in [1, {store.max_keys_per_request}]")
        if size_bits <= 0 or size_bits % 8 or size_bits > MAX_KEY_SIZE:
            raise BadRequest("size must be a positive multiple of 8")
        with store.lock:
            if store.finite and store.stored_key_count < number:
                raise Exhausted(f"link {link} has {store.stored_key_count} keys left")
            pads = []
            for _ in range(number):
                key_id = store._fresh_id()
                while key_id in store.issued:
                    key_id = store._fresh_id()
                pad = QkdPad(key_id, store.rng.bytes(size_bits // 8))
                store.issued[key_id] = _Issued(pad.key, receiver=peer)
                store.history.append(pad)
                pads.append(pad)
            if store.finite:
                store.stored_key_count -= number
        return pads

    def get_dec_keys(self, link: LinkId, caller: bytes, key_ids: list[str]) -> list[QkdPad]:
        store = self.store(link)
        link.peer(caller)
        out = []
        with store.lock:
            records = []
            for key_id in key_ids:
                rec = store.issued.get(key_id)
                if rec is None:
                    raise UnknownKeyId(f"key_ID {key_id} was never issued on {link}")
                if rec.receiver != caller:
                    raise Unauthorized(f"key_ID {key_id} was not issued to {short(caller)}")
                if rec.consumed:
                    raise AlreadyConsumed(f"key_ID {key_id} already retrieved")
                records.append((key_id, rec))
            # all-or-nothing: only mark consumed once every id validated
            for key_id, rec in records:
                rec.consumed = True
                out.append(QkdPad(key_id, rec.key))
        return out

    def import_keys(self, link: LinkId, receiver: bytes, pads: list[QkdPad]) -> None:
        """Accept keys issued by the KME at the other end of ``link``.

        Used when each end of a link runs its own key manager: the issuing
        side pushes the key_IDs and bytes so ``receiver`` can fetch them.
        """
        store = self.store(link)
        link.peer(receiver)
        with store.lock:
            for pad in pads:
                if pad.key_id in store.issued:
                    raise BadRequest(f"key_ID {pad.key_id} already known on {link}")
            for pad in pads:
                store.issued[pad.key_id] = _Issued(pad.key, receiver=receiver)
                store.history.append(pad)
            if store.finite:
                store.stored_key_count = max(store.stored_key_count - len(pads), 0)

    def status(self, link: LinkId) -> dict:
        store = self.store(link)
        with store.lock:
            return {
                "source_KME_ID": link.a.hex(),
                "target_KME_ID": link.b.hex(),
                "master_SAE_ID": link.a.hex(),
                "slave_SAE_ID": link.b.hex(),
                "key_size": store.key_size,
                "stored_key_count": store.stored_key_count,
                "max_key_count": store.max_key_count,
                "max_key_per_request": store.max_keys_per_request,
                "max_key_size": MAX_KEY_SIZE,
                "min_key_size": 8,
                "max_SAE_ID_count": 0,
            }

    def draw_link_pad(self, link: LinkId, initiating_end: bytes, n_bytes: int) -> QkdPad:
        """Run the enc_keys / dec_keys round trip for one pad and return it.

        Both ends end up holding the same bytes; the pad is consumed.
        """
        if n_bytes < 1:
            raise BadRequest("n_bytes must be >= 1")
        (pad,) = self.get_enc_keys(link, initiating_end, 1, n_bytes * 8)
        (mirror,) = self.get_dec_keys(link, link.peer(initiating_end), [pad.key_id])
        assert mirror.key == pad.key
        return pad

    def pads_issued(self, link: LinkId | None = None) -> list[QkdPad]:
        if link is not None:
            return list(self.store(link).history)
        return [p for s in self._stores.values() for p in s.history]


class LocalKeyClient:
    """Node-side handle onto an in-process :class:`KeyManager`."""

    def __init__(self, manager: KeyManager, node: bytes):
        self.manager = manager
        self.node = node

    def enc_keys(self, peer: bytes, number: int, size_bits: int) -> list[QkdPad]:
        return self.manager.get_enc_keys(LinkId(self.node, peer), self.node, number, size_bits)

    def dec_keys(self, peer: bytes, key_ids: list[str]) -> list[QkdPad]:
        return self.manager.get_dec_keys(LinkId(self.node, peer), self.node, key_ids)

    def status(self, peer: bytes) -> dict:
        return self.manager.status(LinkId(self.node, peer))
