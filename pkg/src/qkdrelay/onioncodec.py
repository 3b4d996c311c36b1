"""Layered ciphertexts for ORR and ORR-Ext.

Layer plaintexts (``A`` is the variant's authentication block width)::

    relay:  0x00 || next_hop (16) || inner frame body
    final:  0x01 || [auth over secret (A)] || secret (32)

A basic ORR frame body is just the layer ciphertext.  An ORR-Ext frame body
is ``auth || ciphertext`` where ``auth`` covers that ciphertext and is
checked by the receiving node before it decrypts.  The initiator computes
every block while building, so the block protecting layer ``i + 1`` travels
inside layer ``i``.

Wire encoding of a frame: ``variant (1) || body length (2, big-endian) || body``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Union

from .crypto import (
    MAC_LEN,
    SIG_SIZES,
    RngContext,
    SigMaterial,
    SigningKey,
    SigScheme,
    SymKey,
    mac_tag,
    mac_verify,
    sig_sign,
    sig_verify,
    sym_ciphertext_len,
    sym_decrypt,
    sym_encrypt,
)
from .errors import (
    AuthError,
    DecryptError,
    FormatError,
    KeyCountMismatch,
    LengthError,
    PaddingError,
    UnsupportedScheme,
)

NODE_ID_LEN = 16
SECRET_LEN = 32
TAG_RELAY = 0x00
TAG_FINAL = 0x01
WIRE_HEADER_LEN = 3
MAX_WIRE_BODY = 0xFFFF


class Variant(enum.IntEnum):
    ORR = 0
    EXT_HMAC256 = 1
    EXT_FALCON1024 = 2
    EXT_DILITHIUM3 = 3

    @property
    def scheme(self) -> SigScheme | None:
        return _SCHEME.get(self)

    @property
    def label(self) -> str:
        return _LABEL[self]

    @classmethod
    def parse(cls, text: str) -> Variant:
        key = text.strip().lower()
        for v, names in _ALIASES.items():
            if key in names:
                return v
        raise ValueError(f"unknown onion variant {text!r}")


_SCHEME = {
    Variant.EXT_HMAC256: SigScheme.HMAC256,
    Variant.EXT_FALCON1024: SigScheme.FALCON1024,
    Variant.EXT_DILITHIUM3: SigScheme.DILITHIUM3,
}
_LABEL = {
    Variant.ORR: "ORR",
    Variant.EXT_HMAC256: "ORR-Ext-HMAC-256",
    Variant.EXT_FALCON1024: "ORR-Ext-Falcon-1024",
    Variant.EXT_DILITHIUM3: "ORR-Ext-Dilithium3",
}
_ALIASES = {
    Variant.ORR: {"orr", "none"},
    Variant.EXT_HMAC256: {"hmac", "hmac256", "hmac-256", "ext-hmac256", "orr-ext-hmac-256"},
    Variant.EXT_FALCON1024: {"falcon", "falcon1024", "falcon-1024", "ext-falcon1024", "orr-ext-falcon-1024"},
    Variant.EXT_DILITHIUM3: {"dilithium", "dilithium3", "ext-dilithium3", "orr-ext-dilithium3"},
}


def auth_len(variant: Variant) -> int:
    """Width of one authentication block (public key + padded signature, or tag)."""
    if variant is Variant.ORR:
        return 0
    pk_len, sig_len = SIG_SIZES[variant.scheme]
    return pk_len + sig_len


@dataclass(frozen=True)
class OnionFrame:
    variant: Variant
    body: bytes = field(repr=False)

    def __repr__(self) -> str:
        return f"OnionFrame({self.variant.label}, {len(self.body)} bytes)"

    def encode(self) -> bytes:
        if len(self.body) > MAX_WIRE_BODY:
            raise FormatError(f"frame body of {len(self.body)} bytes exceeds the 2-byte length field")
        return bytes([self.variant]) + len(self.body).to_bytes(2, "big") + self.body

    @classmethod
    def decode(cls, data: bytes) -> OnionFrame:
        if len(data) < WIRE_HEADER_LEN:
            raise FormatError("truncated frame header")
        try:
            variant = Variant(data[0])
        except ValueError:
            raise FormatError(f"unknown variant byte {data[0]:#x}") from None
        length = int.from_bytes(data[1:3], "big")
        if len(data) != WIRE_HEADER_LEN + length:
            raise FormatError(f"length field says {length}, frame carries {len(data) - WIRE_HEADER_LEN}")
        return cls(variant, bytes(data[3:]))


@dataclass(frozen=True)
class LayerKey:
    enc_key: SymKey
    mac_key: SymKey | None = None


@dataclass(frozen=True)
class Relay:
    next_hop: bytes
    inner: OnionFrame
    plaintext: bytes = field(repr=False, compare=False)


@dataclass(frozen=True)
class Final:
    secret: bytes = field(repr=False)
    plaintext: bytes = field(repr=False, compare=False)


PeelResult = Union[Relay, Final]


# -- size accounting -------------------------------------------------------


def _pad16(n: int) -> int:
    return 16 * (n // 16 + 1)


def onion_size(variant: Variant, n: int) -> int:
    """Body length of a freshly built ``n``-layer frame, in closed form."""
    if n < 1:
        raise ValueError("an onion has at least one layer")
    a = auth_len(variant)
    final_ct = 16 + _pad16(1 + a + SECRET_LEN)
    # every ciphertext is a multiple of 16, so each relay layer adds a constant
    per_layer = 16 + _pad16(1 + NODE_ID_LEN + a)
    return a + final_ct + (n - 1) * per_layer


def layer_ciphertext_sizes(variant: Variant, n: int) -> list[int]:
    """Ciphertext length of every layer, outermost first, by direct recursion."""
    a = auth_len(variant)
    sizes = [sym_ciphertext_len(1 + a + SECRET_LEN)]
    for _ in range(n - 1):
        sizes.append(sym_ciphertext_len(1 + NODE_ID_LEN + a + sizes[-1]))
    return sizes[::-1]


# -- basic ORR ---------------------------------------------------------------


def _check_keys(circuit, keys) -> None:
    if len(circuit) < 1:
        raise ValueError("circuit must contain at least the destination")
    if len(keys) != len(circuit):
        raise KeyCountMismatch(f"{len(keys)} layer keys for a {len(circuit)}-node circuit")


def _check_secret(secret: bytes) -> None:
    if len(secret) != SECRET_LEN:
        raise LengthError(f"secret must be {SECRET_LEN} bytes")


def build_onion(secret: bytes, circuit: list[bytes], keys: list[LayerKey], rng: RngContext) -> OnionFrame:
    _check_keys(circuit, keys)
    _check_secret(secret)
    body = sym_encrypt(keys[-1].enc_key, bytes([TAG_FINAL]) + secret, rng)
    for i in range(len(circuit) - 2, -1, -1):
        body = sym_encrypt(keys[i].enc_key, bytes([TAG_RELAY]) + circuit[i + 1] + body, rng)
    return OnionFrame(Variant.ORR, body)


def _open(enc_key: SymKey, ciphertext: bytes) -> bytes:
    try:
        return sym_decrypt(enc_key, ciphertext)
    except PaddingError as exc:
        raise DecryptError("layer did not decrypt (bad key or tampered frame)") from exc
    except LengthError as exc:
        raise FormatError(str(exc)) from exc


def peel_layer(frame: OnionFrame, enc_key: SymKey) -> PeelResult:
    if frame.variant is not Variant.ORR:
        raise FormatError(f"peel_layer expects a basic ORR frame, got {frame.variant.label}")
    plain = _open(enc_key, frame.body)
    if not plain:
        raise FormatError("empty layer")
    if plain[0] == TAG_FINAL:
        if len(plain) != 1 + SECRET_LEN:
            raise FormatError(f"final layer carries {len(plain) - 1} bytes, expected {SECRET_LEN}")
        return Final(plain[1:], plain)
    if plain[0] == TAG_RELAY:
        if len(plain) < 1 + NODE_ID_LEN + 32:
            raise FormatError("relay layer is truncated")
        return Relay(plain[1 : 1 + NODE_ID_LEN], OnionFrame(Variant.ORR, plain[1 + NODE_ID_LEN :]), plain)
    raise FormatError(f"bad layer tag {plain[0]:#x}")


# -- ORR-Ext --------------------------------------------------------------------


def _auth_block(variant: Variant, key: LayerKey, signer: SigningKey | None, message: bytes) -> bytes:
    if variant is Variant.EXT_HMAC256:
        if key.mac_key is None:
            raise KeyCountMismatch("HMAC variant needs a mac_key for every node")
        return mac_tag(key.mac_key, message)
    if signer is None or signer.scheme is not variant.scheme:
        raise UnsupportedScheme(f"{variant.label} needs a {variant.scheme.value} signing key")
    _, sig_max = SIG_SIZES[variant.scheme]
    material = sig_sign(signer, message)
    return material.public_key + material.signature.ljust(sig_max, b"\x00")


def _check_auth(variant: Variant, block: bytes, message: bytes, verifier) -> None:
    if variant is Variant.EXT_HMAC256:
        if verifier is None:
            raise AuthError("no MAC key to verify with")
        ok = mac_verify(verifier, message, block)
    else:
        pk_len, sig_max = SIG_SIZES[variant.scheme]
        pk, sig = block[:pk_len], block[pk_len:]
        if verifier is not None and pk != bytes(verifier):
            raise AuthError("frame signed by an unexpected key")
        try:
            ok = sig_verify(SigMaterial(variant.scheme, pk, sig), message)
        except LengthError:
            ok = False
    if not ok:
        raise AuthError(f"{variant.label} authentication block does not verify")


def build_onion_ext(
    secret: bytes,
    circuit: list[bytes],
    keys: list[LayerKey],
    variant: Variant,
    signer: SigningKey | None,
    rng: RngContext,
    stats: dict | None = None,
) -> OnionFrame:
    """Build an authenticated onion.

    ``stats``, when given, accumulates ``auth_bytes``: the number of bytes
    the initiator MACs or signs.
    """
    if variant is Variant.ORR:
        raise FormatError("use build_onion for the basic variant")
    _check_keys(circuit, keys)
    _check_secret(secret)
    n = len(circuit)
    authed = 0

    def auth(i: int, message: bytes) -> bytes:
        nonlocal authed
        authed += len(message)
        return _auth_block(variant, keys[i], signer, message)

    ct = sym_encrypt(keys[-1].enc_key, bytes([TAG_FINAL]) + auth(n - 1, secret) + secret, rng)
    body = auth(n - 1, ct) + ct
    for i in range(n - 2, -1, -1):
        ct = sym_encrypt(keys[i].enc_key, bytes([TAG_RELAY]) + circuit[i + 1] + body, rng)
        body = auth(i, ct) + ct
    if stats is not None:
        stats["auth_bytes"] = stats.get("auth_bytes", 0) + authed
    return OnionFrame(variant, body)


def peel_layer_ext(frame: OnionFrame, enc_key: SymKey, verifier=None) -> PeelResult:
    """Verify, then peel, one authenticated layer.

    ``verifier`` is the node's MAC key for the HMAC variant.  For signature
    variants it is the expected signer public key, or ``None`` to accept the
    key embedded in the block.
    """
    variant = frame.variant
    if variant is Variant.ORR:
        raise FormatError("peel_layer_ext expects an ORR-Ext frame")
    a = auth_len(variant)
    if len(frame.body) < a + 32:
        raise FormatError("frame too short for its authentication block")
    block, ct = frame.body[:a], frame.body[a:]
    _check_auth(variant, block, ct, verifier)
    plain = _open(enc_key, ct)
    if not plain:
        raise FormatError("empty layer")
    if plain[0] == TAG_FINAL:
        if len(plain) != 1 + a + SECRET_LEN:
            raise FormatError("final layer has the wrong length")
        secret = plain[1 + a :]
        _check_auth(variant, plain[1 : 1 + a], secret, verifier)
        return Final(secret, plain)
    if plain[0] == TAG_RELAY:
        if len(plain) < 1 + NODE_ID_LEN + a + 32:
            raise FormatError("relay layer is truncated")
        return Relay(plain[1 : 1 + NODE_ID_LEN], OnionFrame(variant, plain[1 + NODE_ID_LEN :]), plain)
    raise FormatError(f"bad layer tag {plain[0]:#x}")
