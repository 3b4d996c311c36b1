"""Cryptographic primitives used by the relay protocols.

Every primitive takes its randomness from an explicit :class:`RngContext`
so that a simulation run is reproducible from its seed.  Backends:

* AES-256-CBC with PKCS#7 padding (``cryptography``)
* Kyber-768, round 3: key generation and decapsulation through ``pykyber``,
  encapsulation through ``kyber-py`` so that it can draw its coins from the
  run's RNG
* HMAC-SHA256 (stdlib ``hmac``)
* Falcon-1024, padded encoding (``pqcrypto``) and Dilithium3, round 3
  (``dilithium-py``), both optional
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives import padding as _padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    BackendMismatch,
    LengthError,
    LengthMismatch,
    MalformedKey,
    PaddingError,
    UnsupportedScheme,
)

SYM_KEY_LEN = 32
IV_LEN = 16
BLOCK_LEN = 16
MAC_LEN = 32

KEM_PUBLIC_KEY_LEN = 1184
KEM_SECRET_KEY_LEN = 2400
KEM_CIPHERTEXT_LEN = 1088
KEM_SHARED_SECRET_LEN = 32


class SymKey(bytes):
    """A 32-byte AES-256 / HMAC key."""

    def __new__(cls, value: bytes) -> SymKey:
        if len(value) != SYM_KEY_LEN:
            raise LengthError(f"symmetric key must be {SYM_KEY_LEN} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return f"SymKey({self[:4].hex()}...)"


def _label_word(label: object) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFFFFFFFFFF
    if isinstance(label, str):
        label = label.encode()
    return int.from_bytes(hashlib.sha256(bytes(label)).digest()[:8], "big")


class RngContext:
    """Seedable byte stream standing in for a hardware QRNG.

    Not thread-safe: each context has a single owner.  Give every actor its
    own child via :meth:`derive`.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = _path
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("n must be non-negative")
        if n == 0:
            return b""
        return self._gen.bytes(n)

    def derive(self, *labels: object) -> RngContext:
        """Independent child stream keyed by ``labels``; does not consume from this one."""
        return RngContext(self.seed, self._path + tuple(_label_word(x) for x in labels))

    def randrange(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def __repr__(self) -> str:
        return f"RngContext(seed={self.seed}, path={self._path})"


def random_bytes(rng: RngContext, n: int) -> bytes:
    return rng.bytes(n)


# -- symmetric layer cipher ------------------------------------------------


def sym_ciphertext_len(plaintext_len: int) -> int:
    return IV_LEN + BLOCK_LEN * (plaintext_len // BLOCK_LEN + 1)


def sym_encrypt(key: SymKey, plaintext: bytes, rng: RngContext) -> bytes:
    """AES-256-CBC under a fresh IV; returns ``IV || ciphertext``."""
    iv = rng.bytes(IV_LEN)
    padder = _padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(bytes(key)), modes.CBC(iv)).encryptor()
    return iv + enc.update(padded) + enc.finalize()


def sym_decrypt(key: SymKey, ciphertext: bytes) -> bytes:
    if len(ciphertext) < IV_LEN + BLOCK_LEN or len(ciphertext) % BLOCK_LEN:
        raise LengthError(f"ciphertext of {len(ciphertext)} bytes is short or unaligned")
    iv, body = ciphertext[:IV_LEN], ciphertext[IV_LEN:]
    dec = Cipher(algorithms.AES(bytes(key)), modes.CBC(iv)).decryptor()
    padded = dec.update(body) + dec.finalize()
    unpadder = _padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise PaddingError("invalid PKCS#7 padding") from exc


# -- one-time pad ------------------------------------------------------------


def otp_xor(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise LengthMismatch(f"operands differ in length: {len(a)} != {len(b)}")
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")


# -- MAC and KDF ----------------------------------------------------------------


def mac_tag(key: bytes, message: bytes) -> bytes:
    return hmac.digest(bytes(key), message, "sha256")


def mac_verify(key: bytes, message: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac_tag(key, message), tag)


def kdf_expand(shared_secret: bytes, label: bytes | str) -> SymKey:
    """Derive a labelled 32-byte key from a KEM shared secret (HMAC with the label)."""
    if len(shared_secret) != KEM_SHARED_SECRET_LEN:
        raise LengthError("shared secret must be 32 bytes")
    if isinstance(label, str):
        label = label.encode()
    return SymKey(mac_tag(shared_secret, label))


# -- KEM --------------------------------------------------------------------------


@dataclass(frozen=True)
class KemKeyPair:
    public_key: bytes
    secret_key: bytes = b""

    def __repr__(self) -> str:
        return f"KemKeyPair(public_key={self.public_key[:4].hex()}...)"


def _pykyber():
    import pykyber

    return pykyber.Kyber768


def _kyberpy_instance(rng: RngContext):
    from kyber_py.kyber.default_parameters import DEFAULT_PARAMETERS
    from kyber_py.kyber.kyber import Kyber

    kem = Kyber(DEFAULT_PARAMETERS["kyber_768"])
    kem.random_bytes = rng.bytes
    return kem


def kem_keygen(rng: RngContext) -> KemKeyPair:
    kp = _pykyber()(rng.bytes(64))
    return KemKeyPair(public_key=bytes(kp.public_key), secret_key=bytes(kp.secret_key))


def kem_encapsulate(public_key: bytes, rng: RngContext) -> tuple[bytes, bytes]:
    """Return ``(ciphertext, shared_secret)``."""
    if len(public_key) != KEM_PUBLIC_KEY_LEN:
        raise MalformedKey(f"Kyber-768 public key must be {KEM_PUBLIC_KEY_LEN} bytes")
    try:
        shared, ct = _kyberpy_instance(rng).encaps(bytes(public_key))
    except Exception as exc:  # backend-specific failure types
        raise MalformedKey(str(exc)) from exc
    return ct, shared


def kem_decapsulate(secret_key: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) != KEM_CIPHERTEXT_LEN:
        raise LengthError(f"Kyber-768 ciphertext must be {KEM_CIPHERTEXT_LEN} bytes")
    if len(secret_key) != KEM_SECRET_KEY_LEN:
        raise LengthError(f"Kyber-768 secret key must be {KEM_SECRET_KEY_LEN} bytes")
    return bytes(_pykyber().decapsulate(bytes(ciphertext), bytes(secret_key)))


# -- signatures -------------------------------------------------------------------


class SigScheme(enum.Enum):
    HMAC256 = "hmac-256"
    FALCON1024 = "falcon-1024"
    DILITHIUM3 = "dilithium3"


# (public key length, maximum signature length)
SIG_SIZES: dict[SigScheme, tuple[int, int]] = {
    SigScheme.HMAC256: (0, 32),
    SigScheme.FALCON1024: (1793, 1280),
    SigScheme.DILITHIUM3: (1952, 3293),
}


@dataclass(frozen=True)
class SigMaterial:
    scheme: SigScheme
    public_key: bytes
    signature: bytes

    def __post_init__(self):
        pk_len, sig_max = SIG_SIZES[self.scheme]
        if len(self.public_key) != pk_len:
            raise LengthError(f"{self.scheme.value} public key must be {pk_len} bytes")
        if self.scheme is SigScheme.FALCON1024:
            ok = 0 < len(self.signature) <= sig_max
        else:
            ok = len(self.signature) == sig_max
        if not ok:
            raise LengthError(f"bad {self.scheme.value} signature length {len(self.signature)}")


@dataclass(frozen=True)
class SigningKey:
    scheme: SigScheme
    public_key: bytes
    secret_key: bytes

    def __repr__(self) -> str:
        return f"SigningKey({self.scheme.value}, public_key={self.public_key[:4].hex()}...)"


def _falcon():
    try:
        from pqcrypto.sign import falcon_padded_1024
    except ImportError as exc:
        raise UnsupportedScheme("falcon-1024 needs pqcrypto with falcon_padded_1024") from exc
    return falcon_padded_1024


def _dilithium(rng: RngContext | None = None):
    try:
        from dilithium_py.dilithium.default_parameters import DEFAULT_PARAMETERS
        from dilithium_py.dilithium.dilithium import Dilithium
    except ImportError as exc:
        raise UnsupportedScheme("dilithium3 needs dilithium-py") from exc
    impl = Dilithium(DEFAULT_PARAMETERS["dilithium3"])
    if rng is not None:
        impl.random_bytes = rng.bytes
    return impl


def sig_available(scheme: SigScheme) -> bool:
    if scheme is SigScheme.HMAC256:
        return True
    try:
        _falcon() if scheme is SigScheme.FALCON1024 else _dilithium()
    except UnsupportedScheme:
        return False
    return True


def sig_keygen(scheme: SigScheme, rng: RngContext) -> SigningKey:
    """Generate a signing key pair.

    Falcon key generation uses the backend's own entropy, so Falcon keys are
    not reproducible from ``rng``.
    """
    if scheme is SigScheme.FALCON1024:
        pk, sk = _falcon().generate_keypair()
    elif scheme is SigScheme.DILITHIUM3:
        pk, sk = _dilithium(rng).keygen()
    else:
        raise UnsupportedScheme("HMAC-256 has no key pair; use mac_tag/mac_verify")
    return SigningKey(scheme, bytes(pk), bytes(sk))


def sig_sign(signing_key: SigningKey, message: bytes) -> SigMaterial:
    scheme = signing_key.scheme
    if scheme is SigScheme.FALCON1024:
        sig = _falcon().sign(signing_key.secret_key, bytes(message))
    elif scheme is SigScheme.DILITHIUM3:
        sig = _dilithium().sign(signing_key.secret_key, bytes(message))
    else:
        raise UnsupportedScheme("HMAC-256 is routed through mac_tag")
    return SigMaterial(scheme, signing_key.public_key, bytes(sig))


def sig_verify(material: SigMaterial, message: bytes) -> bool:
    scheme = material.scheme
    if scheme is SigScheme.FALCON1024:
        try:
            return bool(_falcon().verify(material.public_key, bytes(message), material.signature))
        except Exception:
            # pqcrypto raises on a bad signature
            return False
    if scheme is SigScheme.DILITHIUM3:
        try:
            return bool(_dilithium().verify(material.public_key, bytes(message), material.signature))
        except Exception:
            return False
    raise UnsupportedScheme("HMAC-256 is routed through mac_verify")


# -- startup checks -------------------------------------------------------------


def verify_parameter_sizes(include_signatures: bool = True) -> dict[str, int]:
    """Check the size constants against the live backends.

    Raises :class:`BackendMismatch` with a diagnostic if any backend
    disagrees.  Unavailable signature backends are skipped; their constants
    are still used for size accounting.
    """
    rng = RngContext(0x5EED).derive("startup-check")
    seen: dict[str, int] = {}
    kp = kem_keygen(rng)
    ct, ss = kem_encapsulate(kp.public_key, rng)
    seen["kem_public_key"] = len(kp.public_key)
    seen["kem_ciphertext"] = len(ct)
    seen["kem_shared_secret"] = len(ss)
    seen["mac_tag"] = len(mac_tag(b"\x00" * SYM_KEY_LEN, b""))
    expected = {
        "kem_public_key": KEM_PUBLIC_KEY_LEN,
        "kem_ciphertext": KEM_CIPHERTEXT_LEN,
        "kem_shared_secret": KEM_SHARED_SECRET_LEN,
        "mac_tag": MAC_LEN,
    }
    if kem_decapsulate(kp.secret_key, ct) != ss:
        raise BackendMismatch("Kyber-768 backends disagree on the shared secret")
    if include_signatures:
        if sig_available(SigScheme.FALCON1024):
            falcon = _falcon()
            seen["falcon_public_key"] = falcon.PUBLIC_KEY_SIZE
            seen["falcon_signature"] = falcon.SIGNATURE_SIZE
            expected["falcon_public_key"], expected["falcon_signature"] = SIG_SIZES[SigScheme.FALCON1024]
        if sig_available(SigScheme.DILITHIUM3):
            key = sig_keygen(SigScheme.DILITHIUM3, rng)
            sig = _dilithium().sign(key.secret_key, b"size check")
            seen["dilithium_public_key"] = len(key.public_key)
            seen["dilithium_signature"] = len(sig)
            expected["dilithium_public_key"], expected["dilithium_signature"] = SIG_SIZES[SigScheme.DILITHIUM3]
    bad = {k: (seen[k], v) for k, v in expected.items() if seen[k] != v}
    if bad:
        detail = ", ".join(f"{k}: backend {got} != expected {want}" for k, (got, want) in bad.items())
        raise BackendMismatch(f"parameter size check failed: {detail}")
    return seen
