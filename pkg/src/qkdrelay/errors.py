"""Exception hierarchy shared by every layer of the simulator."""

from __future__ import annotations


class QkdRelayError(Exception):
    """Base class for all errors raised by this package."""


# -- crypto -----------------------------------------------------------------


class CryptoError(QkdRelayError):
    pass


class LengthError(CryptoError, ValueError):
    """Input has the wrong length for the primitive."""


class LengthMismatch(LengthError):
    """Operands of a bytewise operation differ in length."""


class PaddingError(CryptoError):
    """PKCS#7 padding did not validate (wrong key or tampering)."""


class MalformedKey(CryptoError, ValueError):
    pass


class UnsupportedScheme(CryptoError):
    """The requested signature scheme has no usable backend."""


class BackendMismatch(CryptoError, RuntimeError):
    """A backing implementation reports sizes that differ from the constants."""


# -- qkdlink ----------------------------------------------------------------


class KmeError(QkdRelayError):
    code = "KmeError"


class Unauthorized(KmeError):
    code = "Unauthorized"


class Exhausted(KmeError):
    code = "Exhausted"


# the name protocol code uses for a drained link
PadExhausted = Exhausted


class UnknownKeyId(KmeError):
    code = "UnknownKeyId"


class AlreadyConsumed(KmeError):
    code = "AlreadyConsumed"


class UnknownLink(KmeError):
    code = "UnknownLink"


class BadRequest(KmeError):
    code = "BadRequest"


class PeerUnreachable(KmeError):
    """The KME holding the other end of the link could not be synchronised."""

    code = "PeerUnreachable"


# -- onioncodec ---------------------------------------------------------------


class OnionError(QkdRelayError):
    pass


class KeyCountMismatch(OnionError, ValueError):
    pass


class DecryptError(OnionError):
    """A layer failed to decrypt (padding failure)."""


class FormatError(OnionError):
    """A decrypted layer or wire frame is structurally invalid."""


class AuthError(OnionError):
    """An authentication block did not verify; the frame must be dropped."""


# -- simnet / protocols -------------------------------------------------------


class ConfigError(QkdRelayError, ValueError):
    pass


class NoChannel(QkdRelayError):
    pass


class RunTimeout(QkdRelayError):
    pass


class LinkMissing(QkdRelayError):
    pass


class UnknownNode(QkdRelayError):
    pass


class KemFailure(QkdRelayError):
    pass
