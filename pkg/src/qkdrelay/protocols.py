"""Key distribution protocols: KR, TN, ORR and ORR-Ext.

Each ``*_run`` function drives one distribution of a 32-byte secret over a
:class:`~qkdrelay.simnet.Network` and returns a :class:`RunTranscript`.
The timing conventions per model:

* KR: encryption time is the initiator's XOR of S with the first link pad.
* TN: encryption time is the trusted node folding all ciphertexts into the
  one it forwards to the destination.
* ORR: encryption time is building the onion at the initiator; the KEM
  setup is timed separately.
* ORR-Ext: as ORR, including construction of the authentication blocks.

Distribution time runs from secret generation at the initiator until the
destination holds S.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

from .crypto import (
    KEM_SHARED_SECRET_LEN,
    RngContext,
    SigningKey,
    SymKey,
    kdf_expand,
    kem_decapsulate,
    kem_encapsulate,
    otp_xor,
    sig_keygen,
    sym_decrypt,
    sym_encrypt,
)
from .errors import ConfigError, KemFailure, LinkMissing, UnknownNode
from .onioncodec import (
    SECRET_LEN,
    TAG_RELAY,
    Final,
    LayerKey,
    OnionFrame,
    Relay,
    Variant,
    build_onion,
    build_onion_ext,
)
from .simnet import (
    DEFAULT_TIMEOUT,
    AuditReport,
    Network,
    NodeContext,
    ObservationLog,
    RunRecord,
    WireRecord,
    audit_observations,
    flip_byte,
)
from .qkdlink import LinkId, QkdPad

MODELS = ("kr", "tn", "orr", "orr-ext")


@dataclass(frozen=True)
class Circuit:
    """Initiator plus the ordered hops (intermediates, then destination)."""

    initiator: bytes
    hops: tuple[bytes, ...]

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple(self.hops))
        if not self.hops:
            raise ConfigError("a circuit needs at least a destination")
        if len(set(self.path)) != len(self.path):
            raise ConfigError("circuit nodes must be distinct")

    @classmethod
    def along(cls, nodes) -> Circuit:
        nodes = list(nodes)
        return cls(nodes[0], tuple(nodes[1:]))

    @property
    def n(self) -> int:
        return len(self.hops)

    @property
    def path(self) -> tuple[bytes, ...]:
        return (self.initiator, *self.hops)

    @property
    def destination(self) -> bytes:
        return self.hops[-1]

    @property
    def intermediates(self) -> tuple[bytes, ...]:
        return self.hops[:-1]

    def position(self, node: bytes) -> int:
        """0 for the initiator, ``i`` for ``hops[i - 1]``."""
        return self.path.index(node)

    def check_links(self, network: Network) -> None:
        for a, b in zip(self.path, self.path[1:]):
            if not network.has_link(a, b):
                raise LinkMissing(f"no QKD link between circuit neighbours {a.hex()[:8]} and {b.hex()[:8]}")


class KemDirectory(dict):
    """NodeId -> Kyber-768 public key."""

    @classmethod
    def from_network(cls, network: Network, nodes) -> KemDirectory:
        return cls({n: network.kem_keypair(n).public_key for n in nodes})


@dataclass
class LayerKeys:
    """Initiator-side layer keys from ORR setup, first hop first."""

    keys: list[LayerKey]
    setup_time: float = 0.0
    bytes_on_wire: list[WireRecord] = field(default_factory=list)
    observations: ObservationLog | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.keys)

    def __getitem__(self, i):
        return self.keys[i]

    def __iter__(self):
        return iter(self.keys)


@dataclass
class RunTranscript:
    model: str
    n: int
    circuit: Circuit
    secret: bytes = field(repr=False)
    delivered_secret: bytes | None = field(repr=False)
    encryption_time: float
    distribution_time: float
    bytes_on_wire: list[WireRecord] = field(repr=False)
    observations: ObservationLog = field(repr=False)
    pads: dict[LinkId, list[QkdPad]] = field(repr=False)
    counters: dict[str, int] = field(default_factory=dict)
    variant: Variant | None = None
    trusted: bytes | None = None
    setup: LayerKeys | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.delivered_secret is not None and self.delivered_secret == self.secret

    @property
    def wire_total(self) -> int:
        return sum(r.n_bytes for r in self.bytes_on_wire)

    def audit(self) -> AuditReport:
        return audit_observations(
            self.observations,
            self.secret,
            model=self.model,
            initiator=self.circuit.initiator,
            hops=list(self.circuit.hops),
            pads=self.pads,
            trusted=self.trusted,
        )


def _finish(model: str, circuit: Circuit, record: RunRecord, **extra) -> RunTranscript:
    secret = record.results.get(circuit.initiator)
    delivered = record.results.get(circuit.destination)
    timer = record.timer
    transcript = RunTranscript(
        model=model,
        n=circuit.n,
        circuit=circuit,
        secret=secret,
        delivered_secret=delivered,
        encryption_time=timer.duration("encryption") / 1e9 if timer.has("encryption") else math.nan,
        distribution_time=timer.between("secret", "delivered") / 1e9 if timer.has("delivered") else math.nan,
        bytes_on_wire=record.ledger,
        observations=record.observations,
        pads=record.pads,
        counters=record.counters,
        **extra,
    )
    if record.error is not None:
        node, exc = record.error
        exc.hop = circuit.position(node) if node in circuit.path else None
        exc.node = node
        exc.transcript = transcript
        raise exc
    return transcript


def _new_secret(ctx: NodeContext, secret: bytes | None) -> bytes:
    ctx.timer.mark("secret")
    s = secret if secret is not None else ctx.rng.bytes(SECRET_LEN)
    if len(s) != SECRET_LEN:
        raise ValueError("secret must be 32 bytes")
    return s


# -- KR ---------------------------------------------------------------------------


def kr_run(network: Network, circuit: Circuit, secret: bytes | None = None, *, rng: RngContext, timeout: float = DEFAULT_TIMEOUT) -> RunTranscript:
    circuit.check_links(network)

    def initiator(ctx: NodeContext):
        s = _new_secret(ctx, secret)
        first = circuit.hops[0]
        pad = ctx.pad_out(first, SECRET_LEN)
        with ctx.timer.phase("encryption"):
            c = otp_xor(s, pad.key)
        ctx.send(first, "kr", c, key_id=pad.key_id, header=circuit.hops[1:])
        return s

    def node(ctx: NodeContext):
        msg = ctx.recv("kr")
        pad = ctx.pad_in(msg.src, msg.key_id)
        s = ctx.otp_decrypt("kr", msg.body, pad.key)
        if not msg.header:
            ctx.timer.mark("delivered")
            return s
        nxt, rest = msg.header[0], msg.header[1:]
        out = ctx.pad_out(nxt, SECRET_LEN)
        ctx.send(nxt, "kr", otp_xor(s, out.key), key_id=out.key_id, header=rest)
        return None

    behaviors = {circuit.initiator: initiator, **{h: node for h in circuit.hops}}
    record = network.run(behaviors, rng=rng, wait_for=[circuit.initiator, circuit.destination], timeout=timeout)
    return _finish("kr", circuit, record)


# -- TN ---------------------------------------------------------------------------


def trusted_node(circuit: Circuit) -> bytes:
    """The mid-circuit relay that aggregates: ``hops[ceil(n/2)]``, 1-based."""
    if circuit.n < 2:
        raise ConfigError("TN needs at least one relay between initiator and destination")
    return circuit.hops[math.ceil(circuit.n / 2) - 1]


def tn_run(network: Network, circuit: Circuit, secret: bytes | None = None, *, rng: RngContext, timeout: float = DEFAULT_TIMEOUT) -> RunTranscript:
    circuit.check_links(network)
    t_node = trusted_node(circuit)
    relays = circuit.intermediates
    path = circuit.path

    def initiator(ctx: NodeContext):
        s = _new_secret(ctx, secret)
        for i, hop in enumerate(circuit.hops):
            succ = path[i + 2] if i + 2 < len(path) else None
            header = (path[i], succ, t_node)
            if hop == t_node:
                header += (relays, circuit.destination)
            ctx.send(hop, "tn-request", header=header)
        first = circuit.hops[0]
        pad = ctx.pad_out(first, SECRET_LEN)
        ctx.send(first, "tn-keyid", key_id=pad.key_id)
        ctx.send(t_node, "tn-c0", otp_xor(s, pad.key))
        return s

    def node(ctx: NodeContext):
        req = ctx.recv("tn-request")
        pred, succ, trusted = req.header[:3]
        if succ is None:
            announce = ctx.recv("tn-keyid")
            k_in = ctx.pad_in(pred, announce.key_id)
            c_star = ctx.recv("tn-cstar")
            s = ctx.otp_decrypt("tn-final", c_star.body, k_in.key)
            ctx.timer.mark("delivered")
            return s
        k_out = ctx.pad_out(succ, SECRET_LEN)
        ctx.send(succ, "tn-keyid", key_id=k_out.key_id)
        announce = ctx.recv("tn-keyid")
        k_in = ctx.pad_in(pred, announce.key_id)
        x = otp_xor(k_in.key, k_out.key)
        ctx.observe("tn-x", x)
        if ctx.node_id != trusted:
            ctx.send(trusted, "tn-x", x)
            return None
        relay_order, destination = req.header[3], req.header[4]
        # take contributions in circuit order so the run stays reproducible
        c0 = ctx.recv("tn-c0").body
        parts = {r: x if r == ctx.node_id else ctx.recv("tn-x", src=r).body for r in relay_order}
        aggregates = []
        with ctx.timer.phase("encryption"):
            acc = c0
            aggregates.append(acc)
            for r in relay_order:
                acc = otp_xor(acc, parts[r])
                aggregates.append(acc)
        for a in aggregates:
            ctx.observe("tn-aggregate", a)
        ctx.count("tn_xor_bytes", SECRET_LEN * len(relay_order))
        ctx.send(destination, "tn-cstar", acc)
        return None

    behaviors = {circuit.initiator: initiator, **{h: node for h in circuit.hops}}
    record = network.run(behaviors, rng=rng, wait_for=[circuit.initiator, circuit.destination, t_node], timeout=timeout)
    return _finish("tn", circuit, record, trusted=t_node)


# -- ORR setup ---------------------------------------------------------------------


def _layer_key(shared: bytes) -> LayerKey:
    if len(shared) != KEM_SHARED_SECRET_LEN:
        raise KemFailure("KEM returned a shared secret of the wrong size")
    return LayerKey(kdf_expand(shared, "enc"), kdf_expand(shared, "mac"))


def orr_setup(
    network: Network,
    circuit: Circuit,
    directory: KemDirectory | None = None,
    *,
    rng: RngContext,
    timeout: float = DEFAULT_TIMEOUT,
) -> LayerKeys:
    """Establish one layer key per hop with Kyber-768.

    The initiator encapsulates to each hop's public key.  Ciphertext ``j``
    is wrapped in the layer keys of hops ``1..j-1`` and walked out hop by
    hop over QKD-padded links, so a hop only ever learns its successor.
    Each hop answers with a ``created`` message relayed back to the
    initiator before the next hop is extended to.
    """
    circuit.check_links(network)
    if directory is None:
        directory = KemDirectory.from_network(network, circuit.hops)
    missing = [h for h in circuit.hops if h not in directory]
    if missing:
        raise UnknownNode(f"hop {missing[0].hex()[:8]} has no registered KEM public key")

    def initiator(ctx: NodeContext):
        keys: list[LayerKey] = []
        first = circuit.hops[0]
        with ctx.timer.phase("setup"):
            for j, hop in enumerate(circuit.hops):
                ct, shared = kem_encapsulate(directory[hop], ctx.rng)
                cell = ct
                for i in range(j - 1, -1, -1):
                    cell = sym_encrypt(keys[i].enc_key, bytes([TAG_RELAY]) + circuit.hops[i + 1] + cell, ctx.rng)
                keys.append(_layer_key(shared))
                pad = ctx.pad_out(first, len(cell))
                ctx.send(first, "setup", otp_xor(cell, pad.key), key_id=pad.key_id)
                ctx.recv("created")
        return keys

    def node(ctx: NodeContext):
        ctx.state.store.pop("orr_key", None)
        secret_key = network.kem_keypair(ctx.node_id).secret_key
        my_key = pred = None
        while True:
            msg = ctx.recv()
            if msg.kind == "created":
                ctx.send(pred, "created")
                continue
            pad = ctx.pad_in(msg.src, msg.key_id)
            cell = ctx.otp_decrypt("setup-link", msg.body, pad.key)
            if my_key is None:
                pred = msg.src
                my_key = _layer_key(kem_decapsulate(secret_key, cell))
                ctx.state.store["orr_key"] = my_key
                ctx.send(pred, "created")
                continue
            step = ctx.peel("setup-peel", OnionFrame(Variant.ORR, cell), my_key.enc_key)
            if not isinstance(step, Relay):
                raise KemFailure("setup cell did not carry a relay layer")
            out = ctx.pad_out(step.next_hop, len(step.inner.body))
            ctx.send(step.next_hop, "setup", otp_xor(step.inner.body, out.key), key_id=out.key_id)

    behaviors = {circuit.initiator: initiator, **{h: node for h in circuit.hops}}
    record = network.run(behaviors, rng=rng, wait_for=[circuit.initiator], timeout=timeout)
    if record.error is not None:
        node_id, exc = record.error
        exc.node = node_id
        raise exc
    return LayerKeys(record.results[circuit.initiator], record.timer.duration("setup") / 1e9, record.ledger, record.observations)


def node_layer_key(network: Network, node: bytes) -> LayerKey:
    return network.nodes[node].store["orr_key"]


# -- ORR / ORR-Ext data phase ---------------------------------------------------------


def _onion_run(
    network: Network,
    circuit: Circuit,
    layer_keys: LayerKeys,
    variant: Variant,
    secret: bytes | None,
    *,
    rng: RngContext,
    signer: SigningKey | None,
    tamper_hop: int | None,
    tamper_offset: int,
    link_cipher: str,
    timeout: float,
) -> RunTranscript:
    circuit.check_links(network)
    if len(layer_keys) != circuit.n:
        raise ConfigError("layer keys do not match the circuit")
    if link_cipher not in ("xor", "aes"):
        raise ConfigError("link_cipher must be 'xor' or 'aes'")
    ext = variant is not Variant.ORR
    verifier_pk = signer.public_key if signer is not None else None

    def protect(ctx: NodeContext, peer: bytes, wire: bytes) -> None:
        if link_cipher == "xor":
            pad = ctx.pad_out(peer, len(wire))
            ctx.send(peer, "onion", otp_xor(wire, pad.key), key_id=pad.key_id)
        else:
            pad = ctx.pad_out(peer, 32)
            ctx.send(peer, "onion", sym_encrypt(SymKey(pad.key), wire, ctx.rng), key_id=pad.key_id)

    def unprotect(ctx: NodeContext, msg) -> bytes:
        pad = ctx.pad_in(msg.src, msg.key_id)
        if link_cipher == "xor":
            return ctx.otp_decrypt("link", msg.body, pad.key)
        plain = sym_decrypt(SymKey(pad.key), msg.body)
        ctx.observe("link", plain)
        return plain

    def initiator(ctx: NodeContext):
        s = _new_secret(ctx, secret)
        stats: dict[str, int] = {}
        with ctx.timer.phase("encryption"):
            if ext:
                frame = build_onion_ext(s, list(circuit.hops), list(layer_keys), variant, signer, ctx.rng, stats)
            else:
                frame = build_onion(s, list(circuit.hops), list(layer_keys), ctx.rng)
        if stats:
            ctx.count("auth_bytes", stats["auth_bytes"])
        protect(ctx, circuit.hops[0], frame.encode())
        return s

    def node(ctx: NodeContext):
        msg = ctx.recv("onion")
        frame = OnionFrame.decode(unprotect(ctx, msg))
        key = ctx.state.store["orr_key"]
        if ext:
            verifier = key.mac_key if variant is Variant.EXT_HMAC256 else verifier_pk
            step = ctx.peel_ext("peel", frame, key.enc_key, verifier)
        else:
            step = ctx.peel("peel", frame, key.enc_key)
        if isinstance(step, Final):
            ctx.timer.mark("delivered")
            return step.secret
        protect(ctx, step.next_hop, step.inner.encode())
        return None

    tamper = None
    if tamper_hop is not None:
        if not 0 <= tamper_hop < circuit.n:
            raise ConfigError(f"tamper hop must be in [0, {circuit.n - 1}]")
        tamper = flip_byte(circuit.path[tamper_hop], "onion", tamper_offset)

    behaviors = {circuit.initiator: initiator, **{h: node for h in circuit.hops}}
    record = network.run(behaviors, rng=rng, wait_for=[circuit.initiator, circuit.destination], timeout=timeout, tamper=tamper)
    model = "orr-ext" if ext else "orr"
    return _finish(model, circuit, record, variant=variant, setup=layer_keys)


def orr_run(
    network: Network,
    circuit: Circuit,
    layer_keys: LayerKeys,
    secret: bytes | None = None,
    *,
    rng: RngContext,
    tamper_hop: int | None = None,
    tamper_offset: int = 0,
    link_cipher: str = "xor",
    timeout: float = DEFAULT_TIMEOUT,
) -> RunTranscript:
    return _onion_run(
        network, circuit, layer_keys, Variant.ORR, secret, rng=rng, signer=None,
        tamper_hop=tamper_hop, tamper_offset=tamper_offset, link_cipher=link_cipher, timeout=timeout,
    )


def initiator_signing_key(network: Network, node: bytes, variant: Variant) -> SigningKey | None:
    """Long-lived signing key of ``node`` for a signature variant (None for HMAC)."""
    if variant in (Variant.ORR, Variant.EXT_HMAC256):
        return None
    store = network.nodes[node].store
    slot = f"sig-{variant.scheme.value}"
    if slot not in store:
        store[slot] = sig_keygen(variant.scheme, RngContext(network.topology.seed).derive("sig", node, slot))
    return store[slot]


def orr_ext_run(
    network: Network,
    circuit: Circuit,
    layer_keys: LayerKeys,
    variant: Variant = Variant.EXT_HMAC256,
    secret: bytes | None = None,
    *,
    rng: RngContext,
    signer: SigningKey | None = None,
    tamper_hop: int | None = None,
    tamper_offset: int = 0,
    link_cipher: str = "xor",
    timeout: float = DEFAULT_TIMEOUT,
) -> RunTranscript:
    if variant is Variant.ORR:
        raise ConfigError("orr_ext_run needs an Ext variant")
    if signer is None:
        signer = initiator_signing_key(network, circuit.initiator, variant)
    return _onion_run(
        network, circuit, layer_keys, variant, secret, rng=rng, signer=signer,
        tamper_hop=tamper_hop, tamper_offset=tamper_offset, link_cipher=link_cipher, timeout=timeout,
    )


def run_model(
    network: Network,
    circuit: Circuit,
    model: str,
    *,
    rng: RngContext,
    variant: Variant = Variant.EXT_HMAC256,
    secret: bytes | None = None,
    **kwargs: Any,
) -> RunTranscript:
    """One complete distribution, including ORR setup where needed."""
    model = model.lower()
    if model == "kr":
        return kr_run(network, circuit, secret, rng=rng, **kwargs)
    if model == "tn":
        return tn_run(network, circuit, secret, rng=rng, **kwargs)
    if model in ("orr", "orr-ext"):
        keys = orr_setup(network, circuit, rng=rng.derive("setup"))
        if model == "orr":
            return orr_run(network, circuit, keys, secret, rng=rng, **kwargs)
        return orr_ext_run(network, circuit, keys, variant, secret, rng=rng, **kwargs)
    raise ConfigError(f"unknown model {model!r}; expected one of {MODELS}")
