"""Deterministic simulated network of node actors.

One thread per node actor.  Actors talk only through :meth:`NodeContext.send`
and :meth:`NodeContext.recv`; classical channels form a complete graph while
QKD pads exist only on topology links.  Every plaintext a node derives goes
through the node's context, which appends it to the run's
:class:`ObservationLog`.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .crypto import KemKeyPair, RngContext, kem_keygen, otp_xor
from .errors import ConfigError, LinkMissing, NoChannel, RunTimeout, UnknownLink
from .onioncodec import OnionFrame, PeelResult, peel_layer, peel_layer_ext
from .qkdlink import NODE_ID_LEN, KeyManager, LinkId, LocalKeyClient, QkdPad, short

DEFAULT_TIMEOUT = 60.0


# -- topology -----------------------------------------------------------------


@dataclass(frozen=True)
class Topology:
    nodes: tuple[bytes, ...]
    links: tuple[LinkId, ...]
    seed: int = 0

    @classmethod
    def line(cls, nodes: list[bytes], seed: int = 0) -> Topology:
        return cls(tuple(nodes), tuple(LinkId(a, b) for a, b in zip(nodes, nodes[1:])), seed)

    @classmethod
    def random_line(cls, n_nodes: int, seed: int) -> Topology:
        """``n_nodes`` fresh random NodeIds chained into a line."""
        rng = RngContext(seed).derive("topology")
        return cls.line([rng.bytes(NODE_ID_LEN) for _ in range(n_nodes)], seed)


@dataclass
class NodeState:
    """Long-lived per-node state that survives between runs."""

    node_id: bytes
    kem: KemKeyPair | None = None
    store: dict[str, Any] = field(default_factory=dict)


# -- run records ---------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    src: bytes
    dst: bytes
    kind: str
    body: bytes = b""
    key_id: str | None = None
    header: tuple = ()
    stamp: int = 0


@dataclass(frozen=True)
class WireRecord:
    src: bytes
    dst: bytes
    kind: str
    n_bytes: int
    stamp: int = 0


class ObservationLog:
    """Append-only per-node record of derived plaintexts."""

    def __init__(self):
        self._entries: dict[bytes, list[tuple[str, bytes]]] = defaultdict(list)
        self._lock = threading.Lock()

    def record(self, node: bytes, phase: str, data: bytes) -> None:
        with self._lock:
            self._entries[node].append((phase, bytes(data)))

    def entries(self, node: bytes, phase: str | None = None) -> list[tuple[str, bytes]]:
        with self._lock:
            items = list(self._entries.get(node, ()))
        return [e for e in items if phase is None or e[0] == phase]

    def nodes(self) -> list[bytes]:
        return list(self._entries)

    def snapshot(self) -> dict[bytes, tuple[tuple[str, bytes], ...]]:
        with self._lock:
            return {k: tuple(v) for k, v in self._entries.items()}


class Timer:
    """Monotonic marks and phase durations, shared by all actors of a run."""

    def __init__(self):
        self._marks: dict[str, int] = {}
        self._phases: dict[str, int] = {}
        self._lock = threading.Lock()

    def mark(self, label: str) -> int:
        now = time.perf_counter_ns()
        with self._lock:
            if label in self._marks:
                raise ValueError(f"timer mark {label!r} already set")
            self._marks[label] = now
        return now

    @contextmanager
    def phase(self, label: str):
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            stop = time.perf_counter_ns()
            with self._lock:
                if label in self._phases:
                    raise ValueError(f"timer phase {label!r} already recorded")
                self._phases[label] = stop - start

    def between(self, start: str, stop: str) -> int:
        return self._marks[stop] - self._marks[start]

    def duration(self, label: str) -> int:
        return self._phases[label]

    def has(self, label: str) -> bool:
        return label in self._marks or label in self._phases


class Stopped(Exception):
    """Raised inside an actor's recv once the run is over."""


class RunAborted(Exception):
    """Raised inside an actor's recv when another actor failed."""


_STOP = object()
_ABORT = object()


@dataclass
class RunRecord:
    """Outcome of one run.  ``ledger`` is in Lamport order, ties broken by
    sender, which is reproducible even when actors send concurrently."""

    results: dict[bytes, Any]
    error: tuple[bytes, BaseException] | None
    ledger: list[WireRecord]
    observations: ObservationLog
    timer: Timer
    counters: dict[str, int]
    pads: dict[LinkId, list[QkdPad]]

    @property
    def wire_bytes(self) -> int:
        return sum(r.n_bytes for r in self.ledger)


# -- actors ---------------------------------------------------------------------


class NodeContext:
    """What an actor may touch during one run."""

    def __init__(self, run: _Run, node: bytes, rng: RngContext):
        self._run = run
        self.node_id = node
        self.rng = rng
        self.state: NodeState = run.network.nodes[node]
        self.timer = run.timer
        self._kme = LocalKeyClient(run.network.kms, node)
        self._pending: list[Message] = []
        self._clock = 0

    def __repr__(self) -> str:
        return f"NodeContext({short(self.node_id)})"

    # messaging
    def send(self, dst: bytes, kind: str, body: bytes = b"", *, key_id: str | None = None, header: tuple = ()) -> None:
        self._clock += 1
        self._run.send(Message(self.node_id, dst, kind, bytes(body), key_id, header, self._clock))

    def _deliver(self, msg: Message) -> Message:
        self._clock = max(self._clock, msg.stamp) + 1
        return msg

    def recv(self, kind: str | None = None, timeout: float | None = None, *, src: bytes | None = None) -> Message:
        """Next message matching ``kind`` and ``src``; others are kept for later."""

        def wanted(msg: Message) -> bool:
            return (kind is None or msg.kind == kind) and (src is None or msg.src == src)

        for i, msg in enumerate(self._pending):
            if wanted(msg):
                return self._deliver(self._pending.pop(i))
        inbox = self._run.inboxes[self.node_id]
        deadline = time.monotonic() + (timeout if timeout is not None else self._run.timeout)
        while True:
            try:
                item = inbox.get(timeout=max(deadline - time.monotonic(), 0.0))
            except queue.Empty:
                raise RunTimeout(f"{short(self.node_id)} waited too long for {kind or 'a message'}") from None
            if item is _STOP:
                raise Stopped
            if item is _ABORT:
                raise RunAborted
            if wanted(item):
                return self._deliver(item)
            self._pending.append(item)

    # bookkeeping
    def observe(self, phase: str, data: bytes) -> None:
        self._run.observations.record(self.node_id, phase, data)

    def count(self, name: str, amount: int = 1) -> None:
        with self._run.lock:
            self._run.counters[name] = self._run.counters.get(name, 0) + amount

    # QKD pads
    def pad_out(self, peer: bytes, n_bytes: int) -> QkdPad:
        """Request a fresh pad toward ``peer`` (ETSI enc_keys)."""
        try:
            (pad,) = self._kme.enc_keys(peer, 1, 8 * n_bytes)
        except UnknownLink as exc:
            raise LinkMissing(str(exc)) from exc
        return pad

    def pad_in(self, peer: bytes, key_id: str) -> QkdPad:
        """Fetch the pad ``peer`` announced (ETSI dec_keys)."""
        try:
            (pad,) = self._kme.dec_keys(peer, [key_id])
        except UnknownLink as exc:
            raise LinkMissing(str(exc)) from exc
        return pad

    # the only decryption paths available to protocol code
    def otp_decrypt(self, phase: str, ciphertext: bytes, pad: bytes) -> bytes:
        plain = otp_xor(ciphertext, pad)
        self.observe(phase, plain)
        return plain

    def peel(self, phase: str, frame: OnionFrame, enc_key) -> PeelResult:
        result = peel_layer(frame, enc_key)
        self.observe(phase, result.plaintext)
        return result

    def peel_ext(self, phase: str, frame: OnionFrame, enc_key, verifier) -> PeelResult:
        result = peel_layer_ext(frame, enc_key, verifier)
        self.observe(phase, result.plaintext)
        return result


class _Run:
    def __init__(self, network: Network, timeout: float, tamper):
        self.network = network
        self.timeout = timeout
        self.tamper = tamper
        self.inboxes = {n: queue.SimpleQueue() for n in network.nodes}
        self.ledger: list[WireRecord] = []
        self.observations = ObservationLog()
        self.timer = Timer()
        self.counters: dict[str, int] = {}
        self.lock = threading.Lock()

    def send(self, msg: Message) -> None:
        if msg.dst not in self.inboxes or msg.dst == msg.src:
            raise NoChannel(f"no channel {short(msg.src)} -> {short(msg.dst)}")
        if self.tamper is not None:
            msg = self.tamper(msg)
        if self.network.latency > 0:
            time.sleep(self.network.latency)
        with self.lock:
            self.ledger.append(WireRecord(msg.src, msg.dst, msg.kind, len(msg.body), msg.stamp))
        self.inboxes[msg.dst].put(msg)


class Network:
    """Actors, channels and the key manager built from a :class:`Topology`."""

    def __init__(self, topology: Topology, *, latency: float = 0.0, finite_keys: bool = False):
        if len(set(topology.nodes)) != len(topology.nodes):
            raise ConfigError("duplicate NodeId in topology")
        if any(len(n) != NODE_ID_LEN for n in topology.nodes):
            raise ConfigError(f"NodeIds must be {NODE_ID_LEN} bytes")
        self.topology = topology
        self.latency = latency
        self.kms = KeyManager(topology.seed, finite=finite_keys)
        known = set(topology.nodes)
        for link in topology.links:
            if link.a not in known or link.b not in known:
                raise ConfigError(f"link {link} names an unknown node")
            self.kms.add_link(link)
        self.nodes = {n: NodeState(n) for n in topology.nodes}
        self._rng = RngContext(topology.seed).derive("network")

    @property
    def links(self) -> list[LinkId]:
        return self.kms.links

    def has_link(self, a: bytes, b: bytes) -> bool:
        return a != b and LinkId(a, b) in set(self.kms.links)

    def kem_keypair(self, node: bytes) -> KemKeyPair:
        """Node's long-term KEM key pair, generated on first use from the topology seed."""
        state = self.nodes[node]
        if state.kem is None:
            state.kem = kem_keygen(self._rng.derive("kem", node))
        return state.kem

    def run(
        self,
        behaviors: Mapping[bytes, Callable[[NodeContext], Any]],
        *,
        rng: RngContext,
        wait_for: list[bytes] | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        tamper: Callable[[Message], Message] | None = None,
    ) -> RunRecord:
        """Run one actor per entry of ``behaviors`` until every node in
        ``wait_for`` (default: all) has returned, then stop the rest."""
        run = _Run(self, timeout, tamper)
        before = {link: len(self.kms.store(link).history) for link in self.kms.links}
        results: dict[bytes, Any] = {}
        failures: list[tuple[bytes, BaseException]] = []
        done = threading.Event()
        pending = set(wait_for if wait_for is not None else behaviors)
        state_lock = threading.Lock()

        def finish(node: bytes) -> None:
            with state_lock:
                pending.discard(node)
                if not pending:
                    done.set()

        def body(node: bytes, fn) -> None:
            ctx = NodeContext(run, node, rng.derive("node", node))
            try:
                results[node] = fn(ctx)
            except (Stopped, RunAborted):
                pass
            except BaseException as exc:  # reported to the caller
                with state_lock:
                    failures.append((node, exc))
                for inbox in run.inboxes.values():
                    inbox.put(_ABORT)
                done.set()
            finally:
                finish(node)

        threads = [
            threading.Thread(target=body, args=(node, fn), name=f"node-{short(node)}", daemon=True)
            for node, fn in behaviors.items()
        ]
        for t in threads:
            t.start()
        if not done.wait(timeout):
            for inbox in run.inboxes.values():
                inbox.put(_ABORT)
            raise RunTimeout(f"run did not finish within {timeout}s")
        for inbox in run.inboxes.values():
            inbox.put(_STOP)
        for t in threads:
            t.join(timeout)
        pads = {link: self.kms.store(link).history[before[link]:] for link in self.kms.links}
        return RunRecord(
            results=results,
            error=failures[0] if failures else None,
            ledger=sorted(run.ledger, key=lambda r: (r.stamp, r.src)),
            observations=run.observations,
            timer=run.timer,
            counters=dict(run.counters),
            pads={k: v for k, v in pads.items() if v},
        )


def net_build(topology: Topology, **kwargs) -> Network:
    return Network(topology, **kwargs)


def flip_byte(src: bytes, kind: str, position: int) -> Callable[[Message], Message]:
    """Adversary hook: flip one byte of the first ``kind`` message sent by ``src``.

    ``position`` indexes into the message body from the end so that a
    header-sized prefix can be skipped by choosing a small value.
    """
    fired = threading.Event()

    def hook(msg: Message) -> Message:
        if msg.src != src or msg.kind != kind or fired.is_set():
            return msg
        fired.set()
        if not 0 <= position < len(msg.body):
            raise ConfigError(f"tamper offset {position} outside a {len(msg.body)}-byte message")
        body = bytearray(msg.body)
        body[len(body) - 1 - position] ^= 0x01
        return Message(msg.src, msg.dst, msg.kind, bytes(body), msg.key_id, msg.header, msg.stamp)

    return hook


# -- audit ------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeVerdict:
    node: bytes
    role: str
    observes_secret: bool
    reconstructs_with_pad: bool


@dataclass
class AuditReport:
    model: str
    verdicts: list[NodeVerdict]
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_role(self, role: str) -> list[NodeVerdict]:
        return [v for v in self.verdicts if v.role == role]

    def render(self) -> str:
        lines = [f"audit model={self.model}"]
        for v in self.verdicts:
            lines.append(
                f"  {short(v.node)} {v.role:<12} observes_S={'yes' if v.observes_secret else 'no':<3} "
                f"S_from_log+one_pad={'yes' if v.reconstructs_with_pad else 'no'}"
            )
        inter = [v for v in self.verdicts if v.role in ("intermediate", "trusted")]
        seen = sum(v.observes_secret for v in inter)
        lines.append(f"{seen}/{len(inter)} intermediates observe S")
        lines.append("verdict: " + ("lattice OK" if self.ok else "LATTICE VIOLATION: " + "; ".join(self.violations)))
        return "\n".join(lines)


def _reconstructs(entries: list[tuple[str, bytes]], secret: bytes, pads: list[bytes]) -> bool:
    for _, data in entries:
        for pad in pads:
            if len(pad) == len(data) == len(secret) and otp_xor(data, pad) == secret:
                return True
    return False


def _every_link(entries, secret, pads_by_link) -> bool:
    return bool(pads_by_link) and all(_reconstructs(entries, secret, pads) for pads in pads_by_link.values())


def audit_observations(
    observations: ObservationLog,
    secret: bytes,
    *,
    model: str,
    initiator: bytes,
    hops: list[bytes],
    pads: Mapping[LinkId, list[QkdPad]],
    trusted: bytes | None = None,
) -> AuditReport:
    """Check the run's observation logs against the model's confidentiality row.

    KR: every intermediate holds S.  TN: no relay holds S, the trusted node
    recovers S from its log plus the pad of any single link.  ORR / ORR-Ext:
    nobody but the destination holds S, and no log plus one pad yields S.
    """
    pads_by_link = {link: [p.key for p in ps] for link, ps in pads.items()}
    all_pads = [p for ps in pads_by_link.values() for p in ps]
    destination = hops[-1]
    verdicts = []
    for node in [initiator, *hops]:
        entries = observations.entries(node)
        if node == initiator:
            role = "initiator"
        elif node == destination:
            role = "destination"
        elif node == trusted:
            role = "trusted"
        else:
            role = "intermediate"
        observes = any(secret in data for _, data in entries)
        if role == "trusted":
            collude = _every_link(entries, secret, pads_by_link)
        else:
            collude = _reconstructs(entries, secret, all_pads)
        verdicts.append(NodeVerdict(node, role, observes, collude))

    violations = []
    middle = [v for v in verdicts if v.role in ("intermediate", "trusted")]
    model = model.lower()
    if model == "kr":
        missing = [short(v.node) for v in middle if not v.observes_secret]
        if missing:
            violations.append(f"KR intermediates without S: {missing}")
    elif model == "tn":
        leaking = [short(v.node) for v in middle if v.observes_secret]
        if leaking:
            violations.append(f"TN relays holding S: {leaking}")
        t = [v for v in verdicts if v.role == "trusted"]
        if not t or not t[0].reconstructs_with_pad:
            violations.append("TN trusted node cannot rebuild S with a single link pad")
    elif model in ("orr", "orr-ext"):
        leaking = [short(v.node) for v in verdicts if v.role != "destination" and (v.observes_secret or v.reconstructs_with_pad)]
        if leaking:
            violations.append(f"{model} nodes able to obtain S: {leaking}")
    else:
        raise ValueError(f"unknown model {model!r}")
    dest = verdicts[-1]
    if not dest.observes_secret:
        violations.append("destination never recovered S")
    return AuditReport(model, verdicts, violations)


def routing_view(observations: ObservationLog, node: bytes, candidates: list[bytes], phase: str = "peel") -> set[bytes]:
    """NodeIds from ``candidates`` that appear in ``node``'s ``phase`` plaintexts."""
    found = set()
    for _, data in observations.entries(node, phase):
        for cand in candidates:
            if cand in data:
                found.add(cand)
    return found
