"""``qkdrelay`` command line: bench, sizes, audit and a mock KMS.

Exit codes: 0 success, 1 trend self-check failed, 2 invalid plan or
arguments, 3 a run failed, 4 audit lattice violation, 5 KMS bind failure,
6 crypto backend size mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .bench import DEFAULT_NODES, FORMATS, ExperimentPlan, RunFailure, check_trends, run_plan, write_outputs
from .crypto import SIG_SIZES, RngContext, SymKey, sig_available, sig_keygen, verify_parameter_sizes
from .errors import AuthError, BackendMismatch, ConfigError, QkdRelayError
from .onioncodec import (
    LayerKey,
    Variant,
    build_onion,
    build_onion_ext,
    layer_ciphertext_sizes,
    onion_size,
)
from .protocols import MODELS, Circuit, orr_ext_run, orr_run, orr_setup, run_model
from .qkdlink import NODE_ID_LEN, KeyManager, LinkId
from .simnet import Network, Topology, routing_view

log = logging.getLogger("qkdrelay")

EXIT_OK, EXIT_TRENDS, EXIT_PLAN, EXIT_RUN, EXIT_LATTICE, EXIT_BIND, EXIT_BACKEND = range(7)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip().lower() for x in text.split(",") if x.strip())


def _variant(text: str) -> Variant:
    try:
        return Variant.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- bench ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    plan = ExperimentPlan(
        models=args.models,
        ext_variant=args.variant,
        node_counts=args.nodes,
        iterations=args.iters,
        seed=args.seed,
        out_dir=Path(args.out),
        formats=args.format + (("svg",) if args.svg and "svg" not in args.format else ()),
        parallel=args.parallel,
        latency=args.latency,
        warmup=args.warmup,
    )
    try:
        plan.validate()
    except ConfigError as exc:
        print(f"invalid plan: {exc}", file=sys.stderr)
        return EXIT_PLAN
    try:
        rows = run_plan(plan)
    except RunFailure as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        print(f"replay with: --seed {exc.seed} --models {exc.model} --nodes {exc.n}", file=sys.stderr)
        return EXIT_RUN
    for path in write_outputs(rows, plan):
        print(f"wrote {path}")
    if args.assert_trends:
        report = check_trends(rows)
        print(report.render())
        if not report.ok:
            return EXIT_TRENDS
    return EXIT_OK


# -- sizes -----------------------------------------------------------------------------


@dataclass
class SizeRow:
    variant: Variant
    onion: int
    public_key: int
    signature: int
    ciphertext: int
    built: int | None

    @property
    def verified(self) -> bool | None:
        return None if self.built is None else self.built == self.onion


def built_length(variant: Variant, n: int, seed: int = 0) -> int | None:
    """Length of an actually constructed frame body, or None without a backend."""
    if variant.scheme is not None and variant is not Variant.EXT_HMAC256 and not sig_available(variant.scheme):
        return None
    rng = RngContext(seed).derive("sizes", int(variant), n)
    circuit = [rng.bytes(NODE_ID_LEN) for _ in range(n)]
    keys = [LayerKey(SymKey(rng.bytes(32)), SymKey(rng.bytes(32))) for _ in range(n)]
    secret = rng.bytes(32)
    if variant is Variant.ORR:
        return len(build_onion(secret, circuit, keys, rng).body)
    signer = None if variant is Variant.EXT_HMAC256 else sig_keygen(variant.scheme, rng)
    return len(build_onion_ext(secret, circuit, keys, variant, signer, rng).body)


def size_rows(n: int, variants, verify: bool = True) -> list[SizeRow]:
    rows = []
    for v in variants:
        pk, sig = SIG_SIZES[v.scheme] if v.scheme is not None else (0, 0)
        rows.append(
            SizeRow(v, onion_size(v, n), pk, sig, layer_ciphertext_sizes(v, n)[0], built_length(v, n) if verify else None)
        )
    return rows


def render_sizes(rows: list[SizeRow], n: int) -> str:
    out = [
        f"Onion sizes in bytes for a circuit of n={n}",
        f"{'Variant':<22}{'Onion':>8}{'PublicKey':>11}{'Signature':>11}{'Ciphertext':>12}  built",
    ]
    for r in rows:
        check = {True: "ok", False: f"MISMATCH ({r.built})", None: "n/a"}[r.verified]
        out.append(
            f"{r.variant.label:<22}{r.onion:>8}{r.public_key or '-':>11}{r.signature or '-':>11}{r.ciphertext:>12}  {check}"
        )
    return "\n".join(out)


def cmd_sizes(args) -> int:
    variants = list(Variant) if args.variants == ("all",) else [Variant.parse(v) for v in args.variants]
    status = EXIT_OK
    for n in args.nodes:
        if n < 1:
            print("n must be >= 1", file=sys.stderr)
            return EXIT_PLAN
        rows = size_rows(n, variants, verify=not args.no_verify)
        print(render_sizes(rows, n))
        if any(r.verified is False for r in rows):
            status = EXIT_RUN
    return status


# -- audit -------------------------------------------------------------------------------


def _audit_network(n: int, seed: int) -> tuple[Network, Circuit]:
    topo = Topology.random_line(n + 1, seed)
    return Network(topo), Circuit.along(topo.nodes)


def cmd_audit(args) -> int:
    network, circuit = _audit_network(args.nodes, args.seed)
    rng = RngContext(args.seed).derive("audit")
    if args.tamper is not None:
        return _tamper_audit(args, network, circuit, rng)
    try:
        transcript = run_model(network, circuit, args.model, rng=rng, variant=args.variant)
    except QkdRelayError as exc:
        print(f"run failed at hop {getattr(exc, 'hop', '?')}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    report = transcript.audit()
    print(report.render())
    if args.model in ("orr", "orr-ext"):
        for i, node in enumerate(circuit.intermediates, start=1):
            view = routing_view(transcript.observations, node, list(circuit.path))
            names = sorted(f"hop{circuit.position(v)}" for v in view)
            print(f"  routing view of hop{i}: {{{', '.join(names)}}}")
    return EXIT_OK if report.ok else EXIT_LATTICE


def _tamper_audit(args, network: Network, circuit: Circuit, rng: RngContext) -> int:
    if args.model not in ("orr", "orr-ext"):
        print("--tamper applies to orr and orr-ext", file=sys.stderr)
        return EXIT_PLAN
    hop = args.tamper
    if not 0 <= hop < circuit.n:
        print(f"--tamper must be in [0, {circuit.n - 1}] for n={circuit.n}", file=sys.stderr)
        return EXIT_PLAN
    keys = orr_setup(network, circuit, rng=rng.derive("setup"))
    ext = args.model == "orr-ext"
    try:
        if ext:
            t = orr_ext_run(network, circuit, keys, args.variant, rng=rng, tamper_hop=hop, tamper_offset=args.offset)
        else:
            t = orr_run(network, circuit, keys, rng=rng, tamper_hop=hop, tamper_offset=args.offset)
    except QkdRelayError as exc:
        at = getattr(exc, "hop", None)
        print(f"tamper after hop {hop}: {type(exc).__name__} at hop {at}: {exc}")
        if ext:
            ok = isinstance(exc, AuthError) and at == hop + 1
        else:
            ok = not isinstance(exc, AuthError)
        print("verdict: " + ("expected" if ok else "UNEXPECTED"))
        return EXIT_OK if ok else EXIT_LATTICE
    outcome = "intact secret" if t.ok else "corrupted secret"
    print(f"tamper after hop {hop}: destination accepted a {outcome}")
    ok = not ext and not t.ok
    print("verdict: " + ("expected (basic ORR cannot detect tampering)" if ok else "UNEXPECTED"))
    return EXIT_OK if ok else EXIT_LATTICE


# -- kms serve -----------------------------------------------------------------------------


def node_id(name: str) -> bytes:
    """32 hex characters are taken literally; any other name is hashed."""
    name = name.strip()
    if len(name) == 2 * NODE_ID_LEN:
        try:
            return bytes.fromhex(name)
        except ValueError:
            pass
    return hashlib.sha256(name.encode()).digest()[:NODE_ID_LEN]


@dataclass
class KmsConfig:
    seed: int
    finite: bool
    max_key_count: int
    host: str
    local: bytes | None
    links: list[LinkId]
    peers: dict[bytes, str]


def load_kms_config(path: str | None) -> KmsConfig:
    """INI file with ``[kms]``, ``[links]`` and optional ``[peers]`` sections.

    ::

        [kms]
        seed = 7
        local = alice            ; serve only this SAE (else X-SAE-ID header)
        [links]
        alice = bob, carol
        [peers]
        bob = http://127.0.0.1:8802
    """
    cp = configparser.ConfigParser()
    if path is not None:
        if not cp.read(path):
            raise ConfigError(f"cannot read config {path}")
    kms = cp["kms"] if cp.has_section("kms") else {}
    try:
        seed = int(kms.get("seed", "0"))
        max_key_count = int(kms.get("max_key_count", "100000"))
    except ValueError as exc:
        raise ConfigError(f"bad integer in [kms]: {exc}") from None
    finite = str(kms.get("finite", "no")).lower() in ("1", "yes", "true", "on")
    links = []
    if cp.has_section("links"):
        for a, targets in cp.items("links"):
            for b in targets.split(","):
                if b.strip():
                    link = LinkId(node_id(a), node_id(b))
                    if link not in links:
                        links.append(link)
    peers = {node_id(k): v for k, v in cp.items("peers")} if cp.has_section("peers") else {}
    local = kms.get("local")
    return KmsConfig(seed, finite, max_key_count, kms.get("host", "127.0.0.1"), node_id(local) if local else None, links, peers)


def cmd_kms_serve(args) -> int:
    from .kme_http import KmeHttpServer

    try:
        cfg = load_kms_config(args.config)
    except (ConfigError, configparser.Error) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_PLAN
    manager = KeyManager(cfg.seed, finite=cfg.finite, max_key_count=cfg.max_key_count)
    for link in cfg.links:
        manager.add_link(link)
    try:
        server = KmeHttpServer(manager, (args.host or cfg.host, args.port), local_sae=cfg.local, peers=cfg.peers)
    except OSError as exc:
        print(f"cannot bind {args.host or cfg.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_BIND
    print(f"KMS listening on {server.url} with {len(cfg.links)} link(s)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkdrelay", description="QKD key-relay simulator and benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--skip-backend-check", action="store_true", help="do not verify crypto parameter sizes at startup")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run an experiment plan")
    b.add_argument("--models", type=_str_list, default=MODELS)
    b.add_argument("--variant", type=_variant, default=Variant.EXT_HMAC256, help="ORR-Ext variant (hmac, falcon, dilithium)")
    b.add_argument("--nodes", type=_int_list, default=DEFAULT_NODES)
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="results")
    b.add_argument("--format", type=_str_list, default=("csv", "json", "md"), help=f"subset of {','.join(FORMATS)}")
    b.add_argument("--svg", action="store_true", help="also write a line chart")
    b.add_argument("--parallel", type=int, default=1, help="worker processes across (model, n) cells")
    b.add_argument("--latency", type=float, default=0.0, help="fixed per-message delay in seconds")
    b.add_argument("--assert-trends", action="store_true")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sizes", help="onion size table")
    s.add_argument("--nodes", type=_int_list, default=(5,))
    s.add_argument("--variants", type=_str_list, default=("all",))
    s.add_argument("--no-verify", action="store_true", help="skip building real frames")
    s.set_defaults(func=cmd_sizes)

    a = sub.add_parser("audit", help="run one distribution and audit the observation logs")
    a.add_argument("--model", choices=MODELS, required=True)
    a.add_argument("--nodes", type=int, default=5)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--variant", type=_variant, default=Variant.EXT_HMAC256)
    a.add_argument("--tamper", type=int, metavar="HOP", help="flip a byte of the frame sent by this circuit position")
    a.add_argument("--offset", type=int, default=0, help="byte to flip, counted from the end of the frame")
    a.set_defaults(func=cmd_audit)

    k = sub.add_parser("kms", help="mock ETSI 014 key management service")
    ksub = k.add_subparsers(dest="kms_command", required=True)
    ks = ksub.add_parser("serve")
    ks.add_argument("--port", type=int, default=8800)
    ks.add_argument("--host", default=None)
    ks.add_argument("--config", default=None)
    ks.set_defaults(func=cmd_kms_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PLAN if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.skip_backend_check:
        try:
            verify_parameter_sizes()
        except BackendMismatch as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_BACKEND
    if args.command == "audit" and args.model == "tn" and args.nodes < 2:
        print("TN needs --nodes >= 2", file=sys.stderr)
        return EXIT_PLAN
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PLAN
