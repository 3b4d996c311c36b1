from __future__ import annotations

import pytest

from qkdrelay.crypto import RngContext, SigScheme, sig_available
from qkdrelay.protocols import Circuit
from qkdrelay.simnet import Network, Topology

needs_falcon = pytest.mark.skipif(not sig_available(SigScheme.FALCON1024), reason="pqcrypto falcon backend missing")
needs_dilithium = pytest.mark.skipif(not sig_available(SigScheme.DILITHIUM3), reason="dilithium-py missing")


def line_network(n: int, seed: int = 1) -> tuple[Network, Circuit]:
    """A fresh ``n``-hop circuit over a line of ``n + 1`` nodes."""
    topo = Topology.random_line(n + 1, seed)
    return Network(topo), Circuit.along(topo.nodes)


@pytest.fixture
def rng():
    return RngContext(1234)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
