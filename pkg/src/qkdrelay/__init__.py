"""QKD network key relaying: KR, TN, ORR and ORR-Ext."""

from .errors import QkdRelayError
from .onioncodec import OnionFrame, Variant, build_onion, build_onion_ext, onion_size, peel_layer, peel_layer_ext
from .protocols import (
    MODELS,
    Circuit,
    KemDirectory,
    LayerKeys,
    RunTranscript,
    kr_run,
    orr_ext_run,
    orr_run,
    orr_setup,
    run_model,
    tn_run,
)
from .qkdlink import KeyManager, LinkId
from .simnet import Network, Topology, audit_observations, net_build

__all__ = [
    "MODELS",
    "Circuit",
    "KemDirectory",
    "KeyManager",
    "LayerKeys",
    "LinkId",
    "Network",
    "OnionFrame",
    "QkdRelayError",
    "RunTranscript",
    "Topology",
    "Variant",
    "audit_observations",
    "build_onion",
    "build_onion_ext",
    "kr_run",
    "net_build",
    "onion_size",
    "orr_ext_run",
    "orr_run",
    "orr_setup",
    "peel_layer",
    "peel_layer_ext",
    "run_model",
    "tn_run",
]
