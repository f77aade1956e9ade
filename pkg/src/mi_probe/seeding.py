"""Sub-seed derivation: every random stream descends from one master seed."""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, role: str) -> int:
    """``sha256("<master>:<role>")`` truncated to 63 bits."""
    digest = hashlib.sha256(f"{int(master_seed)}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
