"""Deterministic seed fan-out.

A single root seed is hashed together with a label path so every grid point /
job gets a stable seed; adding grid points never perturbs existing ones.
"""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, *parts) -> int:
    h = hashlib.sha256(str(int(root_seed)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:4], "big") & 0x7FFFFFFF
