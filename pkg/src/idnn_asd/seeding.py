"""Stable seed derivation.

Python's ``hash`` is salted per process, so named seeds go through SHA-256.
"""

import hashlib


def derive_seed(*parts) -> int:
    """63-bit seed determined only by the string forms of ``parts``."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
