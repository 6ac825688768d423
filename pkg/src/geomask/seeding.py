"""Seed derivation shared by every module."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *names) -> int:
    """63-bit seed from a global seed and a path of names.

    ``int.from_bytes(sha256("<seed>/<name1>/<name2>...")[:8], "little") >> 1``;
    stable across processes, platforms and languages.
    """
    key = "/".join([str(int(seed))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1
