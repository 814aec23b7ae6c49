"""Small shared helpers: seed derivation and optional thread mapping."""

from __future__ import annotations

import concurrent.futures
import hashlib
import os
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from a path of context labels."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") & ((1 << 63) - 1)


def thread_count() -> int:
    raw = os.environ.get("METASTACK_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n >= 1:
        return n
    return min(4, os.cpu_count() or 1)


def pmap(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Map preserving input order; threads when METASTACK_THREADS allows.

    Worth using only around kernel-heavy calls that release the GIL.
    """
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
