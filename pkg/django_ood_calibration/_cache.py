"""
private helpers for memoising derived arrays (django cache + tensor directories)
"""

import base64
import functools
import hashlib
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from django.conf import settings
from django.core.cache import caches

from ._core import read_tensor, stable_digest, write_tensor
from .misc import TensorFormatError, get_OODCAL_CACHE

logger = logging.getLogger(__name__)


# clear if you test multiple OODCAL_KEY_HASH definitions
@functools.lru_cache()
def _get_kind_hash(kind: str) -> str:
    return base64.b85encode(
        hashlib.new(
            getattr(settings, "OODCAL_KEY_HASH", "sha256"), kind.encode("utf-8")
        ).digest()[:12]
    ).decode("ascii")


def get_cache_key(kind: str, digest: str) -> str:
    return "%(prefix)s%(kind)s:%(digest)s" % {
        "prefix": getattr(settings, "OODCAL_KEY_PREFIX", "ooc:"),
        "kind": _get_kind_hash(kind),
        "digest": digest,
    }


def _load(store: Path, names) -> Optional[dict]:
    if not store.is_dir():
        return None
    names = names or sorted(p.name for p in store.iterdir() if p.is_dir())
    if not names:
        return None
    try:
        return {name: read_tensor(store / name) for name in names}
    except (FileNotFoundError, TensorFormatError):
        return None


def cached_arrays(
    kind: str,
    key_parts: tuple,
    compute: Callable[[], dict],
    store_dir=None,
    names: Optional[tuple] = None,
) -> dict:
    """
    Return compute() through two cache layers.

    Layer one is the django cache named by OODCAL_CACHE, layer two (optional)
    is a tensor directory per key below store_dir. Values are always float32,
    whichever layer they come from.
    """
    digest = stable_digest(kind, *key_parts)
    cache = caches[get_OODCAL_CACHE()]
    cache_key = get_cache_key(kind, digest)
    arrays = cache.get(cache_key)
    if arrays is not None:
        logger.debug("cache hit %s", cache_key)
        return arrays
    store = Path(store_dir) / kind / digest if store_dir is not None else None
    if store is not None:
        arrays = _load(store, names)
    if arrays is None:
        arrays = {
            name: np.asarray(value, dtype=np.float32)
            for name, value in compute().items()
        }
        if store is not None:
            for name, value in arrays.items():
                write_tensor(store / name, value)
    cache.set(cache_key, arrays, None)
    return arrays
