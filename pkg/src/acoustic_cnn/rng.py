"""Keyed, stateless random streams.

Every random draw in the package is addressed by a key path such as
``(master_seed, "dropout", hf_iteration, utterance_id, layer_id)``. The path
is hashed into a 128-bit Philox key, so a draw never depends on the order in
which other draws were made. There is no package-level generator.
"""

import hashlib

import numpy as np


def _encode(part):
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("boolean key parts are ambiguous; use int or str")
    if isinstance(part, (int, np.integer)):
        tag, body = b"i", str(int(part)).encode()
    elif isinstance(part, str):
        tag, body = b"s", part.encode("utf-8")
    elif isinstance(part, bytes):
        tag, body = b"b", part
    else:
        raise TypeError(f"unsupported key part {part!r}")
    return tag + len(body).to_bytes(4, "little") + body


def derive_key(*path):
    """Hash a key path into a 128-bit integer."""
    h = hashlib.blake2b(digest_size=16, person=b"acoustic-cnn")
    for part in path:
        h.update(_encode(part))
    return int.from_bytes(h.digest(), "little")


def derive_seed(*path):
    """64-bit seed for a key path (low half of :func:`derive_key`)."""
    return derive_key(*path) & 0xFFFFFFFFFFFFFFFF


def generator(*path):
    """Return a fresh counter-based generator keyed on ``path``."""
    return np.random.Generator(np.random.Philox(key=derive_key(*path)))


def generator_from_seed(seed):
    """Generator keyed directly on a stored 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))
