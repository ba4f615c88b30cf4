"""Seed splitting: every random stream is derived from one 64-bit seed, a
module tag and an integer index, so results do not depend on how work is
scheduled across threads."""

import hashlib

import numpy as np


def _tag_word(tag):
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "little")


def stream(seed, tag, *index):
    """SeedSequence for ``(seed, tag, index...)``."""
    words = (_tag_word(tag),) + tuple(int(i) for i in index)
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=words)


def generator(seed, tag, *index):
    """Independent ``numpy`` Generator for ``(seed, tag, index...)``."""
    return np.random.default_rng(stream(seed, tag, *index))
