from __future__ import annotations

import hashlib

import torch

_SEED_MASK = (1 << 63) - 1


def derive_seed(run_seed: int, *keys: object) -> int:
    """Counter-based stream id: the same (run_seed, keys) always gives the same seed."""
    material = "/".join([str(int(run_seed)), *(str(key) for key in keys)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _SEED_MASK


def generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed) & _SEED_MASK)
    return gen


def stream(run_seed: int, *keys: object) -> torch.Generator:
    return generator(derive_seed(run_seed, *keys))
