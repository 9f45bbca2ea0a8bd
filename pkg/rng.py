"""Закрепленный генератор случайных чисел.

Все случайные решения проекта берут поток из make_rng: счетчиковый генератор
Philox, ключ которого выводится из мастер-зерна и именованного пути
(стадия, случай, ...). Так подпотоки независимы и стабильны между платформами.
"""

import zlib
from typing import Union

import numpy as np
import torch


Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if int(key) < 0:
        raise ValueError(f"rng keys must be non-negative, got {key}")
    return int(key)


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """SeedSequence для пути (seed, *keys)"""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Генератор Philox для пути (seed, *keys)"""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys: Key) -> int:
    """Целое 63-битное зерно для пути (seed, *keys)"""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, *keys: Key) -> torch.Generator:
    """torch.Generator (CPU), засеянный из того же пути"""
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, *keys))
    return generator
