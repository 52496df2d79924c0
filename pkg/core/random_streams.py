# core/random_streams.py
"""Generadores aleatorios con contador (Philox) indexados por (semilla, propósito).

Cada escena y cada uso obtiene su propio flujo, así los benchmarks son reproducibles
aunque se ejecuten en paralelo y en cualquier orden.
"""
import hashlib

import numpy as np


def stream(seed: int, *purpose) -> np.random.Generator:
    digest = hashlib.sha256(repr((int(seed),) + tuple(purpose)).encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
