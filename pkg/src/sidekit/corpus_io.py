"""Embedding corpus file format and synthetic data generators.

Corpus files are little-endian binary: magic "SIDE", version u32, rows
u32, dim u32, then rows*dim float32 payload. Writes go through a
temporary file and an atomic rename; reads validate the header and the
payload length and report the byte offset of any problem.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .nn_core import DTYPE

CORPUS_MAGIC = b"SIDE"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class CorpusFormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def corpus_write(path, corpus):
    arr = np.ascontiguousarray(corpus, dtype=DTYPE)
    if arr.ndim != 2:
        raise CorpusFormatError(f"corpus must be 2-D, got ndim={arr.ndim}")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION,
                              arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes())
    os.replace(tmp, path)


def corpus_read(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CorpusFormatError(
            f"file too short for header: {len(data)} bytes", offset=len(data))
    magic, version, rows, dim = _HEADER.unpack_from(data, 0)
    if magic != CORPUS_MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}", offset=0)
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported version {version}", offset=4)
    expected = rows * dim * 4
    actual = len(data) - _HEADER.size
    if actual != expected:
        raise CorpusFormatError(
            f"payload length mismatch: expected {expected} bytes "
            f"({rows}x{dim} f32), got {actual}", offset=_HEADER.size)
    payload = np.frombuffer(data, dtype="<f4", count=rows * dim,
                            offset=_HEADER.size)
    return payload.reshape(rows, dim).astype(DTYPE)


def generate_clustered_corpus(rows, dim, clusters=100, noise=0.08, seed=0,
                              correlated_with=None, mix=0.7):
    """Unit-norm vectors around random cluster centers.

    With `correlated_with` (another corpus of equal shape), each row is a
    normalized blend mix*other + (1-mix)*fresh so two signals share latent
    structure without being identical.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    assign = rng.integers(0, clusters, size=rows)
    x = centers[assign] + noise * rng.normal(size=(rows, dim))
    if correlated_with is not None:
        other = np.asarray(correlated_with, dtype=np.float64)
        if other.shape != (rows, dim):
            raise CorpusFormatError(
                f"correlated corpus shape {other.shape} != ({rows}, {dim})")
        x = mix * other + (1.0 - mix) * x
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(DTYPE)
