"""Semantic ID packing and the table-free SID-to-embedding conversion.

A semantic ID packs an n-gram of centered codeword digits into one
unsigned integer: s = sum_{k=1..n} L^k * (offset + c_k). The radix index
starts at 1, so every valid SID is divisible by the base L (s / L is the
plain base-L reading of the digits). Unpacking is exact via floor-divide
and modulo, which is what makes SID embeddings (SIDE) possible: the latent
digits are recovered from the integer alone, with no lookup table and no
learned parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import DTYPE

_U64_MAX = 2**64 - 1


class SidError(ValueError):
    pass


@dataclass(frozen=True)
class SidScheme:
    """Packing layout: base L, n digits per gram, number of grams.

    `offset` is the centering shift applied to digits before packing
    (1 for ternary digits in {-1, 0, +1}); it defaults to (L-1)//2. The
    codeword vector is partitioned into `grams` contiguous n-grams; a
    short final gram is padded with the centered-zero digit.
    """

    base: int = 3
    ngram: int = 3
    grams: int = 1
    offset: int | None = None

    def __post_init__(self):
        if self.base < 2:
            raise SidError(f"base must be >= 2, got {self.base}")
        if self.ngram < 1:
            raise SidError(f"ngram must be >= 1, got {self.ngram}")
        if self.grams < 1:
            raise SidError(f"grams must be >= 1, got {self.grams}")
        if self.offset is None:
            object.__setattr__(self, "offset", (self.base - 1) // 2)
        if not 0 <= self.offset < self.base:
            raise SidError(f"offset {self.offset} outside [0, {self.base})")
        if self.max_sid > _U64_MAX:
            raise SidError(
                f"scheme overflows u64: base={self.base} ngram={self.ngram} "
                f"needs {self.max_sid.bit_length()} bits")

    @property
    def max_sid(self):
        """Largest packable value (all digits at base-1): L^(n+1) - L."""
        return self.base ** (self.ngram + 1) - self.base

    @property
    def digits(self):
        return self.ngram * self.grams

    @property
    def digit_lo(self):
        return -self.offset

    @property
    def digit_hi(self):
        return self.base - 1 - self.offset

    def header(self):
        return f"#SIDv1 base={self.base} ngram={self.ngram} grams={self.grams}"

    @classmethod
    def from_header(cls, line):
        parts = line.strip().split()
        if not parts or parts[0] != "#SIDv1":
            raise SidError(f"bad SID file header: {line!r}")
        kv = dict(p.split("=", 1) for p in parts[1:])
        try:
            return cls(base=int(kv["base"]), ngram=int(kv["ngram"]),
                       grams=int(kv["grams"]))
        except KeyError as exc:
            raise SidError(f"SID header missing field {exc}") from None

    @classmethod
    def for_digits(cls, total_digits, base=3, ngram=3):
        """Scheme covering `total_digits` codeword digits (last gram padded)."""
        grams = -(-total_digits // ngram)
        return cls(base=base, ngram=ngram, grams=grams)


def _powers(scheme):
    # L^1 .. L^n as u64; safe because the scheme bound was checked.
    return (scheme.base ** np.arange(1, scheme.ngram + 1)).astype(np.uint64)


def _check_digits(scheme, digits):
    if digits.shape[-1] != scheme.ngram:
        raise SidError(
            f"expected {scheme.ngram} digits per gram, got {digits.shape[-1]}")
    if digits.min() < scheme.digit_lo or digits.max() > scheme.digit_hi:
        raise SidError(
            f"digit out of range [{scheme.digit_lo}, {scheme.digit_hi}]")


def pack(scheme, digits):
    """Pack one n-gram of centered digits into a SID integer.

    digits may be a length-n vector (returns int) or an (m, n) matrix
    (returns an m-vector of u64).
    """
    arr = np.asarray(digits, dtype=np.int64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    _check_digits(scheme, arr)
    shifted = (arr + scheme.offset).astype(np.uint64)
    sids = (shifted * _powers(scheme)[None, :]).sum(axis=1, dtype=np.uint64)
    return int(sids[0]) if single else sids


def unpack(scheme, sids):
    """Invert pack via floor-divide and modulo; exact for every valid SID."""
    arr = np.asarray(sids, dtype=np.uint64)
    single = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if arr.size and int(arr.max()) > scheme.max_sid:
        raise SidError(
            f"SID {int(arr.max())} exceeds scheme maximum {scheme.max_sid}")
    base = np.uint64(scheme.base)
    if arr.size and np.any(arr % base != 0):
        raise SidError("SID not divisible by the base; not a packed value")
    digits = (arr[:, None] // _powers(scheme)[None, :] % base).astype(np.int64)
    digits -= scheme.offset
    return digits[0] if single else digits


def pack_all(scheme, digit_vector):
    """Pack a full codeword vector into its `grams` SIDs.

    Accepts a (digits,) vector or (m, digits) matrix where digits may fall
    short of grams*ngram; the tail is padded with centered-zero digits.
    """
    arr = np.asarray(digit_vector, dtype=np.int64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    total = scheme.digits
    if arr.shape[1] > total:
        raise SidError(
            f"codeword has {arr.shape[1]} digits; scheme holds {total}")
    if arr.shape[1] < total:
        pad = np.zeros((arr.shape[0], total - arr.shape[1]), dtype=np.int64)
        arr = np.concatenate([arr, pad], axis=1)
    grouped = arr.reshape(arr.shape[0], scheme.grams, scheme.ngram)
    sids = np.stack([pack(scheme, grouped[:, g]) for g in range(scheme.grams)],
                    axis=1)
    return sids[0] if single else sids


def unpack_all(scheme, sids):
    """Recover the full digit vector (grams * ngram long, padding included)."""
    arr = np.asarray(sids, dtype=np.uint64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != scheme.grams:
        raise SidError(f"expected {scheme.grams} SIDs per record, got {arr.shape[1]}")
    digits = np.concatenate(
        [unpack(scheme, arr[:, g]) for g in range(scheme.grams)], axis=1)
    return digits[0] if single else digits


def side_embed(scheme, sids, gram_indices=None):
    """Deterministically recover latent vectors from SIDs.

    Returns the centered digits as float32, concatenated across grams.
    This is a pure function of (scheme, sids): no model, no table, no
    learned state, so the memory cost is independent of how many distinct
    SIDs exist. `gram_indices` optionally restricts the output to a subset
    of grams (e.g. a prefix), in order.
    """
    arr = np.asarray(sids, dtype=np.uint64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != scheme.grams:
        raise SidError(f"expected {scheme.grams} SIDs per record, got {arr.shape[1]}")
    grams = range(scheme.grams) if gram_indices is None else gram_indices
    cols = [unpack(scheme, arr[:, g]).astype(DTYPE) for g in grams]
    out = np.concatenate(cols, axis=1)
    return out[0] if single else out


def sid_hash(sids, table_size):
    """Baseline hashed-sparse-feature index: s mod table_size.

    Deliberately collision-prone whenever table_size is smaller than the
    SID cardinality; that failure mode is the thing the ranking harness
    measures.
    """
    if table_size < 1:
        raise SidError(f"table_size must be >= 1, got {table_size}")
    arr = np.asarray(sids, dtype=np.uint64)
    out = (arr % np.uint64(table_size)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# SID file format: one header line, then one whitespace-separated record of
# decimal u64 SIDs per sample.


def write_sid_file(path, scheme, sids):
    arr = np.atleast_2d(np.asarray(sids, dtype=np.uint64))
    if arr.shape[1] != scheme.grams:
        raise SidError(f"records have {arr.shape[1]} SIDs, scheme {scheme.grams}")
    lines = [scheme.header()]
    lines.extend(" ".join(str(int(v)) for v in row) for row in arr)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    import os
    os.replace(tmp, path)


def read_sid_file(path):
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        scheme = SidScheme.from_header(header)
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != scheme.grams:
                raise SidError(
                    f"line {lineno}: expected {scheme.grams} SIDs, got {len(fields)}")
            try:
                rows.append([int(f) for f in fields])
            except ValueError:
                raise SidError(f"line {lineno}: non-integer SID") from None
    sids = np.asarray(rows, dtype=np.uint64).reshape(len(rows), scheme.grams)
    unpack_all(scheme, sids)  # validates range and divisibility
    return scheme, sids
