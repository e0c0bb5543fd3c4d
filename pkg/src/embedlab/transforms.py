"""Post-hoc representation transforms: Matryoshka truncation and binary codes.

Binary layout: bit ``k`` of an embedding lives in word ``k // 64`` at bit
position ``k % 64`` (least-significant bit first); words are unsigned
64-bit integers and serialise little-endian.  Padding bits in the last
word are zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError


@dataclass(frozen=True)
class TruncationSpec:
    target_dim: int
    renormalize: bool = True


@dataclass(frozen=True)
class BinaryEmbedding:
    words: np.ndarray  # uint64, shape (ceil(d/64),) or (N, ceil(d/64))
    dim: int

    def unpack(self) -> np.ndarray:
        """Bits as a 0/1 uint8 array of length ``dim`` (or (N, dim))."""
        w = np.atleast_2d(self.words).astype("<u8")
        bits = np.unpackbits(w.view(np.uint8), axis=-1, bitorder="little")[:, : self.dim]
        return bits[0] if self.words.ndim == 1 else bits

    def signs(self) -> np.ndarray:
        return self.unpack().astype(np.float64) * 2.0 - 1.0

    def to_bytes(self) -> bytes:
        return np.asarray(self.words, dtype="<u8").tobytes()


def truncate(e: np.ndarray, spec: TruncationSpec | int) -> np.ndarray:
    """Leading ``target_dim`` coordinates, optionally L2-renormalised.

    Accepts one vector or a matrix of row vectors.
    """
    if isinstance(spec, int):
        spec = TruncationSpec(spec)
    e = np.asarray(e, dtype=np.float64)
    d = e.shape[-1]
    if not 1 <= spec.target_dim <= d:
        raise DomainError(f"target_dim must lie in [1, {d}], got {spec.target_dim}")
    out = e[..., : spec.target_dim]
    if spec.renormalize:
        # rescale by the largest entry first so tiny vectors do not underflow
        peak = np.abs(out).max(axis=-1, keepdims=True)
        out = out / np.where(peak == 0, 1.0, peak)
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        out = out / np.where(norm == 0, 1.0, norm)
    return out


def binarize(e: np.ndarray) -> BinaryEmbedding:
    """Sign-threshold at zero (exact zeros map to bit 0) and pack."""
    e = np.asarray(e)
    d = e.shape[-1]
    bits = np.atleast_2d(e > 0).astype(np.uint8)
    n_words = (d + 63) // 64
    padded = np.zeros((bits.shape[0], n_words * 64), dtype=np.uint8)
    padded[:, :d] = bits
    words = np.packbits(padded, axis=-1, bitorder="little").view("<u8")
    return BinaryEmbedding(words[0] if e.ndim == 1 else words, d)


def _popcount(x: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.ascontiguousarray(x).view(np.uint8), axis=-1).sum(axis=-1)


def hamming(a: BinaryEmbedding, b: BinaryEmbedding) -> int:
    if a.dim != b.dim:
        raise ContractError(f"binary embeddings of different length {a.dim} vs {b.dim}")
    return int(_popcount(np.bitwise_xor(a.words, b.words)[None, :])[0])


def binary_similarity(a: BinaryEmbedding, b: BinaryEmbedding) -> float:
    """``(d - 2 * hamming) / d``: the cosine of the two +-1 sign vectors."""
    return (a.dim - 2 * hamming(a, b)) / a.dim


def binary_similarity_matrix(a: BinaryEmbedding, b: BinaryEmbedding) -> np.ndarray:
    """All-pairs binary similarity between two packed batches."""
    if a.dim != b.dim:
        raise ContractError("binary batches of different length")
    A = np.atleast_2d(a.words)
    B = np.atleast_2d(b.words)
    x = np.bitwise_xor(A[:, None, :], B[None, :, :])
    ham = np.unpackbits(x.view(np.uint8), axis=-1).sum(axis=-1)
    return (a.dim - 2.0 * ham) / a.dim
