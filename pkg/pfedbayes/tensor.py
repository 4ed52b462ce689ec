"""Dense float64 linear algebra and context-keyed random number streams."""

from __future__ import annotations

import hashlib

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

_UINT64_LIMIT = 2**64


class Matrix(BaseModel):
    """A dense row-major matrix of 64-bit floats."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    """The matrix entries, shape (rows, cols)."""

    @field_validator("data", mode="before")
    @classmethod
    def validator_as_float64_2d(cls, value: object) -> np.ndarray:
        """Coerce to a 2-D float64 array and reject non-finite entries."""
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError(f"A matrix must be 2-dimensional, got {array.ndim} dimensions.")
        if not np.all(np.isfinite(array)):
            raise ValueError("Matrix entries must be finite.")
        return array

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])

    @classmethod
    def zeros(cls, rows: int, cols: int) -> Matrix:
        return cls(data=np.zeros((rows, cols), dtype=np.float64))

    @classmethod
    def identity(cls, size: int) -> Matrix:
        return cls(data=np.eye(size, dtype=np.float64))


def matvec(m: Matrix, v: np.ndarray | list[float]) -> np.ndarray:
    """Return the matrix-vector product `m @ v`.

    Args:
        m (Matrix): The matrix.
        v (np.ndarray | list[float]): A vector of length `m.cols`.

    Returns:
        np.ndarray: A vector of length `m.rows`.
    """
    vector = np.asarray(v, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != m.cols:
        raise ValueError(f"Dimension mismatch: matrix has {m.cols} columns, vector has shape {vector.shape}.")
    return m.data @ vector


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Return the matrix product `a @ b`."""
    if a.cols != b.rows:
        raise ValueError(f"Dimension mismatch: {a.rows}x{a.cols} times {b.rows}x{b.cols}.")
    return Matrix(data=a.data @ b.data)


def derive_stream_id(*keys: str | int) -> int:
    """Hash a context tuple (purpose, client id, round, ...) into a 64-bit stream id.

    The hash only depends on the keys, never on process state, so every platform derives the same id.
    """
    normalized = tuple(int(key) if isinstance(key, int | np.integer) else str(key) for key in keys)
    digest = hashlib.blake2b(repr(normalized).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class RngStream(BaseModel):
    """An immutable handle on a reproducible random stream.

    Every call to `generator()` replays the stream from its start, so draws depend on the
    (seed, stream_id) pair alone and not on which thread or in which order they are taken.
    """

    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, lt=_UINT64_LIMIT)
    stream_id: int = Field(default=0, ge=0, lt=_UINT64_LIMIT)

    def generator(self) -> np.random.Generator:
        """Return a fresh counter-based generator positioned at the start of this stream."""
        seed_sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seed_sequence))

    def spawn(self, *keys: str | int) -> RngStream:
        """Derive an independent child stream keyed by `keys`."""
        return RngStream(seed=self.seed, stream_id=derive_stream_id(self.stream_id, *keys))


def stream_for(seed: int, purpose: str, *context: str | int) -> RngStream:
    """The keyed entry point every module uses to obtain its random stream.

    Args:
        seed (int): The single experiment seed.
        purpose (str): What the draws are for, see `RNG_PURPOSE`.
        *context (str | int): Further keys, e.g. the client id and the round.

    Returns:
        RngStream: The stream for that context.
    """
    return RngStream(seed=seed, stream_id=derive_stream_id(str(purpose), *context))


def randn(stream: RngStream, n: int) -> np.ndarray:
    """Draw `n` i.i.d. standard normal samples from the start of `stream`."""
    if n < 0:
        raise ValueError(f"Cannot draw a negative number of samples ({n}).")
    return stream.generator().standard_normal(n)
