"""Sign binarization, the straight-through estimator, and 1-bit packing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SnapshotError

STE_BOUND = 1.0


def sign_forward(latent: np.ndarray) -> np.ndarray:
    """+1 where ``latent >= 0``, -1 elsewhere (same dtype as the input)."""
    latent = np.asarray(latent)
    if np.isnan(latent).any():
        raise ValueError("cannot binarize NaN latent values")
    one = np.ones((), dtype=latent.dtype if latent.dtype.kind == "f" else np.float32)
    return np.where(latent >= 0, one, -one)


def ste_backward(upstream: np.ndarray, latent: np.ndarray) -> np.ndarray:
    """Pass ``upstream`` through where ``|latent| <= 1``, zero elsewhere."""
    upstream = np.asarray(upstream)
    latent = np.asarray(latent)
    if upstream.shape != latent.shape:
        raise ValueError(f"shape mismatch: upstream {upstream.shape} vs latent {latent.shape}")
    return np.where(np.abs(latent) <= STE_BOUND, upstream, np.zeros((), dtype=upstream.dtype))


@dataclass
class BinaryTensor:
    """Real-valued latents whose forward view is ``sign(latent)``.

    Exposes ``values``/``grads`` under the same names as
    :class:`birf.nn_core.ParamTensor` so one Adam routine updates both.
    """

    name: str
    latent: np.ndarray
    grads: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grads = np.zeros(self.latent.shape, dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        return self.latent

    @property
    def shape(self) -> tuple[int, ...]:
        return self.latent.shape

    def signs(self) -> np.ndarray:
        return sign_forward(self.latent)

    def zero_grad(self) -> None:
        self.grads.fill(0.0)

    @classmethod
    def uniform(cls, name: str, shape, rng: np.random.Generator, scale: float = 1e-4, dtype=np.float32):
        return cls(name, rng.uniform(-scale, scale, size=shape).astype(dtype))


@dataclass(frozen=True)
class PackedBits:
    """±1 values stored one bit each: +1 -> 1, -1 -> 0, LSB-first, zero padding."""

    bit_count: int
    data: bytes

    def __post_init__(self) -> None:
        if self.bit_count < 0:
            raise SnapshotError("negative bit count")
        if len(self.data) != (self.bit_count + 7) // 8:
            raise SnapshotError(
                f"packed data holds {len(self.data)} bytes but {self.bit_count} bits need "
                f"{(self.bit_count + 7) // 8}"
            )


def pack_bits(signs: np.ndarray) -> PackedBits:
    flat = np.asarray(signs).reshape(-1)
    pos = flat == 1
    if not np.all(pos | (flat == -1)):
        raise ValueError("pack_bits expects entries in {-1, +1}")
    return PackedBits(flat.size, np.packbits(pos, bitorder="little").tobytes())


def unpack_bits(p: PackedBits, dtype=np.float32) -> np.ndarray:
    if len(p.data) != (p.bit_count + 7) // 8:
        raise SnapshotError(f"{len(p.data)} bytes inconsistent with bit_count {p.bit_count}")
    bits = np.unpackbits(np.frombuffer(p.data, dtype=np.uint8), count=p.bit_count, bitorder="little")
    return (bits.astype(dtype) * 2 - 1).astype(dtype)
