"""Input-channel sampling policies and channel attention modules.

Markers are numbered from 1. A combination is stored either as a
:class:`MarkerAvailability` or as an integer bitmask where marker ``k`` maps
to bit ``k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (ParameterRegistry, Tensor, channel_scale, dense, he_uniform, relu,
                     sigmoid, spatial_mean, xavier_uniform)

SAMPLING_VARIANTS = ("MZ", "MS", "MS-DR", "MS-VR")


@dataclass(frozen=True)
class MarkerAvailability:
    """Binary vector telling which of the K input markers are present."""

    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(bool(b)) for b in self.bits))

    @classmethod
    def full(cls, K: int) -> "MarkerAvailability":
        return cls((1,) * K)

    @classmethod
    def from_mask(cls, mask: int, K: int) -> "MarkerAvailability":
        if mask < 0 or mask >= (1 << K):
            raise ContractError(f"bitmask {mask} out of range for K={K}")
        return cls(tuple((mask >> k) & 1 for k in range(K)))

    @classmethod
    def from_markers(cls, markers, K: int) -> "MarkerAvailability":
        bits = [0] * K
        for m in markers:
            if not 1 <= m <= K:
                raise ContractError(f"marker {m} outside 1..{K}")
            bits[m - 1] = 1
        return cls(tuple(bits))

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def mask(self) -> int:
        return sum(b << k for k, b in enumerate(self.bits))

    @property
    def markers(self) -> tuple:
        return tuple(k + 1 for k, b in enumerate(self.bits) if b)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    @property
    def name(self) -> str:
        return "m_" + "".join(str(m) for m in self.markers)

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.bits, dtype=dtype)

    def require_nonempty(self):
        if self.popcount == 0:
            raise ContractError("marker availability is empty; at least one marker must be present")
        return self


@dataclass(frozen=True)
class SamplingPolicy:
    variant: str = "MS"
    r_drop: float = 0.5

    def __post_init__(self):
        if self.variant not in SAMPLING_VARIANTS:
            raise ContractError(f"unknown sampling variant {self.variant!r}; expected one of {SAMPLING_VARIANTS}")
        if self.variant != "MZ" and not 0.0 < self.r_drop < 1.0:
            raise ContractError(f"r_drop must lie strictly inside (0, 1), got {self.r_drop}")

    @property
    def samples(self) -> bool:
        return self.variant != "MZ"


def sample_markers(batch: np.ndarray, policy: SamplingPolicy, rng: np.random.Generator,
                   phase: str, provided: MarkerAvailability):
    """Mask the channels of one ``[K,H,W]`` item according to ``policy``.

    At train phase sampling variants keep each provided marker with
    probability ``1 - r_drop``, redrawing whenever nothing survives. Returns
    the masked copy and the availability actually presented to the network.
    """
    if phase not in ("train", "infer"):
        raise ContractError(f"phase must be 'train' or 'infer', got {phase!r}")
    provided.require_nonempty()
    K = provided.K
    if batch.shape[0] != K:
        raise DimensionError(f"batch has {batch.shape[0]} channels but availability has K={K}")

    bits = np.asarray(provided.bits, dtype=bool)
    if phase == "train" and policy.samples:
        idx = np.flatnonzero(bits)
        while True:
            keep = rng.random(idx.size) < 1.0 - policy.r_drop
            if keep.any():
                break
        bits = np.zeros(K, dtype=bool)
        bits[idx[keep]] = True
    used = MarkerAvailability(tuple(bits))

    factor = 1.0
    if policy.variant == "MS-DR" and phase == "train":
        factor = 1.0 / (1.0 - policy.r_drop)
    elif policy.variant == "MS-VR":
        factor = K / used.popcount

    out = np.array(batch, copy=True)
    out[~bits] = 0
    if factor != 1.0:
        out[bits] *= out.dtype.type(factor)
    return out, used


# ---------------------------------------------------------------------------
# attention modules
# ---------------------------------------------------------------------------


class SEModule:
    """Squeeze-and-excitation: channel weights from the channels' own spatial means."""

    def __init__(self, w1: Tensor, w2: Tensor):
        self.w1 = w1
        self.w2 = w2

    @classmethod
    def create(cls, registry: ParameterRegistry, prefix: str, F: int, rng) -> "SEModule":
        hidden = F // 2
        w1 = registry.add(f"{prefix}.w1", he_uniform(rng, (hidden, F), max(F, 1), registry.dtype))
        w2 = registry.add(f"{prefix}.w2", xavier_uniform(rng, (F, hidden), max(hidden, 1), F, registry.dtype))
        return cls(w1, w2)

    @property
    def F(self) -> int:
        return self.w2.shape[0]

    @staticmethod
    def parameter_count(F: int) -> int:
        return 2 * F * (F // 2)


def se_forward(x: Tensor, module: SEModule) -> Tensor:
    if x.ndim != 3 or x.shape[0] != module.F:
        raise DimensionError(f"SE module expects {module.F} channels, got input {x.shape}")
    s = spatial_mean(x)
    weights = sigmoid(dense(relu(dense(s, module.w1)), module.w2))
    return channel_scale(x, weights)


class MEModule:
    """Marker excite: channel weights from the marker-availability vector."""

    def __init__(self, w1: Tensor, w2: Tensor, b1: Optional[Tensor], b2: Optional[Tensor]):
        self.w1, self.w2, self.b1, self.b2 = w1, w2, b1, b2

    @classmethod
    def create(cls, registry: ParameterRegistry, prefix: str, K: int, F: int, rng,
               use_bias: bool = True) -> "MEModule":
        hidden = 2 ** K - 1
        w1 = registry.add(f"{prefix}.w1", he_uniform(rng, (hidden, K), K, registry.dtype))
        b1 = registry.add(f"{prefix}.b1", np.zeros(hidden)) if use_bias else None
        w2 = registry.add(f"{prefix}.w2", xavier_uniform(rng, (F, hidden), hidden, F, registry.dtype))
        b2 = registry.add(f"{prefix}.b2", np.zeros(F)) if use_bias else None
        return cls(w1, w2, b1, b2)

    @property
    def K(self) -> int:
        return self.w1.shape[1]

    @property
    def F(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def use_bias(self) -> bool:
        return self.b1 is not None

    @staticmethod
    def parameter_count(K: int, F: int, use_bias: bool = True) -> int:
        hidden = 2 ** K - 1
        if use_bias:
            return hidden * (K + 1) + F * hidden + F
        return hidden * K + F * hidden


def _availability_tensor(v, K: int, dtype) -> Tensor:
    bits = v.bits if isinstance(v, MarkerAvailability) else tuple(np.asarray(v).reshape(-1))
    if len(bits) != K:
        raise DimensionError(f"availability vector has length {len(bits)} but module expects K={K}")
    return Tensor(np.asarray(bits, dtype=dtype))


def excitation_vector(v, module: MEModule) -> Tensor:
    """Channel weights ``sigmoid(w2 relu(w1 v + b1) + b2)`` for availability ``v``."""
    vt = _availability_tensor(v, module.K, module.w1.dtype)
    hidden = relu(dense(vt, module.w1, module.b1))
    return sigmoid(dense(hidden, module.w2, module.b2))


def me_forward(x: Tensor, v, module: MEModule) -> Tensor:
    if x.ndim != 3 or x.shape[0] != module.F:
        raise DimensionError(f"ME module expects {module.F} channels, got input {x.shape}")
    return channel_scale(x, excitation_vector(v, module))
