"""Model zoo: valid-convolution UNet variants, HeMIS, and their checkpoints.

Every model maps ``[K,h_in,w_in]`` marker channels plus a
:class:`~msme.attention.MarkerAvailability` to ``[2,h_out,w_out]`` logits
(background, target class). Parameters are created in a fixed order from
``ModelConfig.seed``, so two builds of one config are identical.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import (MarkerAvailability, MEModule, SamplingPolicy, SEModule, me_forward,
                        se_forward)
from .errors import ConfigError, ContractError, CorruptionError, GeometryError
from .tensor import (ParameterRegistry, Tape, Tensor, concat_channels, conv2d_valid, he_uniform,
                     maxpool2, moments, relu, upconv2, xavier_uniform)

VARIANTS = ("MZ", "MS", "MS-DR", "MS-VR", "MS-SE", "MS-ME", "HeMIS", "HeMIS-MS", "UB-member", "MS+")
PLACEMENTS = ("I", "E", "B", "D")
MS_PLUS_WIDTH = 1.125

_SAMPLER_OF = {
    "MZ": "MZ", "HeMIS": "MZ", "UB-member": "MZ",
    "MS": "MS", "MS-SE": "MS", "MS-ME": "MS", "MS+": "MS", "HeMIS-MS": "MS",
    "MS-DR": "MS-DR", "MS-VR": "MS-VR",
}


@dataclass
class ModelConfig:
    variant: str = "MS"
    K: int = 3
    depth: int = 3
    base_filters: int = 8
    width_multiplier: float = 1.0
    attention: str = "none"
    placements: tuple = ()
    me_bias: bool = True
    seed: int = 0
    r_drop: float = 0.5
    subset: int = 0
    n_out: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()
        self.placements = tuple(p for p in PLACEMENTS if p in self.placements)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if self.base_filters < 1 or self.width_multiplier <= 0:
            raise ConfigError("base_filters and width_multiplier must be positive")
        if self.attention not in ("none", "SE", "ME"):
            raise ConfigError(f"attention must be none, SE or ME; got {self.attention!r}")
        bad = [p for p in self.placements if p not in PLACEMENTS]
        if bad:
            raise ConfigError(f"unknown placements {bad}; expected a subset of {PLACEMENTS}")
        if self.variant == "UB-member" and not 0 < self.subset < (1 << self.K):
            raise ConfigError(f"UB-member needs a non-empty subset bitmask below 2^{self.K}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def preset(cls, variant: str, **overrides) -> "ModelConfig":
        """Config with the variant's customary attention and width settings."""
        base = {"variant": variant}
        if variant == "MS-ME":
            base.update(attention="ME", placements=("E", "B", "D"))
        elif variant == "MS-SE":
            base.update(attention="SE", placements=("E", "B", "D"))
        elif variant == "MS+":
            base.update(width_multiplier=MS_PLUS_WIDTH)
        base.update(overrides)
        return cls(**base)

    @property
    def is_hemis(self) -> bool:
        return self.variant in ("HeMIS", "HeMIS-MS")

    @property
    def in_channels(self) -> int:
        if self.variant == "UB-member":
            return bin(self.subset).count("1")
        return self.K

    def sampling_policy(self) -> SamplingPolicy:
        return SamplingPolicy(_SAMPLER_OF[self.variant], self.r_drop)

    def filters(self, level: int) -> int:
        return max(1, int(round(self.base_filters * self.width_multiplier))) * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placements"] = list(self.placements)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "placements" in d:
            d["placements"] = tuple(d["placements"])
        return cls(**d)


@dataclass(frozen=True)
class Geometry:
    input_size: tuple
    output_size: tuple

    @property
    def margin(self) -> int:
        return (self.input_size[0] - self.output_size[0]) // 2

    def __post_init__(self):
        for a in range(2):
            diff = self.input_size[a] - self.output_size[a]
            if self.output_size[a] <= 0 or diff < 0 or diff % 2:
                raise GeometryError(f"inconsistent geometry {self.input_size} -> {self.output_size}")
        if self.input_size[0] - self.output_size[0] != self.input_size[1] - self.output_size[1]:
            raise GeometryError("margin must be equal on both axes")


# ---------------------------------------------------------------------------
# shape propagation
# ---------------------------------------------------------------------------


def _unet_out(size: int, depth: int) -> Optional[int]:
    s = size
    for _ in range(depth):
        s -= 4
        if s <= 0 or s % 2:
            return None
        s //= 2
    s -= 4
    if s <= 0:
        return None
    for _ in range(depth):
        s = 2 * s - 4
        if s <= 0:
            return None
    return s


def _hemis_out(size: int) -> Optional[int]:
    s = size - 8
    return s if s > 0 else None


def output_size(cfg: ModelConfig, size: int) -> Optional[int]:
    """Output extent along one axis for input extent ``size``; None if invalid."""
    return _hemis_out(size) if cfg.is_hemis else _unet_out(size, cfg.depth)


def valid_sizes(cfg: ModelConfig, max_size: int) -> list:
    """All square geometries with input extent up to ``max_size``."""
    out = []
    for h in range(1, max_size + 1):
        o = output_size(cfg, h)
        if o is not None:
            out.append(Geometry((h, h), (o, o)))
    return out


def geometry_for(cfg: ModelConfig, input_hw) -> Geometry:
    outs = [output_size(cfg, s) for s in input_hw]
    if None in outs:
        near = _nearest_valid(cfg, max(input_hw))
        raise GeometryError(f"input size {tuple(input_hw)} is not valid for this model; "
                            f"nearest valid input sizes: {near}")
    return Geometry(tuple(input_hw), tuple(outs))


def geometry_for_output(cfg: ModelConfig, out_size: int) -> Geometry:
    """Smallest square geometry whose output extent is at least ``out_size``."""
    h = out_size
    while output_size(cfg, h) is None or output_size(cfg, h) < out_size:
        h += 1
    return geometry_for(cfg, (h, h))


def _nearest_valid(cfg, size, count=2):
    lo = [g.input_size[0] for g in valid_sizes(cfg, size)][-count:]
    hi, h = [], size + 1
    while len(hi) < count and h < size + 4096:
        if output_size(cfg, h) is not None:
            hi.append(h)
        h += 1
    return lo + hi


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class _Conv:
    __slots__ = ("w", "b")

    def __init__(self, registry, name, cin, cout, k, rng, init="he"):
        fan_in = cin * k * k
        if init == "he":
            w = he_uniform(rng, (cout, cin, k, k), fan_in, registry.dtype)
        else:
            w = xavier_uniform(rng, (cout, cin, k, k), fan_in, cout * k * k, registry.dtype)
        self.w = registry.add(f"{name}.w", w)
        self.b = registry.add(f"{name}.b", np.zeros(cout))

    def __call__(self, x):
        return conv2d_valid(x, self.w, self.b)


class SegmentationModel:
    """Common surface: ``forward``, ``registry``, ``geometry``."""

    cfg: ModelConfig
    registry: ParameterRegistry

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def parameter_count(self) -> int:
        return self.registry.count()

    def geometry(self, input_hw) -> Geometry:
        return geometry_for(self.cfg, input_hw)

    def _as_input(self, channels) -> Tensor:
        data = channels.data if isinstance(channels, Tensor) else np.asarray(channels)
        if data.ndim != 3:
            raise GeometryError(f"expected channels [K,H,W], got shape {data.shape}")
        if data.shape[0] != self.cfg.K:
            raise GeometryError(f"model expects K={self.cfg.K} marker channels, got {data.shape[0]}")
        self.geometry(data.shape[1:])
        return Tensor(np.ascontiguousarray(data, dtype=self.dtype))

    def attention_modules(self) -> list:
        return []

    def forward(self, channels, v: Optional[MarkerAvailability] = None) -> Tensor:
        raise NotImplementedError

    __call__ = forward


class UNet(SegmentationModel):
    """Valid-convolution UNet; optional SE/ME modules after blocks at I/E/B/D."""

    def __init__(self, cfg: ModelConfig):
        if cfg.attention == "SE" and "I" in cfg.placements:
            raise ContractError("SE attention at the input placement 'I' is unsupported")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        reg = self.registry = ParameterRegistry(cfg.dtype)
        self._attn = {}
        cin = cfg.in_channels

        if cfg.attention == "ME" and "I" in cfg.placements:
            self._attn["input"] = MEModule.create(reg, "input.me", cfg.K, cin, rng, cfg.me_bias)

        self.enc = []
        for lvl in range(cfg.depth):
            f = cfg.filters(lvl)
            self.enc.append(self._block(f"enc{lvl}", cin, f, rng, "E"))
            cin = f
        f = cfg.filters(cfg.depth)
        self.bottleneck = self._block("bottleneck", cin, f, rng, "B")
        cin = f
        self.dec = []
        for lvl in reversed(range(cfg.depth)):
            f = cfg.filters(lvl)
            up_w = reg.add(f"dec{lvl}.up.w", xavier_uniform(rng, (cin, f, 2, 2), cin * 4, f * 4, reg.dtype))
            up_b = reg.add(f"dec{lvl}.up.b", np.zeros(f))
            block = self._block(f"dec{lvl}", 2 * f, f, rng, "D")
            self.dec.append((up_w, up_b, block))
            cin = f
        self.head = _Conv(reg, "head", cin, cfg.n_out, 1, rng, init="xavier")

    def _block(self, name, cin, cout, rng, placement):
        c1 = _Conv(self.registry, f"{name}.conv1", cin, cout, 3, rng)
        c2 = _Conv(self.registry, f"{name}.conv2", cout, cout, 3, rng)
        attn = None
        if placement in self.cfg.placements:
            if self.cfg.attention == "SE":
                attn = SEModule.create(self.registry, f"{name}.se", cout, rng)
            elif self.cfg.attention == "ME":
                attn = MEModule.create(self.registry, f"{name}.me", self.cfg.K, cout, rng, self.cfg.me_bias)
        if attn is not None:
            self._attn[name] = attn
        return c1, c2, attn

    def attention_modules(self) -> list:
        """``(name, module)`` pairs ordered from input/highest resolution downward."""
        order = ["input"] + [f"enc{l}" for l in range(self.cfg.depth)] + ["bottleneck"] + \
            [f"dec{l}" for l in reversed(range(self.cfg.depth))]
        return [(n, self._attn[n]) for n in order if n in self._attn]

    def _apply_block(self, block, x, v):
        c1, c2, attn = block
        x = relu(c2(relu(c1(x))))
        if isinstance(attn, SEModule):
            x = se_forward(x, attn)
        elif isinstance(attn, MEModule):
            x = me_forward(x, v, attn)
        return x

    def forward(self, channels, v: Optional[MarkerAvailability] = None) -> Tensor:
        x = self._as_input(channels)
        if v is None:
            v = MarkerAvailability.full(self.cfg.K)
        if self.cfg.variant == "UB-member":
            sel = [k for k in range(self.cfg.K) if (self.cfg.subset >> k) & 1]
            x = Tensor(np.ascontiguousarray(x.data[sel]))
        if "input" in self._attn:
            x = me_forward(x, v, self._attn["input"])
        skips = []
        for block in self.enc:
            x = self._apply_block(block, x, v)
            skips.append(x)
            x, _ = maxpool2(x)
        x = self._apply_block(self.bottleneck, x, v)
        for (up_w, up_b, block), skip in zip(self.dec, reversed(skips)):
            x = upconv2(x, up_w, up_b)
            x = concat_channels(skip, x)
            x = self._apply_block(block, x, v)
        return self.head(x)

    __call__ = forward


def hemis_abstraction(features) -> Tensor:
    """Mean and population std across available backends: ``n x [F,h,w] -> [2F,h,w]``."""
    return moments(list(features))


class HeMIS(SegmentationModel):
    """Per-marker two-conv backends fused by moments, then a three-conv frontend."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        reg = self.registry = ParameterRegistry(cfg.dtype)
        f = cfg.filters(0)
        self.backends = []
        for k in range(cfg.K):
            self.backends.append((_Conv(reg, f"backend{k + 1}.conv1", 1, f, 3, rng),
                                  _Conv(reg, f"backend{k + 1}.conv2", f, f, 3, rng)))
        self.front1 = _Conv(reg, "frontend.conv1", 2 * f, 2 * f, 3, rng)
        self.front2 = _Conv(reg, "frontend.conv2", 2 * f, 2 * f, 3, rng)
        self.head = _Conv(reg, "frontend.head", 2 * f, cfg.n_out, 1, rng, init="xavier")

    def backend_features(self, channels, v: MarkerAvailability) -> list:
        x = self._as_input(channels)
        v.require_nonempty()
        feats = []
        for k in v.markers:
            c1, c2 = self.backends[k - 1]
            xk = Tensor(np.ascontiguousarray(x.data[k - 1:k]))
            feats.append(relu(c2(relu(c1(xk)))))
        return feats

    def frontend(self, fused: Tensor) -> Tensor:
        return self.head(relu(self.front2(relu(self.front1(fused)))))

    def forward(self, channels, v: Optional[MarkerAvailability] = None) -> Tensor:
        if v is None:
            v = MarkerAvailability.full(self.cfg.K)
        return self.frontend(hemis_abstraction(self.backend_features(channels, v)))

    __call__ = forward


def build_model(cfg: ModelConfig) -> SegmentationModel:
    cfg.validate()
    if cfg.is_hemis:
        if cfg.attention != "none":
            raise ContractError("HeMIS variants do not take attention modules")
        return HeMIS(cfg)
    return UNet(cfg)


def forward(model: SegmentationModel, channels, v: Optional[MarkerAvailability] = None) -> Tensor:
    return model.forward(channels, v)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _paths(prefix):
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + ".meta.json"), prefix.with_name(prefix.name + ".weights.bin")


def save_checkpoint(model: SegmentationModel, prefix, **extra) -> tuple:
    """Write ``<prefix>.meta.json`` and ``<prefix>.weights.bin`` (little-endian f32)."""
    meta_path, weights_path = _paths(prefix)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "msme-checkpoint",
        "version": 1,
        "config": model.cfg.to_dict(),
        "registry": [{"name": p.name, "shape": list(p.shape)} for p in model.registry],
    }
    meta.update(extra)
    blob = b"".join(np.ascontiguousarray(p.tensor.data, dtype="<f4").tobytes() for p in model.registry)
    weights_path.write_bytes(blob)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta_path, weights_path


def load_checkpoint(prefix):
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    meta_path, weights_path = _paths(prefix)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_model(cfg)
    entries = meta["registry"]
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    raw = weights_path.read_bytes()
    if len(raw) != expected:
        raise CorruptionError(f"{weights_path}: expected {expected} bytes from registry, found {len(raw)}")
    names = [p.name for p in model.registry]
    if names != [e["name"] for e in entries]:
        raise CorruptionError(f"{meta_path}: registry order does not match the rebuilt model")
    flat = np.frombuffer(raw, dtype="<f4")
    values, offset = [], 0
    for e in entries:
        n = int(np.prod(e["shape"]))
        values.append(flat[offset:offset + n].reshape(e["shape"]))
        offset += n
    model.registry.restore(values)
    return model, meta


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------


@dataclass
class ComplexityReport:
    parameters: int
    forward_seconds_per_batch: float
    peak_memory_bytes: int
    input_size: tuple = field(default=())
    batch_size: int = 2

    def as_row(self) -> dict:
        return {
            "parameters": self.parameters,
            "forward_ms_per_batch": round(self.forward_seconds_per_batch * 1e3, 3),
            "peak_memory_mb": round(self.peak_memory_bytes / 2 ** 20, 3),
        }


def complexity_report(model: SegmentationModel, input_size: Optional[int] = None,
                      batches: int = 20, batch_size: int = 2, seed: int = 0) -> ComplexityReport:
    """Parameter count, median forward time per batch, and a memory estimate.

    The memory figure is parameters plus every activation a training step
    keeps alive for the backward pass.
    """
    if input_size is None:
        input_size = next(g.input_size[0] for g in valid_sizes(model.cfg, 512)
                          if g.output_size[0] >= 16)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((model.cfg.K, input_size, input_size)).astype(model.dtype)
    v = MarkerAvailability.full(model.cfg.K)
    model.forward(x, v)
    times = []
    for _ in range(max(batches, 20)):
        t0 = time.perf_counter()
        for _ in range(batch_size):
            model.forward(x, v)
        times.append(time.perf_counter() - t0)
    with Tape() as tape:
        model.forward(x, v)
    activ = sum(n.output.data.nbytes for n in tape.nodes)
    params = sum(p.tensor.data.nbytes for p in model.registry)
    return ComplexityReport(model.parameter_count(), statistics.median(times),
                            params + batch_size * activ, (input_size, input_size), batch_size)
