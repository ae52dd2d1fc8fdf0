"""Sample records, the on-disk dataset container, and synthetic data.

Container layout (one directory)::

    manifest.json            version, num_markers, marker_names, classes, samples
    <id>_channels.bin        little-endian f32, [marker][z][y][x]
    <id>_labels.bin          u8 in {0,1}, [class][z][y][x]     (optional)
    <id>_tissue.bin          u8, [z][y][x]                     (optional)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, CorruptionError, DegenerateChannelError

MANIFEST = "manifest.json"


@dataclass
class SampleRecord:
    id: str
    channels: np.ndarray                       # f32 [K,Z,H,W]; absent markers are zero
    available_markers: tuple                   # 1-based marker indices
    resolution_um: float = 1.0
    labels: Optional[np.ndarray] = None        # u8 [C,Z,H,W]
    tissue: Optional[np.ndarray] = None        # u8 [Z,H,W]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.available_markers = tuple(sorted(int(m) for m in self.available_markers))
        if not self.available_markers:
            raise ContractError(f"sample {self.id!r} has no available markers")
        if self.channels.ndim != 4:
            raise ContractError(f"sample {self.id!r}: channels must be [K,Z,H,W], got {self.channels.shape}")

    @property
    def K(self) -> int:
        return self.channels.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(self.channels.shape[1:])

    @property
    def availability_mask(self) -> int:
        return sum(1 << (m - 1) for m in self.available_markers)


@dataclass
class Dataset:
    num_markers: int
    marker_names: list
    classes: list
    samples: list

    def by_id(self, sample_id) -> SampleRecord:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def class_fractions(self) -> np.ndarray:
        """Per-sample, per-class foreground fraction of tissue (or all) pixels."""
        rows = []
        for s in self.samples:
            denom = s.tissue.sum() if s.tissue is not None else np.prod(s.shape)
            rows.append([s.labels[c].sum() / denom for c in range(len(self.classes))])
        return np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def _read_exact(path: Path, dtype, shape):
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    raw = path.read_bytes()
    if len(raw) != expected:
        raise CorruptionError(f"{path.name}: expected {expected} bytes for shape {list(shape)}, "
                              f"found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_dataset(dataset: Dataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        entry = {
            "id": s.id,
            "shape": list(s.shape),
            "resolution_um": float(s.resolution_um),
            "available_markers": list(s.available_markers),
            "channels_file": f"{s.id}_channels.bin",
        }
        (root / entry["channels_file"]).write_bytes(np.ascontiguousarray(s.channels, dtype="<f4").tobytes())
        if s.labels is not None:
            entry["labels_file"] = f"{s.id}_labels.bin"
            (root / entry["labels_file"]).write_bytes(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
        if s.tissue is not None:
            entry["tissue_file"] = f"{s.id}_tissue.bin"
            (root / entry["tissue_file"]).write_bytes(np.ascontiguousarray(s.tissue, dtype=np.uint8).tobytes())
        entries.append(entry)
    manifest = {
        "version": 1,
        "num_markers": dataset.num_markers,
        "marker_names": list(dataset.marker_names),
        "classes": list(dataset.classes),
        "samples": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return root


def read_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptionError(f"no {MANIFEST} in {root}") from None
    if manifest.get("version") != 1:
        raise CorruptionError(f"unsupported manifest version {manifest.get('version')!r}")
    K = int(manifest["num_markers"])
    C = len(manifest["classes"])
    samples = []
    for e in manifest["samples"]:
        Z, H, W = (int(v) for v in e["shape"])
        channels = _read_exact(root / e["channels_file"], "<f4", (K, Z, H, W)).astype(np.float32)
        avail = tuple(int(m) for m in e["available_markers"])
        for k in range(1, K + 1):
            if k not in avail:
                channels[k - 1] = 0
        labels = tissue = None
        if e.get("labels_file"):
            labels = _read_exact(root / e["labels_file"], np.uint8, (C, Z, H, W))
        if e.get("tissue_file"):
            tissue = _read_exact(root / e["tissue_file"], np.uint8, (Z, H, W))
        samples.append(SampleRecord(e["id"], channels, avail, float(e["resolution_um"]), labels, tissue))
    return Dataset(K, list(manifest["marker_names"]), list(manifest["classes"]), samples)


# ---------------------------------------------------------------------------
# resampling and standardization
# ---------------------------------------------------------------------------


def _bilinear_axis(a, axis, n_out, scale):
    n_in = a.shape[axis]
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - t) + np.take(a, hi, axis=axis) * t


def _nearest_axis(a, axis, n_out, scale):
    n_in = a.shape[axis]
    src = np.minimum(np.floor((np.arange(n_out) + 0.5) / scale).astype(int), n_in - 1)
    return np.take(a, src, axis=axis)


def resample(sample: SampleRecord, target_um: float) -> SampleRecord:
    """Rescale in-plane axes to ``target_um`` pixel size.

    Channels use bilinear interpolation with pixel-center alignment; labels
    and tissue use nearest neighbour so they stay binary.
    """
    if target_um <= 0 or sample.resolution_um <= 0:
        raise ContractError(f"resolutions must be positive, got {sample.resolution_um} -> {target_um}")
    if target_um == sample.resolution_um:
        return replace(sample, channels=sample.channels.copy(),
                       labels=None if sample.labels is None else sample.labels.copy(),
                       tissue=None if sample.tissue is None else sample.tissue.copy())
    factor = sample.resolution_um / target_um
    H, W = sample.shape[1:]
    Ho, Wo = max(1, int(round(H * factor))), max(1, int(round(W * factor)))
    ch = sample.channels.astype(np.float64)
    ch = _bilinear_axis(_bilinear_axis(ch, -2, Ho, Ho / H), -1, Wo, Wo / W).astype(np.float32)

    def nearest(v):
        if v is None:
            return None
        return _nearest_axis(_nearest_axis(v, -2, Ho, Ho / H), -1, Wo, Wo / W)

    return replace(sample, channels=ch, labels=nearest(sample.labels), tissue=nearest(sample.tissue),
                   resolution_um=float(target_um))


def channel_statistics(sample: SampleRecord) -> dict:
    """Mean and std per available marker, over tissue pixels when a mask exists."""
    region = sample.tissue.astype(bool) if sample.tissue is not None else None
    stats = {}
    for m in sample.available_markers:
        values = sample.channels[m - 1].astype(np.float64)
        values = values[region] if region is not None and region.any() else values.reshape(-1)
        mu, sd = float(values.mean()), float(values.std())
        if not sd > 0:
            raise DegenerateChannelError(f"sample {sample.id!r}: marker {m} has zero variance")
        stats[m] = (mu, sd)
    return stats


def standardize(sample: SampleRecord) -> SampleRecord:
    """Zero-mean, unit-variance per available marker using whole-sample statistics."""
    stats = channel_statistics(sample)
    out = np.zeros_like(sample.channels, dtype=np.float32)
    for m, (mu, sd) in stats.items():
        out[m - 1] = ((sample.channels[m - 1].astype(np.float64) - mu) / sd).astype(np.float32)
    meta = dict(sample.meta, standardization=stats)
    return replace(sample, channels=out, meta=meta)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class MarkerSpec:
    """How one marker renders: per-class contrast plus tissue, texture and noise."""

    contrast: dict = field(default_factory=dict)   # class index (1-based) -> amplitude
    tissue_level: float = 0.0
    texture: float = 0.0
    noise: float = 0.0


@dataclass
class SyntheticConfig:
    K: int = 3
    C: int = 2
    n_samples: int = 8
    size: int = 104
    z: int = 1
    densities: tuple = (0.10, 0.008)
    markers: tuple = ()
    psf_sigma: float = 0.7
    tissue_fraction: float = 0.9
    widths: tuple = (1.5, 1.0)          # disc radius per class
    turn_sd: tuple = (0.35, 0.08)       # heading jitter per step per class
    seed: int = 0
    resolution_um: float = 1.0
    marker_names: tuple = ()
    class_names: tuple = ("sinusoids", "arteries")

    def __post_init__(self):
        if len(self.markers) != self.K:
            raise ContractError(f"need one MarkerSpec per marker ({self.K}), got {len(self.markers)}")
        if len(self.densities) != self.C:
            raise ContractError(f"need one density per class ({self.C})")
        for c in range(1, self.C + 1):
            if not any(m.contrast.get(c, 0) > 0 for m in self.markers):
                raise ContractError(f"no marker renders class {c} with positive contrast")


def preset_config(name: str = "two-class", K: int = 3, **overrides) -> SyntheticConfig:
    """Named synthetic setups.

    ``two-class``: class 1 is a dense tortuous network, class 2 is sparse and
    straight. With K=5 the markers are: tissue stain, two class-1 specific,
    one class-2 specific, one shared. With K=3: class-1 only, class 2 strong
    over a moderate class 1, and both classes on a bright tissue background.
    """
    if name != "two-class":
        raise ContractError(f"unknown preset {name!r}")
    if K == 5:
        markers = (
            MarkerSpec({}, tissue_level=1.0, texture=0.6, noise=0.5),
            MarkerSpec({1: 1.0}, tissue_level=0.2, texture=0.3, noise=0.6),
            MarkerSpec({1: 0.9}, tissue_level=0.2, texture=0.3, noise=0.6),
            MarkerSpec({2: 1.2}, tissue_level=0.2, texture=0.3, noise=0.5),
            MarkerSpec({1: 0.5, 2: 0.5}, tissue_level=0.5, texture=0.4, noise=0.5),
        )
        names = ("tissue", "specific1a", "specific1b", "specific2", "shared")
    elif K == 3:
        markers = (
            MarkerSpec({1: 1.0}, tissue_level=0.2, texture=0.3, noise=0.4),
            MarkerSpec({1: 0.7, 2: 1.2}, tissue_level=0.2, texture=0.3, noise=0.4),
            MarkerSpec({1: 0.8, 2: 0.5}, tissue_level=1.0, texture=0.5, noise=0.4),
        )
        names = ("specific1", "specific2", "shared")
    else:
        markers = tuple(MarkerSpec({1 + k % 2: 1.0}, tissue_level=0.3, texture=0.3, noise=0.6)
                        for k in range(K))
        names = tuple(f"marker{k + 1}" for k in range(K))
    base = dict(K=K, markers=markers, marker_names=names)
    base.update(overrides)
    return SyntheticConfig(**base)


def _disc(radius):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= radius * radius + 1e-9


def _curve(rng, shape, length, turn_sd):
    H, W = shape
    y, x = rng.uniform(0, H), rng.uniform(0, W)
    heading = rng.uniform(0, 2 * np.pi)
    pts = []
    for _ in range(int(length)):
        pts.append((y, x))
        heading += rng.normal(0, turn_sd)
        y += np.sin(heading)
        x += np.cos(heading)
        if not (0 <= y < H and 0 <= x < W):
            heading += np.pi
            y = min(max(y, 0), H - 1)
            x = min(max(x, 0), W - 1)
    p = np.asarray(pts)
    return np.clip(np.round(p).astype(int), 0, [H - 1, W - 1])


def _grow_structure(rng, tissue, density, radius, turn_sd, exclude=None):
    """Draw random curves inside ``tissue`` until their area reaches ``density``."""
    H, W = tissue.shape
    target = density * tissue.sum()
    disc = _disc(radius)
    mask = np.zeros((H, W), dtype=bool)
    allowed = tissue.astype(bool) if exclude is None else tissue.astype(bool) & ~exclude
    if target <= 0:
        return mask
    for _ in range(10000):
        if mask.sum() >= target:
            break
        length = rng.integers(max(8, H // 4), max(9, H // 2) + 1)
        pts = _curve(rng, (H, W), length, turn_sd)
        for _ in range(6):
            line = np.zeros((H, W), dtype=bool)
            line[pts[:, 0], pts[:, 1]] = True
            cand = mask | (ndimage.binary_dilation(line, structure=disc) & allowed)
            if cand.sum() <= 1.1 * target or len(pts) <= 4:
                break
            pts = pts[: len(pts) // 2]
        mask = cand
    return mask


def _tissue_mask(rng, shape, fraction):
    if fraction >= 1.0:
        return np.ones(shape, dtype=bool)
    H, W = shape
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(H, W) / 8)
    yy, xx = np.mgrid[0:H, 0:W]
    radial = np.hypot((yy - H / 2) / H, (xx - W / 2) / W)
    score = field_ / (field_.std() + 1e-12) * 0.3 - radial * 4
    thresh = np.quantile(score, 1 - fraction)
    return score >= thresh


def _texture(rng, shape):
    t = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0)
    return t / (t.std() + 1e-12)


def render_slice(rng, cfg: SyntheticConfig):
    """One slice: ``(channels [K,H,W], labels [C,H,W], tissue [H,W])``."""
    shape = (cfg.size, cfg.size)
    tissue = _tissue_mask(rng, shape, cfg.tissue_fraction)
    masks = [None] * cfg.C
    taken = np.zeros(shape, dtype=bool)
    for c in reversed(range(cfg.C)):
        radius = cfg.widths[c] if c < len(cfg.widths) else 1.0
        turn = cfg.turn_sd[c] if c < len(cfg.turn_sd) else 0.2
        masks[c] = _grow_structure(rng, tissue, cfg.densities[c], radius, turn, exclude=taken)
        taken |= masks[c]
    labels = np.stack(masks).astype(np.uint8)

    def psf(a):
        return ndimage.gaussian_filter(a, cfg.psf_sigma) if cfg.psf_sigma > 0 else a

    tissue_f = psf(tissue.astype(np.float64))
    class_f = [psf(m.astype(np.float64)) for m in masks]
    channels = np.zeros((cfg.K,) + shape, dtype=np.float64)
    for k, spec in enumerate(cfg.markers):
        ch = channels[k]
        if spec.tissue_level:
            ch += spec.tissue_level * tissue_f
        for c, amp in spec.contrast.items():
            ch += amp * class_f[c - 1]
        if spec.texture:
            ch += spec.texture * _texture(rng, shape) * tissue_f
        if spec.noise:
            ch += spec.noise * rng.standard_normal(shape)
    return channels.astype(np.float32), labels, tissue.astype(np.uint8)


def generate_synthetic(cfg: SyntheticConfig, available=None) -> Dataset:
    """Render ``cfg.n_samples`` samples; ``available`` optionally maps index -> markers."""
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for i in range(cfg.n_samples):
        srng = np.random.default_rng(rng.integers(2 ** 63))
        slices = [render_slice(srng, cfg) for _ in range(cfg.z)]
        channels = np.stack([s[0] for s in slices], axis=1)
        labels = np.stack([s[1] for s in slices], axis=1)
        tissue = np.stack([s[2] for s in slices], axis=0)
        markers = tuple(range(1, cfg.K + 1))
        if available is not None and i in available:
            markers = tuple(sorted(available[i]))
            for k in range(1, cfg.K + 1):
                if k not in markers:
                    channels[k - 1] = 0
        samples.append(SampleRecord(f"s{i + 1:02d}", channels, markers, cfg.resolution_um, labels, tissue,
                                    meta={"densities": list(cfg.densities)}))
    names = list(cfg.marker_names) or [f"marker{k + 1}" for k in range(cfg.K)]
    return Dataset(cfg.K, names, list(cfg.class_names[:cfg.C]), samples)
