"""Pad / decompose / stitch for whole-slice inference with valid-conv networks.

Output tiles are laid at stride ``output_size``; the last tile on each axis
is shifted back to end at the slice border and the region it shares with its
predecessor is averaged on stitching. Input patches are the output tiles
dilated by the margin inside a zero-padded copy of the slice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError


def tile_origins(length: int, tile: int) -> list:
    if length < tile:
        raise GeometryError(f"extent {length} is smaller than one output tile ({tile})")
    origins = list(range(0, length - tile + 1, tile))
    if origins[-1] + tile < length:
        origins.append(length - tile)
    return origins


def _tail_band(origins, tile):
    if len(origins) > 1 and origins[-2] + tile > origins[-1]:
        return origins[-1], origins[-2] + tile
    return None


@dataclass
class PatchGrid:
    margin: int
    input_size: tuple
    output_size: tuple
    shape: tuple            # (Z, H, W)
    origins: list           # (z, y, x) of each output tile, slice-major then row-major
    tail_overlap_regions: list  # (y0, y1, x0, x1) rectangles averaged per slice

    @property
    def n_tiles(self) -> int:
        return len(self.origins)

    def coverage(self) -> np.ndarray:
        """How many output tiles cover each pixel of one slice."""
        H, W = self.shape[1:]
        oh, ow = self.output_size
        count = np.zeros((H, W), dtype=np.int32)
        for z, y, x in self.origins:
            if z == 0:
                count[y:y + oh, x:x + ow] += 1
        return count

    def averaged_mask(self) -> np.ndarray:
        H, W = self.shape[1:]
        m = np.zeros((H, W), dtype=bool)
        for y0, y1, x0, x1 in self.tail_overlap_regions:
            m[y0:y1, x0:x1] = True
        return m


def make_grid(shape, geometry) -> PatchGrid:
    """Tile layout for a ``(Z,H,W)`` volume and a network geometry."""
    Z, H, W = shape
    oh, ow = geometry.output_size
    ys, xs = tile_origins(H, oh), tile_origins(W, ow)
    origins = [(z, y, x) for z in range(Z) for y in ys for x in xs]
    regions = []
    band = _tail_band(ys, oh)
    if band:
        regions.append((band[0], band[1], 0, W))
    band = _tail_band(xs, ow)
    if band:
        regions.append((0, H, band[0], band[1]))
    return PatchGrid(geometry.margin, tuple(geometry.input_size), tuple(geometry.output_size),
                     (Z, H, W), origins, regions)


def pad_volume(volume: np.ndarray, margin: int) -> np.ndarray:
    """Zero-pad the last two axes of ``[C,Z,H,W]`` by ``margin``."""
    pad = [(0, 0)] * (volume.ndim - 2) + [(margin, margin), (margin, margin)]
    return np.pad(volume, pad)


def decompose(volume, geometry):
    """Cut ``[C,Z,H,W]`` (or a SampleRecord's channels) into input patches.

    Returns ``(patches, grid)`` where ``patches[i]`` is ``[C,h_in,w_in]`` for
    ``grid.origins[i]``.
    """
    volume = getattr(volume, "channels", volume)
    if volume.ndim == 3:
        volume = volume[:, None]
    C, Z, H, W = volume.shape
    grid = make_grid((Z, H, W), geometry)
    padded = pad_volume(volume, grid.margin)
    ih, iw = grid.input_size
    patches = [np.ascontiguousarray(padded[:, z, y:y + ih, x:x + iw]) for z, y, x in grid.origins]
    return patches, grid


def output_tiles(volume: np.ndarray, grid: PatchGrid) -> list:
    """Crop ``[C,Z,H,W]`` targets (e.g. labels) at every output tile of ``grid``."""
    if volume.ndim == 3:
        volume = volume[:, None]
    oh, ow = grid.output_size
    return [np.ascontiguousarray(volume[:, z, y:y + oh, x:x + ow]) for z, y, x in grid.origins]


def stitch(outputs, grid: PatchGrid) -> np.ndarray:
    """Reassemble per-tile outputs ``[C,oh,ow]`` into ``[C,Z,H,W]``.

    ``outputs`` is a list aligned with ``grid.origins`` or a mapping keyed by
    origin. Overlaps are accumulated in grid order, so the result does not
    depend on the order tiles were produced in.
    """
    if isinstance(outputs, dict):
        missing = [o for o in grid.origins if o not in outputs]
        if missing:
            raise ContractError(f"missing {len(missing)} tile(s), first at origin {missing[0]}")
        tiles = [outputs[o] for o in grid.origins]
    else:
        tiles = list(outputs)
        if len(tiles) != grid.n_tiles:
            raise ContractError(f"expected {grid.n_tiles} tiles, got {len(tiles)}")
    first = np.asarray(tiles[0])
    if first.ndim == 2:
        tiles = [np.asarray(t)[None] for t in tiles]
        first = tiles[0]
    C = first.shape[0]
    Z, H, W = grid.shape
    oh, ow = grid.output_size
    acc = np.zeros((C, Z, H, W), dtype=np.float64)
    count = np.zeros((Z, H, W), dtype=np.int32)
    for (z, y, x), t in zip(grid.origins, tiles):
        if t.shape != (C, oh, ow):
            raise ContractError(f"tile at {(z, y, x)} has shape {t.shape}, expected {(C, oh, ow)}")
        acc[:, z, y:y + oh, x:x + ow] += t
        count[z, y:y + oh, x:x + ow] += 1
    out = acc / count
    return out.astype(first.dtype, copy=False)
