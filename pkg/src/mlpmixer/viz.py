"""Export token-mixing units and stem projection units as 8-bit PGM images."""

from __future__ import annotations

import math
import os

import numpy as np

from .model import MixerConfig, MixerParams


def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def to_uint8(grid: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255]; a constant grid maps to mid-gray 128."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(grid.shape, 128, dtype=np.uint8)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)


def frequency_score(grid: np.ndarray) -> float:
    """Mean absolute difference between neighbouring cells (both axes)."""
    diffs = []
    if grid.shape[0] > 1:
        diffs.append(np.abs(np.diff(grid, axis=0)).ravel())
    if grid.shape[1] > 1:
        diffs.append(np.abs(np.diff(grid, axis=1)).ravel())
    return float(np.concatenate(diffs).mean()) if diffs else 0.0


def display_order(units: np.ndarray, grid_shape: tuple[int, int]) -> list[int]:
    """Low-frequency units first, with units of opposing phase shown side by side.

    Pairs are matched globally, most negative cosine first, so a unit and its
    exact negation always end up adjacent. Pairs and leftover singles are then
    ordered by their lowest frequency score.
    """
    n = len(units)
    scores = [frequency_score(u.reshape(grid_shape)) for u in units]
    norms = np.linalg.norm(units, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (units @ units.T) / np.outer(safe, safe)
    iu, ju = np.triu_indices(n, k=1)
    partner = [-1] * n
    for t in np.lexsort((ju, iu, cos[iu, ju])):
        i, j = int(iu[t]), int(ju[t])
        if cos[i, j] >= 0:
            break
        if partner[i] < 0 and partner[j] < 0:
            partner[i], partner[j] = j, i
    groups = []
    for i in range(n):
        j = partner[i]
        if j < 0:
            groups.append((i,))
        elif i < j:
            groups.append(tuple(sorted((i, j), key=lambda u: (scores[u], u))))
    groups.sort(key=lambda g: (scores[g[0]], g[0]))
    return [u for g in groups for u in g]


def contact_sheet(tiles: list[np.ndarray], gap: int = 1) -> np.ndarray:
    n = len(tiles)
    per_row = math.ceil(math.sqrt(n))
    rows = math.ceil(n / per_row)
    th, tw = tiles[0].shape
    sheet = np.zeros((rows * (th + gap) - gap, per_row * (tw + gap) - gap), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, per_row)
        sheet[r * (th + gap):r * (th + gap) + th, c * (tw + gap):c * (tw + gap) + tw] = tile
    return sheet


def export_token_units(params: MixerParams, config: MixerConfig, block_idx: int, out_dir: str) -> list[str]:
    """One PGM per hidden unit of the block's token-mixing MLP (rows of w1 on the patch grid),
    named by display position, plus a contact sheet."""
    if not 0 <= block_idx < config.num_blocks:
        raise IndexError(f"block {block_idx} out of range for {config.num_blocks} blocks")
    if config.variant != "standard":
        raise ValueError("unit export supports the standard variant only")
    w1 = np.asarray(params[f"block{block_idx}.w1"], dtype=np.float64)
    grid = config.grid
    os.makedirs(out_dir, exist_ok=True)
    paths, tiles = [], []
    for pos, unit in enumerate(display_order(w1, grid)):
        tile = to_uint8(w1[unit].reshape(grid))
        path = os.path.join(out_dir, f"block{block_idx}_unit{pos:04}.pgm")
        write_pgm(path, tile)
        paths.append(path)
        tiles.append(tile)
    sheet = os.path.join(out_dir, f"block{block_idx}_sheet.pgm")
    write_pgm(sheet, contact_sheet(tiles))
    return paths + [sheet]


def stem_unit_grids(params: MixerParams, config: MixerConfig) -> np.ndarray:
    """Columns of the stem kernel as P x P maps, averaged over input channels: (C, P, P)."""
    p, ch = config.patch, config.image[2]
    w = np.asarray(params["stem_w"], dtype=np.float64)
    return w.T.reshape(-1, p, p, ch).mean(axis=-1)


def export_stem_units(params: MixerParams, config: MixerConfig, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths, tiles = [], []
    for idx, grid in enumerate(stem_unit_grids(params, config)):
        tile = to_uint8(grid)
        path = os.path.join(out_dir, f"stem_unit{idx:04}.pgm")
        write_pgm(path, tile)
        paths.append(path)
        tiles.append(tile)
    sheet = os.path.join(out_dir, "stem_sheet.pgm")
    write_pgm(sheet, contact_sheet(tiles))
    return paths + [sheet]
