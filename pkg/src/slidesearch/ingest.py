"""Patch-feature grids: file ingestion, synthetic slides, 4-connectivity.

A slide is represented only by the feature vectors of its tissue patches
laid out on a 2-D window lattice. Background windows are omitted entirely,
so a grid with ``rows x cols`` geometry may hold fewer than ``rows*cols``
patches.

Feature file format (little-endian, extension ``.pgf``):

    magic   b"PGF1"
    header  u32 rows, u32 cols, u32 n_patches, u32 feature_dim
    records n_patches x { u32 row, u32 col, f32 tumor_ratio, feature_dim x f32 }

A plain-text ``manifest.txt`` next to the feature files maps each file name
to its slide id and records the connectivity convention (adjacency is
defined on window lattice indices, not on pixel overlap).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

FEATURE_MAGIC = b"PGF1"
MANIFEST_NAME = "manifest.txt"
_HEADER = struct.Struct("<4sIIII")


@dataclass
class PatchGrid:
    """All tissue patches of one slide with their features and positions.

    ``features`` is ``n_patches x feature_dim`` float64; ``grid_pos`` is
    ``n_patches x 2`` int64 (row, col); ``tumor_ratio`` is per-patch in [0, 1].
    """

    wsi_id: str
    rows: int
    cols: int
    features: np.ndarray
    grid_pos: np.ndarray
    tumor_ratio: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"grid {self.wsi_id}: non-positive shape {self.rows}x{self.cols}")
        if self.features.ndim != 2:
            raise DataError(f"grid {self.wsi_id}: features must be 2-D")
        n = self.n_patches
        if self.grid_pos.shape != (n, 2):
            raise DataError(f"grid {self.wsi_id}: grid_pos shape {self.grid_pos.shape} != ({n}, 2)")
        if self.tumor_ratio.shape != (n,):
            raise DataError(f"grid {self.wsi_id}: tumor_ratio length {self.tumor_ratio.shape} != {n}")
        rs, cs = self.grid_pos[:, 0], self.grid_pos[:, 1]
        if n and (rs.min() < 0 or rs.max() >= self.rows or cs.min() < 0 or cs.max() >= self.cols):
            bad = int(np.argmax((rs < 0) | (rs >= self.rows) | (cs < 0) | (cs >= self.cols)))
            raise DataError(
                f"grid {self.wsi_id}: grid_pos out of bounds at record {bad}: "
                f"({rs[bad]}, {cs[bad]}) not in {self.rows}x{self.cols}"
            )
        seen = set(map(tuple, self.grid_pos.tolist()))
        if len(seen) != n:
            raise DataError(f"grid {self.wsi_id}: duplicate grid positions")
        if not np.all(np.isfinite(self.features)):
            bad = int(np.argmax(~np.isfinite(self.features).all(axis=1)))
            raise DataError(f"grid {self.wsi_id}: non-finite feature value at record {bad}")
        if n and (self.tumor_ratio.min() < 0.0 or self.tumor_ratio.max() > 1.0):
            bad = int(np.argmax((self.tumor_ratio < 0.0) | (self.tumor_ratio > 1.0)))
            raise DataError(
                f"grid {self.wsi_id}: tumor_ratio out of [0, 1] at record {bad}: "
                f"{self.tumor_ratio[bad]}"
            )


@dataclass(frozen=True)
class PatchAdjacency:
    """Undirected 4-connectivity over patch indices, stored as (i, j) pairs with i < j."""

    n: int
    pairs: frozenset

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=np.float64)
        for i, j in self.pairs:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a

    def neighbors(self) -> list:
        """Neighbor index lists, one per patch."""
        nbr = [[] for _ in range(self.n)]
        for i, j in self.pairs:
            nbr[i].append(j)
            nbr[j].append(i)
        return nbr


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry and statistics of a generated slide.

    Tumor blobs are axis-aligned rectangles: interior patches carry
    tumor_ratio 1.0, the one-patch border ring 0.5, everything else 0.0.
    Class means are separated by ``delta`` along a seeded random direction;
    per-dimension Gaussian noise has scale ``sigma``. Blob sides are drawn
    uniformly from [blob_min, blob_max] (blob_max 0 means half the grid
    side), clipped to the grid.
    """

    rows: int
    cols: int
    feature_dim: int
    blobs: int = 1
    delta: float = 6.0
    sigma: float = 1.0
    blob_min: int = 3
    blob_max: int = 0
    class_seed: int = 0  # seeds the tumor direction, shared by every slide of a cohort

    def validate(self) -> None:
        if self.rows * self.cols <= 0:
            raise ConfigError(f"synthetic spec: zero grid area ({self.rows}x{self.cols})")
        if self.feature_dim < 1:
            raise ConfigError(f"synthetic spec: feature_dim must be >= 1, got {self.feature_dim}")
        if self.blobs < 0:
            raise ConfigError(f"synthetic spec: blobs must be >= 0, got {self.blobs}")
        if self.delta < 0:
            raise ConfigError(f"synthetic spec: delta must be >= 0, got {self.delta}")
        if self.sigma <= 0:
            raise ConfigError(f"synthetic spec: sigma must be > 0, got {self.sigma}")
        if self.blob_min < 1:
            raise ConfigError(f"synthetic spec: blob_min must be >= 1, got {self.blob_min}")
        if self.blob_max and self.blob_max < self.blob_min:
            raise ConfigError(
                f"synthetic spec: blob_max {self.blob_max} below blob_min {self.blob_min}"
            )

    @classmethod
    def from_mapping(cls, kv: dict) -> "SyntheticSpec":
        try:
            spec = cls(
                rows=int(kv["rows"]),
                cols=int(kv["cols"]),
                feature_dim=int(kv["feature_dim"]),
                blobs=int(kv.get("blobs", 1)),
                delta=float(kv.get("delta", 6.0)),
                sigma=float(kv.get("sigma", 1.0)),
                blob_min=int(kv.get("blob_min", 3)),
                blob_max=int(kv.get("blob_max", 0)),
                class_seed=int(kv.get("class_seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"synthetic spec: missing key {exc.args[0]}") from None
        except ValueError as exc:
            raise ConfigError(f"synthetic spec: {exc}") from None
        spec.validate()
        return spec


def generate_synthetic_wsi(spec: SyntheticSpec, seed: int) -> PatchGrid:
    """Deterministic synthetic slide: pure function of (spec, seed).

    All patches are tissue (full grid). Feature values are rounded to
    float32 at the source so that file round-trips are bit-exact.
    """
    spec.validate()
    rng = np.random.default_rng(seed)

    # The tumor-class direction is a cohort property: every slide generated
    # from the same spec shares it, so cross-slide retrieval is meaningful.
    direction = np.random.default_rng(spec.class_seed).normal(size=spec.feature_dim)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        direction = np.zeros(spec.feature_dim)
        direction[0] = 1.0
    else:
        direction = direction / norm

    side_cap = max(spec.blob_min, min(spec.rows, spec.cols) // 2) if spec.blob_max == 0 else spec.blob_max
    ratio = np.zeros((spec.rows, spec.cols), dtype=np.float64)
    for _ in range(spec.blobs):
        bh = min(spec.rows, int(rng.integers(spec.blob_min, side_cap + 1)))
        bw = min(spec.cols, int(rng.integers(spec.blob_min, side_cap + 1)))
        r0 = int(rng.integers(0, spec.rows - bh + 1))
        c0 = int(rng.integers(0, spec.cols - bw + 1))
        blob = np.full((bh, bw), 0.5)
        if bh > 2 and bw > 2:
            blob[1:-1, 1:-1] = 1.0
        ratio[r0 : r0 + bh, c0 : c0 + bw] = np.maximum(ratio[r0 : r0 + bh, c0 : c0 + bw], blob)

    # Every blob patch (core and border) draws from the tumor distribution;
    # the fractional ratio on the border is annotation, not feature mixing.
    means = (ratio > 0.0)[:, :, None] * (spec.delta * direction)
    noise = rng.normal(size=(spec.rows, spec.cols, spec.feature_dim))
    feats = means + spec.sigma * noise

    rr, cc = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    grid = PatchGrid(
        wsi_id=f"synth-{seed}",
        rows=spec.rows,
        cols=spec.cols,
        features=feats.reshape(-1, spec.feature_dim).astype(np.float32).astype(np.float64),
        grid_pos=np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64),
        tumor_ratio=ratio.ravel().astype(np.float32).astype(np.float64),
    )
    grid.validate()
    return grid


def patch_adjacency(grid: PatchGrid) -> PatchAdjacency:
    """4-connectivity pairs: patches whose lattice coordinates differ by one step."""
    grid.validate()
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(grid.grid_pos)}
    pairs = set()
    for i, (r, c) in enumerate(grid.grid_pos):
        for dr, dc in ((1, 0), (0, 1)):
            j = index.get((int(r) + dr, int(c) + dc))
            if j is not None:
                pairs.add((min(i, j), max(i, j)))
    return PatchAdjacency(n=grid.n_patches, pairs=frozenset(pairs))


def save_patch_grid(grid: PatchGrid, path) -> None:
    grid.validate()
    rec = np.dtype(
        [("row", "<u4"), ("col", "<u4"), ("ratio", "<f4"), ("feat", "<f4", (grid.feature_dim,))]
    )
    body = np.empty(grid.n_patches, dtype=rec)
    body["row"] = grid.grid_pos[:, 0]
    body["col"] = grid.grid_pos[:, 1]
    body["ratio"] = grid.tumor_ratio
    body["feat"] = grid.features
    header = _HEADER.pack(FEATURE_MAGIC, grid.rows, grid.cols, grid.n_patches, grid.feature_dim)
    Path(path).write_bytes(header + body.tobytes())


def load_patch_grid(path, wsi_id: str | None = None) -> PatchGrid:
    """Read a ``.pgf`` feature file. The slide id comes from the sidecar
    manifest when present, else from the file stem."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, rows, cols, n_patches, feature_dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if feature_dim < 1:
        raise DataError(f"{path}: header feature_dim must be >= 1, got {feature_dim}")

    rec = np.dtype([("row", "<u4"), ("col", "<u4"), ("ratio", "<f4"), ("feat", "<f4", (feature_dim,))])
    body = raw[_HEADER.size :]
    if len(body) != n_patches * rec.itemsize:
        have = len(body) // rec.itemsize
        raise DataError(f"{path}: header declares {n_patches} records but file contains {have}")
    records = np.frombuffer(body, dtype=rec)

    if wsi_id is None:
        wsi_id = read_manifest(path.parent).get(path.name, path.stem)
    grid = PatchGrid(
        wsi_id=wsi_id,
        rows=int(rows),
        cols=int(cols),
        features=records["feat"].astype(np.float64).reshape(n_patches, feature_dim),
        grid_pos=np.stack([records["row"], records["col"]], axis=1).astype(np.int64),
        tumor_ratio=records["ratio"].astype(np.float64),
    )
    grid.validate()
    return grid


def write_manifest(directory, entries: dict) -> None:
    """Write ``manifest.txt``: one ``<file name>\\t<wsi id>`` line per feature file."""
    lines = ["# slidesearch feature manifest", "# connectivity=window-lattice"]
    lines += [f"{name}\t{wsi_id}" for name, wsi_id in sorted(entries.items())]
    (Path(directory) / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        return {}
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected '<file>\\t<wsi id>'")
        entries[parts[0]] = parts[1]
    return entries
