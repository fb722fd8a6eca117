"""3D scalar volumes: intensity normalization and raw-file persistence."""
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from medimp.exceptions import VolumeError
from medimp.storage import atomic_write_bytes, atomic_write_json

logger = logging.getLogger(__name__)

STANDARDIZE_EPS = 1e-8
CLIP_RANGE = 5.0


@dataclass(frozen=True)
class Volume:
    """Voxels stored (z, y, x); ``spacing`` follows the same axis order."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalized: bool = False

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise VolumeError(f"volume needs 3 axes, got shape {self.voxels.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        """(Nx, Ny, Nz)."""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


def normalize_volume(v: Volume) -> Volume:
    """Standardize, clip standard scores to [-5, 5] and map them linearly onto [0, 1]."""
    if v.normalized:
        raise VolumeError("volume is already normalized")
    x = v.voxels.astype(np.float64)
    z = (x - x.mean()) / (x.std() + STANDARDIZE_EPS)
    z = np.clip(z, -CLIP_RANGE, CLIP_RANGE)
    return replace(v, voxels=(z + CLIP_RANGE) / (2 * CLIP_RANGE), normalized=True)


def save_volume(path: str | Path, v: Volume) -> Path:
    """Write ``<path>.raw`` (little-endian float32, x fastest) and a ``<path>.json`` sidecar."""
    base = Path(path)
    raw_path, meta_path = base.with_suffix(".raw"), base.with_suffix(".json")
    atomic_write_bytes(raw_path, np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())
    atomic_write_json(
        meta_path,
        {"extents": list(v.extents), "spacing": list(v.spacing), "normalized": v.normalized},
    )
    logger.debug("Saved volume %s with extents %s", raw_path, v.extents)
    return raw_path


def load_volume(path: str | Path) -> Volume:
    base = Path(path)
    raw_path, meta_path = base.with_suffix(".raw"), base.with_suffix(".json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        payload = raw_path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeError(f"Cannot read volume {raw_path}: {e}")
    nx, ny, nz = meta["extents"]
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise VolumeError(f"volume {raw_path} holds {len(payload)} bytes, expected {expected} for extents {meta['extents']}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx).astype(np.float64)
    return Volume(voxels=voxels, spacing=tuple(meta["spacing"]), normalized=bool(meta["normalized"]))
